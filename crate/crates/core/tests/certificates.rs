use gpam_core::collapse::{baseline_bound_certificate, dagpam_bound_certificate, precondition_instance, sandwich_bound_check};
use gpam_core::numerics::RngStream;

#[test]
fn sweep_has_no_violations() {
    let mut worst_base: f64 = 0.0;
    let mut worst_dg: f64 = 0.0;
    let mut bad = 0;
    for i in 0..100u64 {
        let mut rng = RngStream::new(2024, i);
        let lp = rng.uniform_range(0.0, 3.0);
        let ln = rng.uniform_range(0.0, 3.0);
        let (x, w) = precondition_instance(&mut rng, 6, 8, 4, 8, lp, ln).unwrap();
        let b = baseline_bound_certificate(&x, &w).unwrap();
        let g = dagpam_bound_certificate(&x, &w).unwrap();
        let s = sandwich_bound_check(&x, &w).unwrap();
        worst_base = worst_base.max(b.lhs / b.rhs);
        worst_dg = worst_dg.max(g.lhs / g.rhs);
        assert!(b.precondition_ok && g.precondition_ok);
        assert!(g.rhs >= g.baseline_rhs.unwrap() - 1e-12);
        assert_eq!(s.violations, 0);
        assert!(s.d_norm_ok);
        if b.violated() || g.violated() {
            bad += 1;
        }
    }
    println!("worst ratios baseline {worst_base} dagpam {worst_dg}");
    assert_eq!(bad, 0);
}
