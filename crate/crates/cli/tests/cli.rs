use std::path::Path;
use std::process::Command;

use gpam_lab::{run, ExperimentSpec, Kind};

const BIN: &str = env!("CARGO_BIN_EXE_gpam-lab");

/// A fast spec for `kind`: small stacks, few seeds and instances.
fn quick(kind: Kind, out: &Path) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(kind, out);
    spec.cfg.n_layers = 3;
    spec.n_seeds = 2;
    spec.seq_len = 8;
    spec.instances = 10;
    spec.repeats = 5;
    spec.steps = 3;
    spec
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn every_kind_writes_expected_headers() {
    let layer = "layer,attn_out_res_norm,attn_out_cosine,mlp_out_res_norm,mlp_out_cosine,attention_influence";
    let cases: [(Kind, &[(&str, String)]); 7] = [
        (
            Kind::Faithfulness,
            &[
                ("faithfulness_conventional.csv", layer.to_string()),
                ("faithfulness_dagpam.csv", layer.to_string()),
            ],
        ),
        (
            Kind::GradHistory,
            &[
                ("grad_history.csv", "mechanism,step,layer,mean_grad_norm".into()),
                ("loss_history.csv", "mechanism,step,mean_loss".into()),
            ],
        ),
        (Kind::JacobianCheck, &[("jacobian_check.csv", "check,rows,max_abs_error,max_rel_error,pass".into())]),
        (
            Kind::BoundCheck,
            &[(
                "bound_check.csv",
                "instance,lambda_pos,lambda_neg,max_spread,baseline_gamma,dagpam_gamma,baseline_lhs,baseline_rhs,\
                 dagpam_lhs,dagpam_rhs,sandwich_violations,d_norm_product,d_norm_bound,ok"
                    .into(),
            )],
        ),
        (Kind::LambdaSweep, &[("lambda_sweep.csv", format!("lambda_pos,lambda_neg,sigma,{layer}"))]),
        (Kind::Fig3Toy, &[("fig3_toy.csv", "lambda_pos,lambda_neg,sigma,mean_cosine,repeats".into())]),
        (
            Kind::ConditionAudit,
            &[(
                "condition_audit.csv",
                "mechanism,lambda_pos,lambda_neg,declared_lo,declared_hi,declared_sum,min_score,max_score,\
                 max_row_sum_error,finite_range_ok,fixed_sum_ok,instances"
                    .into(),
            )],
        ),
    ];
    for (kind, files) in cases {
        let dir = tempfile::tempdir().unwrap();
        let report = run(&quick(kind, dir.path())).unwrap();
        assert!(report.violations.is_empty(), "{kind:?}: {:?}", report.violations);
        for (name, expected) in files {
            assert_eq!(&header(&dir.path().join(name)), expected, "{kind:?} {name}");
        }
        let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["kind"], kind.as_str());
        let listed = manifest["files"].as_array().unwrap();
        for (name, _) in files {
            assert!(listed.iter().any(|f| f == name), "{kind:?} manifest misses {name}");
        }
    }
}

#[test]
fn row_counts_follow_the_spec() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = quick(Kind::Faithfulness, dir.path());
    spec.cfg.n_layers = 4;
    run(&spec).unwrap();
    let body = std::fs::read_to_string(dir.path().join("faithfulness_dagpam.csv")).unwrap();
    assert_eq!(body.lines().count(), 5);

    let dir = tempfile::tempdir().unwrap();
    run(&quick(Kind::BoundCheck, dir.path())).unwrap();
    let certs: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("dagpam_certificates.json")).unwrap()).unwrap();
    assert_eq!(certs.len(), 10);
    assert_eq!(certs[3]["stream"], 3);
}

#[test]
fn reruns_are_byte_identical() {
    for kind in [Kind::Faithfulness, Kind::GradHistory, Kind::BoundCheck, Kind::Fig3Toy] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = run(&quick(kind, a.path())).unwrap();
        run(&quick(kind, b.path())).unwrap();
        for f in ra.files.iter().filter(|f| f.extension().is_some_and(|e| e == "csv")) {
            let name = f.file_name().unwrap();
            assert_eq!(std::fs::read(f).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{kind:?} {name:?}");
        }
    }
}

#[test]
fn invalid_spec_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut spec = quick(Kind::Faithfulness, &out);
    spec.cfg.d_v = 7;
    assert!(run(&spec).is_err());
    assert!(!out.exists());

    let mut spec = quick(Kind::Fig3Toy, &out);
    spec.grid = Some(Vec::new());
    assert!(run(&spec).is_err());
    assert!(!out.exists());
}

#[test]
fn binary_success_and_output_listing() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args(["--kind", "fig3-toy", "--repeats", "3", "--grid", "0:0,1:1", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let listed = String::from_utf8(out.stdout).unwrap();
    assert_eq!(listed.lines().count(), 2);
    let body = std::fs::read_to_string(dir.path().join("fig3_toy.csv")).unwrap();
    assert_eq!(body.lines().count(), 3);
    assert!(body.ends_with('\n') && !body.contains('\r'));
}

#[test]
fn binary_reports_errors_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out = Command::new(BIN).args(["--kind", "fig3-toy", "--repeats", "2", "--out"]).arg(&blocker).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "failure");

    let out = Command::new(BIN).args(["--kind", "grad-history", "--task", "sorting"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["message"].as_str().unwrap().contains("sorting"));
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("stack.cfg");
    std::fs::write(&cfg, "# tiny\nn_layers = 2\nd_model = 16\nd_v = 8\nd_ff = 32\nd_qk = 4\ninit_std = 0.3\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = Command::new(BIN)
        .args(["--kind", "faithfulness", "--n-seeds", "2", "--seq-len", "6", "--layers", "3", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["spec"]["cfg"]["n_layers"], 3);
    assert_eq!(manifest["spec"]["cfg"]["d_model"], 16);
    assert_eq!(manifest["spec"]["init_std"], 0.3);
    let body = std::fs::read_to_string(out_dir.join("faithfulness_conventional.csv")).unwrap();
    assert_eq!(body.lines().count(), 4);
}
