use gpam_core::attention::{record_head, Activation, AttentionWeights, HeadNodes, LambdaNodes, Mechanism};
use gpam_core::autodiff::{fd_check, max_relative_error, NodeId, Tape, FD_STEP};
use gpam_core::numerics::{causal_mask, gaussian_matrix, Matrix, RngStream};
use proptest::prelude::*;

const TOL: f64 = 1e-6;

/// Builds `out = build(inputs)` and reduces it with fixed random row and
/// column weights, so every output entry reaches the loss with its own weight.
fn record_loss(tape: &mut Tape, inputs: &[Matrix], build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId) -> (Vec<NodeId>, NodeId) {
    let ids: Vec<NodeId> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = build(tape, &ids);
    let (r, c) = tape.value(out).shape();
    let mut rng = RngStream::new(77, (r * 131 + c) as u64);
    let left = tape.constant(gaussian_matrix(&mut rng, 1, r, 1.0));
    let right = tape.constant(gaussian_matrix(&mut rng, c, 1, 1.0));
    let lo = tape.matmul(left, out).unwrap();
    let loss = tape.matmul(lo, right).unwrap();
    (ids, loss)
}

/// Largest relative error between tape gradients and central differences
/// over every input.
fn worst_error(inputs: &[Matrix], build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) -> f64 {
    let mut tape = Tape::new();
    let (ids, loss) = record_loss(&mut tape, inputs, &build);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, id) in ids.iter().enumerate() {
        let numeric = fd_check(
            |m| {
                let mut probe = inputs.to_vec();
                probe[k] = m.clone();
                let mut t = Tape::new();
                let (_, l) = record_loss(&mut t, &probe, &build);
                t.value(l).item().unwrap()
            },
            &inputs[k],
            FD_STEP,
        );
        worst = worst.max(max_relative_error(&grads.wrt(*id), &numeric));
    }
    worst
}

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

/// Entries kept at least 0.05 away from the relu kink.
fn away_from_zero(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    mat(rows, cols).prop_map(|m| m.map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 }))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_grad(a in mat(3, 4), b in mat(4, 2)) {
        prop_assert!(worst_error(&[a, b], |t, x| t.matmul(x[0], x[1]).unwrap()) < TOL);
    }

    #[test]
    fn add_sub_grad(a in mat(3, 3), b in mat(3, 3)) {
        prop_assert!(worst_error(&[a.clone(), b.clone()], |t, x| t.add(x[0], x[1]).unwrap()) < TOL);
        prop_assert!(worst_error(&[a, b], |t, x| t.sub(x[0], x[1]).unwrap()) < TOL);
    }

    #[test]
    fn add_row_grad(a in mat(4, 3), b in mat(1, 3)) {
        prop_assert!(worst_error(&[a, b], |t, x| t.add_row(x[0], x[1]).unwrap()) < TOL);
    }

    #[test]
    fn scale_shift_grad(a in mat(2, 5), f in -3.0f64..3.0) {
        prop_assert!(worst_error(std::slice::from_ref(&a), |t, x| t.scale(x[0], f).unwrap()) < TOL);
        prop_assert!(worst_error(&[a], |t, x| t.shift(x[0], f).unwrap()) < TOL);
    }

    #[test]
    fn scalar_mul_grad(s in mat(1, 1), a in mat(3, 2)) {
        prop_assert!(worst_error(&[s, a], |t, x| t.scalar_mul(x[0], x[1]).unwrap()) < TOL);
    }

    #[test]
    fn transpose_slice_concat_grad(a in mat(4, 3), b in mat(4, 2)) {
        prop_assert!(worst_error(std::slice::from_ref(&a), |t, x| t.transpose(x[0]).unwrap()) < TOL);
        prop_assert!(worst_error(std::slice::from_ref(&a), |t, x| t.row_slice(x[0], 1, 3).unwrap()) < TOL);
        prop_assert!(worst_error(&[a, b], |t, x| t.concat_cols(vec![x[0], x[1], x[0]]).unwrap()) < TOL);
    }

    #[test]
    fn softmax_grad(a in mat(3, 5)) {
        prop_assert!(worst_error(&[a.scale(2.0)], |t, x| t.row_softmax(x[0]).unwrap()) < TOL);
    }

    #[test]
    fn relu_grad(a in away_from_zero(3, 4)) {
        prop_assert!(worst_error(&[a], |t, x| t.relu(x[0]).unwrap()) < TOL);
    }

    #[test]
    fn layer_norm_grad(a in mat(3, 6), g in mat(1, 6), b in mat(1, 6)) {
        let a = a.scale(5.0);
        prop_assert!(worst_error(&[a, g, b], |t, x| t.layer_norm(x[0], x[1], x[2]).unwrap()) < TOL);
    }

    #[test]
    fn cross_entropy_grad(a in mat(4, 5), targets in prop::collection::vec(0usize..5, 4)) {
        prop_assert!(worst_error(&[a.scale(3.0)], |t, x| t.cross_entropy(x[0], targets.clone()).unwrap()) < TOL);
    }

    #[test]
    fn sum_grad(a in mat(2, 3)) {
        prop_assert!(worst_error(&[a], |t, x| t.sum(x[0]).unwrap()) < TOL);
    }
}

/// One causal dual-branch head with trainable lambdas, a linear read-out and
/// cross-entropy; every weight and both lambdas are checked.
#[test]
fn dual_branch_head_with_cross_entropy() {
    let (t, d, d_qk, d_v, vocab) = (5, 6, 3, 4, 7);
    let mut rng = RngStream::new(5, 0);
    let x = gaussian_matrix(&mut rng, t, d, 1.0);
    let w = AttentionWeights::random(&mut rng, d, d_qk, d_v, 0.7);
    let read = gaussian_matrix(&mut rng, d_v, vocab, 0.5);
    let targets: Vec<usize> = (0..t).map(|_| rng.below(vocab)).collect();
    let inputs = vec![
        x,
        w.w_q_pos.clone(),
        w.w_k_pos.clone(),
        w.w_v.clone(),
        w.w_q_neg.clone(),
        Matrix::scalar(0.8),
        Matrix::scalar(1.3),
        read,
    ];
    for activation in [Activation::Relu, Activation::Identity] {
        let err = worst_error(&inputs, |tape, ids| {
            let head = HeadNodes {
                w_q_pos: ids[1],
                w_k_pos: ids[2],
                w_v: ids[3],
                w_q_neg: Some(ids[4]),
            };
            let mask = tape.constant(causal_mask(t));
            let lambdas = LambdaNodes::Trainable { pos: ids[5], neg: ids[6] };
            let y = record_head(tape, ids[0], &head, Mechanism::Dagpam, activation, lambdas, Some(mask)).unwrap();
            let logits = tape.matmul(y, ids[7]).unwrap();
            tape.cross_entropy(logits, targets.clone()).unwrap()
        });
        assert!(err < TOL, "{activation:?}: relative error {err}");
    }
}
