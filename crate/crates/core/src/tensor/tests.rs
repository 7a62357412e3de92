use super::gradcheck::grad_check;
use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Projects a tensor output onto fixed random weights so every output
/// element contributes to the checked scalar.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let r = random(g.shape(y), seed ^ 0x5eed);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);
}

#[test]
fn matmul_row_by_column() {
    let mut g = Graph::new();
    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[1, 1]);
    assert_eq!(g.value(c).item(), 11.0);
}

#[test]
fn matmul_shape_mismatch() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::<f32>::zeros([2, 3]));
    let b = g.constant(Tensor::<f32>::zeros([2, 3]));
    assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn matmul_gradients_match_finite_differences() {
    for seed in 0..10 {
        let b = random(&[4, 3], seed + 100);
        let err = grad_check(
            |g, a| {
                let bv = g.constant(b.clone());
                let y = g.matmul(a, bv)?;
                Ok::<_, TensorError>(g.sum(y))
            },
            &random(&[2, 4], seed),
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "seed {seed}: {err}");
        let a = random(&[2, 4], seed);
        let err = grad_check(
            |g, bv| {
                let av = g.constant(a.clone());
                let y = g.matmul(av, bv)?;
                project(g, y, seed)
            },
            &b,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn conv2d_zero_weight_gives_bias() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn([1, 2, 4, 4], |i| i as f32));
    let w = g.constant(Tensor::zeros([3, 2, 3, 3]));
    let b = g.constant(t(&[3], &[0.5, -1.0, 2.0]));
    let y = g.conv2d(x, w, b).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 4, 4]);
    for (i, plane) in g.value(y).data().chunks(16).enumerate() {
        let c = [0.5, -1.0, 2.0][i];
        assert!(plane.iter().all(|&v| v == c));
    }
}

#[test]
fn conv2d_identity_kernel() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full([1, 1, 3, 3], 1.0f32));
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let w = g.constant(t(&[1, 1, 3, 3], &k));
    let b = g.constant(t(&[1], &[0.0]));
    let y = g.conv2d(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[1.0; 9]);
}

#[test]
fn conv2d_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::<f32>::zeros([1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros([3, 1, 3, 3]));
    let b = g.constant(Tensor::zeros([3]));
    assert!(g.conv2d(x, w, b).is_err());
}

#[test]
fn conv2d_padding_sums_neighbourhood() {
    // All-ones kernel over an all-ones image counts in-bounds neighbours.
    let mut g = Graph::new();
    let x = g.constant(Tensor::full([1, 1, 3, 3], 1.0f32));
    let w = g.constant(Tensor::full([1, 1, 3, 3], 1.0));
    let b = g.constant(Tensor::zeros([1]));
    let y = g.conv2d(x, w, b).unwrap();
    assert_eq!(
        g.value(y).data(),
        &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
    );
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    for seed in 0..10 {
        let x = random(&[2, 3, 5, 5], seed);
        let w = random(&[4, 3, 3, 3], seed + 1);
        let b = random(&[4], seed + 2);
        let report = gradcheck::grad_check_inputs(
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2])?;
                project(g, y, seed)
            },
            &[x, w, b],
            1e-3,
            &gradcheck::Coords::All,
            |_, _, a| a,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "seed {seed}: {report:?}");
    }
}

#[test]
fn upsample_replicates_blocks() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = g.upsample_nearest2x(x).unwrap();
    assert_eq!(g.value(y).data(), &[1.0; 4]);

    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.upsample_nearest2x(x).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 4, 4]);
    #[rustfmt::skip]
    let expected = [
        1.0, 1.0, 2.0, 2.0,
        1.0, 1.0, 2.0, 2.0,
        3.0, 3.0, 4.0, 4.0,
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(g.value(y).data(), &expected);
}

#[test]
fn upsample_backward_of_sum_is_four() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_fn([2, 3, 2, 2], |i| i as f32));
    let y = g.upsample_nearest2x(x).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 4.0));
}

#[test]
fn scalar_activations() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1], &[-1.0]));
    let y = g.leaky_relu(x, 0.2);
    assert!((g.value(y).item() + 0.2).abs() < 1e-7);
    let z = g.constant(t(&[1], &[0.0]));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).item(), 0.5);
}

#[test]
fn softplus_is_stable_for_large_inputs() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[-100.0, 0.0, 100.0]));
    let y = g.softplus(x);
    let d = g.value(y).data();
    assert!(d[0] >= 0.0 && d[0] < 1e-30);
    assert!((d[1] - std::f32::consts::LN_2).abs() < 1e-7);
    assert_eq!(d[2], 100.0);
}

#[test]
fn pixel_norm_of_constant_channel_vector() {
    for v in [0.3f32, -2.0, 7.0] {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 8, 2, 2], v));
        let y = g.pixel_norm(x).unwrap();
        for &o in g.value(y).data() {
            assert!((o - v.signum()).abs() < 1e-5, "{v} -> {o}");
        }
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[4.0, -2.0, 0.5]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_mean_square() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let sq = g.square(x);
    let m = g.mean(sq);
    g.backward(m).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let y = g.square(x);
    assert!(matches!(g.backward(y), Err(TensorError::NotScalar(_))));
}

#[test]
fn repeated_backward_accumulates() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn constants_and_detached_nodes_get_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let c = g.constant(t(&[2], &[3.0, 4.0]));
    let d = g.detach(x);
    let a = g.mul(x, c).unwrap();
    let b = g.mul(a, d).unwrap();
    let s = g.sum(b);
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert!(g.grad(d).is_none());
    // d/dx (x * c * stopgrad(x)) = c * x
    assert_eq!(g.grad(x).unwrap(), &[3.0, 8.0]);
}

#[test]
fn non_finite_forward_is_flagged() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[1.0, 0.0]));
    let y = g.constant(t(&[2], &[1.0, 0.0]));
    assert!(g.non_finite().is_none());
    let q = g.div(x, y).unwrap();
    let (v, op) = g.non_finite().unwrap();
    assert_eq!((v, op), (q, "div"));
}

#[test]
fn ops_are_bit_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.param(random(&[2, 3, 4, 4], 7).cast::<f32>());
        let w = g.param(random(&[5, 3, 3, 3], 8).cast());
        let b = g.param(random(&[5], 9).cast());
        let y = g.conv2d(x, w, b).unwrap();
        let y = g.pixel_norm(y).unwrap();
        let m = g.variance(y);
        g.backward(m).unwrap();
        (g.value(y).clone(), g.grad(w).unwrap().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data(), b.data());
    assert_eq!(ga, gb);
}

#[test]
fn select_and_repeat_rows() {
    let mut g = Graph::new();
    let x = g.param(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let s = g.select_rows(x, &[2, 0, 2]).unwrap();
    assert_eq!(g.value(s).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    let c = g.col_mean(x).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0]);
    let r = g.repeat_rows(c, 2).unwrap();
    assert_eq!(g.shape(r), &[2, 2]);
    let total = g.sum(s);
    g.backward(total).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    assert!(g.select_rows(x, &[3]).is_err());
}

proptest! {
    #[test]
    fn upsample_then_avgpool_is_identity(
        data in proptest::collection::vec(-100.0f32..100.0, 2 * 3 * 3 * 2)
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([2, 3, 3, 2], data).unwrap());
        let up = g.upsample_nearest2x(x).unwrap();
        let down = g.avgpool2x(up).unwrap();
        prop_assert_eq!(g.value(down).data(), g.value(x).data());
    }

    #[test]
    fn finite_inputs_give_finite_grads(
        data in proptest::collection::vec(-10.0f32..10.0, 2 * 4 * 2 * 2),
        seed in 0u64..1000,
    ) {
        let mut g = Graph::new();
        let x = g.param(Tensor::new([2, 4, 2, 2], data).unwrap());
        let w = g.param(random(&[4, 4, 3, 3], seed).cast());
        let b = g.param(Tensor::zeros([4]));
        let y = g.conv2d(x, w, b).unwrap();
        let y = g.leaky_relu(y, 0.2);
        let y = g.pixel_norm(y).unwrap();
        let y = g.tanh(y);
        let m = g.mean(y);
        g.backward(m).unwrap();
        prop_assert!(g.grad(x).unwrap().iter().all(|v| v.is_finite()));
        prop_assert!(g.grad(w).unwrap().iter().all(|v| v.is_finite()));
    }
}
