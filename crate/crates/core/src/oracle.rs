//! Registry of gradient checks covering every tape op, every loss and the
//! networks end to end. Each case is evaluated in `f64` against central
//! finite differences.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::losses::{self, DistanceKind, GeneratorId, LossError};
use crate::networks::{
    discriminator_forward, generate, mapping_forward, DiscriminatorParams, GeneratorParams,
    GrowthState, NetConfig, NetworkError,
};
use crate::tensor::gradcheck::{grad_check_inputs, Coords};
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Every case must stay below this relative error.
pub const TOLERANCE: f64 = 1e-3;

/// Finite-difference step for single ops.
pub const OP_EPS: f64 = 1e-3;

/// Smaller step for whole networks, so a probe rarely straddles a leaky
/// kink somewhere deep in the graph.
pub const NETWORK_EPS: f64 = 1e-6;

/// Coordinates sampled per seed for the network cases.
const NETWORK_COORDS: usize = 48;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseKind {
    Op,
    Loss,
    Network,
}

type Objective = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, OracleError>>;

struct Built {
    inputs: Vec<Tensor<f64>>,
    coords: Coords,
    eps: f64,
    f: Objective,
}

pub struct Case {
    pub name: &'static str,
    pub kind: CaseKind,
    build: fn(u64) -> Built,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub kind: CaseKind,
    pub max_rel_err: f64,
    pub worst_seed: u64,
    pub coords_checked: usize,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

impl Case {
    /// Records the case's graph once and returns the op names it used.
    pub fn ops_used(&self, seed: u64) -> Result<Vec<&'static str>, OracleError> {
        let built = (self.build)(seed);
        let mut g = Graph::new();
        let vars: Vec<Var> = built.inputs.iter().map(|t| g.param(t.clone())).collect();
        (built.f)(&mut g, &vars)?;
        Ok(g.recorded_ops().collect())
    }

    /// Max relative error over `seeds`. With `fault` set, that op's
    /// backward pass is deliberately skewed.
    pub fn run(&self, seeds: &[u64], fault: Option<&str>) -> Result<CaseResult, OracleError> {
        let mut result = CaseResult {
            name: self.name,
            kind: self.kind,
            max_rel_err: 0.0,
            worst_seed: seeds.first().copied().unwrap_or(0),
            coords_checked: 0,
        };
        for &seed in seeds {
            let built = (self.build)(seed);
            let f = &built.f;
            let report = grad_check_inputs(
                |g: &mut Graph<f64>, vars: &[Var]| {
                    if let Some(op) = fault {
                        g.inject_backward_fault(op)?;
                    }
                    f(g, vars)
                },
                &built.inputs,
                built.eps,
                &built.coords,
                |_, _, a| a,
            )?;
            result.coords_checked += report.checked;
            if report.max_rel_err > result.max_rel_err || report.max_rel_err.is_nan() {
                result.max_rel_err = report.max_rel_err;
                result.worst_seed = seed;
            }
        }
        Ok(result)
    }
}

/// Runs every registered case over `seeds`.
pub fn run_all(seeds: &[u64], fault: Option<&str>) -> Result<Vec<CaseResult>, OracleError> {
    registry().iter().map(|c| c.run(seeds, fault)).collect()
}

/// `count` consecutive seeds starting at `base`.
pub fn seeds_from(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[gap, 1]` and random sign, keeping clear of
/// kinks at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn offset(a: &Tensor<f64>, d: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_fn(a.shape().to_vec(), |i| a.data()[i] + d.data()[i])
}

/// Reduces `y` to a scalar through a fixed random projection so that every
/// output coordinate gets a distinct upstream gradient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, OracleError> {
    let mut r = rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let c = uniform(&mut r, g.shape(y), -1.0, 1.0);
    let c = g.constant(c);
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

fn op_case(inputs: Vec<Tensor<f64>>, f: Objective) -> Built {
    Built {
        inputs,
        coords: Coords::All,
        eps: OP_EPS,
        f,
    }
}

macro_rules! unary_case {
    ($seed:ident, $input:expr, |$g:ident, $x:ident| $body:expr) => {{
        let mut r = rng($seed);
        let input = $input(&mut r);
        op_case(
            vec![input],
            Box::new(move |$g: &mut Graph<f64>, v: &[Var]| {
                let $x = v[0];
                let y = $body;
                project($g, y, $seed)
            }),
        )
    }};
}

fn sym(shape: &'static [usize]) -> impl Fn(&mut ChaCha8Rng) -> Tensor<f64> {
    move |r| uniform(r, shape, -1.0, 1.0)
}

fn case_matmul(seed: u64) -> Built {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[4, 2], -1.0, 1.0);
    op_case(
        vec![a, b],
        Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, seed)
        }),
    )
}

fn case_add_row_bias(seed: u64) -> Built {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[4], -1.0, 1.0);
    op_case(
        vec![x, b],
        Box::new(move |g, v| {
            let y = g.add_row_bias(v[0], v[1])?;
            project(g, y, seed)
        }),
    )
}

fn case_conv2d(seed: u64) -> Built {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
    let w = uniform(&mut r, &[4, 3, 3, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[4], -1.0, 1.0);
    op_case(
        vec![x, w, b],
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            project(g, y, seed)
        }),
    )
}

fn case_conv1x1(seed: u64) -> Built {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
    let w = uniform(&mut r, &[5, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[5], -1.0, 1.0);
    op_case(
        vec![x, w, b],
        Box::new(move |g, v| {
            let y = g.conv1x1(v[0], v[1], v[2])?;
            project(g, y, seed)
        }),
    )
}

fn case_upsample(seed: u64) -> Built {
    unary_case!(seed, sym(&[2, 2, 3, 3]), |g, x| g.upsample_nearest2x(x)?)
}

fn case_avgpool(seed: u64) -> Built {
    unary_case!(seed, sym(&[2, 2, 4, 4]), |g, x| g.avgpool2x(x)?)
}

fn case_leaky_relu(seed: u64) -> Built {
    unary_case!(seed, |r: &mut ChaCha8Rng| away_from_zero(r, &[4, 5], 0.05), |g, x| g
        .leaky_relu(x, 0.2))
}

fn case_sigmoid(seed: u64) -> Built {
    unary_case!(seed, |r: &mut ChaCha8Rng| uniform(r, &[4, 5], -4.0, 4.0), |g, x| g.sigmoid(x))
}

fn case_tanh(seed: u64) -> Built {
    unary_case!(seed, |r: &mut ChaCha8Rng| uniform(r, &[4, 5], -3.0, 3.0), |g, x| g.tanh(x))
}

fn case_softplus(seed: u64) -> Built {
    unary_case!(seed, |r: &mut ChaCha8Rng| uniform(r, &[4, 5], -6.0, 6.0), |g, x| g.softplus(x))
}

fn case_abs(seed: u64) -> Built {
    unary_case!(seed, |r: &mut ChaCha8Rng| away_from_zero(r, &[4, 5], 0.05), |g, x| g.abs(x))
}

fn case_square(seed: u64) -> Built {
    unary_case!(seed, sym(&[4, 5]), |g, x| g.square(x))
}

fn case_sqrt(seed: u64) -> Built {
    unary_case!(seed, |r: &mut ChaCha8Rng| uniform(r, &[4, 5], 0.2, 2.0), |g, x| g.sqrt(x))
}

fn case_pixel_norm(seed: u64) -> Built {
    unary_case!(seed, sym(&[2, 4, 3, 3]), |g, x| g.pixel_norm(x)?)
}

fn case_modulate(seed: u64) -> Built {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 3, 2, 2], -1.0, 1.0);
    let s = uniform(&mut r, &[2, 6], -1.0, 1.0);
    op_case(
        vec![x, s],
        Box::new(move |g, v| {
            let y = g.modulate(v[0], v[1])?;
            project(g, y, seed)
        }),
    )
}

fn binary_case(
    seed: u64,
    rhs: fn(&mut ChaCha8Rng) -> Tensor<f64>,
    op: fn(&mut Graph<f64>, Var, Var) -> Result<Var, TensorError>,
) -> Built {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let b = rhs(&mut r);
    op_case(
        vec![a, b],
        Box::new(move |g, v| {
            let y = op(g, v[0], v[1])?;
            project(g, y, seed)
        }),
    )
}

fn rhs_plain(r: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(r, &[3, 4], -1.0, 1.0)
}

fn rhs_nonzero(r: &mut ChaCha8Rng) -> Tensor<f64> {
    away_from_zero(r, &[3, 4], 0.5)
}

fn case_add(seed: u64) -> Built {
    binary_case(seed, rhs_plain, Graph::add)
}

fn case_sub(seed: u64) -> Built {
    binary_case(seed, rhs_plain, Graph::sub)
}

fn case_mul(seed: u64) -> Built {
    binary_case(seed, rhs_plain, Graph::mul)
}

fn case_div(seed: u64) -> Built {
    binary_case(seed, rhs_nonzero, Graph::div)
}

fn case_scale(seed: u64) -> Built {
    unary_case!(seed, sym(&[3, 4]), |g, x| g.scale(x, -0.7))
}

fn case_add_scalar(seed: u64) -> Built {
    unary_case!(seed, sym(&[3, 4]), |g, x| g.add_scalar(x, 0.3))
}

fn case_sum(seed: u64) -> Built {
    unary_case!(seed, sym(&[3, 4]), |g, x| {
        let sq = g.square(x);
        g.sum(sq)
    })
}

fn case_mean(seed: u64) -> Built {
    unary_case!(seed, sym(&[3, 4]), |g, x| {
        let sq = g.square(x);
        g.mean(sq)
    })
}

fn case_variance(seed: u64) -> Built {
    unary_case!(seed, sym(&[3, 4]), |g, x| g.variance(x))
}

fn case_spatial_mean(seed: u64) -> Built {
    unary_case!(seed, sym(&[2, 3, 4, 4]), |g, x| g.spatial_mean(x)?)
}

fn case_row_sum(seed: u64) -> Built {
    unary_case!(seed, sym(&[3, 2, 2]), |g, x| g.row_sum(x)?)
}

fn case_col_mean(seed: u64) -> Built {
    unary_case!(seed, sym(&[3, 4]), |g, x| g.col_mean(x)?)
}

fn case_repeat_rows(seed: u64) -> Built {
    unary_case!(seed, sym(&[1, 5]), |g, x| g.repeat_rows(x, 4)?)
}

fn case_select_rows(seed: u64) -> Built {
    unary_case!(seed, sym(&[3, 4]), |g, x| g.select_rows(x, &[2, 0, 2, 1])?)
}

fn case_reshape(seed: u64) -> Built {
    unary_case!(seed, sym(&[2, 6]), |g, x| g.reshape(x, [3, 4])?)
}

fn distance_case(seed: u64, kind: DistanceKind) -> Built {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[4, 6], -1.0, 1.0);
    let b = match kind {
        // Keep every coordinate difference clear of the L1 kink.
        DistanceKind::L1 => offset(&a, &away_from_zero(&mut r, &[4, 6], 0.05)),
        _ => uniform(&mut r, &[4, 6], -1.0, 1.0),
    };
    op_case(
        vec![a, b],
        Box::new(move |g, v| {
            let d = losses::row_distance(g, v[0], v[1], kind)?;
            project(g, d, seed)
        }),
    )
}

fn case_distance_l1(seed: u64) -> Built {
    distance_case(seed, DistanceKind::L1)
}

fn case_distance_l2(seed: u64) -> Built {
    distance_case(seed, DistanceKind::L2)
}

fn case_distance_cosine(seed: u64) -> Built {
    distance_case(seed, DistanceKind::Cosine)
}

fn image_batch(r: &mut ChaCha8Rng, b: usize) -> Tensor<f64> {
    uniform(r, &[b, 3, 4, 4], -1.0, 1.0)
}

fn case_color_diversity(seed: u64) -> Built {
    unary_case!(seed, |r: &mut ChaCha8Rng| image_batch(r, 4), |g, x| {
        losses::color_diversity(g, x)?
    })
}

/// Only the own batch is an input: the other batch is stop-gradient by
/// contract, so finite differences through it would disagree on purpose.
fn case_diversity_competition(seed: u64) -> Built {
    let mut r = rng(seed);
    let mine = image_batch(&mut r, 4);
    let theirs = image_batch(&mut r, 4);
    op_case(
        vec![mine],
        Box::new(move |g, v| {
            let other = g.constant(theirs.clone());
            // Large margin keeps the hinge active.
            Ok(losses::diversity_competition_loss(g, v[0], other, 5.0)?)
        }),
    )
}

fn case_swap_classification(seed: u64) -> Built {
    let mut r = rng(seed);
    let logits = uniform(&mut r, &[5, 1], -3.0, 3.0);
    let id = if seed.is_multiple_of(2) { GeneratorId::G1 } else { GeneratorId::G2 };
    op_case(
        vec![logits],
        Box::new(move |g, v| Ok(losses::swap_classification_loss(g, v[0], id)?)),
    )
}

fn proximity_case(seed: u64, kind: DistanceKind) -> Built {
    let mut r = rng(seed);
    let theirs = uniform(&mut r, &[4, 6], -1.0, 1.0);
    // Rows sit clear of the centroid so L1 never probes its kink.
    let centroid: Vec<f64> = (0..6)
        .map(|j| (0..4).map(|i| theirs.data()[i * 6 + j]).sum::<f64>() / 4.0)
        .collect();
    let base = Tensor::from_fn([4, 6], |k| centroid[k % 6]);
    let mine = offset(&base, &away_from_zero(&mut r, &[4, 6], 0.05));
    op_case(
        vec![mine],
        Box::new(move |g, v| {
            let other = g.constant(theirs.clone());
            Ok(losses::embedding_proximity_loss(g, v[0], other, kind)?)
        }),
    )
}

fn case_proximity_l1(seed: u64) -> Built {
    proximity_case(seed, DistanceKind::L1)
}

fn case_proximity_l2(seed: u64) -> Built {
    proximity_case(seed, DistanceKind::L2)
}

fn case_proximity_cosine(seed: u64) -> Built {
    proximity_case(seed, DistanceKind::Cosine)
}

fn case_classifier(seed: u64) -> Built {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[4, 1], -3.0, 3.0);
    let b = uniform(&mut r, &[3, 1], -3.0, 3.0);
    op_case(
        vec![a, b],
        Box::new(|g, v| Ok(losses::discriminator_classifier_loss(g, v[0], v[1])?)),
    )
}

fn case_diametric(seed: u64) -> Built {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[4, 1], -3.0, 3.0);
    let b = uniform(&mut r, &[4, 1], -3.0, 3.0);
    op_case(
        vec![a, b],
        Box::new(|g, v| {
            let (pos, _) = losses::diametric_pair(g, v[0]);
            let (_, neg) = losses::diametric_pair(g, v[1]);
            Ok(g.add(pos, neg)?)
        }),
    )
}

/// Up to `n` distinct `(input, index)` pairs, spread evenly over inputs.
fn sample_coords(r: &mut ChaCha8Rng, inputs: &[Tensor<f64>], n: usize) -> Coords {
    let total: usize = inputs.iter().map(Tensor::len).sum();
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let share = (n * t.len()).div_ceil(total).max(1).min(t.len());
        picks.extend(sample(r, t.len(), share).into_iter().map(|j| (i, j)));
    }
    picks.sort_unstable();
    Coords::Subset(picks)
}

fn case_mapping(seed: u64) -> Built {
    let cfg = NetConfig {
        max_stage: 0,
        channels: vec![NetConfig::default().channels[0]],
        ..NetConfig::default()
    };
    let gen = GeneratorParams::init(seed, &cfg).expect("valid config").cast::<f64>();
    let mut r = rng(seed);
    let z = uniform(&mut r, &[3, cfg.latent_dim], -2.0, 2.0);
    let mut inputs = vec![z];
    inputs.extend(gen.params().tensors().iter().cloned());
    let coords = sample_coords(&mut r, &inputs, NETWORK_COORDS);
    Built {
        inputs,
        coords,
        eps: NETWORK_EPS,
        f: Box::new(move |g, v| {
            let bound = gen.attach(&v[1..])?;
            let w = mapping_forward(g, &bound, v[0])?;
            project(g, w, seed)
        }),
    }
}

fn ensemble_case(seed: u64, cfg: NetConfig, growth: GrowthState) -> Built {
    let gen = GeneratorParams::init(seed, &cfg).expect("valid config").cast::<f64>();
    let disc = DiscriminatorParams::init(seed.wrapping_add(1), &cfg)
        .expect("valid config")
        .cast::<f64>();
    let mut r = rng(seed);
    let z = uniform(&mut r, &[2, cfg.latent_dim], -2.0, 2.0);
    let n_gen = gen.params().len();
    let mut inputs = vec![z];
    inputs.extend(gen.params().tensors().iter().cloned());
    inputs.extend(disc.params().tensors().iter().cloned());
    let coords = sample_coords(&mut r, &inputs, NETWORK_COORDS);
    Built {
        inputs,
        coords,
        eps: NETWORK_EPS,
        f: Box::new(move |g, v| {
            let gb = gen.attach(&v[1..1 + n_gen])?;
            let db = disc.attach(&v[1 + n_gen..])?;
            let images = generate(g, &gb, v[0], growth)?;
            let (logit, _) = discriminator_forward(g, &db, images, growth)?;
            Ok(g.mean(logit))
        }),
    }
}

fn case_ensemble_4x4(seed: u64) -> Built {
    let cfg = NetConfig {
        max_stage: 0,
        channels: vec![NetConfig::default().channels[0]],
        ..NetConfig::default()
    };
    ensemble_case(seed, cfg, GrowthState::settled(0))
}

fn case_ensemble_fade_8x8(seed: u64) -> Built {
    ensemble_case(seed, NetConfig::with_max_stage(1), GrowthState::new(1, 0.5))
}

macro_rules! registry {
    ($($kind:ident $name:literal => $build:ident),+ $(,)?) => {
        static REGISTRY: &[Case] = &[
            $(Case { name: $name, kind: CaseKind::$kind, build: $build }),+
        ];
    };
}

registry! {
    Op "matmul" => case_matmul,
    Op "add_row_bias" => case_add_row_bias,
    Op "conv2d" => case_conv2d,
    Op "conv1x1" => case_conv1x1,
    Op "upsample_nearest2x" => case_upsample,
    Op "avgpool2x" => case_avgpool,
    Op "leaky_relu" => case_leaky_relu,
    Op "sigmoid" => case_sigmoid,
    Op "tanh" => case_tanh,
    Op "softplus" => case_softplus,
    Op "abs" => case_abs,
    Op "square" => case_square,
    Op "sqrt" => case_sqrt,
    Op "pixel_norm" => case_pixel_norm,
    Op "modulate" => case_modulate,
    Op "add" => case_add,
    Op "sub" => case_sub,
    Op "mul" => case_mul,
    Op "div" => case_div,
    Op "scale" => case_scale,
    Op "add_scalar" => case_add_scalar,
    Op "sum" => case_sum,
    Op "mean" => case_mean,
    Op "variance" => case_variance,
    Op "spatial_mean" => case_spatial_mean,
    Op "row_sum" => case_row_sum,
    Op "col_mean" => case_col_mean,
    Op "repeat_rows" => case_repeat_rows,
    Op "select_rows" => case_select_rows,
    Op "reshape" => case_reshape,
    Loss "distance_l1" => case_distance_l1,
    Loss "distance_l2" => case_distance_l2,
    Loss "distance_cosine" => case_distance_cosine,
    Loss "color_diversity" => case_color_diversity,
    Loss "diversity_competition" => case_diversity_competition,
    Loss "swap_classification" => case_swap_classification,
    Loss "embedding_proximity_l1" => case_proximity_l1,
    Loss "embedding_proximity_l2" => case_proximity_l2,
    Loss "embedding_proximity_cosine" => case_proximity_cosine,
    Loss "discriminator_classifier" => case_classifier,
    Loss "diametric_pair" => case_diametric,
    Network "mapping" => case_mapping,
    Network "ensemble_4x4" => case_ensemble_4x4,
    Network "ensemble_fade_8x8" => case_ensemble_fade_8x8,
}

pub fn registry() -> &'static [Case] {
    REGISTRY
}
