//! Relational objectives. None of them references a data distribution:
//! every loss compares a network's output with its own batch, with the
//! other generator's batch, or with the discriminator's view of either.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Scalar, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("cosine distance is undefined for a zero vector")]
    ZeroVector,
    #[error("batch diversity needs at least 2 images, got {0}")]
    BatchTooSmall(usize),
}

macro_rules! keyword_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.to_ascii_lowercase().as_str() {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!(
                        "unknown {} `{s}`, expected one of: {}",
                        stringify!($name),
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

keyword_enum!(
    /// How two embedding vectors are compared.
    DistanceKind {
        L1 => "l1",
        L2 => "l2",
        Cosine => "cosine",
    }
);

keyword_enum!(
    DiscriminatorMode {
        Classifier => "classifier",
        Diametric => "diametric",
    }
);

keyword_enum!(
    GeneratorObjective {
        SwapClassification => "swap_classification",
        EmbeddingProximity => "embedding_proximity",
    }
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GeneratorId {
    G1,
    G2,
}

impl GeneratorId {
    /// Classifier label: G1 batches are 0, G2 batches are 1.
    pub fn label(self) -> f64 {
        match self {
            GeneratorId::G1 => 0.0,
            GeneratorId::G2 => 1.0,
        }
    }

    pub fn other(self) -> GeneratorId {
        match self {
            GeneratorId::G1 => GeneratorId::G2,
            GeneratorId::G2 => GeneratorId::G1,
        }
    }
}

/// Which objectives drive the discriminator and the generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossArrangement {
    pub discriminator_mode: DiscriminatorMode,
    pub generator_objective: GeneratorObjective,
    pub distance_g1: DistanceKind,
    pub distance_g2: DistanceKind,
    pub diversity_weight: f32,
    pub diversity_margin: f32,
    /// Key into [`DIVERSITY_MEASURES`].
    pub diversity_measure: String,
}

impl Default for LossArrangement {
    fn default() -> Self {
        Self {
            discriminator_mode: DiscriminatorMode::Classifier,
            generator_objective: GeneratorObjective::SwapClassification,
            distance_g1: DistanceKind::L2,
            distance_g2: DistanceKind::Cosine,
            diversity_weight: 1.0,
            diversity_margin: 0.1,
            diversity_measure: MEAN_COLOR_L1.to_string(),
        }
    }
}

impl LossArrangement {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("diversity_weight", self.diversity_weight),
            ("diversity_margin", self.diversity_margin),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !DIVERSITY_MEASURES.contains(&self.diversity_measure.as_str()) {
            return Err(format!(
                "unknown diversity measure `{}`, expected one of: {}",
                self.diversity_measure,
                DIVERSITY_MEASURES.join(", ")
            ));
        }
        Ok(())
    }

    pub fn distance_for(&self, id: GeneratorId) -> DistanceKind {
        match id {
            GeneratorId::G1 => self.distance_g1,
            GeneratorId::G2 => self.distance_g2,
        }
    }
}

pub const MEAN_COLOR_L1: &str = "mean_color_l1";

/// Names of the registered batch-diversity measures.
pub const DIVERSITY_MEASURES: &[&str] = &[MEAN_COLOR_L1];

pub type DiversityFn<T> = fn(&mut Graph<T>, Var) -> Result<Var, LossError>;

pub fn diversity_measure<T: Scalar>(name: &str) -> Option<DiversityFn<T>> {
    match name {
        MEAN_COLOR_L1 => Some(color_diversity::<T>),
        _ => None,
    }
}

fn check_nonzero_rows<T: Scalar>(g: &Graph<T>, x: Var) -> Result<(), LossError> {
    let shape = g.shape(x);
    let inner: usize = shape[1..].iter().product();
    let zero = g
        .value(x)
        .data()
        .chunks(inner.max(1))
        .any(|row| row.iter().all(|v| *v == T::zero()));
    if zero {
        return Err(LossError::ZeroVector);
    }
    Ok(())
}

const L2_EPS: f64 = 1e-24;

/// Row-wise distance between `[b, n]` tensors, giving `[b, 1]`.
///
/// L1 is the mean absolute difference, L2 is
/// `sqrt(mean sq diff + 1e-24) - 1e-12` and cosine is `1 - cos(a, b)` clamped at zero.
pub fn row_distance<T: Scalar>(
    g: &mut Graph<T>,
    a: Var,
    b: Var,
    kind: DistanceKind,
) -> Result<Var, LossError> {
    let n = g.shape(a)[1..].iter().product::<usize>();
    let inv_n = T::one() / T::lit(n as f64);
    match kind {
        DistanceKind::L1 => {
            let d = g.sub(a, b)?;
            let d = g.abs(d);
            let s = g.row_sum(d)?;
            Ok(g.scale(s, inv_n))
        }
        DistanceKind::L2 => {
            let d = g.sub(a, b)?;
            let d = g.square(d);
            let s = g.row_sum(d)?;
            let m = g.scale(s, inv_n);
            // sqrt(m + e) - sqrt(e) is exactly zero at a == b, keeps a finite
            // gradient there, and is still a metric.
            let m = g.add_scalar(m, T::lit(L2_EPS));
            let r = g.sqrt(m);
            Ok(g.add_scalar(r, -T::lit(L2_EPS).sqrt()))
        }
        DistanceKind::Cosine => {
            check_nonzero_rows(g, a)?;
            check_nonzero_rows(g, b)?;
            let ab = g.mul(a, b)?;
            let dot = g.row_sum(ab)?;
            let aa = g.square(a);
            let aa = g.row_sum(aa)?;
            let bb = g.square(b);
            let bb = g.row_sum(bb)?;
            let norms = g.mul(aa, bb)?;
            let norms = g.sqrt(norms);
            let cos = g.div(dot, norms)?;
            let neg = g.neg(cos);
            let d = g.add_scalar(neg, T::one());
            Ok(g.relu(d))
        }
    }
}

/// Distance between two vectors of equal length, as a scalar.
pub fn distance<T: Scalar>(
    g: &mut Graph<T>,
    a: Var,
    b: Var,
    kind: DistanceKind,
) -> Result<Var, LossError> {
    let n = g.value(a).len();
    let a2 = g.reshape(a, [1, n])?;
    let m = g.value(b).len();
    let b2 = g.reshape(b, [1, m])?;
    let d = row_distance(g, a2, b2, kind)?;
    Ok(g.reshape(d, Vec::<usize>::new())?)
}

/// Mean over all unordered image pairs of the L1 distance between the
/// pairs' mean colours. Input is `[b, 3, R, R]` with `b >= 2`.
pub fn color_diversity<T: Scalar>(g: &mut Graph<T>, batch: Var) -> Result<Var, LossError> {
    let b = g.shape(batch)[0];
    if b < 2 {
        return Err(LossError::BatchTooSmall(b));
    }
    let colors = g.spatial_mean(batch)?;
    let (left, right): (Vec<usize>, Vec<usize>) = (0..b)
        .flat_map(|i| (i + 1..b).map(move |j| (i, j)))
        .unzip();
    let a = g.select_rows(colors, &left)?;
    let c = g.select_rows(colors, &right)?;
    let d = g.sub(a, c)?;
    let d = g.abs(d);
    // Equal channel count per pair, so the grand mean is the mean of
    // per-pair channel means.
    Ok(g.mean(d))
}

/// `max(0, margin + diversity(other) - diversity(self))`, with `other`
/// treated as a constant.
pub fn diversity_competition_loss<T: Scalar>(
    g: &mut Graph<T>,
    self_batch: Var,
    other_batch: Var,
    margin: T,
) -> Result<Var, LossError> {
    diversity_competition_loss_with(g, color_diversity::<T>, self_batch, other_batch, margin)
}

pub fn diversity_competition_loss_with<T: Scalar>(
    g: &mut Graph<T>,
    measure: DiversityFn<T>,
    self_batch: Var,
    other_batch: Var,
    margin: T,
) -> Result<Var, LossError> {
    let other = g.detach(other_batch);
    if g.shape(self_batch)[0] < 2 {
        return Err(LossError::BatchTooSmall(g.shape(self_batch)[0]));
    }
    let mine = measure(g, self_batch)?;
    let theirs = measure(g, other)?;
    let gap = g.sub(theirs, mine)?;
    let gap = g.add_scalar(gap, margin);
    Ok(g.relu(gap))
}

/// Mean binary cross-entropy of `sigmoid(logits)` against a constant label,
/// computed as `softplus(x) - y * x`.
pub fn bce_with_logits<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    target: T,
) -> Result<Var, LossError> {
    let sp = g.softplus(logits);
    let per = if target == T::zero() {
        sp
    } else {
        let yx = g.scale(logits, target);
        g.sub(sp, yx)?
    };
    Ok(g.mean(per))
}

/// Pushes a generator's batch toward the *other* generator's label.
pub fn swap_classification_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    identity: GeneratorId,
) -> Result<Var, LossError> {
    bce_with_logits(g, logits, T::lit(identity.other().label()))
}

/// Mean distance from each of `self_emb`'s rows to the centroid of the
/// (constant) `other_emb` batch.
pub fn embedding_proximity_loss<T: Scalar>(
    g: &mut Graph<T>,
    self_emb: Var,
    other_emb: Var,
    kind: DistanceKind,
) -> Result<Var, LossError> {
    let other = g.detach(other_emb);
    let centroid = g.col_mean(other)?;
    let b = g.shape(self_emb)[0];
    let target = g.repeat_rows(centroid, b)?;
    let d = row_distance(g, self_emb, target, kind)?;
    Ok(g.mean(d))
}

/// Mean BCE over both batches, label 0 for G1's logits and 1 for G2's.
pub fn discriminator_classifier_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits_g1: Var,
    logits_g2: Var,
) -> Result<Var, LossError> {
    let n1 = g.value(logits_g1).len() as f64;
    let n2 = g.value(logits_g2).len() as f64;
    let l1 = bce_with_logits(g, logits_g1, T::lit(GeneratorId::G1.label()))?;
    let l2 = bce_with_logits(g, logits_g2, T::lit(GeneratorId::G2.label()))?;
    let l1 = g.scale(l1, T::lit(n1 / (n1 + n2)));
    let l2 = g.scale(l2, T::lit(n2 / (n1 + n2)));
    Ok(g.add(l1, l2)?)
}

/// `(mean(logits), -mean(logits))`: exact negations, so propagating both on
/// one batch cancels to a zero gradient.
pub fn diametric_pair<T: Scalar>(g: &mut Graph<T>, logits: Var) -> (Var, Var) {
    let pos = g.mean(logits);
    let neg = g.neg(pos);
    (pos, neg)
}
