use std::io::{self, BufRead, Write};

use serde::{Deserialize, Deserializer, Serialize};

use super::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Healthy,
    Exploding,
    Static,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Healthy => "HEALTHY",
            Status::Exploding => "EXPLODING",
            Status::Static => "STATIC",
        }
    }
}

/// Non-finite floats are written as JSON `null`; read them back as NaN.
fn nan_if_null<'de, D: Deserializer<'de>>(d: D) -> Result<f32, D::Error> {
    Ok(Option::<f32>::deserialize(d)?.unwrap_or(f32::NAN))
}

/// One line of the metrics stream.
///
/// `diversity_*` is measured on the batch each generator trained on this
/// step, so it fluctuates with sampling noise. `probe_diversity_*` is
/// measured on a fixed probe batch and only moves when the generator does.
/// `update_norm_*` is the size of the applied parameter change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub step: u64,
    pub stage: usize,
    #[serde(deserialize_with = "nan_if_null")]
    pub alpha: f32,
    #[serde(deserialize_with = "nan_if_null")]
    pub loss_d: f32,
    #[serde(deserialize_with = "nan_if_null")]
    pub loss_g1: f32,
    #[serde(deserialize_with = "nan_if_null")]
    pub loss_g2: f32,
    #[serde(deserialize_with = "nan_if_null")]
    pub grad_norm_d: f32,
    #[serde(deserialize_with = "nan_if_null")]
    pub grad_norm_g1: f32,
    #[serde(deserialize_with = "nan_if_null")]
    pub grad_norm_g2: f32,
    #[serde(deserialize_with = "nan_if_null")]
    pub update_norm_d: f32,
    #[serde(deserialize_with = "nan_if_null")]
    pub update_norm_g1: f32,
    #[serde(deserialize_with = "nan_if_null")]
    pub update_norm_g2: f32,
    #[serde(deserialize_with = "nan_if_null")]
    pub diversity_g1: f32,
    #[serde(deserialize_with = "nan_if_null")]
    pub diversity_g2: f32,
    #[serde(deserialize_with = "nan_if_null")]
    pub probe_diversity_g1: f32,
    #[serde(deserialize_with = "nan_if_null")]
    pub probe_diversity_g2: f32,
    pub status: Status,
}

impl DiagnosticsRecord {
    fn floats(&self) -> [f32; 14] {
        [
            self.alpha,
            self.loss_d,
            self.loss_g1,
            self.loss_g2,
            self.grad_norm_d,
            self.grad_norm_g1,
            self.grad_norm_g2,
            self.update_norm_d,
            self.update_norm_g1,
            self.update_norm_g2,
            self.diversity_g1,
            self.diversity_g2,
            self.probe_diversity_g1,
            self.probe_diversity_g2,
        ]
    }

    pub fn grad_norms(&self) -> [f32; 3] {
        [self.grad_norm_d, self.grad_norm_g1, self.grad_norm_g2]
    }

    pub fn update_norms(&self) -> [f32; 3] {
        [self.update_norm_d, self.update_norm_g1, self.update_norm_g2]
    }

    pub fn all_finite(&self) -> bool {
        self.floats().iter().all(|v| v.is_finite())
    }

    /// Per-record status: EXPLODING when anything is non-finite or a
    /// gradient norm crosses `explode_threshold`, otherwise HEALTHY.
    /// Stasis is a property of windows, not single records.
    pub fn classify(&self, explode_threshold: f32) -> Status {
        if !self.all_finite() || self.grad_norms().iter().any(|&g| g > explode_threshold) {
            Status::Exploding
        } else {
            Status::Healthy
        }
    }
}

fn variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Classifies a window of at least two records.
///
/// EXPLODING when any record has a non-finite value or a gradient norm above
/// `explode_threshold`. STATIC when, for both generators, the variance of the
/// probe-batch diversity is below `stasis_threshold` and the mean update norm
/// over all networks is below `stasis_threshold`. HEALTHY otherwise.
///
/// # Panics
/// If the window holds fewer than two records.
pub fn stability_diagnose(window: &[DiagnosticsRecord], config: &TrainConfig) -> Status {
    assert!(window.len() >= 2, "stability_diagnose needs at least two records");
    if window
        .iter()
        .any(|r| r.classify(config.explode_threshold) == Status::Exploding)
    {
        return Status::Exploding;
    }
    let threshold = f64::from(config.stasis_threshold);
    let frozen_g1 = variance(window.iter().map(|r| f64::from(r.probe_diversity_g1))) < threshold;
    let frozen_g2 = variance(window.iter().map(|r| f64::from(r.probe_diversity_g2))) < threshold;
    let updates: f64 = window
        .iter()
        .flat_map(|r| r.update_norms())
        .map(f64::from)
        .sum::<f64>()
        / (3 * window.len()) as f64;
    if frozen_g1 && frozen_g2 && updates < threshold {
        Status::Static
    } else {
        Status::Healthy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnoseReport {
    pub records: usize,
    pub windows: usize,
    pub window: usize,
    pub healthy: f64,
    pub exploding: f64,
    pub static_: f64,
    /// Step of the last record in the first window whose status differs
    /// from the first window's.
    pub first_transition: Option<(u64, Status, Status)>,
}

impl DiagnoseReport {
    pub fn dominant(&self) -> Status {
        let mut best = (Status::Healthy, self.healthy);
        for (s, f) in [(Status::Exploding, self.exploding), (Status::Static, self.static_)] {
            if f > best.1 {
                best = (s, f);
            }
        }
        best.0
    }
}

/// Replays [`stability_diagnose`] over every sliding window of
/// `config.diag_window` records (the whole series when it is shorter).
/// Returns `None` when there are fewer than two records.
pub fn diagnose_series(records: &[DiagnosticsRecord], config: &TrainConfig) -> Option<DiagnoseReport> {
    if records.len() < 2 {
        return None;
    }
    let window = config.diag_window.clamp(2, records.len());
    let statuses: Vec<(u64, Status)> = records
        .windows(window)
        .map(|w| (w[w.len() - 1].step, stability_diagnose(w, config)))
        .collect();
    let n = statuses.len();
    let count = |s: Status| statuses.iter().filter(|(_, x)| *x == s).count();
    let (healthy, exploding) = (count(Status::Healthy), count(Status::Exploding));
    let static_ = n - healthy - exploding;
    let first = statuses[0].1;
    let first_transition = statuses
        .iter()
        .find(|(_, s)| *s != first)
        .map(|&(step, s)| (step, first, s));
    Some(DiagnoseReport {
        records: records.len(),
        windows: n,
        window,
        healthy: healthy as f64 / n as f64,
        exploding: exploding as f64 / n as f64,
        static_: static_ as f64 / n as f64,
        first_transition,
    })
}

pub fn write_metrics_line<W: Write>(out: &mut W, record: &DiagnosticsRecord) -> io::Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("metrics line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Parses a JSONL metrics stream. Blank lines are skipped; malformed lines
/// are reported with their 1-based line number.
pub fn read_metrics<R: BufRead>(input: R) -> Result<Vec<DiagnosticsRecord>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| MetricsError::Parse {
            line: i + 1,
            source,
        })?;
        out.push(record);
    }
    Ok(out)
}
