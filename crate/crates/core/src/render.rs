//! Synchronized latent interpolation of both generators, written as a
//! numbered PPM frame sequence with G1 on the left and G2 on the right.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::networks::{generate, sample_latents, GeneratorParams, GrowthState, NetworkError};
use crate::tensor::{Graph, Tensor};
use crate::training::checkpoint::{checkpoint_read, CheckpointError};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("invalid render input: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RenderError + '_ {
    move |source| RenderError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Lerp,
    Slerp,
}

impl std::str::FromStr for Interpolation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lerp" => Ok(Interpolation::Lerp),
            "slerp" => Ok(Interpolation::Slerp),
            _ => Err(format!("unknown interpolation `{s}`, expected lerp or slerp")),
        }
    }
}

/// Paired latents for one point on the shared timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub z1: Vec<f32>,
    pub z2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderPlan {
    pub keyframes: Vec<Keyframe>,
    pub frames_per_segment: usize,
    pub interpolation: Interpolation,
    #[serde(rename = "loop")]
    pub looped: bool,
}

/// Below this angle SLERP falls back to LERP.
const SLERP_MIN_ANGLE: f64 = 1e-4;

/// `count` keyframes with independent standard-normal latents for each
/// generator, fully determined by `seed`.
pub fn sample_keyframes(seed: u64, count: usize, dim: usize) -> Result<Vec<Keyframe>, RenderError> {
    if count < 2 {
        return Err(RenderError::Invalid(format!("need at least 2 keyframes, got {count}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| Keyframe {
            z1: sample_latents(&mut rng, 1, dim).into_data(),
            z2: sample_latents(&mut rng, 1, dim).into_data(),
        })
        .collect())
}

/// Interpolates from `a` (t = 0) to `b` (t = 1). Endpoints are returned
/// exactly.
pub fn interpolate(a: &[f32], b: &[f32], t: f32, mode: Interpolation) -> Result<Vec<f32>, RenderError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(RenderError::Invalid(format!("t = {t} is outside [0, 1]")));
    }
    if a.len() != b.len() {
        return Err(RenderError::Invalid(format!(
            "latent lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if t == 0.0 {
        return Ok(a.to_vec());
    }
    if t == 1.0 {
        return Ok(b.to_vec());
    }
    let t = f64::from(t);
    let lerp = |wa: f64, wb: f64| -> Vec<f32> {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (wa * f64::from(x) + wb * f64::from(y)) as f32)
            .collect()
    };
    if mode == Interpolation::Lerp {
        return Ok(lerp(1.0 - t, t));
    }
    let norm = |v: &[f32]| v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Ok(lerp(1.0 - t, t));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    let omega = (dot / (na * nb)).clamp(-1.0, 1.0).acos();
    if omega < SLERP_MIN_ANGLE {
        return Ok(lerp(1.0 - t, t));
    }
    let s = omega.sin();
    Ok(lerp(((1.0 - t) * omega).sin() / s, (t * omega).sin() / s))
}

impl RenderPlan {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.keyframes.len() < 2 {
            return Err(RenderError::Invalid("a plan needs at least 2 keyframes".into()));
        }
        if self.frames_per_segment == 0 {
            return Err(RenderError::Invalid("frames_per_segment must be >= 1".into()));
        }
        Ok(())
    }

    pub fn segments(&self) -> usize {
        if self.looped {
            self.keyframes.len()
        } else {
            self.keyframes.len() - 1
        }
    }

    /// Every segment's frames plus the closing endpoint.
    pub fn frame_count(&self) -> usize {
        self.segments() * self.frames_per_segment + 1
    }

    /// `(from, to, t)` for frame `i`. Frame `k * frames_per_segment` sits
    /// exactly on keyframe `k`.
    pub fn position(&self, i: usize) -> (usize, usize, f32) {
        let n = self.keyframes.len();
        let fps = self.frames_per_segment;
        let (seg, t) = if i >= self.segments() * fps {
            (self.segments() - 1, 1.0)
        } else {
            (i / fps, (i % fps) as f32 / fps as f32)
        };
        (seg, (seg + 1) % n, t)
    }

    /// Both generators' latents for frame `i`, interpolated with the same t.
    pub fn latents(&self, i: usize) -> Result<(Vec<f32>, Vec<f32>), RenderError> {
        let (from, to, t) = self.position(i);
        let (a, b) = (&self.keyframes[from], &self.keyframes[to]);
        Ok((
            interpolate(&a.z1, &b.z1, t, self.interpolation)?,
            interpolate(&a.z2, &b.z2, t, self.interpolation)?,
        ))
    }

    /// SHA-256 over the plan's bit-exact contents, as hex.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.keyframes.len() as u64).to_le_bytes());
        for k in &self.keyframes {
            for v in k.z1.iter().chain(&k.z2) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.update((self.frames_per_segment as u64).to_le_bytes());
        h.update([self.interpolation as u8, u8::from(self.looped)]);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// An 8-bit RGB image, row-major and interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Frame {
    pub fn ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }
}

/// Writes `values` (RGB, row-major, each in `[0, 255]`) as binary PPM,
/// rounding to the nearest integer.
pub fn write_image(values: &[f32], width: usize, height: usize, path: &Path) -> Result<(), RenderError> {
    if values.len() != width * height * 3 {
        return Err(RenderError::Invalid(format!(
            "{} values for a {width}x{height} RGB image",
            values.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(RenderError::Invalid(format!("pixel value {v} outside [0, 255]")));
    }
    let frame = Frame {
        width,
        height,
        rgb: values.iter().map(|v| v.round() as u8).collect(),
    };
    write_frame(&frame, path)
}

pub fn write_frame(frame: &Frame, path: &Path) -> Result<(), RenderError> {
    fs::write(path, frame.ppm_bytes()).map_err(io_err(path))
}

fn to_byte(x: f32) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Places two `[1, 3, R, R]` images side by side, `a` on the left.
pub fn compose(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Frame, RenderError> {
    let r = a.shape()[2];
    if a.shape() != [1, 3, r, r] || b.shape() != a.shape() {
        return Err(RenderError::Invalid(format!(
            "cannot compose shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let plane = r * r;
    let mut rgb = Vec::with_capacity(plane * 6);
    for y in 0..r {
        for img in [a, b] {
            for x in 0..r {
                for c in 0..3 {
                    rgb.push(to_byte(img.data()[c * plane + y * r + x]));
                }
            }
        }
    }
    Ok(Frame {
        width: 2 * r,
        height: r,
        rgb,
    })
}

fn generate_one(gen: &GeneratorParams, z: &[f32], growth: GrowthState) -> Result<Tensor<f32>, RenderError> {
    let dim = gen.config().latent_dim;
    let z = Tensor::new([1, dim], z.to_vec()).map_err(|_| {
        RenderError::Invalid(format!("latent has {} values, generator expects {dim}", z.len()))
    })?;
    let mut g = Graph::new();
    let bound = gen.bind(&mut g, false);
    let z = g.constant(z);
    let img = generate(&mut g, &bound, z, growth)?;
    Ok(g.value(img).clone())
}

/// Runs both generators on their own latents and composes the result.
pub fn render_frame(
    gens: (&GeneratorParams, &GeneratorParams),
    z1: &[f32],
    z2: &[f32],
    growth: GrowthState,
) -> Result<Frame, RenderError> {
    compose(&generate_one(gens.0, z1, growth)?, &generate_one(gens.1, z2, growth)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub keyframes: usize,
    pub frames_per_segment: usize,
    pub interpolation: Interpolation,
    #[serde(rename = "loop")]
    pub looped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub keyframe_seed: u64,
    pub plan: PlanSummary,
    pub plan_hash: String,
}

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:06}.ppm")
}

/// Renders every frame of `plan` from the generators stored in
/// `checkpoint` at their final growth stage, then writes `manifest.json`.
/// The checkpoint is fully loaded before anything touches `out_dir`.
pub fn render_sequence(
    checkpoint: &Path,
    plan: &RenderPlan,
    keyframe_seed: u64,
    out_dir: &Path,
) -> Result<Manifest, RenderError> {
    plan.validate()?;
    let (g1, g2) = checkpoint_read(checkpoint)?.generators()?;
    render_with((&g1, &g2), plan, keyframe_seed, out_dir)
}

/// [`render_sequence`] for generators that are already loaded.
pub fn render_with(
    gens: (&GeneratorParams, &GeneratorParams),
    plan: &RenderPlan,
    keyframe_seed: u64,
    out_dir: &Path,
) -> Result<Manifest, RenderError> {
    plan.validate()?;
    let growth = GrowthState::settled(gens.0.config().max_stage);
    let (first1, first2) = plan.latents(0)?;
    let first = render_frame(gens, &first1, &first2, growth)?;

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_frame(&first, &out_dir.join(frame_name(0)))?;
    for i in 1..plan.frame_count() {
        let (z1, z2) = plan.latents(i)?;
        let frame = render_frame(gens, &z1, &z2, growth)?;
        write_frame(&frame, &out_dir.join(frame_name(i)))?;
    }

    let manifest = Manifest {
        frames: plan.frame_count(),
        width: first.width,
        height: first.height,
        keyframe_seed,
        plan: PlanSummary {
            keyframes: plan.keyframes.len(),
            frames_per_segment: plan.frames_per_segment,
            interpolation: plan.interpolation,
            looped: plan.looped,
        },
        plan_hash: plan.hash(),
    };
    let path = out_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    f.write_all(text.as_bytes()).map_err(io_err(&path))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(n: usize, fps: usize, looped: bool) -> RenderPlan {
        RenderPlan {
            keyframes: sample_keyframes(1, n, 4).unwrap(),
            frames_per_segment: fps,
            interpolation: Interpolation::Slerp,
            looped,
        }
    }

    #[test]
    fn keyframes_are_seeded() {
        let a = sample_keyframes(3, 5, 64).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, sample_keyframes(3, 5, 64).unwrap());
        assert_ne!(a, sample_keyframes(4, 5, 64).unwrap());
        assert_ne!(a[0].z1, a[0].z2);
        assert!(sample_keyframes(3, 1, 64).is_err());
    }

    #[test]
    fn keyframe_sampler_mean_is_near_zero() {
        let ks = sample_keyframes(11, 79, 64).unwrap();
        let values: Vec<f64> = ks
            .iter()
            .flat_map(|k| k.z1.iter().chain(&k.z2))
            .take(10_000)
            .map(|&v| f64::from(v))
            .collect();
        assert_eq!(values.len(), 10_000);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!(mean.abs() < 0.05, "{mean}");
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let a = [0.3f32, -1.7, 2.2];
        let b = [1.1f32, 0.4, -0.9];
        for mode in [Interpolation::Lerp, Interpolation::Slerp] {
            assert_eq!(interpolate(&a, &b, 0.0, mode).unwrap(), a);
            assert_eq!(interpolate(&a, &b, 1.0, mode).unwrap(), b);
            assert!(interpolate(&a, &b, 1.5, mode).is_err());
            assert!(interpolate(&a, &b, -0.1, mode).is_err());
        }
    }

    #[test]
    fn lerp_midpoint() {
        let m = interpolate(&[0.0, 0.0], &[2.0, 4.0], 0.5, Interpolation::Lerp).unwrap();
        assert_eq!(m, [1.0, 2.0]);
    }

    #[test]
    fn slerp_orthogonal_midpoint() {
        let m = interpolate(&[1.0, 0.0], &[0.0, 1.0], 0.5, Interpolation::Slerp).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((m[0] - h).abs() < 1e-6 && (m[1] - h).abs() < 1e-6);
        assert!(((m[0] * m[0] + m[1] * m[1]).sqrt() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn slerp_parallel_falls_back_to_lerp() {
        let a = [1.0f32, 2.0];
        let b = [2.0f32, 4.0];
        assert_eq!(
            interpolate(&a, &b, 0.25, Interpolation::Slerp).unwrap(),
            interpolate(&a, &b, 0.25, Interpolation::Lerp).unwrap()
        );
    }

    #[test]
    fn slerp_keeps_unit_norm() {
        let ks = sample_keyframes(5, 6, 16).unwrap();
        let unit = |v: &[f32]| {
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.iter().map(|x| x / n).collect::<Vec<_>>()
        };
        for w in ks.windows(2) {
            let (a, b) = (unit(&w[0].z1), unit(&w[1].z1));
            for k in 0..=20 {
                let m = interpolate(&a, &b, k as f32 / 20.0, Interpolation::Slerp).unwrap();
                let n = m.iter().map(|x| x * x).sum::<f32>().sqrt();
                assert!((n - 1.0).abs() < 1e-4, "{n}");
            }
        }
    }

    #[test]
    fn frame_counts() {
        assert_eq!(plan(4, 30, false).frame_count(), 91);
        assert_eq!(plan(4, 30, true).frame_count(), 121);
        assert_eq!(plan(2, 1, false).frame_count(), 2);
    }

    #[test]
    fn keyframe_positions_and_loop_closure() {
        let p = plan(3, 4, true);
        for k in 0..3 {
            let (z1, z2) = p.latents(k * 4).unwrap();
            assert_eq!(z1, p.keyframes[k].z1);
            assert_eq!(z2, p.keyframes[k].z2);
        }
        assert_eq!(p.latents(0).unwrap(), p.latents(p.frame_count() - 1).unwrap());
        let open = plan(3, 4, false);
        let last = open.latents(open.frame_count() - 1).unwrap();
        assert_eq!(last.0, open.keyframes[2].z1);
    }

    #[test]
    fn both_generators_share_t() {
        let p = plan(3, 5, false);
        for i in 0..p.frame_count() {
            let (from, to, t) = p.position(i);
            let (a, b) = (&p.keyframes[from], &p.keyframes[to]);
            let (z1, z2) = p.latents(i).unwrap();
            assert_eq!(z1, interpolate(&a.z1, &b.z1, t, p.interpolation).unwrap());
            assert_eq!(z2, interpolate(&a.z2, &b.z2, t, p.interpolation).unwrap());
        }
    }

    #[test]
    fn white_pixel_ppm_is_header_plus_three_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ppm");
        write_image(&[255.0, 255.0, 255.0], 1, 1, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 14);
        assert_eq!(&bytes[..11], b"P6\n1 1\n255\n");
        assert_eq!(&bytes[11..], [0xFF; 3]);
    }

    #[test]
    fn write_image_rejects_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        assert!(write_image(&[256.0, 0.0, 0.0], 1, 1, &path).is_err());
        assert!(write_image(&[-1.0, 0.0, 0.0], 1, 1, &path).is_err());
        assert!(write_image(&[f32::NAN, 0.0, 0.0], 1, 1, &path).is_err());
        assert!(write_image(&[0.0, 0.0], 1, 1, &path).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn ppm_round_trips_through_reference_reader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grad.ppm");
        let (w, h) = (5, 3);
        let values: Vec<f32> = (0..w * h * 3).map(|i| (i * 17 % 256) as f32).collect();
        write_image(&values, w, h, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (w as u32, h as u32));
        let back: Vec<f32> = img.into_raw().into_iter().map(f32::from).collect();
        assert_eq!(back, values);
    }

    #[test]
    fn compose_places_g1_left() {
        let a = Tensor::full([1, 3, 2, 2], -1.0);
        let b = Tensor::full([1, 3, 2, 2], 1.0);
        let f = compose(&a, &b).unwrap();
        assert_eq!((f.width, f.height), (4, 2));
        for row in f.rgb.chunks(12) {
            assert_eq!(&row[..6], [0; 6]);
            assert_eq!(&row[6..], [255; 6]);
        }
    }
}
