//! Acceptance checks. Each test writes one PASS/FAIL line straight to
//! stderr (bypassing the test harness capture) before asserting.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uneq_core::cli::{self, RunConfig};
use uneq_core::losses::{
    color_diversity, diametric_pair, distance, diversity_competition_loss, DiscriminatorMode, DistanceKind,
    GeneratorObjective,
};
use uneq_core::networks::{
    discriminator_forward, generate, DiscriminatorParams, GeneratorParams, GrowthState, NetConfig,
};
use uneq_core::render::{self, Interpolation, RenderPlan};
use uneq_core::tensor::{Graph, Tensor, OP_NAMES};
use uneq_core::training::checkpoint::checkpoint_read;
use uneq_core::training::{
    diagnose_series, read_metrics, stability_diagnose, DiagnosticsRecord, Status, TrainConfig,
};

fn report(n: u32, title: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{verdict}] criterion {n}: {title} ({detail})");
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = fs::remove_dir_all(&dir);
    dir
}

#[test]
fn criterion_1_gradient_oracle() {
    let start = Instant::now();
    let report_ = cli::cmd_gradcheck(0, 10, None).expect("oracle runs");
    let elapsed = start.elapsed();
    let names: Vec<&str> = report_.results.iter().map(|r| r.name).collect();
    let covered = OP_NAMES.iter().all(|op| names.contains(op)) && names.contains(&"ensemble_4x4");
    let worst = report_
        .results
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("registry is not empty");
    let ok = report_.passed() && covered && report_.seeds.len() >= 10 && elapsed < Duration::from_secs(60);
    report(
        1,
        "gradient oracle",
        ok,
        &format!(
            "{} cases x {} seeds, worst {} at {:.2e}, {:.1}s",
            names.len(),
            report_.seeds.len(),
            worst.name,
            worst.max_rel_err,
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

fn random_images(seed: u64, batch: usize, res: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([batch, 3, res, res], |_| rng.random_range(-1.0..1.0))
}

/// Discriminator gradient norm of `pos(x1) + neg(x2)`.
fn diametric_grad_norm(d: &DiscriminatorParams, x1: &Tensor<f32>, x2: &Tensor<f32>) -> f64 {
    let growth = GrowthState::settled(1);
    let mut g = Graph::new();
    let bound = d.bind(&mut g, true);
    let a = g.constant(x1.clone());
    let b = g.constant(x2.clone());
    let (la, _) = discriminator_forward(&mut g, &bound, a, growth).unwrap();
    let (lb, _) = discriminator_forward(&mut g, &bound, b, growth).unwrap();
    let (pos, _) = diametric_pair(&mut g, la);
    let (_, neg) = diametric_pair(&mut g, lb);
    let total = g.add(pos, neg).unwrap();
    g.backward(total).unwrap();
    bound
        .bound()
        .vars()
        .iter()
        .filter_map(|&v| g.grad(v))
        .flatten()
        .map(|&x| f64::from(x).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn criterion_2_diametric_cancellation() {
    let cfg = NetConfig::with_max_stage(1);
    let mut worst_shared = 0.0f64;
    let mut separated = 0;
    for seed in 0..10 {
        let d = DiscriminatorParams::init(seed, &cfg).unwrap();
        let x = random_images(100 + seed, 8, 8);
        let y = random_images(200 + seed, 8, 8);
        worst_shared = worst_shared.max(diametric_grad_norm(&d, &x, &x));
        if diametric_grad_norm(&d, &x, &y) > 1e-6 {
            separated += 1;
        }
    }
    let ok = worst_shared < 1e-6 && separated >= 9;
    report(
        2,
        "diametric cancellation",
        ok,
        &format!("shared-batch norm max {worst_shared:.1e}, independent batches non-zero {separated}/10"),
    );
    assert!(ok);
}

fn distance_value(a: &[f64], b: &[f64], kind: DistanceKind) -> f64 {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new([a.len()], a.to_vec()).unwrap());
    let b = g.constant(Tensor::new([b.len()], b.to_vec()).unwrap());
    let d = distance(&mut g, a, b, kind).unwrap();
    g.value(d).item()
}

fn diversity_value(batch: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let d = color_diversity(&mut g, x).unwrap();
    g.value(d).item()
}

/// A `[b, 3, 2, 2]` batch whose pixels vary but whose per-image mean
/// colours are `colors`.
fn batch_with_mean_colors(rng: &mut ChaCha8Rng, colors: &[[f64; 3]]) -> Tensor<f64> {
    let mut data = Vec::new();
    for c in colors {
        for &mean in c {
            let u: f64 = rng.random_range(-0.3..0.3);
            let v: f64 = rng.random_range(-0.3..0.3);
            data.extend([mean + u, mean - u, mean + v, mean - v]);
        }
    }
    Tensor::new([colors.len(), 3, 2, 2], data).unwrap()
}

#[test]
fn criterion_3_loss_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = Vec::new();
    let vector = |rng: &mut ChaCha8Rng| (0..6).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<f64>>();

    for _ in 0..200 {
        let (a, b, c) = (vector(&mut rng), vector(&mut rng), vector(&mut rng));
        for kind in [DistanceKind::L1, DistanceKind::L2] {
            if distance_value(&a, &a, kind) != 0.0 {
                failures.push(format!("{kind} identity"));
            }
            let (ab, ba) = (distance_value(&a, &b, kind), distance_value(&b, &a, kind));
            if (ab - ba).abs() > 1e-6 {
                failures.push(format!("{kind} symmetry"));
            }
            if ab > distance_value(&a, &c, kind) + distance_value(&c, &b, kind) + 1e-6 {
                failures.push(format!("{kind} triangle"));
            }
        }
    }

    for trial in 0..100 {
        let n = 2 + trial % 5;
        let mut colors: Vec<[f64; 3]> = (0..n)
            .map(|_| [0; 3].map(|_| rng.random_range(-0.6..0.6)))
            .collect();
        let equal = trial % 2 == 0;
        if equal {
            colors = vec![colors[0]; n];
        }
        let batch = batch_with_mean_colors(&mut rng, &colors);
        let d = diversity_value(&batch);
        if (d < 1e-6) != equal {
            failures.push(format!("diversity zero-iff-equal (equal={equal}, d={d})"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.rotate_left(1);
        order.swap(0, n - 1);
        let image = 3 * 2 * 2;
        let permuted: Vec<f64> = order
            .iter()
            .flat_map(|&i| batch.data()[i * image..(i + 1) * image].to_vec())
            .collect();
        let permuted = Tensor::new([n, 3, 2, 2], permuted).unwrap();
        if (diversity_value(&permuted) - d).abs() > 1e-6 {
            failures.push("diversity permutation invariance".into());
        }
    }

    let mut max_leak = 0.0f64;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let mine = g.param(Tensor::from_fn([4, 3, 4, 4], |_| rng.random_range(-1.0..1.0)));
        let theirs = g.param(Tensor::from_fn([4, 3, 4, 4], |_| rng.random_range(-1.0..1.0)));
        let l = diversity_competition_loss(&mut g, mine, theirs, 5.0).unwrap();
        g.backward(l).unwrap();
        let leak = g.grad(theirs).map_or(0.0, |gr| gr.iter().fold(0.0, |m: f64, v| m.max(v.abs())));
        max_leak = max_leak.max(leak);
        if !g.grad(mine).is_some_and(|gr| gr.iter().any(|&v| v != 0.0)) {
            failures.push("competition has no gradient on own batch".into());
        }
    }
    if max_leak > 0.0 {
        failures.push(format!("stop-gradient leak {max_leak:e}"));
    }

    failures.dedup();
    let ok = failures.is_empty();
    report(
        3,
        "loss property suite",
        ok,
        &if ok {
            "distance axioms x200, diversity x100, hinge stop-gradient exact".to_string()
        } else {
            failures.join("; ")
        },
    );
    assert!(ok, "{failures:?}");
}

fn run_generator(gen: &GeneratorParams, z: &Tensor<f32>, growth: GrowthState) -> Tensor<f32> {
    let mut g = Graph::new();
    let bound = gen.bind(&mut g, false);
    let z = g.constant(z.clone());
    let out = generate(&mut g, &bound, z, growth).unwrap();
    g.value(out).clone()
}

fn upsample(t: &Tensor<f32>) -> Tensor<f32> {
    let mut g = Graph::new();
    let x = g.constant(t.clone());
    let y = g.upsample_nearest2x(x).unwrap();
    g.value(y).clone()
}

#[test]
fn criterion_4_progressive_blend() {
    let cfg = NetConfig::default();
    let mut worst = 0.0f32;
    let mut transitions = 0;
    for seed in 0..3 {
        let gen = GeneratorParams::init(seed, &cfg).unwrap();
        let z = uneq_core::networks::sample_latents(&mut ChaCha8Rng::seed_from_u64(seed + 10), 2, cfg.latent_dim);
        for stage in 1..=cfg.max_stage {
            let previous = upsample(&run_generator(&gen, &z, GrowthState::settled(stage - 1)));
            let at_zero = run_generator(&gen, &z, GrowthState::new(stage, 0.0));
            let settled = run_generator(&gen, &z, GrowthState::settled(stage));
            let at_one = run_generator(&gen, &z, GrowthState::new(stage, 1.0));
            worst = worst
                .max(at_zero.max_abs_diff(&previous).unwrap())
                .max(at_one.max_abs_diff(&settled).unwrap());
            transitions += 1;
        }
    }
    let top = 4 << cfg.max_stage;
    let ok = worst < 1e-6 && top == 32;
    report(
        4,
        "progressive-growing blend",
        ok,
        &format!("{transitions} transitions up to {top}x{top}, max abs diff {worst:.1e}"),
    );
    assert!(ok);
}

fn small_run(out: PathBuf, steps: u64) -> RunConfig {
    let mut run = RunConfig {
        out_dir: out,
        preview: false,
        ..RunConfig::default()
    };
    for assignment in [
        "seed=21",
        "latent_dim=16",
        "embed_dim=16",
        "channels=16,8",
        "max_stage=1",
        "steps_per_stage=60",
        "checkpoint_every=50",
    ] {
        run.apply_assignment(assignment).unwrap();
    }
    run.train.steps = steps;
    run
}

#[test]
fn criterion_5_determinism_and_resume() {
    let root = scratch("acceptance_determinism");
    let a = cli::cmd_train(&small_run(root.join("a"), 50), None).unwrap();
    let b = cli::cmd_train(&small_run(root.join("b"), 50), None).unwrap();
    let same = |x: &Path, y: &Path| fs::read(x).unwrap() == fs::read(y).unwrap();
    let reruns_identical = same(&a.metrics, &b.metrics) && same(&a.checkpoint, &b.checkpoint);

    let full = cli::cmd_train(&small_run(root.join("full"), 150), None).unwrap();
    let at_100 = root.join("full/checkpoints/step_00000100.ckpt");
    let resumed = cli::cmd_train(&small_run(root.join("resumed"), 150), Some(&at_100)).unwrap();
    let full_metrics = fs::read_to_string(&full.metrics).unwrap();
    let tail: Vec<&str> = full_metrics.lines().skip(100).collect();
    let resumed_metrics = fs::read_to_string(&resumed.metrics).unwrap();
    let resumed_lines: Vec<&str> = resumed_metrics.lines().collect();
    let resume_identical = resumed.first_step == 100
        && tail.len() == 50
        && resumed_lines == tail
        && same(&full.checkpoint, &resumed.checkpoint);

    let ok = reruns_identical && resume_identical;
    report(
        5,
        "determinism and resume",
        ok,
        &format!("50-step reruns identical: {reruns_identical}; 100+50 equals 150: {resume_identical}"),
    );
    assert!(ok);
}

struct Smoke {
    dir: PathBuf,
    elapsed: Duration,
    records: Vec<DiagnosticsRecord>,
    config: TrainConfig,
}

/// The 500-step desk-scale run, shared by the smoke and render checks.
fn smoke() -> &'static Smoke {
    static SMOKE: OnceLock<Smoke> = OnceLock::new();
    SMOKE.get_or_init(|| {
        let dir = scratch("acceptance_smoke");
        let mut run = RunConfig {
            out_dir: dir.clone(),
            ..RunConfig::default()
        };
        run.train.steps = 500;
        run.train.batch_size = 8;
        run.train.max_stage = 1;
        run.train.steps_per_stage = 250;
        run.train.arrangement.discriminator_mode = DiscriminatorMode::Diametric;
        run.train.arrangement.generator_objective = GeneratorObjective::EmbeddingProximity;
        run.train.arrangement.distance_g1 = DistanceKind::L2;
        run.train.arrangement.distance_g2 = DistanceKind::Cosine;
        let start = Instant::now();
        let summary = cli::cmd_train(&run, None).expect("smoke run completes");
        let elapsed = start.elapsed();
        let file = fs::File::open(&summary.metrics).unwrap();
        let records = read_metrics(std::io::BufReader::new(file)).unwrap();
        Smoke {
            dir,
            elapsed,
            records,
            config: run.train,
        }
    })
}

#[test]
fn criterion_6_smoke_run() {
    let s = smoke();
    let nan_records = s.records.iter().filter(|r| !r.all_finite()).count();
    let diag = diagnose_series(&s.records, &s.config).expect("enough records");
    let non_exploding = 1.0 - diag.exploding;
    let last = s.records.last().unwrap();
    let ok = s.records.len() == 500
        && s.elapsed < Duration::from_secs(600)
        && nan_records == 0
        && non_exploding >= 0.8
        && last.stage == 1;
    report(
        6,
        "desk-scale smoke run",
        ok,
        &format!(
            "{} steps in {:.1}s, {nan_records} NaN records, {:.1}% non-EXPLODING windows, final stage {}",
            s.records.len(),
            s.elapsed.as_secs_f64(),
            100.0 * non_exploding,
            last.stage
        ),
    );
    assert!(ok);
}

fn ppm_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_7_render_contract() {
    let s = smoke();
    let checkpoint = s.dir.join("checkpoint.ckpt");
    let (g1, g2) = checkpoint_read(&checkpoint).unwrap().generators().unwrap();
    let plan = RenderPlan {
        keyframes: render::sample_keyframes(5, 4, g1.config().latent_dim).unwrap(),
        frames_per_segment: 30,
        interpolation: Interpolation::Slerp,
        looped: false,
    };
    let out_a = scratch("acceptance_render_a");
    let out_b = scratch("acceptance_render_b");
    let manifest = render::render_sequence(&checkpoint, &plan, 5, &out_a).unwrap();
    render::render_sequence(&checkpoint, &plan, 5, &out_b).unwrap();

    let files = ppm_files(&out_a);
    let count_ok = files.len() == 91 && manifest.frames == 91;

    let growth = GrowthState::settled(g1.config().max_stage);
    let keyframes_exact = plan.keyframes.iter().enumerate().all(|(k, kf)| {
        let direct = render::render_frame((&g1, &g2), &kf.z1, &kf.z2, growth).unwrap();
        fs::read(out_a.join(render::frame_name(k * 30))).unwrap() == direct.ppm_bytes()
    });

    let formats_ok = files.iter().all(|f| {
        let bytes = fs::read(f).unwrap();
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm).unwrap();
        bytes.starts_with(b"P6\n16 8\n255\n") && (img.height(), img.width()) == (8, 16)
    });

    let identical = files.iter().all(|f| {
        let name = f.file_name().unwrap();
        fs::read(f).unwrap() == fs::read(out_b.join(name)).unwrap()
    }) && fs::read(out_a.join("manifest.json")).unwrap() == fs::read(out_b.join("manifest.json")).unwrap();

    let ok = count_ok && keyframes_exact && formats_ok && identical;
    report(
        7,
        "render contract",
        ok,
        &format!(
            "{} frames, keyframes exact: {keyframes_exact}, P6 (8, 16): {formats_ok}, re-render identical: {identical}",
            files.len()
        ),
    );
    assert!(ok);
}

fn record(step: u64, grad: f32, update: f32, probe: (f32, f32)) -> DiagnosticsRecord {
    DiagnosticsRecord {
        step,
        stage: 0,
        alpha: 1.0,
        loss_d: 0.7,
        loss_g1: 0.7,
        loss_g2: 0.7,
        grad_norm_d: grad,
        grad_norm_g1: grad,
        grad_norm_g2: grad,
        update_norm_d: update,
        update_norm_g1: update,
        update_norm_g2: update,
        diversity_g1: probe.0,
        diversity_g2: probe.1,
        probe_diversity_g1: probe.0,
        probe_diversity_g2: probe.1,
        status: Status::Healthy,
    }
}

#[test]
fn criterion_8_diagnostics_classifier() {
    let cfg = TrainConfig::default();
    let varying: Vec<DiagnosticsRecord> = (0..50)
        .map(|i| {
            let t = i as f32 * 0.37;
            record(i, 2.0 + t.sin(), 0.1 + 0.05 * t.cos(), (0.3 + 0.1 * t.sin(), 0.4 + 0.1 * t.cos()))
        })
        .collect();
    let constant: Vec<DiagnosticsRecord> = (0..50).map(|i| record(i, 1.5, 0.0, (0.25, 0.35))).collect();
    let mut with_nan = varying.clone();
    with_nan[17].grad_norm_g2 = f32::NAN;
    let mut above_threshold = varying.clone();
    above_threshold[30].grad_norm_d = cfg.explode_threshold * 1.01;
    let mut still_moving = constant.clone();
    for r in &mut still_moving {
        r.update_norm_d = 2.0 * cfg.stasis_threshold;
        r.update_norm_g1 = 2.0 * cfg.stasis_threshold;
        r.update_norm_g2 = 2.0 * cfg.stasis_threshold;
    }

    let cases = [
        ("NaN-containing", &with_nan, Status::Exploding),
        ("grad norm above threshold", &above_threshold, Status::Exploding),
        ("all-constant", &constant, Status::Static),
        ("healthy-varying", &varying, Status::Healthy),
        ("constant probes, updates above threshold", &still_moving, Status::Healthy),
    ];
    let mut details = Vec::new();
    let mut ok = true;
    for (name, window, expected) in cases {
        let got = stability_diagnose(window, &cfg);
        ok &= got == expected;
        details.push(format!("{name} -> {}", got.as_str()));
    }
    report(8, "diagnostics classifier", ok, &details.join(", "));
    assert!(ok);
}
