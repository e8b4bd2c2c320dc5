//! End-to-end acceptance checks. Everything runs inside one test so the
//! criteria execute sequentially (several carry wall-clock limits) and can
//! share the pretrained prior and probe.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use diffloss_core::denoiser::{Denoiser, DenoiserConfig, FrozenDenoiser};
use diffloss_core::diffloss::{compute_total_loss, compute_variant_loss, DiffLossConfig, Variant};
use diffloss_core::diffusion::{make_linear_schedule, NoiseSchedule, ScheduleDescriptor, Timesteps};
use diffloss_core::harness;
use diffloss_core::hspace::{feature_distance_sweep, svd_perturb, PerturbSpec};
use diffloss_core::image::ImageBatch;
use diffloss_core::metrics::{
    desk_fid, feature_matrix, frechet_distance_with, psnr, ssim, train_probe, EvalReference, FidOptions,
    MetricReport, ProbeClassifier, ProbeConfig,
};
use diffloss_core::rng::{randn, SeedBundle};
use diffloss_core::synthdata::{generate_shapes, PairedDataset, Split};
use diffloss_core::trainer::*;
use tch::{Kind, Tensor};

const SEEDS: [u64; 3] = [0, 1, 2];
const ZERO_PREDICTOR_L1: f64 = 0.7979;
const RESTORE_STEPS: usize = 400;
const PRIOR_STEPS: usize = 2000;
const HSPACE_IMAGES: usize = 64;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn report(n: usize, name: &str, out: &Outcome, secs: f64) {
    let (tag, detail) = match out {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    // written past the test harness capture so the lines always show
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "criterion {n:>2} {tag} {name} [{secs:.1}s]: {detail}");
    let _ = stdout.flush();
}

struct Fixtures {
    dir: tempfile::TempDir,
    prior_ckpt: PathBuf,
    prior: FrozenDenoiser,
    schedule: NoiseSchedule,
    probe_ckpt: PathBuf,
    probe: ProbeClassifier,
}

fn ddpm_config(run_id: &str, seed: u64, max_steps: usize, target: Option<f64>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(run_id, seed);
    cfg.max_steps = max_steps;
    cfg.eval_every = 25;
    cfg.optimizer.lr = 1e-3;
    cfg.pretrain = Some(PretrainSection {
        denoiser: DenoiserConfig {
            resolution: 32,
            base_channels: 16,
            depth: 3,
            time_embed_dim: 64,
            h_channels: 32,
        },
        schedule: ScheduleDescriptor::short(),
        held_out: 128,
        checkpoint_every: 0,
        target_loss: target,
    });
    cfg
}

fn restore_config(run_id: &str, seed: u64, diffloss: DiffLossConfig) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(run_id, seed);
    cfg.max_steps = RESTORE_STEPS;
    cfg.optimizer.lr = 1e-3;
    cfg.diffloss = Some(diffloss);
    cfg
}

impl Fixtures {
    fn build() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ddpm_config("prior", 0, PRIOR_STEPS, None);
        let out = pretrain_ddpm(&cfg, &RunPaths::in_dir(&dir.path().join("prior"))).unwrap();
        let prior_ckpt = out.final_checkpoint.unwrap();
        let (prior, schedule) = load_prior(&prior_ckpt).unwrap();

        let spec = ExperimentConfig::desk("probe", 0).dataset;
        let train = generate_shapes(&spec.with_split(Split::Train, 2000)).unwrap();
        let test = generate_shapes(&spec.with_split(Split::Test, 400)).unwrap();
        let probe = train_probe(&train, &test, ProbeConfig::default(), 0).unwrap();
        let probe_ckpt = dir.path().join("probe");
        probe.save_checkpoint(&probe_ckpt, ProbeConfig::default().steps as u64, 0).unwrap();
        Self {
            dir,
            prior_ckpt,
            prior,
            schedule,
            probe_ckpt,
            probe,
        }
    }

    fn prior(&self) -> DiffusionPrior<'_> {
        DiffusionPrior {
            denoiser: &self.prior,
            schedule: &self.schedule,
        }
    }

    fn test_pairs(&self, cfg: &ExperimentConfig) -> PairedDataset {
        PairedDataset::from_clean(&generate_shapes(&cfg.test_spec()).unwrap(), &cfg.degradation().unwrap())
    }

    fn restore_and_score(&self, cfg: &ExperimentConfig) -> MetricReport {
        let out = train_restoration(cfg, Some(self.prior()), &RunPaths::default()).unwrap();
        let test = self.test_pairs(cfg);
        let clean = ImageBatch::from_images(&test.clean).unwrap();
        let reference = EvalReference::new(&self.probe, &clean, "clean-test").unwrap();
        evaluate_restorer(&out.restorer, &test, &reference).unwrap()
    }
}

fn unit_batch(seed: u64, shape: &[i64], kind: Kind) -> Tensor {
    randn(&mut SeedBundle::new(seed).stream("images"), shape, kind).sigmoid()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let configs = [
        ScheduleDescriptor::default(),
        ScheduleDescriptor::short(),
        ScheduleDescriptor { steps: 50, beta_start: 1e-3, beta_end: 0.05 },
        ScheduleDescriptor { steps: 2000, beta_start: 5e-5, beta_end: 0.01 },
    ];
    let mut worst: f64 = 0.0;
    for (k, desc) in configs.iter().enumerate() {
        let s = desc.build().map_err(|e| e.to_string())?;
        let bars = s.alpha_bars();
        if bars.windows(2).any(|w| w[1] >= w[0]) || s.posterior_var(1) != 0.0 {
            return Err(format!("schedule invariants broken for {desc:?}"));
        }
        for case in 0..25u64 {
            let mut rng = SeedBundle::new(case).child(&format!("schedule-{k}")).stream("roundtrip");
            let x0 = randn(&mut rng, &[2, 3, 8, 8], Kind::Double).clamp(-1.0, 1.0);
            let eps = randn(&mut rng, &[2, 3, 8, 8], Kind::Double);
            let t = s.sample_timestep(&mut rng, 1, s.steps()).unwrap();
            let x_t = s.forward_diffuse(&x0, &eps, t).unwrap();
            let back = s.reconstruct_x0(&x_t, &eps, t).unwrap();
            worst = worst.max((back - &x0).abs().max().double_value(&[]));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-5 && secs < 1.0,
        format!("100 round trips, max abs error {worst:.2e}; monotone alpha_bar and zero posterior variance at t=1 on 4 schedules; {secs:.3}s"),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let cfg = DenoiserConfig {
        resolution: 8,
        base_channels: 4,
        depth: 2,
        time_embed_dim: 8,
        h_channels: 8,
    };
    let d = Denoiser::new(cfg, &mut SeedBundle::new(21).stream("init")).unwrap().to_double().freeze();
    let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for variant in [Variant::Epsilon, Variant::X0, Variant::XPrev] {
        // default weights, and a unit weight so the auxiliary path dominates
        for gamma in [0.001, 1.0] {
            let loss_cfg = DiffLossConfig { variant, gamma, ..Default::default() };
            for case in 0..20u64 {
                let mut r = SeedBundle::new(case).child(variant.as_str()).stream("grad");
                let x = randn(&mut r, &[1, 3, 8, 8], Kind::Double).sigmoid();
                let z0 = randn(&mut r, &[1, 3, 8, 8], Kind::Double).sigmoid();
                let dir = randn(&mut r, &[1, 3, 8, 8], Kind::Double);
                let eval = |z: &Tensor| {
                    compute_total_loss(
                        &ImageBatch::unit(x.shallow_clone()).unwrap(),
                        &ImageBatch::unit(z.shallow_clone()).unwrap(),
                        &d,
                        &s,
                        &loss_cfg,
                        &mut SeedBundle::new(case).stream("noise"),
                    )
                    .unwrap()
                    .total
                };
                let z = z0.detach().set_requires_grad(true);
                eval(&z).backward();
                let analytic = (z.grad() * &dir).sum(Kind::Double).double_value(&[]);
                let h = 1e-6;
                let numeric = tch::no_grad(|| {
                    (eval(&(&z0 + &dir * h)).double_value(&[]) - eval(&(&z0 - &dir * h)).double_value(&[])) / (2.0 * h)
                });
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
                worst = worst.max(rel);
                cases += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-3 && secs < 120.0,
        format!("{cases} directional checks over 3 variants, worst relative error {worst:.2e}; {secs:.1}s"),
    )
}

fn criterion_3(fx: &Fixtures) -> Outcome {
    let start = Instant::now();
    let mut nonzero = 0;
    for seed in 0..100u64 {
        let x = ImageBatch::unit(unit_batch(seed, &[2, 3, 32, 32], Kind::Float)).unwrap();
        let mut rng = SeedBundle::new(seed).stream("noise");
        let terms = tch::no_grad(|| {
            compute_variant_loss(&x, &x, &fx.prior, &fx.schedule, &DiffLossConfig::default(), &mut rng)
        })
        .map_err(|e| e.to_string())?;
        if terms.l_nat.double_value(&[]) != 0.0 || terms.l_sem.double_value(&[]) != 0.0 {
            nonzero += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        nonzero == 0 && secs < 30.0,
        format!("{nonzero}/100 seeds with nonzero l_nat or l_sem; {secs:.1}s"),
    )
}

fn criterion_4(fx: &Fixtures) -> Outcome {
    let before = fx.prior.checksum();
    let mut cfg = restore_config("frozen", 0, DiffLossConfig::default());
    cfg.max_steps = 100;
    let out = train_restoration(&cfg, Some(fx.prior()), &RunPaths::default()).map_err(|e| e.to_string())?;
    let after = fx.prior.checksum();
    let on_disk = FrozenDenoiser::load(&fx.prior_ckpt, None).unwrap().0.checksum();
    check(
        before == after && after == on_disk && out.rows.len() == 100,
        format!("checksum {}.. before, {}.. after 100 steps", &before[..12], &after[..12]),
    )
}

fn criterion_5() -> Outcome {
    let target = ZERO_PREDICTOR_L1 * 0.8;
    let mut parts = Vec::new();
    let mut ok = true;
    for seed in SEEDS {
        let cfg = ddpm_config("ddpm", seed, 20_000, Some(target));
        let out = pretrain_ddpm(&cfg, &RunPaths::default()).map_err(|e| e.to_string())?;
        ok &= out.final_held_out < target;
        parts.push(format!("seed {seed}: {:.4} after {} steps", out.final_held_out, out.steps));
    }
    check(ok, format!("target {target:.4}; {}", parts.join(", ")))
}

struct ArmResult {
    seed: u64,
    with: MetricReport,
    without: MetricReport,
}

fn paired_arms(fx: &Fixtures) -> Vec<ArmResult> {
    SEEDS
        .iter()
        .map(|&seed| {
            let with = fx.restore_and_score(&restore_config("with", seed, DiffLossConfig::default()));
            let without = fx.restore_and_score(&restore_config(
                "without",
                seed,
                DiffLossConfig { gamma: 0.0, ..Default::default() },
            ));
            ArmResult { seed, with, without }
        })
        .collect()
}

fn criterion_6(arms: &[ArmResult]) -> Outcome {
    let fid_wins = arms.iter().filter(|a| a.with.desk_fid < a.without.desk_fid).count();
    let psnr_ok = arms.iter().all(|a| a.with.psnr_db >= a.without.psnr_db - 0.5);
    let detail = arms
        .iter()
        .map(|a| {
            format!(
                "seed {}: fid {:.4} vs {:.4}, psnr {:.3} vs {:.3}",
                a.seed, a.with.desk_fid, a.without.desk_fid, a.with.psnr_db, a.without.psnr_db
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    check(
        fid_wins >= 2 && psnr_ok,
        format!("desk-FID lower in {fid_wins}/3, PSNR within 0.5 dB in all: {psnr_ok} ({detail})"),
    )
}

fn criterion_7(fx: &Fixtures, arms: &[ArmResult]) -> Outcome {
    if !fx.probe.gate_passed() {
        return Err(format!("probe gate failed: clean accuracy {:.3}", fx.probe.clean_accuracy().unwrap_or(f64::NAN)));
    }
    let wins = arms.iter().filter(|a| a.with.top1 >= a.without.top1).count();
    let detail = arms
        .iter()
        .map(|a| format!("seed {}: {:.4} vs {:.4}", a.seed, a.with.top1, a.without.top1))
        .collect::<Vec<_>>()
        .join("; ");
    check(
        wins >= 2,
        format!(
            "probe clean accuracy {:.3}; low-light top-1 with >= without in {wins}/3 ({detail})",
            fx.probe.clean_accuracy().unwrap_or(f64::NAN)
        ),
    )
}

fn criterion_8(fx: &Fixtures) -> Outcome {
    let cfg = restore_config("ablation", 0, DiffLossConfig::default());
    let test = fx.test_pairs(&cfg);
    let clean = ImageBatch::from_images(&test.clean).unwrap();
    let reference = EvalReference::new(&fx.probe, &clean, "clean-test").unwrap();
    let rows = variant_ablation(&cfg, &[Variant::X0, Variant::XPrev, Variant::Epsilon], fx.prior(), &test, &reference)
        .map_err(|e| e.to_string())?;
    let path = fx.dir.path().join("ablation.csv");
    write_table(&path, &rows).map_err(|e| e.to_string())?;
    let eps_first = rows.iter().any(|r| r.variant == "epsilon" && r.desk_rank == 1);
    let detail = rows
        .iter()
        .map(|r| format!("{} fid {:.4} rank {} (reference {} rank {})", r.variant, r.desk_fid, r.desk_rank, r.reference_fid, r.reference_rank))
        .collect::<Vec<_>>()
        .join("; ");
    check(
        rows.len() == 3 && path.is_file() && rows.iter().all(|r| r.desk_fid.is_finite()),
        format!("{detail}; epsilon best here: {eps_first}"),
    )
}

fn criterion_9(fx: &Fixtures) -> Outcome {
    let mut cfg = restore_config("sweep", 0, DiffLossConfig::default());
    cfg.denoiser_ckpt = Some(fx.prior_ckpt.clone());
    cfg.eval.probe_ckpt = Some(fx.probe_ckpt.clone());
    cfg.out_dir = Some(fx.dir.path().join("runs"));
    let config = write_config(fx.dir.path(), "sweep.toml", &cfg);
    let run = harness::cmd_sweep_gamma(&config, &DEFAULT_GAMMAS).map_err(|e| e.to_string())?;
    let csv = run.join("metrics").join("sweep.csv");
    let plot = run.join("grids").join("psnr_vs_gamma.png");
    let rows: Vec<SweepRow> = csv::Reader::from_path(&csv)
        .map_err(|e| e.to_string())?
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let detail = rows
        .iter()
        .map(|r| format!("{}: {:.3} dB{}", r.gamma, r.psnr_db, if r.in_reference_band { " (reference band)" } else { "" }))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        rows.len() == DEFAULT_GAMMAS.len() && plot.is_file(),
        format!("{detail}; curve at {}", plot.file_name().unwrap().to_string_lossy()),
    )
}

fn criterion_10(fx: &Fixtures) -> Outcome {
    // exact properties on real bottleneck features
    let mut identity: f64 = 0.0;
    let mut energy: f64 = 0.0;
    for seed in 0..10u64 {
        let x = randn(&mut SeedBundle::new(seed).stream("x"), &[4, 3, 32, 32], Kind::Float);
        let h = fx
            .prior
            .denoise_with_h(&x, &Timesteps::Shared(1 + (seed as usize * 19) % 200))
            .unwrap()
            .h
            .to_kind(Kind::Double);
        let same = svd_perturb(&h, 0.0).unwrap();
        let scale = h.abs().max().double_value(&[]).max(1e-12);
        identity = identity.max((&same.h - &h).abs().max().double_value(&[]) / scale);
        for delta in [0.5, 1.0, 2.0] {
            let p = svd_perturb(&h, delta).unwrap();
            for i in 0..4 {
                let before = h.get(i).square().sum(Kind::Double).double_value(&[]);
                let after = p.h.get(i).square().sum(Kind::Double).double_value(&[]);
                let expected = before + ((1.0 + delta).powi(2) - 1.0) * p.sigma1[i as usize].powi(2);
                energy = energy.max((after - expected).abs() / expected);
            }
        }
    }
    let mut parts = Vec::new();
    let mut wins = 0;
    for seed in SEEDS {
        let spec = PerturbSpec::new(seed);
        let clean = generate_shapes(&ExperimentConfig::desk("h", seed).dataset.with_split(Split::Test, HSPACE_IMAGES)).unwrap();
        let images = ImageBatch::from_images(&clean.images).unwrap();
        let table = feature_distance_sweep(&[("clean".into(), Some(images))], &spec, &fx.prior, &fx.schedule, &fx.probe)
            .map_err(|e| e.to_string())?;
        let at = |d: f64| table.get("clean", d).and_then(|r| r.mean_dist).unwrap_or(f64::NAN);
        if at(2.0) > at(0.0) {
            wins += 1;
        }
        parts.push(format!("seed {seed}: {:.3} -> {:.3}", at(0.0), at(2.0)));
    }
    check(
        identity <= 1e-5 && energy <= 1e-9 && wins == 3,
        format!(
            "identity error {identity:.1e}, energy identity error {energy:.1e}; distance at delta 0 -> 2 raised in {wins}/3 ({})",
            parts.join(", ")
        ),
    )
}

fn criterion_11() -> Outcome {
    let x = Tensor::full([4, 3, 16, 16], 0.5, (Kind::Float, tch::Device::Cpu));
    let z = &x + 0.1;
    let p = psnr(&ImageBatch::unit(z).unwrap(), &ImageBatch::unit(x.shallow_clone()).unwrap()).unwrap();
    let a = ImageBatch::unit(unit_batch(3, &[4, 3, 32, 32], Kind::Float)).unwrap();
    let s = ssim(&a, &a).unwrap();
    let feats = feature_matrix(&randn(&mut SeedBundle::new(5).stream("f"), &[500, 16], Kind::Double));
    let same = desk_fid(&feats, &feats).unwrap();

    let d = 8;
    let mut rng = SeedBundle::new(11).stream("shift");
    let mu: Vec<f64> = (0..d).map(|i| 0.5 + 0.1 * i as f64).collect();
    let shift = Tensor::from_slice(&mu).view([1, d]);
    let a = feature_matrix(&randn(&mut rng, &[10_000, d], Kind::Double));
    let b = feature_matrix(&(randn(&mut rng, &[10_000, d], Kind::Double) + shift));
    let fid = frechet_distance_with(&a, &b, FidOptions::default()).unwrap();
    let expected: f64 = mu.iter().map(|m| m * m).sum();
    let rel = (fid - expected).abs() / expected;
    check(
        (p - 20.0).abs() < 1e-3 && (s - 1.0).abs() < 1e-9 && same.abs() < 1e-9 && rel <= 0.05,
        format!("psnr {p:.4} dB, ssim(a,a) {s:.6}, fid(A,A) {same:.1e}, shifted fid {fid:.4} vs {expected:.4} ({:.2}%)", rel * 100.0),
    )
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, toml::to_string(cfg).unwrap()).unwrap();
    path
}

fn criterion_12(fx: &Fixtures) -> Outcome {
    let mut cfg = restore_config("repro", 7, DiffLossConfig::default());
    cfg.max_steps = 40;
    cfg.dataset.n_images = 200;
    cfg.denoiser_ckpt = Some(fx.prior_ckpt.clone());
    cfg.eval.probe_ckpt = Some(fx.probe_ckpt.clone());
    let mut runs = Vec::new();
    for arm in ["a", "b"] {
        cfg.out_dir = Some(fx.dir.path().join("repro").join(arm));
        let config = write_config(fx.dir.path(), &format!("repro-{arm}.toml"), &cfg);
        runs.push(harness::cmd_restore_train(&config, None).map_err(|e| e.to_string())?);
    }
    let read = |dir: &Path| std::fs::read(dir.join("metrics").join(harness::METRICS_FILE)).unwrap();
    let first = read(&runs[0]);
    let twice = first == read(&runs[1]);
    harness::cmd_evaluate(&runs[0]).map_err(|e| e.to_string())?;
    let re_eval = first == read(&runs[0]);
    check(
        twice && re_eval,
        format!("restore-train twice identical: {twice}; evaluate rerun identical: {re_eval} ({} bytes)", first.len()),
    )
}

#[test]
fn acceptance() {
    let mut failed = Vec::new();
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let out = f();
        report(n, name, &out, start.elapsed().as_secs_f64());
        if out.is_err() {
            failed.push(n);
        }
    };
    run(1, "diffusion algebra", &mut criterion_1);
    run(2, "gradient correctness", &mut criterion_2);
    run(5, "ddpm trains", &mut criterion_5);
    run(11, "metric oracles", &mut criterion_11);

    let start = Instant::now();
    let fx = Fixtures::build();
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(
        stdout,
        "fixtures: prior {PRIOR_STEPS} steps, probe accuracy {:.3} [{:.1}s]",
        fx.probe.clean_accuracy().unwrap_or(f64::NAN),
        start.elapsed().as_secs_f64()
    );
    drop(stdout);

    run(3, "zero at identity", &mut || criterion_3(&fx));
    run(4, "frozen prior", &mut || criterion_4(&fx));
    let arms = paired_arms(&fx);
    run(6, "restoration quality", &mut || criterion_6(&arms));
    run(7, "semantic accuracy", &mut || criterion_7(&fx, &arms));
    run(8, "variant ablation", &mut || criterion_8(&fx));
    run(9, "weight sweep", &mut || criterion_9(&fx));
    run(10, "h-space probe", &mut || criterion_10(&fx));
    run(12, "reproducibility", &mut || criterion_12(&fx));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
