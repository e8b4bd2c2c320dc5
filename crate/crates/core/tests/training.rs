use diffloss_core::denoiser::{Denoiser, DenoiserConfig, FrozenDenoiser};
use diffloss_core::diffloss::{compute_total_loss, DiffLossConfig, Variant};
use diffloss_core::diffusion::{make_linear_schedule, ScheduleDescriptor};
use diffloss_core::image::ImageBatch;
use diffloss_core::rng::SeedBundle;
use diffloss_core::trainer::*;
use tch::{Kind, Tensor};

fn tiny_f64_denoiser(seed: u64) -> FrozenDenoiser {
    let cfg = DenoiserConfig {
        resolution: 8,
        base_channels: 4,
        depth: 2,
        time_embed_dim: 8,
        h_channels: 8,
    };
    Denoiser::new(cfg, &mut SeedBundle::new(seed).stream("init"))
        .unwrap()
        .to_double()
        .freeze()
}

fn small_pretrain(run_id: &str, steps: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(run_id, 3);
    cfg.dataset.n_images = 64;
    cfg.dataset.resolution = 16;
    cfg.batch_size = 8;
    cfg.max_steps = steps;
    cfg.optimizer.lr = 1e-3;
    cfg.pretrain = Some(PretrainSection {
        denoiser: DenoiserConfig {
            resolution: 16,
            base_channels: 8,
            depth: 2,
            time_embed_dim: 16,
            h_channels: 16,
        },
        schedule: ScheduleDescriptor::short(),
        held_out: 16,
        checkpoint_every: 0,
        target_loss: None,
    });
    cfg
}

fn small_restore(run_id: &str, gamma: Option<f64>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(run_id, 5);
    cfg.dataset.n_images = 64;
    cfg.dataset.resolution = 16;
    cfg.batch_size = 4;
    cfg.max_steps = 12;
    cfg.diffloss = gamma.map(|gamma| DiffLossConfig { gamma, ..Default::default() });
    cfg
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let d = tiny_f64_denoiser(11);
    let s = make_linear_schedule(50, 1e-4, 0.02).unwrap();
    for variant in [Variant::Epsilon, Variant::X0, Variant::XPrev] {
        let cfg = DiffLossConfig { variant, gamma: 1.0, lambda: 0.5, ..Default::default() };
        for case in 0..4u64 {
            let mut r = SeedBundle::new(100 + case).stream("case");
            let x = diffloss_core::rng::randn(&mut r, &[2, 3, 8, 8], Kind::Double).sigmoid();
            let z0 = diffloss_core::rng::randn(&mut r, &[2, 3, 8, 8], Kind::Double).sigmoid();
            let dir = diffloss_core::rng::randn(&mut r, &[2, 3, 8, 8], Kind::Double);
            let loss_at = |z: &Tensor| {
                let mut noise = SeedBundle::new(case).stream("noise");
                compute_total_loss(
                    &ImageBatch::unit(x.shallow_clone()).unwrap(),
                    &ImageBatch::unit(z.shallow_clone()).unwrap(),
                    &d,
                    &s,
                    &cfg,
                    &mut noise,
                )
                .unwrap()
                .total
            };
            let z = z0.detach().set_requires_grad(true);
            loss_at(&z).backward();
            let analytic = (z.grad() * &dir).sum(Kind::Double).double_value(&[]);
            let h = 1e-6;
            let numeric = tch::no_grad(|| {
                let up = loss_at(&(&z0 + &dir * h)).double_value(&[]);
                let dn = loss_at(&(&z0 - &dir * h)).double_value(&[]);
                (up - dn) / (2.0 * h)
            });
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
            assert!(rel <= 1e-3, "{variant:?} case {case}: analytic {analytic} numeric {numeric}");
        }
    }
}

#[test]
fn held_out_loss_beats_zero_predictor() {
    let mut cfg = small_pretrain("heldout", 150);
    cfg.eval_every = 50;
    let out = pretrain_ddpm(&cfg, &RunPaths::default()).unwrap();
    let zero = (2.0 / std::f64::consts::PI).sqrt();
    assert!(out.final_held_out < zero, "held-out {} vs {zero}", out.final_held_out);
    assert!(out.final_held_out < out.initial_held_out.unwrap());
}

#[test]
fn pretrain_resume_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_pretrain("resume", 6);
    cfg.pretrain.as_mut().unwrap().checkpoint_every = 3;
    let straight = pretrain_ddpm(&cfg, &RunPaths::in_dir(&tmp.path().join("a"))).unwrap();

    let mut paths = RunPaths::in_dir(&tmp.path().join("a"));
    paths.resume = Some(tmp.path().join("a").join("checkpoints").join("step-3"));
    paths.checkpoints = None;
    paths.log = None;
    let resumed = pretrain_ddpm(&cfg, &paths).unwrap();
    assert_eq!(resumed.steps, 6);
    assert_eq!(resumed.denoiser.checksum(), straight.denoiser.checksum());
    assert_eq!(resumed.final_held_out, straight.final_held_out);

    let mut other = cfg.clone();
    other.seed += 1;
    assert!(pretrain_ddpm(&other, &paths).is_err());
}

#[test]
fn restoration_leaves_prior_untouched_and_zero_gamma_matches_disabled() {
    let tmp = tempfile::tempdir().unwrap();
    let pre = small_pretrain("prior", 2);
    let out = pretrain_ddpm(&pre, &RunPaths::in_dir(tmp.path())).unwrap();
    let (d, s) = load_prior(out.final_checkpoint.as_ref().unwrap()).unwrap();
    let before = d.checksum();
    let prior = || Some(DiffusionPrior { denoiser: &d, schedule: &s });

    let on = train_restoration(&small_restore("on", Some(0.001)), prior(), &RunPaths::default()).unwrap();
    let (a, b) = on.denoiser_checksums.clone().unwrap();
    assert_eq!(a, b);
    assert_eq!(d.checksum(), before);
    assert!(on.rows.iter().all(|r| r.l_diff > 0.0));

    let zero = train_restoration(&small_restore("zero", Some(0.0)), prior(), &RunPaths::default()).unwrap();
    let off = train_restoration(&small_restore("off", None), prior(), &RunPaths::default()).unwrap();
    assert_eq!(zero.restorer.checksum(), off.restorer.checksum());
    let pix = |o: &RestorationOutcome| o.rows.iter().map(|r| r.l_pix).collect::<Vec<_>>();
    assert_eq!(pix(&zero), pix(&off));
    assert_ne!(on.restorer.checksum(), off.restorer.checksum());
}

#[test]
fn diffloss_without_prior_is_a_config_error() {
    let err = train_restoration(&small_restore("nope", Some(0.001)), None, &RunPaths::default()).unwrap_err();
    assert!(err.to_string().contains("denoiser_ckpt"), "{err}");
}
