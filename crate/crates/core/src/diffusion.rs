//! Closed-form DDPM mathematics on `[-1,1]` tensors.
//!
//! Timesteps are 1-based throughout: `t = 1` is the least noisy step and
//! `t = T` the most. The convention `alpha_bar(0) = 1` makes the posterior
//! variance at `t = 1` exactly zero, so the last sampling step is
//! deterministic.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::denoiser::NoisePredictor;
use crate::error::{ensure_arg, ensure_config, Result};
use crate::rng::{randn, Rng};

/// Serializable description of a schedule, stored in checkpoint manifests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDescriptor {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleDescriptor {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleDescriptor {
    /// Short schedule for fast runs.
    pub fn short() -> Self {
        Self {
            steps: 200,
            ..Self::default()
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    descriptor: ScheduleDescriptor,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    ensure_config!(steps >= 2, "schedule needs at least 2 steps, got {steps}");
    ensure_config!(
        beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
        "betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
    );
    let beta: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let posterior_var = (0..steps)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
        })
        .collect();
    Ok(NoiseSchedule {
        descriptor: ScheduleDescriptor {
            steps,
            beta_start,
            beta_end,
        },
        beta,
        alpha,
        alpha_bar,
        posterior_var,
    })
}

/// One timestep for the whole batch, or one per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Timesteps {
    Shared(usize),
    PerSample(Vec<usize>),
}

impl From<usize> for Timesteps {
    fn from(t: usize) -> Self {
        Timesteps::Shared(t)
    }
}

impl From<Vec<usize>> for Timesteps {
    fn from(t: Vec<usize>) -> Self {
        Timesteps::PerSample(t)
    }
}

impl Timesteps {
    /// Timestep of sample `i`.
    pub fn get(&self, i: usize) -> usize {
        match self {
            Timesteps::Shared(t) => *t,
            Timesteps::PerSample(ts) => ts[i],
        }
    }

    /// Expands to one entry per sample.
    pub fn expand(&self, n: usize) -> Vec<usize> {
        (0..n).map(|i| self.get(i)).collect()
    }
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn descriptor(&self) -> ScheduleDescriptor {
        self.descriptor
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar(t)` with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }

    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        ab / (1.0 - ab)
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<()> {
        ensure_arg!(
            (1..=self.steps()).contains(&t),
            "timestep {t} outside [1, {}]",
            self.steps()
        );
        Ok(())
    }

    fn check_steps(&self, t: &Timesteps, n: i64) -> Result<()> {
        match t {
            Timesteps::Shared(t) => self.check_step(*t),
            Timesteps::PerSample(ts) => {
                ensure_arg!(
                    ts.len() as i64 == n,
                    "got {} timesteps for a batch of {n}",
                    ts.len()
                );
                ts.iter().try_for_each(|&t| self.check_step(t))
            }
        }
    }

    /// Multiplies `x` by `f(t)`, per sample when timesteps differ.
    fn scale(&self, x: &Tensor, t: &Timesteps, f: impl Fn(usize) -> f64) -> Tensor {
        match t {
            Timesteps::Shared(t) => x * f(*t),
            Timesteps::PerSample(ts) => {
                let c: Vec<f64> = ts.iter().map(|&t| f(t)).collect();
                let c = Tensor::from_slice(&c)
                    .to_kind(x.kind())
                    .to_device(x.device())
                    .reshape([-1, 1, 1, 1]);
                x * c
            }
        }
    }

    /// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
    pub fn forward_diffuse(&self, x0: &Tensor, eps: &Tensor, t: impl Into<Timesteps>) -> Result<Tensor> {
        let t = t.into();
        ensure_arg!(
            x0.size() == eps.size(),
            "noise shape {:?} differs from image shape {:?}",
            eps.size(),
            x0.size()
        );
        self.check_steps(&t, x0.size()[0])?;
        let signal = self.scale(x0, &t, |t| self.alpha_bar(t).sqrt());
        let noise = self.scale(eps, &t, |t| (1.0 - self.alpha_bar(t)).sqrt());
        Ok(signal + noise)
    }

    /// `x0_hat = x_t / sqrt(ab_t) - sqrt(1/ab_t - 1) eps_hat`.
    pub fn reconstruct_x0(&self, x_t: &Tensor, eps_hat: &Tensor, t: impl Into<Timesteps>) -> Result<Tensor> {
        let t = t.into();
        ensure_arg!(
            x_t.size() == eps_hat.size(),
            "noise estimate shape {:?} differs from x_t shape {:?}",
            eps_hat.size(),
            x_t.size()
        );
        self.check_steps(&t, x_t.size()[0])?;
        let a = self.scale(x_t, &t, |t| 1.0 / self.alpha_bar(t).sqrt());
        let b = self.scale(eps_hat, &t, |t| (1.0 / self.alpha_bar(t) - 1.0).sqrt());
        Ok(a - b)
    }

    /// Posterior mean coefficients `(c_x0, c_xt)` at step `t`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let c_x0 = ab_prev.sqrt() * (1.0 - self.alpha(t)) / (1.0 - ab);
        let c_xt = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c_x0, c_xt)
    }

    /// One reverse transition: posterior mean from `(x_t, x0_hat)` plus
    /// `sqrt(posterior_var) * noise`. `noise = None` takes the mean.
    pub fn posterior_step(
        &self,
        x_t: &Tensor,
        x0_hat: &Tensor,
        t: impl Into<Timesteps>,
        noise: Option<&Tensor>,
    ) -> Result<Tensor> {
        let t = t.into();
        ensure_arg!(
            x_t.size() == x0_hat.size(),
            "x0 estimate shape {:?} differs from x_t shape {:?}",
            x0_hat.size(),
            x_t.size()
        );
        self.check_steps(&t, x_t.size()[0])?;
        let mean = self.scale(x0_hat, &t, |t| self.posterior_coefficients(t).0)
            + self.scale(x_t, &t, |t| self.posterior_coefficients(t).1);
        Ok(match noise {
            Some(n) => {
                ensure_arg!(n.size() == x_t.size(), "posterior noise shape mismatch");
                mean + self.scale(n, &t, |t| self.posterior_var(t).sqrt())
            }
            None => mean,
        })
    }

    /// Uniform integer timestep in `[t_min, t_max]`.
    pub fn sample_timestep(&self, rng: &mut Rng, t_min: usize, t_max: usize) -> Result<usize> {
        ensure_arg!(
            1 <= t_min && t_min <= t_max && t_max <= self.steps(),
            "invalid timestep range [{t_min}, {t_max}] for T = {}",
            self.steps()
        );
        Ok(rng.gen_range(t_min..=t_max))
    }

    /// L1 noise-prediction objective: mean `|eps - f(x_t, t)|` over all elements.
    pub fn ddpm_loss<D: NoisePredictor + ?Sized>(
        &self,
        denoiser: &D,
        x0: &Tensor,
        t: impl Into<Timesteps>,
        eps: &Tensor,
    ) -> Result<Tensor> {
        let t = t.into();
        let x_t = self.forward_diffuse(x0, eps, t.clone())?;
        let out = denoiser.predict(&x_t, &t)?;
        Ok((eps - out.eps_hat).abs().mean(Kind::Float))
    }

    /// Ancestral sampling from pure noise down to `t = 1`; result clamped to `[-1,1]`.
    pub fn sample<D: NoisePredictor + ?Sized>(&self, denoiser: &D, shape: &[i64], rng: &mut Rng) -> Result<Tensor> {
        let x_t = randn(rng, shape, Kind::Float);
        self.denoise_from(denoiser, x_t, self.steps(), rng)
    }

    /// Runs the reverse chain from `x_start` at step `t_start` down to `t = 1`.
    pub fn denoise_from<D: NoisePredictor + ?Sized>(
        &self,
        denoiser: &D,
        x_start: Tensor,
        t_start: usize,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        self.check_step(t_start)?;
        tch::no_grad(|| {
            let mut x = x_start;
            for t in (1..=t_start).rev() {
                let eps_hat = denoiser.predict(&x, &Timesteps::Shared(t))?.eps_hat;
                let x0_hat = self.reconstruct_x0(&x, &eps_hat, t)?;
                let noise = (t > 1).then(|| randn(rng, &x.size(), x.kind()));
                x = self.posterior_step(&x, &x0_hat, t, noise.as_ref())?;
            }
            Ok(x.clamp(-1.0, 1.0))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserOutput;
    use crate::rng::SeedBundle;
    use tch::Device;

    struct ZeroPredictor;

    impl NoisePredictor for ZeroPredictor {
        fn predict(&self, x_t: &Tensor, _t: &Timesteps) -> Result<DenoiserOutput> {
            Ok(DenoiserOutput {
                eps_hat: x_t.zeros_like(),
                h: Tensor::zeros([x_t.size()[0], 1, 1, 1], (x_t.kind(), x_t.device())),
            })
        }
    }

    /// Returns a fixed tensor regardless of input.
    struct ConstPredictor(Tensor);

    impl NoisePredictor for ConstPredictor {
        fn predict(&self, x_t: &Tensor, _t: &Timesteps) -> Result<DenoiserOutput> {
            Ok(DenoiserOutput {
                eps_hat: self.0.shallow_clone(),
                h: Tensor::zeros([x_t.size()[0], 1, 1, 1], (x_t.kind(), x_t.device())),
            })
        }
    }

    fn rand_t(seed: u64, shape: &[i64], kind: Kind) -> Tensor {
        randn(&mut SeedBundle::new(seed).stream("t"), shape, kind)
    }

    fn max_abs(t: &Tensor) -> f64 {
        t.abs().max().double_value(&[])
    }

    #[test]
    fn first_alpha_bar_is_one_minus_beta() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(1), 0.9999);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.posterior_var(1), 0.0);
    }

    #[test]
    fn two_step_schedule() {
        let s = make_linear_schedule(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(2), 0.25);
    }

    #[test]
    fn second_alpha_bar_matches_extended_precision_product() {
        // Product of (1 - beta_s) evaluated in exact rational arithmetic.
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let oracle = 0.999_780_092_072_072_1_f64;
        assert!((s.alpha_bar(2) - oracle).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(make_linear_schedule(1, 1e-4, 0.02).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.02).is_err());
        assert!(make_linear_schedule(10, 0.03, 0.02).is_err());
        assert!(make_linear_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn schedule_invariants() {
        for (steps, b0, b1) in [(1000, 1e-4, 0.02), (200, 1e-4, 0.02), (2, 0.5, 0.5), (50, 0.01, 0.3)] {
            let s = make_linear_schedule(steps, b0, b1).unwrap();
            for t in 1..=steps {
                assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
                assert_eq!(s.alpha(t), 1.0 - s.beta(t));
                if t > 1 {
                    assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                    assert!(s.snr(t) < s.snr(t - 1));
                }
                let expected = (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t)) * (1.0 - s.alpha(t));
                assert!((s.posterior_var(t) - expected).abs() <= 1e-12 * expected.max(1e-300));
            }
            assert!(s.alpha_bar(steps) > 0.0);
            assert_eq!(s.betas()[0], b0);
            assert!((s.betas()[steps - 1] - b1).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_diffuse_special_cases() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let x0 = rand_t(1, &[2, 3, 4, 4], Kind::Double);
        let eps = rand_t(2, &[2, 3, 4, 4], Kind::Double);
        let t = 417;
        let xt = s.forward_diffuse(&x0, &eps.zeros_like(), t).unwrap();
        assert!(max_abs(&(xt - &x0 * s.alpha_bar(t).sqrt())) < 1e-15);
        let xt = s.forward_diffuse(&x0.zeros_like(), &eps, t).unwrap();
        assert!(max_abs(&(xt - &eps * (1.0 - s.alpha_bar(t)).sqrt())) < 1e-15);
    }

    #[test]
    fn forward_diffuse_rejects_bad_args() {
        let s = make_linear_schedule(10, 1e-4, 0.02).unwrap();
        let x0 = rand_t(1, &[1, 3, 4, 4], Kind::Float);
        let eps = rand_t(2, &[1, 3, 4, 2], Kind::Float);
        assert!(s.forward_diffuse(&x0, &eps, 3).is_err());
        assert!(s.forward_diffuse(&x0, &x0, 0).is_err());
        assert!(s.forward_diffuse(&x0, &x0, 11).is_err());
        assert!(s.reconstruct_x0(&x0, &x0, 11).is_err());
        assert!(s.posterior_step(&x0, &x0, 0, None).is_err());
    }

    #[test]
    fn reconstruct_recovers_x0_and_matches_scalar_oracle() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let x0 = rand_t(3, &[2, 3, 4, 4], Kind::Double).clamp(-1.0, 1.0);
        let eps = rand_t(4, &[2, 3, 4, 4], Kind::Double);
        let t = 733;
        let xt = s.forward_diffuse(&x0, &eps, t).unwrap();
        let rec = s.reconstruct_x0(&xt, &eps, t).unwrap();
        assert!(max_abs(&(&rec - &x0)) < 1e-10);

        let zero = s.reconstruct_x0(&xt, &eps.zeros_like(), t).unwrap();
        assert!(max_abs(&(zero - &xt / s.alpha_bar(t).sqrt())) < 1e-12);

        // Scalar oracle per pixel with an unrelated noise estimate.
        let eps_hat = rand_t(5, &[2, 3, 4, 4], Kind::Double);
        let got = crate::image::tensor_to_vec_f64(&s.reconstruct_x0(&xt, &eps_hat, t).unwrap());
        let xs = crate::image::tensor_to_vec_f64(&xt);
        let es = crate::image::tensor_to_vec_f64(&eps_hat);
        let ab: f64 = (1..=t).map(|k| 1.0 - s.beta(k)).product();
        for ((g, x), e) in got.iter().zip(&xs).zip(&es) {
            let want = x / ab.sqrt() - (1.0 / ab - 1.0).sqrt() * e;
            assert!((g - want).abs() <= 1e-9 * want.abs().max(1.0));
        }
    }

    #[test]
    fn per_sample_timesteps_match_shared() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = rand_t(6, &[3, 3, 2, 2], Kind::Double);
        let eps = rand_t(7, &[3, 3, 2, 2], Kind::Double);
        let ts = vec![5, 50, 100];
        let batched = s.forward_diffuse(&x0, &eps, ts.clone()).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let one = s
                .forward_diffuse(&x0.narrow(0, i as i64, 1), &eps.narrow(0, i as i64, 1), t)
                .unwrap();
            assert!(max_abs(&(one - batched.narrow(0, i as i64, 1))) < 1e-15);
        }
        assert!(s.forward_diffuse(&x0, &eps, vec![1, 2]).is_err());
    }

    #[test]
    fn posterior_step_at_t1_returns_x0_hat() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let (c0, ct) = s.posterior_coefficients(1);
        assert_eq!(c0, 1.0);
        assert_eq!(ct, 0.0);
        let xt = rand_t(8, &[1, 3, 4, 4], Kind::Double);
        let x0 = rand_t(9, &[1, 3, 4, 4], Kind::Double);
        let noise = rand_t(10, &[1, 3, 4, 4], Kind::Double);
        let out = s.posterior_step(&xt, &x0, 1, Some(&noise)).unwrap();
        assert!(max_abs(&(out - &x0)) == 0.0);
    }

    #[test]
    fn posterior_step_matches_scalar_oracle() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let xt = rand_t(11, &[1, 3, 4, 4], Kind::Double);
        let x0 = rand_t(12, &[1, 3, 4, 4], Kind::Double);
        let noise = rand_t(13, &[1, 3, 4, 4], Kind::Double);
        for t in [2usize, 10, 500, 1000] {
            let got = crate::image::tensor_to_vec_f64(&s.posterior_step(&xt, &x0, t, Some(&noise)).unwrap());
            // Direct evaluation of the posterior formula from betas.
            let ab = |k: usize| -> f64 { (1..=k).map(|j| 1.0 - s.beta(j)).product() };
            let (ab_t, ab_p, a_t) = (ab(t), ab(t - 1), 1.0 - s.beta(t));
            let c0 = ab_p.sqrt() * (1.0 - a_t) / (1.0 - ab_t);
            let ct = a_t.sqrt() * (1.0 - ab_p) / (1.0 - ab_t);
            let var = (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - a_t);
            let xs = crate::image::tensor_to_vec_f64(&xt);
            let zs = crate::image::tensor_to_vec_f64(&x0);
            let ns = crate::image::tensor_to_vec_f64(&noise);
            for i in 0..got.len() {
                let want = c0 * zs[i] + ct * xs[i] + var.sqrt() * ns[i];
                assert!((got[i] - want).abs() < 1e-10, "t={t} i={i}");
            }

            // Constant image through the mean: coefficient sum evaluated directly.
            let c = Tensor::full([1, 3, 2, 2], 0.7, (Kind::Double, Device::Cpu));
            let out = s.posterior_step(&c, &c, t, None).unwrap();
            assert!(max_abs(&(out - 0.7 * (c0 + ct))) < 1e-12);
        }
    }

    #[test]
    fn ddpm_loss_examples() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = rand_t(14, &[2, 3, 4, 4], Kind::Float);
        let eps = rand_t(15, &[2, 3, 4, 4], Kind::Float);
        let perfect = ConstPredictor(eps.shallow_clone());
        let l = s.ddpm_loss(&perfect, &x0, 40, &eps).unwrap().double_value(&[]);
        assert_eq!(l, 0.0);
        let shifted = ConstPredictor(&eps + 0.5);
        let l = s.ddpm_loss(&shifted, &x0, 40, &eps).unwrap().double_value(&[]);
        assert!((l - 0.5).abs() < 1e-6);
        let other = rand_t(16, &[2, 3, 4, 4], Kind::Float);
        let l = s.ddpm_loss(&ConstPredictor(other.shallow_clone()), &x0, 40, &eps).unwrap().double_value(&[]);
        let a = crate::image::tensor_to_vec(&eps);
        let b = crate::image::tensor_to_vec(&other);
        let oracle: f64 = a.iter().zip(&b).map(|(x, y)| f64::from((x - y).abs())).sum::<f64>() / a.len() as f64;
        assert!((l - oracle).abs() < 1e-5);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let s = make_linear_schedule(20, 1e-4, 0.02).unwrap();
        let a = s.sample(&ZeroPredictor, &[2, 3, 4, 4], &mut SeedBundle::new(5).stream("s")).unwrap();
        let b = s.sample(&ZeroPredictor, &[2, 3, 4, 4], &mut SeedBundle::new(5).stream("s")).unwrap();
        let c = s.sample(&ZeroPredictor, &[2, 3, 4, 4], &mut SeedBundle::new(6).stream("s")).unwrap();
        assert!(a.equal(&b));
        assert!(!a.equal(&c));
        assert!(a.max().double_value(&[]) <= 1.0 && a.min().double_value(&[]) >= -1.0);
    }

    #[test]
    fn sampling_with_zero_predictor_is_the_affine_noise_trajectory() {
        // With eps_hat = 0, x0_hat = x_t / sqrt(ab_t); replay the same draws by hand.
        let s = make_linear_schedule(5, 0.1, 0.3).unwrap();
        let shape = [1i64, 3, 2, 2];
        let got = s.sample(&ZeroPredictor, &shape, &mut SeedBundle::new(9).stream("s")).unwrap();
        let mut rng = SeedBundle::new(9).stream("s");
        let mut x = crate::image::tensor_to_vec_f64(&randn(&mut rng, &shape, Kind::Float));
        for t in (1..=5).rev() {
            let (c0, ct) = s.posterior_coefficients(t);
            let noise = (t > 1).then(|| crate::image::tensor_to_vec_f64(&randn(&mut rng, &shape, Kind::Float)));
            for (i, v) in x.iter_mut().enumerate() {
                let x0 = *v / s.alpha_bar(t).sqrt();
                *v = c0 * x0 + ct * *v + noise.as_ref().map_or(0.0, |n| s.posterior_var(t).sqrt() * n[i]);
            }
        }
        let got = crate::image::tensor_to_vec_f64(&got);
        for (g, w) in got.iter().zip(&x) {
            assert!((g - w.clamp(-1.0, 1.0)).abs() < 1e-5);
        }
    }

    #[test]
    fn sample_timestep_range() {
        let s = make_linear_schedule(10, 1e-4, 0.02).unwrap();
        let mut rng = SeedBundle::new(1).stream("t");
        for _ in 0..100 {
            assert_eq!(s.sample_timestep(&mut rng, 5, 5).unwrap(), 5);
            let t = s.sample_timestep(&mut rng, 1, 10).unwrap();
            assert!((1..=10).contains(&t));
        }
        assert!(s.sample_timestep(&mut rng, 0, 5).is_err());
        assert!(s.sample_timestep(&mut rng, 6, 5).is_err());
        assert!(s.sample_timestep(&mut rng, 1, 11).is_err());
    }

    #[test]
    fn sample_timestep_is_uniform() {
        // Chi-square against the uniform multinomial, 10^5 draws over 10 bins.
        let s = make_linear_schedule(10, 1e-4, 0.02).unwrap();
        let mut rng = SeedBundle::new(77).stream("t");
        let n = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..n {
            counts[s.sample_timestep(&mut rng, 1, 10).unwrap() - 1] += 1;
        }
        let expected = n as f64 / 10.0;
        let sigma = (n as f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() < 3.0 * sigma);
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99.9th percentile of chi-square with 9 dof.
        assert!(chi2 < 27.88, "chi2 = {chi2}");
    }

    #[test]
    fn forward_variance_matches_schedule() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let eps = randn(&mut SeedBundle::new(3).stream("v"), &[1000, 3, 20, 20], Kind::Double);
        for t in [10usize, 300, 999] {
            let xt = s.forward_diffuse(&eps.zeros_like(), &eps, t).unwrap();
            let var = xt.var(true).double_value(&[]);
            let want = 1.0 - s.alpha_bar(t);
            assert!((var / want - 1.0).abs() < 0.05, "t={t}: {var} vs {want}");
        }
    }
}
