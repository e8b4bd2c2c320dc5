//! Noise-prediction network: a small U-Net whose bottleneck activation is
//! exposed as the h-space feature.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tch::nn::{self, Module, VarStore};
use tch::{Device, Kind, Tensor};

use crate::checkpoint::{self, CheckpointManifest, LoadedCheckpoint};
use crate::diffusion::{ScheduleDescriptor, Timesteps};
use crate::error::{ensure_arg, ensure_config, Result};
use crate::nn::{conv1x1, conv3x3, group_norm, init_params};
use crate::rng::Rng;

pub const CHECKPOINT_KIND: &str = "denoiser";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub resolution: i64,
    pub base_channels: i64,
    pub depth: usize,
    pub time_embed_dim: i64,
    pub h_channels: i64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            base_channels: 64,
            depth: 3,
            time_embed_dim: 128,
            h_channels: 128,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_config!(
            self.resolution > 0 && self.base_channels > 0 && self.depth > 0 && self.h_channels > 0,
            "denoiser dimensions must be positive"
        );
        ensure_config!(
            self.time_embed_dim > 0 && self.time_embed_dim % 2 == 0,
            "denoiser.time_embed_dim must be positive and even, got {}",
            self.time_embed_dim
        );
        ensure_config!(
            self.resolution % (1 << self.depth) == 0,
            "denoiser.resolution {} is not divisible by 2^depth = {}",
            self.resolution,
            1 << self.depth
        );
        Ok(())
    }

    /// Channel width of encoder/decoder stage `i`.
    pub fn stage_channels(&self, i: usize) -> i64 {
        self.base_channels * if i == 0 { 1 } else { 2 }
    }

    pub fn h_resolution(&self) -> i64 {
        self.resolution >> self.depth
    }
}

/// One denoiser evaluation: the noise estimate and the bottleneck feature.
#[derive(Debug)]
pub struct DenoiserOutput {
    pub eps_hat: Tensor,
    pub h: Tensor,
}

/// Anything that predicts noise from `(x_t, t)`.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor, t: &Timesteps) -> Result<DenoiserOutput>;
}

/// Sinusoidal timestep encoding, `[sin(t w_k), cos(t w_k)]`.
pub fn timestep_embedding(ts: &[usize], dim: i64, kind: Kind) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim as usize);
    for &t in ts {
        let t = t as f64;
        let freqs = (0..half).map(|k| (-(10_000f64.ln()) * k as f64 / half as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|w| ((t * w).sin(), (t * w).cos())).unzip();
        data.extend(sin);
        data.extend(cos);
    }
    Tensor::from_slice(&data).reshape([ts.len() as i64, dim]).to_kind(kind)
}

#[derive(Debug)]
struct ResBlock {
    norm1: nn::GroupNorm,
    conv1: nn::Conv2D,
    time: nn::Linear,
    norm2: nn::GroupNorm,
    conv2: nn::Conv2D,
    skip: Option<nn::Conv2D>,
}

impl ResBlock {
    fn new(p: nn::Path, c_in: i64, c_out: i64, t_dim: i64) -> Self {
        Self {
            norm1: group_norm(&p / "norm1", c_in),
            conv1: conv3x3(&p / "conv1", c_in, c_out),
            time: nn::linear(&p / "time", t_dim, c_out, Default::default()),
            norm2: group_norm(&p / "norm2", c_out),
            conv2: conv3x3(&p / "conv2", c_out, c_out),
            skip: (c_in != c_out).then(|| conv1x1(&p / "skip", c_in, c_out)),
        }
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Tensor {
        let h = x.apply(&self.norm1).silu().apply(&self.conv1);
        let h = h + self.time.forward(temb).unsqueeze(-1).unsqueeze(-1);
        let h = h.apply(&self.norm2).silu().apply(&self.conv2);
        match &self.skip {
            Some(s) => x.apply(s) + h,
            None => x + h,
        }
    }
}

#[derive(Debug)]
struct UNet {
    cfg: DenoiserConfig,
    time1: nn::Linear,
    time2: nn::Linear,
    conv_in: nn::Conv2D,
    down: Vec<ResBlock>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    out_norm: nn::GroupNorm,
    out_conv: nn::Conv2D,
}

/// Encoder result: the h-space tap plus what the decoder needs besides it.
#[derive(Debug)]
pub struct Encoded {
    pub h: Tensor,
    skips: Vec<Tensor>,
    temb: Tensor,
}

impl UNet {
    fn new(p: &nn::Path, cfg: DenoiserConfig) -> Self {
        let t_dim = cfg.time_embed_dim;
        let base = cfg.base_channels;
        let mut down = Vec::with_capacity(cfg.depth);
        let mut c_prev = base;
        for i in 0..cfg.depth {
            let c = cfg.stage_channels(i);
            down.push(ResBlock::new(p / "down" / i, c_prev, c, t_dim));
            c_prev = c;
        }
        let mid = ResBlock::new(p / "mid", c_prev, cfg.h_channels, t_dim);
        let mut up = Vec::with_capacity(cfg.depth);
        let mut c_prev = cfg.h_channels;
        for i in (0..cfg.depth).rev() {
            let c = cfg.stage_channels(i);
            up.push(ResBlock::new(p / "up" / i, c_prev + c, c, t_dim));
            c_prev = c;
        }
        Self {
            cfg,
            time1: nn::linear(p / "time1", t_dim, t_dim, Default::default()),
            time2: nn::linear(p / "time2", t_dim, t_dim, Default::default()),
            conv_in: conv3x3(p / "conv_in", 3, base),
            down,
            mid,
            up,
            out_norm: group_norm(p / "out_norm", base),
            out_conv: conv3x3(p / "out_conv", base, 3),
        }
    }

    fn encode(&self, x: &Tensor, ts: &[usize]) -> Encoded {
        let temb = timestep_embedding(ts, self.cfg.time_embed_dim, x.kind());
        let temb = self.time2.forward(&self.time1.forward(&temb).silu()).silu();
        let mut h = x.apply(&self.conv_in);
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for block in &self.down {
            h = block.forward(&h, &temb);
            skips.push(h.shallow_clone());
            h = h.avg_pool2d([2, 2], [2, 2], [0, 0], false, true, None::<i64>);
        }
        let h = self.mid.forward(&h, &temb);
        Encoded { h, skips, temb }
    }

    fn decode(&self, h: &Tensor, enc: &Encoded) -> Tensor {
        let mut x = h.shallow_clone();
        for (block, skip) in self.up.iter().zip(enc.skips.iter().rev()) {
            let (sh, sw) = (skip.size()[2], skip.size()[3]);
            x = x.upsample_nearest2d([sh, sw], None, None);
            x = block.forward(&Tensor::cat(&[&x, skip], 1), &enc.temb);
        }
        x.apply(&self.out_norm).silu().apply(&self.out_conv)
    }
}

/// Trainable denoiser owning its parameters.
#[derive(Debug)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    vs: VarStore,
    net: UNet,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let vs = VarStore::new(Device::Cpu);
        let net = UNet::new(&vs.root(), cfg);
        init_params(&vs, rng);
        Ok(Self { cfg, vs, net })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn var_store(&self) -> &VarStore {
        &self.vs
    }

    pub fn param_count(&self) -> usize {
        crate::nn::param_count(&self.vs)
    }

    pub fn checksum(&self) -> String {
        crate::nn::checksum(&self.vs)
    }

    /// Converts parameters to f64, for finite-difference checks.
    pub fn to_double(mut self) -> Self {
        self.vs.double();
        self
    }

    fn check_input(&self, x_t: &Tensor, t: &Timesteps) -> Result<Vec<usize>> {
        let size = x_t.size();
        ensure_arg!(
            size.len() == 4 && size[1] == 3 && size[2] == self.cfg.resolution && size[3] == self.cfg.resolution,
            "denoiser expects (N, 3, {r}, {r}) input, got {size:?}",
            r = self.cfg.resolution
        );
        let ts = t.expand(size[0] as usize);
        ensure_arg!(ts.iter().all(|&t| t >= 1), "timesteps are 1-based");
        Ok(ts)
    }

    /// `eps_hat = D(E(x_t, t))` with `h = E(x_t, t)`.
    pub fn denoise_with_h(&self, x_t: &Tensor, t: &Timesteps) -> Result<DenoiserOutput> {
        self.denoise_with_edit(x_t, t, |h| h.shallow_clone())
    }

    /// Like [`Self::denoise_with_h`], but the decoder continues from `edit(h)`.
    /// The returned `h` is the edited feature.
    pub fn denoise_with_edit(
        &self,
        x_t: &Tensor,
        t: &Timesteps,
        edit: impl FnOnce(&Tensor) -> Tensor,
    ) -> Result<DenoiserOutput> {
        let ts = self.check_input(x_t, t)?;
        let enc = self.net.encode(x_t, &ts);
        let h = edit(&enc.h);
        ensure_arg!(h.size() == enc.h.size(), "edited h changed shape");
        let eps_hat = self.net.decode(&h, &enc);
        Ok(DenoiserOutput { eps_hat, h })
    }

    /// Stops parameter updates while keeping gradients flowing to inputs.
    pub fn freeze(mut self) -> FrozenDenoiser {
        self.vs.freeze();
        FrozenDenoiser { inner: self }
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        crate::nn::sorted_variables(&self.vs)
    }

    pub fn manifest(&self, schedule: ScheduleDescriptor, training_steps: u64, seed: u64) -> Result<CheckpointManifest> {
        let mut m = CheckpointManifest::new(CHECKPOINT_KIND, &self.cfg, training_steps, seed)?;
        m.schedule = Some(schedule);
        Ok(m)
    }

    pub fn save_checkpoint(&self, path: &Path, schedule: ScheduleDescriptor, training_steps: u64, seed: u64) -> Result<()> {
        checkpoint::save(path, &self.manifest(schedule, training_steps, seed)?, &self.named_tensors())
    }

    /// Loads a checkpoint, rejecting it if its config differs from `expected`.
    pub fn load_checkpoint(path: &Path, expected: Option<&DenoiserConfig>) -> Result<(Self, LoadedCheckpoint)> {
        let loaded = checkpoint::load(path, CHECKPOINT_KIND)?;
        if let Some(expected) = expected {
            checkpoint::compare_config(&loaded.manifest.config, expected)?;
        }
        let cfg: DenoiserConfig = loaded.manifest.config_as(path)?;
        cfg.validate()?;
        let vs = VarStore::new(Device::Cpu);
        let net = UNet::new(&vs.root(), cfg);
        loaded.apply_to(&vs)?;
        Ok((Self { cfg, vs, net }, loaded))
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, x_t: &Tensor, t: &Timesteps) -> Result<DenoiserOutput> {
        self.denoise_with_h(x_t, t)
    }
}

/// Read-only denoiser. Its parameters never require gradients and it hands
/// out no handle an optimizer could update.
#[derive(Debug)]
pub struct FrozenDenoiser {
    inner: Denoiser,
}

impl FrozenDenoiser {
    pub fn load(path: &Path, expected: Option<&DenoiserConfig>) -> Result<(Self, LoadedCheckpoint)> {
        let (d, loaded) = Denoiser::load_checkpoint(path, expected)?;
        Ok((d.freeze(), loaded))
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.inner.cfg
    }

    pub fn checksum(&self) -> String {
        self.inner.checksum()
    }

    pub fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    pub fn is_frozen(&self) -> bool {
        self.inner.vs.variables().values().all(|v| !v.requires_grad())
    }

    pub fn denoise_with_h(&self, x_t: &Tensor, t: &Timesteps) -> Result<DenoiserOutput> {
        self.inner.denoise_with_h(x_t, t)
    }

    pub fn denoise_with_edit(
        &self,
        x_t: &Tensor,
        t: &Timesteps,
        edit: impl FnOnce(&Tensor) -> Tensor,
    ) -> Result<DenoiserOutput> {
        self.inner.denoise_with_edit(x_t, t, edit)
    }

    pub fn to_double(self) -> Self {
        self.inner.to_double().freeze()
    }
}

impl NoisePredictor for FrozenDenoiser {
    fn predict(&self, x_t: &Tensor, t: &Timesteps) -> Result<DenoiserOutput> {
        self.denoise_with_h(x_t, t)
    }
}
