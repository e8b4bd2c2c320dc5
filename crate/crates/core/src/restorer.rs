//! Small restoration backbones `z = g(y)` with a sigmoid-bounded output.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tch::nn::{self, VarStore};
use tch::{Device, Tensor};

use crate::checkpoint::{self, CheckpointManifest, LoadedCheckpoint};
use crate::error::{ensure_arg, ensure_config, Error, Result};
use crate::image::{ImageBatch, Range};
use crate::nn::{conv1x1, conv3x3, init_params};
use crate::rng::Rng;

pub const CHECKPOINT_KIND: &str = "restorer";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    UnetLite,
    PlainCnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestorerConfig {
    pub arch: Arch,
    pub base_channels: i64,
    /// Conv layers for `plain_cnn`, down/up stages for `unet_lite`.
    pub depth: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_budget: Option<usize>,
}

impl RestorerConfig {
    /// Parameter-budgeted plain CNN (under 100K parameters).
    pub fn efficient() -> Self {
        Self {
            arch: Arch::PlainCnn,
            base_channels: 32,
            depth: 5,
            param_budget: Some(100_000),
        }
    }

    /// U-Net preset in the 1-3M parameter range.
    pub fn standard() -> Self {
        Self {
            arch: Arch::UnetLite,
            base_channels: 48,
            depth: 3,
            param_budget: Some(3_000_000),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_config!(self.depth >= 1, "restorer.depth must be at least 1");
        ensure_config!(self.base_channels >= 1, "restorer.base_channels must be positive");
        Ok(())
    }
}

#[derive(Debug)]
enum Net {
    Plain(Vec<nn::Conv2D>),
    Unet {
        conv_in: nn::Conv2D,
        down: Vec<(nn::Conv2D, nn::Conv2D)>,
        mid: nn::Conv2D,
        up: Vec<(nn::Conv2D, nn::Conv2D)>,
        head: nn::Conv2D,
    },
}

impl Net {
    fn new(p: &nn::Path, cfg: &RestorerConfig) -> Self {
        let b = cfg.base_channels;
        match cfg.arch {
            Arch::PlainCnn => {
                let mut layers = Vec::with_capacity(cfg.depth);
                for i in 0..cfg.depth {
                    let c_in = if i == 0 { 3 } else { b };
                    let c_out = if i + 1 == cfg.depth { 3 } else { b };
                    layers.push(conv3x3(p / "conv" / i, c_in, c_out));
                }
                Net::Plain(layers)
            }
            Arch::UnetLite => {
                let ch = |i: usize| b << i;
                let mut down = Vec::with_capacity(cfg.depth);
                let mut c_prev = b;
                for i in 0..cfg.depth {
                    let q = p / "down" / i;
                    down.push((conv3x3(&q / "a", c_prev, ch(i)), conv3x3(&q / "b", ch(i), ch(i))));
                    c_prev = ch(i);
                }
                let mid = conv3x3(p / "mid", c_prev, c_prev);
                let mut up = Vec::with_capacity(cfg.depth);
                for i in (0..cfg.depth).rev() {
                    let q = p / "up" / i;
                    up.push((conv3x3(&q / "a", c_prev + ch(i), ch(i)), conv3x3(&q / "b", ch(i), ch(i))));
                    c_prev = ch(i);
                }
                Net::Unet {
                    conv_in: conv3x3(p / "conv_in", 3, b),
                    down,
                    mid,
                    up,
                    head: conv1x1(p / "head", b, 3),
                }
            }
        }
    }

    fn forward(&self, y: &Tensor) -> Tensor {
        match self {
            Net::Plain(layers) => {
                let mut x = y.shallow_clone();
                for (i, l) in layers.iter().enumerate() {
                    x = x.apply(l);
                    if i + 1 < layers.len() {
                        x = x.relu();
                    }
                }
                x.sigmoid()
            }
            Net::Unet {
                conv_in,
                down,
                mid,
                up,
                head,
            } => {
                let mut x = y.apply(conv_in).relu();
                let mut skips = Vec::with_capacity(down.len());
                for (a, b) in down {
                    x = x.apply(a).relu().apply(b).relu();
                    skips.push(x.shallow_clone());
                    x = x.avg_pool2d([2, 2], [2, 2], [0, 0], false, true, None::<i64>);
                }
                x = x.apply(mid).relu();
                for ((a, b), skip) in up.iter().zip(skips.iter().rev()) {
                    x = x.upsample_nearest2d([skip.size()[2], skip.size()[3]], None, None);
                    x = Tensor::cat(&[&x, skip], 1).apply(a).relu().apply(b).relu();
                }
                x.apply(head).sigmoid()
            }
        }
    }
}

#[derive(Debug)]
pub struct Restorer {
    cfg: RestorerConfig,
    vs: VarStore,
    net: Net,
}

impl Restorer {
    pub fn new(cfg: RestorerConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let vs = VarStore::new(Device::Cpu);
        let net = Net::new(&vs.root(), &cfg);
        init_params(&vs, rng);
        let count = crate::nn::param_count(&vs);
        if let Some(budget) = cfg.param_budget {
            if count > budget {
                return Err(Error::Config(format!(
                    "restorer has {count} parameters, over its budget of {budget}"
                )));
            }
        }
        Ok(Self { cfg, vs, net })
    }

    pub fn config(&self) -> &RestorerConfig {
        &self.cfg
    }

    pub fn var_store(&self) -> &VarStore {
        &self.vs
    }

    pub fn count_parameters(&self) -> usize {
        crate::nn::param_count(&self.vs)
    }

    pub fn checksum(&self) -> String {
        crate::nn::checksum(&self.vs)
    }

    pub fn restore(&self, y: &ImageBatch) -> Result<ImageBatch> {
        ensure_arg!(y.range() == Range::Unit, "restorer expects [0,1] input");
        if self.cfg.arch == Arch::UnetLite {
            let [_, _, h, w] = y.shape();
            let m = 1i64 << self.cfg.depth;
            ensure_arg!(
                h % m == 0 && w % m == 0,
                "input {h}x{w} is not divisible by 2^depth = {m}"
            );
        }
        ImageBatch::unit(self.net.forward(y.tensor()))
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        crate::nn::sorted_variables(&self.vs)
    }

    pub fn manifest(&self, training_steps: u64, seed: u64) -> Result<CheckpointManifest> {
        CheckpointManifest::new(CHECKPOINT_KIND, &self.cfg, training_steps, seed)
    }

    pub fn save_checkpoint(&self, path: &Path, training_steps: u64, seed: u64) -> Result<()> {
        checkpoint::save(path, &self.manifest(training_steps, seed)?, &self.named_tensors())
    }

    pub fn load_checkpoint(path: &Path, expected: Option<&RestorerConfig>) -> Result<(Self, LoadedCheckpoint)> {
        let loaded = checkpoint::load(path, CHECKPOINT_KIND)?;
        if let Some(expected) = expected {
            checkpoint::compare_config(&loaded.manifest.config, expected)?;
        }
        let cfg: RestorerConfig = loaded.manifest.config_as(path)?;
        cfg.validate()?;
        let vs = VarStore::new(Device::Cpu);
        let net = Net::new(&vs.root(), &cfg);
        loaded.apply_to(&vs)?;
        Ok((Self { cfg, vs, net }, loaded))
    }
}
