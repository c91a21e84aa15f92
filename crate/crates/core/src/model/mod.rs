//! The assembled U-shaped segmentation network.
//!
//! Encoder stage `s` (width `2^s·C`) is a pure convolution block for
//! `s < n1` and a TransNeXt block otherwise; every stage but the first is
//! preceded by 2×2 max pooling, so the deepest stage is the bottleneck.
//! All encoder outputs pass through the multi-scale fusion module, which
//! takes the place of skip connections. The decoder walks back up: each
//! level upsamples, then either concatenates the fused map of that scale
//! and applies a pure convolution block, or (at TransNeXt levels) uses it as
//! keys and values of a cross-attention block. A 1×1 convolution and a
//! sigmoid produce the vessel probability.

mod cost;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    downsample, AttentionConfig, AttentionVariant, Bound, Conv2d, Gmsf, ParamStore, PureConvBlock, TransNextBlock,
    Upsample,
};
use crate::tensor::Tensor;

pub use cost::{CostReport, CostRow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Pure convolution stages at the outer resolutions.
    pub n1: usize,
    /// TransNeXt stages at the inner resolutions.
    pub n2: usize,
    /// Width of the first stage; stage `s` has `2^s` times as many channels.
    pub base_channels: usize,
    pub heads: usize,
    /// Key/value token budget of every attention layer.
    pub subsample_k: usize,
    /// Side of the square input patch.
    pub patch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Transformer blocks inside the fusion module.
    pub gmsf_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n1: 1,
            n2: 3,
            base_channels: 32,
            heads: 4,
            subsample_k: 256,
            patch: 128,
            in_channels: 1,
            out_channels: 1,
            gmsf_depth: 1,
        }
    }
}

impl ModelConfig {
    pub fn stages(&self) -> usize {
        self.n1 + self.n2
    }

    /// Channel width of stage `s`.
    pub fn width(&self, s: usize) -> usize {
        self.base_channels << s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.stages() == 0 {
            return fail("n1 + n2 must be ≥ 1".into());
        }
        if self.stages() > 16 {
            return fail(format!("n1 + n2 = {} is unreasonably deep", self.stages()));
        }
        if self.base_channels == 0 {
            return fail("base_channels must be ≥ 1".into());
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return fail("in_channels and out_channels must be ≥ 1".into());
        }
        if self.heads == 0 {
            return fail("heads must be ≥ 1".into());
        }
        if self.subsample_k == 0 {
            return fail("subsample_k must be ≥ 1".into());
        }
        if self.gmsf_depth == 0 {
            return fail("gmsf_depth must be ≥ 1".into());
        }
        let factor = 1usize << self.stages();
        if self.patch == 0 || self.patch % factor != 0 {
            return fail(format!(
                "patch {} must be a positive multiple of 2^(n1+n2) = {factor}",
                self.patch
            ));
        }
        let attention_widths = (self.n1..self.stages()).map(|s| self.width(s)).chain([self.width(self.stages() - 1)]);
        for w in attention_widths {
            if w % self.heads != 0 {
                return fail(format!("attention width {w} is not divisible by heads = {}", self.heads));
            }
        }
        Ok(())
    }

    fn attention(&self, variant: AttentionVariant) -> AttentionConfig {
        AttentionConfig {
            heads: self.heads,
            subsample_k: self.subsample_k,
            variant,
        }
    }
}

#[derive(Clone, Debug)]
enum EncoderStage {
    Conv(PureConvBlock),
    Hybrid { proj: Conv2d, block: TransNextBlock },
}

#[derive(Clone, Debug)]
enum DecoderStage {
    Conv { up: Upsample, block: PureConvBlock },
    Hybrid { up: Upsample, block: TransNextBlock },
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    encoder: Vec<EncoderStage>,
    gmsf: Gmsf,
    /// Ordered from the deepest decoder level up to stage 0.
    decoder: Vec<DecoderStage>,
    head: Conv2d,
}

impl Model {
    /// Builds the network with parameters drawn deterministically from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stages = config.stages();

        let mut encoder = Vec::with_capacity(stages);
        for s in 0..stages {
            let cin = if s == 0 { config.in_channels } else { config.width(s - 1) };
            let w = config.width(s);
            let name = format!("enc.{s}");
            encoder.push(if s < config.n1 {
                EncoderStage::Conv(PureConvBlock::new(&mut store, &mut rng, &name, cin, w))
            } else {
                EncoderStage::Hybrid {
                    proj: Conv2d::pointwise(&mut store, &mut rng, &format!("{name}.proj"), cin, w),
                    block: TransNextBlock::new(
                        &mut store,
                        &mut rng,
                        &format!("{name}.block"),
                        w,
                        config.attention(AttentionVariant::SelfAttention),
                    )?,
                }
            });
        }

        let widths: Vec<usize> = (0..stages).map(|s| config.width(s)).collect();
        let gmsf = Gmsf::new(
            &mut store,
            &mut rng,
            "gmsf",
            &widths,
            config.gmsf_depth,
            config.attention(AttentionVariant::SelfAttention),
        )?;

        let mut decoder = Vec::with_capacity(stages.saturating_sub(1));
        for s in (0..stages.saturating_sub(1)).rev() {
            let w = config.width(s);
            let name = format!("dec.{s}");
            let up = Upsample::new(&mut store, &mut rng, &format!("{name}.up"), config.width(s + 1), w);
            decoder.push(if s < config.n1 {
                DecoderStage::Conv {
                    up,
                    block: PureConvBlock::new(&mut store, &mut rng, &name, 2 * w, w),
                }
            } else {
                DecoderStage::Hybrid {
                    up,
                    block: TransNextBlock::new(
                        &mut store,
                        &mut rng,
                        &format!("{name}.block"),
                        w,
                        config.attention(AttentionVariant::Cross),
                    )?,
                }
            });
        }

        let head = Conv2d::pointwise(&mut store, &mut rng, "head", config.width(0), config.out_channels);
        Ok(Model {
            config,
            params: store,
            encoder,
            gmsf,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Maps a `B×in×P×P` batch to `B×out×P×P` probabilities.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.patch || s[3] != c.patch {
            return Err(Error::invalid(
                "forward",
                format!(
                    "expected input B×{}×{}×{}, got {s:?}",
                    c.in_channels, c.patch, c.patch
                ),
            ));
        }

        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        for (i, stage) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = downsample(&h)?;
            }
            h = match stage {
                EncoderStage::Conv(block) => block.forward(p, &h)?,
                EncoderStage::Hybrid { proj, block } => block.forward(p, &proj.forward(p, &h)?, None)?,
            };
            skips.push(h.clone());
        }

        let fused = self.gmsf.forward(p, &skips)?;
        let mut d = fused.last().expect("at least one stage").clone();
        for (stage, skip) in self.decoder.iter().zip(fused.iter().rev().skip(1)) {
            d = match stage {
                DecoderStage::Conv { up, block } => {
                    let u = up.forward(p, &d)?;
                    block.forward(p, &Var::concat(&[&u, skip], 1)?)?
                }
                DecoderStage::Hybrid { up, block } => block.forward(p, &up.forward(p, &d)?, Some(skip))?,
            };
        }
        self.head.forward(p, &d)?.sigmoid()
    }

    /// Gradient-free forward pass on a batch.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::inference();
        let bound = self.params.bind(&tape);
        let input = tape.constant(x.clone());
        Ok(self.forward(&bound, &input)?.value().clone())
    }

    /// Parameter and multiply-accumulate counts of one forward pass at batch
    /// size 1, broken down by layer.
    pub fn cost(&self) -> Result<CostReport> {
        cost::count(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n1: 1,
            n2: 1,
            base_channels: 4,
            patch: 16,
            ..Default::default()
        }
    }

    #[test]
    fn divisibility_law() {
        let ok = ModelConfig {
            patch: 96,
            ..Default::default()
        };
        assert!(ok.validate().is_ok());
        let bad = ModelConfig {
            patch: 100,
            ..Default::default()
        };
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("2^(n1+n2)"), "{err}");
    }

    #[test]
    fn heads_must_divide_attention_widths() {
        let cfg = ModelConfig {
            base_channels: 3,
            ..tiny()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::build(tiny(), 7).unwrap();
        let b = Model::build(tiny(), 7).unwrap();
        let c = Model::build(tiny(), 8).unwrap();
        assert!(a.params().iter().zip(b.params().iter()).all(|(x, y)| x == y));
        assert!(a.params().iter().zip(c.params().iter()).any(|(x, y)| x.1 != y.1));
    }

    #[test]
    fn output_shape_and_range() {
        let model = Model::build(tiny(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::rand_uniform([2, 1, 16, 16], 0.0, 1.0, &mut rng);
        let y = model.predict(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn wrong_patch_is_rejected() {
        let model = Model::build(tiny(), 1).unwrap();
        assert!(model.predict(&Tensor::zeros([1, 1, 32, 32])).is_err());
    }

    #[test]
    fn single_stage_has_no_decoder() {
        let cfg = ModelConfig {
            n1: 1,
            n2: 0,
            base_channels: 4,
            patch: 8,
            ..Default::default()
        };
        let model = Model::build(cfg, 0).unwrap();
        let y = model.predict(&Tensor::full([1, 1, 8, 8], 0.3)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 8]);
    }
}
