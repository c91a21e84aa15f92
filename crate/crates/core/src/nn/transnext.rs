use rand::Rng;

use super::attention::{AttentionConfig, AttentionVariant, EfficientAttention};
use super::layers::{Conv2d, LayerNorm};
use super::params::{Bound, ParamStore};
use crate::autodiff::{Conv2dSpec, Var};
use crate::error::{Error, Result};

pub const EXPANSION: usize = 4;

/// `LN → 1×1 (C→4C) → GELU → 1×1 (4C→C)`, optionally preceded by a 7×7
/// depthwise convolution.
#[derive(Clone, Debug)]
struct InvertedBottleneck {
    depthwise: Option<Conv2d>,
    norm: LayerNorm,
    expand: Conv2d,
    reduce: Conv2d,
}

impl InvertedBottleneck {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize, depthwise: bool) -> Self {
        let depthwise = depthwise.then(|| {
            let spec = Conv2dSpec {
                stride: 1,
                pad: 3,
                groups: channels,
            };
            Conv2d::new(store, rng, &format!("{name}.dw"), channels, channels, 7, spec, true)
        });
        InvertedBottleneck {
            depthwise,
            norm: LayerNorm::new(store, &format!("{name}.norm"), channels),
            expand: Conv2d::pointwise(store, rng, &format!("{name}.expand"), channels, EXPANSION * channels),
            reduce: Conv2d::pointwise(store, rng, &format!("{name}.reduce"), EXPANSION * channels, channels),
        }
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let h = match &self.depthwise {
            Some(dw) => dw.forward(p, x)?,
            None => x.clone(),
        };
        let h = self.norm.forward_channels(p, &h)?;
        let h = self.expand.forward(p, &h)?.gelu()?;
        self.reduce.forward(p, &h)
    }
}

/// Hybrid ConvNeXt / Transformer block with three pre-norm residuals:
///
/// 1. `x + reduce(GELU(expand(LN(DW7×7(x)))))`
/// 2. `y + MHSA(LN(y))`, or cross attention against a second map
/// 3. `z + reduce(GELU(expand(LN(z))))`
///
/// Width and resolution are preserved.
#[derive(Clone, Debug)]
pub struct TransNextBlock {
    conv: InvertedBottleneck,
    attn_norm: LayerNorm,
    kv_norm: Option<LayerNorm>,
    attn: EfficientAttention,
    mlp: InvertedBottleneck,
    channels: usize,
}

impl TransNextBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        cfg: AttentionConfig,
    ) -> Result<Self> {
        let conv = InvertedBottleneck::new(store, rng, &format!("{name}.conv"), channels, true);
        let attn_norm = LayerNorm::new(store, &format!("{name}.attn_norm"), channels);
        let kv_norm = (cfg.variant == AttentionVariant::Cross)
            .then(|| LayerNorm::new(store, &format!("{name}.kv_norm"), channels));
        let attn = EfficientAttention::new(store, rng, &format!("{name}.attn"), channels, cfg)?;
        let mlp = InvertedBottleneck::new(store, rng, &format!("{name}.mlp"), channels, false);
        Ok(TransNextBlock {
            conv,
            attn_norm,
            kv_norm,
            attn,
            mlp,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn attention(&self) -> &EfficientAttention {
        &self.attn
    }

    /// Applies the block. `kv` supplies keys/values for the cross-attention
    /// variant and must be `None` for self-attention blocks.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>, kv: Option<&Var<'t>>) -> Result<Var<'t>> {
        let y = x.add(&self.conv.forward(p, x)?)?;
        let normed = self.attn_norm.forward_channels(p, &y)?;
        let attended = match (&self.kv_norm, kv) {
            (Some(kv_norm), Some(kv)) => {
                let kv = kv_norm.forward_channels(p, kv)?;
                self.attn.cross_attention(p, &normed, &kv)?
            }
            (None, None) => self.attn.self_attention(p, &normed)?,
            (Some(_), None) => return Err(Error::invalid("transnext", "cross-attention block needs a key/value map")),
            (None, Some(_)) => return Err(Error::invalid("transnext", "self-attention block got a key/value map")),
        };
        let z = y.add(&attended)?;
        z.add(&self.mlp.forward(p, &z)?)
    }
}
