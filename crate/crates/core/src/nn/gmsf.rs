//! Global multi-scale fusion.
//!
//! Every scale is projected to a shared token width, tagged with a learned
//! per-scale embedding and flattened; the tokens of all scales are joined
//! into one sequence and mixed by Transformer blocks whose attention spans
//! every scale. The sequence is then split back, reshaped and projected to
//! each scale's original width.

use rand::Rng;

use super::attention::{attend, subsample, AttentionConfig, EfficientAttention};
use super::layers::{Conv2d, LayerNorm};
use super::params::{Bound, ParamId, ParamStore};
use super::transnext::EXPANSION;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const EMBED_INIT: f64 = 0.02;

/// Pre-norm Transformer block over a `B×C×N×1` token sequence whose keys
/// and values are sub-sampled scale by scale.
#[derive(Clone, Debug)]
struct TokenBlock {
    norm1: LayerNorm,
    attn: EfficientAttention,
    norm2: LayerNorm,
    fc1: Conv2d,
    fc2: Conv2d,
}

impl TokenBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize, cfg: AttentionConfig) -> Result<Self> {
        Ok(TokenBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width),
            attn: EfficientAttention::new(store, rng, &format!("{name}.attn"), width, cfg)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width),
            fc1: Conv2d::pointwise(store, rng, &format!("{name}.fc1"), width, EXPANSION * width),
            fc2: Conv2d::pointwise(store, rng, &format!("{name}.fc2"), EXPANSION * width, width),
        })
    }

    fn forward<'t>(&self, p: &Bound<'t>, tokens: &Var<'t>, sizes: &[(usize, usize)], name: &str) -> Result<Var<'t>> {
        let s = tokens.shape().to_vec();
        let (b, c, n) = (s[0], s[1], s[2]);
        let a = self.norm1.forward_channels(p, tokens)?;
        let q = self.attn.q.forward(p, &a)?;
        let k_all = self.attn.k.forward(p, &a)?;
        let v_all = self.attn.v.forward(p, &a)?;

        let k_target = self.attn.config().subsample_k;
        let mut keys = Vec::with_capacity(sizes.len());
        let mut values = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for &(h, w) in sizes {
            let per_scale = |all: &Var<'t>| -> Result<Var<'t>> {
                let map = all.narrow(2, offset, h * w)?.reshape([b, c, h, w])?;
                let small = subsample(&map, k_target)?;
                let m = small.shape()[2] * small.shape()[3];
                small.reshape([b, c, m])
            };
            keys.push(per_scale(&k_all)?);
            values.push(per_scale(&v_all)?);
            offset += h * w;
        }
        let k = Var::concat(&keys.iter().collect::<Vec<_>>(), 2)?;
        let v = Var::concat(&values.iter().collect::<Vec<_>>(), 2)?;
        let attended = {
            let _scope = p.tape().scope(name);
            attend(&q.reshape([b, c, n])?, &k, &v, self.attn.config().heads)?
        };
        let t = tokens.add(&self.attn.out.forward(p, &attended.reshape([b, c, n, 1])?)?)?;

        let h = self.norm2.forward_channels(p, &t)?;
        let h = self.fc1.forward(p, &h)?.gelu()?;
        t.add(&self.fc2.forward(p, &h)?)
    }
}

#[derive(Clone, Debug)]
pub struct Gmsf {
    name: String,
    widths: Vec<usize>,
    token_width: usize,
    proj_in: Vec<Conv2d>,
    embed: Vec<ParamId>,
    blocks: Vec<TokenBlock>,
    proj_out: Vec<Conv2d>,
}

impl Gmsf {
    /// Fusion over scales with channel counts `widths`. The token width is
    /// the largest of them; `depth` Transformer blocks mix the joined tokens.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        widths: &[usize],
        depth: usize,
        cfg: AttentionConfig,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Config("fusion needs at least one scale".into()));
        }
        if depth == 0 {
            return Err(Error::Config("fusion depth must be ≥ 1".into()));
        }
        let token_width = *widths.iter().max().expect("nonempty");
        let proj_in = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::pointwise(store, rng, &format!("{name}.in.{i}"), c, token_width))
            .collect();
        let embed = (0..widths.len())
            .map(|i| {
                let e = Tensor::rand_uniform([token_width], -EMBED_INIT, EMBED_INIT, rng);
                store.add(format!("{name}.embed.{i}"), e)
            })
            .collect();
        let blocks = (0..depth)
            .map(|d| TokenBlock::new(store, rng, &format!("{name}.block.{d}"), token_width, cfg))
            .collect::<Result<_>>()?;
        let proj_out = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::pointwise(store, rng, &format!("{name}.out.{i}"), token_width, c))
            .collect();
        Ok(Gmsf {
            name: name.to_string(),
            widths: widths.to_vec(),
            token_width,
            proj_in,
            embed,
            blocks,
            proj_out,
        })
    }

    pub fn token_width(&self) -> usize {
        self.token_width
    }

    pub fn scales(&self) -> usize {
        self.widths.len()
    }

    /// Fuses `maps` (one `B×Cᵢ×Hᵢ×Wᵢ` tensor per scale) and returns maps of
    /// the same shapes.
    pub fn forward<'t>(&self, p: &Bound<'t>, maps: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        if maps.is_empty() {
            return Err(Error::invalid("gmsf", "empty list of maps"));
        }
        if maps.len() != self.widths.len() {
            return Err(Error::invalid(
                "gmsf",
                format!("expected {} scales, got {}", self.widths.len(), maps.len()),
            ));
        }
        let batch = maps[0].shape()[0];
        let mut sizes = Vec::with_capacity(maps.len());
        let mut tokens = Vec::with_capacity(maps.len());
        for (i, m) in maps.iter().enumerate() {
            let s = m.shape();
            if s.len() != 4 || s[1] != self.widths[i] {
                return Err(Error::shape("gmsf", s, &[batch, self.widths[i]]));
            }
            if s[0] != batch {
                return Err(Error::invalid("gmsf", format!("inconsistent batch: {} vs {batch}", s[0])));
            }
            let (h, w) = (s[2], s[3]);
            sizes.push((h, w));
            let t = self.proj_in[i].forward(p, m)?.add_channel(p.get(self.embed[i]))?;
            tokens.push(t.reshape([batch, self.token_width, h * w])?);
        }
        let total: usize = sizes.iter().map(|(h, w)| h * w).sum();
        let mut t = Var::concat(&tokens.iter().collect::<Vec<_>>(), 2)?.reshape([batch, self.token_width, total, 1])?;
        for (d, block) in self.blocks.iter().enumerate() {
            t = block.forward(p, &t, &sizes, &format!("{}.block.{d}.attn", self.name))?;
        }
        let mut out = Vec::with_capacity(maps.len());
        let mut offset = 0;
        for (i, &(h, w)) in sizes.iter().enumerate() {
            let map = t.narrow(2, offset, h * w)?.reshape([batch, self.token_width, h, w])?;
            out.push(self.proj_out[i].forward(p, &map)?);
            offset += h * w;
        }
        Ok(out)
    }
}
