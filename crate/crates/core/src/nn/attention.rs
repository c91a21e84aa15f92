//! Multi-head attention with sub-sampled keys and values.
//!
//! Queries keep all `n = H·W` positions while keys and values are resized
//! to at most `k` positions, so each head costs `O(n·k·d)` rather than
//! `O(n²·d)`.

use rand::Rng;

use super::layers::Conv2d;
use super::params::{Bound, ParamStore};
use crate::autodiff::Var;
use crate::error::{Error, Result};

pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_SUBSAMPLE_K: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionVariant {
    /// Queries, keys and values from the same map.
    SelfAttention,
    /// Queries from one map, keys and values from another.
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    /// Target number of key/value tokens after sub-sampling.
    pub subsample_k: usize,
    pub variant: AttentionVariant,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            heads: DEFAULT_HEADS,
            subsample_k: DEFAULT_SUBSAMPLE_K,
            variant: AttentionVariant::SelfAttention,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::Config("attention heads must be ≥ 1".into()));
        }
        if self.subsample_k == 0 {
            return Err(Error::Config("subsample_k must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Per-head width for `channels`, which must split evenly over heads.
    pub fn head_dim(&self, channels: usize) -> Result<usize> {
        self.validate()?;
        if channels % self.heads != 0 {
            return Err(Error::invalid(
                "attention",
                format!("{channels} channels not divisible by {} heads", self.heads),
            ));
        }
        Ok(channels / self.heads)
    }
}

/// Spatial size keys/values are resized to: unchanged when the map already
/// has at most `k` positions, otherwise `⌈√k⌉` per side (clamped to the map).
pub fn subsample_size(h: usize, w: usize, k: usize) -> (usize, usize) {
    if h * w <= k {
        return (h, w);
    }
    let side = (k as f64).sqrt().ceil() as usize;
    (h.min(side), w.min(side))
}

/// Resizes a `B×C×H×W` key or value map to at most `k` positions.
pub fn subsample<'t>(map: &Var<'t>, k: usize) -> Result<Var<'t>> {
    let s = map.shape();
    let (h, w) = subsample_size(s[2], s[3], k);
    if (h, w) == (s[2], s[3]) {
        return Ok(map.clone());
    }
    map.bilinear_resize(h, w)
}

/// Scaled dot-product attention over heads.
///
/// `q` is `B×C×n`, `k` and `v` are `B×C×m`; channel `c` belongs to head
/// `c / (C / heads)`. For every head the scores `Q·Kᵀ/√d` (`n×m`) are
/// normalised over the key axis and applied to `V`. Returns `B×C×n`.
pub fn attend<'t>(q: &Var<'t>, k: &Var<'t>, v: &Var<'t>, heads: usize) -> Result<Var<'t>> {
    let (qs, ks) = (q.shape().to_vec(), k.shape().to_vec());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[1] != ks[1] || k.shape() != v.shape() {
        return Err(Error::shape("attend", &qs, &ks));
    }
    let (b, c, n, m) = (qs[0], qs[1], qs[2], ks[2]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::invalid("attend", format!("{c} channels not divisible by {heads} heads")));
    }
    let d = c / heads;
    let qh = q.reshape([b * heads, d, n])?;
    let kh = k.reshape([b * heads, d, m])?;
    let vh = v.reshape([b * heads, d, m])?;
    let scores = qh.bmm_tn(&kh)?.scale(1.0 / (d as f64).sqrt())?;
    let probs = scores.softmax(2)?;
    // (P·V)ᵀ = V·Pᵀ keeps the channels-first layout.
    vh.bmm_nt(&probs)?.reshape([b, c, n])
}

/// Efficient multi-head attention on channels-first maps. Q, K and V are 1×1
/// convolution projections; K and V are sub-sampled bilinearly before the
/// dot products and the concatenated heads pass through an output 1×1
/// projection.
#[derive(Clone, Debug)]
pub struct EfficientAttention {
    name: String,
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub out: Conv2d,
    cfg: AttentionConfig,
}

impl EfficientAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        cfg: AttentionConfig,
    ) -> Result<Self> {
        cfg.head_dim(channels)?;
        Ok(EfficientAttention {
            name: name.to_string(),
            q: Conv2d::pointwise(store, rng, &format!("{name}.q"), channels, channels),
            k: Conv2d::pointwise(store, rng, &format!("{name}.k"), channels, channels),
            v: Conv2d::pointwise(store, rng, &format!("{name}.v"), channels, channels),
            out: Conv2d::pointwise(store, rng, &format!("{name}.out"), channels, channels),
            cfg,
        })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    pub fn self_attention<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        self.cross_attention(p, x, x)
    }

    /// Queries from `q_src`, keys and values from `kv_src`. Both share batch
    /// and channel count; spatial sizes may differ. The output has the
    /// shape of `q_src`.
    pub fn cross_attention<'t>(&self, p: &Bound<'t>, q_src: &Var<'t>, kv_src: &Var<'t>) -> Result<Var<'t>> {
        let (qs, ks) = (q_src.shape().to_vec(), kv_src.shape().to_vec());
        if qs.len() != 4 || ks.len() != 4 || qs[0] != ks[0] || qs[1] != ks[1] {
            return Err(Error::shape("cross_attention", &qs, &ks));
        }
        if qs[1] != self.q.cin {
            return Err(Error::invalid(
                "attention",
                format!("expected {} channels, got {}", self.q.cin, qs[1]),
            ));
        }
        let q = self.q.forward(p, q_src)?;
        let k = subsample(&self.k.forward(p, kv_src)?, self.cfg.subsample_k)?;
        let v = subsample(&self.v.forward(p, kv_src)?, self.cfg.subsample_k)?;
        let (b, c) = (qs[0], qs[1]);
        let m = k.shape()[2] * k.shape()[3];
        let attended = {
            let _scope = p.tape().scope(&self.name);
            attend(
                &q.reshape([b, c, qs[2] * qs[3]])?,
                &k.reshape([b, c, m])?,
                &v.reshape([b, c, m])?,
                self.cfg.heads,
            )?
        };
        self.out.forward(p, &attended.reshape(qs)?)
    }

    /// Multiply-accumulates of one call on a `batch×C×H×W` query map with
    /// keys from an `kh×kw` map.
    pub fn macs(&self, batch: usize, (h, w): (usize, usize), (kh, kw): (usize, usize)) -> u64 {
        let c = self.q.cin as u64;
        let n = (h * w) as u64;
        let n_kv = (kh * kw) as u64;
        let (sh, sw) = subsample_size(kh, kw, self.cfg.subsample_k);
        let m = (sh * sw) as u64;
        // q and out projections at the query size, k and v at the source
        // size, then Q·Kᵀ and P·V over every head (heads·d = C).
        batch as u64 * (2 * n * c * c + 2 * n_kv * c * c + 2 * n * m * c)
    }
}
