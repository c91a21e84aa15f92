use rand::Rng;

use super::params::{kaiming_uniform, Bound, ParamId, ParamStore};
use crate::autodiff::{conv2d, Conv2dSpec, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Convolution layer with Kaiming-uniform weights and zero bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    name: String,
    weight: ParamId,
    bias: Option<ParamId>,
    spec: Conv2dSpec,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Self {
        let cin_g = cin / spec.groups;
        let shape = [cout, cin_g, kernel, kernel];
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&shape, cin_g * kernel * kernel, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([cout])));
        Conv2d {
            name: name.to_string(),
            weight,
            bias,
            spec,
            cin,
            cout,
            kernel,
        }
    }

    /// 1×1 convolution with bias.
    pub fn pointwise<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(store, rng, name, cin, cout, 1, Conv2dSpec::default(), true)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let _scope = p.tape().scope(&self.name);
        conv2d(x, p.get(self.weight), self.bias.map(|b| p.get(b)), self.spec)
    }
}

/// Layer normalisation with learned affine, γ=1 and β=0 at init.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels])),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    pub fn beta(&self) -> ParamId {
        self.beta
    }

    /// Normalises over the last axis.
    pub fn forward_last<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta), self.eps)
    }

    /// Normalises over axis 1 of a channels-first tensor by viewing it
    /// channels-last.
    pub fn forward_channels<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let rank = x.shape().len();
        let mut to_last: Vec<usize> = (0..rank).filter(|&a| a != 1).collect();
        to_last.push(1);
        let mut back: Vec<usize> = vec![0, rank - 1];
        back.extend(1..rank - 1);
        let y = self.forward_last(p, &x.permute(&to_last)?)?;
        y.permute(&back)
    }
}

/// Two rounds of 3×3 convolution → layer norm → GELU. Resolution is kept.
#[derive(Clone, Debug)]
pub struct PureConvBlock {
    conv1: Conv2d,
    norm1: LayerNorm,
    conv2: Conv2d,
    norm2: LayerNorm,
}

impl PureConvBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize) -> Self {
        let spec = Conv2dSpec {
            pad: 1,
            ..Default::default()
        };
        PureConvBlock {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, spec, true),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cout),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, spec, true),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cout),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.cout
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let h = self.conv1.forward(p, x)?;
        let h = self.norm1.forward_channels(p, &h)?.gelu()?;
        let h = self.conv2.forward(p, &h)?;
        self.norm2.forward_channels(p, &h)?.gelu()
    }
}

/// Halves the spatial extent with 2×2 max pooling.
pub fn downsample<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    x.max_pool2()
}

/// Doubles the spatial extent bilinearly, then changes width with a 1×1
/// convolution.
#[derive(Clone, Debug)]
pub struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize) -> Self {
        Upsample {
            conv: Conv2d::pointwise(store, rng, &format!("{name}.conv"), cin, cout),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let up = x.bilinear_resize(s[2] * 2, s[3] * 2)?;
        self.conv.forward(p, &up)
    }
}
