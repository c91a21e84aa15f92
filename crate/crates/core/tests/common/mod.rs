//! Shared fixtures, finite-difference checking and brute-force oracles for
//! the integration tests and the acceptance runner.

#![allow(dead_code)]

pub mod cost_table;
pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vesselnext::autodiff::Tape;
use vesselnext::nn::{Bound, ParamStore};
use vesselnext::trainer::{bce_loss, Adam, AdamConfig};
use vesselnext::{Model, ModelConfig, Result, Tensor, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this fraction of the largest gradient in a check
/// are compared absolutely. Some are exactly zero (key biases cancel in the
/// softmax) and their numeric estimate is pure rounding noise.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n1: 1,
        n2: 1,
        base_channels: 4,
        patch: 16,
        ..Default::default()
    }
}

/// A dark curved vessel with a side branch on a bright, faintly textured
/// background, and its truth.
pub fn vessel_patch() -> (Tensor, Tensor) {
    let mut x = Vec::with_capacity(256);
    let mut y = Vec::with_capacity(256);
    for r in 0..16 {
        for c in 0..16 {
            let centre = 4.0 + 0.03 * (r as f64 - 2.0).powi(2);
            let on = (c as f64 - centre).abs() < 1.5 || (r == 11 && c > 6);
            y.push(f64::from(u8::from(on)));
            x.push(if on { 0.25 } else { 0.75 } + 0.02 * ((r * 7 + c * 3) % 5) as f64);
        }
    }
    (
        Tensor::new([1, 1, 16, 16], x).unwrap(),
        Tensor::new([1, 1, 16, 16], y).unwrap(),
    )
}

/// Full-batch Adam on [`vessel_patch`] at the default learning rate.
/// Element `i` of the result is the loss after `i` updates.
pub fn overfit(config: ModelConfig, seed: u64, steps: usize) -> Vec<f64> {
    let mut model = Model::build(config, seed).unwrap();
    let mut adam = Adam::new(AdamConfig::default(), model.params());
    let (x, y) = vessel_patch();
    let mut losses = Vec::with_capacity(steps + 1);
    loop {
        let tape = Tape::new();
        let bound = model.params().bind(&tape);
        let prob = model.forward(&bound, &tape.constant(x.clone())).unwrap();
        let loss = bce_loss(&prob, &y).unwrap();
        losses.push(loss.value().item());
        if losses.len() > steps {
            return losses;
        }
        let grads = bound.gradients(&tape.backward(&loss).unwrap());
        drop(bound);
        adam.update(model.params_mut(), &grads).unwrap();
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element carries a
/// distinct weight into the scalar being differentiated.
pub fn probe<'t>(out: &Var<'t>, seed: u64) -> Result<Var<'t>> {
    let r = Tensor::rand_uniform(out.shape().to_vec(), -1.0, 1.0, &mut rng(seed ^ 0x9e37));
    out.mul(&out.tape().constant(r))?.sum()
}

/// Up to `k` indices spread evenly over `0..n`, always including both ends.
fn pick(n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut v: Vec<usize> = (0..k).map(|i| i * (n - 1) / (k - 1)).collect();
    v.dedup();
    v
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of `loss`, over up to `per_tensor` elements of every parameter
/// in `store` and of every input.
pub fn grad_check<F>(store: &ParamStore, inputs: &[Tensor], per_tensor: usize, loss: F) -> f64
where
    F: for<'t> Fn(&Bound<'t>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = loss(&bound, &vars).unwrap();
    let grads = tape.backward(&out).unwrap();
    let param_grads = bound.gradients(&grads);
    let input_grads: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();

    let eval = |store: &ParamStore, inputs: &[Tensor]| -> f64 {
        let tape = Tape::inference();
        let bound = store.bind(&tape);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        loss(&bound, &vars).unwrap().value().item()
    };

    let mut pairs = Vec::new();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for (i, name) in names.iter().enumerate() {
        for j in pick(store.by_name(name).unwrap().numel(), per_tensor) {
            let shifted = |delta: f64| {
                let mut s = store.clone();
                s.by_name_mut(name).unwrap().data_mut()[j] += delta;
                eval(&s, inputs)
            };
            let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
            pairs.push((param_grads[i].data()[j], numeric));
        }
    }
    for (i, input) in inputs.iter().enumerate() {
        for j in pick(input.numel(), per_tensor) {
            let shifted = |delta: f64| {
                let mut xs = inputs.to_vec();
                xs[i].data_mut()[j] += delta;
                eval(store, &xs)
            };
            let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
            pairs.push((input_grads[i].data()[j], numeric));
        }
    }
    let scale = pairs.iter().map(|(a, _)| a.abs()).fold(0.0, f64::max);
    let floor = (REL_FLOOR * scale).max(f64::MIN_POSITIVE);
    pairs.iter().map(|&(a, n)| rel_err(a, n, floor)).fold(0.0, f64::max)
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape.to_vec(), -1.0, 1.0, &mut rng(seed))
}

/// Random tensor whose entries are pairwise separated, so max-pooling has
/// no ties within reach of the finite-difference step.
pub fn distinct_tensor(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng(seed);
    for i in (1..n).rev() {
        order.swap(i, r.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), order.iter().map(|&k| k as f64 / n as f64 - 0.5).collect()).unwrap()
}

/// One named gradient check with its tolerance.
pub struct GradCase {
    pub name: &'static str,
    pub err: f64,
    pub tol: f64,
}

impl GradCase {
    pub fn ok(&self) -> bool {
        self.err < self.tol
    }
}

/// Every differentiable primitive, each checked on random inputs.
pub fn op_cases() -> Vec<GradCase> {
    use vesselnext::autodiff::{conv2d, Conv2dSpec};
    let none = ParamStore::new();
    let mut cases = Vec::new();
    let mut case = |name: &'static str, tol: f64, inputs: Vec<Tensor>, f: &dyn for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>| {
        let err = grad_check(&none, &inputs, 64, |_, v| probe(&f(v)?, 1));
        cases.push(GradCase { name, err, tol });
    };
    case("add", 1e-6, vec![rand_tensor(&[3, 4], 1), rand_tensor(&[3, 4], 2)], &|v| v[0].add(&v[1]));
    case("sub", 1e-6, vec![rand_tensor(&[3, 4], 3), rand_tensor(&[3, 4], 4)], &|v| v[0].sub(&v[1]));
    case("mul", 1e-6, vec![rand_tensor(&[3, 4], 5), rand_tensor(&[3, 4], 6)], &|v| v[0].mul(&v[1]));
    case("scale", 1e-6, vec![rand_tensor(&[5], 7)], &|v| v[0].scale(-2.5));
    case("add_scalar", 1e-6, vec![rand_tensor(&[5], 8)], &|v| v[0].add_scalar(0.3));
    case("add_channel", 1e-6, vec![rand_tensor(&[2, 3, 2, 2], 9), rand_tensor(&[3], 10)], &|v| {
        v[0].add_channel(&v[1])
    });
    case("sum", 1e-6, vec![rand_tensor(&[2, 3], 11)], &|v| v[0].sum());
    case("mean", 1e-6, vec![rand_tensor(&[2, 3], 12)], &|v| v[0].mean());
    case("matmul", 1e-6, vec![rand_tensor(&[3, 4], 13), rand_tensor(&[4, 2], 14)], &|v| v[0].matmul(&v[1]));
    case("bmm", 1e-6, vec![rand_tensor(&[2, 3, 4], 15), rand_tensor(&[2, 4, 5], 16)], &|v| v[0].bmm(&v[1]));
    case("bmm_tn", 1e-6, vec![rand_tensor(&[2, 4, 3], 17), rand_tensor(&[2, 4, 5], 18)], &|v| v[0].bmm_tn(&v[1]));
    case("bmm_nt", 1e-6, vec![rand_tensor(&[2, 3, 4], 19), rand_tensor(&[2, 5, 4], 20)], &|v| v[0].bmm_nt(&v[1]));
    case("reshape", 1e-6, vec![rand_tensor(&[2, 6], 21)], &|v| v[0].reshape([3, 4]));
    case("permute", 1e-6, vec![rand_tensor(&[2, 3, 4], 22)], &|v| v[0].permute(&[2, 0, 1]));
    case("narrow", 1e-6, vec![rand_tensor(&[2, 5, 3], 23)], &|v| v[0].narrow(1, 1, 3));
    case("concat", 1e-6, vec![rand_tensor(&[2, 2, 3], 24), rand_tensor(&[2, 4, 3], 25)], &|v| {
        Var::concat(&[&v[0], &v[1]], 1)
    });
    case("gelu", 1e-6, vec![rand_tensor(&[4, 5], 26).map(|x| 3.0 * x)], &|v| v[0].gelu());
    case("sigmoid", 1e-6, vec![rand_tensor(&[4, 5], 27).map(|x| 4.0 * x)], &|v| v[0].sigmoid());
    case("softmax (last axis)", 1e-6, vec![rand_tensor(&[2, 3, 5], 28)], &|v| v[0].softmax(2));
    case("softmax (inner axis)", 1e-6, vec![rand_tensor(&[2, 3, 5], 29)], &|v| v[0].softmax(1));
    case(
        "layer_norm",
        1e-4,
        vec![rand_tensor(&[2, 5], 30), rand_tensor(&[5], 31), rand_tensor(&[5], 32)],
        &|v| v[0].layer_norm(&v[1], &v[2], 1e-6),
    );
    case("bilinear_resize (up)", 1e-6, vec![rand_tensor(&[1, 2, 3, 4], 33)], &|v| v[0].bilinear_resize(7, 5));
    case("bilinear_resize (down)", 1e-6, vec![rand_tensor(&[1, 2, 7, 6], 34)], &|v| v[0].bilinear_resize(3, 4));
    case("max_pool2", 1e-6, vec![distinct_tensor(&[1, 2, 4, 6], 35)], &|v| v[0].max_pool2());
    case(
        "conv2d (3×3, stride 2, pad 1)",
        1e-4,
        vec![rand_tensor(&[2, 3, 7, 7], 36), rand_tensor(&[4, 3, 3, 3], 37), rand_tensor(&[4], 38)],
        &|v| conv2d(&v[0], &v[1], Some(&v[2]), Conv2dSpec { stride: 2, pad: 1, groups: 1 }),
    );
    case(
        "conv2d (depthwise 7×7)",
        1e-4,
        vec![rand_tensor(&[1, 4, 16, 16], 39), rand_tensor(&[4, 1, 7, 7], 40), rand_tensor(&[4], 41)],
        &|v| conv2d(&v[0], &v[1], Some(&v[2]), Conv2dSpec { stride: 1, pad: 3, groups: 4 }),
    );
    case(
        "conv2d (grouped, no bias)",
        1e-4,
        vec![rand_tensor(&[1, 4, 5, 5], 42), rand_tensor(&[6, 2, 3, 3], 43)],
        &|v| conv2d(&v[0], &v[1], None, Conv2dSpec { stride: 1, pad: 0, groups: 2 }),
    );
    case(
        "bce_loss",
        1e-6,
        vec![rand_tensor(&[4, 4], 44).map(|x| 0.5 + 0.45 * x)],
        &|v| {
            let y = Tensor::new([4, 4], (0..16).map(|i| f64::from(u8::from(i % 3 == 0))).collect()).unwrap();
            bce_loss(&v[0], &y)
        },
    );
    case(
        "attend",
        1e-6,
        vec![rand_tensor(&[2, 4, 6], 45), rand_tensor(&[2, 4, 3], 46), rand_tensor(&[2, 4, 3], 47)],
        &|v| vesselnext::nn::attention::attend(&v[0], &v[1], &v[2], 2),
    );
    cases
}

/// Composite blocks and the tiny end-to-end model.
pub fn block_cases() -> Vec<GradCase> {
    use vesselnext::nn::{AttentionConfig, AttentionVariant, EfficientAttention, Gmsf, PureConvBlock, TransNextBlock};
    let mut cases = Vec::new();
    let attn = |heads, k, variant| AttentionConfig {
        heads,
        subsample_k: k,
        variant,
    };

    let mut store = ParamStore::new();
    let block = PureConvBlock::new(&mut store, &mut rng(1), "b", 2, 3);
    let err = grad_check(&store, &[rand_tensor(&[1, 2, 8, 8], 2)], 8, |p, v| probe(&block.forward(p, &v[0])?, 3));
    cases.push(GradCase {
        name: "pure conv block",
        err,
        tol: 1e-4,
    });

    for (name, k) in [("TransNeXt block (self)", 256), ("TransNeXt block (sub-sampled K/V)", 16)] {
        let mut store = ParamStore::new();
        let block = TransNextBlock::new(&mut store, &mut rng(4), "t", 4, attn(4, k, AttentionVariant::SelfAttention)).unwrap();
        let err = grad_check(&store, &[rand_tensor(&[1, 4, 8, 8], 5)], 6, |p, v| {
            probe(&block.forward(p, &v[0], None)?, 6)
        });
        cases.push(GradCase { name, err, tol: 1e-4 });
    }

    let mut store = ParamStore::new();
    let block = TransNextBlock::new(&mut store, &mut rng(7), "t", 4, attn(2, 9, AttentionVariant::Cross)).unwrap();
    let err = grad_check(&store, &[rand_tensor(&[1, 4, 8, 8], 8), rand_tensor(&[1, 4, 4, 4], 9)], 6, |p, v| {
        probe(&block.forward(p, &v[0], Some(&v[1]))?, 10)
    });
    cases.push(GradCase {
        name: "TransNeXt block (cross)",
        err,
        tol: 1e-4,
    });

    let mut store = ParamStore::new();
    let a = EfficientAttention::new(&mut store, &mut rng(11), "a", 4, attn(2, 9, AttentionVariant::SelfAttention)).unwrap();
    let err = grad_check(&store, &[rand_tensor(&[2, 4, 6, 6], 12)], 16, |p, v| probe(&a.self_attention(p, &v[0])?, 13));
    cases.push(GradCase {
        name: "efficient MHSA",
        err,
        tol: 1e-4,
    });

    let mut store = ParamStore::new();
    let a = EfficientAttention::new(&mut store, &mut rng(14), "a", 4, attn(4, 4, AttentionVariant::Cross)).unwrap();
    let err = grad_check(&store, &[rand_tensor(&[1, 4, 5, 4], 15), rand_tensor(&[1, 4, 6, 6], 16)], 16, |p, v| {
        probe(&a.cross_attention(p, &v[0], &v[1])?, 17)
    });
    cases.push(GradCase {
        name: "cross MHSA (both inputs)",
        err,
        tol: 1e-4,
    });

    let mut store = ParamStore::new();
    let g = Gmsf::new(&mut store, &mut rng(18), "g", &[4, 8], 1, attn(4, 16, AttentionVariant::SelfAttention)).unwrap();
    let err = grad_check(&store, &[rand_tensor(&[1, 4, 8, 8], 19), rand_tensor(&[1, 8, 4, 4], 20)], 6, |p, v| {
        let out = g.forward(p, v)?;
        probe(&out[0], 21)?.add(&probe(&out[1], 22)?)
    });
    cases.push(GradCase {
        name: "GMSF (two scales)",
        err,
        tol: 1e-4,
    });

    let model = Model::build(tiny_config(), 23).unwrap();
    // Random intensities: the quantised vessel patch has max-pool ties.
    let (_, y) = vessel_patch();
    let x = Tensor::rand_uniform([1, 1, 16, 16], 0.0, 1.0, &mut rng(24));
    let err = grad_check(model.params(), &[x], 3, |p, v| bce_loss(&model.forward(p, &v[0])?, &y));
    cases.push(GradCase {
        name: "tiny model end to end",
        err,
        tol: 1e-3,
    });
    cases
}

/// Least-squares polynomial fit of the given degree; returns the
/// coefficients (constant first) and the coefficient of determination.
pub fn poly_fit(x: &[f64], y: &[f64], degree: usize) -> (Vec<f64>, f64) {
    let m = degree + 1;
    // Normal equations, solved by Gaussian elimination with pivoting.
    let mut a = vec![vec![0.0; m + 1]; m];
    for (&xi, &yi) in x.iter().zip(y) {
        for r in 0..m {
            for c in 0..m {
                a[r][c] += xi.powi((r + c) as i32);
            }
            a[r][m] += yi * xi.powi(r as i32);
        }
    }
    for col in 0..m {
        let piv = (col..m).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..m {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=m {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let coef: Vec<f64> = (0..m).map(|r| a[r][m] / a[r][r]).collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let fit: f64 = coef.iter().enumerate().map(|(k, c)| c * xi.powi(k as i32)).sum();
            (yi - fit).powi(2)
        })
        .sum();
    (coef, 1.0 - ss_res / ss_tot)
}
