//! Brute-force reference implementations and the randomised sweeps that
//! compare the library against them.

use std::collections::HashSet;

use rand::Rng;
use vesselnext::autodiff::Tape;
use vesselnext::metrics::{basic_metrics, cal, confusion, roc, CalConfig};
use vesselnext::nn::{AttentionConfig, AttentionVariant, Conv2d, EfficientAttention, ParamStore};
use vesselnext::pipeline::{plan_grid, stitch, Raster};
use vesselnext::Tensor;

use super::{poly_fit, rng};

// ---------------------------------------------------------------- attention

fn pointwise(store: &ParamStore, conv: &Conv2d, x: &Tensor) -> Tensor {
    let w = store.get(conv.weight());
    let b = store.get(conv.bias().expect("projections carry a bias"));
    let s = x.shape();
    let (batch, cin, plane) = (s[0], s[1], s[2] * s[3]);
    let cout = conv.cout;
    let mut out = Tensor::zeros([batch, cout, s[2], s[3]]);
    for n in 0..batch {
        for o in 0..cout {
            for p in 0..plane {
                let mut acc = b.data()[o];
                for i in 0..cin {
                    acc += w.data()[o * cin + i] * x.data()[(n * cin + i) * plane + p];
                }
                out.data_mut()[(n * cout + o) * plane + p] = acc;
            }
        }
    }
    out
}

/// `out(concat_h softmax(Q_h K_hᵀ / √d) V_h)` with every position of the
/// key/value source used as a key.
pub fn dense_attention(store: &ParamStore, a: &EfficientAttention, q_src: &Tensor, kv_src: &Tensor) -> Tensor {
    let q = pointwise(store, &a.q, q_src);
    let k = pointwise(store, &a.k, kv_src);
    let v = pointwise(store, &a.v, kv_src);
    let (batch, c) = (q.shape()[0], q.shape()[1]);
    let n = q.shape()[2] * q.shape()[3];
    let m = k.shape()[2] * k.shape()[3];
    let heads = a.config().heads;
    let d = c / heads;
    let mut mixed = Tensor::zeros(q.shape().to_vec());
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..m)
                    .map(|j| {
                        (0..d)
                            .map(|e| {
                                let ch = h * d + e;
                                q.data()[(b * c + ch) * n + i] * k.data()[(b * c + ch) * m + j]
                            })
                            .sum::<f64>()
                            / (d as f64).sqrt()
                    })
                    .collect();
                let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                let z: f64 = e.iter().sum();
                for dd in 0..d {
                    let ch = h * d + dd;
                    let val: f64 = (0..m).map(|j| e[j] / z * v.data()[(b * c + ch) * m + j]).sum();
                    mixed.data_mut()[(b * c + ch) * n + i] = val;
                }
            }
        }
    }
    pointwise(store, &a.out, &mixed)
}

/// Largest absolute difference between the library attention (with the
/// key/value budget at least the source size) and [`dense_attention`] over
/// `configs` random configurations.
pub fn attention_equivalence(configs: usize) -> f64 {
    let mut r = rng(2024);
    let mut worst = 0.0f64;
    for i in 0..configs {
        let heads = r.gen_range(1..=4);
        let d = r.gen_range(1..=4);
        let c = heads * d;
        let batch = r.gen_range(1..=2);
        let (h, w) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let cross = i % 2 == 1;
        let (kh, kw) = if cross {
            (r.gen_range(1..=6), r.gen_range(1..=6))
        } else {
            (h, w)
        };
        let cfg = AttentionConfig {
            heads,
            subsample_k: kh * kw + r.gen_range(0..=8),
            variant: if cross {
                AttentionVariant::Cross
            } else {
                AttentionVariant::SelfAttention
            },
        };
        let mut store = ParamStore::new();
        let a = EfficientAttention::new(&mut store, &mut r, "a", c, cfg).unwrap();
        // Non-zero biases so they take part in the comparison.
        for name in ["a.q.bias", "a.k.bias", "a.v.bias", "a.out.bias"] {
            let t = Tensor::rand_uniform([c], -0.5, 0.5, &mut r);
            store.set(name, t).unwrap();
        }
        let x = Tensor::rand_uniform([batch, c, h, w], -1.0, 1.0, &mut r);
        let kv = Tensor::rand_uniform([batch, c, kh, kw], -1.0, 1.0, &mut r);
        let tape = Tape::inference();
        let p = store.bind(&tape);
        let got = if cross {
            a.cross_attention(&p, &tape.constant(x.clone()), &tape.constant(kv.clone()))
        } else {
            a.self_attention(&p, &tape.constant(x.clone()))
        }
        .unwrap();
        let want = dense_attention(&store, &a, &x, if cross { &kv } else { &x });
        worst = worst.max(got.value().max_abs_diff(&want));
    }
    worst
}

pub struct MacLaw {
    /// `(n, MACs)` with keys and values sub-sampled to `k = 64`.
    pub efficient: Vec<(usize, u64)>,
    pub efficient_linear_r2: f64,
    /// `(n, MACs)` with every position used as a key.
    pub dense: Vec<(usize, u64)>,
    pub dense_linear_r2: f64,
    pub dense_quadratic_r2: f64,
    pub dense_quadratic_coef: f64,
}

fn attention_macs(h: usize, w: usize, k: usize) -> u64 {
    let cfg = AttentionConfig {
        heads: 1,
        subsample_k: k,
        variant: AttentionVariant::SelfAttention,
    };
    let mut store = ParamStore::new();
    let a = EfficientAttention::new(&mut store, &mut rng(5), "a", 4, cfg).unwrap();
    let tape = Tape::inference();
    tape.enable_mac_meter();
    let p = store.bind(&tape);
    a.self_attention(&p, &tape.constant(Tensor::zeros([1, 4, h, w]))).unwrap();
    tape.total_macs()
}

/// Metered attention cost at head width `d = 4` as the token count grows.
pub fn mac_law() -> MacLaw {
    let efficient: Vec<(usize, u64)> = [(16, 16), (32, 32), (64, 64)]
        .iter()
        .map(|&(h, w)| (h * w, attention_macs(h, w, 64)))
        .collect();
    let dense: Vec<(usize, u64)> = [(8, 8), (16, 16), (32, 32), (32, 64)]
        .iter()
        .map(|&(h, w)| (h * w, attention_macs(h, w, usize::MAX)))
        .collect();
    let xy = |pts: &[(usize, u64)]| -> (Vec<f64>, Vec<f64>) {
        (
            pts.iter().map(|p| p.0 as f64).collect(),
            pts.iter().map(|p| p.1 as f64).collect(),
        )
    };
    let (ex, ey) = xy(&efficient);
    let (dx, dy) = xy(&dense);
    let (_, efficient_linear_r2) = poly_fit(&ex, &ey, 1);
    let (_, dense_linear_r2) = poly_fit(&dx, &dy, 1);
    let (coef, dense_quadratic_r2) = poly_fit(&dx, &dy, 2);
    MacLaw {
        efficient,
        efficient_linear_r2,
        dense,
        dense_linear_r2,
        dense_quadratic_r2,
        dense_quadratic_coef: coef[2],
    }
}

// ------------------------------------------------------------------ metrics

type Set = HashSet<(i64, i64)>;

fn to_set(m: &Raster<u8>) -> Set {
    let mut s = Set::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) != 0 {
                s.insert((y as i64, x as i64));
            }
        }
    }
    s
}

fn inside(p: (i64, i64), h: usize, w: usize) -> bool {
    p.0 >= 0 && p.1 >= 0 && p.0 < h as i64 && p.1 < w as i64
}

fn dilate(s: &Set, r: i64, h: usize, w: usize) -> Set {
    let mut out = Set::new();
    for &(y, x) in s {
        for dy in -r..=r {
            for dx in -r..=r {
                if dy * dy + dx * dx <= r * r && inside((y + dy, x + dx), h, w) {
                    out.insert((y + dy, x + dx));
                }
            }
        }
    }
    out
}

fn components(s: &Set) -> usize {
    let mut left = s.clone();
    let mut count = 0;
    while let Some(&seed) = left.iter().next() {
        count += 1;
        let mut queue = vec![seed];
        left.remove(&seed);
        while let Some((y, x)) = queue.pop() {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if left.remove(&(y + dy, x + dx)) {
                        queue.push((y + dy, x + dx));
                    }
                }
            }
        }
    }
    count
}

/// Two-subiteration parallel thinning; the neighbourhood is read from the
/// set as it stood at the start of each subiteration.
fn thin(s: &Set) -> Set {
    let ring = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)];
    let mut cur = s.clone();
    loop {
        let mut removed_any = false;
        for pass in 0..2 {
            let doomed: Vec<(i64, i64)> = cur
                .iter()
                .copied()
                .filter(|&(y, x)| {
                    let n: Vec<bool> = ring.iter().map(|(dy, dx)| cur.contains(&(y + dy, x + dx))).collect();
                    let b = n.iter().filter(|&&v| v).count();
                    let a = (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count();
                    let (north, east, south, west) = (n[0], n[2], n[4], n[6]);
                    let side = if pass == 0 {
                        !(north && east && south) && !(east && south && west)
                    } else {
                        !(north && east && west) && !(north && south && west)
                    };
                    (2..=6).contains(&b) && a == 1 && side
                })
                .collect();
            removed_any |= !doomed.is_empty();
            for p in doomed {
                cur.remove(&p);
            }
        }
        if !removed_any {
            return cur;
        }
    }
}

/// `(c, a, l, flagged)` from set operations.
pub fn cal_oracle(pred: &Raster<u8>, truth: &Raster<u8>, cfg: &CalConfig) -> (f64, f64, f64, bool) {
    let (h, w) = pred.dims();
    let (p, t) = (to_set(pred), to_set(truth));
    if p.is_empty() && t.is_empty() {
        return (1.0, 1.0, 1.0, true);
    }
    let c = if t.is_empty() {
        0.0
    } else {
        let diff = (components(&t) as f64 - components(&p) as f64).abs();
        1.0 - (diff / t.len() as f64).min(1.0)
    };
    let union = |a: &Set, b: &Set| a.union(b).count();
    let inter = |a: &Set, b: &Set| -> Set { a.intersection(b).copied().collect() };
    let (pa, ta) = (dilate(&p, cfg.alpha as i64, h, w), dilate(&t, cfg.alpha as i64, h, w));
    let a = union(&inter(&pa, &t), &inter(&p, &ta)) as f64 / union(&p, &t) as f64;
    if p.is_empty() {
        return (c, a, 0.0, false);
    }
    let (ps, ts) = (thin(&p), thin(&t));
    let den = union(&ps, &ts);
    if den == 0 {
        return (c, a, 1.0, true);
    }
    let (pb, tb) = (dilate(&p, cfg.beta as i64, h, w), dilate(&t, cfg.beta as i64, h, w));
    let l = union(&inter(&ps, &tb), &inter(&pb, &ts)) as f64 / den as f64;
    (c, a, l, false)
}

/// Probability that a positive outranks a negative, ties counting half.
pub fn rank_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

fn random_mask<R: Rng>(r: &mut R, h: usize, w: usize, density: f64) -> Raster<u8> {
    Raster::from_fn(h, w, |_, _| u8::from(r.gen_bool(density)))
}

/// Checks pixel counts, ratios, AUC and CAL against the oracles above on
/// `instances` random masks up to 16×16. Returns the number of comparisons.
pub fn metric_oracles(instances: usize) -> Result<usize, String> {
    let mut r = rng(77);
    let mut checks = 0;
    for i in 0..instances {
        let (h, w) = (r.gen_range(1..=16), r.gen_range(1..=16));
        let (dp, dt) = (r.gen_range(0.0..=1.0), r.gen_range(0.0..=1.0));
        let pred = random_mask(&mut r, h, w, dp);
        let truth = random_mask(&mut r, h, w, dt);
        let fov = if r.gen_bool(0.5) {
            Some(random_mask(&mut r, h, w, 0.8))
        } else {
            None
        };
        let levels = r.gen_range(2..=20);
        let scores = Raster::from_fn(h, w, |_, _| r.gen_range(0..levels) as f64 / levels as f64);

        // Pixel enumeration.
        let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        let mut kept_scores = Vec::new();
        let mut kept_labels = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if fov.as_ref().is_some_and(|f| f.get(y, x) == 0) {
                    continue;
                }
                match (pred.get(y, x), truth.get(y, x)) {
                    (1, 1) => tp += 1,
                    (0, 0) => tn += 1,
                    (1, 0) => fp += 1,
                    _ => fn_ += 1,
                }
                kept_scores.push(scores.get(y, x));
                kept_labels.push(truth.get(y, x) == 1);
            }
        }
        let cc = confusion(&pred, &truth, fov.as_ref()).map_err(|e| e.to_string())?;
        if (cc.tp, cc.tn, cc.fp, cc.fn_) != (tp, tn, fp, fn_) {
            return Err(format!("instance {i}: counts {cc:?} vs ({tp},{tn},{fp},{fn_})"));
        }
        checks += 1;

        let m = basic_metrics(&cc);
        let expect = |num: u64, den: u64| if den == 0 { None } else { Some(num as f64 / den as f64) };
        for (label, got, want) in [
            ("acc", m.acc, expect(tp + tn, tp + tn + fp + fn_)),
            ("sp", m.sp, expect(tn, tn + fp)),
            ("se", m.se, expect(tp, tp + fn_)),
            ("precision", m.precision, expect(tp, tp + fp)),
            ("f1", m.f1, expect(2 * tp, 2 * tp + fp + fn_)),
        ] {
            let ok = match want {
                None => !got.defined && got.value == 0.0,
                Some(v) => got.defined && (got.value - v).abs() <= 1e-12,
            };
            if !ok {
                return Err(format!("instance {i}: {label} {got:?} vs {want:?}"));
            }
            checks += 1;
        }
        if m.precision.defined && m.se.defined && m.precision.value + m.se.value > 0.0 {
            let harmonic = 2.0 * m.precision.value * m.se.value / (m.precision.value + m.se.value);
            if (harmonic - m.f1.value).abs() > 1e-12 {
                return Err(format!("instance {i}: F1 forms {harmonic} vs {}", m.f1.value));
            }
            checks += 1;
        }

        let curve = roc(&kept_scores, &kept_labels).map_err(|e| e.to_string())?;
        match rank_auc(&kept_scores, &kept_labels) {
            None if !curve.defined && curve.auc == 0.0 => {}
            Some(a) if curve.defined && (curve.auc - a).abs() <= 1e-12 => {}
            other => return Err(format!("instance {i}: AUC {} vs {other:?}", curve.auc)),
        }
        checks += 1;

        let cfg = CalConfig {
            alpha: r.gen_range(0..=3),
            beta: r.gen_range(0..=3),
        };
        let got = cal(&pred, &truth, &cfg).map_err(|e| e.to_string())?;
        let (c, a, l, flagged) = cal_oracle(&pred, &truth, &cfg);
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-12;
        if !(close(got.c, c) && close(got.a, a) && close(got.l, l) && close(got.f, c * a * l) && got.flagged == flagged) {
            return Err(format!("instance {i}: CAL {got:?} vs ({c},{a},{l},{flagged})"));
        }
        checks += 1;
    }
    Ok(checks)
}

// ----------------------------------------------------------------- geometry

/// Coverage and identity round trip of one grid. Returns the padded size.
pub fn check_grid(h: usize, w: usize, patch: usize, stride: usize) -> Result<(usize, usize), String> {
    let grid = plan_grid(h, w, patch, stride).map_err(|e| e.to_string())?;
    let cover = grid.coverage();
    if let Some(i) = cover.data().iter().position(|&c| c == 0) {
        return Err(format!("{h}×{w} p{patch} s{stride}: pixel {i} uncovered"));
    }
    if (grid.padded_h - patch) % stride != 0 || (grid.padded_w - patch) % stride != 0 {
        return Err(format!("{h}×{w} p{patch} s{stride}: grid does not end on the border"));
    }
    let image = Raster::from_fn(h, w, |y, x| ((y * 131 + x * 71) % 97) as f64 / 97.0 - 0.3);
    let patches = grid.extract(&image).map_err(|e| e.to_string())?;
    let back = stitch(&patches, &grid).map_err(|e| e.to_string())?;
    let err = back
        .data()
        .iter()
        .zip(image.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if back.dims() != (h, w) || err > 1e-12 {
        return Err(format!("{h}×{w} p{patch} s{stride}: round trip error {err}"));
    }
    Ok((grid.padded_h, grid.padded_w))
}

/// `configs` random grids; returns how many were checked.
pub fn grid_geometry(configs: usize) -> Result<usize, String> {
    let mut r = rng(5150);
    for _ in 0..configs {
        let patch = r.gen_range(1..=48);
        let stride = r.gen_range((patch / 8).max(1)..=patch);
        let (h, w) = (r.gen_range(1..=96), r.gen_range(1..=96));
        check_grid(h, w, patch, stride)?;
    }
    Ok(configs)
}
