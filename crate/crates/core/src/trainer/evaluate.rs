//! Whole-image inference and test-set scoring.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{basic_metrics, cal, confusion, pooled_roc, roc, CalConfig, CalScore, Ratio, Roc};
use crate::model::Model;
use crate::pipeline::{binarize, plan_grid, preprocess, FundusSample, PreprocessConfig, Raster};
use crate::tensor::Tensor;

/// Anything that maps `B×1×P×P` patches to `B×1×P×P` probabilities.
pub trait PatchPredictor: Sync {
    fn patch(&self) -> usize;
    fn predict_batch(&self, x: &Tensor) -> Result<Tensor>;
}

impl PatchPredictor for Model {
    fn patch(&self) -> usize {
        self.config().patch
    }

    fn predict_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.predict(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Step between neighbouring patch origins.
    pub stride: usize,
    /// Probabilities `≥ threshold` count as vessel.
    pub threshold: f64,
    /// Patches per forward pass. Throughput hardly depends on it, while
    /// peak memory grows linearly (about 1.6 GB per 128×128 patch at
    /// width 16, dominated by the fusion attention scores).
    pub batch: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            stride: 12,
            threshold: 0.5,
            batch: 1,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.batch == 0 {
            return Err(Error::Config("stride and batch must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must lie in [0, 1], got {}", self.threshold)));
        }
        Ok(())
    }
}

/// Probability map of a preprocessed image from overlapping patches.
pub fn segment<P: PatchPredictor + ?Sized>(model: &P, image: &Raster<f64>, cfg: &InferenceConfig) -> Result<Raster<f64>> {
    cfg.validate()?;
    let patch = model.patch();
    let grid = plan_grid(image.height(), image.width(), patch, cfg.stride)?;
    let patches = grid.extract(image)?;
    let chunks: Vec<&[Raster<f64>]> = patches.chunks(cfg.batch).collect();
    let predicted = chunks
        .par_iter()
        .map(|chunk| {
            let data = chunk.iter().flat_map(|p| p.data().iter().copied()).collect();
            let x = Tensor::new([chunk.len(), 1, patch, patch], data)?;
            let y = model.predict_batch(&x)?;
            if y.shape() != x.shape() {
                return Err(Error::shape("segment", y.shape(), x.shape()));
            }
            let plane = patch * patch;
            (0..chunk.len())
                .map(|i| Raster::new(patch, patch, y.data()[i * plane..(i + 1) * plane].to_vec()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let flat: Vec<Raster<f64>> = predicted.into_iter().flatten().collect();
    crate::pipeline::stitch(&flat, &grid)
}

#[derive(Clone, Debug)]
pub struct ImageReport {
    pub id: String,
    pub probability: Raster<f64>,
    pub mask: Raster<u8>,
    /// Per-image ROC inside the field of view.
    pub auc: Ratio,
    pub sp: Ratio,
    pub se: Ratio,
    pub precision: Ratio,
    pub f1: Ratio,
    pub acc: Ratio,
    pub cal: CalScore,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub images: Vec<ImageReport>,
    /// ROC over the field-of-view pixels of all images together.
    pub roc: Roc,
    /// Means over the images where each measure is defined.
    pub sp: Ratio,
    pub se: Ratio,
    pub precision: Ratio,
    pub f1: Ratio,
    pub acc: Ratio,
    pub cal: CalScore,
}

fn mean_defined(values: impl Iterator<Item = Ratio>) -> Ratio {
    let (sum, n) = values
        .filter(|r| r.defined)
        .fold((0.0, 0usize), |(s, n), r| (s + r.value, n + 1));
    if n == 0 {
        Ratio {
            value: 0.0,
            defined: false,
        }
    } else {
        Ratio {
            value: sum / n as f64,
            defined: true,
        }
    }
}

fn cell(r: Ratio) -> String {
    if r.defined {
        r.value.to_string()
    } else {
        "nan".into()
    }
}

impl EvalReport {
    pub fn auc(&self) -> Ratio {
        Ratio {
            value: self.roc.auc,
            defined: self.roc.defined,
        }
    }

    /// Per-image rows then an `aggregate` row with the pooled AUC and mean
    /// pixel measures. Undefined values are written as `nan`.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("id,auc,sp,se,precision,f1,acc\n");
        let row = |id: &str, v: [Ratio; 6]| format!("{id},{}\n", v.map(cell).join(","));
        for im in &self.images {
            out.push_str(&row(&im.id, [im.auc, im.sp, im.se, im.precision, im.f1, im.acc]));
        }
        out.push_str(&row(
            "aggregate",
            [self.auc(), self.sp, self.se, self.precision, self.f1, self.acc],
        ));
        out
    }

    pub fn cal_csv(&self) -> String {
        let mut out = String::from("id,c,a,l,f,flagged\n");
        let mut row = |id: &str, s: &CalScore| {
            out.push_str(&format!("{id},{},{},{},{},{}\n", s.c, s.a, s.l, s.f, u8::from(s.flagged)));
        };
        for im in &self.images {
            row(&im.id, &im.cal);
        }
        row("mean", &self.cal);
        out
    }
}

fn within(mask: &Raster<u8>, fov: &Raster<u8>) -> Raster<u8> {
    Raster::from_fn(mask.height(), mask.width(), |r, c| mask.get(r, c) & fov.get(r, c))
}

/// Preprocesses, segments and scores every sample. Each needs a truth and a
/// field-of-view mask; both masks are restricted to the field of view
/// before the connectivity/area/length score.
pub fn evaluate<P: PatchPredictor + ?Sized>(
    model: &P,
    samples: &[FundusSample],
    pre: &PreprocessConfig,
    inf: &InferenceConfig,
    cal_cfg: &CalConfig,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate", "no test images"));
    }
    let mut images = Vec::with_capacity(samples.len());
    for s in samples {
        let missing = |what: &str| Error::invalid("evaluate", format!("{}: no {what} mask", s.id));
        let truth = s.truth.as_ref().ok_or_else(|| missing("truth"))?;
        let fov = s.fov.as_ref().ok_or_else(|| missing("field-of-view"))?;
        let prepared = preprocess(&s.image, pre)?;
        let probability = segment(model, &prepared.image, inf)?;
        let mask = binarize(&probability, inf.threshold);
        let m = basic_metrics(&confusion(&mask, truth, Some(fov))?);
        let in_fov: Vec<usize> = (0..fov.len()).filter(|&i| fov.data()[i] != 0).collect();
        let r = roc(
            &in_fov.iter().map(|&i| probability.data()[i]).collect::<Vec<_>>(),
            &in_fov.iter().map(|&i| truth.data()[i] != 0).collect::<Vec<_>>(),
        )?;
        let cal_score = cal(&within(&mask, fov), &within(truth, fov), cal_cfg)?;
        if cal_score.flagged {
            log::warn!("{}: connectivity/area/length score used a degenerate-case convention", s.id);
        }
        log::info!("{}: auc {:.4}, acc {:.4}", s.id, r.auc, m.acc.value);
        images.push(ImageReport {
            id: s.id.clone(),
            probability,
            mask,
            auc: Ratio {
                value: r.auc,
                defined: r.defined,
            },
            sp: m.sp,
            se: m.se,
            precision: m.precision,
            f1: m.f1,
            acc: m.acc,
            cal: cal_score,
        });
    }

    let pooled: Vec<_> = images
        .iter()
        .zip(samples)
        .map(|(im, s)| (&im.probability, s.truth.as_ref().expect("checked"), s.fov.as_ref()))
        .collect();
    let roc = pooled_roc(&pooled)?;
    let n = images.len() as f64;
    let mean = |f: fn(&CalScore) -> f64| images.iter().map(|im| f(&im.cal)).sum::<f64>() / n;
    let cal = CalScore {
        c: mean(|s| s.c),
        a: mean(|s| s.a),
        l: mean(|s| s.l),
        f: mean(|s| s.f),
        flagged: images.iter().any(|im| im.cal.flagged),
    };
    Ok(EvalReport {
        roc,
        sp: mean_defined(images.iter().map(|im| im.sp)),
        se: mean_defined(images.iter().map(|im| im.se)),
        precision: mean_defined(images.iter().map(|im| im.precision)),
        f1: mean_defined(images.iter().map(|im| im.f1)),
        acc: mean_defined(images.iter().map(|im| im.acc)),
        cal,
        images,
    })
}
