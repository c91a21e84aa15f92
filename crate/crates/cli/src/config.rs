//! Run configuration: one JSON document, with command-line flags layered on top.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use vesselnext::metrics::CalConfig;
use vesselnext::pipeline::PreprocessConfig;
use vesselnext::trainer::{InferenceConfig, TrainConfig};
use vesselnext::ModelConfig;

use crate::CliError;

pub const DEFAULT_OUT: &str = "vesselnext-out";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset manifest; relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Output directory; relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Architecture. Commands that load a checkpoint take it from there and
    /// only use this section to check compatibility.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub inference: InferenceConfig,
    pub cal: CalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let root = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.manifest, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(m) = &self.model {
            m.validate()?;
        }
        self.train.validate()?;
        self.preprocess.validate()?;
        self.inference.validate()?;
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn manifest(&self) -> Result<&Path, CliError> {
        self.manifest
            .as_deref()
            .ok_or_else(|| CliError::Usage("no manifest: pass --manifest or set \"manifest\" in the config".into()))
    }

    /// The configuration with every section filled in, as listed by `--help`.
    pub fn documented_defaults() -> String {
        let cfg = RunConfig {
            model: Some(ModelConfig::default()),
            ..Default::default()
        };
        serde_json::to_string_pretty(&cfg).expect("config serialises")
    }
}

/// Flags that override the config file. They are accepted by every
/// subcommand and ignored where they do not apply.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// JSON run configuration (keys and defaults listed below)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset manifest
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Output directory [default: vesselnext-out]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for initialisation and patch sampling [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Maximum training epochs [default: 25]
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Training mini-batch size [default: 8]
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    /// Adam learning rate [default: 0.0005]
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Square patch side [default: 128]
    #[arg(long, global = true)]
    pub patch: Option<usize>,
    /// Step between inference patches [default: 12]
    #[arg(long, global = true)]
    pub stride: Option<usize>,
    /// Vessel probability threshold [default: 0.5]
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    /// Width of the first stage [default: 32]
    #[arg(long, global = true)]
    pub base_channels: Option<usize>,
    /// Pure convolution stages [default: 1]
    #[arg(long, global = true)]
    pub n1: Option<usize>,
    /// Hybrid attention stages [default: 3]
    #[arg(long, global = true)]
    pub n2: Option<usize>,
    /// Attention heads [default: 4]
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    /// Key/value token budget of attention layers [default: 256]
    #[arg(long, global = true)]
    pub subsample_k: Option<usize>,
    /// Epochs without validation improvement before stopping [default: 5]
    #[arg(long, global = true)]
    pub patience: Option<usize>,
    /// Training patches drawn per image and epoch [default: 15000]
    #[arg(long, global = true)]
    pub patches_per_image: Option<usize>,
    /// Draw the training patch set once and reuse it every epoch
    #[arg(long, global = true)]
    pub materialize: bool,
    /// Skip contrast-limited histogram equalisation
    #[arg(long, global = true)]
    pub no_clahe: bool,
    /// Gamma exponent of the final intensity map [default: 1.2]
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
}

impl Overrides {
    /// The config file (if any) with every given flag applied.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(m) = &self.manifest {
            cfg.manifest = Some(m.clone());
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        let t = &mut cfg.train;
        set(&mut t.seed, self.seed);
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch, self.batch);
        set(&mut t.lr, self.lr);
        set(&mut t.patience, self.patience);
        set(&mut t.patches_per_image, self.patches_per_image);
        t.materialize |= self.materialize;
        set(&mut cfg.inference.stride, self.stride);
        set(&mut cfg.inference.threshold, self.threshold);
        if self.no_clahe {
            cfg.preprocess.clahe = false;
        }
        set(&mut cfg.preprocess.gamma, self.gamma);
        if self.has_model_flags() {
            let mut m = cfg.model.take().unwrap_or_default();
            self.apply_model(&mut m);
            cfg.model = Some(m);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn has_model_flags(&self) -> bool {
        [self.patch, self.base_channels, self.n1, self.n2, self.heads, self.subsample_k]
            .iter()
            .any(Option::is_some)
    }

    pub fn apply_model(&self, m: &mut ModelConfig) {
        set(&mut m.patch, self.patch);
        set(&mut m.base_channels, self.base_channels);
        set(&mut m.n1, self.n1);
        set(&mut m.n2, self.n2);
        set(&mut m.heads, self.heads);
        set(&mut m.subsample_k, self.subsample_k);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Fields where a requested architecture differs from a checkpoint's, as
/// `name: requested R, checkpoint C`.
pub fn model_mismatches(requested: &ModelConfig, stored: &ModelConfig) -> Vec<String> {
    let (a, b) = (serde_json::to_value(requested), serde_json::to_value(stored));
    let (Ok(serde_json::Value::Object(a)), Ok(serde_json::Value::Object(b))) = (a, b) else {
        return vec!["model configuration could not be compared".into()];
    };
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: requested {v}, checkpoint {}", b.get(k).cloned().unwrap_or_default()))
        .collect()
}
