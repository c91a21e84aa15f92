//! Dataset manifests.
//!
//! A manifest is one JSON document with optional `train`, `val` and `test`
//! arrays of records:
//!
//! ```json
//! {
//!   "train": [{"id": "21", "image": "train/21.png", "truth": "train/21_gt.png", "fov": "train/21_mask.png"}],
//!   "val": [],
//!   "test": [{"id": "01", "image": "test/01.png", "truth": "test/01_gt.png", "fov": "test/01_mask.png"}]
//! }
//! ```
//!
//! Relative paths are resolved against the manifest's directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::io::{read_image, read_mask, Image8};
use super::raster::Raster;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (train, val or test)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fov: Option<PathBuf>,
}

/// An image with its optional vessel truth and field-of-view mask.
#[derive(Clone, Debug)]
pub struct FundusSample {
    pub id: String,
    pub image: Image8,
    pub truth: Option<Raster<u8>>,
    pub fov: Option<Raster<u8>>,
}

impl Record {
    /// Reads the image and whichever masks the record names, checking that
    /// all of them share dimensions.
    pub fn load(&self) -> Result<FundusSample> {
        let image = read_image(&self.image)?;
        let dims = image.dims();
        let load_mask = |path: &Option<PathBuf>| -> Result<Option<Raster<u8>>> {
            let Some(path) = path else { return Ok(None) };
            let mask = read_mask(path)?;
            if mask.dims() != dims {
                return Err(Error::Format {
                    path: path.clone(),
                    msg: format!(
                        "mask is {}×{} but image is {}×{}",
                        mask.height(),
                        mask.width(),
                        dims.0,
                        dims.1
                    ),
                });
            }
            Ok(Some(mask))
        };
        Ok(FundusSample {
            id: self.id.clone(),
            truth: load_mask(&self.truth)?,
            fov: load_mask(&self.fov)?,
            image,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub train: Vec<Record>,
    #[serde(default)]
    pub val: Vec<Record>,
    #[serde(default)]
    pub test: Vec<Record>,
}

impl Manifest {
    /// Parses a manifest file and resolves its relative paths.
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let root = path.parent().unwrap_or(Path::new("."));
        manifest.resolve(root);
        manifest.check_ids(path)?;
        Ok(manifest)
    }

    fn resolve(&mut self, root: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        };
        for r in self.train.iter_mut().chain(&mut self.val).chain(&mut self.test) {
            fix(&mut r.image);
            r.truth.as_mut().map(fix);
            r.fov.as_mut().map(fix);
        }
    }

    fn check_ids(&self, path: &Path) -> Result<()> {
        for split in [Split::Train, Split::Val, Split::Test] {
            let records = self.split(split);
            for (i, r) in records.iter().enumerate() {
                if r.id.is_empty() || records[..i].iter().any(|o| o.id == r.id) {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        msg: format!("{split} split: empty or duplicate id {:?}", r.id),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> &[Record] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}
