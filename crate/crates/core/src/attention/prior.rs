//! Retinal-prior encoders feeding the knowledge-enhanced attention module.
//!
//! The real encoder is an external foundation model; here it is abstracted
//! behind [`PriorEncoder`]. The stub projects a 16x16 grayscale downsample
//! of the image through a fixed seeded random matrix, so pipelines stay
//! hermetic. Precomputed embeddings can be supplied through an archive file
//! keyed by image id.

use crate::archive::{read_archive, write_archive};
use crate::error::{Error, Result};
use crate::preprocess::{bilinear_resize_chw, rgb_to_chw};
use image::RgbImage;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

pub trait PriorEncoder {
    fn dim(&self) -> usize;
    /// Stable identity string recorded in cache headers.
    fn identity(&self) -> String;
    fn embed(&self, id: &str, img: &RgbImage) -> Result<Array1<f64>>;
}

/// Deterministic stand-in encoder: fixed random projection of the
/// luminance-downsampled image. Same pixels always give the same embedding.
pub struct StubPriorEncoder {
    d_rf: usize,
    projection: Array2<f64>, // d_rf x 256
    seed: u64,
}

pub const STUB_SIDE: usize = 16;

impl StubPriorEncoder {
    pub fn new(d_rf: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = STUB_SIDE * STUB_SIDE;
        let scale = 1.0 / (n as f64).sqrt();
        let data: Vec<f64> = (0..d_rf * n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v * scale
            })
            .collect();
        StubPriorEncoder {
            d_rf,
            projection: Array2::from_shape_vec((d_rf, n), data).unwrap(),
            seed,
        }
    }
}

impl PriorEncoder for StubPriorEncoder {
    fn dim(&self) -> usize {
        self.d_rf
    }

    fn identity(&self) -> String {
        format!("stub(seed={},d_rf={})", self.seed, self.d_rf)
    }

    fn embed(&self, _id: &str, img: &RgbImage) -> Result<Array1<f64>> {
        let chw = rgb_to_chw(img);
        let small = bilinear_resize_chw(&chw, STUB_SIDE, STUB_SIDE);
        let mut v = Array1::<f64>::zeros(STUB_SIDE * STUB_SIDE);
        for y in 0..STUB_SIDE {
            for x in 0..STUB_SIDE {
                let gray = (0.299 * small[(0, y, x)]
                    + 0.587 * small[(1, y, x)]
                    + 0.114 * small[(2, y, x)])
                    / 255.0;
                v[y * STUB_SIDE + x] = gray;
            }
        }
        Ok(self.projection.dot(&v))
    }
}

/// Looks embeddings up in a prebuilt cache; pixels are ignored.
pub struct FilePriorEncoder {
    d_rf: usize,
    identity: String,
    map: HashMap<String, Array1<f64>>,
}

impl FilePriorEncoder {
    pub fn load(path: &Path) -> Result<Self> {
        let arch = read_archive(path)?;
        let d_rf = arch.meta["d_rf"]
            .as_u64()
            .ok_or_else(|| Error::Archive("prior cache missing d_rf".into()))? as usize;
        let identity = arch.meta["encoder"]
            .as_str()
            .unwrap_or("unknown")
            .to_string();
        let mut map = HashMap::new();
        for (name, arr) in arch.arrays {
            let v = arr
                .into_dimensionality::<ndarray::Ix1>()
                .map_err(|e| Error::Archive(format!("prior entry {name}: {e}")))?;
            if v.len() != d_rf {
                return Err(Error::Archive(format!(
                    "prior entry {name} has dim {} != {d_rf}",
                    v.len()
                )));
            }
            map.insert(name, v);
        }
        Ok(FilePriorEncoder {
            d_rf,
            identity,
            map,
        })
    }
}

impl PriorEncoder for FilePriorEncoder {
    fn dim(&self) -> usize {
        self.d_rf
    }

    fn identity(&self) -> String {
        format!("file({})", self.identity)
    }

    fn embed(&self, id: &str, _img: &RgbImage) -> Result<Array1<f64>> {
        self.map
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Archive(format!("no cached prior embedding for id {id:?}")))
    }
}

/// Writes an id -> embedding cache with the encoder identity in the header.
pub fn write_prior_cache(
    path: &Path,
    encoder_identity: &str,
    d_rf: usize,
    entries: &[(String, Array1<f64>)],
) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "prior_cache",
        "encoder": encoder_identity,
        "d_rf": d_rf,
    });
    let arrays: Vec<(String, ndarray::ArrayD<f64>)> = entries
        .iter()
        .map(|(id, v)| (id.clone(), v.clone().into_dyn()))
        .collect();
    write_archive(path, &meta, &arrays)
}

/// Config-level selection of the prior encoder implementation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorEncoderSpec {
    Stub { seed: u64 },
    FileLookup { path: PathBuf },
}

impl Default for PriorEncoderSpec {
    fn default() -> Self {
        PriorEncoderSpec::Stub { seed: 0x5EED }
    }
}

impl PriorEncoderSpec {
    pub fn build(&self, d_rf: usize) -> Result<Box<dyn PriorEncoder>> {
        Ok(match self {
            PriorEncoderSpec::Stub { seed } => Box::new(StubPriorEncoder::new(d_rf, *seed)),
            PriorEncoderSpec::FileLookup { path } => {
                let enc = FilePriorEncoder::load(path)?;
                if enc.dim() != d_rf {
                    return Err(Error::DimMismatch(format!(
                        "prior cache dim {} != configured d_rf {d_rf}",
                        enc.dim()
                    )));
                }
                Box::new(enc)
            }
        })
    }
}
