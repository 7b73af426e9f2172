//! Seeded synthetic embedding corpora with planted identity, nuisance and
//! attribute structure.
//!
//! Every vector is built in block coordinates
//!
//! ```text
//! [ identity (d_id) | nuisance (d_nuis) | attribute blocks ... | unused ]
//! ```
//!
//! then isotropic noise is added and the result is rotated by one seeded
//! random orthonormal matrix and shifted by the dataset offset. Identity
//! means are drawn once per identity; nuisance is drawn per image from the
//! same subspace for every identity (a camera/session effect). Block
//! variances are totals over the block, spread evenly across its
//! coordinates; the noise variance is per coordinate.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, EmbeddingCorpus, EmbeddingRecord, Role};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeScope {
    /// One class per identity (gender).
    #[default]
    Identity,
    /// One class per image (viewpoint).
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub classes: usize,
    /// Norm of each class's effect vector. Class `c` shifts the vector by
    /// this amount along the `c`-th axis of the attribute block.
    pub effect_norm: f64,
    #[serde(default)]
    pub scope: AttributeScope,
}

impl AttributeSpec {
    /// Class labels are the class indices as text ("0", "1", ...).
    pub fn label(&self, class: usize) -> String {
        class.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dimension: usize,
    pub identities: usize,
    pub gallery_per_identity: usize,
    pub probes_per_identity: usize,
    pub identity_variance: f64,
    pub identity_dim: usize,
    pub nuisance_variance: f64,
    pub nuisance_dim: usize,
    /// Per-coordinate variance of the isotropic noise.
    pub noise_variance: f64,
    #[serde(default)]
    pub attributes: Vec<AttributeSpec>,
    pub dataset: String,
    /// Norm of the offset shared by every vector of this dataset.
    #[serde(default)]
    pub dataset_offset: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// The planted-nuisance retrieval benchmark: 200 identities in 256
    /// dimensions, 10 gallery and 5 probe images each, a 5-dimensional
    /// nuisance block carrying ten times the identity variance.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            dimension: 256,
            identities: 200,
            gallery_per_identity: 10,
            probes_per_identity: 5,
            identity_variance: 1.0,
            identity_dim: 32,
            nuisance_variance: 10.0,
            nuisance_dim: 5,
            noise_variance: 0.0025,
            attributes: Vec::new(),
            dataset: "synth".into(),
            dataset_offset: 0.0,
            seed,
        }
    }

    fn attribute_dims(&self) -> usize {
        self.attributes.iter().map(|a| a.classes).sum()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.dimension == 0 || self.identities == 0 || self.gallery_per_identity + self.probes_per_identity == 0 {
            return bad("dimension, identity count and image count must be at least 1".into());
        }
        let used = self.identity_dim + self.nuisance_dim + self.attribute_dims();
        if used > self.dimension {
            return bad(format!("blocks need {used} coordinates, dimension is {}", self.dimension));
        }
        for (name, v) in [
            ("identity_variance", self.identity_variance),
            ("nuisance_variance", self.nuisance_variance),
            ("noise_variance", self.noise_variance),
            ("dataset_offset", self.dataset_offset),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.identity_dim == 0 && self.identity_variance > 0.0 {
            return bad("identity_variance needs identity_dim >= 1".into());
        }
        if self.nuisance_dim == 0 && self.nuisance_variance > 0.0 {
            return bad("nuisance_variance needs nuisance_dim >= 1".into());
        }
        for a in &self.attributes {
            if a.classes < 2 {
                return bad(format!("attribute {:?} needs at least 2 classes", a.name));
            }
            if !(a.effect_norm.is_finite() && a.effect_norm >= 0.0) {
                return bad(format!("attribute {:?} effect norm must be finite and non-negative", a.name));
            }
            if a.name.is_empty() {
                return bad("attribute names must be non-empty".into());
            }
        }
        Ok(())
    }
}

/// Where the generator planted each kind of structure, in output coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    /// Orthonormal rows spanning the identity block.
    pub identity_basis: Vec<Vec<f64>>,
    /// Orthonormal rows spanning the nuisance block.
    pub nuisance_basis: Vec<Vec<f64>>,
    /// Per attribute, one unit row per class effect direction.
    pub attribute_bases: BTreeMap<String, Vec<Vec<f64>>>,
    pub dataset_offset: Vec<f64>,
}

fn normals(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Haar-distributed orthonormal matrix: QR of a Gaussian matrix with the
/// signs of R's diagonal folded into Q.
fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_row_slice(d, d, &normals(rng, d * d, 1.0));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Generates the corpus and its ground truth. Same config, same bytes.
pub fn generate(config: &SynthConfig) -> Result<(EmbeddingCorpus, GroundTruth), SynthError> {
    config.validate()?;
    let d = config.dimension;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let rotation = random_rotation(&mut rng, d);
    let offset = if config.dataset_offset > 0.0 {
        let dir = normals(&mut rng, d, 1.0);
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter().map(|v| v * config.dataset_offset / norm).collect()
    } else {
        vec![0.0; d]
    };

    let id_scale = if config.identity_dim > 0 {
        (config.identity_variance / config.identity_dim as f64).sqrt()
    } else {
        0.0
    };
    let nuis_scale = if config.nuisance_dim > 0 {
        (config.nuisance_variance / config.nuisance_dim as f64).sqrt()
    } else {
        0.0
    };
    let noise_scale = config.noise_variance.sqrt();
    let nuis_start = config.identity_dim;
    let mut attr_start = Vec::with_capacity(config.attributes.len());
    let mut next = nuis_start + config.nuisance_dim;
    for a in &config.attributes {
        attr_start.push(next);
        next += a.classes;
    }

    let per_identity = config.gallery_per_identity + config.probes_per_identity;
    let mut records = Vec::with_capacity(config.identities * per_identity);
    let mut block = vec![0.0; d];
    for ident in 0..config.identities {
        let identity_id = format!("{}:id{ident:04}", config.dataset);
        let mean = normals(&mut rng, config.identity_dim, id_scale);
        let identity_classes: Vec<usize> = config
            .attributes
            .iter()
            .map(|a| match a.scope {
                AttributeScope::Identity => rng.random_range(0..a.classes),
                AttributeScope::Image => 0,
            })
            .collect();
        for img in 0..per_identity {
            let (role, tag, n) = if img < config.gallery_per_identity {
                (Role::Gallery, 'g', img)
            } else {
                (Role::Probe, 'p', img - config.gallery_per_identity)
            };
            block.iter_mut().for_each(|v| *v = 0.0);
            block[..config.identity_dim].copy_from_slice(&mean);
            let nuisance = normals(&mut rng, config.nuisance_dim, nuis_scale);
            block[nuis_start..nuis_start + config.nuisance_dim].copy_from_slice(&nuisance);
            let mut attributes = BTreeMap::new();
            for (a, spec) in config.attributes.iter().enumerate() {
                let class = match spec.scope {
                    AttributeScope::Identity => identity_classes[a],
                    AttributeScope::Image => rng.random_range(0..spec.classes),
                };
                block[attr_start[a] + class] += spec.effect_norm;
                attributes.insert(spec.name.clone(), spec.label(class));
            }
            for (v, e) in block.iter_mut().zip(normals(&mut rng, d, noise_scale)) {
                *v += e;
            }
            let vector = (0..d)
                .map(|i| {
                    let rotated: f64 = rotation.row(i).iter().zip(&block).map(|(q, z)| q * z).sum();
                    (rotated + offset[i]) as f32
                })
                .collect();
            records.push(EmbeddingRecord {
                image_id: format!("{identity_id}:{tag}{n}"),
                identity_id: identity_id.clone(),
                role,
                dataset: config.dataset.clone(),
                attributes,
                vector,
            });
        }
    }

    let axis = |b: usize| rotation.column(b).iter().copied().collect::<Vec<f64>>();
    let truth = GroundTruth {
        config: config.clone(),
        identity_basis: (0..config.identity_dim).map(axis).collect(),
        nuisance_basis: (nuis_start..nuis_start + config.nuisance_dim).map(axis).collect(),
        attribute_bases: config
            .attributes
            .iter()
            .zip(&attr_start)
            .map(|(a, &s)| (a.name.clone(), (s..s + a.classes).map(axis).collect()))
            .collect(),
        dataset_offset: offset,
    };
    Ok((EmbeddingCorpus::new(records)?, truth))
}
