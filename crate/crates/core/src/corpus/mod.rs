//! Embedding corpora: records, validation, role views and template galleries.

mod io;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{load_corpus, write_corpus, CorpusFormat};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty corpus")]
    Empty,
    #[error("row {row}: expected {expected} embedding values, found {found}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}: duplicate image_id {image_id:?}")]
    DuplicateImageId { row: usize, image_id: String },
    #[error("row {row}: unknown role {value:?} (expected \"gallery\" or \"probe\")")]
    UnknownRole { row: usize, value: String },
    #[error("row {row}, column {column}: malformed float {value:?}")]
    MalformedFloat {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: {message}")]
    Metadata { row: usize, message: String },
    #[error("bad CSV header: {0}")]
    Header(String),
    #[error("malformed corpus file: {0}")]
    Format(String),
    #[error("corpus has no gallery records")]
    NoGallery,
    #[error("corpus has no probe records")]
    NoProbes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Gallery,
    Probe,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Gallery => "gallery",
            Role::Probe => "probe",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gallery" => Ok(Role::Gallery),
            "probe" => Ok(Role::Probe),
            other => Err(other.to_string()),
        }
    }
}

/// One embedded image with its identity, role and categorical attributes.
///
/// Attribute values are opaque strings; numeric attributes such as yaw are
/// stored as their decimal text ("0", "90").
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub image_id: String,
    pub identity_id: String,
    pub role: Role,
    pub dataset: String,
    pub attributes: BTreeMap<String, String>,
    pub vector: Vec<f32>,
}

/// A validated, immutable list of records sharing one dimension.
///
/// Record order is the canonical iteration order for every downstream
/// computation.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingCorpus {
    dimension: usize,
    records: Vec<EmbeddingRecord>,
}

impl EmbeddingCorpus {
    pub fn new(records: Vec<EmbeddingRecord>) -> Result<Self, CorpusError> {
        let first = records.first().ok_or(CorpusError::Empty)?;
        let dimension = first.vector.len();
        let mut seen = HashSet::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            let row = i + 1;
            if rec.vector.len() != dimension || dimension == 0 {
                return Err(CorpusError::DimensionMismatch {
                    row,
                    expected: dimension,
                    found: rec.vector.len(),
                });
            }
            if let Some(pos) = rec.vector.iter().position(|v| !v.is_finite()) {
                return Err(CorpusError::MalformedFloat {
                    row,
                    column: format!("e{pos}"),
                    value: rec.vector[pos].to_string(),
                });
            }
            if !seen.insert(rec.image_id.as_str()) {
                return Err(CorpusError::DuplicateImageId {
                    row,
                    image_id: rec.image_id.clone(),
                });
            }
        }
        Ok(Self { dimension, records })
    }

    /// Concatenates corpora in order, revalidating the union.
    pub fn merge<'a>(parts: impl IntoIterator<Item = &'a EmbeddingCorpus>) -> Result<Self, CorpusError> {
        let records = parts
            .into_iter()
            .flat_map(|c| c.records.iter().cloned())
            .collect();
        Self::new(records)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn into_records(self) -> Vec<EmbeddingRecord> {
        self.records
    }

    /// Sorted union of attribute names across all records.
    pub fn attribute_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .records
            .iter()
            .flat_map(|r| r.attributes.keys().cloned())
            .collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn view(&self, role: Role) -> LabeledSet {
        LabeledSet::from_records(self.dimension, self.records.iter().filter(|r| r.role == role))
    }

    pub fn gallery(&self) -> LabeledSet {
        self.view(Role::Gallery)
    }

    pub fn probes(&self) -> LabeledSet {
        self.view(Role::Probe)
    }

    /// Checks that both roles are populated.
    pub fn ensure_evaluable(&self) -> Result<(), CorpusError> {
        if !self.records.iter().any(|r| r.role == Role::Gallery) {
            return Err(CorpusError::NoGallery);
        }
        if !self.records.iter().any(|r| r.role == Role::Probe) {
            return Err(CorpusError::NoProbes);
        }
        Ok(())
    }
}

/// Identity-labelled rows in double precision: a role view of a corpus, a
/// template gallery, or either of those projected into a PC subspace.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub identities: Vec<String>,
    pub datasets: Vec<String>,
    pub vectors: Array2<f64>,
}

impl LabeledSet {
    pub fn new(identities: Vec<String>, datasets: Vec<String>, vectors: Array2<f64>) -> Self {
        assert_eq!(identities.len(), vectors.nrows());
        assert_eq!(datasets.len(), vectors.nrows());
        Self {
            identities,
            datasets,
            vectors: vectors.as_standard_layout().into_owned(),
        }
    }

    fn from_records<'a>(dimension: usize, records: impl Iterator<Item = &'a EmbeddingRecord>) -> Self {
        let mut identities = Vec::new();
        let mut datasets = Vec::new();
        let mut data = Vec::new();
        for r in records {
            identities.push(r.identity_id.clone());
            datasets.push(r.dataset.clone());
            data.extend(r.vector.iter().map(|&v| f64::from(v)));
        }
        let vectors = Array2::from_shape_vec((identities.len(), dimension), data)
            .expect("record dimensions validated at construction");
        Self {
            identities,
            datasets,
            vectors,
        }
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dimension();
        &self.vectors.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }

    /// Same labels, new coordinates (e.g. after projection).
    pub fn with_vectors(&self, vectors: Array2<f64>) -> Self {
        Self::new(self.identities.clone(), self.datasets.clone(), vectors)
    }

    /// Number of distinct identities.
    pub fn identity_count(&self) -> usize {
        self.identities.iter().collect::<HashSet<_>>().len()
    }
}

/// One averaged vector per gallery identity.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateGallery {
    dimension: usize,
    entries: Vec<Template>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub identity_id: String,
    /// Dataset tag of the identity's first gallery image.
    pub dataset: String,
    pub image_count: usize,
    pub vector: Vec<f64>,
}

impl TemplateGallery {
    /// Averages each identity's rows in double precision. Identities appear
    /// in order of first occurrence.
    pub fn from_gallery(gallery: &LabeledSet) -> Result<Self, CorpusError> {
        if gallery.is_empty() {
            return Err(CorpusError::NoGallery);
        }
        let dimension = gallery.dimension();
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut entries: Vec<Template> = Vec::new();
        for (i, id) in gallery.identities.iter().enumerate() {
            let slot = *index.entry(id.as_str()).or_insert_with(|| {
                entries.push(Template {
                    identity_id: id.clone(),
                    dataset: gallery.datasets[i].clone(),
                    image_count: 0,
                    vector: vec![0.0; dimension],
                });
                entries.len() - 1
            });
            let entry = &mut entries[slot];
            entry.image_count += 1;
            for (acc, v) in entry.vector.iter_mut().zip(gallery.row(i)) {
                *acc += v;
            }
        }
        for entry in &mut entries {
            let n = entry.image_count as f64;
            entry.vector.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self { dimension, entries })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn entries(&self) -> &[Template] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_labeled(&self) -> LabeledSet {
        let data = self.entries.iter().flat_map(|e| e.vector.iter().copied()).collect();
        LabeledSet::new(
            self.entries.iter().map(|e| e.identity_id.clone()).collect(),
            self.entries.iter().map(|e| e.dataset.clone()).collect(),
            Array2::from_shape_vec((self.entries.len(), self.dimension), data).unwrap(),
        )
    }
}

/// Template gallery of a corpus's gallery records; probe records are ignored.
pub fn build_templates(corpus: &EmbeddingCorpus) -> Result<TemplateGallery, CorpusError> {
    TemplateGallery::from_gallery(&corpus.gallery())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(id: &str, identity: &str, role: Role, v: &[f32]) -> EmbeddingRecord {
        EmbeddingRecord {
            image_id: id.into(),
            identity_id: identity.into(),
            role,
            dataset: "d".into(),
            attributes: BTreeMap::new(),
            vector: v.to_vec(),
        }
    }

    #[test]
    fn template_is_arithmetic_mean() {
        let c = EmbeddingCorpus::new(vec![
            record("a1", "A", Role::Gallery, &[1.0, 0.0]),
            record("p1", "A", Role::Probe, &[9.0, 9.0]),
            record("a2", "A", Role::Gallery, &[0.0, 1.0]),
            record("b1", "B", Role::Gallery, &[0.25, -3.0]),
        ])
        .unwrap();
        let t = build_templates(&c).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.entries()[0].identity_id, "A");
        assert_eq!(t.entries()[0].vector, vec![0.5, 0.5]);
        assert_eq!(t.entries()[0].image_count, 2);
        // A single image is its own template, exactly.
        assert_eq!(t.entries()[1].vector, vec![0.25, -3.0]);
    }

    #[test]
    fn no_gallery_is_an_error() {
        let c = EmbeddingCorpus::new(vec![record("p", "A", Role::Probe, &[1.0])]).unwrap();
        assert!(matches!(build_templates(&c), Err(CorpusError::NoGallery)));
        assert!(matches!(c.ensure_evaluable(), Err(CorpusError::NoGallery)));
    }

    #[test]
    fn validation_rejects_bad_rows() {
        let err = EmbeddingCorpus::new(vec![
            record("a", "A", Role::Gallery, &[1.0, 2.0]),
            record("b", "A", Role::Gallery, &[1.0]),
        ])
        .unwrap_err();
        assert!(matches!(err, CorpusError::DimensionMismatch { row: 2, expected: 2, found: 1 }));

        let err = EmbeddingCorpus::new(vec![
            record("a", "A", Role::Gallery, &[1.0]),
            record("a", "B", Role::Probe, &[1.0]),
        ])
        .unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateImageId { row: 2, .. }));

        assert!(matches!(EmbeddingCorpus::new(vec![]), Err(CorpusError::Empty)));
        let err = EmbeddingCorpus::new(vec![record("a", "A", Role::Gallery, &[f32::NAN])]).unwrap_err();
        assert!(matches!(err, CorpusError::MalformedFloat { row: 1, .. }));
    }

    #[test]
    fn role_views_preserve_order() {
        let c = EmbeddingCorpus::new(vec![
            record("g1", "B", Role::Gallery, &[1.0]),
            record("p1", "A", Role::Probe, &[2.0]),
            record("g2", "A", Role::Gallery, &[3.0]),
        ])
        .unwrap();
        let g = c.gallery();
        assert_eq!(g.identities, vec!["B", "A"]);
        assert_eq!(g.row(1), &[3.0]);
        assert_eq!(c.probes().len(), 1);
        assert_eq!(g.identity_count(), 2);
    }
}
