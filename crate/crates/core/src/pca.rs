//! Mean-centred principal component analysis and projection into prefix-excised
//! subspaces of the component basis.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emb1::{sidecar_path, Emb1Error, Emb1Matrix};

/// Singular values at or below this fraction of the largest are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;
/// Each component is flipped so its largest-magnitude coordinate is positive;
/// among equal magnitudes the lowest index decides.
pub const SIGN_CONVENTION: &str = "max-abs-coordinate-positive/v1";

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("PCA needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("all rows are identical; the centred matrix has rank 0")]
    RankZero,
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("singular value decomposition did not converge")]
    NoConvergence,
    #[error("dimension mismatch: basis has {basis}, rows have {rows}")]
    DimensionMismatch { basis: usize, rows: usize },
    #[error("retained component set is empty")]
    EmptyRetain,
    #[error("component index {index} out of range for rank {rank}")]
    IndexOutOfRange { index: usize, rank: usize },
    #[error("retained component indices must be strictly increasing")]
    UnorderedRetain,
    #[error("cannot excise {k} components from a rank-{rank} basis")]
    ExciseTooMany { k: usize, rank: usize },
    #[error(transparent)]
    Emb1(#[from] Emb1Error),
    #[error("basis sidecar: {0}")]
    Sidecar(String),
}

/// Gallery mean plus orthonormal components in descending explained variance.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    mean: Vec<f64>,
    /// `rank x dimension`, one component per row.
    components: Array2<f64>,
    explained_variance: Vec<f64>,
    fit_rows: usize,
}

impl PcaBasis {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &Array2<f64> {
        &self.components
    }

    pub fn component(&self, i: usize) -> &[f64] {
        let d = self.dimension();
        &self.components.as_slice().unwrap()[i * d..(i + 1) * d]
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    pub fn rank(&self) -> usize {
        self.explained_variance.len()
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    pub fn fit_rows(&self) -> usize {
        self.fit_rows
    }

    /// Retained indices after removing the `k` highest-variance components.
    pub fn excise_prefix(&self, k: usize) -> Result<Vec<usize>, PcaError> {
        excise_prefix(self.rank(), k)
    }

    pub fn all_components(&self) -> Vec<usize> {
        (0..self.rank()).collect()
    }

    /// `(rows - mean) * components^T`, restricted to `retain`.
    pub fn project(&self, rows: ArrayView2<f64>, retain: &[usize]) -> Result<ProjectedSet, PcaError> {
        if rows.ncols() != self.dimension() {
            return Err(PcaError::DimensionMismatch {
                basis: self.dimension(),
                rows: rows.ncols(),
            });
        }
        if retain.is_empty() {
            return Err(PcaError::EmptyRetain);
        }
        if let Some(&index) = retain.iter().find(|&&i| i >= self.rank()) {
            return Err(PcaError::IndexOutOfRange {
                index,
                rank: self.rank(),
            });
        }
        if retain.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PcaError::UnorderedRetain);
        }
        let rows = rows.as_standard_layout();
        let d = self.dimension();
        let width = retain.len();
        let mut coords = vec![0.0; rows.nrows() * width];
        coords
            .par_chunks_mut(width)
            .zip(rows.as_slice().unwrap().par_chunks(d))
            .for_each_init(
                || vec![0.0; d],
                |centred, (out, x)| {
                    for ((c, v), m) in centred.iter_mut().zip(x).zip(&self.mean) {
                        *c = v - m;
                    }
                    for (o, &q) in out.iter_mut().zip(retain) {
                        *o = centred.iter().zip(self.component(q)).map(|(a, b)| a * b).sum();
                    }
                },
            );
        Ok(ProjectedSet {
            coordinates: Array2::from_shape_vec((rows.nrows(), width), coords).unwrap(),
            retained: retain.to_vec(),
        })
    }

    /// Writes the mean row followed by the component rows as EMB1, with a
    /// `.json` sidecar holding the variances and sign convention.
    pub fn write(&self, path: &Path) -> Result<(), PcaError> {
        let data = self
            .mean
            .iter()
            .chain(self.components.iter())
            .map(|&v| v as f32)
            .collect();
        Emb1Matrix::new(self.rank() + 1, self.dimension(), data)?.write(path)?;
        let sidecar = BasisSidecar {
            kind: "pca-basis".into(),
            sign_convention: SIGN_CONVENTION.into(),
            dimension: self.dimension(),
            rank: self.rank(),
            fit_rows: self.fit_rows,
            explained_variance: self.explained_variance.clone(),
        };
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| PcaError::Sidecar(e.to_string()))?;
        let side = sidecar_path(path, ".json");
        fs::write(&side, text + "\n").map_err(|source| Emb1Error::Io { path: side, source }.into())
    }

    /// Reads a basis written by [`PcaBasis::write`]; coordinates come back at
    /// single precision.
    pub fn read(path: &Path) -> Result<Self, PcaError> {
        let m = Emb1Matrix::read(path)?;
        let side = sidecar_path(path, ".json");
        let text = fs::read_to_string(&side).map_err(|source| Emb1Error::Io { path: side, source })?;
        let sidecar: BasisSidecar = serde_json::from_str(&text).map_err(|e| PcaError::Sidecar(e.to_string()))?;
        if sidecar.rank + 1 != m.rows || sidecar.dimension != m.dim || sidecar.explained_variance.len() != sidecar.rank {
            return Err(PcaError::Sidecar("sidecar shape disagrees with the EMB1 file".into()));
        }
        let wide: Vec<f64> = m.data.iter().map(|&v| f64::from(v)).collect();
        Ok(Self {
            mean: wide[..m.dim].to_vec(),
            components: Array2::from_shape_vec((sidecar.rank, m.dim), wide[m.dim..].to_vec()).unwrap(),
            explained_variance: sidecar.explained_variance,
            fit_rows: sidecar.fit_rows,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct BasisSidecar {
    kind: String,
    sign_convention: String,
    dimension: usize,
    rank: usize,
    fit_rows: usize,
    explained_variance: Vec<f64>,
}

/// Rows expressed in (a subset of) a PC basis. Column `j` holds the
/// coordinate along component `retained[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedSet {
    pub coordinates: Array2<f64>,
    pub retained: Vec<usize>,
}

/// `{k, ..., rank-1}`; `k == rank` yields the empty set.
pub fn excise_prefix(rank: usize, k: usize) -> Result<Vec<usize>, PcaError> {
    if k > rank {
        return Err(PcaError::ExciseTooMany { k, rank });
    }
    Ok((k..rank).collect())
}

/// Fits PCA to the rows of `data` through an SVD of the centred matrix.
pub fn fit_pca(data: ArrayView2<f64>) -> Result<PcaBasis, PcaError> {
    let (n, d) = data.dim();
    if n < 2 {
        return Err(PcaError::TooFewRows(n));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(PcaError::NonFinite);
    }
    let mut mean = vec![0.0; d];
    for row in data.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centred = faer::Mat::from_fn(n, d, |i, j| data[[i, j]] - mean[j]);
    let svd = centred.thin_svd().map_err(|_| PcaError::NoConvergence)?;
    let sigma: Vec<f64> = svd.S().column_vector().iter().copied().collect();
    let v = svd.V();

    let mut order: Vec<usize> = (0..sigma.len()).collect();
    // Stable: equal singular values keep decomposition order.
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));
    let largest = order.first().map(|&i| sigma[i]).unwrap_or(0.0);
    if largest <= 0.0 {
        return Err(PcaError::RankZero);
    }
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&i| sigma[i] > RANK_TOLERANCE * largest)
        .collect();

    let mut components = Array2::zeros((kept.len(), d));
    for (row, &i) in kept.iter().enumerate() {
        let mut lead = 0;
        for j in 1..d {
            if v[(j, i)].abs() > v[(lead, i)].abs() {
                lead = j;
            }
        }
        let sign = if v[(lead, i)] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[[row, j]] = sign * v[(j, i)];
        }
    }
    let explained_variance = kept.iter().map(|&i| sigma[i] * sigma[i] / (n - 1) as f64).collect();
    Ok(PcaBasis {
        mean,
        components,
        explained_variance,
        fit_rows: n,
    })
}

/// Total sample variance (divisor `n - 1`) of the centred rows.
pub fn total_variance(data: ArrayView2<f64>) -> f64 {
    let n = data.nrows();
    let mut total = 0.0;
    for col in data.columns() {
        let mean = col.sum() / n as f64;
        total += col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    }
    total / (n as f64 - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn diagonal_line_closed_form() {
        let x = array![[1.0, 1.0], [-1.0, -1.0], [2.0, 2.0], [-2.0, -2.0]];
        let b = fit_pca(x.view()).unwrap();
        assert_eq!(b.rank(), 1);
        assert_eq!(b.mean(), &[0.0, 0.0]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((b.component(0)[0] - h).abs() < 1e-12);
        assert!((b.component(0)[1] - h).abs() < 1e-12);
        assert!((b.explained_variance()[0] - 20.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn axis_data_gets_positive_axis() {
        let x = array![[0.0, 3.0, 0.0], [0.0, -1.0, 0.0], [0.0, 7.0, 0.0]];
        let b = fit_pca(x.view()).unwrap();
        assert_eq!(b.rank(), 1);
        assert!((b.component(0)[1] - 1.0).abs() < 1e-12);
        assert!(b.component(0)[0].abs() < 1e-12 && b.component(0)[2].abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(fit_pca(array![[1.0, 2.0]].view()), Err(PcaError::TooFewRows(1))));
        assert!(matches!(
            fit_pca(array![[1.0, 2.0], [1.0, 2.0]].view()),
            Err(PcaError::RankZero)
        ));
    }

    #[test]
    fn excision_sets() {
        assert_eq!(excise_prefix(5, 0).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(excise_prefix(5, 2).unwrap(), vec![2, 3, 4]);
        assert!(excise_prefix(5, 5).unwrap().is_empty());
        assert!(matches!(excise_prefix(5, 6), Err(PcaError::ExciseTooMany { k: 6, rank: 5 })));
    }

    #[test]
    fn projection_contract() {
        let x = array![[1.0, 1.0], [-1.0, -1.0], [2.0, 2.0], [-2.0, -2.0]];
        let b = fit_pca(x.view()).unwrap();
        let p = b.project(x.view(), &b.all_components()).unwrap();
        assert!(p.coordinates.column(0).sum().abs() < 1e-9);
        assert!((p.coordinates[[2, 0]] - 8f64.sqrt()).abs() < 1e-12);

        // Excising the only component of a rank-1 set leaves nothing to project.
        let retain = b.excise_prefix(1).unwrap();
        assert!(matches!(b.project(x.view(), &retain), Err(PcaError::EmptyRetain)));
        assert!(matches!(b.project(x.view(), &[1]), Err(PcaError::IndexOutOfRange { index: 1, rank: 1 })));
        assert!(matches!(
            b.project(array![[1.0]].view(), &[0]),
            Err(PcaError::DimensionMismatch { basis: 2, rows: 1 })
        ));
    }

    #[test]
    fn basis_file_round_trip() {
        let x = array![[1.0, 0.5, 0.0], [0.0, 1.0, 2.0], [3.0, 1.0, 1.0], [0.5, 0.5, 0.5]];
        let b = fit_pca(x.view()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.emb");
        b.write(&path).unwrap();
        let back = PcaBasis::read(&path).unwrap();
        assert_eq!(back.rank(), b.rank());
        assert_eq!(back.explained_variance(), b.explained_variance());
        for (a, c) in back.components().iter().zip(b.components().iter()) {
            assert!((a - c).abs() < 1e-6);
        }
        let side = fs::read_to_string(sidecar_path(&path, ".json")).unwrap();
        assert!(side.contains(SIGN_CONVENTION));
    }
}
