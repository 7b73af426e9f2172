//! Similarity scoring and biometric evaluation: ROC-AUC, mAP, CMC and TAR@FAR.
//!
//! Scores are "higher is more similar". Every pairwise kernel accumulates
//! coordinates from the last to the first. A prefix-excised subspace is a
//! suffix of the coordinate vector, so sweeping the excision count downward
//! and adding one coordinate per step reproduces these kernels bit for bit.

use std::collections::HashMap;
use std::fmt::Write as _;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabeledSet;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("dimension mismatch: probes have {probe}, gallery has {gallery}")]
    DimensionMismatch { probe: usize, gallery: usize },
    #[error("{0} set is empty")]
    EmptySide(&'static str),
    #[error("score list contains a non-finite value")]
    NonFinite,
    #[error("no rank values requested")]
    EmptyKs,
    #[error("rank values must be at least 1")]
    ZeroK,
    #[error("FAR target {0} is not in (0, 1)")]
    FarTarget(f64),
    #[error("no probe identity is present in the gallery")]
    NoMatchedProbes,
    #[error("label count {labels} does not match score matrix {axis} count {expected}")]
    LabelCount {
        axis: &'static str,
        labels: usize,
        expected: usize,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    #[default]
    Cosine,
    NegativeEuclidean,
}

pub(crate) fn sq_norm(a: &[f64]) -> f64 {
    a.iter().rev().fold(0.0, |acc, x| acc + x * x)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().rev().zip(b.iter().rev()).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().rev().zip(b.iter().rev()).fold(0.0, |acc, (x, y)| {
        let t = x - y;
        acc + t * t
    })
}

/// `dot` against four rows at once; each lane keeps the single-pair order.
fn dot4(a: &[f64], g: [&[f64]; 4]) -> [f64; 4] {
    let mut acc = [0.0; 4];
    for j in (0..a.len()).rev() {
        let x = a[j];
        for l in 0..4 {
            acc[l] += x * g[l][j];
        }
    }
    acc
}

/// `sq_dist` against four rows at once; each lane keeps the single-pair order.
fn sq_dist4(a: &[f64], g: [&[f64]; 4]) -> [f64; 4] {
    let mut acc = [0.0; 4];
    for j in (0..a.len()).rev() {
        let x = a[j];
        for l in 0..4 {
            let t = x - g[l][j];
            acc[l] += t * t;
        }
    }
    acc
}

/// Cosine from accumulated parts; a zero-norm side scores 0.
pub(crate) fn cosine_from_parts(dot: f64, sq_a: f64, sq_b: f64) -> f64 {
    if sq_a == 0.0 || sq_b == 0.0 {
        0.0
    } else {
        dot / (sq_a.sqrt() * sq_b.sqrt())
    }
}

pub(crate) fn neg_euclidean_from_sq(sq: f64) -> f64 {
    -sq.sqrt()
}

/// Probe-by-gallery similarity scores, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    probes: usize,
    gallery: usize,
    values: Vec<f64>,
    measure: Measure,
    templated: bool,
}

impl ScoreMatrix {
    pub fn from_values(
        probes: usize,
        gallery: usize,
        values: Vec<f64>,
        measure: Measure,
        templated: bool,
    ) -> Result<Self, MetricsError> {
        assert_eq!(values.len(), probes * gallery, "score buffer shape");
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite);
        }
        Ok(Self {
            probes,
            gallery,
            values,
            measure,
            templated,
        })
    }

    pub fn probes(&self) -> usize {
        self.probes
    }

    pub fn gallery(&self) -> usize {
        self.gallery
    }

    pub fn measure(&self) -> Measure {
        self.measure
    }

    pub fn templated(&self) -> bool {
        self.templated
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.gallery..(i + 1) * self.gallery]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.gallery + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Scores every probe row against every gallery row.
pub fn score_matrix(
    probes: ArrayView2<f64>,
    gallery: ArrayView2<f64>,
    measure: Measure,
    templated: bool,
) -> Result<ScoreMatrix, MetricsError> {
    if probes.ncols() != gallery.ncols() {
        return Err(MetricsError::DimensionMismatch {
            probe: probes.ncols(),
            gallery: gallery.ncols(),
        });
    }
    if probes.nrows() == 0 {
        return Err(MetricsError::EmptySide("probe"));
    }
    if gallery.nrows() == 0 {
        return Err(MetricsError::EmptySide("gallery"));
    }
    let probes = probes.as_standard_layout();
    let gallery = gallery.as_standard_layout();
    let d = probes.ncols();
    let p_rows: Vec<&[f64]> = probes.as_slice().unwrap().chunks_exact(d.max(1)).collect();
    let g_rows: Vec<&[f64]> = gallery.as_slice().unwrap().chunks_exact(d.max(1)).collect();
    let g_norms: Vec<f64> = g_rows.iter().map(|g| sq_norm(g)).collect();
    let n_gallery = g_rows.len();

    let mut values = vec![0.0; p_rows.len() * n_gallery];
    values
        .par_chunks_mut(n_gallery)
        .zip(p_rows.par_iter())
        .for_each(|(out, p)| match measure {
            Measure::Cosine => {
                let pn = sq_norm(p);
                let full = n_gallery / 4 * 4;
                for c in (0..full).step_by(4) {
                    let dots = dot4(p, [g_rows[c], g_rows[c + 1], g_rows[c + 2], g_rows[c + 3]]);
                    for l in 0..4 {
                        out[c + l] = cosine_from_parts(dots[l], pn, g_norms[c + l]);
                    }
                }
                for c in full..n_gallery {
                    out[c] = cosine_from_parts(dot(p, g_rows[c]), pn, g_norms[c]);
                }
            }
            Measure::NegativeEuclidean => {
                let full = n_gallery / 4 * 4;
                for c in (0..full).step_by(4) {
                    let sq = sq_dist4(p, [g_rows[c], g_rows[c + 1], g_rows[c + 2], g_rows[c + 3]]);
                    for l in 0..4 {
                        out[c + l] = neg_euclidean_from_sq(sq[l]);
                    }
                }
                for c in full..n_gallery {
                    out[c] = neg_euclidean_from_sq(sq_dist(p, g_rows[c]));
                }
            }
        });
    ScoreMatrix::from_values(p_rows.len(), n_gallery, values, measure, templated)
}

/// Identity (and dataset) labels of a score matrix's rows and columns, interned.
#[derive(Clone, Debug)]
pub struct Pairing {
    probe_ids: Vec<u32>,
    gallery_ids: Vec<u32>,
    probe_datasets: Option<Vec<u32>>,
    gallery_datasets: Option<Vec<u32>>,
}

fn intern<'a>(table: &mut HashMap<&'a str, u32>, labels: &'a [String]) -> Vec<u32> {
    labels
        .iter()
        .map(|s| {
            let next = table.len() as u32;
            *table.entry(s.as_str()).or_insert(next)
        })
        .collect()
}

impl Pairing {
    pub fn new(probe_ids: &[String], gallery_ids: &[String]) -> Self {
        let mut table = HashMap::new();
        let gallery_ids = intern(&mut table, gallery_ids);
        let probe_ids = intern(&mut table, probe_ids);
        Self {
            probe_ids,
            gallery_ids,
            probe_datasets: None,
            gallery_datasets: None,
        }
    }

    /// Attaches dataset tags, used by the same-dataset exclusion rule.
    pub fn with_datasets(mut self, probe_datasets: &[String], gallery_datasets: &[String]) -> Self {
        let mut table = HashMap::new();
        self.gallery_datasets = Some(intern(&mut table, gallery_datasets));
        self.probe_datasets = Some(intern(&mut table, probe_datasets));
        self
    }

    pub fn from_sets(probes: &LabeledSet, gallery: &LabeledSet) -> Self {
        Self::new(&probes.identities, &gallery.identities).with_datasets(&probes.datasets, &gallery.datasets)
    }

    pub fn probes(&self) -> usize {
        self.probe_ids.len()
    }

    pub fn gallery(&self) -> usize {
        self.gallery_ids.len()
    }

    pub fn is_genuine(&self, i: usize, j: usize) -> bool {
        self.probe_ids[i] == self.gallery_ids[j]
    }

    fn is_junk(&self, i: usize, j: usize, exclude_same_dataset: bool) -> bool {
        exclude_same_dataset
            && self.is_genuine(i, j)
            && match (&self.probe_datasets, &self.gallery_datasets) {
                (Some(p), Some(g)) => p[i] == g[j],
                _ => false,
            }
    }

    fn check(&self, scores: &ScoreMatrix) -> Result<(), MetricsError> {
        if self.probes() != scores.probes() {
            return Err(MetricsError::LabelCount {
                axis: "probe",
                labels: self.probes(),
                expected: scores.probes(),
            });
        }
        if self.gallery() != scores.gallery() {
            return Err(MetricsError::LabelCount {
                axis: "gallery",
                labels: self.gallery(),
                expected: scores.gallery(),
            });
        }
        Ok(())
    }
}

/// 1-based ranks of the correct gallery entries for one probe, ascending.
/// Ties go to the entry that comes first in gallery order. `None` when the
/// probe has no correct entry.
fn correct_ranks(row: &[f64], i: usize, pairs: &Pairing, exclude_same_dataset: bool) -> Option<Vec<usize>> {
    let admitted = |j: usize| !pairs.is_junk(i, j, exclude_same_dataset);
    let correct: Vec<usize> = (0..row.len())
        .filter(|&j| pairs.is_genuine(i, j) && admitted(j))
        .collect();
    if correct.is_empty() {
        return None;
    }
    let mut ranks: Vec<usize> = correct
        .iter()
        .map(|&c| {
            let s = row[c];
            1 + row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| j != c && (v > s || (v == s && j < c)) && admitted(j))
                .count()
        })
        .collect();
    ranks.sort_unstable();
    Some(ranks)
}

fn all_ranks(scores: &ScoreMatrix, pairs: &Pairing, exclude_same_dataset: bool) -> Vec<Option<Vec<usize>>> {
    (0..scores.probes())
        .into_par_iter()
        .map(|i| correct_ranks(scores.row(i), i, pairs, exclude_same_dataset))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmcPoint {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cmc {
    pub points: Vec<CmcPoint>,
    /// Probes whose identity has no gallery entry.
    pub excluded: usize,
}

fn check_ks(ks: &[usize]) -> Result<(), MetricsError> {
    if ks.is_empty() {
        return Err(MetricsError::EmptyKs);
    }
    if ks.contains(&0) {
        return Err(MetricsError::ZeroK);
    }
    Ok(())
}

fn cmc_from_ranks(ranks: &[Option<Vec<usize>>], ks: &[usize]) -> Result<Cmc, MetricsError> {
    let best: Vec<usize> = ranks.iter().flatten().map(|r| r[0]).collect();
    if best.is_empty() {
        return Err(MetricsError::NoMatchedProbes);
    }
    let n = best.len() as f64;
    let points = ks
        .iter()
        .map(|&k| CmcPoint {
            k,
            accuracy: best.iter().filter(|&&r| r <= k).count() as f64 / n,
        })
        .collect();
    Ok(Cmc {
        points,
        excluded: ranks.len() - best.len(),
    })
}

fn map_from_ranks(ranks: &[Option<Vec<usize>>]) -> Result<f64, MetricsError> {
    let aps: Vec<f64> = ranks
        .iter()
        .flatten()
        .map(|r| {
            let total: f64 = r.iter().enumerate().map(|(pos, &rank)| (pos + 1) as f64 / rank as f64).sum();
            total / r.len() as f64
        })
        .collect();
    if aps.is_empty() {
        return Err(MetricsError::NoMatchedProbes);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Cumulative match characteristic at each requested rank. Ranks beyond the
/// gallery size behave as the gallery size.
pub fn cmc(scores: &ScoreMatrix, pairs: &Pairing, ks: &[usize]) -> Result<Cmc, MetricsError> {
    check_ks(ks)?;
    pairs.check(scores)?;
    cmc_from_ranks(&all_ranks(scores, pairs, false), ks)
}

/// Mean over probes (with at least one correct entry) of average precision.
pub fn mean_average_precision(scores: &ScoreMatrix, pairs: &Pairing) -> Result<f64, MetricsError> {
    pairs.check(scores)?;
    map_from_ranks(&all_ranks(scores, pairs, false))
}

/// Genuine and impostor scores in row-major order.
pub fn split_scores(scores: &ScoreMatrix, pairs: &Pairing) -> (Vec<f64>, Vec<f64>) {
    let mut genuine = Vec::new();
    let mut impostor = Vec::with_capacity(scores.values.len());
    for i in 0..scores.probes() {
        for (j, &s) in scores.row(i).iter().enumerate() {
            if pairs.is_genuine(i, j) {
                genuine.push(s);
            } else {
                impostor.push(s);
            }
        }
    }
    (genuine, impostor)
}

fn check_scores(genuine: &[f64], impostor: &[f64]) -> Result<(), MetricsError> {
    if genuine.is_empty() {
        return Err(MetricsError::EmptySide("genuine"));
    }
    if impostor.is_empty() {
        return Err(MetricsError::EmptySide("impostor"));
    }
    if genuine.iter().chain(impostor).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    Ok(())
}

/// Mann-Whitney estimate of P(genuine > impostor), ties counted one half.
pub fn roc_auc(genuine: &[f64], impostor: &[f64]) -> Result<f64, MetricsError> {
    check_scores(genuine, impostor)?;
    let mut sorted = genuine.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len() as u64;
    // Twice the Mann-Whitney U, kept integral so the result is exact.
    let mut twice_u: u64 = 0;
    for &x in impostor {
        let at_most = sorted.partition_point(|&g| g <= x) as u64;
        let below = sorted.partition_point(|&g| g < x) as u64;
        twice_u += 2 * (n - at_most) + (at_most - below);
    }
    Ok(twice_u as f64 / (2 * n * impostor.len() as u64) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far_target: f64,
    pub tar: f64,
    /// Acceptance threshold; `None` stands for minus infinity (accept all).
    pub threshold: Option<f64>,
    pub realized_far: f64,
}

/// True-accept rate at the order-statistic threshold for `far_target`.
///
/// With impostors sorted descending and `m = floor(far_target * n)`, the
/// threshold is the `m`-th impostor (0-indexed) and only scores strictly
/// above it are accepted, so the realized FAR never exceeds the target.
pub fn tar_at_far(genuine: &[f64], impostor: &[f64], far_target: f64) -> Result<TarAtFar, MetricsError> {
    check_scores(genuine, impostor)?;
    check_far(far_target)?;
    let mut buf = impostor.to_vec();
    Ok(tar_with_buffer(genuine, impostor, &mut buf, far_target))
}

fn check_far(far_target: f64) -> Result<(), MetricsError> {
    if !(far_target > 0.0 && far_target < 1.0) {
        return Err(MetricsError::FarTarget(far_target));
    }
    Ok(())
}

fn tar_with_buffer(genuine: &[f64], impostor: &[f64], buf: &mut [f64], far_target: f64) -> TarAtFar {
    let n = buf.len();
    let m = (far_target * n as f64).floor() as usize;
    let threshold = (m < n).then(|| {
        let (_, nth, _) = buf.select_nth_unstable_by(m, |a, b| b.total_cmp(a));
        *nth
    });
    let accepted = |xs: &[f64]| match threshold {
        Some(t) => xs.iter().filter(|&&x| x > t).count(),
        None => xs.len(),
    };
    TarAtFar {
        far_target,
        tar: accepted(genuine) as f64 / genuine.len() as f64,
        threshold,
        realized_far: accepted(impostor) as f64 / n as f64,
    }
}

/// What to compute and how to label the result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub measure: Measure,
    /// Whether the gallery side holds identity templates rather than images.
    pub templated: bool,
    pub ks: Vec<usize>,
    pub far_targets: Vec<f64>,
    /// Drop gallery entries sharing both identity and dataset tag with the
    /// probe from CMC and mAP ranking.
    pub exclude_same_dataset: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            measure: Measure::Cosine,
            templated: false,
            ks: vec![1, 20],
            far_targets: vec![1e-3],
            exclude_same_dataset: false,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<(), MetricsError> {
        check_ks(&self.ks)?;
        self.far_targets.iter().try_for_each(|&f| check_far(f))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub measure: Measure,
    pub templated: bool,
    pub subspace: Option<String>,
    pub probes: usize,
    pub gallery: usize,
    pub excluded_probes: usize,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
    pub auc: f64,
    pub map: f64,
    pub cmc: Vec<CmcPoint>,
    pub tar_at_far: Vec<TarAtFar>,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.cmc.iter().find(|p| p.k == k).map(|p| p.accuracy)
    }

    pub fn rank1(&self) -> Option<f64> {
        self.rank(1)
    }

    pub fn with_subspace(mut self, descriptor: impl Into<String>) -> Self {
        self.subspace = Some(descriptor.into());
        self
    }

    /// One `metric,value` row per metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let _ = writeln!(out, "auc,{}", self.auc);
        let _ = writeln!(out, "map,{}", self.map);
        for p in &self.cmc {
            let _ = writeln!(out, "rank{},{}", p.k, p.accuracy);
        }
        for t in &self.tar_at_far {
            let _ = writeln!(out, "tar@far={},{}", t.far_target, t.tar);
        }
        out
    }
}

/// Computes every metric family from a score matrix.
pub fn evaluate_scores(
    scores: &ScoreMatrix,
    pairs: &Pairing,
    settings: &EvalSettings,
) -> Result<EvalReport, MetricsError> {
    settings.validate()?;
    pairs.check(scores)?;
    let ranks = all_ranks(scores, pairs, settings.exclude_same_dataset);
    let cmc = cmc_from_ranks(&ranks, &settings.ks)?;
    let map = map_from_ranks(&ranks)?;
    let (genuine, impostor) = split_scores(scores, pairs);
    let auc = roc_auc(&genuine, &impostor)?;
    let mut buf = impostor.clone();
    let tar_at_far = settings
        .far_targets
        .iter()
        .map(|&f| tar_with_buffer(&genuine, &impostor, &mut buf, f))
        .collect();
    Ok(EvalReport {
        measure: scores.measure(),
        templated: scores.templated(),
        subspace: None,
        probes: scores.probes(),
        gallery: scores.gallery(),
        excluded_probes: cmc.excluded,
        genuine_pairs: genuine.len(),
        impostor_pairs: impostor.len(),
        auc,
        map,
        cmc: cmc.points,
        tar_at_far,
    })
}

/// Scores `probes` against `gallery` and evaluates every metric family.
pub fn evaluate(probes: &LabeledSet, gallery: &LabeledSet, settings: &EvalSettings) -> Result<EvalReport, MetricsError> {
    settings.validate()?;
    let scores = score_matrix(probes.vectors.view(), gallery.vectors.view(), settings.measure, settings.templated)?;
    evaluate_scores(&scores, &Pairing::from_sets(probes, gallery), settings)
}
