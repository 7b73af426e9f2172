//! Prefix excision of principal components: the probe-aware oracle sweep, the
//! gallery-only subspace selection, and plain PCA-space evaluation.
//!
//! All three fit PCA on a gallery (templates or images), project gallery and
//! probes with the gallery mean, and score in the retained coordinates.

use std::fmt::Write as _;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CorpusError, EmbeddingCorpus, LabeledSet, TemplateGallery};
use crate::metrics::{
    self, cosine_from_parts, neg_euclidean_from_sq, EvalReport, EvalSettings, Measure, MetricsError, Pairing,
    ScoreMatrix,
};
use crate::pca::{fit_pca, PcaBasis, PcaError};

/// Template-based PCA needs at least this many gallery identities.
pub const MIN_IDENTITIES: usize = 3;

#[derive(Debug, Error)]
pub enum SubspaceError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Pca(#[from] PcaError),
    #[error("{found} gallery identities; template PCA needs at least {MIN_IDENTITIES}")]
    TooFewIdentities { found: usize },
    #[error("selection was fitted on a different gallery (fingerprint {expected}, corpus gives {found})")]
    FingerprintMismatch { expected: String, found: String },
    #[error("selection was made under {expected:?} scoring, evaluation requested {found:?}")]
    MeasureMismatch { expected: Measure, found: Measure },
    #[error("selection expects a rank-{expected} basis, corpus gallery gives rank {found}")]
    RankMismatch { expected: usize, found: usize },
}

/// Which gallery rows PCA is fitted on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitSource {
    #[serde(rename = "images")]
    GalleryImages,
    #[default]
    Templates,
}

fn templates_of(gallery: &LabeledSet) -> Result<LabeledSet, CorpusError> {
    Ok(TemplateGallery::from_gallery(gallery)?.to_labeled())
}

fn require_identities(set: &LabeledSet) -> Result<(), SubspaceError> {
    if set.len() < MIN_IDENTITIES {
        return Err(SubspaceError::TooFewIdentities { found: set.len() });
    }
    Ok(())
}

/// Fits the basis on the templates of `source`.
fn template_basis(source: &LabeledSet) -> Result<PcaBasis, SubspaceError> {
    let fit = templates_of(source)?;
    require_identities(&fit)?;
    Ok(fit_pca(fit.vectors.view())?)
}

fn project(basis: &PcaBasis, set: &LabeledSet, retain: &[usize]) -> Result<LabeledSet, PcaError> {
    Ok(set.with_vectors(basis.project(set.vectors.view(), retain)?.coordinates))
}

/// SHA-256 over the identities and coordinate bits of a gallery, hex encoded.
pub fn gallery_fingerprint(gallery: &LabeledSet) -> String {
    let mut h = Sha256::new();
    h.update((gallery.dimension() as u64).to_le_bytes());
    for (i, id) in gallery.identities.iter().enumerate() {
        h.update((id.len() as u64).to_le_bytes());
        h.update(id.as_bytes());
        for v in gallery.row(i) {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Raw-embedding evaluation of probes against gallery images or templates.
pub fn raw_eval(corpus: &EmbeddingCorpus, settings: &EvalSettings) -> Result<EvalReport, SubspaceError> {
    corpus.ensure_evaluable()?;
    let gallery = corpus.gallery();
    let gallery = if settings.templated { templates_of(&gallery)? } else { gallery };
    Ok(metrics::evaluate(&corpus.probes(), &gallery, settings)?.with_subspace("raw"))
}

/// Evaluates in the full-rank PC space of the gallery.
///
/// PCA is fitted on `aux` when given (combined-gallery fitting), otherwise on
/// the corpus gallery, using its images or its templates. Rank truncation is
/// implicit: coordinates span only the fitted rank.
pub fn pca_eval(
    corpus: &EmbeddingCorpus,
    settings: &EvalSettings,
    fit_on: FitSource,
    aux: Option<&LabeledSet>,
) -> Result<EvalReport, SubspaceError> {
    corpus.ensure_evaluable()?;
    let gallery = corpus.gallery();
    let probes = corpus.probes();
    let source = aux.unwrap_or(&gallery);
    let basis = match fit_on {
        FitSource::Templates => template_basis(source)?,
        FitSource::GalleryImages => fit_pca(source.vectors.view())?,
    };
    let eval_gallery = if settings.templated { templates_of(&gallery)? } else { gallery };
    let all = basis.all_components();
    let report = metrics::evaluate(
        &project(&basis, &probes, &all)?,
        &project(&basis, &eval_gallery, &all)?,
        settings,
    )?;
    Ok(report.with_subspace("pca-full"))
}

/// Running per-pair accumulators over a growing suffix of coordinates.
///
/// Columns must be added from the last one downward; after adding column
/// `k`, [`SuffixScorer::snapshot`] equals [`metrics::score_matrix`] applied
/// to columns `k..` exactly.
struct SuffixScorer<'a> {
    probes: &'a Array2<f64>,
    gallery: &'a Array2<f64>,
    measure: Measure,
    pair: Vec<f64>,
    probe_sq: Vec<f64>,
    gallery_sq: Vec<f64>,
    next: usize,
}

impl<'a> SuffixScorer<'a> {
    fn new(probes: &'a Array2<f64>, gallery: &'a Array2<f64>, measure: Measure) -> Self {
        assert_eq!(probes.ncols(), gallery.ncols());
        Self {
            probes,
            gallery,
            measure,
            pair: vec![0.0; probes.nrows() * gallery.nrows()],
            probe_sq: vec![0.0; probes.nrows()],
            gallery_sq: vec![0.0; gallery.nrows()],
            next: probes.ncols(),
        }
    }

    fn add_column(&mut self, c: usize) {
        assert_eq!(c + 1, self.next, "columns are added last to first");
        self.next = c;
        let pc: Vec<f64> = self.probes.column(c).to_vec();
        let gc: Vec<f64> = self.gallery.column(c).to_vec();
        let width = gc.len();
        match self.measure {
            Measure::Cosine => {
                self.pair.par_chunks_mut(width).zip(pc.par_iter()).for_each(|(row, &p)| {
                    for (a, &g) in row.iter_mut().zip(&gc) {
                        *a += p * g;
                    }
                });
                for (s, &p) in self.probe_sq.iter_mut().zip(&pc) {
                    *s += p * p;
                }
                for (s, &g) in self.gallery_sq.iter_mut().zip(&gc) {
                    *s += g * g;
                }
            }
            Measure::NegativeEuclidean => {
                self.pair.par_chunks_mut(width).zip(pc.par_iter()).for_each(|(row, &p)| {
                    for (a, &g) in row.iter_mut().zip(&gc) {
                        let t = p - g;
                        *a += t * t;
                    }
                });
            }
        }
    }

    fn snapshot(&self, templated: bool) -> Result<ScoreMatrix, MetricsError> {
        let width = self.gallery.nrows();
        let mut values = vec![0.0; self.pair.len()];
        values
            .par_chunks_mut(width)
            .zip(self.pair.par_chunks(width))
            .zip(self.probe_sq.par_iter())
            .for_each(|((out, acc), &pn)| match self.measure {
                Measure::Cosine => {
                    for ((o, &a), &gn) in out.iter_mut().zip(acc).zip(&self.gallery_sq) {
                        *o = cosine_from_parts(a, pn, gn);
                    }
                }
                Measure::NegativeEuclidean => {
                    for (o, &a) in out.iter_mut().zip(acc) {
                        *o = neg_euclidean_from_sq(a);
                    }
                }
            });
        ScoreMatrix::from_values(self.probes.nrows(), width, values, self.measure, templated)
    }
}

/// Walks the excision count from `rank - 1` down to 0, handing each score
/// matrix to `eval`. Matrices are evaluated in parallel batches; results are
/// returned in ascending `k`.
fn sweep_scores<T: Send>(
    probes: &Array2<f64>,
    gallery: &Array2<f64>,
    measure: Measure,
    templated: bool,
    eval: impl Fn(usize, &ScoreMatrix) -> Result<T, SubspaceError> + Sync,
) -> Result<Vec<T>, SubspaceError> {
    let rank = probes.ncols();
    let batch = rayon::current_num_threads().clamp(1, 8);
    let mut scorer = SuffixScorer::new(probes, gallery, measure);
    let mut out: Vec<T> = Vec::with_capacity(rank);
    let mut pending: Vec<(usize, ScoreMatrix)> = Vec::with_capacity(batch);
    for k in (0..rank).rev() {
        scorer.add_column(k);
        pending.push((k, scorer.snapshot(templated)?));
        if pending.len() == batch || k == 0 {
            let done = pending
                .par_iter()
                .map(|(k, s)| eval(*k, s))
                .collect::<Result<Vec<T>, _>>()?;
            out.extend(done);
            pending.clear();
        }
    }
    out.reverse();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub report: EvalReport,
}

/// Metrics for every prefix excision `k = 0..rank`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub measure: Measure,
    pub templated: bool,
    pub rank: usize,
    pub far_targets: Vec<f64>,
    pub explained_variance: Vec<f64>,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn rank1_curve(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.report.rank1().unwrap_or(f64::NAN)).collect()
    }

    /// Smallest `k` attaining the maximal rank-1, with that rank-1.
    pub fn best_rank1(&self) -> (usize, f64) {
        argmax_smallest(&self.rank1_curve())
    }

    /// `k,rank1,map,tar_far_<target>...,auc`, one row per `k`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,rank1,map");
        for f in &self.far_targets {
            let _ = write!(out, ",tar_far_{f}");
        }
        out.push_str(",auc\n");
        for row in &self.rows {
            let r = &row.report;
            let _ = write!(out, "{},{},{}", row.k, r.rank1().unwrap_or(f64::NAN), r.map);
            for t in &r.tar_at_far {
                let _ = write!(out, ",{}", t.tar);
            }
            let _ = writeln!(out, ",{}", r.auc);
        }
        out
    }
}

fn argmax_smallest(curve: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, &v) in curve.iter().enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best
}

fn with_rank1(settings: &EvalSettings) -> EvalSettings {
    let mut s = settings.clone();
    if !s.ks.contains(&1) {
        s.ks.insert(0, 1);
    }
    s
}

/// Probe-aware sweep over prefix excisions of the template PCA basis.
///
/// Builds templates from the gallery, fits PCA on them (or on the templates
/// of `aux`), and for every `k` from 0 to `rank - 1` evaluates the probes
/// against the gallery with the `k` highest-variance components removed.
/// Rank 1 is always computed, whether or not `settings.ks` lists it.
pub fn oracle_sweep(
    corpus: &EmbeddingCorpus,
    settings: &EvalSettings,
    aux: Option<&LabeledSet>,
) -> Result<SweepResult, SubspaceError> {
    corpus.ensure_evaluable()?;
    let settings = with_rank1(settings);
    settings.validate()?;
    let gallery = corpus.gallery();
    let probes = corpus.probes();
    let templates = templates_of(&gallery)?;
    require_identities(&templates)?;
    let basis = template_basis(aux.unwrap_or(&gallery))?;

    let eval_gallery = if settings.templated { &templates } else { &gallery };
    let all = basis.all_components();
    let pg = basis.project(eval_gallery.vectors.view(), &all)?.coordinates;
    let pp = basis.project(probes.vectors.view(), &all)?.coordinates;
    let pairs = Pairing::from_sets(&probes, eval_gallery);

    let rows = sweep_scores(&pp, &pg, settings.measure, settings.templated, |k, scores| {
        let report = metrics::evaluate_scores(scores, &pairs, &settings)?;
        Ok(SweepRow {
            k,
            report: report.with_subspace(format!("oracle-k={k}")),
        })
    })?;
    Ok(SweepResult {
        measure: settings.measure,
        templated: settings.templated,
        rank: basis.rank(),
        far_targets: settings.far_targets.clone(),
        explained_variance: basis.explained_variance().to_vec(),
        rows,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectOptions {
    /// Score each gallery image against its identity's template recomputed
    /// without that image. Images of single-image identities are skipped.
    pub leave_one_out: bool,
}

/// Outcome of the gallery-only subspace search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceSelection {
    /// Number of leading components removed.
    pub excised: usize,
    pub retained: Vec<usize>,
    pub rank: usize,
    pub measure: Measure,
    pub rule: String,
    /// Gallery-image-vs-template rank-1 for each `k`.
    pub self_rank1: Vec<f64>,
    pub degenerate: bool,
    pub warning: Option<String>,
    /// Fingerprint of the gallery the basis was fitted on.
    pub fit_fingerprint: String,
}

/// Picks the excision count from the gallery alone.
///
/// Templates are built from `gallery` and PCA is fitted on them (or on the
/// templates of `basis_source`). For each `k`, gallery images are matched
/// against the templates in the subspace without the top `k` components;
/// the chosen `k` is the smallest one maximizing that rank-1. Probes are
/// never seen.
pub fn select_subspace(
    gallery: &LabeledSet,
    measure: Measure,
    options: SelectOptions,
    basis_source: Option<&LabeledSet>,
) -> Result<SubspaceSelection, SubspaceError> {
    let tg = TemplateGallery::from_gallery(gallery)?;
    let templates = tg.to_labeled();
    require_identities(&templates)?;
    let source = basis_source.unwrap_or(gallery);
    let basis = template_basis(source)?;
    let all = basis.all_components();
    let pt = basis.project(templates.vectors.view(), &all)?.coordinates;
    let pg = basis.project(gallery.vectors.view(), &all)?.coordinates;

    let singletons = tg.entries().iter().all(|e| e.image_count == 1);
    let curve = if options.leave_one_out {
        let counts: Vec<usize> = tg.entries().iter().map(|e| e.image_count).collect();
        leave_one_out_curve(&pg, &pt, &Pairing::new(&gallery.identities, &templates.identities), &counts, measure)
    } else {
        let pairs = Pairing::new(&gallery.identities, &templates.identities);
        sweep_scores(&pg, &pt, measure, true, |_, scores| {
            Ok(metrics::cmc(scores, &pairs, &[1])?.points[0].accuracy)
        })?
    };

    let (excised, warning) = if singletons {
        (
            0,
            Some("every gallery identity has a single image; self-evaluation is degenerate, no components excised".into()),
        )
    } else {
        (argmax_smallest(&curve).0, None)
    };
    let rule = if options.leave_one_out {
        "max-self-rank1-smallest-k/leave-one-out"
    } else {
        "max-self-rank1-smallest-k"
    };
    Ok(SubspaceSelection {
        excised,
        retained: basis.excise_prefix(excised)?,
        rank: basis.rank(),
        measure,
        rule: rule.into(),
        self_rank1: curve,
        degenerate: singletons,
        warning,
        fit_fingerprint: gallery_fingerprint(source),
    })
}

/// Rank-1 per `k` of gallery images against templates, where each image's
/// own template is replaced by the mean of the identity's other images.
fn leave_one_out_curve(
    images: &Array2<f64>,
    templates: &Array2<f64>,
    pairs: &Pairing,
    counts: &[usize],
    measure: Measure,
) -> Vec<f64> {
    let rank = images.ncols();
    let own: Vec<Option<usize>> = (0..images.nrows())
        .map(|i| (0..templates.nrows()).find(|&j| pairs.is_genuine(i, j)).filter(|&c| counts[c] >= 2))
        .collect();
    let eligible: Vec<usize> = (0..own.len()).filter(|&i| own[i].is_some()).collect();
    if eligible.is_empty() {
        return Vec::new();
    }
    // Own template without image i, in projected coordinates.
    let loo = Array2::from_shape_fn((eligible.len(), rank), |(e, q)| {
        let i = eligible[e];
        let c = own[i].unwrap();
        let n = counts[c] as f64;
        (n * templates[[c, q]] - images[[i, q]]) / (n - 1.0)
    });
    let mut scorer = SuffixScorer::new(images, templates, measure);
    let mut own_acc = vec![0.0; eligible.len()];
    let mut own_sq = vec![0.0; eligible.len()];
    let mut curve = vec![0.0; rank];
    for k in (0..rank).rev() {
        scorer.add_column(k);
        let scores = scorer
            .snapshot(true)
            .expect("projected coordinates are finite");
        let mut hits = 0usize;
        for (e, &i) in eligible.iter().enumerate() {
            let c = own[i].unwrap();
            let (x, t) = (images[[i, k]], loo[[e, k]]);
            let s = match measure {
                Measure::Cosine => {
                    own_acc[e] += x * t;
                    own_sq[e] += t * t;
                    cosine_from_parts(own_acc[e], scorer.probe_sq[i], own_sq[e])
                }
                Measure::NegativeEuclidean => {
                    let d = x - t;
                    own_acc[e] += d * d;
                    neg_euclidean_from_sq(own_acc[e])
                }
            };
            let beaten = scores
                .row(i)
                .iter()
                .enumerate()
                .any(|(j, &v)| j != c && (v > s || (v == s && j < c)));
            hits += usize::from(!beaten);
        }
        curve[k] = hits as f64 / eligible.len() as f64;
    }
    curve
}

/// Evaluates probes against the gallery in the subspace chosen by
/// [`select_subspace`]. The basis is refitted from the same gallery (or
/// `aux`), which the selection's fingerprint must match.
pub fn apply_selection(
    selection: &SubspaceSelection,
    corpus: &EmbeddingCorpus,
    settings: &EvalSettings,
    aux: Option<&LabeledSet>,
) -> Result<EvalReport, SubspaceError> {
    corpus.ensure_evaluable()?;
    if settings.measure != selection.measure {
        return Err(SubspaceError::MeasureMismatch {
            expected: selection.measure,
            found: settings.measure,
        });
    }
    let gallery = corpus.gallery();
    let source = aux.unwrap_or(&gallery);
    let found = gallery_fingerprint(source);
    if found != selection.fit_fingerprint {
        return Err(SubspaceError::FingerprintMismatch {
            expected: selection.fit_fingerprint.clone(),
            found,
        });
    }
    let basis = template_basis(source)?;
    if basis.rank() != selection.rank {
        return Err(SubspaceError::RankMismatch {
            expected: selection.rank,
            found: basis.rank(),
        });
    }
    let retain = basis.excise_prefix(selection.excised)?;
    let eval_gallery = if settings.templated { templates_of(&gallery)? } else { gallery };
    let report = metrics::evaluate(
        &project(&basis, &corpus.probes(), &retain)?,
        &project(&basis, &eval_gallery, &retain)?,
        settings,
    )?;
    Ok(report.with_subspace(format!("alg2-k={}", selection.excised)))
}
