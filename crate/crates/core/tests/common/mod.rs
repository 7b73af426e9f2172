//! Independent reference implementations used as test oracles. Everything
//! here is written the slow, obvious way and shares no code with the crate
//! beyond plain data types.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reidpc::corpus::{EmbeddingCorpus, EmbeddingRecord, Role};

pub fn naive_score(p: &[f64], g: &[f64], cosine: bool) -> f64 {
    if cosine {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
        let ng = g.iter().map(|a| a * a).sum::<f64>().sqrt();
        if np == 0.0 || ng == 0.0 {
            0.0
        } else {
            dot / (np * ng)
        }
    } else {
        -p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

pub fn naive_scores(probes: &Array2<f64>, gallery: &Array2<f64>, cosine: bool) -> Vec<Vec<f64>> {
    probes
        .rows()
        .into_iter()
        .map(|p| {
            gallery
                .rows()
                .into_iter()
                .map(|g| naive_score(p.as_slice().unwrap(), g.as_slice().unwrap(), cosine))
                .collect()
        })
        .collect()
}

/// Gallery order for one probe: descending score, ties to the lower index.
fn ranking(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    order
}

pub struct BruteMetrics {
    pub auc: f64,
    pub map: f64,
    pub cmc: Vec<f64>,
    pub tar: Vec<f64>,
    pub excluded: usize,
}

pub fn brute_metrics(
    scores: &[Vec<f64>],
    probe_ids: &[String],
    gallery_ids: &[String],
    ks: &[usize],
    fars: &[f64],
) -> BruteMetrics {
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for (i, row) in scores.iter().enumerate() {
        for (j, &s) in row.iter().enumerate() {
            if probe_ids[i] == gallery_ids[j] {
                genuine.push(s);
            } else {
                impostor.push(s);
            }
        }
    }
    let mut wins = 0.0;
    for &g in &genuine {
        for &x in &impostor {
            if g > x {
                wins += 1.0;
            } else if g == x {
                wins += 0.5;
            }
        }
    }
    let auc = wins / (genuine.len() * impostor.len()) as f64;

    let mut first_hits = Vec::new();
    let mut aps = Vec::new();
    let mut excluded = 0;
    for (i, row) in scores.iter().enumerate() {
        let order = ranking(row);
        let relevant = order.iter().filter(|&&j| gallery_ids[j] == probe_ids[i]).count();
        if relevant == 0 {
            excluded += 1;
            continue;
        }
        let mut hits = 0;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (pos, &j) in order.iter().enumerate() {
            if gallery_ids[j] == probe_ids[i] {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
                first.get_or_insert(pos + 1);
            }
        }
        first_hits.push(first.unwrap());
        aps.push(precision_sum / relevant as f64);
    }
    let n = first_hits.len() as f64;
    let cmc = ks
        .iter()
        .map(|&k| first_hits.iter().filter(|&&r| r <= k).count() as f64 / n)
        .collect();
    let map = aps.iter().sum::<f64>() / aps.len() as f64;

    // Loosest threshold among "accept s > t" candidates whose FAR stays
    // within the target.
    let tar = fars
        .iter()
        .map(|&far| {
            let mut candidates: Vec<f64> = impostor.clone();
            candidates.push(f64::NEG_INFINITY);
            candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let t = candidates
                .into_iter()
                .find(|&t| impostor.iter().filter(|&&x| x > t).count() as f64 <= far * impostor.len() as f64)
                .unwrap();
            genuine.iter().filter(|&&g| g > t).count() as f64 / genuine.len() as f64
        })
        .collect();
    BruteMetrics {
        auc,
        map,
        cmc,
        tar,
        excluded,
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with matching unit eigenvectors.
pub fn jacobi_eigen(a: &Array2<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum();
        let scale: f64 = m.iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n).map(|i| (m[[i, i]], v.column(i).to_vec())).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    pairs.into_iter().unzip()
}

/// Sample covariance (divisor n - 1) and column means.
pub fn covariance(x: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let (n, d) = x.dim();
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
    let mut c = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            let s: f64 = (0..n).map(|r| (x[[r, i]] - mean[i]) * (x[[r, j]] - mean[j])).sum();
            c[[i, j]] = s / (n - 1) as f64;
        }
    }
    (c, mean)
}

/// Per-identity mean of `rows`, identities in first-appearance order.
pub fn naive_templates(ids: &[String], rows: &Array2<f64>) -> (Vec<String>, Array2<f64>) {
    let mut order: Vec<String> = Vec::new();
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        let entry = sums.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (vec![0.0; rows.ncols()], 0)
        });
        for (s, v) in entry.0.iter_mut().zip(rows.row(i)) {
            *s += v;
        }
        entry.1 += 1;
    }
    let mut out = Array2::zeros((order.len(), rows.ncols()));
    for (t, id) in order.iter().enumerate() {
        let (s, c) = &sums[id];
        for j in 0..rows.ncols() {
            out[[t, j]] = s[j] / *c as f64;
        }
    }
    (order, out)
}

/// Coordinates of `rows` on eigenvectors `comps` after centering on `mean`.
pub fn naive_project(rows: &Array2<f64>, mean: &[f64], comps: &[Vec<f64>]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.nrows(), comps.len()));
    for i in 0..rows.nrows() {
        for (c, comp) in comps.iter().enumerate() {
            out[[i, c]] = (0..rows.ncols()).map(|j| (rows[[i, j]] - mean[j]) * comp[j]).sum();
        }
    }
    out
}

pub struct CorpusShape {
    pub identities: usize,
    pub max_images: usize,
    pub dimension: usize,
    /// Small integer coordinates, which produce exact score ties.
    pub integer: bool,
}

/// A random corpus; every identity has at least one gallery image and about
/// one identity in five has probes only (exercising probe exclusion).
pub fn random_corpus(rng: &mut ChaCha8Rng, shape: &CorpusShape) -> EmbeddingCorpus {
    let mut records = Vec::new();
    for id in 0..shape.identities {
        let center: Vec<f64> = (0..shape.dimension).map(|_| rng.random_range(-1.0..1.0)).collect();
        let images = rng.random_range(2..=shape.max_images.max(2));
        let probe_only = shape.identities > 3 && rng.random_bool(0.2);
        for n in 0..images {
            let role = if probe_only || n % 2 == 1 { Role::Probe } else { Role::Gallery };
            let vector = center
                .iter()
                .map(|c| {
                    if shape.integer {
                        rng.random_range(-2i32..=2) as f32
                    } else {
                        (c + rng.random_range(-0.7..0.7)) as f32
                    }
                })
                .collect();
            records.push(EmbeddingRecord {
                image_id: format!("id{id}-{n}"),
                identity_id: format!("id{id}"),
                role,
                dataset: "r".into(),
                attributes: BTreeMap::new(),
                vector,
            });
        }
    }
    // Guarantee at least one gallery record overall.
    if !records.iter().any(|r| r.role == Role::Gallery) {
        records[0].role = Role::Gallery;
    }
    EmbeddingCorpus::new(records).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    // Columns on different scales so eigenvalues are well separated.
    Array2::from_shape_fn((rows, cols), |(_, j)| rng.random_range(-1.0..1.0) * (1.0 + j as f64))
}
