mod common;

use common::jacobi_eigen;
use ndarray::Array2;
use reidpc::pca::fit_pca;
use reidpc::synth::{generate, AttributeScope, AttributeSpec, SynthConfig};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosines of the principal angles between two orthonormal row sets.
fn principal_cosines(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<f64> {
    let m = Array2::from_shape_fn((a.len(), b.len()), |(i, j)| dot(&a[i], &b[j]));
    let gram = m.dot(&m.t());
    let (values, _) = jacobi_eigen(&gram);
    values.iter().map(|v| v.max(0.0).sqrt()).collect()
}

fn image_matrix(corpus: &reidpc::corpus::EmbeddingCorpus) -> Array2<f64> {
    let d = corpus.dimension();
    Array2::from_shape_fn((corpus.len(), d), |(i, j)| f64::from(corpus.records()[i].vector[j]))
}

/// Total variance of `x` inside the span of the orthonormal rows `basis`.
fn block_variance(x: &Array2<f64>, basis: &[Vec<f64>]) -> f64 {
    let n = x.nrows() as f64;
    basis
        .iter()
        .map(|b| {
            let proj: Vec<f64> = x.rows().into_iter().map(|r| dot(r.as_slice().unwrap(), b)).collect();
            let mean = proj.iter().sum::<f64>() / n;
            proj.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / (n - 1.0)
        })
        .sum()
}

#[test]
fn top_components_recover_the_nuisance_block() {
    let config = SynthConfig::benchmark(3);
    let (corpus, truth) = generate(&config).unwrap();
    let x = image_matrix(&corpus);
    let basis = fit_pca(x.view()).unwrap();
    let top: Vec<Vec<f64>> = (0..config.nuisance_dim).map(|i| basis.component(i).to_vec()).collect();
    let cosines = principal_cosines(&top, &truth.nuisance_basis);
    let worst = cosines.iter().cloned().fold(1.0, f64::min);
    assert!(worst > 5f64.to_radians().cos(), "largest principal angle {:.2} deg", worst.acos().to_degrees());
}

#[test]
fn block_variances_match_configuration() {
    let config = SynthConfig::benchmark(4);
    let (corpus, truth) = generate(&config).unwrap();
    let x = image_matrix(&corpus);
    let noise = config.noise_variance;
    let id = block_variance(&x, &truth.identity_basis);
    let nuis = block_variance(&x, &truth.nuisance_basis);
    let total: f64 = (0..x.ncols())
        .map(|j| {
            let c = x.column(j);
            let m = c.sum() / c.len() as f64;
            c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (c.len() as f64 - 1.0)
        })
        .sum();
    let rest_dims = (config.dimension - config.identity_dim - config.nuisance_dim) as f64;
    let expected = [
        ("identity", id, config.identity_variance + noise * config.identity_dim as f64),
        ("nuisance", nuis, config.nuisance_variance + noise * config.nuisance_dim as f64),
        ("noise", total - id - nuis, noise * rest_dims),
    ];
    for (name, got, want) in expected {
        assert!((got - want).abs() <= 0.1 * want, "{name}: {got} vs {want}");
    }
}

#[test]
fn ground_truth_bases_are_mutually_orthogonal() {
    let mut config = SynthConfig::benchmark(5);
    config.identities = 4;
    config.attributes = vec![AttributeSpec {
        name: "gender".into(),
        classes: 2,
        effect_norm: 1.0,
        scope: AttributeScope::Identity,
    }];
    let (_, truth) = generate(&config).unwrap();
    let mut all: Vec<Vec<f64>> = truth.identity_basis.clone();
    all.extend(truth.nuisance_basis.iter().cloned());
    all.extend(truth.attribute_bases["gender"].iter().cloned());
    for (i, a) in all.iter().enumerate() {
        for (j, b) in all.iter().enumerate() {
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((dot(a, b) - expect).abs() < 1e-10);
        }
    }
}

#[test]
fn dataset_offset_shifts_the_corpus_mean() {
    let mut config = SynthConfig::benchmark(6);
    config.dataset_offset = 4.0;
    config.identities = 60;
    let (corpus, truth) = generate(&config).unwrap();
    let x = image_matrix(&corpus);
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    let norm = dot(&truth.dataset_offset, &truth.dataset_offset).sqrt();
    assert!((norm - 4.0).abs() < 1e-9);
    let along = dot(mean.as_slice().unwrap(), &truth.dataset_offset) / norm;
    assert!((along - 4.0).abs() < 0.5, "{along}");
}

#[test]
fn identical_configs_give_identical_bytes() {
    let mut config = SynthConfig::benchmark(7);
    config.identities = 10;
    let (a, ta) = generate(&config).unwrap();
    let (b, tb) = generate(&config).unwrap();
    assert_eq!(a.records(), b.records());
    assert_eq!(ta, tb);
    config.seed = 8;
    let (c, _) = generate(&config).unwrap();
    assert_ne!(a.records()[0].vector, c.records()[0].vector);
}
