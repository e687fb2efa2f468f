//! Representation-space diagnostics: cosine Hausdorff distance, mean
//! canonical correlation, 2-component PCA, and per-layer CCA between two
//! models.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{dot, Mat64};

/// Ridge added to both covariance blocks when a set has no more rows than
/// columns.
pub const CCA_RIDGE: f64 = 1e-6;

/// `1 − cos(s, t)`, clamped to `[0, 2]`.
pub fn cosine_distance(s: &[f64], t: &[f64]) -> Result<f64> {
    if s.len() != t.len() {
        return Err(Error::LengthMismatch { what: "cosine distance", expected: s.len(), got: t.len() });
    }
    let (ss, tt) = (dot(s, s), dot(t, t));
    if ss == 0.0 || tt == 0.0 {
        return Err(Error::Data("cosine distance of a zero vector".into()));
    }
    // sqrt(ss·tt) rather than |s|·|t| makes d(s, s) exactly 0
    Ok((1.0 - dot(s, t) / (ss * tt).sqrt()).clamp(0.0, 2.0))
}

/// Named row-encodings of one language/model combination.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationSet {
    pub label: String,
    pub matrix: Mat64,
}

impl RepresentationSet {
    pub fn new(label: impl Into<String>, matrix: Mat64) -> Result<RepresentationSet> {
        if matrix.rows() == 0 {
            return Err(Error::EmptyInput("representation set"));
        }
        if !matrix.is_finite() {
            return Err(Error::NonFinite("representation set"));
        }
        Ok(RepresentationSet { label: label.into(), matrix })
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }
}

fn directed(a: &Mat64, b: &Mat64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for s in a.iter_rows() {
        let mut best = f64::INFINITY;
        for t in b.iter_rows() {
            best = best.min(cosine_distance(s, t)?);
        }
        worst = worst.max(best);
    }
    Ok(worst)
}

/// `max(max_s min_t d(s,t), max_t min_s d(s,t))` with cosine distance,
/// evaluated exactly.
pub fn hausdorff(s: &RepresentationSet, t: &RepresentationSet) -> Result<f64> {
    if s.is_empty() || t.is_empty() {
        return Err(Error::EmptyInput("hausdorff point set"));
    }
    if s.matrix.cols() != t.matrix.cols() {
        return Err(Error::LengthMismatch {
            what: "hausdorff dimensions",
            expected: s.matrix.cols(),
            got: t.matrix.cols(),
        });
    }
    Ok(directed(&s.matrix, &t.matrix)?.max(directed(&t.matrix, &s.matrix)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcaResult {
    /// Mean canonical correlation.
    pub mean: f64,
    /// Canonical correlations, descending.
    pub correlations: Vec<f64>,
    /// True when the ridge route was taken (`n` not above both dimensions).
    pub regularized: bool,
}

fn to_dmatrix(m: &Mat64) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Orthonormal basis of the column space (left singular vectors above the
/// numerical-rank threshold).
fn column_basis(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, p) = m.shape();
    let svd = m.svd(true, false);
    let s_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if s_max == 0.0 {
        return Err(Error::RankZero);
    }
    let tol = s_max * n.max(p) as f64 * f64::EPSILON;
    let u = svd.u.expect("requested U");
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > tol).collect();
    Ok(u.select_columns(&keep))
}

/// Inverse square root of a symmetric positive-definite matrix.
fn inv_sqrt(c: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(c);
    let d = eig.eigenvalues.map(|l| 1.0 / l.max(f64::MIN_POSITIVE).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Mean canonical correlation between two row-aligned sets.
///
/// With `n` above both dimensions the correlations are the singular values
/// of `U_xᵀ U_y`, where `U` spans each centered column space; otherwise the
/// whitened cross-covariance is formed with [`CCA_RIDGE`] added to both
/// covariance blocks and the result is flagged.
pub fn cca_similarity(x: &RepresentationSet, y: &RepresentationSet) -> Result<CcaResult> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::LengthMismatch { what: "CCA rows", expected: n, got: y.len() });
    }
    if n < 3 {
        return Err(Error::Data(format!("CCA needs at least 3 rows, got {n}")));
    }
    let xc = to_dmatrix(&x.matrix.centered());
    let yc = to_dmatrix(&y.matrix.centered());
    let regularized = n <= xc.ncols() || n <= yc.ncols();
    let mut correlations: Vec<f64> = if !regularized {
        let ux = column_basis(xc)?;
        let uy = column_basis(yc)?;
        (ux.transpose() * uy).singular_values().iter().cloned().collect()
    } else {
        if xc.iter().all(|v| *v == 0.0) || yc.iter().all(|v| *v == 0.0) {
            return Err(Error::RankZero);
        }
        let scale = 1.0 / (n - 1) as f64;
        let cxx = xc.transpose() * &xc * scale + DMatrix::identity(xc.ncols(), xc.ncols()) * CCA_RIDGE;
        let cyy = yc.transpose() * &yc * scale + DMatrix::identity(yc.ncols(), yc.ncols()) * CCA_RIDGE;
        let cxy = xc.transpose() * &yc * scale;
        let m = inv_sqrt(cxx) * cxy * inv_sqrt(cyy);
        let mut s: Vec<f64> = m.singular_values().iter().cloned().collect();
        // at most n − 1 directions carry correlation after centering
        s.sort_by(|a, b| b.total_cmp(a));
        s.truncate((n - 1).min(s.len()));
        s
    };
    for c in &mut correlations {
        *c = c.clamp(0.0, 1.0);
    }
    correlations.sort_by(|a, b| b.total_cmp(a));
    let mean = correlations.iter().sum::<f64>() / correlations.len() as f64;
    Ok(CcaResult { mean, correlations, regularized })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca2 {
    /// `n × 2` projections of the centered rows.
    pub coords: Mat64,
    /// Fraction of total variance along each component.
    pub explained: [f64; 2],
    /// `2 × d` unit loadings; the largest-magnitude entry of each is positive.
    pub components: Mat64,
}

/// Top two principal components of the centered rows.
pub fn pca2(x: &RepresentationSet) -> Result<Pca2> {
    let n = x.len();
    if n < 3 {
        return Err(Error::Data(format!("PCA needs at least 3 rows, got {n}")));
    }
    let centered = x.matrix.centered();
    let d = centered.cols();
    let svd = to_dmatrix(&centered).svd(false, true);
    let vt = svd.v_t.expect("requested Vᵀ");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(Error::RankZero);
    }
    let mut components = Mat64::zeros(2, d);
    let mut explained = [0.0; 2];
    for (k, &i) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = vt.row(i).iter().cloned().collect();
        let lead = v.iter().cloned().fold(0.0, |m: f64, a| if a.abs() > m.abs() { a } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        components.row_mut(k).copy_from_slice(&v);
        explained[k] = svd.singular_values[i].powi(2) / total;
    }
    let coords = centered.matmul_nt(&components);
    Ok(Pca2 { coords, explained, components })
}

/// CCA similarity per encoder layer between two same-architecture models on
/// a probe input matrix (eval mode).
pub fn layer_cca_profile(before: &Model, after: &Model, probe: &Mat64) -> Result<Vec<CcaResult>> {
    before.check_same_architecture(after)?;
    if probe.rows() == 0 {
        return Err(Error::EmptyInput("probe set"));
    }
    let a = before.forward_eval(probe, None)?;
    let b = after.forward_eval(probe, None)?;
    a.activations
        .iter()
        .zip(&b.activations)
        .enumerate()
        .map(|(l, (x, y))| {
            cca_similarity(
                &RepresentationSet::new(format!("before/{l}"), x.clone())?,
                &RepresentationSet::new(format!("after/{l}"), y.clone())?,
            )
        })
        .collect()
}

/// One `pca.csv` row.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaPoint {
    pub id: String,
    pub language: String,
    pub x: f64,
    pub y: f64,
}

pub fn write_pca_csv(path: &Path, points: &[PcaPoint]) -> Result<()> {
    let mut out = String::from("id,language,x,y\n");
    for p in points {
        writeln!(out, "{},{},{},{}", p.id, p.language, p.x, p.y).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_cca_csv(path: &Path, profile: &[CcaResult]) -> Result<()> {
    let mut out = String::from("layer,similarity\n");
    for (l, r) in profile.iter().enumerate() {
        writeln!(out, "{l},{}", r.mean).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_hausdorff_csv(path: &Path, pairs: &[(String, f64)]) -> Result<()> {
    let mut out = String::from("pair,distance\n");
    for (pair, d) in pairs {
        writeln!(out, "{pair},{d}").unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn set(rows: &[&[f64]]) -> RepresentationSet {
        RepresentationSet::new("s", Mat64::from_rows(rows).unwrap()).unwrap()
    }

    fn random(n: usize, d: usize, rng: &mut Rng) -> Mat64 {
        Mat64::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_distance(&[1.0, 2.0], &[-1.0, -2.0]).unwrap(), 2.0);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_distance(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn hausdorff_examples() {
        let s = set(&[&[1.0, 0.0], &[1.0, 1.0]]);
        assert_eq!(hausdorff(&s, &s).unwrap(), 0.0);
        let a = set(&[&[1.0, 0.0]]);
        let b = set(&[&[0.0, 1.0]]);
        assert!((hausdorff(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        assert!(hausdorff(&a, &set(&[&[1.0, 0.0, 0.0]])).is_err());
    }

    proptest! {
        #[test]
        fn hausdorff_metric_properties(seed in 0u64..1000, n in 1usize..8, m in 1usize..8) {
            let mut rng = Rng::new(seed);
            let s = RepresentationSet::new("s", random(n, 3, &mut rng)).unwrap();
            let t = RepresentationSet::new("t", random(m, 3, &mut rng)).unwrap();
            let st = hausdorff(&s, &t).unwrap();
            prop_assert_eq!(st, hausdorff(&t, &s).unwrap());
            prop_assert!((0.0..=2.0).contains(&st));
            prop_assert_eq!(hausdorff(&s, &s).unwrap(), 0.0);
        }

        #[test]
        fn cca_in_unit_interval(seed in 0u64..1000, p in 1usize..4, q in 1usize..4) {
            let mut rng = Rng::new(seed);
            let x = RepresentationSet::new("x", random(20, p, &mut rng)).unwrap();
            let y = RepresentationSet::new("y", random(20, q, &mut rng)).unwrap();
            let r = cca_similarity(&x, &y).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.mean));
            prop_assert_eq!(r.correlations.len(), p.min(q));
        }
    }

    #[test]
    fn cca_self_similarity_and_invariance() {
        let mut rng = Rng::new(4);
        let x = random(60, 4, &mut rng);
        let xs = RepresentationSet::new("x", x.clone()).unwrap();
        let r = cca_similarity(&xs, &xs).unwrap();
        assert!((r.mean - 1.0).abs() < 1e-12 && !r.regularized);
        let rot = random(4, 4, &mut rng);
        let y = RepresentationSet::new("y", x.matmul(&rot)).unwrap();
        assert!((cca_similarity(&xs, &y).unwrap().mean - 1.0).abs() < 1e-6);
    }

    #[test]
    fn one_dimensional_cca_is_abs_pearson() {
        // y = 0.8 x + 0.6 z with x ⟂ z, both centered with equal norm
        let x = [1.0, -1.0, 1.0, -1.0];
        let z = [1.0, 1.0, -1.0, -1.0];
        let y: Vec<f64> = x.iter().zip(&z).map(|(a, b)| 0.8 * a + 0.6 * b).collect();
        let xs = RepresentationSet::new("x", Mat64::from_vec(4, 1, x.to_vec()).unwrap()).unwrap();
        let ys = RepresentationSet::new("y", Mat64::from_vec(4, 1, y.clone()).unwrap()).unwrap();
        assert!((cca_similarity(&xs, &ys).unwrap().mean - 0.8).abs() < 1e-12);
        let neg = RepresentationSet::new("n", Mat64::from_vec(4, 1, y.iter().map(|v| -v).collect()).unwrap()).unwrap();
        assert!((cca_similarity(&xs, &neg).unwrap().mean - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cca_errors_and_ridge_flag() {
        let x = set(&[&[1.0], &[2.0]]);
        assert!(cca_similarity(&x, &x).is_err());
        let c = set(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        assert!(matches!(cca_similarity(&c, &c), Err(Error::RankZero)));
        let mut rng = Rng::new(0);
        let wide = RepresentationSet::new("w", random(5, 8, &mut rng)).unwrap();
        let r = cca_similarity(&wide, &wide).unwrap();
        assert!(r.regularized);
        assert!(r.mean > 0.99);
    }

    #[test]
    fn pca_collinear_and_isotropic() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let p = pca2(&RepresentationSet::new("c", Mat64::from_rows(&rows).unwrap()).unwrap()).unwrap();
        assert!((p.explained[0] - 1.0).abs() < 1e-9);
        let mut rng = Rng::new(11);
        let iso = RepresentationSet::new("i", random(10000, 2, &mut rng)).unwrap();
        let p = pca2(&iso).unwrap();
        assert!((p.explained[0] - 0.5).abs() < 0.02 && (p.explained[1] - 0.5).abs() < 0.02);
    }

    #[test]
    fn pca_sign_convention_and_row_order() {
        let mut rng = Rng::new(2);
        let x = random(30, 4, &mut rng);
        let p = pca2(&RepresentationSet::new("x", x.clone()).unwrap()).unwrap();
        for k in 0..2 {
            let row = p.components.row(k);
            let lead = row.iter().cloned().fold(0.0, |m: f64, a| if a.abs() > m.abs() { a } else { m });
            assert!(lead > 0.0);
        }
        let rev: Vec<usize> = (0..30).rev().collect();
        let q = pca2(&RepresentationSet::new("r", x.select_rows(&rev)).unwrap()).unwrap();
        for i in 0..30 {
            for k in 0..2 {
                assert!((p.coords.get(i, k) - q.coords.get(29 - i, k)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pca_reproduces_rank_two_inner_products() {
        let mut rng = Rng::new(6);
        let a = random(25, 2, &mut rng);
        let b = random(2, 5, &mut rng);
        let x = a.matmul(&b);
        let p = pca2(&RepresentationSet::new("x", x.clone()).unwrap()).unwrap();
        let c = x.centered();
        let g1 = c.matmul_nt(&c);
        let g2 = p.coords.matmul_nt(&p.coords);
        for (u, v) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_profile_identical_and_perturbed() {
        let cfg = EncoderConfig { input_dim: 4, hidden_dim: 4, num_layers: 3, ..Default::default() };
        let m = Model::new(cfg.clone()).unwrap();
        let mut rng = Rng::new(1);
        let probe = random(80, 4, &mut rng);
        let prof = layer_cca_profile(&m, &m, &probe).unwrap();
        assert_eq!(prof.len(), 3);
        assert!(prof.iter().all(|r| (r.mean - 1.0).abs() < 1e-9));

        let mut after = m.clone();
        let other = Model::new(EncoderConfig { seed: 99, ..cfg.clone() }).unwrap();
        *after.layer_mut(2) = other.layers()[2].clone();
        let prof = layer_cca_profile(&m, &after, &probe).unwrap();
        assert!((prof[0].mean - 1.0).abs() < 1e-9 && (prof[1].mean - 1.0).abs() < 1e-9);
        assert!(prof[2].mean < 1.0 - 1e-6);

        let wide = Model::new(EncoderConfig { hidden_dim: 5, ..cfg }).unwrap();
        assert!(layer_cca_profile(&m, &wide, &probe).is_err());
    }

    #[test]
    fn csv_writers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cca.csv");
        write_cca_csv(&p, &[CcaResult { mean: 1.0, correlations: vec![1.0], regularized: false }]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "layer,similarity\n0,1\n");
        let p = dir.path().join("h.csv");
        write_hausdorff_csv(&p, &[("en-fa".into(), 0.25)]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "pair,distance\nen-fa,0.25\n");
        let p = dir.path().join("pca.csv");
        write_pca_csv(&p, &[PcaPoint { id: "a".into(), language: "en".into(), x: 1.5, y: -2.0 }]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "id,language,x,y\na,en,1.5,-2\n");
    }
}
