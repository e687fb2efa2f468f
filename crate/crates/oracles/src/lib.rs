//! Brute-force reference implementations for checking the `xmeta` engine.
//!
//! Nothing here depends on the engine: inputs are plain slices so that each
//! oracle stays an independent route to the value it checks.

// Textbook index loops read closer to the formulas they transcribe.
#![allow(clippy::needless_range_loop)]

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("instance too large: {0}")]
    TooLarge(String),
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error("covariance is not positive definite")]
    RankDeficient,
}

pub type Result<T> = std::result::Result<T, OracleError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tolerance {
    Absolute,
    Relative,
}

/// One oracle-versus-system comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub case: String,
    pub oracle: f64,
    pub system: f64,
    pub tolerance: f64,
    pub kind: Tolerance,
    pub pass: bool,
}

impl OracleReport {
    pub fn new(case: impl Into<String>, oracle: f64, system: f64, tolerance: f64, kind: Tolerance) -> Self {
        let err = (oracle - system).abs();
        let bound = match kind {
            Tolerance::Absolute => tolerance,
            Tolerance::Relative => tolerance * oracle.abs().max(system.abs()),
        };
        OracleReport {
            case: case.into(),
            oracle,
            system,
            tolerance,
            kind,
            pass: err <= bound,
        }
    }
}

impl std::fmt::Display for OracleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {}: oracle={:.12e} system={:.12e} tol={:e} ({:?})",
            if self.pass { "PASS" } else { "FAIL" },
            self.case,
            self.oracle,
            self.system,
            self.tolerance,
            self.kind
        )
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Stirling number of the second kind, saturating.
pub fn stirling2(n: usize, k: usize) -> u128 {
    let mut row = vec![0u128; k + 1];
    row[0] = 1;
    for i in 1..=n {
        for j in (1..=k.min(i)).rev() {
            row[j] = row[j - 1].saturating_add((j as u128).saturating_mul(row[j]));
        }
        row[0] = 0;
    }
    row[k]
}

pub const MAX_PARTITIONS: u128 = 2_000_000;

/// Globally optimal k-means partition by exhaustive enumeration of all set
/// partitions into exactly `k` blocks. Returns `(inertia, labels)`.
pub fn brute_kmeans(points: &[Vec<f64>], k: usize) -> Result<(f64, Vec<usize>)> {
    let n = points.len();
    if k == 0 || n < k {
        return Err(OracleError::Invalid(format!("{n} points, k = {k}")));
    }
    let count = stirling2(n, k);
    if count > MAX_PARTITIONS {
        return Err(OracleError::TooLarge(format!("S({n},{k}) = {count} partitions")));
    }
    let dim = points[0].len();
    let mut labels = vec![0usize; n];
    let mut best: Option<(f64, Vec<usize>)> = None;

    // restricted growth strings: labels[i] <= 1 + max(labels[..i])
    fn recurse(
        i: usize,
        used: usize,
        k: usize,
        labels: &mut Vec<usize>,
        points: &[Vec<f64>],
        dim: usize,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        let n = labels.len();
        if n - i < k - used {
            return;
        }
        if i == n {
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (p, &l) in points.iter().zip(labels.iter()) {
                counts[l] += 1;
                for (s, v) in sums[l].iter_mut().zip(p) {
                    *s += v;
                }
            }
            let means: Vec<Vec<f64>> = sums
                .iter()
                .zip(&counts)
                .map(|(s, &c)| s.iter().map(|v| v / c as f64).collect())
                .collect();
            let inertia: f64 = points.iter().zip(labels.iter()).map(|(p, &l)| sq_dist(p, &means[l])).sum();
            if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
                *best = Some((inertia, labels.clone()));
            }
            return;
        }
        let limit = (used + 1).min(k);
        for l in 0..limit {
            labels[i] = l;
            recurse(i + 1, used.max(l + 1), k, labels, points, dim, best);
        }
    }
    recurse(0, 0, k, &mut labels, points, dim, &mut best);
    Ok(best.expect("at least one partition"))
}

fn covariance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len() as f64;
    let p = a[0].len();
    let q = b[0].len();
    let ma: Vec<f64> = (0..p).map(|j| a.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mb: Vec<f64> = (0..q).map(|j| b.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut c = vec![vec![0.0; q]; p];
    for (ra, rb) in a.iter().zip(b) {
        for i in 0..p {
            for j in 0..q {
                c[i][j] += (ra[i] - ma[i]) * (rb[j] - mb[j]);
            }
        }
    }
    for row in &mut c {
        for v in row {
            *v /= n - 1.0;
        }
    }
    c
}

fn cholesky(m: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = m.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = m[i][i] - s;
                if d <= 1e-14 * m[i][i].abs().max(1e-300) {
                    return Err(OracleError::RankDeficient);
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (m[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Inverse of a lower-triangular matrix.
fn lower_inverse(l: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = l.len();
    let mut inv = vec![vec![0.0; n]; n];
    for col in 0..n {
        for i in col..n {
            let rhs = if i == col { 1.0 } else { 0.0 };
            let s: f64 = (col..i).map(|k| l[i][k] * inv[k][col]).sum();
            inv[i][col] = (rhs - s) / l[i][i];
        }
    }
    inv
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(m: &[Vec<f64>]) -> Vec<f64> {
    let n = m.len();
    let mut a = m.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Canonical correlations (descending) of two row-aligned samples, from the
/// generalized symmetric eigenproblem
/// `[[0, Σxy], [Σyx, 0]] v = ρ [[Σxx, 0], [0, Σyy]] v`
/// reduced to standard form with a Cholesky factor and solved by Jacobi.
pub fn brute_cca(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<Vec<f64>> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(OracleError::Invalid("need ≥ 3 aligned rows".into()));
    }
    let p = x[0].len();
    let q = y[0].len();
    if p == 0 || q == 0 || p > 4 || q > 4 {
        return Err(OracleError::TooLarge(format!("dims {p}×{q}, oracle handles ≤ 4")));
    }
    let cxx = covariance(x, x);
    let cyy = covariance(y, y);
    let cxy = covariance(x, y);
    let n = p + q;
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![vec![0.0; n]; n];
    for i in 0..p {
        for j in 0..p {
            b[i][j] = cxx[i][j];
        }
        for j in 0..q {
            a[i][p + j] = cxy[i][j];
            a[p + j][i] = cxy[i][j];
        }
    }
    for i in 0..q {
        for j in 0..q {
            b[p + i][p + j] = cyy[i][j];
        }
    }
    let l = cholesky(&b)?;
    let li = lower_inverse(&l);
    // C = L⁻¹ A L⁻ᵀ
    let mut tmp = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            tmp[i][j] = (0..n).map(|k| li[i][k] * a[k][j]).sum();
        }
    }
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            c[i][j] = (0..n).map(|k| tmp[i][k] * li[j][k]).sum();
        }
    }
    // symmetrise rounding noise
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (c[i][j] + c[j][i]);
            c[i][j] = m;
            c[j][i] = m;
        }
    }
    let mut ev = jacobi_eigenvalues(&c);
    ev.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    Ok(ev.into_iter().take(p.min(q)).map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Classical nearest-centroid rule: centroid per training label, each test
/// point assigned the label of the closest centroid (squared Euclidean;
/// ties to the smaller label).
pub fn nearest_centroid(train: &[(Vec<f64>, usize)], test: &[Vec<f64>]) -> Vec<usize> {
    let mut labels: Vec<usize> = train.iter().map(|(_, l)| *l).collect();
    labels.sort_unstable();
    labels.dedup();
    let centroids: Vec<(usize, Vec<f64>)> = labels
        .iter()
        .map(|&l| {
            let members: Vec<&Vec<f64>> = train.iter().filter(|(_, y)| *y == l).map(|(x, _)| x).collect();
            let dim = members[0].len();
            let mut c = vec![0.0; dim];
            for m in &members {
                for (ci, v) in c.iter_mut().zip(m.iter()) {
                    *ci += v;
                }
            }
            for v in &mut c {
                *v /= members.len() as f64;
            }
            (l, c)
        })
        .collect();
    test.iter()
        .map(|x| {
            let mut best = (f64::INFINITY, 0);
            for (l, c) in &centroids {
                let d = sq_dist(x, c);
                if d < best.0 {
                    best = (d, *l);
                }
            }
            best.1
        })
        .collect()
}

/// AdamW hyperparameters for [`replay_adamw`].
#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Applies the textbook AdamW recursion for each gradient in `grads` in turn,
/// starting from zero moments.
pub fn replay_adamw(params: &[f64], grads: &[Vec<f64>], h: AdamHyper) -> Vec<f64> {
    let mut theta = params.to_vec();
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    for (step, g) in grads.iter().enumerate() {
        let t = (step + 1) as i32;
        for i in 0..theta.len() {
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - h.beta1.powi(t));
            let vh = v[i] / (1.0 - h.beta2.powi(t));
            theta[i] = theta[i] * (1.0 - h.lr * h.weight_decay) - h.lr * mh / (vh.sqrt() + h.eps);
        }
    }
    theta
}

/// Training accuracy of two-class logistic regression fitted by plain
/// gradient descent. Labels must be 0 or 1.
pub fn logistic_regression_accuracy(train: &[(Vec<f64>, usize)], steps: usize, lr: f64) -> f64 {
    let dim = train[0].0.len();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let n = train.len() as f64;
    for _ in 0..steps {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, y) in train {
            let z: f64 = w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let e = p - *y as f64;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += e * xi / n;
            }
            gb += e / n;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * g;
        }
        b -= lr * gb;
    }
    let correct = train
        .iter()
        .filter(|(x, y)| {
            let z: f64 = w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b;
            usize::from(z > 0.0) == *y
        })
        .count();
    correct as f64 / n
}
