//! Synthetic task families with known generative structure.
//!
//! Every language shares the same label-conditional geometry in a latent
//! space: class centers form a regular simplex with pairwise distance
//! `separation`, and each class is a balanced mixture of
//! `clusters_per_label` unit-variance Gaussian sub-clusters whose centers form
//! a simplex of side `subcluster_separation` around the class center. All
//! distances are in units of the noise standard deviation (σ = 1).
//!
//! Language `l` observes `x = R_l z + o_l`, where `R_l` rotates each plane of
//! a random orthonormal basis by an angle drawn from
//! `shift_angle · U(0.5, 1.5)` and `o_l` is a random direction scaled to
//! norm `shift_offset`. With both shifts zero, all languages are identically
//! distributed.
//!
//! Example `j` of a dataset belongs to label `j % num_labels` and to
//! sub-cluster `(j / num_labels) % clusters_per_label` of that label.

use serde::{Deserialize, Serialize};

use super::{Example, TaskDataset};
use crate::error::{Error, Result};
use crate::numerics::{dot, Mat64, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub task: String,
    pub num_languages: usize,
    /// Language tags; defaults to `l0, l1, ...` when empty.
    pub language_names: Vec<String>,
    pub num_labels: usize,
    /// Label names; defaults to `c0, c1, ...` when empty.
    pub label_names: Vec<String>,
    pub feature_dim: usize,
    pub clusters_per_label: usize,
    pub separation: f64,
    pub subcluster_separation: f64,
    pub shift_offset: f64,
    pub shift_angle: f64,
    pub samples_per_label: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            task: "nli".into(),
            num_languages: 5,
            language_names: Vec::new(),
            num_labels: 3,
            label_names: Vec::new(),
            feature_dim: 16,
            clusters_per_label: 2,
            separation: 8.0,
            subcluster_separation: 4.0,
            shift_offset: 2.0,
            shift_angle: 0.5,
            samples_per_label: 200,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("synthetic spec: {m}")));
        if self.num_languages == 0 || self.num_labels == 0 || self.feature_dim == 0 {
            return bad("language, label and feature counts must be at least 1".into());
        }
        if self.clusters_per_label == 0 || self.samples_per_label == 0 {
            return bad("cluster and sample counts must be at least 1".into());
        }
        if self.num_labels > self.feature_dim || self.clusters_per_label > self.feature_dim {
            return bad(format!(
                "feature_dim {} must be at least num_labels and clusters_per_label",
                self.feature_dim
            ));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return bad(format!("separation must be positive, got {}", self.separation));
        }
        for (name, v) in [
            ("subcluster_separation", self.subcluster_separation),
            ("shift_offset", self.shift_offset),
            ("shift_angle", self.shift_angle),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !self.language_names.is_empty() && self.language_names.len() != self.num_languages {
            return bad("language_names length must equal num_languages".into());
        }
        if !self.label_names.is_empty() && self.label_names.len() != self.num_labels {
            return bad("label_names length must equal num_labels".into());
        }
        Ok(())
    }

    pub fn languages(&self) -> Vec<String> {
        if self.language_names.is_empty() {
            (0..self.num_languages).map(|l| format!("l{l}")).collect()
        } else {
            self.language_names.clone()
        }
    }

    pub fn labels(&self) -> Vec<String> {
        if self.label_names.is_empty() {
            (0..self.num_labels).map(|c| format!("c{c}")).collect()
        } else {
            self.label_names.clone()
        }
    }

    /// Planted sub-cluster of the example at `position` in a generated dataset.
    pub fn planted_subcluster(&self, position: usize) -> usize {
        (position / self.num_labels) % self.clusters_per_label
    }
}

/// `dim × cols` matrix with orthonormal columns (Gram–Schmidt on Gaussians).
fn orthonormal_columns(dim: usize, cols: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for b in &basis {
            let p = dot(&v, b);
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= p * bi;
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Regular simplex with `k` vertices and pairwise distance `side`, centered at
/// the origin and embedded along `basis` (needs `k` basis vectors).
fn simplex(k: usize, side: f64, basis: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = basis[0].len();
    let scale = side / std::f64::consts::SQRT_2;
    (0..k)
        .map(|i| {
            let mut p = vec![0.0; dim];
            for (j, b) in basis.iter().take(k).enumerate() {
                let coord = scale * (if i == j { 1.0 } else { 0.0 } - 1.0 / k as f64);
                for (pi, bi) in p.iter_mut().zip(b) {
                    *pi += coord * bi;
                }
            }
            p
        })
        .collect()
}

struct LanguageMap {
    rotation: Mat64,
    offset: Vec<f64>,
}

impl LanguageMap {
    fn new(dim: usize, angle: f64, offset: f64, rng: &mut Rng) -> LanguageMap {
        let q = orthonormal_columns(dim, dim, rng);
        let mut rotation = Mat64::zeros(dim, dim);
        for i in 0..dim {
            rotation.set(i, i, 1.0);
        }
        if angle > 0.0 {
            // R = I + Σ_planes [(cos φ − 1)(uuᵀ + vvᵀ) + sin φ (vuᵀ − uvᵀ)]
            for pair in q.chunks_exact(2) {
                let (u, v) = (&pair[0], &pair[1]);
                let phi = angle * rng.uniform_range(0.5, 1.5);
                let (s, c) = phi.sin_cos();
                for i in 0..dim {
                    for j in 0..dim {
                        let delta = (c - 1.0) * (u[i] * u[j] + v[i] * v[j]) + s * (v[i] * u[j] - u[i] * v[j]);
                        rotation.set(i, j, rotation.get(i, j) + delta);
                    }
                }
            }
        }
        let dir: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = dot(&dir, &dir).sqrt().max(1e-12);
        let offset = dir.iter().map(|d| offset * d / n).collect();
        LanguageMap { rotation, offset }
    }

    fn apply(&self, z: &[f64]) -> Vec<f64> {
        (0..z.len())
            .map(|i| dot(self.rotation.row(i), z) + self.offset[i])
            .collect()
    }
}

struct Geometry {
    centers: Vec<Vec<f64>>,
    /// `[label][cluster]` offsets from the class center.
    sub_offsets: Vec<Vec<Vec<f64>>>,
    languages: Vec<LanguageMap>,
}

fn geometry(spec: &SyntheticSpec) -> Result<Geometry> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut g = root.fork(0);
    let d = spec.feature_dim;
    let basis = orthonormal_columns(d, spec.num_labels, &mut g);
    let centers = simplex(spec.num_labels, spec.separation, &basis);
    let sub_offsets = (0..spec.num_labels)
        .map(|_| {
            if spec.clusters_per_label == 1 {
                return vec![vec![0.0; d]];
            }
            let b = orthonormal_columns(d, spec.clusters_per_label, &mut g);
            simplex(spec.clusters_per_label, spec.subcluster_separation, &b)
        })
        .collect();
    let languages = (0..spec.num_languages)
        .map(|l| {
            let mut r = root.fork(1 + l as u64);
            LanguageMap::new(d, spec.shift_angle, spec.shift_offset, &mut r)
        })
        .collect();
    Ok(Geometry {
        centers,
        sub_offsets,
        languages,
    })
}

/// One dataset per language, deterministic under `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<TaskDataset>> {
    let geo = geometry(spec)?;
    let root = Rng::new(spec.seed);
    let labels = spec.labels();
    spec.languages()
        .into_iter()
        .enumerate()
        .map(|(l, lang)| {
            let mut rng = root.fork(1_000 + l as u64);
            let map = &geo.languages[l];
            let mut examples = Vec::with_capacity(spec.samples_per_label * spec.num_labels);
            for i in 0..spec.samples_per_label {
                let sub = i % spec.clusters_per_label;
                for c in 0..spec.num_labels {
                    let z: Vec<f64> = geo.centers[c]
                        .iter()
                        .zip(&geo.sub_offsets[c][sub])
                        .map(|(m, o)| m + o + rng.normal())
                        .collect();
                    examples.push(Example {
                        id: format!("{}-{lang}-{:06}", spec.task, examples.len()),
                        features: map.apply(&z),
                        label: c,
                        language: lang.clone(),
                        task: spec.task.clone(),
                    });
                }
            }
            TaskDataset::new(format!("{}-{lang}", spec.task), spec.task.clone(), lang, labels.clone(), examples)
        })
        .collect()
}

/// Per language, a dataset holding the true class centers (one example per label).
pub fn synthetic_centers(spec: &SyntheticSpec) -> Result<Vec<TaskDataset>> {
    let geo = geometry(spec)?;
    let labels = spec.labels();
    spec.languages()
        .into_iter()
        .enumerate()
        .map(|(l, lang)| {
            let examples = geo
                .centers
                .iter()
                .enumerate()
                .map(|(c, center)| Example {
                    id: format!("{}-{lang}-center-{c}", spec.task),
                    features: geo.languages[l].apply(center),
                    label: c,
                    language: lang.clone(),
                    task: spec.task.clone(),
                })
                .collect();
            TaskDataset::new(
                format!("{}-{lang}-centers", spec.task),
                spec.task.clone(),
                lang,
                labels.clone(),
                examples,
            )
        })
        .collect()
}
