//! Task augmentation by decomposing a dataset into per-label clusters and
//! recombining one cluster per label into new tasks.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::TaskDataset;
use crate::episodes::{EpisodeSpec, TaskQueue};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{squared_distance, Mat64, Rng};

/// Upper bound on `K^N` accepted by [`enumerate_tasks`].
pub const MAX_TASKS: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Embed {
    /// Final encoder layer, eval mode.
    Encoder,
    /// Raw feature vectors.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrecaConfig {
    /// Clusters per label group (`K`).
    pub clusters: usize,
    pub embed: Embed,
    pub restarts: usize,
    pub max_iterations: usize,
    /// Lloyd stops once the relative inertia decrease falls below this.
    pub tolerance: f64,
    pub seed: u64,
    /// Queue mass given to DReCa tasks; originals keep the rest.
    pub mixing: f64,
}

impl Default for DrecaConfig {
    fn default() -> Self {
        DrecaConfig {
            clusters: 2,
            embed: Embed::Encoder,
            restarts: 5,
            max_iterations: 100,
            tolerance: 1e-10,
            seed: 0,
            mixing: 0.5,
        }
    }
}

impl DrecaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.restarts == 0 || self.max_iterations == 0 {
            return Err(Error::InvalidConfig("dreca clusters, restarts and max_iterations must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mixing) {
            return Err(Error::InvalidConfig(format!("dreca mixing {} outside [0, 1]", self.mixing)));
        }
        Ok(())
    }
}

/// Examples of one label with their embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelGroup {
    pub label: usize,
    /// Dataset positions, ascending.
    pub indices: Vec<usize>,
    pub points: Mat64,
}

/// Groups the dataset by label; `embedder` of `None` keeps raw features.
pub fn label_groups(dataset: &TaskDataset, embedder: Option<&Model>) -> Result<Vec<LabelGroup>> {
    if dataset.examples.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    let embedded = match embedder {
        Some(model) => model.forward_eval(&dataset.features()?, None)?.encoding().clone(),
        None => dataset.features()?,
    };
    Ok(dataset
        .indices_by_label()
        .into_iter()
        .enumerate()
        .filter(|(_, idx)| !idx.is_empty())
        .map(|(label, indices)| LabelGroup { label, points: embedded.select_rows(&indices), indices })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Mat64,
    pub inertia: f64,
    /// Lloyd iterations of the winning restart.
    pub iterations: usize,
}

fn nearest(point: &[f64], centroids: &Mat64) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter_rows().enumerate() {
        let d = squared_distance(point, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seed(points: &Mat64, k: usize, rng: &mut Rng) -> Mat64 {
    let n = points.rows();
    let mut centroids = Mat64::zeros(k, points.cols());
    centroids.row_mut(0).copy_from_slice(points.row(rng.below(n)));
    let mut d2: Vec<f64> = points.iter_rows().map(|p| squared_distance(p, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if u < acc && *d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, p) in points.iter_rows().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, centroids.row(c)));
        }
    }
    centroids
}

fn lloyd(points: &Mat64, k: usize, config: &DrecaConfig, rng: &mut Rng) -> KMeans {
    let n = points.rows();
    let mut centroids = plus_plus_seed(points, k, rng);
    let mut assignments = vec![0usize; n];
    let mut previous = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..config.max_iterations {
        iterations += 1;
        let mut dist = vec![0.0; n];
        for (i, p) in points.iter_rows().enumerate() {
            (assignments[i], dist[i]) = nearest(p, &centroids);
        }
        // empty cluster: hand it the point farthest from its centroid,
        // taken from a cluster that keeps at least one member
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[assignments[i]] > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .expect("n >= k leaves a donor cluster");
            counts[assignments[far]] -= 1;
            assignments[far] = c;
            counts[c] = 1;
            dist[far] = 0.0;
        }
        centroids = Mat64::zeros(k, points.cols());
        for (p, &a) in points.iter_rows().zip(&assignments) {
            for (m, v) in centroids.row_mut(a).iter_mut().zip(p) {
                *m += v;
            }
        }
        for (c, &cnt) in counts.iter().enumerate() {
            for m in centroids.row_mut(c) {
                *m /= cnt as f64;
            }
        }
        let inertia: f64 = points
            .iter_rows()
            .zip(&assignments)
            .map(|(p, &a)| squared_distance(p, centroids.row(a)))
            .sum();
        assert!(
            inertia <= previous + 1e-9 * previous.abs().max(1.0),
            "k-means inertia increased from {previous} to {inertia}"
        );
        let converged = previous - inertia <= config.tolerance * inertia.max(f64::MIN_POSITIVE);
        previous = inertia;
        if converged {
            break;
        }
    }
    KMeans { assignments, centroids, inertia: previous, iterations }
}

/// Best-of-`restarts` Lloyd with k-means++ seeding. Restart `r` draws from
/// `rng.fork(r)`, so restarts are independent of each other; ties in
/// inertia go to the lower restart index.
pub fn kmeans(points: &Mat64, k: usize, config: &DrecaConfig, rng: &Rng) -> Result<KMeans> {
    if k == 0 || points.rows() < k {
        return Err(Error::TooFewPoints { points: points.rows(), k });
    }
    if !points.is_finite() {
        return Err(Error::NonFinite("k-means points"));
    }
    let mut best: Option<KMeans> = None;
    for r in 0..config.restarts.max(1) {
        let run = lloyd(points, k, config, &mut rng.fork(r as u64));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrecaTask {
    pub parent: String,
    /// Chosen cluster per label, in label order.
    pub clusters: Vec<usize>,
    /// Member example ids in dataset order.
    pub members: Vec<String>,
}

impl DrecaTask {
    pub fn name(&self) -> String {
        let tuple: Vec<String> = self.clusters.iter().map(usize::to_string).collect();
        format!("{}/dreca-{}", self.parent, tuple.join("-"))
    }
}

/// All `K^N` one-cluster-per-label combinations in lexicographic order of
/// the cluster tuples (first label most significant). `cluster_groups[l][j]`
/// lists the dataset positions in cluster `j` of label `l`.
pub fn enumerate_tasks(dataset: &TaskDataset, cluster_groups: &[Vec<Vec<usize>>]) -> Result<Vec<DrecaTask>> {
    let k = cluster_groups.first().map(Vec::len).ok_or(Error::EmptyInput("cluster groups"))?;
    if cluster_groups.iter().any(|g| g.len() != k) {
        return Err(Error::Data("every label needs the same number of clusters".into()));
    }
    if cluster_groups.iter().flatten().any(Vec::is_empty) {
        return Err(Error::Data("empty cluster".into()));
    }
    let n = cluster_groups.len();
    let total = (0..n).try_fold(1usize, |acc, _| acc.checked_mul(k)).filter(|t| *t <= MAX_TASKS);
    let total = total.ok_or_else(|| Error::TooLarge(format!("{k}^{n} DReCa tasks")))?;
    let mut tasks = Vec::with_capacity(total);
    let mut tuple = vec![0usize; n];
    for _ in 0..total {
        let mut idx: Vec<usize> = tuple
            .iter()
            .enumerate()
            .flat_map(|(l, &c)| cluster_groups[l][c].iter().copied())
            .collect();
        idx.sort_unstable();
        tasks.push(DrecaTask {
            parent: dataset.name.clone(),
            clusters: tuple.clone(),
            members: idx.iter().map(|&i| dataset.examples[i].id.clone()).collect(),
        });
        // odometer increment, last label fastest
        for pos in (0..n).rev() {
            tuple[pos] += 1;
            if tuple[pos] < k {
                break;
            }
            tuple[pos] = 0;
        }
    }
    Ok(tasks)
}

/// Clusters every label group into `K` clusters and enumerates the tasks.
/// Label `l` clusters with `Rng::new(seed).fork(l)`.
pub fn decompose(dataset: &TaskDataset, config: &DrecaConfig, encoder: Option<&Model>) -> Result<Vec<DrecaTask>> {
    config.validate()?;
    let embedder = match config.embed {
        Embed::Identity => None,
        Embed::Encoder => Some(encoder.ok_or_else(|| {
            Error::InvalidConfig("encoder embedding requested without a model".into())
        })?),
    };
    let groups = label_groups(dataset, embedder)?;
    if groups.len() != dataset.num_labels() {
        return Err(Error::Data(format!("dataset `{}` is missing a label", dataset.name)));
    }
    let base = Rng::new(config.seed);
    let mut cluster_groups = Vec::with_capacity(groups.len());
    for g in &groups {
        let km = kmeans(&g.points, config.clusters, config, &base.fork(g.label as u64))?;
        let mut clusters = vec![Vec::new(); config.clusters];
        for (pos, &a) in km.assignments.iter().enumerate() {
            clusters[a].push(g.indices[pos]);
        }
        cluster_groups.push(clusters);
    }
    enumerate_tasks(dataset, &cluster_groups)
}

/// The task as a dataset of its members.
pub fn materialize(dataset: &TaskDataset, task: &DrecaTask) -> Result<TaskDataset> {
    let pos: HashMap<&str, usize> = dataset.examples.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
    let idx = task
        .members
        .iter()
        .map(|id| pos.get(id.as_str()).copied().ok_or_else(|| Error::Data(format!("unknown member `{id}`"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(dataset.subset(task.name(), &idx))
}

/// Adds DReCa tasks to a queue: originals keep mass `1 − mixing`, the
/// episode-capable tasks share `mixing`, and each side is weighted by the
/// queue temperature over its own sizes. `mixing = 0` returns the queue as is.
pub fn augment_queue(queue: &TaskQueue, tasks: &[TaskDataset], mixing: f64, spec: &EpisodeSpec) -> Result<TaskQueue> {
    if !(0.0..=1.0).contains(&mixing) {
        return Err(Error::InvalidConfig(format!("dreca mixing {mixing} outside [0, 1]")));
    }
    if mixing == 0.0 {
        return Ok(queue.clone());
    }
    let need = spec.shot + spec.query();
    let usable: Vec<TaskDataset> = tasks
        .iter()
        .filter(|t| t.label_counts().iter().all(|&c| c >= need))
        .cloned()
        .collect();
    if usable.is_empty() {
        return Err(Error::Data(format!("no DReCa task has {need} examples per label")));
    }
    TaskQueue::from_groups(
        vec![(queue.datasets().to_vec(), 1.0 - mixing), (usable, mixing)],
        queue.temperature(),
    )
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tasks: Vec<DrecaTask>,
}

pub fn write_manifest(path: &Path, tasks: &[DrecaTask]) -> Result<()> {
    let json = serde_json::to_string_pretty(&Manifest { tasks: tasks.to_vec() }).expect("manifest serializes");
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<DrecaTask>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    Ok(m.tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};
    use crate::episodes::Temperature;

    fn identity() -> DrecaConfig {
        DrecaConfig { embed: Embed::Identity, ..Default::default() }
    }

    fn column(v: &[f64]) -> Mat64 {
        Mat64::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    fn small() -> TaskDataset {
        let spec = SyntheticSpec { num_languages: 1, samples_per_label: 10, ..Default::default() };
        generate_synthetic(&spec).unwrap().remove(0)
    }

    #[test]
    fn one_dimensional_split() {
        let km = kmeans(&column(&[0.0, 0.1, 10.0, 10.1]), 2, &identity(), &Rng::new(0)).unwrap();
        assert_eq!(km.assignments[0], km.assignments[1]);
        assert_eq!(km.assignments[2], km.assignments[3]);
        assert_ne!(km.assignments[0], km.assignments[2]);
        assert!((km.inertia - 0.01).abs() < 1e-12);
    }

    #[test]
    fn single_cluster_is_mean() {
        let pts = column(&[1.0, 2.0, 6.0]);
        let km = kmeans(&pts, 1, &identity(), &Rng::new(0)).unwrap();
        assert_eq!(km.centroids.row(0), &[3.0]);
        assert!((km.inertia - 14.0).abs() < 1e-12);
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let pts = Mat64::from_rows(&[[0.0, 1.0], [3.0, 1.0], [5.0, -2.0], [0.5, 0.5]]).unwrap();
        assert_eq!(kmeans(&pts, 4, &identity(), &Rng::new(1)).unwrap().inertia, 0.0);
        let dup = column(&[1.0, 1.0, 1.0]);
        let km = kmeans(&dup, 3, &identity(), &Rng::new(1)).unwrap();
        assert_eq!(km.inertia, 0.0);
        let mut a = km.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2]);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            kmeans(&column(&[1.0]), 2, &identity(), &Rng::new(0)),
            Err(Error::TooFewPoints { points: 1, k: 2 })
        ));
    }

    #[test]
    fn kmeans_is_deterministic() {
        let mut rng = Rng::new(3);
        let pts = Mat64::from_vec(40, 3, (0..120).map(|_| rng.normal()).collect()).unwrap();
        let a = kmeans(&pts, 3, &identity(), &Rng::new(9)).unwrap();
        let b = kmeans(&pts, 3, &identity(), &Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn label_groups_partition() {
        let ds = small();
        let g = label_groups(&ds, None).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.iter().map(|g| g.indices.len()).sum::<usize>(), ds.size());
        for grp in &g {
            for (row, &i) in grp.points.iter_rows().zip(&grp.indices) {
                assert_eq!(row, ds.examples[i].features.as_slice());
            }
        }
    }

    #[test]
    fn enumeration_counts_and_order() {
        let ds = small();
        let groups: Vec<Vec<Vec<usize>>> = ds
            .indices_by_label()
            .into_iter()
            .map(|idx| vec![idx[..5].to_vec(), idx[5..].to_vec()])
            .collect();
        let tasks = enumerate_tasks(&ds, &groups).unwrap();
        assert_eq!(tasks.len(), 8);
        assert_eq!(tasks[0].clusters, vec![0, 0, 0]);
        assert_eq!(tasks[1].clusters, vec![0, 0, 1]);
        assert_eq!(tasks[7].clusters, vec![1, 1, 1]);
        for w in tasks.windows(2) {
            assert!(w[0].clusters < w[1].clusters);
        }
        // each example sits in K^(N−1) = 4 tasks
        for e in &ds.examples {
            assert_eq!(tasks.iter().filter(|t| t.members.contains(&e.id)).count(), 4);
        }
        let one: Vec<Vec<Vec<usize>>> = ds.indices_by_label().into_iter().map(|i| vec![i]).collect();
        let t = enumerate_tasks(&ds, &one).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(materialize(&ds, &t[0]).unwrap().examples, ds.examples);
        let ragged = vec![groups[0].clone(), vec![groups[1].concat()], groups[2].clone()];
        assert!(enumerate_tasks(&ds, &ragged).is_err());
    }

    #[test]
    fn decompose_recovers_planted_subclusters() {
        let spec = SyntheticSpec {
            num_languages: 1,
            samples_per_label: 30,
            clusters_per_label: 2,
            subcluster_separation: 6.0,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap().remove(0);
        let tasks = decompose(&ds, &identity(), None).unwrap();
        assert_eq!(tasks.len(), 8);
        // every task's members for one label come from a single planted sub-cluster
        let planted: HashMap<&str, usize> = ds
            .examples
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.as_str(), spec.planted_subcluster(i)))
            .collect();
        let label_of: HashMap<&str, usize> = ds.examples.iter().map(|e| (e.id.as_str(), e.label)).collect();
        for t in &tasks {
            for l in 0..3 {
                let subs: Vec<usize> =
                    t.members.iter().filter(|id| label_of[id.as_str()] == l).map(|id| planted[id.as_str()]).collect();
                assert!(subs.windows(2).all(|w| w[0] == w[1]));
            }
        }
        assert!(decompose(&ds, &DrecaConfig::default(), None).is_err());
    }

    #[test]
    fn augment_queue_weights() {
        let ds = small();
        let queue = TaskQueue::new(vec![ds.clone()], Temperature::Finite(1.0)).unwrap();
        let tasks: Vec<TaskDataset> = decompose(&ds, &identity(), None)
            .unwrap()
            .iter()
            .map(|t| materialize(&ds, t).unwrap())
            .collect();
        let spec = EpisodeSpec { way: 3, shot: 1, query_per_class: Some(1), ..Default::default() };
        assert_eq!(augment_queue(&queue, &tasks, 0.0, &spec).unwrap(), queue);
        let q = augment_queue(&queue, &tasks, 0.5, &spec).unwrap();
        assert!((q.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(q.probabilities()[0], 0.5);

        let equal: Vec<TaskDataset> = (0..8).map(|i| { let mut d = ds.clone(); d.name = format!("t{i}"); d }).collect();
        let q = augment_queue(&queue, &equal, 1.0, &spec).unwrap();
        assert_eq!(q.len(), 8);
        assert!(q.probabilities().iter().all(|p| (p - 0.125).abs() < 1e-15));

        let greedy = EpisodeSpec { way: 3, shot: 50, ..Default::default() };
        assert!(augment_queue(&queue, &tasks, 0.5, &greedy).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let ds = small();
        let tasks = decompose(&ds, &identity(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        write_manifest(&p, &tasks).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), tasks);
    }
}
