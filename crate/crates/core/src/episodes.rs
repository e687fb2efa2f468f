//! Task queue with temperature-based sampling and N-way K-shot episode
//! construction.

use std::collections::HashSet;
use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::corpus::{Example, TaskDataset};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Vec64};

/// Sampling temperature `τ`. `Infinite` gives the uniform limit; serialized
/// as a number or the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Temperature {
    Finite(f64),
    Infinite,
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature::Finite(1.0)
    }
}

impl Serialize for Temperature {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Temperature::Finite(t) => s.serialize_f64(*t),
            Temperature::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Temperature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Temperature;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive number or \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Temperature, E> {
                Ok(Temperature::Finite(v))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Temperature, E> {
                Ok(Temperature::Finite(v as f64))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Temperature, E> {
                Ok(Temperature::Finite(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Temperature, E> {
                match v {
                    "inf" | "infinity" => Ok(Temperature::Infinite),
                    _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// `P(i) = q_i^{1/τ} / Σ_k q_k^{1/τ}`, evaluated in log space
/// (`τ = 1` uses the direct ratio `q_i / Σ q_k`).
pub fn queue_probabilities(sizes: &[usize], temperature: Temperature) -> Result<Vec64> {
    if sizes.is_empty() {
        return Err(Error::EmptyInput("task queue"));
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidConfig("task sizes must be positive".into()));
    }
    let inv_tau = match temperature {
        Temperature::Infinite => 0.0,
        Temperature::Finite(t) if t > 0.0 && t.is_finite() => 1.0 / t,
        Temperature::Finite(t) => {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {t}")))
        }
    };
    if inv_tau == 1.0 {
        let total: f64 = sizes.iter().map(|&q| q as f64).sum();
        return Ok(sizes.iter().map(|&q| q as f64 / total).collect());
    }
    let logits: Vec<f64> = sizes.iter().map(|&q| inv_tau * (q as f64).ln()).collect();
    Ok(crate::numerics::softmax_unchecked(&logits))
}

/// Datasets eligible for sampling, with their cached probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskQueue {
    datasets: Vec<TaskDataset>,
    temperature: Temperature,
    probabilities: Vec64,
}

impl TaskQueue {
    pub fn new(datasets: Vec<TaskDataset>, temperature: Temperature) -> Result<TaskQueue> {
        let sizes: Vec<usize> = datasets.iter().map(TaskDataset::size).collect();
        let probabilities = queue_probabilities(&sizes, temperature)?;
        Ok(TaskQueue {
            datasets,
            temperature,
            probabilities,
        })
    }

    /// Queue made of independently normalised groups, group `g` receiving
    /// total mass `weights[g]`; each group's internal distribution follows the
    /// temperature rule. Zero-weight groups are dropped.
    pub fn from_groups(groups: Vec<(Vec<TaskDataset>, f64)>, temperature: Temperature) -> Result<TaskQueue> {
        let total: f64 = groups.iter().map(|(_, w)| w).sum();
        if groups.iter().any(|(_, w)| w.is_nan() || *w < 0.0) || total.is_nan() || total <= 0.0 {
            return Err(Error::InvalidConfig("group weights must be non-negative with positive sum".into()));
        }
        let mut datasets = Vec::new();
        let mut probabilities = Vec::new();
        for (group, w) in groups {
            if w == 0.0 {
                continue;
            }
            let sizes: Vec<usize> = group.iter().map(TaskDataset::size).collect();
            let p = queue_probabilities(&sizes, temperature)?;
            probabilities.extend(p.into_iter().map(|v| v * w / total));
            datasets.extend(group);
        }
        Ok(TaskQueue {
            datasets,
            temperature,
            probabilities,
        })
    }

    pub fn datasets(&self) -> &[TaskDataset] {
        &self.datasets
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn temperature(&self) -> Temperature {
        self.temperature
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }

    /// Index of a dataset drawn from the queue distribution (inverse CDF).
    pub fn sample_index(&self, rng: &mut Rng) -> usize {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (i, p) in self.probabilities.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // rounding left u above the final partial sum: take the last positive entry
        self.probabilities.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }

    pub fn sample_task(&self, rng: &mut Rng) -> &TaskDataset {
        &self.datasets[self.sample_index(rng)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Support and query both from the source datasets.
    AuxOnly,
    /// Support from the source datasets; each query slot drawn from the
    /// target dataset with probability `target_fraction`, else from the sources.
    AuxSupportMixedQuery,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSpec {
    pub way: usize,
    pub shot: usize,
    /// Query examples per class; `None` means equal to `shot`.
    pub query_per_class: Option<usize>,
    pub scenario: Scenario,
    pub target_fraction: f64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            way: 3,
            shot: 4,
            query_per_class: None,
            scenario: Scenario::AuxOnly,
            target_fraction: 1.0 / 3.0,
        }
    }
}

impl EpisodeSpec {
    pub fn query(&self) -> usize {
        self.query_per_class.unwrap_or(self.shot)
    }

    pub fn validate(&self) -> Result<()> {
        if self.way == 0 || self.shot == 0 {
            return Err(Error::InvalidConfig("episode way and shot must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.target_fraction) {
            return Err(Error::InvalidConfig(format!(
                "target fraction {} outside [0, 1]",
                self.target_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Vec<Example>,
    pub query: Vec<Example>,
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    /// Dataset label ids of the sampled classes; position = episode-local class.
    pub classes: Vec<usize>,
    pub task: String,
    pub sources: Vec<String>,
}

impl Episode {
    /// Episode-local class index of a dataset label.
    pub fn local_class(&self, label: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == label)
    }

    /// Checks exact per-class counts, shared class set and id-disjointness.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Data(format!("episode invariant violated: {m}")));
        if self.classes.len() != self.way {
            return bad(format!("{} classes for way {}", self.classes.len(), self.way));
        }
        if self.support.len() != self.way * self.shot || self.query.len() != self.way * self.query_per_class {
            return bad("set sizes".into());
        }
        for (pos, &c) in self.classes.iter().enumerate() {
            if self.classes[..pos].contains(&c) {
                return bad(format!("class {c} repeated"));
            }
            let s = self.support.iter().filter(|e| e.label == c).count();
            let q = self.query.iter().filter(|e| e.label == c).count();
            if s != self.shot || q != self.query_per_class {
                return bad(format!("class {c}: {s} support, {q} query"));
            }
        }
        let ids: HashSet<&str> = self.support.iter().map(|e| e.id.as_str()).collect();
        if ids.len() != self.support.len() {
            return bad("duplicate support ids".into());
        }
        let mut qids = HashSet::new();
        for e in &self.query {
            if ids.contains(e.id.as_str()) || !qids.insert(e.id.as_str()) {
                return bad(format!("id `{}` reused", e.id));
            }
        }
        Ok(())
    }
}

fn pool_of<'a>(datasets: &[&'a TaskDataset], label: usize) -> Vec<&'a Example> {
    datasets
        .iter()
        .flat_map(|d| d.examples.iter().filter(move |e| e.label == label))
        .collect()
}

fn check_alignment(reference: &TaskDataset, other: &TaskDataset) -> Result<()> {
    if reference.label_names != other.label_names || reference.task != other.task {
        return Err(Error::LabelMismatch(format!(
            "`{}` ({}: {:?}) vs `{}` ({}: {:?})",
            reference.name, reference.task, reference.label_names, other.name, other.task, other.label_names
        )));
    }
    Ok(())
}

/// Builds one N-way K-shot episode from `sources` (pooled per class).
///
/// Classes are drawn uniformly without replacement and listed in ascending
/// label order; examples within an episode are drawn without replacement.
pub fn build_episode(
    sources: &[&TaskDataset],
    spec: &EpisodeSpec,
    target: Option<&TaskDataset>,
    rng: &mut Rng,
) -> Result<Episode> {
    spec.validate()?;
    let first = *sources.first().ok_or(Error::EmptyInput("episode sources"))?;
    for s in &sources[1..] {
        check_alignment(first, s)?;
    }
    let target = match spec.scenario {
        Scenario::AuxOnly => None,
        Scenario::AuxSupportMixedQuery => {
            let t = target.ok_or_else(|| {
                Error::InvalidConfig("mixed-query episodes need a target dataset".into())
            })?;
            check_alignment(first, t)?;
            Some(t)
        }
    };
    let num_labels = first.num_labels();
    if spec.way > num_labels {
        return Err(Error::InvalidConfig(format!(
            "way {} exceeds the {num_labels} shared labels",
            spec.way
        )));
    }
    let q = spec.query();

    let mut classes = rng.sample_indices(num_labels, spec.way);
    classes.sort_unstable();

    let mut support = Vec::with_capacity(spec.way * spec.shot);
    let mut query = Vec::with_capacity(spec.way * q);
    for &c in &classes {
        let aux = pool_of(sources, c);
        let label = first.label_names[c].clone();
        match target {
            None => {
                if aux.len() < spec.shot + q {
                    return Err(Error::InsufficientExamples {
                        label,
                        needed: spec.shot + q,
                        available: aux.len(),
                    });
                }
                let picks = rng.sample_indices(aux.len(), spec.shot + q);
                support.extend(picks[..spec.shot].iter().map(|&i| aux[i].clone()));
                query.extend(picks[spec.shot..].iter().map(|&i| aux[i].clone()));
            }
            Some(t) => {
                let tpool = t.examples.iter().filter(|e| e.label == c).collect::<Vec<_>>();
                if aux.len() < spec.shot + q {
                    return Err(Error::InsufficientExamples {
                        label,
                        needed: spec.shot + q,
                        available: aux.len(),
                    });
                }
                if tpool.len() < q {
                    return Err(Error::InsufficientExamples {
                        label: format!("{label} (target)"),
                        needed: q,
                        available: tpool.len(),
                    });
                }
                let from_target = (0..q).filter(|_| rng.uniform() < spec.target_fraction).count();
                let aux_picks = rng.sample_indices(aux.len(), spec.shot + q - from_target);
                let t_picks = rng.sample_indices(tpool.len(), from_target);
                support.extend(aux_picks[..spec.shot].iter().map(|&i| aux[i].clone()));
                query.extend(aux_picks[spec.shot..].iter().map(|&i| aux[i].clone()));
                query.extend(t_picks.iter().map(|&i| tpool[i].clone()));
            }
        }
    }

    let mut names: Vec<String> = sources.iter().map(|d| d.name.clone()).collect();
    if let Some(t) = target {
        names.push(t.name.clone());
    }
    let episode = Episode {
        support,
        query,
        way: spec.way,
        shot: spec.shot,
        query_per_class: q,
        classes,
        task: first.task.clone(),
        sources: names,
    };
    episode.validate()?;
    Ok(episode)
}
