//! Labeled task-language datasets: JSONL/TSV ingestion, a synthetic
//! multi-language task-family generator, and stratified splitting.

mod featurize;
mod synthetic;

pub use featurize::{bag_of_hashed_tokens, featurize_pair, fnv1a64, tokenize, BAG_DIM};
pub use synthetic::{generate_synthetic, synthetic_centers, SyntheticSpec};

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Mat64, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: Vec<f64>,
    pub label: usize,
    pub language: String,
    pub task: String,
}

/// Pool of examples sharing one (task, language) pair and label set.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    pub task: String,
    pub language: String,
    pub label_names: Vec<String>,
    pub examples: Vec<Example>,
}

impl TaskDataset {
    /// Builds a dataset and checks its invariants.
    pub fn new(
        name: impl Into<String>,
        task: impl Into<String>,
        language: impl Into<String>,
        label_names: Vec<String>,
        examples: Vec<Example>,
    ) -> Result<Self> {
        let ds = TaskDataset {
            name: name.into(),
            task: task.into(),
            language: language.into(),
            label_names,
            examples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.examples.first().ok_or(Error::EmptyInput("dataset"))?;
        let dim = first.features.len();
        for e in &self.examples {
            if e.label >= self.label_names.len() {
                return Err(Error::LabelOutOfRange {
                    label: e.label,
                    classes: self.label_names.len(),
                });
            }
            if e.features.len() != dim {
                return Err(Error::Data(format!(
                    "example `{}` has {} features, dataset `{}` uses {dim}",
                    e.id,
                    e.features.len(),
                    self.name
                )));
            }
            if e.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("example features"));
            }
        }
        Ok(())
    }

    /// The `q_i` of the temperature sampling rule.
    pub fn size(&self) -> usize {
        self.examples.len()
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.features.len())
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_labels()];
        for e in &self.examples {
            c[e.label] += 1;
        }
        c
    }

    /// Indices of examples per label, in dataset order.
    pub fn indices_by_label(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.num_labels()];
        for (i, e) in self.examples.iter().enumerate() {
            by[e.label].push(i);
        }
        by
    }

    /// True when every label occurs at least once.
    pub fn is_episode_capable(&self) -> bool {
        self.label_counts().iter().all(|&c| c > 0)
    }

    pub fn features(&self) -> Result<Mat64> {
        features_matrix(self.examples.iter())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// New dataset holding the examples at `idx`, keeping metadata.
    pub fn subset(&self, name: impl Into<String>, idx: &[usize]) -> TaskDataset {
        TaskDataset {
            name: name.into(),
            task: self.task.clone(),
            language: self.language.clone(),
            label_names: self.label_names.clone(),
            examples: idx.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }

    /// Keeps at most `per_label` examples of each label, first come first kept.
    pub fn truncate_per_label(&self, per_label: usize) -> TaskDataset {
        let mut seen = vec![0; self.num_labels()];
        let idx: Vec<usize> = self
            .examples
            .iter()
            .enumerate()
            .filter(|(_, e)| {
                seen[e.label] += 1;
                seen[e.label] <= per_label
            })
            .map(|(i, _)| i)
            .collect();
        self.subset(self.name.clone(), &idx)
    }
}

/// Stacks example features into a row matrix.
pub fn features_matrix<'a, I>(examples: I) -> Result<Mat64>
where
    I: IntoIterator<Item = &'a Example>,
{
    let rows: Vec<&[f64]> = examples.into_iter().map(|e| e.features.as_slice()).collect();
    Mat64::from_rows(&rows)
}

#[derive(Debug, Serialize, Deserialize)]
struct ExampleRecord {
    id: String,
    features: Vec<f64>,
    label: String,
    language: String,
    task: String,
}

/// Reads one label name per non-empty line.
pub fn read_label_file(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let labels: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if labels.is_empty() {
        return Err(Error::Data(format!("{}: label file is empty", path.display())));
    }
    Ok(labels)
}

pub fn write_label_file(labels: &[String], path: &Path) -> Result<()> {
    let mut text = labels.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a JSONL dataset. Without `fixed_labels`, label indices follow first
/// appearance; with them, the sidecar order is used and any other label is an
/// error. The dataset is named after the file stem.
pub fn load_jsonl(path: &Path, fixed_labels: Option<&[String]>) -> Result<TaskDataset> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut labels: Vec<String> = fixed_labels.map(<[String]>::to_vec).unwrap_or_default();
    let mut examples = Vec::new();
    let mut dim = None;
    let mut pair: Option<(String, String)> = None;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if rec.features.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(lineno, "non-finite feature".into()));
        }
        match dim {
            None => dim = Some(rec.features.len()),
            Some(d) if d != rec.features.len() => {
                return Err(parse_err(
                    lineno,
                    format!("{} features, earlier lines have {d}", rec.features.len()),
                ))
            }
            _ => {}
        }
        match &pair {
            None => pair = Some((rec.task.clone(), rec.language.clone())),
            Some((t, l)) if *t != rec.task || *l != rec.language => {
                return Err(parse_err(
                    lineno,
                    format!("task/language `{}/{}` differs from `{t}/{l}`", rec.task, rec.language),
                ))
            }
            _ => {}
        }
        let label = match labels.iter().position(|l| *l == rec.label) {
            Some(p) => p,
            None if fixed_labels.is_some() => {
                return Err(parse_err(lineno, format!("label `{}` not in label file", rec.label)))
            }
            None => {
                labels.push(rec.label.clone());
                labels.len() - 1
            }
        };
        examples.push(Example {
            id: rec.id,
            features: rec.features,
            label,
            language: rec.language,
            task: rec.task,
        });
    }
    let (task, language) = pair.ok_or_else(|| Error::Data(format!("{}: empty dataset", path.display())))?;
    let name = path
        .file_stem()
        .map_or_else(|| format!("{task}-{language}"), |s| s.to_string_lossy().into_owned());
    TaskDataset::new(name, task, language, labels, examples)
}

/// Writes a dataset as JSONL; floats use shortest round-trip formatting, so
/// reading the file back reproduces every feature bit-exactly.
pub fn write_jsonl(dataset: &TaskDataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for e in &dataset.examples {
        let rec = ExampleRecord {
            id: e.id.clone(),
            features: e.features.clone(),
            label: dataset.label_names[e.label].clone(),
            language: e.language.clone(),
            task: e.task.clone(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::Data(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Loads a `premise \t hypothesis \t label` file, featurizing each pair with
/// [`featurize_pair`]. A first line reading `premise hypothesis label`
/// (case-insensitive) is treated as a header.
pub fn load_tsv(
    path: &Path,
    language: &str,
    task: &str,
    fixed_labels: Option<&[String]>,
) -> Result<TaskDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels: Vec<String> = fixed_labels.map(<[String]>::to_vec).unwrap_or_default();
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if i == 0 && cols.len() == 3 {
            let lower: Vec<String> = cols.iter().map(|c| c.trim().to_lowercase()).collect();
            if lower == ["premise", "hypothesis", "label"] {
                continue;
            }
        }
        if cols.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("expected 3 tab-separated columns, found {}", cols.len()),
            });
        }
        let name = cols[2].trim();
        let label = match labels.iter().position(|l| l == name) {
            Some(p) => p,
            None if fixed_labels.is_some() => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    message: format!("label `{name}` not in label file"),
                })
            }
            None => {
                labels.push(name.to_string());
                labels.len() - 1
            }
        };
        examples.push(Example {
            id: format!("{language}-{lineno}"),
            features: featurize_pair(cols[0], cols[1]),
            label,
            language: language.to_string(),
            task: task.to_string(),
        });
    }
    if examples.is_empty() {
        return Err(Error::Data(format!("{}: empty dataset", path.display())));
    }
    let name = path
        .file_stem()
        .map_or_else(|| format!("{task}-{language}"), |s| s.to_string_lossy().into_owned());
    TaskDataset::new(name, task, language, labels, examples)
}

/// Stratified split into `fractions.len()` parts.
///
/// Per label, examples are shuffled with `seed` and part `i` receives
/// `floor(n·f_i)` of them, with the remainder going to the largest fractional
/// parts (ties to the earlier part). Within each part the original order is
/// kept.
pub fn split(dataset: &TaskDataset, fractions: &[f64], seed: u64) -> Result<Vec<TaskDataset>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
        return Err(Error::InvalidConfig(format!("split fractions must be positive: {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("split fractions sum to {total}, not 1")));
    }
    let parts = fractions.len();
    let mut rng = Rng::new(seed);
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); parts];
    for (label, mut idx) in dataset.indices_by_label().into_iter().enumerate() {
        if idx.len() < parts {
            return Err(Error::InsufficientExamples {
                label: dataset.label_names[label].clone(),
                needed: parts,
                available: idx.len(),
            });
        }
        rng.shuffle(&mut idx);
        let n = idx.len();
        let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
        let mut rest = n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..parts).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
        });
        for &p in order.iter().cycle() {
            if rest == 0 {
                break;
            }
            counts[p] += 1;
            rest -= 1;
        }
        let mut at = 0;
        for (p, &c) in counts.iter().enumerate() {
            assigned[p].extend_from_slice(&idx[at..at + c]);
            at += c;
        }
    }
    const NAMES: [&str; 3] = ["train", "dev", "test"];
    Ok(assigned
        .into_iter()
        .enumerate()
        .map(|(p, mut idx)| {
            idx.sort_unstable();
            let suffix = NAMES.get(p).map_or_else(|| format!("part{p}"), |s| s.to_string());
            dataset.subset(format!("{}/{suffix}", dataset.name), &idx)
        })
        .collect())
}

/// Groups datasets by task tag, in first-appearance order.
pub fn group_by_task(datasets: &[TaskDataset]) -> BTreeMap<String, Vec<&TaskDataset>> {
    let mut by: BTreeMap<String, Vec<&TaskDataset>> = BTreeMap::new();
    for d in datasets {
        by.entry(d.task.clone()).or_default().push(d);
    }
    by
}
