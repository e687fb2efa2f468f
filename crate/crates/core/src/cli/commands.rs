use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::config::{Cell, DataSource, ExperimentConfig, MethodChoice, PrototypeSource};
use super::staging::Stage;
use crate::analysis::{
    hausdorff, layer_cca_profile, pca2, write_cca_csv, write_hausdorff_csv, write_pca_csv, PcaPoint, RepresentationSet,
};
use crate::corpus::{
    generate_synthetic, load_jsonl, read_label_file, split, write_jsonl, write_label_file, SyntheticSpec, TaskDataset,
};
use crate::dreca::{augment_queue, decompose, materialize, read_manifest, write_manifest, DrecaTask};
use crate::episodes::{Scenario, TaskQueue};
use crate::error::{Error, Result};
use crate::metalearn::{evaluate, finetune, train, EvalMethod, FinetuneConfig, FinetuneMode, Learner, TrainData};
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::numerics::{Mat64, Rng};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINETUNED_FILE: &str = "finetuned.ckpt";
pub const FINETUNE_METRICS_FILE: &str = "finetune_metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "dreca_tasks.json";
pub const SPEC_FILE: &str = "spec.json";
pub const LABELS_FILE: &str = "labels.txt";

// Streams forked from the experiment seed.
const STREAM_HEADS: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_FINETUNE: u64 = 3;

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: TaskDataset,
    pub dev: TaskDataset,
    pub test: TaskDataset,
}

impl Splits {
    fn of(dataset: &TaskDataset, fractions: &[f64; 3], seed: u64) -> Result<Splits> {
        let mut parts = split(dataset, fractions, seed)?.into_iter();
        let (train, dev, test) = (parts.next(), parts.next(), parts.next());
        match (train, dev, test) {
            (Some(train), Some(dev), Some(test)) => Ok(Splits { train, dev, test }),
            _ => unreachable!("three fractions give three parts"),
        }
    }
}

/// Datasets of one experiment, split and ready for the commands.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub aux: Vec<Splits>,
    /// The target training split is already capped per label.
    pub target: Splits,
}

fn load_datasets(source: &DataSource) -> Result<Vec<TaskDataset>> {
    match source {
        DataSource::Synthetic(spec) => generate_synthetic(spec),
        DataSource::Files { paths, labels } => {
            let fixed = labels.as_deref().map(read_label_file).transpose()?;
            paths.iter().map(|p| load_jsonl(p, fixed.as_deref())).collect()
        }
    }
}

impl Experiment {
    pub fn prepare(config: &ExperimentConfig) -> Result<Experiment> {
        config.validate()?;
        let data = &config.data;
        let datasets = load_datasets(&data.source)?;
        let is_target = |d: &TaskDataset| {
            d.language == data.target_language && data.target_task.as_ref().is_none_or(|t| *t == d.task)
        };
        let targets: Vec<&TaskDataset> = datasets.iter().filter(|d| is_target(d)).collect();
        let target = match targets.as_slice() {
            [one] => *one,
            [] => return Err(Error::Data(format!("no dataset for target language `{}`", data.target_language))),
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "target language `{}` has several tasks; set data.target_task",
                    data.target_language
                )))
            }
        };
        let aux: Vec<Splits> = datasets
            .iter()
            .filter(|d| d.language != data.target_language)
            .map(|d| Splits::of(d, &data.split, config.seed))
            .collect::<Result<_>>()?;
        if aux.is_empty() {
            return Err(Error::Data("no auxiliary-language datasets".into()));
        }
        let mut target = Splits::of(target, &data.split, config.seed)?;
        if let Some(k) = data.target_train_per_label {
            target.train = target.train.truncate_per_label(k);
        }
        Ok(Experiment { config: config.clone(), aux, target })
    }

    /// Fresh encoder with one head per task, auxiliary tasks first.
    pub fn initial_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.encoder.clone())?;
        let mut rng = Rng::new(self.config.seed).fork(STREAM_HEADS);
        for d in self.aux.iter().map(|s| &s.train).chain([&self.target.train]) {
            if model.has_head(&d.task) {
                if model.head_classes(&d.task)? != d.num_labels() {
                    return Err(Error::LabelMismatch(format!("task `{}` has differing label counts", d.task)));
                }
            } else {
                model.register_head(&d.task, d.num_labels(), &mut rng)?;
            }
        }
        Ok(model)
    }

    pub fn load_model(&self, path: &Path) -> Result<Model> {
        let model = load_checkpoint(path)?;
        model.check_same_architecture(&self.initial_model()?)?;
        Ok(model)
    }

    /// Auxiliary training splits, plus the target's when configured.
    pub fn base_queue(&self) -> Result<TaskQueue> {
        let mut datasets: Vec<TaskDataset> = self.aux.iter().map(|s| s.train.clone()).collect();
        if self.config.queue.add_target {
            datasets.push(self.target.train.clone());
        }
        TaskQueue::new(datasets, self.config.queue.temperature)
    }

    /// DReCa tasks of every auxiliary training split.
    pub fn dreca_tasks(&self, encoder: &Model) -> Result<Vec<DrecaTask>> {
        let mut tasks = Vec::new();
        for s in &self.aux {
            tasks.extend(decompose(&s.train, &self.config.dreca.config, Some(encoder))?);
        }
        Ok(tasks)
    }

    fn materialize_all(&self, tasks: &[DrecaTask]) -> Result<Vec<TaskDataset>> {
        tasks
            .iter()
            .map(|t| {
                let parent = self
                    .aux
                    .iter()
                    .find(|s| s.train.name == t.parent)
                    .ok_or_else(|| Error::Data(format!("DReCa task parent `{}` is not an auxiliary split", t.parent)))?;
                materialize(&parent.train, t)
            })
            .collect()
    }

    /// All auxiliary training examples sharing the target's task, as one set.
    pub fn aux_pool(&self) -> Result<TaskDataset> {
        let t = &self.target.train;
        let examples = self
            .aux
            .iter()
            .filter(|s| s.train.task == t.task && s.train.label_names == t.label_names)
            .flat_map(|s| s.train.examples.iter().cloned())
            .collect();
        TaskDataset::new("auxiliary", t.task.clone(), "aux", t.label_names.clone(), examples)
    }

    fn method(&self) -> EvalMethod {
        match (self.config.evaluation.method, &self.config.train.learner) {
            (MethodChoice::Head, _) => EvalMethod::Head,
            (MethodChoice::Prototype, _) | (MethodChoice::Auto, Learner::Protonet(_)) => EvalMethod::Prototype,
            (MethodChoice::Auto, _) => EvalMethod::Head,
        }
    }

    /// Fine-tunes a copy of `model` on the target training split.
    pub fn finetuned(&self, model: &Model, mode: FinetuneMode) -> Result<(Model, crate::metalearn::RunMetrics)> {
        let stream = match mode {
            FinetuneMode::NonEpisodic => 1,
            FinetuneMode::Episodic => 2,
        };
        let mut rng = Rng::new(self.config.seed).fork(STREAM_FINETUNE).fork(stream);
        let mut m = model.clone();
        let config = FinetuneConfig { mode, ..self.config.finetune.clone() };
        let dev = [self.target.dev.clone()];
        let metrics = finetune(&mut m, &self.target.train, &self.config.train.learner, &config, &dev, &mut rng)?;
        Ok((m, metrics))
    }

    /// Evaluates one grid cell starting from the meta-trained `model`.
    pub fn cell(&self, model: &Model, cell: Cell) -> Result<(CellResult, Option<String>)> {
        let method = self.method();
        let (m, metrics, source) = match cell {
            Cell::ZeroShot => {
                let source = match self.config.evaluation.zero_shot_prototypes {
                    PrototypeSource::Auxiliary => self.aux_pool()?,
                    PrototypeSource::TargetTrain => self.target.train.clone(),
                };
                (model.clone(), None, source)
            }
            Cell::NonEpisodic | Cell::Episodic => {
                let mode = if cell == Cell::Episodic { FinetuneMode::Episodic } else { FinetuneMode::NonEpisodic };
                let (m, metrics) = self.finetuned(model, mode)?;
                (m, Some(metrics.to_csv()), self.target.train.clone())
            }
        };
        let eval = evaluate(&m, &self.target.test, method, Some(&source))?;
        Ok((
            CellResult { accuracy: eval.accuracy, method, label_names: eval.label_names, confusion: eval.confusion },
            metrics,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub accuracy: f64,
    pub method: EvalMethod,
    pub label_names: Vec<String>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub learner: String,
    pub target: String,
    pub seed: u64,
    pub cells: BTreeMap<String, CellResult>,
}

fn confusion_csv(r: &CellResult) -> String {
    let mut out = String::from("true");
    for l in &r.label_names {
        write!(out, ",{l}").unwrap();
    }
    out.push('\n');
    for (l, row) in r.label_names.iter().zip(&r.confusion) {
        out.push_str(l);
        for c in row {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

pub fn gen_data(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    let datasets = generate_synthetic(spec)?;
    let stage = Stage::new(out)?;
    for d in &datasets {
        write_jsonl(d, &stage.path(&format!("{}.jsonl", d.language)))?;
    }
    write_label_file(&spec.labels(), &stage.path(LABELS_FILE))?;
    stage.write(SPEC_FILE, json(spec))?;
    stage.commit()
}

/// Meta-trains from scratch. DReCa tasks come from `manifest` when given,
/// otherwise from clustering with the freshly initialized encoder.
pub fn train_cmd(config: &ExperimentConfig, out: &Path, manifest: Option<&Path>) -> Result<()> {
    let exp = Experiment::prepare(config)?;
    let stage = Stage::new(out)?;
    stage.write(CONFIG_FILE, config.resolved_json())?;
    let mut model = exp.initial_model()?;
    let mut queue = exp.base_queue()?;
    if config.dreca.enabled {
        let tasks = match manifest {
            Some(p) => read_manifest(p)?,
            None => exp.dreca_tasks(&model)?,
        };
        write_manifest(&stage.path(MANIFEST_FILE), &tasks)?;
        if let Some(spec) = config.train.episode_spec() {
            queue = augment_queue(&queue, &exp.materialize_all(&tasks)?, config.dreca.config.mixing, &spec)?;
        }
    }
    let dev: Vec<TaskDataset> = exp.aux.iter().map(|s| s.dev.clone()).collect();
    let target = (config.train.scenario == Scenario::AuxSupportMixedQuery).then_some(&exp.target.train);
    let mut rng = Rng::new(config.seed).fork(STREAM_TRAIN);
    let metrics = train(&mut model, TrainData { queue: &queue, dev: &dev, target }, &config.train, &mut rng)?;
    save_checkpoint(&model, &stage.path(CHECKPOINT_FILE))?;
    metrics.write_csv(&stage.path(METRICS_FILE))?;
    stage.commit()
}

pub fn finetune_cmd(config: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let exp = Experiment::prepare(config)?;
    let model = exp.load_model(checkpoint)?;
    let stage = Stage::new(out)?;
    stage.write(CONFIG_FILE, config.resolved_json())?;
    let (m, metrics) = exp.finetuned(&model, config.finetune.mode)?;
    save_checkpoint(&m, &stage.path(FINETUNED_FILE))?;
    metrics.write_csv(&stage.path(FINETUNE_METRICS_FILE))?;
    stage.commit()
}

/// Runs the evaluation grid. Fine-tuned cells fine-tune a copy of the
/// checkpoint exactly as `finetune` would.
pub fn eval_cmd(config: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<Summary> {
    let exp = Experiment::prepare(config)?;
    let model = exp.load_model(checkpoint)?;
    let stage = Stage::new(out)?;
    stage.write(CONFIG_FILE, config.resolved_json())?;
    let mut summary = Summary {
        learner: config.train.learner.name().to_string(),
        target: exp.target.test.name.clone(),
        seed: config.seed,
        cells: BTreeMap::new(),
    };
    for &cell in &config.evaluation.cells {
        if summary.cells.contains_key(cell.name()) {
            continue;
        }
        let (result, metrics) = exp.cell(&model, cell)?;
        stage.write(&format!("confusion_{}.csv", cell.name()), confusion_csv(&result))?;
        if let Some(csv) = metrics {
            stage.write(&format!("finetune_{}.csv", cell.name()), csv)?;
        }
        summary.cells.insert(cell.name().to_string(), result);
    }
    stage.write(SUMMARY_FILE, json(&summary))?;
    stage.commit()?;
    Ok(summary)
}

fn encode(model: &Model, d: &TaskDataset) -> Result<Mat64> {
    Ok(model.forward_eval(&d.features()?, None)?.encoding().clone())
}

/// PCA of the `after` encodings, layer CCA between the checkpoints on the
/// target probe, and auxiliary↔target Hausdorff distances under both.
pub fn analyze_cmd(config: &ExperimentConfig, before: &Path, after: Option<&Path>, out: &Path) -> Result<()> {
    let exp = Experiment::prepare(config)?;
    let before = exp.load_model(before)?;
    let after = match after {
        Some(p) => exp.load_model(p)?,
        None => before.clone(),
    };
    let k = config.analysis.points_per_label;
    let aux: Vec<TaskDataset> = exp.aux.iter().map(|s| s.test.truncate_per_label(k)).collect();
    let target = exp.target.test.truncate_per_label(k);
    let stage = Stage::new(out)?;
    stage.write(CONFIG_FILE, config.resolved_json())?;

    let all: Vec<&TaskDataset> = aux.iter().chain([&target]).collect();
    let mut rows = Vec::new();
    for d in &all {
        rows.extend(encode(&after, d)?.iter_rows().map(<[f64]>::to_vec));
    }
    let pca = pca2(&RepresentationSet::new("after", Mat64::from_rows(&rows)?)?)?;
    let points: Vec<PcaPoint> = all
        .iter()
        .flat_map(|d| d.examples.iter())
        .zip(pca.coords.iter_rows())
        .map(|(e, xy)| PcaPoint { id: e.id.clone(), language: e.language.clone(), x: xy[0], y: xy[1] })
        .collect();
    write_pca_csv(&stage.path("pca.csv"), &points)?;

    write_cca_csv(&stage.path("cca.csv"), &layer_cca_profile(&before, &after, &target.features()?)?)?;

    let mut pairs = Vec::new();
    for (tag, model) in [("before", &before), ("after", &after)] {
        let t = RepresentationSet::new(&target.language, encode(model, &target)?)?;
        let mut pooled = Vec::new();
        for d in &aux {
            let s = encode(model, d)?;
            pooled.extend(s.iter_rows().map(<[f64]>::to_vec));
            let s = RepresentationSet::new(&d.language, s)?;
            pairs.push((format!("{tag}:{}~{}", d.language, target.language), hausdorff(&s, &t)?));
        }
        let s = RepresentationSet::new("aux", Mat64::from_rows(&pooled)?)?;
        pairs.push((format!("{tag}:aux~{}", target.language), hausdorff(&s, &t)?));
    }
    write_hausdorff_csv(&stage.path("hausdorff.csv"), &pairs)?;
    stage.commit()
}

/// Clusters every auxiliary training split; `checkpoint` supplies the
/// embedding encoder, the fresh initialization otherwise.
pub fn dreca_cmd(config: &ExperimentConfig, checkpoint: Option<&Path>, out: &Path) -> Result<Vec<DrecaTask>> {
    let exp = Experiment::prepare(config)?;
    let model = match checkpoint {
        Some(p) => exp.load_model(p)?,
        None => exp.initial_model()?,
    };
    let tasks = exp.dreca_tasks(&model)?;
    let stage = Stage::new(out)?;
    stage.write(CONFIG_FILE, config.resolved_json())?;
    write_manifest(&stage.path(MANIFEST_FILE), &tasks)?;
    stage.commit()?;
    Ok(tasks)
}
