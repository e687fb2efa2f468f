use crate::corpus::{features_matrix, Example};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::model::{Mode, Model, ParameterVector, Upstream};
use crate::numerics::{batch_cross_entropy, softmax_unchecked, squared_distance, AdamWConfig, AdamWState, Mat64, Rng, Vec64};

use super::MamlConfig;

/// Mean head cross-entropy over `examples` (dataset label ids) and its exact
/// gradient.
pub fn head_loss(
    model: &Model,
    examples: &[Example],
    head: &str,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(f64, ParameterVector)> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("head loss batch"));
    }
    let x = features_matrix(examples)?;
    let trace = model.forward(&x, Some(head), mode, rng)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let logits = trace.logits.as_ref().expect("forward with a head records logits");
    let (loss, dlogits) = batch_cross_entropy(logits, &labels)?;
    let grad = model.backward(&trace, Upstream { logits: Some(&dlogits), encoding: None })?;
    Ok((loss, grad))
}

/// Fraction of `examples` whose head argmax equals the label (eval mode).
pub fn head_accuracy(model: &Model, examples: &[Example], head: &str) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("accuracy batch"));
    }
    let preds = head_predictions(model, examples, head)?;
    let hits = preds.iter().zip(examples).filter(|(p, e)| **p == e.label).count();
    Ok(hits as f64 / examples.len() as f64)
}

pub(crate) fn head_predictions(model: &Model, examples: &[Example], head: &str) -> Result<Vec<usize>> {
    let x = features_matrix(examples)?;
    let trace = model.forward_eval(&x, Some(head))?;
    let logits = trace.logits.as_ref().expect("forward with a head records logits");
    Ok(logits.iter_rows().map(argmax).collect())
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Result of a Reptile inner loop.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerRun {
    pub params: ParameterVector,
    /// Support loss before each step.
    pub losses: Vec<f64>,
}

/// One inner AdamW step on the support set, updating `params` and `state`
/// in place. Only the encoder and `head` move.
pub fn reptile_inner_step(
    model: &Model,
    params: &mut ParameterVector,
    state: &mut AdamWState,
    support: &[Example],
    head: &str,
    rng: &mut Rng,
) -> Result<f64> {
    let current = model.with_parameters(params)?;
    let (loss, grad) = head_loss(&current, support, head, Mode::Train, rng)?;
    let ranges = model.trainable_ranges(Some(head))?;
    state.step_ranges(params.as_mut_slice(), grad.as_slice(), &ranges)?;
    Ok(loss)
}

/// `m` AdamW steps from the model's parameters with a fresh optimizer state;
/// the model itself is not modified.
pub fn reptile_inner(
    model: &Model,
    support: &[Example],
    head: &str,
    steps: usize,
    adamw: &AdamWConfig,
    rng: &mut Rng,
) -> Result<InnerRun> {
    if steps == 0 {
        return Err(Error::InvalidConfig("reptile inner_steps must be at least 1".into()));
    }
    model.head_range(head)?;
    let mut params = model.flatten();
    let mut state = AdamWState::new(params.len(), *adamw);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        losses.push(reptile_inner_step(model, &mut params, &mut state, support, head, rng)?);
    }
    Ok(InnerRun { params, losses })
}

/// `θ + β · mean_i(θ_i − θ)`.
pub fn reptile_outer(theta: &ParameterVector, adapted: &[ParameterVector], beta: f64) -> Result<ParameterVector> {
    if adapted.is_empty() {
        return Err(Error::EmptyInput("adapted parameter list"));
    }
    let n = adapted.len() as f64;
    let mut delta = ParameterVector::zeros(theta.len());
    for a in adapted {
        delta.axpy(1.0, &a.sub(theta)?)?;
    }
    Ok(theta
        .as_slice()
        .iter()
        .zip(delta.as_slice())
        .map(|(t, d)| t + beta * (d / n))
        .collect())
}

/// `θ − α · g`.
pub fn maml_inner_update(theta: &ParameterVector, grad: &ParameterVector, alpha: f64) -> Result<ParameterVector> {
    let mut out = theta.clone();
    out.axpy(-alpha, grad)?;
    Ok(out)
}

/// One first-order MAML meta-update: every episode adapts from the same `θ`
/// on its support set, and the query gradients at the adapted points are
/// summed into `θ ← θ − β Σ_i g_i`. Returns the mean query loss.
pub fn maml_step(model: &mut Model, episodes: &[Episode], config: &MamlConfig, rng: &mut Rng) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::EmptyInput("maml meta-batch"));
    }
    let theta = model.flatten();
    let mut total = ParameterVector::zeros(theta.len());
    let mut loss = 0.0;
    for ep in episodes {
        if ep.support.is_empty() || ep.query.is_empty() {
            return Err(Error::EmptyInput("maml support or query set"));
        }
        let mut adapted = theta.clone();
        for _ in 0..config.inner_steps {
            let m = model.with_parameters(&adapted)?;
            let (_, g) = head_loss(&m, &ep.support, &ep.task, Mode::Train, rng)?;
            adapted = maml_inner_update(&adapted, &g, config.inner_lr)?;
        }
        let m = model.with_parameters(&adapted)?;
        let (lq, gq) = head_loss(&m, &ep.query, &ep.task, Mode::Train, rng)?;
        total.axpy(1.0, &gq)?;
        loss += lq;
    }
    let mut updated = theta;
    updated.axpy(-config.outer_lr, &total)?;
    model.unflatten(&updated)?;
    Ok(loss / episodes.len() as f64)
}

/// Row `c` is the mean of the encodings whose class is `c`.
pub fn prototypes(encodings: &Mat64, classes: &[usize], num_classes: usize) -> Result<Mat64> {
    if classes.len() != encodings.rows() {
        return Err(Error::LengthMismatch {
            what: "prototype class list",
            expected: encodings.rows(),
            got: classes.len(),
        });
    }
    let mut sums = Mat64::zeros(num_classes, encodings.cols());
    let mut counts = vec![0usize; num_classes];
    for (row, &c) in encodings.iter_rows().zip(classes) {
        if c >= num_classes {
            return Err(Error::LabelOutOfRange { label: c, classes: num_classes });
        }
        counts[c] += 1;
        for (s, v) in sums.row_mut(c).iter_mut().zip(row) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::EmptyInput("prototype class"));
        }
        for s in sums.row_mut(c) {
            *s /= n as f64;
        }
    }
    Ok(sums)
}

/// `softmax_c(−‖x − μ_c‖²)`.
pub fn proto_classify(query: &[f64], prototypes: &Mat64) -> Result<Vec64> {
    if prototypes.rows() < 2 {
        return Err(Error::Data(format!("need at least 2 prototypes, got {}", prototypes.rows())));
    }
    if query.len() != prototypes.cols() {
        return Err(Error::LengthMismatch {
            what: "query encoding",
            expected: prototypes.cols(),
            got: query.len(),
        });
    }
    let logits: Vec<f64> = prototypes.iter_rows().map(|mu| -squared_distance(query, mu)).collect();
    Ok(softmax_unchecked(&logits))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtoLoss {
    /// `λ1·dce + λ2·ce`.
    pub loss: f64,
    /// Mean query distance cross-entropy.
    pub dce: f64,
    /// Mean head cross-entropy over support ∪ query (0 when `λ2 = 0`).
    pub ce: f64,
    pub query_accuracy: f64,
    pub grad: ParameterVector,
}

/// Combined prototypical loss on one episode with its exact gradient.
/// Support and query go through one forward pass (support rows first).
pub fn proto_episode_loss(
    model: &Model,
    episode: &Episode,
    lambda_dce: f64,
    lambda_ce: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<ProtoLoss> {
    if lambda_dce == 0.0 && lambda_ce == 0.0 {
        return Err(Error::InvalidConfig("prototypical loss weights are both zero".into()));
    }
    if episode.query.is_empty() {
        return Err(Error::EmptyInput("prototypical query set"));
    }
    let head = (lambda_ce > 0.0).then_some(episode.task.as_str());
    let all: Vec<&Example> = episode.support.iter().chain(&episode.query).collect();
    let x = features_matrix(all.iter().copied())?;
    let trace = model.forward(&x, head, mode, rng)?;
    let enc = trace.encoding();
    let ns = episode.support.len();
    let nq = episode.query.len();
    let local = |e: &Example| {
        episode
            .local_class(e.label)
            .ok_or_else(|| Error::Data(format!("example `{}` outside the episode classes", e.id)))
    };
    let support_classes = episode.support.iter().map(local).collect::<Result<Vec<_>>>()?;
    let query_classes = episode.query.iter().map(local).collect::<Result<Vec<_>>>()?;
    let support_enc = enc.select_rows(&(0..ns).collect::<Vec<_>>());
    let mu = prototypes(&support_enc, &support_classes, episode.way)?;

    let mut d_enc = Mat64::zeros(enc.rows(), enc.cols());
    let mut d_mu = Mat64::zeros(mu.rows(), mu.cols());
    let mut dce = 0.0;
    let mut hits = 0;
    for (qi, &y) in query_classes.iter().enumerate() {
        let r = ns + qi;
        let e = enc.row(r);
        let logits: Vec<f64> = mu.iter_rows().map(|m| -squared_distance(e, m)).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        dce += lse - logits[y];
        if argmax(&logits) == y {
            hits += 1;
        }
        for (c, l) in logits.iter().enumerate() {
            let g = ((l - lse).exp() - if c == y { 1.0 } else { 0.0 }) / nq as f64;
            // dlogit/de = −2(e − μ_c), dlogit/dμ_c = 2(e − μ_c)
            for (j, &ej) in e.iter().enumerate() {
                let diff = ej - mu.get(c, j);
                d_enc.row_mut(r)[j] -= 2.0 * g * diff;
                d_mu.row_mut(c)[j] += 2.0 * g * diff;
            }
        }
    }
    dce /= nq as f64;
    let mut counts = vec![0usize; episode.way];
    for &c in &support_classes {
        counts[c] += 1;
    }
    for (s, &c) in support_classes.iter().enumerate() {
        for j in 0..enc.cols() {
            d_enc.row_mut(s)[j] += d_mu.get(c, j) / counts[c] as f64;
        }
    }
    for v in d_enc.as_mut_slice() {
        *v *= lambda_dce;
    }

    let (ce, d_logits) = match &trace.logits {
        Some(logits) if lambda_ce > 0.0 => {
            let labels: Vec<usize> = all.iter().map(|e| e.label).collect();
            let (ce, mut g) = batch_cross_entropy(logits, &labels)?;
            for v in g.as_mut_slice() {
                *v *= lambda_ce;
            }
            (ce, Some(g))
        }
        _ => (0.0, None),
    };
    let grad = model.backward(&trace, Upstream { logits: d_logits.as_ref(), encoding: Some(&d_enc) })?;
    Ok(ProtoLoss {
        loss: lambda_dce * dce + lambda_ce * ce,
        dce,
        ce,
        query_accuracy: hits as f64 / nq as f64,
        grad,
    })
}

/// Query accuracy of nearest-prototype classification in eval mode.
pub fn proto_episode_accuracy(model: &Model, episode: &Episode) -> Result<f64> {
    if episode.query.is_empty() {
        return Err(Error::EmptyInput("prototypical query set"));
    }
    let s = model.forward_eval(&features_matrix(&episode.support)?, None)?;
    let q = model.forward_eval(&features_matrix(&episode.query)?, None)?;
    let classes: Vec<usize> = episode
        .support
        .iter()
        .map(|e| episode.local_class(e.label).expect("validated episode"))
        .collect();
    let mu = prototypes(s.encoding(), &classes, episode.way)?;
    let mut hits = 0;
    for (row, e) in q.encoding().iter_rows().zip(&episode.query) {
        let p = proto_classify(row, &mu)?;
        if episode.classes[argmax(&p)] == e.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / episode.query.len() as f64)
}
