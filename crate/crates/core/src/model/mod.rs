//! Fully connected encoder with per-task linear heads and exact backprop.
//!
//! # Parameter layout
//!
//! The flat [`ParameterVector`] lists, in order:
//!
//! 1. each encoder layer `l = 0..L`: its weight matrix (`out × in`, row-major)
//!    followed by its bias (`out`);
//! 2. each head in registration order: weight (`classes × hidden`, row-major)
//!    followed by bias (`classes`).
//!
//! Layer 0 maps `input_dim → hidden_dim`; every later layer maps
//! `hidden_dim → hidden_dim`. The activation is applied after every layer and
//! the last layer's output is the encoding fed to heads and distance losses.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use params::ParameterVector;

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Mat64, Rng};

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative given the pre-activation `z` and the activation `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 16,
            hidden_dim: 32,
            num_layers: 4,
            activation: Activation::Tanh,
            dropout_rate: 0.1,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidConfig("encoder dimensions must be at least 1".into()));
        }
        if self.num_layers == 0 {
            return Err(Error::InvalidConfig("encoder needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Affine map `x ↦ W x + b` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Mat64,
    pub bias: Vec<f64>,
}

impl Dense {
    fn uniform(inputs: usize, outputs: usize, rng: &mut Rng) -> Dense {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut weight = Mat64::zeros(outputs, inputs);
        for w in weight.as_mut_slice() {
            *w = rng.uniform_range(-bound, bound);
        }
        let bias = (0..outputs).map(|_| rng.uniform_range(-bound, bound)).collect();
        Dense { weight, bias }
    }

    fn len(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    /// Rows of `x` mapped through the layer.
    fn apply(&self, x: &Mat64) -> Mat64 {
        let mut z = x.matmul_nt(&self.weight);
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        z
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    tag: String,
    dense: Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a forward pass computed, enough to run backward exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    version: u64,
    pub input: Mat64,
    /// Pre-activation values per layer.
    pub pre_activations: Vec<Mat64>,
    /// Per-layer outputs after activation and dropout.
    pub activations: Vec<Mat64>,
    /// Inverted-dropout multipliers per layer (0 or `1/(1-p)`); `None` when
    /// no dropout was applied.
    pub masks: Vec<Option<Mat64>>,
    pub head: Option<String>,
    pub logits: Option<Mat64>,
}

impl ForwardTrace {
    pub fn encoding(&self) -> &Mat64 {
        self.activations.last().expect("encoder has at least one layer")
    }

    pub fn num_layers(&self) -> usize {
        self.activations.len()
    }
}

/// Upstream gradients fed into [`Model::backward`].
#[derive(Clone, Copy, Debug, Default)]
pub struct Upstream<'a> {
    /// dLoss/dlogits for the head recorded in the trace.
    pub logits: Option<&'a Mat64>,
    /// dLoss/dencoding, added to whatever flows back from the head.
    pub encoding: Option<&'a Mat64>,
}

enum Masks<'a> {
    None,
    Sample(f64, &'a mut Rng),
    Replay(&'a [Option<Mat64>]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: EncoderConfig,
    layers: Vec<Dense>,
    heads: Vec<Head>,
    version: u64,
}

impl Model {
    /// Encoder initialised from `config.seed` with U(±1/√fan_in); no heads.
    pub fn new(config: EncoderConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let fan_in = if l == 0 { config.input_dim } else { config.hidden_dim };
            layers.push(Dense::uniform(fan_in, config.hidden_dim, &mut rng));
        }
        Ok(Model {
            config,
            layers,
            heads: Vec::new(),
            version: fresh_version(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable access to a layer; invalidates outstanding traces.
    pub fn layer_mut(&mut self, l: usize) -> &mut Dense {
        self.version = fresh_version();
        &mut self.layers[l]
    }

    /// Registered heads as `(tag, num_classes)` in registration order.
    pub fn heads(&self) -> impl Iterator<Item = (&str, usize)> {
        self.heads.iter().map(|h| (h.tag.as_str(), h.dense.bias.len()))
    }

    pub fn has_head(&self, tag: &str) -> bool {
        self.heads.iter().any(|h| h.tag == tag)
    }

    pub fn head_classes(&self, tag: &str) -> Result<usize> {
        self.head(tag).map(|h| h.dense.bias.len())
    }

    fn head(&self, tag: &str) -> Result<&Head> {
        self.heads
            .iter()
            .find(|h| h.tag == tag)
            .ok_or_else(|| Error::UnknownHead(tag.to_string()))
    }

    /// Adds a `hidden_dim → num_classes` head initialised U(±1/√hidden_dim).
    pub fn register_head(&mut self, tag: &str, num_classes: usize, rng: &mut Rng) -> Result<()> {
        if self.has_head(tag) {
            return Err(Error::DuplicateHead(tag.to_string()));
        }
        if num_classes == 0 {
            return Err(Error::InvalidConfig(format!("head `{tag}` needs at least one class")));
        }
        let dense = Dense::uniform(self.config.hidden_dim, num_classes, rng);
        self.heads.push(Head {
            tag: tag.to_string(),
            dense,
        });
        self.version = fresh_version();
        Ok(())
    }

    pub fn encoder_len(&self) -> usize {
        self.layers.iter().map(Dense::len).sum()
    }

    pub fn num_parameters(&self) -> usize {
        self.encoder_len() + self.heads.iter().map(|h| h.dense.len()).sum::<usize>()
    }

    /// Flat-vector range holding the head's weight and bias.
    pub fn head_range(&self, tag: &str) -> Result<Range<usize>> {
        let mut start = self.encoder_len();
        for h in &self.heads {
            let end = start + h.dense.len();
            if h.tag == tag {
                return Ok(start..end);
            }
            start = end;
        }
        Err(Error::UnknownHead(tag.to_string()))
    }

    /// The encoder range plus, when given, one head's range: the coordinates a
    /// training step on that head may change.
    pub fn trainable_ranges(&self, head: Option<&str>) -> Result<Vec<Range<usize>>> {
        #[allow(clippy::single_range_in_vec_init)]
        let mut ranges = vec![0..self.encoder_len()];
        if let Some(tag) = head {
            ranges.push(self.head_range(tag)?);
        }
        Ok(ranges)
    }

    pub fn flatten(&self) -> ParameterVector {
        let mut out = Vec::with_capacity(self.num_parameters());
        let denses = self.layers.iter().chain(self.heads.iter().map(|h| &h.dense));
        for d in denses {
            out.extend_from_slice(d.weight.as_slice());
            out.extend_from_slice(&d.bias);
        }
        out.into()
    }

    /// Overwrites every parameter from a flat vector laid out as [`Model::flatten`].
    pub fn unflatten(&mut self, params: &ParameterVector) -> Result<()> {
        if params.len() != self.num_parameters() {
            return Err(Error::LengthMismatch {
                what: "model parameters",
                expected: self.num_parameters(),
                got: params.len(),
            });
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("model parameters"));
        }
        let src = params.as_slice();
        let mut at = 0;
        let denses = self.layers.iter_mut().chain(self.heads.iter_mut().map(|h| &mut h.dense));
        for d in denses {
            let w = d.weight.as_mut_slice();
            w.copy_from_slice(&src[at..at + w.len()]);
            at += w.len();
            let b = d.bias.as_mut_slice();
            b.copy_from_slice(&src[at..at + b.len()]);
            at += b.len();
        }
        self.version = fresh_version();
        Ok(())
    }

    pub fn with_parameters(&self, params: &ParameterVector) -> Result<Model> {
        let mut m = self.clone();
        m.unflatten(params)?;
        Ok(m)
    }

    /// Same layer shapes, activation and heads (tags and widths, in order).
    pub fn check_same_architecture(&self, other: &Model) -> Result<()> {
        let a = &self.config;
        let b = &other.config;
        if a.input_dim != b.input_dim
            || a.hidden_dim != b.hidden_dim
            || a.num_layers != b.num_layers
            || a.activation != b.activation
        {
            return Err(Error::ArchitectureMismatch(format!(
                "encoders differ: {a:?} vs {b:?}"
            )));
        }
        let ha: Vec<_> = self.heads().collect();
        let hb: Vec<_> = other.heads().collect();
        if ha != hb {
            return Err(Error::ArchitectureMismatch(format!("heads differ: {ha:?} vs {hb:?}")));
        }
        Ok(())
    }

    /// Forward pass. Eval mode applies no dropout and draws nothing from
    /// `rng`; train mode applies inverted dropout at the configured rate.
    pub fn forward(
        &self,
        inputs: &Mat64,
        head: Option<&str>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<ForwardTrace> {
        let masks = match mode {
            Mode::Train if self.config.dropout_rate > 0.0 => {
                Masks::Sample(self.config.dropout_rate, rng)
            }
            _ => Masks::None,
        };
        self.forward_impl(inputs, head, masks)
    }

    /// Eval-mode forward pass.
    pub fn forward_eval(&self, inputs: &Mat64, head: Option<&str>) -> Result<ForwardTrace> {
        self.forward_impl(inputs, head, Masks::None)
    }

    /// Recomputes a trace from its input with the dropout masks it recorded.
    pub fn replay(&self, trace: &ForwardTrace) -> Result<ForwardTrace> {
        self.forward_impl(&trace.input, trace.head.as_deref(), Masks::Replay(&trace.masks))
    }

    fn forward_impl(&self, inputs: &Mat64, head: Option<&str>, mut masks: Masks<'_>) -> Result<ForwardTrace> {
        if inputs.rows() == 0 {
            return Err(Error::EmptyInput("forward batch"));
        }
        if inputs.cols() != self.config.input_dim {
            return Err(Error::LengthMismatch {
                what: "input features",
                expected: self.config.input_dim,
                got: inputs.cols(),
            });
        }
        let head = head.map(|t| self.head(t)).transpose()?;
        let act = self.config.activation;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut outs: Vec<Mat64> = Vec::with_capacity(self.layers.len());
        let mut used_masks = Vec::with_capacity(self.layers.len());

        for (l, layer) in self.layers.iter().enumerate() {
            let x = if l == 0 { inputs } else { &outs[l - 1] };
            let z = layer.apply(x);
            let mut a = z.clone();
            for v in a.as_mut_slice() {
                *v = act.apply(*v);
            }
            let mask = match &mut masks {
                Masks::None => None,
                Masks::Sample(p, rng) => {
                    let keep = 1.0 / (1.0 - *p);
                    let mut m = Mat64::zeros(a.rows(), a.cols());
                    for v in m.as_mut_slice() {
                        *v = if rng.uniform() < *p { 0.0 } else { keep };
                    }
                    Some(m)
                }
                Masks::Replay(stored) => stored.get(l).cloned().flatten(),
            };
            if let Some(m) = &mask {
                for (v, k) in a.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *v *= k;
                }
            }
            pre.push(z);
            outs.push(a);
            used_masks.push(mask);
        }

        let logits = head.map(|h| h.dense.apply(outs.last().expect("at least one layer")));
        Ok(ForwardTrace {
            version: self.version,
            input: inputs.clone(),
            pre_activations: pre,
            activations: outs,
            masks: used_masks,
            head: head.map(|h| h.tag.clone()),
            logits,
        })
    }

    /// Exact gradient of the loss with respect to every parameter, given the
    /// upstream gradients on the trace's logits and/or encoding. Heads other
    /// than the trace's receive zero gradient.
    pub fn backward(&self, trace: &ForwardTrace, upstream: Upstream<'_>) -> Result<ParameterVector> {
        if trace.version != self.version {
            return Err(Error::StaleTrace {
                trace: trace.version,
                model: self.version,
            });
        }
        let n = trace.input.rows();
        let hidden = self.config.hidden_dim;
        let mut grad = ParameterVector::zeros(self.num_parameters());

        let mut d_out = match upstream.encoding {
            Some(g) => {
                check_shape("encoding gradient", g, n, hidden)?;
                g.clone()
            }
            None => Mat64::zeros(n, hidden),
        };

        if let Some(g_logits) = upstream.logits {
            let tag = trace
                .head
                .as_deref()
                .ok_or_else(|| Error::UnknownHead("<none recorded in trace>".into()))?;
            let head = self.head(tag)?;
            check_shape("logit gradient", g_logits, n, head.dense.bias.len())?;
            let range = self.head_range(tag)?;
            let g = &mut grad.as_mut_slice()[range];
            write_dense_grad(g, g_logits, trace.encoding());
            let back = g_logits.matmul(&head.dense.weight);
            for (d, b) in d_out.as_mut_slice().iter_mut().zip(back.as_slice()) {
                *d += b;
            }
        }

        let act = self.config.activation;
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for layer in &self.layers {
            offsets.push(at);
            at += layer.len();
        }

        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let z = &trace.pre_activations[l];
            let mut dz = d_out;
            let mask = trace.masks.get(l).and_then(Option::as_ref);
            for (i, d) in dz.as_mut_slice().iter_mut().enumerate() {
                let k = mask.map_or(1.0, |m| m.as_slice()[i]);
                let zi = z.as_slice()[i];
                *d *= k * act.derivative(zi, act.apply(zi));
            }
            let x = if l == 0 { &trace.input } else { &trace.activations[l - 1] };
            let g = &mut grad.as_mut_slice()[offsets[l]..offsets[l] + layer.len()];
            write_dense_grad(g, &dz, x);
            if l > 0 {
                d_out = dz.matmul(&layer.weight);
            } else {
                break;
            }
        }
        Ok(grad)
    }
}

fn check_shape(what: &'static str, m: &Mat64, rows: usize, cols: usize) -> Result<()> {
    if m.rows() != rows || m.cols() != cols {
        return Err(Error::LengthMismatch {
            what,
            expected: rows * cols,
            got: m.rows() * m.cols(),
        });
    }
    Ok(())
}

/// Writes `[dzᵀ·x (row-major) | column sums of dz]` into `out`.
fn write_dense_grad(out: &mut [f64], dz: &Mat64, x: &Mat64) {
    let dw = dz.matmul_tn(x);
    let w_len = dw.as_slice().len();
    out[..w_len].copy_from_slice(dw.as_slice());
    out[w_len..].copy_from_slice(&dz.column_sums());
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{batch_cross_entropy, finite_diff_check, Rng};
    use proptest::prelude::*;

    fn cfg(input: usize, hidden: usize, layers: usize, act: Activation, dropout: f64) -> EncoderConfig {
        EncoderConfig {
            input_dim: input,
            hidden_dim: hidden,
            num_layers: layers,
            activation: act,
            dropout_rate: dropout,
            seed: 11,
        }
    }

    fn batch(rows: usize, cols: usize, rng: &mut Rng) -> Mat64 {
        let data = (0..rows * cols).map(|_| rng.normal()).collect();
        Mat64::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_activations() {
        let mut m = Model::new(cfg(3, 4, 2, Activation::Tanh, 0.0)).unwrap();
        m.register_head("t", 3, &mut Rng::new(1)).unwrap();
        m.unflatten(&ParameterVector::zeros(m.num_parameters())).unwrap();
        let x = batch(5, 3, &mut Rng::new(2));
        let tr = m.forward_eval(&x, Some("t")).unwrap();
        assert_eq!(tr.num_layers(), 2);
        assert!(tr.activations.iter().all(|a| a.as_slice().iter().all(|v| *v == 0.0)));
        assert!(tr.logits.unwrap().as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn relu_identity_layer_clamps_negative_input() {
        let mut m = Model::new(cfg(1, 1, 1, Activation::Relu, 0.0)).unwrap();
        m.unflatten(&vec![1.0, 0.0].into()).unwrap();
        let x = Mat64::from_vec(1, 1, vec![-2.0]).unwrap();
        assert_eq!(m.forward_eval(&x, None).unwrap().encoding().as_slice(), &[0.0]);
    }

    #[test]
    fn eval_is_deterministic_and_ignores_rng() {
        let m = Model::new(cfg(4, 6, 3, Activation::Tanh, 0.5)).unwrap();
        let x = batch(7, 4, &mut Rng::new(3));
        let a = m.forward(&x, None, Mode::Eval, &mut Rng::new(1)).unwrap();
        let b = m.forward(&x, None, Mode::Eval, &mut Rng::new(99)).unwrap();
        assert_eq!(a, b);
        assert!(a.masks.iter().all(Option::is_none));
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        let m = Model::new(cfg(4, 6, 3, Activation::Relu, 0.0)).unwrap();
        let x = batch(7, 4, &mut Rng::new(3));
        let a = m.forward(&x, None, Mode::Train, &mut Rng::new(1)).unwrap();
        let b = m.forward_eval(&x, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn replay_reproduces_dropout_trace() {
        let mut m = Model::new(cfg(4, 8, 3, Activation::Tanh, 0.3)).unwrap();
        m.register_head("h", 2, &mut Rng::new(5)).unwrap();
        let x = batch(6, 4, &mut Rng::new(4));
        let t = m.forward(&x, Some("h"), Mode::Train, &mut Rng::new(8)).unwrap();
        assert!(t.masks.iter().all(Option::is_some));
        assert_eq!(m.replay(&t).unwrap(), t);
    }

    #[test]
    fn register_head_bookkeeping() {
        let mut m = Model::new(cfg(5, 32, 2, Activation::Tanh, 0.0)).unwrap();
        let base = m.num_parameters();
        let mut rng = Rng::new(0);
        m.register_head("nli", 3, &mut rng).unwrap();
        assert_eq!(m.num_parameters(), base + 33 * 3);
        m.register_head("aux-cls", 2, &mut rng).unwrap();
        assert_eq!(m.num_parameters(), base + 33 * 3 + 33 * 2);
        assert!(matches!(m.register_head("nli", 3, &mut rng), Err(Error::DuplicateHead(_))));
        assert_eq!(m.head_range("aux-cls").unwrap(), base + 99..base + 165);

        let mut a = Model::new(cfg(5, 32, 2, Activation::Tanh, 0.0)).unwrap();
        let mut b = a.clone();
        a.register_head("x", 4, &mut Rng::new(3)).unwrap();
        b.register_head("x", 4, &mut Rng::new(3)).unwrap();
        assert_eq!(a.flatten(), b.flatten());
    }

    #[test]
    fn forward_errors() {
        let m = Model::new(cfg(3, 4, 1, Activation::Tanh, 0.0)).unwrap();
        let x = batch(2, 3, &mut Rng::new(0));
        assert!(matches!(m.forward_eval(&x, Some("nope")), Err(Error::UnknownHead(_))));
        let bad = batch(2, 4, &mut Rng::new(0));
        assert!(matches!(m.forward_eval(&bad, None), Err(Error::LengthMismatch { .. })));
        assert!(Model::new(cfg(3, 4, 0, Activation::Tanh, 0.0)).is_err());
        assert!(Model::new(cfg(3, 4, 1, Activation::Tanh, 1.0)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut m = Model::new(cfg(3, 5, 2, Activation::Tanh, 0.0)).unwrap();
        m.register_head("h", 3, &mut Rng::new(0)).unwrap();
        let x = batch(4, 3, &mut Rng::new(1));
        let t = m.forward_eval(&x, Some("h")).unwrap();
        let zl = Mat64::zeros(4, 3);
        let g = m.backward(&t, Upstream { logits: Some(&zl), encoding: None }).unwrap();
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_linear_unit_squared_error_gradient() {
        // relu with positive pre-activation acts as identity: y = w x + b.
        let mut m = Model::new(cfg(1, 1, 1, Activation::Relu, 0.0)).unwrap();
        m.unflatten(&vec![0.5, 0.25].into()).unwrap();
        let x = Mat64::from_vec(1, 1, vec![2.0]).unwrap();
        let t = m.forward_eval(&x, None).unwrap();
        let y = t.encoding().get(0, 0);
        assert_eq!(y, 1.25);
        // L = (y - 3)^2, dL/dy = 2 (y - 3) = -3.5, dL/dw = -3.5 * x, dL/db = -3.5
        let up = Mat64::from_vec(1, 1, vec![2.0 * (y - 3.0)]).unwrap();
        let g = m.backward(&t, Upstream { logits: None, encoding: Some(&up) }).unwrap();
        assert_eq!(g.as_slice(), &[-7.0, -3.5]);
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut m = Model::new(cfg(2, 3, 1, Activation::Tanh, 0.0)).unwrap();
        let x = batch(2, 2, &mut Rng::new(0));
        let t = m.forward_eval(&x, None).unwrap();
        let p = m.flatten();
        m.unflatten(&p).unwrap();
        let up = Mat64::zeros(2, 3);
        assert!(matches!(
            m.backward(&t, Upstream { logits: None, encoding: Some(&up) }),
            Err(Error::StaleTrace { .. })
        ));
    }

    #[test]
    fn random_two_layer_ce_matches_finite_differences() {
        let mut rng = Rng::new(21);
        let mut m = Model::new(cfg(4, 6, 2, Activation::Tanh, 0.0)).unwrap();
        m.register_head("h", 3, &mut rng).unwrap();
        let x = batch(5, 4, &mut rng);
        let labels = [0, 2, 1, 1, 0];
        let t = m.forward_eval(&x, Some("h")).unwrap();
        let (_, gl) = batch_cross_entropy(t.logits.as_ref().unwrap(), &labels).unwrap();
        let g = m.backward(&t, Upstream { logits: Some(&gl), encoding: None }).unwrap();
        let loss = |p: &[f64]| {
            let mm = m.with_parameters(&p.to_vec().into()).unwrap();
            let t = mm.forward_eval(&x, Some("h")).unwrap();
            batch_cross_entropy(t.logits.as_ref().unwrap(), &labels).unwrap().0
        };
        let r = finite_diff_check(loss, m.flatten().as_slice(), g.as_slice(), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn dropout_gradient_is_exact_under_stored_masks() {
        let mut rng = Rng::new(5);
        let mut m = Model::new(cfg(3, 5, 3, Activation::Tanh, 0.4)).unwrap();
        m.register_head("h", 2, &mut rng).unwrap();
        let x = batch(4, 3, &mut rng);
        let labels = [0, 1, 1, 0];
        let t = m.forward(&x, Some("h"), Mode::Train, &mut rng).unwrap();
        let (_, gl) = batch_cross_entropy(t.logits.as_ref().unwrap(), &labels).unwrap();
        let g = m.backward(&t, Upstream { logits: Some(&gl), encoding: None }).unwrap();
        let loss = |p: &[f64]| {
            let mm = m.with_parameters(&p.to_vec().into()).unwrap();
            let mut tt = t.clone();
            tt.version = mm.version;
            let r = mm.replay(&tt).unwrap();
            batch_cross_entropy(r.logits.as_ref().unwrap(), &labels).unwrap().0
        };
        let r = finite_diff_check(loss, m.flatten().as_slice(), g.as_slice(), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn flatten_unflatten_roundtrip(seed in 0u64..1000, layers in 1usize..4, hidden in 1usize..8) {
            let mut m = Model::new(cfg(3, hidden, layers, Activation::Tanh, 0.0)).unwrap();
            m.register_head("a", 2, &mut Rng::new(seed)).unwrap();
            let mut rng = Rng::new(seed);
            let v: ParameterVector = (0..m.num_parameters()).map(|_| rng.normal()).collect();
            m.unflatten(&v).unwrap();
            prop_assert_eq!(m.flatten(), v);
        }
    }
}
