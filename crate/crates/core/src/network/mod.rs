//! Model assembly, forward pass, training and evaluation.

mod checkpoint;
mod config;
mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{CapsSpec, ModelConfig, TrainConfig};
pub use optim::{AdamW, LrSchedule};

use crate::capsule::{capsule_layer_on, primary_capsules_on, CapsLayerVars, PrimaryVars, RoutingReport, RoutingState};
use crate::equivariant::{residual_block_on, BlockVars, ConvOptions};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Layout(Vec<ParamSpec>);

impl Layout {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, group: bool, k: usize) {
        let (shape, fan_in) = if group {
            (vec![cout, cin, 4, k, k], cin * 4 * k * k)
        } else {
            (vec![cout, cin, k, k], cin * k * k)
        };
        self.add(format!("{name}.w"), shape, Init::Uniform { fan_in });
        self.add(format!("{name}.b"), vec![cout], Init::Zeros);
    }
}

/// Parameters in forward order. Group filters count the rotation axis in
/// their fan-in.
pub fn param_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut v = Layout::default();
    let k = cfg.kernel;
    v.conv("stem", cfg.widths[0], cfg.image_channels, false, k);
    let mut width = cfg.widths[0];
    for (i, (&w, &s)) in cfg.widths.iter().zip(&cfg.strides).enumerate() {
        v.conv(&format!("block{i}.conv1"), w, width, true, k);
        v.conv(&format!("block{i}.conv2"), w, w, true, k);
        if w != width || s != 1 {
            v.conv(&format!("block{i}.shortcut"), w, width, true, 1);
        }
        width = w;
    }
    let p = cfg.primary;
    v.conv("primary", p.types * p.dim, width, true, k);
    v.add("primary.ln.gain".into(), vec![p.types, p.dim], Init::Ones);
    v.add("primary.ln.bias".into(), vec![p.types, p.dim], Init::Zeros);
    let mut prev = p;
    for (l, spec) in cfg.capsule_layers().iter().enumerate() {
        let name = format!("caps{l}");
        v.conv(&name, prev.types * spec.types * spec.dim, prev.dim, true, k);
        let affine = vec![prev.types, spec.types, spec.dim];
        v.add(format!("{name}.ln.gain"), affine.clone(), Init::Ones);
        v.add(format!("{name}.ln.bias"), affine, Init::Zeros);
        prev = *spec;
    }
    v.add(
        "logits.w".into(),
        vec![cfg.classes, cfg.class_dim],
        Init::Uniform { fan_in: cfg.class_dim },
    );
    v.add("logits.b".into(), vec![cfg.classes], Init::Zeros);
    v.0
}

/// Named intermediate representations of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// `(layer name, batched value)` in forward order, ending with logits.
    pub layers: Vec<(String, Tensor)>,
    /// One routing state per capsule layer, batched.
    pub routing: Vec<RoutingState>,
}

impl Trace {
    pub fn layer(&self, name: &str) -> Option<&Tensor> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Invariant measurements taken during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Diagnostics {
    pub routing: RoutingReport,
    /// Largest post-squash capsule norm over all capsule layers.
    pub max_capsule_norm: f64,
}

impl Default for Diagnostics {
    fn default() -> Self {
        Self {
            routing: RoutingReport {
                neighbours_valid: true,
                ..Default::default()
            },
            max_capsule_norm: 0.0,
        }
    }
}

impl Diagnostics {
    pub fn merge(&mut self, other: &Diagnostics) {
        self.routing.merge(&other.routing);
        self.max_capsule_norm = self.max_capsule_norm.max(other.max_capsule_norm);
    }

    /// Checks row sums, symmetry, unit diagonals and neighbour ids within
    /// `tol`, and capsule norms strictly below one.
    pub fn check(&self, tol: f64) -> Result<()> {
        if !self.routing.within(tol) {
            return Err(Error::Invariant(format!("routing {:?}", self.routing)));
        }
        if !(self.max_capsule_norm < 1.0) {
            return Err(Error::Invariant(format!(
                "capsule norm {} not below 1",
                self.max_capsule_norm
            )));
        }
        Ok(())
    }
}

struct Forward {
    logits: Var,
    params: Vec<Var>,
    layers: Vec<(String, Var)>,
    routing: Vec<RoutingState>,
    capsules: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    seed: u64,
}

/// Loss, parameter gradients and diagnostics of one batch.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub diagnostics: Diagnostics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub mean_loss: f64,
    pub samples: usize,
}

impl Model {
    /// Initialises parameters deterministically from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = param_layout(&config);
        let mut names = Vec::with_capacity(layout.len());
        let mut params = Vec::with_capacity(layout.len());
        for spec in layout {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, 1.0),
                Init::Uniform { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let mut t = Tensor::zeros(&spec.shape);
                    t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
                    t
                }
            };
            names.push(spec.name);
            params.push(t);
        }
        Ok(Self {
            config,
            names,
            params,
            seed,
        })
    }

    /// Reassembles a model from stored parameters, checking names and shapes
    /// against the configuration.
    pub fn from_parts(config: ModelConfig, seed: u64, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != named.len() {
            return Err(Error::Config(format!(
                "{} parameters given, configuration needs {}",
                named.len(),
                layout.len()
            )));
        }
        for (spec, (name, t)) in layout.iter().zip(&named) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        let (names, params) = named.into_iter().unzip();
        Ok(Self {
            config,
            names,
            params,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Same parameters under a different configuration with identical
    /// parameter shapes (e.g. [`ModelConfig::audit_mode`]).
    pub fn with_config(&self, config: ModelConfig) -> Result<Self> {
        Self::from_parts(
            config,
            self.seed,
            self.names.iter().cloned().zip(self.params.iter().cloned()).collect(),
        )
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.config.image_channels || s[0] == 0 {
            return Err(Error::shape(
                "forward",
                format!("expected (batch, {}, row, col), got {s:?}", self.config.image_channels),
            ));
        }
        if s[2] != s[3] {
            return Err(Error::shape("forward", format!("images must be square, got {s:?}")));
        }
        Ok(())
    }

    fn forward_on(&self, tape: &mut Tape, x: &Tensor, trainable: bool) -> Result<Forward> {
        self.check_input(x)?;
        let cfg = &self.config;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("parameter layout exhausted");
        let mut layers = Vec::new();
        let x = tape.constant(x.clone());
        let tag = |stage: &str| {
            let stage = stage.to_string();
            move |e: Error| match e {
                Error::NonFinite { stage: op } => Error::NonFinite {
                    stage: format!("{stage}/{op}"),
                },
                e => e,
            }
        };

        let (w, b) = (take(), take());
        let h = tape
            .lift_correlate(x, w, Some(b), ConvOptions::same(cfg.kernel, cfg.boundary))
            .map_err(tag("stem"))?;
        let mut h = tape.relu(h).map_err(tag("stem"))?;
        layers.push(("stem".to_string(), h));
        let mut width = cfg.widths[0];
        let strides = cfg.effective_strides();
        for (i, (&wd, &s)) in cfg.widths.iter().zip(&cfg.strides).enumerate() {
            let (w1, b1, w2, b2) = (take(), take(), take(), take());
            let shortcut = (wd != width || s != 1).then(|| (take(), take()));
            let s = strides[i];
            let vars = BlockVars {
                w1,
                b1,
                w2,
                b2,
                shortcut,
            };
            let name = format!("block{i}");
            h = residual_block_on(tape, h, &vars, s, cfg.boundary).map_err(tag(&name))?;
            layers.push((name, h));
            width = wd;
        }
        let pv = PrimaryVars {
            w: take(),
            b: take(),
            gain: take(),
            beta: take(),
        };
        let mut caps = primary_capsules_on(tape, h, &pv, cfg.primary.types, cfg.primary.dim, cfg.boundary)
            .map_err(tag("primary"))?;
        layers.push(("primary".to_string(), caps));
        let mut routing = Vec::new();
        let mut capsules = Vec::new();
        for (l, (spec, rc)) in cfg.capsule_layers().iter().zip(&cfg.routing).enumerate() {
            let (w, b, g, beta) = (take(), take(), take(), take());
            let vars = CapsLayerVars {
                w,
                b,
                norm: rc.use_pred_layernorm.then_some((g, beta)),
            };
            let name = if l == cfg.hidden.len() {
                "class".to_string()
            } else {
                format!("caps{l}")
            };
            let (out, pred, state) =
                capsule_layer_on(tape, caps, &vars, spec.types, spec.dim, rc, cfg.boundary).map_err(tag(&name))?;
            layers.push((format!("{name}.pred"), pred));
            layers.push((name, out));
            routing.push(state);
            capsules.push(out);
            caps = out;
        }
        let (w, b) = (take(), take());
        let logits = tape.project_logits(caps, w, b).map_err(tag("logits"))?;
        layers.push(("logits".to_string(), logits));
        Ok(Forward {
            logits,
            params,
            layers,
            routing,
            capsules,
        })
    }

    fn diagnostics(tape: &Tape, fwd: &Forward) -> Diagnostics {
        let mut d = Diagnostics::default();
        for s in &fwd.routing {
            d.routing.merge(&s.report());
        }
        for &c in &fwd.capsules {
            d.max_capsule_norm = d.max_capsule_norm.max(max_norm_axis2(tape.value(c)));
        }
        d
    }

    /// Logits `(batch, classes)` for images `(batch, channels, row, col)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward_on(&mut tape, x, false)?;
        Ok(tape.value(f.logits).clone())
    }

    /// Forward pass that keeps every layer output and routing state.
    pub fn forward_traced(&self, x: &Tensor) -> Result<Trace> {
        let mut tape = Tape::new();
        let f = self.forward_on(&mut tape, x, false)?;
        Ok(Trace {
            layers: f
                .layers
                .iter()
                .map(|(n, v)| (n.clone(), tape.value(*v).clone()))
                .collect(),
            routing: f.routing,
        })
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    pub fn gradients(&self, x: &Tensor, labels: &[usize]) -> Result<Gradients> {
        self.check_labels(x, labels)?;
        let mut tape = Tape::new();
        let f = self.forward_on(&mut tape, x, true)?;
        let diagnostics = Self::diagnostics(&tape, &f);
        let loss = tape.cross_entropy(f.logits, labels)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { stage: "loss".into() });
        }
        let mut g = tape.backward(loss)?;
        let grads = f
            .params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| g.take(v).unwrap_or_else(|| p.zeros_like()))
            .collect();
        Ok(Gradients {
            loss: value,
            grads,
            diagnostics,
        })
    }

    /// Mean cross-entropy of a batch without gradients.
    pub fn loss(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        self.check_labels(x, labels)?;
        let mut tape = Tape::new();
        let f = self.forward_on(&mut tape, x, false)?;
        let loss = tape.cross_entropy(f.logits, labels)?;
        Ok(tape.value(loss).item())
    }

    fn check_labels(&self, x: &Tensor, labels: &[usize]) -> Result<()> {
        if x.shape().first() != Some(&labels.len()) {
            return Err(Error::shape(
                "labels",
                format!("{} labels for batch {:?}", labels.len(), x.shape()),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.config.classes) {
            return Err(Error::Config(format!(
                "label {l} out of range for {} classes",
                self.config.classes
            )));
        }
        Ok(())
    }

    /// One optimiser step on a batch; returns the pre-update loss.
    pub fn train_step(&mut self, x: &Tensor, labels: &[usize], opt: &mut AdamW, lr: f64) -> Result<StepOutcome> {
        let g = self.gradients(x, labels)?;
        opt.step(&mut self.params, &g.grads, lr)?;
        Ok(StepOutcome {
            loss: g.loss,
            diagnostics: g.diagnostics,
        })
    }

    /// Accuracy, per-class accuracy and mean loss over `(images, labels)`,
    /// processed in chunks of `batch`.
    pub fn evaluate(&self, images: &Tensor, labels: &[usize], batch: usize) -> Result<Evaluation> {
        let n = labels.len();
        let mut logits = Vec::with_capacity(n);
        for start in (0..n).step_by(batch.max(1)) {
            let end = (start + batch.max(1)).min(n);
            let x = slice_batch(images, start, end)?;
            let l = self.forward(&x)?;
            logits.extend((0..end - start).map(|i| l.index_axis0(i).into_data()));
        }
        Ok(score_logits(&logits, labels, self.config.classes))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutcome {
    pub loss: f64,
    pub diagnostics: Diagnostics,
}

/// Accuracy, per-class accuracy and mean cross-entropy of precomputed logits.
/// Ties in the argmax go to the lowest class.
pub fn score_logits(logits: &[Vec<f64>], labels: &[usize], classes: usize) -> Evaluation {
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    let mut loss = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let mut best = 0;
        for (c, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = c;
            }
        }
        counts[y] += 1;
        if best == y {
            hits[y] += 1;
        }
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    let n = labels.len();
    Evaluation {
        accuracy: if n == 0 {
            0.0
        } else {
            hits.iter().sum::<usize>() as f64 / n as f64
        },
        per_class: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
            .collect(),
        mean_loss: if n == 0 { 0.0 } else { loss / n as f64 },
        samples: n,
    }
}

/// Rows `start..end` along the first axis.
pub fn slice_batch(t: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.is_empty() || start > end || end > s[0] {
        return Err(Error::shape("slice_batch", format!("{start}..{end} of {s:?}")));
    }
    let row: usize = s[1..].iter().product();
    let mut shape = s.to_vec();
    shape[0] = end - start;
    Tensor::new(shape, t.data()[start * row..end * row].to_vec())
}

/// Largest norm of vectors along axis 2 of `(batch, types, dim, ...)`.
fn max_norm_axis2(t: &Tensor) -> f64 {
    let s = t.shape();
    let dim = s[2];
    let inner: usize = s[3..].iter().product();
    let outer = s[0] * s[1];
    let v = t.data();
    let mut best: f64 = 0.0;
    for o in 0..outer {
        for p in 0..inner {
            let n2: f64 = (0..dim).map(|d| v[(o * dim + d) * inner + p].powi(2)).sum();
            best = best.max(n2);
        }
    }
    best.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::desk(3);
        c.widths = vec![2; 7];
        c.primary = CapsSpec::new(3, 2);
        c.hidden = vec![CapsSpec::new(3, 2)];
        c.class_dim = 2;
        for r in &mut c.routing {
            r.k = 2;
        }
        c
    }

    #[test]
    fn builds_are_deterministic() {
        let a = Model::build(tiny(), 5).unwrap();
        let b = Model::build(tiny(), 5).unwrap();
        let c = Model::build(tiny(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn forward_shapes_and_trace() {
        let m = Model::build(tiny(), 1).unwrap();
        let x = Tensor::full(&[2, 1, 8, 8], 0.5);
        assert_eq!(m.forward(&x).unwrap().shape(), &[2, 3]);
        let t = m.forward_traced(&x).unwrap();
        assert_eq!(t.layer("primary").unwrap().shape(), &[2, 3, 2, 4, 2, 2]);
        assert_eq!(t.layer("class").unwrap().shape(), &[2, 3, 2, 4, 2, 2]);
        assert_eq!(t.routing.len(), 2);
        assert!(m.forward(&Tensor::zeros(&[1, 2, 8, 8])).is_err());
    }

    #[test]
    fn zero_weights_leave_projection_bias() {
        let mut m = Model::build(tiny(), 1).unwrap();
        let names = m.names().to_vec();
        for (n, p) in names.iter().zip(m.params_mut()) {
            let v = if n == "logits.b" { None } else { Some(0.0) };
            if let Some(v) = v {
                p.data_mut().iter_mut().for_each(|x| *x = v);
            } else {
                p.data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
            }
        }
        let out = m.forward(&Tensor::full(&[1, 1, 8, 8], 0.3)).unwrap();
        assert_eq!(out.data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn scoring_counts_argmax() {
        let logits = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 1.0]];
        let e = score_logits(&logits, &[0, 1, 1], 2);
        assert!((e.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(e.per_class, vec![1.0, 0.5]);
    }

    #[test]
    fn bad_labels_rejected() {
        let m = Model::build(tiny(), 1).unwrap();
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(m.gradients(&x, &[3]).is_err());
        assert!(m.gradients(&x, &[0, 1]).is_err());
    }
}
