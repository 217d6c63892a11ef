//! Losses, optimizers, gradient clipping and the full-sequence BPTT training
//! driver for the desk-scale tasks.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::cells::{backward_sequence, forward_sequence, Activation, CellKind, CellParams, CellWeights, GradientSet, Trajectory};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tasks::{
    charlm_tiles, charlm_window, check_corpus, copy_input_width, gen_adding, gen_copy, gen_toy_sentiment, Target, TaskId,
    TaskInput, TaskInstance, BYTE_VOCAB, TOYSENT_VOCAB,
};
use crate::tensor::{gemm_acc, Matrix, Real};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_CLIP_NORM: f64 = 5.0;

/// Anything that exposes an ordered list of trainable tensors.
pub trait Parameters<T: Real> {
    fn tensors(&self) -> Vec<&Matrix<T>>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>>;
}

impl<T: Real> Parameters<T> for CellWeights<T> {
    fn tensors(&self) -> Vec<&Matrix<T>> {
        self.entries().map(|(_, m)| m).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        self.entries_mut().map(|(_, m)| m).collect()
    }
}

impl<T: Real> Parameters<T> for CellParams<T> {
    fn tensors(&self) -> Vec<&Matrix<T>> {
        self.weights.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        self.weights.tensors_mut()
    }
}

/// Only the parameter gradients count; `dx` is not a parameter.
impl<T: Real> Parameters<T> for GradientSet<T> {
    fn tensors(&self) -> Vec<&Matrix<T>> {
        self.weights.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        self.weights.tensors_mut()
    }
}

pub fn global_norm<T: Real, P: Parameters<T>>(p: &P) -> T {
    p.tensors().iter().map(|m| m.sum_squares()).fold(T::zero(), |a, b| a + b).sqrt()
}

/// Rescales all gradients so their global ℓ2 norm is at most `limit`.
/// Returns the applied scale (1 when nothing was clipped).
pub fn clip_by_global_norm<T: Real, P: Parameters<T>>(mut grads: P, limit: T) -> Result<(P, T)> {
    if !(limit > T::zero()) {
        return Err(Error::InvalidArgument("clip limit must be > 0".to_string()));
    }
    let norm = global_norm(&grads);
    if norm <= limit {
        return Ok((grads, T::one()));
    }
    let scale = limit / norm;
    for m in grads.tensors_mut() {
        for v in m.data_mut() {
            *v = *v * scale;
        }
    }
    Ok((grads, scale))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::Unknown {
                what: "optimizer",
                value: s.to_string(),
            }),
        }
    }
}

/// Optimizer hyper-parameters and per-parameter moments. Moments are shaped
/// on the first update and checked on every later one.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f64> {
    pub kind: OptimizerKind,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, lr: T) -> Self {
        Self {
            kind,
            lr,
            beta1: T::lit(ADAM_BETA1),
            beta2: T::lit(ADAM_BETA2),
            eps: T::lit(ADAM_EPS),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn sgd(lr: T) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: T) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Matrix<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Matrix<T>] {
        &self.v
    }

    /// One update with whichever rule `kind` selects.
    pub fn update<P: Parameters<T>, G: Parameters<T>>(&mut self, params: &mut P, grads: &G) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => sgd_update(params, grads, self),
            OptimizerKind::Adam => adam_update(params, grads, self),
        }
    }
}

fn paired<'a, T: Real>(params: Vec<&'a mut Matrix<T>>, grads: Vec<&'a Matrix<T>>) -> Result<Vec<(&'a mut Matrix<T>, &'a Matrix<T>)>> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    params
        .into_iter()
        .zip(grads)
        .map(|(p, g)| {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "optimizer update",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            Ok((p, g))
        })
        .collect()
}

pub fn sgd_update<T: Real, P: Parameters<T>, G: Parameters<T>>(params: &mut P, grads: &G, state: &mut OptimizerState<T>) -> Result<()> {
    let pairs = paired(params.tensors_mut(), grads.tensors())?;
    for (p, g) in pairs {
        for (w, &dw) in p.data_mut().iter_mut().zip(g.data()) {
            *w = *w - state.lr * dw;
        }
    }
    state.step += 1;
    Ok(())
}

/// Bias-corrected Adam step.
pub fn adam_update<T: Real, P: Parameters<T>, G: Parameters<T>>(params: &mut P, grads: &G, state: &mut OptimizerState<T>) -> Result<()> {
    let pairs = paired(params.tensors_mut(), grads.tensors())?;
    if state.m.is_empty() {
        state.m = pairs.iter().map(|(p, _)| Matrix::zeros(p.rows(), p.cols())).collect();
        state.v = state.m.clone();
    } else if state.m.len() != pairs.len() || state.m.iter().zip(&pairs).any(|(m, (p, _))| m.shape() != p.shape()) {
        return Err(Error::InvalidArgument("parameters do not match the optimizer moments".to_string()));
    }
    state.step += 1;
    let one = T::one();
    let t = state.step as i32;
    let c1 = one - state.beta1.powi(t);
    let c2 = one - state.beta2.powi(t);
    for ((p, g), (m, v)) in pairs.into_iter().zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
        for (((w, &dw), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (one - b1) * dw;
            *vi = b2 * *vi + (one - b2) * dw * dw;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Softmax cross-entropy of one row of logits, with the gradient
/// `softmax − onehot`.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if logits.len() < 2 {
        return Err(Error::InvalidArgument("softmax needs at least two classes".to_string()));
    }
    if label >= logits.len() {
        return Err(Error::OutOfRange {
            what: "class label",
            index: label,
            len: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut probs: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = probs.iter().copied().fold(T::zero(), |a, b| a + b);
    let loss = sum.ln() - (logits[label] - max);
    for p in &mut probs {
        *p = *p / sum;
    }
    probs[label] = probs[label] - T::one();
    Ok((loss, probs))
}

/// Mean squared error over the row and its gradient `2(p − y)/k`.
pub fn mse_loss<T: Real>(pred: &[T], target: &[T]) -> Result<(T, Vec<T>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape {
            op: "mse",
            left: (1, pred.len()),
            right: (1, target.len()),
        });
    }
    let k = T::lit(pred.len() as f64);
    let diff: Vec<T> = pred.iter().zip(target).map(|(&p, &y)| p - y).collect();
    let loss = diff.iter().fold(T::zero(), |a, &e| a + e * e) / k;
    let two = T::lit(2.0);
    Ok((loss, diff.into_iter().map(|e| two * e / k).collect()))
}

/// How a model consumes its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputSpec {
    Features(usize),
    Tokens { vocab: usize, dim: usize },
}

impl InputSpec {
    pub fn width(self) -> usize {
        match self {
            Self::Features(w) => w,
            Self::Tokens { dim, .. } => dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub kind: CellKind,
    pub activation: Activation,
    pub input: InputSpec,
    pub d: usize,
    pub layers: usize,
    pub outputs: usize,
}

/// Optional embedding, a stack of cells fed forward layer by layer, and a
/// linear read-out head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f64> {
    config: ModelConfig,
    pub embedding: Option<Matrix<T>>,
    pub cells: Vec<CellParams<T>>,
    pub head_w: Matrix<T>,
    pub head_b: Matrix<T>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ModelTrace<T = f64> {
    pub trajectories: Vec<Trajectory<T>>,
    pub positions: Vec<usize>,
    head_in: Matrix<T>,
    /// One row of head outputs per read-out position.
    pub outputs: Matrix<T>,
}

/// Loss and accuracy bookkeeping for one example.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ExampleScore {
    /// Mean loss over the example's targets.
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        if config.d == 0 || config.layers == 0 || config.outputs == 0 || config.input.width() == 0 {
            return Err(Error::InvalidArgument("model dimensions must be >= 1".to_string()));
        }
        let embedding = match config.input {
            InputSpec::Features(_) => None,
            InputSpec::Tokens { vocab, dim } => Some(Matrix::uniform(vocab, dim, -0.1, 0.1, rng)),
        };
        let cells = (0..config.layers)
            .map(|l| {
                let d_in = if l == 0 { config.input.width() } else { config.d };
                CellParams::new(config.kind, config.activation, d_in, config.d, rng)
            })
            .collect::<Result<_>>()?;
        let head_w = Matrix::glorot_uniform(config.d, config.outputs, rng);
        let head_b = Matrix::zeros(1, config.outputs);
        Ok(Self {
            config,
            embedding,
            cells,
            head_w,
            head_b,
        })
    }

    /// Assembles a model from stored parts, validating every shape.
    pub fn from_parts(
        config: ModelConfig,
        embedding: Option<Matrix<T>>,
        cells: Vec<CellParams<T>>,
        head_w: Matrix<T>,
        head_b: Matrix<T>,
    ) -> Result<Self> {
        let bad = |what: &str| Err(Error::InvalidArgument(alloc::format!("model parts disagree: {what}")));
        match (config.input, &embedding) {
            (InputSpec::Features(_), None) => {}
            (InputSpec::Tokens { vocab, dim }, Some(e)) if e.shape() == (vocab, dim) => {}
            _ => return bad("embedding"),
        }
        if cells.len() != config.layers {
            return bad("layer count");
        }
        for (l, c) in cells.iter().enumerate() {
            let d_in = if l == 0 { config.input.width() } else { config.d };
            if c.kind() != config.kind || c.activation() != config.activation || c.d() != config.d || c.d_in() != d_in {
                return bad("cell layout");
            }
        }
        if head_w.shape() != (config.d, config.outputs) || head_b.shape() != (1, config.outputs) {
            return bad("head");
        }
        Ok(Self {
            config,
            embedding,
            cells,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            embedding: self.embedding.as_ref().map(|e| Matrix::zeros(e.rows(), e.cols())),
            cells: self
                .cells
                .iter()
                .map(|c| {
                    CellParams::from_weights(c.kind(), c.activation(), c.d_in(), c.d(), c.weights.zeros_like())
                        .expect("same layout")
                })
                .collect(),
            head_w: Matrix::zeros(self.head_w.rows(), self.head_w.cols()),
            head_b: Matrix::zeros(1, self.head_b.cols()),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|m| m.data().len()).sum()
    }

    /// Sets every `b_q` entry to `value`.
    pub fn fill_forget_bias(&mut self, value: T) {
        for c in &mut self.cells {
            if let Some(b) = c.weights.b_q.as_mut() {
                b.data_mut().iter_mut().for_each(|v| *v = value);
            }
        }
    }

    /// Sets every `b_k` entry to `value`.
    pub fn fill_input_bias(&mut self, value: T) {
        for c in &mut self.cells {
            if let Some(b) = c.weights.b_k.as_mut() {
                b.data_mut().iter_mut().for_each(|v| *v = value);
            }
        }
    }

    /// Input matrix of the first layer.
    pub fn embed(&self, input: &TaskInput<T>) -> Result<Matrix<T>> {
        match (input, &self.embedding) {
            (TaskInput::Features(x), None) => {
                if x.cols() != self.config.input.width() {
                    return Err(Error::Shape {
                        op: "model input",
                        left: x.shape(),
                        right: (x.rows(), self.config.input.width()),
                    });
                }
                Ok(x.clone())
            }
            (TaskInput::Tokens(ids), Some(table)) => {
                let mut x = Matrix::zeros(ids.len(), table.cols());
                for (t, &id) in ids.iter().enumerate() {
                    if id >= table.rows() {
                        return Err(Error::OutOfRange {
                            what: "token id",
                            index: id,
                            len: table.rows(),
                        });
                    }
                    x.row_mut(t).copy_from_slice(table.row(id));
                }
                Ok(x)
            }
            _ => Err(Error::InvalidArgument("input kind does not match the model".to_string())),
        }
    }

    /// Runs every layer and the head at `positions`.
    pub fn forward(&self, input: &TaskInput<T>, positions: &[usize]) -> Result<ModelTrace<T>> {
        let mut x = self.embed(input)?;
        let n = x.rows();
        if let Some(&p) = positions.iter().find(|&&p| p >= n) {
            return Err(Error::OutOfRange {
                what: "read-out position",
                index: p,
                len: n,
            });
        }
        let mut trajectories = Vec::with_capacity(self.cells.len());
        for cell in &self.cells {
            let traj = forward_sequence(cell, &x, None)?;
            x = traj.hidden_matrix();
            trajectories.push(traj);
        }
        let d = self.config.d;
        let mut head_in = Matrix::zeros(positions.len(), d);
        for (r, &p) in positions.iter().enumerate() {
            head_in.row_mut(r).copy_from_slice(x.row(p));
        }
        let c = self.config.outputs;
        let mut outputs = Matrix::zeros(positions.len(), c).add_row(&self.head_b)?;
        gemm_acc(head_in.data(), self.head_w.data(), outputs.data_mut(), positions.len(), d, c);
        Ok(ModelTrace {
            trajectories,
            positions: positions.to_vec(),
            head_in,
            outputs,
        })
    }

    /// Loss, score and `∂L/∂outputs` of a finished forward pass.
    fn head_loss(&self, trace: &ModelTrace<T>, target: &Target<T>) -> Result<(ExampleScore, Matrix<T>)> {
        let rows = trace.outputs.rows();
        let mut d_out = Matrix::zeros(rows, trace.outputs.cols());
        let mut score = ExampleScore::default();
        match target {
            Target::Classes(pairs) => {
                let scale = T::one() / T::lit(rows as f64);
                let mut total = 0.0;
                for (r, &(_, class)) in pairs.iter().enumerate() {
                    let logits = trace.outputs.row(r);
                    let (loss, grad) = softmax_cross_entropy(logits, class)?;
                    total += loss.as_f64();
                    let argmax = (0..logits.len()).fold(0, |best, j| if logits[j] > logits[best] { j } else { best });
                    score.correct += (argmax == class) as usize;
                    for (dst, g) in d_out.row_mut(r).iter_mut().zip(grad) {
                        *dst = g * scale;
                    }
                }
                score.count = rows;
                score.loss = total / rows as f64;
            }
            Target::Regression { values, .. } => {
                let (loss, grad) = mse_loss(trace.outputs.row(0), values)?;
                d_out.row_mut(0).copy_from_slice(&grad);
                score.loss = loss.as_f64();
                score.count = 1;
            }
        }
        Ok((score, d_out))
    }

    pub fn evaluate_example(&self, inst: &TaskInstance<T>) -> Result<ExampleScore> {
        let trace = self.forward(&inst.input, &readout_positions(&inst.target))?;
        Ok(self.head_loss(&trace, &inst.target)?.0)
    }

    /// Exact gradients of the example loss with respect to every parameter.
    pub fn example_gradients(&self, inst: &TaskInstance<T>) -> Result<(ExampleScore, Model<T>)> {
        let trace = self.forward(&inst.input, &readout_positions(&inst.target))?;
        let (score, d_out) = self.head_loss(&trace, &inst.target)?;
        let mut grads = self.zeros_like();
        let (m, d, c) = (d_out.rows(), self.config.d, self.config.outputs);
        gemm_acc(trace.head_in.transpose().data(), d_out.data(), grads.head_w.data_mut(), d, m, c);
        grads.head_b = d_out.column_sums();
        let mut d_in = Matrix::zeros(m, d);
        gemm_acc(d_out.data(), self.head_w.transpose().data(), d_in.data_mut(), m, c, d);

        let n = trace.trajectories[0].len();
        let mut dh = Matrix::zeros(n, d);
        for (r, &p) in trace.positions.iter().enumerate() {
            for (dst, &g) in dh.row_mut(p).iter_mut().zip(d_in.row(r)) {
                *dst = *dst + g;
            }
        }
        for l in (0..self.cells.len()).rev() {
            let gs = backward_sequence(&self.cells[l], &trace.trajectories[l], &dh)?;
            grads.cells[l].weights = gs.weights;
            dh = gs.dx;
        }
        if let (Some(table), TaskInput::Tokens(ids)) = (grads.embedding.as_mut(), &inst.input) {
            for (t, &id) in ids.iter().enumerate() {
                for (dst, &g) in table.row_mut(id).iter_mut().zip(dh.row(t)) {
                    *dst = *dst + g;
                }
            }
        }
        Ok((score, grads))
    }

    /// Last-layer trajectory of an input, for inspection.
    pub fn top_trajectory(&self, input: &TaskInput<T>) -> Result<Trajectory<T>> {
        let mut trace = self.forward(input, &[])?;
        Ok(trace.trajectories.pop().expect("at least one layer"))
    }
}

impl<T: Real> Parameters<T> for Model<T> {
    fn tensors(&self) -> Vec<&Matrix<T>> {
        let mut out: Vec<&Matrix<T>> = self.embedding.iter().collect();
        for c in &self.cells {
            out.extend(c.tensors());
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out: Vec<&mut Matrix<T>> = self.embedding.iter_mut().collect();
        for c in &mut self.cells {
            out.extend(c.tensors_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }
}

pub fn readout_positions<T>(target: &Target<T>) -> Vec<usize> {
    match target {
        Target::Classes(pairs) => pairs.iter().map(|&(p, _)| p).collect(),
        Target::Regression { position, .. } => vec![*position],
    }
}

/// Runs per-example work over a batch, returning results in input order.
pub trait BatchEngine {
    fn map_examples<R, F>(&self, items: &[TaskInstance<f64>], f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(&TaskInstance<f64>) -> R + Sync + Send;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl BatchEngine for Sequential {
    fn map_examples<R, F>(&self, items: &[TaskInstance<f64>], f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(&TaskInstance<f64>) -> R + Sync + Send,
    {
        items.iter().map(f).collect()
    }
}

/// Aggregate over an evaluation set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub metric: f64,
}

/// Name of the headline metric of a task.
pub fn metric_name(task: TaskId) -> &'static str {
    match task {
        TaskId::Adding => "mse",
        TaskId::Copy | TaskId::ToySent => "accuracy",
        TaskId::CharLm => "nats_per_byte",
    }
}

pub fn higher_is_better(task: TaskId) -> bool {
    matches!(task, TaskId::Copy | TaskId::ToySent)
}

pub fn evaluate<E: BatchEngine>(model: &Model, task: TaskId, set: &[TaskInstance], engine: &E) -> Result<Evaluation> {
    let scores = engine.map_examples(set, |inst| model.evaluate_example(inst));
    let mut loss = 0.0;
    let (mut correct, mut count) = (0, 0);
    for s in scores {
        let s = s?;
        loss += s.loss;
        correct += s.correct;
        count += s.count;
    }
    let loss = loss / set.len().max(1) as f64;
    let metric = if higher_is_better(task) {
        correct as f64 / count.max(1) as f64
    } else {
        loss
    };
    Ok(Evaluation { loss, metric })
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: TaskId,
    pub cell: CellKind,
    pub activation: Activation,
    pub d: usize,
    pub layers: usize,
    pub batch: usize,
    pub max_steps: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub eval_interval: usize,
    pub eval_size: usize,
    /// Sequence length (adding, char-LM) or blank span (copy).
    pub seq_len: usize,
    pub copy_payload: usize,
    pub copy_alphabet: usize,
    /// Embedding width for token tasks.
    pub embed_dim: usize,
    pub optimizer: OptimizerKind,
    /// Stop at the first evaluation whose metric reaches this value.
    pub target_metric: Option<f64>,
    /// Initial value of the forget-gate bias `b_q` in every cell that has
    /// one. Defaults to 3 for the adding and copy tasks, whose targets sit
    /// behind long blank spans, and to 0 elsewhere.
    pub forget_bias: f64,
    /// Initial value of the input-gate bias `b_k` in every cell that has
    /// one. Defaults to -3 for toy sentiment, so a token has to earn an open
    /// input gate, and to 0 elsewhere.
    pub input_bias: f64,
}

impl TrainConfig {
    pub fn new(task: TaskId, cell: CellKind) -> Self {
        let seq_len = match task {
            TaskId::Adding => 100,
            TaskId::Copy => 50,
            TaskId::ToySent => 0,
            TaskId::CharLm => 128,
        };
        Self {
            task,
            cell,
            activation: cell.default_activation(),
            d: 64,
            layers: if task == TaskId::Copy { 2 } else { 1 },
            batch: 32,
            max_steps: 1000,
            lr: 1e-3,
            clip_norm: DEFAULT_CLIP_NORM,
            seed: 1,
            eval_interval: 100,
            eval_size: 256,
            seq_len,
            copy_payload: 5,
            copy_alphabet: 8,
            embed_dim: 32,
            optimizer: OptimizerKind::Adam,
            target_metric: None,
            forget_bias: match task {
                TaskId::Adding | TaskId::Copy => 3.0,
                TaskId::ToySent | TaskId::CharLm => 0.0,
            },
            input_bias: if task == TaskId::ToySent { -3.0 } else { 0.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d", self.d),
            ("layers", self.layers),
            ("batch", self.batch),
            ("max steps", self.max_steps),
            ("eval interval", self.eval_interval),
            ("eval size", self.eval_size),
            ("embedding width", self.embed_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(alloc::format!("{name} must be >= 1")));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument("clip norm must be > 0".to_string()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::InvalidArgument("learning rate must be >= 0".to_string()));
        }
        match self.task {
            TaskId::Adding if self.seq_len < 2 => Err(Error::InvalidArgument("adding task needs length >= 2".to_string())),
            TaskId::Copy if self.copy_payload == 0 || self.copy_alphabet < 2 => {
                Err(Error::InvalidArgument("copy task needs payload >= 1 and alphabet >= 2".to_string()))
            }
            TaskId::CharLm if self.seq_len == 0 => Err(Error::InvalidArgument("window length must be >= 1".to_string())),
            _ => Ok(()),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let (input, outputs) = match self.task {
            TaskId::Adding => (InputSpec::Features(2), 1),
            TaskId::Copy => (InputSpec::Features(copy_input_width(self.copy_alphabet)), self.copy_alphabet),
            TaskId::ToySent => (
                InputSpec::Tokens {
                    vocab: TOYSENT_VOCAB.len(),
                    dim: self.embed_dim,
                },
                2,
            ),
            TaskId::CharLm => (
                InputSpec::Tokens {
                    vocab: BYTE_VOCAB,
                    dim: self.embed_dim,
                },
                BYTE_VOCAB,
            ),
        };
        ModelConfig {
            kind: self.cell,
            activation: self.activation,
            input,
            d: self.d,
            layers: self.layers,
            outputs,
        }
    }
}

const EVAL_STREAM_BASE: u64 = 1 << 48;
const INIT_STREAM: u64 = u64::MAX;

/// Deterministic source of training batches and the held-out set. Example
/// `i` is generated from the stream `(seed, i)`; held-out examples use a
/// disjoint stream range. Char-LM trains on the first 90% of the corpus and
/// evaluates on tiles of the rest.
#[derive(Clone, Debug)]
pub struct TaskData<'a> {
    config: &'a TrainConfig,
    corpus: &'a [u8],
    split: usize,
}

impl<'a> TaskData<'a> {
    pub fn new(config: &'a TrainConfig, corpus: Option<&'a [u8]>) -> Result<Self> {
        let corpus = corpus.unwrap_or(&[]);
        let mut split = 0;
        if config.task == TaskId::CharLm {
            check_corpus(corpus)?;
            split = corpus.len() * 9 / 10;
            if config.seq_len + 1 > corpus.len() - split {
                return Err(Error::InvalidArgument("window longer than the held-out corpus".to_string()));
            }
        }
        Ok(Self { config, corpus, split })
    }

    pub fn example(&self, stream: u64) -> Result<TaskInstance> {
        let c = self.config;
        let mut rng = Rng::with_stream(c.seed, stream);
        match c.task {
            TaskId::Adding => gen_adding(c.seq_len, &mut rng),
            TaskId::Copy => gen_copy(c.seq_len, c.copy_payload, c.copy_alphabet, &mut rng),
            TaskId::ToySent => Ok(gen_toy_sentiment(&mut rng)),
            TaskId::CharLm => {
                let start = rng.below(self.split - c.seq_len);
                charlm_window(&self.corpus[..self.split], start, c.seq_len)
            }
        }
    }

    pub fn train_batch(&self, step: usize) -> Result<Vec<TaskInstance>> {
        let b = self.config.batch;
        (0..b).map(|j| self.example((step * b + j) as u64)).collect()
    }

    pub fn eval_set(&self) -> Result<Vec<TaskInstance>> {
        let size = self.config.eval_size;
        if self.config.task == TaskId::CharLm {
            let mut tiles = charlm_tiles(&self.corpus[self.split..], self.config.seq_len)?;
            tiles.truncate(size);
            return Ok(tiles);
        }
        (0..size).map(|i| self.example(EVAL_STREAM_BASE + i as u64)).collect()
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    /// Held-out loss.
    pub loss: f64,
    pub metric_name: &'static str,
    pub metric: f64,
    /// Mean training-batch loss since the previous record.
    pub train_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub records: Vec<MetricRecord>,
    pub steps: usize,
    pub reached_target: bool,
}

/// Sums per-example gradients in batch order and divides by the batch size.
fn reduce_gradients(model: &Model, results: Vec<Result<(ExampleScore, Model)>>) -> Result<(f64, Model)> {
    let mut total = model.zeros_like();
    let mut loss = 0.0;
    let b = results.len() as f64;
    for r in results {
        let (score, g) = r?;
        loss += score.loss;
        for (dst, src) in total.tensors_mut().into_iter().zip(g.tensors()) {
            dst.add_scaled(src, 1.0)?;
        }
    }
    for m in total.tensors_mut() {
        for v in m.data_mut() {
            *v /= b;
        }
    }
    Ok((loss / b, total))
}

/// One optimizer step on `batch`; returns the batch loss before the update.
pub fn train_step<E: BatchEngine>(
    model: &mut Model,
    state: &mut OptimizerState,
    batch: &[TaskInstance],
    clip_norm: f64,
    engine: &E,
) -> Result<f64> {
    let results = {
        let m: &Model = model;
        engine.map_examples(batch, |inst| m.example_gradients(inst))
    };
    let (loss, grads) = reduce_gradients(model, results)?;
    let (grads, _) = clip_by_global_norm(grads, clip_norm)?;
    state.update(model, &grads)?;
    Ok(loss)
}

/// Full training loop. Calls `on_record` after every evaluation (each
/// `eval_interval` steps and after the final step). Deterministic given the
/// config, the corpus and an order-preserving engine.
pub fn train<E: BatchEngine>(
    config: &TrainConfig,
    corpus: Option<&[u8]>,
    engine: &E,
    mut on_record: impl FnMut(&MetricRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let data = TaskData::new(config, corpus)?;
    let eval_set = data.eval_set()?;
    let mut model = Model::new(config.model_config(), &mut Rng::with_stream(config.seed, INIT_STREAM))?;
    model.fill_forget_bias(config.forget_bias);
    model.fill_input_bias(config.input_bias);
    let mut state = OptimizerState::new(config.optimizer, config.lr);
    let mut records = Vec::new();
    let mut window = (0.0, 0usize);
    let mut reached_target = false;
    let mut steps = 0;
    for step in 1..=config.max_steps {
        let batch = data.train_batch(step - 1)?;
        let loss = train_step(&mut model, &mut state, &batch, config.clip_norm, engine)?;
        if !loss.is_finite() || !model.tensors().iter().all(|m| m.is_finite()) {
            return Err(Error::Diverged { step });
        }
        window.0 += loss;
        window.1 += 1;
        steps = step;
        if step % config.eval_interval == 0 || step == config.max_steps {
            let eval = evaluate(&model, config.task, &eval_set, engine)?;
            if !eval.loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            let record = MetricRecord {
                step,
                loss: eval.loss,
                metric_name: metric_name(config.task),
                metric: eval.metric,
                train_loss: window.0 / window.1 as f64,
            };
            window = (0.0, 0);
            on_record(&record);
            records.push(record);
            if let Some(target) = config.target_metric {
                let hit = if higher_is_better(config.task) {
                    eval.metric >= target
                } else {
                    eval.metric <= target
                };
                if hit {
                    reached_target = true;
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        model,
        records,
        steps,
        reached_target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell_grads(norm_parts: &[f64]) -> CellWeights {
        let mut rng = Rng::new(0);
        let p: CellParams = CellParams::new(CellKind::Lrn, Activation::Tanh, 1, 1, &mut rng).unwrap();
        let mut w = p.weights.zeros_like();
        for (m, &v) in w.tensors_mut().into_iter().zip(norm_parts) {
            m.data_mut()[0] = v;
        }
        w
    }

    #[test]
    fn clip_examples() {
        let (g, s) = clip_by_global_norm(cell_grads(&[3.0]), 5.0).unwrap();
        assert_eq!(s, 1.0);
        assert_eq!(g, cell_grads(&[3.0]));
        let (g, s) = clip_by_global_norm(cell_grads(&[6.0, 8.0]), 5.0).unwrap();
        assert_eq!(s, 0.5);
        assert_eq!(g, cell_grads(&[3.0, 4.0]));
        assert!(clip_by_global_norm(cell_grads(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn adam_first_step_scalar() {
        let mut p = cell_grads(&[1.0, -2.0]);
        let g = cell_grads(&[0.5, -3.0]);
        let mut state = OptimizerState::adam(0.1);
        adam_update(&mut p, &g, &mut state).unwrap();
        for (w0, gi, w) in [(1.0, 0.5, p.tensors()[0].data()[0]), (-2.0, -3.0, p.tensors()[1].data()[0])] {
            let m_hat: f64 = (0.1 * gi) / 0.1;
            let v_hat: f64 = (0.001 * gi * gi) / (1.0 - 0.999);
            assert!((w - (w0 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8))).abs() < 1e-15);
        }
        assert_eq!(state.step_count(), 1);
        let before = p.clone();
        adam_update(&mut p, &cell_grads(&[]), &mut OptimizerState::adam(0.1)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn optimizer_rejects_mismatched_shapes() {
        let mut p = cell_grads(&[1.0]);
        let g: Vec<Matrix> = vec![Matrix::zeros(1, 1)];
        struct Loose(Vec<Matrix>);
        impl Parameters<f64> for Loose {
            fn tensors(&self) -> Vec<&Matrix> {
                self.0.iter().collect()
            }
            fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
                self.0.iter_mut().collect()
            }
        }
        assert!(adam_update(&mut p, &Loose(g), &mut OptimizerState::adam(0.1)).is_err());
        assert!(sgd_update(&mut p, &Loose(vec![]), &mut OptimizerState::sgd(0.1)).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, g) = softmax_cross_entropy(&[0.3; 4], 2).unwrap();
        assert!((l - libm::log(4.0)).abs() < 1e-15);
        assert!((g[2] + 0.75).abs() < 1e-15 && (g[0] - 0.25).abs() < 1e-15);
        let (l, _) = softmax_cross_entropy::<f64>(&[1000.0, 0.0, -5.0], 0).unwrap();
        assert!(l.abs() < 1e-300);
        assert!(softmax_cross_entropy(&[0.0, 1.0], 2).is_err());
        assert!(softmax_cross_entropy(&[0.0], 0).is_err());
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[0.4, 2.0], &[0.4, 2.0]).unwrap().0, 0.0);
        assert_eq!(mse_loss(&[0.0], &[1.0]).unwrap(), (1.0, vec![-2.0]));
        assert!(mse_loss(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(TaskId::Adding, CellKind::Lrn);
        assert!(c.validate().is_ok());
        c.batch = 0;
        assert!(c.validate().is_err());
        c.batch = 1;
        c.clip_norm = 0.0;
        assert!(c.validate().is_err());
    }

    fn tiny(task: TaskId) -> TrainConfig {
        let mut c = TrainConfig::new(task, CellKind::Lrn);
        c.d = 6;
        c.batch = 4;
        c.max_steps = 6;
        c.eval_interval = 2;
        c.eval_size = 8;
        c.seq_len = 8;
        c.embed_dim = 4;
        c
    }

    #[test]
    fn zero_lr_keeps_eval_loss_constant() {
        let mut c = tiny(TaskId::Copy);
        c.lr = 0.0;
        let out = train(&c, None, &Sequential, |_| {}).unwrap();
        assert_eq!(out.records.len(), 3);
        assert!(out.records.iter().all(|r| r.loss == out.records[0].loss));
    }

    #[test]
    fn runs_are_deterministic() {
        for task in [TaskId::Adding, TaskId::ToySent] {
            let c = tiny(task);
            let a = train(&c, None, &Sequential, |_| {}).unwrap();
            let b = train(&c, None, &Sequential, |_| {}).unwrap();
            assert_eq!(a.records, b.records);
            assert_eq!(a.model, b.model);
        }
    }

    #[test]
    fn charlm_needs_a_corpus() {
        assert!(matches!(
            train(&tiny(TaskId::CharLm), None, &Sequential, |_| {}),
            Err(Error::CorpusTooSmall { .. })
        ));
    }

    #[test]
    fn model_parts_validated() {
        let c = tiny(TaskId::ToySent);
        let m: Model = Model::new(c.model_config(), &mut Rng::new(1)).unwrap();
        let rebuilt = Model::from_parts(*m.config(), m.embedding.clone(), m.cells.clone(), m.head_w.clone(), m.head_b.clone());
        assert_eq!(rebuilt.unwrap(), m);
        assert!(Model::from_parts(*m.config(), None, m.cells.clone(), m.head_w.clone(), m.head_b.clone()).is_err());
    }
}
