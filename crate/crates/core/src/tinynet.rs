//! Minimal dense network: a shared tanh backbone plus per-task softmax heads.
//!
//! Everything is `f64` so finite-difference checks are meaningful. Parameters
//! flatten layer by layer, weights (row-major, `out × in`) before biases.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"EMGD" | version: u32 | header_len: u64 | header: JSON | count: u64 | count × f64
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::TaskId;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EMGD";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Fully connected layer `y = x Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `outputs × inputs`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Uniform in `[-1/√fan_in, 1/√fan_in]` for weights and biases.
    pub fn seeded<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = || (rng.random::<f64>() * 2.0 - 1.0) * bound;
        let weights = Array2::from_shape_fn((outputs, inputs), |_| draw());
        let bias = Array1::from_shape_fn(outputs, |_| draw());
        Self { weights, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weights.t()) + &self.bias
    }

    fn push_params(&self, out: &mut Vec<f64>) {
        out.extend(self.weights.iter());
        out.extend(self.bias.iter());
    }

    /// Overwrites parameters from the front of `src`; returns the count consumed.
    fn load_params(&mut self, src: &[f64]) -> usize {
        let nw = self.weights.len();
        let nb = self.bias.len();
        self.weights
            .iter_mut()
            .zip(&src[..nw])
            .for_each(|(w, v)| *w = *v);
        self.bias
            .iter_mut()
            .zip(&src[nw..nw + nb])
            .for_each(|(b, v)| *b = *v);
        nw + nb
    }

    fn axpy(&mut self, scale: f64, src: &[f64]) {
        let nw = self.weights.len();
        self.weights
            .iter_mut()
            .zip(&src[..nw])
            .for_each(|(w, v)| *w += scale * v);
        self.bias
            .iter_mut()
            .zip(&src[nw..])
            .for_each(|(b, v)| *b += scale * v);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![100]
}

fn default_feature_dim() -> usize {
    64
}

impl NetworkConfig {
    /// Two-layer backbone: `input → 100 → 64`.
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: default_hidden(),
            feature_dim: default_feature_dim(),
        }
    }
}

/// A labelled mini-batch. Each row is routed through the head of its task.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `batch × input_dim`.
    pub inputs: Array2<f64>,
    /// Local class index within the sample's task head.
    pub labels: Vec<usize>,
    pub tasks: Vec<TaskId>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, tasks: Vec<TaskId>) -> Result<Self> {
        let n = inputs.nrows();
        if n == 0 {
            return Err(invalid("batch is empty"));
        }
        if labels.len() != n || tasks.len() != n {
            return Err(invalid(format!(
                "batch has {n} rows but {} labels and {} task ids",
                labels.len(),
                tasks.len()
            )));
        }
        Ok(Self {
            inputs,
            labels,
            tasks,
        })
    }

    pub fn single_task(inputs: Array2<f64>, labels: Vec<usize>, task: TaskId) -> Result<Self> {
        let n = inputs.nrows();
        Self::new(inputs, labels, vec![task; n])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Distinct tasks in first-appearance order.
    pub fn task_set(&self) -> Vec<TaskId> {
        let mut out = Vec::new();
        for t in &self.tasks {
            if !out.contains(t) {
                out.push(*t);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Softmax probabilities per row (widths follow each row's head).
    pub probabilities: Vec<Vec<f64>>,
    /// Mean cross-entropy.
    pub loss: f64,
}

/// Positive loss gradients for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub backbone_grad: Vec<f64>,
    pub head_grads: BTreeMap<TaskId, Vec<f64>>,
    pub loss: f64,
}

struct Backprop {
    report: GradientReport,
    input_grad: Array2<f64>,
    probabilities: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_dim: usize,
    backbone: Vec<Dense>,
    heads: BTreeMap<TaskId, Dense>,
}

impl Network {
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        if config.input_dim == 0 || config.feature_dim == 0 || config.hidden.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![config.input_dim];
        widths.extend(&config.hidden);
        widths.push(config.feature_dim);
        let backbone = widths
            .windows(2)
            .map(|w| Dense::seeded(w[0], w[1], &mut rng))
            .collect();
        Self::from_layers(backbone)
    }

    pub fn from_layers(backbone: Vec<Dense>) -> Result<Self> {
        let first = backbone
            .first()
            .ok_or_else(|| invalid("backbone has no layers"))?;
        for pair in backbone.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(invalid(format!(
                    "layer widths do not chain: {} -> {}",
                    pair[0].outputs(),
                    pair[1].inputs()
                )));
            }
        }
        Ok(Self {
            input_dim: first.inputs(),
            backbone,
            heads: BTreeMap::new(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.last().map_or(0, Dense::outputs)
    }

    pub fn backbone(&self) -> &[Dense] {
        &self.backbone
    }

    /// Number of backbone parameters `D_b`.
    pub fn backbone_len(&self) -> usize {
        self.backbone.iter().map(Dense::param_count).sum()
    }

    pub fn heads(&self) -> &BTreeMap<TaskId, Dense> {
        &self.heads
    }

    pub fn has_head(&self, task: TaskId) -> bool {
        self.heads.contains_key(&task)
    }

    pub fn head_classes(&self, task: TaskId) -> Result<usize> {
        self.head(task).map(Dense::outputs)
    }

    fn head(&self, task: TaskId) -> Result<&Dense> {
        self.heads.get(&task).ok_or(Error::UnknownTask(task))
    }

    /// Adds a seeded head for `task`; the rest of the network is untouched.
    pub fn add_head(&mut self, task: TaskId, num_classes: usize, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = Dense::seeded(self.feature_dim(), num_classes, &mut rng);
        self.insert_head(task, head)
    }

    pub fn insert_head(&mut self, task: TaskId, head: Dense) -> Result<()> {
        if self.heads.contains_key(&task) {
            return Err(Error::AlreadyExists(task));
        }
        if head.inputs() != self.feature_dim() || head.outputs() == 0 {
            return Err(invalid(format!(
                "head shape {}x{} does not fit feature width {}",
                head.outputs(),
                head.inputs(),
                self.feature_dim()
            )));
        }
        self.heads.insert(task, head);
        Ok(())
    }

    pub fn backbone_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.backbone_len());
        self.backbone.iter().for_each(|l| l.push_params(&mut out));
        out
    }

    pub fn set_backbone_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.backbone_len() {
            return Err(invalid(format!(
                "expected {} backbone parameters, got {}",
                self.backbone_len(),
                params.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.backbone {
            offset += layer.load_params(&params[offset..]);
        }
        Ok(())
    }

    pub fn head_params(&self, task: TaskId) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        self.head(task)?.push_params(&mut out);
        Ok(out)
    }

    pub fn set_head_params(&mut self, task: TaskId, params: &[f64]) -> Result<()> {
        let head = self.heads.get_mut(&task).ok_or(Error::UnknownTask(task))?;
        if params.len() != head.param_count() {
            return Err(invalid(format!(
                "expected {} parameters for head {task}, got {}",
                head.param_count(),
                params.len()
            )));
        }
        head.load_params(params);
        Ok(())
    }

    /// Backbone followed by heads in task order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = self.backbone_params();
        self.heads.values().for_each(|h| h.push_params(&mut out));
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let total =
            self.backbone_len() + self.heads.values().map(Dense::param_count).sum::<usize>();
        if params.len() != total {
            return Err(invalid(format!(
                "expected {total} parameters, got {}",
                params.len()
            )));
        }
        let nb = self.backbone_len();
        self.set_backbone_params(&params[..nb])?;
        let mut offset = nb;
        for head in self.heads.values_mut() {
            offset += head.load_params(&params[offset..]);
        }
        Ok(())
    }

    /// Backbone activations for every layer, input first.
    fn activations(&self, inputs: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        if inputs.ncols() != self.input_dim {
            return Err(invalid(format!(
                "input width {} does not match network input {}",
                inputs.ncols(),
                self.input_dim
            )));
        }
        let mut acts = Vec::with_capacity(self.backbone.len() + 1);
        acts.push(inputs.clone());
        for layer in &self.backbone {
            let z = layer.forward(acts.last().expect("non-empty"));
            acts.push(z.mapv(f64::tanh));
        }
        Ok(acts)
    }

    /// Backbone features `v = f_θ(x)`.
    pub fn features(&self, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.activations(inputs)?.pop().expect("non-empty"))
    }

    pub fn head_logits(&self, task: TaskId, features: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.head(task)?.forward(features))
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        for (i, (task, label)) in batch.tasks.iter().zip(&batch.labels).enumerate() {
            let classes = self.head_classes(*task)?;
            if *label >= classes {
                return Err(invalid(format!(
                    "row {i}: label {label} out of range for task {task} with {classes} classes"
                )));
            }
        }
        Ok(())
    }

    fn backprop(&self, batch: &Batch) -> Result<Backprop> {
        self.check_batch(batch)?;
        let n = batch.len();
        let inv_n = 1.0 / n as f64;
        let acts = self.activations(&batch.inputs)?;
        let features = acts.last().expect("non-empty");

        let mut probabilities = vec![Vec::new(); n];
        let mut row_loss = vec![0.0; n];
        let mut d_features = Array2::<f64>::zeros(features.raw_dim());
        let mut head_grads = BTreeMap::new();

        for task in batch.task_set() {
            let head = self.head(task)?;
            let rows: Vec<usize> = (0..n).filter(|&r| batch.tasks[r] == task).collect();
            let v = features.select(Axis(0), &rows);
            let logits = head.forward(&v);
            let mut d_logits = Array2::<f64>::zeros(logits.raw_dim());
            for (k, &r) in rows.iter().enumerate() {
                let row = logits.row(k);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                let p: Vec<f64> = row.iter().map(|z| (z - lse).exp()).collect();
                let y = batch.labels[r];
                row_loss[r] = lse - row[y];
                for (c, pc) in p.iter().enumerate() {
                    let onehot = if c == y { 1.0 } else { 0.0 };
                    d_logits[[k, c]] = (pc - onehot) * inv_n;
                }
                probabilities[r] = p;
            }
            let d_w = d_logits.t().dot(&v);
            let d_b = d_logits.sum_axis(Axis(0));
            let mut flat = Vec::with_capacity(head.param_count());
            flat.extend(d_w.iter());
            flat.extend(d_b.iter());
            head_grads.insert(task, flat);
            let d_v = d_logits.dot(&head.weights);
            for (k, &r) in rows.iter().enumerate() {
                d_features.row_mut(r).assign(&d_v.row(k));
            }
        }

        let mut layer_grads: Vec<(Array2<f64>, Array1<f64>)> =
            Vec::with_capacity(self.backbone.len());
        let mut d_act = d_features;
        for (l, layer) in self.backbone.iter().enumerate().rev() {
            let out = &acts[l + 1];
            let d_z = &d_act * &out.mapv(|a| 1.0 - a * a);
            layer_grads.push((d_z.t().dot(&acts[l]), d_z.sum_axis(Axis(0))));
            d_act = d_z.dot(&layer.weights);
        }
        layer_grads.reverse();
        let mut backbone_grad = Vec::with_capacity(self.backbone_len());
        for (w, b) in &layer_grads {
            backbone_grad.extend(w.iter());
            backbone_grad.extend(b.iter());
        }

        let loss = row_loss.iter().sum::<f64>() * inv_n;
        Ok(Backprop {
            report: GradientReport {
                backbone_grad,
                head_grads,
                loss,
            },
            input_grad: d_act,
            probabilities,
        })
    }

    /// Probabilities and mean cross-entropy.
    pub fn forward(&self, batch: &Batch) -> Result<ForwardOutput> {
        let bp = self.backprop(batch)?;
        Ok(ForwardOutput {
            probabilities: bp.probabilities,
            loss: bp.report.loss,
        })
    }

    /// Mean cross-entropy only.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        self.check_batch(batch)?;
        let features = self.features(&batch.inputs)?;
        let mut total = 0.0;
        for (r, (task, y)) in batch.tasks.iter().zip(&batch.labels).enumerate() {
            let head = self.head(*task)?;
            let logits = head.weights.dot(&features.row(r)) + &head.bias;
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - logits[*y];
        }
        Ok(total / batch.len() as f64)
    }

    /// Positive loss gradients for the backbone and every head in the batch.
    pub fn backward(&self, batch: &Batch) -> Result<GradientReport> {
        Ok(self.backprop(batch)?.report)
    }

    /// `∂loss/∂x`, same shape as the inputs.
    pub fn input_gradient(&self, batch: &Batch) -> Result<Array2<f64>> {
        Ok(self.backprop(batch)?.input_grad)
    }

    /// `θ ← θ + γ·d` on the backbone, `θ_t ← θ_t − step·grad` on each listed head.
    pub fn apply_update(
        &mut self,
        backbone_direction: &[f64],
        gamma: f64,
        head_updates: &BTreeMap<TaskId, (Vec<f64>, f64)>,
    ) -> Result<()> {
        if backbone_direction.len() != self.backbone_len() {
            return Err(invalid(format!(
                "backbone direction has {} entries, expected {}",
                backbone_direction.len(),
                self.backbone_len()
            )));
        }
        for (task, (grad, _)) in head_updates {
            let head = self.head(*task)?;
            if grad.len() != head.param_count() {
                return Err(invalid(format!(
                    "head {task} gradient has {} entries, expected {}",
                    grad.len(),
                    head.param_count()
                )));
            }
        }
        let mut offset = 0;
        for layer in &mut self.backbone {
            let n = layer.param_count();
            layer.axpy(gamma, &backbone_direction[offset..offset + n]);
            offset += n;
        }
        for (task, (grad, step)) in head_updates {
            self.heads
                .get_mut(task)
                .expect("checked above")
                .axpy(-step, grad);
        }
        Ok(())
    }

    fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            input_dim: self.input_dim,
            activation: "tanh".into(),
            backbone: self
                .backbone
                .iter()
                .map(|l| [l.inputs(), l.outputs()])
                .collect(),
            heads: self
                .heads
                .iter()
                .map(|(t, h)| (*t, [h.inputs(), h.outputs()]))
                .collect(),
        }
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        write_container(w, &self.header(), &self.params())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let (header, params): (CheckpointHeader, Vec<f64>) = read_container(r)?;
        if header.activation != "tanh" {
            return Err(invalid(format!(
                "unsupported activation {}",
                header.activation
            )));
        }
        let backbone = header
            .backbone
            .iter()
            .map(|[i, o]| Dense::zeros(*i, *o))
            .collect();
        let mut net = Self::from_layers(backbone)?;
        if net.input_dim != header.input_dim {
            return Err(invalid("checkpoint input_dim disagrees with layer shapes"));
        }
        for (task, [i, o]) in &header.heads {
            net.insert_head(*task, Dense::zeros(*i, *o))?;
        }
        net.set_params(&params)?;
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    input_dim: usize,
    activation: String,
    /// `[inputs, outputs]` per layer.
    backbone: Vec<[usize; 2]>,
    heads: BTreeMap<TaskId, [usize; 2]>,
}

/// Writes the `EMGD` binary container: JSON header followed by raw `f64`s.
pub fn write_container<W: Write, H: Serialize>(
    w: &mut W,
    header: &H,
    values: &[f64],
) -> Result<()> {
    let header = serde_json::to_vec(header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_container<R: Read, H: DeserializeOwned>(r: &mut R) -> Result<(H, Vec<f64>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = ByteCursor {
        bytes: &bytes,
        pos: 0,
    };
    let magic = cur.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad checkpoint magic".into(),
        });
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let header_len = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")) as usize;
    let header_at = cur.pos as u64;
    let header: H = serde_json::from_slice(cur.take(header_len)?).map_err(|e| Error::Format {
        offset: header_at,
        message: format!("bad checkpoint header: {e}"),
    })?;
    let count = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")) as usize;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(f64::from_le_bytes(
            cur.take(8)?.try_into().expect("8 bytes"),
        ));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos as u64,
            message: "trailing bytes after parameter array".into(),
        });
    }
    Ok((header, values))
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated: needed {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

/// A model whose backbone gradient and input gradient can be evaluated at
/// arbitrary backbone parameters; the interface memory editing needs.
pub trait EditModel {
    fn backbone_params(&self) -> Vec<f64>;

    /// `∇θ ℓ(batch)` at `params` (positive convention).
    fn backbone_grad_at(&self, params: &[f64], batch: &Batch) -> Result<Vec<f64>>;

    /// `(ℓ(batch), ∇x ℓ(batch))` at `params`.
    fn loss_and_input_grad_at(&self, params: &[f64], batch: &Batch) -> Result<(f64, Array2<f64>)>;
}

impl EditModel for Network {
    fn backbone_params(&self) -> Vec<f64> {
        Network::backbone_params(self)
    }

    fn backbone_grad_at(&self, params: &[f64], batch: &Batch) -> Result<Vec<f64>> {
        let mut net = self.clone();
        net.set_backbone_params(params)?;
        Ok(net.backward(batch)?.backbone_grad)
    }

    fn loss_and_input_grad_at(&self, params: &[f64], batch: &Batch) -> Result<(f64, Array2<f64>)> {
        let mut net = self.clone();
        net.set_backbone_params(params)?;
        let bp = net.backprop(batch)?;
        Ok((bp.report.loss, bp.input_grad))
    }
}

/// `ℓ(θ, x) = mean (θ·x)²/2` with a scalar parameter and scalar inputs.
///
/// Its editing gradient has the closed form
/// `∇x_i ‖g(x) − d‖² = 4θ x_i (θ·mean(x²) + d) / n`, which makes it a handy
/// probe for the editing machinery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarQuadratic {
    pub theta: f64,
}

impl ScalarQuadratic {
    fn check(batch: &Batch) -> Result<()> {
        if batch.inputs.ncols() != 1 {
            return Err(invalid("scalar quadratic expects one input column"));
        }
        Ok(())
    }
}

impl EditModel for ScalarQuadratic {
    fn backbone_params(&self) -> Vec<f64> {
        vec![self.theta]
    }

    fn backbone_grad_at(&self, params: &[f64], batch: &Batch) -> Result<Vec<f64>> {
        Self::check(batch)?;
        let theta = params[0];
        let n = batch.len() as f64;
        Ok(vec![
            batch.inputs.iter().map(|x| theta * x * x).sum::<f64>() / n,
        ])
    }

    fn loss_and_input_grad_at(&self, params: &[f64], batch: &Batch) -> Result<(f64, Array2<f64>)> {
        Self::check(batch)?;
        let theta = params[0];
        let n = batch.len() as f64;
        let loss = batch
            .inputs
            .iter()
            .map(|x| (theta * x).powi(2) / 2.0)
            .sum::<f64>()
            / n;
        Ok((loss, batch.inputs.mapv(|x| theta * theta * x / n)))
    }
}

/// `‖g(x) − d‖²` with `g = −∇θ ℓ` and `d` in the same (negative) convention.
pub fn edit_objective<M: EditModel>(model: &M, batch: &Batch, target_d: &[f64]) -> Result<f64> {
    let params = model.backbone_params();
    let residual = residual(model, &params, batch, target_d)?;
    Ok(residual.iter().map(|v| v * v).sum())
}

/// `∇θ ℓ + d`, which equals `−(g(x) − d)`.
fn residual<M: EditModel>(
    model: &M,
    params: &[f64],
    batch: &Batch,
    target_d: &[f64],
) -> Result<Vec<f64>> {
    if target_d.len() != params.len() {
        return Err(invalid(format!(
            "target direction has {} entries, backbone has {}",
            target_d.len(),
            params.len()
        )));
    }
    let grad = model.backbone_grad_at(params, batch)?;
    Ok(grad.iter().zip(target_d).map(|(g, d)| g + d).collect())
}

/// `∇x ‖g(x) − d‖²` for every row of the batch.
///
/// With `u = ∇θ ℓ + d` the gradient is `2·(∂²ℓ/∂x∂θ)·u`; the mixed term is
/// taken as a central difference of the input gradient along `û`:
/// `2·[∇x ℓ(θ + εû) − ∇x ℓ(θ − εû)]·‖u‖/(2ε)`, with
/// `ε = fd_eps · max(1, rms(θ))`. Returns zeros when `‖u‖ < 1e-12`.
pub fn edit_direction<M: EditModel>(
    model: &M,
    batch: &Batch,
    target_d: &[f64],
    fd_eps: f64,
) -> Result<Array2<f64>> {
    if !(fd_eps.is_finite() && fd_eps > 0.0) {
        return Err(invalid(format!("fd_eps must be positive, got {fd_eps}")));
    }
    let params = model.backbone_params();
    let u = residual(model, &params, batch, target_d)?;
    let u_norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if u_norm < 1e-12 {
        return Ok(Array2::zeros(batch.inputs.raw_dim()));
    }
    let rms = (params.iter().map(|p| p * p).sum::<f64>() / params.len() as f64).sqrt();
    let eps = fd_eps * rms.max(1.0);
    let shifted = |sign: f64| -> Vec<f64> {
        params
            .iter()
            .zip(&u)
            .map(|(p, ui)| p + sign * eps * ui / u_norm)
            .collect()
    };
    let (_, plus) = model.loss_and_input_grad_at(&shifted(1.0), batch)?;
    let (_, minus) = model.loss_and_input_grad_at(&shifted(-1.0), batch)?;
    Ok((plus - minus) * (u_norm / eps))
}
