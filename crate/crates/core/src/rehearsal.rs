//! Class-balanced rehearsal memory and memory editing.
//!
//! Two editing rules are provided. `edit_memory_emgd` moves stored inputs so
//! their gradient `g(x) = −∇θ ℓ(x)` approaches the current combined direction
//! `d`; `edit_memory_gmed` is the loss-difference baseline, which increases
//! the interference a virtual step along `d` would cause.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::streams::TaskSpec;
use crate::tinynet::{
    edit_direction, edit_objective, read_container, write_container, Batch, EditModel,
};
use crate::TaskId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySlot {
    pub input: Vec<f64>,
    /// Local label within `task_id`'s head.
    pub label: usize,
    pub task_id: TaskId,
    /// Global class id; the unit of class balancing.
    pub class_id: usize,
}

/// Slots sampled for one tick, with the batch they form.
#[derive(Debug, Clone, PartialEq)]
pub struct MemorySample {
    pub batch: Batch,
    pub slots: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBuffer {
    slots: Vec<MemorySlot>,
    capacity_per_class: usize,
    seen_counts: BTreeMap<usize, u64>,
}

impl MemoryBuffer {
    pub fn new(capacity_per_class: usize) -> Result<Self> {
        if capacity_per_class == 0 {
            return Err(invalid("capacity_per_class must be positive"));
        }
        Ok(Self {
            slots: Vec::new(),
            capacity_per_class,
            seen_counts: BTreeMap::new(),
        })
    }

    pub fn slots(&self) -> &[MemorySlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity_per_class(&self) -> usize {
        self.capacity_per_class
    }

    pub fn seen_count(&self, class_id: usize) -> u64 {
        self.seen_counts.get(&class_id).copied().unwrap_or(0)
    }

    pub fn class_occupancy(&self, class_id: usize) -> usize {
        self.slots.iter().filter(|s| s.class_id == class_id).count()
    }

    /// Reservoir step for one sample within its class.
    pub fn insert_one<R: Rng>(&mut self, slot: MemorySlot, rng: &mut R) -> Result<()> {
        if let Some(first) = self.slots.first() {
            if first.input.len() != slot.input.len() {
                return Err(invalid(format!(
                    "slot width {} does not match buffer width {}",
                    slot.input.len(),
                    first.input.len()
                )));
            }
        }
        let seen = self.seen_counts.entry(slot.class_id).or_insert(0);
        *seen += 1;
        let seen = *seen;
        let members: Vec<usize> = (0..self.slots.len())
            .filter(|&i| self.slots[i].class_id == slot.class_id)
            .collect();
        if members.len() < self.capacity_per_class {
            self.slots.push(slot);
        } else {
            let j = rng.random_range(0..seen) as usize;
            if j < self.capacity_per_class {
                self.slots[members[j]] = slot;
            }
        }
        Ok(())
    }

    pub fn insert<R: Rng>(
        &mut self,
        samples: impl IntoIterator<Item = MemorySlot>,
        rng: &mut R,
    ) -> Result<()> {
        samples
            .into_iter()
            .try_for_each(|s| self.insert_one(s, rng))
    }

    /// Streams every training sample of a finished task through the reservoir.
    pub fn insert_task<R: Rng>(&mut self, spec: &TaskSpec, rng: &mut R) -> Result<()> {
        let slots = spec
            .train
            .inputs
            .rows()
            .into_iter()
            .zip(&spec.train.labels)
            .map(|(row, &label)| MemorySlot {
                input: row.to_vec(),
                label,
                task_id: spec.task_id,
                class_id: spec.global_label(label),
            });
        self.insert(slots, rng)
    }

    pub fn batch_for(&self, slots: &[usize]) -> Result<Batch> {
        if slots.is_empty() {
            return Err(invalid("no slots selected"));
        }
        let dim = self.slots.first().map_or(0, |s| s.input.len());
        let mut inputs = Array2::zeros((slots.len(), dim));
        let mut labels = Vec::with_capacity(slots.len());
        let mut tasks = Vec::with_capacity(slots.len());
        for (r, &i) in slots.iter().enumerate() {
            let slot = self
                .slots
                .get(i)
                .ok_or_else(|| invalid(format!("slot {i} out of range")))?;
            inputs
                .row_mut(r)
                .iter_mut()
                .zip(&slot.input)
                .for_each(|(a, b)| *a = *b);
            labels.push(slot.label);
            tasks.push(slot.task_id);
        }
        Batch::new(inputs, labels, tasks)
    }

    /// Uniform sample; without replacement unless `batch_size` exceeds occupancy.
    pub fn sample<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Result<MemorySample> {
        if self.slots.is_empty() {
            return Err(Error::EmptyMemory);
        }
        if batch_size == 0 {
            return Err(invalid("memory batch size must be positive"));
        }
        let n = self.slots.len();
        let slots = if batch_size <= n {
            rand::seq::index::sample(rng, n, batch_size).into_vec()
        } else {
            (0..batch_size).map(|_| rng.random_range(0..n)).collect()
        };
        Ok(MemorySample {
            batch: self.batch_for(&slots)?,
            slots,
        })
    }

    fn write_rows(&mut self, slots: &[usize], rows: &Array2<f64>) {
        for (r, &i) in slots.iter().enumerate() {
            self.slots[i]
                .input
                .iter_mut()
                .zip(rows.row(r))
                .for_each(|(a, b)| *a = *b);
        }
    }

    /// Writes the inputs as an `EMGD` container and the slot metadata as JSON.
    pub fn write_snapshot<W: Write, M: Write>(&self, data: &mut W, manifest: &mut M) -> Result<()> {
        let dim = self.slots.first().map_or(0, |s| s.input.len());
        let values: Vec<f64> = self
            .slots
            .iter()
            .flat_map(|s| s.input.iter().copied())
            .collect();
        write_container(
            data,
            &SnapshotHeader {
                slots: self.slots.len(),
                input_dim: dim,
            },
            &values,
        )?;
        let meta = SnapshotManifest {
            capacity_per_class: self.capacity_per_class,
            seen_counts: self.seen_counts.clone(),
            slots: self
                .slots
                .iter()
                .map(|s| SlotMeta {
                    task_id: s.task_id,
                    class_id: s.class_id,
                    label: s.label,
                })
                .collect(),
        };
        serde_json::to_writer_pretty(&mut *manifest, &meta)?;
        manifest.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_snapshot<R: Read, M: Read>(data: &mut R, manifest: &mut M) -> Result<Self> {
        let (header, values): (SnapshotHeader, Vec<f64>) = read_container(data)?;
        let meta: SnapshotManifest = serde_json::from_reader(manifest)?;
        if meta.slots.len() != header.slots || values.len() != header.slots * header.input_dim {
            return Err(invalid("snapshot data and manifest disagree on slot count"));
        }
        let mut buffer = Self::new(meta.capacity_per_class)?;
        buffer.seen_counts = meta.seen_counts;
        buffer.slots = meta
            .slots
            .iter()
            .enumerate()
            .map(|(i, m)| MemorySlot {
                input: values[i * header.input_dim..(i + 1) * header.input_dim].to_vec(),
                label: m.label,
                task_id: m.task_id,
                class_id: m.class_id,
            })
            .collect();
        Ok(buffer)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotHeader {
    slots: usize,
    input_dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotManifest {
    capacity_per_class: usize,
    seen_counts: BTreeMap<usize, u64>,
    slots: Vec<SlotMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SlotMeta {
    task_id: TaskId,
    class_id: usize,
    label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditConfig {
    #[serde(default = "default_eta")]
    pub eta_edit: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_fd_eps")]
    pub fd_eps: f64,
    #[serde(default = "default_clamp")]
    pub clamp: bool,
}

fn default_eta() -> f64 {
    0.05
}

fn default_iterations() -> usize {
    1
}

fn default_fd_eps() -> f64 {
    1e-4
}

fn default_clamp() -> bool {
    true
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            eta_edit: default_eta(),
            iterations: default_iterations(),
            fd_eps: default_fd_eps(),
            clamp: default_clamp(),
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta_edit) {
            return Err(Error::Config(format!(
                "eta_edit {} not in [0, 1]",
                self.eta_edit
            )));
        }
        if !(self.fd_eps.is_finite() && self.fd_eps > 0.0) {
            return Err(Error::Config(format!(
                "fd_eps {} must be positive",
                self.fd_eps
            )));
        }
        Ok(())
    }

    fn is_noop(&self) -> bool {
        self.eta_edit == 0.0 || self.iterations == 0
    }
}

/// Editing objective of the sampled batch before and after the edit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub objective_before: f64,
    pub objective_after: f64,
}

fn step(inputs: &Array2<f64>, grad: &Array2<f64>, eta: f64, clamp: bool) -> Array2<f64> {
    let mut out = inputs - &(grad * eta);
    if clamp {
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    out
}

/// `x ← clamp(x − η ∇x ‖g(x) − d‖²)` on the given slots.
pub fn edit_memory_emgd<M: EditModel>(
    buffer: &mut MemoryBuffer,
    model: &M,
    slots: &[usize],
    direction_d: &[f64],
    cfg: &EditConfig,
) -> Result<EditReport> {
    cfg.validate()?;
    let mut batch = buffer.batch_for(slots)?;
    let before = edit_objective(model, &batch, direction_d)?;
    if cfg.is_noop() {
        return Ok(EditReport {
            objective_before: before,
            objective_after: before,
        });
    }
    for _ in 0..cfg.iterations {
        let grad = edit_direction(model, &batch, direction_d, cfg.fd_eps)?;
        batch.inputs = step(&batch.inputs, &grad, cfg.eta_edit, cfg.clamp);
    }
    buffer.write_rows(slots, &batch.inputs);
    Ok(EditReport {
        objective_before: before,
        objective_after: edit_objective(model, &batch, direction_d)?,
    })
}

/// `(ℓ(θ) − ℓ(θ'))²` and its input gradient `2(ℓ − ℓ')(∇x ℓ − ∇x ℓ')`, with
/// the look-ahead `θ' = θ + η·d`.
pub fn gmed_objective_and_gradient<M: EditModel>(
    model: &M,
    batch: &Batch,
    direction_d: &[f64],
    eta: f64,
) -> Result<(f64, Array2<f64>)> {
    let params = model.backbone_params();
    if direction_d.len() != params.len() {
        return Err(invalid(format!(
            "direction has {} entries, backbone has {}",
            direction_d.len(),
            params.len()
        )));
    }
    let ahead: Vec<f64> = params
        .iter()
        .zip(direction_d)
        .map(|(p, d)| p + eta * d)
        .collect();
    let (l, gx) = model.loss_and_input_grad_at(&params, batch)?;
    let (l_ahead, gx_ahead) = model.loss_and_input_grad_at(&ahead, batch)?;
    let diff = l - l_ahead;
    Ok((diff * diff, (gx - gx_ahead) * (2.0 * diff)))
}

/// Loss-difference editing: `x ← clamp(x − η ∇x (ℓ(x,θ) − ℓ(x,θ'))²)`.
pub fn edit_memory_gmed<M: EditModel>(
    buffer: &mut MemoryBuffer,
    model: &M,
    slots: &[usize],
    direction_d: &[f64],
    cfg: &EditConfig,
) -> Result<EditReport> {
    cfg.validate()?;
    let mut batch = buffer.batch_for(slots)?;
    let (before, _) = gmed_objective_and_gradient(model, &batch, direction_d, cfg.eta_edit)?;
    if cfg.is_noop() {
        return Ok(EditReport {
            objective_before: before,
            objective_after: before,
        });
    }
    for _ in 0..cfg.iterations {
        let (_, grad) = gmed_objective_and_gradient(model, &batch, direction_d, cfg.eta_edit)?;
        batch.inputs = step(&batch.inputs, &grad, cfg.eta_edit, cfg.clamp);
    }
    buffer.write_rows(slots, &batch.inputs);
    let (after, _) = gmed_objective_and_gradient(model, &batch, direction_d, cfg.eta_edit)?;
    Ok(EditReport {
        objective_before: before,
        objective_after: after,
    })
}
