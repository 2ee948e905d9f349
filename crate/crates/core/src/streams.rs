//! Parallel-split task construction, task timelines and mini-batch cursors.
//!
//! A tick is one optimization step. A task with `n` training samples, batch
//! size `b` and `E` epochs is active for `E·⌈n/b⌉` ticks, `[s_t, e_t]`
//! inclusive.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seeding;
use crate::tinynet::Batch;
use crate::{TaskId, MEMORY_TASK};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Inputs with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl LabeledData {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(invalid(format!(
                "{} rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            inputs: Array2::zeros((0, dim)),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    fn select(&self, rows: &[usize], relabel: impl Fn(usize) -> usize) -> Self {
        Self {
            inputs: self.inputs.select(Axis(0), rows),
            labels: rows.iter().map(|&r| relabel(self.labels[r])).collect(),
        }
    }
}

/// A classification dataset with global labels `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub train: LabeledData,
    pub test: LabeledData,
}

impl Dataset {
    pub fn new(train: LabeledData, test: LabeledData) -> Result<Self> {
        if train.dim() != test.dim() {
            return Err(invalid("train and test input widths differ"));
        }
        let num_classes = train
            .labels
            .iter()
            .chain(&test.labels)
            .max()
            .map_or(0, |m| m + 1);
        Ok(Self {
            num_classes,
            train,
            test,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.train.dim()
    }
}

/// One task: its global label set and the samples it owns, relabelled to
/// local head indices `0..label_set.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub label_set: Vec<usize>,
    pub train: LabeledData,
    pub test: LabeledData,
}

impl TaskSpec {
    pub fn class_count(&self) -> usize {
        self.label_set.len()
    }

    pub fn global_label(&self, local: usize) -> usize {
        self.label_set[local]
    }

    /// Number of ticks one pass over the training data takes.
    pub fn batches_per_epoch(&self, batch_size: usize) -> u64 {
        self.train.len().div_ceil(batch_size.max(1)) as u64
    }

    pub fn train_batch(&self, rows: &[usize]) -> Result<Batch> {
        let part = self.train.select(rows, |l| l);
        Batch::single_task(part.inputs, part.labels, self.task_id)
    }

    pub fn test_batch(&self) -> Result<Batch> {
        Batch::single_task(
            self.test.inputs.clone(),
            self.test.labels.clone(),
            self.task_id,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub task_id: TaskId,
    pub start: u64,
    pub end: u64,
}

/// Access windows `[s_t, e_t]` of tasks `1..=T`, in task order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTimeline {
    entries: Vec<TimelineEntry>,
}

impl TaskTimeline {
    pub fn new(entries: Vec<TimelineEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("timeline has no tasks".into()));
        }
        let mut max_end = 0u64;
        for (i, e) in entries.iter().enumerate() {
            if e.task_id == MEMORY_TASK {
                return Err(Error::Config("task id 0 is reserved for memory".into()));
            }
            if entries[..i].iter().any(|p| p.task_id == e.task_id) {
                return Err(Error::Config(format!("task {} listed twice", e.task_id)));
            }
            if e.start > e.end {
                return Err(Error::Config(format!(
                    "task {} starts at {} after its end {}",
                    e.task_id, e.start, e.end
                )));
            }
            if i > 0 {
                let prev = entries[i - 1].start;
                if e.start < prev || e.start > max_end + 1 {
                    return Err(Error::Config(format!(
                        "task {} start {} outside [{prev}, {}]",
                        e.task_id,
                        e.start,
                        max_end + 1
                    )));
                }
            }
            max_end = max_end.max(e.end);
        }
        Ok(Self { entries })
    }

    /// Random starts: `s_1 = 0`, `s_t ~ U[s_{t-1}, 1 + max_{u<t} e_u]`, or
    /// `s_t = e_{t-1} + 1` when `serial`.
    pub fn generate<R: Rng>(
        durations: &[(TaskId, u64)],
        serial: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut entries: Vec<TimelineEntry> = Vec::with_capacity(durations.len());
        let mut max_end = 0u64;
        for &(task_id, ticks) in durations {
            if ticks == 0 {
                return Err(Error::Config(format!(
                    "task {task_id} has no training batches"
                )));
            }
            let start = match entries.last() {
                None => 0,
                Some(prev) if serial => prev.end + 1,
                Some(prev) => rng.random_range(prev.start..=max_end + 1),
            };
            let end = start + ticks - 1;
            max_end = max_end.max(end);
            entries.push(TimelineEntry {
                task_id,
                start,
                end,
            });
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[TimelineEntry] {
        &self.entries
    }

    pub fn entry(&self, task: TaskId) -> Result<&TimelineEntry> {
        self.entries
            .iter()
            .find(|e| e.task_id == task)
            .ok_or(Error::UnknownTask(task))
    }

    pub fn first_tick(&self) -> u64 {
        self.entries.iter().map(|e| e.start).min().unwrap_or(0)
    }

    /// `ē`.
    pub fn last_tick(&self) -> u64 {
        self.entries.iter().map(|e| e.end).max().unwrap_or(0)
    }

    /// `{t : s_t ≤ tick ≤ e_t}`, plus the memory task 0 once any task has
    /// finished. Sorted ascending, so 0 comes first when present.
    pub fn active_tasks(&self, tick: u64) -> Result<Vec<TaskId>> {
        let (start, end) = (self.first_tick(), self.last_tick());
        if tick < start || tick > end {
            return Err(Error::OutOfRange { tick, start, end });
        }
        let mut out = Vec::new();
        if self.entries.iter().any(|e| e.end < tick) {
            out.push(MEMORY_TASK);
        }
        let mut live: Vec<TaskId> = self
            .entries
            .iter()
            .filter(|e| e.start <= tick && tick <= e.end)
            .map(|e| e.task_id)
            .collect();
        live.sort_unstable();
        out.extend(live);
        Ok(out)
    }

    /// Tasks whose window ends at `tick`.
    pub fn finishing_at(&self, tick: u64) -> Vec<TaskId> {
        self.entries
            .iter()
            .filter(|e| e.end == tick)
            .map(|e| e.task_id)
            .collect()
    }

    pub fn starting_at(&self, tick: u64) -> Vec<TaskId> {
        self.entries
            .iter()
            .filter(|e| e.start == tick)
            .map(|e| e.task_id)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub num_tasks: usize,
    /// Inclusive `[min, max]` label-set size.
    pub label_bounds: (usize, usize),
    #[serde(default)]
    pub overlap_fraction: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub serial: bool,
}

fn default_batch_size() -> usize {
    128
}

fn default_epochs() -> usize {
    1
}

impl SplitConfig {
    pub fn new(num_tasks: usize, label_bounds: (usize, usize)) -> Self {
        Self {
            num_tasks,
            label_bounds,
            overlap_fraction: 0.0,
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            serial: false,
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.label_bounds;
        if self.num_tasks == 0 {
            return Err(Error::Config("num_tasks must be positive".into()));
        }
        if lo < 2 || lo > hi {
            return Err(Error::Config(format!(
                "label bounds [{lo}, {hi}] are invalid"
            )));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::Config(format!(
                "overlap_fraction {} not in [0, 1)",
                self.overlap_fraction
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn shared_count(fraction: f64, size: usize) -> usize {
    (fraction * size as f64).ceil() as usize
}

/// Random label sets for each task. With `overlap_fraction = f > 0`, task `t`
/// takes `⌈f·|set_t|⌉` labels from task `t−1`'s set and the rest fresh.
fn draw_label_sets(
    num_classes: usize,
    cfg: &SplitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let (lo, hi) = cfg.label_bounds;
    let f = cfg.overlap_fraction;
    let fresh_need = |size: usize| size - shared_count(f, size).min(size);
    // Minimal fresh labels all later tasks need.
    let min_fresh_after = |remaining_tasks: usize| -> usize {
        if f == 0.0 {
            remaining_tasks * lo
        } else {
            (lo..=hi).map(fresh_need).min().unwrap_or(lo) * remaining_tasks
        }
    };
    let first_min = lo + min_fresh_after(cfg.num_tasks - 1);
    if first_min > num_classes {
        return Err(Error::Config(format!(
            "{} tasks with label bounds [{lo}, {hi}] and overlap {f} need at least {first_min} classes, dataset has {num_classes}",
            cfg.num_tasks
        )));
    }

    let mut pool: Vec<usize> = (0..num_classes).collect();
    pool.shuffle(rng);
    let mut sets: Vec<Vec<usize>> = Vec::with_capacity(cfg.num_tasks);
    for t in 0..cfg.num_tasks {
        let reserve = min_fresh_after(cfg.num_tasks - t - 1);
        let prev = sets.last();
        let feasible: Vec<usize> = (lo..=hi)
            .filter(|&size| {
                let (shared, fresh) = match prev {
                    Some(_) if f > 0.0 => (shared_count(f, size).min(size), fresh_need(size)),
                    _ => (0, size),
                };
                prev.is_none_or(|p| shared <= p.len()) && fresh + reserve <= pool.len()
            })
            .collect();
        let &size = feasible
            .get(rng.random_range(0..feasible.len().max(1)))
            .ok_or_else(|| {
                Error::Config(format!("no feasible label-set size for task {}", t + 1))
            })?;
        let mut set = Vec::with_capacity(size);
        if let (Some(p), true) = (prev, f > 0.0) {
            let shared = shared_count(f, size).min(size);
            let mut from_prev = p.clone();
            from_prev.shuffle(rng);
            set.extend(&from_prev[..shared]);
        }
        let fresh = size - set.len();
        set.extend(pool.drain(pool.len() - fresh..));
        set.sort_unstable();
        sets.push(set);
    }
    Ok(sets)
}

/// Splits every class's rows evenly between the tasks that own that class.
fn partition_rows(
    data: &LabeledData,
    sets: &[Vec<usize>],
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (r, &l) in data.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(r);
    }
    let mut rows = vec![Vec::new(); sets.len()];
    for (class, mut members) in by_class {
        let owners: Vec<usize> = (0..sets.len())
            .filter(|&t| sets[t].contains(&class))
            .collect();
        if owners.is_empty() {
            continue;
        }
        members.shuffle(rng);
        let k = owners.len();
        for (i, owner) in owners.iter().enumerate() {
            let lo = i * members.len() / k;
            let hi = (i + 1) * members.len() / k;
            rows[*owner].extend(&members[lo..hi]);
        }
    }
    rows.iter_mut().for_each(|r| r.sort_unstable());
    rows
}

fn materialize(
    dataset: &Dataset,
    sets: &[Vec<usize>],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TaskSpec>> {
    let train_rows = partition_rows(&dataset.train, sets, rng);
    let test_rows = partition_rows(&dataset.test, sets, rng);
    let mut specs = Vec::with_capacity(sets.len());
    for (i, set) in sets.iter().enumerate() {
        let local = |g: usize| set.binary_search(&g).expect("row filtered by label set");
        let spec = TaskSpec {
            task_id: i + 1,
            label_set: set.clone(),
            train: dataset.train.select(&train_rows[i], local),
            test: dataset.test.select(&test_rows[i], local),
        };
        if spec.train.is_empty() {
            return Err(Error::Config(format!(
                "task {} received no training samples",
                i + 1
            )));
        }
        specs.push(spec);
    }
    Ok(specs)
}

fn durations(specs: &[TaskSpec], batch_size: usize, epochs: usize) -> Vec<(TaskId, u64)> {
    specs
        .iter()
        .map(|s| (s.task_id, epochs as u64 * s.batches_per_epoch(batch_size)))
        .collect()
}

/// Random label sets, per-task samples and a timeline, all from `seed`.
pub fn build_parallel_split(
    dataset: &Dataset,
    cfg: &SplitConfig,
    seed: u64,
) -> Result<(Vec<TaskSpec>, TaskTimeline)> {
    cfg.validate()?;
    let mut rng = seeding::substream(seed, seeding::SPLIT);
    let sets = draw_label_sets(dataset.num_classes, cfg, &mut rng)?;
    let specs = materialize(
        dataset,
        &sets,
        &mut seeding::substream(seed, seeding::PARTITION),
    )?;
    let timeline = TaskTimeline::generate(
        &durations(&specs, cfg.batch_size, cfg.epochs),
        cfg.serial,
        &mut rng,
    )?;
    Ok((specs, timeline))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTask {
    pub id: TaskId,
    pub labels: Vec<usize>,
    pub s: u64,
    pub e: u64,
}

/// JSON form of a split: `{"tasks": [{"id", "labels", "s", "e"}], "seed"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub tasks: Vec<ManifestTask>,
    pub seed: u64,
}

impl SplitManifest {
    pub fn from_split(specs: &[TaskSpec], timeline: &TaskTimeline, seed: u64) -> Result<Self> {
        let tasks = specs
            .iter()
            .map(|s| {
                let e = timeline.entry(s.task_id)?;
                Ok(ManifestTask {
                    id: s.task_id,
                    labels: s.label_set.clone(),
                    s: e.start,
                    e: e.end,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { tasks, seed })
    }

    pub fn timeline(&self) -> Result<TaskTimeline> {
        TaskTimeline::new(
            self.tasks
                .iter()
                .map(|t| TimelineEntry {
                    task_id: t.id,
                    start: t.s,
                    end: t.e,
                })
                .collect(),
        )
    }

    /// Rebuilds the task samples for this manifest; the sample partition is
    /// the one `build_parallel_split` makes for the same dataset and seed.
    pub fn apply(&self, dataset: &Dataset) -> Result<(Vec<TaskSpec>, TaskTimeline)> {
        for (i, t) in self.tasks.iter().enumerate() {
            if t.id != i + 1 {
                return Err(Error::Config(format!(
                    "manifest task ids must be 1..=T, found {}",
                    t.id
                )));
            }
            if let Some(&bad) = t.labels.iter().find(|&&l| l >= dataset.num_classes) {
                return Err(Error::Config(format!(
                    "task {} uses label {bad} but the dataset has {} classes",
                    t.id, dataset.num_classes
                )));
            }
            if t.labels.windows(2).any(|w| w[0] >= w[1]) || t.labels.len() < 2 {
                return Err(Error::Config(format!(
                    "task {} label set must be sorted, distinct, and hold at least 2 labels",
                    t.id
                )));
            }
        }
        let sets: Vec<Vec<usize>> = self.tasks.iter().map(|t| t.labels.clone()).collect();
        let mut rng = seeding::substream(self.seed, seeding::PARTITION);
        let specs = materialize(dataset, &sets, &mut rng)?;
        Ok((specs, self.timeline()?))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Position within a seeded per-epoch shuffle of one task's samples.
#[derive(Debug, Clone)]
pub struct StreamCursor {
    len: usize,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    epochs: usize,
    rng: ChaCha8Rng,
}

impl StreamCursor {
    pub fn new(len: usize, epochs: usize, rng: ChaCha8Rng) -> Self {
        let mut cursor = Self {
            len,
            order: (0..len).collect(),
            pos: 0,
            epoch: 0,
            epochs,
            rng,
        };
        cursor.order.shuffle(&mut cursor.rng);
        cursor
    }

    /// Cursor for a task's training stream, seeded from the run seed.
    pub fn for_task(spec: &TaskSpec, epochs: usize, seed: u64) -> Self {
        Self::new(
            spec.train.len(),
            epochs,
            seeding::indexed_substream(seed, seeding::SHUFFLE, spec.task_id as u64),
        )
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.epochs || self.len == 0
    }

    /// Row indices of the next batch; `None` once every epoch is consumed.
    pub fn next_indices(&mut self, batch_size: usize) -> Option<Vec<usize>> {
        if self.is_finished() || batch_size == 0 {
            return None;
        }
        let end = (self.pos + batch_size).min(self.len);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        if self.pos == self.len {
            self.epoch += 1;
            self.pos = 0;
            if self.epoch < self.epochs {
                self.order.shuffle(&mut self.rng);
            }
        }
        Some(out)
    }
}

/// Next training batch of `spec` with local labels, or `None` at stream end.
pub fn next_batch(
    spec: &TaskSpec,
    batch_size: usize,
    cursor: &mut StreamCursor,
) -> Result<Option<Batch>> {
    match cursor.next_indices(batch_size) {
        Some(rows) => spec.train_batch(&rows).map(Some),
        None => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub input_dim: usize,
    pub noise_sigma: f64,
    pub samples_per_class: usize,
    #[serde(default)]
    pub test_samples_per_class: usize,
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(
                "synthetic data needs at least 2 classes".into(),
            ));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "noise_sigma {} is invalid",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Class centers in `[0,1]^dim`, pairwise at least `4·noise_sigma` apart.
fn draw_centers(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let min_gap = 4.0 * cfg.noise_sigma;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(cfg.classes);
    let mut attempts = 0;
    while centers.len() < cfg.classes {
        attempts += 1;
        if attempts > 10_000 * cfg.classes {
            return Err(Error::Config(format!(
                "cannot place {} centers {min_gap} apart in [0,1]^{}",
                cfg.classes, cfg.input_dim
            )));
        }
        let c: Vec<f64> = (0..cfg.input_dim).map(|_| rng.random::<f64>()).collect();
        let far = centers.iter().all(|o| {
            o.iter()
                .zip(&c)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
                >= min_gap
        });
        if far {
            centers.push(c);
        }
    }
    Ok(centers)
}

fn blob_samples(
    centers: &[Vec<f64>],
    per_class: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> LabeledData {
    let dim = centers[0].len();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = centers.len() * per_class;
    let mut inputs = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        for i in 0..per_class {
            let r = class * per_class + i;
            for (j, c) in center.iter().enumerate() {
                inputs[[r, j]] = (c + sigma * normal.sample(rng)).clamp(0.0, 1.0);
            }
            labels.push(class);
        }
    }
    LabeledData { inputs, labels }
}

/// Gaussian blobs around seeded centers, clamped to `[0,1]`.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = seeding::substream(seed, seeding::DATA);
    let centers = draw_centers(cfg, &mut rng)?;
    let train = blob_samples(&centers, cfg.samples_per_class, cfg.noise_sigma, &mut rng);
    let test = blob_samples(
        &centers,
        cfg.test_samples_per_class,
        cfg.noise_sigma,
        &mut rng,
    );
    Ok(Dataset {
        num_classes: cfg.classes,
        train,
        test,
    })
}

/// The whole dataset as one task.
pub fn single_task(dataset: &Dataset, task_id: TaskId) -> TaskSpec {
    TaskSpec {
        task_id,
        label_set: (0..dataset.num_classes).collect(),
        train: dataset.train.clone(),
        test: dataset.test.clone(),
    }
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            message: "truncated header".into(),
        })
}

fn check_magic(bytes: &[u8], want: u32) -> Result<()> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != want {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic 0x{magic:08x}, expected 0x{want:08x}"),
        });
    }
    Ok(())
}

fn payload(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8]> {
    bytes
        .get(offset..offset + len)
        .ok_or_else(|| Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated data: expected {len} bytes from offset {offset}"),
        })
}

/// IDX image file → `count × (rows·cols)` matrix scaled to `[0,1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Array2<f64>> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    let dim = rows * cols;
    let data = payload(bytes, 16, count * dim)?;
    Ok(Array2::from_shape_fn((count, dim), |(i, j)| {
        f64::from(data[i * dim + j]) / 255.0
    }))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = read_be_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, count)?
        .iter()
        .map(|&b| usize::from(b))
        .collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledData> {
    let inputs = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if inputs.nrows() != labels.len() {
        return Err(Error::Format {
            offset: 4,
            message: format!("{} images but {} labels", inputs.nrows(), labels.len()),
        });
    }
    Ok(LabeledData { inputs, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn blobs(classes: usize, per_class: usize) -> Dataset {
        generate_synthetic(
            &SyntheticConfig {
                classes,
                input_dim: 4,
                noise_sigma: 0.05,
                samples_per_class: per_class,
                test_samples_per_class: 3,
            },
            7,
        )
        .unwrap()
    }

    fn interval_scan(tl: &TaskTimeline, tick: u64) -> Vec<TaskId> {
        let mut out = Vec::new();
        if tl.entries().iter().any(|e| e.end < tick) {
            out.push(0);
        }
        for e in tl.entries() {
            if e.start <= tick && tick <= e.end {
                out.push(e.task_id);
            }
        }
        out.sort_unstable();
        out
    }

    fn check_timeline(tl: &TaskTimeline) {
        let es = tl.entries();
        let mut max_end = es[0].end;
        assert_eq!(es[0].start, 0);
        for w in 1..es.len() {
            assert!(es[w - 1].start <= es[w].start);
            assert!(es[w].start <= max_end + 1);
            max_end = max_end.max(es[w].end);
        }
        for tick in tl.first_tick()..=tl.last_tick() {
            assert!(es.iter().any(|e| e.start <= tick && tick <= e.end));
        }
    }

    #[test]
    fn single_task_split() {
        let ds = blobs(6, 10);
        let mut cfg = SplitConfig::new(1, (6, 6));
        cfg.batch_size = 7;
        let (specs, tl) = build_parallel_split(&ds, &cfg, 1234).unwrap();
        assert_eq!(specs.len(), 1);
        assert_eq!(specs[0].label_set, (0..6).collect::<Vec<_>>());
        assert_eq!(specs[0].train.len(), 60);
        assert_eq!(
            tl.entries(),
            &[TimelineEntry {
                task_id: 1,
                start: 0,
                end: 8
            }]
        );
    }

    #[test]
    fn split_is_deterministic() {
        let ds = blobs(12, 5);
        let cfg = SplitConfig::new(3, (2, 4));
        assert_eq!(
            build_parallel_split(&ds, &cfg, 1234).unwrap(),
            build_parallel_split(&ds, &cfg, 1234).unwrap()
        );
    }

    #[test]
    fn emnist_sized_split_respects_bounds() {
        let ds = blobs(62, 2);
        for seed in 0..50 {
            let (specs, _) =
                build_parallel_split(&ds, &SplitConfig::new(5, (2, 15)), seed).unwrap();
            for (i, s) in specs.iter().enumerate() {
                assert!((2..=15).contains(&s.class_count()));
                for o in &specs[i + 1..] {
                    assert!(s.label_set.iter().all(|l| !o.label_set.contains(l)));
                }
            }
        }
    }

    #[test]
    fn infeasible_bounds_are_config_errors() {
        let ds = blobs(5, 2);
        assert!(matches!(
            build_parallel_split(&ds, &SplitConfig::new(3, (2, 4)), 1),
            Err(Error::Config(_))
        ));
        assert!(build_parallel_split(&ds, &SplitConfig::new(1, (5, 3)), 1).is_err());
    }

    #[test]
    fn overlap_shares_predecessor_labels() {
        let ds = blobs(30, 4);
        let mut cfg = SplitConfig::new(4, (2, 6));
        cfg.overlap_fraction = 0.5;
        for seed in 0..30 {
            let (specs, _) = build_parallel_split(&ds, &cfg, seed).unwrap();
            for w in specs.windows(2) {
                let shared = w[1]
                    .label_set
                    .iter()
                    .filter(|l| w[0].label_set.contains(l))
                    .count();
                assert!(shared >= w[1].class_count().div_ceil(2));
            }
            // Each training row belongs to exactly one task.
            let total: usize = specs.iter().map(|s| s.train.len()).sum();
            let classes: std::collections::BTreeSet<usize> =
                specs.iter().flat_map(|s| s.label_set.clone()).collect();
            assert_eq!(total, classes.len() * 4);
        }
    }

    #[test]
    fn timelines_are_valid_across_seeds() {
        let durations = [(1, 5), (2, 1), (3, 9), (4, 3)];
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tl = TaskTimeline::generate(&durations, false, &mut rng).unwrap();
            check_timeline(&tl);
            for tick in tl.first_tick()..=tl.last_tick() {
                assert_eq!(tl.active_tasks(tick).unwrap(), interval_scan(&tl, tick));
            }
        }
    }

    #[test]
    fn serial_timeline_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tl = TaskTimeline::generate(&[(1, 4), (2, 2), (3, 3)], true, &mut rng).unwrap();
        let es = tl.entries();
        assert_eq!((es[1].start, es[2].start), (4, 6));
        assert_eq!(tl.active_tasks(5).unwrap(), vec![0, 2]);
        assert_eq!(tl.active_tasks(2).unwrap(), vec![1]);
    }

    #[test]
    fn active_task_examples() {
        let tl = TaskTimeline::new(vec![
            TimelineEntry {
                task_id: 1,
                start: 0,
                end: 4,
            },
            TimelineEntry {
                task_id: 2,
                start: 3,
                end: 9,
            },
        ])
        .unwrap();
        assert_eq!(tl.active_tasks(1).unwrap(), vec![1]);
        assert_eq!(tl.active_tasks(4).unwrap(), vec![1, 2]);
        assert_eq!(tl.active_tasks(6).unwrap(), vec![0, 2]);
        assert!(matches!(
            tl.active_tasks(10),
            Err(Error::OutOfRange { tick: 10, .. })
        ));
        assert!(TaskTimeline::new(vec![
            TimelineEntry {
                task_id: 1,
                start: 0,
                end: 4
            },
            TimelineEntry {
                task_id: 2,
                start: 6,
                end: 9
            },
        ])
        .is_err());
    }

    #[test]
    fn cursor_batches_cover_each_epoch() {
        let mut c = StreamCursor::new(10, 2, ChaCha8Rng::seed_from_u64(3));
        let mut sizes = Vec::new();
        let mut epoch_rows = vec![Vec::new(), Vec::new()];
        while let Some(rows) = c.next_indices(3) {
            epoch_rows[sizes.len() / 4].extend(rows.iter().copied());
            sizes.push(rows.len());
        }
        assert_eq!(sizes, vec![3, 3, 3, 1, 3, 3, 3, 1]);
        for mut rows in epoch_rows {
            rows.sort_unstable();
            assert_eq!(rows, (0..10).collect::<Vec<_>>());
        }
        assert!(c.next_indices(3).is_none());

        let mut big = StreamCursor::new(4, 1, ChaCha8Rng::seed_from_u64(3));
        let mut rows = big.next_indices(100).unwrap();
        rows.sort_unstable();
        assert_eq!(rows, vec![0, 1, 2, 3]);
        assert!(big.next_indices(100).is_none());
    }

    #[test]
    fn next_batch_uses_local_labels() {
        let ds = blobs(8, 5);
        let (specs, _) = build_parallel_split(&ds, &SplitConfig::new(2, (3, 4)), 9).unwrap();
        let spec = &specs[1];
        let mut cursor = StreamCursor::for_task(spec, 1, 9);
        let mut seen = 0;
        while let Some(b) = next_batch(spec, 4, &mut cursor).unwrap() {
            assert!(b.labels.iter().all(|&l| l < spec.class_count()));
            assert!(b.tasks.iter().all(|&t| t == 2));
            seen += b.len();
        }
        assert_eq!(seen, spec.train.len());
    }

    #[test]
    fn zero_noise_gives_centers() {
        let ds = generate_synthetic(
            &SyntheticConfig {
                classes: 3,
                input_dim: 5,
                noise_sigma: 0.0,
                samples_per_class: 4,
                test_samples_per_class: 1,
            },
            5,
        )
        .unwrap();
        for class in 0..3 {
            let rows: Vec<_> = (0..12).filter(|&r| ds.train.labels[r] == class).collect();
            for r in &rows[1..] {
                assert_eq!(ds.train.inputs.row(*r), ds.train.inputs.row(rows[0]));
            }
        }
        assert_eq!(blobs(4, 3), blobs(4, 3));
    }

    #[test]
    fn manifest_round_trip_rebuilds_split() {
        let ds = blobs(10, 6);
        let (specs, tl) = build_parallel_split(&ds, &SplitConfig::new(3, (2, 3)), 1235).unwrap();
        let m = SplitManifest::from_split(&specs, &tl, 1235).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let back: SplitManifest = serde_json::from_str(&json).unwrap();
        let (specs2, tl2) = back.apply(&ds).unwrap();
        assert_eq!(tl2, tl);
        assert_eq!(
            specs2.iter().map(|s| &s.label_set).collect::<Vec<_>>(),
            specs.iter().map(|s| &s.label_set).collect::<Vec<_>>()
        );
        assert!(
            serde_json::from_str::<SplitManifest>(r#"{"tasks":[],"seed":1,"extra":0}"#).is_err()
        );
    }

    fn idx_images(count: u32, rows: u32, cols: u32, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
            out.extend(v.to_be_bytes());
        }
        out.extend(data);
        out
    }

    #[test]
    fn idx_fixtures() {
        let pixels: Vec<u8> = (0..18).map(|i| (i * 15) as u8).collect();
        let img = parse_idx_images(&idx_images(2, 3, 3, &pixels)).unwrap();
        assert_eq!(img.dim(), (2, 9));
        assert_eq!(img[[0, 0]], 0.0);
        assert_eq!(img[[1, 8]], 255.0 / 255.0);
        assert_eq!(img[[0, 4]], 60.0 / 255.0);

        let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        labels.extend(2u32.to_be_bytes());
        labels.extend([7, 3]);
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![7, 3]);

        assert_eq!(
            parse_idx_images(&idx_images(0, 28, 28, &[]))
                .unwrap()
                .nrows(),
            0
        );

        let mut bad = idx_images(2, 3, 3, &pixels);
        bad[3] = 0x01;
        assert!(matches!(
            parse_idx_images(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            parse_idx_images(&idx_images(2, 3, 3, &pixels[..10])),
            Err(Error::Format { .. })
        ));
    }
}
