//! The timeline-driven training loop, the two-function toy problem and
//! continual-learning metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::warn;
use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moo_solver::{
    avg_grad, elastic_factors_gmc, elastic_factors_gs, norm, pareto_descent_check, solve_emgd,
    solve_mgda, CombinationResult, ElasticFactors, ElasticState, GradientBundle, SolverOptions,
};
use crate::rehearsal::{
    edit_memory_emgd, edit_memory_gmed, EditConfig, MemoryBuffer, MemorySample,
};
use crate::seeding;
use crate::streams::{next_batch, StreamCursor, TaskSpec, TaskTimeline};
use crate::tinynet::{Network, NetworkConfig};
use crate::{TaskId, MEMORY_TASK};

/// Tolerance of the per-tick Pareto descent certificate.
pub const PARETO_TOL: f64 = 1e-8;

/// How task gradients are combined into one backbone direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    EmgdGmc,
    EmgdGs,
    Mgda,
    AvgGrad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Editing {
    None,
    Emgd,
    Gmed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Each sample is routed through its own task's head.
    TaskIncremental,
    /// Argmax over the concatenated logits of every head.
    ClassIncremental,
}

macro_rules! named_enum {
    ($ty:ty, $($variant:path => $name:literal),+ $(,)?) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self {
                    $($variant => $name),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            /// Accepts `snake_case` or `kebab-case`.
            fn from_str(s: &str) -> Result<Self> {
                match s.replace('-', "_").as_str() {
                    $($name => Ok($variant),)+
                    _ => Err(Error::Config(format!(
                        "unknown {} '{s}' (expected one of: {})",
                        stringify!($ty).to_lowercase(),
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}

named_enum!(Method, Method::EmgdGmc => "emgd_gmc", Method::EmgdGs => "emgd_gs", Method::Mgda => "mgda", Method::AvgGrad => "avg_grad");
named_enum!(Editing, Editing::None => "none", Editing::Emgd => "emgd", Editing::Gmed => "gmed");
named_enum!(EvalMode, EvalMode::TaskIncremental => "task_incremental", EvalMode::ClassIncremental => "class_incremental");

impl Method {
    pub fn is_pareto(self) -> bool {
        !matches!(self, Method::AvgGrad)
    }
}

/// Per-tick state carried by a combiner (GMC momentum).
#[derive(Debug, Clone, PartialEq)]
pub struct Combiner {
    pub method: Method,
    pub temperature: f64,
    pub solver: SolverOptions,
    state: ElasticState,
}

/// One tick's combined direction and the elastic factors behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Combination {
    pub result: CombinationResult,
    /// `None` for AvgGrad, which has no factors.
    pub sigma: Option<ElasticFactors>,
    /// Pareto certificate; `None` for AvgGrad.
    pub pareto_ok: Option<bool>,
}

impl Combiner {
    pub fn new(method: Method, temperature: f64, solver: SolverOptions) -> Self {
        Self {
            method,
            temperature,
            solver,
            state: ElasticState::new(temperature),
        }
    }

    pub fn combine(&mut self, bundle: &GradientBundle) -> Result<Combination> {
        let sigma = match self.method {
            Method::EmgdGmc => Some(elastic_factors_gmc(bundle, &mut self.state)?),
            Method::EmgdGs => Some(match elastic_factors_gs(bundle, self.temperature) {
                Err(Error::DegenerateGradient { task }) => {
                    warn!("task {task} has a zero gradient; using uniform elastic factors");
                    ElasticFactors::uniform(bundle.len())
                }
                other => other?,
            }),
            Method::Mgda => Some(ElasticFactors::ones(bundle.len())),
            Method::AvgGrad => None,
        };
        let result = match (self.method, &sigma) {
            (Method::AvgGrad, _) => avg_grad(bundle),
            (Method::Mgda, _) => solve_mgda(bundle, self.solver)?,
            (_, Some(s)) => solve_emgd(bundle, s, self.solver)?,
            (_, None) => unreachable!("factors exist for every elastic method"),
        };
        if !result.converged {
            warn!(
                "solver stopped after {} iterations without converging; using the best iterate",
                result.iterations
            );
        }
        let pareto_ok = sigma
            .as_ref()
            .map(|s| pareto_descent_check(bundle, s, &result, PARETO_TOL));
        Ok(Combination {
            result,
            sigma,
            pareto_ok,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_editing")]
    pub editing: Editing,
    #[serde(default = "default_eval_mode")]
    pub eval_mode: EvalMode,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_gamma")]
    pub gamma_heads: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_batch_size")]
    pub memory_batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Extra evaluation cadence in ticks; 0 evaluates only at each `e_t` and `ē`.
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_capacity")]
    pub capacity_per_class: usize,
    #[serde(default)]
    pub edit: EditConfig,
    #[serde(default)]
    pub freeze_finished_heads: bool,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
}

fn default_method() -> Method {
    Method::EmgdGs
}

fn default_editing() -> Editing {
    Editing::None
}

fn default_eval_mode() -> EvalMode {
    EvalMode::TaskIncremental
}

fn default_gamma() -> f64 {
    0.05
}

fn default_batch_size() -> usize {
    128
}

fn default_epochs() -> usize {
    1
}

fn default_temperature() -> f64 {
    1.0
}

fn default_seed() -> u64 {
    1234
}

fn default_capacity() -> usize {
    30
}

fn default_hidden() -> Vec<usize> {
    vec![100]
}

fn default_feature_dim() -> usize {
    64
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: default_method(),
            editing: default_editing(),
            eval_mode: default_eval_mode(),
            gamma: default_gamma(),
            gamma_heads: default_gamma(),
            batch_size: default_batch_size(),
            memory_batch_size: default_batch_size(),
            epochs: default_epochs(),
            temperature: default_temperature(),
            eval_every: 0,
            seed: default_seed(),
            capacity_per_class: default_capacity(),
            edit: EditConfig::default(),
            freeze_finished_heads: false,
            solver: SolverOptions::default(),
            hidden: default_hidden(),
            feature_dim: default_feature_dim(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.gamma) || !positive(self.gamma_heads) {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        if !positive(self.temperature) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.batch_size == 0 || self.memory_batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch sizes and epochs must be positive".into(),
            ));
        }
        if self.capacity_per_class == 0 {
            return Err(Error::Config("capacity_per_class must be positive".into()));
        }
        if !(self.solver.tol.is_finite() && self.solver.tol > 0.0) {
            return Err(Error::Config("solver tolerance must be positive".into()));
        }
        self.edit.validate()
    }

    pub fn network_config(&self, input_dim: usize) -> NetworkConfig {
        NetworkConfig {
            input_dim,
            hidden: self.hidden.clone(),
            feature_dim: self.feature_dim,
        }
    }
}

/// `a^t_k`: test accuracy of task `t` measured at tick `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    finish_ticks: BTreeMap<TaskId, u64>,
    entries: BTreeMap<TaskId, BTreeMap<u64, f64>>,
}

impl AccuracyMatrix {
    pub fn new(finish_ticks: BTreeMap<TaskId, u64>) -> Self {
        Self {
            finish_ticks,
            entries: BTreeMap::new(),
        }
    }

    pub fn for_timeline(timeline: &TaskTimeline) -> Self {
        Self::new(
            timeline
                .entries()
                .iter()
                .map(|e| (e.task_id, e.end))
                .collect(),
        )
    }

    pub fn finish_ticks(&self) -> &BTreeMap<TaskId, u64> {
        &self.finish_ticks
    }

    /// `ē`.
    pub fn final_tick(&self) -> u64 {
        self.finish_ticks.values().copied().max().unwrap_or(0)
    }

    pub fn record(&mut self, task: TaskId, tick: u64, accuracy: f64) -> Result<()> {
        if !self.finish_ticks.contains_key(&task) {
            return Err(Error::UnknownTask(task));
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::InvalidInput(format!(
                "accuracy {accuracy} outside [0, 1]"
            )));
        }
        self.entries.entry(task).or_default().insert(tick, accuracy);
        Ok(())
    }

    pub fn get(&self, task: TaskId, tick: u64) -> Option<f64> {
        self.entries.get(&task)?.get(&tick).copied()
    }

    pub fn entries(&self) -> &BTreeMap<TaskId, BTreeMap<u64, f64>> {
        &self.entries
    }

    fn require(&self, task: TaskId, tick: u64) -> Result<f64> {
        self.get(task, tick).ok_or_else(|| {
            Error::IncompleteMatrix(format!("no accuracy for task {task} at tick {tick}"))
        })
    }
}

/// `a^t_{e_t}` and `a^t_ē` of one task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskAccuracy {
    pub finish: f64,
    #[serde(rename = "final")]
    pub last: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "A_final")]
    pub a_final: f64,
    #[serde(rename = "F_final")]
    pub f_final: f64,
    pub per_task: BTreeMap<TaskId, TaskAccuracy>,
}

/// `A = mean_t a^t_ē`, `F = mean_t (a^t_ē − a^t_{e_t})`.
pub fn compute_metrics(matrix: &AccuracyMatrix) -> Result<Metrics> {
    if matrix.finish_ticks.is_empty() {
        return Err(Error::IncompleteMatrix("no tasks".into()));
    }
    let last = matrix.final_tick();
    let mut per_task = BTreeMap::new();
    for (&task, &end) in &matrix.finish_ticks {
        per_task.insert(
            task,
            TaskAccuracy {
                finish: matrix.require(task, end)?,
                last: matrix.require(task, last)?,
            },
        );
    }
    let t = per_task.len() as f64;
    let a_final = per_task.values().map(|a| a.last).sum::<f64>() / t;
    let f_final = per_task.values().map(|a| a.last - a.finish).sum::<f64>() / t;
    Ok(Metrics {
        a_final,
        f_final,
        per_task,
    })
}

/// Metrics plus the run identity, as written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    #[serde(rename = "A_final")]
    pub a_final: f64,
    #[serde(rename = "F_final")]
    pub f_final: f64,
    pub per_task: BTreeMap<TaskId, TaskAccuracy>,
    pub method: Method,
    pub editing: Editing,
    pub eval_mode: EvalMode,
    pub seed: u64,
}

/// One row of the tick log.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub tick: u64,
    pub active_tasks: Vec<TaskId>,
    /// Mini-batch loss per bundle entry, before the update.
    pub losses: Vec<(TaskId, f64)>,
    pub lambda: Vec<f64>,
    pub sigma: Option<Vec<f64>>,
    pub d_norm: f64,
    pub edit_objective: Option<f64>,
    pub pareto_ok: Option<bool>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub task_incremental: AccuracyMatrix,
    pub class_incremental: AccuracyMatrix,
    pub ticks: Vec<TickRecord>,
}

impl RunOutput {
    pub fn matrix(&self, mode: EvalMode) -> &AccuracyMatrix {
        match mode {
            EvalMode::TaskIncremental => &self.task_incremental,
            EvalMode::ClassIncremental => &self.class_incremental,
        }
    }

    pub fn metrics(&self, cfg: &RunConfig) -> Result<RunMetrics> {
        self.metrics_for(cfg, cfg.eval_mode)
    }

    pub fn metrics_for(&self, cfg: &RunConfig, mode: EvalMode) -> Result<RunMetrics> {
        let m = compute_metrics(self.matrix(mode))?;
        Ok(RunMetrics {
            a_final: m.a_final,
            f_final: m.f_final,
            per_task: m.per_task,
            method: cfg.method,
            editing: cfg.editing,
            eval_mode: mode,
            seed: cfg.seed,
        })
    }

    pub fn probe(&self) -> ConvergenceReport {
        let d: Vec<f64> = self.ticks.iter().map(|t| t.d_norm).collect();
        let losses: Vec<BTreeMap<TaskId, f64>> = self
            .ticks
            .iter()
            .map(|t| t.losses.iter().copied().collect())
            .collect();
        convergence_probe(&d, &losses)
    }
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

/// Tick log CSV. List-valued cells are `;`-separated; losses are `task:loss`.
pub fn write_tick_log<W: Write>(w: W, ticks: &[TickRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "tick",
        "active_tasks",
        "losses",
        "lambda",
        "sigma",
        "d_norm",
        "edit_objective",
        "pareto_ok",
    ])?;
    for t in ticks {
        out.write_record([
            t.tick.to_string(),
            join(&t.active_tasks),
            join(t.losses.iter().map(|(id, l)| format!("{id}:{l}"))),
            join(&t.lambda),
            t.sigma.as_ref().map(join).unwrap_or_default(),
            t.d_norm.to_string(),
            t.edit_objective.map(|v| v.to_string()).unwrap_or_default(),
            t.pareto_ok.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Test accuracy of `spec`, routed through its own head.
pub fn task_incremental_accuracy(net: &Network, spec: &TaskSpec) -> Result<f64> {
    let features = net.features(&spec.test.inputs)?;
    let logits = net.head_logits(spec.task_id, &features)?;
    let correct = logits
        .axis_iter(Axis(0))
        .zip(&spec.test.labels)
        .filter(|(row, y)| argmax(row.iter().copied()) == **y)
        .count();
    Ok(correct as f64 / spec.test.len() as f64)
}

/// Test accuracy of `spec` when the prediction is the global class of the
/// largest logit across every head in `heads`.
pub fn class_incremental_accuracy(
    net: &Network,
    spec: &TaskSpec,
    heads: &[&TaskSpec],
) -> Result<f64> {
    let features = net.features(&spec.test.inputs)?;
    let mut classes: Vec<usize> = Vec::new();
    let mut blocks = Vec::new();
    for h in heads {
        classes.extend(&h.label_set);
        blocks.push(net.head_logits(h.task_id, &features)?);
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let logits =
        ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Numeric(e.to_string()))?;
    let correct = logits
        .axis_iter(Axis(0))
        .zip(&spec.test.labels)
        .filter(|(row, y)| classes[argmax(row.iter().copied())] == spec.global_label(**y))
        .count();
    Ok(correct as f64 / spec.test.len() as f64)
}

/// First index of the maximum.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn check_run_inputs(
    net: &Network,
    specs: &[TaskSpec],
    timeline: &TaskTimeline,
    cfg: &RunConfig,
) -> Result<()> {
    cfg.validate()?;
    if specs.len() != timeline.entries().len() {
        return Err(Error::Config(format!(
            "{} task specs for {} timeline entries",
            specs.len(),
            timeline.entries().len()
        )));
    }
    for spec in specs {
        let entry = timeline.entry(spec.task_id)?;
        if spec.train.dim() != net.input_dim() {
            return Err(Error::Config(format!(
                "task {} inputs have width {}, network expects {}",
                spec.task_id,
                spec.train.dim(),
                net.input_dim()
            )));
        }
        if spec.test.is_empty() {
            return Err(Error::Config(format!(
                "task {} has no test samples",
                spec.task_id
            )));
        }
        let ticks = cfg.epochs as u64 * spec.batches_per_epoch(cfg.batch_size);
        if entry.end - entry.start + 1 != ticks {
            return Err(Error::Config(format!(
                "task {} window [{}, {}] does not match {ticks} ticks of batch size {} over {} epochs",
                spec.task_id, entry.start, entry.end, cfg.batch_size, cfg.epochs
            )));
        }
        if net.has_head(spec.task_id) {
            return Err(Error::AlreadyExists(spec.task_id));
        }
    }
    Ok(())
}

fn tick_failure(tick: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric(message) => Error::TickFailure { tick, message },
        other => other,
    }
}

/// Runs parallel continual learning over `timeline`, mutating `net` and `buffer`.
pub fn run_pcl(
    specs: &[TaskSpec],
    timeline: &TaskTimeline,
    net: &mut Network,
    buffer: &mut MemoryBuffer,
    cfg: &RunConfig,
) -> Result<RunOutput> {
    check_run_inputs(net, specs, timeline, cfg)?;
    let by_id: BTreeMap<TaskId, &TaskSpec> = specs.iter().map(|s| (s.task_id, s)).collect();
    let mut cursors: BTreeMap<TaskId, StreamCursor> = specs
        .iter()
        .map(|s| (s.task_id, StreamCursor::for_task(s, cfg.epochs, cfg.seed)))
        .collect();
    let mut memory_rng = seeding::substream(cfg.seed, seeding::MEMORY);
    let mut reservoir_rng = seeding::substream(cfg.seed, seeding::RESERVOIR);
    let mut combiner = Combiner::new(cfg.method, cfg.temperature, cfg.solver);
    let mut ti = AccuracyMatrix::for_timeline(timeline);
    let mut ci = AccuracyMatrix::for_timeline(timeline);
    let mut ticks = Vec::new();
    let (first, last) = (timeline.first_tick(), timeline.last_tick());

    for tick in first..=last {
        let fail = tick_failure(tick);
        for task in timeline.starting_at(tick) {
            let classes = by_id[&task].class_count();
            net.add_head(
                task,
                classes,
                seeding::derived_seed(cfg.seed, seeding::INIT, task as u64),
            )?;
        }
        let active = timeline.active_tasks(tick)?;

        let mut ids = Vec::new();
        let mut grads = Vec::new();
        let mut losses = Vec::new();
        let mut head_updates = BTreeMap::new();
        let mut memory: Option<MemorySample> = None;
        for &task in &active {
            let batch = if task == MEMORY_TASK {
                match buffer.sample(cfg.memory_batch_size, &mut memory_rng) {
                    Ok(sample) => {
                        let b = sample.batch.clone();
                        memory = Some(sample);
                        b
                    }
                    Err(Error::EmptyMemory) => continue,
                    Err(e) => return Err(e),
                }
            } else {
                let cursor = cursors.get_mut(&task).expect("cursor per task");
                next_batch(by_id[&task], cfg.batch_size, cursor)?.ok_or_else(|| {
                    Error::Config(format!("stream of task {task} ended before tick {tick}"))
                })?
            };
            let report = net.backward(&batch)?;
            if !report.loss.is_finite() {
                return Err(Error::TickFailure {
                    tick,
                    message: format!("loss of task {task} is {}", report.loss),
                });
            }
            for (head, grad) in report.head_grads {
                if task == MEMORY_TASK && cfg.freeze_finished_heads {
                    continue;
                }
                head_updates.insert(head, (grad, cfg.gamma_heads));
            }
            ids.push(task);
            grads.push(report.backbone_grad.iter().map(|v| -v).collect());
            losses.push((task, report.loss));
        }

        let bundle = GradientBundle::new(ids, grads).map_err(&fail)?;
        let combo = combiner.combine(&bundle).map_err(&fail)?;
        let d = &combo.result.direction;
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::TickFailure {
                tick,
                message: "combined direction is not finite".into(),
            });
        }
        net.apply_update(d, cfg.gamma, &head_updates)?;

        let edit_objective = match (cfg.editing, &memory) {
            (Editing::None, _) | (_, None) => None,
            (Editing::Emgd, Some(m)) => {
                Some(edit_memory_emgd(buffer, net, &m.slots, d, &cfg.edit).map_err(&fail)?)
            }
            (Editing::Gmed, Some(m)) => {
                Some(edit_memory_gmed(buffer, net, &m.slots, d, &cfg.edit).map_err(&fail)?)
            }
        }
        .map(|r| r.objective_after);

        for task in timeline.finishing_at(tick) {
            buffer.insert_task(by_id[&task], &mut reservoir_rng)?;
        }

        let finishing = !timeline.finishing_at(tick).is_empty();
        let cadence = cfg.eval_every > 0 && (tick - first) % cfg.eval_every == 0;
        if finishing || tick == last || cadence {
            let started: Vec<&TaskSpec> =
                specs.iter().filter(|s| net.has_head(s.task_id)).collect();
            for spec in &started {
                ti.record(spec.task_id, tick, task_incremental_accuracy(net, spec)?)?;
                ci.record(
                    spec.task_id,
                    tick,
                    class_incremental_accuracy(net, spec, &started)?,
                )?;
            }
        }

        ticks.push(TickRecord {
            tick,
            active_tasks: active,
            losses,
            lambda: combo.result.lambda.clone(),
            sigma: combo.sigma.map(|s| s.as_slice().to_vec()),
            d_norm: combo.result.direction_norm(),
            edit_objective,
            pareto_ok: combo.pareto_ok,
            converged: combo.result.converged,
        });
    }
    Ok(RunOutput {
        task_incremental: ti,
        class_incremental: ci,
        ticks,
    })
}

/// Fresh network and buffer for `cfg`, then [`run_pcl`].
pub fn run_pcl_fresh(
    specs: &[TaskSpec],
    timeline: &TaskTimeline,
    cfg: &RunConfig,
) -> Result<(RunOutput, Network, MemoryBuffer)> {
    let input_dim = specs
        .first()
        .map(|s| s.train.dim())
        .ok_or_else(|| Error::Config("no tasks".into()))?;
    let mut net = Network::new(
        &cfg.network_config(input_dim),
        seeding::derived_seed(cfg.seed, seeding::INIT, 0),
    )?;
    let mut buffer = MemoryBuffer::new(cfg.capacity_per_class)?;
    let out = run_pcl(specs, timeline, &mut net, &mut buffer, cfg)?;
    Ok((out, net, buffer))
}

/// Minimal direction norms and loss monotonicity over a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub initial_direction_norm: f64,
    pub min_direction_norm: f64,
    pub final_direction_norm: f64,
    /// Fraction of ticks (after the first) where every loss also present at
    /// the previous tick did not increase.
    pub nonincreasing_fraction: f64,
}

/// `losses[k]` holds the tracked losses at tick `k`; tasks absent at `k − 1`
/// are ignored for that comparison.
pub fn convergence_probe(d_norms: &[f64], losses: &[BTreeMap<TaskId, f64>]) -> ConvergenceReport {
    let first = d_norms.first().copied().unwrap_or(0.0);
    let min = d_norms.iter().copied().fold(f64::INFINITY, f64::min);
    let last = d_norms.last().copied().unwrap_or(0.0);
    let pairs = losses.len().saturating_sub(1);
    let ok = losses
        .windows(2)
        .filter(|w| {
            w[1].iter()
                .all(|(t, l)| w[0].get(t).is_none_or(|prev| l <= prev))
        })
        .count();
    ConvergenceReport {
        initial_direction_norm: first,
        min_direction_norm: if d_norms.is_empty() { 0.0 } else { min },
        final_direction_norm: last,
        nonincreasing_fraction: if pairs == 0 {
            1.0
        } else {
            ok as f64 / pairs as f64
        },
    }
}

/// Two objectives over a point in the plane, with analytic gradients.
pub trait TwoObjective {
    fn values(&self, p: [f64; 2]) -> [f64; 2];
    /// `[∇f_1, ∇f_2]`.
    fn gradients(&self, p: [f64; 2]) -> [[f64; 2]; 2];
}

/// `f_1 = ln(1+x²) + 0.8(1 − eˣ sin y)²`, `f_2 = ln(1+y²) + 0.004(0.1 + eʸ cos x)²`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ConflictToy;

impl TwoObjective for ConflictToy {
    fn values(&self, [x, y]: [f64; 2]) -> [f64; 2] {
        let a = 1.0 - x.exp() * y.sin();
        let b = 0.1 + y.exp() * x.cos();
        [
            (1.0 + x * x).ln() + 0.8 * a * a,
            (1.0 + y * y).ln() + 0.004 * b * b,
        ]
    }

    fn gradients(&self, [x, y]: [f64; 2]) -> [[f64; 2]; 2] {
        let (ex, ey) = (x.exp(), y.exp());
        let a = 1.0 - ex * y.sin();
        let b = 0.1 + ey * x.cos();
        [
            [
                2.0 * x / (1.0 + x * x) - 1.6 * a * ex * y.sin(),
                -1.6 * a * ex * y.cos(),
            ],
            [
                -0.008 * b * ey * x.sin(),
                2.0 * y / (1.0 + y * y) + 0.008 * b * ey * x.cos(),
            ],
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    #[serde(default = "default_toy_method")]
    pub method: Method,
    #[serde(default = "default_toy_iterations")]
    pub iterations: usize,
    #[serde(default = "default_toy_step")]
    pub step: f64,
    /// `f_2` joins after this many iterations.
    #[serde(default = "default_toy_join")]
    pub join_tick: usize,
    #[serde(default = "default_toy_start")]
    pub start: [f64; 2],
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub solver: SolverOptions,
}

fn default_toy_method() -> Method {
    Method::EmgdGs
}

fn default_toy_iterations() -> usize {
    1500
}

fn default_toy_step() -> f64 {
    2e-5
}

fn default_toy_join() -> usize {
    500
}

fn default_toy_start() -> [f64; 2] {
    [3.0, 3.0]
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self::new(default_toy_method())
    }
}

impl ToyConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            iterations: default_toy_iterations(),
            step: default_toy_step(),
            join_tick: default_toy_join(),
            start: default_toy_start(),
            temperature: default_temperature(),
            solver: SolverOptions::default(),
        }
    }
}

/// State after one toy iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRow {
    pub tick: usize,
    pub f1: f64,
    pub f2: f64,
    pub x: f64,
    pub y: f64,
    pub d_norm: f64,
    pub lambda: Vec<f64>,
    pub pareto_ok: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLog {
    pub method: Method,
    pub join_tick: usize,
    /// `(f_1, f_2)` at the start point.
    pub initial: [f64; 2],
    /// Row `k − 1` is the state after iteration `k`.
    pub rows: Vec<ToyRow>,
}

impl ToyLog {
    /// `(f_1, f_2)` after iteration `tick`; tick 0 is the start point.
    pub fn values_at(&self, tick: usize) -> Option<[f64; 2]> {
        match tick {
            0 => Some(self.initial),
            k => self.rows.get(k - 1).map(|r| [r.f1, r.f2]),
        }
    }

    /// Losses tracked from tick 0; `f_2` only once it has joined.
    pub fn probe(&self) -> ConvergenceReport {
        let d: Vec<f64> = self.rows.iter().map(|r| r.d_norm).collect();
        let mut losses = Vec::with_capacity(self.rows.len() + 1);
        let track = |tick: usize, [f1, f2]: [f64; 2]| {
            let mut m = BTreeMap::from([(1, f1)]);
            if tick >= self.join_tick {
                m.insert(2, f2);
            }
            m
        };
        losses.push(track(0, self.initial));
        for r in &self.rows {
            losses.push(track(r.tick, [r.f1, r.f2]));
        }
        convergence_probe(&d, &losses)
    }

    /// `tick,f1,f2,x,y,d_norm`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["tick", "f1", "f2", "x", "y", "d_norm"])?;
        for r in &self.rows {
            out.write_record([
                r.tick.to_string(),
                r.f1.to_string(),
                r.f2.to_string(),
                r.x.to_string(),
                r.y.to_string(),
                r.d_norm.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Steepest descent on `f_1` alone, then on both objectives through the
/// configured combiner from iteration `join_tick + 1` on.
pub fn run_toy<P: TwoObjective>(problem: &P, cfg: &ToyConfig) -> Result<ToyLog> {
    if !(cfg.step.is_finite() && cfg.step > 0.0) {
        return Err(Error::Config("toy step must be positive".into()));
    }
    let mut combiner = Combiner::new(cfg.method, cfg.temperature, cfg.solver);
    let mut p = cfg.start;
    let mut rows = Vec::with_capacity(cfg.iterations);
    for tick in 1..=cfg.iterations {
        let [g1, g2] = problem.gradients(p);
        let joint = tick > cfg.join_tick;
        let (ids, grads) = if joint {
            (vec![1, 2], vec![vec![-g1[0], -g1[1]], vec![-g2[0], -g2[1]]])
        } else {
            (vec![1], vec![vec![-g1[0], -g1[1]]])
        };
        let bundle = GradientBundle::new(ids, grads).map_err(tick_failure(tick as u64))?;
        let combo = combiner
            .combine(&bundle)
            .map_err(tick_failure(tick as u64))?;
        let d = &combo.result.direction;
        p = [p[0] + cfg.step * d[0], p[1] + cfg.step * d[1]];
        let [f1, f2] = problem.values(p);
        if !(f1.is_finite() && f2.is_finite()) {
            return Err(Error::TickFailure {
                tick: tick as u64,
                message: "toy iterate diverged".into(),
            });
        }
        rows.push(ToyRow {
            tick,
            f1,
            f2,
            x: p[0],
            y: p[1],
            d_norm: norm(d),
            lambda: combo.result.lambda.clone(),
            pareto_ok: combo.pareto_ok,
        });
    }
    Ok(ToyLog {
        method: cfg.method,
        join_tick: cfg.join_tick,
        initial: problem.values(cfg.start),
        rows,
    })
}
