//! Adam training with one task per batch, early stopping on the summed
//! validation log-likelihood, optimizer restarts, and the adapted schedule
//! (joint training followed by fine-tuning on the main task).

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Batch, Example};
use crate::error::{Error, Result};
use crate::model::{container, MultiTaskModel};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            alpha: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Shuffled batches of all tasks until early stopping.
    Default,
    /// Default, then the main task alone with a fresh optimizer.
    Adapted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Joint,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Joint => "joint",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub adam: AdamConfig,
    pub token_budget: usize,
    pub schedule: Schedule,
    /// Validations without improvement before early stopping triggers.
    pub patience: usize,
    pub max_restarts: usize,
    /// Validate every this many batches; one epoch when unset.
    pub validation_interval: Option<usize>,
    pub clip_norm: f64,
    /// Epoch cap per phase.
    pub max_epochs: usize,
    pub seed: u64,
    /// Append elapsed seconds to validation records.
    pub record_wall_clock: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            adam: AdamConfig::default(),
            token_budget: 512,
            schedule: Schedule::Default,
            patience: 3,
            max_restarts: 2,
            validation_interval: None,
            clip_norm: 5.0,
            max_epochs: 100,
            seed: 1,
            record_wall_clock: false,
        }
    }
}

impl TrainingConfig {
    /// All violations, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let a = &self.adam;
        if !(a.alpha > 0.0) {
            out.push(format!("adam.alpha must be positive, got {}", a.alpha));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            out.push("adam betas must lie in [0, 1)".into());
        }
        if !(a.eps > 0.0) {
            out.push(format!("adam.eps must be positive, got {}", a.eps));
        }
        if self.token_budget == 0 {
            out.push("token_budget must be positive".into());
        }
        if self.patience == 0 {
            out.push("patience must be positive".into());
        }
        if self.validation_interval == Some(0) {
            out.push("validation_interval must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            out.push(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.max_epochs == 0 {
            out.push("max_epochs must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.data_mut().fill(0.0);
        }
    }

    pub fn is_reset(&self) -> bool {
        self.step == 0 && self.m.iter().chain(&self.v).all(|t| t.data().iter().all(|&x| x == 0.0))
    }
}

/// One bias-corrected Adam update from the gradients in `store`. Gradients
/// are left in place.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimizerState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::shape("adam_step", &[state.m.len()], &[store.len()]));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if m.shape() != p.value.shape() {
            return Err(Error::shape("adam_step", m.shape(), p.value.shape()));
        }
        let g = p.grad.data();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (k, x) in p.value.data_mut().iter_mut().enumerate() {
            md[k] = cfg.beta1 * md[k] + (1.0 - cfg.beta1) * g[k];
            vd[k] = cfg.beta2 * vd[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let mh = md[k] / c1;
            let vh = vd[k] / c2;
            *x -= cfg.alpha * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// A position in one task's batch list.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BatchRef {
    pub task: String,
    pub index: usize,
}

/// Orders one epoch: all tasks shuffled together in the joint phase, the
/// main task alone in the finetune phase.
pub fn schedule_epoch<T>(
    batches_by_task: &[(String, Vec<T>)],
    phase: Phase,
    main_task: &str,
    rng: &mut impl Rng,
) -> Result<Vec<BatchRef>> {
    if phase == Phase::Finetune && !batches_by_task.iter().any(|(t, _)| t == main_task) {
        return Err(Error::UnknownTask(main_task.to_string()));
    }
    let mut refs: Vec<BatchRef> = batches_by_task
        .iter()
        .filter(|(t, _)| phase == Phase::Joint || t == main_task)
        .flat_map(|(t, bs)| (0..bs.len()).map(move |index| BatchRef { task: t.clone(), index }))
        .collect();
    if refs.is_empty() {
        return Err(Error::Empty("training batches"));
    }
    refs.shuffle(rng);
    Ok(refs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationScore {
    pub per_task: Vec<(String, f64)>,
    pub total: f64,
}

/// Teacher-forced log-likelihood of each validation set and their sum.
pub fn validate(model: &MultiTaskModel, sets: &[(String, Vec<Batch>)]) -> Result<ValidationScore> {
    if sets.is_empty() || sets.iter().any(|(_, b)| b.is_empty()) {
        return Err(Error::Empty("validation set"));
    }
    let mut per_task = Vec::with_capacity(sets.len());
    for (task, batches) in sets {
        let mut ll = 0.0;
        for b in batches {
            ll -= model.loss(b)? * b.target_tokens() as f64;
        }
        per_task.push((task.clone(), ll));
    }
    let total = per_task.iter().map(|(_, x)| x).sum();
    Ok(ValidationScore { per_task, total })
}

/// One task's training and validation examples.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub task: String,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Best validation total of the final phase.
    pub best_score: f64,
    pub log: Vec<String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct LossSum {
    weighted: f64,
    tokens: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Progress {
    phase: Phase,
    epoch: usize,
    batches_seen: u64,
    phase_batches: u64,
    restarts: usize,
    bad: usize,
    best_score: Option<f64>,
    started: bool,
    done: bool,
    /// Example ids of every batch of the current epoch, per task.
    plan: Vec<(String, Vec<Vec<usize>>)>,
    pending: VecDeque<BatchRef>,
    epoch_loss: BTreeMap<String, LossSum>,
    log: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: u128,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainingConfig,
    progress: Progress,
    rng: RngState,
    adam_step: u64,
    has_best: bool,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MTSEQCKP";
const CHECKPOINT_VERSION: u32 = 1;

/// Resumable training state machine. [`Trainer::run`] drives it to the end;
/// [`Trainer::step`] advances by one batch or one bookkeeping event.
pub struct Trainer {
    model: MultiTaskModel,
    optimizer: OptimizerState,
    config: TrainingConfig,
    data: Vec<TaskData>,
    valid: Vec<(String, Vec<Batch>)>,
    rng: ChaCha8Rng,
    epoch_batches: Vec<(String, Vec<Batch>)>,
    best: Option<Vec<Tensor>>,
    progress: Progress,
    clock: Instant,
}

fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

impl Trainer {
    pub fn new(model: MultiTaskModel, data: Vec<TaskData>, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Empty("training data"));
        }
        for d in &data {
            model.task(&d.task)?;
            if d.train.is_empty() {
                return Err(Error::Invalid(format!("task '{}' has no training examples", d.task)));
            }
            if d.valid.is_empty() {
                return Err(Error::Invalid(format!("task '{}' has no validation examples", d.task)));
            }
            if d.train.iter().chain(&d.valid).any(|e| e.task != d.task) {
                return Err(Error::Invalid(format!(
                    "task '{}' data contains foreign examples",
                    d.task
                )));
            }
        }
        let main = model.main_task().name.clone();
        if config.schedule == Schedule::Adapted && !data.iter().any(|d| d.task == main) {
            return Err(Error::Config(vec![format!(
                "adapted schedule needs data for main task '{main}'"
            )]));
        }
        let mut vrng = ChaCha8Rng::seed_from_u64(0);
        let valid = data
            .iter()
            .map(|d| Ok((d.task.clone(), make_batches(&d.valid, config.token_budget, &mut vrng)?)))
            .collect::<Result<Vec<_>>>()?;
        let config_json = serde_json::to_string(&config).map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(Trainer {
            optimizer: OptimizerState::new(model.params()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            progress: Progress {
                phase: Phase::Joint,
                epoch: 0,
                batches_seen: 0,
                phase_batches: 0,
                restarts: 0,
                bad: 0,
                best_score: None,
                started: false,
                done: false,
                plan: Vec::new(),
                pending: VecDeque::new(),
                epoch_loss: BTreeMap::new(),
                log: vec![format!("config {config_json}")],
            },
            model,
            config,
            data,
            valid,
            epoch_batches: Vec::new(),
            best: None,
            clock: Instant::now(),
        })
    }

    pub fn model(&self) -> &MultiTaskModel {
        &self.model
    }

    pub fn into_model(self) -> MultiTaskModel {
        self.model
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn log(&self) -> &[String] {
        &self.progress.log
    }

    pub fn phase(&self) -> Phase {
        self.progress.phase
    }

    pub fn is_done(&self) -> bool {
        self.progress.done
    }

    /// Adds extra lines right after the config record.
    pub fn annotate(&mut self, line: String) {
        self.progress.log.push(line);
    }

    /// The batch [`Trainer::step`] would train on next, if one is queued.
    pub fn peek_batch(&self) -> Option<&Batch> {
        let r = self.progress.pending.front()?;
        let (_, bs) = self.epoch_batches.iter().find(|(t, _)| *t == r.task)?;
        bs.get(r.index)
    }

    pub fn run(&mut self) -> Result<TrainOutcome> {
        while !self.progress.done {
            self.step()?;
        }
        Ok(TrainOutcome {
            best_score: self.progress.best_score.unwrap_or(f64::NEG_INFINITY),
            log: self.progress.log.clone(),
        })
    }

    /// Advances by one unit of work; returns the training loss if a batch was run.
    pub fn step(&mut self) -> Result<Option<f64>> {
        if self.progress.done {
            return Ok(None);
        }
        if !self.progress.started {
            self.start_phase()?;
            return Ok(None);
        }
        if let Some(r) = self.progress.pending.pop_front() {
            let loss = self.train_batch(&r)?;
            if let Some(n) = self.config.validation_interval {
                if self.progress.phase_batches.is_multiple_of(n as u64) {
                    self.validation_round()?;
                }
            }
            return Ok(Some(loss));
        }
        if self.progress.epoch > 0 {
            self.finish_epoch();
            if self.config.validation_interval.is_none() {
                self.validation_round()?;
                if self.progress.done || !self.progress.started {
                    return Ok(None);
                }
            }
        }
        if self.progress.epoch >= self.config.max_epochs {
            self.progress.log.push(format!(
                "max-epochs phase={} epoch={}",
                self.progress.phase.as_str(),
                self.progress.epoch
            ));
            self.end_phase()?;
            return Ok(None);
        }
        self.start_epoch()?;
        Ok(None)
    }

    fn main_task(&self) -> String {
        self.model.main_task().name.clone()
    }

    fn phase_tasks(&self) -> Vec<String> {
        let main = self.main_task();
        self.data
            .iter()
            .map(|d| d.task.clone())
            .filter(|t| self.progress.phase == Phase::Joint || *t == main)
            .collect()
    }

    fn start_phase(&mut self) -> Result<()> {
        let p = &mut self.progress;
        p.started = true;
        p.epoch = 0;
        p.phase_batches = 0;
        p.restarts = 0;
        p.bad = 0;
        p.best_score = None;
        p.pending.clear();
        self.optimizer.reset();
        let tasks = self.phase_tasks().join(",");
        self.progress.log.push(format!(
            "phase-start phase={} tasks={tasks}",
            self.progress.phase.as_str()
        ));
        self.validation_round()
    }

    fn start_epoch(&mut self) -> Result<()> {
        self.progress.epoch += 1;
        let tasks = self.phase_tasks();
        let mut batches = Vec::new();
        for d in self.data.iter().filter(|d| tasks.contains(&d.task)) {
            batches.push((
                d.task.clone(),
                make_batches(&d.train, self.config.token_budget, &mut self.rng)?,
            ));
        }
        let order = schedule_epoch(&batches, self.progress.phase, &self.main_task(), &mut self.rng)?;
        let counts: Vec<String> = batches.iter().map(|(t, b)| format!("{t}:{}", b.len())).collect();
        let order_s: Vec<String> = order.iter().map(|r| format!("{}#{}", r.task, r.index)).collect();
        self.progress.log.push(format!(
            "epoch phase={} epoch={} batches={} order={}",
            self.progress.phase.as_str(),
            self.progress.epoch,
            counts.join(","),
            order_s.join(",")
        ));
        self.progress.plan = batches
            .iter()
            .map(|(t, bs)| (t.clone(), bs.iter().map(|b| b.example_ids.clone()).collect()))
            .collect();
        self.progress.pending = order.into();
        self.progress.epoch_loss.clear();
        self.epoch_batches = batches;
        Ok(())
    }

    fn finish_epoch(&mut self) {
        let losses: Vec<String> = self
            .progress
            .epoch_loss
            .iter()
            .map(|(t, s)| format!("{t}:{}", fmt_f(s.weighted / s.tokens.max(1) as f64)))
            .collect();
        self.progress.log.push(format!(
            "epoch-end phase={} epoch={} train_loss={}",
            self.progress.phase.as_str(),
            self.progress.epoch,
            losses.join(",")
        ));
    }

    fn train_batch(&mut self, r: &BatchRef) -> Result<f64> {
        let (_, bs) = self
            .epoch_batches
            .iter()
            .find(|(t, _)| *t == r.task)
            .ok_or_else(|| Error::UnknownTask(r.task.clone()))?;
        let batch = &bs[r.index];
        let store = self.model.params_mut();
        store.zero_grads();
        let loss = self.model.accumulate_gradients(batch)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "loss {loss} on {}#{} at batch {}",
                r.task, r.index, self.progress.batches_seen
            )));
        }
        let store = self.model.params_mut();
        let norm = store.clip_grad_norm(self.config.clip_norm);
        if !norm.is_finite() {
            return Err(Error::Divergence(format!("gradient norm {norm}")));
        }
        adam_step(store, &mut self.optimizer, &self.config.adam)?;
        store.zero_grads();
        let s = self.progress.epoch_loss.entry(r.task.clone()).or_default();
        s.weighted += loss * batch.target_tokens() as f64;
        s.tokens += batch.target_tokens();
        self.progress.batches_seen += 1;
        self.progress.phase_batches += 1;
        Ok(loss)
    }

    fn phase_valid_sets(&self) -> Vec<(String, Vec<Batch>)> {
        let tasks = self.phase_tasks();
        self.valid.iter().filter(|(t, _)| tasks.contains(t)).cloned().collect()
    }

    fn validation_round(&mut self) -> Result<()> {
        let score = validate(&self.model, &self.phase_valid_sets())?;
        if !score.total.is_finite() {
            return Err(Error::Divergence(format!("validation log-likelihood {}", score.total)));
        }
        let improved = self.progress.best_score.is_none_or(|b| score.total > b);
        if improved {
            self.progress.best_score = Some(score.total);
            self.best = Some(self.model.params().snapshot());
            self.progress.bad = 0;
        } else {
            self.progress.bad += 1;
        }
        let per: Vec<String> = score
            .per_task
            .iter()
            .map(|(t, x)| format!("{t}:{}", fmt_f(*x)))
            .collect();
        let mut line = format!(
            "valid phase={} epoch={} batches_seen={} ll={} total={} best={} restarts={} adam_step={}",
            self.progress.phase.as_str(),
            self.progress.epoch,
            self.progress.batches_seen,
            per.join(","),
            fmt_f(score.total),
            if improved { "yes" } else { "no" },
            self.progress.restarts,
            self.optimizer.step
        );
        if self.config.record_wall_clock {
            let _ = write!(line, " wall={:.3}", self.clock.elapsed().as_secs_f64());
        }
        self.progress.log.push(line);

        if self.progress.bad >= self.config.patience {
            if self.progress.restarts < self.config.max_restarts {
                self.restore_best()?;
                self.optimizer.reset();
                self.progress.restarts += 1;
                self.progress.bad = 0;
                self.progress.log.push(format!(
                    "restart phase={} epoch={} count={} adam_step={} restored_total={}",
                    self.progress.phase.as_str(),
                    self.progress.epoch,
                    self.progress.restarts,
                    self.optimizer.step,
                    fmt_f(self.progress.best_score.unwrap_or(f64::NEG_INFINITY))
                ));
            } else {
                self.end_phase()?;
            }
        }
        Ok(())
    }

    fn restore_best(&mut self) -> Result<()> {
        if let Some(best) = &self.best {
            self.model.params_mut().restore(best)?;
        }
        Ok(())
    }

    fn end_phase(&mut self) -> Result<()> {
        self.restore_best()?;
        self.progress.pending.clear();
        self.progress.log.push(format!(
            "phase-end phase={} epochs={} best_total={}",
            self.progress.phase.as_str(),
            self.progress.epoch,
            fmt_f(self.progress.best_score.unwrap_or(f64::NEG_INFINITY))
        ));
        if self.progress.phase == Phase::Joint && self.config.schedule == Schedule::Adapted {
            self.progress.phase = Phase::Finetune;
            self.progress.started = false;
            self.best = None;
        } else {
            self.progress.done = true;
            self.progress.log.push(format!(
                "done batches_seen={} best_total={}",
                self.progress.batches_seen,
                fmt_f(self.progress.best_score.unwrap_or(f64::NEG_INFINITY))
            ));
        }
        Ok(())
    }

    /// Writes model, optimizer, rng and progress so training can resume exactly.
    pub fn checkpoint(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            progress: self.progress.clone(),
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            adam_step: self.optimizer.step,
            has_best: self.best.is_some(),
        };
        let mut w = container::Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.json(&meta)?;
        w.bytes(&self.model.to_bytes()?);
        let moments: Vec<(String, &Tensor)> = self
            .optimizer
            .m
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("m{i}"), t))
            .chain(self.optimizer.v.iter().enumerate().map(|(i, t)| (format!("v{i}"), t)))
            .chain(
                self.best
                    .iter()
                    .flatten()
                    .enumerate()
                    .map(|(i, t)| (format!("best{i}"), t)),
            )
            .collect();
        let items: Vec<(&str, &Tensor)> = moments.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        w.tensors(&items);
        fs::write(path, w.finish()).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint written by a trainer over the same data. The model
    /// in the checkpoint must match this trainer's model structure.
    pub fn restore(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = container::Reader::new(&bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let meta: CheckpointMeta = r.json()?;
        let model = MultiTaskModel::from_bytes(r.bytes()?)?;
        let tensors = r.tensors()?;
        r.finish()?;
        if model.mode() != self.model.mode() {
            return Err(Error::Model(format!(
                "checkpoint holds a {} model, trainer has {}",
                model.mode(),
                self.model.mode()
            )));
        }
        if !model.same_structure(&self.model) {
            return Err(Error::Model(
                "checkpoint model differs in tasks, dimensions or vocabulary".into(),
            ));
        }
        let n = model.params().len();
        let want = 2 * n + if meta.has_best { n } else { 0 };
        if tensors.len() != want {
            return Err(Error::Corrupt(format!(
                "expected {want} optimizer tensors, found {}",
                tensors.len()
            )));
        }
        let mut ts: Vec<Tensor> = tensors.into_iter().map(|(_, t)| t).collect();
        let best = if meta.has_best { Some(ts.split_off(2 * n)) } else { None };
        let v = ts.split_off(n);
        let optimizer = OptimizerState {
            step: meta.adam_step,
            m: ts,
            v,
        };
        let mut epoch_batches = Vec::with_capacity(meta.progress.plan.len());
        for (task, groups) in &meta.progress.plan {
            let d = self
                .data
                .iter()
                .find(|d| d.task == *task)
                .ok_or_else(|| Error::UnknownTask(task.clone()))?;
            let mut bs = Vec::with_capacity(groups.len());
            for ids in groups {
                let refs = ids
                    .iter()
                    .map(|&i| {
                        d.train.get(i).ok_or(Error::IndexOutOfRange {
                            what: "training examples",
                            index: i,
                            bound: d.train.len(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut b = Batch::from_examples(&refs)?;
                b.example_ids = ids.clone();
                bs.push(b);
            }
            epoch_batches.push((task.clone(), bs));
        }
        let mut rng = ChaCha8Rng::from_seed(meta.rng.seed);
        rng.set_stream(meta.rng.stream);
        rng.set_word_pos(meta.rng.word_pos);

        self.model = model;
        self.optimizer = optimizer;
        self.config = meta.config;
        self.progress = meta.progress;
        self.rng = rng;
        self.best = best;
        self.epoch_batches = epoch_batches;
        Ok(())
    }
}

/// A parsed `kind key=value ...` log record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogRecord {
    pub kind: String,
    pub fields: BTreeMap<String, String>,
}

impl LogRecord {
    pub fn parse(line: &str) -> Option<LogRecord> {
        let mut parts = line.split(' ');
        let kind = parts.next()?.to_string();
        if kind == "config" {
            let mut fields = BTreeMap::new();
            fields.insert("json".into(), line["config ".len().min(line.len())..].to_string());
            return Some(LogRecord { kind, fields });
        }
        let fields = parts
            .filter_map(|p| p.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Some(LogRecord { kind, fields })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }

    /// `a:1,b:2` into pairs.
    pub fn pairs(&self, key: &str) -> Vec<(String, String)> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .filter(|s| !s.is_empty())
                    .filter_map(|s| s.split_once(':'))
                    .map(|(a, b)| (a.to_string(), b.to_string()))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// The `order` field as batch references.
    pub fn order(&self) -> Vec<BatchRef> {
        self.get("order")
            .map(|v| {
                v.split(',')
                    .filter_map(|s| s.split_once('#'))
                    .filter_map(|(t, i)| {
                        Some(BatchRef {
                            task: t.to_string(),
                            index: i.parse().ok()?,
                        })
                    })
                    .collect()
            })
            .unwrap_or_default()
    }
}

pub fn parse_log(lines: &[String]) -> Vec<LogRecord> {
    lines.iter().filter_map(|l| LogRecord::parse(l)).collect()
}

/// Trains `model` to completion and returns it with the outcome.
pub fn train(
    model: MultiTaskModel,
    data: Vec<TaskData>,
    config: TrainingConfig,
) -> Result<(MultiTaskModel, TrainOutcome)> {
    let mut t = Trainer::new(model, data, config)?;
    let outcome = t.run()?;
    Ok((t.into_model(), outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocabulary;
    use crate::layers::LayerDims;
    use crate::model::{SharingMode, TaskSpec};

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::row(vec![1.0, -2.0])).unwrap();
        let cfg = AdamConfig::default();
        let mut st = OptimizerState::new(&store);
        adam_step(&mut store, &mut st, &cfg).unwrap();
        assert_eq!(store.value(id).data(), &[1.0, -2.0]);

        st.m[0] = Tensor::row(vec![0.5, -0.5]);
        st.v[0] = Tensor::row(vec![0.25, 0.25]);
        adam_step(&mut store, &mut st, &cfg).unwrap();
        assert_eq!(st.m[0].data(), &[0.5 * 0.9, -0.5 * 0.9]);
        assert_eq!(st.v[0].data(), &[0.25 * 0.999, 0.25 * 0.999]);
    }

    #[test]
    fn first_step_moves_by_alpha() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::row(vec![0.0, 0.0, 0.0])).unwrap();
        store.get_mut(id).grad = Tensor::row(vec![3.0, -0.2, 1e-3]);
        let mut st = OptimizerState::new(&store);
        let cfg = AdamConfig::default();
        adam_step(&mut store, &mut st, &cfg).unwrap();
        for (x, g) in store.value(id).data().iter().zip([3.0f64, -0.2, 1e-3]) {
            assert!((x + cfg.alpha * g.signum()).abs() < 1e-7, "{x}");
        }
        assert_eq!(st.step, 1);
    }

    /// Scalar Adam recurrence written out independently.
    fn scalar_adam(x0: f64, steps: usize, cfg: &AdamConfig, alpha: f64) -> f64 {
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * x;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t as i32));
            let vh = v / (1.0 - cfg.beta2.powi(t as i32));
            x -= alpha * mh / (vh.sqrt() + cfg.eps);
        }
        x
    }

    #[test]
    fn minimizes_square() {
        let cfg = AdamConfig {
            alpha: 0.1,
            ..AdamConfig::default()
        };
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(1.0)).unwrap();
        let mut st = OptimizerState::new(&store);
        for _ in 0..100 {
            let x = store.value(id).item();
            store.get_mut(id).grad = Tensor::scalar(2.0 * x);
            adam_step(&mut store, &mut st, &cfg).unwrap();
        }
        let x = store.value(id).item();
        assert!(x.abs() < 0.01, "{x}");
        assert_eq!(x, scalar_adam(1.0, 100, &cfg, 0.1));
    }

    #[test]
    fn joint_schedule_is_permutation() {
        let by_task = vec![
            ("mt".to_string(), vec![(); 10]),
            ("pos".to_string(), vec![(); 5]),
            ("ne".to_string(), vec![(); 5]),
        ];
        let order = schedule_epoch(&by_task, Phase::Joint, "mt", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(order.len(), 20);
        let mut sorted = order.clone();
        sorted.sort();
        let mut want: Vec<BatchRef> = by_task
            .iter()
            .flat_map(|(t, b)| (0..b.len()).map(move |index| BatchRef { task: t.clone(), index }))
            .collect();
        want.sort();
        assert_eq!(sorted, want);
        let ft = schedule_epoch(&by_task, Phase::Finetune, "mt", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(ft.len(), 10);
        assert!(ft.iter().all(|r| r.task == "mt"));
        assert!(schedule_epoch(&by_task, Phase::Finetune, "srl", &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    fn toy() -> (MultiTaskModel, Vec<TaskData>) {
        let sv = Vocabulary::from_tokens((0..6).map(|i| format!("s{i}")));
        let tv = Vocabulary::from_tokens((0..6).map(|i| format!("t{i}")));
        let lv = Vocabulary::from_tokens(["A", "B"]);
        let tasks = vec![TaskSpec::translation("mt", tv).main(), TaskSpec::tagging("tag", lv)];
        let model =
            MultiTaskModel::build(SharingMode::SharedEncoder, tasks, LayerDims::new(6, 5, 6, 7), sv, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut gen = |task: &str, n: usize| -> Vec<Example> {
            (0..n)
                .map(|_| {
                    let len = rng.gen_range(1..5);
                    let src: Vec<usize> = (0..len).map(|_| rng.gen_range(4..10)).collect();
                    let tgt = if task == "mt" {
                        src.clone()
                    } else {
                        src.iter().map(|&s| 4 + s % 2).collect()
                    };
                    Example {
                        task: task.into(),
                        source: src,
                        target: tgt,
                        source_words: len,
                    }
                })
                .collect()
        };
        let data = vec![
            TaskData {
                task: "mt".into(),
                train: gen("mt", 24),
                valid: gen("mt", 6),
            },
            TaskData {
                task: "tag".into(),
                train: gen("tag", 16),
                valid: gen("tag", 6),
            },
        ];
        (model, data)
    }

    #[test]
    fn validation_is_additive_and_near_uniform_at_init() {
        let (model, data) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sets: Vec<(String, Vec<Batch>)> = data
            .iter()
            .map(|d| (d.task.clone(), make_batches(&d.valid, 512, &mut rng).unwrap()))
            .collect();
        let all = validate(&model, &sets).unwrap();
        let parts: f64 = sets
            .iter()
            .map(|s| validate(&model, std::slice::from_ref(s)).unwrap().total)
            .sum();
        assert!((all.total - parts).abs() < 1e-6);
        let mt = &sets[0..1];
        let n: usize = mt[0].1.iter().map(Batch::target_tokens).sum();
        let v = model.task("mt").unwrap().target_vocab.len() as f64;
        let expect = -(n as f64) * v.ln();
        let got = validate(&model, mt).unwrap().total;
        assert!(((got - expect) / expect).abs() < 0.05, "{got} vs {expect}");
        assert!(validate(&model, &[]).is_err());
    }

    #[test]
    fn adapted_run_structure_and_restarts() {
        let (model, data) = toy();
        let cfg = TrainingConfig {
            schedule: Schedule::Adapted,
            token_budget: 24,
            patience: 1,
            max_epochs: 6,
            adam: AdamConfig {
                alpha: 0.05,
                ..AdamConfig::default()
            },
            ..TrainingConfig::default()
        };
        let (_, out) = train(model, data, cfg).unwrap();
        let recs = parse_log(&out.log);
        let boundaries = recs
            .iter()
            .filter(|r| r.kind == "phase-start" && r.get("phase") == Some("finetune"))
            .count();
        assert_eq!(boundaries, 1);
        let start = recs
            .iter()
            .position(|r| r.kind == "phase-start" && r.get("phase") == Some("finetune"))
            .unwrap();
        for r in &recs[start..] {
            assert!(r.order().iter().all(|b| b.task == "mt"));
        }
        for r in recs.iter().filter(|r| r.kind == "restart") {
            assert_eq!(r.get("adam_step"), Some("0"));
        }
        let finetune_best = recs[start..]
            .iter()
            .filter(|r| r.kind == "valid")
            .map(|r| r.get("total").unwrap().parse::<f64>().unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((finetune_best - out.best_score).abs() < 1e-5);
    }

    #[test]
    fn identical_seeds_identical_logs() {
        let run = || {
            let (model, data) = toy();
            let cfg = TrainingConfig {
                token_budget: 30,
                max_epochs: 2,
                ..TrainingConfig::default()
            };
            train(model, data, cfg).unwrap().1.log
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let (model, data) = toy();
        let cfg = TrainingConfig {
            token_budget: 30,
            max_epochs: 3,
            ..TrainingConfig::default()
        };
        let mut a = Trainer::new(model.clone(), data.clone(), cfg.clone()).unwrap();
        for _ in 0..7 {
            a.step().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt");
        a.checkpoint(&p).unwrap();
        let score_before = validate(a.model(), &a.phase_valid_sets()).unwrap();
        let next_a = a.step().unwrap();

        let mut b = Trainer::new(model.clone(), data.clone(), cfg.clone()).unwrap();
        b.restore(&p).unwrap();
        assert_eq!(validate(b.model(), &b.phase_valid_sets()).unwrap(), score_before);
        let next_b = b.step().unwrap();
        assert_eq!(next_a.map(f64::to_bits), next_b.map(f64::to_bits));
        assert!(next_a.is_some());
        let la = a.run().unwrap();
        let lb = b.run().unwrap();
        assert_eq!(la, lb);

        let other = MultiTaskModel::build(
            SharingMode::Separate,
            model.tasks().to_vec(),
            *model.dims(),
            model.src_vocab().clone(),
            3,
        )
        .unwrap();
        let mut c = Trainer::new(other, data, cfg).unwrap();
        assert!(c.restore(&p).is_err());
    }

    #[test]
    fn config_problems_are_all_reported() {
        let cfg = TrainingConfig {
            token_budget: 0,
            patience: 0,
            clip_norm: -1.0,
            ..TrainingConfig::default()
        };
        assert_eq!(cfg.problems().len(), 3);
    }
}
