//! Objectives and schedules: supervised J_sup, the unsupervised negative ELBO
//! J_un, self-training, Adam, lr decay, early stopping and the resumable
//! pretrain-then-alternate trainer.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialog, DialogCorpus};
use crate::error::{Error, Result};
use crate::eval::dev_joint_goal;
use crate::kb::EntityDb;
use crate::model::{Labes, Objective, RunOptions};
use crate::neural::{checkpoint, Gradients, ParameterSet, StTrace, Tape};

pub mod gradcheck;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Dialogs per minibatch.
    pub batch_size: usize,
    pub kl_weight: f64,
    pub label_fraction: f64,
    pub seed: u64,
    /// Non-improving dev epochs before stopping.
    pub patience: usize,
    pub lr_decay: f64,
    /// Non-improving dev epochs between lr decays.
    pub decay_trigger: usize,
    /// Epoch cap per phase.
    pub max_epochs: usize,
    pub clip_norm: f64,
    /// Supervised steps per phase-2 iteration.
    pub sup_steps: usize,
    /// Unsupervised steps per phase-2 iteration.
    pub unsup_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            batch_size: 32,
            kl_weight: 0.5,
            label_fraction: 1.0,
            seed: 0,
            patience: 4,
            lr_decay: 0.5,
            decay_trigger: 2,
            max_epochs: 100,
            clip_norm: 5.0,
            sup_steps: 1,
            unsup_steps: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr {} must be > 0", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be > 0".into());
        }
        if self.patience < self.decay_trigger || self.decay_trigger == 0 {
            return bad(format!(
                "need patience ({}) >= decay_trigger ({}) >= 1",
                self.patience, self.decay_trigger
            ));
        }
        if !(0.0..=1.0).contains(&self.label_fraction) {
            return bad(format!("label_fraction {} not in [0, 1]", self.label_fraction));
        }
        if !(self.kl_weight >= 0.0) || !(self.clip_norm > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("kl_weight >= 0, clip_norm > 0 and lr_decay in (0, 1] required".into());
        }
        if self.sup_steps + self.unsup_steps == 0 {
            return bad("sup_steps + unsup_steps must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Sup,
    Semi,
    #[serde(rename = "self")]
    SelfTrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Semi,
    SelfTrain,
}

impl Phase {
    fn index(self) -> u64 {
        match self {
            Phase::Pretrain => 0,
            Phase::Semi => 1,
            Phase::SelfTrain => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleDecision {
    pub improved: bool,
    pub decayed: bool,
    pub stop: bool,
}

/// Dev-driven lr decay and early stopping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr: f64,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Consecutive non-improving epochs.
    pub bad_epochs: usize,
    pub decay: f64,
    pub trigger: usize,
    pub patience: usize,
    pub history: Vec<f64>,
}

impl LrSchedule {
    pub fn new(lr: f64, decay: f64, trigger: usize, patience: usize) -> LrSchedule {
        LrSchedule {
            lr,
            best: None,
            best_epoch: None,
            bad_epochs: 0,
            decay,
            trigger,
            patience,
            history: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> LrSchedule {
        Self::new(cfg.lr, cfg.lr_decay, cfg.decay_trigger, cfg.patience)
    }

    /// Record one epoch's dev score. Improvement is strict.
    pub fn observe(&mut self, score: f64) -> ScheduleDecision {
        let epoch = self.history.len();
        self.history.push(score);
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            return ScheduleDecision {
                improved: true,
                decayed: false,
                stop: false,
            };
        }
        self.bad_epochs += 1;
        let stop = self.bad_epochs >= self.patience;
        let decayed = !stop && self.bad_epochs.is_multiple_of(self.trigger);
        if decayed {
            self.lr *= self.decay;
        }
        ScheduleDecision {
            improved: false,
            decayed,
            stop,
        }
    }
}

/// Adam moments, allocated for parameters as they first receive gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParameterSet) -> Adam {
        Adam {
            t: 0,
            m: vec![Vec::new(); params.len()],
            v: vec![Vec::new(); params.len()],
        }
    }
}

/// One Adam update with bias correction. Parameters without gradients are left
/// untouched.
pub fn step_optimizer(params: &mut ParameterSet, grads: &Gradients, adam: &mut Adam, lr: f64, cfg: &TrainConfig) -> Result<()> {
    grads.check_finite(params)?;
    adam.t += 1;
    let t = adam.t as i32;
    let c1 = 1.0 - cfg.adam_beta1.powi(t);
    let c2 = 1.0 - cfg.adam_beta2.powi(t);
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let Some(g) = grads.get(id) else { continue };
        let i = id.index();
        let p = params.get_mut(id);
        if adam.m[i].is_empty() {
            adam.m[i] = vec![0.0; g.len()];
            adam.v[i] = vec![0.0; g.len()];
        }
        let (m, v) = (&mut adam.m[i], &mut adam.v[i]);
        for k in 0..g.len() {
            m[k] = cfg.adam_beta1 * m[k] + (1.0 - cfg.adam_beta1) * g[k];
            v[k] = cfg.adam_beta2 * v[k] + (1.0 - cfg.adam_beta2) * g[k] * g[k];
            p.data[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Sampled belief paths and the straight-through probability vectors of one
/// dialog run; replaying them with the probabilities frozen evaluates the relaxed
/// surrogate whose exact gradient is the straight-through gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Relaxation {
    pub replay: Vec<Vec<Vec<u32>>>,
    pub probs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    /// Mean per-turn loss.
    pub loss: f64,
    /// Mean per-turn KL (unsupervised objective only).
    pub kl: f64,
    pub turns: usize,
    pub relaxations: Vec<Relaxation>,
}

/// Evaluate `objective` over a batch at `params` (which must share the model's
/// layout), optionally accumulating gradients of the mean per-turn loss.
/// `seeds` drives dropout and sampling per dialog; `relax` replays earlier
/// samples with frozen straight-through probabilities.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    model: &Labes,
    params: &ParameterSet,
    dialogs: &[&Dialog],
    db: &EntityDb,
    objective: Objective,
    train: bool,
    seeds: &[u64],
    relax: Option<&[Relaxation]>,
    mut grads: Option<&mut Gradients>,
) -> Result<BatchLoss> {
    if dialogs.len() != seeds.len() || relax.is_some_and(|r| r.len() != dialogs.len()) {
        return Err(Error::LengthMismatch(dialogs.len(), seeds.len()));
    }
    let turns: usize = dialogs.iter().map(|d| d.turns.len()).sum();
    if turns == 0 {
        return Err(Error::EmptySequence);
    }
    let scale = 1.0 / turns as f64;
    let (mut loss, mut kl) = (0.0, 0.0);
    let mut relaxations = Vec::with_capacity(dialogs.len());
    for (i, d) in dialogs.iter().enumerate() {
        let mut tape = Tape::new(params);
        let replay = relax.map(|r| &r[i]);
        if let Some(r) = replay {
            tape.st = StTrace::frozen(r.probs.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
        let run = model.run_dialog(
            &mut tape,
            d,
            db,
            RunOptions {
                objective,
                train,
                replay: replay.map(|r| r.replay.as_slice()),
                rng: &mut rng,
            },
        )?;
        let lv = run.loss.ok_or_else(|| Error::Config(format!("{objective:?} is not a training objective")))?;
        let value = tape.scalar(lv);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss of dialog {}", d.id)));
        }
        loss += value * scale;
        kl += run.turns.iter().map(|t| t.kl).sum::<f64>() * scale;
        if let Some(g) = grads.as_deref_mut() {
            tape.backward_seeded(&[(lv, vec![scale])], g);
        }
        relaxations.push(Relaxation {
            replay: run.turns.iter().map(|t| t.belief_tokens.clone()).collect(),
            probs: tape.st.recorded.clone(),
        });
    }
    Ok(BatchLoss {
        loss,
        kl,
        turns,
        relaxations,
    })
}

/// Supervised loss and gradients on a labeled batch.
pub fn j_sup(model: &Labes, dialogs: &[&Dialog], db: &EntityDb, seeds: &[u64], train: bool, grads: Option<&mut Gradients>) -> Result<BatchLoss> {
    batch_objective(model, &model.params, dialogs, db, Objective::Supervised, train, seeds, None, grads)
}

/// Negative ELBO and gradients on an unlabeled batch.
pub fn j_un(model: &Labes, dialogs: &[&Dialog], db: &EntityDb, seeds: &[u64], train: bool, grads: Option<&mut Gradients>) -> Result<BatchLoss> {
    batch_objective(model, &model.params, dialogs, db, Objective::Unsupervised, train, seeds, None, grads)
}

/// Self-training response loss under greedy straight-through prior beliefs.
pub fn j_self(model: &Labes, dialogs: &[&Dialog], db: &EntityDb, seeds: &[u64], train: bool, grads: Option<&mut Gradients>) -> Result<BatchLoss> {
    batch_objective(model, &model.params, dialogs, db, Objective::SelfTrain, train, seeds, None, grads)
}

/// Seed for one dialog of one step.
pub fn dialog_seed(seed: u64, phase: u64, epoch: u64, step: u64, dialog: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for x in [phase, epoch, step, dialog] {
        h = h.wrapping_add(x).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 29;
    }
    h
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub kl: f64,
    pub dev_joint_goal: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub regime: Regime,
    pub phase: Phase,
    /// Completed epochs within the phase.
    pub epoch: usize,
    pub schedule: LrSchedule,
    pub adam_t: u64,
    pub finished: bool,
    pub log: Vec<EpochLog>,
}

/// Corpora a trainer reads.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub labeled: &'a DialogCorpus,
    pub unlabeled: &'a DialogCorpus,
    pub dev: &'a DialogCorpus,
    pub db: &'a EntityDb,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    model: serde_json::Value,
    train: TrainConfig,
    state: TrainState,
}

/// Resumable training loop; state is saved and restored at epoch boundaries.
pub struct Trainer<'a> {
    pub model: Labes,
    pub best: ParameterSet,
    pub adam: Adam,
    pub state: TrainState,
    pub cfg: TrainConfig,
    data: TrainData<'a>,
}

impl<'a> Trainer<'a> {
    pub fn new(mut model: Labes, cfg: TrainConfig, regime: Regime, data: TrainData<'a>) -> Result<Trainer<'a>> {
        cfg.validate()?;
        if data.labeled.is_empty() {
            return Err(Error::Config("labeled corpus is empty".into()));
        }
        if data.dev.is_empty() {
            return Err(Error::Config("dev corpus is empty".into()));
        }
        model.config.kl_weight = cfg.kl_weight;
        Ok(Trainer {
            best: model.params.clone(),
            adam: Adam::new(&model.params),
            state: TrainState {
                regime,
                phase: Phase::Pretrain,
                epoch: 0,
                schedule: LrSchedule::from_config(&cfg),
                adam_t: 0,
                finished: false,
                log: Vec::new(),
            },
            model,
            cfg,
            data,
        })
    }

    fn seeds(&self, step: usize, n: usize) -> Vec<u64> {
        (0..n)
            .map(|i| {
                dialog_seed(
                    self.cfg.seed,
                    self.state.phase.index(),
                    self.state.epoch as u64,
                    step as u64,
                    i as u64,
                )
            })
            .collect()
    }

    fn shuffled(&self, n: usize, stream: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let s = dialog_seed(self.cfg.seed, self.state.phase.index(), self.state.epoch as u64, u64::MAX, stream);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
        order
    }

    fn step(&mut self, corpus: &DialogCorpus, idx: &[usize], objective: Objective, step: usize) -> Result<BatchLoss> {
        let dialogs: Vec<&Dialog> = idx.iter().map(|&i| &corpus.dialogs[i]).collect();
        let seeds = self.seeds(step, dialogs.len());
        let mut grads = Gradients::new(&self.model.params);
        let out = batch_objective(
            &self.model,
            &self.model.params,
            &dialogs,
            self.data.db,
            objective,
            true,
            &seeds,
            None,
            Some(&mut grads),
        )?;
        grads.check_finite(&self.model.params)?;
        grads.clip_global_norm(self.cfg.clip_norm);
        step_optimizer(&mut self.model.params, &grads, &mut self.adam, self.state.schedule.lr, &self.cfg)?;
        self.state.adam_t = self.adam.t;
        Ok(out)
    }

    fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
        order.chunks(size).map(<[usize]>::to_vec).collect()
    }

    /// Train one epoch of the current phase; `None` once training has finished.
    pub fn run_epoch(&mut self) -> Result<Option<EpochLog>> {
        if self.state.finished {
            return Ok(None);
        }
        let bs = self.cfg.batch_size;
        let lab = Self::batches(&self.shuffled(self.data.labeled.len(), 0), bs);
        let (mut loss_sum, mut kl_sum, mut n) = (0.0, 0.0, 0usize);
        let mut step = 0;
        let labeled = self.data.labeled;
        let unlabeled = self.data.unlabeled;
        match self.state.phase {
            Phase::Pretrain => {
                for b in &lab {
                    let out = self.step(labeled, b, Objective::Supervised, step)?;
                    step += 1;
                    loss_sum += out.loss;
                    n += 1;
                }
            }
            Phase::Semi | Phase::SelfTrain => {
                let un_obj = if self.state.phase == Phase::Semi {
                    Objective::Unsupervised
                } else {
                    Objective::SelfTrain
                };
                let un = Self::batches(&self.shuffled(unlabeled.len(), 1), bs);
                let mut li = 0;
                let mut ui = 0;
                while ui < un.len() {
                    for _ in 0..self.cfg.sup_steps {
                        let out = self.step(labeled, &lab[li % lab.len()], Objective::Supervised, step)?;
                        li += 1;
                        step += 1;
                        loss_sum += out.loss;
                        n += 1;
                    }
                    for _ in 0..self.cfg.unsup_steps {
                        if ui >= un.len() {
                            break;
                        }
                        let out = self.step(unlabeled, &un[ui], un_obj, step)?;
                        ui += 1;
                        step += 1;
                        loss_sum += out.loss;
                        kl_sum += out.kl;
                        n += 1;
                    }
                }
            }
        }
        let dev = dev_joint_goal(&self.model, self.data.dev, self.data.db)?;
        let lr = self.state.schedule.lr;
        let decision = self.state.schedule.observe(dev);
        if decision.improved {
            self.best = self.model.params.clone();
        }
        let log = EpochLog {
            epoch: self.state.epoch,
            phase: self.state.phase,
            train_loss: loss_sum / n.max(1) as f64,
            kl: kl_sum / n.max(1) as f64,
            dev_joint_goal: dev,
            lr,
        };
        self.state.log.push(log.clone());
        self.state.epoch += 1;
        if decision.stop || self.state.epoch >= self.cfg.max_epochs {
            self.end_phase();
        }
        Ok(Some(log))
    }

    fn end_phase(&mut self) {
        let next = match (self.state.phase, self.state.regime) {
            (Phase::Pretrain, Regime::Semi) if !self.data.unlabeled.is_empty() => Some(Phase::Semi),
            (Phase::Pretrain, Regime::SelfTrain) if !self.data.unlabeled.is_empty() => Some(Phase::SelfTrain),
            _ => None,
        };
        match next {
            None => self.state.finished = true,
            Some(p) => {
                self.model.params = self.best.clone();
                let best = self.state.schedule.best;
                let best_epoch = self.state.schedule.best_epoch;
                self.state.schedule = LrSchedule::from_config(&self.cfg);
                self.state.schedule.best = best;
                self.state.schedule.best_epoch = best_epoch;
                self.adam = Adam::new(&self.model.params);
                self.state.adam_t = 0;
                self.state.phase = p;
                self.state.epoch = 0;
            }
        }
    }

    /// Run to completion, calling `on_epoch` after every epoch.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Trainer<'a>, &EpochLog) -> Result<()>) -> Result<()> {
        while let Some(log) = self.run_epoch()? {
            on_epoch(self, &log)?;
        }
        Ok(())
    }

    /// The dev-selected model.
    pub fn best_model(&self) -> Labes {
        let mut m = self.model.clone();
        m.params = self.best.clone();
        m
    }

    fn archive(&self) -> (serde_json::Value, ParameterSet) {
        let mut ps = ParameterSet::new();
        for (id, p) in self.model.params.iter() {
            let add = |ps: &mut ParameterSet, name: String, data: Vec<f64>| {
                ps.add(name, p.rows, p.cols, data).expect("unique archive names");
            };
            add(&mut ps, format!("model/{}", p.name), p.data.clone());
            add(&mut ps, format!("best/{}", p.name), self.best.get(id).data.clone());
            let i = id.index();
            if !self.adam.m[i].is_empty() {
                add(&mut ps, format!("adam_m/{}", p.name), self.adam.m[i].clone());
                add(&mut ps, format!("adam_v/{}", p.name), self.adam.v[i].clone());
            }
        }
        let header = serde_json::to_value(StateHeader {
            model: self.model.header(),
            train: self.cfg.clone(),
            state: self.state.clone(),
        })
        .expect("train state serializes");
        (header, ps)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (h, ps) = self.archive();
        let mut buf = Vec::new();
        checkpoint::write_archive(&mut buf, &h, &ps).expect("in-memory write");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (h, ps) = self.archive();
        checkpoint::save(path, &h, &ps)
    }

    pub fn from_bytes(bytes: &[u8], data: TrainData<'a>) -> Result<Trainer<'a>> {
        let (h, ps) = checkpoint::read_archive(bytes)?;
        Self::restore(h, ps, data)
    }

    pub fn load(path: impl AsRef<Path>, data: TrainData<'a>) -> Result<Trainer<'a>> {
        let (h, ps) = checkpoint::load(path)?;
        Self::restore(h, ps, data)
    }

    fn restore(header: serde_json::Value, ps: ParameterSet, data: TrainData<'a>) -> Result<Trainer<'a>> {
        let h: StateHeader = serde_json::from_value(header).map_err(|e| Error::json("train state header", e))?;
        let pick = |prefix: &str| -> ParameterSet {
            let mut out = ParameterSet::new();
            for (_, p) in ps.iter() {
                if let Some(name) = p.name.strip_prefix(prefix) {
                    out.add(name, p.rows, p.cols, p.data.clone()).expect("unique names");
                }
            }
            out
        };
        let model = Labes::from_parts(h.model, pick("model/"))?;
        let mut best = model.params.clone();
        checkpoint::assign_by_name(&mut best, &pick("best/"))?;
        let mut adam = Adam::new(&model.params);
        adam.t = h.state.adam_t;
        let (m, v) = (pick("adam_m/"), pick("adam_v/"));
        for (id, p) in model.params.iter() {
            if let (Some(mi), Some(vi)) = (m.id(&p.name), v.id(&p.name)) {
                adam.m[id.index()] = m.get(mi).data.clone();
                adam.v[id.index()] = v.get(vi).data.clone();
            }
        }
        let mut t = Trainer::new(model, h.train, h.state.regime, data)?;
        t.best = best;
        t.adam = adam;
        t.state = h.state;
        Ok(t)
    }
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Labes,
    pub log: Vec<EpochLog>,
    pub best_dev: Option<f64>,
}

fn train(model: Labes, cfg: TrainConfig, regime: Regime, data: TrainData) -> Result<TrainOutcome> {
    let mut t = Trainer::new(model, cfg, regime, data)?;
    t.run(|_, _| Ok(()))?;
    Ok(TrainOutcome {
        model: t.best_model(),
        best_dev: t.state.schedule.best,
        log: t.state.log,
    })
}

pub fn train_sup(model: Labes, cfg: TrainConfig, labeled: &DialogCorpus, dev: &DialogCorpus, db: &EntityDb) -> Result<TrainOutcome> {
    let empty = DialogCorpus::default();
    train(
        model,
        cfg,
        Regime::Sup,
        TrainData {
            labeled,
            unlabeled: &empty,
            dev,
            db,
        },
    )
}

pub fn train_semi(model: Labes, cfg: TrainConfig, data: TrainData) -> Result<TrainOutcome> {
    train(model, cfg, Regime::Semi, data)
}

pub fn train_self(model: Labes, cfg: TrainConfig, data: TrainData) -> Result<TrainOutcome> {
    train(model, cfg, Regime::SelfTrain, data)
}
