use super::checkpoint::{Checkpoint, Stage};
use super::config::{FinetuneMode, TrainConfig};
use super::infer::pseudo_gt;
use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::arch::{backbone_forward, plm_forward};
use crate::degrade::{sample_pair, CleanSource, Pair, Phase};
use crate::error::{Error, Result};
use crate::losses::combined_pretrain_loss;
use crate::params::{Bound, ParameterStore};
use crate::rng::{substream, Rng, RngState};
use crate::tape::{Tape, Var};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub iteration: u64,
    /// Task of each pair in the batch, joined with `+`.
    pub task: String,
    pub l1: f64,
    pub contrastive: f64,
    pub total: f64,
    /// Seconds since the session started; 0 when wall time logging is off.
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "iteration,task,l1,contrastive,total,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            writeln!(s, "{},{},{:e},{:e},{:e},{:.3}", r.iteration, r.task, r.l1, r.contrastive, r.total, r.seconds)
                .expect("writing to a String");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Mean L1 term over `records[range]`.
    pub fn mean_l1(&self, range: std::ops::Range<usize>) -> f64 {
        let rs = &self.records[range];
        rs.iter().map(|r| r.l1).sum::<f64>() / rs.len() as f64
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.records.extend(other.records);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum StoreId {
    Theta,
    Plm,
    Phi,
}

impl StoreId {
    fn name(self) -> &'static str {
        match self {
            StoreId::Theta => "theta",
            StoreId::Plm => "plm",
            StoreId::Phi => "phi",
        }
    }
}

fn trained_stores(stage: Stage) -> &'static [StoreId] {
    match stage {
        Stage::Init => &[],
        Stage::Pretrain | Stage::FinetuneMain => &[StoreId::Theta, StoreId::Plm],
        Stage::FinetunePhi => &[StoreId::Phi],
        Stage::FinetuneJoint => &[StoreId::Theta, StoreId::Plm, StoreId::Phi],
    }
}

fn store_mut(ckpt: &mut Checkpoint, id: StoreId) -> &mut ParameterStore<f64> {
    match id {
        StoreId::Theta => &mut ckpt.theta,
        StoreId::Plm => &mut ckpt.plm,
        StoreId::Phi => ckpt.phi.as_mut().expect("phi exists in stages that train it"),
    }
}

struct Graph {
    total: Var,
    l1: Var,
    contrastive: Option<Var>,
    bound: Vec<(StoreId, Bound)>,
}

/// A resumable run of one training stage.
///
/// Resuming from a checkpoint of the same stage continues the identical
/// trajectory: parameters, Adam moments and the data stream are all restored.
pub struct Session<'c> {
    cfg: &'c TrainConfig,
    ckpt: Checkpoint,
    rng: Rng,
    source: CleanSource,
    log: TrainLog,
    started: Instant,
    /// Added to logged iteration numbers, so multi-phase logs stay increasing.
    log_offset: u64,
    grad_norms: Option<BTreeMap<String, f64>>,
}

impl<'c> Session<'c> {
    /// Starts `stage` on `ckpt`, or resumes it if `ckpt` is mid-way through it.
    pub fn begin(cfg: &'c TrainConfig, mut ckpt: Checkpoint, stage: Stage, task: Option<&str>) -> Result<Self> {
        cfg.validate()?;
        if ckpt.model != cfg.model {
            return Err(Error::Config("model: checkpoint was trained with a different model config".into()));
        }
        if let Some(t) = task {
            cfg.tasks.get(t)?;
        }
        if stage == Stage::Init {
            return Err(Error::Usage("nothing to train in the init stage".into()));
        }
        if stage != Stage::Pretrain && task.is_none() {
            return Err(Error::Usage(format!("stage {stage} needs a task")));
        }
        let finetuned = matches!(ckpt.stage, Stage::FinetunePhi | Stage::FinetuneMain | Stage::FinetuneJoint);
        if finetuned && ckpt.task.as_deref() != task {
            return Err(Error::Config(format!(
                "task mismatch: checkpoint was fine-tuned on {:?}, requested {:?}",
                ckpt.task.as_deref().unwrap_or("-"),
                task.unwrap_or("-")
            )));
        }
        if stage == Stage::Pretrain && !matches!(ckpt.stage, Stage::Init | Stage::Pretrain) {
            return Err(Error::Config(format!("cannot pre-train a checkpoint from stage {}", ckpt.stage)));
        }

        let rng = if ckpt.stage == stage {
            match &ckpt.rng {
                Some(state) => state.restore()?,
                None => return Err(Error::Config("checkpoint lacks the data stream state needed to resume".into())),
            }
        } else {
            ckpt.stage = stage;
            ckpt.iteration = 0;
            ckpt.task = task.map(str::to_string);
            if matches!(stage, Stage::FinetunePhi | Stage::FinetuneJoint) && ckpt.phi.is_none() {
                ckpt.phi = Some(ckpt.theta.clone());
            }
            ckpt.optim.clear();
            for &id in trained_stores(stage) {
                let store = store_mut(&mut ckpt, id);
                let state = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, store);
                ckpt.optim.insert(id.name().to_string(), state);
            }
            substream(cfg.seed, &format!("train/{stage}/{}", task.unwrap_or("")))
        };
        let source = match &cfg.clean_dir {
            Some(dir) => CleanSource::from_dir(dir)?,
            None => CleanSource::Synthetic,
        };
        let log_offset = if stage == Stage::FinetuneMain { cfg.finetune_iters } else { 0 };
        Ok(Self {
            cfg,
            ckpt,
            rng,
            source,
            log: TrainLog::default(),
            started: Instant::now(),
            log_offset,
            grad_norms: None,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.ckpt.iteration
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    /// Keeps the squared gradient norm of every trained tensor from the last
    /// step, keyed `store/name`.
    pub fn track_gradients(&mut self) {
        self.grad_norms = Some(BTreeMap::new());
    }

    pub fn grad_norms(&self) -> Option<&BTreeMap<String, f64>> {
        self.grad_norms.as_ref()
    }

    /// Current state, including the data stream position.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.ckpt.clone();
        c.rng = Some(RngState::capture(&self.rng));
        c
    }

    pub fn finish(self) -> (Checkpoint, TrainLog) {
        let ckpt = self.checkpoint();
        (ckpt, self.log)
    }

    /// Steps until `iteration` iterations of the stage are complete.
    pub fn run_until(&mut self, iteration: u64) -> Result<()> {
        while self.ckpt.iteration < iteration {
            self.step()?;
        }
        Ok(())
    }

    fn phase(ckpt: &Checkpoint) -> Phase<'_> {
        match ckpt.stage {
            Stage::Pretrain => Phase::Pretrain,
            _ => Phase::Finetune(ckpt.task.as_deref().expect("fine-tune stages carry a task")),
        }
    }

    fn build(&mut self, tape: &mut Tape<f64>, pair: &Pair) -> Result<Graph> {
        let cfg = self.cfg;
        let model = &cfg.model;
        let cor = tape.constant(pair.corrupted.clone());
        let gt = tape.constant(pair.clean.clone());
        let ck = &self.ckpt;
        Ok(match ck.stage {
            Stage::Pretrain => {
                let th = ck.theta.bind(tape);
                let pl = ck.plm.bind(tape);
                let q_gt = plm_forward(tape, &pl, gt, model)?;
                let q_d = plm_forward(tape, &pl, cor, model)?;
                let out = backbone_forward(tape, &th, cor, q_gt, model)?.out;
                let loss = combined_pretrain_loss(
                    tape,
                    out,
                    gt,
                    q_d.0,
                    q_gt.0,
                    cfg.lambda,
                    &cfg.contrastive,
                    &mut self.rng,
                )?;
                Graph {
                    total: loss.total,
                    l1: loss.l1,
                    contrastive: Some(loss.contrastive),
                    bound: vec![(StoreId::Theta, th), (StoreId::Plm, pl)],
                }
            }
            Stage::FinetunePhi => {
                let phi = ck.phi.as_ref().expect("phi created at stage start");
                let ph = phi.bind(tape);
                let pl = ck.plm.bind_frozen(tape);
                let q = plm_forward(tape, &pl, cor, model)?;
                let pseudo = backbone_forward(tape, &ph, cor, q, model)?.out;
                let l1 = tape.l1(pseudo, gt)?;
                Graph {
                    total: l1,
                    l1,
                    contrastive: None,
                    bound: vec![(StoreId::Phi, ph)],
                }
            }
            Stage::FinetuneMain => {
                // the frozen pseudo-GT enters as data
                let pseudo = pseudo_gt(ck, &pair.corrupted)?;
                let pseudo = tape.constant(pseudo);
                let th = ck.theta.bind(tape);
                let pl = ck.plm.bind(tape);
                let q = plm_forward(tape, &pl, pseudo, model)?;
                let out = backbone_forward(tape, &th, cor, q, model)?.out;
                let l1 = tape.l1(out, gt)?;
                Graph {
                    total: l1,
                    l1,
                    contrastive: None,
                    bound: vec![(StoreId::Theta, th), (StoreId::Plm, pl)],
                }
            }
            Stage::FinetuneJoint => {
                let phi = ck.phi.as_ref().expect("phi created at stage start");
                let th = ck.theta.bind(tape);
                let pl = ck.plm.bind(tape);
                let ph = phi.bind(tape);
                let q_self = plm_forward(tape, &pl, cor, model)?;
                let pseudo = backbone_forward(tape, &ph, cor, q_self, model)?.out;
                let prior_input = if cfg.detach_pseudo_gt {
                    tape.constant(tape.value(pseudo).detached())
                } else {
                    pseudo
                };
                let q = plm_forward(tape, &pl, prior_input, model)?;
                let out = backbone_forward(tape, &th, cor, q, model)?.out;
                let l1 = tape.l1(out, gt)?;
                let l1_pseudo = tape.l1(pseudo, gt)?;
                let total = tape.add(l1, l1_pseudo)?;
                Graph {
                    total,
                    l1,
                    contrastive: None,
                    bound: vec![(StoreId::Theta, th), (StoreId::Plm, pl), (StoreId::Phi, ph)],
                }
            }
            Stage::Init => unreachable!("rejected in begin"),
        })
    }

    /// One optimizer step over `batch_size` freshly sampled pairs.
    pub fn step(&mut self) -> Result<&LogRecord> {
        let cfg = self.cfg;
        let iteration = self.ckpt.iteration;
        let batch = cfg.batch_size;
        let (mut l1_sum, mut con_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let mut tasks = Vec::with_capacity(batch);
        for _ in 0..batch {
            let pair = sample_pair(&cfg.tasks, Self::phase(&self.ckpt), &self.source, cfg.height, cfg.width, &mut self.rng)?;
            let mut tape = Tape::new();
            let g = self.build(&mut tape, &pair)?;
            let l1 = tape.value(g.l1).item();
            let con = g.contrastive.map_or(0.0, |c| tape.value(c).item());
            let total = tape.value(g.total).item();
            if !(l1.is_finite() && con.is_finite() && total.is_finite()) {
                return Err(Error::NonFinite {
                    iteration: iteration + 1,
                    task: pair.task,
                    l1,
                    contrastive: con,
                });
            }
            let objective = if batch > 1 { tape.scale(g.total, 1.0 / batch as f64) } else { g.total };
            tape.backward(objective)?;
            for (id, bound) in &g.bound {
                store_mut(&mut self.ckpt, *id).absorb_grads(&tape, bound)?;
            }
            l1_sum += l1;
            con_sum += con;
            total_sum += total;
            tasks.push(pair.task);
        }

        if let Some(norms) = &mut self.grad_norms {
            norms.clear();
            for &id in trained_stores(self.ckpt.stage) {
                for (name, t) in store_mut(&mut self.ckpt, id).iter() {
                    let sq = t.grad.as_ref().map_or(0.0, |g| g.iter().map(|x| x * x).sum());
                    norms.insert(format!("{}/{name}", id.name()), sq);
                }
            }
        }

        let lr = cfg.lr_at(iteration);
        for &id in trained_stores(self.ckpt.stage) {
            let mut state = self.ckpt.optim.remove(id.name()).expect("optimizer state per trained store");
            state.set_lr(lr);
            let store = store_mut(&mut self.ckpt, id);
            adam_step(store, &mut state)?;
            // keep in-memory state identical to a reloaded checkpoint
            store.clear_grads();
            self.ckpt.optim.insert(id.name().to_string(), state);
        }
        self.ckpt.iteration += 1;

        let n = batch as f64;
        self.log.records.push(LogRecord {
            iteration: self.log_offset + self.ckpt.iteration,
            task: tasks.join("+"),
            l1: l1_sum / n,
            contrastive: con_sum / n,
            total: total_sum / n,
            seconds: if cfg.log_wall_time { self.started.elapsed().as_secs_f64() } else { 0.0 },
        });
        Ok(self.log.records.last().expect("just pushed"))
    }
}

/// Task-agnostic pre-training of θ and the prior module, starting from
/// fresh weights.
pub fn pretrain(cfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    pretrain_from(cfg, Checkpoint::init(&cfg.model, cfg.seed))
}

/// Pre-trains `ckpt` (fresh, or a partially pre-trained checkpoint to resume)
/// up to `cfg.pretrain_iters` iterations.
pub fn pretrain_from(cfg: &TrainConfig, ckpt: Checkpoint) -> Result<(Checkpoint, TrainLog)> {
    let mut s = Session::begin(cfg, ckpt, Stage::Pretrain, None)?;
    s.run_until(cfg.pretrain_iters)?;
    Ok(s.finish())
}

/// Stepwise fine-tuning: train φ on pseudo-GT vs GT, then freeze it and train
/// θ and the prior module on top of its output. Resumes mid-phase checkpoints.
pub fn finetune_stepwise(cfg: &TrainConfig, init: Checkpoint, task: &str) -> Result<(Checkpoint, TrainLog)> {
    let mut log = TrainLog::default();
    let mut ckpt = init;
    if ckpt.stage != Stage::FinetuneMain {
        let mut s = Session::begin(cfg, ckpt, Stage::FinetunePhi, Some(task))?;
        s.run_until(cfg.finetune_iters)?;
        let (c, l) = s.finish();
        ckpt = c;
        log.extend(l);
    }
    let mut s = Session::begin(cfg, ckpt, Stage::FinetuneMain, Some(task))?;
    s.run_until(cfg.finetune_iters)?;
    let (c, l) = s.finish();
    log.extend(l);
    Ok((c, log))
}

/// Joint fine-tuning of φ, θ and the prior module on
/// `L1(output, GT) + L1(pseudoGT, GT)`.
pub fn finetune_joint(cfg: &TrainConfig, init: Checkpoint, task: &str) -> Result<(Checkpoint, TrainLog)> {
    let mut s = Session::begin(cfg, init, Stage::FinetuneJoint, Some(task))?;
    s.run_until(cfg.finetune_iters)?;
    Ok(s.finish())
}

/// Fine-tunes with the procedure selected by `cfg.finetune_mode`.
pub fn finetune(cfg: &TrainConfig, init: Checkpoint, task: &str) -> Result<(Checkpoint, TrainLog)> {
    match cfg.finetune_mode {
        FinetuneMode::Stepwise => finetune_stepwise(cfg, init, task),
        FinetuneMode::Joint => finetune_joint(cfg, init, task),
    }
}
