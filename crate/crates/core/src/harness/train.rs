use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;

use crate::encoder::{ParamScope, PartitionedEncoder};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Checkpoint, TrainState};
use crate::harness::config::TrainConfig;
use crate::harness::data::SyntheticTask;
use crate::harness::optim::{scheduled_lr, Adam};
use crate::harness::report::{report_distribution, DistributionReport};
use crate::scoring::{ScalingTag, ScoreState};
use crate::surgery::{apply_adaptation, SurgeryReport};
use crate::tensor::derive_seed;

const SURGERY_STREAM: u64 = 0x5u64 << 32 | 0x60;

/// What happened during one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Mean CTC loss over the batch.
    pub loss: f64,
    pub lr: f64,
    pub scaling: ScalingTag,
    /// Surgery applied before this step's forward pass.
    pub surgery: Option<SurgeryReport>,
    /// Score table the surgery ranked, when one happened.
    pub scores_at_event: Option<String>,
}

/// Owns the model and all mutable loop state.
pub struct Trainer {
    config: TrainConfig,
    model: PartitionedEncoder<f32>,
    scores: ScoreState,
    task: SyntheticTask,
    adam: Adam,
    events: Vec<usize>,
    state: TrainState,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let model = PartitionedEncoder::build(&config.model)?;
        Self::assemble(config, model, TrainState::default())
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        Self::assemble(ckpt.config, ckpt.model, ckpt.state)
    }

    pub fn resume(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(load_checkpoint(dir)?)
    }

    fn assemble(config: TrainConfig, model: PartitionedEncoder<f32>, state: TrainState) -> Result<Self> {
        config.validate()?;
        let mut scores = ScoreState::new(config.score.clone(), config.train.seed)?;
        scores.steps_since_update = state.steps_since_update;
        Ok(Trainer {
            task: SyntheticTask::new(&config.data, config.model.feature_dim)?,
            adam: Adam::from_settings(&config.train),
            events: config.event_steps()?,
            config,
            model,
            scores,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &PartitionedEncoder<f32> {
        &self.model
    }

    pub fn scores(&self) -> &ScoreState {
        &self.scores
    }

    pub fn state(&self) -> TrainState {
        self.state
    }

    pub fn event_steps(&self) -> &[usize] {
        &self.events
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.config.train.total_steps
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(&self.model, &self.config, &self.state, dir)
    }

    /// Runs the next step. On error the trainer is left exactly as before
    /// the call.
    pub fn step(&mut self) -> Result<StepRecord> {
        let s = self.state.step;
        let total = self.config.train.total_steps;
        if s >= total {
            return Err(Error::InvalidState(format!("all {total} steps already run")));
        }

        let mut staged = None;
        let mut surgery = None;
        let mut scores_at_event = None;
        if self.events.contains(&s) {
            let plan = self.config.plan.as_ref().expect("events imply a plan");
            let mut next = self.model.clone();
            scores_at_event = Some(self.scores.score_table(&next));
            let seed = derive_seed(self.config.train.seed, &[SURGERY_STREAM, s as u64]);
            surgery = Some(apply_adaptation(&mut next, &self.scores, plan, s, total, seed)?);
            staged = Some(next);
        }
        let mut model = staged.unwrap_or_else(|| self.model.clone());

        let batch = self.task.batch::<f32>(s, self.config.train.batch_size)?;
        let scaling = self.scores.apply_learnable_scales(s);
        let weight = 1.0 / batch.len() as f32;
        let results = batch
            .par_iter()
            .map(|u| model.loss_and_grads(&u.features, &u.labels, scaling == ScalingTag::Scaled, weight))
            .collect::<Vec<_>>();
        model.zero_grads();
        let mut loss = 0.0;
        for r in results {
            let (l, grads) = r?;
            loss += l;
            model.accumulate_grads(&grads)?;
        }
        loss /= batch.len() as f64;

        let mut scores = self.scores.clone();
        if scores.tick() {
            scores.update_scores(&mut model)?;
        }
        let lr = scheduled_lr(s, &self.config.train)?;
        let adam_t = self.state.adam_t + 1;
        self.adam.step(model.params_mut(), adam_t, lr)?;

        self.model = model;
        self.scores = scores;
        self.state = TrainState { step: s + 1, adam_t, steps_since_update: self.scores.steps_since_update };
        Ok(StepRecord { step: s, loss, lr, scaling, surgery, scores_at_event })
    }
}

/// Files produced by [`run_training`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub losses: Vec<f64>,
    pub surgeries: Vec<SurgeryReport>,
    pub distribution: DistributionReport,
    pub initial_params: usize,
    pub final_params: usize,
}

impl RunSummary {
    pub fn loss_log(&self) -> PathBuf {
        self.out_dir.join("loss.csv")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.out_dir.join("final")
    }

    pub fn initial_checkpoint(&self) -> PathBuf {
        self.out_dir.join("initial")
    }
}

/// Trains from scratch, writing into `out_dir`:
/// `config.toml`, `loss.csv`, `run.log`, `initial/`, `final/`,
/// `scores_step<N>.tsv` per event and `distribution.tsv`.
pub fn run_training(config: &TrainConfig, out_dir: &Path) -> Result<RunSummary> {
    let mut trainer = Trainer::new(config.clone())?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), config.to_toml())?;
    trainer.save(&out_dir.join("initial"))?;

    let mut loss_log = BufWriter::new(File::create(out_dir.join("loss.csv"))?);
    writeln!(loss_log, "step,loss,lr,event_flag")?;
    let mut run_log = BufWriter::new(File::create(out_dir.join("run.log"))?);
    let initial_params = trainer.model().count_params(ParamScope::EncoderGroups);
    writeln!(
        run_log,
        "start total_steps={} events={:?} group_params={initial_params}",
        config.train.total_steps,
        trainer.event_steps()
    )?;
    info!("training {} steps, events at {:?}", config.train.total_steps, trainer.event_steps());

    let mut losses = Vec::with_capacity(config.train.total_steps);
    let mut surgeries = Vec::new();
    while !trainer.is_finished() {
        let rec = match trainer.step() {
            Ok(rec) => rec,
            Err(e) => {
                let step = trainer.state().step;
                let checkpoint = out_dir.join("last_good");
                trainer.save(&checkpoint)?;
                writeln!(run_log, "abort step={step} error={e}")?;
                warn!("aborting at step {step}: {e}");
                return Err(Error::TrainingAborted { step, checkpoint, source: Box::new(e) });
            }
        };
        writeln!(loss_log, "{},{},{},{}", rec.step, rec.loss, rec.lr, u8::from(rec.surgery.is_some()))?;
        if let Some(table) = &rec.scores_at_event {
            fs::write(out_dir.join(format!("scores_step{}.tsv", rec.step)), table)?;
        }
        if let Some(report) = rec.surgery {
            write!(run_log, "{report}")?;
            info!(
                "step {}: dropped {} groups ({} params), grew {} ({} params)",
                rec.step,
                report.dropped.len(),
                report.dropped_params(),
                report.grown.len(),
                report.grown_params()
            );
            surgeries.push(report);
        }
        if rec.step % 100 == 0 {
            info!("step {} loss {:.4} lr {:.3e}", rec.step, rec.loss, rec.lr);
        }
        losses.push(rec.loss);
    }
    loss_log.flush()?;

    let final_dir = out_dir.join("final");
    trainer.save(&final_dir)?;
    let distribution = report_distribution(&read_manifest(&out_dir.join("initial"))?, &read_manifest(&final_dir)?)?;
    fs::write(out_dir.join("distribution.tsv"), distribution.to_tsv())?;
    let final_params = trainer.model().count_params(ParamScope::EncoderGroups);
    writeln!(run_log, "done final_loss={} group_params={final_params}", losses.last().copied().unwrap_or(f64::NAN))?;
    run_log.flush()?;
    Ok(RunSummary { out_dir: out_dir.to_path_buf(), losses, surgeries, distribution, initial_params, final_params })
}
