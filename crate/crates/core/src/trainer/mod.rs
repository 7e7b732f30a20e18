//! Staged curriculum training: batch draws, flow-matching loss, clipped
//! Adam updates, event log and resumable checkpoints.

mod curriculum;
mod optim;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

pub use curriculum::{
    draw_batch, preset, Batch, DatasetTag, Datasets, Draw, Example, Mix, StageConfig, PAPER_STEPS, TOY_STEPS,
};
pub use optim::{clip_grad_norm, clip_store_grads, global_norm, AdamState, OptimizerConfig};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::flow::{cfm_loss, BoundModel, FlowItem};
use crate::model::{ConditionBundle, DitModel};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::synthetic::ToyPair;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// One optimizer step.
///
/// `text_kept` and `video_kept` count the samples of the batch that kept
/// each condition.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainEvent {
    pub step: u64,
    pub stage_id: u8,
    pub loss: f64,
    pub grad_norm_preclip: f64,
    pub mix_draw: DatasetTag,
    pub text_kept: u32,
    pub video_kept: u32,
}

/// Header line of the event log.
pub const EVENT_HEADER: &str = "#step\tstage\tloss\tgrad_norm\tmix\ttext_kept\tvideo_kept";

impl fmt::Display for TrainEvent {
    /// Tab-separated fields in declaration order; floats use the shortest
    /// representation that parses back to the same value.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            self.stage_id,
            self.loss,
            self.grad_norm_preclip,
            self.mix_draw,
            self.text_kept,
            self.video_kept
        )
    }
}

impl FromStr for TrainEvent {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = || Error::format(format!("malformed event line {line:?}"));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(bad());
        }
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            stage_id: f[1].parse().map_err(|_| bad())?,
            loss: f[2].parse().map_err(|_| bad())?,
            grad_norm_preclip: f[3].parse().map_err(|_| bad())?,
            mix_draw: f[4].parse()?,
            text_kept: f[5].parse().map_err(|_| bad())?,
            video_kept: f[6].parse().map_err(|_| bad())?,
        })
    }
}

/// Writes the header and one line per event.
pub fn write_events(w: &mut impl Write, events: &[TrainEvent]) -> Result<()> {
    writeln!(w, "{EVENT_HEADER}")?;
    for e in events {
        writeln!(w, "{e}")?;
    }
    Ok(())
}

pub fn parse_events(text: &str) -> Result<Vec<TrainEvent>> {
    text.lines()
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::parse)
        .collect()
}

/// Where a run stands in the curriculum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Progress {
    /// Last fully trained stage, 0 before stage 1.
    pub completed_stage: u8,
    /// Steps already taken in stage `completed_stage + 1`.
    pub stage_step: u64,
    pub global_step: u64,
}

/// Model, optimizer moments and curriculum position.
#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub model: DitModel<T>,
    pub adam: AdamState<T>,
    pub progress: Progress,
}

const PROGRESS_RECORD: &str = "trainer.progress";
const ADAM_T_RECORD: &str = "optim.t";

impl<T: Scalar> TrainState<T> {
    pub fn new(model: DitModel<T>) -> Self {
        let adam = AdamState::new(model.params());
        Self {
            model,
            adam,
            progress: Progress::default(),
        }
    }

    /// Model parameters plus `optim.m.*`, `optim.v.*`, `optim.t` and
    /// `trainer.progress` records.
    pub fn to_container(&self) -> Container {
        let mut c = self.model.to_container();
        let shapes: Vec<(String, Vec<usize>)> = self
            .model
            .params()
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        for (i, (name, shape)) in shapes.iter().enumerate() {
            let m = Tensor::from_vec(shape.clone(), self.adam.m[i].clone()).expect("moment shape");
            let v = Tensor::from_vec(shape.clone(), self.adam.v[i].clone()).expect("moment shape");
            c.push(format!("optim.m.{name}"), &m);
            c.push(format!("optim.v.{name}"), &v);
        }
        c.push(ADAM_T_RECORD, &Tensor::<f64>::scalar(self.adam.t as f64));
        let p = self.progress;
        let prog = Tensor::<f64>::from_vec(
            vec![3],
            vec![p.completed_stage as f64, p.stage_step as f64, p.global_step as f64],
        )
        .expect("progress shape");
        c.push(PROGRESS_RECORD, &prog);
        c
    }

    /// Restores a state; a plain model checkpoint starts with fresh moments
    /// and the progress recorded in it, or stage 0 if it has none.
    pub fn from_container(c: &Container) -> Result<Self> {
        let model = DitModel::<T>::from_container(c)?;
        let mut state = Self::new(model);
        if let Some(t) = c.tensor::<f64>(ADAM_T_RECORD) {
            state.adam.t = t.data()[0] as u64;
            let names: Vec<String> = state.model.params().iter().map(|(n, _)| n.to_string()).collect();
            for (i, name) in names.iter().enumerate() {
                let m = c.require::<T>(&format!("optim.m.{name}"))?;
                let v = c.require::<T>(&format!("optim.v.{name}"))?;
                if m.numel() != state.adam.m[i].len() || v.numel() != state.adam.v[i].len() {
                    return Err(Error::format(format!("optimizer moment size mismatch for {name}")));
                }
                state.adam.m[i] = m.into_data();
                state.adam.v[i] = v.into_data();
            }
        }
        if let Some(p) = c.tensor::<f64>(PROGRESS_RECORD) {
            let d = p.data();
            if d.len() != 3 || d[0] > 3.0 {
                return Err(Error::format("malformed trainer.progress record"));
            }
            state.progress = Progress {
                completed_stage: d[0] as u8,
                stage_step: d[1] as u64,
                global_step: d[2] as u64,
            };
        }
        Ok(state)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

impl<T: Scalar> Example<T> {
    pub fn from_toy(p: &ToyPair) -> Self {
        Self {
            id: p.id.clone(),
            latent: p.latent.cast(),
            text: Some(p.text.cast()),
            video: Some(p.video.cast()),
        }
    }

    /// Condition bundle honouring the keep flags of `draw`.
    pub fn condition(&self, draw: &Draw) -> ConditionBundle<T> {
        ConditionBundle {
            text_emb: self.text.clone().filter(|_| draw.text_kept),
            video_feat: self.video.clone().filter(|_| draw.video_kept),
            text_kept: draw.text_kept && self.text.is_some(),
            video_kept: draw.video_kept && self.video.is_some(),
            extra_tokens: None,
        }
    }
}

impl<T: Scalar> Datasets<T> {
    pub fn from_toy(pairs: &[ToyPair]) -> Self {
        let pool: Vec<Example<T>> = pairs.iter().map(Example::from_toy).collect();
        Self::from_paired(&pool)
    }
}

/// Run controls that do not affect the update rule.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions<'a> {
    pub seed: u64,
    /// Stop after this many steps even if the stage is not finished.
    pub max_steps: Option<u64>,
    /// Written when the stage ends or the step limit is hit.
    pub checkpoint: Option<&'a Path>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageReport {
    pub steps_run: u64,
    pub finished: bool,
}

/// Trains `stage` from where `state` left off.
///
/// Step `k` (global, 1-based) draws its batch and flow samples from
/// `SeededRng::derived(seed, k)`, so resuming from a checkpoint replays the
/// same events. A non-finite loss or gradient aborts with
/// [`Error::Divergence`] before the update, leaving `state` and any
/// checkpoint at the last good step.
pub fn run_stage<T: Scalar>(
    state: &mut TrainState<T>,
    stage: &StageConfig,
    opt: &OptimizerConfig,
    data: &Datasets<T>,
    run: &RunOptions<'_>,
    sink: &mut dyn FnMut(&TrainEvent) -> Result<()>,
) -> Result<StageReport> {
    stage.validate()?;
    opt.validate()?;
    let expected = state.progress.completed_stage + 1;
    if stage.stage_id != expected {
        return Err(Error::config(format!(
            "stage {} cannot run: the state has completed stage {} so stage {} is next",
            stage.stage_id, state.progress.completed_stage, expected
        )));
    }
    let mut steps_run = 0u64;
    while state.progress.stage_step < stage.steps && run.max_steps.is_none_or(|m| steps_run < m) {
        let step = state.progress.global_step + 1;
        let event = train_step(state, stage, opt, data, run.seed, step)?;
        state.progress.global_step = step;
        state.progress.stage_step += 1;
        steps_run += 1;
        sink(&event)?;
    }
    let finished = state.progress.stage_step >= stage.steps;
    if finished {
        state.progress.completed_stage = stage.stage_id;
        state.progress.stage_step = 0;
    }
    if let Some(path) = run.checkpoint {
        state.save(path)?;
    }
    Ok(StageReport { steps_run, finished })
}

fn divergence(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Divergence {
            step,
            what: format!("non-finite value in {op}"),
        },
        Error::Divergence { what, .. } => Error::Divergence { step, what },
        other => other,
    }
}

fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    stage: &StageConfig,
    opt: &OptimizerConfig,
    data: &Datasets<T>,
    seed: u64,
    step: u64,
) -> Result<TrainEvent> {
    let mut rng = SeededRng::derived(seed, step);
    let batch = draw_batch(stage, data, opt.batch_size, &mut rng)?;
    let pool = data.get(batch.tag);
    let items: Vec<FlowItem<T>> = batch
        .draws
        .iter()
        .map(|d| {
            let ex = &pool[d.index];
            FlowItem {
                x1: ex.latent.clone(),
                cond: ex.condition(d),
            }
        })
        .collect();

    let mut tape = Tape::new();
    let bound = BoundModel::new(&state.model, &mut tape);
    let loss_var = cfm_loss(&mut tape, &bound, &items, &mut rng).map_err(|e| divergence(step, e))?;
    let loss = tape.value(loss_var)[0].as_f64();
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step,
            what: "loss is not finite".into(),
        });
    }
    tape.backward(loss_var).map_err(|e| divergence(step, e))?;
    let params = bound.params;

    let mut trial = state.model.params().clone();
    trial.zero_grads();
    trial.collect_grads(&tape, &params)?;
    let norm = clip_store_grads(&mut trial, opt.grad_clip_norm)?;
    if !norm.is_finite() {
        return Err(Error::Divergence {
            step,
            what: "gradient norm is not finite".into(),
        });
    }
    let mut adam = state.adam.clone();
    adam.step(&mut trial, opt).map_err(|e| divergence(step, e))?;
    trial.zero_grads();
    *state.model.params_mut() = trial;
    state.adam = adam;

    Ok(TrainEvent {
        step,
        stage_id: stage.stage_id,
        loss,
        grad_norm_preclip: norm,
        mix_draw: batch.tag,
        text_kept: batch.text_kept(),
        video_kept: batch.video_kept(),
    })
}

/// Runs every stage of `stages` that the state has not yet completed, in
/// order, collecting all events.
pub fn run_curriculum<T: Scalar>(
    state: &mut TrainState<T>,
    stages: &[StageConfig],
    opt: &OptimizerConfig,
    data: &Datasets<T>,
    seed: u64,
) -> Result<Vec<TrainEvent>> {
    let mut events = Vec::new();
    for stage in stages {
        if stage.stage_id <= state.progress.completed_stage {
            continue;
        }
        let run = RunOptions {
            seed,
            ..Default::default()
        };
        run_stage(state, stage, opt, data, &run, &mut |e| {
            events.push(e.clone());
            Ok(())
        })?;
    }
    Ok(events)
}
