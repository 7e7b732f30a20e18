//! Subcommand bodies.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ysnd_core::container::Container;
use ysnd_core::datapipe::{run_pipeline, EnvelopeSource, FilterPolicy, NoEnvelopes};
use ysnd_core::flow::sample;
use ysnd_core::metrics::{energy_envelope, evaluate_set, load_pairs, EvalConfig};
use ysnd_core::model::{resample_video, ConditionBundle, DitModel, ModelConfig};
use ysnd_core::refiner::{refine, RefineConfig, RewardConfig};
use ysnd_core::rng::derive_seed;
use ysnd_core::synthetic::{toy_pairs, SyntheticText, SyntheticVideo, TextProvider, VideoProvider, TOY_TEXT_TOKENS};
use ysnd_core::tensor::Tensor;
use ysnd_core::trainer::{
    preset, run_stage, Datasets, OptimizerConfig, RunOptions, StageConfig, TrainState, EVENT_HEADER,
};
use ysnd_core::{Error, Result, SamplerConfig};

use crate::args::{CondArgs, EvalArgs, OptimPreset, PipelineArgs, RefineArgs, SampleArgs, TrainArgs};

/// Substreams of the single `--seed`.
const SEED_MODEL: u64 = 1;
const SEED_DATA: u64 = 2;
const SEED_TRAIN: u64 = 3;

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(config_err(format!("{what} {} does not exist", p.display())))
    }
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(config_err(format!("{what} {} is not a directory", p.display())))
    }
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            ensure_parent(p)?;
            fs::write(p, text)?;
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn stage_plan(a: &TrainArgs) -> Result<Vec<StageConfig>> {
    let mut stages = preset(a.preset.name())?;
    if !a.stages.is_empty() {
        let mut wanted = a.stages.clone();
        wanted.sort_unstable();
        wanted.dedup();
        for id in &wanted {
            if !stages.iter().any(|s| s.stage_id == *id) {
                return Err(config_err(format!("preset {} has no stage {id}", a.preset.name())));
            }
        }
        stages.retain(|s| wanted.contains(&s.stage_id));
    }
    if let Some(steps) = a.steps {
        for s in &mut stages {
            s.steps = steps;
        }
    }
    Ok(stages)
}

fn optimizer(a: &TrainArgs) -> Result<OptimizerConfig> {
    let mut o = match a.optimizer {
        OptimPreset::Toy => OptimizerConfig::toy(),
        OptimPreset::Paper => OptimizerConfig::paper(),
    };
    if let Some(lr) = a.lr {
        o.lr = lr;
    }
    if let Some(b) = a.batch_size {
        o.batch_size = b;
    }
    if let Some(c) = a.grad_clip {
        o.grad_clip_norm = c;
    }
    o.validate()?;
    Ok(o)
}

fn write_pair_files(dir: &Path, pairs: &[ysnd_core::synthetic::ToyPair]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for p in pairs {
        let mut c = Container::tensors();
        c.push("latent", &p.latent);
        c.push("video", &p.video);
        c.push("text", &p.text);
        c.save(dir.join(format!("{}.ysnd", p.id)))?;
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let stages = stage_plan(a)?;
    let opt = optimizer(a)?;
    if let Some(r) = &a.resume {
        require_file(r, "resume checkpoint")?;
    }
    let mut state = match &a.resume {
        Some(p) => TrainState::<f64>::load(p)?,
        None => {
            let cfg = ModelConfig {
                d_model: a.model.d_model,
                n_layers: a.model.layers,
                n_heads: a.model.heads,
                ..ModelConfig::default()
            };
            cfg.validate()?;
            TrainState::new(DitModel::new(cfg, derive_seed(a.seed, SEED_MODEL))?)
        }
    };
    let pending: Vec<StageConfig> = stages
        .into_iter()
        .filter(|s| s.stage_id > state.progress.completed_stage)
        .collect();
    let mut next = state.progress.completed_stage + 1;
    for s in &pending {
        if s.stage_id != next {
            return Err(config_err(format!(
                "stage {} requires a stage {} checkpoint (pass --resume)",
                s.stage_id,
                s.stage_id - 1
            )));
        }
        next += 1;
    }
    if a.pairs == 0 {
        return Err(config_err("--pairs must be positive"));
    }
    let cfg = *state.model.config();
    let pairs = toy_pairs(&cfg, a.pairs, derive_seed(a.seed, SEED_DATA));
    let data = Datasets::<f64>::from_toy(&pairs);
    fs::create_dir_all(&a.out_dir)?;
    if let Some(dir) = &a.export_data {
        write_pair_files(dir, &pairs)?;
    }

    let log_path = a.out_dir.join("events.tsv");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path)?);
    writeln!(log, "{EVENT_HEADER}")?;
    for stage in &pending {
        let ckpt = a.out_dir.join(format!("stage{}.ysnd", stage.stage_id));
        let run = RunOptions {
            seed: derive_seed(a.seed, SEED_TRAIN),
            max_steps: None,
            checkpoint: Some(&ckpt),
        };
        let mut losses = Vec::new();
        let report = run_stage(&mut state, stage, &opt, &data, &run, &mut |e| {
            losses.push(e.loss);
            writeln!(log, "{e}")?;
            Ok(())
        })?;
        log.flush()?;
        let window = losses.len().min(50).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        println!(
            "stage {}: {} steps, loss first {:.4} last {:.4}, checkpoint {}",
            stage.stage_id,
            report.steps_run,
            mean(&losses[..window.min(losses.len())]),
            mean(&losses[losses.len().saturating_sub(window)..]),
            ckpt.display()
        );
    }
    log.flush()?;
    Ok(())
}

fn load_model(path: &Path) -> Result<DitModel<f64>> {
    require_file(path, "checkpoint")?;
    DitModel::from_container(&Container::load(path)?)
}

fn is_file_ref(s: &str) -> bool {
    s.ends_with(".ysnd")
}

fn record_from(path: &str, name: &str, cols: usize) -> Result<Tensor<f64>> {
    let p = PathBuf::from(path);
    require_file(&p, "condition file")?;
    let t: Tensor<f64> = Container::load(&p)?.require(name)?;
    if t.shape().len() != 2 || t.cols() != cols {
        return Err(Error::Shape {
            op: "condition",
            lhs: t.shape().to_vec(),
            rhs: vec![0, cols],
        });
    }
    Ok(t)
}

fn condition(c: &CondArgs, cfg: &ModelConfig) -> Result<ConditionBundle<f64>> {
    let text = match &c.text {
        Some(s) if is_file_ref(s) => Some(record_from(s, "text", cfg.d_text)?),
        Some(s) => Some(
            SyntheticText {
                d_text: cfg.d_text,
                n_tokens: TOY_TEXT_TOKENS,
            }
            .embed_text(s),
        ),
        None => None,
    };
    let video = match &c.video {
        Some(s) if is_file_ref(s) => Some(record_from(s, "video", cfg.d_video_feat)?),
        Some(s) => Some(
            SyntheticVideo {
                d_video: cfg.d_video_feat,
                frames: cfg.t_audio,
            }
            .video_features(s),
        ),
        None => None,
    };
    Ok(match (text, video) {
        (Some(t), Some(v)) => ConditionBundle::text_and_video(t, v),
        (Some(t), None) => ConditionBundle::text(t),
        (None, Some(v)) => ConditionBundle::video(v),
        (None, None) => ConditionBundle::unconditional(),
    })
}

fn latent_container(latent: &Tensor<f64>, cond: &ConditionBundle<f64>) -> Result<Container> {
    let mut c = Container::tensors();
    c.push("latent", latent);
    let env = energy_envelope(latent);
    c.push("envelope", &Tensor::from_vec(vec![env.len()], env)?);
    if let Some(v) = cond.active_video() {
        c.push("video", v);
    }
    if let Some(t) = cond.active_text() {
        c.push("text", t);
    }
    Ok(c)
}

pub fn sample_cmd(a: &SampleArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let cfg = *model.config();
    let cond = condition(&a.cond, &cfg)?;
    let sc = SamplerConfig {
        nfe: a.sampler.nfe,
        sway_coef: a.sampler.sway,
        guidance_scale: a.sampler.guidance,
        seed: a.sampler.seed,
    };
    sc.validate()?;
    ensure_parent(&a.out)?;
    let x = sample(&model, &cond, &sc, &[cfg.t_audio, cfg.d_audio_latent])?;
    latent_container(&x, &cond)?.save(&a.out)?;
    println!(
        "sampled [{}, {}] with nfe {} ({}) -> {}",
        cfg.t_audio,
        cfg.d_audio_latent,
        sc.nfe,
        if cond.is_unconditional() { "unconditional" } else { "conditional" },
        a.out.display()
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    require_dir(&a.gen, "--gen")?;
    require_dir(&a.reference, "--ref")?;
    let cfg = EvalConfig {
        frame_rate: a.frame_rate,
        threshold_rel: a.threshold,
        min_separation: a.min_separation,
        window: a.window,
        ..EvalConfig::default()
    };
    let (pairs, _) = load_pairs(&a.gen, &a.reference)?;
    if pairs.is_empty() {
        return Err(config_err(format!(
            "no paired .ysnd files in {} and {}",
            a.gen.display(),
            a.reference.display()
        )));
    }
    let report = evaluate_set(&a.gen, &a.reference, &cfg)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let text = if a.json { report.to_json() } else { report.to_csv() };
    write_text(a.out.as_deref(), &text)?;
    if let Some(dir) = &a.plot {
        fs::create_dir_all(dir)?;
        for p in &pairs {
            let ea = energy_envelope(&p.gen_latent);
            let ev = energy_envelope(&resample_video(&p.ref_video, ea.len())?);
            let mut s = String::from("time,audio_energy,video_energy\n");
            for (i, (x, y)) in ea.iter().zip(&ev).enumerate() {
                s.push_str(&format!("{},{x},{y}\n", i as f64 / cfg.frame_rate));
            }
            fs::write(dir.join(format!("{}.csv", p.id)), s)?;
        }
    }
    Ok(())
}

/// Envelopes from `<clip_id>.ysnd` files holding `latent` and `video`.
struct MediaDir {
    dir: PathBuf,
}

impl EnvelopeSource for MediaDir {
    fn envelopes(&self, clip_id: &str) -> Option<(Vec<f64>, Vec<f64>)> {
        let c = Container::load(self.dir.join(format!("{clip_id}.ysnd"))).ok()?;
        let latent: Tensor<f64> = c.tensor("latent")?;
        let video: Tensor<f64> = c.tensor("video")?;
        let video = resample_video(&video, latent.rows()).ok()?;
        Some((energy_envelope(&latent), energy_envelope(&video)))
    }
}

pub fn pipeline(a: &PipelineArgs) -> Result<()> {
    require_file(&a.manifest, "manifest")?;
    if let Some(d) = &a.media_dir {
        require_dir(d, "--media-dir")?;
    }
    let policy = FilterPolicy {
        min_av_align: a.min_av,
        min_semantic: a.min_sem,
        drop_speech: !a.keep_speech,
        drop_bgm: !a.keep_bgm,
    };
    policy.validate()?;
    let cfg = EvalConfig {
        frame_rate: a.frame_rate,
        ..EvalConfig::default()
    };
    let text = fs::read_to_string(&a.manifest)?;
    let out = match &a.media_dir {
        Some(d) => run_pipeline(&text, &policy, &MediaDir { dir: d.clone() }, &cfg)?,
        None => run_pipeline(&text, &policy, &NoEnvelopes, &cfg)?,
    };
    for e in &out.errors {
        eprintln!("warning: {}:{}: {}", a.manifest.display(), e.line, e.reason);
    }
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    ensure_parent(&a.out)?;
    fs::write(&a.out, out.manifest())?;
    write_text(a.report.as_deref(), &out.report.to_csv())?;
    Ok(())
}

pub fn refine_cmd(a: &RefineArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    require_file(&a.coarse, "coarse latent")?;
    let cfg = *model.config();
    let coarse: Tensor<f64> = Container::load(&a.coarse)?.require("latent")?;
    if coarse.shape() != [cfg.t_audio, cfg.d_audio_latent] {
        return Err(Error::Shape {
            op: "refine",
            lhs: coarse.shape().to_vec(),
            rhs: vec![cfg.t_audio, cfg.d_audio_latent],
        });
    }
    let cond = condition(&a.cond, &cfg)?;
    let rc = RefineConfig {
        k: a.k as usize,
        sampler: SamplerConfig {
            nfe: a.nfe,
            sway_coef: a.sway,
            guidance_scale: a.guidance,
            seed: a.seed,
        },
        reward: RewardConfig::default(),
    };
    ensure_parent(&a.out)?;
    let out = refine(&model, &cond, &coarse, (&cfg).into(), cfg.d_model, &rc)?;
    latent_container(&out.best, &cond)?.save(&a.out)?;
    let trace = if a.json { out.trace_json() } else { out.trace_csv() };
    write_text(a.trace.as_deref(), &trace)?;
    Ok(())
}
