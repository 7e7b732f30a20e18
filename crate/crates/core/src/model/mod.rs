//! Two-tower diffusion transformer.
//!
//! The audio tower attends to conditioning tokens through cross-attention in
//! every layer. The video tower runs alongside it on video features resampled
//! to the audio length, and an [`Avmm`] mixer couples the two after every
//! layer pair. When the video condition is dropped, the video tower and the
//! mixers are bypassed and the network is a plain text-to-audio DiT.

mod blocks;
mod config;
mod embed;

use std::sync::atomic::{AtomicU64, Ordering};

pub use blocks::{avmm_mix, Attention, AudioBlock, Avmm, BlockCtx, Mlp, VideoBlock, LN_EPS};
pub use config::{ModelConfig, MLP_RATIO};
pub use embed::{resample_video, sinusoidal_features};

use crate::error::{Error, Result};
use crate::params::{Bound, Linear, LinearInit, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-sample conditioning.
///
/// A dropped text condition is replaced by the learned null token; a dropped
/// video condition bypasses the video tower. Buffers of dropped conditions
/// are never read.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle<T> {
    /// `[n_tok, d_text]`
    pub text_emb: Option<Tensor<T>>,
    /// `[t_v, d_video_feat]`
    pub video_feat: Option<Tensor<T>>,
    pub text_kept: bool,
    pub video_kept: bool,
    /// Extra `[k, d_model]` tokens appended to the cross-attention context.
    pub extra_tokens: Option<Tensor<T>>,
}

impl<T: Scalar> ConditionBundle<T> {
    pub fn unconditional() -> Self {
        Self {
            text_emb: None,
            video_feat: None,
            text_kept: false,
            video_kept: false,
            extra_tokens: None,
        }
    }

    pub fn text(text_emb: Tensor<T>) -> Self {
        Self {
            text_emb: Some(text_emb),
            text_kept: true,
            ..Self::unconditional()
        }
    }

    pub fn video(video_feat: Tensor<T>) -> Self {
        Self {
            video_feat: Some(video_feat),
            video_kept: true,
            ..Self::unconditional()
        }
    }

    pub fn text_and_video(text_emb: Tensor<T>, video_feat: Tensor<T>) -> Self {
        Self {
            text_emb: Some(text_emb),
            video_feat: Some(video_feat),
            text_kept: true,
            video_kept: true,
            extra_tokens: None,
        }
    }

    pub fn with_extra_tokens(mut self, tokens: Tensor<T>) -> Self {
        self.extra_tokens = Some(tokens);
        self
    }

    pub fn is_unconditional(&self) -> bool {
        !self.text_kept && !self.video_kept && self.extra_tokens.is_none()
    }

    /// Video features when the video condition is active.
    pub fn active_video(&self) -> Option<&Tensor<T>> {
        self.video_feat.as_ref().filter(|_| self.video_kept)
    }

    pub fn active_text(&self) -> Option<&Tensor<T>> {
        self.text_emb.as_ref().filter(|_| self.text_kept)
    }
}

#[derive(Debug, Clone)]
struct Layout {
    input: Linear,
    video_in: Linear,
    text_in: Linear,
    null_text: ParamId,
    time_fc1: Linear,
    time_fc2: Linear,
    output: Linear,
    audio: Vec<AudioBlock>,
    video: Vec<VideoBlock>,
    avmm: Vec<Avmm>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Identity blocks: zero adaLN modulation and zero mixers.
    Standard,
    /// Every parameter drawn from `N(0, std^2)`, standing in for trained
    /// weights in tests.
    Random { std_milli: u32 },
}

#[derive(Debug)]
pub struct DitModel<T> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
    video_tower_calls: AtomicU64,
}

impl<T: Scalar> Clone for DitModel<T> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg,
            params: self.params.clone(),
            layout: self.layout.clone(),
            video_tower_calls: AtomicU64::new(self.video_tower_calls.load(Ordering::Relaxed)),
        }
    }
}

impl<T: Scalar> DitModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_init(cfg, seed, Init::Standard)
    }

    pub fn with_init(cfg: ModelConfig, seed: u64, init: Init) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let s = &mut store;
        let r = &mut rng;
        let input = Linear::new(s, "input", cfg.d_audio_latent, d, LinearInit::Scaled, r);
        let video_in = Linear::new(s, "video_in", cfg.d_video_feat, d, LinearInit::Scaled, r);
        let text_in = Linear::new(s, "text_in", cfg.d_text, d, LinearInit::Scaled, r);
        let null_text = s.add("null_text", r.normal_tensor(&[1, d], 0.02));
        let time_fc1 = Linear::new(s, "time.fc1", d, d, LinearInit::Scaled, r);
        let time_fc2 = Linear::new(s, "time.fc2", d, d, LinearInit::Scaled, r);
        let mut audio = Vec::new();
        let mut video = Vec::new();
        let mut avmm = Vec::new();
        for i in 0..cfg.n_layers {
            audio.push(AudioBlock::new(s, &format!("audio.{i}"), d, r));
            video.push(VideoBlock::new(s, &format!("video.{i}"), d, r));
            avmm.push(Avmm::new(s, &format!("avmm.{i}"), d, r));
        }
        let output = Linear::new(s, "output", d, cfg.d_audio_latent, LinearInit::Scaled, r);
        if let Init::Random { std_milli } = init {
            store.randomize(&mut rng, std_milli as f64 / 1000.0);
        }
        Ok(Self {
            cfg,
            params: store,
            layout: Layout {
                input,
                video_in,
                text_in,
                null_text,
                time_fc1,
                time_fc2,
                output,
                audio,
                video,
                avmm,
            },
            video_tower_calls: AtomicU64::new(0),
        })
    }

    /// Rebuilds a model from a full set of named parameters.
    pub fn from_named(cfg: ModelConfig, named: impl IntoIterator<Item = (String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        let mut seen = vec![false; model.params.len()];
        for (name, t) in named {
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| Error::format(format!("unexpected parameter {name}")))?;
            model.params.set(&name, t.data().to_vec(), t.shape())?;
            seen[id.index()] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let name = model.params.iter().nth(i).map(|(n, _)| n.to_string()).unwrap_or_default();
            return Err(Error::format(format!("missing parameter {name}")));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Number of video-tower block evaluations since construction or the
    /// last reset.
    pub fn video_tower_calls(&self) -> u64 {
        self.video_tower_calls.load(Ordering::Relaxed)
    }

    pub fn reset_instrumentation(&self) {
        self.video_tower_calls.store(0, Ordering::Relaxed);
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.params.bind(tape)
    }

    /// Zeroes every adaLN modulation and mixer weight, restoring the
    /// identity-block initialization.
    pub fn zero_residual_branches(&mut self) {
        let zero_ids: Vec<ParamId> = self
            .layout
            .audio
            .iter()
            .map(|b| b.ada_ids())
            .chain(self.layout.video.iter().map(|b| b.ada_ids()))
            .flat_map(|(w, b)| [w, b])
            .chain(
                self.layout
                    .avmm
                    .iter()
                    .flat_map(|m| [m.audio.w, m.audio.b, m.video.w, m.video.b]),
            )
            .collect();
        for id in zero_ids {
            for x in self.params.get_mut(id).data_mut() {
                *x = T::zero();
            }
        }
    }

    /// Timestep embedding `[1, D]`: sinusoid followed by a two-layer MLP.
    pub fn embed_timestep(&self, tape: &mut Tape<T>, p: &Bound, t: T) -> Result<Var> {
        let d = self.cfg.d_model;
        let feats = tape.constant(&[1, d], sinusoidal_features(t, d)?)?;
        let h = self.layout.time_fc1.apply(tape, p, feats)?;
        let h = tape.silu(h)?;
        self.layout.time_fc2.apply(tape, p, h)
    }

    /// Cross-attention context: projected text tokens or the null token,
    /// followed by any extra tokens.
    fn context(&self, tape: &mut Tape<T>, p: &Bound, cond: &ConditionBundle<T>) -> Result<Var> {
        let base = match cond.active_text() {
            Some(text) => {
                if text.shape().len() != 2 || text.shape()[1] != self.cfg.d_text || text.shape()[0] == 0 {
                    return Err(Error::shape("text_emb", text.shape(), &[0, self.cfg.d_text]));
                }
                let t = tape.leaf(text);
                self.layout.text_in.apply(tape, p, t)?
            }
            None if cond.text_kept => return Err(Error::contract("text kept but no text embedding given")),
            None => p[self.layout.null_text],
        };
        match &cond.extra_tokens {
            Some(extra) => {
                if extra.shape().len() != 2 || extra.shape()[1] != self.cfg.d_model {
                    return Err(Error::shape("extra_tokens", extra.shape(), &[0, self.cfg.d_model]));
                }
                let e = tape.leaf(extra);
                tape.concat_rows(&[base, e])
            }
            None => Ok(base),
        }
    }

    /// Predicted velocity `[t_audio, d_audio_latent]` for `x_t` at time `t`.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x_t: Var, t: T, cond: &ConditionBundle<T>) -> Result<Var> {
        let want = [self.cfg.t_audio, self.cfg.d_audio_latent];
        if tape.shape(x_t) != want {
            return Err(Error::shape("forward", tape.shape(x_t), &want));
        }
        let ctx = BlockCtx::new(tape, self.cfg.d_model, self.cfg.n_heads)?;
        let temb = self.embed_timestep(tape, p, t)?;
        let c = tape.silu(temb)?;
        let text = self.context(tape, p, cond)?;

        let mut x_a = self.layout.input.apply(tape, p, x_t)?;
        let mut x_v = match (cond.video_kept, &cond.video_feat) {
            (false, _) => None,
            (true, None) => return Err(Error::contract("video kept but no video features given")),
            (true, Some(v)) => {
                if v.shape().len() != 2 || v.shape()[1] != self.cfg.d_video_feat {
                    return Err(Error::shape("video_feat", v.shape(), &[0, self.cfg.d_video_feat]));
                }
                let v = tape.leaf(&resample_video(v, self.cfg.t_audio)?);
                Some(self.layout.video_in.apply(tape, p, v)?)
            }
        };

        for i in 0..self.cfg.n_layers {
            let y_a = self.layout.audio[i].apply(tape, p, &ctx, x_a, text, c)?;
            x_a = match x_v {
                Some(v) => {
                    self.video_tower_calls.fetch_add(1, Ordering::Relaxed);
                    let y_v = self.layout.video[i].apply(tape, p, &ctx, v, c)?;
                    let (a, v) = self.layout.avmm[i].apply(tape, p, y_a, y_v)?;
                    x_v = Some(v);
                    a
                }
                None => y_a,
            };
        }
        self.layout.output.apply(tape, p, x_a)
    }

    /// Inference-only forward on plain tensors.
    pub fn predict(&self, x_t: &Tensor<T>, t: T, cond: &ConditionBundle<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let x = tape.leaf(&x_t.clone().with_requires_grad(false));
        let v = self.forward(&mut tape, &p, x, t, cond)?;
        Ok(tape.tensor(v))
    }

    /// `output(input(x))`: what [`Self::forward`] reduces to when every
    /// block and mixer is at its identity initialization.
    pub fn stem_only(&self, x_t: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let x = tape.leaf(&x_t.clone().with_requires_grad(false));
        let h = self.layout.input.apply(&mut tape, &p, x)?;
        let y = self.layout.output.apply(&mut tape, &p, h)?;
        Ok(tape.tensor(y))
    }

    pub fn layer(&self, i: usize) -> (&AudioBlock, &VideoBlock, &Avmm) {
        (&self.layout.audio[i], &self.layout.video[i], &self.layout.avmm[i])
    }
}

/// Record-name prefixes reserved for non-model state in checkpoints.
pub const RESERVED_PREFIXES: [&str; 2] = ["optim.", "trainer."];

impl<T: Scalar> DitModel<T> {
    pub fn to_container(&self) -> crate::container::Container {
        let mut c = crate::container::Container::checkpoint(self.cfg);
        for (name, t) in self.params.iter() {
            c.push(name, t);
        }
        c
    }

    /// Loads the model parameters of a checkpoint, ignoring optimizer and
    /// trainer records.
    pub fn from_container(c: &crate::container::Container) -> Result<Self> {
        let cfg = c
            .config
            .ok_or_else(|| Error::format("container holds no model config"))?;
        let named = c
            .records
            .iter()
            .filter(|r| !RESERVED_PREFIXES.iter().any(|p| r.name.starts_with(p)))
            .map(|r| {
                let data = r.data.iter().map(|&x| T::of(x)).collect();
                Tensor::from_vec(r.shape.clone(), data).map(|t| (r.name.clone(), t))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_named(cfg, named)
    }
}
