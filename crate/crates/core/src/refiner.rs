//! Coarse-to-fine refinement: a signal embedding of the inputs conditions
//! `k` resampled candidates, and a fixed reward picks the best of the
//! candidates and the coarse input.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{sample, SamplerConfig, VelocityField};
use crate::metrics::{av_align, clip_style_score, energy_envelope, EvalConfig};
use crate::model::{resample_video, ConditionBundle};
use crate::rng::derive_seed;
use crate::synthetic::Projection;
use crate::tensor::Tensor;

pub const TEMPORAL: &str = "temporal";
pub const SEMANTIC: &str = "semantic";
pub const SMOOTHNESS: &str = "smoothness";

/// Width of the shared space used by the semantic reward.
pub const SEMANTIC_DIM: usize = 16;

/// Summary of the conditioning inputs and the coarse latent.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalEmbedding {
    pub vector: Tensor<f64>,
}

fn mean_max(x: Option<&Tensor<f64>>, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    let mut max = vec![0.0; d];
    if let Some(x) = x.filter(|x| x.rows() > 0) {
        let n = x.rows() as f64;
        max = vec![f64::NEG_INFINITY; d];
        for i in 0..x.rows() {
            for (k, &v) in x.row(i).iter().take(d).enumerate() {
                mean[k] += v / n;
                max[k] = max[k].max(v);
            }
        }
    }
    mean.into_iter().chain(max).collect()
}

fn mean_rows(x: Option<&Tensor<f64>>, d: usize) -> Vec<f64> {
    let mut v = mean_max(x, d);
    v.truncate(d);
    v
}

/// Mean and max over time of the active video features and of the coarse
/// latent, plus the mean active text token, through a fixed projection to
/// `d_signal`. Missing conditions contribute zeros.
pub fn extract_signal(
    cond: &ConditionBundle<f64>,
    coarse: &Tensor<f64>,
    dims: SignalDims,
    d_signal: usize,
) -> SignalEmbedding {
    let mut feats = mean_max(cond.active_video(), dims.video);
    feats.extend(mean_max(Some(coarse), dims.audio));
    feats.extend(mean_rows(cond.active_text(), dims.text));
    let proj = Projection::new("signal", feats.len(), d_signal);
    SignalEmbedding {
        vector: Tensor::from_vec(vec![d_signal], proj.apply(&feats)).expect("signal shape"),
    }
}

/// Feature widths of the three inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignalDims {
    pub audio: usize,
    pub video: usize,
    pub text: usize,
}

impl From<&crate::model::ModelConfig> for SignalDims {
    fn from(c: &crate::model::ModelConfig) -> Self {
        Self {
            audio: c.d_audio_latent,
            video: c.d_video_feat,
            text: c.d_text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub temporal: f64,
    pub semantic: f64,
    pub smoothness: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            temporal: 0.5,
            semantic: 0.4,
            smoothness: 0.1,
        }
    }
}

impl RewardWeights {
    pub fn get(&self, name: &str) -> f64 {
        match name {
            TEMPORAL => self.temporal,
            SEMANTIC => self.semantic,
            SMOOTHNESS => self.smoothness,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.temporal, self.semantic, self.smoothness];
        if w.iter().any(|&x| !(x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("reward weights {w:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }

    /// Weights of the present components, rescaled to sum to 1.
    pub fn normalized(&self, present: &[&str]) -> BTreeMap<String, f64> {
        let total: f64 = present.iter().map(|n| self.get(n)).sum();
        present
            .iter()
            .map(|&n| (n.to_string(), if total > 0.0 { self.get(n) / total } else { 0.0 }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub components: BTreeMap<String, f64>,
    /// Normalised weights of the present components.
    pub weights: BTreeMap<String, f64>,
    pub aggregate: f64,
}

impl RewardReport {
    pub fn from_components(components: BTreeMap<String, f64>, weights: &RewardWeights) -> Self {
        let names: Vec<&str> = components.keys().map(String::as_str).collect();
        let w = weights.normalized(&names);
        let aggregate = components.iter().map(|(n, v)| w[n] * v).sum();
        Self {
            components,
            weights: w,
            aggregate,
        }
    }

    pub fn recompute(&self) -> f64 {
        self.components.iter().map(|(n, v)| self.weights[n] * v).sum()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }
}

/// Settings of the reward components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub weights: RewardWeights,
    pub eval: EvalConfig,
    /// Mean squared frame difference that maps to smoothness 0.
    pub smoothness_scale: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            weights: RewardWeights::default(),
            eval: EvalConfig::default(),
            smoothness_scale: 4.0,
        }
    }
}

fn cosine_reward(a: &[f64], b: &[f64]) -> Result<f64> {
    match clip_style_score(a, b) {
        Ok(s) => Ok(s / 100.0),
        Err(Error::Contract(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Scores a `[T, d_a]` candidate against the conditions.
///
/// - temporal: peak alignment of the candidate and video energy envelopes
///   (video resampled to `T` frames); omitted without video
/// - semantic: cosine of pooled projections of the candidate and of the
///   video, or of the text when there is no video, scaled to `[0, 1]`
///   (0 for a zero vector); omitted without either
/// - smoothness: `1 - msd / scale` clamped to `[0, 1]`, `msd` the mean
///   squared difference of consecutive frames
pub fn reward(candidate: &Tensor<f64>, cond: &ConditionBundle<f64>, cfg: &RewardConfig) -> Result<RewardReport> {
    if candidate.shape().len() != 2 || candidate.rows() < 3 {
        return Err(Error::shape("reward", candidate.shape(), &[3, 0]));
    }
    if !candidate.is_finite() {
        return Err(Error::contract("candidate holds non-finite values"));
    }
    let (t, d) = (candidate.rows(), candidate.cols());
    let mut comps = BTreeMap::new();
    let audio_env = energy_envelope(candidate);
    let audio_pooled = Projection::new("reward.audio", 2 * d, SEMANTIC_DIM).apply(&mean_max(Some(candidate), d));

    if let Some(video) = cond.active_video() {
        let v = resample_video(video, t)?;
        let pa = cfg.eval.peaks(&audio_env)?;
        let pv = cfg.eval.peaks(&energy_envelope(&v))?;
        comps.insert(TEMPORAL.to_string(), av_align(&pa, &pv, cfg.eval.window)?);
        let dv = video.cols();
        let vp = Projection::new("reward.video", 2 * dv, SEMANTIC_DIM).apply(&mean_max(Some(video), dv));
        comps.insert(SEMANTIC.to_string(), cosine_reward(&audio_pooled, &vp)?);
    } else if let Some(text) = cond.active_text() {
        let dt = text.cols();
        let tp = Projection::new("reward.text", dt, SEMANTIC_DIM).apply(&mean_rows(Some(text), dt));
        comps.insert(SEMANTIC.to_string(), cosine_reward(&audio_pooled, &tp)?);
    }

    let mut msd = 0.0;
    for j in 1..t {
        for (a, b) in candidate.row(j).iter().zip(candidate.row(j - 1)) {
            msd += (a - b) * (a - b);
        }
    }
    msd /= ((t - 1) * d) as f64;
    comps.insert(
        SMOOTHNESS.to_string(),
        (1.0 - msd / cfg.smoothness_scale).clamp(0.0, 1.0),
    );
    Ok(RewardReport::from_components(comps, &cfg.weights))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub k: usize,
    pub sampler: SamplerConfig,
    pub reward: RewardConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            k: 4,
            sampler: SamplerConfig {
                nfe: 16,
                ..SamplerConfig::default()
            },
            reward: RewardConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CandidateStatus {
    Scored(RewardReport),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub index: usize,
    pub seed: u64,
    pub status: CandidateStatus,
}

impl TraceEntry {
    pub fn report(&self) -> Option<&RewardReport> {
        match &self.status {
            CandidateStatus::Scored(r) => Some(r),
            CandidateStatus::Failed(_) => None,
        }
    }
}

/// `None` when the coarse input was kept.
pub type Choice = Option<usize>;

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub best: Tensor<f64>,
    pub report: RewardReport,
    pub chosen: Choice,
    pub coarse_report: RewardReport,
    pub trace: Vec<TraceEntry>,
}

impl Refined {
    /// `index,seed,temporal,semantic,smoothness,aggregate,status`, coarse
    /// first; absent components are `-`.
    pub fn trace_csv(&self) -> String {
        let comp = |r: &RewardReport, n: &str| r.get(n).map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        let row = |s: &mut String, idx: &str, seed: &str, r: Option<&RewardReport>, status: &str| {
            let cells = match r {
                Some(r) => format!(
                    "{},{},{},{:.6}",
                    comp(r, TEMPORAL),
                    comp(r, SEMANTIC),
                    comp(r, SMOOTHNESS),
                    r.aggregate
                ),
                None => "-,-,-,-".to_string(),
            };
            let _ = writeln!(s, "{idx},{seed},{cells},{status}");
        };
        let mut s = String::from("index,seed,temporal,semantic,smoothness,aggregate,status\n");
        let mark = |c: Choice| if self.chosen == c { "chosen" } else { "ok" };
        row(&mut s, "coarse", "-", Some(&self.coarse_report), mark(None));
        for e in &self.trace {
            match &e.status {
                CandidateStatus::Scored(r) => row(&mut s, &e.index.to_string(), &e.seed.to_string(), Some(r), mark(Some(e.index))),
                CandidateStatus::Failed(msg) => {
                    let msg = msg.replace([',', '\n'], " ");
                    row(&mut s, &e.index.to_string(), &e.seed.to_string(), None, &format!("failed: {msg}"))
                }
            }
        }
        s
    }

    pub fn trace_json(&self) -> String {
        let value = serde_json::json!({
            "chosen": self.chosen,
            "coarse": self.coarse_report,
            "best": self.report,
            "candidates": self.trace,
        });
        serde_json::to_string_pretty(&value).expect("trace serializes") + "\n"
    }
}

/// Generates `k` candidates with the signal embedding appended as an extra
/// conditioning token, seeds `derive_seed(sampler.seed, i)`, and returns the
/// highest-reward latent among the coarse input and the candidates (ties
/// keep the earlier one, coarse first). A candidate whose sampling or
/// scoring fails is skipped and recorded.
pub fn refine(
    field: &(impl VelocityField<f64> + ?Sized),
    cond: &ConditionBundle<f64>,
    coarse: &Tensor<f64>,
    dims: SignalDims,
    d_signal: usize,
    cfg: &RefineConfig,
) -> Result<Refined> {
    if cfg.k == 0 {
        return Err(Error::config("refine needs k >= 1"));
    }
    cfg.reward.weights.validate()?;
    cfg.sampler.validate()?;
    let coarse_report = reward(coarse, cond, &cfg.reward)?;
    let signal = extract_signal(cond, coarse, dims, d_signal);
    let token = signal.vector.reshaped(&[1, d_signal])?;
    let tokens = match &cond.extra_tokens {
        Some(prev) => {
            let mut data = prev.data().to_vec();
            data.extend_from_slice(token.data());
            Tensor::from_vec(vec![prev.rows() + 1, d_signal], data)?
        }
        None => token,
    };
    let guided = cond.clone().with_extra_tokens(tokens);

    let mut best = coarse.clone();
    let mut best_report = coarse_report.clone();
    let mut chosen = None;
    let mut trace = Vec::with_capacity(cfg.k);
    for i in 0..cfg.k {
        let seed = derive_seed(cfg.sampler.seed, i as u64);
        let sc = SamplerConfig { seed, ..cfg.sampler };
        let outcome = sample(field, &guided, &sc, coarse.shape())
            .and_then(|x| reward(&x, cond, &cfg.reward).map(|r| (x, r)));
        let status = match outcome {
            Ok((x, r)) => {
                if r.aggregate > best_report.aggregate {
                    best = x;
                    best_report = r.clone();
                    chosen = Some(i);
                }
                CandidateStatus::Scored(r)
            }
            Err(e) => CandidateStatus::Failed(e.to_string()),
        };
        trace.push(TraceEntry { index: i, seed, status });
    }
    Ok(Refined {
        best,
        report: best_report,
        chosen,
        coarse_report,
        trace,
    })
}
