//! Seeded stand-ins for pretrained encoders, and the toy paired dataset.
//!
//! Every provider is a pure function of its identifier strings, so the same
//! clip id or prompt yields the same features on every run.

use crate::model::ModelConfig;
use crate::rng::{derive_seed, hash_str, SeededRng};
use crate::tensor::Tensor;

/// Text encoder interface: prompt to `[n_tok, d_text]` token embeddings.
pub trait TextProvider {
    fn embed_text(&self, prompt: &str) -> Tensor<f64>;
}

/// Video encoder interface: clip id to `[t_v, d_video]` frame features.
pub trait VideoProvider {
    fn video_features(&self, clip_id: &str) -> Tensor<f64>;
}

/// Gaussian token embeddings seeded by the prompt text.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticText {
    pub d_text: usize,
    pub n_tokens: usize,
}

impl TextProvider for SyntheticText {
    fn embed_text(&self, prompt: &str) -> Tensor<f64> {
        SeededRng::new(hash_str(prompt)).normal_tensor(&[self.n_tokens, self.d_text], 1.0)
    }
}

/// Gaussian frame features seeded by the clip id.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticVideo {
    pub d_video: usize,
    pub frames: usize,
}

impl VideoProvider for SyntheticVideo {
    fn video_features(&self, clip_id: &str) -> Tensor<f64> {
        SeededRng::new(hash_str(clip_id)).normal_tensor(&[self.frames, self.d_video], 1.0)
    }
}

/// Fixed pseudo-random linear map `R^in -> R^out`, seeded by `provider_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub provider_id: String,
    pub in_dim: usize,
    pub out_dim: usize,
    weights: Vec<f64>,
}

impl Projection {
    pub fn new(provider_id: &str, in_dim: usize, out_dim: usize) -> Self {
        let mut rng = SeededRng::new(hash_str(provider_id));
        let std = (1.0 / in_dim.max(1) as f64).sqrt();
        let weights = (0..in_dim * out_dim).map(|_| rng.normal() * std).collect();
        Self {
            provider_id: provider_id.to_string(),
            in_dim,
            out_dim,
            weights,
        }
    }

    /// `x` is truncated or zero-padded to `in_dim`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        for (i, &xi) in x.iter().take(self.in_dim).enumerate() {
            let row = &self.weights[i * self.out_dim..(i + 1) * self.out_dim];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        out
    }
}

/// One synthetic audio-visual-text example.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPair {
    pub id: String,
    pub class: usize,
    /// Event onset frames, ascending.
    pub onsets: Vec<usize>,
    /// `[t_audio, d_audio_latent]`
    pub latent: Tensor<f64>,
    /// `[t_audio, d_video_feat]`
    pub video: Tensor<f64>,
    /// `[TOY_TEXT_TOKENS, d_text]`
    pub text: Tensor<f64>,
}

pub const TOY_CLASSES: usize = 4;
pub const TOY_TEXT_TOKENS: usize = 2;

/// Per-frame activity shared by the audio and video streams of a pair:
/// each onset starts a burst of amplitude `A` decaying by `e^-1` per frame.
fn activity(onsets: &[(usize, f64)], frames: usize) -> Vec<f64> {
    let mut a = vec![0.0; frames];
    for &(e, amp) in onsets {
        for (j, slot) in a.iter_mut().enumerate().skip(e) {
            *slot += amp * (-((j - e) as f64)).exp();
        }
    }
    a
}

fn unit_direction(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // scaled so the per-frame RMS of `a * v` equals `a`
    v.iter().map(|x| x / n * (d as f64).sqrt()).collect()
}

/// `n` pairs whose audio bursts coincide with video motion bursts.
///
/// Audio frame `j` is `a_j u_c` and video frame `j` is `a_j w_c`, with `a`
/// the shared activity curve and `u_c`, `w_c` class directions; so the RMS
/// envelopes of both streams equal `a` and peak at the onsets. Text tokens
/// identify the class but not the timing.
pub fn toy_pairs(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<ToyPair> {
    let t = cfg.t_audio;
    let mut class_rng = SeededRng::new(derive_seed(seed, u64::MAX));
    let classes: Vec<(Vec<f64>, Vec<f64>, Tensor<f64>)> = (0..TOY_CLASSES)
        .map(|_| {
            let u = unit_direction(&mut class_rng, cfg.d_audio_latent);
            let w = unit_direction(&mut class_rng, cfg.d_video_feat);
            let text = class_rng.normal_tensor(&[TOY_TEXT_TOKENS, cfg.d_text], 1.0);
            (u, w, text)
        })
        .collect();
    (0..n)
        .map(|i| {
            let mut rng = SeededRng::derived(seed, i as u64);
            let class = i % TOY_CLASSES;
            let (u, w, text) = &classes[class];
            let onsets = pick_onsets(&mut rng, t);
            let bursts: Vec<(usize, f64)> = onsets.iter().map(|&e| (e, 1.5 + rng.uniform())).collect();
            let a = activity(&bursts, t);
            let latent = Tensor::from_fn(&[t, cfg.d_audio_latent], |k| a[k / cfg.d_audio_latent] * u[k % cfg.d_audio_latent]);
            let video = Tensor::from_fn(&[t, cfg.d_video_feat], |k| a[k / cfg.d_video_feat] * w[k % cfg.d_video_feat]);
            let text = Tensor::from_fn(&[TOY_TEXT_TOKENS, cfg.d_text], |k| text.data()[k] + 0.1 * rng.normal());
            ToyPair {
                id: format!("toy{i:03}"),
                class,
                onsets,
                latent,
                video,
                text,
            }
        })
        .collect()
}

/// Two or three onsets at least four frames apart, away from the edges.
fn pick_onsets(rng: &mut SeededRng, frames: usize) -> Vec<usize> {
    let want = 2 + rng.below(2);
    let lo = 1;
    let hi = frames.saturating_sub(3).max(lo + 1);
    let mut onsets: Vec<usize> = Vec::new();
    for _ in 0..64 {
        if onsets.len() == want {
            break;
        }
        let e = lo + rng.below(hi - lo);
        if onsets.iter().all(|&o| o.abs_diff(e) >= 4) {
            onsets.push(e);
        }
    }
    onsets.sort_unstable();
    onsets
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn providers_are_deterministic_in_their_ids() {
        let p = SyntheticText { d_text: 4, n_tokens: 3 };
        assert_eq!(p.embed_text("dog barks"), p.embed_text("dog barks"));
        assert_ne!(p.embed_text("dog barks"), p.embed_text("door slams"));
        let a = Projection::new("fad", 5, 3);
        assert_eq!(a, Projection::new("fad", 5, 3));
        assert_ne!(a.apply(&[1.0; 5]), Projection::new("fd", 5, 3).apply(&[1.0; 5]));
    }

    #[test]
    fn toy_envelopes_share_onsets() {
        let cfg = ModelConfig::default();
        let pairs = toy_pairs(&cfg, 8, 3);
        assert_eq!(pairs, toy_pairs(&cfg, 8, 3));
        for p in &pairs {
            assert!((2..=3).contains(&p.onsets.len()));
            for j in 0..cfg.t_audio {
                let ra = (p.latent.row(j).iter().map(|x| x * x).sum::<f64>() / cfg.d_audio_latent as f64).sqrt();
                let rv = (p.video.row(j).iter().map(|x| x * x).sum::<f64>() / cfg.d_video_feat as f64).sqrt();
                assert!((ra - rv).abs() < 1e-9);
            }
        }
    }
}
