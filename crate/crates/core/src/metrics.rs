//! Distribution, classifier, similarity and temporal-alignment measures,
//! and directory-level evaluation.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::synthetic::Projection;
use crate::tensor::Tensor;

/// Probability floor used before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
/// Negative eigenvalues below this magnitude are rounding noise.
pub const PSD_TOLERANCE: f64 = 1e-6;

/// `[n, d]` embeddings from one provider.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Tensor<f64>,
    pub provider_id: String,
}

impl EmbeddingSet {
    pub fn new(vectors: Tensor<f64>, provider_id: impl Into<String>) -> Result<Self> {
        if vectors.shape().len() != 2 {
            return Err(Error::shape("embedding_set", vectors.shape(), &[0, 0]));
        }
        if !vectors.is_finite() {
            return Err(Error::contract("embedding set holds non-finite values"));
        }
        Ok(Self {
            vectors,
            provider_id: provider_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d) = (self.len(), self.dim());
        let x = DMatrix::from_row_slice(n, d, self.vectors.data());
        let mu = x.row_mean().transpose();
        let mut c = x.clone();
        for mut row in c.row_iter_mut() {
            row -= mu.transpose();
        }
        let cov = c.transpose() * &c / (n as f64 - 1.0);
        (mu, cov)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frechet {
    pub distance: f64,
    /// Most negative eigenvalue clamped during the square roots (0 if none).
    pub min_eigenvalue: f64,
}

impl Frechet {
    /// Whether clamping exceeded [`PSD_TOLERANCE`].
    pub fn non_psd(&self) -> bool {
        self.min_eigenvalue < -PSD_TOLERANCE
    }
}

fn sym_sqrt(m: &DMatrix<f64>, min_eig: &mut f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        *min_eig = min_eig.min(*v);
        *v = v.max(0.0).sqrt();
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Frechet distance between the Gaussian moments of two embedding sets,
/// with the clamping diagnostic.
pub fn frechet(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<Frechet> {
    if a.dim() != b.dim() {
        return Err(Error::shape("frechet_distance", a.vectors.shape(), b.vectors.shape()));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::contract(format!(
            "frechet distance needs at least 2 vectors per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mu_a, cov_a) = a.moments();
    let (mu_b, cov_b) = b.moments();
    if mu_a == mu_b && cov_a == cov_b {
        return Ok(Frechet {
            distance: 0.0,
            min_eigenvalue: 0.0,
        });
    }
    let mut min_eigenvalue = 0.0f64;
    let sa = sym_sqrt(&cov_a, &mut min_eigenvalue);
    let cross = sym_sqrt(&(&sa * &cov_b * &sa), &mut min_eigenvalue);
    let mean_term = (&mu_a - &mu_b).norm_squared();
    let distance = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok(Frechet {
        distance: distance.max(0.0),
        min_eigenvalue,
    })
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})` with sample
/// covariances; negative eigenvalues are clamped to 0.
pub fn frechet_distance(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    frechet(a, b).map(|f| f.distance)
}

/// `[n, c]` class probabilities, rows on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosterior {
    pub probs: Tensor<f64>,
}

impl ClassPosterior {
    pub fn new(probs: Tensor<f64>) -> Result<Self> {
        if probs.shape().len() != 2 || probs.cols() == 0 {
            return Err(Error::shape("class_posterior", probs.shape(), &[0, 0]));
        }
        for i in 0..probs.rows() {
            let row = probs.row(i);
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::contract(format!("posterior row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!("posterior row {i} sums to {s}")));
            }
        }
        Ok(Self { probs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.probs.cols()
    }

    fn floored_row(&self, i: usize) -> Vec<f64> {
        floor_normalize(self.probs.row(i))
    }
}

fn floor_normalize(p: &[f64]) -> Vec<f64> {
    let q: Vec<f64> = p.iter().map(|&x| x.max(PROB_FLOOR)).collect();
    let s: f64 = q.iter().sum();
    q.into_iter().map(|x| x / s).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

/// Maps raw per-class scores through the logistic function, then divides
/// each row by its sum.
pub fn calibrate_sigmoid(scores: &Tensor<f64>) -> Result<ClassPosterior> {
    if scores.shape().len() != 2 {
        return Err(Error::shape("calibrate_sigmoid", scores.shape(), &[0, 0]));
    }
    let c = scores.cols();
    let mut out = Vec::with_capacity(scores.numel());
    for i in 0..scores.rows() {
        let s: Vec<f64> = scores.row(i).iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let z: f64 = s.iter().sum();
        out.extend(s.into_iter().map(|x| x / z));
    }
    ClassPosterior::new(Tensor::from_vec(vec![scores.rows(), c], out)?)
}

/// `exp(mean_i KL(p_i || mean_j p_j))`.
pub fn inception_score(p: &ClassPosterior) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::contract("inception score of an empty set"));
    }
    let rows: Vec<Vec<f64>> = (0..p.len()).map(|i| p.floored_row(i)).collect();
    let mut marginal = vec![0.0; p.classes()];
    for r in &rows {
        for (m, &x) in marginal.iter_mut().zip(r) {
            *m += x / rows.len() as f64;
        }
    }
    let mean_kl = rows.iter().map(|r| kl(r, &marginal)).sum::<f64>() / rows.len() as f64;
    Ok(mean_kl.exp())
}

/// Mean over paired samples of `KL(p_ref_i || p_gen_i)`.
pub fn kl_sigmoid(p_gen: &ClassPosterior, p_ref: &ClassPosterior) -> Result<f64> {
    if p_gen.probs.shape() != p_ref.probs.shape() {
        return Err(Error::shape("kl_sigmoid", p_gen.probs.shape(), p_ref.probs.shape()));
    }
    if p_gen.is_empty() {
        return Err(Error::contract("kl_sigmoid of an empty set"));
    }
    let total: f64 = (0..p_gen.len())
        .map(|i| kl(&p_ref.floored_row(i), &p_gen.floored_row(i)))
        .sum();
    Ok(total / p_gen.len() as f64)
}

/// `100 * max(0, cos(a, v))`.
pub fn clip_style_score(audio_emb: &[f64], video_emb: &[f64]) -> Result<f64> {
    if audio_emb.len() != video_emb.len() {
        return Err(Error::shape("clip_style_score", &[audio_emb.len()], &[video_emb.len()]));
    }
    let na = audio_emb.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = video_emb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nv == 0.0 {
        return Err(Error::contract("similarity is undefined for a zero vector"));
    }
    let dot: f64 = audio_emb.iter().zip(video_emb).map(|(a, b)| a * b).sum();
    Ok(100.0 * (dot / (na * nv)).clamp(0.0, 1.0))
}

/// Per-frame RMS of a `[T, d]` feature sequence.
pub fn energy_envelope(x: &Tensor<f64>) -> Vec<f64> {
    (0..x.rows())
        .map(|i| {
            let r = x.row(i);
            (r.iter().map(|v| v * v).sum::<f64>() / r.len().max(1) as f64).sqrt()
        })
        .collect()
}

/// Event times in seconds, strictly increasing, within `[0, duration)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakTrain {
    pub times: Vec<f64>,
    pub duration: f64,
}

impl PeakTrain {
    pub fn new(mut times: Vec<f64>, duration: f64) -> Result<Self> {
        times.sort_by(f64::total_cmp);
        if times.windows(2).any(|w| w[0] >= w[1]) || times.iter().any(|&t| !(0.0..duration).contains(&t)) {
            return Err(Error::contract("peak times must be distinct and within [0, duration)"));
        }
        Ok(Self { times, duration })
    }
}

/// Local maxima of `envelope` at or above `threshold_rel * max`, kept
/// highest-first while at least `min_separation` seconds from every peak
/// already kept. Frame `i` sits at `i / frame_rate` seconds.
pub fn detect_peaks(envelope: &[f64], frame_rate: f64, threshold_rel: f64, min_separation: f64) -> Result<PeakTrain> {
    let n = envelope.len();
    if n < 3 {
        return Err(Error::contract(format!("peak detection needs at least 3 frames, got {n}")));
    }
    if !(frame_rate > 0.0) {
        return Err(Error::config("frame_rate must be positive"));
    }
    let duration = n as f64 / frame_rate;
    let max = envelope.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return PeakTrain::new(Vec::new(), duration);
    }
    let floor = threshold_rel * max;
    let mut cands: Vec<usize> = (0..n)
        .filter(|&i| {
            let e = envelope[i];
            let left = i == 0 || e > envelope[i - 1];
            let right = i == n - 1 || e >= envelope[i + 1];
            e >= floor && e > 0.0 && left && right
        })
        .collect();
    cands.sort_by(|&a, &b| envelope[b].total_cmp(&envelope[a]).then(a.cmp(&b)));
    let mut kept: Vec<f64> = Vec::new();
    for i in cands {
        let t = i as f64 / frame_rate;
        if kept.iter().all(|&k| (k - t).abs() >= min_separation) {
            kept.push(t);
        }
    }
    PeakTrain::new(kept, duration)
}

/// Peak intersection-over-union: pairs within `window` seconds are matched
/// one-to-one, closest first; score is `matched / (|A| + |V| - matched)`.
/// Two empty trains score 1.
pub fn av_align(audio: &PeakTrain, video: &PeakTrain, window: f64) -> Result<f64> {
    if !(window > 0.0) {
        return Err(Error::contract(format!("window must be positive, got {window}")));
    }
    if (audio.duration - video.duration).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "peak trains span {} s and {} s",
            audio.duration, video.duration
        )));
    }
    let (a, v) = (&audio.times, &video.times);
    if a.is_empty() && v.is_empty() {
        return Ok(1.0);
    }
    let tol = window + 1e-9;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, &ta) in a.iter().enumerate() {
        for (j, &tv) in v.iter().enumerate() {
            let d = (ta - tv).abs();
            if d <= tol {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let (mut used_a, mut used_v) = (vec![false; a.len()], vec![false; v.len()]);
    let mut matched = 0usize;
    for (_, i, j) in pairs {
        if !used_a[i] && !used_v[j] {
            used_a[i] = true;
            used_v[j] = true;
            matched += 1;
        }
    }
    Ok(matched as f64 / (a.len() + v.len() - matched) as f64)
}

/// Settings shared by the evaluation entry points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Latent frames per second.
    pub frame_rate: f64,
    pub threshold_rel: f64,
    /// Seconds.
    pub min_separation: f64,
    /// Seconds.
    pub window: f64,
    pub embed_dim: usize,
    pub classes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            frame_rate: 10.0,
            threshold_rel: 0.3,
            min_separation: 0.2,
            window: 0.1,
            embed_dim: 16,
            classes: 8,
        }
    }
}

impl EvalConfig {
    pub fn peaks(&self, envelope: &[f64]) -> Result<PeakTrain> {
        detect_peaks(envelope, self.frame_rate, self.threshold_rel, self.min_separation)
    }

    /// Alignment between the energy peaks of an audio latent and of a video
    /// feature sequence over the same frames.
    pub fn align(&self, latent: &Tensor<f64>, video: &Tensor<f64>) -> Result<f64> {
        let a = self.peaks(&energy_envelope(latent))?;
        let v = self.peaks(&energy_envelope(video))?;
        av_align(&a, &v, self.window)
    }
}

/// Embedding and classifier stand-ins built from seeded projections.
#[derive(Debug, Clone)]
pub struct Providers {
    pub fad: Projection,
    pub fd: Projection,
    pub classifier: Projection,
    pub clip: Projection,
}

impl Providers {
    /// `d_audio`: latent width; `frames`: sequence length.
    pub fn synthetic(d_audio: usize, frames: usize, cfg: &EvalConfig) -> Self {
        Self {
            fad: Projection::new("fad", 2 * d_audio, cfg.embed_dim),
            fd: Projection::new("fd", 2 * d_audio, cfg.embed_dim),
            classifier: Projection::new("classifier", d_audio, cfg.classes),
            clip: Projection::new("clip", frames, cfg.embed_dim),
        }
    }
}

fn pooled(latent: &Tensor<f64>, second: impl Fn(&[f64], f64) -> f64) -> Vec<f64> {
    let (t, d) = (latent.rows(), latent.cols());
    let mut mean = vec![0.0; d];
    for i in 0..t {
        for (m, &x) in mean.iter_mut().zip(latent.row(i)) {
            *m += x / t as f64;
        }
    }
    let col = |k: usize| (0..t).map(|i| latent.row(i)[k]).collect::<Vec<_>>();
    let extra: Vec<f64> = (0..d).map(|k| second(&col(k), mean[k])).collect();
    mean.into_iter().chain(extra).collect()
}

fn mean_pool(latent: &Tensor<f64>) -> Vec<f64> {
    let mut v = pooled(latent, |_, _| 0.0);
    v.truncate(latent.cols());
    v
}

fn std_pool(latent: &Tensor<f64>) -> Vec<f64> {
    pooled(latent, |c, m| (c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / c.len() as f64).sqrt())
}

fn max_pool(latent: &Tensor<f64>) -> Vec<f64> {
    pooled(latent, |c, _| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

fn embed_rows(rows: &[Vec<f64>], id: &str) -> Result<EmbeddingSet> {
    let t = Tensor::from_rows(rows)?;
    EmbeddingSet::new(t, id)
}

/// Aggregates in the fixed column order FAD, FD, KL-sigmoid, IS, CLIP, AV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "FAD")]
    pub fad: f64,
    #[serde(rename = "FD")]
    pub fd: f64,
    #[serde(rename = "KL-sigmoid")]
    pub kl_sigmoid: f64,
    #[serde(rename = "IS")]
    pub is: f64,
    #[serde(rename = "CLIP")]
    pub clip: f64,
    #[serde(rename = "AV")]
    pub av: f64,
    pub pairs: usize,
    /// Ids present on one side only.
    pub missing: Vec<String>,
    /// Covariance square roots that needed clamping beyond tolerance.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub const REPORT_HEADER: &str = "FAD,FD,KL-sigmoid,IS,CLIP,AV";

impl MetricReport {
    pub fn values(&self) -> [f64; 6] {
        [self.fad, self.fd, self.kl_sigmoid, self.is, self.clip, self.av]
    }

    /// Header plus one row at six decimals, then a `# missing:` line when
    /// pairs were excluded.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        let row: Vec<String> = self.values().iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
        if !self.missing.is_empty() {
            let _ = writeln!(s, "# missing: {}", self.missing.join(" "));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// One evaluated clip: generated audio latent and reference latent and
/// video features.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub id: String,
    pub gen_latent: Tensor<f64>,
    pub ref_latent: Tensor<f64>,
    pub ref_video: Tensor<f64>,
}

/// All six measures over paired clips.
///
/// FAD and FD compare projected mean/std and mean/max pooled latents; the
/// classifier scores projected mean latents; CLIP compares projected energy
/// envelopes of generated audio and reference video; AV aligns their peaks.
pub fn evaluate_pairs(pairs: &[EvalPair], cfg: &EvalConfig) -> Result<MetricReport> {
    if pairs.len() < 2 {
        return Err(Error::contract(format!("evaluation needs at least 2 pairs, got {}", pairs.len())));
    }
    let first = &pairs[0];
    let (frames, d) = (first.ref_latent.rows(), first.ref_latent.cols());
    for p in pairs {
        for t in [&p.gen_latent, &p.ref_latent] {
            if t.shape() != [frames, d] {
                return Err(Error::shape("evaluate", t.shape(), &[frames, d]));
            }
        }
        if p.ref_video.rows() != frames {
            return Err(Error::shape("evaluate", p.ref_video.shape(), &[frames, 0]));
        }
    }
    let prov = Providers::synthetic(d, frames, cfg);
    let project = |proj: &Projection, pool: fn(&Tensor<f64>) -> Vec<f64>, pick: fn(&EvalPair) -> &Tensor<f64>| {
        let rows: Vec<Vec<f64>> = pairs.iter().map(|p| proj.apply(&pool(pick(p)))).collect();
        embed_rows(&rows, &proj.provider_id)
    };
    fn gen(p: &EvalPair) -> &Tensor<f64> {
        &p.gen_latent
    }
    fn refr(p: &EvalPair) -> &Tensor<f64> {
        &p.ref_latent
    }
    let fad = frechet(&project(&prov.fad, std_pool, gen)?, &project(&prov.fad, std_pool, refr)?)?;
    let fd = frechet(&project(&prov.fd, max_pool, gen)?, &project(&prov.fd, max_pool, refr)?)?;
    let warnings = [("FAD", fad), ("FD", fd)]
        .iter()
        .filter(|(_, f)| f.non_psd())
        .map(|(n, f)| format!("{n}: clamped eigenvalue {:e} while taking a covariance square root", f.min_eigenvalue))
        .collect();

    let logits = |pick: fn(&EvalPair) -> &Tensor<f64>| -> Result<ClassPosterior> {
        let rows: Vec<Vec<f64>> = pairs
            .iter()
            .map(|p| prov.classifier.apply(&mean_pool(pick(p))))
            .collect();
        calibrate_sigmoid(&Tensor::from_rows(&rows)?)
    };
    let p_gen = logits(gen)?;
    let p_ref = logits(refr)?;
    let kl = kl_sigmoid(&p_gen, &p_ref)?;
    let is = inception_score(&p_gen)?;

    let mut clip = 0.0;
    let mut av = 0.0;
    for p in pairs {
        let ea = energy_envelope(&p.gen_latent);
        let ev = energy_envelope(&p.ref_video);
        clip += clip_style_score(&prov.clip.apply(&ea), &prov.clip.apply(&ev))?;
        av += av_align(&cfg.peaks(&ea)?, &cfg.peaks(&ev)?, cfg.window)?;
    }
    let n = pairs.len() as f64;
    Ok(MetricReport {
        fad: fad.distance,
        fd: fd.distance,
        kl_sigmoid: kl,
        is,
        clip: clip / n,
        av: av / n,
        pairs: pairs.len(),
        missing: Vec::new(),
        warnings,
    })
}

fn clip_ids(dir: &Path) -> Result<BTreeSet<String>> {
    let mut ids = BTreeSet::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "ysnd") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.insert(stem.to_string());
            }
        }
    }
    Ok(ids)
}

/// Evaluates `<id>.ysnd` files of `gen_dir` against those of `ref_dir`.
///
/// Generated files need a `latent` record; reference files need `latent`
/// and `video`. Ids found on one side only are listed in
/// [`MetricReport::missing`] and excluded.
pub fn evaluate_set(gen_dir: &Path, ref_dir: &Path, cfg: &EvalConfig) -> Result<MetricReport> {
    let (pairs, missing) = load_pairs(gen_dir, ref_dir)?;
    let mut report = evaluate_pairs(&pairs, cfg)?;
    report.missing = missing;
    Ok(report)
}

/// Paired clips of two directories in id order, and the unpaired ids.
pub fn load_pairs(gen_dir: &Path, ref_dir: &Path) -> Result<(Vec<EvalPair>, Vec<String>)> {
    let gen_ids = clip_ids(gen_dir)?;
    let ref_ids = clip_ids(ref_dir)?;
    let missing: Vec<String> = gen_ids.symmetric_difference(&ref_ids).cloned().collect();
    let mut pairs = Vec::new();
    for id in gen_ids.intersection(&ref_ids) {
        let g = Container::load(gen_dir.join(format!("{id}.ysnd")))?;
        let r = Container::load(ref_dir.join(format!("{id}.ysnd")))?;
        pairs.push(EvalPair {
            id: id.clone(),
            gen_latent: g.require("latent")?,
            ref_latent: r.require("latent")?,
            ref_video: r.require("video")?,
        });
    }
    Ok((pairs, missing))
}
