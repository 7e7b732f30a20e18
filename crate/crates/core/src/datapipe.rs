//! Manifest-driven clip curation: score, filter, cut.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{av_align, EvalConfig};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "#ysnd-manifest v1";

/// Slack for turning event times into frame indices.
const FRAME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub label: String,
    pub t_start: f64,
    pub t_end: f64,
}

/// One clip with its annotations and quality scores. Scores are `None`
/// until scored.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub duration: f64,
    pub events: Vec<Event>,
    pub av_align_score: Option<f64>,
    pub semantic_score: Option<f64>,
    pub speech_flag: bool,
    pub bgm_flag: bool,
}

impl ClipRecord {
    pub fn validate(&self) -> Result<()> {
        if self.clip_id.is_empty() || self.clip_id.contains(['\t', '\n']) {
            return Err(Error::format("clip id must be non-empty without tabs or newlines"));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::contract(format!("{}: duration {} must be positive", self.clip_id, self.duration)));
        }
        for (i, e) in self.events.iter().enumerate() {
            if !(0.0 <= e.t_start && e.t_start < e.t_end && e.t_end <= self.duration) {
                return Err(Error::contract(format!(
                    "{}: event {i} ({}) spans [{}, {}) outside [0, {}]",
                    self.clip_id, e.label, e.t_start, e.t_end, self.duration
                )));
            }
            if e.label.contains([':', ';', '\t', '\n']) {
                return Err(Error::format(format!("{}: event {i} label has a reserved character", self.clip_id)));
            }
        }
        for (name, s) in [("av_align", self.av_align_score), ("semantic", self.semantic_score)] {
            if let Some(s) = s {
                if !(0.0..=1.0).contains(&s) {
                    return Err(Error::contract(format!("{}: {name} score {s} outside [0, 1]", self.clip_id)));
                }
            }
        }
        Ok(())
    }

    pub fn is_scored(&self) -> bool {
        self.av_align_score.is_some() && self.semantic_score.is_some()
    }

    /// A single event spanning the whole clip.
    fn is_atomic(&self) -> bool {
        matches!(self.events.as_slice(), [e] if e.t_start == 0.0 && e.t_end == self.duration)
    }
}

fn fmt_score(s: Option<f64>) -> String {
    s.map_or_else(|| "-".to_string(), |v| v.to_string())
}

impl fmt::Display for ClipRecord {
    /// Tab-separated: id, duration, events (`label:start:end` joined by
    /// `;`), av_align, semantic, speech (0/1), bgm (0/1). Missing scores are
    /// written as `-`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let events: Vec<String> = self
            .events
            .iter()
            .map(|e| format!("{}:{}:{}", e.label, e.t_start, e.t_end))
            .collect();
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.clip_id,
            self.duration,
            events.join(";"),
            fmt_score(self.av_align_score),
            fmt_score(self.semantic_score),
            self.speech_flag as u8,
            self.bgm_flag as u8
        )
    }
}

fn parse_num(s: &str, what: &str) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::format(format!("{what}: not a number: {s:?}")))
}

fn parse_flag(s: &str, what: &str) -> Result<bool> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::format(format!("{what}: expected 0 or 1, got {s:?}"))),
    }
}

fn parse_score(s: &str, what: &str) -> Result<Option<f64>> {
    if s == "-" {
        Ok(None)
    } else {
        parse_num(s, what).map(Some)
    }
}

impl FromStr for ClipRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(Error::format(format!("expected 7 tab-separated fields, got {}", f.len())));
        }
        let mut events = Vec::new();
        for (i, ev) in f[2].split(';').filter(|s| !s.is_empty()).enumerate() {
            let parts: Vec<&str> = ev.split(':').collect();
            if parts.len() != 3 {
                return Err(Error::format(format!("event {i}: expected label:start:end, got {ev:?}")));
            }
            events.push(Event {
                label: parts[0].to_string(),
                t_start: parse_num(parts[1], "event start")?,
                t_end: parse_num(parts[2], "event end")?,
            });
        }
        let rec = ClipRecord {
            clip_id: f[0].to_string(),
            duration: parse_num(f[1], "duration")?,
            events,
            av_align_score: parse_score(f[3], "av_align")?,
            semantic_score: parse_score(f[4], "semantic")?,
            speech_flag: parse_flag(f[5], "speech")?,
            bgm_flag: parse_flag(f[6], "bgm")?,
        };
        rec.validate()?;
        Ok(rec)
    }
}

/// A manifest line that could not be used.
#[derive(Debug, Clone, PartialEq)]
pub struct LineError {
    /// 1-based.
    pub line: usize,
    pub reason: String,
}

/// Parses a manifest, collecting bad lines instead of stopping. Blank lines
/// and `#` comments other than the header are skipped.
pub fn parse_manifest(text: &str) -> Result<(Vec<ClipRecord>, Vec<LineError>)> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        None => return Ok((Vec::new(), Vec::new())),
        Some((_, h)) if h.trim_end() == MANIFEST_HEADER => {}
        Some((_, h)) => return Err(Error::format(format!("manifest header must be {MANIFEST_HEADER:?}, got {h:?}"))),
    }
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        match line.parse::<ClipRecord>() {
            Ok(r) => records.push(r),
            Err(e) => errors.push(LineError {
                line: i + 1,
                reason: e.to_string(),
            }),
        }
    }
    Ok((records, errors))
}

pub fn write_manifest(records: &[ClipRecord]) -> String {
    let mut s = format!("{MANIFEST_HEADER}\n");
    for r in records {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub min_av_align: f64,
    pub min_semantic: f64,
    pub drop_speech: bool,
    pub drop_bgm: bool,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            min_av_align: 0.2,
            min_semantic: 0.3,
            drop_speech: true,
            drop_bgm: true,
        }
    }
}

impl FilterPolicy {
    /// Keeps everything that is scored.
    pub fn permissive() -> Self {
        Self {
            min_av_align: 0.0,
            min_semantic: 0.0,
            drop_speech: false,
            drop_bgm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("min_av_align", self.min_av_align), ("min_semantic", self.min_semantic)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{n} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// First failing rule, in the order unscored, alignment, semantic,
    /// speech, bgm.
    pub fn verdict(&self, r: &ClipRecord) -> Option<DropReason> {
        let (Some(av), Some(sem)) = (r.av_align_score, r.semantic_score) else {
            return Some(DropReason::Unscored);
        };
        if av < self.min_av_align {
            Some(DropReason::Alignment)
        } else if sem < self.min_semantic {
            Some(DropReason::Semantic)
        } else if self.drop_speech && r.speech_flag {
            Some(DropReason::Speech)
        } else if self.drop_bgm && r.bgm_flag {
            Some(DropReason::Bgm)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DropReason {
    Unscored,
    Alignment,
    Semantic,
    Speech,
    Bgm,
    /// Manifest line that failed to parse or validate.
    Malformed,
}

impl DropReason {
    pub const ALL: [DropReason; 6] = [
        DropReason::Unscored,
        DropReason::Alignment,
        DropReason::Semantic,
        DropReason::Speech,
        DropReason::Bgm,
        DropReason::Malformed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::Unscored => "unscored",
            DropReason::Alignment => "alignment",
            DropReason::Semantic => "semantic",
            DropReason::Speech => "speech",
            DropReason::Bgm => "bgm",
            DropReason::Malformed => "malformed",
        }
    }
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<ClipRecord>,
    pub dropped: Vec<(ClipRecord, DropReason)>,
}

/// Splits records by `policy`, preserving input order on both sides.
pub fn filter(records: &[ClipRecord], policy: &FilterPolicy) -> Result<FilterOutcome> {
    policy.validate()?;
    let mut out = FilterOutcome::default();
    for r in records {
        match policy.verdict(r) {
            None => out.kept.push(r.clone()),
            Some(reason) => out.dropped.push((r.clone(), reason)),
        }
    }
    Ok(out)
}

/// Writes the peak-alignment score of the two envelopes into the record.
/// A missing envelope leaves the record unscored.
pub fn score_alignment(
    record: &ClipRecord,
    audio_envelope: Option<&[f64]>,
    video_envelope: Option<&[f64]>,
    cfg: &EvalConfig,
) -> Result<ClipRecord> {
    let mut out = record.clone();
    let (Some(a), Some(v)) = (audio_envelope, video_envelope) else {
        out.av_align_score = None;
        return Ok(out);
    };
    let need = (record.duration * cfg.frame_rate - FRAME_EPS).ceil() as usize;
    for (name, env) in [("audio", a), ("video", v)] {
        if env.len() < need {
            return Err(Error::contract(format!(
                "{}: {name} envelope has {} frames, clip needs {need}",
                record.clip_id,
                env.len()
            )));
        }
    }
    let pa = cfg.peaks(a)?;
    let pv = cfg.peaks(v)?;
    out.av_align_score = Some(av_align(&pa, &pv, cfg.window)?);
    Ok(out)
}

/// Feature rows `[floor(start * fr), ceil(end * fr))` of an event, with a
/// 1e-9 slack against rounding.
pub fn event_rows(e: &Event, frame_rate: f64) -> (usize, usize) {
    let lo = (e.t_start * frame_rate + FRAME_EPS).floor() as usize;
    let hi = (e.t_end * frame_rate - FRAME_EPS).ceil() as usize;
    (lo, hi.max(lo + 1))
}

/// Segment records of a clip, one per event in time order, with times
/// rebased to the segment start and ids `parent#k`. A clip whose single
/// event spans it entirely is returned unchanged.
pub fn cut_record(record: &ClipRecord) -> Result<Vec<ClipRecord>> {
    record.validate()?;
    if record.is_atomic() {
        return Ok(vec![record.clone()]);
    }
    let mut events = record.events.clone();
    events.sort_by(|a, b| a.t_start.total_cmp(&b.t_start).then(a.t_end.total_cmp(&b.t_end)));
    Ok(events
        .into_iter()
        .enumerate()
        .map(|(k, e)| {
            let duration = e.t_end - e.t_start;
            ClipRecord {
                clip_id: format!("{}#{k}", record.clip_id),
                duration,
                events: vec![Event {
                    label: e.label,
                    t_start: 0.0,
                    t_end: duration,
                }],
                ..record.clone()
            }
        })
        .collect())
}

/// [`cut_record`] plus the matching slices of a `[frames, d]` feature
/// sequence.
pub fn cut(record: &ClipRecord, features: &Tensor<f64>, frame_rate: f64) -> Result<Vec<(ClipRecord, Tensor<f64>)>> {
    if features.shape().len() != 2 {
        return Err(Error::shape("cut", features.shape(), &[0, 0]));
    }
    if !(frame_rate > 0.0) {
        return Err(Error::config("frame_rate must be positive"));
    }
    let segments = cut_record(record)?;
    if record.is_atomic() {
        return Ok(vec![(record.clone(), features.clone())]);
    }
    let mut events = record.events.clone();
    events.sort_by(|a, b| a.t_start.total_cmp(&b.t_start).then(a.t_end.total_cmp(&b.t_end)));
    let (rows, d) = (features.rows(), features.cols());
    segments
        .into_iter()
        .zip(events)
        .enumerate()
        .map(|(k, (seg, e))| {
            let (lo, hi) = event_rows(&e, frame_rate);
            if hi > rows {
                return Err(Error::contract(format!(
                    "{}: event {k} ({}) needs rows {lo}..{hi} but features have {rows}",
                    record.clip_id, e.label
                )));
            }
            let data = features.data()[lo * d..hi * d].to_vec();
            Ok((seg, Tensor::from_vec(vec![hi - lo, d], data)?))
        })
        .collect()
}

/// Counts per drop reason, all reasons listed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DropReport {
    pub input: usize,
    pub kept: usize,
    pub counts: Vec<(DropReason, usize)>,
}

impl DropReport {
    pub fn dropped(&self) -> usize {
        self.counts.iter().map(|(_, c)| c).sum()
    }

    pub fn count(&self, reason: DropReason) -> usize {
        self.counts.iter().find(|(r, _)| *r == reason).map_or(0, |(_, c)| *c)
    }

    /// `reason,count` lines in rule order.
    pub fn to_csv(&self) -> String {
        self.counts.iter().map(|(r, c)| format!("{r},{c}\n")).collect()
    }
}

/// Source of per-clip energy envelopes for records that arrive unscored.
pub trait EnvelopeSource {
    /// `(audio, video)` envelopes at the evaluation frame rate.
    fn envelopes(&self, clip_id: &str) -> Option<(Vec<f64>, Vec<f64>)>;
}

/// No envelopes: unscored records stay unscored.
pub struct NoEnvelopes;

impl EnvelopeSource for NoEnvelopes {
    fn envelopes(&self, _: &str) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub records: Vec<ClipRecord>,
    pub report: DropReport,
    /// Lines dropped as malformed.
    pub errors: Vec<LineError>,
    /// Records left unscored because their envelopes were unusable.
    pub warnings: Vec<String>,
    pub dropped: Vec<(String, DropReason)>,
}

impl PipelineOutput {
    pub fn manifest(&self) -> String {
        write_manifest(&self.records)
    }
}

/// Parse, score missing alignment scores, filter, cut.
///
/// Records that already carry an alignment score keep it, so running the
/// pipeline on its own output reproduces that output.
pub fn run_pipeline(
    manifest: &str,
    policy: &FilterPolicy,
    source: &dyn EnvelopeSource,
    cfg: &EvalConfig,
) -> Result<PipelineOutput> {
    policy.validate()?;
    let (records, errors) = parse_manifest(manifest)?;
    let mut scored = Vec::with_capacity(records.len());
    let mut warnings = Vec::new();
    for r in records {
        if r.av_align_score.is_some() {
            scored.push(r);
            continue;
        }
        let env = source.envelopes(&r.clip_id);
        let (a, v) = match &env {
            Some((a, v)) => (Some(a.as_slice()), Some(v.as_slice())),
            None => (None, None),
        };
        match score_alignment(&r, a, v, cfg) {
            Ok(s) => scored.push(s),
            Err(e) => {
                warnings.push(e.to_string());
                scored.push(r);
            }
        }
    }
    let outcome = filter(&scored, policy)?;
    let mut out = Vec::new();
    for r in &outcome.kept {
        out.extend(cut_record(r)?);
    }
    let malformed = errors.len();
    let counts = DropReason::ALL
        .iter()
        .map(|&reason| {
            let c = if reason == DropReason::Malformed {
                malformed
            } else {
                outcome.dropped.iter().filter(|(_, r)| *r == reason).count()
            };
            (reason, c)
        })
        .collect();
    Ok(PipelineOutput {
        records: out,
        report: DropReport {
            input: scored.len() + malformed,
            kept: outcome.kept.len(),
            counts,
        },
        dropped: outcome.dropped.iter().map(|(r, why)| (r.clip_id.clone(), *why)).collect(),
        errors,
        warnings,
    })
}
