//! Stage presets and condition-dropping batch draws.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Training data source of a draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetTag {
    /// text + audio, no video
    T2A,
    /// text + video + audio
    TV2A,
    /// video + audio, no text
    V2A,
}

impl DatasetTag {
    pub const ALL: [DatasetTag; 3] = [DatasetTag::T2A, DatasetTag::TV2A, DatasetTag::V2A];

    pub fn has_text(self) -> bool {
        self != DatasetTag::V2A
    }

    pub fn has_video(self) -> bool {
        self != DatasetTag::T2A
    }
}

impl fmt::Display for DatasetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetTag::T2A => "T2A",
            DatasetTag::TV2A => "TV2A",
            DatasetTag::V2A => "V2A",
        })
    }
}

impl FromStr for DatasetTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "T2A" => Ok(DatasetTag::T2A),
            "TV2A" => Ok(DatasetTag::TV2A),
            "V2A" => Ok(DatasetTag::V2A),
            _ => Err(Error::format(format!("unknown dataset tag {s:?}"))),
        }
    }
}

/// Relative draw weights over the three sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mix {
    pub t2a: u32,
    pub tv2a: u32,
    pub v2a: u32,
}

impl Mix {
    pub fn weight(&self, tag: DatasetTag) -> u32 {
        match tag {
            DatasetTag::T2A => self.t2a,
            DatasetTag::TV2A => self.tv2a,
            DatasetTag::V2A => self.v2a,
        }
    }

    pub fn total(&self) -> u32 {
        self.t2a + self.tv2a + self.v2a
    }

    pub fn fraction(&self, tag: DatasetTag) -> f64 {
        self.weight(tag) as f64 / self.total() as f64
    }
}

/// One curriculum stage.
///
/// `p_keep_text` applies to draws whose source carries text and
/// `p_keep_video` to draws whose source carries video; the missing modality
/// of a T2A or V2A draw is always dropped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage_id: u8,
    pub steps: u64,
    pub mix: Mix,
    pub p_keep_text: f64,
    pub p_keep_video: f64,
}

pub const PAPER_STEPS: [u64; 3] = [250_000, 50_000, 230_000];
pub const TOY_STEPS: [u64; 3] = [300, 100, 300];

impl StageConfig {
    /// T2A only; the video branch is never built.
    pub fn stage1(steps: u64) -> Self {
        Self {
            stage_id: 1,
            steps,
            mix: Mix { t2a: 1, tv2a: 0, v2a: 0 },
            p_keep_text: 1.0,
            p_keep_video: 0.0,
        }
    }

    /// T2A and text+video in equal parts.
    pub fn stage2(steps: u64) -> Self {
        Self {
            stage_id: 2,
            steps,
            mix: Mix { t2a: 1, tv2a: 1, v2a: 0 },
            p_keep_text: 1.0,
            p_keep_video: 0.5,
        }
    }

    /// T2A : text+video : video-only at 1:1:2.
    pub fn stage3(steps: u64) -> Self {
        Self {
            stage_id: 3,
            steps,
            mix: Mix { t2a: 1, tv2a: 1, v2a: 2 },
            p_keep_text: 0.5,
            p_keep_video: 0.75,
        }
    }

    pub fn for_stage(id: u8, steps: u64) -> Result<Self> {
        match id {
            1 => Ok(Self::stage1(steps)),
            2 => Ok(Self::stage2(steps)),
            3 => Ok(Self::stage3(steps)),
            _ => Err(Error::config(format!("no stage {id}; stages are 1, 2, 3"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage_id) {
            return Err(Error::config(format!("stage id {} not in 1..=3", self.stage_id)));
        }
        if self.mix.total() == 0 {
            return Err(Error::config("stage mix has no positive weight"));
        }
        for p in [self.p_keep_text, self.p_keep_video] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("keep probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Named stage lists: `stage1`, `stage2`, `stage3` (one stage each at the
/// published step counts), `paper` (all three), `toy` (all three, short).
pub fn preset(name: &str) -> Result<Vec<StageConfig>> {
    let [s1, s2, s3] = PAPER_STEPS;
    let [t1, t2, t3] = TOY_STEPS;
    Ok(match name {
        "stage1" => vec![StageConfig::stage1(s1)],
        "stage2" => vec![StageConfig::stage2(s2)],
        "stage3" => vec![StageConfig::stage3(s3)],
        "paper" => vec![StageConfig::stage1(s1), StageConfig::stage2(s2), StageConfig::stage3(s3)],
        "toy" => vec![StageConfig::stage1(t1), StageConfig::stage2(t2), StageConfig::stage3(t3)],
        other => return Err(Error::config(format!("unknown preset {other:?}"))),
    })
}

/// One training example as stored in a source.
#[derive(Debug, Clone)]
pub struct Example<T> {
    pub id: String,
    pub latent: Tensor<T>,
    pub text: Option<Tensor<T>>,
    pub video: Option<Tensor<T>>,
}

/// The three data sources.
#[derive(Debug, Clone, Default)]
pub struct Datasets<T> {
    pub t2a: Vec<Example<T>>,
    pub tv2a: Vec<Example<T>>,
    pub v2a: Vec<Example<T>>,
}

impl<T: Scalar> Datasets<T> {
    pub fn get(&self, tag: DatasetTag) -> &[Example<T>] {
        match tag {
            DatasetTag::T2A => &self.t2a,
            DatasetTag::TV2A => &self.tv2a,
            DatasetTag::V2A => &self.v2a,
        }
    }

    /// Uses one pool of fully paired examples for all three sources, hiding
    /// the modality each source lacks.
    pub fn from_paired(pool: &[Example<T>]) -> Self {
        Self {
            t2a: pool.iter().map(|e| Example { video: None, ..e.clone() }).collect(),
            tv2a: pool.to_vec(),
            v2a: pool.iter().map(|e| Example { text: None, ..e.clone() }).collect(),
        }
    }
}

/// Per-sample draw within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub index: usize,
    pub text_kept: bool,
    pub video_kept: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tag: DatasetTag,
    pub draws: Vec<Draw>,
}

impl Batch {
    pub fn text_kept(&self) -> u32 {
        self.draws.iter().filter(|d| d.text_kept).count() as u32
    }

    pub fn video_kept(&self) -> u32 {
        self.draws.iter().filter(|d| d.video_kept).count() as u32
    }
}

/// Draws one batch: the source is chosen with probability proportional to
/// its mix weight, then every sample gets independent keep flags.
///
/// The random stream consumption is fixed (one uniform for the source, then
/// an index and two Bernoulli draws per sample) regardless of outcome.
pub fn draw_batch<T: Scalar>(
    stage: &StageConfig,
    datasets: &Datasets<T>,
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<Batch> {
    stage.validate()?;
    for tag in DatasetTag::ALL {
        if stage.mix.weight(tag) > 0 && datasets.get(tag).is_empty() {
            return Err(Error::config(format!("stage {} needs a non-empty {tag} dataset", stage.stage_id)));
        }
    }
    let u = rng.uniform() * stage.mix.total() as f64;
    let mut acc = 0.0;
    let mut tag = DatasetTag::T2A;
    for candidate in DatasetTag::ALL {
        let w = stage.mix.weight(candidate) as f64;
        if w == 0.0 {
            continue;
        }
        tag = candidate;
        acc += w;
        if u < acc {
            break;
        }
    }
    let pool = datasets.get(tag).len();
    let draws = (0..batch_size)
        .map(|_| {
            let index = rng.below(pool);
            let keep_text = rng.bernoulli(stage.p_keep_text);
            let keep_video = rng.bernoulli(stage.p_keep_video);
            Draw {
                index,
                text_kept: tag.has_text() && keep_text,
                video_kept: tag.has_video() && keep_video,
            }
        })
        .collect();
    Ok(Batch { tag, draws })
}
