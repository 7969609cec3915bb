//! JSON wire types of the annotation service, shared by server and client.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdaptMode, StepRecord};
use crate::error::{Error, Result};
use crate::guidance::Click;
use crate::raster::{Mask, ProbMap};

/// Run-length encoded binary mask. Runs alternate between 0 and 1 in
/// row-major order, starting with a (possibly empty) run of zeros.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRle {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
}

impl MaskRle {
    pub fn encode(mask: &Mask) -> Self {
        let mut counts = Vec::new();
        let mut current = 0u8;
        let mut run = 0u32;
        for &v in mask.as_slice() {
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
        counts.push(run);
        Self {
            height: mask.height(),
            width: mask.width(),
            counts,
        }
    }

    pub fn decode(&self) -> Result<Mask> {
        let total: u64 = self.counts.iter().map(|&c| u64::from(c)).sum();
        if total != (self.height * self.width) as u64 {
            return Err(Error::InvalidArgument(format!(
                "run lengths sum to {total}, expected {}",
                self.height * self.width
            )));
        }
        let mut data = Vec::with_capacity(self.height * self.width);
        for (i, &c) in self.counts.iter().enumerate() {
            data.extend(std::iter::repeat_n((i % 2) as u8, c as usize));
        }
        Mask::new(self.height, self.width, data)
    }
}

/// Aggregate view of a probability map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Share of pixels with p > 0.5.
    pub foreground_fraction: f64,
    /// Share of pixels with 0.3 <= p <= 0.7.
    pub uncertain_fraction: f64,
}

impl ConfidenceSummary {
    pub fn of(p: &ProbMap) -> Self {
        let v = p.as_slice();
        let n = v.len() as f64;
        Self {
            mean: v.iter().sum::<f64>() / n,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            foreground_fraction: v.iter().filter(|&&x| x > 0.5).count() as f64 / n,
            uncertain_fraction: v.iter().filter(|&&x| (0.3..=0.7).contains(&x)).count() as f64 / n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Active,
    Finished,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreatedSession {
    pub id: String,
    pub mode: AdaptMode,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClickResponse {
    pub session: String,
    pub ordinal: u32,
    pub mask: MaskRle,
    pub confidence: ConfidenceSummary,
    pub iou: Option<f64>,
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UndoResponse {
    pub session: String,
    pub clicks: usize,
    pub mask: MaskRle,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinishResponse {
    pub session: String,
    pub mask: MaskRle,
    /// Where the final mask was written, as a PNG in the dataset mask format.
    pub mask_path: String,
    /// Version of the checkpoint written for this session, if it adapted.
    pub checkpoint_version: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionState {
    pub id: String,
    pub mode: AdaptMode,
    pub status: SessionStatus,
    pub height: usize,
    pub width: usize,
    pub clicks: Vec<Click>,
    pub mask: MaskRle,
    pub iou: Option<f64>,
    pub can_undo: bool,
    /// Unix seconds.
    pub created_at: u64,
    pub finished_at: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Health {
    pub status: String,
    pub checkpoint_version: u64,
    pub adapting_session: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointInfo {
    pub version: u64,
    pub file: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointList {
    pub current: u64,
    pub checkpoints: Vec<CheckpointInfo>,
}

/// Body of every non-2xx response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    /// Stable machine-readable code, e.g. `ordinal`, `busy`, `not_found`.
    pub code: String,
    pub message: String,
}
