//! Latent-variable extraction for conditioning: content features, recording
//! quality, and acoustic scene, either per utterance or per frame.
//!
//! The quality and scene extractors are signal-processing stand-ins with the
//! geometry of the pretrained networks they replace (64-d at 150/40 ms and
//! 768-d at 160/50 ms). Features extracted offline by other tools enter
//! through the condition-track file format in [`track_file`].

mod extractors;
pub mod track_file;

pub use extractors::{ContentExtractor, QualityExtractor, SceneExtractor};
pub use track_file::{load_condition_file, write_condition_file};

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::audio::{frame_count, FramingSpec, Waveform};
use crate::error::{CdtError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Quality,
    Scene,
    Content,
}

impl ExtractorKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            ExtractorKind::Quality => 0,
            ExtractorKind::Scene => 1,
            ExtractorKind::Content => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ExtractorKind::Quality),
            1 => Some(ExtractorKind::Scene),
            2 => Some(ExtractorKind::Content),
            _ => None,
        }
    }
}

impl fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExtractorKind::Quality => "quality",
            ExtractorKind::Scene => "scene",
            ExtractorKind::Content => "content",
        })
    }
}

impl FromStr for ExtractorKind {
    type Err = CdtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quality" => Ok(ExtractorKind::Quality),
            "scene" => Ok(ExtractorKind::Scene),
            "content" => Ok(ExtractorKind::Content),
            _ => Err(CdtError::config("kind", format!("unknown extractor kind `{s}`"))),
        }
    }
}

/// Utterance-wise (one row) or frame-wise (one row per analysis frame).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CondMode {
    #[serde(rename = "uw")]
    Utterance,
    #[serde(rename = "fw")]
    Frame,
}

impl CondMode {
    pub fn short(self) -> &'static str {
        match self {
            CondMode::Utterance => "uw",
            CondMode::Frame => "fw",
        }
    }
}

impl fmt::Display for CondMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for CondMode {
    type Err = CdtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uw" | "utterance" => Ok(CondMode::Utterance),
            "fw" | "frame" => Ok(CondMode::Frame),
            _ => Err(CdtError::config("mode", format!("unknown conditioning mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub kind: ExtractorKind,
    pub dim: usize,
    pub framing: FramingSpec,
}

impl ExtractorSpec {
    pub fn quality() -> Self {
        Self {
            kind: ExtractorKind::Quality,
            dim: QUALITY_DIM,
            framing: FramingSpec {
                frame_len_ms: 150.0,
                frame_shift_ms: 40.0,
            },
        }
    }

    pub fn scene() -> Self {
        Self {
            kind: ExtractorKind::Scene,
            dim: SCENE_DIM,
            framing: FramingSpec {
                frame_len_ms: 160.0,
                frame_shift_ms: 50.0,
            },
        }
    }

    pub fn content() -> Self {
        Self {
            kind: ExtractorKind::Content,
            dim: CONTENT_DIM,
            framing: FramingSpec {
                frame_len_ms: 64.0,
                frame_shift_ms: 10.0,
            },
        }
    }
}

pub const QUALITY_DIM: usize = 64;
pub const SCENE_DIM: usize = 768;
pub const CONTENT_DIM: usize = 256;

/// A framed feature matrix from one extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTrack {
    pub values: Array2<f64>,
    pub framing: FramingSpec,
    pub extractor_id: String,
    pub kind: ExtractorKind,
    pub mode: CondMode,
    pub source_n_samples: usize,
}

impl ConditionTrack {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Checks the mode/frame-count and finiteness invariants.
    pub fn validate(&self, sample_rate_hz: u32) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(CdtError::Validation(format!(
                "track `{}` contains non-finite values",
                self.extractor_id
            )));
        }
        let expected = match self.mode {
            CondMode::Utterance => 1,
            CondMode::Frame => frame_count(self.source_n_samples.max(1), &self.framing, sample_rate_hz),
        };
        if self.n_frames() != expected {
            return Err(CdtError::Validation(format!(
                "track `{}` has {} frames, {} mode over {} samples implies {}",
                self.extractor_id,
                self.n_frames(),
                self.mode,
                self.source_n_samples,
                expected
            )));
        }
        Ok(())
    }

    /// Uniform mean over frames, as a one-row utterance track.
    pub fn to_utterance(&self) -> ConditionTrack {
        let mean = self
            .values
            .mean_axis(ndarray::Axis(0))
            .expect("at least one frame")
            .insert_axis(ndarray::Axis(0));
        ConditionTrack {
            values: mean,
            mode: CondMode::Utterance,
            ..self.clone()
        }
    }
}

/// Uniform interface over the stand-in extractors.
pub trait ConditionExtractor {
    fn spec(&self) -> ExtractorSpec;
    fn id(&self) -> &str;
    fn extract(&self, w: &Waveform, mode: CondMode) -> Result<ConditionTrack>;
}

/// Frame-wise content features at the mel hop (256-d).
pub fn extract_content(w: &Waveform) -> ConditionTrack {
    ContentExtractor::default().track(w)
}

pub fn extract_quality(w: &Waveform, mode: CondMode) -> ConditionTrack {
    QualityExtractor::default().track(w, mode)
}

pub fn extract_scene(w: &Waveform, mode: CondMode) -> ConditionTrack {
    SceneExtractor::default().track(w, mode)
}
