//! Audio containers, WAV I/O, framing, log mel-spectrograms and
//! phase-reconstruction synthesis.

mod griffin_lim;
mod mel;
pub mod stft;
mod wav;

pub use griffin_lim::reconstruct_waveform;
pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz, mel_spectrogram, MelConfig, MelSpectrogram};
pub use wav::{read_wav, write_wav};

use serde::{Deserialize, Serialize};

use crate::error::{CdtError, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono audio in `[-1, 1]` nominal range.
///
/// Samples are kept in `f64` so that SNR arithmetic stays exact; mixing may
/// push values outside the nominal range, clipping only happens on write.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(CdtError::Argument("waveform must hold at least one sample".into()));
        }
        if sample_rate_hz == 0 {
            return Err(CdtError::Argument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(CdtError::Argument(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn silence(n_samples: usize, sample_rate_hz: u32) -> Result<Self> {
        Self::new(vec![0.0; n_samples], sample_rate_hz)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    pub fn concat(&self, other: &Waveform) -> Result<Self> {
        if self.sample_rate_hz != other.sample_rate_hz {
            return Err(CdtError::Argument("sample rate mismatch in concat".into()));
        }
        let mut samples = self.samples.clone();
        samples.extend_from_slice(&other.samples);
        Self::new(samples, self.sample_rate_hz)
    }
}

/// Analysis frame geometry in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FramingSpec {
    pub frame_len_ms: f64,
    pub frame_shift_ms: f64,
}

impl FramingSpec {
    pub fn new(frame_len_ms: f64, frame_shift_ms: f64) -> Result<Self> {
        let spec = Self {
            frame_len_ms,
            frame_shift_ms,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.frame_shift_ms.is_finite()
            && self.frame_len_ms.is_finite()
            && self.frame_shift_ms > 0.0
            && self.frame_shift_ms <= self.frame_len_ms;
        if ok {
            Ok(())
        } else {
            Err(CdtError::Argument(format!(
                "framing requires 0 < shift <= len, got len {} ms, shift {} ms",
                self.frame_len_ms, self.frame_shift_ms
            )))
        }
    }

    pub fn frame_len_samples(&self, sample_rate_hz: u32) -> usize {
        ms_to_samples(self.frame_len_ms, sample_rate_hz)
    }

    pub fn frame_shift_samples(&self, sample_rate_hz: u32) -> usize {
        ms_to_samples(self.frame_shift_ms, sample_rate_hz).max(1)
    }
}

pub(crate) fn ms_to_samples(ms: f64, sample_rate_hz: u32) -> usize {
    (ms * sample_rate_hz as f64 / 1000.0).round() as usize
}

/// Number of analysis frames for a signal of `n_samples`.
///
/// Trailing partial frames are dropped; inputs shorter than one frame are
/// zero-padded to exactly one frame.
pub fn frame_count(n_samples: usize, spec: &FramingSpec, sample_rate_hz: u32) -> usize {
    let len = spec.frame_len_samples(sample_rate_hz);
    let shift = spec.frame_shift_samples(sample_rate_hz);
    if n_samples < len {
        1
    } else {
        1 + (n_samples - len) / shift
    }
}

/// Copies frame `index` into `out`, zero-filling past the end of the signal.
pub(crate) fn frame_into(samples: &[f64], start: usize, out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = samples.get(start + j).copied().unwrap_or(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_at_extractor_geometries() {
        let nisqa = FramingSpec::new(150.0, 40.0).unwrap();
        let passt = FramingSpec::new(160.0, 50.0).unwrap();
        // 1 + floor((16000 - 2400) / 640) and 1 + floor((16000 - 2560) / 800)
        assert_eq!(frame_count(16_000, &nisqa, 16_000), 22);
        assert_eq!(frame_count(16_000, &passt, 16_000), 17);
        assert_eq!(frame_count(100, &nisqa, 16_000), 1);
    }

    #[test]
    fn frame_count_is_monotone() {
        let spec = FramingSpec::new(64.0, 10.0).unwrap();
        let mut prev = 0;
        for n in 1..5000 {
            let c = frame_count(n, &spec, 16_000);
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn framing_rejects_bad_geometry() {
        assert!(FramingSpec::new(10.0, 20.0).is_err());
        assert!(FramingSpec::new(10.0, 0.0).is_err());
    }

    #[test]
    fn waveform_invariants() {
        assert!(Waveform::new(vec![], 16_000).is_err());
        assert!(Waveform::new(vec![f64::NAN], 16_000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
    }
}
