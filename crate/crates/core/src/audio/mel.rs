use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::stft::Stft;
use super::{frame_count, ms_to_samples, FramingSpec, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{CdtError, Result};

/// Log mel front-end geometry. Window and hop are in milliseconds; the
/// transform size equals the window length in samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate_hz: u32,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub floor: f64,
    pub gl_iterations: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: DEFAULT_SAMPLE_RATE,
            win_ms: 64.0,
            hop_ms: 10.0,
            n_mels: 80,
            floor: 1e-5,
            gl_iterations: 32,
        }
    }
}

/// `[n_frames x n_mels]` natural-log mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f64>,
    pub hop_ms: f64,
    pub win_ms: f64,
    pub n_mels: usize,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn new(values: Array2<f64>, config: &MelConfig) -> Result<Self> {
        if values.ncols() != config.n_mels {
            return Err(CdtError::Shape(format!(
                "mel matrix has {} bins, config expects {}",
                values.ncols(),
                config.n_mels
            )));
        }
        Ok(Self {
            values,
            hop_ms: config.hop_ms,
            win_ms: config.win_ms,
            n_mels: config.n_mels,
        })
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with unit peak on the HTK mel scale, `[n_mels x n_bins]`.
/// Returns the filters and their center frequencies in Hz.
pub fn mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    sample_rate_hz: u32,
    fmin: f64,
    fmax: f64,
) -> (Array2<f64>, Vec<f64>) {
    let n_bins = n_fft / 2 + 1;
    let lo = hz_to_mel(fmin);
    let hi = hz_to_mel(fmax);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate_hz as f64 / n_fft as f64;
    let mut fb = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
    }
    (fb, edges[1..=n_mels].to_vec())
}

impl MelConfig {
    pub fn win_samples(&self) -> usize {
        ms_to_samples(self.win_ms, self.sample_rate_hz)
    }

    pub fn hop_samples(&self) -> usize {
        ms_to_samples(self.hop_ms, self.sample_rate_hz).max(1)
    }

    pub fn framing(&self) -> FramingSpec {
        FramingSpec {
            frame_len_ms: self.win_ms,
            frame_shift_ms: self.hop_ms,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.framing()
            .validate()
            .map_err(|e| CdtError::config("audio.hop_ms", e.to_string()))?;
        if self.n_mels == 0 {
            return Err(CdtError::config("audio.n_mels", "must be positive"));
        }
        if !(self.floor > 0.0) {
            return Err(CdtError::config("audio.floor", "must be positive"));
        }
        if self.sample_rate_hz == 0 {
            return Err(CdtError::config("audio.sample_rate_hz", "must be positive"));
        }
        if self.gl_iterations == 0 {
            return Err(CdtError::config("audio.gl_iterations", "must be at least 1"));
        }
        Ok(())
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        frame_count(n_samples, &self.framing(), self.sample_rate_hz)
    }

    pub fn stft(&self) -> Stft {
        let win = self.win_samples();
        Stft::new(win, win)
    }

    pub fn filterbank(&self) -> (Array2<f64>, Vec<f64>) {
        let win = self.win_samples();
        mel_filterbank(
            self.n_mels,
            win,
            self.sample_rate_hz,
            0.0,
            self.sample_rate_hz as f64 / 2.0,
        )
    }

    pub fn log_floor(&self) -> f64 {
        self.floor.ln()
    }

    /// Mel power (before the log) of every frame, `[n_frames x n_mels]`.
    pub fn mel_power(&self, w: &Waveform) -> Array2<f64> {
        let stft = self.stft();
        let (fb, _) = self.filterbank();
        let hop = self.hop_samples();
        let n_frames = self.n_frames(w.len());
        let mut out = Array2::zeros((n_frames, self.n_mels));
        for t in 0..n_frames {
            let p = ndarray::Array1::from(stft.power(w.samples(), t * hop));
            out.row_mut(t).assign(&fb.dot(&p));
        }
        out
    }

    /// Log mel-spectrogram `log(max(M |X|^2, floor))`.
    pub fn compute(&self, w: &Waveform) -> MelSpectrogram {
        let floor = self.floor;
        let values = self.mel_power(w).mapv(|p| p.max(floor).ln());
        MelSpectrogram {
            values,
            hop_ms: self.hop_ms,
            win_ms: self.win_ms,
            n_mels: self.n_mels,
        }
    }
}

/// Log mel-spectrogram at the default front-end geometry.
pub fn mel_spectrogram(w: &Waveform) -> MelSpectrogram {
    MelConfig::default().compute(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, n: usize) -> Waveform {
        let s = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
            .collect();
        Waveform::new(s, 16_000).unwrap()
    }

    #[test]
    fn silence_is_all_floor() {
        let m = mel_spectrogram(&Waveform::silence(16_000, 16_000).unwrap());
        let floor = 1e-5f64.ln();
        assert!(m.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn frame_count_follows_framing_rule() {
        let m = mel_spectrogram(&tone(300.0, 16_000));
        // 1 + floor((16000 - 1024) / 160)
        assert_eq!(m.n_frames(), 94);
        assert_eq!(m.values.ncols(), 80);
        let short = mel_spectrogram(&tone(300.0, 10));
        assert_eq!(short.n_frames(), 1);
    }

    #[test]
    fn tone_peaks_in_nearest_mel_bin() {
        let cfg = MelConfig::default();
        let (_, centers) = cfg.filterbank();
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 440.0).abs().partial_cmp(&(b.1 - 440.0).abs()).unwrap())
            .unwrap()
            .0;
        let m = cfg.compute(&tone(440.0, 16_000));
        for row in m.values.rows() {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, nearest);
        }
    }

    #[test]
    fn sign_flip_invariance_and_concat_growth() {
        let x = tone(700.0, 5000);
        let neg = x.scaled(-1.0);
        assert_eq!(mel_spectrogram(&x).values, mel_spectrogram(&neg).values);
        let xx = x.concat(&x).unwrap();
        assert!(mel_spectrogram(&xx).n_frames() >= mel_spectrogram(&x).n_frames());
    }

    #[test]
    fn entries_never_below_floor() {
        let m = mel_spectrogram(&tone(5000.0, 4000));
        let floor = 1e-5f64.ln();
        assert!(m.values.iter().all(|&v| v >= floor));
    }
}
