use ndarray::{Array1, Array2};
use rand::Rng;

use super::{
    CondMode, ConditionExtractor, ConditionTrack, ExtractorKind, ExtractorSpec, CONTENT_DIM,
    QUALITY_DIM, SCENE_DIM,
};
use crate::audio::stft::Stft;
use crate::audio::{frame_count, mel_filterbank, MelConfig, Waveform};
use crate::error::{CdtError, Result};
use crate::rng::derived_rng;

const CONTENT_SEED: u64 = 0x00c0_47e4_7f55_1a00;
const QUALITY_MEL_BANDS: usize = 60;
const QUALITY_FFT: usize = 4096;
const SCENE_FFT: usize = 2048;

/// Frozen content features: mel frames, centered across bins, through a fixed
/// random projection, then L2-normalized per frame. Centering is itself a
/// fixed linear map; without it every frame vector leans the same way.
/// Flat frames (all-floor ones included) yield the zero vector.
#[derive(Debug, Clone)]
pub struct ContentExtractor {
    mel: MelConfig,
    projection: Array2<f64>,
}

impl Default for ContentExtractor {
    fn default() -> Self {
        Self::new(MelConfig::default())
    }
}

impl ContentExtractor {
    pub fn new(mel: MelConfig) -> Self {
        let mut rng = derived_rng(CONTENT_SEED, &["content-projection"]);
        // Unit-variance uniform entries scaled by 1/sqrt(n_mels).
        let bound = (3.0 / mel.n_mels as f64).sqrt();
        let projection = Array2::from_shape_simple_fn((mel.n_mels, CONTENT_DIM), || {
            rng.gen_range(-bound..bound)
        });
        Self { mel, projection }
    }

    pub fn mel_config(&self) -> &MelConfig {
        &self.mel
    }

    /// Content track from an already computed log mel matrix.
    pub fn from_mel(&self, mel: &Array2<f64>, source_n_samples: usize) -> ConditionTrack {
        let mut centered = mel.to_owned();
        for mut row in centered.rows_mut() {
            let mean = row.mean().unwrap_or(0.0);
            row.mapv_inplace(|v| v - mean);
        }
        let mut values = centered.dot(&self.projection);
        for mut row in values.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                row.mapv_inplace(|v| v / norm);
            } else {
                row.fill(0.0);
            }
        }
        ConditionTrack {
            values,
            framing: self.mel.framing(),
            extractor_id: "content-proj-v2".into(),
            kind: ExtractorKind::Content,
            mode: CondMode::Frame,
            source_n_samples,
        }
    }

    pub fn track(&self, w: &Waveform) -> ConditionTrack {
        self.from_mel(&self.mel.compute(w).values, w.len())
    }
}

impl ConditionExtractor for ContentExtractor {
    fn spec(&self) -> ExtractorSpec {
        ExtractorSpec {
            framing: self.mel.framing(),
            ..ExtractorSpec::content()
        }
    }

    fn id(&self) -> &str {
        "content-proj-v2"
    }

    fn extract(&self, w: &Waveform, mode: CondMode) -> Result<ConditionTrack> {
        if mode != CondMode::Frame {
            return Err(CdtError::Mode("content features are frame-wise only".into()));
        }
        Ok(self.track(w))
    }
}

fn frames_of(
    w: &Waveform,
    spec: &ExtractorSpec,
    dim: usize,
    mut per_frame: impl FnMut(&[f64], usize, &mut [f64]),
) -> Array2<f64> {
    let sr = w.sample_rate_hz();
    let n = frame_count(w.len(), &spec.framing, sr);
    let shift = spec.framing.frame_shift_samples(sr);
    let mut out = Array2::zeros((n, dim));
    for t in 0..n {
        let mut row = vec![0.0; dim];
        per_frame(w.samples(), t * shift, &mut row);
        out.row_mut(t).assign(&Array1::from(row));
    }
    out
}

fn finish(values: Array2<f64>, spec: &ExtractorSpec, id: &str, mode: CondMode, n: usize) -> ConditionTrack {
    let track = ConditionTrack {
        values,
        framing: spec.framing,
        extractor_id: id.to_string(),
        kind: spec.kind,
        mode: CondMode::Frame,
        source_n_samples: n,
    };
    match mode {
        CondMode::Frame => track,
        CondMode::Utterance => track.to_utterance(),
    }
}

/// Recording-quality stand-in: per 150 ms frame, log RMS, zero-crossing rate,
/// spectral flatness, normalized centroid, and 60 log mel-band energies.
#[derive(Debug, Clone)]
pub struct QualityExtractor {
    pub spec: ExtractorSpec,
    pub floor: f64,
}

impl Default for QualityExtractor {
    fn default() -> Self {
        Self {
            spec: ExtractorSpec::quality(),
            floor: 1e-5,
        }
    }
}

impl QualityExtractor {
    pub fn track(&self, w: &Waveform, mode: CondMode) -> ConditionTrack {
        let sr = w.sample_rate_hz();
        let len = self.spec.framing.frame_len_samples(sr);
        let n_fft = QUALITY_FFT.max(len.next_power_of_two());
        let stft = Stft::new(len, n_fft);
        let (fb, _) = mel_filterbank(QUALITY_MEL_BANDS, n_fft, sr, 0.0, sr as f64 / 2.0);
        let nyquist = sr as f64 / 2.0;
        let bin_hz = sr as f64 / n_fft as f64;
        let floor = self.floor;
        let mut frame = vec![0.0; len];
        let values = frames_of(w, &self.spec, QUALITY_DIM, |samples, start, row| {
            crate::audio::frame_into(samples, start, &mut frame);
            let rms = (frame.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
            row[0] = rms.max(floor).ln();
            let crossings = frame
                .windows(2)
                .filter(|p| (p[0] >= 0.0) != (p[1] >= 0.0) && (p[0] != 0.0 || p[1] != 0.0))
                .count();
            row[1] = crossings as f64 / (len - 1).max(1) as f64;
            let power = stft.power(samples, start);
            let eps = 1e-10;
            let mean = power.iter().sum::<f64>() / power.len() as f64;
            let log_mean = power.iter().map(|p| (p + eps).ln()).sum::<f64>() / power.len() as f64;
            row[2] = log_mean.exp() / (mean + eps);
            let total: f64 = power.iter().sum();
            row[3] = if total > 0.0 {
                power
                    .iter()
                    .enumerate()
                    .map(|(k, p)| k as f64 * bin_hz * p)
                    .sum::<f64>()
                    / total
                    / nyquist
            } else {
                0.0
            };
            let p = Array1::from(power);
            for (dst, e) in row[4..].iter_mut().zip(fb.dot(&p)) {
                *dst = e.max(floor).ln();
            }
        });
        finish(values, &self.spec, "quality-dsp-v1", mode, w.len())
    }
}

impl ConditionExtractor for QualityExtractor {
    fn spec(&self) -> ExtractorSpec {
        self.spec.clone()
    }

    fn id(&self) -> &str {
        "quality-dsp-v1"
    }

    fn extract(&self, w: &Waveform, mode: CondMode) -> Result<ConditionTrack> {
        Ok(self.track(w, mode))
    }
}

/// Acoustic-scene stand-in: per 160 ms frame, the first 768 bins of a
/// 2048-point log magnitude spectrum, with power averaged over two windows
/// that together cover the frame.
#[derive(Debug, Clone)]
pub struct SceneExtractor {
    pub spec: ExtractorSpec,
    pub floor: f64,
}

impl Default for SceneExtractor {
    fn default() -> Self {
        Self {
            spec: ExtractorSpec::scene(),
            floor: 1e-5,
        }
    }
}

impl SceneExtractor {
    pub fn track(&self, w: &Waveform, mode: CondMode) -> ConditionTrack {
        let sr = w.sample_rate_hz();
        let len = self.spec.framing.frame_len_samples(sr);
        let win = SCENE_FFT.min(len);
        let stft = Stft::new(win, SCENE_FFT);
        let offsets = [0, len - win];
        let floor = self.floor;
        let values = frames_of(w, &self.spec, SCENE_DIM, |samples, start, row| {
            let mut acc = vec![0.0; SCENE_DIM];
            for off in offsets {
                for (a, p) in acc.iter_mut().zip(stft.power(samples, start + off)) {
                    *a += p / offsets.len() as f64;
                }
            }
            for (dst, p) in row.iter_mut().zip(acc) {
                *dst = p.sqrt().max(floor).ln();
            }
        });
        finish(values, &self.spec, "scene-dsp-v1", mode, w.len())
    }
}

impl ConditionExtractor for SceneExtractor {
    fn spec(&self) -> ExtractorSpec {
        self.spec.clone()
    }

    fn id(&self) -> &str {
        "scene-dsp-v1"
    }

    fn extract(&self, w: &Waveform, mode: CondMode) -> Result<ConditionTrack> {
        Ok(self.track(w, mode))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{extract_content, extract_quality, extract_scene};

    fn tone(freq: f64, n: usize, amp: f64) -> Waveform {
        let s = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0 + 0.3).sin())
            .collect();
        Waveform::new(s, 16_000).unwrap()
    }

    #[test]
    fn content_shape_and_normalization() {
        let w = tone(300.0, 16_000, 0.3);
        let t = extract_content(&w);
        assert_eq!(t.values.dim(), (94, 256));
        for row in t.values.rows() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(t, extract_content(&w));
        let silent = extract_content(&Waveform::silence(4000, 16_000).unwrap());
        assert!(silent.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quality_geometry_and_modes() {
        let w = tone(400.0, 16_000, 0.3);
        let fw = extract_quality(&w, CondMode::Frame);
        assert_eq!(fw.values.dim(), (22, 64));
        fw.validate(16_000).unwrap();
        let uw = extract_quality(&w, CondMode::Utterance);
        assert_eq!(uw.values.nrows(), 1);
        // 400 Hz has a 40-sample period dividing the 640-sample shift, so
        // frames are identical and the mean equals any frame.
        for row in fw.values.rows() {
            for (a, b) in row.iter().zip(uw.values.row(0)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn quality_energy_rises_with_noise() {
        let clean = tone(500.0, 16_000, 0.3);
        let mut rng = crate::rng::derived_rng(1, &["t"]);
        let noise: Vec<f64> = (0..16_000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let noise = Waveform::new(noise, 16_000).unwrap();
        let mut r2 = crate::rng::derived_rng(2, &["t"]);
        let noisy = crate::degradation::mix(&clean, &noise, 0.0, &mut r2).unwrap().noisy;
        let a = extract_quality(&clean, CondMode::Utterance);
        let b = extract_quality(&noisy, CondMode::Utterance);
        assert!(b.values[[0, 0]] > a.values[[0, 0]]);
    }

    #[test]
    fn scene_geometry_and_silence() {
        let w = tone(1000.0, 16_000, 0.3);
        let fw = extract_scene(&w, CondMode::Frame);
        assert_eq!(fw.values.dim(), (17, 768));
        let s = extract_scene(&Waveform::silence(16_000, 16_000).unwrap(), CondMode::Frame);
        let floor = 1e-5f64.ln();
        assert!(s.values.iter().all(|&v| v == floor));
        for n in [100, 5000, 40_000] {
            let uw = extract_scene(&tone(700.0, n, 0.2), CondMode::Utterance);
            assert_eq!(uw.values.nrows(), 1);
        }
    }

    #[test]
    fn utterance_is_column_mean_of_frames() {
        let mut rng = crate::rng::derived_rng(3, &["t"]);
        let x: Vec<f64> = (0..12_345).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let w = Waveform::new(x, 16_000).unwrap();
        for (fw, uw) in [
            (extract_quality(&w, CondMode::Frame), extract_quality(&w, CondMode::Utterance)),
            (extract_scene(&w, CondMode::Frame), extract_scene(&w, CondMode::Utterance)),
        ] {
            let mean = fw.values.mean_axis(ndarray::Axis(0)).unwrap();
            for (a, b) in mean.iter().zip(uw.values.row(0)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn content_rejects_utterance_mode() {
        let w = tone(300.0, 4000, 0.3);
        assert!(ContentExtractor::default().extract(&w, CondMode::Utterance).is_err());
    }
}
