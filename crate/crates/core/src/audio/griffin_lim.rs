//! Mel-to-waveform synthesis by pseudo-inverse filterbank and iterative
//! phase reconstruction (Griffin-Lim).

use nalgebra::DMatrix;
use ndarray::Array2;
use rustfft::num_complex::Complex64;

use super::{MelConfig, MelSpectrogram, Waveform};
use crate::error::{CdtError, Result};

const NNLS_ITERS: usize = 200;

impl MelConfig {
    /// Linear magnitude spectrogram `[n_frames x n_bins]` implied by a log mel-spectrogram.
    ///
    /// The configured floor is treated as an additive offset, so all-floor
    /// frames map to zero magnitude. Mel energies are inverted with a
    /// pseudo-inverse start refined by non-negative multiplicative updates.
    pub fn mel_to_magnitude(&self, m: &MelSpectrogram) -> Result<Array2<f64>> {
        if m.n_mels != self.n_mels || m.values.ncols() != self.n_mels {
            return Err(CdtError::Shape(format!(
                "mel has {} bins, synthesis configured for {}",
                m.values.ncols(),
                self.n_mels
            )));
        }
        let (fb, _) = self.filterbank();
        let (rows, cols) = fb.dim();
        let fb_na = DMatrix::from_row_slice(rows, cols, fb.as_slice().expect("standard layout"));
        let pinv = fb_na
            .pseudo_inverse(1e-10)
            .map_err(|e| CdtError::Numeric {
                layer: format!("mel pseudo-inverse: {e}"),
            })?;
        let pinv = Array2::from_shape_fn((cols, rows), |(k, j)| pinv[(k, j)]);
        // Each triangle is non-zero on a contiguous bin range.
        let support: Vec<(usize, usize)> = fb
            .rows()
            .into_iter()
            .map(|r| {
                let lo = r.iter().position(|&v| v > 0.0).unwrap_or(0);
                let hi = r.iter().rposition(|&v| v > 0.0).map_or(0, |h| h + 1);
                (lo, hi)
            })
            .collect();
        let stft_scale = self.stft().window_sum();
        let mut mag = Array2::zeros((m.n_frames(), cols));
        let mut numer = vec![0.0; cols];
        let mut denom = vec![0.0; cols];
        let mut proj = vec![0.0; rows];
        for (t, row) in m.values.rows().into_iter().enumerate() {
            let target = row.mapv(|v| (v.exp() - self.floor).max(0.0));
            // Pseudo-inverse start, then non-negative multiplicative refinement
            // of ||fb p - target|| so clamped negatives do not leak energy.
            let mut p = pinv.dot(&target).mapv(|v| v.max(0.0) + 1e-12);
            numer.iter_mut().for_each(|v| *v = 0.0);
            for (j, &(lo, hi)) in support.iter().enumerate() {
                for k in lo..hi {
                    numer[k] += fb[[j, k]] * target[j];
                }
            }
            for _ in 0..NNLS_ITERS {
                for (j, &(lo, hi)) in support.iter().enumerate() {
                    proj[j] = (lo..hi).map(|k| fb[[j, k]] * p[k]).sum();
                }
                denom.iter_mut().for_each(|v| *v = 0.0);
                for (j, &(lo, hi)) in support.iter().enumerate() {
                    for k in lo..hi {
                        denom[k] += fb[[j, k]] * proj[j];
                    }
                }
                for k in 0..cols {
                    if denom[k] > 0.0 {
                        p[k] *= numer[k] / denom[k];
                    }
                }
            }
            mag.row_mut(t).assign(&p.mapv(|v| v.max(0.0).sqrt() * stft_scale));
        }
        Ok(mag)
    }

    /// Griffin-Lim from a log mel-spectrogram. Output length is
    /// `(n_frames - 1) * hop + win` samples.
    pub fn reconstruct(&self, m: &MelSpectrogram, iterations: usize) -> Result<Waveform> {
        self.reconstruct_with(m, iterations, |_, _| {})
    }

    /// As [`MelConfig::reconstruct`], calling `observe(iteration, waveform)` after each
    /// iteration.
    pub fn reconstruct_with<F: FnMut(usize, &[f64])>(
        &self,
        m: &MelSpectrogram,
        iterations: usize,
        mut observe: F,
    ) -> Result<Waveform> {
        if iterations < 1 {
            return Err(CdtError::Argument("phase reconstruction needs at least one iteration".into()));
        }
        let mag = self.mel_to_magnitude(m)?;
        let stft = self.stft();
        let hop = self.hop_samples();
        let n_frames = m.n_frames();
        let out_len = (n_frames - 1) * hop + self.win_samples();

        let mut spec = mag.mapv(|a| Complex64::new(a, 0.0));
        let mut x = stft.synthesize(&spec, hop, out_len);
        for it in 0..iterations {
            let est = stft.analyze(&x, n_frames, hop);
            for ((s, e), a) in spec.iter_mut().zip(est.iter()).zip(mag.iter()) {
                let n = e.norm();
                *s = if n > 1e-12 {
                    e * (*a / n)
                } else {
                    Complex64::new(*a, 0.0)
                };
            }
            x = stft.synthesize(&spec, hop, out_len);
            observe(it, &x);
        }
        Waveform::new(x, self.sample_rate_hz)
    }
}

/// Phase reconstruction at the default front-end geometry.
pub fn reconstruct_waveform(m: &MelSpectrogram, iterations: usize) -> Result<Waveform> {
    MelConfig::default().reconstruct(m, iterations)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, n: usize) -> Waveform {
        let s = (0..n)
            .map(|i| 0.4 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
            .collect();
        Waveform::new(s, 16_000).unwrap()
    }

    fn l1(a: &MelSpectrogram, b: &MelSpectrogram) -> f64 {
        let n = a.n_frames().min(b.n_frames());
        let mut acc = 0.0;
        for t in 0..n {
            for k in 0..a.n_mels {
                acc += (a.values[[t, k]] - b.values[[t, k]]).abs();
            }
        }
        acc / (n * a.n_mels) as f64
    }

    #[test]
    fn mel_distance_decreases_over_first_iterations() {
        let cfg = MelConfig::default();
        let x = tone(440.0, 8000);
        let target = cfg.compute(&x);
        let mut dists = Vec::new();
        cfg.reconstruct_with(&target, 5, |_, y| {
            let w = Waveform::new(y.to_vec(), 16_000).unwrap();
            dists.push(l1(&cfg.compute(&w), &target));
        })
        .unwrap();
        assert_eq!(dists.len(), 5);
        for pair in dists.windows(2) {
            assert!(pair[1] < pair[0], "{dists:?}");
        }
    }

    #[test]
    fn all_floor_mel_is_silent() {
        let cfg = MelConfig::default();
        let m = MelSpectrogram::new(Array2::from_elem((20, 80), cfg.log_floor()), &cfg).unwrap();
        let w = cfg.reconstruct(&m, 4).unwrap();
        assert!(w.rms() < 1e-3);
        assert_eq!(w.sample_rate_hz(), 16_000);
        assert_eq!(w.len(), 19 * 160 + 1024);
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = MelConfig::default();
        let m = cfg.compute(&tone(300.0, 4000));
        assert!(matches!(cfg.reconstruct(&m, 0), Err(CdtError::Argument(_))));
    }

    #[test]
    fn output_length_within_one_hop() {
        let cfg = MelConfig::default();
        let x = tone(300.0, 12_345);
        let y = cfg.reconstruct(&cfg.compute(&x), 2).unwrap();
        assert!((y.len() as i64 - x.len() as i64).abs() <= cfg.hop_samples() as i64);
    }
}
