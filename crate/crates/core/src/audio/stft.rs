//! Short-time Fourier helpers shared by the mel front-end, the condition
//! extractors and phase reconstruction.

use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Forward/inverse transform pair of a fixed size with a fixed analysis window.
pub struct Stft {
    n_fft: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    /// `win_len` samples of Hann window, zero-padded to `n_fft`.
    pub fn new(win_len: usize, n_fft: usize) -> Self {
        assert!(win_len <= n_fft && win_len > 0);
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            window: hann(win_len),
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn window_sum(&self) -> f64 {
        self.window.iter().sum()
    }

    /// Half spectrum of one windowed frame starting at `start` (zero-filled past the end).
    pub fn spectrum(&self, samples: &[f64], start: usize) -> Vec<Complex64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for (j, w) in self.window.iter().enumerate() {
            let s = samples.get(start + j).copied().unwrap_or(0.0);
            buf[j] = Complex64::new(s * w, 0.0);
        }
        self.forward.process(&mut buf);
        buf.truncate(self.n_bins());
        buf
    }

    /// Power spectrum `|X|^2 / (sum w)^2` of one frame, so a sinusoid of
    /// amplitude `a` peaks near `(a/2)^2`.
    pub fn power(&self, samples: &[f64], start: usize) -> Vec<f64> {
        let norm = self.window_sum().powi(2);
        self.spectrum(samples, start)
            .into_iter()
            .map(|c| c.norm_sqr() / norm)
            .collect()
    }

    /// Complex STFT `[n_frames x n_bins]` of frames starting at `t * hop`.
    pub fn analyze(&self, samples: &[f64], n_frames: usize, hop: usize) -> Array2<Complex64> {
        let mut out = Array2::from_elem((n_frames, self.n_bins()), Complex64::new(0.0, 0.0));
        for t in 0..n_frames {
            let spec = self.spectrum(samples, t * hop);
            for (o, s) in out.row_mut(t).iter_mut().zip(spec) {
                *o = s;
            }
        }
        out
    }

    /// Weighted overlap-add inverse of [`Stft::analyze`] with squared-window normalization.
    pub fn synthesize(&self, spec: &Array2<Complex64>, hop: usize, out_len: usize) -> Vec<f64> {
        let win_len = self.window.len();
        let mut out = vec![0.0; out_len];
        let mut norm = vec![0.0; out_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let n_bins = self.n_bins();
        for (t, row) in spec.rows().into_iter().enumerate() {
            for k in 0..n_bins {
                buf[k] = row[k];
            }
            for k in n_bins..self.n_fft {
                buf[k] = row[self.n_fft - k].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * hop;
            for j in 0..win_len {
                let idx = start + j;
                if idx >= out_len {
                    break;
                }
                let w = self.window[j];
                out[idx] += buf[j].re / self.n_fft as f64 * w;
                norm[idx] += w * w;
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            if *n > 1e-8 {
                *o /= n;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analysis_synthesis_is_identity_in_the_interior() {
        let stft = Stft::new(256, 256);
        let x: Vec<f64> = (0..2048).map(|n| ((n as f64) * 0.37).sin() * 0.3).collect();
        let hop = 64;
        let frames = 1 + (x.len() - 256) / hop;
        let spec = stft.analyze(&x, frames, hop);
        let len = (frames - 1) * hop + 256;
        let y = stft.synthesize(&spec, hop, len);
        for n in 8..len - 8 {
            assert!((x[n] - y[n]).abs() < 1e-9, "sample {n}");
        }
    }

    #[test]
    fn power_normalization_of_a_sinusoid() {
        let stft = Stft::new(1024, 1024);
        // 500 Hz at 16 kHz lands exactly on bin 32.
        let x: Vec<f64> = (0..1024)
            .map(|n| 0.5 * (2.0 * std::f64::consts::PI * 500.0 * n as f64 / 16000.0).cos())
            .collect();
        let p = stft.power(&x, 0);
        assert!((p[32] - 0.0625).abs() < 1e-9);
    }
}
