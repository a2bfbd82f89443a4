//! Rule-based token recognizer for the synthetic corpus: each voiced frame is
//! labelled with the token whose resonance lies nearest the frame's dominant
//! mel band, then labels are smoothed and run-collapsed.

use crate::audio::{MelConfig, Waveform};
use crate::corpus::{resonance_hz, ALPHABET};

#[derive(Debug, Clone, PartialEq)]
pub struct Recognizer {
    pub mel: MelConfig,
    /// Search band for the dominant resonance.
    pub band_hz: (f64, f64),
    /// Compensation for the source's falling spectral slope.
    pub tilt_comp_db_per_oct: f64,
    /// Frames whose loudest mel band lies this many nats below the
    /// utterance's loudest band are silence.
    pub silence_range: f64,
    /// Window of the majority filter over frame labels (odd).
    pub smooth_frames: usize,
    /// Shorter label runs are discarded before collapsing.
    pub min_run_frames: usize,
}

impl Default for Recognizer {
    fn default() -> Self {
        Self {
            mel: MelConfig::default(),
            band_hz: (900.0, 7900.0),
            tilt_comp_db_per_oct: 2.5,
            silence_range: 7.0,
            smooth_frames: 5,
            min_run_frames: 3,
        }
    }
}

impl Recognizer {
    /// Per-frame labels, `None` for silence.
    pub fn frame_labels(&self, w: &Waveform) -> Vec<Option<usize>> {
        let mel = self.mel.compute(w);
        let (_, centers) = self.mel.filterbank();
        let (lo, hi) = self.band_hz;
        let to_nat = std::f64::consts::LN_10 / 10.0;
        let band: Vec<(usize, f64)> = centers
            .iter()
            .enumerate()
            .filter(|(_, &c)| c >= lo && c <= hi)
            .map(|(k, &c)| (k, self.tilt_comp_db_per_oct * (c / lo).log2() * to_nat))
            .collect();
        let log_res: Vec<f64> = (0..ALPHABET.len()).map(|t| resonance_hz(t).ln()).collect();
        let peak = mel.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let silence = if peak > self.mel.log_floor() {
            peak - self.silence_range
        } else {
            f64::INFINITY
        };
        mel.values
            .rows()
            .into_iter()
            .map(|row| {
                let loudest = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if loudest < silence || band.is_empty() {
                    return None;
                }
                let (k, _) = band
                    .iter()
                    .map(|&(k, comp)| (k, row[k] + comp))
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("band is non-empty");
                let f = centers[k].ln();
                (0..ALPHABET.len()).min_by(|&a, &b| (log_res[a] - f).abs().total_cmp(&(log_res[b] - f).abs()))
            })
            .collect()
    }

    pub fn recognize(&self, w: &Waveform) -> Vec<usize> {
        collapse(&self.smooth(&self.frame_labels(w)), self.min_run_frames)
    }

    /// Majority vote over a centered window; ties keep the center label.
    fn smooth(&self, labels: &[Option<usize>]) -> Vec<Option<usize>> {
        let half = self.smooth_frames / 2;
        (0..labels.len())
            .map(|i| {
                let lo = i.saturating_sub(half);
                let hi = (i + half + 1).min(labels.len());
                let mut counts = [0usize; ALPHABET.len() + 1];
                let slot = |l: Option<usize>| l.map_or(ALPHABET.len(), |t| t);
                for l in &labels[lo..hi] {
                    counts[slot(*l)] += 1;
                }
                let center = slot(labels[i]);
                let best = (0..counts.len()).max_by_key(|&c| (counts[c], c == center)).unwrap();
                (best < ALPHABET.len()).then_some(best)
            })
            .collect()
    }
}

/// Drops runs shorter than `min_run` and silence, then merges repeats.
fn collapse(labels: &[Option<usize>], min_run: usize) -> Vec<usize> {
    let mut runs: Vec<(Option<usize>, usize)> = Vec::new();
    for &l in labels {
        match runs.last_mut() {
            Some((last, n)) if *last == l => *n += 1,
            _ => runs.push((l, 1)),
        }
    }
    let mut out: Vec<usize> = Vec::new();
    for (l, n) in runs {
        if let Some(t) = l {
            if n >= min_run && out.last() != Some(&t) {
                out.push(t);
            }
        }
    }
    out
}

pub fn recognize(w: &Waveform) -> Vec<usize> {
    Recognizer::default().recognize(w)
}
