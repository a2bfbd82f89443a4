//! Reference speaker embedder: long-term log-mel shape (band means with the
//! overall level removed, band deviations) plus f0 statistics.

use crate::audio::{MelConfig, Waveform};
use crate::error::{CdtError, Result};

pub const EMBEDDER_ID: &str = "melstat-f0-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub vector: Vec<f64>,
    pub embedder_id: String,
    /// Set when the input had no energy; the vector is then all zeros.
    pub silent: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedder {
    pub mel: MelConfig,
    /// Power floor relative to the utterance's loudest mel bin.
    pub relative_floor: f64,
    /// Frames quieter than this (relative, natural-log power) are skipped.
    pub active_range: f64,
    pub f0_range_hz: (f64, f64),
    /// Weights of the three feature groups before normalization.
    pub weights: (f64, f64, f64),
}

impl Default for SpeakerEmbedder {
    fn default() -> Self {
        Self {
            mel: MelConfig::default(),
            relative_floor: 1e-6,
            active_range: (1e-4f64).ln().abs(),
            f0_range_hz: (60.0, 400.0),
            weights: (1.0, 1.0, 4.0),
        }
    }
}

impl SpeakerEmbedder {
    pub fn dim(&self) -> usize {
        2 * self.mel.n_mels + 2
    }

    pub fn embed(&self, w: &Waveform) -> SpeakerEmbedding {
        let power = self.mel.mel_power(w);
        let peak = power.iter().cloned().fold(0.0, f64::max);
        if !(peak > 0.0) {
            return SpeakerEmbedding {
                vector: vec![0.0; self.dim()],
                embedder_id: EMBEDDER_ID.into(),
                silent: true,
            };
        }
        let floor = peak * self.relative_floor;
        let logp = power.mapv(|p| (p.max(floor) / peak).ln());
        let frame_level: Vec<f64> = logp.rows().into_iter().map(|r| r.iter().cloned().fold(f64::MIN, f64::max)).collect();
        let active: Vec<usize> = (0..logp.nrows()).filter(|&t| frame_level[t] >= -self.active_range).collect();
        let n_mels = self.mel.n_mels;
        let mut mean = vec![0.0; n_mels];
        let mut sd = vec![0.0; n_mels];
        for &t in &active {
            for k in 0..n_mels {
                mean[k] += logp[[t, k]];
            }
        }
        let n = active.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        for &t in &active {
            for k in 0..n_mels {
                let d = logp[[t, k]] - mean[k];
                sd[k] += d * d;
            }
        }
        sd.iter_mut().for_each(|s| *s = (*s / n).sqrt());
        let level = mean.iter().sum::<f64>() / n_mels as f64;
        let (f0_mean, f0_sd) = self.f0_stats(w);
        let (a, b, c) = self.weights;
        let mut v: Vec<f64> = mean.iter().map(|m| a * (m - level)).collect();
        v.extend(sd.iter().map(|s| b * s));
        v.push(c * f0_mean);
        v.push(c * f0_sd);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        SpeakerEmbedding {
            vector: v,
            embedder_id: EMBEDDER_ID.into(),
            silent: false,
        }
    }

    /// Mean and deviation of log2 f0 (in octaves above 50 Hz) over voiced frames,
    /// from the normalized autocorrelation peak.
    fn f0_stats(&self, w: &Waveform) -> (f64, f64) {
        let x = w.samples();
        let sr = w.sample_rate_hz() as f64;
        let len = self.mel.win_samples();
        let hop = 2 * self.mel.hop_samples();
        let min_lag = (sr / self.f0_range_hz.1).floor().max(1.0) as usize;
        let max_lag = (sr / self.f0_range_hz.0).ceil() as usize;
        let mut f0s = Vec::new();
        let mut start = 0;
        while start + len + max_lag <= x.len() {
            let frame = &x[start..start + len + max_lag];
            let e0: f64 = frame[..len].iter().map(|v| v * v).sum();
            if e0 > 0.0 {
                let mut best = (0.0, 0usize);
                for lag in min_lag..=max_lag {
                    let mut num = 0.0;
                    let mut el = 0.0;
                    for i in 0..len {
                        num += frame[i] * frame[i + lag];
                        el += frame[i + lag] * frame[i + lag];
                    }
                    let r = if el > 0.0 { num / (e0 * el).sqrt() } else { 0.0 };
                    if r > best.0 {
                        best = (r, lag);
                    }
                }
                if best.0 > 0.5 {
                    f0s.push((sr / best.1 as f64 / 50.0).log2());
                }
            }
            start += hop;
        }
        if f0s.is_empty() {
            return (0.0, 0.0);
        }
        let n = f0s.len() as f64;
        let m = f0s.iter().sum::<f64>() / n;
        let v = f0s.iter().map(|f| (f - m) * (f - m)).sum::<f64>() / n;
        (m, v.sqrt())
    }
}

pub fn embed_speaker(w: &Waveform) -> SpeakerEmbedding {
    SpeakerEmbedder::default().embed(w)
}

pub fn cosine(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> Result<f64> {
    if a.vector.len() != b.vector.len() || a.embedder_id != b.embedder_id {
        return Err(CdtError::Shape("embeddings come from different embedders".into()));
    }
    let na = a.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(CdtError::DegenerateInput("cosine of a zero embedding".into()));
    }
    let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Speaker-embedding cosine similarity between converted and reference speech.
pub fn secs(converted: &Waveform, target_reference: &Waveform) -> Result<f64> {
    let e = SpeakerEmbedder::default();
    cosine(&e.embed(converted), &e.embed(target_reference))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};

    #[test]
    fn identity_symmetry_and_norm() {
        let c = generate_corpus(
            &CorpusSpec {
                n_speakers: 3,
                n_utts_per_speaker: 2,
                ..CorpusSpec::default()
            },
            1,
        )
        .unwrap();
        let a = &c.utterances[0].0.waveform;
        let b = &c.utterances[3].0.waveform;
        let ea = embed_speaker(a);
        let n = ea.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert!((secs(a, a).unwrap() - 1.0).abs() < 1e-12);
        assert!((secs(a, b).unwrap() - secs(b, a).unwrap()).abs() < 1e-12);
        assert!((secs(&a.scaled(0.5), b).unwrap() - secs(a, b).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn same_speaker_pairs_are_closer() {
        use rand::Rng;
        let c = generate_corpus(
            &CorpusSpec {
                n_speakers: 8,
                n_utts_per_speaker: 4,
                ..CorpusSpec::default()
            },
            7,
        )
        .unwrap();
        let emb: Vec<(String, SpeakerEmbedding)> = c
            .utterances
            .iter()
            .map(|(u, _)| (u.speaker_id.clone(), embed_speaker(&u.waveform)))
            .collect();
        let mut rng = crate::rng::derived_rng(1, &["triples"]);
        let (mut wins, trials) = (0, 400);
        for _ in 0..trials {
            let a = rng.gen_range(0..emb.len());
            let same: Vec<usize> = (0..emb.len()).filter(|&i| i != a && emb[i].0 == emb[a].0).collect();
            let diff: Vec<usize> = (0..emb.len()).filter(|&i| emb[i].0 != emb[a].0).collect();
            let p = same[rng.gen_range(0..same.len())];
            let n = diff[rng.gen_range(0..diff.len())];
            if cosine(&emb[a].1, &emb[p].1).unwrap() > cosine(&emb[a].1, &emb[n].1).unwrap() {
                wins += 1;
            }
        }
        assert!(wins as f64 >= 0.95 * trials as f64, "{wins}/{trials}");
    }

    #[test]
    fn silence_is_flagged() {
        let s = Waveform::silence(4000, 16_000).unwrap();
        let e = embed_speaker(&s);
        assert!(e.silent && e.vector.iter().all(|&v| v == 0.0));
        assert!(matches!(secs(&s, &s), Err(CdtError::DegenerateInput(_))));
    }

    #[test]
    fn orthogonal_embeddings_have_zero_cosine() {
        let mk = |v: Vec<f64>| SpeakerEmbedding {
            vector: v,
            embedder_id: EMBEDDER_ID.into(),
            silent: false,
        };
        assert_eq!(cosine(&mk(vec![1.0, 0.0]), &mk(vec![0.0, 2.0])).unwrap(), 0.0);
    }
}
