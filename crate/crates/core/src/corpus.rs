//! Synthetic toy-speech corpus. Each token is a harmonic tone whose spectrum
//! carries one strong resonance at a token-specific frequency; speakers differ
//! in f0, spectral tilt, and a small resonance shift.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, Waveform, DEFAULT_SAMPLE_RATE};
use crate::degradation::resolve;
use crate::error::{CdtError, Result};
use crate::rng::derived_rng;

/// Token alphabet, in order of increasing resonance frequency.
pub const ALPHABET: [char; 6] = ['a', 'e', 'i', 'o', 'u', 'y'];
pub const LOWEST_RESONANCE_HZ: f64 = 1200.0;
pub const HIGHEST_RESONANCE_HZ: f64 = 7200.0;
/// Resonance half-width as a standard deviation in natural-log frequency.
pub const RESONANCE_LOG_WIDTH: f64 = 0.09;
pub const RESONANCE_GAIN_DB: f64 = 30.0;
pub const PEAK_AMPLITUDE: f64 = 0.5;
pub const CROSSFADE_MS: f64 = 10.0;
/// Harmonics are generated up to this frequency.
const HARMONIC_CEILING_HZ: f64 = 7900.0;

pub const F0_RANGE_HZ: (f64, f64) = (90.0, 220.0);
pub const TILT_RANGE_DB_PER_OCT: (f64, f64) = (-4.0, -1.0);
pub const FORMANT_SHIFT_RANGE: (f64, f64) = (0.96, 1.04);

pub fn token_index(c: char) -> Option<usize> {
    ALPHABET.iter().position(|&a| a == c)
}

/// Unshifted resonance frequency of a token.
pub fn resonance_hz(token: usize) -> f64 {
    let step = (HIGHEST_RESONANCE_HZ / LOWEST_RESONANCE_HZ).ln() / (ALPHABET.len() - 1) as f64;
    LOWEST_RESONANCE_HZ * (step * token as f64).exp()
}

pub fn parse_tokens(s: &str) -> Result<Vec<usize>> {
    s.chars()
        .map(|c| token_index(c).ok_or_else(|| CdtError::Argument(format!("unknown token `{c}`"))))
        .collect()
}

pub fn token_string(tokens: &[usize]) -> String {
    tokens.iter().map(|&t| ALPHABET[t]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeaker {
    pub speaker_id: String,
    pub f0_hz: f64,
    pub spectral_tilt_db_per_oct: f64,
    pub formant_shift: f64,
}

impl SyntheticSpeaker {
    pub fn validate(&self) -> Result<()> {
        let ok = (80.0..=300.0).contains(&self.f0_hz)
            && (-12.0..=0.0).contains(&self.spectral_tilt_db_per_oct)
            && (0.8..=1.2).contains(&self.formant_shift);
        if ok {
            Ok(())
        } else {
            Err(CdtError::Argument(format!("speaker `{}` parameters out of range", self.speaker_id)))
        }
    }

    /// Linear amplitude of a harmonic at `f` while token `token` sounds.
    fn envelope(&self, f: f64, token: usize) -> f64 {
        let tilt = self.spectral_tilt_db_per_oct * (f / self.f0_hz).log2();
        let center = resonance_hz(token) * self.formant_shift;
        let z = (f / center).ln() / RESONANCE_LOG_WIDTH;
        let peak = 10f64.powf(RESONANCE_GAIN_DB / 20.0) * (-0.5 * z * z).exp();
        10f64.powf(tilt / 20.0) * (1.0 + peak)
    }
}

/// Renders `tokens` at `duration_per_token_ms` each, with raised-cosine
/// crossfades between neighbouring tokens and random harmonic phases from `seed`.
pub fn synthesize(
    speaker: &SyntheticSpeaker,
    tokens: &[usize],
    duration_per_token_ms: f64,
    seed: u64,
) -> Result<Waveform> {
    synthesize_at(speaker, tokens, duration_per_token_ms, seed, DEFAULT_SAMPLE_RATE)
}

pub fn synthesize_at(
    speaker: &SyntheticSpeaker,
    tokens: &[usize],
    duration_per_token_ms: f64,
    seed: u64,
    sample_rate_hz: u32,
) -> Result<Waveform> {
    if tokens.is_empty() {
        return Err(CdtError::Argument("token sequence is empty".into()));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= ALPHABET.len()) {
        return Err(CdtError::Argument(format!("unknown token index {t}")));
    }
    if !(duration_per_token_ms > 0.0) {
        return Err(CdtError::Argument("token duration must be positive".into()));
    }
    speaker.validate()?;
    let sr = sample_rate_hz as f64;
    let seg = (duration_per_token_ms * sr / 1000.0).round() as usize;
    if seg == 0 {
        return Err(CdtError::Argument("token duration is shorter than one sample".into()));
    }
    let n = seg * tokens.len();
    let ceiling = HARMONIC_CEILING_HZ.min(sr / 2.0 - 50.0);
    let n_harm = (ceiling / speaker.f0_hz).floor() as usize;
    let mut rng = derived_rng(seed, &["synth", &speaker.speaker_id, &token_string(tokens)]);
    let phases: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    // amps[token][h]
    let amps: Vec<Vec<f64>> = (0..ALPHABET.len())
        .map(|tok| {
            (1..=n_harm)
                .map(|h| speaker.envelope(h as f64 * speaker.f0_hz, tok))
                .collect()
        })
        .collect();
    let fade = ((CROSSFADE_MS * sr / 1000.0).round() as usize).min(seg / 2).max(1);
    let mut out = vec![0.0; n];
    let w0 = std::f64::consts::TAU * speaker.f0_hz / sr;
    let mut mixed = vec![0.0; n_harm];
    for (i, o) in out.iter_mut().enumerate() {
        let k = i / seg;
        let pos = i % seg;
        // Blend into the next token over the last `fade` samples of this one.
        let (next, frac) = if k + 1 < tokens.len() && pos + fade >= seg {
            let x = (pos + fade - seg) as f64 / fade as f64;
            (tokens[k + 1], 0.5 - 0.5 * (std::f64::consts::PI * x).cos())
        } else {
            (tokens[k], 0.0)
        };
        let a = &amps[tokens[k]];
        let b = &amps[next];
        for h in 0..n_harm {
            mixed[h] = a[h] * (1.0 - frac) + b[h] * frac;
        }
        let t = i as f64;
        *o = mixed
            .iter()
            .enumerate()
            .map(|(h, amp)| amp * (w0 * (h + 1) as f64 * t + phases[h]).cos())
            .sum();
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= PEAK_AMPLITUDE / peak);
    }
    Waveform::new(out, sample_rate_hz)
}

/// Fractions of speakers assigned to each split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub eval: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            eval: 0.1,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.eval];
        if parts.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CdtError::Argument(format!(
                "split fractions {}/{}/{} must be non-negative and sum to 1",
                self.train, self.valid, self.eval
            )));
        }
        Ok(())
    }

    /// Speaker counts per split by largest remainder, with every non-empty
    /// split getting at least one speaker.
    pub fn counts(&self, n_speakers: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let fr = [self.train, self.valid, self.eval];
        let needed = fr.iter().filter(|&&f| f > 0.0).count();
        if n_speakers < needed {
            return Err(CdtError::Argument(format!(
                "{n_speakers} speakers cannot fill {needed} non-empty splits"
            )));
        }
        let mut counts = [0usize; 3];
        let mut rem = [(0.0, 0usize); 3];
        for i in 0..3 {
            let exact = fr[i] * n_speakers as f64;
            counts[i] = exact.floor() as usize;
            rem[i] = (exact - counts[i] as f64, i);
        }
        rem.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut left = n_speakers - counts.iter().sum::<usize>();
        for &(_, i) in rem.iter().cycle().take(3 * left.max(1)) {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        for i in 0..3 {
            if fr[i] > 0.0 && counts[i] == 0 {
                let donor = (0..3).max_by_key(|&j| counts[j]).unwrap();
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }
        Ok(counts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub n_utts_per_speaker: usize,
    pub split: SplitSpec,
    pub token_ms: f64,
    /// Tokens per utterance beyond one of each alphabet symbol.
    pub extra_tokens: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_speakers: 10,
            n_utts_per_speaker: 10,
            split: SplitSpec::default(),
            token_ms: 100.0,
            extra_tokens: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utterance_id: String,
    pub speaker_id: String,
    pub tokens: Vec<usize>,
    pub seed: u64,
    pub waveform: Waveform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub speakers: Vec<(SyntheticSpeaker, Split)>,
    pub utterances: Vec<(Utterance, Split)>,
    pub token_ms: f64,
}

/// A permutation of the full alphabet plus `extra` random tokens, without
/// immediate repeats so every token boundary is audible.
pub fn random_token_sequence<R: Rng>(rng: &mut R, extra: usize) -> Vec<usize> {
    let mut seq: Vec<usize> = (0..ALPHABET.len()).collect();
    seq.shuffle(rng);
    for _ in 0..extra {
        let pos = rng.gen_range(0..=seq.len());
        let choices: Vec<usize> = (0..ALPHABET.len())
            .filter(|&c| (pos == 0 || seq[pos - 1] != c) && (pos == seq.len() || seq[pos] != c))
            .collect();
        seq.insert(pos, *choices.choose(rng).expect("alphabet has at least three tokens"));
    }
    seq
}

/// Speakers with f0 stratified over the allowed range, in shuffled order.
pub fn make_speakers(n: usize, seed: u64) -> Vec<SyntheticSpeaker> {
    let mut rng = derived_rng(seed, &["speakers"]);
    let (lo, hi) = F0_RANGE_HZ;
    let mut f0s: Vec<f64> = (0..n)
        .map(|i| lo + (hi - lo) * (i as f64 + rng.gen_range(0.2..0.8)) / n.max(1) as f64)
        .collect();
    f0s.shuffle(&mut rng);
    f0s.into_iter()
        .enumerate()
        .map(|(i, f0_hz)| SyntheticSpeaker {
            speaker_id: format!("spk{i:02}"),
            f0_hz,
            spectral_tilt_db_per_oct: rng.gen_range(TILT_RANGE_DB_PER_OCT.0..TILT_RANGE_DB_PER_OCT.1),
            formant_shift: rng.gen_range(FORMANT_SHIFT_RANGE.0..FORMANT_SHIFT_RANGE.1),
        })
        .collect()
}

pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    if spec.n_speakers == 0 || spec.n_utts_per_speaker == 0 {
        return Err(CdtError::Argument("corpus needs at least one speaker and utterance".into()));
    }
    let counts = spec.split.counts(spec.n_speakers)?;
    let speakers = make_speakers(spec.n_speakers, seed);
    let mut assigned = Vec::with_capacity(speakers.len());
    let mut i = 0;
    for (split, &c) in Split::ALL.iter().zip(&counts) {
        for _ in 0..c {
            assigned.push((speakers[i].clone(), *split));
            i += 1;
        }
    }
    let mut utterances = Vec::new();
    for (spk, split) in &assigned {
        let mut rng = derived_rng(seed, &["tokens", &spk.speaker_id]);
        for u in 0..spec.n_utts_per_speaker {
            let tokens = random_token_sequence(&mut rng, spec.extra_tokens);
            let utt_seed = crate::rng::derive_seed(seed, &["utt", &spk.speaker_id, &u.to_string()]);
            let waveform = synthesize(spk, &tokens, spec.token_ms, utt_seed)?;
            utterances.push((
                Utterance {
                    utterance_id: format!("{}_{u:03}", spk.speaker_id),
                    speaker_id: spk.speaker_id.clone(),
                    tokens,
                    seed: utt_seed,
                    waveform,
                },
                *split,
            ));
        }
    }
    Ok(Corpus {
        speakers: assigned,
        utterances,
        token_ms: spec.token_ms,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub wav_path: PathBuf,
    pub tokens: String,
}

/// Line-delimited `utterance_id <TAB> speaker_id <TAB> wav_path <TAB> tokens`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CdtError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(CdtError::Format(format!(
                    "{}:{}: expected 4 tab-separated fields, found {}",
                    path.display(),
                    i + 1,
                    f.len()
                )));
            }
            parse_tokens(f[3]).map_err(|e| CdtError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
            entries.push(ManifestEntry {
                utterance_id: f[0].to_string(),
                speaker_id: f[1].to_string(),
                wav_path: resolve(base, f[2]),
                tokens: f[3].to_string(),
            });
        }
        Ok(Self { entries })
    }

    /// Writes with wav paths relative to the manifest's directory when possible.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let mut text = String::new();
        for e in &self.entries {
            let p = e.wav_path.strip_prefix(base).unwrap_or(&e.wav_path);
            text.push_str(&format!("{}\t{}\t{}\t{}\n", e.utterance_id, e.speaker_id, p.display(), e.tokens));
        }
        fs::write(path, text).map_err(|e| CdtError::io(path, e))
    }

    pub fn speakers(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.speaker_id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load_audio(&self, sample_rate_hz: u32) -> Result<Vec<Waveform>> {
        self.entries
            .iter()
            .map(|e| {
                let w = read_wav(&e.wav_path)?;
                if w.sample_rate_hz() != sample_rate_hz {
                    return Err(CdtError::Validation(format!(
                        "{} is {} Hz, expected {sample_rate_hz} Hz",
                        e.wav_path.display(),
                        w.sample_rate_hz()
                    )));
                }
                Ok(w)
            })
            .collect()
    }
}

pub fn assert_disjoint(a: &Manifest, b: &Manifest, what: &str) -> Result<()> {
    let shared: Vec<String> = a.speakers().intersection(&b.speakers()).cloned().collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(CdtError::Validation(format!("{what} share speakers: {}", shared.join(", "))))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub eval: PathBuf,
    pub speakers: PathBuf,
}

impl CorpusPaths {
    pub fn manifest(&self, split: Split) -> &Path {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Eval => &self.eval,
        }
    }
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |(_, s)| *s == split).map(|(u, _)| u)
    }

    pub fn speaker(&self, id: &str) -> Option<&SyntheticSpeaker> {
        self.speakers.iter().map(|(s, _)| s).find(|s| s.speaker_id == id)
    }

    /// Writes `wav/<utt>.wav`, one manifest per split, and `speakers.tsv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<CorpusPaths> {
        let dir = dir.as_ref();
        let wav_dir = dir.join("wav");
        fs::create_dir_all(&wav_dir).map_err(|e| CdtError::io(&wav_dir, e))?;
        let mut manifests = [Manifest::default(), Manifest::default(), Manifest::default()];
        for (u, split) in &self.utterances {
            let p = wav_dir.join(format!("{}.wav", u.utterance_id));
            write_wav(&u.waveform, &p)?;
            manifests[*split as usize].entries.push(ManifestEntry {
                utterance_id: u.utterance_id.clone(),
                speaker_id: u.speaker_id.clone(),
                wav_path: p,
                tokens: token_string(&u.tokens),
            });
        }
        let paths = CorpusPaths {
            train: dir.join("train.tsv"),
            valid: dir.join("valid.tsv"),
            eval: dir.join("eval.tsv"),
            speakers: dir.join("speakers.tsv"),
        };
        for split in Split::ALL {
            manifests[split as usize].save(paths.manifest(split))?;
        }
        let mut text = String::from("speaker_id\tsplit\tf0_hz\ttilt_db_per_oct\tformant_shift\n");
        for (s, split) in &self.speakers {
            text.push_str(&format!(
                "{}\t{}\t{:.3}\t{:.3}\t{:.4}\n",
                s.speaker_id,
                split.name(),
                s.f0_hz,
                s.spectral_tilt_db_per_oct,
                s.formant_shift
            ));
        }
        fs::write(&paths.speakers, text).map_err(|e| CdtError::io(&paths.speakers, e))?;
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::mel_spectrogram;

    fn speaker(id: &str, f0: f64) -> SyntheticSpeaker {
        SyntheticSpeaker {
            speaker_id: id.into(),
            f0_hz: f0,
            spectral_tilt_db_per_oct: -2.0,
            formant_shift: 1.0,
        }
    }

    #[test]
    fn synthesis_is_deterministic_and_sized() {
        let s = speaker("a", 120.0);
        let toks = [0, 1, 2, 3, 4, 5, 0, 1, 2, 3];
        let w = synthesize(&s, &toks, 100.0, 3).unwrap();
        assert_eq!(w.len(), 16_000);
        assert_eq!(w, synthesize(&s, &toks, 100.0, 3).unwrap());
        assert!((w.peak() - PEAK_AMPLITUDE).abs() < 1e-12);
        assert!(synthesize(&s, &[], 100.0, 3).is_err());
        assert!(synthesize(&s, &[6], 100.0, 3).is_err());
        assert!(parse_tokens("aez").is_err());
    }

    #[test]
    fn f0_changes_mel_argmax() {
        let toks = [0, 1, 2, 3, 4, 5];
        let argmax = |f0: f64| -> Vec<usize> {
            let m = mel_spectrogram(&synthesize(&speaker("x", f0), &toks, 100.0, 1).unwrap());
            m.values
                .rows()
                .into_iter()
                .map(|r| r.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0)
                .collect()
        };
        let a = argmax(100.0);
        let b = argmax(140.0);
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    }

    #[test]
    fn token_sequences_cover_alphabet_without_repeats() {
        let mut rng = derived_rng(1, &["t"]);
        for _ in 0..50 {
            let s = random_token_sequence(&mut rng, 2);
            assert_eq!(s.len(), ALPHABET.len() + 2);
            assert!(s.windows(2).all(|p| p[0] != p[1]));
            for t in 0..ALPHABET.len() {
                assert!(s.contains(&t));
            }
        }
    }

    #[test]
    fn splits_are_speaker_disjoint() {
        let spec = CorpusSpec {
            n_speakers: 10,
            n_utts_per_speaker: 2,
            token_ms: 50.0,
            ..CorpusSpec::default()
        };
        let c = generate_corpus(&spec, 5).unwrap();
        let ids = |s: Split| -> BTreeSet<String> { c.split(s).map(|u| u.speaker_id.clone()).collect() };
        let (tr, va, ev) = (ids(Split::Train), ids(Split::Valid), ids(Split::Eval));
        assert_eq!((tr.len(), va.len(), ev.len()), (8, 1, 1));
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&ev) && va.is_disjoint(&ev));
        assert_eq!(c, generate_corpus(&spec, 5).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let paths = c.write(dir.path()).unwrap();
        let train = Manifest::load(&paths.train).unwrap();
        let eval = Manifest::load(&paths.eval).unwrap();
        assert_eq!(train.len(), 16);
        assert!(assert_disjoint(&train, &eval, "train and eval").is_ok());
        assert!(assert_disjoint(&train, &train, "train").is_err());
        let audio = eval.load_audio(16_000).unwrap();
        assert_eq!(audio[0].len(), 8 * 800);
    }

    #[test]
    fn split_counts() {
        let s = SplitSpec::default();
        assert_eq!(s.counts(10).unwrap(), [8, 1, 1]);
        assert_eq!(s.counts(3).unwrap(), [1, 1, 1]);
        assert!(s.counts(2).is_err());
        let bad = SplitSpec {
            train: 0.5,
            valid: 0.1,
            eval: 0.1,
        };
        assert!(bad.counts(10).is_err());
        let two = SplitSpec {
            train: 0.5,
            valid: 0.0,
            eval: 0.5,
        };
        assert_eq!(two.counts(5).unwrap().iter().sum::<usize>(), 5);
    }
}
