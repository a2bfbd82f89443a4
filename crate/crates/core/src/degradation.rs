//! Pseudo-noisy source construction: `noisy = clean + alpha * noise` at a
//! controlled SNR, plus the two synthetic noise banks (seen during training,
//! unseen at evaluation).

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, Waveform};
use crate::error::{CdtError, Result};
use crate::rng::derived_rng;

/// Uniform SNR range in dB. `low_db == high_db == +inf` is the no-noise sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrSpec {
    pub low_db: f64,
    pub high_db: f64,
}

impl SnrSpec {
    pub fn new(low_db: f64, high_db: f64) -> Result<Self> {
        if low_db.is_nan() || high_db.is_nan() || low_db > high_db {
            return Err(CdtError::Argument(format!(
                "SNR range requires low <= high, got [{low_db}, {high_db}]"
            )));
        }
        Ok(Self { low_db, high_db })
    }

    /// No added noise.
    pub fn clean() -> Self {
        Self {
            low_db: f64::INFINITY,
            high_db: f64::INFINITY,
        }
    }

    pub fn is_clean(&self) -> bool {
        self.low_db == f64::INFINITY
    }
}

impl Default for SnrSpec {
    fn default() -> Self {
        Self {
            low_db: 0.0,
            high_db: 20.0,
        }
    }
}

pub fn sample_snr<R: Rng>(spec: &SnrSpec, rng: &mut R) -> f64 {
    if spec.low_db == spec.high_db {
        spec.low_db
    } else {
        rng.gen_range(spec.low_db..=spec.high_db)
    }
}

/// Gain `alpha` such that `clean + alpha * noise` has exactly `target_snr_db`
/// under the mean-power definition.
pub fn scale_for_snr(clean: &Waveform, noise: &Waveform, target_snr_db: f64) -> Result<f64> {
    if clean.len() != noise.len() {
        return Err(CdtError::Argument(format!(
            "length mismatch: clean {} vs noise {}",
            clean.len(),
            noise.len()
        )));
    }
    if clean.sample_rate_hz() != noise.sample_rate_hz() {
        return Err(CdtError::Argument("sample rate mismatch".into()));
    }
    let pc = clean.power();
    let pn = noise.power();
    if pc <= 0.0 {
        return Err(CdtError::DegenerateInput("clean signal is silent".into()));
    }
    if pn <= 0.0 {
        return Err(CdtError::DegenerateInput("noise signal is silent".into()));
    }
    Ok((pc / (pn * 10f64.powf(target_snr_db / 10.0))).sqrt())
}

/// `10 log10(P_clean / P_noise)`; `+inf` for silent noise, `-inf` for silent clean.
pub fn measure_snr(clean: &Waveform, noise_component: &Waveform) -> Result<f64> {
    if clean.len() != noise_component.len() {
        return Err(CdtError::Argument("length mismatch".into()));
    }
    let pn = noise_component.power();
    let pc = clean.power();
    if pn <= 0.0 {
        return Ok(f64::INFINITY);
    }
    if pc <= 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(10.0 * (pc / pn).log10())
}

/// Tiles a short noise or crops a random segment of a long one to `len` samples.
pub fn fit_noise_length<R: Rng>(noise: &Waveform, len: usize, rng: &mut R) -> (Waveform, usize) {
    let n = noise.samples();
    let offset = if n.len() > len {
        rng.gen_range(0..=n.len() - len)
    } else {
        0
    };
    let samples = (0..len).map(|i| n[(offset + i) % n.len()]).collect();
    (
        Waveform::new(samples, noise.sample_rate_hz()).expect("non-empty"),
        offset,
    )
}

#[derive(Debug, Clone)]
pub struct Mixture {
    pub noisy: Waveform,
    pub alpha: f64,
    pub noise_offset: usize,
    /// `true` when the mixture leaves `[-1, 1]`; nothing is renormalized.
    pub exceeds_unit_range: bool,
}

/// `clean + alpha * noise` at the target SNR. `+inf` returns the clean signal.
pub fn mix<R: Rng>(
    clean: &Waveform,
    noise: &Waveform,
    target_snr_db: f64,
    rng: &mut R,
) -> Result<Mixture> {
    if clean.sample_rate_hz() != noise.sample_rate_hz() {
        return Err(CdtError::Argument("sample rate mismatch".into()));
    }
    if target_snr_db == f64::INFINITY {
        return Ok(Mixture {
            noisy: clean.clone(),
            alpha: 0.0,
            noise_offset: 0,
            exceeds_unit_range: clean.peak() > 1.0,
        });
    }
    let (segment, offset) = fit_noise_length(noise, clean.len(), rng);
    let alpha = scale_for_snr(clean, &segment, target_snr_db)?;
    let samples: Vec<f64> = clean
        .samples()
        .iter()
        .zip(segment.samples())
        .map(|(c, n)| c + alpha * n)
        .collect();
    let noisy = Waveform::new(samples, clean.sample_rate_hz())?;
    let exceeds_unit_range = noisy.peak() > 1.0;
    Ok(Mixture {
        noisy,
        alpha,
        noise_offset: offset,
        exceeds_unit_range,
    })
}

/// A named set of noise recordings sharing one sample rate.
#[derive(Debug, Clone)]
pub struct NoiseBank {
    pub entries: Vec<(String, Waveform)>,
    pub rng_seed: u64,
}

impl NoiseBank {
    pub fn new(entries: Vec<(String, Waveform)>, rng_seed: u64) -> Result<Self> {
        if let Some((first, rest)) = entries.split_first() {
            let sr = first.1.sample_rate_hz();
            for (id, w) in std::iter::once(first).chain(rest) {
                if w.rms() <= 0.0 {
                    return Err(CdtError::Validation(format!("noise `{id}` is silent")));
                }
                if w.sample_rate_hz() != sr {
                    return Err(CdtError::Validation(format!(
                        "noise `{id}` at {} Hz, bank at {sr} Hz",
                        w.sample_rate_hz()
                    )));
                }
            }
        }
        Ok(Self { entries, rng_seed })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|(id, _)| id.as_str()).collect()
    }

    /// Reads a `noise_id <TAB> path` manifest; relative paths resolve against
    /// the manifest's directory.
    pub fn load(manifest: impl AsRef<Path>, rng_seed: u64) -> Result<Self> {
        let manifest = manifest.as_ref();
        let text = fs::read_to_string(manifest).map_err(|e| CdtError::io(manifest, e))?;
        let base = manifest.parent().unwrap_or_else(|| Path::new("."));
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(id), Some(path), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(CdtError::Format(format!(
                    "{}:{}: expected `noise_id<TAB>path`",
                    manifest.display(),
                    lineno + 1
                )));
            };
            let p = resolve(base, path);
            entries.push((id.to_string(), read_wav(&p)?));
        }
        Self::new(entries, rng_seed)
    }

    /// Writes every entry as `<dir>/<id>.wav` plus `<dir>/<name>.tsv`.
    pub fn save(&self, dir: impl AsRef<Path>, name: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| CdtError::io(dir, e))?;
        let mut manifest = String::new();
        for (id, w) in &self.entries {
            let file = format!("{id}.wav");
            write_wav(w, dir.join(&file))?;
            manifest.push_str(&format!("{id}\t{file}\n"));
        }
        let path = dir.join(format!("{name}.tsv"));
        fs::write(&path, manifest).map_err(|e| CdtError::io(&path, e))?;
        Ok(path)
    }
}

pub(crate) fn resolve(base: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Transposed direct-form II biquad.
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    z: [f64; 2],
}

impl Biquad {
    fn bandpass(center_hz: f64, q: f64, sr: f64) -> Self {
        let w0 = 2.0 * PI * center_hz / sr;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b: [alpha / a0, 0.0, -alpha / a0],
            a: [-2.0 * w0.cos() / a0, (1.0 - alpha) / a0],
            z: [0.0; 2],
        }
    }

    fn lowpass(cut_hz: f64, q: f64, sr: f64) -> Self {
        let w0 = 2.0 * PI * cut_hz / sr;
        let alpha = w0.sin() / (2.0 * q);
        let c = w0.cos();
        let a0 = 1.0 + alpha;
        Self {
            b: [(1.0 - c) / 2.0 / a0, (1.0 - c) / a0, (1.0 - c) / 2.0 / a0],
            a: [-2.0 * c / a0, (1.0 - alpha) / a0],
            z: [0.0; 2],
        }
    }

    fn highpass(cut_hz: f64, q: f64, sr: f64) -> Self {
        let w0 = 2.0 * PI * cut_hz / sr;
        let alpha = w0.sin() / (2.0 * q);
        let c = w0.cos();
        let a0 = 1.0 + alpha;
        Self {
            b: [(1.0 + c) / 2.0 / a0, -(1.0 + c) / a0, (1.0 + c) / 2.0 / a0],
            a: [-2.0 * c / a0, (1.0 - alpha) / a0],
            z: [0.0; 2],
        }
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.z[0];
        self.z[0] = self.b[1] * x - self.a[0] * y + self.z[1];
        self.z[1] = self.b[2] * x - self.a[1] * y;
        y
    }
}

fn white(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn normalize_peak(mut x: Vec<f64>, peak: f64) -> Vec<f64> {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
    x
}

fn filtered(rng: &mut ChaCha8Rng, n: usize, mut f: Biquad) -> Vec<f64> {
    white(rng, n).into_iter().map(|v| f.process(v)).collect()
}

/// Stationary filtered noises: white, pink, brown, low-, high- and band-pass.
pub fn training_noise_bank(sample_rate_hz: u32, seconds: f64, seed: u64) -> Result<NoiseBank> {
    let sr = sample_rate_hz as f64;
    let n = (seconds * sr) as usize;
    let mut entries = Vec::new();
    let mut rng = derived_rng(seed, &["noise", "train", "white"]);
    entries.push(("train_white".to_string(), white(&mut rng, n)));

    // Pink via Paul Kellet's economy filter.
    let mut rng = derived_rng(seed, &["noise", "train", "pink"]);
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    let pink = white(&mut rng, n)
        .into_iter()
        .map(|w| {
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect();
    entries.push(("train_pink".to_string(), pink));

    let mut rng = derived_rng(seed, &["noise", "train", "brown"]);
    let mut acc = 0.0;
    let brown = white(&mut rng, n)
        .into_iter()
        .map(|w| {
            acc = 0.995 * acc + 0.1 * w;
            acc
        })
        .collect();
    entries.push(("train_brown".to_string(), brown));

    let mut rng = derived_rng(seed, &["noise", "train", "lowpass"]);
    entries.push((
        "train_lowpass".to_string(),
        filtered(&mut rng, n, Biquad::lowpass(800.0, 0.707, sr)),
    ));
    let mut rng = derived_rng(seed, &["noise", "train", "highpass"]);
    entries.push((
        "train_highpass".to_string(),
        filtered(&mut rng, n, Biquad::highpass(3000.0, 0.707, sr)),
    ));
    let mut rng = derived_rng(seed, &["noise", "train", "bandpass"]);
    entries.push((
        "train_bandpass".to_string(),
        filtered(&mut rng, n, Biquad::bandpass(1500.0, 1.2, sr)),
    ));

    let entries = entries
        .into_iter()
        .map(|(id, x)| Ok((id, Waveform::new(normalize_peak(x, 0.5), sample_rate_hz)?)))
        .collect::<Result<Vec<_>>>()?;
    NoiseBank::new(entries, seed)
}

/// Non-stationary noises absent from the training bank: a swept siren,
/// gated bursts, an impulse train, and amplitude-modulated tonal babble.
pub fn evaluation_noise_bank(sample_rate_hz: u32, seconds: f64, seed: u64) -> Result<NoiseBank> {
    let sr = sample_rate_hz as f64;
    let n = (seconds * sr) as usize;
    let mut entries = Vec::new();

    let mut rng = derived_rng(seed, &["noise", "eval", "siren"]);
    let rate = rng.gen_range(0.8..1.6);
    let mut phase = 0.0;
    let siren = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let f = 900.0 + 600.0 * (2.0 * PI * rate * t).sin();
            phase += 2.0 * PI * f / sr;
            phase.sin() + 0.5 * (2.0 * phase).sin() + 0.25 * (3.0 * phase).sin()
        })
        .collect();
    entries.push(("eval_siren".to_string(), siren));

    let mut rng = derived_rng(seed, &["noise", "eval", "bursts"]);
    let mut bursts = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let on = (rng.gen_range(0.03..0.15) * sr) as usize;
        let off = (rng.gen_range(0.05..0.25) * sr) as usize;
        let gain = rng.gen_range(0.3..1.0);
        for s in bursts.iter_mut().skip(i).take(on) {
            *s = gain * rng.gen_range(-1.0..1.0);
        }
        i += on + off;
    }
    entries.push(("eval_bursts".to_string(), bursts));

    let mut rng = derived_rng(seed, &["noise", "eval", "clicks"]);
    let mut clicks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let decay = rng.gen_range(20.0..60.0);
        for (j, s) in clicks.iter_mut().skip(i).take(400).enumerate() {
            *s += (-(j as f64) / decay).exp() * rng.gen_range(-1.0..1.0);
        }
        i += (rng.gen_range(0.02..0.12) * sr) as usize;
    }
    entries.push(("eval_clicks".to_string(), clicks));

    let mut rng = derived_rng(seed, &["noise", "eval", "babble"]);
    let voices: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(110.0..260.0),
                rng.gen_range(2.0..6.0),
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let babble = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            voices
                .iter()
                .map(|&(f0, am, ph)| {
                    let env = 0.5 + 0.5 * (2.0 * PI * am * t + ph).sin();
                    let f = f0 * (1.0 + 0.05 * (2.0 * PI * 0.7 * t + ph).sin());
                    env * (1..=12)
                        .map(|h| (2.0 * PI * f * h as f64 * t).sin() / h as f64)
                        .sum::<f64>()
                })
                .sum::<f64>()
        })
        .collect();
    entries.push(("eval_babble".to_string(), babble));

    let entries = entries
        .into_iter()
        .map(|(id, x)| Ok((id, Waveform::new(normalize_peak(x, 0.5), sample_rate_hz)?)))
        .collect::<Result<Vec<_>>>()?;
    NoiseBank::new(entries, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn wave(rng: &mut ChaCha8Rng, n: usize) -> Waveform {
        Waveform::new(white(rng, n), 16_000).unwrap()
    }

    #[test]
    fn alpha_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = wave(&mut rng, 1000);
        let n = c.scaled(-1.0);
        assert!((scale_for_snr(&c, &n, 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((scale_for_snr(&c, &n, 20.0).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn silent_inputs_are_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = wave(&mut rng, 100);
        let z = Waveform::silence(100, 16_000).unwrap();
        assert!(matches!(scale_for_snr(&z, &c, 0.0), Err(CdtError::DegenerateInput(_))));
        assert!(matches!(scale_for_snr(&c, &z, 0.0), Err(CdtError::DegenerateInput(_))));
        assert_eq!(measure_snr(&c, &z).unwrap(), f64::INFINITY);
        assert_eq!(measure_snr(&z, &c).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn measure_snr_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = wave(&mut rng, 1000);
        assert!(measure_snr(&c, &c).unwrap().abs() < 1e-12);
        assert!((measure_snr(&c, &c.scaled(0.1)).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn mix_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = wave(&mut rng, 1000);
        let m = mix(&c, &c, f64::INFINITY, &mut rng).unwrap();
        assert_eq!(m.noisy, c);
        let m = mix(&c, &c, 0.0, &mut rng).unwrap();
        for (a, b) in m.noisy.samples().iter().zip(c.samples()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
        assert!(m.exceeds_unit_range || m.noisy.peak() <= 1.0);
    }

    #[test]
    fn short_noise_is_tiled_long_noise_cropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let short = wave(&mut rng, 30);
        let (t, off) = fit_noise_length(&short, 100, &mut rng);
        assert_eq!(off, 0);
        assert_eq!(t.samples()[37], short.samples()[7]);
        let long = wave(&mut rng, 500);
        let (c, off) = fit_noise_length(&long, 100, &mut rng);
        assert_eq!(c.samples(), &long.samples()[off..off + 100]);
    }

    #[test]
    fn snr_sampling() {
        let spec = SnrSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let draws: Vec<f64> = (0..10_000).map(|_| sample_snr(&spec, &mut rng)).collect();
        assert!(draws.iter().all(|d| (0.0..=20.0).contains(d)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 10.0).abs() < 0.5, "mean {mean}");
        let fixed = SnrSpec::new(5.0, 5.0).unwrap();
        assert!((0..100).all(|_| sample_snr(&fixed, &mut rng) == 5.0));
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let xa: Vec<f64> = (0..50).map(|_| sample_snr(&spec, &mut a)).collect();
        let xb: Vec<f64> = (0..50).map(|_| sample_snr(&spec, &mut b)).collect();
        assert_eq!(xa, xb);
        assert!(SnrSpec::new(3.0, 1.0).is_err());
    }

    #[test]
    fn banks_are_disjoint_and_non_silent() {
        let train = training_noise_bank(16_000, 1.0, 7).unwrap();
        let eval = evaluation_noise_bank(16_000, 1.0, 7).unwrap();
        assert!(train.entries.iter().all(|(_, w)| w.rms() > 0.0));
        assert!(eval.entries.iter().all(|(_, w)| w.rms() > 0.0));
        for id in train.ids() {
            assert!(!eval.ids().contains(&id));
        }
    }

    #[test]
    fn bank_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bank = evaluation_noise_bank(16_000, 0.5, 3).unwrap();
        let path = bank.save(dir.path(), "noise_eval").unwrap();
        let back = NoiseBank::load(&path, 3).unwrap();
        assert_eq!(back.ids(), bank.ids());
    }

    #[test]
    fn silent_noise_rejected_by_bank() {
        let z = Waveform::silence(10, 16_000).unwrap();
        assert!(NoiseBank::new(vec![("z".into(), z)], 0).is_err());
    }
}
