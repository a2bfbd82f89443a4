//! System-level evaluation: seeded cross-speaker pairs, unseen-noise
//! degradation of the source, conversion, and CER/SECS aggregation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{cer, mean_std, secs, Recognizer};
use crate::audio::{MelConfig, Waveform};
use crate::corpus::{parse_tokens, Manifest};
use crate::degradation::{NoiseBank, SnrSpec};
use crate::error::{CdtError, Result};
use crate::rng::derived_rng;
use crate::training::{build_pair, noise_banks, TrainedModel};

pub const REPORT_FILE: &str = "report.json";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const TABLE_FILE: &str = "report.txt";
pub const IDENTITY_SYSTEM: &str = "identity";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub utterance_id: String,
    pub speaker_id: String,
    pub tokens: Vec<usize>,
    pub waveform: Waveform,
}

pub fn load_eval_items(manifest: &Manifest, sample_rate_hz: u32) -> Result<Vec<EvalItem>> {
    let audio = manifest.load_audio(sample_rate_hz)?;
    manifest
        .entries
        .iter()
        .zip(audio)
        .map(|(e, waveform)| {
            Ok(EvalItem {
                utterance_id: e.utterance_id.clone(),
                speaker_id: e.speaker_id.clone(),
                tokens: parse_tokens(&e.tokens)?,
                waveform,
            })
        })
        .collect()
}

/// `n` distinct ordered (source, target) index pairs with different speakers.
pub fn sample_pairs(items: &[EvalItem], n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let mut all: Vec<(usize, usize)> = (0..items.len())
        .flat_map(|i| (0..items.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| items[i].speaker_id != items[j].speaker_id)
        .collect();
    if n > all.len() {
        return Err(CdtError::Argument(format!(
            "{n} pairs requested, only {} cross-speaker pairs exist",
            all.len()
        )));
    }
    all.shuffle(&mut derived_rng(seed, &["eval-pairs"]));
    all.truncate(n);
    Ok(all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: usize,
    pub source_id: String,
    pub target_id: String,
    pub noise_id: String,
    pub snr_db: f64,
    pub cer: f64,
    pub secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSummary {
    pub system: String,
    pub n_pairs: usize,
    pub cer_mean: f64,
    pub secs_mean: f64,
    pub secs_std: f64,
}

impl SystemSummary {
    fn from_records(system: &str, rows: &[PairRecord]) -> Self {
        let cers: Vec<f64> = rows.iter().map(|r| r.cer).collect();
        let secs: Vec<f64> = rows.iter().map(|r| r.secs).collect();
        let (secs_mean, secs_std) = mean_std(&secs);
        Self {
            system: system.to_string(),
            n_pairs: rows.len(),
            cer_mean: mean_std(&cers).0,
            secs_mean,
            secs_std,
        }
    }
}

/// Converted system plus the identity baseline on the same degraded pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub system: SystemSummary,
    pub identity: SystemSummary,
    #[serde(skip)]
    pub pairs: Vec<PairRecord>,
    #[serde(skip)]
    pub identity_pairs: Vec<PairRecord>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        comparison_table(&[self.identity.clone(), self.system.clone()])
    }

    /// Writes `report.json`, `report.txt`, and one `pairs.jsonl` line per pair
    /// (identity baseline rows carry `"system": "identity"`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CdtError::io(dir, e))?;
        let p = dir.join(REPORT_FILE);
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&p, json + "\n").map_err(|e| CdtError::io(&p, e))?;
        let p = dir.join(TABLE_FILE);
        fs::write(&p, self.table()).map_err(|e| CdtError::io(&p, e))?;
        let mut lines = String::new();
        for (system, rows) in [(&self.system.system, &self.pairs), (&IDENTITY_SYSTEM.to_string(), &self.identity_pairs)] {
            for r in rows.iter() {
                let mut v = serde_json::to_value(r).expect("record serializes");
                v["system"] = serde_json::Value::String(system.clone());
                lines.push_str(&v.to_string());
                lines.push('\n');
            }
        }
        let p = dir.join(PAIRS_FILE);
        fs::write(&p, lines).map_err(|e| CdtError::io(&p, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CdtError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CdtError::Format(format!("{}: {e}", path.display())))
    }
}

/// CER (%) and SECS (std) per system, one row each.
pub fn comparison_table(rows: &[SystemSummary]) -> String {
    let width = rows.iter().map(|r| r.system.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    writeln!(out, "{:<width$}  {:>7}  {:>15}  {:>5}", "Method", "CER (%)", "SECS (std)", "pairs").unwrap();
    for r in rows {
        writeln!(
            out,
            "{:<width$}  {:>7.2}  {:>6.3} ({:>6.3})  {:>5}",
            r.system,
            100.0 * r.cer_mean,
            r.secs_mean,
            r.secs_std,
            r.n_pairs
        )
        .unwrap();
    }
    out
}

/// Anything that maps a (degraded source, clean target) pair to speech.
pub trait Converter {
    fn name(&self) -> String;
    fn convert(&self, source: &Waveform, target: &Waveform) -> Result<Waveform>;
}

impl Converter for TrainedModel {
    fn name(&self) -> String {
        self.variant().to_string()
    }

    fn convert(&self, source: &Waveform, target: &Waveform) -> Result<Waveform> {
        Ok(TrainedModel::convert(self, source, target)?.waveform)
    }
}

/// Resynthesizes the source's own mel: the recognizer's floor on degraded
/// input through the same phase reconstruction.
#[derive(Debug, Clone)]
pub struct IdentityConverter {
    pub mel: MelConfig,
}

impl Converter for IdentityConverter {
    fn name(&self) -> String {
        IDENTITY_SYSTEM.into()
    }

    fn convert(&self, source: &Waveform, _target: &Waveform) -> Result<Waveform> {
        self.mel.reconstruct(&self.mel.compute(source), self.mel.gl_iterations)
    }
}

/// Degrades each sampled source with `bank` and scores `system` and the
/// identity baseline on identical inputs.
pub fn evaluate_pairs(
    system: &dyn Converter,
    mel: &MelConfig,
    items: &[EvalItem],
    n_pairs: usize,
    seed: u64,
    bank: &NoiseBank,
    snr: &SnrSpec,
) -> Result<EvalReport> {
    let pairs = sample_pairs(items, n_pairs, seed)?;
    let recognizer = Recognizer::default();
    let identity = IdentityConverter { mel: mel.clone() };
    let mut rows = Vec::with_capacity(n_pairs);
    let mut id_rows = Vec::with_capacity(n_pairs);
    for (pair_id, &(s, t)) in pairs.iter().enumerate() {
        let (src, tgt) = (&items[s], &items[t]);
        let mut rng = derived_rng(seed, &["eval-noise", &pair_id.to_string()]);
        let pair = build_pair(&src.waveform, bank, snr, mel, &mut rng)?;
        for (conv, out) in [(system, &mut rows), (&identity as &dyn Converter, &mut id_rows)] {
            let speech = conv.convert(&pair.noisy_source, &tgt.waveform)?;
            let hyp = recognizer.recognize(&speech);
            out.push(PairRecord {
                pair_id,
                source_id: src.utterance_id.clone(),
                target_id: tgt.utterance_id.clone(),
                noise_id: pair.noise_id.clone(),
                snr_db: pair.snr_db,
                cer: cer(&src.tokens, &hyp)?,
                // A silent conversion has no speaker identity at all.
                secs: secs(&speech, &tgt.waveform).unwrap_or(0.0),
            });
        }
    }
    Ok(EvalReport {
        seed,
        system: SystemSummary::from_records(&system.name(), &rows),
        identity: SystemSummary::from_records(IDENTITY_SYSTEM, &id_rows),
        pairs: rows,
        identity_pairs: id_rows,
    })
}

/// Evaluates a trained model on speakers it never saw, with the run's unseen
/// noise bank.
pub fn evaluate_system(model: &TrainedModel, eval: &Manifest, n_pairs: usize, seed: u64) -> Result<EvalReport> {
    let seen: Vec<String> = eval
        .speakers()
        .into_iter()
        .filter(|s| model.train_speakers.contains(s))
        .collect();
    if !seen.is_empty() {
        return Err(CdtError::Validation(format!(
            "evaluation speakers were seen in training: {}",
            seen.join(", ")
        )));
    }
    let cfg = &model.config;
    let items = load_eval_items(eval, cfg.audio.sample_rate_hz)?;
    let (_, unseen) = noise_banks(cfg)?;
    evaluate_pairs(model, &cfg.audio, &items, n_pairs, seed, &unseen, &cfg.degradation.snr_spec()?)
}
