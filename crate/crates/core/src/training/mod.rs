//! Denoising training loop: pseudo-noisy source / clean target pairs, frozen
//! feature extraction, AdamW steps, periodic validation with early stopping,
//! and checkpointing. Conversion with a trained checkpoint lives here too.

mod config;

pub use config::{ConditioningConfig, DegradationConfig, OptimizerConfig, RunConfig, RunSection};

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_track, Interpolation};
use crate::audio::{MelConfig, MelSpectrogram, Waveform};
use crate::conditioning::{ContentExtractor, QualityExtractor, SceneExtractor, QUALITY_DIM, SCENE_DIM};
use crate::corpus::{assert_disjoint, Manifest};
use crate::degradation::{
    evaluation_noise_bank, mix, sample_snr, training_noise_bank, NoiseBank, SnrSpec,
};
use crate::error::{CdtError, Result};
use crate::impl_tensors;
use crate::nn::Tensors;
use crate::rng::derived_rng;
use crate::vcmodel::checkpoint::Checkpoint;
use crate::vcmodel::{batch_loss, gradients, Example, LossValue, ModelParams, ModelTensors, SourceFeatures, Variant};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Pseudo-noisy source with its clean counterpart, which doubles as the target.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub noisy_source: Waveform,
    pub clean: Waveform,
    pub ground_truth_mel: MelSpectrogram,
    pub snr_db: f64,
    pub noise_id: String,
}

/// Draws a noise uniformly from `bank` and an SNR from `snr`, then mixes.
/// The noise is drawn even for a clean spec so the stream layout stays fixed.
pub fn build_pair<R: Rng>(
    clean: &Waveform,
    bank: &NoiseBank,
    snr: &SnrSpec,
    mel: &MelConfig,
    rng: &mut R,
) -> Result<TrainingPair> {
    if bank.is_empty() {
        return Err(CdtError::Argument("noise bank is empty".into()));
    }
    if !(clean.rms() > 0.0) {
        return Err(CdtError::DegenerateInput("clean utterance is silent".into()));
    }
    let (noise_id, noise) = &bank.entries[rng.gen_range(0..bank.len())];
    let snr_db = sample_snr(snr, rng);
    let m = mix(clean, noise, snr_db, rng)?;
    Ok(TrainingPair {
        noisy_source: m.noisy,
        clean: clean.clone(),
        ground_truth_mel: mel.compute(clean),
        snr_db,
        noise_id: if snr.is_clean() { "clean".into() } else { noise_id.clone() },
    })
}

/// Frozen per-dimension affine map on the aligned quality and scene tracks.
/// Each dimension is centered and divided by `std * sqrt(dim)`, so a track row
/// has unit expected squared norm, like a content row.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionNorm {
    pub quality_mean: Array2<f64>,
    pub quality_scale: Array2<f64>,
    pub scene_mean: Array2<f64>,
    pub scene_scale: Array2<f64>,
}

impl_tensors!(ConditionNorm { quality_mean, quality_scale, scene_mean, scene_scale });

const NORM_PREFIX: &str = "cond_norm";

/// Standard deviations below this are treated as this, so a dimension that is
/// nearly constant in training cannot blow up at inference.
const MIN_STD: f64 = 1e-3;

impl ConditionNorm {
    /// The identity map, also the shape template for restoring from a checkpoint.
    pub fn identity() -> Self {
        Self {
            quality_mean: Array2::zeros((1, QUALITY_DIM)),
            quality_scale: Array2::ones((1, QUALITY_DIM)),
            scene_mean: Array2::zeros((1, SCENE_DIM)),
            scene_scale: Array2::ones((1, SCENE_DIM)),
        }
    }

    /// Statistics over every row of the given aligned tracks.
    pub fn fit(sources: &[SourceFeatures]) -> Result<Self> {
        let stack = |pick: fn(&SourceFeatures) -> Option<&Array2<f64>>| -> Result<(Array2<f64>, Array2<f64>)> {
            let views: Vec<_> = sources.iter().filter_map(|s| pick(s).map(|a| a.view())).collect();
            if views.is_empty() || views.len() != sources.len() {
                return Err(CdtError::Argument("condition statistics need conditioned sources".into()));
            }
            let all = ndarray::concatenate(ndarray::Axis(0), &views)
                .map_err(|e| CdtError::Shape(format!("condition tracks: {e}")))?;
            let mean = all.mean_axis(ndarray::Axis(0)).expect("non-empty").insert_axis(ndarray::Axis(0));
            let std = all.std_axis(ndarray::Axis(0), 0.0).insert_axis(ndarray::Axis(0));
            let root_dim = (all.ncols() as f64).sqrt();
            Ok((mean, std.mapv(|s| 1.0 / (s.max(MIN_STD) * root_dim))))
        };
        let (quality_mean, quality_scale) = stack(|s| s.quality.as_ref())?;
        let (scene_mean, scene_scale) = stack(|s| s.scene.as_ref())?;
        Ok(Self {
            quality_mean,
            quality_scale,
            scene_mean,
            scene_scale,
        })
    }

    pub fn apply(&self, src: &mut SourceFeatures) {
        if let Some(q) = src.quality.as_mut() {
            *q -= &self.quality_mean;
            *q *= &self.quality_scale;
        }
        if let Some(s) = src.scene.as_mut() {
            *s -= &self.scene_mean;
            *s *= &self.scene_scale;
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Option<Self>> {
        if !ck.has_prefix(NORM_PREFIX) {
            return Ok(None);
        }
        let mut n = Self::identity();
        ck.restore(NORM_PREFIX, &mut n)?;
        Ok(Some(n))
    }
}

/// The frozen extractors plus alignment, producing model inputs on the
/// content frame grid.
#[derive(Debug, Clone)]
pub struct FeaturePipeline {
    pub variant: Variant,
    pub interpolation: Interpolation,
    /// Applied to conditioned sources after alignment when set.
    pub norm: Option<ConditionNorm>,
    content: ContentExtractor,
    quality: QualityExtractor,
    scene: SceneExtractor,
}

impl FeaturePipeline {
    pub fn new(mel: MelConfig, variant: Variant, interpolation: Interpolation) -> Self {
        Self {
            variant,
            interpolation,
            norm: None,
            content: ContentExtractor::new(mel),
            quality: QualityExtractor::default(),
            scene: SceneExtractor::default(),
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        Self::new(cfg.audio.clone(), cfg.variant(), cfg.conditioning.interpolation)
    }

    pub fn mel(&self) -> &MelConfig {
        self.content.mel_config()
    }

    fn source_from_mel(&self, w: &Waveform, mel: &Array2<f64>) -> Result<SourceFeatures> {
        let content = self.content.from_mel(mel, w.len()).values;
        let Variant::Conditioned { quality, scene } = self.variant else {
            return Ok(SourceFeatures::unconditioned(content));
        };
        let t = content.nrows();
        let hop = self.mel().hop_ms;
        let q = align_track(&self.quality.track(w, quality), t, hop, self.interpolation)?;
        let s = align_track(&self.scene.track(w, scene), t, hop, self.interpolation)?;
        let mut src = SourceFeatures {
            content,
            quality: Some(q),
            scene: Some(s),
        };
        if let Some(n) = &self.norm {
            n.apply(&mut src);
        }
        Ok(src)
    }

    /// Content plus, for conditioned variants, aligned quality and scene tracks.
    pub fn source_features(&self, w: &Waveform) -> Result<SourceFeatures> {
        self.source_from_mel(w, &self.mel().compute(w).values)
    }

    pub fn target_content(&self, w: &Waveform) -> Array2<f64> {
        self.content.track(w).values
    }

    pub fn example(&self, pair: &TrainingPair) -> Result<Example> {
        let gt = &pair.ground_truth_mel.values;
        Ok(Example {
            source: self.source_features(&pair.noisy_source)?,
            target_content: self.content.from_mel(gt, pair.clean.len()).values,
            target_mel: gt.clone(),
        })
    }
}

/// Parameters, AdamW moments, and the early-stopping bookkeeping. Random
/// streams are keyed by `(seed, step)`, so the seed is the whole rng state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub m: ModelTensors,
    pub v: ModelTensors,
    pub step: u64,
    pub best_valid_loss: f64,
    pub patience: u32,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: ModelParams, seed: u64) -> Self {
        let m = params.zero_tensors();
        let v = params.zero_tensors();
        Self {
            params,
            m,
            v,
            step: 0,
            best_valid_loss: f64::INFINITY,
            patience: 0,
            seed,
        }
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig, train_speakers: &[String], norm: Option<&ConditionNorm>) -> Checkpoint {
        let mut ck = Checkpoint {
            config_toml: cfg.to_toml(),
            train_speakers: train_speakers.to_vec(),
            step: self.step,
            rng_seed: self.seed,
            best_valid_loss: self.best_valid_loss,
            patience: self.patience,
            tensors: BTreeMap::new(),
        };
        ck.store("model", &self.params.tensors);
        ck.store("adam.m", &self.m);
        ck.store("adam.v", &self.v);
        if let Some(n) = norm {
            ck.store(NORM_PREFIX, n);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &RunConfig) -> Result<Self> {
        let mut params = ModelParams::init(&cfg.model_config(), ck.rng_seed)?;
        ck.restore("model", &mut params.tensors)?;
        let mut state = TrainState::new(params, ck.rng_seed);
        if ck.has_prefix("adam.m") {
            ck.restore("adam.m", &mut state.m)?;
            ck.restore("adam.v", &mut state.v)?;
        }
        state.step = ck.step;
        state.best_valid_loss = ck.best_valid_loss;
        state.patience = ck.patience;
        Ok(state)
    }
}

/// One AdamW update with bias correction at step `t` (1-based). Weight decay is
/// decoupled from the moment estimates and applies to every tensor.
pub fn adamw_update(
    params: &mut ModelTensors,
    m: &mut ModelTensors,
    v: &mut ModelTensors,
    grads: &ModelTensors,
    t: u64,
    opt: &OptimizerConfig,
) -> Result<()> {
    let g = grads.named();
    if let Some((name, _)) = g.iter().find(|(_, a)| a.iter().any(|x| !x.is_finite())) {
        return Err(CdtError::Numeric { layer: name.clone() });
    }
    let c1 = 1.0 - opt.beta1.powi(t as i32);
    let c2 = 1.0 - opt.beta2.powi(t as i32);
    for (((_, p), (_, m)), ((_, v), (_, g))) in params
        .named_mut()
        .into_iter()
        .zip(m.named_mut())
        .zip(v.named_mut().into_iter().zip(g))
    {
        ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
            let adam = (*m / c1) / ((*v / c2).sqrt() + opt.eps);
            *p -= opt.lr * (adam + opt.weight_decay * *p);
        });
    }
    Ok(())
}

/// Gradient step on one batch. On a non-finite loss or gradient the state is
/// left untouched and the error names the offending tensor.
pub fn training_step(state: &mut TrainState, batch: &[Example], opt: &OptimizerConfig) -> Result<LossValue> {
    let (g, loss) = gradients(&state.params, batch)?;
    let t = state.step + 1;
    let mut params = state.params.tensors.clone();
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    adamw_update(&mut params, &mut m, &mut v, &g, t, opt)?;
    state.params.tensors = params;
    state.m = m;
    state.v = v;
    state.step = t;
    Ok(loss)
}

/// Deterministic metrics log record; wall time goes to a separate file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Train {
        step: u64,
        epoch: u64,
        train_loss: f64,
    },
    Valid {
        step: u64,
        valid_loss: f64,
        valid_unseen_loss: f64,
        best_valid_loss: f64,
        patience: u32,
        improved: bool,
    },
    Stop {
        step: u64,
        reason: String,
    },
}

impl MetricRecord {
    pub fn step(&self) -> u64 {
        match self {
            Self::Train { step, .. } | Self::Valid { step, .. } | Self::Stop { step, .. } => *step,
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = fs::File::open(path).map_err(|e| CdtError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CdtError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CdtError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Clean training audio plus the held-out validation audio.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub train: Vec<Waveform>,
    pub train_speakers: Vec<String>,
    pub valid: Vec<Waveform>,
}

impl TrainingData {
    pub fn from_manifests(train: &Path, valid: &Path, sample_rate_hz: u32) -> Result<Self> {
        let tm = Manifest::load(train)?;
        let vm = Manifest::load(valid)?;
        assert_disjoint(&tm, &vm, "training and validation")?;
        if tm.is_empty() || vm.is_empty() {
            return Err(CdtError::Argument("training and validation manifests must be non-empty".into()));
        }
        Ok(Self {
            train: tm.load_audio(sample_rate_hz)?,
            train_speakers: tm.speakers().into_iter().collect(),
            valid: vm.load_audio(sample_rate_hz)?,
        })
    }
}

/// The training (seen) and evaluation (unseen) noise banks for a run.
pub fn noise_banks(cfg: &RunConfig) -> Result<(NoiseBank, NoiseBank)> {
    let sr = cfg.audio.sample_rate_hz;
    let d = &cfg.degradation;
    let seed = cfg.run.seed;
    let train = if d.train_noise_manifest.is_empty() {
        training_noise_bank(sr, d.noise_seconds, seed)?
    } else {
        NoiseBank::load(&d.train_noise_manifest, seed)?
    };
    let eval = if d.eval_noise_manifest.is_empty() {
        evaluation_noise_bank(sr, d.noise_seconds, seed)?
    } else {
        NoiseBank::load(&d.eval_noise_manifest, seed)?
    };
    Ok((train, eval))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub steps: u64,
    pub best_valid_loss: f64,
    pub stopped_early: bool,
}

fn fixed_examples(
    pipeline: &FeaturePipeline,
    audio: &[Waveform],
    bank: &NoiseBank,
    snr: &SnrSpec,
    seed: u64,
    label: &str,
) -> Result<Vec<Example>> {
    audio
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let mut rng = derived_rng(seed, &[label, &i.to_string()]);
            pipeline.example(&build_pair(w, bank, snr, pipeline.mel(), &mut rng)?)
        })
        .collect()
}

/// Utterance order for one epoch.
fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, &["perm", &epoch.to_string()]));
    order
}

struct Logs {
    metrics: BufWriter<fs::File>,
    timing: BufWriter<fs::File>,
    metrics_path: PathBuf,
    timing_path: PathBuf,
}

impl Logs {
    /// Opens both logs, keeping only records up to `keep_through` (a resumed
    /// step) or starting empty.
    fn open(dir: &Path, keep_through: Option<u64>) -> Result<Self> {
        let metrics_path = dir.join(METRICS_FILE);
        let timing_path = dir.join(TIMING_FILE);
        let mut kept = Vec::new();
        if let Some(s) = keep_through.filter(|_| metrics_path.exists()) {
            let text = fs::read_to_string(&metrics_path).map_err(|e| CdtError::io(&metrics_path, e))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let r: MetricRecord = serde_json::from_str(line)
                    .map_err(|e| CdtError::Format(format!("{}: {e}", metrics_path.display())))?;
                if r.step() <= s && !matches!(r, MetricRecord::Stop { .. }) {
                    kept.push(line.to_string());
                }
            }
        }
        let f = fs::File::create(&metrics_path).map_err(|e| CdtError::io(&metrics_path, e))?;
        let mut metrics = BufWriter::new(f);
        for line in &kept {
            writeln!(metrics, "{line}").map_err(|e| CdtError::io(&metrics_path, e))?;
        }
        let t = fs::OpenOptions::new()
            .create(true)
            .append(keep_through.is_some())
            .write(true)
            .truncate(keep_through.is_none())
            .open(&timing_path)
            .map_err(|e| CdtError::io(&timing_path, e))?;
        Ok(Self {
            metrics,
            timing: BufWriter::new(t),
            metrics_path,
            timing_path,
        })
    }

    fn record(&mut self, r: &MetricRecord) -> Result<()> {
        writeln!(self.metrics, "{}", serde_json::to_string(r).expect("record serializes"))
            .map_err(|e| CdtError::io(&self.metrics_path, e))
    }

    fn time(&mut self, step: u64, elapsed_s: f64) -> Result<()> {
        writeln!(self.timing, "{}", serde_json::json!({ "step": step, "elapsed_s": elapsed_s }))
            .map_err(|e| CdtError::io(&self.timing_path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush().map_err(|e| CdtError::io(&self.metrics_path, e))?;
        self.timing.flush().map_err(|e| CdtError::io(&self.timing_path, e))
    }
}

/// Trains from the manifests named in `cfg.run`.
pub fn fit(cfg: &RunConfig, run_dir: &Path, resume: bool) -> Result<FitOutcome> {
    let data = TrainingData::from_manifests(
        &cfg.train_manifest()?,
        &cfg.valid_manifest()?,
        cfg.audio.sample_rate_hz,
    )?;
    fit_data(cfg, &data, run_dir, resume)
}

/// Trains on in-memory audio. Example `g = step * batch_size + j` is utterance
/// `perm_e[g mod N]` of epoch `e = g div N`, mixed with noise drawn from a
/// stream keyed by `(epoch, utterance)`; validation pairs are fixed for the
/// run. With `resume`, training continues from `last.ckpt` when present.
pub fn fit_data(cfg: &RunConfig, data: &TrainingData, run_dir: &Path, resume: bool) -> Result<FitOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(CdtError::Argument("training and validation sets must be non-empty".into()));
    }
    fs::create_dir_all(run_dir).map_err(|e| CdtError::io(run_dir, e))?;
    cfg.save(&run_dir.join(CONFIG_FILE))?;
    let best_path = run_dir.join(BEST_CHECKPOINT);
    let last_path = run_dir.join(LAST_CHECKPOINT);

    let seed = cfg.run.seed;
    let mut pipeline = FeaturePipeline::from_config(cfg);
    let snr = cfg.degradation.snr_spec()?;
    let (train_bank, eval_bank) = noise_banks(cfg)?;
    let mut state = if resume && last_path.exists() {
        let ck = Checkpoint::load(&last_path)?;
        if ck.config_toml != cfg.to_toml() {
            return Err(CdtError::Validation(format!(
                "{} was written with a different configuration",
                last_path.display()
            )));
        }
        pipeline.norm = ConditionNorm::from_checkpoint(&ck)?;
        TrainState::from_checkpoint(&ck, cfg)?
    } else {
        for p in [&best_path, &last_path] {
            if p.exists() {
                fs::remove_file(p).map_err(|e| CdtError::io(p, e))?;
            }
        }
        TrainState::new(ModelParams::init(&cfg.model_config(), seed)?, seed)
    };
    if cfg.variant().is_conditioned() && pipeline.norm.is_none() {
        // Fitted on exactly the sources of the first epoch.
        let mut sources = Vec::with_capacity(data.train.len());
        for (utt, w) in data.train.iter().enumerate() {
            let mut rng = derived_rng(seed, &["pair", "0", &utt.to_string()]);
            let pair = build_pair(w, &train_bank, &snr, pipeline.mel(), &mut rng)?;
            sources.push(pipeline.source_features(&pair.noisy_source)?);
        }
        pipeline.norm = Some(ConditionNorm::fit(&sources)?);
    }
    let mut logs = Logs::open(run_dir, (state.step > 0).then_some(state.step))?;
    let valid = fixed_examples(&pipeline, &data.valid, &train_bank, &snr, seed, "valid")?;
    let valid_unseen = fixed_examples(&pipeline, &data.valid, &eval_bank, &snr, seed, "valid-unseen")?;

    let n = data.train.len() as u64;
    let b = cfg.optimizer.batch_size as u64;
    let started = Instant::now();
    let mut order: Option<(u64, Vec<usize>)> = None;
    let mut stopped_early = state.patience >= cfg.run.patience && state.step > 0;

    while !stopped_early && state.step < cfg.run.max_steps {
        let mut batch = Vec::with_capacity(b as usize);
        let mut epoch = 0;
        for j in 0..b {
            let g = state.step * b + j;
            epoch = g / n;
            if order.as_ref().map(|(e, _)| *e) != Some(epoch) {
                order = Some((epoch, epoch_order(seed, epoch, n as usize)));
            }
            let utt = order.as_ref().expect("order set above").1[(g % n) as usize];
            let mut rng = derived_rng(seed, &["pair", &epoch.to_string(), &utt.to_string()]);
            let pair = build_pair(&data.train[utt], &train_bank, &snr, pipeline.mel(), &mut rng)?;
            batch.push(pipeline.example(&pair)?);
        }
        let loss = training_step(&mut state, &batch, &cfg.optimizer)?;
        logs.record(&MetricRecord::Train {
            step: state.step,
            epoch,
            train_loss: loss.value,
        })?;

        if state.step % cfg.run.valid_every == 0 || state.step == cfg.run.max_steps {
            let vl = batch_loss(&state.params, &valid)?.value;
            let vu = batch_loss(&state.params, &valid_unseen)?.value;
            let improved = vl < state.best_valid_loss - cfg.run.min_delta;
            if improved {
                state.best_valid_loss = vl;
                state.patience = 0;
            } else {
                state.patience += 1;
            }
            logs.record(&MetricRecord::Valid {
                step: state.step,
                valid_loss: vl,
                valid_unseen_loss: vu,
                best_valid_loss: state.best_valid_loss,
                patience: state.patience,
                improved,
            })?;
            logs.time(state.step, started.elapsed().as_secs_f64())?;
            logs.flush()?;
            let ck = state.to_checkpoint(cfg, &data.train_speakers, pipeline.norm.as_ref());
            if improved {
                ck.save(&best_path)?;
            }
            ck.save(&last_path)?;
            if state.patience >= cfg.run.patience {
                stopped_early = true;
                logs.record(&MetricRecord::Stop {
                    step: state.step,
                    reason: format!("no improvement in {} validations", state.patience),
                })?;
            }
        }
    }
    if !stopped_early {
        logs.record(&MetricRecord::Stop {
            step: state.step,
            reason: "max_steps reached".into(),
        })?;
    }
    logs.flush()?;
    let ck = state.to_checkpoint(cfg, &data.train_speakers, pipeline.norm.as_ref());
    ck.save(&last_path)?;
    if !best_path.exists() {
        ck.save(&best_path)?;
    }
    Ok(FitOutcome {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        metrics_path: logs.metrics_path.clone(),
        steps: state.step,
        best_valid_loss: state.best_valid_loss,
        stopped_early,
    })
}

/// A checkpoint ready for inference.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: RunConfig,
    pub params: ModelParams,
    pub pipeline: FeaturePipeline,
    pub train_speakers: Vec<String>,
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct Conversion {
    pub mel: MelSpectrogram,
    pub waveform: Waveform,
}

impl TrainedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let config = RunConfig::from_toml(&ck.config_toml)?;
        let mut params = ModelParams::init(&config.model_config(), ck.rng_seed)?;
        ck.restore("model", &mut params.tensors)?;
        let mut pipeline = FeaturePipeline::from_config(&config);
        pipeline.norm = ConditionNorm::from_checkpoint(&ck)?;
        Ok(Self {
            pipeline,
            config,
            params,
            train_speakers: ck.train_speakers,
            step: ck.step,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant()
    }

    /// Fails unless `requested` (when given) is the variant the model was trained with.
    pub fn check_variant(&self, requested: Option<Variant>) -> Result<()> {
        match requested {
            Some(v) if v != self.variant() => Err(CdtError::Validation(format!(
                "checkpoint was trained as `{}`, conditioning `{v}` requested",
                self.variant()
            ))),
            _ => Ok(()),
        }
    }

    pub fn convert_mel(&self, source: &Waveform, target: &Waveform) -> Result<MelSpectrogram> {
        let src = self.pipeline.source_features(source)?;
        let tgt = self.pipeline.target_content(target);
        self.params.predict_mel(&src, tgt.view(), self.pipeline.mel())
    }

    pub fn convert(&self, source: &Waveform, target: &Waveform) -> Result<Conversion> {
        let mel = self.convert_mel(source, target)?;
        let a = &self.config.audio;
        let waveform = a.reconstruct(&mel, a.gl_iterations)?;
        Ok(Conversion { mel, waveform })
    }
}

pub fn convert(
    checkpoint: &Path,
    source: &Waveform,
    target: &Waveform,
    conditioning: Option<Variant>,
) -> Result<Conversion> {
    let model = TrainedModel::load(checkpoint)?;
    model.check_variant(conditioning)?;
    model.convert(source, target)
}
