//! Any-to-any conversion network: a source encoder over (optionally
//! conditioned) content features, a target encoder over the target's content
//! features, multi-head cross-attention from source frames to target frames,
//! and a convolutional decoder predicting log-mel frames.
//!
//! The attention output is added to the source stream, as in a pre-norm
//! transformer decoder layer.

pub mod checkpoint;

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::alignment::{
    project_and_concat, project_and_concat_backward, project_input_grads, ProjectionParams, CONDITIONED_WIDTH,
};
use crate::audio::{MelConfig, MelSpectrogram};
use crate::conditioning::{CondMode, CONTENT_DIM};
use crate::error::{CdtError, Result};
use crate::impl_tensors;
use crate::nn::{
    check_finite, relu, relu_backward, uniform, AttnCache, Attention, Conv1d, LayerNorm, Linear, LnCache, Tensors,
};

/// Which latent tracks condition the source encoder, written `<quality>-<scene>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Variant {
    /// Plain denoising training: content features only.
    #[default]
    Unconditioned,
    Conditioned { quality: CondMode, scene: CondMode },
}

impl Variant {
    pub const ALL: [&'static str; 5] = ["none-none", "uw-uw", "uw-fw", "fw-uw", "fw-fw"];

    pub fn is_conditioned(self) -> bool {
        matches!(self, Variant::Conditioned { .. })
    }

    pub fn source_width(self) -> usize {
        if self.is_conditioned() {
            CONDITIONED_WIDTH
        } else {
            CONTENT_DIM
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Unconditioned => f.write_str("none-none"),
            Variant::Conditioned { quality, scene } => write!(f, "{}-{}", quality.short(), scene.short()),
        }
    }
}

impl FromStr for Variant {
    type Err = CdtError;

    fn from_str(s: &str) -> Result<Self> {
        let mode = |m: &str| match m {
            "uw" => Some(CondMode::Utterance),
            "fw" => Some(CondMode::Frame),
            _ => None,
        };
        if s == "none-none" {
            return Ok(Variant::Unconditioned);
        }
        match s.split_once('-').map(|(q, sc)| (mode(q), mode(sc))) {
            Some((Some(quality), Some(scene))) => Ok(Variant::Conditioned { quality, scene }),
            _ => Err(CdtError::config(
                "conditioning.variant",
                format!("unknown variant `{s}`, expected one of {}", Variant::ALL.join(", ")),
            )),
        }
    }
}

impl Serialize for Variant {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_blocks: usize,
    pub n_dec_blocks: usize,
    pub n_mels: usize,
    /// Feed-forward hidden width as a multiple of `d_model`.
    pub ffn_mult: usize,
    /// Output de-normalization: `mel = head * mel_scale + mel_offset`.
    pub mel_offset: f64,
    pub mel_scale: f64,
    /// Start both projection matrices and biases at zero.
    pub zero_init_projections: bool,
    #[serde(skip)]
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            n_heads: 4,
            n_enc_blocks: 2,
            n_dec_blocks: 2,
            n_mels: 80,
            ffn_mult: 2,
            mel_offset: -9.0,
            mel_scale: 2.0,
            zero_init_projections: false,
            variant: Variant::Unconditioned,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.d_model", self.d_model),
            ("model.n_heads", self.n_heads),
            ("model.n_mels", self.n_mels),
            ("model.ffn_mult", self.ffn_mult),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(CdtError::config(field, "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(CdtError::config(
                "model.n_heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        if !(self.mel_scale.is_finite() && self.mel_scale > 0.0) {
            return Err(CdtError::config("model.mel_scale", "must be positive and finite"));
        }
        if !self.mel_offset.is_finite() {
            return Err(CdtError::config("model.mel_offset", "must be finite"));
        }
        Ok(())
    }

    pub fn source_width(&self) -> usize {
        self.variant.source_width()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl_tensors!(EncoderBlock { ln1, attn, ln2, ff1, ff2 });

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub input: Linear,
    pub norm: LayerNorm,
    pub conv: Conv1d,
    pub blocks: Vec<EncoderBlock>,
}

impl_tensors!(Encoder { input, norm, conv, blocks });

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: Attention,
}

impl_tensors!(CrossAttention { ln_q, ln_kv, attn });

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock {
    pub ln: LayerNorm,
    pub conv: Conv1d,
}

impl_tensors!(DecoderBlock { ln, conv });

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub blocks: Vec<DecoderBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl_tensors!(Decoder { blocks, norm, head });

/// Trainable tensors of the network; the same type holds gradients and
/// optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTensors {
    pub projection: Option<ProjectionParams>,
    pub source: Encoder,
    pub target: Encoder,
    pub cross: CrossAttention,
    pub decoder: Decoder,
}

impl_tensors!(ModelTensors { projection, source, target, cross, decoder });

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub init_seed: u64,
    pub tensors: ModelTensors,
}

fn encoder(seed: u64, name: &str, width: usize, cfg: &ModelConfig) -> Encoder {
    let d = cfg.d_model;
    let h = cfg.ffn_mult * d;
    let blocks = (0..cfg.n_enc_blocks)
        .map(|i| {
            let b = format!("{name}.blocks.{i}");
            EncoderBlock {
                ln1: LayerNorm::new(d),
                attn: Attention::init(seed, &format!("{b}.attn"), d),
                ln2: LayerNorm::new(d),
                ff1: Linear::init(seed, &format!("{b}.ff1"), d, h),
                ff2: Linear::init(seed, &format!("{b}.ff2"), h, d),
            }
        })
        .collect();
    Encoder {
        input: Linear::init(seed, &format!("{name}.input"), width, d),
        norm: LayerNorm::new(d),
        conv: Conv1d::init(seed, &format!("{name}.conv"), d, d),
        blocks,
    }
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let d = cfg.d_model;
        let mut source = encoder(seed, "source", CONTENT_DIM, cfg);
        let projection = if cfg.variant.is_conditioned() {
            // Content rows match the unconditioned model's; conditioning rows
            // are drawn from their own stream.
            let extra = uniform(
                seed,
                "source.input.w.conditioning",
                CONDITIONED_WIDTH - CONTENT_DIM,
                d,
                1.0 / (CONTENT_DIM as f64).sqrt(),
            );
            source.input.w = concatenate(Axis(0), &[source.input.w.view(), extra.view()]).expect("same width");
            Some(if cfg.zero_init_projections {
                ProjectionParams::zeros()
            } else {
                ProjectionParams::init(seed, "projection")
            })
        } else {
            None
        };
        let dec_blocks = (0..cfg.n_dec_blocks)
            .map(|i| DecoderBlock {
                ln: LayerNorm::new(d),
                conv: Conv1d::init(seed, &format!("decoder.blocks.{i}.conv"), d, d),
            })
            .collect();
        Ok(Self {
            config: cfg.clone(),
            init_seed: seed,
            tensors: ModelTensors {
                projection,
                source,
                target: encoder(seed, "target", CONTENT_DIM, cfg),
                cross: CrossAttention {
                    ln_q: LayerNorm::new(d),
                    ln_kv: LayerNorm::new(d),
                    attn: Attention::init(seed, "cross.attn", d),
                },
                decoder: Decoder {
                    blocks: dec_blocks,
                    norm: LayerNorm::new(d),
                    head: Linear::init(seed, "decoder.head", d, cfg.n_mels),
                },
            },
        })
    }

    pub fn n_params(&self) -> usize {
        self.tensors.n_params()
    }

    /// Zero-valued tensors shaped like this model's, for gradients and moments.
    pub fn zero_tensors(&self) -> ModelTensors {
        self.tensors.zeroed()
    }
}

/// Source-side inputs on the content frame grid. Quality and scene tracks are
/// already aligned (`[T x 64]`, `[T x 768]`) and present iff the model is conditioned.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceFeatures {
    pub content: Array2<f64>,
    pub quality: Option<Array2<f64>>,
    pub scene: Option<Array2<f64>>,
}

impl SourceFeatures {
    pub fn unconditioned(content: Array2<f64>) -> Self {
        Self {
            content,
            quality: None,
            scene: None,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.content.nrows()
    }
}

struct BlockCache {
    ln1: LnCache,
    n1: Array2<f64>,
    attn: AttnCache,
    ln2: LnCache,
    n2: Array2<f64>,
    f1: Array2<f64>,
}

struct EncoderCache {
    x: Array2<f64>,
    ln: LnCache,
    col: Array2<f64>,
    r: Array2<f64>,
    blocks: Vec<BlockCache>,
}

struct CrossCache {
    q_ln: LnCache,
    q: Array2<f64>,
    kv_ln: LnCache,
    kv: Array2<f64>,
    attn: AttnCache,
}

struct DecBlockCache {
    ln: LnCache,
    col: Array2<f64>,
    r: Array2<f64>,
}

struct DecoderCache {
    blocks: Vec<DecBlockCache>,
    ln: LnCache,
    n: Array2<f64>,
}

/// Forward activations retained for the backward pass.
pub struct Trace {
    source: SourceFeatures,
    enc_s: EncoderCache,
    enc_t: EncoderCache,
    cross: CrossCache,
    dec: DecoderCache,
    /// Unclamped predicted log-mel `[T_s x n_mels]`.
    pub output: Array2<f64>,
}

impl Trace {
    /// Cross-attention weights per head, `[T_s x T_t]` each.
    pub fn cross_attention(&self) -> &[Array2<f64>] {
        &self.cross.attn.weights
    }
}

fn encoder_forward(e: &Encoder, x: Array2<f64>, n_heads: usize, name: &str) -> Result<(Array2<f64>, EncoderCache)> {
    let h0 = e.input.forward(x.view());
    check_finite(&h0, &format!("{name}.input"))?;
    let (n0, ln) = e.norm.forward(&h0);
    let (c, col) = e.conv.forward(&n0);
    let r = relu(&c);
    let mut h = &n0 + &r;
    check_finite(&h, &format!("{name}.conv"))?;
    let mut blocks = Vec::with_capacity(e.blocks.len());
    for (i, b) in e.blocks.iter().enumerate() {
        let (n1, ln1) = b.ln1.forward(&h);
        let (a, attn) = b.attn.forward(&n1, &n1, n_heads);
        let h1 = &h + &a;
        let (n2, ln2) = b.ln2.forward(&h1);
        let f1 = relu(&b.ff1.forward(n2.view()));
        let out = &h1 + &b.ff2.forward(f1.view());
        check_finite(&out, &format!("{name}.blocks.{i}"))?;
        blocks.push(BlockCache {
            ln1,
            n1,
            attn,
            ln2,
            n2,
            f1,
        });
        h = out;
    }
    Ok((h, EncoderCache { x, ln, col, r, blocks }))
}

fn encoder_backward(e: &Encoder, c: &EncoderCache, dout: Array2<f64>, g: &mut Encoder) -> Array2<f64> {
    let mut dh = dout;
    for ((b, bc), gb) in e.blocks.iter().zip(&c.blocks).zip(g.blocks.iter_mut()).rev() {
        let df1 = b.ff2.backward(bc.f1.view(), &dh, &mut gb.ff2);
        let dn2 = b.ff1.backward(bc.n2.view(), &relu_backward(&bc.f1, &df1), &mut gb.ff1);
        let dh1 = &dh + &b.ln2.backward(&bc.ln2, &dn2, &mut gb.ln2);
        let (dq, dkv) = b.attn.backward(&bc.n1, &bc.n1, &bc.attn, &dh1, &mut gb.attn);
        dh = &dh1 + &b.ln1.backward(&bc.ln1, &(dq + dkv), &mut gb.ln1);
    }
    let dn0 = &dh + &e.conv.backward(&c.col, &relu_backward(&c.r, &dh), &mut g.conv);
    let dh0 = e.norm.backward(&c.ln, &dn0, &mut g.norm);
    e.input.backward(c.x.view(), &dh0, &mut g.input)
}

impl ModelParams {
    /// Source-encoder input matrix: content alone, or content beside the projected tracks.
    pub fn source_matrix(&self, src: &SourceFeatures) -> Result<Array2<f64>> {
        if src.content.ncols() != CONTENT_DIM {
            return Err(CdtError::Shape(format!(
                "source content has width {}, expected {CONTENT_DIM}",
                src.content.ncols()
            )));
        }
        match (&self.tensors.projection, &src.quality, &src.scene) {
            (None, None, None) => Ok(src.content.clone()),
            (Some(p), Some(q), Some(sc)) => project_and_concat(src.content.view(), q.view(), sc.view(), p),
            (None, _, _) => Err(CdtError::Validation(
                "unconditioned model was given condition tracks".into(),
            )),
            (Some(_), _, _) => Err(CdtError::Validation(format!(
                "variant {} needs both quality and scene tracks",
                self.config.variant
            ))),
        }
    }

    pub fn forward_trace(&self, src: &SourceFeatures, target_content: ArrayView2<f64>) -> Result<Trace> {
        let cfg = &self.config;
        let t = &self.tensors;
        if src.n_frames() == 0 || target_content.nrows() == 0 {
            return Err(CdtError::Shape("source and target need at least one frame".into()));
        }
        if target_content.ncols() != CONTENT_DIM {
            return Err(CdtError::Shape(format!(
                "target content has width {}, expected {CONTENT_DIM}",
                target_content.ncols()
            )));
        }
        let x_s = self.source_matrix(src)?;
        check_finite(&x_s, "source.features")?;
        check_finite(&target_content.to_owned(), "target.features")?;
        let (hs, enc_s) = encoder_forward(&t.source, x_s, cfg.n_heads, "source")?;
        let (ht, enc_t) = encoder_forward(&t.target, target_content.to_owned(), cfg.n_heads, "target")?;

        let (q, q_ln) = t.cross.ln_q.forward(&hs);
        let (kv, kv_ln) = t.cross.ln_kv.forward(&ht);
        let (a, attn) = t.cross.attn.forward(&q, &kv, cfg.n_heads);
        let mut h = &hs + &a;
        check_finite(&h, "cross.attn")?;

        let mut blocks = Vec::with_capacity(t.decoder.blocks.len());
        for (i, b) in t.decoder.blocks.iter().enumerate() {
            let (n, ln) = b.ln.forward(&h);
            let (c, col) = b.conv.forward(&n);
            let r = relu(&c);
            h = &h + &r;
            check_finite(&h, &format!("decoder.blocks.{i}"))?;
            blocks.push(DecBlockCache { ln, col, r });
        }
        let (n, ln) = t.decoder.norm.forward(&h);
        let output = t.decoder.head.forward(n.view()) * cfg.mel_scale + cfg.mel_offset;
        check_finite(&output, "decoder.head")?;
        Ok(Trace {
            source: src.clone(),
            enc_s,
            enc_t,
            cross: CrossCache {
                q_ln,
                q,
                kv_ln,
                kv,
                attn,
            },
            dec: DecoderCache { blocks, ln, n },
            output,
        })
    }

    /// Predicted log-mel `[T_s x n_mels]` (unclamped).
    pub fn forward(&self, src: &SourceFeatures, target_content: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_trace(src, target_content)?.output)
    }

    /// Inference output as a mel-spectrogram, floored at the front-end's log floor.
    pub fn predict_mel(
        &self,
        src: &SourceFeatures,
        target_content: ArrayView2<f64>,
        mel: &MelConfig,
    ) -> Result<MelSpectrogram> {
        let floor = mel.log_floor();
        MelSpectrogram::new(self.forward(src, target_content)?.mapv(|v| v.max(floor)), mel)
    }

    /// Accumulates parameter gradients for `d_output` into `g` and returns the
    /// gradient with respect to the source-encoder input matrix.
    pub fn backward(&self, trace: &Trace, d_output: &Array2<f64>, g: &mut ModelTensors) -> Array2<f64> {
        let cfg = &self.config;
        let t = &self.tensors;
        let d_head = d_output * cfg.mel_scale;
        let dn = t.decoder.head.backward(trace.dec.n.view(), &d_head, &mut g.decoder.head);
        let mut dh = t.decoder.norm.backward(&trace.dec.ln, &dn, &mut g.decoder.norm);
        for ((b, bc), gb) in t
            .decoder
            .blocks
            .iter()
            .zip(&trace.dec.blocks)
            .zip(g.decoder.blocks.iter_mut())
            .rev()
        {
            let dcol = b.conv.backward(&bc.col, &relu_backward(&bc.r, &dh), &mut gb.conv);
            dh = &dh + &b.ln.backward(&bc.ln, &dcol, &mut gb.ln);
        }
        let c = &trace.cross;
        let (dq, dkv) = t.cross.attn.backward(&c.q, &c.kv, &c.attn, &dh, &mut g.cross.attn);
        let dhs = &dh + &t.cross.ln_q.backward(&c.q_ln, &dq, &mut g.cross.ln_q);
        let dht = t.cross.ln_kv.backward(&c.kv_ln, &dkv, &mut g.cross.ln_kv);
        encoder_backward(&t.target, &trace.enc_t, dht, &mut g.target);
        let dx = encoder_backward(&t.source, &trace.enc_s, dhs, &mut g.source);
        if let (Some(gp), Some(q), Some(sc)) = (g.projection.as_mut(), &trace.source.quality, &trace.source.scene) {
            project_and_concat_backward(q.view(), sc.view(), dx.view(), gp);
        }
        dx
    }

    /// Gradients of the loss with respect to the aligned quality and scene
    /// tracks, from the source-matrix gradient returned by [`ModelParams::backward`].
    pub fn condition_input_grads(&self, d_source: &Array2<f64>) -> Option<(Array2<f64>, Array2<f64>)> {
        self.tensors
            .projection
            .as_ref()
            .map(|p| project_input_grads(d_source.view(), p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub n_frames: usize,
}

fn l1_parts(predicted: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    if predicted.dim() != target.dim() {
        return Err(CdtError::Shape(format!(
            "prediction {:?} vs target {:?}",
            predicted.dim(),
            target.dim()
        )));
    }
    Ok(predicted.iter().zip(target.iter()).map(|(a, b)| (a - b).abs()).sum())
}

/// Mean absolute difference over all entries.
pub fn l1_loss(predicted: &MelSpectrogram, target: &MelSpectrogram) -> Result<LossValue> {
    let sum = l1_parts(predicted.values.view(), target.values.view())?;
    Ok(LossValue {
        value: sum / predicted.values.len().max(1) as f64,
        n_frames: predicted.n_frames(),
    })
}

/// One training example on the content frame grid.
#[derive(Debug, Clone)]
pub struct Example {
    pub source: SourceFeatures,
    pub target_content: Array2<f64>,
    pub target_mel: Array2<f64>,
}

/// Batch loss and gradients. The loss is the mean absolute error over every
/// mel entry in the batch, so examples weigh in proportion to their length,
/// as a padded batch with a frame mask would.
pub fn gradients(params: &ModelParams, batch: &[Example]) -> Result<(ModelTensors, LossValue)> {
    if batch.is_empty() {
        return Err(CdtError::Argument("empty batch".into()));
    }
    let total: usize = batch.iter().map(|e| e.target_mel.len()).sum();
    let mut g = params.zero_tensors();
    let mut sum = 0.0;
    let mut frames = 0;
    for ex in batch {
        let trace = params.forward_trace(&ex.source, ex.target_content.view())?;
        if trace.output.nrows() != ex.target_mel.nrows() {
            return Err(CdtError::Shape(format!(
                "prediction has {} frames, ground truth {}",
                trace.output.nrows(),
                ex.target_mel.nrows()
            )));
        }
        sum += l1_parts(trace.output.view(), ex.target_mel.view())?;
        frames += ex.target_mel.nrows();
        let mut d = &trace.output - &ex.target_mel;
        d.mapv_inplace(|v| {
            if v > 0.0 {
                1.0 / total as f64
            } else if v < 0.0 {
                -1.0 / total as f64
            } else {
                0.0
            }
        });
        params.backward(&trace, &d, &mut g);
    }
    let value = sum / total as f64;
    if !value.is_finite() {
        return Err(CdtError::Numeric { layer: "loss".into() });
    }
    Ok((
        g,
        LossValue {
            value,
            n_frames: frames,
        },
    ))
}

/// Batch L1 without gradients.
pub fn batch_loss(params: &ModelParams, batch: &[Example]) -> Result<LossValue> {
    let mut sum = 0.0;
    let mut total = 0;
    let mut frames = 0;
    for ex in batch {
        let out = params.forward(&ex.source, ex.target_content.view())?;
        sum += l1_parts(out.view(), ex.target_mel.view())?;
        total += ex.target_mel.len();
        frames += ex.target_mel.nrows();
    }
    Ok(LossValue {
        value: sum / total.max(1) as f64,
        n_frames: frames,
    })
}

#[cfg(test)]
mod tests;
