//! Places condition tracks on the content frame grid and projects them to the
//! content width: utterance tracks are replicated, frame tracks are upsampled,
//! and both go through trainable affine maps before feature concatenation.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::conditioning::{CondMode, ConditionTrack, CONTENT_DIM, QUALITY_DIM, SCENE_DIM};
use crate::error::{CdtError, Result};
use crate::impl_tensors;
use crate::nn::{uniform, Tensors};

/// Width of the concatenated conditioned source features.
pub const CONDITIONED_WIDTH: usize = 3 * CONTENT_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Nearest,
    Linear,
}

impl std::str::FromStr for Interpolation {
    type Err = CdtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Interpolation::Nearest),
            "linear" => Ok(Interpolation::Linear),
            _ => Err(CdtError::config(
                "conditioning.interpolation",
                format!("expected `nearest` or `linear`, got `{s}`"),
            )),
        }
    }
}

pub fn replicate_utterance(track: &ConditionTrack, t: usize) -> Result<Array2<f64>> {
    if track.mode != CondMode::Utterance || track.n_frames() != 1 {
        return Err(CdtError::Mode(format!(
            "replication needs a one-row utterance track, `{}` is {} with {} rows",
            track.extractor_id,
            track.mode,
            track.n_frames()
        )));
    }
    if t == 0 {
        return Err(CdtError::Argument("target frame count must be at least 1".into()));
    }
    let row = track.values.row(0);
    Ok(row.broadcast((t, row.len())).expect("row broadcast").to_owned())
}

/// Fractional source-frame position whose center is nearest output frame `t`'s center.
fn source_position(t: usize, hop_ms: f64, track: &ConditionTrack) -> f64 {
    (t as f64 * hop_ms + hop_ms / 2.0 - track.framing.frame_len_ms / 2.0) / track.framing.frame_shift_ms
}

/// Source row used for output frame `t` under nearest-center upsampling.
pub fn upsample_index(t: usize, hop_ms: f64, track: &ConditionTrack) -> usize {
    let k = source_position(t, hop_ms, track).round();
    k.clamp(0.0, (track.n_frames() - 1) as f64) as usize
}

pub fn upsample_framewise(track: &ConditionTrack, t: usize, content_hop_ms: f64) -> Result<Array2<f64>> {
    upsample_with(track, t, content_hop_ms, Interpolation::Nearest)
}

pub fn upsample_with(
    track: &ConditionTrack,
    t: usize,
    content_hop_ms: f64,
    interp: Interpolation,
) -> Result<Array2<f64>> {
    if track.mode != CondMode::Frame {
        return Err(CdtError::Mode(format!(
            "upsampling needs a frame-wise track, `{}` is utterance-wise",
            track.extractor_id
        )));
    }
    if t == 0 || track.n_frames() == 0 {
        return Err(CdtError::Argument("upsampling needs at least one input and output frame".into()));
    }
    if !(content_hop_ms > 0.0) {
        return Err(CdtError::Argument(format!("content hop must be positive, got {content_hop_ms}")));
    }
    let k_max = track.n_frames() - 1;
    let mut out = Array2::zeros((t, track.dim()));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        match interp {
            Interpolation::Nearest => row.assign(&track.values.row(upsample_index(i, content_hop_ms, track))),
            Interpolation::Linear => {
                let p = source_position(i, content_hop_ms, track).clamp(0.0, k_max as f64);
                let lo = p.floor() as usize;
                let hi = (lo + 1).min(k_max);
                let frac = p - lo as f64;
                let a = track.values.row(lo);
                let b = track.values.row(hi);
                row.assign(&(&a * (1.0 - frac) + &b * frac));
            }
        }
    }
    Ok(out)
}

/// Aligns a track of either mode to `t` content frames.
pub fn align_track(track: &ConditionTrack, t: usize, content_hop_ms: f64, interp: Interpolation) -> Result<Array2<f64>> {
    match track.mode {
        CondMode::Utterance => replicate_utterance(track, t),
        CondMode::Frame => upsample_with(track, t, content_hop_ms, interp),
    }
}

/// Affine maps from the quality (64-d) and scene (768-d) tracks to the content width.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub w_quality: Array2<f64>,
    pub b_quality: Array2<f64>,
    pub w_scene: Array2<f64>,
    pub b_scene: Array2<f64>,
}

impl_tensors!(ProjectionParams { w_quality, b_quality, w_scene, b_scene });

impl ProjectionParams {
    pub fn init(seed: u64, name: &str) -> Self {
        let w = |field: &str, fan_in: usize| {
            uniform(seed, &format!("{name}.{field}"), fan_in, CONTENT_DIM, 1.0 / (fan_in as f64).sqrt())
        };
        Self {
            w_quality: w("w_quality", QUALITY_DIM),
            b_quality: Array2::zeros((1, CONTENT_DIM)),
            w_scene: w("w_scene", SCENE_DIM),
            b_scene: Array2::zeros((1, CONTENT_DIM)),
        }
    }

    pub fn zeros() -> Self {
        Self {
            w_quality: Array2::zeros((QUALITY_DIM, CONTENT_DIM)),
            b_quality: Array2::zeros((1, CONTENT_DIM)),
            w_scene: Array2::zeros((SCENE_DIM, CONTENT_DIM)),
            b_scene: Array2::zeros((1, CONTENT_DIM)),
        }
    }
}

/// Content features beside the projected quality and scene tracks, all `[T x 256]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedConditions {
    pub content: Array2<f64>,
    pub quality: Array2<f64>,
    pub scene: Array2<f64>,
}

impl AlignedConditions {
    pub fn n_frames(&self) -> usize {
        self.content.nrows()
    }

    pub fn concat(&self) -> Array2<f64> {
        concatenate(Axis(1), &[self.content.view(), self.quality.view(), self.scene.view()])
            .expect("shared frame count")
    }
}

fn check_shapes(content: ArrayView2<f64>, quality: ArrayView2<f64>, scene: ArrayView2<f64>) -> Result<()> {
    let t = content.nrows();
    let ok = content.ncols() == CONTENT_DIM
        && quality.dim() == (t, QUALITY_DIM)
        && scene.dim() == (t, SCENE_DIM);
    if ok {
        Ok(())
    } else {
        Err(CdtError::Shape(format!(
            "content {:?}, quality {:?}, scene {:?}; need [T x {CONTENT_DIM}], [T x {QUALITY_DIM}], [T x {SCENE_DIM}]",
            content.dim(),
            quality.dim(),
            scene.dim()
        )))
    }
}

pub fn project(
    content: ArrayView2<f64>,
    quality_aligned: ArrayView2<f64>,
    scene_aligned: ArrayView2<f64>,
    p: &ProjectionParams,
) -> Result<AlignedConditions> {
    check_shapes(content, quality_aligned, scene_aligned)?;
    Ok(AlignedConditions {
        content: content.to_owned(),
        quality: quality_aligned.dot(&p.w_quality) + &p.b_quality,
        scene: scene_aligned.dot(&p.w_scene) + &p.b_scene,
    })
}

/// `[content | quality W_q + b_q | scene W_s + b_s]`, width 768.
pub fn project_and_concat(
    content: ArrayView2<f64>,
    quality_aligned: ArrayView2<f64>,
    scene_aligned: ArrayView2<f64>,
    p: &ProjectionParams,
) -> Result<Array2<f64>> {
    Ok(project(content, quality_aligned, scene_aligned, p)?.concat())
}

/// Accumulates projection gradients from the gradient of the concatenated output.
pub fn project_and_concat_backward(
    quality_aligned: ArrayView2<f64>,
    scene_aligned: ArrayView2<f64>,
    grad_out: ArrayView2<f64>,
    g: &mut ProjectionParams,
) {
    let dq = grad_out.slice(s![.., CONTENT_DIM..2 * CONTENT_DIM]);
    let ds = grad_out.slice(s![.., 2 * CONTENT_DIM..]);
    g.w_quality += &quality_aligned.t().dot(&dq);
    g.b_quality += &dq.sum_axis(Axis(0)).insert_axis(Axis(0));
    g.w_scene += &scene_aligned.t().dot(&ds);
    g.b_scene += &ds.sum_axis(Axis(0)).insert_axis(Axis(0));
}

/// Gradient with respect to the aligned tracks themselves.
pub fn project_input_grads(grad_out: ArrayView2<f64>, p: &ProjectionParams) -> (Array2<f64>, Array2<f64>) {
    let dq = grad_out.slice(s![.., CONTENT_DIM..2 * CONTENT_DIM]);
    let ds = grad_out.slice(s![.., 2 * CONTENT_DIM..]);
    (dq.dot(&p.w_quality.t()), ds.dot(&p.w_scene.t()))
}

impl ProjectionParams {
    pub fn is_zero(&self) -> bool {
        self.named().iter().all(|(_, t)| t.iter().all(|&v| v == 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::FramingSpec;
    use crate::conditioning::{ExtractorKind, ExtractorSpec};
    use crate::nn::tests::random;

    fn track(values: Array2<f64>, framing: FramingSpec, mode: CondMode) -> ConditionTrack {
        ConditionTrack {
            values,
            framing,
            extractor_id: "test".into(),
            kind: ExtractorKind::Quality,
            mode,
            source_n_samples: 16_000,
        }
    }

    #[test]
    fn replication_copies_the_row() {
        let tr = track(random(1, 5, 1), ExtractorSpec::quality().framing, CondMode::Utterance);
        let out = replicate_utterance(&tr, 5).unwrap();
        for row in out.rows() {
            assert_eq!(row, tr.values.row(0));
        }
        assert_eq!(replicate_utterance(&tr, 1).unwrap(), tr.values);
        let fw = track(random(3, 5, 1), ExtractorSpec::quality().framing, CondMode::Frame);
        assert!(matches!(replicate_utterance(&fw, 4), Err(CdtError::Mode(_))));
    }

    #[test]
    fn equal_geometry_is_identity() {
        let framing = FramingSpec {
            frame_len_ms: 10.0,
            frame_shift_ms: 10.0,
        };
        let tr = track(random(7, 3, 2), framing, CondMode::Frame);
        assert_eq!(upsample_framewise(&tr, 7, 10.0).unwrap(), tr.values);
    }

    #[test]
    fn quality_geometry_indices() {
        // 22 frames at 150/40 ms onto 98 frames at 10 ms.
        let tr = track(random(22, 2, 3), ExtractorSpec::quality().framing, CondMode::Frame);
        let ks: Vec<usize> = (0..98).map(|t| upsample_index(t, 10.0, &tr)).collect();
        assert!(ks.windows(2).all(|p| p[0] <= p[1]));
        for k in 0..22 {
            assert!(ks.contains(&k), "row {k} unused");
        }
        assert_eq!(ks[0], 0);
        assert_eq!(ks[97], 21);
        // Center of frame 10 is 105 ms; (105 - 75) / 40 = 0.75 rounds to 1.
        assert_eq!(ks[10], 1);
    }

    #[test]
    fn single_frame_track_fills_output() {
        let tr = track(random(1, 4, 4), ExtractorSpec::scene().framing, CondMode::Frame);
        let out = upsample_framewise(&tr, 9, 10.0).unwrap();
        for row in out.rows() {
            assert_eq!(row, tr.values.row(0));
        }
        let uw = track(random(1, 4, 4), ExtractorSpec::scene().framing, CondMode::Utterance);
        assert!(matches!(upsample_framewise(&uw, 3, 10.0), Err(CdtError::Mode(_))));
    }

    #[test]
    fn linear_interpolation_stays_between_neighbours() {
        let values = Array2::from_shape_fn((4, 1), |(k, _)| k as f64);
        let tr = track(values, ExtractorSpec::quality().framing, CondMode::Frame);
        let out = upsample_with(&tr, 20, 10.0, Interpolation::Linear).unwrap();
        let col: Vec<f64> = out.column(0).to_vec();
        assert!(col.windows(2).all(|p| p[0] <= p[1]));
        assert!(col.iter().all(|&v| (0.0..=3.0).contains(&v)));
        // Center 105 ms sits at position 0.75.
        assert!((col[10] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn zero_projection_passes_content_through() {
        let content = random(4, CONTENT_DIM, 5);
        let out = project_and_concat(
            content.view(),
            random(4, QUALITY_DIM, 6).view(),
            random(4, SCENE_DIM, 7).view(),
            &ProjectionParams::zeros(),
        )
        .unwrap();
        assert_eq!(out.dim(), (4, CONDITIONED_WIDTH));
        assert_eq!(out.slice(s![.., ..CONTENT_DIM]), content);
        assert!(out.slice(s![.., CONTENT_DIM..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let err = project_and_concat(
            random(4, CONTENT_DIM, 5).view(),
            random(3, QUALITY_DIM, 6).view(),
            random(4, SCENE_DIM, 7).view(),
            &ProjectionParams::zeros(),
        );
        assert!(matches!(err, Err(CdtError::Shape(_))));
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let t = 3;
        let content = random(t, CONTENT_DIM, 1);
        let q = random(t, QUALITY_DIM, 2);
        let sc = random(t, SCENE_DIM, 3);
        let w = random(t, CONDITIONED_WIDTH, 4);
        let mut p = ProjectionParams::init(9, "proj");
        p.b_quality = random(1, CONTENT_DIM, 5);
        let loss = |p: &ProjectionParams| {
            (project_and_concat(content.view(), q.view(), sc.view(), p).unwrap() * &w).sum()
        };
        let mut g = ProjectionParams::zeros();
        project_and_concat_backward(q.view(), sc.view(), w.view(), &mut g);
        let eps = 1e-5;
        let coords = [(0usize, 0usize, 0usize), (0, 63, 255), (1, 0, 17), (2, 500, 100), (3, 0, 3)];
        for &(which, r, c) in &coords {
            let mut pp = p.clone();
            let mut pm = p.clone();
            let (tp, tm, an) = match which {
                0 => (&mut pp.w_quality, &mut pm.w_quality, g.w_quality[[r, c]]),
                1 => (&mut pp.b_quality, &mut pm.b_quality, g.b_quality[[r, c]]),
                2 => (&mut pp.w_scene, &mut pm.w_scene, g.w_scene[[r, c]]),
                _ => (&mut pp.b_scene, &mut pm.b_scene, g.b_scene[[r, c]]),
            };
            tp[[r, c]] += eps;
            tm[[r, c]] -= eps;
            let fd = (loss(&pp) - loss(&pm)) / (2.0 * eps);
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-8), "{fd} vs {an}");
        }
    }
}
