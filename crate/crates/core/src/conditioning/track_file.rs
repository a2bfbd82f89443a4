//! Binary condition-track container (`CTRK1`), little-endian throughout.
//!
//! | field              | encoding                          |
//! |--------------------|-----------------------------------|
//! | magic              | 5 bytes `CTRK1`                   |
//! | extractor_id       | u32 byte length, then UTF-8       |
//! | kind               | u8: 0 quality, 1 scene, 2 content |
//! | dim                | u32                               |
//! | frame_len_ms       | f64                               |
//! | frame_shift_ms     | f64                               |
//! | n_frames           | u64                               |
//! | source_n_samples   | u64                               |
//! | mode               | u8: 0 utterance, 1 frame          |
//! | values             | n_frames * dim f32, row-major     |

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{CondMode, ConditionTrack, ExtractorKind, ExtractorSpec};
use crate::audio::FramingSpec;
use crate::error::{CdtError, Result};

const MAGIC: &[u8; 5] = b"CTRK1";

pub fn encode(track: &ConditionTrack) -> Vec<u8> {
    let id = track.extractor_id.as_bytes();
    let mut out = Vec::with_capacity(64 + id.len() + 4 * track.values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id);
    out.push(track.kind.code());
    out.extend_from_slice(&(track.dim() as u32).to_le_bytes());
    out.extend_from_slice(&track.framing.frame_len_ms.to_le_bytes());
    out.extend_from_slice(&track.framing.frame_shift_ms.to_le_bytes());
    out.extend_from_slice(&(track.n_frames() as u64).to_le_bytes());
    out.extend_from_slice(&(track.source_n_samples as u64).to_le_bytes());
    out.push(match track.mode {
        CondMode::Utterance => 0,
        CondMode::Frame => 1,
    });
    for v in track.values.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CdtError::Format(format!("condition track truncated in {what}"))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<ConditionTrack> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(CdtError::Format("not a CTRK1 condition track".into()));
    }
    let id_len = r.u32("extractor_id")? as usize;
    let extractor_id = std::str::from_utf8(r.take(id_len, "extractor_id")?)
        .map_err(|_| CdtError::Format("extractor_id is not UTF-8".into()))?
        .to_string();
    let kind_code = r.u8("kind")?;
    let kind = ExtractorKind::from_code(kind_code)
        .ok_or_else(|| CdtError::Format(format!("unknown extractor kind code {kind_code}")))?;
    let dim = r.u32("dim")? as usize;
    let framing = FramingSpec {
        frame_len_ms: r.f64("frame_len_ms")?,
        frame_shift_ms: r.f64("frame_shift_ms")?,
    };
    let n_frames = r.u64("n_frames")? as usize;
    let source_n_samples = r.u64("source_n_samples")? as usize;
    let mode = match r.u8("mode")? {
        0 => CondMode::Utterance,
        1 => CondMode::Frame,
        c => return Err(CdtError::Format(format!("unknown mode code {c}"))),
    };
    let count = n_frames
        .checked_mul(dim)
        .ok_or_else(|| CdtError::Format("matrix size overflows".into()))?;
    let bytes = r.take(
        count.checked_mul(4).ok_or_else(|| CdtError::Format("matrix size overflows".into()))?,
        "values",
    )?;
    if r.pos != buf.len() {
        return Err(CdtError::Format(format!(
            "{} trailing bytes after condition matrix",
            buf.len() - r.pos
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let values = Array2::from_shape_vec((n_frames, dim), data).expect("length checked");
    Ok(ConditionTrack {
        values,
        framing,
        extractor_id,
        kind,
        mode,
        source_n_samples,
    })
}

pub fn write_condition_file(track: &ConditionTrack, path: &Path) -> Result<()> {
    fs::write(path, encode(track)).map_err(|e| CdtError::io(path, e))
}

/// Reads a track and checks it against the geometry the caller expects.
pub fn load_condition_file(
    path: &Path,
    expected: &ExtractorSpec,
    sample_rate_hz: u32,
) -> Result<ConditionTrack> {
    let buf = fs::read(path).map_err(|e| CdtError::io(path, e))?;
    let track = decode(&buf)?;
    if track.kind != expected.kind {
        return Err(CdtError::Validation(format!(
            "{}: kind {} but {} expected",
            path.display(),
            track.kind,
            expected.kind
        )));
    }
    if track.dim() != expected.dim {
        return Err(CdtError::Validation(format!(
            "{}: dim {} but {} expected",
            path.display(),
            track.dim(),
            expected.dim
        )));
    }
    let same = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs().max(1.0);
    if !same(track.framing.frame_len_ms, expected.framing.frame_len_ms)
        || !same(track.framing.frame_shift_ms, expected.framing.frame_shift_ms)
    {
        return Err(CdtError::Validation(format!(
            "{}: framing {}/{} ms but {}/{} ms expected",
            path.display(),
            track.framing.frame_len_ms,
            track.framing.frame_shift_ms,
            expected.framing.frame_len_ms,
            expected.framing.frame_shift_ms
        )));
    }
    track.validate(sample_rate_hz)?;
    Ok(track)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quality_track(dim: usize, n: usize) -> ConditionTrack {
        ConditionTrack {
            values: Array2::from_shape_fn((n, dim), |(t, k)| (t * dim + k) as f64 * 0.25),
            framing: ExtractorSpec::quality().framing,
            extractor_id: "external-nisqa".into(),
            kind: ExtractorKind::Quality,
            mode: CondMode::Frame,
            source_n_samples: 16_000,
        }
    }

    #[test]
    fn accepts_matching_quality_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.ctrk");
        let t = quality_track(64, 22);
        write_condition_file(&t, &p).unwrap();
        let back = load_condition_file(&p, &ExtractorSpec::quality(), 16_000).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_wrong_dim() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.ctrk");
        write_condition_file(&quality_track(128, 22), &p).unwrap();
        let err = load_condition_file(&p, &ExtractorSpec::quality(), 16_000).unwrap_err();
        assert!(matches!(err, CdtError::Validation(_)), "{err}");
    }

    #[test]
    fn rejects_nan_and_bad_frame_count() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.ctrk");
        let mut t = quality_track(64, 22);
        t.values[[3, 5]] = f64::NAN;
        write_condition_file(&t, &p).unwrap();
        assert!(matches!(
            load_condition_file(&p, &ExtractorSpec::quality(), 16_000),
            Err(CdtError::Validation(_))
        ));
        write_condition_file(&quality_track(64, 21), &p).unwrap();
        assert!(matches!(
            load_condition_file(&p, &ExtractorSpec::quality(), 16_000),
            Err(CdtError::Validation(_))
        ));
    }

    #[test]
    fn rejects_wrong_framing_and_truncation() {
        let mut t = quality_track(768, 17);
        t.kind = ExtractorKind::Scene;
        let bytes = encode(&t);
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(CdtError::Format(_))));
        assert!(matches!(decode(b"CTRK0"), Err(CdtError::Format(_))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.ctrk");
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_condition_file(&p, &ExtractorSpec::scene(), 16_000),
            Err(CdtError::Validation(_))
        ));
    }
}
