use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{CdtError, Result};

fn map_hound(path: &Path, e: hound::Error) -> CdtError {
    match e {
        hound::Error::IoError(io) => CdtError::io(path, io),
        hound::Error::Unsupported => CdtError::UnsupportedFormat(format!("{}", path.display())),
        other => CdtError::Format(format!("{}: {other}", path.display())),
    }
}

/// Reads a mono PCM16 RIFF/WAVE file; samples are divided by 32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(CdtError::UnsupportedFormat(format!(
            "{}: {} channels, expected mono",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(CdtError::UnsupportedFormat(format!(
            "{}: {:?} {}-bit, expected PCM16",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| map_hound(path, e))?;
    if samples.is_empty() {
        return Err(CdtError::Format(format!("{}: empty data chunk", path.display())));
    }
    Waveform::new(samples, spec.sample_rate)
}

/// Quantizes a sample as `round(clip(x) * 32768)`, saturating at the int16
/// limits. This is the exact inverse of the read scaling, so every int16
/// value survives a read/write cycle.
pub(crate) fn quantize(x: f64) -> i16 {
    (x.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes a mono PCM16 file, clipping to `[-1, 1]` first.
pub fn write_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in w.samples() {
        writer.write_sample(quantize(s)).map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, channels: u16, data: &[i16]) {
        let spec = WavSpec {
            channels,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(path, spec).unwrap();
        for &d in data {
            w.write_sample(d).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn read_scales_by_32768() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_raw(&p, 1, &[0, 16384, -32768]);
        let w = read_wav(&p).unwrap();
        assert_eq!(w.samples(), &[0.0, 0.5, -1.0]);
        assert_eq!(w.sample_rate_hz(), 16_000);
    }

    #[test]
    fn empty_data_chunk_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.wav");
        write_raw(&p, 1, &[]);
        assert!(matches!(read_wav(&p), Err(CdtError::Format(_))));
    }

    #[test]
    fn stereo_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        write_raw(&p, 2, &[1, 2, 3, 4]);
        assert!(matches!(read_wav(&p), Err(CdtError::UnsupportedFormat(_))));
    }

    #[test]
    fn garbage_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.wav");
        std::fs::write(&p, b"RIFFjunkjunkjunk").unwrap();
        assert!(matches!(read_wav(&p), Err(CdtError::Format(_))));
    }

    #[test]
    fn write_clips_and_quantizes() {
        assert_eq!(quantize(1.5), 32767);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(-3.0), -32768);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.wav");
        write_wav(&Waveform::new(vec![0.25], 16_000).unwrap(), &p).unwrap();
        let back = read_wav(&p).unwrap();
        assert!((back.samples()[0] - 0.25).abs() <= 1.0 / 32767.0);
    }

    #[test]
    fn round_trip_preserves_data_chunk() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.wav");
        let b = dir.path().join("b.wav");
        let data: Vec<i16> = (0..2000).map(|i| ((i * 7919) % 65536 - 32768) as i16).collect();
        write_raw(&a, 1, &data);
        write_wav(&read_wav(&a).unwrap(), &b).unwrap();
        let read_back: Vec<i16> = WavReader::open(&b)
            .unwrap()
            .samples::<i16>()
            .map(|s| s.unwrap())
            .collect();
        assert_eq!(read_back, data);
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
