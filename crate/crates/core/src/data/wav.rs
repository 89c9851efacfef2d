use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use crate::error::{Error, Result};

fn malformed(path: &Path, e: impl ToString) -> Error {
    Error::WavMalformed {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

fn unsupported(path: &Path, detail: String) -> Error {
    Error::WavUnsupported {
        path: path.to_path_buf(),
        detail,
    }
}

/// Reads a mono PCM16 or float32 WAV file. Returns samples in `[-1, 1]` and
/// the sample rate; nothing is resampled or downmixed.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => Error::Io(io),
        hound::Error::Unsupported => unsupported(path, "unsupported WAV encoding".into()),
        other => malformed(path, other),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(unsupported(path, format!("{} channels, only mono is accepted", spec.channels)));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| malformed(path, e))?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v.clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| malformed(path, e))?,
        (fmt, bits) => {
            return Err(unsupported(path, format!("{bits}-bit {fmt:?} samples")));
        }
    };
    if samples.is_empty() {
        return Err(malformed(path, "no samples"));
    }
    Ok((samples, spec.sample_rate))
}

/// Writes mono 16-bit PCM.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec).map_err(|e| malformed(path, e))?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(|e| malformed(path, e))?;
    }
    w.finalize().map_err(|e| malformed(path, e))?;
    Ok(())
}
