//! 16-bit PCM mono WAV read/write.

use std::path::Path;

use crate::dsp::AudioClip;
use crate::error::{AvsepError, Result};

pub fn write_wav<P: AsRef<Path>>(path: P, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| AvsepError::Data(format!("wav write: {e}")))?;
    for &s in clip.samples() {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| AvsepError::Data(format!("wav write: {e}")))?;
    }
    writer
        .finalize()
        .map_err(|e| AvsepError::Data(format!("wav write: {e}")))?;
    Ok(())
}

pub fn read_wav<P: AsRef<Path>>(path: P) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(&path)
        .map_err(|e| AvsepError::Data(format!("wav read {}: {e}", path.as_ref().display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(AvsepError::Data(format!(
            "expected mono wav, got {} channels",
            spec.channels
        )));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(AvsepError::Data("expected 16-bit PCM wav".into()));
    }
    let samples: Vec<f64> = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32767.0))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| AvsepError::Data(format!("wav read: {e}")))?;
    AudioClip::new(samples, spec.sample_rate)
}
