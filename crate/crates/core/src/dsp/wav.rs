//! WAV file I/O. Samples are normalised to [-1, 1] on read.

use std::path::Path;

use hound::{SampleFormat as HoundFormat, WavReader, WavSpec, WavWriter};

use super::MultiWave;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> Error + '_ {
    move |source| Error::Wav { path: path.to_path_buf(), source }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<MultiWave> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    let m = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (HoundFormat::Float, 32) => {
            reader.into_samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>().map_err(wav_err(path))?
        }
        (HoundFormat::Int, bits @ 8..=32) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<Result<_, _>>()
                .map_err(wav_err(path))?
        }
        (fmt, bits) => {
            return Err(Error::Input(format!("{}: unsupported sample format {fmt:?}/{bits} bit", path.display())));
        }
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / m.max(1)); m];
    for frame in interleaved.chunks_exact(m) {
        for (c, v) in channels.iter_mut().zip(frame) {
            c.push(*v);
        }
    }
    MultiWave::new(channels, spec.sample_rate)
}

/// Read a WAV and fail unless it has the expected sample rate.
pub fn read_wav_expect(path: impl AsRef<Path>, sample_rate: u32) -> Result<MultiWave> {
    let path = path.as_ref();
    let w = read_wav(path)?;
    if w.sample_rate() != sample_rate {
        return Err(Error::Input(format!(
            "{}: sample rate {} Hz, expected {sample_rate} Hz (no resampling)",
            path.display(),
            w.sample_rate()
        )));
    }
    Ok(w)
}

/// Write a WAV. PCM samples are clipped to the 16-bit range.
pub fn write_wav(path: impl AsRef<Path>, wave: &MultiWave, format: SampleFormat) -> Result<()> {
    let path = path.as_ref();
    let (bits, sample_format) = match format {
        SampleFormat::Pcm16 => (16, HoundFormat::Int),
        SampleFormat::Float32 => (32, HoundFormat::Float),
    };
    let spec = WavSpec {
        channels: wave.num_channels() as u16,
        sample_rate: wave.sample_rate(),
        bits_per_sample: bits,
        sample_format,
    };
    let mut w = WavWriter::create(path, spec).map_err(wav_err(path))?;
    for i in 0..wave.len() {
        for c in wave.channels() {
            match format {
                SampleFormat::Pcm16 => {
                    let v = (c[i] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    w.write_sample(v).map_err(wav_err(path))?;
                }
                SampleFormat::Float32 => w.write_sample(c[i] as f32).map_err(wav_err(path))?,
            }
        }
    }
    w.finalize().map_err(wav_err(path))
}
