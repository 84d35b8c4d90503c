use std::path::Path;

use crate::error::{Error, Result};

/// Sample rate every waveform in the pipeline runs at.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono 16 kHz signal with finite samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("waveform sample {i} is not finite")));
        }
        Ok(Self { samples })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            samples: vec![0.0; len],
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum()
    }

    pub fn truncated(&self, len: usize) -> Self {
        Self {
            samples: self.samples[..len.min(self.samples.len())].to_vec(),
        }
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        let end = (start + len).min(self.samples.len());
        Self {
            samples: self.samples[start.min(end)..end].to_vec(),
        }
    }

    /// Reads a mono 16 kHz WAV file. PCM16 is scaled by 1/32768; float32 is taken as is.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::format(path, format!("expected mono, found {} channels", spec.channels)));
        }
        if spec.sample_rate != SAMPLE_RATE {
            return Err(Error::format(
                path,
                format!("expected {SAMPLE_RATE} Hz, found {} Hz", spec.sample_rate),
            ));
        }
        let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => reader
                .into_samples::<i16>()
                .map(|s| s.map(|v| v as f32 / 32768.0))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_error(path, e))?,
            (hound::SampleFormat::Float, 32) => reader
                .into_samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_error(path, e))?,
            (fmt, bits) => {
                return Err(Error::format(path, format!("unsupported sample format {fmt:?}/{bits}-bit")))
            }
        };
        Self::new(samples).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Writes IEEE float32, which round-trips samples bit-exactly.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        self.write_with(path.as_ref(), spec, |w, s| w.write_sample(s))
    }

    /// Writes PCM16, clipping to [-1, 1).
    pub fn write_wav_pcm16(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        self.write_with(path.as_ref(), spec, |w, s| {
            w.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
        })
    }

    fn write_with<F>(&self, path: &Path, spec: hound::WavSpec, mut put: F) -> Result<()>
    where
        F: FnMut(&mut hound::WavWriter<std::io::BufWriter<std::fs::File>>, f32) -> hound::Result<()>,
    {
        let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
        for &s in &self.samples {
            put(&mut writer, s).map_err(|e| wav_error(path, e))?;
        }
        writer.finalize().map_err(|e| wav_error(path, e))
    }
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}
