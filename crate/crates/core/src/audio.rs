//! RIFF WAVE input/output.
//!
//! Reads 32-bit float and 16/24/32-bit integer PCM (integers scaled by
//! `2^(bits-1)` into [-1, 1)); always writes 32-bit float.

use std::io::{BufReader, Read};
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Multichannel audio, samples indexed `[channel][sample]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Audio {
    pub sample_rate: u32,
    pub samples: Array2<f64>,
}

impl Audio {
    pub fn new(sample_rate: u32, samples: Array2<f64>) -> Self {
        Self {
            sample_rate,
            samples,
        }
    }

    pub fn mono(sample_rate: u32, samples: Vec<f64>) -> Self {
        let n = samples.len();
        Self {
            sample_rate,
            samples: Array2::from_shape_vec((1, n), samples).expect("1 x n"),
        }
    }

    pub fn n_channels(&self) -> usize {
        self.samples.dim().0
    }

    pub fn len(&self) -> usize {
        self.samples.dim().1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, ch: usize) -> Vec<f64> {
        self.samples.row(ch).to_vec()
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Audio> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

pub fn decode_wav(bytes: &[u8]) -> Result<Audio> {
    let reader = hound::WavReader::new(BufReader::new(bytes)).map_err(|e| map_hound(e, bytes))?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    if n_ch == 0 {
        return Err(Error::Audio("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => collect(
            reader.into_samples::<f32>().map(|s| s.map(f64::from)),
            bytes,
        )?,
        (hound::SampleFormat::Int, bits @ (16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            collect(
                reader
                    .into_samples::<i32>()
                    .map(|s| s.map(|v| v as f64 * scale)),
                bytes,
            )?
        }
        (fmt, bits) => {
            return Err(Error::UnsupportedCodec(format!(
                "{fmt:?} PCM with {bits} bits per sample"
            )));
        }
    };
    let len = interleaved.len() / n_ch;
    let samples = Array2::from_shape_fn((n_ch, len), |(c, n)| interleaved[n * n_ch + c]);
    Ok(Audio::new(spec.sample_rate, samples))
}

fn collect(iter: impl Iterator<Item = hound::Result<f64>>, bytes: &[u8]) -> Result<Vec<f64>> {
    iter.collect::<hound::Result<Vec<f64>>>()
        .map_err(|e| map_hound(e, bytes))
}

fn map_hound(e: hound::Error, bytes: &[u8]) -> Error {
    match e {
        hound::Error::Unsupported => Error::UnsupportedCodec(
            format_tag(bytes).map_or_else(|| "unknown format".to_string(), format_name),
        ),
        other => Error::Audio(other.to_string()),
    }
}

/// The `wFormatTag` of the `fmt ` chunk, if the RIFF structure is readable.
fn format_tag(bytes: &[u8]) -> Option<u16> {
    let mut r = bytes;
    let mut head = [0u8; 12];
    r.read_exact(&mut head).ok()?;
    if &head[..4] != b"RIFF" || &head[8..] != b"WAVE" {
        return None;
    }
    loop {
        let mut chunk = [0u8; 8];
        r.read_exact(&mut chunk).ok()?;
        let size = u32::from_le_bytes(chunk[4..].try_into().ok()?) as usize;
        if &chunk[..4] == b"fmt " {
            return r.get(..2).map(|t| u16::from_le_bytes([t[0], t[1]]));
        }
        r = r.get(size + (size & 1)..)?;
    }
}

fn format_name(tag: u16) -> String {
    let name = match tag {
        0x0001 => "PCM",
        0x0002 => "Microsoft ADPCM",
        0x0003 => "IEEE float",
        0x0006 => "A-law",
        0x0007 => "mu-law",
        0x0011 => "IMA ADPCM",
        0x0031 => "GSM 6.10",
        0x0050 => "MPEG",
        0x0055 => "MPEG Layer 3",
        0xFFFE => "WAVE_FORMAT_EXTENSIBLE",
        _ => return format!("format tag 0x{tag:04x}"),
    };
    format!("{name} (format tag 0x{tag:04x})")
}

/// Writes 32-bit float WAVE through a temporary file renamed into place.
pub fn write_wav(
    path: impl AsRef<Path>,
    sample_rate: u32,
    samples: ArrayView2<'_, f64>,
) -> Result<()> {
    let (n_ch, len) = samples.dim();
    if n_ch == 0 || n_ch > u16::MAX as usize {
        return Err(Error::Audio(format!("cannot write {n_ch} channels")));
    }
    let spec = hound::WavSpec {
        channels: n_ch as u16,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    crate::harness::write_atomically(path.as_ref(), |w| {
        let mut writer = hound::WavWriter::new(std::io::BufWriter::new(w), spec)
            .map_err(std::io::Error::other)?;
        for n in 0..len {
            for c in 0..n_ch {
                writer
                    .write_sample(samples[[c, n]] as f32)
                    .map_err(std::io::Error::other)?;
            }
        }
        writer.finalize().map_err(std::io::Error::other)
    })
}

pub fn write_mono(path: impl AsRef<Path>, sample_rate: u32, samples: &[f64]) -> Result<()> {
    let view = ArrayView2::from_shape((1, samples.len()), samples).expect("1 x n");
    write_wav(path, sample_rate, view)
}
