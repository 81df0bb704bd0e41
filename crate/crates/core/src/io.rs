//! Flat little-endian `.f32` payloads with JSON sidecars, and WAV input.
//!
//! A payload stores channels back to back (channel 0's samples, then
//! channel 1's, ...). The sidecar shares the payload's stem with a `.json`
//! extension and holds at least `{"fs", "channels", "samples"}`; callers may
//! add extra keys.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{AadError, Result};
use crate::signal::{MultiSignal, Signal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub fs: f64,
    pub channels: Vec<String>,
    pub samples: usize,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

pub fn sidecar_path(payload: &Path) -> PathBuf {
    payload.with_extension("json")
}

fn encode(data: &[&[f64]]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(data.iter().map(|c| c.len() * 4).sum());
    for ch in data {
        for &v in ch.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes
}

fn decode(path: &Path, bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(AadError::ingestion(path, "payload size is not a multiple of 4 bytes"));
    }
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect())
}

/// Writes channels as one payload plus sidecar.
pub fn write_f32(
    path: &Path,
    channels: &[String],
    data: &[&[f64]],
    fs: f64,
    extra: Map<String, Value>,
) -> Result<()> {
    let samples = data.first().map_or(0, |c| c.len());
    if data.iter().any(|c| c.len() != samples) || data.len() != channels.len() {
        return Err(AadError::Length("channels differ in length".into()));
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, encode(data))?;
    let side = Sidecar { fs, channels: channels.to_vec(), samples, extra };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

pub fn write_signal(path: &Path, name: &str, signal: &Signal, extra: Map<String, Value>) -> Result<()> {
    write_f32(path, &[name.to_string()], &[signal.samples()], signal.fs(), extra)
}

pub fn write_multi(path: &Path, signal: &MultiSignal, extra: Map<String, Value>) -> Result<()> {
    let data: Vec<&[f64]> = signal.data().iter().map(|c| c.as_slice()).collect();
    write_f32(path, signal.channel_names(), &data, signal.fs(), extra)
}

/// Reads a payload and its sidecar, checking the declared shape.
pub fn read_f32(path: &Path) -> Result<(Sidecar, Vec<Vec<f64>>)> {
    let side_path = sidecar_path(path);
    let side_text = fs::read_to_string(&side_path).map_err(|e| AadError::ingestion(&side_path, e))?;
    let side: Sidecar = serde_json::from_str(&side_text).map_err(|e| AadError::ingestion(&side_path, e))?;
    let bytes = fs::read(path).map_err(|e| AadError::ingestion(path, e))?;
    let flat = decode(path, &bytes)?;
    let expect = side.samples * side.channels.len();
    if flat.len() != expect {
        return Err(AadError::ingestion(
            path,
            format!("payload holds {} values, sidecar declares {expect}", flat.len()),
        ));
    }
    let data = if side.samples == 0 {
        vec![Vec::new(); side.channels.len()]
    } else {
        flat.chunks(side.samples).map(|c| c.to_vec()).collect()
    };
    Ok((side, data))
}

pub fn read_multi(path: &Path) -> Result<MultiSignal> {
    let (side, data) = read_f32(path)?;
    MultiSignal::new(side.channels, data, side.fs).map_err(|e| AadError::ingestion(path, e))
}

pub fn read_signal(path: &Path) -> Result<(Sidecar, Signal)> {
    let (side, mut data) = read_f32(path)?;
    if data.len() != 1 {
        return Err(AadError::ingestion(path, format!("expected one channel, found {}", data.len())));
    }
    let s = Signal::new(data.remove(0), side.fs).map_err(|e| AadError::ingestion(path, e))?;
    Ok((side, s))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| AadError::ingestion(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Reads a 16- or 24-bit PCM (or float) WAV and mixes it down to mono in
/// `[-1, 1]`.
pub fn read_wav_mono(path: &Path) -> Result<Signal> {
    let mut reader = hound::WavReader::open(path).map_err(|e| AadError::ingestion(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let samples: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| AadError::ingestion(path, e))?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| AadError::ingestion(path, e))?,
    };
    let mono = samples.chunks(channels).map(|f| f.iter().sum::<f64>() / channels as f64).collect();
    Signal::new(mono, spec.sample_rate as f64).map_err(|e| AadError::ingestion(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_round_trip_and_shape_checks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f32");
        let a = vec![0.5, -1.25, 3.0];
        let b = vec![2.0, 0.0, -0.125];
        let mut extra = Map::new();
        extra.insert("kind".into(), Value::from("envelope"));
        write_f32(&p, &["a".into(), "b".into()], &[&a, &b], 64.0, extra).unwrap();
        let (side, data) = read_f32(&p).unwrap();
        assert_eq!(side.fs, 64.0);
        assert_eq!(side.samples, 3);
        assert_eq!(side.extra["kind"], "envelope");
        assert_eq!(data, vec![a, b]);
        assert_eq!(fs::read(&p).unwrap().len(), 24);

        fs::write(&p, [0u8; 8]).unwrap();
        let err = read_f32(&p).unwrap_err();
        assert!(err.to_string().contains("x.f32"));
    }

    #[test]
    fn wav_pcm16_and_24() {
        let dir = tempfile::tempdir().unwrap();
        for bits in [16u16, 24] {
            let p = dir.path().join(format!("t{bits}.wav"));
            let spec = hound::WavSpec { channels: 2, sample_rate: 44100, bits_per_sample: bits, sample_format: hound::SampleFormat::Int };
            let mut w = hound::WavWriter::create(&p, spec).unwrap();
            let full = (1i32 << (bits - 1)) - 1;
            for i in 0..100 {
                w.write_sample(if i % 2 == 0 { full / 2 } else { -full / 2 }).unwrap();
                w.write_sample(full / 2).unwrap();
            }
            w.finalize().unwrap();
            let s = read_wav_mono(&p).unwrap();
            assert_eq!(s.fs(), 44100.0);
            assert_eq!(s.len(), 100);
            assert!((s.samples()[0] - 0.5).abs() < 1e-3);
            assert!(s.samples()[1].abs() < 1e-3);
        }
    }
}
