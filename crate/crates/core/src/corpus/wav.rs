//! Reading and writing of 16-bit PCM mono WAV files at 8 kHz.
//!
//! The writer always emits exactly this format; the reader rejects anything
//! else with an error naming the offending field.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::Waveform;

pub const SAMPLE_RATE: u32 = 8000;
const BITS_PER_SAMPLE: u16 = 16;
const QUANT_SCALE: f64 = 32767.0;

/// Writes `wave` as RIFF/WAVE, PCM16, mono, 8000 Hz. Samples are clamped to
/// [-1, 1] and quantized with round-to-nearest at scale 32767.
pub fn save_wav(wave: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if wave.sample_rate() != SAMPLE_RATE {
        return Err(Error::invalid(format!(
            "save_wav writes {SAMPLE_RATE} Hz only, waveform is {} Hz",
            wave.sample_rate()
        )));
    }
    let n = wave.len() as u32;
    let data_bytes = n * 2;
    let mut buf = Vec::with_capacity(44 + data_bytes as usize);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_bytes).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    buf.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    buf.extend_from_slice(&2u16.to_le_bytes()); // block align
    buf.extend_from_slice(&BITS_PER_SAMPLE.to_le_bytes());
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_bytes.to_le_bytes());
    for &s in wave.samples() {
        let q = (s.clamp(-1.0, 1.0) * QUANT_SCALE).round() as i16;
        buf.extend_from_slice(&q.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, field: &str, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        field: field.to_string(),
        message: message.into(),
    }
}

fn read_u16(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Reads a PCM16 mono 8 kHz WAV file. Other chunks (LIST, fact, ...) are
/// skipped; a wrong codec, channel count, bit depth, or sample rate is a
/// format error naming that field.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(format_err(path, "riff_header", "not a RIFF/WAVE file"));
    }
    let mut at = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = read_u32(&bytes, at + 4) as usize;
        let body_at = at + 8;
        if body_at + size > bytes.len() {
            return Err(format_err(
                path,
                "chunk_size",
                format!("chunk {:?} overruns the file", String::from_utf8_lossy(id)),
            ));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(format_err(path, "fmt_chunk", "fmt chunk too short"));
                }
                fmt = Some((
                    read_u16(&bytes, body_at),
                    read_u16(&bytes, body_at + 2),
                    read_u32(&bytes, body_at + 4),
                    read_u16(&bytes, body_at + 14),
                ));
            }
            b"data" => data = Some(&bytes[body_at..body_at + size]),
            _ => {}
        }
        at = body_at + size + size % 2; // chunks are word-aligned
    }
    let (audio_format, channels, sample_rate, bits) =
        fmt.ok_or_else(|| format_err(path, "fmt_chunk", "missing fmt chunk"))?;
    if audio_format != 1 {
        return Err(format_err(
            path,
            "audio_format",
            format!("expected PCM (1), got {audio_format}"),
        ));
    }
    if channels != 1 {
        return Err(format_err(
            path,
            "channels",
            format!("expected mono (1), got {channels}"),
        ));
    }
    if sample_rate != SAMPLE_RATE {
        return Err(format_err(
            path,
            "sample_rate",
            format!("expected {SAMPLE_RATE}, got {sample_rate}"),
        ));
    }
    if bits != BITS_PER_SAMPLE {
        return Err(format_err(
            path,
            "bits_per_sample",
            format!("expected {BITS_PER_SAMPLE}, got {bits}"),
        ));
    }
    let data = data.ok_or_else(|| format_err(path, "data_chunk", "missing data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(format_err(path, "data_chunk", "odd data chunk length"));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / QUANT_SCALE)
        .collect();
    Waveform::new(samples, SAMPLE_RATE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(len: usize) -> Waveform {
        Waveform::new(
            (0..len).map(|i| (i as f64 * 0.05).sin() * 0.8).collect(),
            SAMPLE_RATE,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_within_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        let wave = sine(1000);
        save_wav(&wave, &path).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.len(), wave.len());
        assert_eq!(back.sample_rate(), SAMPLE_RATE);
        let max_err = wave
            .samples()
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1.0 / 32768.0, "max_err {max_err}");
    }

    #[test]
    fn second_round_trip_is_exact() {
        // Quantized values survive a second trip bit-exactly.
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.wav");
        let p2 = dir.path().join("b.wav");
        save_wav(&sine(512), &p1).unwrap();
        let once = load_wav(&p1).unwrap();
        save_wav(&once, &p2).unwrap();
        let twice = load_wav(&p2).unwrap();
        assert_eq!(once.samples(), twice.samples());
    }

    #[test]
    fn rejects_stereo_naming_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 4).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes()); // stereo
        bytes.extend_from_slice(&8000u32.to_le_bytes());
        bytes.extend_from_slice(&32000u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&path, bytes).unwrap();
        let err = load_wav(&path).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
    }

    #[test]
    fn rejects_wrong_rate_naming_sample_rate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hi.wav");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 2).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&16000u32.to_le_bytes()); // 16 kHz
        bytes.extend_from_slice(&32000u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&[0, 0]);
        std::fs::write(&path, bytes).unwrap();
        let err = load_wav(&path).unwrap_err();
        assert!(err.to_string().contains("sample_rate"), "{err}");
    }

    #[test]
    fn save_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.wav");
        let p2 = dir.path().join("b.wav");
        save_wav(&sine(256), &p1).unwrap();
        save_wav(&sine(256), &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }
}
