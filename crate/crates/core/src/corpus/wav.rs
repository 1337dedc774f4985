//! RIFF/WAVE reading (PCM16, PCM24, IEEE float32; mono or stereo) and
//! PCM16 mono writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::Waveform;

const TAG_PCM: u16 = 1;
const TAG_FLOAT: u16 = 3;
const TAG_EXTENSIBLE: u16 = 0xFFFE;

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::WavParse {
        offset: offset as u64,
        message: message.into(),
    }
}

fn u16_at(b: &[u8], off: usize, what: &str) -> Result<u16> {
    b.get(off..off + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| parse_err(off, format!("truncated while reading {what}")))
}

fn u32_at(b: &[u8], off: usize, what: &str) -> Result<u32> {
    b.get(off..off + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| parse_err(off, format!("truncated while reading {what}")))
}

#[derive(Clone, Copy, Debug)]
struct Format {
    tag: u16,
    channels: u16,
    rate: u32,
    bits: u16,
}

fn parse_fmt(bytes: &[u8], off: usize, size: usize) -> Result<Format> {
    if size < 16 {
        return Err(parse_err(off, format!("fmt chunk too small ({size} bytes)")));
    }
    let mut tag = u16_at(bytes, off, "format tag")?;
    let channels = u16_at(bytes, off + 2, "channel count")?;
    let rate = u32_at(bytes, off + 4, "sample rate")?;
    let bits = u16_at(bytes, off + 14, "bits per sample")?;
    if tag == TAG_EXTENSIBLE {
        if size < 40 {
            return Err(parse_err(off, "extensible fmt chunk shorter than 40 bytes"));
        }
        // first two bytes of the sub-format GUID carry the actual tag
        tag = u16_at(bytes, off + 24, "extensible sub-format")?;
    }
    let fmt = Format {
        tag,
        channels,
        rate,
        bits,
    };
    match (tag, bits) {
        (TAG_PCM, 16) | (TAG_PCM, 24) | (TAG_FLOAT, 32) => {}
        (TAG_PCM, b) | (TAG_FLOAT, b) => {
            return Err(Error::UnsupportedFormat(format!(
                "format tag {tag} with {b} bits per sample"
            )))
        }
        _ => return Err(Error::UnsupportedFormat(format!("codec tag {tag}"))),
    }
    if !(1..=2).contains(&channels) {
        return Err(Error::UnsupportedFormat(format!("{channels} channels")));
    }
    if rate == 0 {
        return Err(parse_err(off + 4, "sample rate is zero"));
    }
    Ok(fmt)
}

/// Decodes a WAV byte buffer, mixing stereo to mono by channel mean.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() >= 4 && &bytes[0..4] != b"RIFF" {
        return Err(Error::UnsupportedFormat(format!(
            "not a RIFF file (magic {:?})",
            String::from_utf8_lossy(&bytes[0..4])
        )));
    }
    if bytes.len() < 12 {
        return Err(parse_err(bytes.len(), "truncated RIFF header"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::UnsupportedFormat("RIFF form type is not WAVE".into()));
    }
    let mut off = 12;
    let mut fmt: Option<Format> = None;
    loop {
        if off + 8 > bytes.len() {
            return Err(parse_err(off, "missing data chunk"));
        }
        let id = &bytes[off..off + 4];
        let size = u32_at(bytes, off + 4, "chunk size")? as usize;
        let body = off + 8;
        match id {
            b"fmt " => {
                if body + size > bytes.len() {
                    return Err(parse_err(body, "truncated fmt chunk"));
                }
                fmt = Some(parse_fmt(bytes, body, size)?);
            }
            b"data" => {
                let f = fmt.ok_or_else(|| parse_err(off, "data chunk before fmt chunk"))?;
                let frame = f.channels as usize * (f.bits as usize / 8);
                if body + size > bytes.len() {
                    return Err(parse_err(
                        bytes.len(),
                        format!("data chunk declares {size} bytes, {} available", bytes.len() - body),
                    ));
                }
                if size % frame != 0 {
                    return Err(parse_err(body + size, format!("data size {size} not a multiple of frame size {frame}")));
                }
                return Ok(decode_samples(&bytes[body..body + size], f));
            }
            _ => {}
        }
        off = body + size + (size & 1);
    }
}

fn decode_samples(data: &[u8], f: Format) -> Waveform {
    let width = f.bits as usize / 8;
    let ch = f.channels as usize;
    let decode = |s: &[u8]| -> f32 {
        match (f.tag, f.bits) {
            (TAG_PCM, 16) => i16::from_le_bytes([s[0], s[1]]) as f32 / 32768.0,
            (TAG_PCM, 24) => {
                let v = i32::from_le_bytes([0, s[0], s[1], s[2]]) >> 8;
                v as f32 / 8_388_608.0
            }
            _ => f32::from_le_bytes([s[0], s[1], s[2], s[3]]),
        }
    };
    let samples = data
        .chunks_exact(width * ch)
        .map(|frame| {
            if ch == 1 {
                decode(frame)
            } else {
                let sum: f32 = frame.chunks_exact(width).map(decode).sum();
                sum / ch as f32
            }
        })
        .collect();
    Waveform::new(samples, f.rate)
}

/// Reads and decodes a WAV file.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

fn mono_header(tag: u16, bits: u16, rate: u32, frames: usize) -> Vec<u8> {
    let width = u32::from(bits / 8);
    let data_len = frames as u32 * width;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * width).to_le_bytes());
    out.extend_from_slice(&(width as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    out
}

/// Encodes mono PCM16: amplitudes are clamped to `[-1, 1]`, scaled by
/// 32767 and rounded.
pub fn encode_wav_pcm16(samples: &[f32], rate: u32) -> Vec<u8> {
    let mut out = mono_header(TAG_PCM, 16, rate, samples.len());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Encodes mono IEEE float-32; samples are stored exactly.
pub fn encode_wav_f32(samples: &[f32], rate: u32) -> Vec<u8> {
    let mut out = mono_header(TAG_FLOAT, 32, rate, samples.len());
    for &s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn write_wav_pcm16(path: impl AsRef<Path>, samples: &[f32], rate: u32) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav_pcm16(samples, rate)).map_err(|e| Error::io(path, e))
}

pub fn write_wav_f32(path: impl AsRef<Path>, samples: &[f32], rate: u32) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav_f32(samples, rate)).map_err(|e| Error::io(path, e))
}
