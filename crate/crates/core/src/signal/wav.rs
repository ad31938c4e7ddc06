//! RIFF/WAVE PCM16 mono reader and writer.

use std::fs;
use std::path::Path;

use super::{AudioBuffer, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::tensor::Real;

const PCM: u16 = 1;

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::WavHeader("missing RIFF/WAVE signature".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::WavHeader(format!("chunk {:?} overruns file", String::from_utf8_lossy(id))))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::WavHeader(format!("fmt chunk too short ({size} bytes)")));
                }
                let format = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let rate = u32_at(bytes, body + 4);
                let bits = u16_at(bytes, body + 14);
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => {
                let (format, channels, rate, bits) =
                    fmt.ok_or_else(|| Error::WavHeader("data chunk before fmt chunk".into()))?;
                if format != PCM || bits != 16 {
                    return Err(Error::WavEncoding { format, bits });
                }
                if channels != 1 {
                    return Err(Error::WavChannels(channels));
                }
                if rate != SAMPLE_RATE {
                    return Err(Error::WavRate(rate));
                }
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as Real / 32768.0)
                    .collect();
                return Ok(AudioBuffer {
                    samples,
                    sample_rate: rate,
                });
            }
            _ => {}
        }
        // chunks are word aligned
        pos = end + (size & 1);
    }
    Err(Error::WavHeader("no data chunk".into()))
}

/// 44-byte canonical header followed by the data chunk.
pub fn encode_wav(audio: &AudioBuffer) -> Vec<u8> {
    let n = audio.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&audio.sample_rate.to_le_bytes());
    out.extend_from_slice(&(audio.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &audio.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    decode_wav(&fs::read(path)?)
}

pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    fs::write(path, encode_wav(audio))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn header(format: u16, channels: u16, rate: u32, bits: u16) -> Vec<u8> {
        let mut b = encode_wav(&AudioBuffer::new(vec![0.0; 4], SAMPLE_RATE).unwrap());
        b[20..22].copy_from_slice(&format.to_le_bytes());
        b[22..24].copy_from_slice(&channels.to_le_bytes());
        b[24..28].copy_from_slice(&rate.to_le_bytes());
        b[34..36].copy_from_slice(&bits.to_le_bytes());
        b
    }

    #[test]
    fn silence_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("silence.wav");
        let buf = AudioBuffer::new(vec![0.0; 16000], SAMPLE_RATE).unwrap();
        write_wav(&path, &buf).unwrap();
        assert_eq!(read_wav(&path).unwrap(), buf);
    }

    #[test]
    fn random_round_trip_within_quantization() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<Real> = (0..4000).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let buf = AudioBuffer::new(samples, SAMPLE_RATE).unwrap();
        let back = decode_wav(&encode_wav(&buf)).unwrap();
        let worst = buf
            .samples
            .iter()
            .zip(&back.samples)
            .fold(0.0 as Real, |m, (a, b)| m.max((a - b).abs()));
        assert!(worst <= 1.0 / 32768.0, "{worst}");
    }

    #[test]
    fn each_unsupported_property_has_its_own_error() {
        assert!(matches!(decode_wav(&header(1, 2, 16000, 16)), Err(Error::WavChannels(2))));
        assert!(matches!(decode_wav(&header(1, 1, 44100, 16)), Err(Error::WavRate(44100))));
        assert!(matches!(
            decode_wav(&header(3, 1, 16000, 32)),
            Err(Error::WavEncoding { format: 3, bits: 32 })
        ));
        assert!(matches!(decode_wav(b"RIFX0000WAVE"), Err(Error::WavHeader(_))));
        let mut truncated = header(1, 1, 16000, 16);
        truncated.truncate(40);
        assert!(matches!(decode_wav(&truncated), Err(Error::WavHeader(_))));
    }

    #[test]
    fn skips_unknown_chunks() {
        let buf = AudioBuffer::new(vec![0.25, -0.5], SAMPLE_RATE).unwrap();
        let plain = encode_wav(&buf);
        let mut with_list = plain[..36].to_vec();
        with_list.extend_from_slice(b"LIST");
        with_list.extend_from_slice(&3u32.to_le_bytes());
        with_list.extend_from_slice(&[1, 2, 3, 0]);
        with_list.extend_from_slice(&plain[36..]);
        assert_eq!(decode_wav(&with_list).unwrap(), buf);
    }
}
