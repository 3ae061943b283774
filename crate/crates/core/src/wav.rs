//! RIFF/WAVE reader and writer, PCM16 mono only.
//!
//! Anything else (float PCM, multichannel, compressed encodings) is
//! rejected rather than converted.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::audio::WaveBuffer;
use crate::error::{Error, Result};

const PCM_FORMAT: u16 = 1;
const FULL_SCALE: f64 = 32768.0;

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "WAV",
        reason: reason.into(),
    }
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| bad("unexpected end of file"))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(r)?))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    Ok(u16::from_le_bytes(read_exact::<2>(r)?))
}

/// Loads a PCM16 mono WAV file, scaling samples to `[-1, 1)` by `1/32768`.
pub fn load_wav(path: impl AsRef<Path>) -> Result<WaveBuffer> {
    let mut r = BufReader::new(File::open(path)?);

    if &read_exact::<4>(&mut r)? != b"RIFF" {
        return Err(bad("missing RIFF magic"));
    }
    let _riff_size = read_u32(&mut r)?;
    if &read_exact::<4>(&mut r)? != b"WAVE" {
        return Err(bad("missing WAVE tag"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    loop {
        let id = match read_exact::<4>(&mut r) {
            Ok(id) => id,
            Err(_) => return Err(bad("no data chunk")),
        };
        let size = read_u32(&mut r)?;
        match &id {
            b"fmt " => {
                if size < 16 {
                    return Err(bad("fmt chunk too small"));
                }
                let audio_format = read_u16(&mut r)?;
                let channels = read_u16(&mut r)?;
                let sample_rate = read_u32(&mut r)?;
                let _byte_rate = read_u32(&mut r)?;
                let _block_align = read_u16(&mut r)?;
                let bits = read_u16(&mut r)?;
                // skip any fmt extension bytes
                skip(&mut r, size as u64 - 16)?;
                fmt = Some((audio_format, channels, sample_rate, bits));
            }
            b"data" => {
                let (audio_format, channels, sample_rate, bits) =
                    fmt.ok_or_else(|| bad("data chunk before fmt chunk"))?;
                if audio_format != PCM_FORMAT {
                    return Err(Error::UnsupportedWav(format!(
                        "audio format {audio_format}"
                    )));
                }
                if channels != 1 {
                    return Err(Error::UnsupportedWav(format!("{channels} channels")));
                }
                if bits != 16 {
                    return Err(Error::UnsupportedWav(format!("{bits} bits per sample")));
                }
                if size % 2 != 0 {
                    return Err(bad("odd data chunk size"));
                }
                let mut raw = vec![0u8; size as usize];
                r.read_exact(&mut raw)
                    .map_err(|_| bad("truncated data chunk"))?;
                let samples = raw
                    .chunks_exact(2)
                    .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / FULL_SCALE)
                    .collect();
                return WaveBuffer::new(samples, sample_rate);
            }
            _ => {
                // unrelated chunk (LIST, fact, ...), skip payload + pad byte
                skip(&mut r, size as u64 + (size % 2) as u64)?;
            }
        }
    }
}

fn skip(r: &mut impl Read, n: u64) -> Result<()> {
    let copied = std::io::copy(&mut r.take(n), &mut std::io::sink())?;
    if copied != n {
        return Err(bad("truncated chunk"));
    }
    Ok(())
}

/// Writes a mono PCM16 WAV file. Samples are scaled by 32768 and clamped
/// to the i16 range.
pub fn save_wav(path: impl AsRef<Path>, wave: &WaveBuffer) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let data_len = (wave.samples.len() * 2) as u32;

    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_len).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&PCM_FORMAT.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?; // mono
    w.write_all(&wave.sample_rate.to_le_bytes())?;
    w.write_all(&(wave.sample_rate * 2).to_le_bytes())?; // byte rate
    w.write_all(&2u16.to_le_bytes())?; // block align
    w.write_all(&16u16.to_le_bytes())?; // bits per sample
    w.write_all(b"data")?;
    w.write_all(&data_len.to_le_bytes())?;
    for &s in &wave.samples {
        let q = (s * FULL_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        w.write_all(&q.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}
