//! RIFF/WAVE reader and a minimal PCM16 writer.
//!
//! Reads PCM 8/16/24-bit and 32-bit float, averages channels to mono, and
//! optionally resamples. Parse failures carry the byte offset where the
//! structure broke; truncated files always produce errors, never short
//! reads.

use std::io::Write;
use std::path::Path;

use crate::dsp::Waveform;
use crate::error::{Error, Result};

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Cursor { data, pos: 0 }
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::WavParse {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(self.fail(format!(
                "need {n} bytes, only {} remain",
                self.data.len() - self.pos
            )));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
}

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;

/// Decoded format chunk.
struct Format {
    code: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

/// Read a WAV file, average channels to mono, and resample to `target_rate`
/// when given.
pub fn read_wav(path: impl AsRef<Path>, target_rate: Option<u32>) -> Result<Waveform> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    let wave = parse_wav(&bytes)?;
    match target_rate {
        Some(rate) if rate != wave.sample_rate => wave.resampled(rate),
        _ => Ok(wave),
    }
}

/// Parse WAV bytes into a mono waveform at the file's native rate.
pub fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    let mut c = Cursor::new(bytes);
    if c.take(4)? != b"RIFF" {
        c.pos = 0;
        return Err(c.fail("missing RIFF tag"));
    }
    let riff_size = c.u32()? as usize;
    if riff_size + 8 > bytes.len() {
        return Err(c.fail(format!(
            "RIFF size {riff_size} exceeds file length {}",
            bytes.len()
        )));
    }
    if c.take(4)? != b"WAVE" {
        c.pos -= 4;
        return Err(c.fail("missing WAVE tag"));
    }

    let mut format: Option<Format> = None;
    let mut data: Option<&[u8]> = None;
    while c.pos < bytes.len() {
        if bytes.len() - c.pos < 8 {
            return Err(c.fail("dangling bytes where a chunk header was expected"));
        }
        let id: [u8; 4] = c.take(4)?.try_into().unwrap();
        let size = c.u32()? as usize;
        let payload = c.take(size)?;
        match &id {
            b"fmt " => {
                let mut f = Cursor::new(payload);
                f.pos = 0;
                let code = f.u16().map_err(|_| c.fail("fmt chunk too short"))?;
                let channels = f.u16().map_err(|_| c.fail("fmt chunk too short"))?;
                let sample_rate = f.u32().map_err(|_| c.fail("fmt chunk too short"))?;
                let _byte_rate = f.u32().map_err(|_| c.fail("fmt chunk too short"))?;
                let _block_align = f.u16().map_err(|_| c.fail("fmt chunk too short"))?;
                let bits = f.u16().map_err(|_| c.fail("fmt chunk too short"))?;
                format = Some(Format {
                    code,
                    channels,
                    sample_rate,
                    bits_per_sample: bits,
                });
            }
            b"data" => {
                data = Some(payload);
            }
            _ => {} // skip unneeded chunks
        }
        if size % 2 == 1 && c.pos < bytes.len() {
            c.take(1)?; // chunk padding byte
        }
    }

    let format = format.ok_or_else(|| c.fail("no fmt chunk"))?;
    let data = data.ok_or_else(|| c.fail("no data chunk"))?;
    if format.channels == 0 {
        return Err(c.fail("zero channels"));
    }
    if format.sample_rate == 0 {
        return Err(c.fail("zero sample rate"));
    }

    let decode = |bytes_per: usize, data: &[u8]| -> Result<Vec<f32>> {
        if data.len() % (bytes_per * format.channels as usize) != 0 {
            return Err(Error::WavParse {
                offset: 0,
                message: format!(
                    "data length {} not a multiple of the {}-byte frame",
                    data.len(),
                    bytes_per * format.channels as usize
                ),
            });
        }
        Ok(data
            .chunks_exact(bytes_per)
            .map(|chunk| match (format.code, bytes_per) {
                (FORMAT_PCM, 1) => (chunk[0] as f32 - 128.0) / 128.0,
                (FORMAT_PCM, 2) => i16::from_le_bytes([chunk[0], chunk[1]]) as f32 / 32768.0,
                (FORMAT_PCM, 3) => {
                    let v = i32::from_le_bytes([0, chunk[0], chunk[1], chunk[2]]) >> 8;
                    v as f32 / 8_388_608.0
                }
                (FORMAT_IEEE_FLOAT, 4) => {
                    f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]])
                }
                _ => unreachable!(),
            })
            .collect())
    };

    let per_sample = match (format.code, format.bits_per_sample) {
        (FORMAT_PCM, 8) => 1,
        (FORMAT_PCM, 16) => 2,
        (FORMAT_PCM, 24) => 3,
        (FORMAT_IEEE_FLOAT, 32) => 4,
        (code, bits) => {
            return Err(Error::WavUnsupported(format!(
                "format code {code} with {bits} bits per sample"
            )))
        }
    };
    let interleaved = decode(per_sample, data)?;

    // channel average to mono, clamped into range
    let channels = format.channels as usize;
    let frames = interleaved.len() / channels;
    let mono: Vec<f32> = (0..frames)
        .map(|i| {
            let mut acc = 0.0f64;
            for ch in 0..channels {
                acc += interleaved[i * channels + ch] as f64;
            }
            ((acc / channels as f64) as f32).clamp(-1.0, 1.0)
        })
        .collect();
    Waveform::new(mono, format.sample_rate)
}

/// Write a mono waveform as 16-bit PCM.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let mut bytes = Vec::with_capacity(44 + wave.len() * 2);
    let data_len = (wave.len() * 2) as u32;
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_len).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
    bytes.extend_from_slice(&wave.sample_rate.to_le_bytes());
    bytes.extend_from_slice(&(wave.sample_rate * 2).to_le_bytes());
    bytes.extend_from_slice(&2u16.to_le_bytes());
    bytes.extend_from_slice(&16u16.to_le_bytes());
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&data_len.to_le_bytes());
    for &v in &wave.samples {
        let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        bytes.extend_from_slice(&q.to_le_bytes());
    }
    let mut file = std::fs::File::create(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path.as_ref(), e))
}

/// In-memory PCM16 encoding, used by tests and the writer above.
pub fn encode_wav_pcm16(wave: &Waveform) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(44 + wave.len() * 2);
    let data_len = (wave.len() * 2) as u32;
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_len).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes());
    bytes.extend_from_slice(&wave.sample_rate.to_le_bytes());
    bytes.extend_from_slice(&(wave.sample_rate * 2).to_le_bytes());
    bytes.extend_from_slice(&2u16.to_le_bytes());
    bytes.extend_from_slice(&16u16.to_le_bytes());
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&data_len.to_le_bytes());
    for &v in &wave.samples {
        let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        bytes.extend_from_slice(&q.to_le_bytes());
    }
    bytes
}
