use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

use super::Waveform;

/// Reads a RIFF/WAVE file: PCM 16-bit or IEEE float 32-bit, 1 or 2
/// channels, 8-48 kHz. Stereo is averaged to mono; PCM samples are scaled
/// by 1/32768.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes)
}

fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 {
        return Err(Error::MalformedWav("file shorter than RIFF header".into()));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::MalformedWav("missing RIFF/WAVE magic".into()));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut pos = 12usize;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body_start + 16 > bytes.len() {
                    return Err(Error::MalformedWav("fmt chunk too small".into()));
                }
                let b = &bytes[body_start..];
                fmt = Some((
                    u16::from_le_bytes([b[0], b[1]]),
                    u16::from_le_bytes([b[2], b[3]]),
                    u32::from_le_bytes([b[4], b[5], b[6], b[7]]),
                    u16::from_le_bytes([b[14], b[15]]),
                ));
            }
            b"data" => {
                if body_start + size > bytes.len() {
                    return Err(Error::TruncatedWav(format!(
                        "data chunk claims {size} bytes, {} available",
                        bytes.len() - body_start
                    )));
                }
                data = Some(&bytes[body_start..body_start + size]);
            }
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body_start + size + (size & 1);
    }

    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| Error::MalformedWav("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::MalformedWav("no data chunk".into()))?;

    if !(1..=2).contains(&channels) {
        return Err(Error::UnsupportedCodec(format!("{channels} channels")));
    }
    if !(8000..=48000).contains(&rate) {
        return Err(Error::UnsupportedCodec(format!("sample rate {rate} Hz")));
    }
    let bytes_per_sample = match (format, bits) {
        (1, 16) => 2,
        (3, 32) => 4,
        _ => {
            return Err(Error::UnsupportedCodec(format!(
                "format tag {format} with {bits} bits"
            )))
        }
    };
    let frame_bytes = bytes_per_sample * channels as usize;
    if data.len() % frame_bytes != 0 {
        return Err(Error::TruncatedWav(format!(
            "data length {} is not a whole number of frames",
            data.len()
        )));
    }

    let n_frames = data.len() / frame_bytes;
    let mut samples = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let mut acc = 0.0;
        for ch in 0..channels as usize {
            let off = f * frame_bytes + ch * bytes_per_sample;
            let v = match bytes_per_sample {
                2 => i16::from_le_bytes([data[off], data[off + 1]]) as f64 / 32768.0,
                _ => f32::from_le_bytes([
                    data[off],
                    data[off + 1],
                    data[off + 2],
                    data[off + 3],
                ]) as f64,
            };
            acc += v;
        }
        samples.push(acc / channels as f64);
    }
    Ok(Waveform::new(samples, rate))
}

/// Writes mono PCM 16-bit. Samples are clamped to [-1, 1].
pub fn write_wav_pcm16(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav_bytes(format: u16, bits: u16, channels: u16, rate: u32, body: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + body.len() as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&format.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * channels as u32 * bits as u32 / 8).to_le_bytes());
        out.extend_from_slice(&(channels * bits / 8).to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(body);
        out
    }

    #[test]
    fn one_second_of_silence() {
        let body = vec![0u8; 16000 * 2];
        let w = parse_wav(&wav_bytes(1, 16, 1, 16000, &body)).unwrap();
        assert_eq!(w.samples.len(), 16000);
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stereo_opposites_cancel() {
        let mut body = Vec::new();
        for _ in 0..100 {
            body.extend_from_slice(&16384i16.to_le_bytes());
            body.extend_from_slice(&(-16384i16).to_le_bytes());
        }
        let w = parse_wav(&wav_bytes(1, 16, 2, 16000, &body)).unwrap();
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn pcm16_scaling() {
        let mut body = Vec::new();
        body.extend_from_slice(&16384i16.to_le_bytes());
        let w = parse_wav(&wav_bytes(1, 16, 1, 16000, &body)).unwrap();
        assert_eq!(w.samples, vec![0.5]);
    }

    #[test]
    fn float32_passthrough() {
        let mut body = Vec::new();
        body.extend_from_slice(&0.25f32.to_le_bytes());
        let w = parse_wav(&wav_bytes(3, 32, 1, 22050, &body)).unwrap();
        assert_eq!(w.samples, vec![0.25]);
        assert_eq!(w.sample_rate, 22050);
    }

    #[test]
    fn distinct_ingest_errors() {
        assert!(matches!(
            parse_wav(b"RIFX....WAVE"),
            Err(Error::MalformedWav(_))
        ));
        let bad_codec = wav_bytes(7, 16, 1, 16000, &[0, 0]);
        assert!(matches!(
            parse_wav(&bad_codec),
            Err(Error::UnsupportedCodec(_))
        ));
        let mut truncated = wav_bytes(1, 16, 1, 16000, &[0u8; 4]);
        let n = truncated.len();
        truncated.truncate(n - 2);
        assert!(matches!(
            parse_wav(&truncated),
            Err(Error::TruncatedWav(_))
        ));
    }

    #[test]
    fn roundtrip_through_file() {
        let dir = std::env::temp_dir().join("samba_wav_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tone.wav");
        let samples: Vec<f64> = (0..200)
            .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin() * 0.5)
            .collect();
        write_wav_pcm16(&path, &samples, 16000).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16000);
        assert_eq!(back.samples.len(), 200);
        for (a, b) in back.samples.iter().zip(&samples) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}
