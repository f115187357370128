use super::{DspError, Result, Waveform, AUDIO_RATE};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let f = File::open(path)?;
    read_wav_from(BufReader::new(f)).map_err(|e| match e {
        DspError::WavFormat(m) => DspError::WavFormat(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

/// Parses RIFF/WAVE holding 16-bit PCM mono at 16 kHz.
pub fn read_wav_from(mut r: impl Read) -> Result<Waveform> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let bad = |m: &str| DspError::WavFormat(m.to_string());
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut fmt_seen = false;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(&bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .ok_or_else(|| bad("chunk size overflow"))?;
        match id {
            b"fmt " => {
                if size < 16 || end > bytes.len() {
                    return Err(bad("truncated fmt chunk"));
                }
                let format = u16_at(&bytes, body);
                let channels = u16_at(&bytes, body + 2);
                let rate = u32_at(&bytes, body + 4);
                let bits = u16_at(&bytes, body + 14);
                if format != 1 {
                    return Err(DspError::WavFormat(format!(
                        "format tag {format} is not integer PCM"
                    )));
                }
                if channels != 1 {
                    return Err(DspError::WavFormat(format!(
                        "{channels} channels, expected mono"
                    )));
                }
                if rate != AUDIO_RATE {
                    return Err(DspError::WavFormat(format!(
                        "{rate} Hz, expected {AUDIO_RATE} Hz"
                    )));
                }
                if bits != 16 {
                    return Err(DspError::WavFormat(format!(
                        "{bits}-bit samples, expected 16-bit"
                    )));
                }
                fmt_seen = true;
            }
            b"data" => {
                if !fmt_seen {
                    return Err(bad("data chunk before fmt chunk"));
                }
                let end = end.min(bytes.len());
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return Waveform::audio(samples);
            }
            _ => {}
        }
        pos = end + (size & 1);
    }
    Err(bad("no data chunk"))
}

pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_wav_to(&mut w, wave)?;
    w.flush()?;
    Ok(())
}

/// Writes 16-bit PCM mono; samples are clipped to [−1, 1).
pub fn write_wav_to(mut w: impl Write, wave: &Waveform) -> Result<()> {
    if wave.sample_rate() != AUDIO_RATE {
        return Err(DspError::WavFormat(format!(
            "can only write {AUDIO_RATE} Hz audio, got {} Hz",
            wave.sample_rate()
        )));
    }
    let data_len = (wave.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&AUDIO_RATE.to_le_bytes());
    out.extend_from_slice(&(AUDIO_RATE * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in wave.samples() {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    w.write_all(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_quantisation() {
        let x: Vec<f64> = (0..500).map(|i| ((i as f64) * 0.37).sin() * 0.9).collect();
        let mut buf = Vec::new();
        write_wav_to(&mut buf, &Waveform::audio(x.clone()).unwrap()).unwrap();
        assert_eq!(buf.len(), 44 + 1000);
        let y = read_wav_from(buf.as_slice()).unwrap();
        assert_eq!(y.len(), 500);
        for (a, b) in x.iter().zip(y.samples()) {
            assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-12);
        }
    }

    #[test]
    fn clipping() {
        let mut buf = Vec::new();
        write_wav_to(&mut buf, &Waveform::audio(vec![2.0, -2.0]).unwrap()).unwrap();
        let y = read_wav_from(buf.as_slice()).unwrap();
        assert_eq!(y.samples(), &[32767.0 / 32768.0, -1.0]);
    }

    #[test]
    fn rejects_other_layouts() {
        let mut buf = Vec::new();
        write_wav_to(&mut buf, &Waveform::audio(vec![0.0; 4]).unwrap()).unwrap();
        let mut stereo = buf.clone();
        stereo[22] = 2;
        let err = read_wav_from(stereo.as_slice()).unwrap_err();
        assert!(err.to_string().contains("mono"), "{err}");
        let mut rate = buf.clone();
        rate[24..28].copy_from_slice(&44100u32.to_le_bytes());
        assert!(read_wav_from(rate.as_slice())
            .unwrap_err()
            .to_string()
            .contains("44100"));
        let mut bits = buf;
        bits[34] = 24;
        assert!(read_wav_from(bits.as_slice())
            .unwrap_err()
            .to_string()
            .contains("24-bit"));
        assert!(read_wav_from(&b"RIFX...."[..]).is_err());
    }
}
