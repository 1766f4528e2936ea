//! Raw recordings (`FEMB-SIG`) and preprocessed window archives.
//!
//! Recording layout, little-endian:
//!
//! ```text
//! "FEMB-SIG"  version:u16  channels:u16  sample_rate_hz:f64  samples:u64
//! f32 * channels * samples, channel-major
//! ```
//!
//! A window archive is an `FMBC` container with one `f32 [channels, samples]`
//! entry per window (`window.00000`, ...), written next to a JSON-lines
//! sidecar (`<archive>.jsonl`) holding per-window provenance.

use std::io::Write;
use std::path::{Path, PathBuf};

use femba_core::signal::{Prepared, RawRecording};
use femba_core::tensor::Matrix;
use serde::{Deserialize, Serialize};

use crate::container::{Container, Entry, Reader};
use crate::{Error, Result};

pub const SIG_MAGIC: &[u8; 8] = b"FEMB-SIG";
pub const SIG_VERSION: u16 = 1;
const SIG_HEADER: usize = 8 + 2 + 2 + 8 + 8;

pub fn encode_recording(rec: &RawRecording) -> Vec<u8> {
    let mut b = Vec::with_capacity(SIG_HEADER + 4 * rec.channel_count() * rec.len());
    b.extend_from_slice(SIG_MAGIC);
    b.extend_from_slice(&SIG_VERSION.to_le_bytes());
    b.extend_from_slice(&(rec.channel_count() as u16).to_le_bytes());
    b.extend_from_slice(&rec.sample_rate_hz().to_le_bytes());
    b.extend_from_slice(&(rec.len() as u64).to_le_bytes());
    for ch in rec.channels() {
        for &v in ch {
            b.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    b
}

pub fn decode_recording(b: &[u8]) -> Result<RawRecording> {
    let mut r = Reader { b, pos: 0 };
    if r.take(8)? != SIG_MAGIC {
        return Err(Error::format(0, "bad magic, expected FEMB-SIG"));
    }
    let v = r.u16()?;
    if v != SIG_VERSION {
        return Err(Error::format(8, format!("unsupported version {v}")));
    }
    let channels = r.u16()? as usize;
    let rate = r.f64()?;
    let samples = r.u64()?;
    if channels == 0 {
        return Err(Error::format(10, "recording has no channels"));
    }
    if !(rate.is_finite() && rate > 0.0) {
        return Err(Error::format(12, format!("invalid sample rate {rate}")));
    }
    let want = (channels as u64).checked_mul(samples).and_then(|n| n.checked_mul(4));
    if want != Some((b.len() - SIG_HEADER) as u64) {
        return Err(Error::format(
            SIG_HEADER as u64,
            format!("{} payload bytes for {channels} channels of {samples} samples", b.len() - SIG_HEADER),
        ));
    }
    let n = samples as usize;
    let mut data = Vec::with_capacity(channels);
    for _ in 0..channels {
        let at = r.pos;
        let ch: Vec<f64> = r.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        if let Some(i) = ch.iter().position(|v| !v.is_finite()) {
            return Err(Error::format((at + 4 * i) as u64, "non-finite sample"));
        }
        data.push(ch);
    }
    Ok(RawRecording::new(data, rate)?)
}

pub fn read_recording(path: impl AsRef<Path>) -> Result<RawRecording> {
    let b = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    decode_recording(&b)
}

pub fn write_recording(path: impl AsRef<Path>, rec: &RawRecording) -> Result<()> {
    std::fs::write(path.as_ref(), encode_recording(rec)).map_err(|e| Error::io(&path, e))
}

/// One sidecar line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub index: usize,
    /// First sample of the window in the resampled recording.
    pub source_offset: usize,
    pub channels: usize,
    pub samples: usize,
    /// Per-channel (Q1, Q3) used for normalization.
    pub quartiles: Vec<[f64; 2]>,
}

pub fn window_name(i: usize) -> String {
    format!("window.{i:05}")
}

pub fn sidecar_path(archive: &Path) -> PathBuf {
    let mut s = archive.as_os_str().to_owned();
    s.push(".jsonl");
    PathBuf::from(s)
}

pub fn encode_archive(windows: &[Prepared]) -> (Container, Vec<WindowRecord>) {
    let mut c = Container::new();
    let mut recs = Vec::with_capacity(windows.len());
    for (i, p) in windows.iter().enumerate() {
        let m = p.window.data();
        let v: Vec<f32> = m.data().iter().map(|&x| x as f32).collect();
        c.push(Entry::f32(&window_name(i), &[m.rows(), m.cols()], &v));
        recs.push(WindowRecord {
            index: i,
            source_offset: p.window.source_offset(),
            channels: m.rows(),
            samples: m.cols(),
            quartiles: p.quartiles.iter().map(|&(a, b)| [a, b]).collect(),
        });
    }
    (c, recs)
}

pub fn write_archive(path: &Path, windows: &[Prepared]) -> Result<()> {
    let (c, recs) = encode_archive(windows);
    c.write(path)?;
    let side = sidecar_path(path);
    let mut out = Vec::new();
    for r in &recs {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    std::fs::File::create(&side).and_then(|mut f| f.write_all(&out)).map_err(|e| Error::io(&side, e))
}

/// Windows of an archive in index order.
pub fn archive_windows(c: &Container) -> Result<Vec<Matrix>> {
    c.entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            if e.name != window_name(i) || e.dims.len() != 2 {
                return Err(Error::Config(format!("archive entry {i} is `{}`, expected a {} matrix", e.name, window_name(i))));
            }
            Ok(Matrix::from_vec(e.dims[0] as usize, e.dims[1] as usize, e.to_f64()?)?)
        })
        .collect()
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<Vec<Matrix>> {
    archive_windows(&Container::read(path)?)
}

pub fn read_sidecar(path: &Path) -> Result<Vec<WindowRecord>> {
    let side = sidecar_path(path);
    let s = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let mut offset = 0u64;
    let mut out = Vec::new();
    for line in s.lines() {
        out.push(serde_json::from_str(line).map_err(|e| Error::format(offset, format!("sidecar: {e}")))?);
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(n: usize) -> RawRecording {
        RawRecording::new((0..3).map(|c| (0..n).map(|t| ((c + t) as f64 * 0.1).sin()).collect()).collect(), 256.0).unwrap()
    }

    #[test]
    fn recording_round_trip() {
        let r = rec(50);
        let b = encode_recording(&r);
        let back = decode_recording(&b).unwrap();
        assert_eq!(encode_recording(&back), b);
        assert_eq!(back.len(), 50);
        assert_eq!(back.channel_count(), 3);
    }

    #[test]
    fn malformed_recordings_name_offsets() {
        let b = encode_recording(&rec(10));
        let mut bad = b.clone();
        bad[3] = b'x';
        assert!(matches!(decode_recording(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode_recording(&b[..b.len() - 2]), Err(Error::Format { offset: 28, .. })));
        let mut nan = b.clone();
        nan[SIG_HEADER + 8..SIG_HEADER + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_recording(&nan), Err(Error::Format { offset: 36, .. })));
        assert!(decode_recording(&b[..5]).is_err());
    }

    #[test]
    fn sidecar_path_appends_suffix() {
        assert_eq!(sidecar_path(Path::new("a/w.fmbc")), PathBuf::from("a/w.fmbc.jsonl"));
    }
}
