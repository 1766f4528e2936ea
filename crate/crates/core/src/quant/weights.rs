//! Per-channel weight quantization, ternarization and 2-bit packing.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::fixed::round_half_away;
use crate::tensor::Matrix;

/// Fraction of the mean magnitude below which a weight becomes zero.
pub const TERNARY_THRESHOLD: f64 = 0.7;

/// Integer weights with one scale per output channel (row).
#[derive(Debug, Clone, PartialEq)]
pub struct PerChannelQuantWeights {
    pub rows: usize,
    pub cols: usize,
    pub q: Vec<i8>,
    pub scales: Vec<f64>,
    pub bits: u32,
}

impl PerChannelQuantWeights {
    pub fn qmax(bits: u32) -> i64 {
        (1i64 << (bits - 1)) - 1
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.q[r * self.cols..(r + 1) * self.cols]
    }

    pub fn dequantize(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |r, c| self.scales[r] * self.q[r * self.cols + c] as f64)
    }
}

/// Scales are rounded to `f32` before use so that a stored image carries
/// exactly the scale its integers were computed with.
fn f32_exact(x: f64) -> f64 {
    x as f32 as f64
}

/// `s_c = max|W_c| / (2^(b-1) - 1)`, `q = round(W / s)`; an all-zero row
/// gets `s = 1`.
pub fn quantize_weights(w: &Matrix, bits: u32) -> Result<PerChannelQuantWeights> {
    if !(2..=8).contains(&bits) {
        bail!(Config, "weight bits must be in 2..=8, got {}", bits);
    }
    if !w.all_finite() {
        bail!(Numeric, "weights contain non-finite values");
    }
    let qmax = PerChannelQuantWeights::qmax(bits);
    let (rows, cols) = w.shape();
    let mut q = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = w.row(r);
        let m = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let s = if m == 0.0 { 1.0 } else { f32_exact(m / qmax as f64) };
        scales.push(s);
        q.extend(row.iter().map(|v| round_half_away(v / s).clamp(-qmax as f64, qmax as f64) as i8));
    }
    Ok(PerChannelQuantWeights { rows, cols, q, scales, bits })
}

/// Ternary weights: per row, `t = 0.7·mean|w|`, `q = sign(w)` where
/// `|w| > t`, and `s` is the mean magnitude of the surviving entries.
pub fn ternarize(w: &Matrix) -> Result<PerChannelQuantWeights> {
    if !w.all_finite() {
        bail!(Numeric, "weights contain non-finite values");
    }
    let (rows, cols) = w.shape();
    let mut q = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = w.row(r);
        let mean = row.iter().map(|v| v.abs()).sum::<f64>() / cols.max(1) as f64;
        let t = TERNARY_THRESHOLD * mean;
        let (mut sum, mut n) = (0.0, 0usize);
        for &v in row {
            if v.abs() > t {
                sum += v.abs();
                n += 1;
                q.push(if v > 0.0 { 1 } else { -1 });
            } else {
                q.push(0);
            }
        }
        scales.push(if n == 0 { 1.0 } else { f32_exact(sum / n as f64) });
    }
    Ok(PerChannelQuantWeights { rows, cols, q, scales, bits: 2 })
}

/// Ternary values packed 16 per little-endian 32-bit word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TernaryPacked {
    pub words: Vec<u32>,
    pub count: usize,
}

pub const TERNARY_PER_WORD: usize = 16;

#[inline]
pub fn ternary_code(v: i8) -> Option<u32> {
    match v {
        -1 => Some(0),
        0 => Some(1),
        1 => Some(2),
        _ => None,
    }
}

#[inline]
pub fn ternary_value(code: u32) -> Option<i8> {
    match code {
        0 => Some(-1),
        1 => Some(0),
        2 => Some(1),
        _ => None,
    }
}

pub fn packed_words(count: usize) -> usize {
    count.div_ceil(TERNARY_PER_WORD)
}

/// Weight `i` occupies bits `2(i mod 16)..2(i mod 16)+2` of word `i / 16`
/// with the map `{-1, 0, +1} → {0, 1, 2}`. Padding fields encode zero.
pub fn pack_ternary(q: &[i8]) -> Result<TernaryPacked> {
    let mut words = vec![0x5555_5555u32; packed_words(q.len())];
    for (i, &v) in q.iter().enumerate() {
        let Some(code) = ternary_code(v) else {
            bail!(Encoding, "value {} at index {} is not ternary", v, i);
        };
        let shift = 2 * (i % TERNARY_PER_WORD);
        let w = &mut words[i / TERNARY_PER_WORD];
        *w = (*w & !(0b11 << shift)) | (code << shift);
    }
    Ok(TernaryPacked { words, count: q.len() })
}

impl TernaryPacked {
    /// Value at flat index `i` (a 2-bit code of 3 decodes as zero; use
    /// [`unpack_ternary`] to validate).
    #[inline]
    pub fn get(&self, i: usize) -> i8 {
        let code = (self.words[i / TERNARY_PER_WORD] >> (2 * (i % TERNARY_PER_WORD))) & 0b11;
        code as i8 - 1 - ((code == 3) as i8) * 2
    }

    pub fn byte_len(&self) -> usize {
        self.words.len() * 4
    }
}

pub fn unpack_ternary(p: &TernaryPacked) -> Result<Vec<i8>> {
    if p.words.len() != packed_words(p.count) {
        bail!(Encoding, "{} words cannot hold exactly {} values", p.words.len(), p.count);
    }
    (0..p.count)
        .map(|i| {
            let code = (p.words[i / TERNARY_PER_WORD] >> (2 * (i % TERNARY_PER_WORD))) & 0b11;
            ternary_value(code).ok_or_else(|| crate::Error::Encoding(alloc::format!("invalid field 0b11 at index {i}")))
        })
        .collect()
}
