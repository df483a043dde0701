//! Symmetric round-to-nearest INT weight quantization with per-group scales.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_WEIGHT_GROUP: usize = 128;
pub const DEFAULT_WEIGHT_BITS: u8 = 4;

/// K x N signed integer weights with one binary32 scale per
/// (K-group, column).
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedWeightMatrix {
    k: usize,
    n: usize,
    values: Vec<i8>,
    scales: Vec<f32>,
    group_size: usize,
    bits: u8,
}

fn check_bits(bits: u8) -> Result<()> {
    if !(2..=8).contains(&bits) {
        return Err(Error::InvalidParams(format!("weight bit width {bits} outside 2..=8")));
    }
    Ok(())
}

fn signed_range(bits: u8) -> (i32, i32) {
    let half = 1i32 << (bits - 1);
    (-half, half - 1)
}

impl QuantizedWeightMatrix {
    /// Assemble from raw parts, validating ranges and scale count.
    pub fn from_parts(
        k: usize,
        n: usize,
        values: Vec<i8>,
        scales: Vec<f32>,
        group_size: usize,
        bits: u8,
    ) -> Result<Self> {
        check_bits(bits)?;
        if group_size == 0 || k == 0 {
            return Err(Error::InvalidParams("K and weight group size must be positive".into()));
        }
        if values.len() != k * n {
            return Err(Error::ShapeMismatch(format!(
                "{k}x{n} weights need {} values, got {}",
                k * n,
                values.len()
            )));
        }
        let expected_scales = k.div_ceil(group_size) * n;
        if scales.len() != expected_scales {
            return Err(Error::ShapeMismatch(format!(
                "expected {expected_scales} scales, got {}",
                scales.len()
            )));
        }
        let (lo, hi) = signed_range(bits);
        if let Some(v) = values.iter().find(|&&v| !(lo..=hi).contains(&i32::from(v))) {
            return Err(Error::InvalidParams(format!("weight {v} outside {bits}-bit range")));
        }
        if let Some(s) = scales.iter().find(|s| !s.is_finite()) {
            return Err(Error::InvalidParams(format!("non-finite scale {s}")));
        }
        Ok(QuantizedWeightMatrix {
            k,
            n,
            values,
            scales,
            group_size,
            bits,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    /// Row-major K x N integer values.
    pub fn values(&self) -> &[i8] {
        &self.values
    }

    /// Row-major (K-groups) x N scales.
    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn value(&self, k: usize, n: usize) -> i8 {
        self.values[k * self.n + n]
    }

    pub fn scale(&self, k: usize, n: usize) -> f32 {
        self.scales[(k / self.group_size) * self.n + n]
    }

    pub fn scale_groups(&self) -> usize {
        self.k.div_ceil(self.group_size)
    }
}

/// Per-group symmetric scale `max|w| / (2^(bits-1) - 1)`, values rounded half
/// away from zero and clamped to the signed range. All-zero groups get scale 1.
pub fn quantize_rtn(w: &Matrix<f32>, group_size: usize, bits: u8) -> Result<QuantizedWeightMatrix> {
    check_bits(bits)?;
    let (k, n) = w.shape();
    if k == 0 || group_size == 0 {
        return Err(Error::InvalidParams("K and weight group size must be positive".into()));
    }
    if let Some(index) = w.data().iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput { index });
    }
    let (lo, hi) = signed_range(bits);
    let qmax = hi as f32;
    let groups = k.div_ceil(group_size);
    let mut scales = vec![1.0f32; groups * n];
    let mut values = vec![0i8; k * n];
    for g in 0..groups {
        let rows = g * group_size..((g + 1) * group_size).min(k);
        for c in 0..n {
            let amax = rows.clone().map(|r| w.get(r, c).abs()).fold(0.0f32, f32::max);
            let scale = if amax == 0.0 { 1.0 } else { amax / qmax };
            scales[g * n + c] = scale;
            for r in rows.clone() {
                let q = (w.get(r, c) / scale).round().clamp(lo as f32, hi as f32);
                values[r * n + c] = q as i8;
            }
        }
    }
    QuantizedWeightMatrix::from_parts(k, n, values, scales, group_size, bits)
}

pub fn dequantize(q: &QuantizedWeightMatrix) -> Matrix<f32> {
    Matrix::from_fn(q.k, q.n, |r, c| f32::from(q.value(r, c)) * q.scale(r, c))
}
