//! IEEE binary16 field access and the grouped variable-length mantissa format.
//!
//! A group of FP16 values shares the largest unbiased exponent `E` among its
//! nonzero members. Every element keeps a sign flag and an `M`-bit magnitude in
//! Q1.(M-1) fixed point relative to `2^E`: the element's significand is
//! right-shifted by `E - e_i` and truncated to `M` bits. Decoding is exact in
//! binary32.

use crate::error::{Error, Result};
use crate::matrix::{ensure_same_shape, Matrix};

pub const DEFAULT_GROUP_SIZE: usize = 64;
pub const MIN_MANTISSA_LEN: u8 = 1;
pub const MAX_MANTISSA_LEN: u8 = 16;

/// Shared exponent stored for an all-zero group.
pub const ZERO_GROUP_EXP: i32 = -15;
/// Largest shared exponent a group may carry.
pub const MAX_SHARED_EXP: i32 = 16;

const FRACTION_BITS: u32 = 10;
const EXP_BIAS: i32 = 15;
const SUBNORMAL_EXP: i32 = 1 - EXP_BIAS;

/// A raw IEEE 754 binary16 bit pattern.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Half(u16);

impl Half {
    pub const ZERO: Half = Half(0);
    pub const ONE: Half = Half(0x3C00);

    pub const fn from_bits(bits: u16) -> Self {
        Half(bits)
    }

    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// Round-to-nearest-even conversion from binary32.
    pub fn from_f32(x: f32) -> Self {
        Half(half::f16::from_f32(x).to_bits())
    }

    pub fn to_f32(self) -> f32 {
        half::f16::from_bits(self.0).to_f32()
    }

    pub fn is_finite(self) -> bool {
        self.0 & 0x7C00 != 0x7C00
    }

    pub fn decompose(self) -> HalfFields {
        decompose(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HalfClass {
    Zero,
    Subnormal,
    Normal,
    Infinity,
    Nan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HalfFields {
    pub sign: bool,
    pub biased_exp: u8,
    pub fraction: u16,
    pub class: HalfClass,
}

impl HalfFields {
    pub fn to_bits(&self) -> u16 {
        (u16::from(self.sign) << 15) | (u16::from(self.biased_exp) << 10) | self.fraction
    }
}

pub fn decompose(h: Half) -> HalfFields {
    let bits = h.0;
    let sign = bits >> 15 != 0;
    let biased_exp = ((bits >> 10) & 0x1F) as u8;
    let fraction = bits & 0x3FF;
    let class = match (biased_exp, fraction) {
        (0, 0) => HalfClass::Zero,
        (0, _) => HalfClass::Subnormal,
        (31, 0) => HalfClass::Infinity,
        (31, _) => HalfClass::Nan,
        _ => HalfClass::Normal,
    };
    HalfFields {
        sign,
        biased_exp,
        fraction,
        class,
    }
}

/// Unbiased exponent and 11-bit integer significand (`1.f` or `0.f` scaled by
/// 2^10) of a finite nonzero value. `None` for zeros.
pub(crate) fn exponent_and_significand(f: &HalfFields) -> Option<(i32, u32)> {
    match f.class {
        HalfClass::Normal => Some((
            i32::from(f.biased_exp) - EXP_BIAS,
            (1 << FRACTION_BITS) | u32::from(f.fraction),
        )),
        HalfClass::Subnormal => Some((SUBNORMAL_EXP, u32::from(f.fraction))),
        _ => None,
    }
}

pub(crate) fn check_mantissa_len(m: u8) -> Result<()> {
    if !(MIN_MANTISSA_LEN..=MAX_MANTISSA_LEN).contains(&m) {
        return Err(Error::InvalidParams(format!(
            "mantissa length {m} outside {MIN_MANTISSA_LEN}..={MAX_MANTISSA_LEN}"
        )));
    }
    Ok(())
}

/// Exact binary32 power of two for exponents in the normal range.
pub(crate) fn pow2_f32(e: i32) -> f32 {
    debug_assert!((-126..=127).contains(&e));
    f32::from_bits(((e + 127) as u32) << 23)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AndaParams {
    group_size: usize,
    mantissa_len: u8,
}

impl AndaParams {
    pub fn new(group_size: usize, mantissa_len: u8) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::InvalidParams("group size must be positive".into()));
        }
        check_mantissa_len(mantissa_len)?;
        Ok(AndaParams {
            group_size,
            mantissa_len,
        })
    }

    /// Default group size of 64 with the given mantissa length.
    pub fn with_mantissa(mantissa_len: u8) -> Result<Self> {
        Self::new(DEFAULT_GROUP_SIZE, mantissa_len)
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn mantissa_len(&self) -> u8 {
        self.mantissa_len
    }
}

/// One shared-exponent group: a sign flag and an `M`-bit magnitude per element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AndaGroup {
    shared_exp: i32,
    signs: Vec<bool>,
    mantissas: Vec<u16>,
    mantissa_len: u8,
}

impl AndaGroup {
    pub fn new(shared_exp: i32, signs: Vec<bool>, mantissas: Vec<u16>, mantissa_len: u8) -> Result<Self> {
        check_mantissa_len(mantissa_len)?;
        if !(ZERO_GROUP_EXP..=MAX_SHARED_EXP).contains(&shared_exp) {
            return Err(Error::InvalidParams(format!(
                "shared exponent {shared_exp} outside {ZERO_GROUP_EXP}..={MAX_SHARED_EXP}"
            )));
        }
        if signs.len() != mantissas.len() {
            return Err(Error::LengthMismatch {
                expected: mantissas.len(),
                actual: signs.len(),
            });
        }
        let limit = 1u32 << mantissa_len;
        if let Some(m) = mantissas.iter().find(|&&m| u32::from(m) >= limit) {
            return Err(Error::InvalidParams(format!(
                "mantissa {m} does not fit in {mantissa_len} bits"
            )));
        }
        Ok(AndaGroup {
            shared_exp,
            signs,
            mantissas,
            mantissa_len,
        })
    }

    /// A group of `len` zeros.
    pub fn zeros(len: usize, mantissa_len: u8) -> Result<Self> {
        Self::new(ZERO_GROUP_EXP, vec![false; len], vec![0; len], mantissa_len)
    }

    pub fn shared_exp(&self) -> i32 {
        self.shared_exp
    }

    pub fn signs(&self) -> &[bool] {
        &self.signs
    }

    pub fn mantissas(&self) -> &[u16] {
        &self.mantissas
    }

    pub fn mantissa_len(&self) -> u8 {
        self.mantissa_len
    }

    pub fn len(&self) -> usize {
        self.mantissas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mantissas.is_empty()
    }

    /// Weight of one mantissa LSB: `2^(E - (M-1))`.
    pub fn lsb_exponent(&self) -> i32 {
        self.shared_exp - (i32::from(self.mantissa_len) - 1)
    }
}

/// Convert a list of FP16 values to one group with `m`-bit mantissas.
pub fn encode_group(values: &[Half], m: u8) -> Result<AndaGroup> {
    check_mantissa_len(m)?;
    let mut parts = Vec::with_capacity(values.len());
    for (index, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteInput { index });
        }
        let fields = v.decompose();
        parts.push((fields.sign, exponent_and_significand(&fields)));
    }
    let shared_exp = parts
        .iter()
        .filter_map(|(_, p)| p.map(|(e, _)| e))
        .max()
        .unwrap_or(ZERO_GROUP_EXP);

    let mut signs = Vec::with_capacity(parts.len());
    let mut mantissas = Vec::with_capacity(parts.len());
    for (sign, p) in parts {
        signs.push(sign);
        let mantissa = match p {
            None => 0,
            Some((e, sig)) => {
                let shift = FRACTION_BITS + (shared_exp - e) as u32;
                ((u64::from(sig) << (m - 1)) >> shift) as u16
            }
        };
        mantissas.push(mantissa);
    }
    Ok(AndaGroup {
        shared_exp,
        signs,
        mantissas,
        mantissa_len: m,
    })
}

/// Exact binary32 values of a group. A zero mantissa decodes to +0.
pub fn decode_group(g: &AndaGroup) -> Vec<f32> {
    let scale = pow2_f32(g.lsb_exponent());
    g.mantissas
        .iter()
        .zip(&g.signs)
        .map(|(&m, &s)| {
            if m == 0 {
                0.0
            } else {
                let v = f32::from(m) * scale;
                if s {
                    -v
                } else {
                    v
                }
            }
        })
        .collect()
}

/// A matrix stored as groups tiled along the column (reduction) dimension.
/// Each row owns `ceil(cols / group_size)` groups; the last one is zero-padded
/// to the full group size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AndaTensor {
    rows: usize,
    cols: usize,
    params: AndaParams,
    groups: Vec<AndaGroup>,
}

impl AndaTensor {
    pub fn from_groups(rows: usize, cols: usize, params: AndaParams, groups: Vec<AndaGroup>) -> Result<Self> {
        let per_row = cols.div_ceil(params.group_size);
        if groups.len() != rows * per_row {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} tensor needs {} groups, got {}",
                rows * per_row,
                groups.len()
            )));
        }
        for g in &groups {
            if g.len() != params.group_size || g.mantissa_len != params.mantissa_len {
                return Err(Error::ShapeMismatch(format!(
                    "group of {} elements at M={} in a tensor with group size {} and M={}",
                    g.len(),
                    g.mantissa_len,
                    params.group_size,
                    params.mantissa_len
                )));
            }
        }
        Ok(AndaTensor {
            rows,
            cols,
            params,
            groups,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn params(&self) -> AndaParams {
        self.params
    }

    pub fn groups(&self) -> &[AndaGroup] {
        &self.groups
    }

    pub fn groups_per_row(&self) -> usize {
        self.cols.div_ceil(self.params.group_size)
    }

    pub fn group(&self, row: usize, index: usize) -> &AndaGroup {
        &self.groups[row * self.groups_per_row() + index]
    }
}

pub fn encode_tensor(matrix: &Matrix<Half>, params: AndaParams) -> Result<AndaTensor> {
    let gs = params.group_size;
    let cols = matrix.cols();
    let per_row = cols.div_ceil(gs);
    let mut groups = Vec::with_capacity(matrix.rows() * per_row);
    let mut buf = vec![Half::ZERO; gs];
    for r in 0..matrix.rows() {
        let row = matrix.row(r);
        for (gi, chunk) in row.chunks(gs).enumerate() {
            buf[..chunk.len()].copy_from_slice(chunk);
            buf[chunk.len()..].fill(Half::ZERO);
            let g = encode_group(&buf, params.mantissa_len).map_err(|e| match e {
                Error::NonFiniteInput { index } => Error::NonFiniteInput {
                    index: r * cols + gi * gs + index,
                },
                other => other,
            })?;
            groups.push(g);
        }
    }
    Ok(AndaTensor {
        rows: matrix.rows(),
        cols,
        params,
        groups,
    })
}

pub fn decode_tensor(t: &AndaTensor) -> Matrix<f32> {
    let mut data = Vec::with_capacity(t.rows * t.cols);
    let per_row = t.groups_per_row();
    for r in 0..t.rows {
        let mut remaining = t.cols;
        for g in &t.groups[r * per_row..(r + 1) * per_row] {
            let vals = decode_group(g);
            let take = remaining.min(vals.len());
            data.extend_from_slice(&vals[..take]);
            remaining -= take;
        }
    }
    Matrix::new(t.rows, t.cols, data).expect("decoded size matches tensor shape")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorStats {
    pub max_abs: f64,
    pub rmse: f64,
    pub nrmse: f64,
}

/// Max-abs, RMS and reference-normalized RMS error. NRMSE is 0 for an
/// all-zero reference.
pub fn error_stats(original: &Matrix<f32>, decoded: &Matrix<f32>) -> Result<ErrorStats> {
    ensure_same_shape(original, decoded)?;
    Ok(error_stats_slices(original.data(), decoded.data()))
}

pub(crate) fn error_stats_slices(original: &[f32], decoded: &[f32]) -> ErrorStats {
    let n = original.len();
    if n == 0 {
        return ErrorStats {
            max_abs: 0.0,
            rmse: 0.0,
            nrmse: 0.0,
        };
    }
    let mut max_abs = 0.0f64;
    let mut err_sq = 0.0f64;
    let mut ref_sq = 0.0f64;
    for (&o, &d) in original.iter().zip(decoded) {
        let diff = (f64::from(o) - f64::from(d)).abs();
        max_abs = max_abs.max(diff);
        err_sq += diff * diff;
        ref_sq += f64::from(o) * f64::from(o);
    }
    let rmse = (err_sq / n as f64).sqrt();
    let rms = (ref_sq / n as f64).sqrt();
    let nrmse = if rms == 0.0 { 0.0 } else { rmse / rms };
    ErrorStats {
        max_abs,
        rmse,
        nrmse,
    }
}
