//! Cycle-level functional model of the bit-plane compressor.
//!
//! Each lane aligns up to 64 FP16 values against their maximum exponent and
//! emits one bit-plane per cycle. An element whose exponent difference is
//! nonzero outputs 0 and decrements the difference; once it reaches zero the
//! element shifts out the MSB of its remaining significand every cycle.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::layout::{unpack_group, PackedGroup, LANES};
use crate::matrix::Matrix;
use crate::numfmt::{
    check_mantissa_len, exponent_and_significand, AndaGroup, AndaParams, AndaTensor, Half, ZERO_GROUP_EXP,
};

const SIG_MSB: u32 = 10;
const SIG_MASK: u32 = (1 << 11) - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BpcConfig {
    pub lanes: usize,
    pub lane_width: usize,
    /// Cycles before the first plane leaves the aligner.
    pub latency: usize,
}

impl Default for BpcConfig {
    fn default() -> Self {
        BpcConfig {
            lanes: 16,
            lane_width: LANES,
            latency: 0,
        }
    }
}

impl BpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lanes == 0 {
            return Err(Error::InvalidParams("compressor needs at least one lane".into()));
        }
        if self.lane_width == 0 || self.lane_width > LANES {
            return Err(Error::InvalidParams(format!("lane width {} outside 1..=64", self.lane_width)));
        }
        Ok(())
    }
}

/// Per-element aligner registers.
#[derive(Clone, Debug)]
pub struct AlignerState {
    /// Remaining exponent difference; `None` marks an exact zero, which never emits.
    pub diffs: Vec<Option<u32>>,
    /// Residual significand, MSB at bit 10.
    pub shift_regs: Vec<u32>,
    pub cycle: usize,
}

impl AlignerState {
    fn load(values: &[Half]) -> Result<(Self, i32, u64)> {
        let mut parts = Vec::with_capacity(values.len());
        let mut sign_plane = 0u64;
        for (index, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteInput { index });
            }
            let f = v.decompose();
            sign_plane |= u64::from(f.sign) << index;
            parts.push(exponent_and_significand(&f));
        }
        let shared_exp = parts
            .iter()
            .flatten()
            .map(|&(e, _)| e)
            .max()
            .unwrap_or(ZERO_GROUP_EXP);
        let diffs = parts
            .iter()
            .map(|p| p.map(|(e, _)| (shared_exp - e) as u32))
            .collect();
        let shift_regs = parts.iter().map(|p| p.map_or(0, |(_, s)| s)).collect();
        Ok((
            AlignerState {
                diffs,
                shift_regs,
                cycle: 0,
            },
            shared_exp,
            sign_plane,
        ))
    }

    /// Advance one cycle and return the emitted plane as a lane bitmask.
    pub fn step(&mut self) -> u64 {
        let mut plane = 0u64;
        for (i, (diff, reg)) in self.diffs.iter_mut().zip(self.shift_regs.iter_mut()).enumerate() {
            match diff {
                None => {}
                Some(0) => {
                    plane |= u64::from((*reg >> SIG_MSB) & 1) << i;
                    *reg = (*reg << 1) & SIG_MASK;
                }
                Some(d) => *d -= 1,
            }
        }
        self.cycle += 1;
        plane
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SerialCompression {
    pub group: AndaGroup,
    /// Emitted planes in cycle order (MSB plane first).
    pub planes: Vec<u64>,
    pub cycles: usize,
}

/// Run the aligner for `mantissa_len` cycles over one group of at most 64 values.
pub fn compress_group_serial(values: &[Half], mantissa_len: u8, cfg: &BpcConfig) -> Result<SerialCompression> {
    check_mantissa_len(mantissa_len)?;
    cfg.validate()?;
    if values.len() > cfg.lane_width {
        return Err(Error::GroupTooWide(values.len()));
    }
    let (mut state, shared_exp, sign_plane) = AlignerState::load(values)?;
    let planes: Vec<u64> = (0..mantissa_len).map(|_| state.step()).collect();
    let packed = PackedGroup {
        sign_plane,
        planes: planes.clone(),
        shared_exp_byte: shared_exp as i8 as u8,
    };
    Ok(SerialCompression {
        group: unpack_group(&packed, mantissa_len, values.len())?,
        planes,
        cycles: usize::from(mantissa_len) + cfg.latency,
    })
}

/// Compress a whole FP16 matrix; groups are distributed over the lanes in
/// batches of `cfg.lanes`.
pub fn compress_tensor(a: &Matrix<Half>, params: AndaParams, cfg: &BpcConfig) -> Result<(AndaTensor, u64)> {
    cfg.validate()?;
    let gs = params.group_size();
    if gs > cfg.lane_width {
        return Err(Error::GroupTooWide(gs));
    }
    let m = params.mantissa_len();
    let cols = a.cols();
    let mut groups = Vec::with_capacity(a.rows() * cols.div_ceil(gs));
    let mut buf = vec![Half::ZERO; gs];
    for r in 0..a.rows() {
        for (gi, chunk) in a.row(r).chunks(gs).enumerate() {
            buf[..chunk.len()].copy_from_slice(chunk);
            buf[chunk.len()..].fill(Half::ZERO);
            let out = compress_group_serial(&buf, m, cfg).map_err(|e| match e {
                Error::NonFiniteInput { index } => Error::NonFiniteInput {
                    index: r * cols + gi * gs + index,
                },
                other => other,
            })?;
            groups.push(out.group);
        }
    }
    let cycles = tensor_cycles(groups.len() as u64, m, cfg);
    Ok((AndaTensor::from_groups(a.rows(), cols, params, groups)?, cycles))
}

/// `ceil(groups / lanes) * (M + latency)`.
pub fn tensor_cycles(group_count: u64, mantissa_len: u8, cfg: &BpcConfig) -> u64 {
    group_count.div_ceil(cfg.lanes as u64) * (u64::from(mantissa_len) + cfg.latency as u64)
}

/// Debug dump: one line per cycle with the emitted lane bitmask.
pub fn format_trace(planes: &[u64]) -> String {
    let mut s = String::new();
    for (c, p) in planes.iter().enumerate() {
        let _ = writeln!(s, "cycle {c:>2}: {p:#018x}");
    }
    s
}
