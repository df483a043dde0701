//! Functional model of the bit-serial processing unit and the GeMM built on it.
//!
//! A group dot product consumes one mantissa bit-plane per cycle. Within a
//! plane the sign-adjusted weights of all set lanes are summed by an adder
//! tree; the single plane partial is then folded into a shared accumulator as
//! `acc = 2 * acc + partial`.

use crate::error::{Error, Result};
use crate::layout::{pack_group, PackedGroup, LANES};
use crate::matrix::Matrix;
use crate::numfmt::{encode_tensor, AndaGroup, AndaParams, AndaTensor, Half, DEFAULT_GROUP_SIZE};
use crate::weights::QuantizedWeightMatrix;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DotTrace {
    /// Adder-tree output for each plane, MSB plane first.
    pub partials: Vec<i64>,
    /// Accumulator value after each cycle.
    pub accumulator: Vec<i64>,
    pub result: i64,
    pub cycles: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OutputDtype {
    /// Round-to-nearest-even from the binary32 accumulator.
    F16,
    #[default]
    F32,
}

/// GeMM settings. Groups are always traversed in ascending K order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GemmConfig {
    pub output: OutputDtype,
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::LengthMismatch { expected, actual });
    }
    Ok(())
}

/// Exact signed dot product of a group against integer weights.
pub fn group_dot_reference(g: &AndaGroup, w: &[i8]) -> Result<i64> {
    check_len(g.len(), w.len())?;
    Ok(g
        .mantissas()
        .iter()
        .zip(g.signs())
        .zip(w)
        .map(|((&m, &s), &wi)| {
            let p = i64::from(m) * i64::from(wi);
            if s {
                -p
            } else {
                p
            }
        })
        .sum())
}

fn signed_weights(sign_plane: u64, w: &[i8], out: &mut [i64; LANES]) {
    for (i, &wi) in w.iter().enumerate() {
        let v = i64::from(wi);
        out[i] = if (sign_plane >> i) & 1 == 1 { -v } else { v };
    }
    out[w.len()..].fill(0);
}

fn plane_partial(plane: u64, signed: &[i64; LANES]) -> i64 {
    let mut bits = plane;
    let mut sum = 0;
    while bits != 0 {
        sum += signed[bits.trailing_zeros() as usize];
        bits &= bits - 1;
    }
    sum
}

fn check_lanes(p: &PackedGroup, len: usize) -> Result<()> {
    if len > LANES {
        return Err(Error::LengthMismatch {
            expected: LANES,
            actual: len,
        });
    }
    let mask = if len == LANES { u64::MAX } else { (1u64 << len) - 1 };
    let used = p.planes.iter().fold(p.sign_plane, |acc, w| acc | w);
    if used & !mask != 0 {
        return Err(Error::LengthMismatch {
            expected: 64 - (used.leading_zeros() as usize),
            actual: len,
        });
    }
    Ok(())
}

/// Bit-serial dot product over a packed group, with its per-cycle trace.
pub fn group_dot_bitserial(p: &PackedGroup, w: &[i8]) -> Result<(i64, DotTrace)> {
    check_lanes(p, w.len())?;
    let mut signed = [0i64; LANES];
    signed_weights(p.sign_plane, w, &mut signed);
    let mut partials = Vec::with_capacity(p.planes.len());
    let mut accumulator = Vec::with_capacity(p.planes.len());
    let mut acc = 0i64;
    for &plane in &p.planes {
        let partial = plane_partial(plane, &signed);
        acc = 2 * acc + partial;
        partials.push(partial);
        accumulator.push(acc);
    }
    Ok((
        acc,
        DotTrace {
            partials,
            accumulator,
            result: acc,
            cycles: p.planes.len(),
        },
    ))
}

/// Trace-free variant of [`group_dot_bitserial`] used by the GeMM loop.
fn bitserial_dot(planes: &[u64], signed: &[i64; LANES]) -> i64 {
    planes
        .iter()
        .fold(0i64, |acc, &plane| 2 * acc + plane_partial(plane, signed))
}

/// `acc * 2^(E - (M-1)) * w_scale`, evaluated in binary64 and rounded once to
/// binary32.
pub fn scale_group_result(acc: i64, shared_exp: i32, mantissa_len: u8, w_scale: f32) -> Result<f32> {
    if !w_scale.is_finite() {
        return Err(Error::InvalidParams(format!("non-finite weight scale {w_scale}")));
    }
    if acc == 0 {
        return Ok(0.0);
    }
    let shift = shared_exp - (i32::from(mantissa_len) - 1);
    let wide = acc as f64 * 2f64.powi(shift) * f64::from(w_scale);
    let out = wide as f32;
    if !out.is_finite() {
        return Err(Error::Overflow);
    }
    Ok(out)
}

/// Mixed-format GeMM: grouped activations (T x K) times INT weights (K x N).
///
/// Each activation group is reduced bit-serially against the matching weight
/// slice, scaled by its shared exponent and the containing weight group's
/// scale, and accumulated in binary32 in ascending K order.
pub fn gemm_anda(a: &AndaTensor, w: &QuantizedWeightMatrix, cfg: &GemmConfig) -> Result<Matrix<f32>> {
    if a.cols() != w.k() {
        return Err(Error::ShapeMismatch(format!(
            "activations have K={}, weights have K={}",
            a.cols(),
            w.k()
        )));
    }
    let gs = a.params().group_size();
    if gs > LANES {
        return Err(Error::GroupTooWide(gs));
    }
    if !w.group_size().is_multiple_of(gs) {
        return Err(Error::ShapeMismatch(format!(
            "activation group size {gs} does not divide weight group size {}",
            w.group_size()
        )));
    }
    let (k, n) = (w.k(), w.n());
    let per_row = a.groups_per_row();
    let m = a.params().mantissa_len();

    // Pack every activation group once; the same planes are reused for all N.
    let packed: Vec<PackedGroup> = a.groups().iter().map(pack_group).collect::<Result<_>>()?;
    // Column-major copy of the weights so each group's slice is contiguous.
    let mut wt = vec![0i8; k * n];
    for r in 0..k {
        for c in 0..n {
            wt[c * k + r] = w.value(r, c);
        }
    }

    let mut out = Matrix::filled(a.rows(), n, 0.0f32);
    let mut signed = [0i64; LANES];
    for t in 0..a.rows() {
        let row_groups = &packed[t * per_row..(t + 1) * per_row];
        for c in 0..n {
            let col = &wt[c * k..(c + 1) * k];
            let mut acc = 0.0f32;
            for (gi, p) in row_groups.iter().enumerate() {
                let start = gi * gs;
                let end = (start + gs).min(k);
                let w_slice = &col[start..end];
                signed_weights(p.sign_plane, w_slice, &mut signed);
                let dot = bitserial_dot(&p.planes, &signed);
                acc += scale_group_result(dot, p.shared_exp(), m, w.scale(start, c))?;
            }
            let v = match cfg.output {
                OutputDtype::F32 => acc,
                OutputDtype::F16 => Half::from_f32(acc).to_f32(),
            };
            out.set(t, c, v);
        }
    }
    Ok(out)
}

/// Baseline semantics: FP16 activations promoted to binary32, multiplied by
/// dequantized weights and accumulated in binary32 in ascending K order.
pub fn gemm_fp16_reference(a: &Matrix<Half>, w: &Matrix<f32>) -> Result<Matrix<f32>> {
    if a.cols() != w.rows() {
        return Err(Error::ShapeMismatch(format!(
            "activations have K={}, weights have K={}",
            a.cols(),
            w.rows()
        )));
    }
    let (k, n) = w.shape();
    let mut out = Matrix::filled(a.rows(), n, 0.0f32);
    for t in 0..a.rows() {
        let row: Vec<f32> = a.row(t).iter().map(|h| h.to_f32()).collect();
        for c in 0..n {
            let mut acc = 0.0f32;
            for (r, &x) in row.iter().enumerate().take(k) {
                acc += x * w.get(r, c);
            }
            out.set(t, c, acc);
        }
    }
    Ok(out)
}

/// FP16 activations against INT weights with the same accumulation structure
/// as [`gemm_anda`]: each `group_size` slice is summed in binary64, scaled,
/// rounded once to binary32 and accumulated in ascending K order. Equals
/// `gemm_anda` bit for bit whenever encoding is lossless.
pub fn gemm_fp16_grouped(a: &Matrix<Half>, w: &QuantizedWeightMatrix, group_size: usize) -> Result<Matrix<f32>> {
    if a.cols() != w.k() {
        return Err(Error::ShapeMismatch(format!(
            "activations have K={}, weights have K={}",
            a.cols(),
            w.k()
        )));
    }
    if group_size == 0 || !w.group_size().is_multiple_of(group_size) {
        return Err(Error::ShapeMismatch(format!(
            "activation group size {group_size} does not divide weight group size {}",
            w.group_size()
        )));
    }
    let (k, n) = (w.k(), w.n());
    let mut out = Matrix::filled(a.rows(), n, 0.0f32);
    for t in 0..a.rows() {
        let row: Vec<f64> = a.row(t).iter().map(|h| f64::from(h.to_f32())).collect();
        for c in 0..n {
            let mut acc = 0.0f32;
            for start in (0..k).step_by(group_size) {
                let end = (start + group_size).min(k);
                let dot: f64 = (start..end).map(|r| row[r] * f64::from(w.value(r, c))).sum();
                let v = (dot * f64::from(w.scale(start, c))) as f32;
                if !v.is_finite() {
                    return Err(Error::Overflow);
                }
                acc += v;
            }
            out.set(t, c, acc);
        }
    }
    Ok(out)
}

/// Uniform-mantissa block floating point baseline (group size 64).
pub fn gemm_bfp_uniform(
    a: &Matrix<Half>,
    mantissa_len: u8,
    w: &QuantizedWeightMatrix,
    cfg: &GemmConfig,
) -> Result<Matrix<f32>> {
    let params = AndaParams::new(DEFAULT_GROUP_SIZE, mantissa_len)?;
    gemm_anda(&encode_tensor(a, params)?, w, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numfmt::{encode_group, error_stats};
    use crate::weights::{dequantize, quantize_rtn};
    use proptest::prelude::*;

    fn worked_group() -> AndaGroup {
        AndaGroup::new(0, vec![false, false, true, false], vec![12, 2, 0, 0], 4).unwrap()
    }

    #[test]
    fn reference_dot_examples() {
        let g = worked_group();
        assert_eq!(group_dot_reference(&g, &[2, -1, 3, 7]).unwrap(), 22);
        assert_eq!(group_dot_reference(&g, &[0; 4]).unwrap(), 0);
        let z = AndaGroup::zeros(4, 4).unwrap();
        assert_eq!(group_dot_reference(&z, &[1, 2, 3, 4]).unwrap(), 0);
        assert!(matches!(
            group_dot_reference(&g, &[1, 2]),
            Err(Error::LengthMismatch { expected: 4, actual: 2 })
        ));
    }

    #[test]
    fn bitserial_trace_of_worked_group() {
        let p = pack_group(&worked_group()).unwrap();
        let (r, trace) = group_dot_bitserial(&p, &[2, -1, 3, 7]).unwrap();
        assert_eq!(r, 22);
        assert_eq!(trace.partials, vec![2, 2, -1, 0]);
        assert_eq!(trace.accumulator, vec![2, 6, 11, 22]);
        assert_eq!(trace.cycles, 4);
        let folded: i64 = trace
            .partials
            .iter()
            .enumerate()
            .map(|(k, &p)| p << (3 - k))
            .sum();
        assert_eq!(folded, 22);
    }

    #[test]
    fn bitserial_single_plane() {
        let g = AndaGroup::new(0, vec![false, true, true, false], vec![1, 1, 0, 1], 1).unwrap();
        let p = pack_group(&g).unwrap();
        let (r, trace) = group_dot_bitserial(&p, &[3, 5, -7, -2]).unwrap();
        assert_eq!(r, 3 - 5 - 2);
        assert_eq!(trace.cycles, 1);
    }

    #[test]
    fn bitserial_rejects_short_weights() {
        let p = pack_group(&worked_group()).unwrap();
        assert!(matches!(group_dot_bitserial(&p, &[1]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn exhaustive_small_lattice() {
        // Every 4-element group at M=2 (4^4 mantissa tuples x 2^4 signs)
        // against a lattice of int4 weight vectors.
        let weights: Vec<[i8; 4]> = (0..200u32)
            .map(|i| {
                let mut s = i.wrapping_mul(2654435761);
                std::array::from_fn(|_| {
                    s = s.rotate_left(7) ^ 0x9E37_79B9;
                    ((s % 16) as i8) - 8
                })
            })
            .collect();
        for mant_code in 0..256u32 {
            for sign_code in 0..16u32 {
                let ms: Vec<u16> = (0..4).map(|i| ((mant_code >> (2 * i)) & 3) as u16).collect();
                let ss: Vec<bool> = (0..4).map(|i| (sign_code >> i) & 1 == 1).collect();
                let g = AndaGroup::new(0, ss, ms, 2).unwrap();
                let p = pack_group(&g).unwrap();
                for w in weights.iter().step_by(17) {
                    assert_eq!(
                        group_dot_bitserial(&p, w).unwrap().0,
                        group_dot_reference(&g, w).unwrap()
                    );
                }
            }
        }
    }

    #[test]
    fn grouped_reference_matches_lossless_gemm() {
        // One exponent per group, so M=11 and above are lossless.
        let a = Matrix::from_fn(5, 200, |r, c| {
            let frac = ((r * 200 + c) * 37 % 1024) as u16;
            let sign = u16::from((r + c) % 3 == 0) << 15;
            Half::from_bits(sign | (14 << 10) | frac)
        });
        let w = quantize_rtn(&Matrix::from_fn(200, 7, |r, c| ((r * 7 + c) as f32 * 0.61).cos()), 128, 4).unwrap();
        let grouped = gemm_fp16_grouped(&a, &w, 64).unwrap();
        for m in [11u8, 16] {
            let anda = gemm_bfp_uniform(&a, m, &w, &GemmConfig::default()).unwrap();
            assert_eq!(anda, grouped);
        }
        let plain = gemm_fp16_reference(&a, &dequantize(&w)).unwrap();
        let stats = error_stats(&plain, &grouped).unwrap();
        assert!(stats.nrmse < 1e-5);
        assert!(gemm_fp16_grouped(&a, &w, 48).is_err());
        assert!(gemm_fp16_grouped(&Matrix::filled(1, 3, Half::ONE), &w, 64).is_err());
    }

    #[test]
    fn scale_examples() {
        assert_eq!(scale_group_result(22, 0, 4, 0.5).unwrap(), 1.375);
        assert_eq!(scale_group_result(0, 16, 1, 1e30).unwrap(), 0.0);
        for m in 1..=16u8 {
            let e = i32::from(m) - 1;
            assert_eq!(scale_group_result(-12345, e, m, 1.0).unwrap(), -12345.0);
        }
        assert!(matches!(scale_group_result(1 << 40, 16, 1, 3e38), Err(Error::Overflow)));
    }

    fn ones_weights(k: usize, n: usize) -> QuantizedWeightMatrix {
        QuantizedWeightMatrix::from_parts(k, n, vec![1; k * n], vec![1.0; k.div_ceil(128) * n], 128, 4)
            .unwrap()
    }

    #[test]
    fn gemm_counts_ones() {
        let a = encode_tensor(&Matrix::filled(1, 64, Half::ONE), AndaParams::with_mantissa(8).unwrap()).unwrap();
        let out = gemm_anda(&a, &ones_weights(64, 1), &GemmConfig::default()).unwrap();
        assert_eq!(out.data(), &[64.0]);
    }

    #[test]
    fn gemm_worked_group_padded_row() {
        let xs = [1.5f32, 0.25, -0.09375, 0.0];
        let a = Matrix::from_fn(1, 64, |_, c| Half::from_f32(xs.get(c).copied().unwrap_or(0.0)));
        let mut vals = vec![0i8; 64];
        vals[..4].copy_from_slice(&[2, -1, 3, 7]);
        let w = QuantizedWeightMatrix::from_parts(64, 1, vals, vec![0.5], 128, 4).unwrap();
        let t = encode_tensor(&a, AndaParams::with_mantissa(4).unwrap()).unwrap();
        let out = gemm_anda(&t, &w, &GemmConfig::default()).unwrap();
        assert_eq!(out.data(), &[1.375]);
    }

    #[test]
    fn gemm_shape_errors() {
        let a = encode_tensor(&Matrix::filled(1, 64, Half::ONE), AndaParams::with_mantissa(8).unwrap()).unwrap();
        assert!(matches!(
            gemm_anda(&a, &ones_weights(32, 1), &GemmConfig::default()),
            Err(Error::ShapeMismatch(_))
        ));
        let a48 = encode_tensor(&Matrix::filled(1, 64, Half::ONE), AndaParams::new(48, 8).unwrap()).unwrap();
        assert!(gemm_anda(&a48, &ones_weights(64, 1), &GemmConfig::default()).is_err());
        let ah = Matrix::filled(2, 3, Half::ONE);
        assert!(gemm_fp16_reference(&ah, &Matrix::filled(2, 2, 1.0)).is_err());
    }

    #[test]
    fn reference_examples() {
        let id_h = Matrix::from_fn(3, 3, |r, c| if r == c { Half::ONE } else { Half::ZERO });
        let id_f = Matrix::from_fn(3, 3, |r, c| if r == c { 1.0f32 } else { 0.0 });
        assert_eq!(gemm_fp16_reference(&id_h, &id_f).unwrap(), id_f);
        let a = Matrix::filled(1, 2, Half::ONE);
        let w = Matrix::new(2, 1, vec![1.0, -1.0]).unwrap();
        assert_eq!(gemm_fp16_reference(&a, &w).unwrap().data(), &[0.0]);
    }

    struct Lcg(u64);
    impl Lcg {
        fn next(&mut self) -> u64 {
            self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            self.0 >> 33
        }
        fn gauss(&mut self) -> f32 {
            (0..12).map(|_| (self.next() % 10_000) as f32 / 10_000.0).sum::<f32>() - 6.0
        }
    }

    fn random_case(seed: u64, t: usize, k: usize, n: usize) -> (Matrix<Half>, QuantizedWeightMatrix) {
        let mut rng = Lcg(seed);
        let a = Matrix::from_fn(t, k, |_, c| {
            let outlier = if c % 37 == 0 { 20.0 } else { 1.0 };
            Half::from_f32(rng.gauss() * outlier)
        });
        let wf = Matrix::from_fn(k, n, |_, _| rng.gauss() * 0.05);
        (a, quantize_rtn(&wf, 128, 4).unwrap())
    }

    #[test]
    fn full_precision_matches_reference_within_bound() {
        let (a, w) = random_case(7, 8, 128, 8);
        let wd = dequantize(&w);
        let reference = gemm_fp16_reference(&a, &wd).unwrap();
        let t = encode_tensor(&a, AndaParams::with_mantissa(16).unwrap()).unwrap();
        let out = gemm_anda(&t, &w, &GemmConfig::default()).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                // Per-element truncation bound propagated through the sum, plus
                // binary32 rounding of both accumulations.
                let mut bound = 0.0f64;
                let mut mag = 0.0f64;
                for g in 0..2 {
                    let grp = t.group(r, g);
                    let lsb = 2f64.powi(grp.lsb_exponent());
                    for i in 0..64 {
                        let kk = g * 64 + i;
                        let wv = f64::from(wd.get(kk, c)).abs();
                        bound += lsb * wv;
                        mag += f64::from(a.get(r, kk).to_f32().abs()) * wv;
                    }
                }
                let tol = bound + 1e-5 * mag;
                let diff = f64::from(out.get(r, c) - reference.get(r, c)).abs();
                assert!(diff <= tol, "({r},{c}) diff {diff} > {tol}");
            }
        }
    }

    #[test]
    fn bfp_wrapper_is_encode_then_gemm() {
        let (a, w) = random_case(11, 4, 256, 5);
        let cfg = GemmConfig::default();
        let explicit = gemm_anda(&encode_tensor(&a, AndaParams::with_mantissa(4).unwrap()).unwrap(), &w, &cfg).unwrap();
        assert_eq!(gemm_bfp_uniform(&a, 4, &w, &cfg).unwrap(), explicit);

        let zero = Matrix::filled(4, 256, Half::ZERO);
        for m in 1..=16 {
            assert!(gemm_bfp_uniform(&zero, m, &w, &cfg).unwrap().data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn error_shrinks_from_m4_to_m14() {
        let (a, w) = random_case(3, 8, 256, 16);
        let reference = gemm_fp16_reference(&a, &dequantize(&w)).unwrap();
        let cfg = GemmConfig::default();
        let e = |m| error_stats(&reference, &gemm_bfp_uniform(&a, m, &w, &cfg).unwrap()).unwrap().nrmse;
        assert!(e(14) <= e(4));
        assert!(e(8) <= e(4));
    }

    #[test]
    fn f16_output_rounds() {
        let (a, w) = random_case(5, 2, 128, 3);
        let t = encode_tensor(&a, AndaParams::with_mantissa(9).unwrap()).unwrap();
        let wide = gemm_anda(&t, &w, &GemmConfig::default()).unwrap();
        let narrow = gemm_anda(&t, &w, &GemmConfig { output: OutputDtype::F16 }).unwrap();
        for (x, y) in wide.data().iter().zip(narrow.data()) {
            assert_eq!(Half::from_f32(*x).to_f32(), *y);
        }
        assert_eq!(gemm_anda(&t, &w, &GemmConfig::default()).unwrap(), wide);
    }

    fn arb_group_and_weights() -> impl Strategy<Value = (AndaGroup, Vec<i8>)> {
        (1u8..=16, 1usize..=64).prop_flat_map(|(m, len)| {
            (
                prop::collection::vec(any::<bool>(), len),
                prop::collection::vec(0u16..=((1u32 << m) - 1) as u16, len),
                prop::collection::vec(-8i8..=7, len),
            )
                .prop_map(move |(s, ms, w)| (AndaGroup::new(0, s, ms, m).unwrap(), w))
        })
    }

    proptest! {
        #[test]
        fn bitserial_equals_reference((g, w) in arb_group_and_weights()) {
            let p = pack_group(&g).unwrap();
            let (r, trace) = group_dot_bitserial(&p, &w).unwrap();
            prop_assert_eq!(r, group_dot_reference(&g, &w).unwrap());
            let m = trace.partials.len();
            let folded: i64 = trace.partials.iter().enumerate().map(|(k, &p)| p << (m - 1 - k)).sum();
            prop_assert_eq!(folded, r);

            let flipped = AndaGroup::new(0, g.signs().iter().map(|s| !s).collect(), g.mantissas().to_vec(), g.mantissa_len()).unwrap();
            let (neg, _) = group_dot_bitserial(&pack_group(&flipped).unwrap(), &w).unwrap();
            prop_assert_eq!(neg, -r);
        }

        #[test]
        fn encoded_groups_dot_exactly(vals in prop::collection::vec(any::<u16>(), 64), m in 1u8..=16) {
            let hs: Vec<Half> = vals.iter().map(|&b| Half::from_bits(b & 0x7BFF | (b & 0x8000))).collect();
            let g = encode_group(&hs, m).unwrap();
            let w: Vec<i8> = vals.iter().map(|&b| ((b % 16) as i8) - 8).collect();
            let p = pack_group(&g).unwrap();
            prop_assert_eq!(group_dot_bitserial(&p, &w).unwrap().0, group_dot_reference(&g, &w).unwrap());
        }
    }
}
