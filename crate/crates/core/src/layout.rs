//! Bit-plane packing of groups and the on-disk containers.
//!
//! A packed group is one sign word followed by `M` mantissa plane words,
//! most significant plane first. Lane `i` of every word belongs to element `i`.
//!
//! `.anda` layout (little-endian):
//!
//! ```text
//! "ANDA" | version u16 | group_size u16 | mantissa_len u16 | reserved u16
//!        | rows u32 | cols u32 | group_count u32            (24 bytes)
//! exponent stream: group_count x i8
//! plane stream:    group_count x (sign word, M plane words), u64 each
//! ```
//!
//! `.andt` layout: `"ANDT" | version u16 | dtype u16 | rank u32 | dims u32 x rank | payload`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numfmt::{check_mantissa_len, AndaGroup, AndaParams, AndaTensor, MAX_SHARED_EXP, ZERO_GROUP_EXP};

pub const LANES: usize = 64;
pub const ANDA_MAGIC: [u8; 4] = *b"ANDA";
pub const ANDT_MAGIC: [u8; 4] = *b"ANDT";
pub const CONTAINER_VERSION: u16 = 1;
pub const ANDA_HEADER_BYTES: usize = 24;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedGroup {
    pub sign_plane: u64,
    /// Plane `k` holds the bit of weight `2^(M-1-k)` of every element.
    pub planes: Vec<u64>,
    pub shared_exp_byte: u8,
}

impl PackedGroup {
    pub fn mantissa_len(&self) -> usize {
        self.planes.len()
    }

    pub fn shared_exp(&self) -> i32 {
        i32::from(self.shared_exp_byte as i8)
    }
}

pub fn pack_group(g: &AndaGroup) -> Result<PackedGroup> {
    if g.len() > LANES {
        return Err(Error::GroupTooWide(g.len()));
    }
    let m = usize::from(g.mantissa_len());
    let mut planes = vec![0u64; m];
    let mut sign_plane = 0u64;
    for (i, (&mant, &sign)) in g.mantissas().iter().zip(g.signs()).enumerate() {
        sign_plane |= u64::from(sign) << i;
        for (k, plane) in planes.iter_mut().enumerate() {
            let bit = (mant >> (m - 1 - k)) & 1;
            *plane |= u64::from(bit) << i;
        }
    }
    Ok(PackedGroup {
        sign_plane,
        planes,
        shared_exp_byte: g.shared_exp() as i8 as u8,
    })
}

pub fn unpack_group(p: &PackedGroup, mantissa_len: u8, group_size: usize) -> Result<AndaGroup> {
    check_mantissa_len(mantissa_len)?;
    if group_size > LANES {
        return Err(Error::GroupTooWide(group_size));
    }
    let m = usize::from(mantissa_len);
    if p.planes.len() != m {
        return Err(Error::PlaneCountMismatch {
            expected: m,
            actual: p.planes.len(),
        });
    }
    let lane_mask = if group_size == LANES {
        u64::MAX
    } else {
        (1u64 << group_size) - 1
    };
    if p.sign_plane & !lane_mask != 0 || p.planes.iter().any(|w| w & !lane_mask != 0) {
        return Err(Error::Malformed(format!(
            "bits set beyond lane {group_size}"
        )));
    }
    let mut mantissas = vec![0u16; group_size];
    for plane in &p.planes {
        for (i, mant) in mantissas.iter_mut().enumerate() {
            *mant = (*mant << 1) | ((plane >> i) & 1) as u16;
        }
    }
    let signs = (0..group_size).map(|i| (p.sign_plane >> i) & 1 == 1).collect();
    AndaGroup::new(p.shared_exp(), signs, mantissas, mantissa_len)
}

/// Storage footprint: sign word, `M` plane words and one exponent byte per
/// group. Groups wider than 64 lanes take several words per plane.
pub fn storage_bits(mantissa_len: u8, group_size: usize, group_count: u64) -> u64 {
    let words = group_size.div_ceil(LANES) as u64;
    group_count * (words * LANES as u64 * (u64::from(mantissa_len) + 1) + 8)
}

/// Exact byte length of a `.anda` file for the given geometry.
pub fn container_bytes(params: AndaParams, rows: usize, cols: usize) -> u64 {
    let groups = (rows * cols.div_ceil(params.group_size())) as u64;
    ANDA_HEADER_BYTES as u64 + storage_bits(params.mantissa_len(), params.group_size(), groups) / 8
}

pub fn write_container<W: Write>(t: &AndaTensor, mut sink: W) -> Result<()> {
    let params = t.params();
    if params.group_size() > LANES {
        return Err(Error::GroupTooWide(params.group_size()));
    }
    let dim = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::InvalidParams(format!("{what} {v} exceeds u32")))
    };
    let mut buf = Vec::with_capacity(container_bytes(params, t.rows(), t.cols()) as usize);
    buf.extend_from_slice(&ANDA_MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.group_size() as u16).to_le_bytes());
    buf.extend_from_slice(&u16::from(params.mantissa_len()).to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&dim(t.rows(), "rows")?.to_le_bytes());
    buf.extend_from_slice(&dim(t.cols(), "cols")?.to_le_bytes());
    buf.extend_from_slice(&dim(t.groups().len(), "group count")?.to_le_bytes());

    let packed = t.groups().iter().map(pack_group).collect::<Result<Vec<_>>>()?;
    buf.extend(packed.iter().map(|p| p.shared_exp_byte));
    for p in &packed {
        buf.extend_from_slice(&p.sign_plane.to_le_bytes());
        for w in &p.planes {
            buf.extend_from_slice(&w.to_le_bytes());
        }
    }
    sink.write_all(&buf)?;
    Ok(())
}

/// Little-endian cursor over an in-memory byte stream.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::TruncatedStream {
                needed: self.pos.saturating_add(n).saturating_sub(self.bytes.len()),
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn check_magic(found: [u8; 4], expected: [u8; 4]) -> Result<()> {
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

pub fn read_container<R: Read>(mut source: R) -> Result<AndaTensor> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let mut r = ByteReader::new(&bytes);
    check_magic(r.array()?, ANDA_MAGIC)?;
    let version = r.u16()?;
    if version != CONTAINER_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let group_size = usize::from(r.u16()?);
    let mantissa_len = r.u16()?;
    let _reserved = r.u16()?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let group_count = r.u32()? as usize;

    let m = u8::try_from(mantissa_len)
        .map_err(|_| Error::Malformed(format!("mantissa length {mantissa_len}")))?;
    let params = AndaParams::new(group_size, m).map_err(|e| Error::Malformed(e.to_string()))?;
    if group_size > LANES {
        return Err(Error::GroupTooWide(group_size));
    }
    if group_count != rows * cols.div_ceil(group_size) {
        return Err(Error::Malformed(format!(
            "group count {group_count} inconsistent with {rows}x{cols} at group size {group_size}"
        )));
    }

    let exps = r.take(group_count)?;
    let mut groups = Vec::with_capacity(group_count);
    for &e in exps {
        let shared = i32::from(e as i8);
        if !(ZERO_GROUP_EXP..=MAX_SHARED_EXP).contains(&shared) {
            return Err(Error::Malformed(format!("shared exponent {shared}")));
        }
        let sign_plane = r.u64()?;
        let planes = (0..m).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let p = PackedGroup {
            sign_plane,
            planes,
            shared_exp_byte: e,
        };
        groups.push(unpack_group(&p, m, group_size)?);
    }
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    AndaTensor::from_groups(rows, cols, params, groups)
}

/// Payload of a `.andt` raw tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum RawData {
    F16(Vec<u16>),
    F32(Vec<f32>),
    I8(Vec<i8>),
}

impl RawData {
    pub fn dtype_code(&self) -> u16 {
        match self {
            RawData::F16(_) => 0,
            RawData::F32(_) => 1,
            RawData::I8(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            RawData::F16(v) => v.len(),
            RawData::F32(v) => v.len(),
            RawData::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<u32>,
    pub data: RawData,
}

impl RawTensor {
    pub fn new(dims: Vec<u32>, data: RawData) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidParams("tensor rank must be at least 1".into()));
        }
        let n: u64 = dims.iter().map(|&d| u64::from(d)).product();
        if n != data.len() as u64 {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} need {n} elements, payload has {}",
                data.len()
            )));
        }
        Ok(RawTensor { dims, data })
    }
}

pub fn write_raw<W: Write>(t: &RawTensor, mut sink: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&ANDT_MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.extend_from_slice(&t.data.dtype_code().to_le_bytes());
    buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for d in &t.dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    match &t.data {
        RawData::F16(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        RawData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        RawData::I8(v) => buf.extend(v.iter().map(|&x| x as u8)),
    }
    sink.write_all(&buf)?;
    Ok(())
}

pub fn read_raw<R: Read>(mut source: R) -> Result<RawTensor> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let mut r = ByteReader::new(&bytes);
    check_magic(r.array()?, ANDT_MAGIC)?;
    let version = r.u16()?;
    if version != CONTAINER_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let dtype = r.u16()?;
    if dtype > 2 {
        return Err(Error::DtypeUnsupported(format!("code {dtype}")));
    }
    let rank = r.u32()? as usize;
    if rank == 0 {
        return Err(Error::Malformed("rank-0 tensor".into()));
    }
    let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| Error::Malformed(format!("dims {dims:?} overflow")))?;
    let data = match dtype {
        0 => RawData::F16(
            r.take(n.checked_mul(2).ok_or_else(|| Error::Malformed("size overflow".into()))?)?
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect(),
        ),
        1 => RawData::F32(
            r.take(n.checked_mul(4).ok_or_else(|| Error::Malformed("size overflow".into()))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        _ => RawData::I8(r.take(n)?.iter().map(|&b| b as i8).collect()),
    };
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    RawTensor::new(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::numfmt::{encode_tensor, Half};
    use proptest::prelude::*;

    fn worked_group() -> AndaGroup {
        AndaGroup::new(0, vec![false, false, true, false], vec![12, 2, 0, 0], 4).unwrap()
    }

    #[test]
    fn pack_worked_group() {
        let p = pack_group(&worked_group()).unwrap();
        assert_eq!(p.planes, vec![0b0001, 0b0001, 0b0010, 0b0000]);
        assert_eq!(p.sign_plane, 0b0100);
        assert_eq!(unpack_group(&p, 4, 4).unwrap(), worked_group());
    }

    #[test]
    fn unpack_planes_to_mantissas() {
        let p = PackedGroup {
            sign_plane: 0,
            planes: vec![0b0001, 0b0001, 0b0010, 0b0000],
            shared_exp_byte: 0,
        };
        assert_eq!(unpack_group(&p, 4, 4).unwrap().mantissas(), &[12, 2, 0, 0]);
    }

    #[test]
    fn pack_zero_and_top_bit() {
        let p = pack_group(&AndaGroup::zeros(64, 7).unwrap()).unwrap();
        assert!(p.planes.iter().all(|&w| w == 0));
        assert_eq!(p.shared_exp(), -15);

        for m in 1..=16u8 {
            let g = AndaGroup::new(3, vec![false], vec![1 << (m - 1)], m).unwrap();
            let p = pack_group(&g).unwrap();
            assert_eq!(p.planes[0], 1);
            assert!(p.planes[1..].iter().all(|&w| w == 0));
        }
    }

    #[test]
    fn pack_rejects_wide_groups() {
        let g = AndaGroup::zeros(65, 4).unwrap();
        assert!(matches!(pack_group(&g), Err(Error::GroupTooWide(65))));
    }

    #[test]
    fn unpack_rejects_wrong_plane_count() {
        let p = pack_group(&worked_group()).unwrap();
        assert!(matches!(
            unpack_group(&p, 5, 4),
            Err(Error::PlaneCountMismatch { expected: 5, actual: 4 })
        ));
    }

    #[test]
    fn storage_bits_examples() {
        assert_eq!(storage_bits(8, 64, 1), 584);
        assert_eq!(storage_bits(16, 64, 1), 1096);
        assert_eq!(storage_bits(8, 64, 0), 0);
        assert!((584.0 / 1024.0 - 0.5703f64).abs() < 1e-4);
        for m in 1..16 {
            assert!(storage_bits(m + 1, 64, 3) > storage_bits(m, 64, 3));
            assert_eq!(storage_bits(m, 64, 6), 2 * storage_bits(m, 64, 3));
        }
    }

    #[test]
    fn container_size_for_single_group() {
        let m = Matrix::filled(1, 64, Half::ONE);
        let t = encode_tensor(&m, AndaParams::with_mantissa(8).unwrap()).unwrap();
        let mut bytes = Vec::new();
        write_container(&t, &mut bytes).unwrap();
        assert_eq!(bytes.len(), 24 + 1 + 72);
        assert_eq!(bytes.len() as u64, container_bytes(t.params(), 1, 64));
        assert_eq!(read_container(bytes.as_slice()).unwrap(), t);
    }

    #[test]
    fn container_errors() {
        let m = Matrix::filled(2, 10, Half::ONE);
        let t = encode_tensor(&m, AndaParams::new(8, 5).unwrap()).unwrap();
        let mut bytes = Vec::new();
        write_container(&t, &mut bytes).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_container(bad.as_slice()), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(read_container(bad.as_slice()), Err(Error::VersionUnsupported(2))));

        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(read_container(short), Err(Error::TruncatedStream { .. })));

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(read_container(long.as_slice()), Err(Error::Malformed(_))));
    }

    #[test]
    fn raw_tensor_roundtrip_and_errors() {
        let t = RawTensor::new(vec![2, 3], RawData::I8(vec![-8, 7, 0, 1, -1, 3])).unwrap();
        let mut bytes = Vec::new();
        write_raw(&t, &mut bytes).unwrap();
        assert_eq!(bytes.len(), 4 + 2 + 2 + 4 + 8 + 6);
        assert_eq!(read_raw(bytes.as_slice()).unwrap(), t);

        let mut bad = bytes.clone();
        bad[6] = 9;
        assert!(matches!(read_raw(bad.as_slice()), Err(Error::DtypeUnsupported(_))));

        let mut rank0 = Vec::new();
        rank0.extend_from_slice(b"ANDT");
        rank0.extend_from_slice(&1u16.to_le_bytes());
        rank0.extend_from_slice(&0u16.to_le_bytes());
        rank0.extend_from_slice(&0u32.to_le_bytes());
        assert!(read_raw(rank0.as_slice()).is_err());

        assert!(matches!(read_raw(&bytes[..bytes.len() - 1]), Err(Error::TruncatedStream { .. })));
        assert!(matches!(read_raw(&b"ANDA"[..]), Err(Error::BadMagic { .. })));
    }

    fn arb_group() -> impl Strategy<Value = AndaGroup> {
        (1u8..=16, 1usize..=64, -15i32..=16).prop_flat_map(|(m, len, e)| {
            (
                prop::collection::vec(any::<bool>(), len),
                prop::collection::vec(0u16..=((1u32 << m) - 1) as u16, len),
            )
                .prop_map(move |(s, ms)| AndaGroup::new(e, s, ms, m).unwrap())
        })
    }

    proptest! {
        #[test]
        fn pack_unpack_inverse(g in arb_group()) {
            let p = pack_group(&g).unwrap();
            prop_assert_eq!(p.planes.len(), usize::from(g.mantissa_len()));
            for (i, &m) in g.mantissas().iter().enumerate() {
                let rebuilt: u32 = p.planes.iter().enumerate()
                    .map(|(k, w)| (((w >> i) & 1) as u32) << (p.planes.len() - 1 - k))
                    .sum();
                prop_assert_eq!(rebuilt, u32::from(m));
            }
            prop_assert_eq!(unpack_group(&p, g.mantissa_len(), g.len()).unwrap(), g);
        }
    }
}
