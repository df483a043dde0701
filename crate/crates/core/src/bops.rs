//! Bit-operation cost of a precision combination over a transformer shape.
//!
//! One multiply of an `M`-bit activation mantissa by a `w`-bit weight counts
//! `M * w` BOPs; an FP16 x INT4 multiply counts `16 * 4 = 64`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numfmt::{check_mantissa_len, MAX_MANTISSA_LEN};
use crate::weights::DEFAULT_WEIGHT_BITS;

/// Mantissa bits the BOPs baseline assigns to an FP16 activation.
pub const FP16_BASELINE_BITS: u64 = 16;

/// The four activation tensors that feed FP-INT GeMMs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Qkv,
    O,
    U,
    D,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 4] = [ModuleKind::Qkv, ModuleKind::O, ModuleKind::U, ModuleKind::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Qkv => "qkv",
            ModuleKind::O => "o",
            ModuleKind::U => "u",
            ModuleKind::D => "d",
        }
    }
}

/// Mantissa lengths `[M_qkv, M_o, M_u, M_d]`, each in 1..=16.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[u8; 4]", into = "[u8; 4]")]
pub struct PrecisionCombination([u8; 4]);

impl PrecisionCombination {
    pub fn new(m: [u8; 4]) -> Result<Self> {
        for &x in &m {
            check_mantissa_len(x)?;
        }
        Ok(PrecisionCombination(m))
    }

    pub fn uniform(m: u8) -> Result<Self> {
        Self::new([m; 4])
    }

    pub fn as_array(&self) -> [u8; 4] {
        self.0
    }

    pub fn get(&self, kind: ModuleKind) -> u8 {
        self.0[kind.index()]
    }

    pub fn min_component(&self) -> u8 {
        *self.0.iter().min().expect("four components")
    }

    pub fn full_precision() -> Self {
        PrecisionCombination([MAX_MANTISSA_LEN; 4])
    }
}

impl TryFrom<[u8; 4]> for PrecisionCombination {
    type Error = Error;

    fn try_from(m: [u8; 4]) -> Result<Self> {
        Self::new(m)
    }
}

impl From<PrecisionCombination> for [u8; 4] {
    fn from(c: PrecisionCombination) -> Self {
        c.0
    }
}

impl fmt::Display for PrecisionCombination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.0;
        write!(f, "[{a},{b},{c},{d}]")
    }
}

impl FromStr for PrecisionCombination {
    type Err = Error;

    /// Accepts `7,7,6,5` or `[7,7,6,5]`.
    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('[').trim_end_matches(']');
        let parts = inner
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<u8>()
                    .map_err(|_| Error::InvalidParams(format!("bad mantissa length {p:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let arr: [u8; 4] = parts
            .try_into()
            .map_err(|_| Error::InvalidParams(format!("expected four components in {s:?}")))?;
        Self::new(arr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    /// Fused QKV, `d_ff = 4d` typical; MAC ratio 3:1:4:4 at `d_ff = 4d`.
    Opt,
    /// Gate and up projections share the up-projection activation.
    Llama,
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "opt" => Ok(ModelFamily::Opt),
            "llama" => Ok(ModelFamily::Llama),
            other => Err(Error::InvalidParams(format!("unknown model family {other:?}"))),
        }
    }
}

/// K x N of one projection GeMM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GemmDims {
    pub k: usize,
    pub n: usize,
}

impl GemmDims {
    pub fn macs_per_token(&self) -> u64 {
        (self.k * self.n) as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub family: ModelFamily,
    pub d_model: usize,
    pub d_ff: usize,
    #[serde(default = "one")]
    pub n_layers: usize,
    #[serde(default = "default_weight_bits")]
    pub weight_bits: u8,
}

fn one() -> usize {
    1
}

fn default_weight_bits() -> u8 {
    DEFAULT_WEIGHT_BITS
}

impl ModelShape {
    pub fn new(family: ModelFamily, d_model: usize, d_ff: usize, n_layers: usize, weight_bits: u8) -> Result<Self> {
        let s = ModelShape {
            family,
            d_model,
            d_ff,
            n_layers,
            weight_bits,
        };
        s.validate()?;
        Ok(s)
    }

    /// OPT-style layer with `d_ff = 4 d`.
    pub fn opt(d_model: usize, n_layers: usize) -> Self {
        ModelShape {
            family: ModelFamily::Opt,
            d_model,
            d_ff: 4 * d_model,
            n_layers,
            weight_bits: DEFAULT_WEIGHT_BITS,
        }
    }

    pub fn llama(d_model: usize, d_ff: usize, n_layers: usize) -> Self {
        ModelShape {
            family: ModelFamily::Llama,
            d_model,
            d_ff,
            n_layers,
            weight_bits: DEFAULT_WEIGHT_BITS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return Err(Error::InvalidParams("model dimensions and layer count must be positive".into()));
        }
        if !(2..=8).contains(&self.weight_bits) {
            return Err(Error::InvalidParams(format!("weight bit width {} outside 2..=8", self.weight_bits)));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let shape: ModelShape = serde_json::from_str(s)?;
        shape.validate()?;
        Ok(shape)
    }

    pub fn gemm_dims(&self, kind: ModuleKind) -> GemmDims {
        let (d, f) = (self.d_model, self.d_ff);
        match (kind, self.family) {
            (ModuleKind::Qkv, _) => GemmDims { k: d, n: 3 * d },
            (ModuleKind::O, _) => GemmDims { k: d, n: d },
            (ModuleKind::U, ModelFamily::Opt) => GemmDims { k: d, n: f },
            (ModuleKind::U, ModelFamily::Llama) => GemmDims { k: d, n: 2 * f },
            (ModuleKind::D, _) => GemmDims { k: f, n: d },
        }
    }

    /// Per-token, per-layer MAC counts `[n_qkv, n_o, n_u, n_d]`.
    pub fn macs_per_token(&self) -> [u64; 4] {
        ModuleKind::ALL.map(|k| self.gemm_dims(k).macs_per_token())
    }
}

/// Total BOPs per token across all layers.
pub fn eval_bops(c: &PrecisionCombination, shape: &ModelShape) -> u64 {
    let macs = shape.macs_per_token();
    let per_layer: u64 = macs
        .iter()
        .zip(c.as_array())
        .map(|(&n, m)| n * u64::from(m) * u64::from(shape.weight_bits))
        .sum();
    per_layer * shape.n_layers as u64
}

/// FP16 x INT BOPs divided by the combination's BOPs.
pub fn bops_reduction(c: &PrecisionCombination, shape: &ModelShape) -> f64 {
    let macs: u64 = shape.macs_per_token().iter().sum();
    let baseline = FP16_BASELINE_BITS * u64::from(shape.weight_bits) * macs * shape.n_layers as u64;
    baseline as f64 / eval_bops(c, shape) as f64
}
