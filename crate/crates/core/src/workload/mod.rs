//! Calibration workloads: synthetic LLM-like layers, tensor files, the
//! built-in proxy accuracy oracle and external oracles.
//!
//! Synthetic generation is pinned for cross-platform reproducibility:
//! xoshiro256** seeded through SplitMix64 (`seed_from_u64`), uniform doubles
//! from the top 53 bits, and Box-Muller pairs consumed cosine branch first.

mod oracle;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

pub use oracle::{
    format_request, format_response, parse_request, parse_response, serve, ExternalOracle, OracleEndpoint,
    DEFAULT_ORACLE_TIMEOUT,
};

use crate::apu::{gemm_anda, gemm_fp16_grouped, gemm_fp16_reference, GemmConfig};
use crate::bops::{ModelFamily, ModelShape, ModuleKind};
use crate::error::{Error, Result};
use crate::layout::{read_raw, write_raw, RawData, RawTensor};
use crate::matrix::Matrix;
use crate::numfmt::{decode_tensor, encode_tensor, error_stats_slices, AndaParams, Half, DEFAULT_GROUP_SIZE};
use crate::search::{AccuracyOracle, EvalTarget};
use crate::weights::{dequantize, quantize_rtn, QuantizedWeightMatrix, DEFAULT_WEIGHT_BITS, DEFAULT_WEIGHT_GROUP};

/// Standard deviation of the log of per-channel activation scales.
pub const CHANNEL_LOG_SIGMA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleData {
    pub kind: ModuleKind,
    /// T x K FP16 activations.
    pub activations: Matrix<Half>,
    /// K x N quantized weights.
    pub weights: QuantizedWeightMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationWorkload {
    pub family: ModelFamily,
    pub modules: Vec<ModuleData>,
    /// Activations after the first module were produced by earlier modules' outputs.
    pub chained: bool,
}

impl CalibrationWorkload {
    pub fn new(family: ModelFamily, modules: Vec<ModuleData>, chained: bool) -> Result<Self> {
        let w = CalibrationWorkload {
            family,
            modules,
            chained,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modules.is_empty() {
            return Err(Error::InvalidParams("workload has no modules".into()));
        }
        for m in &self.modules {
            if m.activations.cols() != m.weights.k() {
                return Err(Error::ShapeMismatch(format!(
                    "module {}: activations have K={}, weights have K={}",
                    m.kind.name(),
                    m.activations.cols(),
                    m.weights.k()
                )));
            }
        }
        if self.chained {
            let t = self.modules[0].activations.rows();
            if self.modules.iter().any(|m| m.activations.rows() != t) {
                return Err(Error::ShapeMismatch("chained modules must share a token count".into()));
            }
        }
        Ok(())
    }

    pub fn module(&self, kind: ModuleKind) -> Option<&ModuleData> {
        self.modules.iter().find(|m| m.kind == kind)
    }

    /// Layer shape implied by the qkv and d modules.
    pub fn shape(&self) -> Result<ModelShape> {
        let need = |k: ModuleKind| {
            self.module(k)
                .ok_or_else(|| Error::InvalidParams(format!("workload lacks a {} module", k.name())))
        };
        let qkv = need(ModuleKind::Qkv)?;
        let d = need(ModuleKind::D)?;
        ModelShape::new(self.family, qkv.weights.k(), d.weights.k(), 1, qkv.weights.bits())
    }

    /// Load a workload description; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: WorkloadSpec = serde_json::from_str(&text)?;
        spec.materialize(path.parent().unwrap_or(Path::new(".")))
    }

    /// Write every tensor to `dir` and return the path of the description file.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let mut modules = Vec::new();
        for m in &self.modules {
            let name = m.kind.name();
            let entry = ModuleFiles {
                kind: m.kind,
                activations: PathBuf::from(format!("{name}_act.andt")),
                weights: PathBuf::from(format!("{name}_w.andt")),
                scales: PathBuf::from(format!("{name}_scales.andt")),
                weight_group_size: m.weights.group_size(),
                weight_bits: m.weights.bits(),
            };
            save_tensor(&dir.join(&entry.activations), &m.activations)?;
            save_weights(&dir.join(&entry.weights), &dir.join(&entry.scales), &m.weights)?;
            modules.push(entry);
        }
        let spec = WorkloadSpec::Files(FilesSpec {
            family: self.family,
            chained: self.chained,
            modules,
        });
        let path = dir.join("workload.json");
        std::fs::write(&path, serde_json::to_string_pretty(&spec)? + "\n")?;
        Ok(path)
    }
}

/// Parameters of a synthetic layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub d_model: usize,
    pub d_ff: usize,
    pub tokens: usize,
    pub family: ModelFamily,
    #[serde(default)]
    pub chain: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleFiles {
    pub kind: ModuleKind,
    pub activations: PathBuf,
    pub weights: PathBuf,
    pub scales: PathBuf,
    #[serde(default = "default_weight_group")]
    pub weight_group_size: usize,
    #[serde(default = "default_weight_bits")]
    pub weight_bits: u8,
}

fn default_weight_group() -> usize {
    DEFAULT_WEIGHT_GROUP
}

fn default_weight_bits() -> u8 {
    DEFAULT_WEIGHT_BITS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilesSpec {
    pub family: ModelFamily,
    #[serde(default)]
    pub chained: bool,
    pub modules: Vec<ModuleFiles>,
}

/// Workload description file: `{"synthetic": {...}}` or `{"files": {...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum WorkloadSpec {
    Synthetic(SyntheticSpec),
    Files(FilesSpec),
}

impl WorkloadSpec {
    pub fn materialize(&self, base: &Path) -> Result<CalibrationWorkload> {
        match self {
            WorkloadSpec::Synthetic(s) => gen_synthetic(s),
            WorkloadSpec::Files(f) => {
                let modules = f
                    .modules
                    .iter()
                    .map(|m| {
                        Ok(ModuleData {
                            kind: m.kind,
                            activations: load_tensor(&base.join(&m.activations))?,
                            weights: load_weights(
                                &base.join(&m.weights),
                                &base.join(&m.scales),
                                m.weight_group_size,
                                m.weight_bits,
                            )?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                CalibrationWorkload::new(f.family, modules, f.chained)
            }
        }
    }
}

/// Standard normal sampler over xoshiro256**.
pub struct GaussianRng {
    rng: Xoshiro256StarStar,
    spare: Option<f64>,
}

impl GaussianRng {
    pub fn new(seed: u64) -> Self {
        GaussianRng {
            rng: Xoshiro256StarStar::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }
}

fn gen_activations(rng: &mut GaussianRng, tokens: usize, k: usize) -> Matrix<Half> {
    let scales: Vec<f64> = (0..k).map(|_| libm::exp(CHANNEL_LOG_SIGMA * rng.gaussian())).collect();
    let mut data = Vec::with_capacity(tokens * k);
    for _ in 0..tokens {
        for s in &scales {
            data.push(Half::from_f32((rng.gaussian() * s) as f32));
        }
    }
    Matrix::new(tokens, k, data).expect("sized above")
}

fn gen_weights(rng: &mut GaussianRng, k: usize, n: usize) -> Result<QuantizedWeightMatrix> {
    let inv = 1.0 / libm::sqrt(k as f64);
    let mut data = Vec::with_capacity(k * n);
    for _ in 0..k * n {
        data.push((rng.gaussian() * inv) as f32);
    }
    quantize_rtn(&Matrix::new(k, n, data)?, DEFAULT_WEIGHT_GROUP, DEFAULT_WEIGHT_BITS)
}

fn to_half(m: &Matrix<f32>) -> Matrix<Half> {
    m.map(|&x| Half::from_f32(x))
}

fn silu(x: f32) -> f32 {
    x / (1.0 + libm::expf(-x))
}

/// Synthetic layer: qkv, o, u, d modules in that order.
///
/// Each module draws its activations (unless chained) and then its weights
/// from one generator stream. With chaining, o consumes the V slice of the
/// qkv output, u the o output, and d the ReLU (OPT) or SiLU-gated (LLaMA) u
/// output, all computed with the quantized weights.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<CalibrationWorkload> {
    if spec.d_model == 0 || spec.d_ff == 0 || spec.tokens == 0 {
        return Err(Error::InvalidParams("synthetic dims must be at least 1".into()));
    }
    let shape = ModelShape::new(spec.family, spec.d_model, spec.d_ff, 1, DEFAULT_WEIGHT_BITS)?;
    let mut rng = GaussianRng::new(spec.seed);
    let mut modules: Vec<ModuleData> = Vec::with_capacity(4);
    for kind in ModuleKind::ALL {
        let dims = shape.gemm_dims(kind);
        let activations = match (spec.chain, modules.last()) {
            (true, Some(prev)) => chain_input(spec, kind, prev)?,
            _ => gen_activations(&mut rng, spec.tokens, dims.k),
        };
        let weights = gen_weights(&mut rng, dims.k, dims.n)?;
        modules.push(ModuleData {
            kind,
            activations,
            weights,
        });
    }
    CalibrationWorkload::new(spec.family, modules, spec.chain)
}

fn chain_input(spec: &SyntheticSpec, kind: ModuleKind, prev: &ModuleData) -> Result<Matrix<Half>> {
    let out = gemm_fp16_reference(&prev.activations, &dequantize(&prev.weights))?;
    let d = spec.d_model;
    let f = spec.d_ff;
    let m = match kind {
        ModuleKind::O => Matrix::from_fn(out.rows(), d, |r, c| out.get(r, 2 * d + c)),
        ModuleKind::U => out,
        ModuleKind::D => match spec.family {
            ModelFamily::Opt => out.map(|&x| x.max(0.0)),
            ModelFamily::Llama => Matrix::from_fn(out.rows(), f, |r, c| silu(out.get(r, c)) * out.get(r, f + c)),
        },
        ModuleKind::Qkv => unreachable!("qkv is never chained"),
    };
    Ok(to_half(&m))
}

/// Built-in accuracy oracle: `1 / (1 + NRMSE)`, where NRMSE is the MAC-weighted
/// mean over modules of the bit-serial GeMM output against the FP16 reference.
pub struct ProxyOracle {
    workload: CalibrationWorkload,
    references: Vec<Matrix<f32>>,
}

impl ProxyOracle {
    pub fn new(workload: CalibrationWorkload) -> Result<Self> {
        workload.validate()?;
        let references = workload
            .modules
            .iter()
            .map(|m| gemm_fp16_grouped(&m.activations, &m.weights, DEFAULT_GROUP_SIZE))
            .collect::<Result<Vec<_>>>()?;
        Ok(ProxyOracle { workload, references })
    }

    pub fn workload(&self) -> &CalibrationWorkload {
        &self.workload
    }

    /// MAC-weighted NRMSE of the combination.
    pub fn nrmse(&self, c: &crate::bops::PrecisionCombination) -> Result<f64> {
        let mut weighted = 0.0;
        let mut total = 0.0;
        for (m, reference) in self.workload.modules.iter().zip(&self.references) {
            let params = AndaParams::new(DEFAULT_GROUP_SIZE, c.get(m.kind))?;
            let out = gemm_anda(&encode_tensor(&m.activations, params)?, &m.weights, &GemmConfig::default())?;
            let stats = error_stats_slices(reference.data(), out.data());
            let macs = (m.activations.rows() * m.weights.k() * m.weights.n()) as f64;
            weighted += macs * stats.nrmse;
            total += macs;
        }
        Ok(if total == 0.0 { 0.0 } else { weighted / total })
    }
}

impl AccuracyOracle for ProxyOracle {
    fn evaluate(&mut self, target: EvalTarget) -> Result<f64> {
        match target {
            EvalTarget::Fp16 => Ok(1.0),
            EvalTarget::Combination(c) => Ok(1.0 / (1.0 + self.nrmse(&c)?)),
        }
    }
}

/// One-shot proxy score; build a [`ProxyOracle`] to score many combinations.
pub fn proxy_accuracy(w: &CalibrationWorkload, target: EvalTarget) -> Result<f64> {
    if target == EvalTarget::Fp16 {
        return Ok(1.0);
    }
    ProxyOracle::new(w.clone())?.evaluate(target)
}

/// Format-error row of a group-size / mantissa-length sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub group_size: usize,
    pub mantissa_len: u8,
    pub nrmse: f64,
    pub max_abs: f64,
}

pub const SWEEP_CSV_HEADER: &str = "gs,m,nrmse,max_abs";

/// Encode/decode error over all activation tensors of the workload.
pub fn sweep_format(w: &CalibrationWorkload, group_sizes: &[usize], mantissa_lens: &[u8]) -> Result<Vec<SweepRow>> {
    if group_sizes.is_empty() || mantissa_lens.is_empty() {
        return Err(Error::InvalidParams("sweep lists must be non-empty".into()));
    }
    let originals: Vec<f32> = w
        .modules
        .iter()
        .flat_map(|m| m.activations.data().iter().map(|h| h.to_f32()))
        .collect();
    let mut rows = Vec::new();
    for &gs in group_sizes {
        for &m in mantissa_lens {
            let params = AndaParams::new(gs, m)?;
            let mut decoded = Vec::with_capacity(originals.len());
            for module in &w.modules {
                decoded.extend(decode_tensor(&encode_tensor(&module.activations, params)?).into_data());
            }
            let stats = error_stats_slices(&originals, &decoded);
            rows.push(SweepRow {
                group_size: gs,
                mantissa_len: m,
                nrmse: stats.nrmse,
                max_abs: stats.max_abs,
            });
        }
    }
    Ok(rows)
}

fn read_raw_file(path: &Path) -> Result<RawTensor> {
    read_raw(BufReader::new(File::open(path)?))
}

fn write_raw_file(path: &Path, t: &RawTensor) -> Result<()> {
    write_raw(t, BufWriter::new(File::create(path)?))
}

fn matrix_dims(t: &RawTensor) -> Result<(usize, usize)> {
    match t.dims[..] {
        [n] => Ok((1, n as usize)),
        [r, c] => Ok((r as usize, c as usize)),
        _ => Err(Error::ShapeMismatch(format!("expected a rank-1 or rank-2 tensor, got dims {:?}", t.dims))),
    }
}

fn dims_u32(rows: usize, cols: usize) -> Result<Vec<u32>> {
    let conv = |x: usize| u32::try_from(x).map_err(|_| Error::InvalidParams(format!("dimension {x} exceeds u32")));
    Ok(vec![conv(rows)?, conv(cols)?])
}

/// Read an FP16 matrix; rank-1 files load as a single row.
pub fn load_tensor(path: &Path) -> Result<Matrix<Half>> {
    let t = read_raw_file(path)?;
    let (rows, cols) = matrix_dims(&t)?;
    match t.data {
        RawData::F16(bits) => Matrix::new(rows, cols, bits.into_iter().map(Half::from_bits).collect()),
        other => Err(Error::DtypeUnsupported(format!(
            "expected f16 activations, found dtype code {}",
            other.dtype_code()
        ))),
    }
}

pub fn save_tensor(path: &Path, m: &Matrix<Half>) -> Result<()> {
    let t = RawTensor::new(
        dims_u32(m.rows(), m.cols())?,
        RawData::F16(m.data().iter().map(|h| h.to_bits()).collect()),
    )?;
    write_raw_file(path, &t)
}

/// Read int8 weight values (K x N) and their f32 scale sidecar (groups x N).
pub fn load_weights(values: &Path, scales: &Path, group_size: usize, bits: u8) -> Result<QuantizedWeightMatrix> {
    let v = read_raw_file(values)?;
    let (k, n) = matrix_dims(&v)?;
    let RawData::I8(vals) = v.data else {
        return Err(Error::DtypeUnsupported("weight values must be i8".into()));
    };
    let s = read_raw_file(scales)?;
    let (groups, sn) = matrix_dims(&s)?;
    let RawData::F32(sc) = s.data else {
        return Err(Error::DtypeUnsupported("weight scales must be f32".into()));
    };
    if sn != n || group_size == 0 || groups != k.div_ceil(group_size) {
        return Err(Error::ShapeMismatch(format!(
            "scale sidecar is {groups}x{sn}, weights {k}x{n} at group {group_size}"
        )));
    }
    QuantizedWeightMatrix::from_parts(k, n, vals, sc, group_size, bits)
}

pub fn save_weights(values: &Path, scales: &Path, w: &QuantizedWeightMatrix) -> Result<()> {
    write_raw_file(
        values,
        &RawTensor::new(dims_u32(w.k(), w.n())?, RawData::I8(w.values().to_vec()))?,
    )?;
    write_raw_file(
        scales,
        &RawTensor::new(dims_u32(w.scale_groups(), w.n())?, RawData::F32(w.scales().to_vec()))?,
    )
}
