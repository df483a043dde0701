//! Roofline cycle and energy model of the accelerator and its baselines.
//!
//! All engines share one output-stationary tiling: a tile group is
//! `mxu_rows` tokens x `mxu_cols` output channels x `adder_width` reduction
//! elements. The bit-serial engine spends `M` cycles per tile group; every
//! baseline is normalized to the same peak and spends `reference_bits`
//! cycles (or `x` cycles for a reduced-mantissa bit-parallel variant).
//! Runtime is `max(compute, memory) + fill`.

mod config;

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

pub use config::{ArchConfig, EnergyParams, Provenance};

use crate::bops::{ModelShape, ModuleKind, PrecisionCombination};
use crate::bpc::{tensor_cycles, BpcConfig};
use crate::error::{Error, Result};
use crate::layout::storage_bits;
use crate::numfmt::check_mantissa_len;
use crate::search::{search, AccuracyOracle, SearchConfig};

const FP16_BITS: u64 = 16;

/// Engine executing one GeMM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GemmMode {
    /// Bit-serial engine; `out_m` is the mantissa length outputs are compressed to.
    Anda { m: u8, out_m: u8 },
    FpFp,
    FpInt,
    Ifpu,
    Figna,
    /// Bit-parallel FIGNA with a reduced `x`-bit mantissa.
    FignaM(u8),
}

impl GemmMode {
    pub fn anda(m: u8) -> Self {
        GemmMode::Anda { m, out_m: m }
    }
}

/// Platform running a whole model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Platform {
    FpFp,
    FpInt,
    Ifpu,
    Figna,
    FignaM(u8),
    Anda(PrecisionCombination),
}

impl Platform {
    fn mode(self, kind: ModuleKind) -> GemmMode {
        match self {
            Platform::FpFp => GemmMode::FpFp,
            Platform::FpInt => GemmMode::FpInt,
            Platform::Ifpu => GemmMode::Ifpu,
            Platform::Figna => GemmMode::Figna,
            Platform::FignaM(x) => GemmMode::FignaM(x),
            Platform::Anda(c) => GemmMode::Anda {
                m: c.get(kind),
                out_m: c.get(consumer(kind)),
            },
        }
    }

    /// Platforms of the standard comparison, FP-FP first.
    pub fn comparison_set(c: PrecisionCombination) -> Vec<Platform> {
        vec![
            Platform::FpFp,
            Platform::FpInt,
            Platform::Ifpu,
            Platform::Figna,
            Platform::FignaM(11),
            Platform::FignaM(8),
            Platform::Anda(c),
        ]
    }
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Platform::FpFp => f.write_str("FP-FP"),
            Platform::FpInt => f.write_str("FP-INT"),
            Platform::Ifpu => f.write_str("iFPU"),
            Platform::Figna => f.write_str("FIGNA"),
            Platform::FignaM(x) => write!(f, "FIGNA-M{x}"),
            Platform::Anda(_) => f.write_str("Anda"),
        }
    }
}

/// Module whose FP-INT GeMM consumes the output of `kind` (after attention,
/// residual, normalization or activation in the vector unit).
fn consumer(kind: ModuleKind) -> ModuleKind {
    match kind {
        ModuleKind::Qkv => ModuleKind::O,
        ModuleKind::O => ModuleKind::U,
        ModuleKind::U => ModuleKind::D,
        ModuleKind::D => ModuleKind::Qkv,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Traffic {
    pub activations: u64,
    pub weights: u64,
    pub outputs: u64,
}

impl Traffic {
    pub fn total(&self) -> u64 {
        self.activations + self.weights + self.outputs
    }

    fn add(&mut self, o: &Traffic) {
        self.activations += o.activations;
        self.weights += o.weights;
        self.outputs += o.outputs;
    }

    fn scale(&mut self, k: u64) {
        self.activations *= k;
        self.weights *= k;
        self.outputs *= k;
    }
}

/// Energy in picojoules.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub compute: f64,
    pub sram: f64,
    pub dram: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    fn new(compute: f64, sram: f64, dram: f64) -> Self {
        EnergyBreakdown {
            compute,
            sram,
            dram,
            total: compute + sram + dram,
        }
    }

    fn add(&mut self, o: &EnergyBreakdown) {
        *self = EnergyBreakdown::new(self.compute + o.compute, self.sram + o.sram, self.dram + o.dram);
    }

    fn scale(&mut self, k: f64) {
        *self = EnergyBreakdown::new(self.compute * k, self.sram * k, self.dram * k);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub platform: String,
    pub macs: u64,
    pub compute_cycles: u64,
    pub memory_cycles: u64,
    pub fill_cycles: u64,
    /// Output compression cycles (hidden when overlapped).
    pub bpc_cycles: u64,
    pub vector_cycles: u64,
    pub total_cycles: u64,
    /// GeMMs whose DRAM time exceeded their compute time.
    pub memory_bound_gemms: u64,
    pub dram_bits: Traffic,
    pub sram_bits: Traffic,
    pub energy: EnergyBreakdown,
}

impl SimReport {
    fn empty(platform: String) -> Self {
        SimReport {
            platform,
            ..SimReport::default()
        }
    }

    fn add(&mut self, o: &SimReport) {
        self.macs += o.macs;
        self.compute_cycles += o.compute_cycles;
        self.memory_cycles += o.memory_cycles;
        self.fill_cycles += o.fill_cycles;
        self.bpc_cycles += o.bpc_cycles;
        self.vector_cycles += o.vector_cycles;
        self.total_cycles += o.total_cycles;
        self.memory_bound_gemms += o.memory_bound_gemms;
        self.dram_bits.add(&o.dram_bits);
        self.sram_bits.add(&o.sram_bits);
        self.energy.add(&o.energy);
    }

    fn scale(&mut self, k: u64) {
        self.macs *= k;
        self.compute_cycles *= k;
        self.memory_cycles *= k;
        self.fill_cycles *= k;
        self.bpc_cycles *= k;
        self.vector_cycles *= k;
        self.total_cycles *= k;
        self.memory_bound_gemms *= k;
        self.dram_bits.scale(k);
        self.sram_bits.scale(k);
        self.energy.scale(k as f64);
    }

    pub fn is_compute_bound(&self) -> bool {
        self.memory_bound_gemms == 0
    }

    /// `baseline.total_cycles / self.total_cycles`.
    pub fn speedup_over(&self, baseline: &SimReport) -> f64 {
        baseline.total_cycles as f64 / self.total_cycles as f64
    }

    /// `baseline.energy.total / self.energy.total`.
    pub fn energy_efficiency_over(&self, baseline: &SimReport) -> f64 {
        baseline.energy.total / self.energy.total
    }
}

fn bits_per_group(mode: GemmMode, group: usize) -> u64 {
    match mode {
        GemmMode::Anda { m, .. } => storage_bits(m, group, 1),
        _ => group as u64 * FP16_BITS,
    }
}

/// Cycle and energy report for one `T x K` by `K x N` FP-INT GeMM.
pub fn simulate_gemm(
    t: usize,
    n: usize,
    k: usize,
    mode: GemmMode,
    arch: &ArchConfig,
    energy: &EnergyParams,
) -> Result<SimReport> {
    arch.validate()?;
    energy.validate()?;
    if t == 0 || n == 0 || k == 0 {
        return Err(Error::InvalidParams(format!("GeMM dims must be positive, got T={t} N={n} K={k}")));
    }
    let cycles_per_tile = match mode {
        GemmMode::Anda { m, out_m } => {
            check_mantissa_len(m)?;
            check_mantissa_len(out_m)?;
            u64::from(m)
        }
        GemmMode::FignaM(x) => {
            check_mantissa_len(x)?;
            u64::from(x)
        }
        _ => u64::from(arch.reference_bits),
    };

    let g = arch.adder_width;
    let row_tiles = t.div_ceil(arch.mxu_rows) as u64;
    let col_tiles = n.div_ceil(arch.mxu_cols) as u64;
    let k_groups = k.div_ceil(g) as u64;
    let tiles = row_tiles * col_tiles * k_groups;
    let compute_cycles = tiles * cycles_per_tile;
    let (t64, n64, k64) = (t as u64, n as u64, k as u64);

    // Activation strip must fit the activation buffer.
    let strip_rows = arch.mxu_rows as u64;
    let (strip_bits, capacity) = match mode {
        GemmMode::Anda { m, .. } => {
            let mant = strip_rows * k_groups * g as u64 * (u64::from(m) + 1);
            let exp = strip_rows * k_groups * 8;
            if exp > arch.act_buffer_exponent_bits {
                (exp, arch.act_buffer_exponent_bits)
            } else {
                (mant, arch.act_buffer_mantissa_bits)
            }
        }
        _ => (
            strip_rows * k64 * FP16_BITS,
            arch.act_buffer_mantissa_bits + arch.act_buffer_exponent_bits,
        ),
    };
    if strip_bits > capacity {
        return Err(Error::TileExceedsBuffer {
            k,
            needed_bits: strip_bits,
            capacity_bits: capacity,
        });
    }

    let act_dram = match mode {
        GemmMode::Anda { .. } => t64 * k_groups * bits_per_group(mode, g),
        _ => t64 * k64 * FP16_BITS,
    };
    let weight_bits = k64 * n64 * 4 + k.div_ceil(arch.weight_group_size) as u64 * n64 * arch.weight_scale_bits;
    let weight_dram = if weight_bits <= arch.weight_buffer_bits {
        weight_bits
    } else {
        weight_bits * row_tiles
    };
    let (out_bits, bpc_cycles) = match mode {
        GemmMode::Anda { out_m, .. } => {
            let out_groups = t64 * n.div_ceil(g) as u64;
            let bpc = BpcConfig {
                lanes: arch.bpc_lanes,
                lane_width: g,
                latency: arch.bpc_latency,
            };
            (storage_bits(out_m, g, out_groups), tensor_cycles(out_groups, out_m, &bpc))
        }
        _ => (t64 * n64 * FP16_BITS, 0),
    };
    let dram_bits = Traffic {
        activations: act_dram,
        weights: weight_dram,
        outputs: out_bits,
    };
    let sram_bits = Traffic {
        activations: act_dram * col_tiles,
        weights: weight_bits * row_tiles,
        outputs: out_bits,
    };

    let memory_cycles = (dram_bits.total() as f64 / arch.dram_bits_per_cycle()).ceil() as u64;
    let fill_cycles = arch.pipeline_fill_cycles;
    let exposed_bpc = if arch.bpc_overlap { 0 } else { bpc_cycles };
    let total_cycles = compute_cycles.max(memory_cycles) + fill_cycles + exposed_bpc;

    let apus = (arch.mxu_rows * arch.mxu_cols) as f64;
    let mac_slots = (tiles * (arch.mxu_rows * arch.mxu_cols * g) as u64) as f64;
    let act_elements_delivered = (t64 * k64 * col_tiles) as f64;
    let weight_elements_delivered = (k64 * n64 * row_tiles) as f64;
    let compute = match mode {
        GemmMode::Anda { .. } => {
            compute_cycles as f64 * apus * energy.mxu_pj_per_apu_cycle + bpc_cycles as f64 * energy.bpc_pj_per_cycle
        }
        GemmMode::FpFp => {
            mac_slots * energy.fpfp_pj_per_mac + weight_elements_delivered * energy.dequant_pj_per_element
        }
        GemmMode::FpInt => mac_slots * energy.fpint_pj_per_mac,
        GemmMode::Ifpu => {
            mac_slots * energy.ifpu_pj_per_mac + act_elements_delivered * energy.conversion_pj_per_element
        }
        GemmMode::Figna => {
            mac_slots * energy.figna_pj_per_mac + act_elements_delivered * energy.conversion_pj_per_element
        }
        GemmMode::FignaM(x) => {
            mac_slots * f64::from(x) * energy.figna_reduced_pj_per_mac_bit
                + act_elements_delivered * energy.conversion_pj_per_element
        }
    };
    let energy_breakdown = EnergyBreakdown::new(
        compute,
        sram_bits.total() as f64 * energy.sram_pj_per_bit,
        dram_bits.total() as f64 * energy.dram_pj_per_bit,
    );

    Ok(SimReport {
        platform: String::new(),
        macs: t64 * n64 * k64,
        compute_cycles,
        memory_cycles,
        fill_cycles,
        bpc_cycles,
        vector_cycles: 0,
        total_cycles,
        memory_bound_gemms: u64::from(memory_cycles > compute_cycles),
        dram_bits,
        sram_bits,
        energy: energy_breakdown,
    })
}

/// Whole-model report: the four projection GeMMs of one layer, scaled by the
/// layer count, plus the vector-unit lump term.
pub fn simulate_model(
    shape: &ModelShape,
    platform: Platform,
    tokens: usize,
    arch: &ArchConfig,
    energy: &EnergyParams,
) -> Result<SimReport> {
    shape.validate()?;
    let mut report = SimReport::empty(platform.to_string());
    if tokens == 0 {
        return Ok(report);
    }
    for kind in ModuleKind::ALL {
        let dims = shape.gemm_dims(kind);
        let r = simulate_gemm(tokens, dims.n, dims.k, platform.mode(kind), arch, energy)?;
        report.add(&r);
    }
    report.vector_cycles = arch.vector_cycles_per_token * tokens as u64;
    report.total_cycles += report.vector_cycles;
    let vector_energy = report.vector_cycles as f64 * energy.vector_pj_per_cycle;
    report.energy = EnergyBreakdown::new(report.energy.compute + vector_energy, report.energy.sram, report.energy.dram);
    report.scale(shape.n_layers as u64);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub platform: String,
    pub report: SimReport,
    pub speedup: f64,
    pub energy_efficiency: f64,
}

/// Per-platform reports normalized to FP-FP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub combination: PrecisionCombination,
    pub tokens: usize,
    pub rows: Vec<ComparisonRow>,
}

pub const COMPARISON_CSV_HEADER: &str = "platform,metric,value";

impl Comparison {
    pub fn row(&self, platform: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.platform == platform)
    }

    /// Long-format CSV: one `platform,metric,value` row per platform and metric.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(COMPARISON_CSV_HEADER);
        s.push('\n');
        for row in &self.rows {
            for (metric, value) in report_metrics(&row.report)
                .into_iter()
                .chain([("speedup_vs_fpfp", row.speedup), ("energy_eff_vs_fpfp", row.energy_efficiency)])
            {
                let _ = writeln!(s, "{},{},{}", row.platform, metric, value);
            }
        }
        s
    }
}

/// Named scalar metrics of a report, in CSV order.
pub fn report_metrics(r: &SimReport) -> Vec<(&'static str, f64)> {
    vec![
        ("macs", r.macs as f64),
        ("compute_cycles", r.compute_cycles as f64),
        ("memory_cycles", r.memory_cycles as f64),
        ("total_cycles", r.total_cycles as f64),
        ("dram_bits", r.dram_bits.total() as f64),
        ("sram_bits", r.sram_bits.total() as f64),
        ("energy_compute_pj", r.energy.compute),
        ("energy_sram_pj", r.energy.sram),
        ("energy_dram_pj", r.energy.dram),
        ("energy_total_pj", r.energy.total),
    ]
}

pub fn compare(
    shape: &ModelShape,
    c: PrecisionCombination,
    tokens: usize,
    arch: &ArchConfig,
    energy: &EnergyParams,
) -> Result<Comparison> {
    let reports = Platform::comparison_set(c)
        .into_iter()
        .map(|p| simulate_model(shape, p, tokens, arch, energy))
        .collect::<Result<Vec<_>>>()?;
    let base = reports[0].clone();
    let rows = reports
        .into_iter()
        .map(|r| ComparisonRow {
            platform: r.platform.clone(),
            speedup: r.speedup_over(&base),
            energy_efficiency: r.energy_efficiency_over(&base),
            report: r,
        })
        .collect();
    Ok(Comparison {
        combination: c,
        tokens,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub tolerance: f64,
    /// `None` when no combination met the tolerance.
    pub combination: Option<PrecisionCombination>,
    pub speedup: Option<f64>,
    pub energy_efficiency: Option<f64>,
}

impl TradeoffPoint {
    pub fn is_feasible(&self) -> bool {
        self.combination.is_some()
    }
}

/// Search a combination per tolerance and report its gain over FP-FP.
#[allow(clippy::too_many_arguments)]
pub fn tradeoff_sweep(
    shape: &ModelShape,
    oracle: &mut dyn AccuracyOracle,
    tolerances: &[f64],
    search_cfg: &SearchConfig,
    tokens: usize,
    arch: &ArchConfig,
    energy: &EnergyParams,
) -> Result<Vec<TradeoffPoint>> {
    if tolerances.is_empty() {
        return Err(Error::InvalidParams("tolerance list is empty".into()));
    }
    let base = simulate_model(shape, Platform::FpFp, tokens, arch, energy)?;
    tolerances
        .iter()
        .map(|&tolerance| {
            let cfg = SearchConfig {
                tolerance,
                ..*search_cfg
            };
            let trace = search(shape, oracle, &cfg)?;
            let Some(c) = trace.best else {
                return Ok(TradeoffPoint {
                    tolerance,
                    combination: None,
                    speedup: None,
                    energy_efficiency: None,
                });
            };
            let r = simulate_model(shape, Platform::Anda(c), tokens, arch, energy)?;
            Ok(TradeoffPoint {
                tolerance,
                combination: Some(c),
                speedup: Some(r.speedup_over(&base)),
                energy_efficiency: Some(r.energy_efficiency_over(&base)),
            })
        })
        .collect()
}
