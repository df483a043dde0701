//! Architecture and energy parameters, with provenance-tagged JSON I/O.
//!
//! Config files map each field either to a bare value or to
//! `{"value": ..., "provenance": "paper" | "derived-from-paper" | "assumption", "note": ...}`.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Paper,
    DerivedFromPaper,
    Assumption,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub mxu_rows: usize,
    pub mxu_cols: usize,
    /// Elements reduced per APU cycle; equals the activation group size.
    pub adder_width: usize,
    pub clock_hz: f64,
    pub act_buffer_mantissa_bits: u64,
    pub act_buffer_exponent_bits: u64,
    pub weight_buffer_bits: u64,
    pub dram_bytes_per_s: f64,
    pub bpc_lanes: usize,
    pub bpc_latency: usize,
    /// Output compression hides behind the next tile's compute.
    pub bpc_overlap: bool,
    pub pipeline_fill_cycles: u64,
    pub vector_cycles_per_token: u64,
    /// Cycles a full-precision baseline spends per tile group; sets the peak
    /// every baseline is normalized to.
    pub reference_bits: u8,
    pub weight_group_size: usize,
    pub weight_scale_bits: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            mxu_rows: 16,
            mxu_cols: 16,
            adder_width: 64,
            clock_hz: 285e6,
            act_buffer_mantissa_bits: 8 * 1024 * 1024,
            act_buffer_exponent_bits: 1024 * 1024,
            weight_buffer_bits: 8 * 1024 * 1024,
            dram_bytes_per_s: 256e9,
            bpc_lanes: 16,
            bpc_latency: 0,
            bpc_overlap: true,
            pipeline_fill_cycles: 0,
            vector_cycles_per_token: 0,
            reference_bits: 16,
            weight_group_size: 128,
            weight_scale_bits: 16,
        }
    }
}

const ARCH_PROVENANCE: &[(&str, Provenance, &str)] = &[
    ("mxu_rows", Provenance::Paper, "16x16 APU array"),
    ("mxu_cols", Provenance::Paper, "16x16 APU array"),
    ("adder_width", Provenance::Paper, "64-element groups"),
    ("clock_hz", Provenance::Paper, "285 MHz"),
    ("act_buffer_mantissa_bits", Provenance::Paper, "1 MB mantissa buffer"),
    ("act_buffer_exponent_bits", Provenance::Paper, "0.125 MB exponent buffer"),
    ("weight_buffer_bits", Provenance::Paper, "1 MB weight buffer"),
    ("dram_bytes_per_s", Provenance::Paper, "HBM2, 256 GB/s"),
    ("bpc_lanes", Provenance::Paper, "16 compressor lanes"),
    ("bpc_latency", Provenance::Assumption, "aligner latency before first plane"),
    ("bpc_overlap", Provenance::Assumption, "compression overlaps APU compute"),
    ("pipeline_fill_cycles", Provenance::Assumption, "per-GeMM fill/drain"),
    ("vector_cycles_per_token", Provenance::Assumption, "lump term for non-linear ops"),
    ("reference_bits", Provenance::DerivedFromPaper, "peak normalized to 16-bit mantissa throughput"),
    ("weight_group_size", Provenance::Paper, "W4 group size 128"),
    ("weight_scale_bits", Provenance::Assumption, "FP16 weight scales"),
];

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.mxu_rows,
            self.mxu_cols,
            self.adder_width,
            self.bpc_lanes,
            self.weight_group_size,
            usize::from(self.reference_bits),
        ];
        if positive.contains(&0)
            || !(self.clock_hz > 0.0 && self.clock_hz.is_finite())
            || !(self.dram_bytes_per_s > 0.0 && self.dram_bytes_per_s.is_finite())
            || self.act_buffer_mantissa_bits == 0
            || self.act_buffer_exponent_bits == 0
            || self.weight_buffer_bits == 0
        {
            return Err(Error::InvalidParams("architecture parameters must be positive".into()));
        }
        if self.adder_width > crate::layout::LANES {
            return Err(Error::InvalidParams(format!(
                "adder width {} exceeds the 64-lane group",
                self.adder_width
            )));
        }
        Ok(())
    }

    /// DRAM bits transferable per clock cycle.
    pub fn dram_bits_per_cycle(&self) -> f64 {
        self.dram_bytes_per_s * 8.0 / self.clock_hz
    }

    /// Baseline MACs per cycle.
    pub fn peak_macs_per_cycle(&self) -> f64 {
        (self.mxu_rows * self.mxu_cols * self.adder_width) as f64 / f64::from(self.reference_bits)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: ArchConfig = from_tagged_json(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_tagged_json(&self) -> Result<String> {
        to_tagged_json(self, ARCH_PROVENANCE)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyParams {
    pub dram_pj_per_bit: f64,
    pub sram_pj_per_bit: f64,
    pub mxu_pj_per_apu_cycle: f64,
    pub bpc_pj_per_cycle: f64,
    pub vector_pj_per_cycle: f64,
    pub fpfp_pj_per_mac: f64,
    pub fpint_pj_per_mac: f64,
    pub ifpu_pj_per_mac: f64,
    pub figna_pj_per_mac: f64,
    /// Reduced-mantissa FIGNA energy per MAC per mantissa bit.
    pub figna_reduced_pj_per_mac_bit: f64,
    /// FP16 to block-floating-point conversion, per activation element delivered.
    pub conversion_pj_per_element: f64,
    /// INT to FP16 weight conversion in the FP-FP baseline, per weight element delivered.
    pub dequant_pj_per_element: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        // Anda PE at 16 bits: 0.745 pJ * 16 / 64 = 0.18625 pJ per MAC.
        EnergyParams {
            dram_pj_per_bit: 3.9,
            sram_pj_per_bit: 0.2,
            mxu_pj_per_apu_cycle: 0.745,
            bpc_pj_per_cycle: 3.72,
            vector_pj_per_cycle: 3.05,
            fpfp_pj_per_mac: 0.3104,
            fpint_pj_per_mac: 0.3104,
            ifpu_pj_per_mac: 0.2623,
            figna_pj_per_mac: 0.1467,
            figna_reduced_pj_per_mac_bit: 0.00978,
            conversion_pj_per_element: 0.05,
            dequant_pj_per_element: 0.02,
        }
    }
}

const ENERGY_PROVENANCE: &[(&str, Provenance, &str)] = &[
    ("dram_pj_per_bit", Provenance::Paper, "HBM2 access energy 3.9 pJ/bit"),
    ("sram_pj_per_bit", Provenance::Assumption, "on-chip SRAM access"),
    ("mxu_pj_per_apu_cycle", Provenance::DerivedFromPaper, "54.34 mW / 285 MHz / 256 APUs"),
    ("bpc_pj_per_cycle", Provenance::DerivedFromPaper, "1.06 mW / 285 MHz"),
    ("vector_pj_per_cycle", Provenance::DerivedFromPaper, "0.87 mW / 285 MHz"),
    ("fpfp_pj_per_mac", Provenance::DerivedFromPaper, "Anda PE uses under 60% of FP-FP power at equal throughput"),
    ("fpint_pj_per_mac", Provenance::DerivedFromPaper, "Anda PE uses under 60% of FP-INT power at equal throughput"),
    ("ifpu_pj_per_mac", Provenance::DerivedFromPaper, "Anda PE uses 29% less power than iFPU"),
    ("figna_pj_per_mac", Provenance::DerivedFromPaper, "Anda PE uses 27% more power than FIGNA"),
    ("figna_reduced_pj_per_mac_bit", Provenance::DerivedFromPaper, "FIGNA-M8/M11 about 16% more energy-efficient than Anda at equal bits"),
    ("conversion_pj_per_element", Provenance::Assumption, "FP16 to BFP conversion per delivered activation"),
    ("dequant_pj_per_element", Provenance::Assumption, "INT to FP16 weight conversion per delivered weight"),
];

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.dram_pj_per_bit,
            self.sram_pj_per_bit,
            self.mxu_pj_per_apu_cycle,
            self.bpc_pj_per_cycle,
            self.vector_pj_per_cycle,
            self.fpfp_pj_per_mac,
            self.fpint_pj_per_mac,
            self.ifpu_pj_per_mac,
            self.figna_pj_per_mac,
            self.figna_reduced_pj_per_mac_bit,
            self.conversion_pj_per_element,
            self.dequant_pj_per_element,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParams("energy parameters must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let e: EnergyParams = from_tagged_json(s)?;
        e.validate()?;
        Ok(e)
    }

    pub fn to_tagged_json(&self) -> Result<String> {
        to_tagged_json(self, ENERGY_PROVENANCE)
    }
}

fn from_tagged_json<T: DeserializeOwned>(s: &str) -> Result<T> {
    let value: Value = serde_json::from_str(s)?;
    let Value::Object(map) = value else {
        return Err(Error::InvalidParams("config must be a JSON object".into()));
    };
    let mut plain = Map::new();
    for (k, v) in map {
        let v = match v {
            Value::Object(mut inner) => {
                if let Some(p) = inner.get("provenance") {
                    serde_json::from_value::<Provenance>(p.clone())?;
                }
                inner
                    .remove("value")
                    .ok_or_else(|| Error::InvalidParams(format!("config entry {k:?} has no value")))?
            }
            other => other,
        };
        plain.insert(k, v);
    }
    Ok(serde_json::from_value(Value::Object(plain))?)
}

fn to_tagged_json<T: Serialize>(cfg: &T, tags: &[(&str, Provenance, &str)]) -> Result<String> {
    let Value::Object(map) = serde_json::to_value(cfg)? else {
        unreachable!("config structs serialize to objects");
    };
    let mut out = Map::new();
    for (name, provenance, note) in tags {
        let value = map.get(*name).cloned().expect("tag table matches struct fields");
        out.insert(
            (*name).to_string(),
            serde_json::json!({ "value": value, "provenance": provenance, "note": note }),
        );
    }
    debug_assert_eq!(out.len(), map.len());
    Ok(serde_json::to_string_pretty(&Value::Object(out))? + "\n")
}
