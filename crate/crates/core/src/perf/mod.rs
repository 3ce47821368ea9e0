//! Analytic latency, energy and off-chip traffic model.

pub mod model;
pub mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssa::{LisuMode, SsaConfig};

pub use model::{
    block_inventory, end_to_end, gemm_cycles, roofline_point, scan_cycles, selective_ssm_traffic, tokens_for_image,
    Category, OpCost,
};
pub use report::{Energy, RooflinePoint, SimReport, Traffic};

/// Shipped hardware defaults and model presets.
pub const PRESETS_JSON: &str = include_str!("../../../../configs/models.json");

/// Per-operation energies in joules. The logic and on-chip defaults are
/// estimates for a generic node, not measured values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyCoeffs {
    pub e_mac_int8: f64,
    pub e_mac_fp16: f64,
    pub e_onchip_per_byte: f64,
    pub e_offchip_per_bit: f64,
}

impl Default for EnergyCoeffs {
    fn default() -> Self {
        Self { e_mac_int8: 0.23e-12, e_mac_fp16: 1.5e-12, e_onchip_per_byte: 1.25e-12, e_offchip_per_bit: 4e-12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsaTiming {
    pub inject_cycles: u64,
    pub stage_cycles: u64,
    pub lisu_cycles: u64,
    pub fill_constant: u64,
    pub acc_bits: u32,
    pub lisu_mode: LisuMode,
}

impl Default for SsaTiming {
    fn default() -> Self {
        let d = SsaConfig::default();
        Self {
            inject_cycles: d.inject_cycles,
            stage_cycles: d.stage_cycles,
            lisu_cycles: d.lisu_cycles,
            fill_constant: d.fill_constant,
            acc_bits: d.acc_bits,
            lisu_mode: d.lisu_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HwConfig {
    pub n_ssa: usize,
    pub chunk_size: usize,
    pub gemm_pe_rows: u64,
    pub gemm_pe_cols: u64,
    pub freq_hz: f64,
    pub offchip_bw_bytes_per_s: f64,
    pub onchip_bytes: u64,
    /// Lanes of the VPU and PPU, and ADU-CU pairs of the SFU.
    pub vector_width: u64,
    pub act_bytes: u64,
    pub weight_bytes: u64,
    /// Overlap DMA with compute instead of serializing them.
    pub overlap_dma: bool,
    pub energy: EnergyCoeffs,
    pub ssa: SsaTiming,
}

impl Default for HwConfig {
    fn default() -> Self {
        Self {
            n_ssa: 8,
            chunk_size: 16,
            gemm_pe_rows: 64,
            gemm_pe_cols: 64,
            freq_hz: 1e9,
            offchip_bw_bytes_per_s: 136.5e9,
            onchip_bytes: 384 * 1024,
            vector_width: 64,
            act_bytes: 1,
            weight_bytes: 1,
            overlap_dma: false,
            energy: EnergyCoeffs::default(),
            ssa: SsaTiming::default(),
        }
    }
}

impl HwConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.n_ssa > 0
            && self.gemm_pe_rows > 0
            && self.gemm_pe_cols > 0
            && self.freq_hz > 0.0
            && self.offchip_bw_bytes_per_s > 0.0
            && self.onchip_bytes > 0
            && self.vector_width > 0
            && self.act_bytes > 0
            && self.weight_bytes > 0;
        if !positive {
            return Err(Error::Config("hardware parameters must be positive".into()));
        }
        let e = &self.energy;
        if [e.e_mac_int8, e.e_mac_fp16, e.e_onchip_per_byte, e.e_offchip_per_bit].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("energy coefficients must be non-negative".into()));
        }
        self.ssa_config().validate()
    }

    pub fn ssa_config(&self) -> SsaConfig {
        SsaConfig {
            n_ssa: self.n_ssa,
            chunk_size: self.chunk_size,
            inject_cycles: self.ssa.inject_cycles,
            stage_cycles: self.ssa.stage_cycles,
            lisu_cycles: self.ssa.lisu_cycles,
            fill_constant: self.ssa.fill_constant,
            acc_bits: self.ssa.acc_bits,
            lisu_mode: self.ssa.lisu_mode,
            fault_flip_lisu: false,
        }
    }

    /// GEMM engine peak in ops/s, one MAC counted as two ops.
    pub fn peak_ops(&self) -> f64 {
        2.0 * (self.gemm_pe_rows * self.gemm_pe_cols) as f64 * self.freq_hz
    }

    pub fn bytes_per_cycle(&self) -> f64 {
        self.offchip_bw_bytes_per_s / self.freq_hz
    }

    /// Cycles to move `bytes` over the off-chip interface.
    pub fn dma_cycles(&self, bytes: u64) -> u64 {
        (bytes as f64 / self.bytes_per_cycle()).ceil() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub n_blocks: u64,
    /// Embedding width.
    pub hidden: u64,
    pub state: u64,
    pub params: u64,
    #[serde(default = "default_expand")]
    pub expand: u64,
    #[serde(default = "default_conv")]
    pub conv_width: u64,
    #[serde(default = "default_patch")]
    pub patch_px: u64,
    #[serde(default)]
    pub class_token: bool,
}

fn default_expand() -> u64 {
    2
}
fn default_conv() -> u64 {
    4
}
fn default_patch() -> u64 {
    16
}

impl ModelConfig {
    /// Width of the SSM paths.
    pub fn inner(&self) -> u64 {
        self.expand * self.hidden
    }

    pub fn dt_rank(&self) -> u64 {
        self.hidden.div_ceil(16)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.n_blocks, self.hidden, self.state, self.expand, self.conv_width, self.patch_px].contains(&0) {
            return Err(Error::Config(format!("model {} has a zero dimension", self.name)));
        }
        Ok(())
    }

    /// Parameter count implied by the block inventory, without embeddings.
    pub fn block_params(&self) -> u64 {
        let (d, e, r, m, k) = (self.hidden, self.inner(), self.dt_rank(), self.state, self.conv_width);
        let path = e * k + e + e * (r + 2 * m) + r * e + e + e * m + e;
        self.n_blocks * (2 * d + d * 2 * e + 2 * path + e * d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Presets {
    pub hw: HwConfig,
    pub models: BTreeMap<String, ModelConfig>,
}

pub fn presets() -> Presets {
    serde_json::from_str(PRESETS_JSON).expect("shipped presets parse")
}

pub fn model_preset(name: &str) -> Result<ModelConfig> {
    presets()
        .models
        .remove(&name.to_ascii_lowercase())
        .ok_or_else(|| Error::Config(format!("unknown model preset {name:?}")))
}
