use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::perf::model::Category;
use crate::perf::{HwConfig, ModelConfig};
use crate::ssa::TraceSummary;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    pub read: u64,
    pub write: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Energy {
    pub logic: f64,
    pub onchip: f64,
    pub offchip: f64,
    pub total: f64,
}

impl Energy {
    pub fn new(logic: f64, onchip: f64, offchip: f64) -> Self {
        Self { logic, onchip, offchip, total: logic + onchip + offchip }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RooflinePoint {
    pub name: String,
    pub ops: f64,
    pub bytes: f64,
    /// ops per byte
    pub intensity: f64,
    /// Attainable ops/s.
    pub bound: f64,
    pub achieved: f64,
}

pub const OPERAND_INVENTORY: &str = "selective SSM reads delta, u, z (L x h), B, C (L x m) and A (h x m) once and writes y (L x h); scan states stay on chip; every other operation reads its inputs and weights once and writes its outputs once";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub model: String,
    pub image_px: u64,
    pub tokens: u64,
    pub n_blocks: u64,
    pub dma_mode: String,
    pub operand_inventory: String,
    /// Cycles per category, all blocks.
    pub cycles: BTreeMap<String, u64>,
    pub total_cycles: u64,
    pub latency_s: f64,
    pub energy: Energy,
    pub offchip: Traffic,
    pub roofline: Vec<RooflinePoint>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ssa_trace: Option<TraceSummary>,
}

impl SimReport {
    pub(crate) fn new(model: &ModelConfig, image_px: u64, tokens: u64, hw: &HwConfig) -> Self {
        Self {
            model: model.name.clone(),
            image_px,
            tokens,
            n_blocks: model.n_blocks,
            dma_mode: if hw.overlap_dma { "overlapped" } else { "serialized" }.to_string(),
            operand_inventory: OPERAND_INVENTORY.to_string(),
            cycles: Category::ALL.iter().map(|c| (c.name().to_string(), 0)).collect(),
            total_cycles: 0,
            latency_s: 0.0,
            energy: Energy::default(),
            offchip: Traffic::default(),
            roofline: Vec::new(),
            ssa_trace: None,
        }
    }

    pub(crate) fn set_cycles(&mut self, cat: Category, cycles: u64) {
        self.cycles.insert(cat.name().to_string(), cycles);
    }

    pub fn share(&self, cat: Category) -> f64 {
        if self.total_cycles == 0 {
            return 0.0;
        }
        self.cycles[cat.name()] as f64 / self.total_cycles as f64
    }

    pub const CSV_HEADER: &'static str = "model,image_px,tokens,gemm_cycles,layernorm_cycles,conv1d_cycles,elementwise_cycles,selective_ssm_cycles,total_cycles,latency_s,selective_ssm_share,energy_logic_j,energy_onchip_j,energy_offchip_j,energy_total_j,offchip_read_bytes,offchip_write_bytes";

    pub fn csv_row(&self) -> String {
        let c = |cat: Category| self.cycles[cat.name()];
        format!(
            "{},{},{},{},{},{},{},{},{},{:e},{:.6},{:e},{:e},{:e},{:e},{},{}",
            self.model,
            self.image_px,
            self.tokens,
            c(Category::Gemm),
            c(Category::LayerNorm),
            c(Category::Conv1d),
            c(Category::Elementwise),
            c(Category::SelectiveSsm),
            self.total_cycles,
            self.latency_s,
            self.share(Category::SelectiveSsm),
            self.energy.logic,
            self.energy.onchip,
            self.energy.offchip,
            self.energy.total,
            self.offchip.read,
            self.offchip.write
        )
    }

    /// `category,cycles,latency_s,share`
    pub fn breakdown_csv(&self, freq_hz: f64) -> String {
        let mut out = String::from("category,cycles,latency_s,share\n");
        for cat in Category::ALL {
            let cy = self.cycles[cat.name()];
            let _ = writeln!(out, "{},{},{:e},{:.6}", cat.name(), cy, cy as f64 / freq_hz, self.share(cat));
        }
        out
    }
}
