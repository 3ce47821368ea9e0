//! Cycle-level model of the systolic scan arrays and the long-input support
//! unit (LISU) that chains chunk states.

pub mod qpath;
pub mod schedule;
pub mod sim;
pub mod spe;
pub mod trace;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use qpath::{quantize_lanes, quantized_selective_ssm, simulate_selective_scan, QuantOptions, QuantScanOutput};
pub use schedule::{schedule_chunks, ChunkJob, ChunkSchedule};
pub use sim::{simulate_lanes, ssa_run, SimOutput};
pub use spe::{chunked_lane_scan, lisu_combine, sequential_lane_scan, spe_combine, spe_step, QPair, SpeIn, SpeOut, SpeParams};
pub use trace::{SsaTrace, TraceEvent, TraceLevel, TraceRecord, TraceSummary};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LisuMode {
    /// Each lane's chain runs as soon as its partials are ready.
    #[default]
    Pipelined,
    /// One LISU row serves lanes first come first served.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsaConfig {
    pub n_ssa: usize,
    pub chunk_size: usize,
    pub inject_cycles: u64,
    pub stage_cycles: u64,
    pub lisu_cycles: u64,
    pub fill_constant: u64,
    /// Q accumulator width including fractional bits.
    pub acc_bits: u32,
    pub lisu_mode: LisuMode,
    /// Swaps the operands of the LISU combine. For verification only.
    pub fault_flip_lisu: bool,
}

impl Default for SsaConfig {
    fn default() -> Self {
        Self {
            n_ssa: 8,
            chunk_size: 16,
            inject_cycles: 1,
            stage_cycles: 1,
            lisu_cycles: 1,
            fill_constant: 0,
            acc_bits: spe::DEFAULT_ACC_BITS,
            lisu_mode: LisuMode::Pipelined,
            fault_flip_lisu: false,
        }
    }
}

impl SsaConfig {
    pub fn with_shape(n_ssa: usize, chunk_size: usize) -> Self {
        Self { n_ssa, chunk_size, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ssa == 0 {
            return Err(Error::Config("n_ssa must be positive".into()));
        }
        if self.chunk_size == 0 || !self.chunk_size.is_power_of_two() {
            return Err(Error::Config(format!("chunk size {} is not a power of two", self.chunk_size)));
        }
        if self.inject_cycles == 0 || self.stage_cycles == 0 || self.lisu_cycles == 0 {
            return Err(Error::Config("inject, stage and LISU latencies must be positive".into()));
        }
        spe::SpeParams::new(0, self.acc_bits)?;
        Ok(())
    }

    /// Kogge-Stone rows per array.
    pub fn stages(&self) -> u32 {
        self.chunk_size.trailing_zeros()
    }
}
