//! Cycle trace of a simulation run.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceLevel {
    /// Every event plus per-cycle aggregates.
    Full,
    /// Per-cycle aggregates and totals only.
    #[default]
    Summary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceEvent {
    Inject,
    Stage,
    Emit,
    Lisu,
}

impl TraceEvent {
    pub fn name(self) -> &'static str {
        match self {
            TraceEvent::Inject => "inject",
            TraceEvent::Stage => "stage",
            TraceEvent::Emit => "emit",
            TraceEvent::Lisu => "lisu",
        }
    }
}

/// `stage` is 0 for injection, 1..=S for scan rows, S for emission and
/// S+1 for the LISU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub cycle: u64,
    pub ssa_id: usize,
    pub stage: usize,
    pub active_spes: usize,
    pub event: TraceEvent,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleStats {
    pub active_spes: usize,
    /// Rows held in scan-array registers.
    pub occupancy: usize,
    pub emitted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub total_cycles: u64,
    pub jobs: usize,
    pub emitted_outputs: usize,
    pub lisu_combines: usize,
    pub peak_active_spes: usize,
    /// Busy SPE-cycles over available SPE-cycles across all arrays.
    pub spe_utilization: f64,
    pub causality_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsaTrace {
    pub level: TraceLevel,
    pub records: Vec<TraceRecord>,
    /// Indexed by cycle.
    pub per_cycle: Vec<CycleStats>,
    pub total_cycles: u64,
    pub jobs: usize,
    pub emitted_outputs: usize,
    pub lisu_combines: usize,
    pub causality_violations: usize,
    pub(crate) spe_slots: usize,
}

impl SsaTrace {
    pub(crate) fn new(level: TraceLevel, spe_slots: usize) -> Self {
        Self {
            level,
            records: Vec::new(),
            per_cycle: Vec::new(),
            total_cycles: 0,
            jobs: 0,
            emitted_outputs: 0,
            lisu_combines: 0,
            causality_violations: 0,
            spe_slots,
        }
    }

    fn at(&mut self, cycle: u64) -> &mut CycleStats {
        let c = cycle as usize;
        if self.per_cycle.len() <= c {
            self.per_cycle.resize(c + 1, CycleStats::default());
        }
        &mut self.per_cycle[c]
    }

    pub(crate) fn record(&mut self, rec: TraceRecord) {
        self.total_cycles = self.total_cycles.max(rec.cycle);
        let s = self.at(rec.cycle);
        s.active_spes += rec.active_spes;
        if self.level == TraceLevel::Full {
            self.records.push(rec);
        }
    }

    pub(crate) fn emitted(&mut self, cycle: u64, n: usize) {
        self.at(cycle).emitted += n;
        self.emitted_outputs += n;
    }

    pub(crate) fn occupy(&mut self, from: u64, to: u64) {
        for c in from..to {
            self.at(c).occupancy += 1;
        }
    }

    pub fn summary(&self) -> TraceSummary {
        let busy: usize = self.per_cycle.iter().map(|c| c.active_spes).sum();
        let avail = self.spe_slots as f64 * self.per_cycle.len().max(1) as f64;
        TraceSummary {
            total_cycles: self.total_cycles,
            jobs: self.jobs,
            emitted_outputs: self.emitted_outputs,
            lisu_combines: self.lisu_combines,
            peak_active_spes: self.per_cycle.iter().map(|c| c.active_spes).max().unwrap_or(0),
            spe_utilization: if avail > 0.0 { busy as f64 / avail } else { 0.0 },
            causality_violations: self.causality_violations,
        }
    }

    /// `cycle,ssa_id,stage,active_spes,event`. At summary level one row per
    /// cycle with `ssa_id` and `stage` set to `-1`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cycle,ssa_id,stage,active_spes,event\n");
        match self.level {
            TraceLevel::Full => {
                for r in &self.records {
                    let _ = writeln!(out, "{},{},{},{},{}", r.cycle, r.ssa_id, r.stage, r.active_spes, r.event.name());
                }
            }
            TraceLevel::Summary => {
                for (c, s) in self.per_cycle.iter().enumerate() {
                    let _ = writeln!(out, "{c},-1,-1,{},cycle", s.active_spes);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_header_and_rows() {
        let mut t = SsaTrace::new(TraceLevel::Full, 16);
        t.record(TraceRecord { cycle: 2, ssa_id: 1, stage: 1, active_spes: 15, event: TraceEvent::Stage });
        let csv = t.to_csv();
        assert_eq!(csv, "cycle,ssa_id,stage,active_spes,event\n2,1,1,15,stage\n");
        assert_eq!(t.per_cycle.len(), 3);
        assert_eq!(t.summary().peak_active_spes, 15);
    }
}
