//! Discrete-event simulation on one logical clock.
//!
//! Each array accepts one row-vector pair per `inject_cycles`. Row `s` of an
//! array applies the Kogge-Stone step of stride `2^s` and holds one pair at a
//! time for `stage_cycles`. After the last row a pair is emitted
//! `fill_constant` cycles later. Chunks after the first wait in the LISU until
//! every chunk of their lane has been emitted, then are chained one per
//! `lisu_cycles`. Events of one cycle are handled in (kind, ssa, job) order.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::ssa::schedule::{schedule_chunks, ChunkSchedule};
use crate::ssa::spe::{lisu_raw, spe_combine, QPair, SpeParams};
use crate::ssa::trace::{SsaTrace, TraceEvent, TraceLevel, TraceRecord};
use crate::ssa::{LisuMode, SsaConfig};
use crate::numerics::{saturate, shift_round};

#[derive(Debug)]
pub struct SimOutput {
    /// Raw Q states, lane-major (`h * m_extent + m`), each of length L.
    pub states: Vec<Vec<i64>>,
    pub trace: SsaTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Lisu { ssa: usize, lane: usize, chunk: usize },
    Emit { ssa: usize, job: usize },
    Stage { ssa: usize, job: usize, stage: u32, start: u64 },
    Inject { ssa: usize, job: usize },
}

struct InFlight {
    buf: Vec<QPair>,
    injected_at: u64,
    produced_at: u64,
}

struct Sim<'a> {
    cfg: &'a SsaConfig,
    sp: SpeParams,
    sched: ChunkSchedule,
    events: BTreeMap<u64, Vec<Ev>>,
    stage_free: Vec<Vec<u64>>,
    lisu_free: u64,
    inflight: HashMap<usize, InFlight>,
    lane_cache: HashMap<usize, (Vec<QPair>, usize)>,
    partials: HashMap<(usize, usize), Vec<QPair>>,
    lane_emitted: Vec<usize>,
    states: Vec<Vec<i64>>,
    writes: Vec<u8>,
    trace: SsaTrace,
}

impl Sim<'_> {
    fn at(&mut self, cycle: u64, ev: Ev) {
        self.events.entry(cycle).or_default().push(ev);
    }

    fn reserve_stage(&mut self, ssa: usize, job: usize, stage: u32, ready: u64) {
        let free = &mut self.stage_free[ssa][stage as usize];
        let start = ready.max(*free);
        *free = start + self.cfg.stage_cycles;
        self.at(start + self.cfg.stage_cycles, Ev::Stage { ssa, job, stage, start });
    }

    fn inject(&mut self, cycle: u64, ssa: usize, job_id: usize, source: &dyn Fn(usize) -> Result<Vec<QPair>>) -> Result<()> {
        let job = self.sched.job(job_id);
        let k = self.sched.chunks_per_lane();
        if !self.lane_cache.contains_key(&job.lane) {
            let data = source(job.lane)?;
            if data.len() != self.sched.l {
                return Err(Error::Shape(format!("lane {} has {} elements, expected {}", job.lane, data.len(), self.sched.l)));
            }
            self.lane_cache.insert(job.lane, (data, k));
        }
        let entry = self.lane_cache.get_mut(&job.lane).expect("inserted above");
        let mut buf = entry.0[job.l_offset..job.l_offset + job.real_len].to_vec();
        entry.1 -= 1;
        if entry.1 == 0 {
            self.lane_cache.remove(&job.lane);
        }
        buf.resize(self.sched.chunk_size, self.sp.pad());
        let ready = cycle + self.cfg.inject_cycles;
        self.inflight.insert(job_id, InFlight { buf, injected_at: cycle, produced_at: ready });
        self.trace.jobs += 1;
        self.trace.record(TraceRecord { cycle, ssa_id: ssa, stage: 0, active_spes: 0, event: TraceEvent::Inject });
        if self.cfg.stages() == 0 {
            self.at(ready + self.cfg.fill_constant, Ev::Emit { ssa, job: job_id });
        } else {
            self.reserve_stage(ssa, job_id, 0, ready);
        }
        let next = job_id + self.sched.n_ssa;
        if next < self.sched.len() {
            self.at(ready, Ev::Inject { ssa, job: next });
        }
        Ok(())
    }

    fn stage(&mut self, cycle: u64, ssa: usize, job: usize, stage: u32, start: u64) {
        let stride = 1usize << stage;
        let sp = self.sp;
        let f = self.inflight.get_mut(&job).expect("job in flight");
        if f.produced_at > start {
            self.trace.causality_violations += 1;
        }
        let old = f.buf.clone();
        for i in stride..old.len() {
            f.buf[i] = spe_combine(old[i - stride], old[i], sp);
        }
        f.produced_at = cycle;
        let c = self.sched.chunk_size;
        self.trace.record(TraceRecord {
            cycle,
            ssa_id: ssa,
            stage: stage as usize + 1,
            active_spes: c - stride,
            event: TraceEvent::Stage,
        });
        if stage + 1 < self.cfg.stages() {
            self.reserve_stage(ssa, job, stage + 1, cycle);
        } else {
            self.at(cycle + self.cfg.fill_constant, Ev::Emit { ssa, job });
        }
    }

    fn emit(&mut self, cycle: u64, ssa: usize, job_id: usize) {
        let job = self.sched.job(job_id);
        let f = self.inflight.remove(&job_id).expect("job in flight");
        if f.produced_at > cycle {
            self.trace.causality_violations += 1;
        }
        self.trace.occupy(f.injected_at, cycle);
        self.trace.record(TraceRecord {
            cycle,
            ssa_id: ssa,
            stage: self.cfg.stages() as usize,
            active_spes: 0,
            event: TraceEvent::Emit,
        });
        self.trace.emitted(cycle, job.real_len);
        let mut part = f.buf;
        part.truncate(job.real_len);
        if job.chunk == 0 {
            for (i, e) in part.iter().enumerate() {
                self.write(job.lane, job.l_offset + i, e.q);
            }
        } else {
            self.partials.insert((job.lane, job.chunk), part);
        }
        self.lane_emitted[job.lane] += 1;
        let k = self.sched.chunks_per_lane();
        if self.lane_emitted[job.lane] == k && k > 1 {
            let lisu = self.cfg.lisu_cycles;
            let start = match self.cfg.lisu_mode {
                LisuMode::Pipelined => cycle,
                LisuMode::Shared => {
                    let s = cycle.max(self.lisu_free);
                    self.lisu_free = s + (k as u64 - 1) * lisu;
                    s
                }
            };
            let owner = self.sched.job(job.lane * k + 1).ssa_id;
            self.at(start + lisu, Ev::Lisu { ssa: owner, lane: job.lane, chunk: 1 });
        }
    }

    fn lisu(&mut self, cycle: u64, ssa: usize, lane: usize, chunk: usize) {
        let c = self.sched.chunk_size;
        let off = chunk * c;
        let part = self.partials.remove(&(lane, chunk)).expect("partial emitted before chaining");
        if self.writes[lane * self.sched.l + off - 1] != 1 {
            self.trace.causality_violations += 1;
        }
        let prev = self.states[lane][off - 1];
        let sp = self.sp;
        for (i, e) in part.iter().enumerate() {
            let v = if self.cfg.fault_flip_lisu {
                saturate(shift_round(sp.p_one() * e.q, sp.k) + prev, sp.acc_bits)
            } else {
                lisu_raw(prev, *e, sp)
            };
            self.write(lane, off + i, v);
        }
        self.trace.lisu_combines += 1;
        self.trace.record(TraceRecord {
            cycle,
            ssa_id: ssa,
            stage: self.cfg.stages() as usize + 1,
            active_spes: part.len(),
            event: TraceEvent::Lisu,
        });
        let k = self.sched.chunks_per_lane();
        if chunk + 1 < k {
            let owner = self.sched.job(lane * k + chunk + 1).ssa_id;
            self.at(cycle + self.cfg.lisu_cycles, Ev::Lisu { ssa: owner, lane, chunk: chunk + 1 });
        }
    }

    fn write(&mut self, lane: usize, pos: usize, v: i64) {
        self.states[lane][pos] = v;
        self.writes[lane * self.sched.l + pos] += 1;
    }
}

/// Runs every `(h, m)` lane of length `l` through the arrays. `source(lane)`
/// supplies the quantized operands of a lane and is called once per lane.
pub fn simulate_lanes(
    cfg: &SsaConfig,
    (l, h, m): (usize, usize, usize),
    sp: SpeParams,
    level: TraceLevel,
    source: &dyn Fn(usize) -> Result<Vec<QPair>>,
) -> Result<SimOutput> {
    cfg.validate()?;
    let sched = schedule_chunks(l, h, m, cfg.chunk_size, cfg.n_ssa)?;
    let lanes = sched.lanes();
    let mut sim = Sim {
        cfg,
        sp,
        sched,
        events: BTreeMap::new(),
        stage_free: vec![vec![0; cfg.stages() as usize]; cfg.n_ssa],
        lisu_free: 0,
        inflight: HashMap::new(),
        lane_cache: HashMap::new(),
        partials: HashMap::new(),
        lane_emitted: vec![0; lanes],
        states: vec![vec![0; l]; lanes],
        writes: vec![0; lanes * l],
        trace: SsaTrace::new(level, cfg.n_ssa * cfg.chunk_size),
    };
    for ssa in 0..cfg.n_ssa.min(sim.sched.len()) {
        sim.at(0, Ev::Inject { ssa, job: ssa });
    }
    while let Some((cycle, mut evs)) = sim.events.pop_first() {
        evs.sort_unstable();
        for ev in evs {
            match ev {
                Ev::Inject { ssa, job } => sim.inject(cycle, ssa, job, source)?,
                Ev::Stage { ssa, job, stage, start } => sim.stage(cycle, ssa, job, stage, start),
                Ev::Emit { ssa, job } => sim.emit(cycle, ssa, job),
                Ev::Lisu { ssa, lane, chunk } => sim.lisu(cycle, ssa, lane, chunk),
            }
        }
    }
    if sim.writes.iter().any(|&w| w != 1) {
        return Err(Error::Invalid("state written other than exactly once".into()));
    }
    Ok(SimOutput { states: sim.states, trace: sim.trace })
}

/// Single array, one row per lane, every row exactly one chunk long.
pub fn ssa_run(rows: &[Vec<QPair>], sp: SpeParams, cfg: &SsaConfig, level: TraceLevel) -> Result<SimOutput> {
    if rows.is_empty() {
        return Err(Error::Empty("scan job rows"));
    }
    let c = cfg.chunk_size;
    if let Some(r) = rows.iter().find(|r| r.len() != c) {
        return Err(Error::Shape(format!("row of length {} in a chunk of {c}", r.len())));
    }
    let one = SsaConfig { n_ssa: 1, ..cfg.clone() };
    simulate_lanes(&one, (c, rows.len(), 1), sp, level, &|lane| Ok(rows[lane].clone()))
}
