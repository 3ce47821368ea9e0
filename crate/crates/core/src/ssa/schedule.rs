//! Chunk partitioning and round-robin assignment to scan arrays.

use serde::Serialize;

use crate::error::{Error, Result};

/// One lane segment of length `chunk_size` bound for one SSA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ChunkJob {
    /// Global issue index, lane-major then chunk-minor.
    pub job_id: usize,
    /// Flattened `h * m_extent + m`.
    pub lane: usize,
    pub h: usize,
    pub m: usize,
    /// Chunk index within the lane.
    pub chunk: usize,
    pub ssa_id: usize,
    /// Position in the issuing SSA's queue.
    pub slot: usize,
    pub l_offset: usize,
    /// Unpadded elements; the rest of the row is identity padding.
    pub real_len: usize,
}

impl ChunkJob {
    pub fn padding(&self, chunk_size: usize) -> usize {
        chunk_size - self.real_len
    }
}

/// Lazily enumerated schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkSchedule {
    pub l: usize,
    pub h: usize,
    pub m: usize,
    pub chunk_size: usize,
    pub n_ssa: usize,
}

impl ChunkSchedule {
    pub fn chunks_per_lane(&self) -> usize {
        self.l.div_ceil(self.chunk_size)
    }

    pub fn lanes(&self) -> usize {
        self.h * self.m
    }

    pub fn len(&self) -> usize {
        self.lanes() * self.chunks_per_lane()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn job(&self, job_id: usize) -> ChunkJob {
        let k = self.chunks_per_lane();
        let (lane, chunk) = (job_id / k, job_id % k);
        let l_offset = chunk * self.chunk_size;
        ChunkJob {
            job_id,
            lane,
            h: lane / self.m,
            m: lane % self.m,
            chunk,
            ssa_id: job_id % self.n_ssa,
            slot: job_id / self.n_ssa,
            l_offset,
            real_len: self.chunk_size.min(self.l - l_offset),
        }
    }

    pub fn jobs(&self) -> impl Iterator<Item = ChunkJob> + '_ {
        (0..self.len()).map(|j| self.job(j))
    }

    /// Jobs of one SSA in issue order.
    pub fn queue(&self, ssa_id: usize) -> impl Iterator<Item = ChunkJob> + '_ {
        (ssa_id..self.len()).step_by(self.n_ssa).map(|j| self.job(j))
    }
}

pub fn schedule_chunks(l: usize, h: usize, m: usize, chunk_size: usize, n_ssa: usize) -> Result<ChunkSchedule> {
    if l == 0 || h == 0 || m == 0 || n_ssa == 0 || chunk_size == 0 {
        return Err(Error::Config(format!(
            "schedule needs positive extents, got L={l} h={h} m={m} C={chunk_size} n_ssa={n_ssa}"
        )));
    }
    if !chunk_size.is_power_of_two() {
        return Err(Error::Config(format!("chunk size {chunk_size} is not a power of two")));
    }
    Ok(ChunkSchedule { l, h, m, chunk_size, n_ssa })
}
