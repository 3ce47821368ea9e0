//! Scan processing element arithmetic.
//!
//! P operands are int8 at scale `2^-k`. Q operands are fixed-point raw values
//! with two fractional bits on the `s_dBu` grid. Every product is rounded once,
//! ties away from zero, then saturated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{saturate, shift_round, FixedPoint};
use crate::quant::RESCALE_EXTRA_BITS;
use crate::ssm::kogge_stone_by;

pub const P_BITS: u32 = 8;
pub const Q_FRAC_BITS: u32 = RESCALE_EXTRA_BITS;
pub const DEFAULT_ACC_BITS: u32 = 24;

/// One scan operand pair in the quantized domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QPair {
    pub p: i64,
    /// Raw Q with [`Q_FRAC_BITS`] fractional bits.
    pub q: i64,
}

/// Arithmetic parameters shared by every SPE and the LISU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeParams {
    /// Shift implementing the `2^-k` rescale.
    pub k: u32,
    /// Q accumulator width including fractional bits.
    pub acc_bits: u32,
}

impl SpeParams {
    pub fn new(k: u32, acc_bits: u32) -> Result<Self> {
        if !(Q_FRAC_BITS + 2..=62).contains(&acc_bits) {
            return Err(Error::Config(format!("accumulator width {acc_bits} outside [{}, 62]", Q_FRAC_BITS + 2)));
        }
        if k > 30 {
            return Err(Error::Config(format!("shift {k} too large")));
        }
        Ok(Self { k, acc_bits })
    }

    /// Quantized 1.0 on the P grid; the padding element.
    pub fn p_one(&self) -> i64 {
        saturate(1i64 << self.k, P_BITS)
    }

    pub fn pad(&self) -> QPair {
        QPair { p: self.p_one(), q: 0 }
    }
}

/// `x` followed by `y`: `(rescale(x.p*y.p), rescale(y.p*x.q) + y.q)`.
#[inline]
pub fn spe_combine(x: QPair, y: QPair, sp: SpeParams) -> QPair {
    QPair {
        p: saturate(shift_round(x.p * y.p, sp.k), P_BITS),
        q: saturate(shift_round(y.p * x.q, sp.k) + y.q, sp.acc_bits),
    }
}

/// Inputs of one SPE: element `n` and its successor `n+1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpeIn {
    pub p_n: i64,
    pub p_n1: i64,
    pub q_n: FixedPoint,
    pub q_n1: FixedPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpeOut {
    pub p: i64,
    pub q: FixedPoint,
}

/// Operands outside their ranges are saturated on entry.
pub fn spe_step(io: SpeIn, sp: SpeParams) -> SpeOut {
    let p_n = saturate(io.p_n, P_BITS);
    let p_n1 = saturate(io.p_n1, P_BITS);
    let q_n = io.q_n.realign(Q_FRAC_BITS).saturate(sp.acc_bits);
    let q_n1 = io.q_n1.realign(Q_FRAC_BITS).saturate(sp.acc_bits);
    let prod = q_n.mul_int(p_n1).scale_pow2(sp.k, Q_FRAC_BITS);
    SpeOut {
        p: saturate(shift_round(p_n * p_n1, sp.k), P_BITS),
        q: FixedPoint::new(prod.raw + q_n1.raw, Q_FRAC_BITS).saturate(sp.acc_bits),
    }
}

/// Applies the chunk prefix `(p_prefix, q_partial)` to the state carried in.
pub fn lisu_combine(prev_state: FixedPoint, p_prefix: i64, q_partial: FixedPoint, sp: SpeParams) -> Result<FixedPoint> {
    if prev_state.frac_bits != Q_FRAC_BITS || q_partial.frac_bits != Q_FRAC_BITS {
        return Err(Error::Misaligned(prev_state.frac_bits, q_partial.frac_bits));
    }
    let carried = prev_state.mul_int(saturate(p_prefix, P_BITS)).scale_pow2(sp.k, Q_FRAC_BITS);
    Ok(FixedPoint::new(carried.raw + q_partial.raw, Q_FRAC_BITS).saturate(sp.acc_bits))
}

#[inline]
pub(crate) fn lisu_raw(prev: i64, part: QPair, sp: SpeParams) -> i64 {
    saturate(shift_round(part.p * prev, sp.k) + part.q, sp.acc_bits)
}

/// Straight-line chunked scan of one lane: Kogge-Stone within each chunk of
/// `c`, identity padding on the tail, chunk states chained in order.
pub fn chunked_lane_scan(lane: &[QPair], c: usize, sp: SpeParams) -> Vec<i64> {
    let mut out = Vec::with_capacity(lane.len());
    let mut prev: Option<i64> = None;
    for chunk in lane.chunks(c) {
        let mut buf = chunk.to_vec();
        buf.resize(c, sp.pad());
        let partial = kogge_stone_by(&buf, |x, y| spe_combine(x, y, sp));
        for &part in &partial[..chunk.len()] {
            out.push(match prev {
                None => part.q,
                Some(s) => lisu_raw(s, part, sp),
            });
        }
        prev = out.last().copied();
    }
    out
}

/// Element-by-element quantized recurrence `s = rescale(p*s) + q`.
pub fn sequential_lane_scan(lane: &[QPair], sp: SpeParams) -> Vec<i64> {
    let mut s = 0i64;
    lane.iter()
        .map(|e| {
            s = lisu_raw(s, *e, sp);
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp() -> SpeParams {
        SpeParams::new(7, DEFAULT_ACC_BITS).unwrap()
    }

    fn fx(raw: i64) -> FixedPoint {
        FixedPoint::new(raw, Q_FRAC_BITS)
    }

    #[test]
    fn p_of_quantized_ones() {
        let o = spe_step(SpeIn { p_n: 127, p_n1: 127, q_n: fx(0), q_n1: fx(0) }, sp());
        assert_eq!(o.p, 126);
        assert!((o.p as f64 / 128.0 - 0.984375).abs() < 1e-12);
        assert_eq!(sp().p_one(), 127);
    }

    #[test]
    fn identities() {
        let o = spe_step(SpeIn { p_n: 90, p_n1: 50, q_n: fx(0), q_n1: fx(37) }, sp());
        assert_eq!(o.q, fx(37));
        let o = spe_step(SpeIn { p_n: 90, p_n1: 0, q_n: fx(-400), q_n1: fx(37) }, sp());
        assert_eq!(o.p, 0);
        assert_eq!(o.q, fx(37));
    }

    #[test]
    fn spe_step_matches_raw_combine() {
        let s = sp();
        for &(a, b, qa, qb) in &[(127, 127, 508, -4), (-127, 64, 1001, 3), (1, 1, -1, 0), (100, -100, 8_000_000, 8_000_000)] {
            let o = spe_step(SpeIn { p_n: a, p_n1: b, q_n: fx(qa), q_n1: fx(qb) }, s);
            let r = spe_combine(QPair { p: a, q: qa }, QPair { p: b, q: qb }, s);
            assert_eq!((o.p, o.q.raw), (r.p, r.q));
        }
        let o = spe_step(SpeIn { p_n: 1, p_n1: 127, q_n: fx(8_000_000), q_n1: fx(8_000_000) }, s);
        assert_eq!(o.q.raw, (1 << 23) - 1);
    }

    #[test]
    fn rescale_rounds_ties_away() {
        let s = SpeParams::new(1, DEFAULT_ACC_BITS).unwrap();
        let r = spe_combine(QPair { p: 1, q: 3 }, QPair { p: 1, q: 0 }, s);
        assert_eq!((r.p, r.q), (1, 2));
        let r = spe_combine(QPair { p: 1, q: -3 }, QPair { p: 1, q: 0 }, s);
        assert_eq!(r.q, -2);
    }

    #[test]
    fn lisu_examples() {
        let s = sp();
        assert_eq!(lisu_combine(fx(0), 100, fx(55), s).unwrap(), fx(55));
        assert_eq!(lisu_combine(fx(9999), 0, fx(55), s).unwrap(), fx(55));
        assert_eq!(lisu_combine(fx(256), 64, fx(1), s).unwrap(), fx(129));
        assert!(lisu_combine(FixedPoint::new(1, 0), 1, fx(0), s).is_err());
    }

    #[test]
    fn chunked_scan_single_chunk_is_kogge_stone() {
        let s = sp();
        let lane: Vec<QPair> = (0..8).map(|i| QPair { p: 100 + i, q: 4 * (i - 3) }).collect();
        let ks: Vec<i64> = kogge_stone_by(&lane, |x, y| spe_combine(x, y, s)).iter().map(|e| e.q).collect();
        assert_eq!(chunked_lane_scan(&lane, 8, s), ks);
        // chunk of one is the sequential recurrence
        assert_eq!(chunked_lane_scan(&lane, 1, s), sequential_lane_scan(&lane, s));
    }

    #[test]
    fn bad_params() {
        assert!(SpeParams::new(7, 3).is_err());
        assert!(SpeParams::new(31, 24).is_err());
    }
}
