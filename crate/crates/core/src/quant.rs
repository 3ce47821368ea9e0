//! Hybrid hardware-friendly quantization.
//!
//! Symmetric uniform quantization with `s = x_max / (2^(b-1) - 1)`. Weights
//! get one scale per tensor, activations one scale per `h` channel. The scale
//! of the exp(ΔA) stream is rounded to a power of two so that rescaling inside
//! the scan array is a shift.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{fx_round_to_int, saturate, shift_round, sym_max, Dim, FixedPoint, QuantTensor, RealTensor, Scale};
use crate::ssm::SsmInputs;

/// Scale used for an all-zero tensor.
pub const SCALE_FLOOR: f64 = 1e-8;

/// Extra fractional bits produced by a shift rescale.
pub const RESCALE_EXTRA_BITS: u32 = 2;

fn check_bits(b: u32) -> Result<()> {
    if (2..=16).contains(&b) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("bit width {b} outside [2, 16]")))
    }
}

pub fn compute_scale(x_max: f64, b: u32) -> Result<f64> {
    check_bits(b)?;
    if !(x_max > 0.0 && x_max.is_finite()) {
        return Err(Error::Invalid(format!("x_max must be positive and finite, got {x_max}")));
    }
    Ok(x_max / sym_max(b) as f64)
}

/// [`compute_scale`] with degenerate maxima mapped to [`SCALE_FLOOR`].
pub fn scale_or_floor(x_max: f64, b: u32) -> Result<f64> {
    if x_max <= 0.0 {
        check_bits(b)?;
        return Ok(SCALE_FLOOR);
    }
    compute_scale(x_max, b)
}

/// Round-to-nearest then saturate to the symmetric `b`-bit range.
#[inline]
pub fn quantize_value(x: f64, s: f64, b: u32) -> i32 {
    saturate(fx_round_to_int(x / s), b) as i32
}

pub fn quantize(t: &RealTensor, scale: &Scale, b: u32) -> Result<QuantTensor> {
    check_bits(b)?;
    let data = match scale {
        Scale::Scalar(s) => t.data().iter().map(|&x| quantize_value(x, *s, b)).collect(),
        Scale::PerChannel(v) => {
            let ax = t.axis(Dim::H).ok_or_else(|| Error::Shape("per-channel scale needs an h dimension".into()))?;
            let h = t.dims()[ax].1;
            if v.len() != h {
                return Err(Error::Shape(format!("{} channel scales for h extent {h}", v.len())));
            }
            let inner: usize = t.dims()[ax + 1..].iter().map(|&(_, e)| e).product();
            t.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| quantize_value(x, v[(i / inner) % h], b))
                .collect()
        }
    };
    QuantTensor::new(t.dims().to_vec(), data, b, scale.clone())
}

pub fn dequantize(q: &QuantTensor) -> RealTensor {
    let data = q.data().iter().enumerate().map(|(i, &v)| v as f64 * q.scale_at(i)).collect();
    RealTensor::new(q.dims().to_vec(), data).expect("dequantized values are finite")
}

/// Nearest power of two in the log domain: returns `(2^-k, k)`.
pub fn approx_pow2(s: f64) -> (f64, i32) {
    let k = (-s.log2()).round() as i32;
    ((-k as f64).exp2(), k)
}

/// `v * 2^-k` on a grid with two more fractional bits than `v`.
pub fn rescale_shift(v: FixedPoint, k: i32) -> Result<FixedPoint> {
    if k < 0 {
        return Err(Error::Invalid(format!("negative shift {k}")));
    }
    Ok(v.scale_pow2(k as u32, v.frac_bits + RESCALE_EXTRA_BITS))
}

/// `v * factor` by a real multiply, rounded onto the same grid as [`rescale_shift`].
pub fn rescale_multiply(v: FixedPoint, factor: f64) -> FixedPoint {
    let raw = fx_round_to_int(v.raw as f64 * factor * (RESCALE_EXTRA_BITS as f64).exp2());
    FixedPoint::new(raw, v.frac_bits + RESCALE_EXTRA_BITS)
}

/// Running max-abs statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub tensor_max: BTreeMap<String, f64>,
    pub channel_max: BTreeMap<String, Vec<f64>>,
    pub samples: usize,
}

impl CalibrationStats {
    pub fn observe_tensor(&mut self, name: &str, max_abs: f64) {
        let e = self.tensor_max.entry(name.to_string()).or_insert(0.0);
        *e = e.max(max_abs);
    }

    /// Per-channel max-abs of a tensor with an `h` axis.
    pub fn observe_channels(&mut self, name: &str, t: &RealTensor) -> Result<()> {
        let ax = t.axis(Dim::H).ok_or_else(|| Error::Shape(format!("{name} has no h dimension")))?;
        let h = t.dims()[ax].1;
        let inner: usize = t.dims()[ax + 1..].iter().map(|&(_, e)| e).product();
        let mut maxes = vec![0.0f64; h];
        for (i, v) in t.data().iter().enumerate() {
            let c = (i / inner) % h;
            maxes[c] = maxes[c].max(v.abs());
        }
        self.merge_channels(name, &maxes)
    }

    fn merge_channels(&mut self, name: &str, maxes: &[f64]) -> Result<()> {
        match self.channel_max.get_mut(name) {
            Some(cur) if cur.len() != maxes.len() => {
                Err(Error::Shape(format!("{name}: {} channels vs {} seen before", maxes.len(), cur.len())))
            }
            Some(cur) => {
                for (c, m) in cur.iter_mut().zip(maxes) {
                    *c = c.max(*m);
                }
                Ok(())
            }
            None => {
                self.channel_max.insert(name.to_string(), maxes.to_vec());
                Ok(())
            }
        }
    }

    /// Element-wise max; associative and commutative.
    pub fn merge(&mut self, other: &CalibrationStats) -> Result<()> {
        for (k, v) in &other.tensor_max {
            self.observe_tensor(k, *v);
        }
        for (k, v) in &other.channel_max {
            self.merge_channels(k, v)?;
        }
        self.samples += other.samples;
        Ok(())
    }

    /// Records the activation and scan-operand streams of one sample.
    pub fn observe_sample(&mut self, s: &SsmInputs) -> Result<()> {
        self.observe_channels("u", &s.u)?;
        self.observe_channels("z", &s.z)?;
        self.observe_channels("delta", &s.delta)?;
        self.observe_tensor("A", s.a.max_abs());
        let (mut da, mut dbu) = (0.0f64, 0.0f64);
        for l in 0..s.seq_len() {
            for h in 0..s.hidden() {
                for m in 0..s.state() {
                    da = da.max(s.abar_at(l, h, m).abs());
                    dbu = dbu.max(s.bu_at(l, h, m).abs());
                }
            }
        }
        self.observe_tensor("dA", da);
        self.observe_tensor("dBu", dbu);
        self.samples += 1;
        Ok(())
    }
}

/// Calibrated scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSet {
    /// Tensor-granularity weight scales.
    pub s_weights: BTreeMap<String, f64>,
    /// Channel-granularity activation scales.
    pub s_act: BTreeMap<String, Vec<f64>>,
    /// Scale of the exp(ΔA) stream before power-of-two rounding.
    #[serde(rename = "s_dA")]
    pub s_da: f64,
    /// `k` such that the hardware scale of exp(ΔA) is `2^-k`.
    #[serde(rename = "s_dA_pow2_shift")]
    pub s_da_pow2_shift: u32,
    #[serde(rename = "s_dBu")]
    pub s_dbu: f64,
    pub bit_width: u32,
}

impl ScaleSet {
    pub fn from_stats(stats: &CalibrationStats, bit_width: u32) -> Result<Self> {
        if stats.samples == 0 {
            return Err(Error::Empty("calibration samples"));
        }
        let tensor = |name: &str| scale_or_floor(stats.tensor_max.get(name).copied().unwrap_or(0.0), bit_width);
        let mut s_weights = BTreeMap::new();
        let mut s_act = BTreeMap::new();
        for (name, max) in &stats.tensor_max {
            if name != "dA" && name != "dBu" {
                s_weights.insert(name.clone(), scale_or_floor(*max, bit_width)?);
            }
        }
        for (name, maxes) in &stats.channel_max {
            s_act.insert(
                name.clone(),
                maxes.iter().map(|&m| scale_or_floor(m, bit_width)).collect::<Result<Vec<_>>>()?,
            );
        }
        let s_da = tensor("dA")?;
        let (_, k) = approx_pow2(s_da);
        if k < 0 {
            return Err(Error::Invalid(format!("exp(ΔA) scale {s_da} rounds to a negative shift")));
        }
        let set = Self {
            s_weights,
            s_act,
            s_da,
            s_da_pow2_shift: k as u32,
            s_dbu: tensor("dBu")?,
            bit_width,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn s_da_pow2(&self) -> f64 {
        (-(self.s_da_pow2_shift as f64)).exp2()
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bit_width)?;
        let all_positive = self.s_weights.values().all(|&s| s > 0.0)
            && self.s_act.values().flatten().all(|&s| s > 0.0)
            && self.s_da > 0.0
            && self.s_dbu > 0.0;
        if !all_positive {
            return Err(Error::Invalid("all scales must be strictly positive".into()));
        }
        let ratio = (self.s_da_pow2() / self.s_da).log2().abs();
        if ratio > 0.5 + 1e-12 {
            return Err(Error::Invalid("power-of-two scale is not the nearest to s_dA".into()));
        }
        Ok(())
    }
}

/// Calibrates scales over a set of samples.
pub fn calibrate(samples: &[SsmInputs], bit_width: u32) -> Result<ScaleSet> {
    if samples.is_empty() {
        return Err(Error::Empty("calibration samples"));
    }
    let mut stats = CalibrationStats::default();
    for s in samples {
        stats.observe_sample(s)?;
    }
    ScaleSet::from_stats(&stats, bit_width)
}

/// `round(v * 2^-k)` saturated to `bits`; the single-rounding form used by the P path.
#[inline]
pub fn shift_saturate(v: i64, k: u32, bits: u32) -> i64 {
    saturate(shift_round(v, k), bits)
}
