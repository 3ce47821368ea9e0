//! Quantized selective SSM: operands quantized with a [`ScaleSet`], scanned
//! in the integer domain, states dequantized for the C reduction and gate.

use std::borrow::Cow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RealTensor, Scale};
use crate::quant::{dequantize, quantize, quantize_value, ScaleSet};
use crate::sfu::SfuLut;
use crate::ssa::sim::simulate_lanes;
use crate::ssa::spe::{chunked_lane_scan, QPair, SpeParams, P_BITS, Q_FRAC_BITS};
use crate::ssa::trace::{SsaTrace, TraceLevel};
use crate::ssa::SsaConfig;
use crate::ssm::block::reduce_and_gate;
use crate::ssm::{Gate, SsmInputs};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantOptions {
    /// Round-trips u, Δ and Z through their per-channel INT8 scales.
    pub quantize_activations: bool,
    /// Evaluates exp(ΔA) with this table instead of the exact function.
    pub exp_lut: Option<SfuLut>,
}

#[derive(Debug)]
pub struct QuantScanOutput {
    /// Raw states, lane-major, each of length L.
    pub states: Vec<Vec<i64>>,
    /// Real value of one raw state unit.
    pub state_scale: f64,
    /// (L, h) gated output.
    pub y: RealTensor,
    pub trace: Option<SsaTrace>,
}

impl QuantScanOutput {
    pub fn dequantized_lane(&self, lane: usize) -> Vec<f64> {
        self.states[lane].iter().map(|&v| v as f64 * self.state_scale).collect()
    }
}

fn fake_quant(name: &str, t: &RealTensor, scales: &ScaleSet) -> Result<RealTensor> {
    let s = scales
        .s_act
        .get(name)
        .ok_or_else(|| Error::Config(format!("scale set has no activation scales for {name}")))?;
    Ok(dequantize(&quantize(t, &Scale::PerChannel(s.clone()), scales.bit_width)?))
}

fn prepared<'a>(inputs: &'a SsmInputs, scales: &ScaleSet, opts: &QuantOptions) -> Result<Cow<'a, SsmInputs>> {
    if !opts.quantize_activations {
        return Ok(Cow::Borrowed(inputs));
    }
    let mut q = inputs.clone();
    q.u = fake_quant("u", &inputs.u, scales)?;
    q.delta = fake_quant("delta", &inputs.delta, scales)?;
    q.z = fake_quant("z", &inputs.z, scales)?;
    Ok(Cow::Owned(q))
}

fn params(scales: &ScaleSet, acc_bits: u32) -> Result<SpeParams> {
    scales.validate()?;
    SpeParams::new(scales.s_da_pow2_shift, acc_bits)
}

/// Quantized `(exp(ΔA), ΔB·u)` pairs of one lane.
pub fn lane_pairs(inputs: &SsmInputs, scales: &ScaleSet, opts: &QuantOptions, h: usize, m: usize) -> Vec<QPair> {
    let s_p = scales.s_da_pow2();
    let a = inputs.a.at2(h, m);
    (0..inputs.seq_len())
        .map(|l| {
            let d = inputs.delta.at2(l, h);
            let da = d * a;
            let abar = match &opts.exp_lut {
                Some(lut) => lut.eval(da),
                None => da.exp(),
            };
            let bu = d * inputs.b.at2(l, m) * inputs.u.at2(l, h);
            QPair {
                p: quantize_value(abar, s_p, P_BITS) as i64,
                q: (quantize_value(bu, scales.s_dbu, scales.bit_width) as i64) << Q_FRAC_BITS,
            }
        })
        .collect()
}

/// All lanes, `h`-major then `m`.
pub fn quantize_lanes(inputs: &SsmInputs, scales: &ScaleSet, opts: &QuantOptions) -> Result<Vec<Vec<QPair>>> {
    let x = prepared(inputs, scales, opts)?;
    let m = x.state();
    Ok((0..x.hidden() * m)
        .into_par_iter()
        .map(|lane| lane_pairs(&x, scales, opts, lane / m, lane % m))
        .collect())
}

fn finish(x: &SsmInputs, states: Vec<Vec<i64>>, scales: &ScaleSet, gate: Gate, trace: Option<SsaTrace>) -> Result<QuantScanOutput> {
    let state_scale = scales.s_dbu / (1u64 << Q_FRAC_BITS) as f64;
    let m = x.state();
    let y = reduce_and_gate(x, gate, |h, mi| states[h * m + mi].iter().map(|&v| v as f64 * state_scale).collect())?;
    Ok(QuantScanOutput { states, state_scale, y, trace })
}

/// Functional quantized path using the straight-line chunked scan.
pub fn quantized_selective_ssm(
    cfg: &SsaConfig,
    inputs: &SsmInputs,
    scales: &ScaleSet,
    opts: &QuantOptions,
    gate: Gate,
) -> Result<QuantScanOutput> {
    cfg.validate()?;
    let sp = params(scales, cfg.acc_bits)?;
    let x = prepared(inputs, scales, opts)?;
    let lanes = quantize_lanes(&x, scales, &QuantOptions { quantize_activations: false, ..opts.clone() })?;
    let states = lanes.par_iter().map(|lane| chunked_lane_scan(lane, cfg.chunk_size, sp)).collect();
    finish(&x, states, scales, gate, None)
}

/// Quantized path through the cycle simulator.
pub fn simulate_selective_scan(
    cfg: &SsaConfig,
    inputs: &SsmInputs,
    scales: &ScaleSet,
    opts: &QuantOptions,
    gate: Gate,
    level: TraceLevel,
) -> Result<QuantScanOutput> {
    let sp = params(scales, cfg.acc_bits)?;
    let x = prepared(inputs, scales, opts)?;
    let plain = QuantOptions { quantize_activations: false, ..opts.clone() };
    let m = x.state();
    let dims = (x.seq_len(), x.hidden(), m);
    let out = simulate_lanes(cfg, dims, sp, level, &|lane| Ok(lane_pairs(&x, scales, &plain, lane / m, lane % m)))?;
    finish(&x, out.states, scales, gate, Some(out.trace))
}

/// `||a - b|| / ||b||`.
pub fn relative_rms(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    if den == 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (num / den).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::calibrate;
    use crate::ssm::synth::{synthetic_inputs, SynthSpec};
    use crate::ssm::selective_ssm_block;

    fn setup(l: usize, h: usize, m: usize) -> (SsmInputs, ScaleSet) {
        let s = synthetic_inputs(l, h, m, 11, &SynthSpec::default()).unwrap();
        let cal: Vec<_> = (0..4).map(|i| synthetic_inputs(l, h, m, 100 + i, &SynthSpec::default()).unwrap()).collect();
        let scales = calibrate(&cal, 8).unwrap();
        (s, scales)
    }

    #[test]
    fn simulator_and_functional_path_agree() {
        let (s, scales) = setup(64, 2, 4);
        let cfg = SsaConfig::with_shape(2, 16);
        let a = quantized_selective_ssm(&cfg, &s, &scales, &QuantOptions::default(), Gate::Silu).unwrap();
        let b = simulate_selective_scan(&cfg, &s, &scales, &QuantOptions::default(), Gate::Silu, TraceLevel::Summary).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.y, b.y);
        assert_eq!(b.trace.unwrap().total_cycles, 4 + 16 + 3);
    }

    #[test]
    fn identity_data_gives_zero_states() {
        let (mut s, scales) = setup(20, 2, 2);
        s.delta = s.delta.map(|_| 0.0).unwrap();
        let out = quantized_selective_ssm(&SsaConfig::default(), &s, &scales, &QuantOptions::default(), Gate::Silu).unwrap();
        assert!(out.states.iter().flatten().all(|&v| v == 0));
    }

    #[test]
    fn close_to_floating_point() {
        let (s, scales) = setup(96, 8, 4);
        let fp = selective_ssm_block(&s, Gate::Silu).unwrap();
        for quantize_activations in [false, true] {
            let opts = QuantOptions { quantize_activations, exp_lut: None };
            let q = quantized_selective_ssm(&SsaConfig::default(), &s, &scales, &opts, Gate::Silu).unwrap();
            assert!(relative_rms(q.y.data(), fp.data()) < 0.1);
        }
    }

    #[test]
    fn missing_activation_scales() {
        let (s, mut scales) = setup(8, 2, 2);
        scales.s_act.clear();
        let opts = QuantOptions { quantize_activations: true, exp_lut: None };
        assert!(quantized_selective_ssm(&SsaConfig::default(), &s, &scales, &opts, Gate::Silu).is_err());
    }

    #[test]
    fn rms_helper() {
        assert_eq!(relative_rms(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_rms(&[0.0, 0.0], &[3.0, 4.0]) - 1.0).abs() < 1e-15);
    }
}
