//! Operation inventories and cycle formulas.
//!
//! One encoder block is in_proj, two SSM paths (conv1d, x_proj, dt_proj,
//! selective SSM) and out_proj, plus a layer norm and elementwise glue. The
//! patch embedding and classifier head are not modeled. Every operation reads
//! its operands from and writes its results to off-chip memory once; scan
//! states never leave the arrays.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perf::report::{Energy, RooflinePoint, SimReport, Traffic};
use crate::perf::{HwConfig, ModelConfig};
use crate::ssa::LisuMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Gemm,
    #[serde(rename = "layernorm")]
    LayerNorm,
    Conv1d,
    Elementwise,
    SelectiveSsm,
}

impl Category {
    pub const ALL: [Category; 5] =
        [Category::Gemm, Category::LayerNorm, Category::Conv1d, Category::Elementwise, Category::SelectiveSsm];

    pub fn name(self) -> &'static str {
        match self {
            Category::Gemm => "gemm",
            Category::LayerNorm => "layernorm",
            Category::Conv1d => "conv1d",
            Category::Elementwise => "elementwise",
            Category::SelectiveSsm => "selective_ssm",
        }
    }
}

/// Cost of one category for one block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCost {
    pub compute_cycles: u64,
    pub read_bytes: u64,
    pub write_bytes: u64,
    pub int8_macs: u64,
    pub fp_ops: u64,
    /// Arithmetic operations for the roofline, one MAC counted as two.
    pub ops: u64,
}

impl OpCost {
    fn add(&mut self, o: OpCost) {
        self.compute_cycles += o.compute_cycles;
        self.read_bytes += o.read_bytes;
        self.write_bytes += o.write_bytes;
        self.int8_macs += o.int8_macs;
        self.fp_ops += o.fp_ops;
        self.ops += o.ops;
    }

    pub fn bytes(&self) -> u64 {
        self.read_bytes + self.write_bytes
    }

    pub fn latency_cycles(&self, hw: &HwConfig) -> u64 {
        let dma = hw.dma_cycles(self.bytes());
        if hw.overlap_dma {
            self.compute_cycles.max(dma)
        } else {
            self.compute_cycles + dma
        }
    }
}

pub fn tokens_for_image(image_px: u64, patch_px: u64, class_token: bool) -> Result<u64> {
    if image_px == 0 || patch_px == 0 || image_px % patch_px != 0 {
        return Err(Error::Config(format!("image of {image_px} px is not divisible into {patch_px} px patches")));
    }
    let side = image_px / patch_px;
    Ok(side * side + u64::from(class_token))
}

/// Output-stationary tiling with fill and drain per tile.
pub fn gemm_cycles(m: u64, k: u64, n: u64, pe_rows: u64, pe_cols: u64) -> Result<u64> {
    if [m, k, n, pe_rows, pe_cols].contains(&0) {
        return Err(Error::Config("GEMM dimensions must be positive".into()));
    }
    Ok(m.div_ceil(pe_rows) * n.div_ceil(pe_cols) * (k + pe_rows + pe_cols - 1))
}

/// Closed-form scan latency over `h * m` lanes of length `l`.
pub fn scan_cycles(l: u64, h: u64, m: u64, hw: &HwConfig) -> Result<u64> {
    if l == 0 || h == 0 || m == 0 {
        return Err(Error::Config("scan dimensions must be positive".into()));
    }
    let cfg = hw.ssa_config();
    cfg.validate()?;
    let c = cfg.chunk_size as u64;
    let n = cfg.n_ssa as u64;
    let k = l.div_ceil(c);
    let jobs = h * m * k;
    let ii = cfg.inject_cycles.max(cfg.stage_cycles);
    let depth = cfg.inject_cycles + cfg.stages() as u64 * cfg.stage_cycles + cfg.fill_constant;
    let chain = (k - 1) * cfg.lisu_cycles;
    match cfg.lisu_mode {
        LisuMode::Pipelined => Ok((jobs.div_ceil(n) - 1) * ii + depth + chain),
        LisuMode::Shared => {
            // lanes enter the single LISU in readiness order
            let mut done = 0u64;
            for lane in 0..h * m {
                let last = lane * k + k - 1;
                let ready = (last / n) * ii + depth;
                done = ready.max(done) + chain;
            }
            Ok(done)
        }
    }
}

/// Operand inventory of one selective SSM: Δ, u, Z as (L, h); B, C as
/// (L, m); A as (h, m) weights. Only y (L, h) is written.
pub fn selective_ssm_traffic(l: u64, h: u64, m: u64, bytes_per_elem: u64, hw: &HwConfig) -> Traffic {
    let read = (3 * l * h + 2 * l * m) * bytes_per_elem + h * m * hw.weight_bytes;
    Traffic { read, write: l * h * bytes_per_elem }
}

fn gemm(l: u64, k: u64, n: u64, hw: &HwConfig) -> Result<OpCost> {
    let macs = l * k * n;
    Ok(OpCost {
        compute_cycles: gemm_cycles(l, k, n, hw.gemm_pe_rows, hw.gemm_pe_cols)?,
        read_bytes: l * k * hw.act_bytes + k * n * hw.weight_bytes,
        write_bytes: l * n * hw.act_bytes,
        int8_macs: macs,
        fp_ops: 0,
        ops: 2 * macs,
    })
}

/// Vector pass over `elems` elements reading `ins` operands each.
fn vector(elems: u64, ins: u64, hw: &HwConfig) -> OpCost {
    OpCost {
        compute_cycles: elems.div_ceil(hw.vector_width),
        read_bytes: ins * elems * hw.act_bytes,
        write_bytes: elems * hw.act_bytes,
        int8_macs: 0,
        fp_ops: elems,
        ops: elems,
    }
}

fn spe_ops(l: u64, lanes: u64, hw: &HwConfig) -> u64 {
    let c = hw.chunk_size as u64;
    let k = l.div_ceil(c);
    let per_chunk: u64 = (0..c.trailing_zeros()).map(|s| c - (1 << s)).sum();
    // two multiplies per SPE, one LISU row per chained chunk
    2 * lanes * (k * per_chunk + (k - 1) * c)
}

/// Per-block cost of each category at sequence length `l`.
pub fn block_inventory(model: &ModelConfig, l: u64, hw: &HwConfig) -> Result<[(Category, OpCost); 5]> {
    model.validate()?;
    if l == 0 {
        return Err(Error::Config("sequence length must be positive".into()));
    }
    let (d, e, r, m, kw) = (model.hidden, model.inner(), model.dt_rank(), model.state, model.conv_width);

    let mut g = gemm(l, d, 2 * e, hw)?;
    for _ in 0..2 {
        g.add(gemm(l, e, r + 2 * m, hw)?);
        g.add(gemm(l, r, e, hw)?);
    }
    g.add(gemm(l, e, d, hw)?);

    let mut ln = vector(4 * l * d, 1, hw);
    ln.read_bytes = l * d * hw.act_bytes + 2 * d * hw.weight_bytes;
    ln.write_bytes = l * d * hw.act_bytes;

    let mut conv = OpCost::default();
    for _ in 0..2 {
        let mut c = vector(l * e * kw, 0, hw);
        c.read_bytes = l * e * hw.act_bytes + (e * kw + e) * hw.weight_bytes;
        c.write_bytes = l * e * hw.act_bytes;
        c.fp_ops = 2 * l * e * kw;
        c.ops = c.fp_ops;
        conv.add(c);
    }

    let mut ew = OpCost::default();
    for _ in 0..2 {
        ew.add(vector(l * e, 1, hw)); // SiLU after conv
        ew.add(vector(l * e, 2, hw)); // dt bias add
        ew.add(vector(l * e, 1, hw)); // softplus
    }
    ew.add(vector(l * e, 1, hw)); // SiLU(z), shared by both paths after flipping
    ew.add(vector(3 * l * e, 1, hw)); // flips of x, z and the backward output
    ew.add(vector(l * e, 2, hw)); // path sum
    ew.add(vector(l * d, 2, hw)); // residual

    let mut ssm = OpCost::default();
    for _ in 0..2 {
        let lem = l * e * m;
        let scan = scan_cycles(l, e, m, hw)?;
        let vpu = (3 * lem).div_ceil(hw.vector_width);
        let sfu = lem.div_ceil(hw.vector_width);
        let ppu = lem.div_ceil(hw.vector_width) + (l * e).div_ceil(hw.vector_width);
        let t = selective_ssm_traffic(l, e, m, hw.act_bytes, hw);
        let spe = spe_ops(l, e * m, hw);
        let fp = 3 * lem + lem + 2 * lem + l * e;
        ssm.add(OpCost {
            compute_cycles: vpu + sfu + scan + ppu,
            read_bytes: t.read,
            write_bytes: t.write,
            int8_macs: spe,
            fp_ops: fp,
            ops: fp + spe,
        });
    }

    Ok([
        (Category::Gemm, g),
        (Category::LayerNorm, ln),
        (Category::Conv1d, conv),
        (Category::Elementwise, ew),
        (Category::SelectiveSsm, ssm),
    ])
}

pub fn roofline_point(name: &str, ops: f64, bytes: f64, seconds: f64, hw: &HwConfig) -> Result<RooflinePoint> {
    if !(bytes > 0.0) {
        return Err(Error::Invalid("roofline point needs a positive byte count".into()));
    }
    let intensity = ops / bytes;
    Ok(RooflinePoint {
        name: name.to_string(),
        ops,
        bytes,
        intensity,
        bound: hw.peak_ops().min(intensity * hw.offchip_bw_bytes_per_s),
        achieved: if seconds > 0.0 { ops / seconds } else { 0.0 },
    })
}

pub fn end_to_end(model: &ModelConfig, image_px: u64, hw: &HwConfig) -> Result<SimReport> {
    hw.validate()?;
    let l = tokens_for_image(image_px, model.patch_px, model.class_token)?;
    let inv = block_inventory(model, l, hw)?;
    let nb = model.n_blocks;
    let mut report = SimReport::new(model, image_px, l, hw);
    let (mut int8, mut fp, mut bytes) = (0u64, 0u64, 0u64);
    for (cat, cost) in &inv {
        let cycles = cost.latency_cycles(hw) * nb;
        report.set_cycles(*cat, cycles);
        report.offchip.read += cost.read_bytes * nb;
        report.offchip.write += cost.write_bytes * nb;
        int8 += cost.int8_macs * nb;
        fp += cost.fp_ops * nb;
        bytes += cost.bytes() * nb;
    }
    report.total_cycles = report.cycles.values().sum();
    report.latency_s = report.total_cycles as f64 / hw.freq_hz;
    let e = &hw.energy;
    report.energy = Energy::new(
        int8 as f64 * e.e_mac_int8 + fp as f64 * e.e_mac_fp16,
        // staged through the buffer: written once, read once
        2.0 * bytes as f64 * e.e_onchip_per_byte,
        (report.offchip.read + report.offchip.write) as f64 * 8.0 * e.e_offchip_per_bit,
    );
    for cat in [Category::Gemm, Category::SelectiveSsm] {
        let cost = inv.iter().find(|(c, _)| *c == cat).expect("all categories present").1;
        let secs = report.cycles[cat.name()] as f64 / hw.freq_hz;
        report.roofline.push(roofline_point(cat.name(), (cost.ops * nb) as f64, (cost.bytes() * nb) as f64, secs, hw)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perf::model_preset;

    #[test]
    fn tokens() {
        assert_eq!(tokens_for_image(224, 16, false).unwrap(), 196);
        assert_eq!(tokens_for_image(1024, 16, false).unwrap(), 4096);
        assert_eq!(tokens_for_image(16, 16, false).unwrap(), 1);
        assert_eq!(tokens_for_image(224, 16, true).unwrap(), 197);
        assert!(tokens_for_image(225, 16, false).is_err());
    }

    #[test]
    fn gemm_formula() {
        assert_eq!(gemm_cycles(64, 64, 64, 64, 64).unwrap(), 191);
        assert_eq!(gemm_cycles(1, 1, 1, 1, 1).unwrap(), 2);
        assert_eq!(gemm_cycles(64, 64, 256, 64, 64).unwrap(), 2 * gemm_cycles(64, 64, 128, 64, 64).unwrap());
        assert!(gemm_cycles(0, 1, 1, 1, 1).is_err());
    }

    #[test]
    fn scan_formula() {
        let mut hw = HwConfig { n_ssa: 1, ..HwConfig::default() };
        assert_eq!(scan_cycles(16, 1, 1, &hw).unwrap(), 5);
        hw.ssa.fill_constant = 3;
        assert_eq!(scan_cycles(16, 1, 1, &hw).unwrap(), 8);
        let hw = HwConfig::default();
        assert_eq!(scan_cycles(5, 3, 2, &hw).unwrap(), scan_cycles(16, 3, 2, &hw).unwrap());
        let one = scan_cycles(1024, 64, 16, &HwConfig { n_ssa: 4, ..hw.clone() }).unwrap();
        let two = scan_cycles(1024, 64, 16, &HwConfig { n_ssa: 8, ..hw.clone() }).unwrap();
        assert!((one as f64 / two as f64 - 2.0).abs() < 0.01);
        assert!(scan_cycles(0, 1, 1, &hw).is_err());
    }

    #[test]
    fn traffic_inventory() {
        let hw = HwConfig::default();
        let t = selective_ssm_traffic(196, 384, 16, 1, &hw);
        // Δ, u, Z: 196*384 each; B, C: 196*16 each; A: 384*16
        assert_eq!(t.read, 3 * 75_264 + 2 * 3_136 + 6_144);
        assert_eq!(t.write, 75_264);
        let fp16 = selective_ssm_traffic(196, 384, 16, 2, &hw);
        assert_eq!(fp16.read - 6_144, 2 * (t.read - 6_144));
        let double = selective_ssm_traffic(392, 384, 16, 1, &hw);
        assert_eq!(double.write, 2 * t.write);
        assert_eq!(double.read - 6_144, 2 * (t.read - 6_144));
    }

    #[test]
    fn roofline() {
        let hw = HwConfig::default();
        let ridge = hw.peak_ops() / hw.offchip_bw_bytes_per_s;
        let p = roofline_point("x", ridge * 10.0, 10.0, 1.0, &hw).unwrap();
        assert!((p.bound - hw.peak_ops()).abs() / hw.peak_ops() < 1e-12);
        let p = roofline_point("x", 1e6 * ridge, 1e6, 1.0, &hw).unwrap();
        assert!((p.intensity * hw.offchip_bw_bytes_per_s - hw.peak_ops()).abs() / hw.peak_ops() < 1e-12);
        let p = roofline_point("x", 1e9, 1e9, 1.0, &hw).unwrap();
        assert_eq!(p.bound, hw.offchip_bw_bytes_per_s);
        assert!(roofline_point("x", 1.0, 0.0, 1.0, &hw).is_err());
    }

    #[test]
    fn breakdown_closes() {
        let hw = HwConfig::default();
        let r = end_to_end(&model_preset("tiny").unwrap(), 224, &hw).unwrap();
        assert_eq!(r.cycles.values().sum::<u64>(), r.total_cycles);
        let shares: f64 = Category::ALL.iter().map(|c| r.share(*c)).sum();
        assert!((shares - 1.0).abs() < 1e-12);
        assert!((r.energy.total - (r.energy.logic + r.energy.onchip + r.energy.offchip)).abs() < 1e-18);
        assert_eq!(r.roofline.len(), 2);
    }

    #[test]
    fn ssm_share_grows_with_image() {
        let hw = HwConfig::default();
        for name in ["tiny", "small", "base"] {
            let m = model_preset(name).unwrap();
            let s: Vec<f64> = [224, 512, 1024]
                .iter()
                .map(|&px| end_to_end(&m, px, &hw).unwrap().share(Category::SelectiveSsm))
                .collect();
            assert!(s[0] < s[1] && s[1] < s[2], "{name}: {s:?}");
        }
    }

    #[test]
    fn gemm_share_larger_for_base() {
        let hw = HwConfig::default();
        let t = end_to_end(&model_preset("tiny").unwrap(), 224, &hw).unwrap();
        let b = end_to_end(&model_preset("base").unwrap(), 224, &hw).unwrap();
        assert!(b.share(Category::Gemm) > t.share(Category::Gemm));
    }

    #[test]
    fn monotone_in_ssa_count_and_pe_array() {
        let m = model_preset("tiny").unwrap();
        let mut prev = u64::MAX;
        for n in [1, 2, 4, 8, 16] {
            let r = end_to_end(&m, 224, &HwConfig { n_ssa: n, ..HwConfig::default() }).unwrap();
            assert!(r.cycles["selective_ssm"] <= prev);
            prev = r.cycles["selective_ssm"];
        }
        let small = end_to_end(&m, 224, &HwConfig { gemm_pe_rows: 32, gemm_pe_cols: 32, ..HwConfig::default() }).unwrap();
        let big = end_to_end(&m, 224, &HwConfig::default()).unwrap();
        assert!(big.total_cycles <= small.total_cycles);
    }

    #[test]
    fn overlap_never_slower() {
        let m = model_preset("small").unwrap();
        let s = end_to_end(&m, 512, &HwConfig::default()).unwrap();
        let o = end_to_end(&m, 512, &HwConfig { overlap_dma: true, ..HwConfig::default() }).unwrap();
        assert!(o.total_cycles <= s.total_cycles);
        assert_eq!(o.offchip, s.offchip);
    }

    #[test]
    fn energy_linear_in_traffic() {
        let hw = HwConfig::default();
        let m = model_preset("tiny").unwrap();
        let one = end_to_end(&m, 224, &hw).unwrap();
        let two = end_to_end(&m, 224, &HwConfig { act_bytes: 2, weight_bytes: 2, ..hw.clone() }).unwrap();
        let bits = |r: &SimReport| (r.offchip.read + r.offchip.write) as f64 * 8.0;
        assert!((two.energy.offchip / one.energy.offchip - bits(&two) / bits(&one)).abs() < 1e-12);
        assert!((two.energy.offchip - 2.0 * one.energy.offchip).abs() / two.energy.offchip < 1e-12);
    }

    #[test]
    fn closed_form_matches_simulator() {
        use crate::ssa::{simulate_lanes, QPair, SpeParams, TraceLevel};
        let sp = SpeParams::new(7, 24).unwrap();
        for mode in [LisuMode::Pipelined, LisuMode::Shared] {
            for c in [4, 8, 16] {
                for n in [1, 2, 4, 8] {
                    let mut hw = HwConfig { n_ssa: n, chunk_size: c, ..HwConfig::default() };
                    hw.ssa.lisu_mode = mode;
                    // shared mode is only exercised on a subset; it is the slower path
                    let lens: Vec<usize> = if mode == LisuMode::Shared { (8..=256).step_by(31).collect() } else { (8..=256).collect() };
                    for l in lens {
                        let src = |_: usize| Ok(vec![QPair { p: 100, q: 4 }; l]);
                        let sim = simulate_lanes(&hw.ssa_config(), (l, 2, 2), sp, TraceLevel::Summary, &src).unwrap();
                        let f = scan_cycles(l as u64, 2, 2, &hw).unwrap();
                        assert_eq!(sim.trace.total_cycles, f, "{mode:?} C={c} n={n} L={l}");
                    }
                }
            }
        }
    }
}
