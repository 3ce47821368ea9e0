//! Oracle and property suites behind `verify`.
//!
//! Every case draws its data from its own ChaCha8 stream, seeded from the run
//! seed, so results do not depend on the worker count or on case order.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;

use crate::cli::commands::sub_seeds;
use crate::cli::{CliError, RunSpec, VerifySection};
use crate::numerics::{Dim, FixedPoint, RealTensor, Scale};
use crate::perf::{scan_cycles, HwConfig};
use crate::quant::{approx_pow2, compute_scale, dequantize, quantize, rescale_multiply, rescale_shift};
use crate::ssa::{chunked_lane_scan, sequential_lane_scan, simulate_lanes, QPair, SpeParams, SsaConfig, TraceLevel};
use crate::ssm::synth::{normal, rng};
use crate::ssm::{kogge_stone_scan, sequential_scan};

/// Shift used by the integer suites; P = 127 is then just under one.
const K: u32 = 7;
const ACC_BITS: u32 = 24;
const SCAN_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseResult {
    pub name: String,
    pub failure: Option<String>,
}

impl CaseResult {
    fn check(name: String, failure: Option<String>) -> Self {
        Self { name, failure }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: Vec<CaseResult>,
}

impl SuiteResult {
    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| c.failure.is_some())
    }
}

fn int8(r: &mut impl Rng) -> i64 {
    r.gen_range(-127..=127)
}

fn random_lane(r: &mut impl Rng, len: usize, p_lo: i64) -> Vec<QPair> {
    (0..len).map(|_| QPair { p: r.gen_range(p_lo..=127), q: 4 * int8(r) }).collect()
}

fn scan_case(seed: u64, max_len: usize) -> CaseResult {
    let mut r = rng(seed);
    let len = r.gen_range(1..=max_len);
    let name = format!("scan_equivalence seed={seed} L={len}");
    let abar: Vec<f64> = (0..len).map(|_| r.gen_range(0.0..=1.0)).collect();
    let bu: Vec<f64> = (0..len).map(|_| normal(&mut r)).collect();
    let seq = sequential_scan(&abar, &bu).expect("non-empty");
    let par = kogge_stone_scan(&abar, &bu).expect("non-empty");
    // errors are measured against the magnitude the terms could reach
    let mag = sequential_scan(&abar, &bu.iter().map(|v| v.abs()).collect::<Vec<_>>()).expect("non-empty");
    for i in 0..len {
        let err = (par[i] - seq[i]).abs();
        if err > SCAN_REL_TOL * mag[i].max(f64::MIN_POSITIVE) {
            return CaseResult::check(name, Some(format!("state {i}: {} vs {}", par[i], seq[i])));
        }
    }
    // integer-valued data has no rounding at all
    let ai: Vec<f64> = (0..len).map(|_| r.gen_range(-1..=1) as f64).collect();
    let bi: Vec<f64> = (0..len).map(|_| r.gen_range(-1000..=1000) as f64).collect();
    if kogge_stone_scan(&ai, &bi).ok() != sequential_scan(&ai, &bi).ok() {
        return CaseResult::check(name, Some("integer data differs".into()));
    }
    CaseResult::check(name, None)
}

fn hw_for(cfg: &SsaConfig) -> HwConfig {
    HwConfig { n_ssa: cfg.n_ssa, chunk_size: cfg.chunk_size, ..HwConfig::default() }
}

fn ssa_case(seed: u64, c: usize, n: usize, len: usize, datasets: usize, fault: bool) -> CaseResult {
    let name = format!("ssa_bit_exact seed={seed} C={c} n_ssa={n} L={len}");
    let mut r = rng(seed);
    let lanes: Vec<Vec<QPair>> = (0..datasets).map(|_| random_lane(&mut r, len, -127)).collect();
    let sp = SpeParams::new(K, ACC_BITS).expect("valid");
    let cfg = SsaConfig { fault_flip_lisu: fault, ..SsaConfig::with_shape(n, c) };
    let out = match simulate_lanes(&cfg, (len, datasets, 1), sp, TraceLevel::Summary, &|i| Ok(lanes[i].clone())) {
        Ok(o) => o,
        Err(e) => return CaseResult::check(name, Some(e.to_string())),
    };
    for (i, lane) in lanes.iter().enumerate() {
        let want = chunked_lane_scan(lane, c, sp);
        if let Some(pos) = (0..len).find(|&p| out.states[i][p] != want[p]) {
            return CaseResult::check(
                name,
                Some(format!("dataset {i} state {pos}: simulated {} oracle {}", out.states[i][pos], want[pos])),
            );
        }
    }
    let formula = scan_cycles(len as u64, datasets as u64, 1, &hw_for(&cfg)).expect("valid shape");
    if out.trace.total_cycles != formula {
        return CaseResult::check(name, Some(format!("{} cycles simulated, closed form {formula}", out.trace.total_cycles)));
    }
    CaseResult::check(name, None)
}

fn invariance_case(seed: u64, len: usize, v: &VerifySection) -> CaseResult {
    let name = format!("chunk_invariance seed={seed} L={len}");
    let mut r = rng(seed);
    // decays close to one, as exp(ΔA) is for small Δ
    let lane = random_lane(&mut r, len, 96);
    let sp = SpeParams::new(K, ACC_BITS).expect("valid");
    let seq = sequential_lane_scan(&lane, sp);
    for &c in &v.chunk_sizes {
        let mut first: Option<(usize, Vec<i64>)> = None;
        for &n in &v.n_ssa {
            let cfg = SsaConfig { fault_flip_lisu: v.fault_flip_lisu, ..SsaConfig::with_shape(n, c) };
            let states = match simulate_lanes(&cfg, (len, 1, 1), sp, TraceLevel::Summary, &|_| Ok(lane.clone())) {
                Ok(o) => o.states.into_iter().next().expect("one lane"),
                Err(e) => return CaseResult::check(name, Some(format!("C={c} n_ssa={n}: {e}"))),
            };
            if let Some((n0, s0)) = &first {
                if *s0 != states {
                    return CaseResult::check(name, Some(format!("C={c}: n_ssa={n0} and n_ssa={n} disagree")));
                }
            } else {
                let worst = states.iter().zip(&seq).map(|(a, b)| (a - b).abs()).max().unwrap_or(0);
                if worst > v.chunk_tolerance_raw {
                    return CaseResult::check(
                        name,
                        Some(format!("C={c} n_ssa={n}: {worst} raw units from the sequential scan")),
                    );
                }
                first = Some((n, states));
            }
        }
    }
    CaseResult::check(name, None)
}

fn sse(a: &RealTensor, b: &RealTensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn quant_case(seed: u64) -> CaseResult {
    let mut r = rng(seed);
    let (l, h) = (r.gen_range(1..=64), r.gen_range(2..=16));
    let name = format!("quant_bounds seed={seed} L={l} h={h}");
    let outlier = r.gen_range(0..h);
    let t = RealTensor::from_fn(vec![(Dim::L, l), (Dim::H, h)], |i| {
        normal(&mut r) * if i[1] == outlier { 100.0 } else { 1.0 }
    })
    .expect("finite");
    let fail = |m: String| CaseResult::check(name.clone(), Some(m));

    let s_t = compute_scale(t.max_abs().max(1e-300), 8).expect("positive");
    let s_c: Vec<f64> = (0..h)
        .map(|c| {
            let m = (0..l).map(|i| t.at2(i, c).abs()).fold(0.0, f64::max);
            compute_scale(m.max(1e-300), 8).expect("positive")
        })
        .collect();
    let per_tensor = dequantize(&quantize(&t, &Scale::Scalar(s_t), 8).expect("valid"));
    let per_channel = dequantize(&quantize(&t, &Scale::PerChannel(s_c.clone()), 8).expect("valid"));
    for i in 0..l {
        for c in 0..h {
            let x = t.at2(i, c);
            if (per_tensor.at2(i, c) - x).abs() > 0.5 * s_t * (1.0 + 1e-12) {
                return fail(format!("per-tensor round trip at ({i}, {c})"));
            }
            if (per_channel.at2(i, c) - x).abs() > 0.5 * s_c[c] * (1.0 + 1e-12) {
                return fail(format!("per-channel round trip at ({i}, {c})"));
            }
        }
    }
    if sse(&per_channel, &t) > sse(&per_tensor, &t) {
        return fail("per-channel error above per-tensor error".into());
    }

    let s = (r.gen_range(-30.0..10.0f64)).exp2();
    let (p, _) = approx_pow2(s);
    let ratio = p / s;
    if !(std::f64::consts::FRAC_1_SQRT_2 * (1.0 - 1e-12)..=std::f64::consts::SQRT_2 * (1.0 + 1e-12)).contains(&ratio) {
        return fail(format!("approx_pow2({s:e}) off by {ratio}"));
    }
    let v = FixedPoint::new(r.gen_range(-(1i64 << 30)..(1i64 << 30)), 2);
    let k = r.gen_range(0..20);
    if rescale_shift(v, k).ok() != Some(rescale_multiply(v, (-(k as f64)).exp2())) {
        return fail(format!("shift and multiply rescale differ for raw {} k {k}", v.raw));
    }
    CaseResult::check(name, None)
}

/// Runs all suites. Errors only on an empty grid.
pub fn run_suites(seed: u64, v: &VerifySection) -> Result<Vec<SuiteResult>, CliError> {
    let grid: Vec<(usize, usize, usize)> = v
        .chunk_sizes
        .iter()
        .flat_map(|&c| v.n_ssa.iter().flat_map(move |&n| (1..=v.max_len).map(move |l| (c, n, l))))
        .collect();
    if grid.is_empty() || v.datasets_per_shape == 0 {
        return Err(CliError::Config("no cases: the shape grid is empty".into()));
    }
    if v.scan_max_len == 0 {
        return Err(CliError::Config("verify.scan_max_len must be positive".into()));
    }
    if v.chunk_tolerance_raw < 0 {
        return Err(CliError::Config("verify.chunk_tolerance_raw must be non-negative".into()));
    }

    let scan = sub_seeds(seed, 10, v.scan_instances).into_par_iter().map(|s| scan_case(s, v.scan_max_len)).collect();
    let ssa = grid
        .par_iter()
        .zip(sub_seeds(seed, 11, grid.len()))
        .map(|(&(c, n, l), s)| ssa_case(s, c, n, l, v.datasets_per_shape, v.fault_flip_lisu))
        .collect();
    let inv_cases: Vec<usize> =
        (0..v.invariance_datasets).flat_map(|_| v.invariance_lengths.iter().copied()).filter(|&l| l > 0).collect();
    let inv = inv_cases
        .par_iter()
        .zip(sub_seeds(seed, 12, inv_cases.len()))
        .map(|(&l, s)| invariance_case(s, l, v))
        .collect();
    let quant = sub_seeds(seed, 13, v.quant_cases).into_par_iter().map(quant_case).collect();
    Ok(vec![
        SuiteResult { name: "scan_equivalence", cases: scan },
        SuiteResult { name: "ssa_bit_exact", cases: ssa },
        SuiteResult { name: "chunk_invariance", cases: inv },
        SuiteResult { name: "quant_bounds", cases: quant },
    ])
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// JUnit-style report. No timings, so reruns are byte-identical.
pub fn junit_xml(suites: &[SuiteResult], meta_comment: &str) -> String {
    let total: usize = suites.iter().map(|s| s.cases.len()).sum();
    let failed: usize = suites.iter().map(|s| s.failures().count()).sum();
    let mut x = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(x, "<!-- {} -->", xml_escape(meta_comment.trim_start_matches("# ").trim_end()));
    let _ = writeln!(x, "<testsuites name=\"mambax verify\" tests=\"{total}\" failures=\"{failed}\">");
    for s in suites {
        let _ = writeln!(
            x,
            "  <testsuite name=\"{}\" tests=\"{}\" failures=\"{}\">",
            s.name,
            s.cases.len(),
            s.failures().count()
        );
        for c in &s.cases {
            match &c.failure {
                None => {
                    let _ = writeln!(x, "    <testcase classname=\"{}\" name=\"{}\"/>", s.name, xml_escape(&c.name));
                }
                Some(f) => {
                    let _ = writeln!(x, "    <testcase classname=\"{}\" name=\"{}\">", s.name, xml_escape(&c.name));
                    let _ = writeln!(x, "      <failure message=\"{}\"/>", xml_escape(f));
                    let _ = writeln!(x, "    </testcase>");
                }
            }
        }
        let _ = writeln!(x, "  </testsuite>");
    }
    x.push_str("</testsuites>\n");
    x
}

pub fn summary_lines(suites: &[SuiteResult]) -> Vec<String> {
    let mut lines = Vec::new();
    for s in suites {
        let failed = s.failures().count();
        let status = if failed == 0 { "PASS" } else { "FAIL" };
        lines.push(format!("{status} {} {}/{} cases", s.name, s.cases.len() - failed, s.cases.len()));
        for c in s.failures().take(10) {
            lines.push(format!("  {}: {}", c.name, c.failure.as_deref().unwrap_or("")));
        }
        if failed > 10 {
            lines.push(format!("  ... {} more", failed - 10));
        }
    }
    lines
}

pub fn cmd_verify(spec: &RunSpec) -> Result<Vec<String>, CliError> {
    let suites = run_suites(spec.seed, &spec.config.verify)?;
    let meta = spec.meta().csv_comment();
    spec.write("verify_junit.xml", junit_xml(&suites, &meta).as_bytes())?;
    let lines = summary_lines(&suites);
    let mut text = meta;
    for l in &lines {
        text.push_str(l);
        text.push('\n');
    }
    spec.write("verify_summary.txt", text.as_bytes())?;
    let failed: Vec<&CaseResult> = suites.iter().flat_map(|s| s.failures()).collect();
    if let Some(first) = failed.first() {
        return Err(CliError::VerifyFailed(format!(
            "{} failing cases, first {}: {}\n{}",
            failed.len(),
            first.name,
            first.failure.as_deref().unwrap_or(""),
            lines.join("\n")
        )));
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VerifySection {
        VerifySection {
            scan_instances: 20,
            scan_max_len: 200,
            chunk_sizes: vec![2, 8],
            max_len: 20,
            n_ssa: vec![1, 3],
            datasets_per_shape: 2,
            invariance_datasets: 2,
            invariance_lengths: vec![1, 33, 64],
            quant_cases: 20,
            ..VerifySection::default()
        }
    }

    #[test]
    fn small_grid_passes() {
        let suites = run_suites(5, &small()).unwrap();
        for s in &suites {
            assert!(!s.cases.is_empty());
            assert_eq!(s.failures().count(), 0, "{:?}", summary_lines(&suites));
        }
    }

    #[test]
    fn fault_is_detected_by_chunk_invariance() {
        let v = VerifySection { fault_flip_lisu: true, ..small() };
        let suites = run_suites(5, &v).unwrap();
        let inv = suites.iter().find(|s| s.name == "chunk_invariance").unwrap();
        assert!(inv.failures().count() > 0);
    }

    #[test]
    fn empty_grid_is_a_config_error() {
        let v = VerifySection { chunk_sizes: vec![], ..small() };
        match run_suites(1, &v) {
            Err(CliError::Config(m)) => assert!(m.contains("no cases")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn junit_escapes_and_counts() {
        let s = vec![SuiteResult {
            name: "x",
            cases: vec![
                CaseResult { name: "a<b".into(), failure: None },
                CaseResult { name: "c".into(), failure: Some("\"bad\" & worse".into()) },
            ],
        }];
        let x = junit_xml(&s, "# meta\n");
        assert!(x.contains("tests=\"2\" failures=\"1\""));
        assert!(x.contains("a&lt;b"));
        assert!(x.contains("&quot;bad&quot; &amp; worse"));
    }
}
