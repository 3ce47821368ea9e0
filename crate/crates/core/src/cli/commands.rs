use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;

use rand::RngCore;
use rayon::prelude::*;
use serde::Serialize;

use crate::cli::{CliError, RunSpec};
use crate::perf::{end_to_end, model_preset, scan_cycles, Category, HwConfig, SimReport};
use crate::quant::{calibrate as calibrate_scales, ScaleSet};
use crate::sfu::{fit_lut, lut_error, reference_fn, uniform_grid, SfuLut};
use crate::ssa::qpath::relative_rms;
use crate::ssa::{simulate_selective_scan, QuantOptions};
use crate::ssm::synth::rng;
use crate::ssm::{selective_ssm_block, synthetic_inputs, Gate, SsmInputs, SynthSpec};

/// `n` seeds derived from the run seed and a per-purpose salt.
pub fn sub_seeds(seed: u64, salt: u64, n: usize) -> Vec<u64> {
    let mut r = rng(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    (0..n).map(|_| r.next_u64()).collect()
}

#[derive(Serialize)]
struct LutSummary {
    function: String,
    entries: usize,
    range: (f64, f64),
    max_abs: f64,
    rms: f64,
    mean_abs: f64,
}

pub fn fit_sfu(spec: &RunSpec) -> Result<Vec<String>, CliError> {
    let s = &spec.config.sfu;
    if s.functions.is_empty() {
        return Err(CliError::Config("sfu.functions is empty".into()));
    }
    let mut seen = BTreeSet::new();
    for f in &s.functions {
        if !seen.insert(f.function) {
            return Err(CliError::Config(format!("function {} listed twice", f.function)));
        }
    }
    if s.eval_points < 2 || s.csv_points < 2 {
        return Err(CliError::Config("eval_points and csv_points must be at least 2".into()));
    }
    let fitted: Vec<SfuLut> = s
        .functions
        .par_iter()
        .map(|f| {
            let range = f.range.unwrap_or_else(|| f.function.default_range());
            let entries = f.entries.unwrap_or_else(|| f.function.default_entries());
            fit_lut(f.function, range, entries, &s.fit)
        })
        .collect::<crate::Result<_>>()?;

    let mut lines = Vec::new();
    let mut summary = Vec::new();
    for lut in &fitted {
        let name = lut.function.name();
        spec.write_json(&format!("lut_{name}.json"), lut)?;
        let mut csv = String::from("x,true,approx,error\n");
        for x in uniform_grid(lut.range.0, lut.range.1, s.csv_points) {
            let (t, a) = (reference_fn(lut.function, x), lut.eval(x));
            let _ = writeln!(csv, "{x:e},{t:e},{a:e},{:e}", a - t);
        }
        spec.write_csv(&format!("lut_{name}_error.csv"), &csv)?;
        let err = lut_error(lut, s.eval_points);
        lines.push(format!("{name}: entries={} max_abs={:.6e} rms={:.6e}", lut.entries(), err.max_abs, err.rms));
        summary.push(LutSummary {
            function: name.to_string(),
            entries: lut.entries(),
            range: lut.range,
            max_abs: err.max_abs,
            rms: err.rms,
            mean_abs: err.mean_abs,
        });
    }

    if !s.entries_sweep.is_empty() {
        let cases: Vec<(usize, usize)> =
            (0..fitted.len()).flat_map(|i| s.entries_sweep.iter().map(move |&e| (i, e))).collect();
        let rows: Vec<String> = cases
            .par_iter()
            .map(|&(i, e)| {
                let lut = fit_lut(fitted[i].function, fitted[i].range, e, &s.fit)?;
                let err = lut_error(&lut, s.eval_points);
                Ok(format!("{},{e},{:e},{:e}", fitted[i].function.name(), err.max_abs, err.rms))
            })
            .collect::<crate::Result<_>>()?;
        let mut csv = String::from("function,entries,max_abs,rms\n");
        for r in rows {
            csv.push_str(&r);
            csv.push('\n');
        }
        spec.write_csv("lut_entries_sweep.csv", &csv)?;
    }
    spec.write_json("sfu_summary.json", &serde_json::json!({ "tables": summary }))?;
    Ok(lines)
}

/// Synthetic samples with seeds derived from the run seed.
pub fn synthetic_set(seed: u64, salt: u64, n: usize, (l, h, m): (usize, usize, usize), synth: &SynthSpec) -> crate::Result<Vec<SsmInputs>> {
    sub_seeds(seed, salt, n).into_par_iter().map(|s| synthetic_inputs(l, h, m, s, synth)).collect()
}

pub fn calibrate(spec: &RunSpec) -> Result<(ScaleSet, Vec<String>), CliError> {
    let c = &spec.config.calibration;
    if c.samples == 0 {
        return Err(CliError::Config("calibration.samples must be positive".into()));
    }
    let samples = synthetic_set(spec.seed, 1, c.samples, (c.seq_len, c.hidden, c.state), &c.synth)?;
    let scales = calibrate_scales(&samples, c.bit_width)?;
    spec.write_json("scales.json", &scales)?;
    let lines = vec![format!(
        "calibrated {} samples: s_dA={:.6e} k={} s_dBu={:.6e}",
        c.samples, scales.s_da, scales.s_da_pow2_shift, scales.s_dbu
    )];
    Ok((scales, lines))
}

#[derive(Serialize)]
struct SimulateOutput<'a> {
    #[serde(flatten)]
    report: &'a SimReport,
    sim_dims: (usize, usize, usize),
    ssm_fidelity_rel_rms: f64,
}

pub fn simulate(spec: &RunSpec) -> Result<Vec<String>, CliError> {
    let cfg = &spec.config;
    let hw = &cfg.hw;
    let mut report = end_to_end(&cfg.model, cfg.image_px, hw)?;
    let (l, h, m) = (
        report.tokens as usize,
        cfg.simulate.sim_hidden.unwrap_or(cfg.model.inner()) as usize,
        cfg.model.state as usize,
    );
    if h == 0 || cfg.simulate.calibration_samples == 0 {
        return Err(CliError::Config("simulate.sim_hidden and calibration_samples must be positive".into()));
    }
    let synth = &cfg.calibration.synth;
    let cal = synthetic_set(spec.seed, 2, cfg.simulate.calibration_samples, (l, h, m), synth)?;
    let scales = calibrate_scales(&cal, cfg.calibration.bit_width)?;
    let inputs = synthetic_set(spec.seed, 3, 1, (l, h, m), synth)?.remove(0);
    let out = simulate_selective_scan(&hw.ssa_config(), &inputs, &scales, &QuantOptions::default(), Gate::Silu, cfg.simulate.trace_level)?;
    let trace = out.trace.as_ref().expect("simulator attaches a trace");
    let formula = scan_cycles(l as u64, h as u64, m as u64, hw)?;
    if trace.total_cycles != formula {
        return Err(CliError::VerifyFailed(format!(
            "simulated scan took {} cycles, closed form gives {formula}",
            trace.total_cycles
        )));
    }
    let fp = selective_ssm_block(&inputs, Gate::Silu)?;
    let fidelity = relative_rms(out.y.data(), fp.data());
    report.ssa_trace = Some(trace.summary());

    spec.write_json("report.json", &SimulateOutput { report: &report, sim_dims: (l, h, m), ssm_fidelity_rel_rms: fidelity })?;
    spec.write_csv("trace.csv", &trace.to_csv())?;
    spec.write_csv("breakdown.csv", &report.breakdown_csv(hw.freq_hz))?;
    let mut lines = vec![format!(
        "{} @ {} px: L={} total {} cycles ({:.6e} s), energy {:.6e} J",
        report.model, report.image_px, report.tokens, report.total_cycles, report.latency_s, report.energy.total
    )];
    for cat in Category::ALL {
        lines.push(format!("  {:<14} {:>14} cycles {:>6.2}%", cat.name(), report.cycles[cat.name()], 100.0 * report.share(cat)));
    }
    lines.push(format!("  scan simulation {l}x{h}x{m}: {} cycles, quantized rel. RMS {fidelity:.4}", trace.total_cycles));
    Ok(lines)
}

pub fn sweep(spec: &RunSpec) -> Result<Vec<String>, CliError> {
    let s = &spec.config.sweep;
    let mut cases = Vec::new();
    for name in &s.models {
        let model = if name.eq_ignore_ascii_case(&spec.config.preset) {
            spec.config.model.clone()
        } else {
            model_preset(name)?
        };
        for &px in &s.image_px {
            for &n in &s.n_ssa {
                cases.push((model.clone(), px, n));
            }
        }
    }
    if cases.is_empty() {
        return Err(CliError::Config("sweep has no cases".into()));
    }
    let reports: Vec<(usize, SimReport)> = cases
        .par_iter()
        .map(|(model, px, n)| {
            let hw = HwConfig { n_ssa: *n, ..spec.config.hw.clone() };
            end_to_end(model, *px, &hw).map(|r| (*n, r))
        })
        .collect::<crate::Result<_>>()?;
    let mut csv = format!("n_ssa,{}\n", SimReport::CSV_HEADER);
    for (n, r) in &reports {
        spec.write_json(&format!("cases/{}_{}_{}.json", r.model, r.image_px, n), r)?;
        let _ = writeln!(csv, "{n},{}", r.csv_row());
    }
    spec.write_csv("sweep.csv", &csv)?;
    Ok(vec![format!("{} cases written to {}", reports.len(), spec.out.join("sweep.csv").display())])
}

pub fn render_markdown(r: &SimReport, meta: &serde_json::Value) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# {} at {} px\n", r.model, r.image_px);
    let _ = writeln!(md, "- tokens: {}\n- blocks: {}\n- DMA: {}", r.tokens, r.n_blocks, r.dma_mode);
    if let Some(h) = meta.get("config_sha256").and_then(|v| v.as_str()) {
        let _ = writeln!(md, "- config: `{h}`");
    }
    if let Some(s) = meta.get("seed") {
        let _ = writeln!(md, "- seed: {s}");
    }
    let _ = writeln!(md, "\n## Latency\n\n| category | cycles | share |\n|---|---:|---:|");
    for cat in Category::ALL {
        let _ = writeln!(md, "| {} | {} | {:.2}% |", cat.name(), r.cycles[cat.name()], 100.0 * r.share(cat));
    }
    let _ = writeln!(md, "| total | {} | 100.00% |\n\nLatency {:.6e} s.\n", r.total_cycles, r.latency_s);
    let _ = writeln!(
        md,
        "## Energy\n\n| logic | on-chip | off-chip | total |\n|---:|---:|---:|---:|\n| {:.4e} | {:.4e} | {:.4e} | {:.4e} |\n",
        r.energy.logic, r.energy.onchip, r.energy.offchip, r.energy.total
    );
    let _ = writeln!(md, "Logic and on-chip energies use estimated per-operation coefficients.\n");
    let _ = writeln!(md, "## Off-chip traffic\n\nread {} B, write {} B\n\n{}\n", r.offchip.read, r.offchip.write, r.operand_inventory);
    let _ = writeln!(md, "## Roofline\n\n| op | ops/byte | bound ops/s | achieved ops/s |\n|---|---:|---:|---:|");
    for p in &r.roofline {
        let _ = writeln!(md, "| {} | {:.3} | {:.4e} | {:.4e} |", p.name, p.intensity, p.bound, p.achieved);
    }
    if let Some(t) = &r.ssa_trace {
        let _ = writeln!(
            md,
            "\n## Scan arrays\n\n{} jobs, {} cycles, {} LISU combines, SPE utilization {:.3}",
            t.jobs, t.total_cycles, t.lisu_combines, t.spe_utilization
        );
    }
    md
}

pub fn report(spec: &RunSpec) -> Result<Vec<String>, CliError> {
    let path = spec.out.join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    let r: SimReport = serde_json::from_value(value.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let md = render_markdown(&r, value.get("meta").unwrap_or(&serde_json::Value::Null));
    let p = spec.write("report.md", md.as_bytes())?;
    Ok(vec![format!("wrote {}", p.display())])
}
