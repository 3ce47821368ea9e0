//! Piecewise-linear lookup tables for SiLU, exp and softplus.
//!
//! A table holds sorted breakpoints and one `(a, b)` line per segment. Lookup
//! is a binary search over the breakpoints; evaluation is `a * x + b`.
//! Breakpoints are refined by gradient descent on the mean-squared error over
//! a dense grid, with the per-segment lines re-fitted by least squares after
//! every step.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FunctionId {
    Silu,
    Exp,
    Softplus,
    /// `f(x) = x`; exactly representable, used to check the fitting path.
    Identity,
}

impl FunctionId {
    pub const HARDWARE: [FunctionId; 3] = [FunctionId::Exp, FunctionId::Silu, FunctionId::Softplus];

    pub fn name(self) -> &'static str {
        match self {
            FunctionId::Silu => "silu",
            FunctionId::Exp => "exp",
            FunctionId::Softplus => "softplus",
            FunctionId::Identity => "identity",
        }
    }

    /// Profiled input range covering 99.9% of activations.
    pub fn default_range(self) -> (f64, f64) {
        match self {
            FunctionId::Silu => (-8.7, 10.2),
            FunctionId::Exp => (-8.5, 0.0),
            FunctionId::Softplus => (-17.6, 2.7),
            FunctionId::Identity => (-1.0, 1.0),
        }
    }

    pub fn default_entries(self) -> usize {
        match self {
            FunctionId::Exp => 16,
            FunctionId::Identity => 2,
            FunctionId::Silu | FunctionId::Softplus => 32,
        }
    }
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FunctionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(FunctionId::Silu),
            "exp" => Ok(FunctionId::Exp),
            "softplus" => Ok(FunctionId::Softplus),
            "identity" => Ok(FunctionId::Identity),
            other => Err(Error::Invalid(format!("unknown function {other:?}"))),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Exact binary64 evaluation of a table's target function.
pub fn reference_fn(function: FunctionId, x: f64) -> f64 {
    match function {
        FunctionId::Silu => silu(x),
        FunctionId::Exp => x.exp(),
        FunctionId::Softplus => softplus(x),
        FunctionId::Identity => x,
    }
}

/// A fitted lookup table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfuLut {
    pub function: FunctionId,
    pub range: (f64, f64),
    pub breakpoints: Vec<f64>,
    pub coeffs_a: Vec<f64>,
    pub coeffs_b: Vec<f64>,
}

impl SfuLut {
    pub fn new(
        function: FunctionId,
        range: (f64, f64),
        breakpoints: Vec<f64>,
        coeffs_a: Vec<f64>,
        coeffs_b: Vec<f64>,
    ) -> Result<Self> {
        let lut = Self { function, range, breakpoints, coeffs_a, coeffs_b };
        lut.validate()?;
        Ok(lut)
    }

    pub fn validate(&self) -> Result<()> {
        if self.breakpoints.is_empty() {
            return Err(Error::Empty("breakpoints"));
        }
        if self.coeffs_a.len() != self.breakpoints.len() || self.coeffs_b.len() != self.breakpoints.len() {
            return Err(Error::Shape("one (a, b) pair per breakpoint".into()));
        }
        if self.breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("breakpoints must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn entries(&self) -> usize {
        self.breakpoints.len()
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let i = segment_index(x, &self.breakpoints);
        self.coeffs_a[i] * x + self.coeffs_b[i]
    }
}

#[inline]
fn segment_index(x: f64, bp: &[f64]) -> usize {
    bp.partition_point(|&b| b <= x).saturating_sub(1)
}

/// Largest `i` with `bp[i] <= x`, clamped into `[0, bp.len() - 1]`.
pub fn lookup_segment(x: f64, bp: &[f64]) -> Result<usize> {
    if bp.is_empty() {
        return Err(Error::Empty("breakpoints"));
    }
    Ok(segment_index(x, bp))
}

/// Element-wise table evaluation.
pub fn sfu_eval(lut: &SfuLut, xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| lut.eval(x)).collect()
}

/// Knobs for [`fit_lut`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub grid_points: usize,
    /// Initial step, as a fraction of the fit range.
    pub step_size: f64,
    pub iterations: usize,
    pub min_width: f64,
    /// Max-abs error is evaluated this often; the best table seen is returned.
    pub eval_every: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            grid_points: 100_000,
            step_size: 1e-3,
            iterations: 2000,
            min_width: 1e-4,
            eval_every: 25,
        }
    }
}

/// Uniform grid of `n` points spanning `[lo, hi]` inclusive.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| if i == n - 1 { hi } else { lo + i as f64 * step }).collect()
}

struct Grid {
    xs: Vec<f64>,
    fs: Vec<f64>,
    // prefix sums of 1, x, x^2, f, x*f
    sx: Vec<f64>,
    sxx: Vec<f64>,
    sf: Vec<f64>,
    sxf: Vec<f64>,
}

impl Grid {
    fn new(function: FunctionId, lo: f64, hi: f64, n: usize) -> Self {
        let xs = uniform_grid(lo, hi, n);
        let fs: Vec<f64> = xs.iter().map(|&x| reference_fn(function, x)).collect();
        let mut sx = vec![0.0; n + 1];
        let mut sxx = vec![0.0; n + 1];
        let mut sf = vec![0.0; n + 1];
        let mut sxf = vec![0.0; n + 1];
        for i in 0..n {
            let (x, f) = (xs[i], fs[i]);
            sx[i + 1] = sx[i] + x;
            sxx[i + 1] = sxx[i] + x * x;
            sf[i + 1] = sf[i] + f;
            sxf[i + 1] = sxf[i] + x * f;
        }
        Self { xs, fs, sx, sxx, sf, sxf }
    }

    /// Grid index range `[start, end)` covered by each segment.
    fn spans(&self, bp: &[f64]) -> Vec<(usize, usize)> {
        let starts: Vec<usize> = bp
            .iter()
            .enumerate()
            .map(|(i, &b)| if i == 0 { 0 } else { self.xs.partition_point(|&x| x < b) })
            .collect();
        (0..bp.len())
            .map(|i| (starts[i], if i + 1 < bp.len() { starts[i + 1] } else { self.xs.len() }))
            .collect()
    }
}

fn endpoint_line(function: FunctionId, x0: f64, x1: f64) -> (f64, f64) {
    let (f0, f1) = (reference_fn(function, x0), reference_fn(function, x1));
    let a = (f1 - f0) / (x1 - x0);
    (a, f0 - a * x0)
}

/// Least-squares lines from prefix sums; used inside the descent loop.
fn fast_lines(function: FunctionId, grid: &Grid, bp: &[f64], hi: f64) -> Vec<(f64, f64)> {
    grid.spans(bp)
        .into_iter()
        .enumerate()
        .map(|(i, (s, e))| {
            let n = (e - s) as f64;
            let sx = grid.sx[e] - grid.sx[s];
            let sxx = grid.sxx[e] - grid.sxx[s];
            let sf = grid.sf[e] - grid.sf[s];
            let sxf = grid.sxf[e] - grid.sxf[s];
            let den = n * sxx - sx * sx;
            if e - s < 2 || den <= 0.0 {
                let right = if i + 1 < bp.len() { bp[i + 1] } else { hi };
                return endpoint_line(function, bp[i], right);
            }
            let a = (n * sxf - sx * sf) / den;
            (a, (sf - a * sx) / n)
        })
        .collect()
}

/// Two-pass centred least squares; used for the returned coefficients.
fn exact_lines(function: FunctionId, grid: &Grid, bp: &[f64], hi: f64) -> Vec<(f64, f64)> {
    grid.spans(bp)
        .into_iter()
        .enumerate()
        .map(|(i, (s, e))| {
            if e - s < 2 {
                let right = if i + 1 < bp.len() { bp[i + 1] } else { hi };
                return endpoint_line(function, bp[i], right);
            }
            let xs = &grid.xs[s..e];
            let fs = &grid.fs[s..e];
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let mf = fs.iter().sum::<f64>() / n;
            let (mut cov, mut var) = (0.0, 0.0);
            for (&x, &f) in xs.iter().zip(fs) {
                cov += (x - mx) * (f - mf);
                var += (x - mx) * (x - mx);
            }
            let a = cov / var;
            (a, mf - a * mx)
        })
        .collect()
}

fn max_abs_on_grid(grid: &Grid, bp: &[f64], lines: &[(f64, f64)]) -> f64 {
    let mut worst = 0.0f64;
    for (seg, (s, e)) in grid.spans(bp).into_iter().enumerate() {
        let (a, b) = lines[seg];
        for i in s..e {
            worst = worst.max((a * grid.xs[i] + b - grid.fs[i]).abs());
        }
    }
    worst
}

/// Keeps breakpoints strictly increasing with at least `min_width` spacing
/// inside `[lo, hi]`; `bp[0]` stays pinned at `lo`.
fn project(bp: &mut [f64], lo: f64, hi: f64, min_width: f64) {
    let n = bp.len();
    bp[0] = lo;
    for j in 1..n {
        let lower = bp[j - 1] + min_width;
        let upper = hi - (n - j) as f64 * min_width;
        bp[j] = bp[j].max(lower).min(upper);
    }
}

/// Fits a table with `entries` segments to `function` over `range`.
pub fn fit_lut(function: FunctionId, range: (f64, f64), entries: usize, opts: &FitOptions) -> Result<SfuLut> {
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Invalid(format!("fit range ({lo}, {hi}) is empty or not finite")));
    }
    if entries < 2 {
        return Err(Error::Invalid(format!("a table needs at least 2 entries, got {entries}")));
    }
    if opts.grid_points < 2 * entries {
        return Err(Error::Invalid("grid too coarse for the requested entries".into()));
    }
    if (entries as f64) * opts.min_width >= hi - lo {
        return Err(Error::Invalid("minimum segment width does not fit the range".into()));
    }
    let grid = Grid::new(function, lo, hi, opts.grid_points);
    let width = hi - lo;
    let mut bp: Vec<f64> = (0..entries).map(|i| lo + width * i as f64 / entries as f64).collect();

    let mut best_bp = bp.clone();
    let mut best_err = max_abs_on_grid(&grid, &bp, &exact_lines(function, &grid, &bp, hi));

    for it in 0..opts.iterations {
        let lines = fast_lines(function, &grid, &bp, hi);
        // d(SSE)/d(bp[j]) is the squared residual gap of the two adjacent lines at bp[j].
        let mut grad = vec![0.0; entries];
        for j in 1..entries {
            let x = bp[j];
            let f = reference_fn(function, x);
            let (al, bl) = lines[j - 1];
            let (ar, br) = lines[j];
            let rl = f - (al * x + bl);
            let rr = f - (ar * x + br);
            grad[j] = (rl * rl - rr * rr) / width;
        }
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax == 0.0 {
            break;
        }
        let step = opts.step_size * width * (1.0 - it as f64 / opts.iterations as f64);
        for j in 1..entries {
            bp[j] -= step * grad[j] / gmax;
        }
        project(&mut bp, lo, hi, opts.min_width);

        if (it + 1) % opts.eval_every.max(1) == 0 || it + 1 == opts.iterations {
            let err = max_abs_on_grid(&grid, &bp, &exact_lines(function, &grid, &bp, hi));
            if err < best_err {
                best_err = err;
                best_bp.clone_from(&bp);
            }
        }
    }

    let lines = exact_lines(function, &grid, &best_bp, hi);
    let (coeffs_a, coeffs_b) = lines.into_iter().unzip();
    SfuLut::new(function, range, best_bp, coeffs_a, coeffs_b)
}

/// Error statistics of a table against its reference function on a uniform grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LutError {
    pub max_abs: f64,
    pub rms: f64,
    pub mean_abs: f64,
}

pub fn lut_error(lut: &SfuLut, points: usize) -> LutError {
    let xs = uniform_grid(lut.range.0, lut.range.1, points);
    let mut max_abs = 0.0f64;
    let mut sq = 0.0;
    let mut abs = 0.0;
    for &x in &xs {
        let e = (lut.eval(x) - reference_fn(lut.function, x)).abs();
        max_abs = max_abs.max(e);
        sq += e * e;
        abs += e;
    }
    let n = xs.len() as f64;
    LutError { max_abs, rms: (sq / n).sqrt(), mean_abs: abs / n }
}

/// The three hardware tables, fitted at their profiled ranges and default sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfuTables {
    pub exp: SfuLut,
    pub silu: SfuLut,
    pub softplus: SfuLut,
}

impl SfuTables {
    pub fn fit_default(opts: &FitOptions) -> Result<Self> {
        let fit = |f: FunctionId| fit_lut(f, f.default_range(), f.default_entries(), opts);
        Ok(Self {
            exp: fit(FunctionId::Exp)?,
            silu: fit(FunctionId::Silu)?,
            softplus: fit(FunctionId::Softplus)?,
        })
    }
}
