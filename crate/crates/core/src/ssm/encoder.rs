//! Bidirectional Vision Mamba encoder block.
//!
//! LayerNorm -> input projection to (x, z) -> per path: causal depthwise
//! conv + SiLU, projection to (Δ, B, C) with softplus on Δ, selective SSM.
//! The backward path runs on the flipped sequence and is flipped back; the
//! two paths are summed, output-projected and added to the residual.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Dim, RealTensor};
use crate::sfu::{silu, softplus};
use crate::ssm::block::{flip_sequence, selective_ssm_block, Gate, SsmInputs};
use crate::ssm::synth::normal;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
    pub conv_width: usize,
    pub gate: Gate,
    pub bidirectional: bool,
}

impl EncoderConfig {
    /// Mamba defaults: expand 2, dt_rank = ceil(d_model / 16), conv width 4.
    pub fn for_model(d_model: usize, d_state: usize) -> Self {
        Self {
            d_model,
            d_inner: 2 * d_model,
            d_state,
            dt_rank: d_model.div_ceil(16),
            conv_width: 4,
            gate: Gate::Silu,
            bidirectional: true,
        }
    }
}

/// Weights of one scan direction.
#[derive(Debug, Clone, PartialEq)]
pub struct PathWeights {
    /// (h = d_inner, K)
    pub conv_w: RealTensor,
    /// (h)
    pub conv_b: RealTensor,
    /// (d_inner, dt_rank + 2m)
    pub x_proj: RealTensor,
    /// (dt_rank, d_inner)
    pub dt_proj: RealTensor,
    /// (h)
    pub dt_bias: RealTensor,
    /// (h, m)
    pub a: RealTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub cfg: EncoderConfig,
    pub ln_gain: RealTensor,
    pub ln_bias: RealTensor,
    /// (d_model, 2 * d_inner); the first d_inner columns feed x, the rest z.
    pub in_proj: RealTensor,
    pub forward: PathWeights,
    pub backward: Option<PathWeights>,
    /// (d_inner, d_model)
    pub out_proj: RealTensor,
}

fn mat(rows: usize, cols: usize, f: impl FnMut(&[usize]) -> f64) -> RealTensor {
    RealTensor::from_fn(vec![(Dim::Other(0), rows), (Dim::Other(1), cols)], f).expect("finite weights")
}

fn vector(n: usize, f: impl FnMut(&[usize]) -> f64) -> RealTensor {
    RealTensor::from_fn(vec![(Dim::H, n)], f).expect("finite weights")
}

impl PathWeights {
    pub fn random(cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let (e, r, m, k) = (cfg.d_inner, cfg.dt_rank, cfg.d_state, cfg.conv_width);
        let conv_w = RealTensor::from_fn(vec![(Dim::H, e), (Dim::Other(0), k)], |_| normal(rng) / (k as f64).sqrt())
            .expect("finite");
        let conv_b = vector(e, |_| 0.1 * normal(rng));
        let x_proj = mat(e, r + 2 * m, |_| normal(rng) / (e as f64).sqrt());
        let dt_proj = mat(r, e, |_| normal(rng) / (r as f64).sqrt());
        // softplus(-3) ~ 0.05: keeps Δ small as in trained Mamba models
        let dt_bias = vector(e, |_| -3.0 + 0.5 * normal(rng));
        let a = RealTensor::from_fn(vec![(Dim::H, e), (Dim::M, m)], |_| -rng.gen_range(0.5..1.5)).expect("finite");
        Self { conv_w, conv_b, x_proj, dt_proj, dt_bias, a }
    }

    fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        let (e, r, m, k) = (cfg.d_inner, cfg.dt_rank, cfg.d_state, cfg.conv_width);
        let ok = self.conv_w.dims() == [(Dim::H, e), (Dim::Other(0), k)]
            && self.conv_b.dims() == [(Dim::H, e)]
            && self.x_proj.dims() == [(Dim::Other(0), e), (Dim::Other(1), r + 2 * m)]
            && self.dt_proj.dims() == [(Dim::Other(0), r), (Dim::Other(1), e)]
            && self.dt_bias.dims() == [(Dim::H, e)]
            && self.a.dims() == [(Dim::H, e), (Dim::M, m)];
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("path weights inconsistent with encoder config".into()))
        }
    }
}

impl EncoderWeights {
    pub fn random(cfg: EncoderConfig, rng: &mut impl Rng) -> Self {
        let (d, e) = (cfg.d_model, cfg.d_inner);
        let ln_gain = vector(d, |_| 1.0 + 0.1 * normal(rng));
        let ln_bias = vector(d, |_| 0.1 * normal(rng));
        let in_proj = mat(d, 2 * e, |_| normal(rng) / (d as f64).sqrt());
        let forward = PathWeights::random(&cfg, rng);
        let backward = cfg.bidirectional.then(|| PathWeights::random(&cfg, rng));
        let out_proj = mat(e, d, |_| normal(rng) / (e as f64).sqrt());
        Self { cfg, ln_gain, ln_bias, in_proj, forward, backward, out_proj }
    }

    /// Exchanges the forward and backward path weights.
    pub fn swap_paths(&self) -> Result<Self> {
        let backward = self.backward.clone().ok_or_else(|| Error::Invalid("encoder has no backward path".into()))?;
        Ok(Self { forward: backward, backward: Some(self.forward.clone()), ..self.clone() })
    }

    pub fn check(&self) -> Result<()> {
        let (d, e) = (self.cfg.d_model, self.cfg.d_inner);
        if self.ln_gain.dims() != [(Dim::H, d)]
            || self.ln_bias.dims() != [(Dim::H, d)]
            || self.in_proj.dims() != [(Dim::Other(0), d), (Dim::Other(1), 2 * e)]
            || self.out_proj.dims() != [(Dim::Other(0), e), (Dim::Other(1), d)]
        {
            return Err(Error::Shape("encoder weights inconsistent with config".into()));
        }
        self.forward.check(&self.cfg)?;
        match (&self.backward, self.cfg.bidirectional) {
            (Some(b), true) => b.check(&self.cfg),
            (None, false) => Ok(()),
            _ => Err(Error::Shape("backward path presence disagrees with config".into())),
        }
    }
}

/// (L, n) x (n, k) -> (L, k), the output's second axis named `H`.
pub fn matmul(x: &RealTensor, w: &RealTensor) -> Result<RealTensor> {
    let (l, n) = (x.dims()[0].1, x.dims()[1].1);
    let (wn, k) = (w.dims()[0].1, w.dims()[1].1);
    if x.rank() != 2 || w.rank() != 2 || n != wn {
        return Err(Error::Shape(format!("matmul {:?} x {:?}", x.dims(), w.dims())));
    }
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0; l * k];
    for i in 0..l {
        let row = &mut out[i * k..(i + 1) * k];
        for j in 0..n {
            let xv = xd[i * n + j];
            for (o, wv) in row.iter_mut().zip(&wd[j * k..(j + 1) * k]) {
                *o += xv * wv;
            }
        }
    }
    RealTensor::new(vec![(Dim::L, l), (Dim::H, k)], out)
}

pub fn layer_norm(x: &RealTensor, gain: &RealTensor, bias: &RealTensor) -> Result<RealTensor> {
    let (l, d) = (x.dims()[0].1, x.dims()[1].1);
    if gain.len() != d || bias.len() != d {
        return Err(Error::Shape("layernorm parameters".into()));
    }
    let mut out = Vec::with_capacity(l * d);
    for i in 0..l {
        let row = &x.data()[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (j, v) in row.iter().enumerate() {
            out.push((v - mean) * inv * gain.data()[j] + bias.data()[j]);
        }
    }
    RealTensor::new(x.dims().to_vec(), out)
}

/// Depthwise causal convolution with left zero padding.
pub fn causal_conv1d(x: &RealTensor, w: &RealTensor, b: &RealTensor) -> Result<RealTensor> {
    let e = x.dims()[1].1;
    let k = w.dims()[1].1;
    if w.dims()[0].1 != e || b.len() != e {
        return Err(Error::Shape("conv1d weights".into()));
    }
    RealTensor::from_fn(x.dims().to_vec(), |i| {
        let (li, c) = (i[0], i[1]);
        let mut acc = b.data()[c];
        for j in 0..k {
            // tap j multiplies x[li - (k - 1) + j]
            if let Some(src) = (li + j + 1).checked_sub(k) {
                acc += w.at2(c, j) * x.at2(src, c);
            }
        }
        acc
    })
}

fn columns(t: &RealTensor, start: usize, len: usize, dim: Dim) -> Result<RealTensor> {
    let l = t.dims()[0].1;
    RealTensor::from_fn(vec![(Dim::L, l), (dim, len)], |i| t.at2(i[0], start + i[1]))
}

/// Builds the SSM operands of one path from its (already oriented) x and z streams.
pub fn path_inputs(x: &RealTensor, z: &RealTensor, w: &PathWeights, cfg: &EncoderConfig) -> Result<SsmInputs> {
    let (r, m) = (cfg.dt_rank, cfg.d_state);
    let u = causal_conv1d(x, &w.conv_w, &w.conv_b)?.map(silu)?;
    let params = matmul(&u, &w.x_proj)?;
    let dt_low = columns(&params, 0, r, Dim::H)?;
    let b = columns(&params, r, m, Dim::M)?;
    let c = columns(&params, r + m, m, Dim::M)?;
    let dt = matmul(&dt_low, &w.dt_proj)?;
    let e = cfg.d_inner;
    let delta = RealTensor::from_fn(dt.dims().to_vec(), |i| softplus(dt.at2(i[0], i[1]) + w.dt_bias.data()[i[1] % e]))?;
    SsmInputs::new(u, delta, w.a.clone(), b, c, z.clone())
}

pub fn encoder_block(x: &RealTensor, w: &EncoderWeights) -> Result<RealTensor> {
    w.check()?;
    let cfg = &w.cfg;
    if x.rank() != 2 || x.dims()[1].1 != cfg.d_model || x.axis(Dim::L) != Some(0) {
        return Err(Error::Shape(format!("encoder input {:?} vs d_model {}", x.dims(), cfg.d_model)));
    }
    let normed = layer_norm(x, &w.ln_gain, &w.ln_bias)?;
    let xz = matmul(&normed, &w.in_proj)?;
    let xs = columns(&xz, 0, cfg.d_inner, Dim::H)?;
    let zs = columns(&xz, cfg.d_inner, cfg.d_inner, Dim::H)?;

    let fwd = selective_ssm_block(&path_inputs(&xs, &zs, &w.forward, cfg)?, cfg.gate)?;
    let mut mixed = fwd.into_data();
    if let Some(bw) = &w.backward {
        let (xf, zf) = (flip_sequence(&xs)?, flip_sequence(&zs)?);
        let bwd = flip_sequence(&selective_ssm_block(&path_inputs(&xf, &zf, bw, cfg)?, cfg.gate)?)?;
        for (a, b) in mixed.iter_mut().zip(bwd.data()) {
            *a += b;
        }
    }
    let mixed = RealTensor::new(vec![(Dim::L, x.dims()[0].1), (Dim::H, cfg.d_inner)], mixed)?;
    let projected = matmul(&mixed, &w.out_proj)?;
    RealTensor::new(
        x.dims().to_vec(),
        projected.data().iter().zip(x.data()).map(|(p, r)| p + r).collect(),
    )
}
