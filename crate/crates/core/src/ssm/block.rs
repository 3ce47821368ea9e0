use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Dim, RealTensor};
use crate::sfu::silu;
use crate::ssm::scan::sequential_scan;

/// Operands of one selective SSM block.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmInputs {
    /// (L, h)
    pub u: RealTensor,
    /// (L, h)
    pub delta: RealTensor,
    /// (h, m)
    pub a: RealTensor,
    /// (L, m)
    pub b: RealTensor,
    /// (L, m)
    pub c: RealTensor,
    /// (L, h)
    pub z: RealTensor,
}

fn expect_dims(name: &str, t: &RealTensor, want: [(Dim, usize); 2]) -> Result<()> {
    if t.dims() != want {
        return Err(Error::Shape(format!("{name} has dims {:?}, expected {:?}", t.dims(), want)));
    }
    Ok(())
}

impl SsmInputs {
    pub fn new(
        u: RealTensor,
        delta: RealTensor,
        a: RealTensor,
        b: RealTensor,
        c: RealTensor,
        z: RealTensor,
    ) -> Result<Self> {
        let (l, h) = match u.dims() {
            [(Dim::L, l), (Dim::H, h)] => (*l, *h),
            other => return Err(Error::Shape(format!("u must be (L, h), got {other:?}"))),
        };
        let m = match a.dims() {
            [(Dim::H, _), (Dim::M, m)] => *m,
            other => return Err(Error::Shape(format!("A must be (h, m), got {other:?}"))),
        };
        expect_dims("delta", &delta, [(Dim::L, l), (Dim::H, h)])?;
        expect_dims("A", &a, [(Dim::H, h), (Dim::M, m)])?;
        expect_dims("B", &b, [(Dim::L, l), (Dim::M, m)])?;
        expect_dims("C", &c, [(Dim::L, l), (Dim::M, m)])?;
        expect_dims("Z", &z, [(Dim::L, l), (Dim::H, h)])?;
        if l == 0 || h == 0 || m == 0 {
            return Err(Error::Empty("SSM dimensions"));
        }
        Ok(Self { u, delta, a, b, c, z })
    }

    pub fn seq_len(&self) -> usize {
        self.u.dims()[0].1
    }

    pub fn hidden(&self) -> usize {
        self.u.dims()[1].1
    }

    pub fn state(&self) -> usize {
        self.a.dims()[1].1
    }

    /// exp(Δ[l,h] · A[h,m])
    #[inline]
    pub fn abar_at(&self, l: usize, h: usize, m: usize) -> f64 {
        (self.delta.at2(l, h) * self.a.at2(h, m)).exp()
    }

    /// Δ[l,h] · B[l,m] · u[l,h]
    #[inline]
    pub fn bu_at(&self, l: usize, h: usize, m: usize) -> f64 {
        self.delta.at2(l, h) * self.b.at2(l, m) * self.u.at2(l, h)
    }

    /// Discretized rows of one (h, m) lane.
    pub fn lane(&self, h: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
        let l = self.seq_len();
        ((0..l).map(|i| self.abar_at(i, h, m)).collect(), (0..l).map(|i| self.bu_at(i, h, m)).collect())
    }

    /// Reference states of one lane.
    pub fn lane_states(&self, h: usize, m: usize) -> Vec<f64> {
        let (abar, bu) = self.lane(h, m);
        sequential_scan(&abar, &bu).expect("lane rows are non-empty and equal length")
    }
}

/// Function applied to Z before the output multiply.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gate {
    #[default]
    Silu,
    Identity,
}

impl Gate {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Gate::Silu => silu(z),
            Gate::Identity => z,
        }
    }
}

/// Materializes exp(ΔA) and ΔB·u as (L, h, m) tensors.
pub fn discretize(
    delta: &RealTensor,
    a: &RealTensor,
    b: &RealTensor,
    u: &RealTensor,
) -> Result<(RealTensor, RealTensor)> {
    let (l, h) = match delta.dims() {
        [(Dim::L, l), (Dim::H, h)] => (*l, *h),
        other => return Err(Error::Shape(format!("delta must be (L, h), got {other:?}"))),
    };
    let m = match a.dims() {
        [(Dim::H, ah), (Dim::M, m)] if *ah == h => *m,
        other => return Err(Error::Shape(format!("A must be (h={h}, m), got {other:?}"))),
    };
    expect_dims("B", b, [(Dim::L, l), (Dim::M, m)])?;
    expect_dims("u", u, [(Dim::L, l), (Dim::H, h)])?;
    let dims = vec![(Dim::L, l), (Dim::H, h), (Dim::M, m)];
    let abar = RealTensor::from_fn(dims.clone(), |i| (delta.at2(i[0], i[1]) * a.at2(i[1], i[2])).exp())?;
    let bu = RealTensor::from_fn(dims, |i| delta.at2(i[0], i[1]) * b.at2(i[0], i[2]) * u.at2(i[0], i[1]))?;
    Ok((abar, bu))
}

/// Assembles y[l, h] from per-lane states: ascending-m inner product with C,
/// then the gate. `states(h, m)` must return the L states of that lane.
pub fn reduce_and_gate(
    inputs: &SsmInputs,
    gate: Gate,
    states: impl Fn(usize, usize) -> Vec<f64> + Sync,
) -> Result<RealTensor> {
    let (l, h, m) = (inputs.seq_len(), inputs.hidden(), inputs.state());
    let cols: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|hi| {
            let mut y = vec![0.0; l];
            for mi in 0..m {
                let s = states(hi, mi);
                for (li, acc) in y.iter_mut().enumerate() {
                    *acc += inputs.c.at2(li, mi) * s[li];
                }
            }
            for (li, v) in y.iter_mut().enumerate() {
                *v *= gate.apply(inputs.z.at2(li, hi));
            }
            y
        })
        .collect();
    RealTensor::from_fn(vec![(Dim::L, l), (Dim::H, h)], |i| cols[i[1]][i[0]])
}

/// Floating-point selective SSM: per-lane scan, C reduction, Z gate.
pub fn selective_ssm_block(inputs: &SsmInputs, gate: Gate) -> Result<RealTensor> {
    reduce_and_gate(inputs, gate, |h, m| inputs.lane_states(h, m))
}

/// Reverses the L axis.
pub fn flip_sequence(t: &RealTensor) -> Result<RealTensor> {
    let ax = t.axis(Dim::L).ok_or_else(|| Error::UnknownDim("L".into()))?;
    let l = t.dims()[ax].1;
    let dims = t.dims().to_vec();
    RealTensor::from_fn(dims, |idx| {
        let mut src = idx.to_vec();
        src[ax] = l - 1 - idx[ax];
        t.get(&src)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::synth::{synthetic_inputs, SynthSpec};

    fn t2(d0: (Dim, usize), d1: (Dim, usize), v: impl Fn(usize, usize) -> f64) -> RealTensor {
        RealTensor::from_fn(vec![d0, d1], |i| v(i[0], i[1])).unwrap()
    }

    #[test]
    fn discretize_zero_delta() {
        let (l, h, m) = (3, 2, 2);
        let delta = t2((Dim::L, l), (Dim::H, h), |_, _| 0.0);
        let a = t2((Dim::H, h), (Dim::M, m), |_, _| -1.0);
        let b = t2((Dim::L, l), (Dim::M, m), |i, j| (i + j) as f64);
        let u = t2((Dim::L, l), (Dim::H, h), |i, j| (i * j) as f64 + 1.0);
        let (abar, bu) = discretize(&delta, &a, &b, &u).unwrap();
        assert!(abar.data().iter().all(|&v| v == 1.0));
        assert!(bu.data().iter().all(|&v| v == 0.0));
        let delta = t2((Dim::L, l), (Dim::H, h), |_, _| 1.0);
        let (abar, _) = discretize(&delta, &a, &b, &u).unwrap();
        assert!(abar.data().iter().all(|&v| (v - 0.367879).abs() < 1e-6));
    }

    #[test]
    fn discretize_matches_scalar_loops() {
        let s = synthetic_inputs(3, 2, 2, 5, &SynthSpec::default()).unwrap();
        let (abar, bu) = discretize(&s.delta, &s.a, &s.b, &s.u).unwrap();
        for l in 0..3 {
            for h in 0..2 {
                for m in 0..2 {
                    let d = s.delta.get(&[l, h]);
                    let ea = (d * s.a.get(&[h, m])).exp();
                    let eb = d * s.b.get(&[l, m]) * s.u.get(&[l, h]);
                    let ga = abar.get(&[l, h, m]);
                    let gb = bu.get(&[l, h, m]);
                    assert!((ga - ea).abs() <= 1e-15 * ea.abs());
                    assert!((gb - eb).abs() <= 1e-15 * eb.abs());
                }
            }
        }
    }

    #[test]
    fn discretize_shape_errors() {
        let delta = t2((Dim::L, 3), (Dim::H, 2), |_, _| 0.0);
        let a = t2((Dim::H, 3), (Dim::M, 2), |_, _| -1.0);
        let b = t2((Dim::L, 3), (Dim::M, 2), |_, _| 0.0);
        assert!(matches!(discretize(&delta, &a, &b, &delta), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_c_gives_zero_output() {
        let mut s = synthetic_inputs(8, 3, 4, 1, &SynthSpec::default()).unwrap();
        s.c = s.c.map(|_| 0.0).unwrap();
        let y = selective_ssm_block(&s, Gate::Silu).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_state_collapses_to_scan() {
        let mut s = synthetic_inputs(6, 2, 1, 2, &SynthSpec::default()).unwrap();
        s.c = s.c.map(|_| 1.0).unwrap();
        s.z = s.z.map(|_| 1.0).unwrap();
        let y = selective_ssm_block(&s, Gate::Identity).unwrap();
        for h in 0..2 {
            let st = s.lane_states(h, 0);
            for l in 0..6 {
                assert_eq!(y.get(&[l, h]), st[l]);
            }
        }
    }

    #[test]
    fn block_matches_all_scalar_loops() {
        let (l, h, m) = (8, 2, 4);
        let s = synthetic_inputs(l, h, m, 3, &SynthSpec::default()).unwrap();
        let y = selective_ssm_block(&s, Gate::Silu).unwrap();
        // fully independent loop nest: recurrence over l, state array over (h, m)
        let mut state = vec![vec![0.0f64; m]; h];
        for li in 0..l {
            for hi in 0..h {
                let d = s.delta.get(&[li, hi]);
                let mut acc = 0.0;
                for mi in 0..m {
                    let abar = (d * s.a.get(&[hi, mi])).exp();
                    state[hi][mi] = abar * state[hi][mi] + d * s.b.get(&[li, mi]) * s.u.get(&[li, hi]);
                    acc += s.c.get(&[li, mi]) * state[hi][mi];
                }
                let zz = s.z.get(&[li, hi]);
                let expect = acc * (zz / (1.0 + (-zz).exp()));
                let got = y.get(&[li, hi]);
                assert!((got - expect).abs() <= 1e-12 * (1.0 + expect.abs()), "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn block_is_linear_in_u_with_identity_gate() {
        let s1 = synthetic_inputs(10, 3, 4, 7, &SynthSpec::default()).unwrap();
        let s2 = synthetic_inputs(10, 3, 4, 8, &SynthSpec::default()).unwrap();
        let mut a = s1.clone();
        a.z = a.z.map(|_| 1.0).unwrap();
        let mut b = a.clone();
        b.u = s2.u.clone();
        let mut sum = a.clone();
        sum.u = RealTensor::new(
            a.u.dims().to_vec(),
            a.u.data().iter().zip(b.u.data()).map(|(x, y)| x + y).collect(),
        )
        .unwrap();
        let ya = selective_ssm_block(&a, Gate::Identity).unwrap();
        let yb = selective_ssm_block(&b, Gate::Identity).unwrap();
        let ys = selective_ssm_block(&sum, Gate::Identity).unwrap();
        for i in 0..ys.len() {
            let e = ya.data()[i] + yb.data()[i];
            assert!((ys.data()[i] - e).abs() <= 1e-12 * (1.0 + e.abs()));
        }
    }

    #[test]
    fn flip_rules() {
        let v = RealTensor::new(vec![(Dim::L, 3)], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(flip_sequence(&v).unwrap().data(), &[3.0, 2.0, 1.0]);
        let t = t2((Dim::L, 4), (Dim::H, 2), |l, h| (10 * l + h) as f64);
        let f = flip_sequence(&t).unwrap();
        for l in 0..4 {
            for h in 0..2 {
                assert_eq!(f.get(&[l, h]), t.get(&[3 - l, h]));
            }
        }
        assert_eq!(flip_sequence(&f).unwrap(), t);
        let no_l = t2((Dim::H, 2), (Dim::M, 2), |_, _| 0.0);
        assert!(flip_sequence(&no_l).is_err());
    }
}
