//! The first-order linear recurrence `s[n] = p[n] * s[n-1] + q[n]` and its
//! associative-scan formulation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One element of the scan: multiplicative term `p` (an entry of exp(ΔA)) and
/// additive term `q` (an entry of ΔB·u).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPair {
    pub p: f64,
    pub q: f64,
}

impl ScanPair {
    pub const IDENTITY: ScanPair = ScanPair { p: 1.0, q: 0.0 };

    pub const fn new(p: f64, q: f64) -> Self {
        Self { p, q }
    }
}

/// Composes an earlier element `x` with a later element `y`:
/// `(x.p * y.p, y.p * x.q + y.q)`.
#[inline]
pub fn combine(x: ScanPair, y: ScanPair) -> ScanPair {
    ScanPair {
        p: x.p * y.p,
        q: y.p * x.q + y.q,
    }
}

fn check_rows(abar: &[f64], bu: &[f64]) -> Result<()> {
    if abar.is_empty() {
        return Err(Error::Empty("scan input"));
    }
    if abar.len() != bu.len() {
        return Err(Error::Shape(format!("scan rows of length {} and {}", abar.len(), bu.len())));
    }
    Ok(())
}

/// Reference recurrence, evaluated left to right.
pub fn sequential_scan(abar: &[f64], bu: &[f64]) -> Result<Vec<f64>> {
    check_rows(abar, bu)?;
    let mut out = Vec::with_capacity(bu.len());
    let mut s = bu[0];
    out.push(s);
    for n in 1..bu.len() {
        s = abar[n] * s + bu[n];
        out.push(s);
    }
    Ok(out)
}

/// Inclusive Kogge-Stone scan under an arbitrary associative `combine(earlier, later)`.
///
/// Stride-doubling passes; elements whose partner index would be negative pass
/// through unchanged, which is equivalent to left-padding with the identity.
pub fn kogge_stone_by<T: Copy>(items: &[T], combine: impl Fn(T, T) -> T) -> Vec<T> {
    let mut cur = items.to_vec();
    let mut next = cur.clone();
    let mut stride = 1;
    while stride < cur.len() {
        next[..stride].copy_from_slice(&cur[..stride]);
        for i in stride..cur.len() {
            next[i] = combine(cur[i - stride], cur[i]);
        }
        std::mem::swap(&mut cur, &mut next);
        stride <<= 1;
    }
    cur
}

/// Log-depth parallel formulation of [`sequential_scan`].
pub fn kogge_stone_scan(abar: &[f64], bu: &[f64]) -> Result<Vec<f64>> {
    check_rows(abar, bu)?;
    let pairs: Vec<ScanPair> = abar.iter().zip(bu).map(|(&p, &q)| ScanPair::new(p, q)).collect();
    Ok(kogge_stone_by(&pairs, combine).into_iter().map(|e| e.q).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_hand_values() {
        assert_eq!(sequential_scan(&[0.5; 3], &[1.0; 3]).unwrap(), vec![1.0, 1.5, 1.75]);
        assert_eq!(sequential_scan(&[0.3; 4], &[0.0; 4]).unwrap(), vec![0.0; 4]);
        let bu = [1.0, -2.0, 3.5];
        assert_eq!(sequential_scan(&[0.0; 3], &bu).unwrap(), bu.to_vec());
    }

    #[test]
    fn scan_rejects_bad_input() {
        assert_eq!(sequential_scan(&[], &[]), Err(Error::Empty("scan input")));
        assert_eq!(kogge_stone_scan(&[], &[]), Err(Error::Empty("scan input")));
        assert!(kogge_stone_scan(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn combine_identities_and_two_step() {
        let x = ScanPair::new(0.7, -1.25);
        assert_eq!(combine(ScanPair::IDENTITY, x), x);
        assert_eq!(combine(x, ScanPair::IDENTITY), x);
        let h = ScanPair::new(0.5, 1.0);
        assert_eq!(combine(h, h), ScanPair::new(0.25, 1.5));
    }

    #[test]
    fn kogge_stone_small_cases() {
        assert_eq!(kogge_stone_scan(&[0.9], &[4.0]).unwrap(), vec![4.0]);
        assert_eq!(kogge_stone_scan(&[0.5; 4], &[1.0; 4]).unwrap(), vec![1.0, 1.5, 1.75, 1.875]);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn pair() -> impl Strategy<Value = ScanPair> {
            (0.0f64..=1.0, -10.0f64..10.0).prop_map(|(p, q)| ScanPair::new(p, q))
        }

        fn close(a: f64, b: f64, rel: f64) -> bool {
            (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300) || (a - b).abs() < 1e-300
        }

        proptest! {
            #[test]
            fn combine_is_associative(a in pair(), b in pair(), c in pair()) {
                let l = combine(combine(a, b), c);
                let r = combine(a, combine(b, c));
                prop_assert!(close(l.p, r.p, 1e-12) && (l.q - r.q).abs() <= 1e-12 * (1.0 + l.q.abs()));
            }

            #[test]
            fn identity_is_exact(a in pair()) {
                prop_assert_eq!(combine(ScanPair::IDENTITY, a), a);
                prop_assert_eq!(combine(a, ScanPair::IDENTITY), a);
            }

            #[test]
            fn states_are_bounded(rows in proptest::collection::vec((0.0f64..=1.0, -3.0f64..3.0), 1..200)) {
                let (abar, bu): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
                let bound = 3.0 * abar.len() as f64;
                for s in sequential_scan(&abar, &bu).unwrap() {
                    prop_assert!(s.abs() <= bound);
                }
            }

            #[test]
            fn wrapping_integer_scan_is_exact(rows in proptest::collection::vec((any::<u64>(), any::<u64>()), 1..300)) {
                let f = |x: (u64, u64), y: (u64, u64)| (x.0.wrapping_mul(y.0), y.0.wrapping_mul(x.1).wrapping_add(y.1));
                let par = kogge_stone_by(&rows, f);
                let mut acc = rows[0];
                prop_assert_eq!(par[0], acc);
                for (i, &r) in rows.iter().enumerate().skip(1) {
                    acc = f(acc, r);
                    prop_assert_eq!(par[i], acc);
                }
            }
        }
    }
}
