//! Numeric containers shared by the functional model, the quantizer and the
//! cycle simulator.
//!
//! Real tensors use binary64; the quantized path is integer-only so that
//! simulated results are bit-exact on every platform. Rounding everywhere is
//! round-half-away-from-zero.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of a tensor axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dim {
    /// Sequence (token) axis.
    L,
    /// Hidden / channel axis.
    H,
    /// SSM state axis.
    M,
    Other(u8),
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::L => write!(f, "L"),
            Dim::H => write!(f, "h"),
            Dim::M => write!(f, "m"),
            Dim::Other(i) => write!(f, "other{i}"),
        }
    }
}

/// Dense row-major real tensor with named axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealTensor {
    dims: Vec<(Dim, usize)>,
    data: Vec<f64>,
}

fn volume(dims: &[(Dim, usize)]) -> usize {
    dims.iter().map(|&(_, e)| e).product()
}

fn check_unique(dims: &[(Dim, usize)]) -> Result<()> {
    for (i, (a, _)) in dims.iter().enumerate() {
        if dims[..i].iter().any(|(b, _)| b == a) {
            return Err(Error::Shape(format!("duplicate dimension {a}")));
        }
    }
    Ok(())
}

impl RealTensor {
    pub fn new(dims: Vec<(Dim, usize)>, data: Vec<f64>) -> Result<Self> {
        check_unique(&dims)?;
        if volume(&dims) != data.len() {
            return Err(Error::Shape(format!(
                "extents {:?} imply {} elements, got {}",
                dims,
                volume(&dims),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<(Dim, usize)>) -> Self {
        let n = volume(&dims);
        Self { dims, data: vec![0.0; n] }
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(dims: Vec<(Dim, usize)>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let n = volume(&dims);
        let extents: Vec<usize> = dims.iter().map(|&(_, e)| e).collect();
        let mut idx = vec![0usize; extents.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..extents.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < extents[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> &[(Dim, usize)] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn axis(&self, dim: Dim) -> Option<usize> {
        self.dims.iter().position(|&(d, _)| d == dim)
    }

    pub fn extent(&self, dim: Dim) -> Option<usize> {
        self.axis(dim).map(|a| self.dims[a].1)
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.dims.len()];
        for ax in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[ax] = strides[ax + 1] * self.dims[ax + 1].1;
        }
        strides
    }

    /// Flat offset of a multi-index. Panics on rank mismatch or out-of-range indices.
    pub fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.dims.len(), "index rank mismatch");
        let mut off = 0;
        for (ax, (&i, &(_, e))) in idx.iter().zip(&self.dims).enumerate() {
            assert!(i < e, "index {i} out of range on axis {ax}");
            off = off * e + i;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    /// Element of a 2-D tensor; the hot path for the functional model.
    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dims[1].1 + j]
    }

    /// Removes `dim` by fixing it at `index`.
    pub fn slice(&self, dim: Dim, index: usize) -> Result<RealTensor> {
        let ax = self.axis(dim).ok_or_else(|| Error::UnknownDim(dim.to_string()))?;
        let extent = self.dims[ax].1;
        if index >= extent {
            return Err(Error::IndexOutOfRange { index, extent });
        }
        let strides = self.strides();
        let outer: usize = self.dims[..ax].iter().map(|&(_, e)| e).product();
        let inner = strides[ax];
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * extent * inner + index * inner;
            data.extend_from_slice(&self.data[base..base + inner]);
        }
        let mut dims = self.dims.clone();
        dims.remove(ax);
        Ok(RealTensor { dims, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<RealTensor> {
        RealTensor::new(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Round to nearest integer, ties away from zero.
#[inline]
pub fn fx_round_to_int(x: f64) -> i64 {
    // f64::round already breaks ties away from zero.
    x.round() as i64
}

/// `round(v / 2^shift)` with ties away from zero, in exact integer arithmetic.
#[inline]
pub fn shift_round(v: i64, shift: u32) -> i64 {
    if shift == 0 {
        return v;
    }
    if shift >= 127 {
        return 0;
    }
    let mag = v.unsigned_abs() as u128;
    let r = ((mag + (1u128 << (shift - 1))) >> shift) as i64;
    if v < 0 {
        -r
    } else {
        r
    }
}

/// Largest magnitude of a symmetric signed `bits`-bit integer.
#[inline]
pub fn sym_max(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

#[inline]
pub fn saturate(v: i64, bits: u32) -> i64 {
    let m = sym_max(bits);
    v.clamp(-m, m)
}

/// Quantization scale metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Scale {
    Scalar(f64),
    /// One scale per entry of the `h` axis.
    PerChannel(Vec<f64>),
}

impl Scale {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            Scale::Scalar(s) => *s > 0.0 && s.is_finite(),
            Scale::PerChannel(v) => !v.is_empty() && v.iter().all(|s| *s > 0.0 && s.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid("scales must be finite and strictly positive".into()))
        }
    }
}

/// Integer tensor with bit width and scale metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    dims: Vec<(Dim, usize)>,
    data: Vec<i32>,
    bit_width: u32,
    scale: Scale,
}

impl QuantTensor {
    pub fn new(dims: Vec<(Dim, usize)>, data: Vec<i32>, bit_width: u32, scale: Scale) -> Result<Self> {
        check_unique(&dims)?;
        if !(2..=31).contains(&bit_width) {
            return Err(Error::Invalid(format!("bit width {bit_width} outside [2, 31]")));
        }
        if volume(&dims) != data.len() {
            return Err(Error::Shape(format!(
                "extents {:?} imply {} elements, got {}",
                dims,
                volume(&dims),
                data.len()
            )));
        }
        scale.validate()?;
        if let Scale::PerChannel(v) = &scale {
            let h = dims
                .iter()
                .find(|(d, _)| *d == Dim::H)
                .map(|&(_, e)| e)
                .ok_or_else(|| Error::Shape("per-channel scale needs an h dimension".into()))?;
            if v.len() != h {
                return Err(Error::Shape(format!("{} channel scales for h extent {h}", v.len())));
            }
        }
        let m = sym_max(bit_width);
        if data.iter().any(|&q| (q as i64).abs() > m) {
            return Err(Error::Invalid(format!("value outside symmetric {bit_width}-bit range")));
        }
        Ok(Self { dims, data, bit_width, scale })
    }

    pub fn dims(&self) -> &[(Dim, usize)] {
        &self.dims
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn bit_width(&self) -> u32 {
        self.bit_width
    }

    pub fn scale(&self) -> &Scale {
        &self.scale
    }

    /// Scale applying to the element at flat offset `i`.
    pub fn scale_at(&self, i: usize) -> f64 {
        match &self.scale {
            Scale::Scalar(s) => *s,
            Scale::PerChannel(v) => {
                let ax = self.dims.iter().position(|(d, _)| *d == Dim::H).expect("validated");
                let inner: usize = self.dims[ax + 1..].iter().map(|&(_, e)| e).product();
                v[(i / inner) % self.dims[ax].1]
            }
        }
    }
}

/// A fixed-point number `raw * 2^-frac_bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedPoint {
    pub raw: i64,
    pub frac_bits: u32,
}

impl FixedPoint {
    pub const fn new(raw: i64, frac_bits: u32) -> Self {
        Self { raw, frac_bits }
    }

    pub const fn from_int(v: i64) -> Self {
        Self { raw: v, frac_bits: 0 }
    }

    pub fn value(self) -> f64 {
        self.raw as f64 * (-(self.frac_bits as f64)).exp2()
    }

    pub fn checked_add(self, other: FixedPoint) -> Result<FixedPoint> {
        if self.frac_bits != other.frac_bits {
            return Err(Error::Misaligned(self.frac_bits, other.frac_bits));
        }
        Ok(FixedPoint::new(self.raw + other.raw, self.frac_bits))
    }

    /// Integer times fixed-point keeps the fractional grid.
    pub fn mul_int(self, k: i64) -> FixedPoint {
        FixedPoint::new(self.raw * k, self.frac_bits)
    }

    /// `self * 2^-shift`, rounded once onto a grid with `out_frac` fractional bits.
    pub fn scale_pow2(self, shift: u32, out_frac: u32) -> FixedPoint {
        let e = out_frac as i64 - self.frac_bits as i64 - shift as i64;
        let raw = if e >= 0 {
            self.raw << e
        } else {
            shift_round(self.raw, (-e) as u32)
        };
        FixedPoint::new(raw, out_frac)
    }

    /// Moves to a different fractional grid, rounding if bits are dropped.
    pub fn realign(self, frac_bits: u32) -> FixedPoint {
        self.scale_pow2(0, frac_bits)
    }

    /// Nearest integer, ties away from zero.
    pub fn to_int(self) -> i64 {
        shift_round(self.raw, self.frac_bits)
    }

    /// Clamp the raw field to a symmetric signed `bits`-bit range.
    pub fn saturate(self, bits: u32) -> FixedPoint {
        FixedPoint::new(saturate(self.raw, bits), self.frac_bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[(Dim, usize)]) -> RealTensor {
        let n = volume(dims);
        RealTensor::new(dims.to_vec(), (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn slice_first_row() {
        let x = t(&[(Dim::Other(0), 2), (Dim::Other(1), 3)]);
        let row = x.slice(Dim::Other(0), 0).unwrap();
        assert_eq!(row.data(), &[0.0, 1.0, 2.0]);
        assert_eq!(row.dims(), &[(Dim::Other(1), 3)]);
    }

    #[test]
    fn slice_to_scalar() {
        let x = RealTensor::new(vec![(Dim::Other(0), 1)], vec![7.5]).unwrap();
        let s = x.slice(Dim::Other(0), 0).unwrap();
        assert_eq!(s.rank(), 0);
        assert_eq!(s.data(), &[7.5]);
    }

    #[test]
    fn slice_middle_axis_matches_index_arithmetic() {
        let x = t(&[(Dim::L, 4), (Dim::H, 2), (Dim::M, 3)]);
        let s = x.slice(Dim::H, 1).unwrap();
        assert_eq!(s.dims(), &[(Dim::L, 4), (Dim::M, 3)]);
        for l in 0..4 {
            for m in 0..3 {
                let expect = (l * 2 * 3 + 3 + m) as f64;
                assert_eq!(s.get(&[l, m]), expect);
            }
        }
    }

    #[test]
    fn slice_errors() {
        let x = t(&[(Dim::L, 2)]);
        assert!(matches!(x.slice(Dim::H, 0), Err(Error::UnknownDim(_))));
        assert!(matches!(x.slice(Dim::L, 2), Err(Error::IndexOutOfRange { index: 2, extent: 2 })));
    }

    #[test]
    fn construction_rejects_bad_data() {
        assert!(RealTensor::new(vec![(Dim::L, 2)], vec![1.0]).is_err());
        assert_eq!(RealTensor::new(vec![(Dim::L, 1)], vec![f64::NAN]), Err(Error::NonFinite));
        assert!(RealTensor::new(vec![(Dim::L, 1), (Dim::L, 1)], vec![1.0]).is_err());
    }

    #[test]
    fn rounding_ties_away_from_zero() {
        assert_eq!(fx_round_to_int(0.0), 0);
        assert_eq!(fx_round_to_int(2.5), 3);
        assert_eq!(fx_round_to_int(-2.5), -3);
        assert_eq!(fx_round_to_int(2.49), 2);
        assert_eq!(shift_round(6, 2), 2); // 1.5 -> 2
        assert_eq!(shift_round(-6, 2), -2);
        assert_eq!(shift_round(5, 2), 1);
        assert_eq!(shift_round(-5, 2), -1);
    }

    #[test]
    fn fixed_point_alignment_is_explicit() {
        let a = FixedPoint::new(5, 2);
        let b = FixedPoint::new(3, 1);
        assert_eq!(a.checked_add(b), Err(Error::Misaligned(2, 1)));
        assert_eq!(a.checked_add(b.realign(2)).unwrap(), FixedPoint::new(11, 2));
        assert_eq!(FixedPoint::new(10, 2).to_int(), 3); // 2.5 -> 3
        assert_eq!(FixedPoint::new(-10, 2).to_int(), -3);
    }

    #[test]
    fn quant_tensor_validation() {
        let dims = vec![(Dim::L, 1), (Dim::H, 2)];
        assert!(QuantTensor::new(dims.clone(), vec![127, -127], 8, Scale::Scalar(0.1)).is_ok());
        assert!(QuantTensor::new(dims.clone(), vec![-128, 0], 8, Scale::Scalar(0.1)).is_err());
        assert!(QuantTensor::new(dims.clone(), vec![0, 0], 8, Scale::Scalar(0.0)).is_err());
        assert!(QuantTensor::new(dims.clone(), vec![0, 0], 8, Scale::PerChannel(vec![1.0])).is_err());
        let q = QuantTensor::new(dims, vec![1, 1], 8, Scale::PerChannel(vec![0.5, 2.0])).unwrap();
        assert_eq!(q.scale_at(0), 0.5);
        assert_eq!(q.scale_at(1), 2.0);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn integers_round_trip(k in -(1i64 << 52)..(1i64 << 52)) {
                prop_assert_eq!(fx_round_to_int(k as f64), k);
            }

            #[test]
            fn fixed_point_value_and_add(a in -1_000_000i64..1_000_000, b in -1_000_000i64..1_000_000, f in 0u32..20) {
                let x = FixedPoint::new(a, f);
                let y = FixedPoint::new(b, f);
                prop_assert_eq!(x.value(), a as f64 / (1u64 << f) as f64);
                prop_assert_eq!(x.checked_add(y).unwrap().raw, a + b);
            }

            #[test]
            fn shift_round_matches_float_rounding(v in -(1i64 << 40)..(1i64 << 40), s in 0u32..30) {
                let expect = fx_round_to_int(v as f64 / (1u64 << s) as f64);
                prop_assert_eq!(shift_round(v, s), expect);
            }
        }
    }
}
