//! Finite scalar quantization.
//!
//! Each dimension `i` of a code vector is squashed into the open interval
//! `(-(L_i - 1) / 2, (L_i - 1) / 2)` with `tanh`, rounded onto one of `L_i`
//! evenly spaced levels, and normalized into `[-1, 1]`. The vocabulary is
//! implicit: a code is the mixed-radix packing of the per-dimension digits,
//! least significant dimension first.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{bail_shape, bail_validation, Error, Result};

/// Per-dimension level counts of the quantizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FsqLevels(Vec<u32>);

impl Default for FsqLevels {
    fn default() -> Self {
        FsqLevels(vec![8, 8, 8, 5, 5, 5])
    }
}

/// Output of [`FsqLevels::quantize`] for a single vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub values: Vec<f64>,
    pub digits: Vec<u32>,
}

/// Round half up, `floor(x + 0.5)`.
fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

impl FsqLevels {
    pub fn new(levels: Vec<u32>) -> Result<Self> {
        if levels.is_empty() {
            bail_validation!("fsq levels must not be empty");
        }
        if let Some(l) = levels.iter().find(|&&l| l < 2) {
            bail_validation!("fsq level {l} < 2");
        }
        let vocab = levels.iter().try_fold(1u64, |acc, &l| acc.checked_mul(l as u64));
        match vocab {
            Some(v) if v <= u32::MAX as u64 => Ok(FsqLevels(levels)),
            _ => bail_validation!("fsq vocabulary of {levels:?} overflows u32"),
        }
    }

    pub fn levels(&self) -> &[u32] {
        &self.0
    }

    /// Code vector dimensionality.
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.0.iter().map(|&l| l as usize).product()
    }

    fn half_width(level: u32) -> f64 {
        (level as f64 - 1.0) / 2.0
    }

    fn offset(level: u32) -> f64 {
        if level % 2 == 0 {
            0.5
        } else {
            0.0
        }
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            bail_shape!("code vector has {d} dims, levels have {}", self.dim());
        }
        Ok(())
    }

    /// Squash each dimension into `(-(L-1)/2, (L-1)/2)`.
    pub fn bound(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z.len())?;
        Ok(z.iter()
            .zip(&self.0)
            .map(|(&zi, &l)| Self::half_width(l) * zi.tanh())
            .collect())
    }

    pub fn quantize(&self, z: &[f64]) -> Result<Quantized> {
        let bounded = self.bound(z)?;
        let mut values = Vec::with_capacity(z.len());
        let mut digits = Vec::with_capacity(z.len());
        for (&b, &l) in bounded.iter().zip(&self.0) {
            let half = Self::half_width(l);
            let off = Self::offset(l);
            let q = round_half_up(b + off) - off;
            digits.push((q + half) as u32);
            values.push(q / half);
        }
        Ok(Quantized { values, digits })
    }

    /// Mixed-radix packing, `code = sum_i digit_i * prod_{j<i} L_j`.
    pub fn digits_to_index(&self, digits: &[u32]) -> Result<u32> {
        self.check_dim(digits.len())?;
        let mut code = 0u64;
        let mut place = 1u64;
        for (&d, &l) in digits.iter().zip(&self.0) {
            if d >= l {
                return Err(Error::OutOfRange {
                    what: "fsq digit",
                    value: d as i64,
                    valid: format!("[0, {l})"),
                });
            }
            code += d as u64 * place;
            place *= l as u64;
        }
        Ok(code as u32)
    }

    pub fn index_to_digits(&self, code: u32) -> Result<Vec<u32>> {
        self.check_code(code)?;
        let mut rest = code;
        Ok(self
            .0
            .iter()
            .map(|&l| {
                let d = rest % l;
                rest /= l;
                d
            })
            .collect())
    }

    pub fn check_code(&self, code: u32) -> Result<()> {
        if code as usize >= self.vocab_size() {
            return Err(Error::OutOfRange {
                what: "token code",
                value: code as i64,
                valid: format!("[0, {})", self.vocab_size()),
            });
        }
        Ok(())
    }

    pub fn digits_to_values(&self, digits: &[u32]) -> Vec<f64> {
        digits
            .iter()
            .zip(&self.0)
            .map(|(&d, &l)| {
                let half = Self::half_width(l);
                (d as f64 - half) / half
            })
            .collect()
    }

    /// Inverse of the digit-to-value map. Values must lie on the grid.
    pub fn values_to_digits(&self, values: &[f64]) -> Result<Vec<u32>> {
        self.check_dim(values.len())?;
        values
            .iter()
            .zip(&self.0)
            .map(|(&v, &l)| {
                let half = Self::half_width(l);
                let d = v * half + half;
                let r = d.round();
                if (d - r).abs() > 1e-6 || r < 0.0 || r >= l as f64 {
                    bail_validation!("value {v} is not on the {l}-level grid");
                }
                Ok(r as u32)
            })
            .collect()
    }

    pub fn index_to_values(&self, code: u32) -> Result<Vec<f64>> {
        Ok(self.digits_to_values(&self.index_to_digits(code)?))
    }

    /// Quantize every row of `z` (shape `[..., d]`) into token codes.
    pub fn encode_tensor(&self, z: &Tensor) -> Result<Vec<u32>> {
        let d = z.dims().last().copied().unwrap_or(0);
        self.check_dim(d)?;
        let flat = z.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        flat.chunks(d)
            .map(|row| {
                if row.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        stage: "fsq input",
                        index: 0,
                    });
                }
                self.digits_to_index(&self.quantize(row)?.digits)
            })
            .collect()
    }

    /// Grid values for a list of codes, as a `[codes.len(), d]` tensor.
    pub fn codes_to_tensor(&self, codes: &[u32], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
        let mut flat = Vec::with_capacity(codes.len() * self.dim());
        for &c in codes {
            flat.extend(self.index_to_values(c)?);
        }
        Ok(Tensor::from_vec(flat, (codes.len(), self.dim()), device)?.to_dtype(dtype)?)
    }

    /// Differentiable quantization of `z` (shape `[..., d]`).
    ///
    /// The forward value is exactly the grid value; the backward pass treats
    /// rounding as identity, so the gradient equals that of the normalized
    /// bound `tanh(z)`.
    pub fn quantize_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let grid = self.grid_values_like(z)?;
        let smooth = z.tanh()?;
        Ok(grid.add(&smooth.sub(&smooth.detach())?)?)
    }

    /// `grid - tanh(z)` evaluated at `z`, detached. Adding it to `tanh(z')`
    /// gives a smooth surrogate whose derivative is the straight-through
    /// gradient; used to check gradients by finite differences.
    pub fn rounding_residual(&self, z: &Tensor) -> Result<Tensor> {
        let grid = self.grid_values_like(z)?;
        Ok(grid.sub(&z.tanh()?)?.detach())
    }

    fn grid_values_like(&self, z: &Tensor) -> Result<Tensor> {
        let codes = self.encode_tensor(z)?;
        let grid = self.codes_to_tensor(&codes, z.dtype(), z.device())?;
        Ok(grid.reshape(z.shape())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lv(l: &[u32]) -> FsqLevels {
        FsqLevels::new(l.to_vec()).unwrap()
    }

    #[test]
    fn default_vocab_is_64000() {
        assert_eq!(FsqLevels::default().vocab_size(), 64000);
    }

    #[test]
    fn bound_examples() {
        assert_eq!(lv(&[5]).bound(&[0.0]).unwrap(), vec![0.0]);
        assert_eq!(lv(&[8]).bound(&[0.0]).unwrap(), vec![0.0]);
        let b = lv(&[5]).bound(&[10.0]).unwrap()[0];
        assert!((b - 2.0 * 10f64.tanh()).abs() < 1e-15);
        assert!(b < 2.0 && b > 1.9999999);
        assert!(matches!(lv(&[5, 5]).bound(&[0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn quantize_examples() {
        let q = lv(&[5, 5, 5]).quantize(&[0.0; 3]).unwrap();
        assert_eq!(q.values, vec![0.0; 3]);
        assert_eq!(q.digits, vec![2, 2, 2]);

        let q = lv(&[8]).quantize(&[0.0]).unwrap();
        assert_eq!(q.digits, vec![4]);
        assert!((q.values[0] - 0.5 / 3.5).abs() < 1e-12);

        let q = lv(&[5, 5]).quantize(&[10.0, -10.0]).unwrap();
        assert_eq!(q.digits, vec![4, 0]);
        assert_eq!(q.values, vec![1.0, -1.0]);
    }

    #[test]
    fn extreme_inputs_stay_in_range() {
        let l = FsqLevels::default();
        for z in [1e9, -1e9, 50.0, -50.0] {
            let q = l.quantize(&[z; 6]).unwrap();
            for (d, lvl) in q.digits.iter().zip(l.levels()) {
                assert!(d < lvl);
            }
        }
    }

    #[test]
    fn index_examples() {
        let l = FsqLevels::default();
        assert_eq!(l.digits_to_index(&[0; 6]).unwrap(), 0);
        assert_eq!(l.digits_to_index(&[7, 7, 7, 4, 4, 4]).unwrap(), 63999);
        assert_eq!(l.digits_to_index(&[0, 0, 0, 1, 0, 0]).unwrap(), 512);
        assert!(l.digits_to_index(&[8, 0, 0, 0, 0, 0]).is_err());
        assert!(l.index_to_digits(64000).is_err());
        assert_eq!(lv(&[5]).index_to_values(0).unwrap(), vec![-1.0]);
        assert_eq!(lv(&[5]).index_to_values(2).unwrap(), vec![0.0]);
    }

    #[test]
    fn exhaustive_value_roundtrip() {
        let l = FsqLevels::default();
        for code in 0..l.vocab_size() as u32 {
            let v = l.index_to_values(code).unwrap();
            let d = l.values_to_digits(&v).unwrap();
            assert_eq!(l.digits_to_index(&d).unwrap(), code);
        }
    }

    #[test]
    fn every_level_is_reachable() {
        // Sweep z over a fine grid; each level count must produce exactly L digits.
        for l in 2..=9u32 {
            let q = lv(&[l]);
            let mut seen = std::collections::BTreeSet::new();
            for i in -4000..=4000 {
                seen.insert(q.quantize(&[i as f64 / 400.0]).unwrap().digits[0]);
            }
            assert_eq!(seen.len(), l as usize, "levels {l}");
        }
    }

    #[test]
    fn tensor_forward_is_exact_grid() {
        let l = FsqLevels::default();
        let z = Tensor::new(&[[0.3f32, -1.2, 2.0, 0.0, -0.4, 5.0]], &candle_core::Device::Cpu).unwrap();
        let v = l.quantize_tensor(&z).unwrap().to_vec2::<f32>().unwrap();
        let want = l.quantize(&[0.3f32 as f64, -1.2f32 as f64, 2.0, 0.0, -0.4f32 as f64, 5.0]).unwrap();
        for (a, b) in v[0].iter().zip(&want.values) {
            assert_eq!(*a, *b as f32);
        }
    }

    proptest! {
        #[test]
        fn grid_membership_and_range(z in prop::collection::vec(-8.0f64..8.0, 6)) {
            let l = FsqLevels::default();
            let q = l.quantize(&z).unwrap();
            for ((v, d), lvl) in q.values.iter().zip(&q.digits).zip(l.levels()) {
                prop_assert!(*d < *lvl);
                prop_assert!((-1.0..=1.0).contains(v));
            }
            prop_assert_eq!(l.values_to_digits(&q.values).unwrap(), q.digits);
        }

        #[test]
        fn digits_monotone(a in -6.0f64..6.0, b in -6.0f64..6.0, lvl in 2u32..10) {
            let l = lv(&[lvl]);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(l.quantize(&[lo]).unwrap().digits[0] <= l.quantize(&[hi]).unwrap().digits[0]);
        }

        #[test]
        fn index_bijection(code in 0u32..64000) {
            let l = FsqLevels::default();
            prop_assert_eq!(l.digits_to_index(&l.index_to_digits(code).unwrap()).unwrap(), code);
        }
    }
}
