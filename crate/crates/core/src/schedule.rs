//! Nested dropout: how many leading registers survive a training step, and
//! replacing the rest with a mask token.

use std::fmt;
use std::str::FromStr;

use candle_core::{Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::RegisterSequence;
use crate::error::{bail_shape, bail_validation, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    /// `k ~ U{1..K}`
    Uniform,
    /// `k` uniform over powers of two ≤ K (plus K itself).
    Pow2,
    /// `k ~ U{1..K}` rounded up to the next power of two (capped at K).
    UnifPow2,
    Fixed(usize),
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Uniform => write!(f, "uniform"),
            ScheduleKind::Pow2 => write!(f, "pow2"),
            ScheduleKind::UnifPow2 => write!(f, "unifpow2"),
            ScheduleKind::Fixed(_) => write!(f, "fixed"),
        }
    }
}

impl ScheduleKind {
    /// Parse a config name; `fixed_k` is used for `"fixed"`.
    pub fn parse(name: &str, fixed_k: usize) -> Result<Self> {
        match name {
            "uniform" => Ok(ScheduleKind::Uniform),
            "pow2" => Ok(ScheduleKind::Pow2),
            "unifpow2" => Ok(ScheduleKind::UnifPow2),
            "fixed" => Ok(ScheduleKind::Fixed(fixed_k)),
            other => Err(Error::Config(format!(
                "unknown schedule {other:?}; expected one of uniform, pow2, unifpow2, fixed"
            ))),
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ScheduleKind::parse(s, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutSchedule {
    pub kind: ScheduleKind,
    pub k_max: usize,
}

fn next_pow2_capped(k: usize, cap: usize) -> usize {
    k.next_power_of_two().min(cap)
}

impl DropoutSchedule {
    pub fn new(kind: ScheduleKind, k_max: usize) -> Result<Self> {
        if k_max == 0 {
            bail_validation!("k_max must be ≥ 1");
        }
        if let ScheduleKind::Fixed(k) = kind {
            if k == 0 || k > k_max {
                bail_validation!("fixed keep count {k} outside [1, {k_max}]");
            }
        }
        Ok(DropoutSchedule { kind, k_max })
    }

    fn pow2_support(&self) -> Vec<usize> {
        let mut s: Vec<usize> = (0..usize::BITS)
            .map(|i| 1usize << i)
            .take_while(|&p| p <= self.k_max)
            .collect();
        if *s.last().unwrap() != self.k_max {
            s.push(self.k_max);
        }
        s
    }

    /// Values with nonzero probability, ascending.
    pub fn support(&self) -> Vec<usize> {
        match self.kind {
            ScheduleKind::Uniform => (1..=self.k_max).collect(),
            ScheduleKind::Pow2 | ScheduleKind::UnifPow2 => self.pow2_support(),
            ScheduleKind::Fixed(k) => vec![k],
        }
    }

    /// Probability of drawing `k`.
    pub fn pmf(&self, k: usize) -> f64 {
        if k == 0 || k > self.k_max {
            return 0.0;
        }
        match self.kind {
            ScheduleKind::Uniform => 1.0 / self.k_max as f64,
            ScheduleKind::Pow2 => {
                let s = self.pow2_support();
                if s.contains(&k) {
                    1.0 / s.len() as f64
                } else {
                    0.0
                }
            }
            ScheduleKind::UnifPow2 => {
                let pre = (1..=self.k_max).filter(|&u| next_pow2_capped(u, self.k_max) == k).count();
                pre as f64 / self.k_max as f64
            }
            ScheduleKind::Fixed(f) => (f == k) as u8 as f64,
        }
    }

    pub fn sample_keep<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self.kind {
            ScheduleKind::Uniform => rng.random_range(1..=self.k_max),
            ScheduleKind::Pow2 => {
                let s = self.pow2_support();
                s[rng.random_range(0..s.len())]
            }
            ScheduleKind::UnifPow2 => next_pow2_capped(rng.random_range(1..=self.k_max), self.k_max),
            ScheduleKind::Fixed(k) => k,
        }
    }
}

/// Rows `k..` replaced by `mask_token`; rows `..k` untouched.
pub fn apply_mask(registers: &RegisterSequence, k: usize, mask_token: &Tensor) -> Result<RegisterSequence> {
    let x = registers.embeddings.unsqueeze(0)?;
    Ok(RegisterSequence {
        embeddings: mask_batch(&x, &[k], mask_token)?.squeeze(0)?,
    })
}

/// Batched masking of `[B, K, D]` with one keep count per sample. Uses a
/// select, so kept rows are bit-identical to the input.
pub fn mask_batch(x: &Tensor, keep: &[usize], mask_token: &Tensor) -> Result<Tensor> {
    let (b, k_max, d) = x.dims3()?;
    if keep.len() != b {
        bail_shape!("{} keep counts for a batch of {b}", keep.len());
    }
    if mask_token.elem_count() != d {
        bail_shape!("mask token has {} elements, rows have {d}", mask_token.elem_count());
    }
    for &k in keep {
        if k == 0 || k > k_max {
            return Err(Error::OutOfRange {
                what: "keep count",
                value: k as i64,
                valid: format!("[1, {k_max}]"),
            });
        }
    }
    let sel: Vec<u8> = keep
        .iter()
        .flat_map(|&k| (0..k_max).map(move |i| (i < k) as u8))
        .collect();
    let sel = Tensor::from_vec(sel, (b, k_max, 1), &Device::Cpu)?.broadcast_as((b, k_max, d))?;
    let fill = mask_token.reshape((1, 1, d))?.broadcast_as((b, k_max, d))?;
    Ok(sel.where_cond(x, &fill)?)
}
