//! AdamW with decoupled weight decay, global-norm clipping, the
//! warmup/cosine learning-rate schedule and weight EMA.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{bail_validation, Error, Result};
use crate::nn::{check_same_layout, layout_of, ParamStore};

pub type TensorMap = BTreeMap<String, Tensor>;

/// Optimization settings shared by both training stages. Budgets are in
/// tokens: a 2×2 latent patch for the tokenizer, a discrete code for the
/// AR model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSettings {
    pub peak_lr: f64,
    pub warmup_lr: f64,
    pub final_lr_ratio: f64,
    pub warmup_tokens: u64,
    pub total_tokens: u64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// "timescale" derives the decay from the run length, "explicit" uses `weight_decay`.
    pub weight_decay_mode: String,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    /// Learning-rate multiplier for the tokenizer encoder (`enc.*`). A slow
    /// encoder lets the decoder keep up with code changes; with equal rates
    /// small runs drive every register into one saturated code.
    pub encoder_lr_scale: f64,
}

impl Default for OptimSettings {
    fn default() -> Self {
        OptimSettings {
            peak_lr: 5.62e-4,
            warmup_lr: 1e-6,
            final_lr_ratio: 0.01,
            warmup_tokens: 4096,
            total_tokens: 2000 * 16 * 64,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay_mode: "timescale".into(),
            weight_decay: 0.0,
            clip_norm: 1.0,
            ema_decay: 0.998,
            encoder_lr_scale: 1.0,
        }
    }
}

impl OptimSettings {
    /// Stage 2 defaults: betas (0.9, 0.95), explicit decay 0.05.
    pub fn ar_defaults() -> Self {
        OptimSettings {
            peak_lr: 1e-3,
            beta2: 0.95,
            weight_decay_mode: "explicit".into(),
            weight_decay: 0.05,
            warmup_tokens: 2048,
            total_tokens: 400 * 8 * 64,
            batch_size: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_tokens > self.total_tokens {
            bail_validation!(
                "warmup_tokens ({}) must not exceed total_tokens ({})",
                self.warmup_tokens,
                self.total_tokens
            );
        }
        if self.clip_norm <= 0.0 {
            bail_validation!("clip_norm must be > 0, got {}", self.clip_norm);
        }
        if !(self.encoder_lr_scale > 0.0 && self.encoder_lr_scale.is_finite()) {
            bail_validation!("encoder_lr_scale must be positive, got {}", self.encoder_lr_scale);
        }
        if self.peak_lr <= 0.0 || self.batch_size == 0 {
            bail_validation!("peak_lr and batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            bail_validation!("ema_decay must lie in [0, 1], got {}", self.ema_decay);
        }
        match self.weight_decay_mode.as_str() {
            "timescale" | "explicit" => Ok(()),
            other => bail_validation!("weight_decay_mode must be \"timescale\" or \"explicit\", got {other:?}"),
        }
    }

    /// Step counts implied by the token budgets.
    pub fn schedule(&self, tokens_per_step: u64) -> LrSchedule {
        let per = tokens_per_step.max(1);
        let total = self.total_tokens.div_ceil(per).max(1);
        let warmup = self.warmup_tokens.div_ceil(per).min(total);
        LrSchedule {
            peak: self.peak_lr,
            floor: self.warmup_lr,
            final_lr: self.peak_lr * self.final_lr_ratio,
            warmup_steps: warmup,
            total_steps: total,
        }
    }

    pub fn resolved_weight_decay(&self, total_steps: u64) -> Result<f64> {
        if self.weight_decay_mode == "timescale" {
            weight_decay_from_timescale(total_steps, self.peak_lr)
        } else {
            Ok(self.weight_decay)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub floor: f64,
    pub final_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// Linear ramp from the warmup floor to the peak, then cosine decay to
    /// the final rate at `total_steps`; constant afterwards.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.floor + (self.peak - self.floor) * step as f64 / self.warmup_steps as f64;
        }
        let decay_steps = self.total_steps.saturating_sub(self.warmup_steps);
        if decay_steps == 0 {
            return if step >= self.total_steps { self.final_lr } else { self.peak };
        }
        let progress = ((step - self.warmup_steps) as f64 / decay_steps as f64).min(1.0);
        self.final_lr + (self.peak - self.final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// `λ = 1 / (n_iter · η)`: AdamW decay equivalent to averaging over the whole run.
pub fn weight_decay_from_timescale(n_iter: u64, lr: f64) -> Result<f64> {
    if n_iter == 0 || lr <= 0.0 {
        bail_validation!("weight decay timescale needs n_iter > 0 and lr > 0 (got {n_iter}, {lr})");
    }
    Ok(1.0 / (n_iter as f64 * lr))
}

/// `ema ← decay·ema + (1 − decay)·params`.
pub fn ema_update(ema: &TensorMap, params: &TensorMap, decay: f64) -> Result<TensorMap> {
    if !(0.0..=1.0).contains(&decay) {
        bail_validation!("ema decay must lie in [0, 1], got {decay}");
    }
    check_same_layout(&layout_of(ema), &layout_of(params))?;
    ema.iter()
        .map(|(k, e)| {
            let p = &params[k];
            let out = if decay == 1.0 {
                e.clone()
            } else if decay == 0.0 {
                p.copy()?
            } else {
                ((e * decay)? + (p * (1.0 - decay))?)?
            };
            Ok((k.clone(), out.detach()))
        })
        .collect()
}

/// Gradients for every variable of the store; missing ones are zero.
/// Detached, since leaf gradients otherwise keep the whole forward graph
/// alive through their op history.
pub fn collect_grads(store: &ParamStore, grads: &GradStore) -> Result<TensorMap> {
    store
        .vars()
        .map(|(k, v)| {
            let g = match grads.get(v.as_tensor()) {
                Some(g) => g.detach(),
                None => v.as_tensor().zeros_like()?,
            };
            Ok((k.clone(), g))
        })
        .collect()
}

/// Global L2 norm, accumulated in f64 in name order.
pub fn global_norm(grads: &TensorMap) -> Result<f64> {
    let mut acc = 0.0f64;
    for g in grads.values() {
        acc += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    }
    Ok(acc.sqrt())
}

/// Scale gradients so their global norm is at most `max_norm`. Returns
/// the norms before and after clipping.
pub fn clip_grads(grads: &mut TensorMap, max_norm: f64) -> Result<(f64, f64)> {
    let norm = global_norm(grads)?;
    if !norm.is_finite() {
        return Err(Error::NonFinite { stage: "gradient norm", index: 0 });
    }
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-12);
        for g in grads.values_mut() {
            *g = (&*g * scale)?;
        }
        Ok((norm, global_norm(grads)?))
    } else {
        Ok((norm, norm))
    }
}

/// AdamW state.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: TensorMap,
    pub v: TensorMap,
    /// Per-prefix learning-rate multipliers; the first matching prefix wins.
    pub lr_scales: Vec<(String, f64)>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Result<Self> {
        let zeros: TensorMap = store
            .vars()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().zeros_like()?)))
            .collect::<Result<_>>()?;
        Ok(AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
            lr_scales: Vec::new(),
        })
    }

    pub fn with_lr_scale(mut self, prefix: &str, scale: f64) -> Self {
        self.lr_scales.push((prefix.to_string(), scale));
        self
    }

    fn lr_for(&self, name: &str, lr: f64) -> f64 {
        self.lr_scales
            .iter()
            .find(|(p, _)| name.starts_with(p.as_str()))
            .map_or(lr, |(_, s)| lr * s)
    }

    /// One update. Decay applies to matrices only (rank ≥ 2), not to norm
    /// gains or biases.
    pub fn apply(&mut self, store: &ParamStore, grads: &TensorMap, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, var) in store.vars() {
            let lr = self.lr_for(k, lr);
            let g = &grads[k];
            let m = ((&self.m[k] * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[k] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            let p = var.as_tensor().detach();
            let p = if var.rank() >= 2 && self.weight_decay != 0.0 {
                (p * (1.0 - lr * self.weight_decay))?
            } else {
                p
            };
            var.set(&(p - (update * lr)?)?)?;
            self.m.insert(k.clone(), m.detach());
            self.v.insert(k.clone(), v.detach());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn sched() -> LrSchedule {
        OptimSettings {
            peak_lr: 1e-3,
            warmup_tokens: 100,
            total_tokens: 1000,
            ..Default::default()
        }
        .schedule(10)
    }

    #[test]
    fn lr_endpoints() {
        let s = sched();
        assert_eq!(s.warmup_steps, 10);
        assert_eq!(s.total_steps, 100);
        assert_eq!(s.lr_at(0), 1e-6);
        assert_eq!(s.lr_at(10), 1e-3);
        assert!((s.lr_at(100) - 1e-5).abs() < 1e-18);
        assert!((s.lr_at(1000) - 1e-5).abs() < 1e-18);
        // monotone decay after warmup
        for step in 10..100 {
            assert!(s.lr_at(step + 1) <= s.lr_at(step));
        }
    }

    #[test]
    fn weight_decay_examples() {
        let l = weight_decay_from_timescale(381470, 5.62e-4).unwrap();
        assert!((l - 4.6646e-3).abs() < 1e-6, "{l}");
        assert_eq!(weight_decay_from_timescale(1, 1.0).unwrap(), 1.0);
        let a = weight_decay_from_timescale(100, 0.1).unwrap();
        let b = weight_decay_from_timescale(200, 0.1).unwrap();
        assert!((a / 2.0 - b).abs() < 1e-15);
        assert!(weight_decay_from_timescale(0, 1.0).is_err());
        assert!(weight_decay_from_timescale(1, 0.0).is_err());
    }

    fn map(v: f32) -> TensorMap {
        [("w".to_string(), Tensor::new(&[v, v], &Device::Cpu).unwrap())].into()
    }

    #[test]
    fn ema_examples() {
        let get = |m: TensorMap| m["w"].to_vec1::<f32>().unwrap()[0];
        assert_eq!(get(ema_update(&map(5.0), &map(2.0), 0.0).unwrap()), 2.0);
        assert_eq!(get(ema_update(&map(5.0), &map(2.0), 1.0).unwrap()), 5.0);
        assert_eq!(get(ema_update(&map(0.0), &map(2.0), 0.5).unwrap()), 1.0);
        let bad: TensorMap = [("w".to_string(), Tensor::new(&[1f32], &Device::Cpu).unwrap())].into();
        assert!(ema_update(&map(0.0), &bad, 0.5).is_err());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g: TensorMap = [
            ("a".to_string(), Tensor::new(&[3f32, 4.0], &Device::Cpu).unwrap()),
            ("b".to_string(), Tensor::new(&[12f32], &Device::Cpu).unwrap()),
        ]
        .into();
        let (pre, post) = clip_grads(&mut g, 1.0).unwrap();
        assert!((pre - 13.0).abs() < 1e-9);
        assert!(post <= 1.0 + 1e-6);
        let (pre, post) = clip_grads(&mut g, 5.0).unwrap();
        assert_eq!(pre, post);
    }

    #[test]
    fn prefix_lr_scale() {
        use crate::nn::{InitSource, Init, ParamSource};
        use rand::SeedableRng;
        let mut store = ParamStore::new(DType::F32);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut src = InitSource { store: &mut store, rng: &mut rng };
        src.get("enc.w", &[1], Init::Zeros).unwrap();
        src.get("dec.w", &[1], Init::Zeros).unwrap();
        let grads: TensorMap = ["enc.w", "dec.w"]
            .into_iter()
            .map(|k| (k.to_string(), Tensor::new(&[1f32], &Device::Cpu).unwrap()))
            .collect();
        let mut opt = AdamW::new(&store, 0.9, 0.99, 1e-8, 0.0).unwrap().with_lr_scale("enc.", 0.1);
        opt.apply(&store, &grads, 1e-2).unwrap();
        let get = |k: &str| store.get(k).unwrap().as_tensor().to_vec1::<f32>().unwrap()[0];
        // first Adam step moves by lr·sign(g)
        assert!((get("dec.w") + 1e-2).abs() < 1e-6);
        assert!((get("enc.w") + 1e-3).abs() < 1e-7);
    }
}
