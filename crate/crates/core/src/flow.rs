//! Rectified-flow decoder.
//!
//! Convention: `t = 1` is pure noise and `t = 0` is data, with
//! `x_t = (1 − t)·x0 + t·ε`. The network predicts the constant velocity
//! `ε − x0`; sampling integrates from `t = 1` down to `t = 0` with Euler
//! steps on a uniform grid.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::LatentGrid;
use crate::encoder::{patchify_tensor, unpatchify_tensor, PatchGeometry};
use crate::error::{bail_shape, bail_validation, Error, Result};
use crate::fsq::FsqLevels;
use crate::nn::{ensure_finite, rms_norm, sinusoidal_embedding, Attention, Init, Linear, ParamSource, SwiGlu, TransformerDims};
use crate::schedule::mask_batch;

/// `(1 − t)·x0 + t·ε`.
pub fn noise_sample(x0: &LatentGrid, t: f64, eps: &LatentGrid) -> Result<LatentGrid> {
    if x0.shape() != eps.shape() {
        bail_shape!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape());
    }
    if !(0.0..=1.0).contains(&t) {
        bail_validation!("t = {t} outside [0, 1]");
    }
    let data = if t == 0.0 {
        x0.data.clone()
    } else if t == 1.0 {
        eps.data.clone()
    } else {
        let (a, b) = ((1.0 - t) as f32, t as f32);
        x0.data.iter().zip(&eps.data).map(|(x, e)| a * x + b * e).collect()
    };
    LatentGrid::new(x0.channels, x0.height, x0.width, data)
}

/// Map a uniform draw `u` to a timestep with the heavy-tailed mode schedule
/// `t = 1 − u − s·(cos²(πu/2) − 1 + u)`.
pub fn timestep_from_uniform(u: f64, s: f64) -> f64 {
    let c = (std::f64::consts::FRAC_PI_2 * u).cos();
    (1.0 - u - s * (c * c - 1.0 + u)).clamp(0.0, 1.0)
}

/// Largest `s` for which the mode schedule stays monotone.
pub fn max_mode_scale() -> f64 {
    2.0 / (std::f64::consts::PI - 2.0)
}

pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R, s: f64) -> f64 {
    timestep_from_uniform(rng.random::<f64>(), s)
}

/// Mean squared error against the target velocity `ε − x0`.
pub fn rf_loss(u_hat: &[f32], eps: &[f32], x0: &[f32]) -> Result<f64> {
    if u_hat.len() != eps.len() || eps.len() != x0.len() {
        bail_shape!("rf loss inputs have lengths {}, {}, {}", u_hat.len(), eps.len(), x0.len());
    }
    if u_hat.is_empty() {
        bail_shape!("rf loss on empty input");
    }
    let sum: f64 = u_hat
        .iter()
        .zip(eps.iter().zip(x0))
        .map(|(&u, (&e, &x))| {
            let d = u as f64 - (e as f64 - x as f64);
            d * d
        })
        .sum();
    Ok(sum / u_hat.len() as f64)
}

/// Tensor form of [`rf_loss`], differentiable in `u_hat`.
pub fn rf_loss_tensor(u_hat: &Tensor, eps: &Tensor, x0: &Tensor) -> Result<Tensor> {
    if u_hat.dims() != eps.dims() || eps.dims() != x0.dims() {
        bail_shape!("rf loss shapes {:?}, {:?}, {:?}", u_hat.dims(), eps.dims(), x0.dims());
    }
    Ok(u_hat.sub(&eps.sub(x0)?)?.sqr()?.mean_all()?)
}

/// `u_uncond + s·(u_cond − u_uncond)`; returns `u_cond` unchanged at `s = 1`.
pub fn cfg_combine(u_cond: &[f32], u_uncond: &[f32], s: f64) -> Result<Vec<f32>> {
    if u_cond.len() != u_uncond.len() {
        bail_shape!("cfg inputs have lengths {} and {}", u_cond.len(), u_uncond.len());
    }
    if s == 1.0 {
        return Ok(u_cond.to_vec());
    }
    let s = s as f32;
    Ok(u_cond
        .iter()
        .zip(u_uncond)
        .map(|(&c, &u)| u + s * (c - u))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    None,
    Cfg,
    Apg,
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GuidanceMode::None),
            "cfg" => Ok(GuidanceMode::Cfg),
            "apg" => Ok(GuidanceMode::Apg),
            other => Err(Error::Config(format!("unknown guidance mode {other:?}; expected none, cfg or apg"))),
        }
    }
}

/// Adaptive projected guidance parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApgParams {
    /// Rescaling threshold on the guidance difference norm.
    pub r: f64,
    /// Weight kept on the component parallel to the conditional prediction.
    pub eta: f64,
    /// Momentum on the guidance difference.
    pub beta: f64,
}

impl Default for ApgParams {
    fn default() -> Self {
        ApgParams { r: 2.5, eta: 0.0, beta: -0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceParams {
    pub mode: GuidanceMode,
    pub scale: f64,
    pub apg: ApgParams,
}

impl Default for GuidanceParams {
    fn default() -> Self {
        GuidanceParams {
            mode: GuidanceMode::Apg,
            scale: 7.5,
            apg: ApgParams::default(),
        }
    }
}

impl GuidanceParams {
    pub fn none() -> Self {
        GuidanceParams {
            mode: GuidanceMode::None,
            scale: 1.0,
            apg: ApgParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale < 0.0 || !self.scale.is_finite() {
            bail_validation!("guidance scale must be finite and ≥ 0, got {}", self.scale);
        }
        if self.apg.r.is_nan() || self.apg.r <= 0.0 {
            bail_validation!("apg threshold r must be > 0, got {}", self.apg.r);
        }
        // |η| ≤ 1 keeps ‖d″‖ ≤ ‖d′‖, which the displacement bound relies on
        if !(-1.0..=1.0).contains(&self.apg.eta) {
            bail_validation!("apg eta must lie in [-1, 1], got {}", self.apg.eta);
        }
        Ok(())
    }

    /// Whether an unconditional prediction is needed at all.
    pub fn needs_uncond(&self) -> bool {
        self.mode != GuidanceMode::None && self.scale != 1.0
    }
}

/// Momentum buffer owned by one sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct ApgState {
    pub momentum: Vec<f32>,
}

impl ApgState {
    pub fn new(len: usize) -> Self {
        ApgState { momentum: vec![0.0; len] }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Adaptive projected guidance, in the order momentum → rescale → project:
///
/// `d = u_c − u_u`, `m ← d + β·m`, `d′ = m` clipped to norm `r`, split `d′`
/// into parts parallel and orthogonal to `u_c`, `d″ = η·d_par + d_orth`,
/// `u = u_c + (s − 1)·d″`.
pub fn apg_combine(
    u_cond: &[f32],
    u_uncond: &[f32],
    scale: f64,
    params: &ApgParams,
    state: &mut ApgState,
) -> Result<Vec<f32>> {
    if u_cond.len() != u_uncond.len() || state.momentum.len() != u_cond.len() {
        bail_shape!(
            "apg inputs have lengths {}, {}, momentum {}",
            u_cond.len(),
            u_uncond.len(),
            state.momentum.len()
        );
    }
    let mut d: Vec<f64> = u_cond
        .iter()
        .zip(u_uncond)
        .zip(&state.momentum)
        .map(|((&c, &u), &m)| (c as f64 - u as f64) + params.beta * m as f64)
        .collect();
    for (m, &v) in state.momentum.iter_mut().zip(&d) {
        *m = v as f32;
    }
    if scale == 1.0 {
        return Ok(u_cond.to_vec());
    }
    let n = norm(&d);
    if n > params.r {
        let k = params.r / n;
        d.iter_mut().for_each(|x| *x *= k);
    }
    let uc: Vec<f64> = u_cond.iter().map(|&x| x as f64).collect();
    let uc_norm = norm(&uc);
    if uc_norm > 0.0 {
        let proj = d.iter().zip(&uc).map(|(a, b)| a * b).sum::<f64>() / (uc_norm * uc_norm);
        for (x, &c) in d.iter_mut().zip(&uc) {
            let par = proj * c;
            *x = params.eta * par + (*x - par);
        }
    }
    Ok(uc
        .iter()
        .zip(&d)
        .map(|(&c, &g)| (c + (scale - 1.0) * g) as f32)
        .collect())
}

/// Decoder conditioning for one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Condition {
    /// Token codes; `1 ≤ len ≤ K_max`.
    Tokens(Vec<u32>),
    Null,
}

/// Replace the whole condition by the null condition with probability `p`.
pub fn condition_dropout<R: Rng + ?Sized>(cond: Condition, p: f64, rng: &mut R) -> Condition {
    if rng.random::<f64>() < p {
        Condition::Null
    } else {
        cond
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub dims: TransformerDims,
    pub k_max: usize,
    pub code_dim: usize,
    pub time_freq_dim: usize,
}

/// Per-group adaLN-zero modulation: shift/scale/gate for attention and MLP.
#[derive(Debug, Clone)]
struct Modulation {
    shift1: Tensor,
    scale1: Tensor,
    gate1: Tensor,
    shift2: Tensor,
    scale2: Tensor,
    gate2: Tensor,
}

impl Modulation {
    fn from(lin: &Linear, temb: &Tensor, w: usize) -> Result<Self> {
        // [B, 6w] → six [B, 1, w]
        let m = lin.forward(&temb.silu()?)?.unsqueeze(1)?;
        let c = |i: usize| m.narrow(2, i * w, w);
        Ok(Modulation {
            shift1: c(0)?,
            scale1: c(1)?,
            gate1: c(2)?,
            shift2: c(3)?,
            scale2: c(4)?,
            gate2: c(5)?,
        })
    }
}

fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(rms_norm(x, None)?.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)?)
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    ada_patch: Linear,
    ada_reg: Linear,
    attn: Attention,
    mlp: SwiGlu,
}

impl DecoderBlock {
    fn new(src: &mut dyn ParamSource, name: &str, dims: &TransformerDims) -> Result<Self> {
        let w = dims.width;
        Ok(DecoderBlock {
            ada_patch: Linear::with_init(src, &format!("{name}.ada_patch"), w, 6 * w, true, Init::Zeros)?,
            ada_reg: Linear::with_init(src, &format!("{name}.ada_reg"), w, 6 * w, true, Init::Zeros)?,
            attn: Attention::new(src, &format!("{name}.attn"), w, dims.heads)?,
            mlp: SwiGlu::new(src, &format!("{name}.mlp"), w, dims.mlp_hidden())?,
        })
    }

    fn forward(&self, xp: &Tensor, xr: &Tensor, temb: &Tensor) -> Result<(Tensor, Tensor)> {
        let w = xp.dim(2)?;
        let n = xp.dim(1)?;
        let k = xr.dim(1)?;
        let mp = Modulation::from(&self.ada_patch, temb, w)?;
        let mr = Modulation::from(&self.ada_reg, temb, w)?;

        let h = Tensor::cat(&[modulate(xp, &mp.shift1, &mp.scale1)?, modulate(xr, &mr.shift1, &mr.scale1)?], 1)?;
        let a = self.attn.forward(&h, None)?;
        let xp = (xp + a.narrow(1, 0, n)?.broadcast_mul(&mp.gate1)?)?;
        let xr = (xr + a.narrow(1, n, k)?.broadcast_mul(&mr.gate1)?)?;

        let fp = self.mlp.forward(&modulate(&xp, &mp.shift2, &mp.scale2)?)?;
        let fr = self.mlp.forward(&modulate(&xr, &mr.shift2, &mr.scale2)?)?;
        Ok(((&xp + fp.broadcast_mul(&mp.gate2)?)?, (&xr + fr.broadcast_mul(&mr.gate2)?)?))
    }
}

/// Batched decoder input: token values plus per-sample keep counts and null flags.
#[derive(Debug, Clone)]
pub struct CondBatch {
    /// `[B, K_max, code_dim]` FSQ values (rows beyond `keep` are ignored).
    pub values: Tensor,
    pub keep: Vec<usize>,
    pub null: Vec<bool>,
}

impl CondBatch {
    /// Build from token conditions. Missing rows are zero-filled and masked.
    pub fn from_conditions(conds: &[Condition], levels: &FsqLevels, k_max: usize, dtype: DType) -> Result<Self> {
        let d = levels.dim();
        let mut values = Vec::with_capacity(conds.len() * k_max * d);
        let mut keep = Vec::with_capacity(conds.len());
        let mut null = Vec::with_capacity(conds.len());
        for c in conds {
            match c {
                Condition::Tokens(codes) => {
                    if codes.is_empty() || codes.len() > k_max {
                        return Err(Error::OutOfRange {
                            what: "token count",
                            value: codes.len() as i64,
                            valid: format!("[1, {k_max}]"),
                        });
                    }
                    for &code in codes {
                        values.extend(levels.index_to_values(code)?);
                    }
                    values.extend(std::iter::repeat_n(0.0, (k_max - codes.len()) * d));
                    keep.push(codes.len());
                    null.push(false);
                }
                Condition::Null => {
                    values.extend(std::iter::repeat_n(0.0, k_max * d));
                    keep.push(k_max);
                    null.push(true);
                }
            }
        }
        let values = Tensor::from_vec(values, (conds.len(), k_max, d), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(CondBatch { values, keep, null })
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn with_all_null(&self) -> CondBatch {
        CondBatch {
            values: self.values.clone(),
            keep: vec![self.values.dim(1).unwrap_or(1); self.len()],
            null: vec![true; self.len()],
        }
    }
}

/// Velocity prediction and the layer-1 patch activations used for alignment.
#[derive(Debug, Clone)]
pub struct FlowOutput {
    /// `[B, N, C·p²]`
    pub velocity: Tensor,
    /// `[B, N, w]` output of the first block, patch rows only.
    pub layer1_patches: Tensor,
}

#[derive(Debug, Clone)]
pub struct FlowDecoder {
    pub config: DecoderConfig,
    pub geometry: PatchGeometry,
    patch_in: Linear,
    patch_pos: Tensor,
    cond_in: Linear,
    reg_pos: Tensor,
    mask_token: Tensor,
    null_cond: Tensor,
    time_in: Linear,
    time_out: Linear,
    blocks: Vec<DecoderBlock>,
    final_mod: Linear,
    final_out: Linear,
}

impl FlowDecoder {
    pub fn build(config: DecoderConfig, geometry: PatchGeometry, src: &mut dyn ParamSource) -> Result<Self> {
        config.dims.validate()?;
        geometry.validate()?;
        let w = config.dims.width;
        Ok(FlowDecoder {
            patch_in: Linear::new(src, "dec.patch_in", geometry.patch_dim(), w, true)?,
            patch_pos: src.get("dec.patch_pos", &[geometry.num_patches(), w], Init::Normal(0.02))?,
            cond_in: Linear::new(src, "dec.cond_in", config.code_dim, w, true)?,
            reg_pos: src.get("dec.reg_pos", &[config.k_max, w], Init::Normal(0.02))?,
            mask_token: src.get("dec.mask_token", &[w], Init::Normal(0.02))?,
            null_cond: src.get("dec.null_cond", &[w], Init::Normal(0.02))?,
            time_in: Linear::new(src, "dec.time_in", config.time_freq_dim, w, true)?,
            time_out: Linear::new(src, "dec.time_out", w, w, true)?,
            blocks: (0..config.dims.depth)
                .map(|i| DecoderBlock::new(src, &format!("dec.blocks.{i}"), &config.dims))
                .collect::<Result<_>>()?,
            final_mod: Linear::with_init(src, "dec.final_mod", w, 2 * w, true, Init::Zeros)?,
            final_out: Linear::with_init(src, "dec.final_out", w, geometry.patch_dim(), true, Init::Zeros)?,
            config,
            geometry,
        })
    }

    pub fn dtype(&self) -> DType {
        self.patch_pos.dtype()
    }

    fn time_embedding(&self, t: &[f64]) -> Result<Tensor> {
        let f = sinusoidal_embedding(t, self.config.time_freq_dim, self.dtype())?;
        self.time_out.forward(&self.time_in.forward(&f)?.silu()?)
    }

    /// Register-slot inputs `[B, K, w]`: projected values, masked beyond
    /// each sample's keep count, replaced wholesale by the null embedding
    /// where flagged, plus register positions.
    fn condition_tokens(&self, cond: &CondBatch) -> Result<Tensor> {
        let (b, k, _) = cond.values.dims3()?;
        let w = self.config.dims.width;
        let x = self.cond_in.forward(&cond.values)?;
        let x = mask_batch(&x, &cond.keep, &self.mask_token)?;
        let sel: Vec<u8> = cond.null.iter().map(|&n| n as u8).collect();
        let sel = Tensor::from_vec(sel, (b, 1, 1), &Device::Cpu)?.broadcast_as((b, k, w))?;
        let null = self.null_cond.reshape((1, 1, w))?.broadcast_as((b, k, w))?;
        Ok(sel.where_cond(&null, &x)?.broadcast_add(&self.reg_pos)?)
    }

    /// Predict the velocity for noised patches `[B, N, C·p²]` at per-sample times `t`.
    pub fn forward_patches(&self, x_t: &Tensor, t: &[f64], cond: &CondBatch) -> Result<FlowOutput> {
        let (b, n, _) = x_t.dims3()?;
        if t.len() != b || cond.len() != b {
            bail_shape!("batch {b} with {} timesteps and {} conditions", t.len(), cond.len());
        }
        if cond.values.dim(1)? != self.config.k_max {
            bail_shape!("condition has {} slots, decoder expects {}", cond.values.dim(1)?, self.config.k_max);
        }
        let temb = self.time_embedding(t)?;
        let mut xp = self.patch_in.forward(x_t)?.broadcast_add(&self.patch_pos)?;
        let mut xr = self.condition_tokens(cond)?;
        let mut layer1 = None;
        for (i, block) in self.blocks.iter().enumerate() {
            (xp, xr) = block.forward(&xp, &xr, &temb)?;
            ensure_finite(&xp, "decoder block", i)?;
            if i == 0 {
                layer1 = Some(xp.clone());
            }
        }
        let w = self.config.dims.width;
        let m = self.final_mod.forward(&temb.silu()?)?.unsqueeze(1)?;
        let h = modulate(&xp, &m.narrow(2, 0, w)?, &m.narrow(2, w, w)?)?;
        let velocity = self.final_out.forward(&h)?;
        debug_assert_eq!(velocity.dim(1)?, n);
        Ok(FlowOutput {
            velocity,
            layer1_patches: layer1.unwrap_or(xp),
        })
    }

    /// Latent-shaped wrapper: `[B, C, H, W]` in and out.
    pub fn predict_flow(&self, x_t: &Tensor, t: &[f64], cond: &CondBatch) -> Result<Tensor> {
        let patches = patchify_tensor(x_t, self.geometry.patch_size)?;
        let out = self.forward_patches(&patches, t, cond)?;
        unpatchify_tensor(&out.velocity, &self.geometry)
    }
}

/// A velocity field the sampler can integrate. Inputs and outputs are
/// flattened `B × L` latents.
pub trait FlowField {
    fn batch(&self) -> usize;
    fn latent_len(&self) -> usize;
    fn velocity(&self, x_t: &[f32], t: f64, uncond: bool) -> Result<Vec<f32>>;
}

/// Decoder bound to a fixed batch of conditions.
pub struct TokenField<'a> {
    decoder: &'a FlowDecoder,
    cond: CondBatch,
    uncond: CondBatch,
}

impl<'a> TokenField<'a> {
    pub fn new(decoder: &'a FlowDecoder, conds: &[Condition], levels: &FsqLevels) -> Result<Self> {
        let cond = CondBatch::from_conditions(conds, levels, decoder.config.k_max, decoder.dtype())?;
        let uncond = cond.with_all_null();
        Ok(TokenField { decoder, cond, uncond })
    }
}

impl FlowField for TokenField<'_> {
    fn batch(&self) -> usize {
        self.cond.len()
    }

    fn latent_len(&self) -> usize {
        self.decoder.geometry.latent_len()
    }

    fn velocity(&self, x_t: &[f32], t: f64, uncond: bool) -> Result<Vec<f32>> {
        let g = &self.decoder.geometry;
        let b = self.batch();
        let x = Tensor::from_slice(x_t, (b, g.channels, g.height, g.width), &Device::Cpu)?.to_dtype(self.decoder.dtype())?;
        let cond = if uncond { &self.uncond } else { &self.cond };
        let u = self.decoder.predict_flow(&x, &vec![t; b], cond)?;
        Ok(u.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SamplerStats {
    pub steps: usize,
    /// Steps where `‖u − u_cond‖ > |s − 1|·r` for some sample (APG only).
    pub apg_bound_violations: usize,
    /// Largest observed `‖u − u_cond‖ / (|s − 1|·r)` (APG only).
    pub apg_max_ratio: f64,
}

/// Euler integration from `t = 1` (starting at `eps`) to `t = 0` on a
/// uniform grid of `steps` intervals.
pub fn sample_flow(field: &dyn FlowField, eps: &[f32], steps: usize, guidance: &GuidanceParams) -> Result<(Vec<f32>, SamplerStats)> {
    if steps == 0 {
        bail_validation!("number of denoising steps must be ≥ 1");
    }
    guidance.validate()?;
    let (b, l) = (field.batch(), field.latent_len());
    if eps.len() != b * l {
        bail_shape!("noise has {} values, expected {}", eps.len(), b * l);
    }
    let mut x = eps.to_vec();
    let mut states: Vec<ApgState> = (0..b).map(|_| ApgState::new(l)).collect();
    let mut stats = SamplerStats::default();
    for i in 0..steps {
        let t = 1.0 - i as f64 / steps as f64;
        let t_next = 1.0 - (i + 1) as f64 / steps as f64;
        let uc = field.velocity(&x, t, false)?;
        let u = if guidance.needs_uncond() {
            let uu = field.velocity(&x, t, true)?;
            let mut out = Vec::with_capacity(b * l);
            for (j, state) in states.iter_mut().enumerate() {
                let (c, u0) = (&uc[j * l..(j + 1) * l], &uu[j * l..(j + 1) * l]);
                let g = match guidance.mode {
                    GuidanceMode::Cfg => cfg_combine(c, u0, guidance.scale)?,
                    _ => {
                        let g = apg_combine(c, u0, guidance.scale, &guidance.apg, state)?;
                        let bound = (guidance.scale - 1.0).abs() * guidance.apg.r;
                        let dist = g.iter().zip(c).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
                        let ratio = dist / bound;
                        stats.apg_max_ratio = stats.apg_max_ratio.max(ratio);
                        if dist > bound * (1.0 + 1e-5) + 1e-6 {
                            stats.apg_bound_violations += 1;
                        }
                        g
                    }
                };
                out.extend(g);
            }
            out
        } else {
            uc
        };
        let dt = (t_next - t) as f32;
        for (xi, ui) in x.iter_mut().zip(&u) {
            *xi += dt * ui;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { stage: "flow sampling step", index: i });
        }
        stats.steps += 1;
    }
    Ok((x, stats))
}

/// Standard normal noise for `n` values.
pub fn gaussian_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
}

/// Decode one token sequence into latents, drawing the starting noise from `rng`.
pub fn decode<R: Rng + ?Sized>(
    decoder: &FlowDecoder,
    levels: &FsqLevels,
    tokens: &[u32],
    steps: usize,
    guidance: &GuidanceParams,
    rng: &mut R,
) -> Result<LatentGrid> {
    let field = TokenField::new(decoder, &[Condition::Tokens(tokens.to_vec())], levels)?;
    let eps = gaussian_noise(rng, field.latent_len());
    let (x, _) = sample_flow(&field, &eps, steps, guidance)?;
    let g = &decoder.geometry;
    LatentGrid::new(g.channels, g.height, g.width, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{InitSource, MapSource, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(v: &[f32]) -> LatentGrid {
        LatentGrid::new(1, 1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn noise_sample_endpoints() {
        let x0 = grid(&[0.3, -1.7, 2.0]);
        let eps = grid(&[1.1, 0.2, -0.9]);
        assert_eq!(noise_sample(&x0, 0.0, &eps).unwrap(), x0);
        assert_eq!(noise_sample(&x0, 1.0, &eps).unwrap(), eps);
        let mid = noise_sample(&grid(&[0.0; 4]), 0.5, &grid(&[2.0; 4])).unwrap();
        assert_eq!(mid.data, vec![1.0; 4]);
        assert!(noise_sample(&x0, 0.5, &grid(&[1.0])).is_err());
    }

    #[test]
    fn timestep_identities() {
        for u in [0.0, 0.13, 0.5, 0.77, 1.0] {
            assert!((timestep_from_uniform(u, 0.0) - (1.0 - u)).abs() < 1e-15);
        }
        for s in [-1.0, 0.0, 0.25, 1.0, max_mode_scale()] {
            assert_eq!(timestep_from_uniform(0.0, s), 1.0);
            assert!(timestep_from_uniform(1.0, s).abs() < 1e-15);
        }
    }

    #[test]
    fn rf_loss_examples() {
        let eps = [1.0f32, 2.0, 3.0];
        let x0 = [0.5f32, -1.0, 0.0];
        let target: Vec<f32> = eps.iter().zip(&x0).map(|(e, x)| e - x).collect();
        assert_eq!(rf_loss(&target, &eps, &x0).unwrap(), 0.0);
        assert_eq!(rf_loss(&[0.0; 3], &x0, &x0).unwrap(), 0.0);
        assert_eq!(rf_loss(&[0.0; 8], &[1.0; 8], &[0.0; 8]).unwrap(), 1.0);
        assert!(rf_loss(&[0.0; 2], &[0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn cfg_examples() {
        let c = [0.4f32, -2.0];
        let u = [1.5f32, 0.25];
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c.to_vec());
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u.to_vec());
        assert_eq!(cfg_combine(&[2.0], &[0.0], 1.5).unwrap(), vec![3.0]);
        assert!(cfg_combine(&[1.0], &[1.0, 2.0], 2.0).is_err());
    }

    #[test]
    fn apg_hand_example() {
        let p = ApgParams { r: 10.0, eta: 0.0, beta: 0.0 };
        let mut st = ApgState::new(2);
        let u = apg_combine(&[1.0, 0.0], &[0.0, 1.0], 2.0, &p, &mut st).unwrap();
        assert_eq!(u, vec![1.0, -1.0]);
    }

    #[test]
    fn apg_scale_one_is_cond() {
        let mut st = ApgState::new(3);
        let c = [0.1f32, 0.7, -3.0];
        let u = apg_combine(&c, &[5.0, 5.0, 5.0], 1.0, &ApgParams::default(), &mut st).unwrap();
        assert_eq!(u, c.to_vec());
    }

    #[test]
    fn apg_zero_cond_skips_projection() {
        let p = ApgParams { r: 100.0, eta: 0.0, beta: 0.0 };
        let mut st = ApgState::new(2);
        let u = apg_combine(&[0.0, 0.0], &[1.0, -1.0], 3.0, &p, &mut st).unwrap();
        assert_eq!(u, vec![-2.0, 2.0]);
    }

    #[test]
    fn apg_momentum_accumulates() {
        let p = ApgParams { r: 100.0, eta: 1.0, beta: -0.5 };
        let mut st = ApgState::new(1);
        apg_combine(&[1.0], &[0.0], 2.0, &p, &mut st).unwrap();
        assert_eq!(st.momentum, vec![1.0]);
        apg_combine(&[1.0], &[0.0], 2.0, &p, &mut st).unwrap();
        assert_eq!(st.momentum, vec![0.5]);
    }

    #[test]
    fn condition_dropout_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Condition::Tokens(vec![1, 2]);
        assert!((0..200).all(|_| condition_dropout(c.clone(), 0.0, &mut rng) == c));
        assert!((0..200).all(|_| condition_dropout(c.clone(), 1.0, &mut rng) == Condition::Null));
        let nulls = (0..100_000)
            .filter(|_| condition_dropout(c.clone(), 0.2, &mut rng) == Condition::Null)
            .count();
        assert!((nulls as f64 / 1e5 - 0.2).abs() < 0.01);
    }

    /// Velocity `ε − x0`, with `ε` captured from the first call at `t = 1`.
    struct OracleField {
        x0: Vec<f32>,
        eps: std::cell::RefCell<Option<Vec<f32>>>,
    }

    impl FlowField for OracleField {
        fn batch(&self) -> usize {
            1
        }
        fn latent_len(&self) -> usize {
            self.x0.len()
        }
        fn velocity(&self, x_t: &[f32], t: f64, _uncond: bool) -> Result<Vec<f32>> {
            let mut e = self.eps.borrow_mut();
            if t == 1.0 {
                *e = Some(x_t.to_vec());
            }
            Ok(e.as_ref().unwrap().iter().zip(&self.x0).map(|(a, b)| a - b).collect())
        }
    }

    #[test]
    fn oracle_flow_integrates_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = gaussian_noise(&mut rng, 32);
        for steps in [1, 2, 5, 25, 100] {
            let eps = gaussian_noise(&mut rng, 32);
            let field = OracleField { x0: x0.clone(), eps: Default::default() };
            let (x, stats) = sample_flow(&field, &eps, steps, &GuidanceParams::none()).unwrap();
            assert_eq!(stats.steps, steps);
            for (a, b) in x.iter().zip(&x0) {
                assert!((a - b).abs() < 1e-5, "steps {steps}: {a} vs {b}");
            }
        }
        let field = OracleField { x0: x0.clone(), eps: Default::default() };
        assert!(sample_flow(&field, &x0, 0, &GuidanceParams::none()).is_err());
    }

    fn tiny(depth: usize, seed: u64) -> (FlowDecoder, ParamStore) {
        let cfg = DecoderConfig {
            dims: TransformerDims { depth, width: 16, heads: 2, mlp_ratio: 2.0 },
            k_max: 4,
            code_dim: 6,
            time_freq_dim: 8,
        };
        let geom = PatchGeometry { channels: 3, height: 4, width: 4, patch_size: 2 };
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dec = FlowDecoder::build(cfg, geom, &mut InitSource { store: &mut store, rng: &mut rng }).unwrap();
        (dec, store)
    }

    fn randomized(dec: &FlowDecoder, store: &ParamStore, keep_zero: &[&str], seed: u64) -> FlowDecoder {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = store.snapshot().unwrap();
        for (k, v) in map.iter_mut() {
            if keep_zero.iter().any(|z| k.contains(z)) {
                continue;
            }
            let data: Vec<f64> = (0..v.elem_count()).map(|_| rng.random_range(-0.5..0.5)).collect();
            *v = Tensor::from_vec(data, v.shape(), &Device::Cpu).unwrap();
        }
        FlowDecoder::build(dec.config.clone(), dec.geometry, &mut MapSource { map: &map, dtype: DType::F64 }).unwrap()
    }

    fn x_t(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d: Vec<f64> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(d, (1, 3, 4, 4), &Device::Cpu).unwrap()
    }

    fn cond(codes: &[u32]) -> CondBatch {
        CondBatch::from_conditions(&[Condition::Tokens(codes.to_vec())], &FsqLevels::default(), 4, DType::F64).unwrap()
    }

    #[test]
    fn zero_adaln_output_ignores_time() {
        let (dec, store) = tiny(1, 0);
        // everything random except the adaLN projections
        let dec = randomized(&dec, &store, &["ada_", "final_mod"], 1);
        let c = cond(&[5, 17]);
        let a = dec.predict_flow(&x_t(2), &[0.9], &c).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = dec.predict_flow(&x_t(2), &[0.1], &c).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
        // and equals the head applied to the normalized embedded patches
        let patches = patchify_tensor(&x_t(2), 2).unwrap();
        let h = dec.patch_in.forward(&patches).unwrap().broadcast_add(&dec.patch_pos).unwrap();
        let want = dec.final_out.forward(&rms_norm(&h, None).unwrap()).unwrap();
        let want = unpatchify_tensor(&want, &dec.geometry).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (x, y) in a.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn null_condition_ignores_tokens() {
        let (dec, store) = tiny(2, 3);
        let dec = randomized(&dec, &store, &[], 4);
        let levels = FsqLevels::default();
        let a = CondBatch::from_conditions(&[Condition::Tokens(vec![1, 2, 3])], &levels, 4, DType::F64).unwrap().with_all_null();
        let b = CondBatch::from_conditions(&[Condition::Tokens(vec![999])], &levels, 4, DType::F64).unwrap().with_all_null();
        let ua = dec.predict_flow(&x_t(5), &[0.5], &a).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let ub = dec.predict_flow(&x_t(5), &[0.5], &b).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(ua, ub);
        let uc = dec.predict_flow(&x_t(5), &[0.5], &cond(&[1, 2, 3])).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_ne!(ua, uc);
    }

    #[test]
    fn deterministic_prediction() {
        let (dec, store) = tiny(2, 6);
        let dec = randomized(&dec, &store, &[], 7);
        let c = cond(&[3]);
        let a = dec.predict_flow(&x_t(1), &[0.3], &c).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = dec.predict_flow(&x_t(1), &[0.3], &c).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decode_validates_and_is_seeded() {
        let (dec, store) = tiny(1, 8);
        let dec = randomized(&dec, &store, &[], 9);
        let levels = FsqLevels::default();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            decode(&dec, &levels, &[4, 5], 5, &GuidanceParams::default(), &mut rng).unwrap()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(decode(&dec, &levels, &[4], 0, &GuidanceParams::none(), &mut rng).is_err());
        assert!(decode(&dec, &levels, &[], 3, &GuidanceParams::none(), &mut rng).is_err());
        assert!(decode(&dec, &levels, &[1, 2, 3, 4, 5], 3, &GuidanceParams::none(), &mut rng).is_err());
        assert!(decode(&dec, &levels, &[64000], 3, &GuidanceParams::none(), &mut rng).is_err());
    }
}
