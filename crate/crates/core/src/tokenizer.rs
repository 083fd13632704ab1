//! The Stage-1 model: register encoder, FSQ bottleneck, flow decoder and
//! alignment head, plus the training objective.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::LatentGrid;
use crate::encoder::{patchify_tensor, EncoderConfig, FlexEncoder, PatchGeometry};
use crate::error::{bail_shape, bail_validation, Result};
use crate::flow::{
    gaussian_noise, rf_loss_tensor, sample_flow, sample_timestep, Condition, CondBatch, DecoderConfig,
    FlowDecoder, GuidanceParams, SamplerStats, TokenField,
};
use crate::fsq::FsqLevels;
use crate::nn::{ParamSource, TransformerDims};
use crate::repa::RepaHead;
use crate::schedule::DropoutSchedule;

/// Everything needed to rebuild a tokenizer's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub geometry: PatchGeometry,
    pub encoder: TransformerDims,
    pub decoder: TransformerDims,
    pub k_max: usize,
    pub levels: FsqLevels,
    pub time_freq_dim: usize,
    pub repa_grid_side: usize,
    pub repa_feature_dim: usize,
    pub repa_mlp_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub spec: TokenizerSpec,
    pub encoder: FlexEncoder,
    pub decoder: FlowDecoder,
    pub repa: RepaHead,
}

impl Tokenizer {
    pub fn build(spec: TokenizerSpec, src: &mut dyn ParamSource, dtype: DType) -> Result<Self> {
        if spec.k_max == 0 {
            bail_validation!("k_max must be ≥ 1");
        }
        let code_dim = spec.levels.dim();
        let encoder = FlexEncoder::build(
            EncoderConfig { dims: spec.encoder.clone(), k_max: spec.k_max, code_dim },
            spec.geometry,
            src,
        )?;
        let decoder = FlowDecoder::build(
            DecoderConfig {
                dims: spec.decoder.clone(),
                k_max: spec.k_max,
                code_dim,
                time_freq_dim: spec.time_freq_dim,
            },
            spec.geometry,
            src,
        )?;
        let repa = RepaHead::build(
            src,
            spec.decoder.width,
            spec.repa_mlp_ratio,
            spec.geometry.grid(),
            spec.repa_grid_side,
            spec.repa_feature_dim,
            dtype,
        )?;
        Ok(Tokenizer { spec, encoder, decoder, repa })
    }

    pub fn levels(&self) -> &FsqLevels {
        &self.spec.levels
    }

    fn batch_tensor(&self, latents: &[LatentGrid]) -> Result<Tensor> {
        if latents.is_empty() {
            bail_shape!("empty latent batch");
        }
        let mut data = Vec::with_capacity(latents.len() * self.spec.geometry.latent_len());
        for l in latents {
            self.spec.geometry.check(l)?;
            data.extend_from_slice(&l.data);
        }
        let g = &self.spec.geometry;
        Ok(Tensor::from_vec(data, (latents.len(), g.channels, g.height, g.width), &Device::Cpu)?
            .to_dtype(self.decoder.dtype())?)
    }

    /// Pre-quantization codes `[B, k, d]`.
    pub fn codes_continuous(&self, x0: &Tensor, k: usize) -> Result<Tensor> {
        self.encoder.project_codes(&self.encoder.forward(x0, k)?)
    }

    /// Token codes for each latent grid, first `k` registers.
    pub fn tokenize(&self, latents: &[LatentGrid], k: usize) -> Result<Vec<Vec<u32>>> {
        let z = self.codes_continuous(&self.batch_tensor(latents)?, k)?;
        let codes = self.spec.levels.encode_tensor(&z)?;
        Ok(codes.chunks(k).map(|c| c.to_vec()).collect())
    }

    /// Flattened quantized values (`k·d` per image) for probing.
    pub fn quantized_values(&self, latents: &[LatentGrid], k: usize) -> Result<Vec<Vec<f32>>> {
        let d = self.spec.levels.dim();
        Ok(self
            .tokenize(latents, k)?
            .iter()
            .map(|codes| {
                let mut v = Vec::with_capacity(codes.len() * d);
                for &c in codes {
                    v.extend(self.spec.levels.index_to_values(c).unwrap_or_default().iter().map(|&x| x as f32));
                }
                v
            })
            .collect())
    }

    /// Decode token sequences (possibly of different lengths) from the given
    /// starting noise, `B × latent_len` values.
    pub fn detokenize_with_noise(
        &self,
        tokens: &[Vec<u32>],
        eps: &[f32],
        steps: usize,
        guidance: &GuidanceParams,
    ) -> Result<(Vec<LatentGrid>, SamplerStats)> {
        let conds: Vec<Condition> = tokens.iter().map(|t| Condition::Tokens(t.clone())).collect();
        let field = TokenField::new(&self.decoder, &conds, &self.spec.levels)?;
        let (x, stats) = sample_flow(&field, eps, steps, guidance)?;
        let g = &self.spec.geometry;
        let grids = x
            .chunks(g.latent_len())
            .map(|c| LatentGrid::new(g.channels, g.height, g.width, c.to_vec()))
            .collect::<Result<_>>()?;
        Ok((grids, stats))
    }

    pub fn detokenize<R: Rng + ?Sized>(
        &self,
        tokens: &[Vec<u32>],
        steps: usize,
        guidance: &GuidanceParams,
        rng: &mut R,
    ) -> Result<(Vec<LatentGrid>, SamplerStats)> {
        let eps = gaussian_noise(rng, tokens.len() * self.spec.geometry.latent_len());
        self.detokenize_with_noise(tokens, &eps, steps, guidance)
    }

    /// `grid − tanh(z)` at the given inputs, for building a differentiable
    /// surrogate of the quantizer (see [`Quantizer::FrozenResidual`]).
    pub fn rounding_residual(&self, x0: &Tensor) -> Result<Tensor> {
        let z = self.codes_continuous(x0, self.spec.k_max)?;
        self.spec.levels.rounding_residual(&z)
    }
}

/// How the bottleneck is applied inside the loss.
#[derive(Debug, Clone)]
pub enum Quantizer {
    /// Grid values forward, `tanh` gradient backward.
    StraightThrough,
    /// `tanh(z) + r` with a fixed residual `r`: equals the quantizer at the
    /// point `r` was taken and is smooth around it.
    FrozenResidual(Tensor),
}

/// All random choices of one Stage-1 step.
#[derive(Debug, Clone)]
pub struct Stage1Draws {
    pub t: Vec<f64>,
    /// `[B, C, H, W]`
    pub eps: Tensor,
    pub keep: Vec<usize>,
    pub null: Vec<bool>,
}

/// Sampling settings for [`Stage1Draws::sample`].
#[derive(Debug, Clone, Copy)]
pub struct DrawSettings {
    pub schedule: DropoutSchedule,
    /// Draw one keep count per batch rather than per sample.
    pub shared_keep: bool,
    pub noise_scale: f64,
    pub cond_dropout: f64,
}

impl Stage1Draws {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, batch: usize, geom: &PatchGeometry, s: &DrawSettings, dtype: DType) -> Result<Self> {
        let t: Vec<f64> = (0..batch).map(|_| sample_timestep(rng, s.noise_scale)).collect();
        let eps = gaussian_noise(rng, batch * geom.latent_len());
        let eps = Tensor::from_vec(eps, (batch, geom.channels, geom.height, geom.width), &Device::Cpu)?.to_dtype(dtype)?;
        let keep = if s.shared_keep {
            vec![s.schedule.sample_keep(rng); batch]
        } else {
            (0..batch).map(|_| s.schedule.sample_keep(rng)).collect()
        };
        let null = (0..batch).map(|_| rng.random::<f64>() < s.cond_dropout).collect();
        Ok(Stage1Draws { t, eps, keep, null })
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Loss {
    /// Differentiable `rf + repa_weight · repa`.
    pub total: Tensor,
    pub rf: f64,
    pub repa: f64,
    pub repa_degenerate: usize,
}

/// Stage-1 objective for clean latents `x0` `[B, C, H, W]` and oracle
/// features `[B, G², F]` (ignored when `repa_weight` is 0).
pub fn stage1_loss(
    tok: &Tokenizer,
    x0: &Tensor,
    oracle: Option<&Tensor>,
    draws: &Stage1Draws,
    repa_weight: f64,
    quantizer: &Quantizer,
) -> Result<Stage1Loss> {
    let b = x0.dim(0)?;
    if draws.t.len() != b || draws.keep.len() != b || draws.null.len() != b || draws.eps.dims() != x0.dims() {
        bail_shape!("draws do not match batch of {b}");
    }
    let z = tok.codes_continuous(x0, tok.spec.k_max)?;
    let values = match quantizer {
        Quantizer::StraightThrough => tok.spec.levels.quantize_tensor(&z)?,
        Quantizer::FrozenResidual(r) => (z.tanh()? + r)?,
    };
    let cond = CondBatch { values, keep: draws.keep.clone(), null: draws.null.clone() };

    let t = Tensor::from_vec(draws.t.clone(), (b, 1, 1, 1), &Device::Cpu)?.to_dtype(x0.dtype())?;
    let x_t = (x0.broadcast_mul(&(1.0 - &t)?)? + draws.eps.broadcast_mul(&t)?)?;
    let p = tok.spec.geometry.patch_size;
    let out = tok.decoder.forward_patches(&patchify_tensor(&x_t, p)?, &draws.t, &cond)?;
    let target = patchify_tensor(&draws.eps, p)?;
    let x0p = patchify_tensor(x0, p)?;
    let rf = rf_loss_tensor(&out.velocity, &target, &x0p)?;
    let rf_value = rf.to_dtype(DType::F64)?.to_scalar::<f64>()?;

    if repa_weight == 0.0 {
        return Ok(Stage1Loss { total: rf, rf: rf_value, repa: 0.0, repa_degenerate: 0 });
    }
    let oracle = match oracle {
        Some(o) => o,
        None => bail_validation!("alignment loss enabled but no oracle features supplied"),
    };
    let (repa, degenerate) = tok.repa.loss(&out.layer1_patches, &oracle.to_dtype(x0.dtype())?)?;
    let repa_value = repa.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok(Stage1Loss {
        total: (rf + (repa * repa_weight)?)?,
        rf: rf_value,
        repa: repa_value,
        repa_degenerate: degenerate,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::nn::{InitSource, ParamStore};
    use crate::schedule::ScheduleKind;
    use candle_core::backprop::GradStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_spec() -> TokenizerSpec {
        let dims = TransformerDims { depth: 1, width: 8, heads: 2, mlp_ratio: 2.0 };
        TokenizerSpec {
            geometry: PatchGeometry { channels: 3, height: 4, width: 4, patch_size: 2 },
            encoder: dims.clone(),
            decoder: dims,
            k_max: 4,
            levels: FsqLevels::new(vec![5, 4, 3]).unwrap(),
            time_freq_dim: 4,
            repa_grid_side: 3,
            repa_feature_dim: 4,
            repa_mlp_ratio: 1.0,
        }
    }

    fn build(seed: u64) -> (Tokenizer, ParamStore) {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tok = Tokenizer::build(tiny_spec(), &mut InitSource { store: &mut store, rng: &mut rng }, DType::F64).unwrap();
        (tok, store)
    }

    fn inputs(seed: u64) -> (Tensor, Tensor, Stage1Draws) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geom = tiny_spec().geometry;
        let x0 = Tensor::from_vec(gaussian_noise(&mut rng, 2 * 48), (2, 3, 4, 4), &Device::Cpu).unwrap().to_dtype(DType::F64).unwrap();
        let oracle = Tensor::from_vec(gaussian_noise(&mut rng, 2 * 9 * 4), (2, 9, 4), &Device::Cpu).unwrap();
        let settings = DrawSettings {
            schedule: DropoutSchedule::new(ScheduleKind::Pow2, 4).unwrap(),
            shared_keep: false,
            noise_scale: 0.25,
            cond_dropout: 0.2,
        };
        let draws = Stage1Draws::sample(&mut rng, 2, &geom, &settings, DType::F64).unwrap();
        (x0, oracle, draws)
    }

    fn grads_of(store: &ParamStore, g: &GradStore) -> Vec<(String, Vec<f64>)> {
        store
            .vars()
            .map(|(k, v)| {
                let g = g.get(v.as_tensor()).map(|t| t.flatten_all().unwrap().to_vec1::<f64>().unwrap());
                (k.clone(), g.unwrap_or_default())
            })
            .collect()
    }

    #[test]
    fn zero_alignment_weight_gives_pure_flow_gradients() {
        let (tok, store) = build(0);
        let (x0, oracle, draws) = inputs(1);
        let with = stage1_loss(&tok, &x0, Some(&oracle), &draws, 0.0, &Quantizer::StraightThrough).unwrap();
        let without = stage1_loss(&tok, &x0, None, &draws, 0.0, &Quantizer::StraightThrough).unwrap();
        assert_eq!(with.rf, without.rf);
        let a = grads_of(&store, &with.total.backward().unwrap());
        let b = grads_of(&store, &without.total.backward().unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn alignment_term_reported_and_bounded() {
        let (tok, _) = build(2);
        let (x0, oracle, draws) = inputs(3);
        let l = stage1_loss(&tok, &x0, Some(&oracle), &draws, 1.0, &Quantizer::StraightThrough).unwrap();
        assert!((0.0..=2.0).contains(&l.repa));
        let total = l.total.to_scalar::<f64>().unwrap();
        assert!((total - (l.rf + l.repa)).abs() < 1e-12);
        assert!(stage1_loss(&tok, &x0, None, &draws, 1.0, &Quantizer::StraightThrough).is_err());
    }

    #[test]
    fn frozen_residual_matches_straight_through_forward() {
        let (tok, _) = build(4);
        let (x0, oracle, draws) = inputs(5);
        let r = tok.rounding_residual(&x0).unwrap();
        let a = stage1_loss(&tok, &x0, Some(&oracle), &draws, 1.0, &Quantizer::StraightThrough).unwrap();
        let b = stage1_loss(&tok, &x0, Some(&oracle), &draws, 1.0, &Quantizer::FrozenResidual(r)).unwrap();
        assert!((a.rf - b.rf).abs() < 1e-12 && (a.repa - b.repa).abs() < 1e-12);
    }

    #[test]
    fn tokenize_prefix_and_range() {
        let (tok, _) = build(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lat = LatentGrid::new(3, 4, 4, gaussian_noise(&mut rng, 48)).unwrap();
        let full = tok.tokenize(std::slice::from_ref(&lat), 4).unwrap().remove(0);
        assert_eq!(full.len(), 4);
        assert!(full.iter().all(|&c| (c as usize) < tok.levels().vocab_size()));
        for k in 1..=4 {
            assert_eq!(tok.tokenize(std::slice::from_ref(&lat), k).unwrap()[0], full[..k]);
        }
        assert_eq!(tok.quantized_values(&[lat], 2).unwrap()[0].len(), 6);
    }
}
