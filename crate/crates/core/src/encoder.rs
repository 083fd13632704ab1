//! Register encoder: latent patches plus `K` learned register tokens go
//! through a transformer; only the register rows are kept.
//!
//! Patches attend to each other but never to registers, and register `i`
//! sees all patches and registers `j ≤ i`. Truncating the register set
//! therefore cannot change the rows that remain.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::codec::LatentGrid;
use crate::error::{bail_shape, bail_validation, Result};
use crate::nn::{ensure_finite, Block, Init, Linear, ParamSource, RmsNorm, TransformerDims};

/// Latent geometry the tokenizer was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
}

impl PatchGeometry {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.height % p != 0 || self.width % p != 0 {
            bail_shape!("latent {}×{} not divisible by patch size {p}", self.height, self.width);
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn latent_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn check(&self, latents: &LatentGrid) -> Result<()> {
        if latents.shape() != (self.channels, self.height, self.width) {
            bail_shape!(
                "latents {:?} do not match tokenizer geometry {}×{}×{}",
                latents.shape(),
                self.channels,
                self.height,
                self.width
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dims: TransformerDims,
    pub k_max: usize,
    /// Dimensionality of the pre-quantization code (number of FSQ levels).
    pub code_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.k_max == 0 || self.code_dim == 0 {
            bail_validation!("encoder needs k_max ≥ 1 and code_dim ≥ 1");
        }
        Ok(())
    }
}

/// `[B, C, H, W]` → `[B, N, C·p²]`, patches in raster order, each patch
/// flattened channel-major.
pub fn patchify_tensor(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if p == 0 || h % p != 0 || w % p != 0 {
        bail_shape!("latent {h}×{w} not divisible by patch size {p}");
    }
    let (hp, wp) = (h / p, w / p);
    Ok(x.reshape(vec![b, c, hp, p, wp, p])?
        .permute([0, 2, 4, 1, 3, 5])?
        .reshape((b, hp * wp, c * p * p))?)
}

/// Inverse of [`patchify_tensor`].
pub fn unpatchify_tensor(x: &Tensor, geom: &PatchGeometry) -> Result<Tensor> {
    let (b, _, _) = x.dims3()?;
    let p = geom.patch_size;
    let (hp, wp) = geom.grid();
    Ok(x.reshape(vec![b, hp, wp, geom.channels, p, p])?
        .permute([0, 3, 1, 4, 2, 5])?
        .reshape((b, geom.channels, geom.height, geom.width))?)
}

/// `N × (C·p²)` patch rows of a single latent grid.
pub fn patchify(latents: &LatentGrid, p: usize) -> Result<Vec<Vec<f32>>> {
    let t = patchify_tensor(&latents.to_tensor()?.unsqueeze(0)?, p)?.squeeze(0)?;
    Ok(t.to_vec2()?)
}

/// Which query/key pairs may attend, over `N` patches followed by `K` registers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub num_patches: usize,
    pub num_registers: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.num_patches + self.num_registers
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size() + key]
    }

    /// Additive bias: 0 where allowed, `-inf` elsewhere.
    pub fn to_bias(&self, dtype: DType) -> Result<Tensor> {
        let n = self.size();
        let data: Vec<f32> = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { f32::NEG_INFINITY })
            .collect();
        Ok(Tensor::from_vec(data, (n, n), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

pub fn build_attention_mask(num_patches: usize, num_registers: usize) -> AttentionMask {
    let n = num_patches + num_registers;
    let mut allowed = vec![false; n * n];
    for q in 0..n {
        for k in 0..n {
            allowed[q * n + k] = match (q < num_patches, k < num_patches) {
                (true, true) => true,
                (true, false) => false,
                (false, true) => true,
                (false, false) => q >= k,
            };
        }
    }
    AttentionMask {
        num_patches,
        num_registers,
        allowed,
    }
}

/// Encoder output: `K × D` register embeddings for one image.
#[derive(Debug, Clone)]
pub struct RegisterSequence {
    pub embeddings: Tensor,
}

impl RegisterSequence {
    pub fn len(&self) -> usize {
        self.embeddings.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> Result<Vec<Vec<f32>>> {
        Ok(self.embeddings.to_dtype(DType::F32)?.to_vec2()?)
    }
}

#[derive(Debug, Clone)]
pub struct FlexEncoder {
    pub config: EncoderConfig,
    pub geometry: PatchGeometry,
    patch_in: Linear,
    patch_pos: Tensor,
    registers: Tensor,
    blocks: Vec<Block>,
    final_norm: RmsNorm,
    to_code: Linear,
}

impl FlexEncoder {
    pub fn build(config: EncoderConfig, geometry: PatchGeometry, src: &mut dyn ParamSource) -> Result<Self> {
        config.validate()?;
        geometry.validate()?;
        let w = config.dims.width;
        let patch_in = Linear::new(src, "enc.patch_in", geometry.patch_dim(), w, true)?;
        let patch_pos = src.get("enc.patch_pos", &[geometry.num_patches(), w], Init::Normal(0.02))?;
        let registers = src.get("enc.registers", &[config.k_max, w], Init::Normal(0.02))?;
        let blocks = (0..config.dims.depth)
            .map(|i| Block::new(src, &format!("enc.blocks.{i}"), &config.dims))
            .collect::<Result<_>>()?;
        let final_norm = RmsNorm::new(src, "enc.final_norm", w)?;
        let to_code = Linear::new(src, "enc.to_code", w, config.code_dim, true)?;
        Ok(FlexEncoder {
            config,
            geometry,
            patch_in,
            patch_pos,
            registers,
            blocks,
            final_norm,
            to_code,
        })
    }

    /// Register outputs `[B, k, D]` for patch tokens `[B, N, C·p²]`, using
    /// the first `k` registers.
    pub fn forward_patches(&self, patches: &Tensor, k: usize) -> Result<Tensor> {
        if k == 0 || k > self.config.k_max {
            bail_validation!("register count {k} outside [1, {}]", self.config.k_max);
        }
        let (b, n, _) = patches.dims3()?;
        let w = self.config.dims.width;
        let x = self.patch_in.forward(patches)?.broadcast_add(&self.patch_pos)?;
        let regs = self.registers.narrow(0, 0, k)?.unsqueeze(0)?.broadcast_as((b, k, w))?;
        let mut x = Tensor::cat(&[&x, &regs], 1)?;
        let mask = build_attention_mask(n, k).to_bias(x.dtype())?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, Some(&mask))?;
            ensure_finite(&x, "encoder block", i)?;
        }
        Ok(x.narrow(1, n, k)?)
    }

    /// `[B, C, H, W]` latents → register outputs `[B, k, D]`.
    pub fn forward(&self, latents: &Tensor, k: usize) -> Result<Tensor> {
        self.forward_patches(&patchify_tensor(latents, self.geometry.patch_size)?, k)
    }

    /// Pre-quantization codes `[.., code_dim]` from register outputs.
    pub fn project_codes(&self, registers: &Tensor) -> Result<Tensor> {
        self.to_code.forward(&self.final_norm.forward(registers)?)
    }

    pub fn encode(&self, latents: &LatentGrid) -> Result<RegisterSequence> {
        self.encode_prefix(latents, self.config.k_max)
    }

    pub fn encode_prefix(&self, latents: &LatentGrid, k: usize) -> Result<RegisterSequence> {
        self.geometry.check(latents)?;
        let x = latents.to_tensor()?.to_dtype(self.registers.dtype())?.unsqueeze(0)?;
        Ok(RegisterSequence {
            embeddings: self.forward(&x, k)?.squeeze(0)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{InitSource, MapSource, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patchify_shapes() {
        let rows = patchify(&LatentGrid::zeros(16, 32, 32), 2).unwrap();
        assert_eq!((rows.len(), rows[0].len()), (256, 64));
        let rows = patchify(&LatentGrid::zeros(12, 16, 16), 2).unwrap();
        assert_eq!((rows.len(), rows[0].len()), (64, 48));
        assert!(patchify(&LatentGrid::zeros(4, 15, 15), 2).is_err());
    }

    #[test]
    fn patch_layout() {
        // 1 channel 4×4 with value = 10·y + x
        let data: Vec<f32> = (0..16).map(|i| (10 * (i / 4) + i % 4) as f32).collect();
        let rows = patchify(&LatentGrid::new(1, 4, 4, data).unwrap(), 2).unwrap();
        assert_eq!(rows[0], vec![0.0, 1.0, 10.0, 11.0]);
        assert_eq!(rows[1], vec![2.0, 3.0, 12.0, 13.0]);
        assert_eq!(rows[2], vec![20.0, 21.0, 30.0, 31.0]);
    }

    #[test]
    fn unpatchify_inverts() {
        let geom = PatchGeometry { channels: 3, height: 4, width: 6, patch_size: 2 };
        let x = Tensor::arange(0f32, 72.0, &Device::Cpu).unwrap().reshape((1, 3, 4, 6)).unwrap();
        let back = unpatchify_tensor(&patchify_tensor(&x, 2).unwrap(), &geom).unwrap();
        assert_eq!(back.flatten_all().unwrap().to_vec1::<f32>().unwrap(), x.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn mask_smallest_case() {
        let m = build_attention_mask(1, 1);
        assert!(m.allowed(0, 0) && !m.allowed(0, 1));
        assert!(m.allowed(1, 0) && m.allowed(1, 1));
    }

    #[test]
    fn mask_register_block_lower_triangular() {
        let m = build_attention_mask(2, 3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.allowed(2 + i, 2 + j), i >= j);
            }
            assert!(m.allowed(2 + i, 0) && m.allowed(2 + i, 1));
            assert!(!m.allowed(0, 2 + i) && !m.allowed(1, 2 + i));
        }
    }

    #[test]
    fn mask_truncation_is_submatrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let n = rng.random_range(1..8);
            let k = rng.random_range(1..10);
            let kk = rng.random_range(1..=k);
            let full = build_attention_mask(n, k);
            let small = build_attention_mask(n, kk);
            for q in 0..n + kk {
                for key in 0..n + kk {
                    assert_eq!(full.allowed(q, key), small.allowed(q, key));
                }
            }
        }
    }

    pub(crate) fn tiny(depth: usize, k_max: usize, seed: u64, dtype: DType) -> (FlexEncoder, ParamStore) {
        let cfg = EncoderConfig {
            dims: TransformerDims { depth, width: 16, heads: 2, mlp_ratio: 2.0 },
            k_max,
            code_dim: 6,
        };
        let geom = PatchGeometry { channels: 3, height: 4, width: 4, patch_size: 2 };
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = FlexEncoder::build(cfg, geom, &mut InitSource { store: &mut store, rng: &mut rng }).unwrap();
        (enc, store)
    }

    fn random_latents(seed: u64, c: usize, h: usize, w: usize) -> LatentGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentGrid::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn output_is_registers_only_and_deterministic() {
        let (enc, _) = tiny(2, 5, 1, DType::F32);
        let lat = random_latents(2, 3, 4, 4);
        let a = enc.encode(&lat).unwrap();
        let b = enc.encode(&lat).unwrap();
        assert_eq!(a.embeddings.dims(), &[5, 16]);
        assert_eq!(a.rows().unwrap(), b.rows().unwrap());
    }

    #[test]
    fn prefix_consistency_small() {
        let (enc, _) = tiny(2, 6, 4, DType::F64);
        let lat = random_latents(5, 3, 4, 4);
        let full = enc.encode(&lat).unwrap().embeddings.to_vec2::<f64>().unwrap();
        for k in 1..=6 {
            let part = enc.encode_prefix(&lat, k).unwrap().embeddings.to_vec2::<f64>().unwrap();
            for (a, b) in part.iter().zip(&full) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() <= 1e-10 * y.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn zero_residual_branches_return_register_embeddings() {
        let (enc, store) = tiny(1, 3, 6, DType::F64);
        let mut map = store.snapshot().unwrap();
        for name in ["enc.blocks.0.attn.out.weight", "enc.blocks.0.mlp.down.weight"] {
            map.insert(name.into(), map[name].zeros_like().unwrap());
        }
        let zeroed = FlexEncoder::build(enc.config.clone(), enc.geometry, &mut MapSource { map: &map, dtype: DType::F64 }).unwrap();
        let out = zeroed.encode(&random_latents(7, 3, 4, 4)).unwrap().embeddings.to_vec2::<f64>().unwrap();
        assert_eq!(out, map["enc.registers"].to_vec2::<f64>().unwrap());
    }

    #[test]
    fn permuting_patches_with_positions_keeps_registers() {
        let (enc, store) = tiny(2, 4, 8, DType::F64);
        let lat = random_latents(9, 3, 4, 4);
        let patches = patchify_tensor(&lat.to_tensor().unwrap().to_dtype(DType::F64).unwrap().unsqueeze(0).unwrap(), 2).unwrap();
        let base = enc.forward_patches(&patches, 4).unwrap().to_vec3::<f64>().unwrap();

        let perm = Tensor::new(&[2u32, 0, 3, 1], &Device::Cpu).unwrap();
        let mut map = store.snapshot().unwrap();
        map.insert("enc.patch_pos".into(), map["enc.patch_pos"].index_select(&perm, 0).unwrap());
        let permuted = FlexEncoder::build(enc.config.clone(), enc.geometry, &mut MapSource { map: &map, dtype: DType::F64 }).unwrap();
        let out = permuted
            .forward_patches(&patches.index_select(&perm, 1).unwrap(), 4)
            .unwrap()
            .to_vec3::<f64>()
            .unwrap();
        for (a, b) in out[0].iter().zip(&base[0]) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let (enc, _) = tiny(1, 2, 0, DType::F32);
        assert!(enc.encode(&LatentGrid::zeros(3, 6, 6)).is_err());
        assert!(enc.encode_prefix(&LatentGrid::zeros(3, 4, 4), 3).is_err());
    }
}
