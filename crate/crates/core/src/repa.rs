//! Representation alignment: an early decoder layer is projected by a small
//! MLP and pulled toward frozen per-patch features with a cosine loss.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::Image;
use crate::error::{bail_shape, bail_validation, Error, Result};
use crate::nn::{Linear, ParamSource};

/// Oracle settings as they appear in a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSpec {
    /// `"random"` or `"file"`.
    pub provider: String,
    pub grid_side: usize,
    pub feature_dim: usize,
    pub seed: u64,
    /// Features file for the `"file"` provider.
    pub path: String,
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec {
            provider: "random".into(),
            grid_side: 8,
            feature_dim: 64,
            seed: 0,
            path: String::new(),
        }
    }
}

impl OracleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_side == 0 || self.feature_dim == 0 {
            bail_validation!("oracle grid_side and feature_dim must be ≥ 1");
        }
        match self.provider.as_str() {
            "random" => Ok(()),
            "file" if !self.path.is_empty() => Ok(()),
            "file" => Err(Error::Config("oracle provider \"file\" needs oracle.path".into())),
            other => Err(Error::Config(format!("unknown oracle provider {other:?}; expected random or file"))),
        }
    }
}

/// Source of per-image feature grids (`grid_side² × feature_dim`, row-major).
#[derive(Debug, Clone)]
pub enum FeatureProvider {
    /// Fixed Gaussian linear map applied to each non-overlapping image cell.
    RandomProjection {
        seed: u64,
        /// Cache of `[cell_dim, feature_dim]` matrices by cell side.
        matrices: HashMap<usize, Vec<f32>>,
    },
    Precomputed {
        path: PathBuf,
        records: HashMap<u32, Vec<f32>>,
    },
}

#[derive(Debug, Clone)]
pub struct FeatureOracle {
    pub grid_side: usize,
    pub feature_dim: usize,
    pub provider: FeatureProvider,
}

/// Linear-interpolation taps from `src` samples to `dst` samples with
/// half-pixel centers and edge clamping.
fn interp_taps(src: usize, dst: usize) -> Vec<[(usize, f64); 2]> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(src - 1);
            let f = x - x0 as f64;
            [(x0, 1.0 - f), (x1, f)]
        })
        .collect()
}

/// `[dst_h·dst_w, src_h·src_w]` bilinear resampling matrix over raster-ordered grids.
pub fn bilinear_matrix(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Vec<f64> {
    let ty = interp_taps(src_h, dst_h);
    let tx = interp_taps(src_w, dst_w);
    let n_src = src_h * src_w;
    let mut m = vec![0.0; dst_h * dst_w * n_src];
    for (oy, ys) in ty.iter().enumerate() {
        for (ox, xs) in tx.iter().enumerate() {
            let row = &mut m[(oy * dst_w + ox) * n_src..][..n_src];
            for &(y, wy) in ys {
                for &(x, wx) in xs {
                    row[y * src_w + x] += wy * wx;
                }
            }
        }
    }
    m
}

fn resize_image(img: &Image, side: usize) -> Image {
    if img.height == side && img.width == side {
        return img.clone();
    }
    let ty = interp_taps(img.height, side);
    let tx = interp_taps(img.width, side);
    let mut data = Vec::with_capacity(side * side * 3);
    for ys in &ty {
        for xs in &tx {
            for c in 0..3 {
                let mut v = 0.0;
                for &(y, wy) in ys {
                    for &(x, wx) in xs {
                        v += wy * wx * img.at(y, x, c) as f64;
                    }
                }
                data.push(v as f32);
            }
        }
    }
    Image { height: side, width: side, data }
}

const FEATURES_MAGIC: &[u8; 8] = b"FTFEAT1\0";

/// Write a features file: magic, `u32` grid_side, feature_dim, record count,
/// then per record a `u32` dataset index followed by `grid_side²·feature_dim`
/// `f32` values. All little-endian.
pub fn write_features_file(path: &Path, grid_side: usize, feature_dim: usize, records: &[(u32, Vec<f32>)]) -> Result<()> {
    let n = grid_side * grid_side * feature_dim;
    let mut buf = Vec::with_capacity(20 + records.len() * (4 + 4 * n));
    buf.extend_from_slice(FEATURES_MAGIC);
    for v in [grid_side as u32, feature_dim as u32, records.len() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for (idx, feats) in records {
        if feats.len() != n {
            bail_shape!("record {idx} has {} values, expected {n}", feats.len());
        }
        buf.extend_from_slice(&idx.to_le_bytes());
        for f in feats {
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::format(path, format!("truncated file: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_features_file(path: &Path) -> Result<(usize, usize, HashMap<u32, Vec<f32>>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::format(path, "file too short"))?;
    if &magic != FEATURES_MAGIC {
        return Err(Error::format(path, "not a features file (bad magic)"));
    }
    let grid_side = read_u32(&mut r, path)? as usize;
    let feature_dim = read_u32(&mut r, path)? as usize;
    let count = read_u32(&mut r, path)?;
    let n = grid_side * grid_side * feature_dim;
    let mut records = HashMap::new();
    for _ in 0..count {
        let idx = read_u32(&mut r, path)?;
        let mut raw = vec![0u8; 4 * n];
        r.read_exact(&mut raw).map_err(|e| Error::format(path, format!("truncated record {idx}: {e}")))?;
        let feats: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, format!("record {idx} contains non-finite values")));
        }
        records.insert(idx, feats);
    }
    if !r.is_empty() {
        return Err(Error::format(path, format!("{} trailing bytes", r.len())));
    }
    Ok((grid_side, feature_dim, records))
}

impl FeatureOracle {
    pub fn random(grid_side: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        if grid_side == 0 || feature_dim == 0 {
            bail_validation!("oracle grid_side and feature_dim must be ≥ 1");
        }
        Ok(FeatureOracle {
            grid_side,
            feature_dim,
            provider: FeatureProvider::RandomProjection { seed, matrices: HashMap::new() },
        })
    }

    pub fn precomputed(path: &Path) -> Result<Self> {
        let (grid_side, feature_dim, records) = read_features_file(path)?;
        Ok(FeatureOracle {
            grid_side,
            feature_dim,
            provider: FeatureProvider::Precomputed { path: path.to_path_buf(), records },
        })
    }

    pub fn from_spec(spec: &OracleSpec) -> Result<Self> {
        spec.validate()?;
        if spec.provider == "random" {
            return Self::random(spec.grid_side, spec.feature_dim, spec.seed);
        }
        let o = Self::precomputed(Path::new(&spec.path))?;
        if (o.grid_side, o.feature_dim) != (spec.grid_side, spec.feature_dim) {
            return Err(Error::Config(format!(
                "features file declares grid {} × dim {}, config says grid {} × dim {}",
                o.grid_side, o.feature_dim, spec.grid_side, spec.feature_dim
            )));
        }
        Ok(o)
    }

    pub fn positions(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// Features for dataset item `index` (used by the precomputed provider)
    /// with pixels `image` (used by the projection provider).
    pub fn features(&mut self, index: usize, image: &Image) -> Result<Vec<f32>> {
        let (g, f) = (self.grid_side, self.feature_dim);
        match &mut self.provider {
            FeatureProvider::Precomputed { path, records } => records
                .get(&(index as u32))
                .cloned()
                .ok_or_else(|| Error::format(&*path, format!("no features for dataset index {index}"))),
            FeatureProvider::RandomProjection { seed, matrices } => {
                let cell = image.height.max(image.width).div_ceil(g).max(1);
                let img = resize_image(image, g * cell);
                let cell_dim = cell * cell * 3;
                let seed = *seed;
                let m = matrices.entry(cell).or_insert_with(|| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (cell as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    let s = 1.0 / (cell_dim as f64).sqrt();
                    (0..cell_dim * f)
                        .map(|_| (s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)) as f32)
                        .collect()
                });
                let mut out = vec![0f32; g * g * f];
                let mut patch = Vec::with_capacity(cell_dim);
                for gy in 0..g {
                    for gx in 0..g {
                        patch.clear();
                        for y in 0..cell {
                            for x in 0..cell {
                                for c in 0..3 {
                                    patch.push(img.at(gy * cell + y, gx * cell + x, c));
                                }
                            }
                        }
                        let row = &mut out[(gy * g + gx) * f..][..f];
                        for (i, &p) in patch.iter().enumerate() {
                            if p != 0.0 {
                                for (o, &w) in row.iter_mut().zip(&m[i * f..(i + 1) * f]) {
                                    *o += p * w;
                                }
                            }
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Three-layer SiLU MLP from decoder width to the oracle feature dimension.
#[derive(Debug, Clone)]
pub struct Projector {
    layers: [Linear; 3],
}

impl Projector {
    pub fn build(src: &mut dyn ParamSource, width: usize, hidden: usize, feature_dim: usize) -> Result<Self> {
        Ok(Projector {
            layers: [
                Linear::new(src, "repa.proj.0", width, hidden, true)?,
                Linear::new(src, "repa.proj.1", hidden, hidden, true)?,
                Linear::new(src, "repa.proj.2", hidden, feature_dim, true)?,
            ],
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.layers[0].forward(x)?.silu()?;
        let h = self.layers[1].forward(&h)?.silu()?;
        self.layers[2].forward(&h)
    }
}

/// Mean of `1 − cos` over positions of `[B, P, F]` inputs, and the number
/// of positions where either vector has zero norm (cosine taken as 0 there).
pub fn cosine_loss(pred: &Tensor, target: &Tensor) -> Result<(Tensor, usize)> {
    if pred.dims() != target.dims() {
        bail_shape!("cosine loss inputs {:?} vs {:?}", pred.dims(), target.dims());
    }
    let dot = (pred * target)?.sum(D::Minus1)?;
    let np = pred.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nt = target.sqr()?.sum(D::Minus1)?.sqrt()?;
    let denom = (&np * &nt)?;
    let degenerate = denom
        .detach()
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .iter()
        .filter(|&&d| d == 0.0)
        .count();
    let cos = dot.div(&denom.maximum(1e-30)?)?;
    Ok(((1.0 - cos.mean_all()?.to_dtype(pred.dtype())?)?, degenerate))
}

/// Alignment loss for layer activations `[B, N, w]` over a patch grid
/// `grid = (h, w)` against oracle features `[B, G², F]`.
#[derive(Debug, Clone)]
pub struct RepaHead {
    pub projector: Projector,
    /// `[G², N]`
    resample: Tensor,
}

impl RepaHead {
    pub fn build(
        src: &mut dyn ParamSource,
        width: usize,
        mlp_ratio: f64,
        patch_grid: (usize, usize),
        grid_side: usize,
        feature_dim: usize,
        dtype: DType,
    ) -> Result<Self> {
        let hidden = ((width as f64 * mlp_ratio).round() as usize).max(1);
        let projector = Projector::build(src, width, hidden, feature_dim)?;
        let m = bilinear_matrix(patch_grid.0, patch_grid.1, grid_side, grid_side);
        let resample = Tensor::from_vec(m, (grid_side * grid_side, patch_grid.0 * patch_grid.1), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(RepaHead { projector, resample })
    }

    pub fn loss(&self, acts: &Tensor, oracle: &Tensor) -> Result<(Tensor, usize)> {
        let (b, n, _) = acts.dims3()?;
        if n != self.resample.dim(1)? {
            bail_shape!("{n} activation rows for a {}-patch grid", self.resample.dim(1)?);
        }
        let proj = self.projector.forward(acts)?;
        let f = proj.dim(2)?;
        let g2 = self.resample.dim(0)?;
        let r = self.resample.unsqueeze(0)?.broadcast_as((b, g2, n))?.contiguous()?;
        let up = r.matmul(&proj.contiguous()?)?;
        if oracle.dims() != [b, g2, f] {
            bail_shape!("oracle features {:?}, expected {:?}", oracle.dims(), [b, g2, f]);
        }
        cosine_loss(&up, oracle)
    }
}
