//! Small transformer toolkit on top of candle tensors.
//!
//! Parameters are created through a [`ParamSource`] so the same model code
//! can either initialize fresh trainable variables or bind to a set of
//! stored tensors (a checkpoint, or EMA weights).

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-6;

/// How a freshly created parameter is initialized.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

pub trait ParamSource {
    fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor>;
}

/// Trainable parameters, keyed by dotted path.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Snapshot of the current values, detached from the autograd graph.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Overwrite every variable from `values`, which must match names and shapes exactly.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        check_same_layout(&self.layout(), &layout_of(values))?;
        for (k, v) in &self.vars {
            v.set(&values[k].to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn layout(&self) -> BTreeMap<String, Vec<usize>> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.dims().to_vec()))
            .collect()
    }
}

pub fn layout_of(map: &BTreeMap<String, Tensor>) -> BTreeMap<String, Vec<usize>> {
    map.iter().map(|(k, v)| (k.clone(), v.dims().to_vec())).collect()
}

/// Compare two name→shape manifests and describe every difference.
pub fn check_same_layout(
    expected: &BTreeMap<String, Vec<usize>>,
    found: &BTreeMap<String, Vec<usize>>,
) -> Result<()> {
    let mut diff = Vec::new();
    for (k, shape) in expected {
        match found.get(k) {
            None => diff.push(format!("  missing tensor {k} {shape:?}")),
            Some(s) if s != shape => diff.push(format!("  {k}: expected {shape:?}, found {s:?}")),
            _ => {}
        }
    }
    for (k, shape) in found {
        if !expected.contains_key(k) {
            diff.push(format!("  unexpected tensor {k} {shape:?}"));
        }
    }
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckpointMismatch(diff.join("\n")))
    }
}

/// Creates new variables in a [`ParamStore`] from a seeded generator.
pub struct InitSource<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl ParamSource for InitSource<'_> {
    fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.store.vars.contains_key(name) {
            return Err(Error::Validation(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.store.vars.insert(name.to_string(), var);
        Ok(out)
    }
}

/// Binds to existing tensors by name, checking shapes.
pub struct MapSource<'a> {
    pub map: &'a BTreeMap<String, Tensor>,
    pub dtype: DType,
}

impl ParamSource for MapSource<'_> {
    fn get(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<Tensor> {
        let t = self
            .map
            .get(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("  missing tensor {name} {shape:?}")))?;
        if t.dims() != shape {
            return Err(Error::CheckpointMismatch(format!(
                "  {name}: expected {shape:?}, found {:?}",
                t.dims()
            )));
        }
        Ok(t.to_dtype(self.dtype)?)
    }
}

/// Binds to the variables of a store (sharing storage, so updates are visible).
pub struct StoreSource<'a> {
    pub store: &'a ParamStore,
}

impl ParamSource for StoreSource<'_> {
    fn get(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<Tensor> {
        let v = self
            .store
            .get(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("  missing tensor {name} {shape:?}")))?;
        if v.dims() != shape {
            return Err(Error::CheckpointMismatch(format!(
                "  {name}: expected {shape:?}, found {:?}",
                v.dims()
            )));
        }
        Ok(v.as_tensor().clone())
    }
}

/// Dense layer storing its weight as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(src: &mut dyn ParamSource, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        Self::with_init(src, name, d_in, d_out, bias, Init::Normal(0.02))
    }

    pub fn with_init(
        src: &mut dyn ParamSource,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = src.get(&format!("{name}.weight"), &[d_in, d_out], init)?;
        let bias = if bias {
            Some(src.get(&format!("{name}.bias"), &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().unwrap();
        let rows = x.elem_count() / d_in;
        let y = x.reshape((rows, d_in))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Root-mean-square normalization over the last dimension.
pub fn rms_norm(x: &Tensor, weight: Option<&Tensor>) -> Result<Tensor> {
    let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
    let y = x.broadcast_div(&(ms + NORM_EPS)?.sqrt()?)?;
    Ok(match weight {
        Some(w) => y.broadcast_mul(w)?,
        None => y,
    })
}

#[derive(Debug, Clone)]
pub struct RmsNorm {
    pub weight: Tensor,
}

impl RmsNorm {
    pub fn new(src: &mut dyn ParamSource, name: &str, dim: usize) -> Result<Self> {
        Ok(RmsNorm {
            weight: src.get(&format!("{name}.weight"), &[dim], Init::Ones)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        rms_norm(x, Some(&self.weight))
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Multi-head self-attention without biases.
#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(src: &mut dyn ParamSource, name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Validation(format!("width {width} not divisible by {heads} heads")));
        }
        Ok(Attention {
            qkv: Linear::new(src, &format!("{name}.qkv"), width, 3 * width, false)?,
            out: Linear::new(src, &format!("{name}.out"), width, width, false)?,
            heads,
        })
    }

    /// `x` is `[batch, tokens, width]`; `mask` is an additive `[tokens, tokens]`
    /// bias with `-inf` on forbidden query→key pairs.
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, t, w) = x.dims3()?;
        let hd = w / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, t, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let scores = match mask {
            Some(m) => scores.broadcast_add(m)?,
            None => scores,
        };
        let attn = softmax_last(&scores)?;
        let y = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, t, w))?;
        self.out.forward(&y)
    }
}

/// Gated feed-forward with SiLU gate.
#[derive(Debug, Clone)]
pub struct SwiGlu {
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
}

impl SwiGlu {
    pub fn new(src: &mut dyn ParamSource, name: &str, width: usize, hidden: usize) -> Result<Self> {
        Ok(SwiGlu {
            gate: Linear::new(src, &format!("{name}.gate"), width, hidden, false)?,
            up: Linear::new(src, &format!("{name}.up"), width, hidden, false)?,
            down: Linear::new(src, &format!("{name}.down"), hidden, width, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.gate.forward(x)?.silu()?.mul(&self.up.forward(x)?)?;
        self.down.forward(&h)
    }
}

/// Pre-norm transformer block used by the encoder and the AR model.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: RmsNorm,
    pub attn: Attention,
    pub norm2: RmsNorm,
    pub mlp: SwiGlu,
}

impl Block {
    pub fn new(src: &mut dyn ParamSource, name: &str, dims: &TransformerDims) -> Result<Self> {
        Ok(Block {
            norm1: RmsNorm::new(src, &format!("{name}.norm1"), dims.width)?,
            attn: Attention::new(src, &format!("{name}.attn"), dims.width, dims.heads)?,
            norm2: RmsNorm::new(src, &format!("{name}.norm2"), dims.width)?,
            mlp: SwiGlu::new(src, &format!("{name}.mlp"), dims.width, dims.mlp_hidden())?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, mask)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

/// Depth/width/heads of a transformer stack.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransformerDims {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl TransformerDims {
    /// Width `64·d` and `d` heads.
    pub fn from_depth(depth: usize, mlp_ratio: f64) -> Self {
        TransformerDims {
            depth,
            width: 64 * depth,
            heads: depth,
            mlp_ratio,
        }
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.width as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Validation(format!("invalid transformer dims {self:?}")));
        }
        Ok(())
    }
}

/// Fail with [`Error::NonFinite`] if any element of `x` is NaN or infinite.
pub fn ensure_finite(x: &Tensor, stage: &'static str, index: usize) -> Result<()> {
    let s = x.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { stage, index })
    }
}

/// Sinusoidal features of a scalar in `[0, 1]`, scaled by 1000 as in
/// diffusion timestep embeddings. Returns `[n, dim]`.
pub fn sinusoidal_embedding(t: &[f64], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let x = ti * 1000.0;
        let mut row = vec![0.0; dim];
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            row[i] = (x * freq).cos();
            row[half + i] = (x * freq).sin();
        }
        data.extend(row);
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}
