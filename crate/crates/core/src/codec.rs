//! Pixel ⇄ latent boundary.
//!
//! The tokenizer never sees pixels directly; it works on a [`LatentGrid`]
//! produced by a codec. `IdentityPatch(f)` is an exact space-to-depth
//! reshape; `TrainedAe` is a small convolutional autoencoder trained with
//! MSE plus a light KL term.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{bail_shape, bail_validation, Error, Result};
use crate::nn::{Init, InitSource, MapSource, ParamSource, ParamStore};
use crate::train::optim::{clip_grads, collect_grads, AdamW};

/// RGB image, row-major `H×W×3`, values nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            bail_shape!("image {height}×{width}×3 needs {} values, got {}", height * width * 3, data.len());
        }
        Ok(Image { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn hflip(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.data[(y * self.width + x) * 3 + c] = self.at(y, self.width - 1 - x, c);
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            bail_validation!("image contains non-finite pixels");
        }
        Ok(())
    }

    /// `[3, H, W]` tensor.
    pub fn to_chw_tensor(&self) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, 3), &Device::Cpu)?;
        Ok(t.permute((2, 0, 1))?.contiguous()?)
    }

    pub fn from_chw_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            bail_shape!("expected 3 channels, got {c}");
        }
        let data = t
            .to_dtype(DType::F32)?
            .permute((1, 2, 0))?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Image::new(h, w, data)
    }
}

/// `C×h×w` continuous latents, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl LatentGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height * width == 0 {
            bail_shape!("latent grid {channels}×{height}×{width} is empty");
        }
        if data.len() != channels * height * width {
            bail_shape!(
                "latent grid {channels}×{height}×{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            );
        }
        Ok(LatentGrid {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        LatentGrid {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, self.shape(), &Device::Cpu)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        LatentGrid::new(c, h, w, t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }
}

/// Selects how pixels become latents.
#[derive(Debug, Clone)]
pub enum Codec {
    IdentityPatch(usize),
    TrainedAe(Box<AutoEncoder>),
}

impl Codec {
    pub fn downsample(&self) -> usize {
        match self {
            Codec::IdentityPatch(f) => *f,
            Codec::TrainedAe(ae) => ae.config.factor,
        }
    }

    pub fn latent_channels(&self) -> usize {
        match self {
            Codec::IdentityPatch(f) => 3 * f * f,
            Codec::TrainedAe(ae) => ae.config.channels,
        }
    }

    pub fn latent_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let f = self.downsample();
        if f == 0 || height % f != 0 || width % f != 0 {
            bail_shape!("image {height}×{width} is not divisible by codec factor {f}");
        }
        Ok((self.latent_channels(), height / f, width / f))
    }

    pub fn encode_pixels(&self, image: &Image) -> Result<LatentGrid> {
        self.latent_shape(image.height, image.width)?;
        image.validate()?;
        match self {
            Codec::IdentityPatch(f) => Ok(space_to_depth(image, *f)),
            Codec::TrainedAe(ae) => ae.encode(image, LatentMode::Mode, None),
        }
    }

    pub fn decode_latents(&self, latents: &LatentGrid) -> Result<Image> {
        if latents.channels != self.latent_channels() {
            bail_shape!(
                "codec expects {} latent channels, got {}",
                self.latent_channels(),
                latents.channels
            );
        }
        match self {
            Codec::IdentityPatch(f) => Ok(depth_to_space(latents, *f)),
            Codec::TrainedAe(ae) => ae.decode(latents),
        }
    }
}

/// Channel `c·f² + dy·f + dx` of latent cell `(i, j)` holds pixel
/// `(i·f + dy, j·f + dx)` channel `c`.
fn space_to_depth(image: &Image, f: usize) -> LatentGrid {
    let (h, w) = (image.height / f, image.width / f);
    let channels = 3 * f * f;
    let mut data = vec![0.0; channels * h * w];
    for c in 0..3 {
        for dy in 0..f {
            for dx in 0..f {
                let ch = c * f * f + dy * f + dx;
                for i in 0..h {
                    for j in 0..w {
                        data[(ch * h + i) * w + j] = image.at(i * f + dy, j * f + dx, c);
                    }
                }
            }
        }
    }
    LatentGrid {
        channels,
        height: h,
        width: w,
        data,
    }
}

fn depth_to_space(latents: &LatentGrid, f: usize) -> Image {
    let (h, w) = (latents.height, latents.width);
    let mut image = Image::zeros(h * f, w * f);
    let iw = w * f;
    for c in 0..3 {
        for dy in 0..f {
            for dx in 0..f {
                let ch = c * f * f + dy * f + dx;
                for i in 0..h {
                    for j in 0..w {
                        image.data[((i * f + dy) * iw + j * f + dx) * 3 + c] = latents.data[(ch * h + i) * w + j];
                    }
                }
            }
        }
    }
    image
}

/// Latent read-out of the autoencoder posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    Mode,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub channels: usize,
    /// Power of two.
    pub factor: usize,
    pub hidden: usize,
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden == 0 {
            bail_validation!("autoencoder channels and hidden width must be positive");
        }
        if !self.factor.is_power_of_two() || self.factor < 2 {
            bail_validation!("autoencoder factor must be a power of two ≥ 2, got {}", self.factor);
        }
        Ok(())
    }

    fn stages(&self) -> usize {
        self.factor.trailing_zeros() as usize
    }
}

/// Convolutional autoencoder: `log2(factor)` stride-2 convolutions down,
/// transposed convolutions back up, SiLU in between.
#[derive(Debug, Clone)]
pub struct AutoEncoder {
    pub config: AeConfig,
    down: Vec<(Tensor, Tensor)>,
    to_latent: (Tensor, Tensor),
    from_latent: (Tensor, Tensor),
    up: Vec<(Tensor, Tensor)>,
    to_rgb: (Tensor, Tensor),
}

fn conv_params(src: &mut dyn ParamSource, name: &str, shape: [usize; 4], bias: usize) -> Result<(Tensor, Tensor)> {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    Ok((
        src.get(&format!("{name}.weight"), &shape, Init::Normal(fan_in.sqrt().recip()))?,
        src.get(&format!("{name}.bias"), &[bias], Init::Zeros)?,
    ))
}

fn add_bias(x: Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?)
}

impl AutoEncoder {
    pub fn build(config: AeConfig, src: &mut dyn ParamSource) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let mut down = Vec::new();
        let mut c_in = 3;
        for i in 0..config.stages() {
            down.push(conv_params(src, &format!("ae.down.{i}"), [h, c_in, 2, 2], h)?);
            c_in = h;
        }
        let to_latent = conv_params(src, "ae.to_latent", [2 * config.channels, h, 1, 1], 2 * config.channels)?;
        let from_latent = conv_params(src, "ae.from_latent", [h, config.channels, 1, 1], h)?;
        let mut up = Vec::new();
        for i in 0..config.stages() {
            // conv_transpose2d kernels are [in, out, kh, kw]
            up.push(conv_params(src, &format!("ae.up.{i}"), [h, h, 2, 2], h)?);
        }
        let to_rgb = conv_params(src, "ae.to_rgb", [3, h, 1, 1], 3)?;
        Ok(AutoEncoder {
            config,
            down,
            to_latent,
            from_latent,
            up,
            to_rgb,
        })
    }

    pub fn from_tensors(config: AeConfig, map: &BTreeMap<String, Tensor>) -> Result<Self> {
        Self::build(config, &mut MapSource { map, dtype: DType::F32 })
    }

    /// `[B, 3, H, W]` → (mean, logvar), each `[B, C, H/f, W/f]`.
    fn posterior(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut h = x.clone();
        for (w, b) in &self.down {
            h = add_bias(h.conv2d(w, 0, 2, 1, 1)?, b)?.silu()?;
        }
        let stats = add_bias(h.conv2d(&self.to_latent.0, 0, 1, 1, 1)?, &self.to_latent.1)?;
        let c = self.config.channels;
        let mean = stats.narrow(1, 0, c)?;
        let logvar = stats.narrow(1, c, c)?.clamp(-20.0, 10.0)?;
        Ok((mean, logvar))
    }

    fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = add_bias(z.conv2d(&self.from_latent.0, 0, 1, 1, 1)?, &self.from_latent.1)?.silu()?;
        for (w, b) in &self.up {
            h = add_bias(h.conv_transpose2d(w, 0, 0, 2, 1)?, b)?.silu()?;
        }
        add_bias(h.conv2d(&self.to_rgb.0, 0, 1, 1, 1)?, &self.to_rgb.1)
    }

    pub fn encode(&self, image: &Image, mode: LatentMode, rng: Option<&mut ChaCha8Rng>) -> Result<LatentGrid> {
        let x = image.to_chw_tensor()?.unsqueeze(0)?;
        let (mean, logvar) = self.posterior(&x)?;
        let z = match (mode, rng) {
            (LatentMode::Mode, _) => mean,
            (LatentMode::Sample, Some(rng)) => {
                let noise = normal_like(&mean, rng)?;
                (mean + (logvar * 0.5)?.exp()?.mul(&noise)?)?
            }
            (LatentMode::Sample, None) => bail_validation!("latent sampling needs a random generator"),
        };
        LatentGrid::from_tensor(&z.squeeze(0)?)
    }

    pub fn decode(&self, latents: &LatentGrid) -> Result<Image> {
        let x = self.decode_tensor(&latents.to_tensor()?.unsqueeze(0)?)?;
        Image::from_chw_tensor(&x.squeeze(0)?)
    }
}

pub(crate) fn normal_like(t: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let data: Vec<f32> = (0..t.elem_count()).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, t.shape(), t.device())?.to_dtype(t.dtype())?)
}

#[derive(Debug, Clone)]
pub struct AeTrainSettings {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for AeTrainSettings {
    fn default() -> Self {
        AeTrainSettings {
            steps: 500,
            lr: 2e-3,
            batch_size: 8,
            kl_weight: 1e-6,
            seed: 0,
        }
    }
}

/// Fit the autoencoder with MSE plus a small KL term toward N(0, I).
/// Returns the model and the final-step reconstruction loss.
pub fn train_autoencoder(
    images: &[Image],
    config: AeConfig,
    settings: &AeTrainSettings,
) -> Result<(AutoEncoder, BTreeMap<String, Tensor>, f64)> {
    if images.is_empty() {
        bail_validation!("autoencoder training needs at least one image");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut store = ParamStore::new(DType::F32);
    let ae = AutoEncoder::build(config, &mut InitSource { store: &mut store, rng: &mut rng })?;
    let mut opt = AdamW::new(&store, 0.9, 0.99, 1e-8, 0.0)?;
    let all: Vec<Tensor> = images.iter().map(|im| im.to_chw_tensor()).collect::<Result<_>>()?;
    let mut last = f64::NAN;
    for _ in 0..settings.steps {
        let idx: Vec<usize> = (0..settings.batch_size.min(images.len()))
            .map(|_| rng.random_range(0..images.len()))
            .collect();
        let x = Tensor::stack(&idx.iter().map(|&i| all[i].clone()).collect::<Vec<_>>(), 0)?;
        let (mean, logvar) = ae.posterior(&x)?;
        let noise = normal_like(&mean, &mut rng)?;
        let z = (&mean + (&logvar * 0.5)?.exp()?.mul(&noise)?)?;
        let recon = ae.decode_tensor(&z)?;
        let mse = recon.sub(&x)?.sqr()?.mean_all()?;
        let kl = ((mean.sqr()? + logvar.exp()? - &logvar)? - 1.0)?.mean_all()? * 0.5;
        let loss = (&mse + (kl? * settings.kl_weight)?)?;
        last = mse.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !last.is_finite() {
            return Err(Error::NonFinite { stage: "autoencoder loss", index: 0 });
        }
        let mut grads = collect_grads(&store, &loss.backward()?)?;
        clip_grads(&mut grads, 1.0)?;
        opt.apply(&store, &grads, settings.lr)?;
    }
    let snapshot = store.snapshot()?;
    let ae = AutoEncoder::from_tensors(ae.config.clone(), &snapshot)?;
    Ok((ae, snapshot, last))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ramp(h: usize, w: usize) -> Image {
        let data = (0..h * w * 3).map(|i| ((i % 97) as f32 / 48.0) - 1.0).collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn identity_shapes() {
        let codec = Codec::IdentityPatch(2);
        let lat = codec.encode_pixels(&ramp(32, 32)).unwrap();
        assert_eq!(lat.shape(), (12, 16, 16));
        assert!(matches!(codec.encode_pixels(&ramp(33, 33)), Err(Error::Shape(_))));
    }

    #[test]
    fn identity_roundtrip_exact() {
        let codec = Codec::IdentityPatch(2);
        let img = ramp(32, 32);
        assert_eq!(codec.decode_latents(&codec.encode_pixels(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn nan_pixels_rejected() {
        let mut img = ramp(4, 4);
        img.data[5] = f32::NAN;
        assert!(matches!(Codec::IdentityPatch(2).encode_pixels(&img), Err(Error::Validation(_))));
    }

    #[test]
    fn decode_rejects_wrong_channels() {
        assert!(Codec::IdentityPatch(2).decode_latents(&LatentGrid::zeros(3, 4, 4)).is_err());
    }

    fn random_ae(config: AeConfig) -> AutoEncoder {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        AutoEncoder::build(config, &mut InitSource { store: &mut store, rng: &mut rng }).unwrap()
    }

    #[test]
    fn ae_latent_shape_factor_8() {
        let ae = random_ae(AeConfig { channels: 16, factor: 8, hidden: 8 });
        let codec = Codec::TrainedAe(Box::new(ae));
        let lat = codec.encode_pixels(&ramp(256, 256)).unwrap();
        assert_eq!(lat.shape(), (16, 32, 32));
    }

    #[test]
    fn ae_zero_latents_decode_finite() {
        let ae = random_ae(AeConfig { channels: 4, factor: 4, hidden: 8 });
        let img = Codec::TrainedAe(Box::new(ae)).decode_latents(&LatentGrid::zeros(4, 4, 4)).unwrap();
        assert_eq!((img.height, img.width), (16, 16));
        assert!(img.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ae_overfits_training_images() {
        let images = crate::data::synth_dataset(4, 0).images;
        let config = AeConfig { channels: 8, factor: 2, hidden: 32 };
        let settings = AeTrainSettings { steps: 400, ..Default::default() };
        let (ae, _, _) = train_autoencoder(&images, config, &settings).unwrap();
        let codec = Codec::TrainedAe(Box::new(ae));
        let mut mae = 0.0;
        for img in &images {
            let rec = codec.decode_latents(&codec.encode_pixels(img).unwrap()).unwrap();
            mae += crate::eval::metrics::mae(img, &rec).unwrap() / images.len() as f64;
        }
        // reference overfit runs land well below this
        assert!(mae < 0.1, "mae {mae}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn identity_shape_and_roundtrip(f in 1usize..4, hb in 1usize..6, wb in 1usize..6, seed in 0u64..1000) {
            let (h, w) = (hb * f, wb * f);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..h * w * 3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let img = Image::new(h, w, data).unwrap();
            let codec = Codec::IdentityPatch(f);
            let lat = codec.encode_pixels(&img).unwrap();
            prop_assert_eq!(lat.shape(), (3 * f * f, hb, wb));
            prop_assert_eq!(codec.decode_latents(&lat).unwrap(), img);
        }
    }
}
