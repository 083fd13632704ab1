//! Training loops for the tokenizer (Stage 1) and the AR model (Stage 2).
//!
//! Both share [`Trainer`]: one seeded ChaCha stream drives initialization,
//! batch selection and every per-step draw, and is stored in checkpoints so
//! a resumed run continues the exact same stream.

pub mod checkpoint;
pub mod optim;

use candle_core::{DType, Device, Tensor};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ar::{ar_loss, ArConfig, ArModel};
use crate::codec::{Codec, Image, LatentGrid, LatentMode};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{bail_validation, Error, Result};
use crate::nn::{InitSource, MapSource, ParamStore, StoreSource};
use crate::repa::FeatureOracle;
use crate::tokenizer::{stage1_loss, Quantizer, Stage1Draws, Tokenizer, TokenizerSpec};
use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
use optim::{clip_grads, collect_grads, ema_update, AdamW, LrSchedule, OptimSettings, TensorMap};

/// One logged training step.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Stage 1: flow term; Stage 2: same as `loss`.
    pub rf: f64,
    pub repa: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Optimizer, EMA and RNG state for one run.
pub struct Trainer {
    pub store: ParamStore,
    pub ema: TensorMap,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub schedule: LrSchedule,
    pub settings: OptimSettings,
}

impl Trainer {
    pub fn new(store: ParamStore, rng: ChaCha8Rng, settings: &OptimSettings, tokens_per_step: u64) -> Result<Self> {
        settings.validate()?;
        let schedule = settings.schedule(tokens_per_step);
        let wd = settings.resolved_weight_decay(schedule.total_steps)?;
        log::info!(
            "schedule: {} steps ({} warmup), weight decay {wd:.4e}",
            schedule.total_steps,
            schedule.warmup_steps
        );
        let opt = AdamW::new(&store, settings.beta1, settings.beta2, settings.eps, wd)?
            .with_lr_scale("enc.", settings.encoder_lr_scale);
        let ema = store.snapshot()?;
        Ok(Trainer { store, ema, opt, rng, step: 0, schedule, settings: settings.clone() })
    }

    /// Continue from a checkpoint of the same layout.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.check_layout(&self.store.layout())?;
        self.store.assign(&ckpt.params)?;
        let to = |m: &TensorMap| -> Result<TensorMap> {
            m.iter().map(|(k, v)| Ok((k.clone(), v.to_dtype(self.store.dtype())?))).collect()
        };
        self.ema = to(&ckpt.ema)?;
        self.opt.m = to(&ckpt.adam_m)?;
        self.opt.v = to(&ckpt.adam_v)?;
        self.opt.step = ckpt.meta.adam_step;
        self.step = ckpt.meta.step;
        self.rng = ckpt
            .meta
            .rng
            .clone()
            .ok_or_else(|| Error::CheckpointMismatch("  checkpoint has no RNG state; cannot resume".into()))?;
        Ok(())
    }

    pub fn done(&self) -> bool {
        self.step >= self.schedule.total_steps
    }

    /// Backward, clip, AdamW update, EMA update.
    pub fn apply(&mut self, loss: &Tensor) -> Result<StepStats> {
        let grads = loss.backward()?;
        let mut grads = collect_grads(&self.store, &grads)?;
        let (grad_norm, clipped_norm) = clip_grads(&mut grads, self.settings.clip_norm)?;
        let lr = self.schedule.lr_at(self.step);
        self.opt.apply(&self.store, &grads, lr)?;
        self.ema = ema_update(&self.ema, &self.store.snapshot()?, self.settings.ema_decay)?;
        self.step += 1;
        Ok(StepStats { lr, grad_norm, clipped_norm })
    }

    pub fn checkpoint(&self, kind: &str, config: &RunConfig, model: serde_json::Value) -> Result<Checkpoint> {
        Ok(Checkpoint {
            meta: CheckpointMeta {
                version: CHECKPOINT_VERSION,
                kind: kind.into(),
                step: self.step,
                adam_step: self.opt.step,
                rng: Some(self.rng.clone()),
                config: serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?,
                model,
            },
            params: self.store.snapshot()?,
            ema: self.ema.clone(),
            adam_m: self.opt.m.clone(),
            adam_v: self.opt.v.clone(),
        })
    }

    fn batch<R: Rng>(rng: &mut R, n: usize, batch: usize) -> Vec<usize> {
        let mut idx = sample_indices(rng, n, batch.min(n)).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Controls outside the run configuration.
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub resume: Option<&'a Checkpoint>,
    /// Stop once this many steps have been taken in total.
    pub stop_at: Option<u64>,
    /// Called with every intermediate checkpoint (`checkpoint_every`).
    pub on_checkpoint: Option<&'a mut dyn FnMut(&Checkpoint) -> Result<()>>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

fn check_finite(v: f64, step: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        log::error!("non-finite loss at step {step}");
        Err(Error::NonFinite { stage: "training loss", index: step as usize })
    }
}

/// Precomputed per-image inputs for Stage 1 (both orientations when
/// flipping is enabled).
struct Stage1Data {
    images: Vec<Vec<Image>>,
    latents: Vec<Vec<LatentGrid>>,
    features: Vec<Vec<Vec<f32>>>,
}

fn prepare_stage1(cfg: &RunConfig, dataset: &Dataset, codec: &Codec, oracle: &mut Option<FeatureOracle>) -> Result<Stage1Data> {
    let mut data = Stage1Data { images: Vec::new(), latents: Vec::new(), features: Vec::new() };
    for (i, img) in dataset.images.iter().enumerate() {
        let mut views = vec![img.clone()];
        if cfg.data.hflip {
            views.push(img.hflip());
        }
        let lat = views.iter().map(|v| codec.encode_pixels(v)).collect::<Result<Vec<_>>>()?;
        let feats = match oracle {
            Some(o) => views.iter().map(|v| o.features(i, v)).collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        data.images.push(views);
        data.latents.push(lat);
        data.features.push(feats);
    }
    Ok(data)
}

fn stack(rows: &[&[f32]], shape: &[usize], dtype: DType) -> Result<Tensor> {
    let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tokenizer_model_json(spec: &TokenizerSpec) -> serde_json::Value {
    serde_json::to_value(spec).expect("spec serializes")
}

/// Stage 1: train the tokenizer on `dataset` encoded by `codec`.
pub fn train_tokenizer(cfg: &RunConfig, dataset: &Dataset, codec: &Codec, mut opts: TrainOptions) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        bail_validation!("training dataset is empty");
    }
    cfg.validate()?;
    let spec = cfg.tokenizer_spec()?;
    let dtype = DType::F32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new(dtype);
    Tokenizer::build(spec.clone(), &mut InitSource { store: &mut store, rng: &mut rng }, dtype)?;
    let tok = Tokenizer::build(spec.clone(), &mut StoreSource { store: &store }, dtype)?;

    let repa_weight = cfg.repa_weight();
    let mut oracle = if repa_weight > 0.0 { Some(FeatureOracle::from_spec(&cfg.oracle)?) } else { None };
    let data = prepare_stage1(cfg, dataset, codec, &mut oracle)?;
    let draws_cfg = cfg.draw_settings()?;
    let geom = spec.geometry;
    let b = cfg.train.batch_size.min(dataset.len());
    let tokens_per_step = (b * geom.num_patches()) as u64;

    let mut trainer = Trainer::new(store, rng, &cfg.train, tokens_per_step)?;
    if let Some(ckpt) = opts.resume {
        ckpt.expect_kind("tokenizer", std::path::Path::new("resume checkpoint"))?;
        trainer.restore(ckpt)?;
    }
    let sample_latents = cfg.codec.kind == "ae" && cfg.codec.latent_mode == "sample";
    let model_json = tokenizer_model_json(&spec);
    let stop = opts.stop_at.unwrap_or(u64::MAX).min(trainer.schedule.total_steps);
    let mut log = Vec::new();
    while trainer.step < stop {
        let idx = Trainer::batch(&mut trainer.rng, dataset.len(), b);
        let views: Vec<usize> = idx
            .iter()
            .map(|&i| if data.images[i].len() > 1 { trainer.rng.random_range(0..2) } else { 0 })
            .collect();
        let mut lat_rows: Vec<Vec<f32>> = Vec::with_capacity(b);
        for (&i, &v) in idx.iter().zip(&views) {
            let lat = match (sample_latents, codec) {
                (true, Codec::TrainedAe(ae)) => ae.encode(&data.images[i][v], LatentMode::Sample, Some(&mut trainer.rng))?.data,
                _ => data.latents[i][v].data.clone(),
            };
            lat_rows.push(lat);
        }
        let rows: Vec<&[f32]> = lat_rows.iter().map(|r| r.as_slice()).collect();
        let x0 = stack(&rows, &[b, geom.channels, geom.height, geom.width], dtype)?;
        let feats = if oracle.is_some() {
            let rows: Vec<&[f32]> = idx.iter().zip(&views).map(|(&i, &v)| data.features[i][v].as_slice()).collect();
            Some(stack(&rows, &[b, cfg.oracle.grid_side * cfg.oracle.grid_side, cfg.oracle.feature_dim], dtype)?)
        } else {
            None
        };
        let draws = Stage1Draws::sample(&mut trainer.rng, b, &geom, &draws_cfg, dtype)?;
        let loss = stage1_loss(&tok, &x0, feats.as_ref(), &draws, repa_weight, &Quantizer::StraightThrough)?;
        let value = loss.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        check_finite(value, trainer.step)?;
        let stats = trainer.apply(&loss.total)?;
        let row = LogRow {
            step: trainer.step,
            lr: stats.lr,
            loss: value,
            rf: loss.rf,
            repa: loss.repa,
            grad_norm: stats.grad_norm,
            clipped_norm: stats.clipped_norm,
        };
        if cfg.log_every > 0 && (trainer.step % cfg.log_every == 0 || trainer.step == 1) {
            log::info!(
                "step {} lr {:.3e} loss {:.5} (rf {:.5}, repa {:.5}) grad {:.3}",
                row.step, row.lr, row.loss, row.rf, row.repa, row.grad_norm
            );
        }
        log.push(row);
        if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 && trainer.step < stop {
            if let Some(cb) = opts.on_checkpoint.as_mut() {
                cb(&trainer.checkpoint("tokenizer", cfg, model_json.clone())?)?;
            }
        }
    }
    Ok(TrainOutcome { checkpoint: trainer.checkpoint("tokenizer", cfg, model_json)?, log })
}

/// Rebuild a tokenizer from a checkpoint (EMA weights when present).
pub fn load_tokenizer(ckpt: &Checkpoint) -> Result<Tokenizer> {
    let spec: TokenizerSpec = serde_json::from_value(ckpt.meta.model.clone())
        .map_err(|e| Error::CheckpointMismatch(format!("  unreadable tokenizer spec: {e}")))?;
    let weights = ckpt.eval_weights();
    Tokenizer::build(spec, &mut MapSource { map: weights, dtype: DType::F32 }, DType::F32)
}

pub fn run_config_of(ckpt: &Checkpoint) -> Result<RunConfig> {
    serde_json::from_value(ckpt.meta.config.clone()).map_err(|e| Error::CheckpointMismatch(format!("  unreadable run config: {e}")))
}

/// Token sequences and labels for Stage 2.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDataset {
    pub sequences: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub vocab: usize,
}

/// Encode every image with the frozen tokenizer at full length.
pub fn pretokenize(tok: &Tokenizer, codec: &Codec, dataset: &Dataset, batch: usize) -> Result<TokenDataset> {
    let mut sequences = Vec::with_capacity(dataset.len());
    for chunk in dataset.images.chunks(batch.max(1)) {
        let lat = chunk.iter().map(|im| codec.encode_pixels(im)).collect::<Result<Vec<_>>>()?;
        sequences.extend(tok.tokenize(&lat, tok.spec.k_max)?);
    }
    Ok(TokenDataset {
        sequences,
        labels: dataset.labels.clone(),
        num_classes: dataset.num_classes,
        vocab: tok.levels().vocab_size(),
    })
}

pub fn ar_model_json(cfg: &ArConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("ar config serializes")
}

/// Stage 2: next-token training on pre-tokenized sequences.
pub fn train_ar(cfg: &RunConfig, tokens: &TokenDataset, mut opts: TrainOptions) -> Result<TrainOutcome> {
    if tokens.sequences.is_empty() {
        bail_validation!("training dataset is empty");
    }
    cfg.validate()?;
    let expected_vocab = crate::fsq::FsqLevels::new(cfg.tokenizer.fsq_levels.clone())?.vocab_size();
    if tokens.vocab != expected_vocab {
        return Err(Error::Config(format!(
            "token vocabulary {} does not match tokenizer.fsq_levels (vocabulary {expected_vocab})",
            tokens.vocab
        )));
    }
    let len = tokens.sequences[0].len();
    if len == 0 || len > cfg.tokenizer.k_max || tokens.sequences.iter().any(|s| s.len() != len) {
        return Err(Error::Config(format!(
            "sequences must share one length in [1, tokenizer.k_max = {}]",
            cfg.tokenizer.k_max
        )));
    }
    let ar_cfg = cfg.ar_config(tokens.vocab, tokens.num_classes)?;
    let dtype = DType::F32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new(dtype);
    ArModel::build(ar_cfg.clone(), &mut InitSource { store: &mut store, rng: &mut rng })?;
    let model = ArModel::build(ar_cfg.clone(), &mut StoreSource { store: &store })?;

    let n = tokens.sequences.len();
    let b = cfg.ar_train.batch_size.min(n);
    let mut trainer = Trainer::new(store, rng, &cfg.ar_train, (b * len) as u64)?;
    if let Some(ckpt) = opts.resume {
        ckpt.expect_kind("ar", std::path::Path::new("resume checkpoint"))?;
        trainer.restore(ckpt)?;
    }
    let model_json = ar_model_json(&ar_cfg);
    let stop = opts.stop_at.unwrap_or(u64::MAX).min(trainer.schedule.total_steps);
    let mut log = Vec::new();
    while trainer.step < stop {
        let idx = Trainer::batch(&mut trainer.rng, n, b);
        let seqs: Vec<Vec<u32>> = idx.iter().map(|&i| tokens.sequences[i].clone()).collect();
        let classes: Vec<Option<usize>> = idx
            .iter()
            .map(|&i| {
                if trainer.rng.random::<f64>() < cfg.ar.cond_dropout {
                    None
                } else {
                    Some(tokens.labels[i])
                }
            })
            .collect();
        let loss = ar_loss(&model, &seqs, &classes)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        check_finite(value, trainer.step)?;
        let stats = trainer.apply(&loss)?;
        let row = LogRow {
            step: trainer.step,
            lr: stats.lr,
            loss: value,
            rf: value,
            repa: 0.0,
            grad_norm: stats.grad_norm,
            clipped_norm: stats.clipped_norm,
        };
        if cfg.log_every > 0 && (trainer.step % cfg.log_every == 0 || trainer.step == 1) {
            log::info!("step {} lr {:.3e} ce {:.5} grad {:.3}", row.step, row.lr, row.loss, row.grad_norm);
        }
        log.push(row);
        if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 && trainer.step < stop {
            if let Some(cb) = opts.on_checkpoint.as_mut() {
                cb(&trainer.checkpoint("ar", cfg, model_json.clone())?)?;
            }
        }
    }
    Ok(TrainOutcome { checkpoint: trainer.checkpoint("ar", cfg, model_json)?, log })
}

pub fn load_ar(ckpt: &Checkpoint) -> Result<ArModel> {
    let cfg: ArConfig = serde_json::from_value(ckpt.meta.model.clone())
        .map_err(|e| Error::CheckpointMismatch(format!("  unreadable ar config: {e}")))?;
    ArModel::build(cfg, &mut MapSource { map: ckpt.eval_weights(), dtype: DType::F32 })
}
