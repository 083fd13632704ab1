//! Glue from a [`RunConfig`] to datasets and codecs.

use std::path::Path;

use crate::codec::{train_autoencoder, AeTrainSettings, AutoEncoder, Codec};
use crate::config::RunConfig;
use crate::data::{load_image_folder, synth_dataset, Dataset};
use crate::error::{Error, Result};
use crate::train::checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.data.source.as_str() {
        "synth" => Ok(synth_dataset(cfg.data.n_images, cfg.data.seed)),
        "folder" => load_image_folder(Path::new(&cfg.data.path), cfg.data.image_size),
        other => Err(Error::Config(format!("unknown data.source `{other}`"))),
    }
}

/// The codec named by the config. A trained autoencoder is loaded from
/// `codec.ae_checkpoint` when set, otherwise fitted on `dataset`; in the
/// latter case the new checkpoint is returned so the caller can store it.
pub fn resolve_codec(cfg: &RunConfig, dataset: &Dataset) -> Result<(Codec, Option<Checkpoint>)> {
    if cfg.codec.kind != "ae" {
        return Ok((Codec::IdentityPatch(cfg.codec.factor), None));
    }
    if !cfg.codec.ae_checkpoint.is_empty() {
        let path = Path::new(&cfg.codec.ae_checkpoint);
        let ckpt = Checkpoint::load(path)?;
        ckpt.expect_kind("autoencoder", path)?;
        let ae = AutoEncoder::from_tensors(cfg.ae_config(), &ckpt.params)?;
        return Ok((Codec::TrainedAe(Box::new(ae)), None));
    }
    let settings = AeTrainSettings {
        steps: cfg.codec.ae_steps,
        lr: cfg.codec.ae_lr,
        kl_weight: cfg.codec.ae_kl_weight,
        seed: cfg.seed,
        ..AeTrainSettings::default()
    };
    let (ae, params, loss) = train_autoencoder(&dataset.images, cfg.ae_config(), &settings)?;
    log::info!("autoencoder fitted, final reconstruction loss {loss:.5}");
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            version: CHECKPOINT_VERSION,
            kind: "autoencoder".into(),
            step: settings.steps as u64,
            adam_step: settings.steps as u64,
            rng: None,
            config: serde_json::to_value(cfg).expect("config serializes"),
            model: serde_json::to_value(&ae.config).expect("ae config serializes"),
        },
        params,
        ema: Default::default(),
        adam_m: Default::default(),
        adam_v: Default::default(),
    };
    Ok((Codec::TrainedAe(Box::new(ae)), Some(ckpt)))
}
