//! Versioned checkpoint container on top of safetensors.
//!
//! Tensors are stored under `param/`, `ema/`, `adam_m/` and `adam_v/`
//! prefixes. Everything else (run config, model spec, step counters, RNG
//! state) lives as one JSON document under the `flextok` metadata key.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{check_same_layout, layout_of};
use crate::train::optim::TensorMap;

pub const CHECKPOINT_VERSION: u32 = 1;
const META_KEY: &str = "flextok";
const GROUPS: [&str; 4] = ["param", "ema", "adam_m", "adam_v"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    /// `"tokenizer"`, `"ar"` or `"autoencoder"`.
    pub kind: String,
    pub step: u64,
    pub adam_step: u64,
    pub rng: Option<ChaCha8Rng>,
    /// Resolved run configuration.
    pub config: serde_json::Value,
    /// Model layout description (e.g. tokenizer spec).
    pub model: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: TensorMap,
    pub ema: TensorMap,
    pub adam_m: TensorMap,
    pub adam_v: TensorMap,
}

impl Checkpoint {
    fn groups(&self) -> [(&'static str, &TensorMap); 4] {
        [
            (GROUPS[0], &self.params),
            (GROUPS[1], &self.ema),
            (GROUPS[2], &self.adam_m),
            (GROUPS[3], &self.adam_v),
        ]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut named: BTreeMap<String, Tensor> = BTreeMap::new();
        for (prefix, map) in self.groups() {
            for (k, v) in map {
                named.insert(format!("{prefix}/{k}"), v.contiguous()?);
            }
        }
        let meta = serde_json::to_string(&self.meta).map_err(|e| Error::format(path, e.to_string()))?;
        let info: HashMap<String, String> = [(META_KEY.to_string(), meta)].into();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        safetensors::serialize_to_file(named.iter(), Some(info), path).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::format(path, "not a flextok checkpoint (no metadata)"))?;
        let meta: CheckpointMeta = serde_json::from_str(meta_json).map_err(|e| Error::format(path, e.to_string()))?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointMismatch(format!(
                "  checkpoint version {} (this build reads version {CHECKPOINT_VERSION})",
                meta.version
            )));
        }
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let mut maps: [TensorMap; 4] = Default::default();
        for (name, t) in tensors {
            let (prefix, rest) = name
                .split_once('/')
                .ok_or_else(|| Error::format(path, format!("tensor {name} has no group prefix")))?;
            let i = GROUPS
                .iter()
                .position(|g| *g == prefix)
                .ok_or_else(|| Error::format(path, format!("unknown tensor group {prefix}")))?;
            maps[i].insert(rest.to_string(), t);
        }
        let [params, ema, adam_m, adam_v] = maps;
        Ok(Checkpoint { meta, params, ema, adam_m, adam_v })
    }

    /// Check that the stored parameters have exactly `expected` names and shapes.
    pub fn check_layout(&self, expected: &BTreeMap<String, Vec<usize>>) -> Result<()> {
        check_same_layout(expected, &layout_of(&self.params))
    }

    /// Weights used for evaluation: the EMA copy when present.
    pub fn eval_weights(&self) -> &TensorMap {
        if self.ema.is_empty() {
            &self.params
        } else {
            &self.ema
        }
    }

    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::Config(format!(
                "{} is a {} checkpoint, expected {kind}",
                path.display(),
                self.meta.kind
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use rand::SeedableRng;

    fn sample() -> Checkpoint {
        let t = |v: &[f32]| Tensor::new(v, &Device::Cpu).unwrap();
        let params: TensorMap = [("a.weight".to_string(), t(&[1.0, 2.0])), ("b".to_string(), t(&[3.0]))].into();
        Checkpoint {
            meta: CheckpointMeta {
                version: CHECKPOINT_VERSION,
                kind: "tokenizer".into(),
                step: 7,
                adam_step: 7,
                rng: Some(ChaCha8Rng::seed_from_u64(5)),
                config: serde_json::json!({"seed": 5}),
                model: serde_json::Value::Null,
            },
            ema: params.clone(),
            adam_m: params.clone(),
            adam_v: params.clone(),
            params,
        }
    }

    #[test]
    fn roundtrip_and_bit_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.safetensors"), dir.path().join("b.safetensors"));
        let c = sample();
        c.save(&p1).unwrap();
        c.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let back = Checkpoint::load(&p1).unwrap();
        assert_eq!(back.meta, c.meta);
        assert_eq!(back.params["a.weight"].to_vec1::<f32>().unwrap(), vec![1.0, 2.0]);
        assert_eq!(back.ema.len(), 2);
        assert_eq!(back.params["b"].dtype(), DType::F32);
    }

    #[test]
    fn layout_mismatch_lists_diff() {
        let c = sample();
        let expected: BTreeMap<String, Vec<usize>> = [("a.weight".to_string(), vec![3]), ("c".to_string(), vec![1])].into();
        let msg = c.check_layout(&expected).unwrap_err().to_string();
        assert!(msg.contains("a.weight: expected [3], found [2]"));
        assert!(msg.contains("missing tensor c"));
        assert!(msg.contains("unexpected tensor b"));
    }

    #[test]
    fn version_and_garbage_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.safetensors");
        let mut c = sample();
        c.meta.version = 99;
        c.save(&p).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::CheckpointMismatch(_))));
        std::fs::write(&p, b"nope").unwrap();
        assert!(Checkpoint::load(&p).is_err());
        assert!(Checkpoint::load(&dir.path().join("missing")).is_err());
    }
}
