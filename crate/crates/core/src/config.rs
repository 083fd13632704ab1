//! Run configuration: a TOML tree with defaults for every key, command-line
//! overrides by dotted path, and cross-field validation.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ar::ArConfig;
use crate::codec::AeConfig;
use crate::encoder::PatchGeometry;
use crate::error::{Error, Result};
use crate::flow::{max_mode_scale, ApgParams, GuidanceMode, GuidanceParams};
use crate::fsq::FsqLevels;
use crate::nn::TransformerDims;
use crate::repa::OracleSpec;
use crate::schedule::{DropoutSchedule, ScheduleKind};
use crate::tokenizer::{DrawSettings, TokenizerSpec};
use crate::train::optim::OptimSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `"synth"` or `"folder"`.
    pub source: String,
    pub n_images: usize,
    pub path: String,
    pub image_size: usize,
    pub hflip: bool,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: "synth".into(),
            n_images: 16,
            path: String::new(),
            image_size: 32,
            hflip: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    /// `"identity"` or `"ae"`.
    pub kind: String,
    pub factor: usize,
    pub ae_channels: usize,
    pub ae_hidden: usize,
    /// Existing autoencoder checkpoint; empty trains one before Stage 1.
    pub ae_checkpoint: String,
    /// `"mode"` or `"sample"`.
    pub latent_mode: String,
    pub ae_steps: usize,
    pub ae_lr: f64,
    pub ae_kl_weight: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            kind: "identity".into(),
            factor: 2,
            ae_channels: 16,
            ae_hidden: 64,
            ae_checkpoint: String::new(),
            latent_mode: "mode".into(),
            ae_steps: 500,
            ae_lr: 2e-3,
            ae_kl_weight: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub enc_depth: usize,
    /// 0 derives `64 · enc_depth`.
    pub enc_width: usize,
    pub dec_depth: usize,
    /// 0 derives `64 · dec_depth`.
    pub dec_width: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    pub k_max: usize,
    pub fsq_levels: Vec<u32>,
    /// `"uniform"`, `"pow2"`, `"unifpow2"` or `"fixed"`.
    pub schedule: String,
    pub fixed_k: usize,
    /// One keep count per batch instead of per sample.
    pub shared_keep: bool,
    /// Mode-sampling scale for training timesteps.
    pub noise_scale: f64,
    pub cond_dropout: f64,
    pub repa: bool,
    pub repa_weight: f64,
    pub repa_mlp_ratio: f64,
    pub time_freq_dim: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            enc_depth: 4,
            enc_width: 0,
            dec_depth: 4,
            dec_width: 0,
            mlp_ratio: 4.0,
            patch_size: 2,
            k_max: 64,
            fsq_levels: vec![8, 8, 8, 5, 5, 5],
            schedule: "pow2".into(),
            fixed_k: 1,
            shared_keep: false,
            noise_scale: 0.25,
            cond_dropout: 0.2,
            repa: true,
            repa_weight: 1.0,
            repa_mlp_ratio: 4.0,
            time_freq_dim: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArModelConfig {
    pub depth: usize,
    /// 0 derives `64 · depth`.
    pub width: usize,
    pub mlp_ratio: f64,
    pub cond_dropout: f64,
}

impl Default for ArModelConfig {
    fn default() -> Self {
        ArModelConfig {
            depth: 4,
            width: 0,
            mlp_ratio: 4.0,
            cond_dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    /// `"none"`, `"cfg"` or `"apg"`.
    pub guidance: String,
    pub scale: f64,
    pub apg_r: f64,
    pub apg_eta: f64,
    pub apg_beta: f64,
    pub top_k: usize,
    pub temperature: f64,
    pub ar_cfg_scale: f64,
    /// Images decoded per batch in evaluation.
    pub batch_size: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 25,
            guidance: "apg".into(),
            scale: 7.5,
            apg_r: 2.5,
            apg_eta: 0.0,
            apg_beta: -0.5,
            top_k: 0,
            temperature: 1.0,
            ar_cfg_scale: 1.0,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub log_every: u64,
    /// Save a resumable checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub data: DataConfig,
    pub codec: CodecConfig,
    pub tokenizer: TokenizerConfig,
    pub oracle: OracleSpec,
    /// Stage-1 optimizer.
    pub train: OptimSettings,
    pub ar: ArModelConfig,
    /// Stage-2 optimizer.
    pub ar_train: OptimSettings,
    pub sampler: SamplerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            deterministic: true,
            log_every: 50,
            checkpoint_every: 0,
            data: DataConfig::default(),
            codec: CodecConfig::default(),
            tokenizer: TokenizerConfig::default(),
            oracle: OracleSpec::default(),
            train: OptimSettings::default(),
            ar: ArModelConfig::default(),
            ar_train: OptimSettings::ar_defaults(),
            sampler: SamplerConfig::default(),
        }
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, toml::Value)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

fn nearest<'a>(key: &str, candidates: impl Iterator<Item = &'a String>) -> Option<&'a String> {
    candidates.min_by_key(|c| strsim::levenshtein(key, c))
}

/// Parse a command-line value as a TOML scalar or array, falling back to a
/// bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap_or_default();
    let mut table = root;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if !entry.is_table() {
            *entry = toml::Value::Table(toml::Table::new());
        }
        table = entry.as_table_mut().expect("just ensured table");
    }
    table.insert(last.to_string(), value);
}

/// Integers given where the default is a float are widened.
fn coerce(value: toml::Value, like: &toml::Value) -> toml::Value {
    match (&value, like) {
        (toml::Value::Integer(i), toml::Value::Float(_)) => toml::Value::Float(*i as f64),
        (toml::Value::Array(items), toml::Value::Array(like_items)) if !like_items.is_empty() => {
            toml::Value::Array(items.iter().map(|v| coerce(v.clone(), &like_items[0])).collect())
        }
        _ => value,
    }
}

impl RunConfig {
    fn default_keys() -> Vec<(String, toml::Value)> {
        let v = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
        let mut out = Vec::new();
        flatten("", &v, &mut out);
        out
    }

    /// Parse TOML text, then apply `overrides` (dotted key, raw value) in order.
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let defaults = Self::default_keys();
        let known: BTreeSet<&String> = defaults.iter().map(|(k, _)| k).collect();
        let check = |key: &str| -> Result<()> {
            if known.contains(&key.to_string()) {
                return Ok(());
            }
            let hint = nearest(key, known.iter().copied())
                .map(|n| format!("; did you mean `{n}`?"))
                .unwrap_or_default();
            Err(Error::Config(format!("unknown configuration key `{key}`{hint}")))
        };
        let mut present = Vec::new();
        flatten("", &toml::Value::Table(table.clone()), &mut present);
        for (k, v) in present {
            check(&k)?;
            let like = &defaults.iter().find(|(d, _)| *d == k).expect("checked").1;
            set_path(&mut table, &k, coerce(v, like));
        }
        for (k, raw) in overrides {
            check(k)?;
            let like = &defaults.iter().find(|(d, _)| d == k).expect("checked").1;
            set_path(&mut table, k, coerce(parse_value(raw), like));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the resolved TOML.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn dims(field: &str, depth: usize, width: usize, mlp_ratio: f64) -> Result<TransformerDims> {
        let d = TransformerDims::from_depth(depth, mlp_ratio);
        if depth == 0 {
            return Err(Error::Config(format!("{field}: depth must be ≥ 1")));
        }
        if width != 0 && width != d.width {
            return Err(Error::Config(format!(
                "{field}: width {width} conflicts with depth {depth} (width must be 64·depth = {})",
                d.width
            )));
        }
        if mlp_ratio <= 0.0 {
            return Err(Error::Config(format!("{field}: mlp_ratio must be > 0")));
        }
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.tokenizer;
        Self::dims("tokenizer.enc_width / tokenizer.enc_depth", t.enc_depth, t.enc_width, t.mlp_ratio)?;
        Self::dims("tokenizer.dec_width / tokenizer.dec_depth", t.dec_depth, t.dec_width, t.mlp_ratio)?;
        Self::dims("ar.width / ar.depth", self.ar.depth, self.ar.width, self.ar.mlp_ratio)?;
        FsqLevels::new(t.fsq_levels.clone()).map_err(|e| Error::Config(format!("tokenizer.fsq_levels: {e}")))?;
        if t.k_max == 0 {
            return Err(Error::Config("tokenizer.k_max must be ≥ 1".into()));
        }
        if t.schedule == "fixed" && (t.fixed_k == 0 || t.fixed_k > t.k_max) {
            return Err(Error::Config(format!(
                "tokenizer.fixed_k = {} must lie in [1, tokenizer.k_max = {}]",
                t.fixed_k, t.k_max
            )));
        }
        ScheduleKind::parse(&t.schedule, t.fixed_k)?;
        if !(-1.0..=max_mode_scale()).contains(&t.noise_scale) {
            return Err(Error::Config(format!(
                "tokenizer.noise_scale {} outside [-1, {:.4}]",
                t.noise_scale,
                max_mode_scale()
            )));
        }
        for (name, p) in [("tokenizer.cond_dropout", t.cond_dropout), ("ar.cond_dropout", self.ar.cond_dropout)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if t.repa_weight < 0.0 || t.repa_mlp_ratio <= 0.0 || t.time_freq_dim < 2 {
            return Err(Error::Config("tokenizer.repa_weight ≥ 0, repa_mlp_ratio > 0 and time_freq_dim ≥ 2 required".into()));
        }
        self.oracle.validate()?;
        match self.data.source.as_str() {
            "synth" if self.data.n_images == 0 => return Err(Error::Config("data.n_images must be ≥ 1".into())),
            "synth" if self.data.image_size != crate::data::SYNTH_SIZE => {
                return Err(Error::Config(format!(
                    "data.image_size must be {} for the synthetic source",
                    crate::data::SYNTH_SIZE
                )))
            }
            "synth" => {}
            "folder" if self.data.path.is_empty() => return Err(Error::Config("data.source = \"folder\" needs data.path".into())),
            "folder" => {}
            other => return Err(Error::Config(format!("unknown data.source {other:?}; expected synth or folder"))),
        }
        match self.codec.kind.as_str() {
            "identity" | "ae" => {}
            other => return Err(Error::Config(format!("unknown codec.kind {other:?}; expected identity or ae"))),
        }
        match self.codec.latent_mode.as_str() {
            "mode" | "sample" => {}
            other => return Err(Error::Config(format!("unknown codec.latent_mode {other:?}; expected mode or sample"))),
        }
        if self.codec.kind == "ae" {
            self.ae_config().validate().map_err(|e| Error::Config(format!("codec: {e}")))?;
        }
        self.geometry()?;
        self.train.validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        self.ar_train.validate().map_err(|e| Error::Config(format!("ar_train: {e}")))?;
        self.guidance()?.validate().map_err(|e| Error::Config(format!("sampler: {e}")))?;
        if self.sampler.steps == 0 || self.sampler.batch_size == 0 {
            return Err(Error::Config("sampler.steps and sampler.batch_size must be ≥ 1".into()));
        }
        if !(self.sampler.temperature > 0.0) {
            return Err(Error::Config("sampler.temperature must be > 0".into()));
        }
        Ok(())
    }

    pub fn ae_config(&self) -> AeConfig {
        AeConfig {
            channels: self.codec.ae_channels,
            factor: self.codec.factor,
            hidden: self.codec.ae_hidden,
        }
    }

    pub fn latent_channels(&self) -> usize {
        if self.codec.kind == "ae" {
            self.codec.ae_channels
        } else {
            3 * self.codec.factor * self.codec.factor
        }
    }

    pub fn geometry(&self) -> Result<PatchGeometry> {
        let f = self.codec.factor;
        let s = self.data.image_size;
        if f == 0 || s % f != 0 {
            return Err(Error::Config(format!("data.image_size {s} not divisible by codec.factor {f}")));
        }
        let g = PatchGeometry {
            channels: self.latent_channels(),
            height: s / f,
            width: s / f,
            patch_size: self.tokenizer.patch_size,
        };
        g.validate()
            .map_err(|_| Error::Config(format!("latent side {} not divisible by tokenizer.patch_size {}", s / f, g.patch_size)))?;
        Ok(g)
    }

    pub fn tokenizer_spec(&self) -> Result<TokenizerSpec> {
        let t = &self.tokenizer;
        Ok(TokenizerSpec {
            geometry: self.geometry()?,
            encoder: Self::dims("tokenizer.enc", t.enc_depth, t.enc_width, t.mlp_ratio)?,
            decoder: Self::dims("tokenizer.dec", t.dec_depth, t.dec_width, t.mlp_ratio)?,
            k_max: t.k_max,
            levels: FsqLevels::new(t.fsq_levels.clone())?,
            time_freq_dim: t.time_freq_dim,
            repa_grid_side: self.oracle.grid_side,
            repa_feature_dim: self.oracle.feature_dim,
            repa_mlp_ratio: t.repa_mlp_ratio,
        })
    }

    pub fn draw_settings(&self) -> Result<DrawSettings> {
        let t = &self.tokenizer;
        Ok(DrawSettings {
            schedule: DropoutSchedule::new(ScheduleKind::parse(&t.schedule, t.fixed_k)?, t.k_max)?,
            shared_keep: t.shared_keep,
            noise_scale: t.noise_scale,
            cond_dropout: t.cond_dropout,
        })
    }

    /// Effective alignment weight (0 when disabled).
    pub fn repa_weight(&self) -> f64 {
        if self.tokenizer.repa {
            self.tokenizer.repa_weight
        } else {
            0.0
        }
    }

    pub fn guidance(&self) -> Result<GuidanceParams> {
        Ok(GuidanceParams {
            mode: self.sampler.guidance.parse::<GuidanceMode>()?,
            scale: self.sampler.scale,
            apg: ApgParams {
                r: self.sampler.apg_r,
                eta: self.sampler.apg_eta,
                beta: self.sampler.apg_beta,
            },
        })
    }

    pub fn ar_config(&self, vocab: usize, num_classes: usize) -> Result<ArConfig> {
        Ok(ArConfig {
            dims: Self::dims("ar", self.ar.depth, self.ar.width, self.ar.mlp_ratio)?,
            vocab,
            k_max: self.tokenizer.k_max,
            num_classes,
        })
    }
}

/// Top-level keys that may be overridden without a section prefix.
const TOP_LEVEL_KEYS: [&str; 4] = ["seed", "deterministic", "log_every", "checkpoint_every"];

fn is_override_key(key: &str) -> bool {
    key.contains('.') || TOP_LEVEL_KEYS.contains(&key)
}

/// Pull `--a.b value` / `--a.b=value` pairs (dotted keys, plus the top-level
/// keys such as `--seed`) out of an argument list, returning the remaining
/// arguments and the overrides.
pub fn split_overrides(args: &[String]) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        match a.strip_prefix("--") {
            Some(body) if body.split('=').next().is_some_and(is_override_key) => {
                if let Some((k, v)) = body.split_once('=') {
                    overrides.push((k.to_string(), v.to_string()));
                } else {
                    let v = args
                        .get(i + 1)
                        .ok_or_else(|| Error::Config(format!("override --{body} needs a value")))?;
                    overrides.push((body.to_string(), v.clone()));
                    i += 1;
                }
            }
            _ => rest.push(a.clone()),
        }
        i += 1;
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.tokenizer.schedule, "pow2");
        assert_eq!(c.tokenizer.noise_scale, 0.25);
        assert_eq!(c.tokenizer.fsq_levels, vec![8, 8, 8, 5, 5, 5]);
        assert_eq!(c.train.clip_norm, 1.0);
        assert_eq!(c.tokenizer_spec().unwrap().encoder.width, 256);
    }

    #[test]
    fn width_must_follow_depth() {
        let err = RunConfig::from_toml_str("[tokenizer]\nenc_depth = 4\nenc_width = 300\n", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("256") && msg.contains("enc_width"), "{msg}");
        assert!(RunConfig::from_toml_str("[tokenizer]\nenc_width = 256\n", &[]).is_ok());
    }

    #[test]
    fn seed_override_only_changes_seed() {
        let c = RunConfig::from_toml_str("", &[ov("seed", "9")]).unwrap();
        assert_eq!(RunConfig { seed: 0, ..c.clone() }, RunConfig::default());
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let msg = RunConfig::from_toml_str("[train]\npeak_lrr = 1.0\n", &[]).unwrap_err().to_string();
        assert!(msg.contains("train.peak_lr"), "{msg}");
        let msg = RunConfig::from_toml_str("", &[ov("sampler.stepz", "3")]).unwrap_err().to_string();
        assert!(msg.contains("sampler.steps"), "{msg}");
    }

    #[test]
    fn overrides_are_typed() {
        let c = RunConfig::from_toml_str(
            "",
            &[ov("train.peak_lr", "1"), ov("tokenizer.fsq_levels", "[5, 5]"), ov("sampler.guidance", "cfg")],
        )
        .unwrap();
        assert_eq!(c.train.peak_lr, 1.0);
        assert_eq!(c.tokenizer.fsq_levels, vec![5, 5]);
        assert_eq!(c.guidance().unwrap().mode, GuidanceMode::Cfg);
    }

    #[test]
    fn cross_field_errors_name_fields() {
        let msg = RunConfig::from_toml_str("", &[ov("train.warmup_tokens", "999999999999")]).unwrap_err().to_string();
        assert!(msg.contains("warmup_tokens") && msg.contains("total_tokens"), "{msg}");
        assert!(RunConfig::from_toml_str("", &[ov("tokenizer.schedule", "pow3")]).is_err());
        assert!(RunConfig::from_toml_str("", &[ov("tokenizer.patch_size", "3")]).is_err());
    }

    #[test]
    fn resolved_config_roundtrips() {
        let c = RunConfig::from_toml_str("", &[ov("seed", "3"), ov("sampler.scale", "2.5")]).unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml_string(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(RunConfig::default().hash(), c.hash());
    }

    #[test]
    fn split_overrides_from_argv() {
        let args: Vec<String> =
            ["train-tokenizer", "--train.peak_lr", "1e-3", "--config", "x.toml", "--sampler.steps=5", "--seed", "4"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (rest, ovs) = split_overrides(&args).unwrap();
        assert_eq!(rest, vec!["train-tokenizer", "--config", "x.toml"]);
        assert_eq!(ovs, vec![ov("train.peak_lr", "1e-3"), ov("sampler.steps", "5"), ov("seed", "4")]);
    }
}
