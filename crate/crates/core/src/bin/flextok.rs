//! `flextok` command-line tool.
//!
//! Every subcommand writes a run directory holding the resolved config, a
//! JSON summary and its outputs. Config keys are overridden with dotted
//! flags such as `--train.peak_lr 3e-4` or `--sampler.steps=10`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use flextok::ar::{generate, GenerationRequest};
use flextok::codec::{Codec, Image};
use flextok::config::{split_overrides, RunConfig};
use flextok::data::{load_image, save_image, Dataset};
use flextok::eval::{
    self, guidance_sweep, image_noise, linear_probe, monotonicity_violations, pow2_ks, rate_distortion_sweep,
    reconstruct_batch, score, step_sweep, write_csv, ProbeRecipe, SamplerSettings,
};
use flextok::flow::GuidanceMode;
use flextok::io::{read_token_file, write_token_file};
use flextok::pipeline::{load_dataset, resolve_codec};
use flextok::repa::FeatureOracle;
use flextok::tokenizer::Tokenizer;
use flextok::train::checkpoint::Checkpoint;
use flextok::train::{load_ar, load_tokenizer, pretokenize, run_config_of, train_ar, train_tokenizer, LogRow, TrainOptions};
use flextok::{Error, Result};

const LOG_HEADER: [&str; 7] = ["step", "lr", "loss", "rf", "repa", "grad_norm", "clipped_norm"];

#[derive(Parser, Debug)]
#[command(name = "flextok", version = flextok::REVISION, about = "Flexible-length 1D image tokenizer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config file (defaults, or the checkpoint's config, when absent).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory (default: $FLEXTOK_OUT/<command>-<hash>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train the tokenizer (and the autoencoder codec if one is configured).
    TrainTokenizer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the class-conditional AR model on tokens of a trained tokenizer.
    TrainAr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconstruct dataset images (or one file) from their first k tokens.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Sample tokens from the AR model and decode them (seeded by `--seed`).
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        ar: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value_t = 1)]
        n: usize,
    },
    /// MAE / PSNR / feature distance for k = 1, 2, 4, …, K_max.
    SweepRd {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tokenizer: PathBuf,
    },
    /// Reconstruction metrics across guidance scales.
    SweepGuidance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value = "apg")]
        mode: GuidanceMode,
        #[arg(long, value_delimiter = ',', default_value = "1,1.5,3,7.5")]
        scales: Vec<f64>,
    },
    /// Reconstruction metrics across sampler step counts.
    SweepSteps {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long = "steps", value_delimiter = ',', default_value = "1,5,10,25")]
        step_counts: Vec<usize>,
    },
    /// Linear probe on flattened quantized register values.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
    },
    /// Encode dataset images (or one file) to a token file.
    Tokenize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Decode a token file; record i uses noise stream i.
    Detokenize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
    },
}

impl Cmd {
    fn common(&self) -> &Common {
        match self {
            Cmd::TrainTokenizer { common, .. }
            | Cmd::TrainAr { common, .. }
            | Cmd::Reconstruct { common, .. }
            | Cmd::Generate { common, .. }
            | Cmd::SweepRd { common, .. }
            | Cmd::SweepGuidance { common, .. }
            | Cmd::SweepSteps { common, .. }
            | Cmd::Probe { common, .. }
            | Cmd::Tokenize { common, .. }
            | Cmd::Detokenize { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Cmd::TrainTokenizer { .. } => "train-tokenizer",
            Cmd::TrainAr { .. } => "train-ar",
            Cmd::Reconstruct { .. } => "reconstruct",
            Cmd::Generate { .. } => "generate",
            Cmd::SweepRd { .. } => "sweep-rd",
            Cmd::SweepGuidance { .. } => "sweep-guidance",
            Cmd::SweepSteps { .. } => "sweep-steps",
            Cmd::Probe { .. } => "probe",
            Cmd::Tokenize { .. } => "tokenize",
            Cmd::Detokenize { .. } => "detokenize",
        }
    }

    fn tokenizer_path(&self) -> Option<&Path> {
        match self {
            Cmd::TrainTokenizer { .. } => None,
            Cmd::TrainAr { tokenizer, .. }
            | Cmd::Reconstruct { tokenizer, .. }
            | Cmd::Generate { tokenizer, .. }
            | Cmd::SweepRd { tokenizer, .. }
            | Cmd::SweepGuidance { tokenizer, .. }
            | Cmd::SweepSteps { tokenizer, .. }
            | Cmd::Probe { tokenizer, .. }
            | Cmd::Tokenize { tokenizer, .. }
            | Cmd::Detokenize { tokenizer, .. } => Some(tokenizer),
        }
    }
}

/// Output directory plus the bookkeeping written at the end.
struct Run {
    dir: PathBuf,
    cfg: RunConfig,
    summary: serde_json::Map<String, serde_json::Value>,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&mut self, key: &str, value: serde_json::Value) {
        self.summary.insert(key.to_string(), value);
    }

    fn finish(mut self) -> Result<()> {
        self.record("config_hash", json!(self.cfg.hash()));
        self.record("revision", json!(flextok::REVISION));
        self.record("seed", json!(self.cfg.seed));
        let p = self.path("summary.json");
        let text = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
        println!("{}", self.dir.display());
        Ok(())
    }
}

fn load_checkpoint(path: &Path, kind: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_kind(kind, path)?;
    Ok(ckpt)
}

fn resolve_config(cmd: &Cmd, overrides: &[(String, String)]) -> Result<RunConfig> {
    let common = cmd.common();
    if let Some(p) = &common.config {
        return RunConfig::load(Some(p), overrides);
    }
    match cmd.tokenizer_path() {
        Some(t) => {
            let base = run_config_of(&load_checkpoint(t, "tokenizer")?)?;
            RunConfig::from_toml_str(&base.to_toml_string(), overrides)
        }
        None => RunConfig::load(None, overrides),
    }
}

fn open_run(cmd: &Cmd, cfg: RunConfig, argv: &[String]) -> Result<Run> {
    let dir = match &cmd.common().out {
        Some(d) => d.clone(),
        None => {
            let root = std::env::var_os("FLEXTOK_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            let mut h = Sha256::new();
            h.update(cfg.to_toml_string());
            for a in argv {
                h.update([0u8]);
                h.update(a);
            }
            let digest: String = h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect();
            root.join(format!("{}-{digest}", cmd.name()))
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;
    let mut summary = serde_json::Map::new();
    summary.insert("command".into(), json!(cmd.name()));
    summary.insert("args".into(), json!(argv));
    Ok(Run { dir, cfg, summary })
}

fn sampler(cfg: &RunConfig) -> Result<SamplerSettings> {
    Ok(SamplerSettings {
        steps: cfg.sampler.steps,
        guidance: cfg.guidance()?,
        batch_size: cfg.sampler.batch_size,
        seed: cfg.seed,
    })
}

/// Tokenizer, codec and dataset for evaluation commands.
fn eval_setup(run: &Run, tokenizer: &Path) -> Result<(Tokenizer, Codec, Dataset)> {
    let tok = load_tokenizer(&load_checkpoint(tokenizer, "tokenizer")?)?;
    let dataset = load_dataset(&run.cfg)?;
    let (codec, fitted) = resolve_codec(&run.cfg, &dataset)?;
    if fitted.is_some() {
        return Err(Error::Config(
            "codec.kind = \"ae\" needs codec.ae_checkpoint when evaluating a trained tokenizer".into(),
        ));
    }
    Ok((tok, codec, dataset))
}

fn check_k(tok: &Tokenizer, k: Option<usize>) -> Result<usize> {
    let k = k.unwrap_or(tok.spec.k_max);
    if k == 0 || k > tok.spec.k_max {
        return Err(Error::OutOfRange { what: "k", value: k as i64, valid: format!("[1, {}]", tok.spec.k_max) });
    }
    Ok(k)
}

/// Images to work on: a single file, or the configured dataset.
fn inputs(run: &Run, dataset: &Dataset, input: &Option<PathBuf>) -> Result<Vec<Image>> {
    match input {
        Some(p) => Ok(vec![load_image(p, run.cfg.data.image_size)?]),
        None => Ok(dataset.images.clone()),
    }
}

fn write_log(run: &Run, log: &[LogRow]) -> Result<()> {
    let dir = run.path("logs");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_csv(&dir.join("train.csv"), log, &LOG_HEADER)
}

fn checkpoint_saver(dir: PathBuf, stem: &'static str) -> impl FnMut(&Checkpoint) -> Result<()> {
    move |c: &Checkpoint| c.save(&dir.join(format!("{stem}-{:06}.safetensors", c.meta.step)))
}

fn run(cmd: Cmd, argv: &[String], overrides: &[(String, String)]) -> Result<()> {
    let cfg = resolve_config(&cmd, overrides)?;
    let mut run = open_run(&cmd, cfg, argv)?;
    let ckpt_dir = run.path("checkpoints");
    match &cmd {
        Cmd::TrainTokenizer { resume, .. } => {
            let dataset = load_dataset(&run.cfg)?;
            let (codec, fitted) = resolve_codec(&run.cfg, &dataset)?;
            std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
            if let Some(ae) = fitted {
                let p = ckpt_dir.join("autoencoder.safetensors");
                ae.save(&p)?;
                let abs = std::fs::canonicalize(&p).map_err(|e| Error::io(&p, e))?;
                run.cfg.codec.ae_checkpoint = abs.to_string_lossy().into_owned();
                let cfg_path = run.path("config.toml");
                std::fs::write(&cfg_path, run.cfg.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;
            }
            let resume = resume.as_deref().map(|p| load_checkpoint(p, "tokenizer")).transpose()?;
            let mut saver = checkpoint_saver(ckpt_dir.clone(), "tokenizer");
            let out = train_tokenizer(
                &run.cfg,
                &dataset,
                &codec,
                TrainOptions { resume: resume.as_ref(), stop_at: None, on_checkpoint: Some(&mut saver) },
            )?;
            let p = ckpt_dir.join("tokenizer.safetensors");
            out.checkpoint.save(&p)?;
            write_log(&run, &out.log)?;
            run.record("steps", json!(out.checkpoint.meta.step));
            run.record("final_loss", json!(out.log.last().map(|r| r.loss)));
            run.record("checkpoint", json!(p));
        }
        Cmd::TrainAr { tokenizer, resume, .. } => {
            let (tok, codec, dataset) = eval_setup(&run, tokenizer)?;
            let tokens = pretokenize(&tok, &codec, &dataset, run.cfg.sampler.batch_size)?;
            std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
            write_token_file(&run.path("train_tokens.bin"), &tokens.sequences)?;
            let resume = resume.as_deref().map(|p| load_checkpoint(p, "ar")).transpose()?;
            let mut saver = checkpoint_saver(ckpt_dir.clone(), "ar");
            let out = train_ar(
                &run.cfg,
                &tokens,
                TrainOptions { resume: resume.as_ref(), stop_at: None, on_checkpoint: Some(&mut saver) },
            )?;
            let p = ckpt_dir.join("ar.safetensors");
            out.checkpoint.save(&p)?;
            write_log(&run, &out.log)?;
            run.record("steps", json!(out.checkpoint.meta.step));
            run.record("final_loss", json!(out.log.last().map(|r| r.loss)));
            run.record("checkpoint", json!(p));
        }
        Cmd::Reconstruct { tokenizer, k, input, .. } => {
            let (tok, codec, dataset) = eval_setup(&run, tokenizer)?;
            let k = check_k(&tok, *k)?;
            let images = inputs(&run, &dataset, input)?;
            let indices: Vec<usize> = (0..images.len()).collect();
            let s = sampler(&run.cfg)?;
            let (recons, stats) = reconstruct_batch(&tok, &codec, &images, &indices, k, &s)?;
            let mut oracle = FeatureOracle::from_spec(&run.cfg.oracle)?;
            let metrics = score(&images, &recons, &indices, &mut oracle)?;
            for (i, img) in recons.iter().enumerate() {
                save_image(&run.path(&format!("recon_{i:04}.png")), img)?;
            }
            let rows: Vec<_> = metrics.iter().enumerate().map(|(i, m)| (i, k, m.mae, m.psnr, m.feature_distance)).collect();
            write_csv(&run.path("metrics.csv"), &rows, &["index", "k_tokens", "mae", "psnr", "feature_distance"])?;
            let n = metrics.len() as f64;
            run.record("k_tokens", json!(k));
            run.record("mean_mae", json!(metrics.iter().map(|m| m.mae).sum::<f64>() / n));
            run.record("mean_psnr", json!(metrics.iter().map(|m| m.psnr).sum::<f64>() / n));
            run.record("apg_bound_violations", json!(stats.apg_bound_violations));
        }
        Cmd::Generate { tokenizer, ar, k, class, n, .. } => {
            let seed = run.cfg.seed;
            let tok = load_tokenizer(&load_checkpoint(tokenizer, "tokenizer")?)?;
            let model = load_ar(&load_checkpoint(ar, "ar")?)?;
            let dataset = load_dataset(&run.cfg)?;
            let (codec, _) = resolve_codec(&run.cfg, &dataset)?;
            let seqs = (0..*n)
                .map(|i| {
                    generate(
                        &model,
                        &GenerationRequest {
                            class: *class,
                            k_tokens: *k,
                            top_k: run.cfg.sampler.top_k,
                            temperature: run.cfg.sampler.temperature,
                            cfg_scale: run.cfg.sampler.ar_cfg_scale,
                            seed: seed.wrapping_add(i as u64),
                        },
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            write_token_file(&run.path("tokens.bin"), &seqs)?;
            let s = sampler(&run.cfg)?;
            let images = decode_records(&tok, &codec, &seqs, &s)?;
            for (i, img) in images.iter().enumerate() {
                save_image(&run.path(&format!("sample_{i:04}.png")), img)?;
            }
            run.record("tokens", json!(seqs));
        }
        Cmd::SweepRd { tokenizer, .. } => {
            let (tok, codec, dataset) = eval_setup(&run, tokenizer)?;
            let mut oracle = FeatureOracle::from_spec(&run.cfg.oracle)?;
            let rows = rate_distortion_sweep(&tok, &codec, &dataset.images, &pow2_ks(tok.spec.k_max), &sampler(&run.cfg)?, &mut oracle)?;
            write_csv(&run.path("rd.csv"), &rows, &eval::RD_HEADER)?;
            run.record("monotonicity_violations", json!(monotonicity_violations(&rows, 0.01)));
        }
        Cmd::SweepGuidance { tokenizer, k, mode, scales, .. } => {
            let (tok, codec, dataset) = eval_setup(&run, tokenizer)?;
            let k = check_k(&tok, *k)?;
            let mut oracle = FeatureOracle::from_spec(&run.cfg.oracle)?;
            let rows = guidance_sweep(&tok, &codec, &dataset.images, k, *mode, scales, &sampler(&run.cfg)?, &mut oracle)?;
            write_csv(&run.path("guidance.csv"), &rows, &eval::GUIDANCE_HEADER)?;
            run.record("apg_bound_violations", json!(rows.iter().map(|r| r.apg_bound_violations).sum::<usize>()));
        }
        Cmd::SweepSteps { tokenizer, k, step_counts, .. } => {
            let (tok, codec, dataset) = eval_setup(&run, tokenizer)?;
            let k = check_k(&tok, *k)?;
            let mut oracle = FeatureOracle::from_spec(&run.cfg.oracle)?;
            let rows = step_sweep(&tok, &codec, &dataset.images, k, step_counts, &sampler(&run.cfg)?, &mut oracle)?;
            write_csv(&run.path("steps.csv"), &rows, &eval::STEP_HEADER)?;
        }
        Cmd::Probe { tokenizer, k, .. } => {
            let (tok, codec, dataset) = eval_setup(&run, tokenizer)?;
            let ks = if k.is_empty() { pow2_ks(tok.spec.k_max) } else { k.clone() };
            let latents = dataset.images.iter().map(|im| codec.encode_pixels(im)).collect::<Result<Vec<_>>>()?;
            let mut rows = Vec::new();
            for &k in &ks {
                let k = check_k(&tok, Some(k))?;
                let mut feats = Vec::with_capacity(latents.len());
                for chunk in latents.chunks(run.cfg.sampler.batch_size.max(1)) {
                    feats.extend(tok.quantized_values(chunk, k)?);
                }
                let r = linear_probe(&feats, &dataset.labels, &ProbeRecipe { seed: run.cfg.seed, ..ProbeRecipe::default() })?;
                rows.push((k, r.feature_dim, r.n_train, r.n_test, r.train_accuracy, r.test_accuracy));
            }
            write_csv(
                &run.path("probe.csv"),
                &rows,
                &["k_tokens", "feature_dim", "n_train", "n_test", "train_accuracy", "test_accuracy"],
            )?;
        }
        Cmd::Tokenize { tokenizer, k, input, .. } => {
            let (tok, codec, dataset) = eval_setup(&run, tokenizer)?;
            let k = check_k(&tok, *k)?;
            let images = inputs(&run, &dataset, input)?;
            let mut seqs = Vec::with_capacity(images.len());
            for chunk in images.chunks(run.cfg.sampler.batch_size.max(1)) {
                let lat = chunk.iter().map(|im| codec.encode_pixels(im)).collect::<Result<Vec<_>>>()?;
                seqs.extend(tok.tokenize(&lat, k)?);
            }
            write_token_file(&run.path("tokens.bin"), &seqs)?;
            run.record("records", json!(seqs.len()));
            run.record("k_tokens", json!(k));
        }
        Cmd::Detokenize { tokenizer, tokens, .. } => {
            let (tok, codec, _) = eval_setup(&run, tokenizer)?;
            let seqs = read_token_file(tokens)?;
            let images = decode_records(&tok, &codec, &seqs, &sampler(&run.cfg)?)?;
            for (i, img) in images.iter().enumerate() {
                save_image(&run.path(&format!("decoded_{i:04}.png")), img)?;
            }
            run.record("records", json!(seqs.len()));
        }
    }
    run.finish()
}

/// Decode token records; record `i` starts from noise stream `i`, the same
/// noise `reconstruct` uses for dataset image `i`.
fn decode_records(tok: &Tokenizer, codec: &Codec, seqs: &[Vec<u32>], s: &SamplerSettings) -> Result<Vec<Image>> {
    let len = tok.spec.geometry.latent_len();
    let mut out = Vec::with_capacity(seqs.len());
    let b = s.batch_size.max(1);
    for (c, chunk) in seqs.chunks(b).enumerate() {
        for seq in chunk {
            if seq.is_empty() || seq.len() > tok.spec.k_max {
                return Err(Error::OutOfRange {
                    what: "token record length",
                    value: seq.len() as i64,
                    valid: format!("[1, {}]", tok.spec.k_max),
                });
            }
        }
        let eps: Vec<f32> = (0..chunk.len()).flat_map(|j| image_noise(s.seed, c * b + j, len)).collect();
        let (grids, _) = tok.detokenize_with_noise(chunk, &eps, s.steps, &s.guidance)?;
        for g in &grids {
            out.push(codec.decode_latents(g)?);
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    let (rest, overrides) = match split_overrides(&argv[1..]) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(std::iter::once(argv[0].clone()).chain(rest)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.cmd, &argv[1..], &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
