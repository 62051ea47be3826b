use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;

use crate::error::{Error, Result};
use crate::model::{DecodeMode, ModelConfig};
use crate::training::{Precision, TrainConfig};

/// Flags shared by every subcommand. Each one overrides the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct GlobalFlags {
    /// Flat `key = value` file with run settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialization, batching and sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Grid side N.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Leaf side k.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Length of the latent code.
    #[arg(long, global = true)]
    pub latent_dim: Option<usize>,
    /// Weight of occupied voxels in the reconstruction loss.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Trees per optimizer step, and per pass when encoding or evaluating.
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Optimizer steps.
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    /// Adam learning rate.
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Decoding mode: predicted or known.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

/// Fully resolved settings: defaults, then the config file, then flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub n: usize,
    pub k: usize,
    pub latent_dim: usize,
    pub alpha: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub mode: DecodeMode,
    pub out: PathBuf,
    /// Write a checkpoint every this many iterations; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = ModelConfig::default();
        RunConfig {
            seed: t.seed,
            n: m.grid_side,
            k: m.leaf_side,
            latent_dim: m.latent_dim,
            alpha: t.alpha,
            batch_size: t.batch_size,
            iterations: t.iterations,
            lr: t.learning_rate,
            mode: DecodeMode::Predicted,
            out: PathBuf::from("out"),
            checkpoint_every: 0,
            eval_every: t.eval_every,
            precision: t.precision,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Usage(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    pub fn resolve(flags: &GlobalFlags) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &flags.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        macro_rules! take {
            ($($field:ident),*) => { $(if let Some(v) = flags.$field.clone() { cfg.$field = v; })* };
        }
        take!(seed, n, k, latent_dim, alpha, batch_size, iterations, lr, out);
        if let Some(m) = &flags.mode {
            cfg.mode = m.parse().map_err(|_| Error::Usage(format!("unknown mode {m:?}")))?;
        }
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("config line {}: expected key = value", lineno + 1)))?;
            self.set(&key.trim().replace('-', "_"), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "n" => self.n = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "mode" => self.mode = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "precision" => self.precision = parse(key, value)?,
            _ => return Err(Error::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig { latent_dim: self.latent_dim, ..ModelConfig::new(self.n, self.k) }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            iterations: self.iterations,
            learning_rate: self.lr,
            alpha: self.alpha,
            seed: self.seed,
            precision: self.precision,
            eval_every: self.eval_every,
            ..TrainConfig::default()
        }
    }

    pub fn to_text(&self) -> String {
        let mode = match self.mode {
            DecodeMode::Predicted => "predicted",
            DecodeMode::Known => "known",
        };
        let precision = match self.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "latent_dim = {}", self.latent_dim);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "mode = {mode}");
        let _ = writeln!(s, "out = {}", self.out.display());
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "precision = {precision}");
        s
    }

    /// Creates `dir` and writes the resolved settings into it.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.txt"), self.to_text())?;
        Ok(())
    }
}
