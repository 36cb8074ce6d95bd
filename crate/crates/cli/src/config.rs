//! One TOML file pins every knob of a run. Missing keys fall back to the
//! documented defaults, so a minimal config (or none at all) is usable.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use nimk_core::dataset::{ingest_dir, synthetic_corpus, DataSplit};
use nimk_core::{EvalConfig, NoiseConfig, SgXorParams, TrainConfig};

/// Where the covers come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory of cover images (PNG/JPEG). When absent, a seeded
    /// synthetic corpus of `synthetic_count` covers is generated instead.
    pub dir: Option<PathBuf>,
    pub synthetic_count: usize,
    /// Fraction of covers that land in the training split.
    pub train_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { dir: None, synthetic_count: 120, train_fraction: 100.0 / 120.0 }
    }
}

/// Full description of a run; every command is reproducible from this plus
/// nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Where checkpoints, reports, and attacked images are written.
    pub out_dir: PathBuf,
    /// Master seed. `--seed` rewrites this and every nested seed.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub noise: NoiseConfig,
    /// Alternative capture model; only the `noise_swap` ablation reads it.
    pub swap_noise: Option<NoiseConfig>,
    pub eval: EvalConfig,
    /// Surrogate-gradient gate parameters, copied into training.
    pub sgxor: SgXorParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/nimk"),
            seed: 0,
            dataset: DatasetConfig::default(),
            train: TrainConfig::toy(),
            noise: NoiseConfig::toy(),
            swap_noise: None,
            eval: EvalConfig::default(),
            sgxor: SgXorParams::default(),
        }
    }
}

impl RunConfig {
    /// Reads the TOML at `path`, or the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    /// Applies the desk-scale presets (64x64 covers, 64-bit messages, mild
    /// capture noise) on top of whatever the file configured.
    pub fn apply_toy(&mut self) {
        let seed = self.train.seed;
        self.train = TrainConfig { seed, ..TrainConfig::toy() };
        let nseed = self.noise.seed;
        self.noise = NoiseConfig { seed: nseed, ..NoiseConfig::toy() };
    }

    /// Rewrites the master seed and every nested seed deterministically.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.noise.seed = seed;
        self.eval.seed = seed;
        if let Some(swap) = &mut self.swap_noise {
            swap.seed = seed.wrapping_add(1);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.noise.validate()?;
        self.eval.validate()?;
        self.sgxor.validate()?;
        if let Some(swap) = &self.swap_noise {
            swap.validate()?;
        }
        if !(0.0..=1.0).contains(&self.dataset.train_fraction) {
            bail!("dataset.train_fraction must lie in [0, 1]");
        }
        if self.dataset.dir.is_none() && self.dataset.synthetic_count < 2 {
            bail!("dataset.synthetic_count must be >= 2 when no directory is given");
        }
        Ok(())
    }

    /// The effective training config: run-level gate parameters override
    /// whatever the `[train]` table carried.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { sgxor: self.sgxor, ..self.train.clone() }
    }

    /// Loads or synthesizes the covers and splits them deterministically.
    /// Returns the split and a one-line provenance summary.
    pub fn load_covers(&self) -> Result<(DataSplit, String)> {
        let shape = &self.train.shape;
        match &self.dataset.dir {
            Some(dir) => {
                let (split, report) =
                    ingest_dir(dir, shape.img_h, shape.img_w, self.dataset.train_fraction)?;
                let mut line = format!(
                    "loaded {} covers from {} (train {} / test {})",
                    report.loaded,
                    dir.display(),
                    split.train.len(),
                    split.test.len()
                );
                if !report.skipped.is_empty() {
                    line.push_str(&format!(", skipped {}", report.skipped.len()));
                    for (name, why) in &report.skipped {
                        line.push_str(&format!("\n  skipped {name}: {why}"));
                    }
                }
                Ok((split, line))
            }
            None => {
                let n = self.dataset.synthetic_count;
                let covers = synthetic_corpus(shape, n, self.seed)?;
                let n_train = (n as f64 * self.dataset.train_fraction).round() as usize;
                let split = DataSplit::from_vec(covers, n_train)?;
                let line = format!(
                    "synthesized {n} covers at {}x{} (train {} / test {})",
                    shape.img_h,
                    shape.img_w,
                    split.train.len(),
                    split.test.len()
                );
                Ok((split, line))
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing run config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_tables_fill_from_defaults() {
        let cfg: RunConfig = toml::from_str(
            "seed = 7\n[train]\nepochs_stage1 = 2\n[noise]\ngauss_sigma = 0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.epochs_stage1, 2);
        assert_eq!(cfg.train.batch_size, TrainConfig::toy().batch_size);
        assert_eq!(cfg.noise.gauss_sigma, 0.5);
        assert_eq!(cfg.noise.moire_prob, NoiseConfig::toy().moire_prob);
        assert!(cfg.swap_noise.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("bogus_knob = 3\n").is_err());
    }

    #[test]
    fn seed_override_reaches_every_component() {
        let mut cfg = RunConfig { swap_noise: Some(NoiseConfig::toy()), ..RunConfig::default() };
        cfg.apply_seed(42);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.noise.seed, 42);
        assert_eq!(cfg.eval.seed, 42);
        assert_eq!(cfg.swap_noise.unwrap().seed, 43);
    }

    #[test]
    fn gate_parameters_flow_into_training() {
        let mut cfg = RunConfig::default();
        cfg.sgxor.m = 12.5;
        assert_eq!(cfg.train_config().sgxor.m, 12.5);
    }
}
