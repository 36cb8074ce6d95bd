//! Metrics (BER, U-BER, PSNR) and the ablation harness over training
//! strategies, gradient estimators, and fusion architectures.

use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{binarize_message, Codec, FusionKind, Message};
use crate::dataset::DataSplit;
use crate::error::{Error, Result};
use crate::noise::{apply_noise_pipeline, substream, NoiseConfig};
use crate::restorer::Restorer;
use crate::sgxor::GradEstimator;
use crate::training::{train_joint, train_stage1, train_stage2, TrainConfig};

/// Unpaired-reference evaluation settings. `seed` drives both the message
/// assignment and the noise substreams, so a full evaluation is a pure
/// function of (weights, covers, configs, seed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Number of unpaired reference images per key.
    pub k: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k: 10, seed: 1 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("eval config: K must be >= 1"));
        }
        Ok(())
    }
}

/// Bit error rate in percent: `100 * hamming / L`.
pub fn ber(pred: &Message, truth: &Message) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "ber: {} vs {} bits",
            pred.len(),
            truth.len()
        )));
    }
    let wrong = pred.bits().iter().zip(truth.bits()).filter(|(a, b)| a != b).count();
    Ok(100.0 * wrong as f64 / pred.len() as f64)
}

/// Peak signal-to-noise ratio in dB over unit-range images; identical
/// inputs report the infinity sentinel.
pub fn psnr(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    let m = crate::restorer::mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

/// Unpaired bit error rate: decodes the first `k` references through the
/// caller's noise+restoration+decode process and averages their BER against
/// the true message. The average is order-invariant over those `k`.
pub fn uber(
    msg: &Message,
    refs: &[Array3<f32>],
    k: usize,
    mut process_and_decode: impl FnMut(&Array3<f32>) -> Result<Vec<f32>>,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("uber: K must be >= 1"));
    }
    if refs.len() < k {
        return Err(Error::input(format!(
            "uber: {} references for K = {k}",
            refs.len()
        )));
    }
    let mut total = 0.0f64;
    for r in &refs[..k] {
        let soft = process_and_decode(r)?;
        total += ber(&binarize_message(&soft), msg)?;
    }
    Ok(total / k as f64)
}

/// Paired and unpaired error of one model over a held-out set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineEval {
    /// Mean BER over covers, percent.
    pub ber: f64,
    /// Mean U-BER over covers (K references each), percent.
    pub uber: f64,
}

/// Encodes a fresh message per held-out cover, sends cover and references
/// through the same noise-and-restoration process, and decodes both against
/// the cover's key. `restorer: None` decodes the noised image directly;
/// pass a disabled noise config for clean evaluation.
pub fn evaluate_pipeline(
    codec: &Codec,
    restorer: Option<&Restorer>,
    covers: &[Array3<f32>],
    noise: &NoiseConfig,
    cfg: &EvalConfig,
) -> Result<PipelineEval> {
    cfg.validate()?;
    noise.validate()?;
    if covers.len() < cfg.k + 1 {
        return Err(Error::input(format!(
            "evaluate_pipeline: need at least K+1 = {} held-out covers, got {}",
            cfg.k + 1,
            covers.len()
        )));
    }
    let mut msg_rng = substream(cfg.seed, 4);
    let mut noise_rng = substream(cfg.seed, 5);
    let mut ber_sum = 0.0f64;
    let mut uber_sum = 0.0f64;
    for (i, cover) in covers.iter().enumerate() {
        let msg = Message::random(codec.shape.msg_len, &mut msg_rng);
        let key = codec.encode(cover, &msg)?;
        let mut process = |img: &Array3<f32>| -> Result<Vec<f32>> {
            let noised = apply_noise_pipeline(img, noise, &mut noise_rng)?;
            let seen = match restorer {
                Some(r) => r.restore(&noised)?,
                None => noised,
            };
            codec.decode(&key, &seen)
        };
        let soft = process(cover)?;
        ber_sum += ber(&binarize_message(&soft), &msg)?;

        let refs: Vec<Array3<f32>> =
            (1..=cfg.k).map(|j| covers[(i + j) % covers.len()].clone()).collect();
        uber_sum += uber(&msg, &refs, cfg.k, process)?;
    }
    let n = covers.len() as f64;
    Ok(PipelineEval { ber: ber_sum / n, uber: uber_sum / n })
}

/// Rows of the architecture / estimator / strategy ablation tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// Full pipeline with the surrogate-gradient XOR (same as TwoStage).
    #[serde(rename = "sgxor")]
    SgXor,
    /// Straight-through estimator replacing the surrogate gradient.
    Ste,
    /// Concat+conv fusion instead of XOR (the structural shortcut).
    CatConv,
    /// Stage 1 only: decode noised images without restoration.
    S1Only,
    /// Single-stage end-to-end training.
    Joint,
    /// Standard two-stage training.
    TwoStage,
    /// Restorer trained under an alternative noise model, evaluated under
    /// the standard one.
    NoiseSwap,
}

impl AblationVariant {
    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::SgXor => "sgxor",
            AblationVariant::Ste => "ste",
            AblationVariant::CatConv => "cat_conv",
            AblationVariant::S1Only => "s1_only",
            AblationVariant::Joint => "joint",
            AblationVariant::TwoStage => "two_stage",
            AblationVariant::NoiseSwap => "noise_swap",
        }
    }

    pub fn all() -> [AblationVariant; 7] {
        [
            AblationVariant::SgXor,
            AblationVariant::Ste,
            AblationVariant::CatConv,
            AblationVariant::S1Only,
            AblationVariant::Joint,
            AblationVariant::TwoStage,
            AblationVariant::NoiseSwap,
        ]
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::all()
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::input(format!("unknown ablation variant `{s}`")))
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One machine-readable ablation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// Percent, held-out covers under the evaluation noise.
    pub ber: f64,
    /// Percent, unpaired references under the same process.
    pub uber: f64,
    pub seed: u64,
    /// Hex digest over every config that shaped the run.
    pub config_digest: String,
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<11} | {:>7.2} | {:>7.2} | {:>5} | {}",
            self.variant,
            self.ber,
            self.uber,
            self.seed,
            &self.config_digest[..12.min(self.config_digest.len())]
        )
    }
}

/// Delimited table over ablation rows, percent metrics at 2 decimals.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "variant     | BER (%) | U-BER % | seed  | config\n------------+---------+---------+-------+-------------\n",
    );
    for r in rows {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    out
}

fn config_digest(
    variant: AblationVariant,
    cfg: &TrainConfig,
    noise: &NoiseConfig,
    swap_noise: Option<&NoiseConfig>,
    eval_cfg: &EvalConfig,
) -> Result<String> {
    let blob = serde_json::to_vec(&(variant, cfg, noise, swap_noise, eval_cfg))
        .map_err(|e| Error::config(format!("digest configs: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(&blob);
    let bytes: [u8; 32] = hasher.finalize().into();
    Ok(bytes.iter().map(|b| format!("{b:02x}")).collect())
}

/// Trains the requested variant at the given config and evaluates it on the
/// held-out split under the standard noise model. `swap_noise` is required
/// by (and only read for) the noise_swap variant, whose restorer trains
/// against the alternative model.
pub fn run_ablation(
    variant: AblationVariant,
    split: &DataSplit,
    base_cfg: &TrainConfig,
    noise: &NoiseConfig,
    swap_noise: Option<&NoiseConfig>,
    eval_cfg: &EvalConfig,
) -> Result<AblationRow> {
    let mut cfg = base_cfg.clone();
    match variant {
        AblationVariant::SgXor | AblationVariant::TwoStage | AblationVariant::S1Only => {}
        AblationVariant::Ste => cfg.estimator = GradEstimator::Ste,
        AblationVariant::CatConv => cfg.fusion = FusionKind::CatConv,
        AblationVariant::Joint => {}
        AblationVariant::NoiseSwap => {
            if swap_noise.is_none() {
                return Err(Error::config(
                    "noise_swap ablation needs an alternative noise config",
                ));
            }
        }
    }

    let eval = match variant {
        AblationVariant::Joint => {
            let (pipe, _) = train_joint(&split.train, noise, &cfg)?;
            evaluate_pipeline(&pipe.codec, Some(&pipe.restorer), &split.test, noise, eval_cfg)?
        }
        AblationVariant::S1Only => {
            let (codec, _) = train_stage1(&split.train, &cfg)?;
            evaluate_pipeline(&codec, None, &split.test, noise, eval_cfg)?
        }
        AblationVariant::NoiseSwap => {
            let (codec, _) = train_stage1(&split.train, &cfg)?;
            let trained_under = swap_noise.expect("checked above");
            let (restorer, _) = train_stage2(&split.train, &codec, trained_under, &cfg)?;
            evaluate_pipeline(&codec, Some(&restorer), &split.test, noise, eval_cfg)?
        }
        _ => {
            let (codec, _) = train_stage1(&split.train, &cfg)?;
            let (restorer, _) = train_stage2(&split.train, &codec, noise, &cfg)?;
            evaluate_pipeline(&codec, Some(&restorer), &split.test, noise, eval_cfg)?
        }
    };

    Ok(AblationRow {
        variant: variant.name().to_string(),
        ber: eval.ber,
        uber: eval.uber,
        seed: cfg.seed,
        config_digest: config_digest(variant, &cfg, noise, swap_noise, eval_cfg)?,
    })
}
