//! `nimk` — derive, verify, and stress-test non-intrusive image watermarks.
//!
//! Covers are never modified: `generate-key` distills a cover into a key
//! file, `verify` decodes that key against a (possibly photographed) image,
//! `attack` simulates the screen capture, and `train`/`eval`/`ablate` manage
//! the learned pipeline behind it all.

mod config;

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand};
use ndarray::Array3;

use nimk_core::codec::binarize_message;
use nimk_core::eval::{ablation_table, ber, evaluate_pipeline, run_ablation, AblationVariant};
use nimk_core::keyfile::{key_bytes, read_key};
use nimk_core::noise::{apply_noise_pipeline, substream};
use nimk_core::training::{load_pipeline, save_pipeline, train_stage1, train_stage2, Pipeline};
use nimk_core::{dataset, Message};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "nimk",
    version,
    about = "Non-intrusive image watermarking: keys are derived from covers, never embedded into them"
)]
struct Cli {
    /// TOML run configuration; omitted keys use the documented defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed override; rewrites every nested seed for the run.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Apply the desk-scale presets (64x64 covers, 64-bit messages).
    #[arg(long, global = true)]
    toy: bool,

    /// Output directory override.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the codec on clean covers, then the restorer under capture
    /// noise; writes a checkpoint, a config snapshot, and the loss curves.
    Train,

    /// Derive a verification key for a cover image. The cover file is only
    /// read; its bytes are never touched.
    GenerateKey {
        /// Trained pipeline checkpoint (defaults to OUT_DIR/pipeline.nimc).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Cover image (PNG or JPEG).
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        /// Owner message as a hex string (message length / 4 digits).
        #[arg(long, value_name = "HEX")]
        message: Option<String>,
        /// Owner message as a file of `0`/`1` characters.
        #[arg(long, value_name = "PATH")]
        message_file: Option<PathBuf>,
        /// Key file destination (defaults to OUT_DIR/<image stem>.nimk).
        #[arg(long, value_name = "PATH")]
        key_out: Option<PathBuf>,
    },

    /// Decode a key against an image, report the recovered message, and
    /// judge ownership against an optional expected message.
    Verify {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Key file produced by generate-key.
        #[arg(long, value_name = "PATH")]
        key: PathBuf,
        /// Image to verify (clean cover or captured copy).
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        /// Expected message as hex.
        #[arg(long, value_name = "HEX")]
        expected: Option<String>,
        /// Expected message as a file of `0`/`1` characters.
        #[arg(long, value_name = "PATH")]
        expected_file: Option<PathBuf>,
        /// Pass/fail threshold on BER, in percent.
        #[arg(long, value_name = "PCT", default_value_t = 5.0)]
        threshold: f64,
        /// Run the learned restorer before decoding (for captured copies).
        #[arg(long)]
        restore: bool,
    },

    /// Simulate a screen capture of an image and save the result.
    Attack {
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        /// Destination PNG (defaults to OUT_DIR/attacked.png).
        #[arg(long, value_name = "PATH")]
        out_image: Option<PathBuf>,
    },

    /// Evaluate a trained pipeline on the held-out split: BER under the
    /// capture model and U-BER against unpaired references.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },

    /// Train and evaluate pipeline variants; writes a table and a JSONL
    /// report. Variants: sgxor, ste, cat_conv, s1_only, joint, two_stage,
    /// noise_swap (the last needs [swap_noise] in the config).
    Ablate {
        /// Variant name; repeat the flag for several. Defaults to every
        /// variant the config supports.
        #[arg(long = "variant", value_name = "NAME")]
        variants: Vec<String>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut run = RunConfig::load(cli.config.as_deref())?;
    if cli.toy {
        run.apply_toy();
    }
    if let Some(seed) = cli.seed {
        run.apply_seed(seed);
    }
    if let Some(out) = cli.out {
        run.out_dir = out;
    }
    run.validate()?;

    match cli.cmd {
        Cmd::Train => cmd_train(&run),
        Cmd::GenerateKey { checkpoint, image, message, message_file, key_out } => {
            cmd_generate_key(&run, checkpoint, &image, message, message_file, key_out)
        }
        Cmd::Verify { checkpoint, key, image, expected, expected_file, threshold, restore } => {
            cmd_verify(&run, checkpoint, &key, &image, expected, expected_file, threshold, restore)
        }
        Cmd::Attack { image, out_image } => cmd_attack(&run, &image, out_image),
        Cmd::Eval { checkpoint } => cmd_eval(&run, checkpoint),
        Cmd::Ablate { variants } => cmd_ablate(&run, &variants),
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_train(run: &RunConfig) -> Result<()> {
    let (split, provenance) = run.load_covers()?;
    println!("{provenance}");

    let cfg = run.train_config();
    let (codec, s1) = train_stage1(&split.train, &cfg)?;
    println!(
        "stage 1: {} steps, batch loss {:.6} -> {:.6}",
        s1.len(),
        s1.first().copied().unwrap_or(f64::NAN),
        s1.last().copied().unwrap_or(f64::NAN)
    );
    let (restorer, s2) = train_stage2(&split.train, &codec, &run.noise, &cfg)?;
    println!(
        "stage 2: {} steps, restoration loss {:.6} -> {:.6}",
        s2.len(),
        s2.first().copied().unwrap_or(f64::NAN),
        s2.last().copied().unwrap_or(f64::NAN)
    );

    fs::create_dir_all(&run.out_dir)
        .with_context(|| format!("creating {}", run.out_dir.display()))?;
    let pipe = Pipeline { codec, restorer };
    let ckpt = run.out_dir.join("pipeline.nimc");
    save_atomic_checkpoint(&ckpt, &pipe, &cfg)?;
    println!("checkpoint: {} (weights {})", ckpt.display(), short_hex(&pipe.codec.weights_digest()));

    let snapshot = run.out_dir.join("run_config.toml");
    write_atomic(&snapshot, run.to_toml()?.as_bytes())?;
    let losses = run.out_dir.join("losses.json");
    let blob = serde_json::to_vec_pretty(&serde_json::json!({ "stage1": s1, "stage2": s2 }))?;
    write_atomic(&losses, &blob)?;
    println!("config snapshot: {}", snapshot.display());
    println!("loss curves: {}", losses.display());
    Ok(())
}

fn cmd_generate_key(
    run: &RunConfig,
    checkpoint: Option<PathBuf>,
    image: &Path,
    message: Option<String>,
    message_file: Option<PathBuf>,
    key_out: Option<PathBuf>,
) -> Result<()> {
    let (pipe, cfg) = load_pipeline_at(run, checkpoint)?;
    let msg_len = cfg.shape.msg_len;
    let msg = match (message, message_file) {
        (Some(hex), None) => parse_hex_message(&hex, msg_len)?,
        (None, Some(path)) => read_bits_file(&path, msg_len)?,
        (None, None) => bail!("provide the owner message via --message or --message-file"),
        (Some(_), Some(_)) => bail!("--message and --message-file are mutually exclusive"),
    };

    let cover = dataset::load_image(image, cfg.shape.img_h, cfg.shape.img_w)?;
    let mut key = pipe.codec.encode(&cover, &msg)?;
    key.seed = Some(run.seed);

    let dest = match key_out {
        Some(p) => p,
        None => {
            let stem = image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "cover".to_string());
            run.out_dir.join(format!("{stem}.nimk"))
        }
    };
    if let Some(parent) = dest.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_atomic(&dest, &key_bytes(&key, msg_len)?)?;
    println!("cover: {} (read-only, unmodified)", image.display());
    println!(
        "key: {} ({} bits bound to weights {})",
        dest.display(),
        msg_len,
        short_hex(&key.digest)
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_verify(
    run: &RunConfig,
    checkpoint: Option<PathBuf>,
    key_path: &Path,
    image: &Path,
    expected: Option<String>,
    expected_file: Option<PathBuf>,
    threshold: f64,
    restore: bool,
) -> Result<()> {
    ensure!(threshold.is_finite() && (0.0..=100.0).contains(&threshold), "threshold is a percent");
    let (pipe, cfg) = load_pipeline_at(run, checkpoint)?;
    let (key, msg_len) = read_key(key_path)?;
    ensure!(
        msg_len == cfg.shape.msg_len,
        "key carries a {}-bit message but the checkpoint decodes {} bits",
        msg_len,
        cfg.shape.msg_len
    );

    let mut img = dataset::load_image(image, cfg.shape.img_h, cfg.shape.img_w)?;
    if restore {
        img = pipe.restorer.restore(&img)?;
    }
    let soft = pipe.codec.decode(&key, &img)?;
    let recovered = binarize_message(&soft);
    println!("recovered: {}", format_message(recovered.bits()));

    let want = match (expected, expected_file) {
        (Some(hex), None) => Some(parse_hex_message(&hex, msg_len)?),
        (None, Some(path)) => Some(read_bits_file(&path, msg_len)?),
        (None, None) => None,
        (Some(_), Some(_)) => bail!("--expected and --expected-file are mutually exclusive"),
    };
    if let Some(want) = want {
        let b = ber(&recovered, &want)?;
        let verdict = if b <= threshold { "PASS" } else { "FAIL" };
        println!("ber: {b:.2}%");
        println!("verdict: {verdict} (threshold {threshold:.2}%)");
    }
    Ok(())
}

fn cmd_attack(run: &RunConfig, image: &Path, out_image: Option<PathBuf>) -> Result<()> {
    let shape = &run.train.shape;
    let img = dataset::load_image(image, shape.img_h, shape.img_w)?;
    let mut rng = substream(run.noise.seed, 0);
    let noised = apply_noise_pipeline(&img, &run.noise, &mut rng)?;

    let dest = out_image.unwrap_or_else(|| run.out_dir.join("attacked.png"));
    if let Some(parent) = dest.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_atomic(&dest, &encode_png(&noised)?)?;
    println!("attacked image: {}", dest.display());
    Ok(())
}

fn cmd_eval(run: &RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let (pipe, _cfg) = load_pipeline_at(run, checkpoint)?;
    let (split, provenance) = run.load_covers()?;
    println!("{provenance}");

    let report =
        evaluate_pipeline(&pipe.codec, Some(&pipe.restorer), &split.test, &run.noise, &run.eval)?;
    println!("test covers: {}, K = {}", split.test.len(), run.eval.k);
    println!("BER {:.2}%   U-BER {:.2}%", report.ber, report.uber);

    fs::create_dir_all(&run.out_dir)?;
    let path = run.out_dir.join("eval.json");
    let blob = serde_json::to_vec_pretty(&serde_json::json!({
        "ber_percent": report.ber,
        "uber_percent": report.uber,
        "k": run.eval.k,
        "seed": run.seed,
        "n_test": split.test.len(),
        "weights": short_hex(&pipe.codec.weights_digest()),
    }))?;
    write_atomic(&path, &blob)?;
    println!("report: {}", path.display());
    Ok(())
}

fn cmd_ablate(run: &RunConfig, names: &[String]) -> Result<()> {
    let variants: Vec<AblationVariant> = if names.is_empty() {
        AblationVariant::all()
            .into_iter()
            .filter(|v| {
                run.swap_noise.is_some() || !matches!(v, AblationVariant::NoiseSwap)
            })
            .collect()
    } else {
        names.iter().map(|n| n.parse().map_err(anyhow::Error::from)).collect::<Result<_>>()?
    };

    let (split, provenance) = run.load_covers()?;
    println!("{provenance}");

    let cfg = run.train_config();
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        println!("running {v} ...");
        let row = run_ablation(v, &split, &cfg, &run.noise, run.swap_noise.as_ref(), &run.eval)?;
        rows.push(row);
    }

    let table = ablation_table(&rows);
    print!("{table}");

    fs::create_dir_all(&run.out_dir)?;
    let mut jsonl = String::new();
    for row in &rows {
        jsonl.push_str(&serde_json::to_string(row)?);
        jsonl.push('\n');
    }
    let jsonl_path = run.out_dir.join("ablation.jsonl");
    write_atomic(&jsonl_path, jsonl.as_bytes())?;
    write_atomic(&run.out_dir.join("ablation.txt"), table.as_bytes())?;
    println!("report: {}", jsonl_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

fn load_pipeline_at(
    run: &RunConfig,
    checkpoint: Option<PathBuf>,
) -> Result<(Pipeline, nimk_core::TrainConfig)> {
    let path = checkpoint.unwrap_or_else(|| run.out_dir.join("pipeline.nimc"));
    load_pipeline(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Writes via a sibling temp file and rename, so readers never observe a
/// half-written artifact.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn save_atomic_checkpoint(
    path: &Path,
    pipe: &Pipeline,
    cfg: &nimk_core::TrainConfig,
) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    save_pipeline(&tmp, pipe, cfg)?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn short_hex(digest: &[u8; 32]) -> String {
    digest[..6].iter().map(|b| format!("{b:02x}")).collect()
}

/// MSB-first nibble packing: `"a3"` means bits `1010 0011`.
fn parse_hex_message(s: &str, len: usize) -> Result<Message> {
    ensure!(
        len % 4 == 0,
        "a {len}-bit message is not hex-aligned; pass it as --message-file bits instead"
    );
    let text = s.trim();
    let mut bits = Vec::with_capacity(len);
    for c in text.chars() {
        let d = c.to_digit(16).with_context(|| format!("`{c}` is not a hex digit"))?;
        for k in (0..4).rev() {
            bits.push(((d >> k) & 1) as u8);
        }
    }
    ensure!(
        bits.len() == len,
        "expected {} hex digits for a {len}-bit message, got {}",
        len / 4,
        text.chars().count()
    );
    Ok(Message::new(bits)?)
}

fn read_bits_file(path: &Path, len: usize) -> Result<Message> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut bits = Vec::with_capacity(len);
    for c in text.chars().filter(|c| !c.is_whitespace()) {
        match c {
            '0' => bits.push(0u8),
            '1' => bits.push(1u8),
            other => bail!("{}: `{other}` is neither 0 nor 1", path.display()),
        }
    }
    ensure!(bits.len() == len, "{}: expected {len} bits, got {}", path.display(), bits.len());
    Ok(Message::new(bits)?)
}

/// Hex for lengths divisible by four, a raw bit string otherwise.
fn format_message(bits: &[u8]) -> String {
    if bits.len() % 4 == 0 {
        bits.chunks(4)
            .map(|n| {
                let v = (n[0] << 3) | (n[1] << 2) | (n[2] << 1) | n[3];
                char::from_digit(v as u32, 16).expect("nibble")
            })
            .collect()
    } else {
        bits.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect()
    }
}

fn encode_png(img: &Array3<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = img.dim();
    ensure!(c == 3, "expected a 3-channel image, got {c}");
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2]
                .map(|ch| (img[(ch, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8);
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let mut bytes = Vec::new();
    buf.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
        .context("encoding PNG")?;
    Ok(bytes)
}
