//! Cover-image ingestion, deterministic splitting, and a synthetic texture
//! corpus for self-contained runs.

use std::path::Path;

use image::imageops::FilterType;
use ndarray::{Array2, Array3};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::codec::ModelShape;
use crate::error::{Error, Result};
use crate::moments::build_kernel_bank;
use crate::noise::substream;

/// Train/test cover images, already decoded and sized.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: Vec<Array3<f32>>,
    pub test: Vec<Array3<f32>>,
}

impl DataSplit {
    /// Splits an already-shuffled image list at `n_train`.
    pub fn from_vec(mut images: Vec<Array3<f32>>, n_train: usize) -> Result<Self> {
        if n_train > images.len() {
            return Err(Error::input(format!(
                "split: n_train {n_train} exceeds corpus size {}",
                images.len()
            )));
        }
        let test = images.split_off(n_train);
        Ok(DataSplit { train: images, test })
    }
}

/// What `ingest_dir` loaded and what it had to skip.
#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub loaded: usize,
    /// (file name, reason) for every unreadable entry.
    pub skipped: Vec<(String, String)>,
}

/// Loads every readable image under `dir`, resizes to `h`x`w` (bilinear),
/// and splits train/test by the SHA-256 order of file names.
///
/// The split depends only on the set of file names: files are ranked by
/// their name hash and the first `round(n * train_fraction)` become the
/// training set. Unreadable files are skipped and reported; a directory
/// with no readable image is an error.
pub fn ingest_dir(
    dir: &Path,
    h: usize,
    w: usize,
    train_fraction: f64,
) -> Result<(DataSplit, IngestReport)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::config(format!(
            "ingest: train_fraction {train_fraction} outside [0, 1]"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::config("ingest: zero target size"));
    }
    let mut names: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))? {
        let entry = entry.map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))?;
        if entry.file_type().map(|t| t.is_file()).unwrap_or(false) {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();

    let mut report = IngestReport::default();
    let mut loaded: Vec<(String, Array3<f32>)> = Vec::new();
    for name in names {
        match load_image(&dir.join(&name), h, w) {
            Ok(img) => loaded.push((name, img)),
            Err(e) => report.skipped.push((name, e.to_string())),
        }
    }
    if loaded.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no readable images ({} skipped)",
            dir.display(),
            report.skipped.len()
        )));
    }
    report.loaded = loaded.len();

    loaded.sort_by_key(|(name, _)| {
        let mut hasher = Sha256::new();
        hasher.update(name.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        (digest, name.clone())
    });
    let n_train = (loaded.len() as f64 * train_fraction).round() as usize;
    let images: Vec<Array3<f32>> = loaded.into_iter().map(|(_, img)| img).collect();
    Ok((DataSplit::from_vec(images, n_train)?, report))
}

/// Decodes one image file to a `(3, h, w)` array in `[0, 1]`.
pub fn load_image(path: &Path, h: usize, w: usize) -> Result<Array3<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let rgb = img.resize_exact(w as u32, h as u32, FilterType::Triangle).to_rgb32f();
    let mut out = Array3::<f32>::zeros((3, h, w));
    for i in 0..h {
        for j in 0..w {
            let px = rgb.get_pixel(j as u32, i as u32).0;
            for c in 0..3 {
                out[(c, i, j)] = px[c].clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Fraction of dark pixels is drawn from this range per image, so the mean
/// gray level (and with it the radial-DC moment) varies across the corpus.
const QUANTILE_RANGE: (f32, f32) = (0.55, 0.8);
/// Edge softness of the two-level texture; higher is closer to binary.
const EDGE_GAIN: f32 = 6.0;

/// Generates `count` soft-thresholded harmonic textures sized for `shape`.
///
/// Each image mixes every moment kernel with a random weight and phase,
/// then soft-thresholds the field at a random quantile between two random
/// gray levels. The result is a high-contrast texture whose per-slot moment
/// magnitudes spread across the normalized range, so rounded feature bits
/// disagree between unrelated images at close to the fair-coin rate; gentle
/// low-contrast fields would instead leave every image with nearly the same
/// bit pattern. All three channels carry the same gray texture.
pub fn synthetic_corpus(shape: &ModelShape, count: usize, seed: u64) -> Result<Vec<Array3<f32>>> {
    shape.validate()?;
    let (h, w) = (shape.img_h, shape.img_w);
    let bank = build_kernel_bank(h, w, shape.key_c, shape.key_h, shape.key_w)?;
    let n = bank.count();

    // Real/imaginary kernel fields and their inverse RMS, computed once.
    let mut fields: Vec<(Array2<f32>, Array2<f32>, f32)> = Vec::with_capacity(n);
    for q in 0..n {
        let mut re = Array2::<f32>::zeros((h, w));
        let mut im = Array2::<f32>::zeros((h, w));
        let mut energy = 0.0f64;
        for i in 0..h {
            for j in 0..w {
                let k = bank.kernel_value(q, i, j);
                re[(i, j)] = k.re;
                im[(i, j)] = k.im;
                energy += (k.re as f64) * (k.re as f64) + (k.im as f64) * (k.im as f64);
            }
        }
        let inv_rms = if energy > 0.0 { ((h * w) as f64 / energy).sqrt() as f32 } else { 0.0 };
        fields.push((re, im, inv_rms));
    }

    let mut out = Vec::with_capacity(count);
    for idx in 0..count {
        let mut rng = substream(seed, idx as u64);
        let mut field = Array2::<f32>::zeros((h, w));
        for (re, im, inv_rms) in &fields {
            let wgt: f32 = rng.random_range(0.0..1.0) * inv_rms;
            let ph: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let (c, s) = (ph.cos(), ph.sin());
            ndarray::Zip::from(&mut field).and(re).and(im).for_each(|o, &a, &b| {
                *o += wgt * (c * a - s * b);
            });
        }

        let mut vals: Vec<f32> = field.iter().cloned().collect();
        vals.sort_by(|a, b| a.partial_cmp(b).expect("finite field"));
        let p: f32 = rng.random_range(QUANTILE_RANGE.0..QUANTILE_RANGE.1);
        let cut = vals[((vals.len() - 1) as f32 * p) as usize];
        let rms =
            (field.iter().map(|v| (v * v) as f64).sum::<f64>() / (h * w) as f64).sqrt().max(1e-9) as f32;
        let dark: f32 = rng.random_range(0.08..0.2);
        let light: f32 = rng.random_range(0.75..0.92);

        let gray = field.mapv(|v| {
            let t = 1.0 / (1.0 + (-(EDGE_GAIN * (v - cut) / rms)).exp());
            dark + (light - dark) * t
        });
        let mut img = Array3::<f32>::zeros((3, h, w));
        for c in 0..3 {
            img.index_axis_mut(ndarray::Axis(0), c).assign(&gray);
        }
        out.push(img);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::extract_moment_map;
    use crate::moments::to_gray;
    use crate::sgxor::round_bit;

    fn toy_shape() -> ModelShape {
        ModelShape::toy()
    }

    #[test]
    fn corpus_is_deterministic_and_in_range() {
        let shape = toy_shape();
        let a = synthetic_corpus(&shape, 3, 7).unwrap();
        let b = synthetic_corpus(&shape, 3, 7).unwrap();
        let c = synthetic_corpus(&shape, 3, 8).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
        assert_ne!(a[0], c[0]);
        for img in &a {
            assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
            let mn = img.iter().cloned().fold(f32::INFINITY, f32::min);
            let mx = img.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert!(mx - mn > 0.3, "texture has contrast, got {}", mx - mn);
        }
    }

    /// Unrelated-image feature bits must disagree near the fair-coin rate;
    /// this is what makes a key from one cover useless on another.
    #[test]
    fn corpus_feature_bits_disagree_near_half() {
        let shape = toy_shape();
        let imgs = synthetic_corpus(&shape, 40, 11).unwrap();
        let bank =
            build_kernel_bank(shape.img_h, shape.img_w, shape.key_c, shape.key_h, shape.key_w)
                .unwrap();
        let bits: Vec<Vec<u8>> = imgs
            .iter()
            .map(|img| {
                let gray = to_gray(img).unwrap();
                let map = extract_moment_map(&gray, &bank).unwrap();
                map.iter().map(|v| round_bit(*v)).collect()
            })
            .collect();
        let l = bits[0].len();
        let mut total = 0.0f64;
        let mut pairs = 0u32;
        for i in 0..bits.len() {
            for j in (i + 1)..bits.len() {
                let d = bits[i].iter().zip(&bits[j]).filter(|(a, b)| a != b).count();
                total += d as f64 / l as f64;
                pairs += 1;
            }
        }
        let q = total / pairs as f64;
        assert!((0.35..=0.6).contains(&q), "mean pairwise disagreement {q}");
    }

    #[test]
    fn split_is_deterministic_with_exact_counts() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..120 {
            let mut img = image::RgbImage::new(4, 4);
            for (x, y, px) in img.enumerate_pixels_mut() {
                px.0 = [(i * 2) as u8, (x * 60) as u8, (y * 60) as u8];
            }
            img.save(dir.path().join(format!("img{i:03}.png"))).unwrap();
        }
        let frac = 100.0 / 120.0;
        let (split_a, report) = ingest_dir(dir.path(), 8, 8, frac).unwrap();
        let (split_b, _) = ingest_dir(dir.path(), 8, 8, frac).unwrap();
        assert_eq!(report.loaded, 120);
        assert!(report.skipped.is_empty());
        assert_eq!(split_a.train.len(), 100);
        assert_eq!(split_a.test.len(), 20);
        for (x, y) in split_a.train.iter().zip(&split_b.train) {
            assert_eq!(x, y);
        }
        for (x, y) in split_a.test.iter().zip(&split_b.test) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn unreadable_files_are_skipped_and_empty_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("broken.png"), b"not an image").unwrap();
        let err = ingest_dir(dir.path(), 8, 8, 0.5).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)), "{err}");

        let mut img = image::RgbImage::new(4, 4);
        img.put_pixel(1, 1, image::Rgb([200, 10, 10]));
        img.save(dir.path().join("ok.png")).unwrap();
        let (split, report) = ingest_dir(dir.path(), 8, 8, 1.0).unwrap();
        assert_eq!(report.loaded, 1);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].0, "broken.png");
        assert_eq!(split.train.len(), 1);
        assert_eq!(split.train[0].dim(), (3, 8, 8));
    }

    #[test]
    fn resize_reaches_target_shape_and_range() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = image::RgbImage::new(13, 9);
        for (x, y, px) in img.enumerate_pixels_mut() {
            px.0 = [(x * 19) as u8, 255 - (y * 23) as u8, 128];
        }
        img.save(dir.path().join("a.png")).unwrap();
        let arr = load_image(&dir.path().join("a.png"), 16, 24).unwrap();
        assert_eq!(arr.dim(), (3, 16, 24));
        assert!(arr.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
