//! Synthetic desk-scale dataset generator.
//!
//! Renders labeled lesion-like blobs: benign blobs are round and uniformly
//! colored, malignant ones are asymmetric with ragged borders and mixed
//! colors. The latent asymmetry/border/color magnitudes also drive synthetic
//! annotator scores (each annotator has a personal offset and scale, so the
//! per-annotator standardization actually has work to do). Output follows
//! the real data contracts: an image directory, a labels CSV and an
//! annotations CSV.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub image_size: usize,
    pub annotator_pool: usize,
    /// Fraction of lesions that receive crowd annotations at all.
    pub annotated_fraction: f64,
    /// Fraction of annotated lesions that also get color (C) scores.
    pub color_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_images: 256,
            image_size: 64,
            annotator_pool: 6,
            annotated_fraction: 0.85,
            color_fraction: 0.6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPaths {
    pub labels_csv: PathBuf,
    pub annotations_csv: PathBuf,
    pub image_dir: PathBuf,
}

/// Ground-truth annotation coverage, for the validation report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticCounts {
    pub lesions: usize,
    pub annotated: usize,
    pub with_a: usize,
    pub with_b: usize,
    pub with_c: usize,
}

/// Writes the synthetic dataset under `out_dir` (images/, labels.csv,
/// annotations.csv). Deterministic: the same spec produces byte-identical
/// files.
pub fn generate(spec: &SyntheticSpec, out_dir: &Path) -> Result<(SyntheticPaths, SyntheticCounts)> {
    if spec.n_images == 0 || spec.image_size < 16 {
        return Err(Error::config(
            "synthetic spec needs n_images >= 1 and image_size >= 16",
        ));
    }
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, 0.08).unwrap();

    // Personal scoring scales per (annotator, feature).
    let annotators: Vec<String> = (0..spec.annotator_pool.max(3))
        .map(|i| format!("S{i:02}"))
        .collect();
    let personal: Vec<[(f64, f64); 3]> = annotators
        .iter()
        .map(|_| {
            std::array::from_fn(|_| {
                (rng.random_range(1.0..5.0), rng.random_range(0.5..2.5))
            })
        })
        .collect();

    let mut labels = String::from("lesion_id,diagnosis\n");
    let mut annotations = String::from("lesion_id,annotator_id,feature,score\n");
    let mut counts = SyntheticCounts {
        lesions: spec.n_images,
        annotated: 0,
        with_a: 0,
        with_b: 0,
        with_c: 0,
    };

    for i in 0..spec.n_images {
        let lesion_id = format!("SYN{i:05}");
        let class_draw: f64 = rng.random_range(0.0..1.0);
        let (diagnosis, malignant) = if class_draw < 0.187 {
            ("melanoma", true)
        } else if class_draw < 0.314 {
            ("seborrheic_keratosis", true)
        } else {
            ("nevus", false)
        };

        // Latent visual magnitudes in [0, 1], overlapping across classes.
        let latent: [f64; 3] = std::array::from_fn(|_| {
            if malignant {
                rng.random_range(0.45..1.0)
            } else {
                rng.random_range(0.0..0.55)
            }
        });

        let img = render_lesion(spec.image_size, malignant, latent, &mut rng);
        let path = image_dir.join(format!("{lesion_id}.png"));
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;

        labels.push_str(&format!("{lesion_id},{diagnosis}\n"));

        let annotated = rng.random_range(0.0..1.0) < spec.annotated_fraction;
        if !annotated {
            continue;
        }
        counts.annotated += 1;
        // One annotated lesion lacks the A feature, mirroring real coverage
        // where one feature can be missing for a scored lesion.
        let with_a = counts.annotated != 1;
        let with_c = rng.random_range(0.0..1.0) < spec.color_fraction;
        counts.with_a += usize::from(with_a);
        counts.with_b += 1;
        counts.with_c += usize::from(with_c);

        let mut pool: Vec<usize> = (0..annotators.len()).collect();
        pool.shuffle(&mut rng);
        let raters = &pool[..3];
        for &r in raters {
            for (fi, feature) in ["A", "B", "C"].iter().enumerate() {
                let include = match fi {
                    0 => with_a,
                    1 => true,
                    _ => with_c,
                };
                if !include {
                    continue;
                }
                let (offset, scale) = personal[r][fi];
                let score = offset + scale * (latent[fi] + noise.sample(&mut rng));
                annotations.push_str(&format!(
                    "{lesion_id},{},{},{score:.6}\n",
                    annotators[r], feature
                ));
            }
        }
    }

    let labels_csv = out_dir.join("labels.csv");
    let annotations_csv = out_dir.join("annotations.csv");
    write_text(&labels_csv, &labels)?;
    write_text(&annotations_csv, &annotations)?;

    Ok((
        SyntheticPaths {
            labels_csv,
            annotations_csv,
            image_dir,
        },
        counts,
    ))
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(content.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Radial blob with class-dependent asymmetry, border raggedness and
/// color mixing.
fn render_lesion(
    size: usize,
    malignant: bool,
    latent: [f64; 3],
    rng: &mut ChaCha8Rng,
) -> image::RgbImage {
    let s = size as f64;
    let [asym, border, color] = latent;

    let cx = s / 2.0 + rng.random_range(-s * 0.06..s * 0.06);
    let cy = s / 2.0 + rng.random_range(-s * 0.06..s * 0.06);
    let r0 = s * rng.random_range(0.18..0.26);
    let phi_a = rng.random_range(0.0..std::f64::consts::TAU);
    let jag: [(f64, f64); 3] = std::array::from_fn(|_| {
        (
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.5..1.0),
        )
    });

    // Base lesion palette: darker and more varied for high color scores.
    let base_dark = if malignant { 55.0 } else { 95.0 };
    let sectors = 2 + (3.0 * color).round() as usize;
    let sector_colors: Vec<[f64; 3]> = (0..sectors)
        .map(|_| {
            let spread = 25.0 + 60.0 * color;
            [
                (base_dark + 40.0 + rng.random_range(-spread..spread)).clamp(10.0, 220.0),
                (base_dark + rng.random_range(-spread..spread)).clamp(5.0, 200.0),
                (base_dark - 15.0 + rng.random_range(-spread..spread)).clamp(0.0, 180.0),
            ]
        })
        .collect();
    let sector_phase = rng.random_range(0.0..std::f64::consts::TAU);

    let bg_noise_seed: u64 = rng.random_range(0..u64::MAX);
    let mut bg_rng = ChaCha8Rng::seed_from_u64(bg_noise_seed);
    let mut img = image::RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let n: f64 = bg_rng.random_range(-8.0..8.0);
            let bg = [205.0 + n, 172.0 + n, 150.0 + n];

            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let dist = (dx * dx + dy * dy).sqrt();
            let theta = dy.atan2(dx);

            // Boundary radius: ellipse-like asymmetry plus high-frequency jags.
            let mut boundary = r0 * (1.0 + 0.45 * asym * (theta - phi_a).cos());
            for (k, (phase, amp)) in [5.0, 7.0, 9.0].iter().zip(jag) {
                boundary += r0 * 0.12 * border * amp * (k * theta + phase).cos();
            }

            let alpha = ((boundary - dist) / 1.5).clamp(0.0, 1.0);
            let sector = ((theta + sector_phase).rem_euclid(std::f64::consts::TAU)
                / (std::f64::consts::TAU / sectors as f64)) as usize;
            let lesion = sector_colors[sector.min(sectors - 1)];

            let px: [u8; 3] = std::array::from_fn(|c| {
                (bg[c] * (1.0 - alpha) + lesion[c] * alpha).clamp(0.0, 255.0) as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}
