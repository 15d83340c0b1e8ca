//! Training-time image augmentation.
//!
//! The transform chain is rotation, flips, width/height shift, shear (all
//! composed into one affine warp about the image center, sampled with
//! bilinear interpolation and edge clamping), then a per-channel intensity
//! shift clipped to [0, 255], then a bilinear resize to the output size.
//! Random draws happen in that fixed order so a seeded rng reproduces the
//! same output bit for bit.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magnitudes of the augmentation chain. Defaults follow the training recipe:
/// rotations up to 180 degrees, both flips, 10% shifts, 0.2 degree shear and
/// channel shifts up to 20 intensity levels, emitting 384x384 images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSpec {
    pub max_rotation_deg: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub width_shift_frac: f64,
    pub height_shift_frac: f64,
    /// Counterclockwise shear, in degrees.
    pub shear_deg: f64,
    /// Uniform per-channel shift bound on the 0-255 intensity scale.
    pub channel_shift_max: f64,
    /// (height, width) of the emitted image.
    pub output_size: (usize, usize),
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            max_rotation_deg: 180.0,
            horizontal_flip: true,
            vertical_flip: true,
            width_shift_frac: 0.10,
            height_shift_frac: 0.10,
            shear_deg: 0.2,
            channel_shift_max: 20.0,
            output_size: (384, 384),
        }
    }
}

impl AugmentationSpec {
    /// Identity chain except for the final resize.
    pub fn resize_only(output_size: (usize, usize)) -> Self {
        AugmentationSpec {
            max_rotation_deg: 0.0,
            horizontal_flip: false,
            vertical_flip: false,
            width_shift_frac: 0.0,
            height_shift_frac: 0.0,
            shear_deg: 0.0,
            channel_shift_max: 0.0,
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("max_rotation_deg", self.max_rotation_deg),
            ("width_shift_frac", self.width_shift_frac),
            ("height_shift_frac", self.height_shift_frac),
            ("shear_deg", self.shear_deg),
            ("channel_shift_max", self.channel_shift_max),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!(
                    "augmentation magnitude {name} must be nonnegative, got {v}"
                )));
            }
        }
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return Err(Error::config("augmentation output_size must be positive"));
        }
        Ok(())
    }
}

/// Row-major 2x3 affine matrix mapping (x, y) image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Affine {
    m: [f64; 6],
}

impl Affine {
    fn identity() -> Self {
        Affine {
            m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Affine {
            m: [c, -s, 0.0, s, c, 0.0],
        }
    }

    fn scale(sx: f64, sy: f64) -> Self {
        Affine {
            m: [sx, 0.0, 0.0, 0.0, sy, 0.0],
        }
    }

    fn translation(tx: f64, ty: f64) -> Self {
        Affine {
            m: [1.0, 0.0, tx, 0.0, 1.0, ty],
        }
    }

    /// Horizontal shear by `theta` counterclockwise: x' = x - tan(theta) * y.
    fn shear_x(theta: f64) -> Self {
        Affine {
            m: [1.0, -theta.tan(), 0.0, 0.0, 1.0, 0.0],
        }
    }

    /// self ∘ other (apply `other` first).
    fn compose(&self, other: &Affine) -> Affine {
        let a = &self.m;
        let b = &other.m;
        Affine {
            m: [
                a[0] * b[0] + a[1] * b[3],
                a[0] * b[1] + a[1] * b[4],
                a[0] * b[2] + a[1] * b[5] + a[2],
                a[3] * b[0] + a[4] * b[3],
                a[3] * b[1] + a[4] * b[4],
                a[3] * b[2] + a[4] * b[5] + a[5],
            ],
        }
    }

    fn invert(&self) -> Affine {
        let [a, b, tx, c, d, ty] = self.m;
        let det = a * d - b * c;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Affine {
            m: [ia, ib, -(ia * tx + ib * ty), ic, id, -(ic * tx + id * ty)],
        }
    }

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0] * x + self.m[1] * y + self.m[2],
            self.m[3] * x + self.m[4] * y + self.m[5],
        )
    }

    fn is_identity(&self) -> bool {
        self.m == Affine::identity().m
    }
}

fn draw_symmetric(rng: &mut impl Rng, magnitude: f64) -> f64 {
    if magnitude > 0.0 {
        rng.random_range(-magnitude..magnitude)
    } else {
        0.0
    }
}

/// Applies the randomized augmentation chain and resizes to the configured
/// output size. Input must be (height, width, 3) with intensities in [0, 255];
/// so is the output.
pub fn augment(
    image: &Array3<f64>,
    spec: &AugmentationSpec,
    rng: &mut impl Rng,
) -> Result<Array3<f64>> {
    spec.validate()?;
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::shape("empty image"));
    }

    // Fixed draw order: rotation, hflip, vflip, width shift, height shift,
    // shear, then one intensity shift per channel.
    let theta = draw_symmetric(rng, spec.max_rotation_deg).to_radians();
    let hflip = spec.horizontal_flip && rng.random_bool(0.5);
    let vflip = spec.vertical_flip && rng.random_bool(0.5);
    let tx = draw_symmetric(rng, spec.width_shift_frac) * w as f64;
    let ty = draw_symmetric(rng, spec.height_shift_frac) * h as f64;
    let shear = draw_symmetric(rng, spec.shear_deg).to_radians();
    let channel_shift: [f64; 3] = [
        draw_symmetric(rng, spec.channel_shift_max),
        draw_symmetric(rng, spec.channel_shift_max),
        draw_symmetric(rng, spec.channel_shift_max),
    ];

    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let center = Affine::translation(cx, cy);
    let uncenter = Affine::translation(-cx, -cy);
    let flip = Affine::scale(if hflip { -1.0 } else { 1.0 }, if vflip { -1.0 } else { 1.0 });

    // Transforms applied in order t1..t4 give the matrix t4·t3·t2·t1.
    let chain = Affine::shear_x(shear)
        .compose(&Affine::translation(tx, ty))
        .compose(&flip)
        .compose(&Affine::rotation(theta));
    let forward = center.compose(&chain).compose(&uncenter);

    let warped = if forward.is_identity() {
        image.clone()
    } else {
        warp_bilinear(image, &forward.invert())
    };

    let mut shifted = warped;
    if channel_shift.iter().any(|&s| s != 0.0) {
        for ((_, _, ch), v) in shifted.indexed_iter_mut() {
            *v = (*v + channel_shift[ch]).clamp(0.0, 255.0);
        }
    } else {
        shifted.mapv_inplace(|v| v.clamp(0.0, 255.0));
    }

    Ok(resize_bilinear(&shifted, spec.output_size))
}

/// Inverse-mapped warp with bilinear interpolation; coordinates are clamped
/// to the image so out-of-bounds samples take the nearest edge value.
fn warp_bilinear(image: &Array3<f64>, inverse: &Affine) -> Array3<f64> {
    let (h, w, c) = image.dim();
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inverse.apply(x as f64, y as f64);
            let px = sample_bilinear(image, sx, sy);
            for ch in 0..c {
                out[(y, x, ch)] = px[ch];
            }
        }
    }
    out
}

fn sample_bilinear(image: &Array3<f64>, x: f64, y: f64) -> [f64; 3] {
    let (h, w, _) = image.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let mut px = [0.0; 3];
    for ch in 0..3 {
        let top = image[(y0, x0, ch)] * (1.0 - fx) + image[(y0, x1, ch)] * fx;
        let bottom = image[(y1, x0, ch)] * (1.0 - fx) + image[(y1, x1, ch)] * fx;
        px[ch] = top * (1.0 - fy) + bottom * fy;
    }
    px
}

/// Align-corners bilinear resize; a same-size resize is the exact identity.
pub fn resize_bilinear(image: &Array3<f64>, output_size: (usize, usize)) -> Array3<f64> {
    let (h, w, c) = image.dim();
    let (oh, ow) = output_size;
    if (oh, ow) == (h, w) {
        return image.clone();
    }
    let sy = if oh > 1 { (h - 1) as f64 / (oh - 1) as f64 } else { 0.0 };
    let sx = if ow > 1 { (w - 1) as f64 / (ow - 1) as f64 } else { 0.0 };
    let mut out = Array3::zeros((oh, ow, c));
    for y in 0..oh {
        for x in 0..ow {
            let px = sample_bilinear(image, x as f64 * sx, y as f64 * sy);
            for ch in 0..c {
                out[(y, x, ch)] = px[ch];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_image(h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            ((y * 31 + x * 7 + c * 13) % 256) as f64
        })
    }

    #[test]
    fn identity_spec_is_exact() {
        let img = test_image(16, 16);
        let spec = AugmentationSpec::resize_only((16, 16));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment(&img, &spec, &mut rng).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn output_shape_and_range_contract() {
        let img = test_image(50, 70);
        let spec = AugmentationSpec {
            output_size: (32, 32),
            ..AugmentationSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let out = augment(&img, &spec, &mut rng).unwrap();
            assert_eq!(out.dim(), (32, 32, 3));
            assert!(out.iter().all(|&v| (0.0..=255.0).contains(&v)));
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let img = test_image(40, 40);
        let spec = AugmentationSpec {
            output_size: (24, 24),
            ..AugmentationSpec::default()
        };
        let out1 = augment(&img, &spec, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let out2 = augment(&img, &spec, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(out1, out2);
    }

    #[test]
    fn non_three_channel_input_is_rejected() {
        let img = Array3::<f64>::zeros((8, 8, 1));
        let spec = AugmentationSpec::default();
        let err = augment(&img, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("3 channels"), "{err}");
    }

    #[test]
    fn resize_identity_and_downscale() {
        let img = test_image(33, 17);
        assert_eq!(resize_bilinear(&img, (33, 17)), img);
        let small = resize_bilinear(&img, (8, 8));
        assert_eq!(small.dim(), (8, 8, 3));
        // Corners are pinned by align-corners sampling.
        assert_eq!(small[(0, 0, 0)], img[(0, 0, 0)]);
        assert_eq!(small[(7, 7, 1)], img[(32, 16, 1)]);
    }

    #[test]
    fn negative_magnitude_is_rejected() {
        let spec = AugmentationSpec {
            shear_deg: -0.1,
            ..AugmentationSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
