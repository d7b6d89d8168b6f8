//! Dermoscopy-like synthetic images: skin background, one irregular lesion
//! with a soft border, and optional hair and ruler artifacts.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::{Category, SegSample};

const HAIR_COLOR: [f64; 3] = [0.12, 0.08, 0.06];
const RULER_COLOR: [f64; 3] = [0.1, 0.1, 0.12];
const CONTROL_POINTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    /// Lesion area bounds as pixel fractions; blobs outside are redrawn.
    pub min_area: f64,
    pub max_area: f64,
    pub melanoma_prob: f64,
    pub hair_prob: f64,
    pub ruler_prob: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            min_area: 0.05,
            max_area: 0.60,
            melanoma_prob: 0.5,
            hair_prob: 0.4,
            ruler_prob: 0.25,
        }
    }
}

impl SynthParams {
    pub fn generate(&self, n: usize, size: usize, seed: u64) -> Result<Vec<SegSample>> {
        if n == 0 {
            return Err(Error::config("sample count must be at least 1"));
        }
        if size == 0 || !size.is_multiple_of(8) {
            return Err(Error::config(format!("image size {size} must be a positive multiple of 8")));
        }
        if !(0.0 < self.min_area && self.min_area < self.max_area && self.max_area < 1.0) {
            return Err(Error::config("area bounds must satisfy 0 < min < max < 1"));
        }
        (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                self.sample(&mut rng, format!("synth_{i:04}"), size)
            })
            .collect()
    }

    fn sample(&self, rng: &mut ChaCha8Rng, id: String, size: usize) -> Result<SegSample> {
        let category = if rng.random::<f64>() < self.melanoma_prob {
            Category::Melanoma
        } else {
            Category::NonMelanoma
        };
        let low_contrast = category == Category::Melanoma;

        let skin = [
            rng.random_range(0.78..0.92),
            rng.random_range(0.58..0.70),
            rng.random_range(0.48..0.60),
        ];
        let brown = [
            rng.random_range(0.30..0.45),
            rng.random_range(0.17..0.27),
            rng.random_range(0.10..0.18),
        ];
        let strength = if low_contrast {
            rng.random_range(0.35..0.5)
        } else {
            rng.random_range(0.8..0.95)
        };
        let lesion: [f64; 3] = std::array::from_fn(|c| skin[c] + (brown[c] - skin[c]) * strength);

        let mask = self.blob(rng, size);
        let sigma = rng.random_range(0.8..2.0) * size as f64 / 64.0;
        let alpha = gaussian_blur(&mask, size, sigma);
        let bg_noise = value_noise(rng, size, 8);
        let lesion_noise = value_noise(rng, size, 4);

        let mut rgb = vec![[0.0; 3]; size * size];
        for (p, px) in rgb.iter_mut().enumerate() {
            let a = alpha[p];
            let bn = 0.05 * (bg_noise[p] - 0.5);
            let ln = 0.08 * (lesion_noise[p] - 0.5);
            for c in 0..3 {
                px[c] = (skin[c] + bn) * (1.0 - a) + (lesion[c] + ln) * a;
            }
        }
        if rng.random::<f64>() < self.hair_prob {
            for _ in 0..rng.random_range(1..=3) {
                draw_hair(rng, &mut rgb, size);
            }
        }
        if rng.random::<f64>() < self.ruler_prob {
            draw_ruler(rng, &mut rgb, size);
        }

        let image = Tensor::from_fn(Shape::new(1, 3, size, size), |_, c, y, x| {
            let jitter = rng.random_range(-0.01..0.01);
            quantize(rgb[y * size + x][c] + jitter)
        });
        let mask = Tensor::from_vec(Shape::new(1, 1, size, size), mask)?;
        SegSample::new(id, image, mask, category)
    }

    /// Star-convex blob: an ellipse whose radius is modulated by a periodic
    /// Catmull-Rom spline through random control factors.
    fn blob(&self, rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
        let total = (size * size) as f64;
        loop {
            let target = rng.random_range(self.min_area + 0.03..self.max_area - 0.1).max(self.min_area);
            let aspect: f64 = rng.random_range(0.65..1.0);
            // Area of the unmodulated ellipse, pi * a * b.
            let b = (target * total / (std::f64::consts::PI * aspect)).sqrt();
            let a = b * aspect;
            let theta0 = rng.random_range(0.0..std::f64::consts::PI);
            let factors: Vec<f64> = (0..CONTROL_POINTS).map(|_| rng.random_range(0.75..1.2)).collect();
            let half = size as f64 / 2.0;
            let reach = b * 1.2;
            let slack = (half - reach).max(0.0) * 0.6;
            let cy = half + rng.random_range(-slack..=slack);
            let cx = half + rng.random_range(-slack..=slack);

            let (sin0, cos0) = theta0.sin_cos();
            let mask: Vec<f64> = (0..size * size)
                .map(|p| {
                    let dy = (p / size) as f64 + 0.5 - cy;
                    let dx = (p % size) as f64 + 0.5 - cx;
                    let u = cos0 * dx + sin0 * dy;
                    let v = -sin0 * dx + cos0 * dy;
                    let phi = v.atan2(u);
                    let ell = a * b / ((b * phi.cos()).powi(2) + (a * phi.sin()).powi(2)).sqrt();
                    let r = ell * periodic_spline(&factors, phi);
                    if u.hypot(v) <= r {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let frac = mask.iter().sum::<f64>() / total;
            if (self.min_area..=self.max_area).contains(&frac) {
                return mask;
            }
        }
    }
}

pub fn gen_synthetic(n: usize, size: usize, seed: u64) -> Result<Vec<SegSample>> {
    SynthParams::default().generate(n, size, seed)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Catmull-Rom interpolation through equally spaced values on the circle.
fn periodic_spline(values: &[f64], angle: f64) -> f64 {
    let k = values.len();
    let t = angle.rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU * k as f64;
    let i = t.floor() as usize % k;
    let s = t - t.floor();
    let p = |j: isize| values[(i as isize + j).rem_euclid(k as isize) as usize];
    let (p0, p1, p2, p3) = (p(-1), p(0), p(1), p(2));
    0.5 * (2.0 * p1
        + (-p0 + p2) * s
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * s * s
        + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * s * s * s)
}

/// Bilinearly interpolated random lattice in `[0, 1]`.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f64> {
    let g = cells + 1;
    let lattice: Vec<f64> = (0..g * g).map(|_| rng.random()).collect();
    let step = size as f64 / cells as f64;
    (0..size * size)
        .map(|p| {
            let fy = (p / size) as f64 / step;
            let fx = (p % size) as f64 / step;
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let at = |y: usize, x: usize| lattice[y.min(cells) * g + x.min(cells)];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            top * (1.0 - ty) + bot * ty
        })
        .collect()
}

/// Separable Gaussian blur with edge clamping.
fn gaussian_blur(src: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let last = size as isize - 1;
    let pass = |input: &[f64], horizontal: bool| -> Vec<f64> {
        (0..size * size)
            .map(|p| {
                let (y, x) = ((p / size) as isize, (p % size) as isize);
                kernel
                    .iter()
                    .zip(-radius..=radius)
                    .map(|(k, d)| {
                        let (yy, xx) = if horizontal {
                            (y, (x + d).clamp(0, last))
                        } else {
                            ((y + d).clamp(0, last), x)
                        };
                        k * input[(yy * size as isize + xx) as usize]
                    })
                    .sum::<f64>()
                    / norm
            })
            .collect()
    };
    pass(&pass(src, true), false)
}

fn paint(rgb: &mut [[f64; 3]], size: usize, y: f64, x: f64, radius: f64, color: [f64; 3]) {
    let lo_y = (y - radius - 1.0).floor().max(0.0) as usize;
    let hi_y = ((y + radius + 1.0).ceil() as usize).min(size - 1);
    let lo_x = (x - radius - 1.0).floor().max(0.0) as usize;
    let hi_x = ((x + radius + 1.0).ceil() as usize).min(size - 1);
    if y + radius + 1.0 < 0.0 || x + radius + 1.0 < 0.0 {
        return;
    }
    for py in lo_y..=hi_y {
        for px in lo_x..=hi_x {
            let d = ((py as f64 + 0.5 - y).powi(2) + (px as f64 + 0.5 - x).powi(2)).sqrt();
            let a = (radius + 0.5 - d).clamp(0.0, 1.0) * 0.85;
            if a > 0.0 {
                let cell = &mut rgb[py * size + px];
                for c in 0..3 {
                    cell[c] = cell[c] * (1.0 - a) + color[c] * a;
                }
            }
        }
    }
}

/// Thin dark quadratic Bezier arc crossing the image.
fn draw_hair(rng: &mut ChaCha8Rng, rgb: &mut [[f64; 3]], size: usize) {
    let s = size as f64;
    let mut pt = || (rng.random_range(-0.1 * s..1.1 * s), rng.random_range(-0.1 * s..1.1 * s));
    let (p0, p1, p2) = (pt(), pt(), pt());
    let width = rng.random_range(0.3..0.8) * s / 64.0;
    let steps = 4 * size;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let u = 1.0 - t;
        let y = u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0;
        let x = u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1;
        paint(rgb, size, y, x, width, HAIR_COLOR);
    }
}

/// Row of evenly spaced ticks along one border.
fn draw_ruler(rng: &mut ChaCha8Rng, rgb: &mut [[f64; 3]], size: usize) {
    let s = size as f64;
    let spacing = rng.random_range(0.05..0.09) * s;
    let offset = rng.random_range(0.02..0.06) * s;
    let bottom = rng.random::<bool>();
    let mut x = rng.random_range(0.0..spacing);
    let mut k = 0;
    while x < s {
        let len = if k % 5 == 0 { 0.09 * s } else { 0.05 * s };
        let steps = (len * 2.0).ceil() as usize;
        for j in 0..=steps {
            let d = offset + len * j as f64 / steps as f64;
            let y = if bottom { s - d } else { d };
            paint(rgb, size, y, x, 0.4, RULER_COLOR);
        }
        x += spacing;
        k += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn areas_stay_in_bounds() {
        let samples = gen_synthetic(40, 64, 5).unwrap();
        for s in &samples {
            let f = s.lesion_fraction();
            assert!((0.05..=0.60).contains(&f), "{} has area {f}", s.id);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(gen_synthetic(4, 32, 9).unwrap(), gen_synthetic(4, 32, 9).unwrap());
        assert_ne!(gen_synthetic(4, 32, 9).unwrap(), gen_synthetic(4, 32, 10).unwrap());
    }

    #[test]
    fn prefix_is_stable_in_n() {
        let a = gen_synthetic(3, 32, 1).unwrap();
        let b = gen_synthetic(6, 32, 1).unwrap();
        assert_eq!(a[..], b[..3]);
    }

    #[test]
    fn both_categories_appear() {
        let samples = gen_synthetic(16, 32, 2).unwrap();
        for cat in Category::ALL {
            assert!(samples.iter().any(|s| s.category == cat));
        }
    }

    #[test]
    fn low_contrast_exactly_for_melanoma_like() {
        // Contrast between the mean lesion and mean background intensity.
        let samples = gen_synthetic(24, 64, 4).unwrap();
        for s in samples {
            let (mut fg, mut bg, mut nf) = (0.0, 0.0, 0.0);
            for y in 0..64 {
                for x in 0..64 {
                    let v: f64 = (0..3).map(|c| s.image.at(0, c, y, x)).sum::<f64>() / 3.0;
                    if s.mask.at(0, 0, y, x) == 1.0 {
                        fg += v;
                        nf += 1.0;
                    } else {
                        bg += v;
                    }
                }
            }
            let contrast = bg / (4096.0 - nf) - fg / nf;
            match s.category {
                Category::Melanoma => assert!(contrast < 0.25, "{}: {contrast}", s.id),
                Category::NonMelanoma => assert!(contrast > 0.25, "{}: {contrast}", s.id),
            }
        }
    }

    #[test]
    fn bad_sizes_are_config_errors() {
        assert!(gen_synthetic(1, 60, 0).unwrap_err().is_config());
        assert!(gen_synthetic(0, 64, 0).unwrap_err().is_config());
    }

    #[test]
    fn images_are_8bit_exact() {
        let s = &gen_synthetic(1, 32, 0).unwrap()[0];
        for &v in s.image.data() {
            assert_eq!((v * 255.0).round() / 255.0, v);
        }
    }

    #[test]
    fn spline_interpolates_control_points() {
        let vals = [1.0, 2.0, 0.5, 1.5];
        for (i, &v) in vals.iter().enumerate() {
            let angle = i as f64 / 4.0 * std::f64::consts::TAU;
            assert!((periodic_spline(&vals, angle) - v).abs() < 1e-12);
        }
    }
}
