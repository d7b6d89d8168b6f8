use rand::Rng;

use crate::tensor::{Shape, Tensor};

use super::SegSample;

/// Geometric augmentation draw ranges. Flips happen with the given
/// probabilities, the center crop keeps a side fraction drawn from
/// `crop_scale`, the rotation angle is drawn from `[0, max_rotation_deg]`,
/// and the result is resized to `output_size` squared.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub crop_scale: (f64, f64),
    pub max_rotation_deg: f64,
    pub output_size: usize,
}

impl AugmentSpec {
    /// Resize only.
    pub fn identity(output_size: usize) -> Self {
        AugmentSpec {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            crop_scale: (1.0, 1.0),
            max_rotation_deg: 0.0,
            output_size,
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Transform {
        let hflip = rng.random::<f64>() < self.hflip_prob;
        let vflip = rng.random::<f64>() < self.vflip_prob;
        let (lo, hi) = self.crop_scale;
        let crop = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let rotation_deg = if self.max_rotation_deg > 0.0 {
            rng.random_range(0.0..=self.max_rotation_deg)
        } else {
            0.0
        };
        Transform {
            hflip,
            vflip,
            crop,
            rotation_deg,
            output_size: self.output_size,
        }
    }
}

/// One concrete draw, applicable to any planar image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub hflip: bool,
    pub vflip: bool,
    pub crop: f64,
    pub rotation_deg: f64,
    pub output_size: usize,
}

impl Transform {
    /// Flip, center-crop, rotate (bilinear, zero outside), resize.
    pub fn apply(&self, img: &Tensor) -> Tensor {
        let mut t = img.clone();
        if self.hflip {
            t = flip_horizontal(&t);
        }
        if self.vflip {
            t = flip_vertical(&t);
        }
        if self.crop < 1.0 {
            t = center_crop(&t, self.crop);
        }
        if self.rotation_deg != 0.0 {
            t = rotate(&t, self.rotation_deg);
        }
        t.resized(self.output_size, self.output_size)
    }

    /// Same geometry as [`Self::apply`] followed by re-binarization at 0.5.
    pub fn apply_mask(&self, mask: &Tensor) -> Tensor {
        self.apply(mask).map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
    }
}

pub fn augment<R: Rng + ?Sized>(sample: &SegSample, spec: &AugmentSpec, rng: &mut R) -> SegSample {
    let t = spec.draw(rng);
    SegSample {
        id: sample.id.clone(),
        image: t.apply(&sample.image),
        mask: t.apply_mask(&sample.mask),
        category: sample.category,
    }
}

/// Resize a sample to `size` squared with no other change.
pub fn resize_sample(sample: &SegSample, size: usize) -> SegSample {
    let t = AugmentSpec::identity(size).draw(&mut NoRng);
    SegSample {
        id: sample.id.clone(),
        image: t.apply(&sample.image),
        mask: t.apply_mask(&sample.mask),
        category: sample.category,
    }
}

/// The identity spec never consults its generator.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        0
    }

    fn next_u64(&mut self) -> u64 {
        0
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        dst.fill(0);
    }
}

pub fn flip_horizontal(t: &Tensor) -> Tensor {
    let s = t.shape();
    Tensor::from_fn(s, |n, c, y, x| t.at(n, c, y, s.w - 1 - x))
}

pub fn flip_vertical(t: &Tensor) -> Tensor {
    let s = t.shape();
    Tensor::from_fn(s, |n, c, y, x| t.at(n, c, s.h - 1 - y, x))
}

fn center_crop(t: &Tensor, scale: f64) -> Tensor {
    let s = t.shape();
    let ch = ((s.h as f64 * scale).round() as usize).clamp(1, s.h);
    let cw = ((s.w as f64 * scale).round() as usize).clamp(1, s.w);
    let (oy, ox) = ((s.h - ch) / 2, (s.w - cw) / 2);
    Tensor::from_fn(Shape::new(s.n, s.c, ch, cw), |n, c, y, x| t.at(n, c, y + oy, x + ox))
}

/// Rotate about the image center by `deg` degrees (counter-clockwise in
/// image coordinates). Pixels mapped from outside the source are zero.
pub fn rotate(t: &Tensor, deg: f64) -> Tensor {
    let s = t.shape();
    let (sin, cos) = deg.to_radians().sin_cos();
    let cy = (s.h as f64 - 1.0) / 2.0;
    let cx = (s.w as f64 - 1.0) / 2.0;
    let sample = |n: usize, c: usize, y: f64, x: f64| -> f64 {
        if y < 0.0 || x < 0.0 || y > (s.h - 1) as f64 || x > (s.w - 1) as f64 {
            return 0.0;
        }
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(s.h - 1), (x0 + 1).min(s.w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = t.at(n, c, y0, x0) * (1.0 - fx) + t.at(n, c, y0, x1) * fx;
        let bot = t.at(n, c, y1, x0) * (1.0 - fx) + t.at(n, c, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    };
    Tensor::from_fn(s, |n, c, y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        // Inverse map: rotate the destination coordinate by -deg.
        let sy = cos * dy - sin * dx + cy;
        let sx = sin * dy + cos * dx + cx;
        sample(n, c, sy, sx)
    })
}
