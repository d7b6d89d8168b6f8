//! Samples, on-disk datasets, synthetic generation and augmentation.

mod augment;
pub mod codec;
mod manifest;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub use augment::{augment, flip_horizontal, flip_vertical, resize_sample, rotate, AugmentSpec, Transform};
pub use manifest::{load_manifest, write_dataset, MANIFEST};
pub use synth::{gen_synthetic, SynthParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "melanoma-like")]
    Melanoma,
    #[serde(rename = "non-melanoma-like")]
    NonMelanoma,
}

impl Category {
    pub const ALL: [Category; 2] = [Category::Melanoma, Category::NonMelanoma];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Melanoma => "melanoma-like",
            Category::NonMelanoma => "non-melanoma-like",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "melanoma-like" | "melanoma" | "1" => Ok(Category::Melanoma),
            "non-melanoma-like" | "non-melanoma" | "nonmelanoma" | "0" => Ok(Category::NonMelanoma),
            other => Err(Error::config(format!("unknown category `{other}`"))),
        }
    }
}

/// One image with its binary lesion mask. `image` is `(1, 3, h, w)` in
/// `[0, 1]`, `mask` is `(1, 1, h, w)` with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
    pub category: Category,
}

impl SegSample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: Tensor, category: Category) -> Result<Self> {
        let (si, sm) = (image.shape(), mask.shape());
        if si.n != 1 || si.c != 3 || sm != Shape::new(1, 1, si.h, si.w) {
            return Err(Error::shape("sample", si, sm));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::config("mask must be binary"));
        }
        Ok(SegSample {
            id: id.into(),
            image,
            mask,
            category,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape().h
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }

    /// Fraction of lesion pixels.
    pub fn lesion_fraction(&self) -> f64 {
        self.mask.sum() / self.mask.shape().numel() as f64
    }
}

/// Stack images and masks of equally sized samples into batch tensors.
pub fn collate(samples: &[&SegSample]) -> Result<(Tensor, Tensor)> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<Tensor> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}
