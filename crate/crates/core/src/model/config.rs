use serde::{Deserialize, Serialize};

use crate::data::AugmentSpec;
use crate::error::{Error, Result};

/// Architecture and training hyperparameters. Flat so it round-trips through
/// the `key = value` format (see [`crate::kv`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Side length of the square training/inference resolution.
    pub input_size: usize,
    pub encoder_channels: [usize; 4],
    /// Width of the context features (ASPP output, CCA/CGL maps).
    pub ctx_channels: usize,
    pub aspp_rate_divisor: usize,
    pub aspp_branch_norm: bool,
    pub norm: bool,
    pub use_cca: bool,
    pub use_cgl: bool,
    pub use_aux: bool,
    pub gate_bias: bool,
    pub cgl_qk_proj: bool,
    /// Dice weight.
    pub lambda: f64,
    /// Dice smoothing constant.
    pub epsilon: f64,
    /// Initial step size. A pretrained backbone tolerates 1e-4; training
    /// from scratch at desk scale needs a larger step to converge in a few
    /// hundred iterations.
    pub lr0: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub total_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment_flip: bool,
    pub augment_crop: bool,
    pub augment_rotate: bool,
    /// Write an intermediate checkpoint every this many iterations (0 = never).
    pub ckpt_every: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            encoder_channels: [16, 32, 32, 32],
            ctx_channels: 32,
            aspp_rate_divisor: 3,
            aspp_branch_norm: true,
            norm: true,
            use_cca: true,
            use_cgl: true,
            use_aux: true,
            gate_bias: true,
            cgl_qk_proj: false,
            lambda: 1.0,
            epsilon: 1.0,
            lr0: 3e-2,
            momentum: 0.9,
            poly_power: 0.9,
            total_iters: 500,
            batch_size: 4,
            seed: 0,
            augment_flip: true,
            augment_crop: true,
            augment_rotate: true,
            ckpt_every: 0,
        }
    }
}

/// The five module configurations of the ablation study, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Baseline,
    BaselineL,
    BaselineCca,
    BaselineCcaCgl,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Baseline,
        Ablation::BaselineL,
        Ablation::BaselineCca,
        Ablation::BaselineCcaCgl,
        Ablation::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::BaselineL => "baseline+L",
            Ablation::BaselineCca => "baseline+CCA",
            Ablation::BaselineCcaCgl => "baseline+CCA+CGL",
            Ablation::Full => "baseline+CCA+CGL+AL",
        }
    }

    /// `(use_cca, use_cgl, use_aux)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Ablation::Baseline => (false, false, false),
            Ablation::BaselineL => (false, true, false),
            Ablation::BaselineCca => (true, false, false),
            Ablation::BaselineCcaCgl => (true, true, false),
            Ablation::Full => (true, true, true),
        }
    }

    pub fn apply(self, config: &ModelConfig) -> ModelConfig {
        let (use_cca, use_cgl, use_aux) = self.flags();
        ModelConfig {
            use_cca,
            use_cgl,
            use_aux,
            ..config.clone()
        }
    }
}

impl ModelConfig {
    /// The auxiliary head hangs off the CCA context and only exists with it.
    pub fn aux_active(&self) -> bool {
        self.use_cca && self.use_aux
    }

    /// Number of feature maps concatenated ahead of the decoder.
    pub fn decoder_inputs(&self) -> usize {
        1 + self.use_cca as usize + self.use_cgl as usize
    }

    pub fn augment_spec(&self) -> AugmentSpec {
        AugmentSpec {
            hflip_prob: if self.augment_flip { 0.5 } else { 0.0 },
            vflip_prob: if self.augment_flip { 0.5 } else { 0.0 },
            crop_scale: if self.augment_crop { (0.5, 1.0) } else { (1.0, 1.0) },
            max_rotation_deg: if self.augment_rotate { 20.0 } else { 0.0 },
            output_size: self.input_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_size == 0 || !self.input_size.is_multiple_of(8) {
            return fail(format!("input_size {} must be a positive multiple of 8", self.input_size));
        }
        if self.encoder_channels.contains(&0) || self.ctx_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.aspp_rate_divisor == 0 {
            return fail("aspp_rate_divisor must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda {} must be >= 0", self.lambda));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return fail(format!("epsilon {} must lie in (0, 1]", self.epsilon));
        }
        if !(self.poly_power > 0.0 && self.poly_power.is_finite()) {
            return fail(format!("poly_power {} must be > 0", self.poly_power));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 {} must be >= 0", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if self.total_iters == 0 {
            return fail("total_iters must be at least 1".into());
        }
        if self.batch_size == 0 || (self.norm && self.batch_size < 2) {
            return fail(format!(
                "batch_size {} invalid: at least 2 is required when normalization is on",
                self.batch_size
            ));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        crate::kv::to_text(self)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        crate::kv::from_text(&ModelConfig::default(), text, std::path::Path::new("<config>"))
    }
}
