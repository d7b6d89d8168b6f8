use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Var};

use super::params::{Forward, Mode, ParamId, ParamStore, StatUpdate};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.channel_vector(&format!("{name}.gamma"), c, 1.0, true)?,
            beta: store.channel_vector(&format!("{name}.beta"), c, 0.0, true)?,
            running_mean: store.channel_vector(&format!("{name}.running_mean"), c, 0.0, false)?,
            running_var: store.channel_vector(&format!("{name}.running_var"), c, 1.0, false)?,
        })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        match f.mode() {
            Mode::Train => {
                let (y, stats) = f.tape.batch_norm(x, gamma, beta, BN_EPS)?;
                f.record_stats(StatUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    momentum: BN_MOMENTUM,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let params = f.params();
                let mean = params.get(self.running_mean).data();
                let var = params.get(self.running_var).data();
                f.tape.channel_affine(x, gamma, beta, mean, var, BN_EPS)
            }
        }
    }
}

/// Convolution, optionally followed by batch normalization, then an activation.
/// Normalized layers carry no conv bias (the shift is absorbed by `beta`).
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub norm: Option<BatchNorm>,
    pub act: Activation,
    pub c_in: usize,
    pub c_out: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvOpts {
    pub kernel: usize,
    pub spec: ConvSpec,
    pub norm: bool,
    pub act: Activation,
    /// Add a bias when not normalized.
    pub bias: bool,
}

impl ConvOpts {
    pub fn pointwise(norm: bool, act: Activation) -> Self {
        ConvOpts {
            kernel: 1,
            spec: ConvSpec::new(1, 1, 0),
            norm,
            act,
            bias: true,
        }
    }

    pub fn without_bias(self) -> Self {
        ConvOpts { bias: false, ..self }
    }

    pub fn k3(spec: ConvSpec, norm: bool, act: Activation) -> Self {
        ConvOpts {
            kernel: 3,
            spec,
            norm,
            act,
            bias: true,
        }
    }
}

impl ConvLayer {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, opts: ConvOpts) -> Result<Self> {
        let weight = store.conv_weight(&format!("{name}.weight"), c_out, c_in, opts.kernel)?;
        let (bias, norm) = if opts.norm {
            (None, Some(BatchNorm::new(store, &format!("{name}.bn"), c_out)?))
        } else if opts.bias {
            (Some(store.channel_vector(&format!("{name}.bias"), c_out, 0.0, true)?), None)
        } else {
            (None, None)
        };
        Ok(ConvLayer {
            weight,
            bias,
            spec: opts.spec,
            norm,
            act: opts.act,
            c_in,
            c_out,
        })
    }

    /// Convolution and normalization without the activation.
    pub fn forward_linear(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = self.bias.map(|b| f.param(b));
        let y = f.tape.conv2d(x, w, b, self.spec)?;
        match &self.norm {
            Some(bn) => bn.forward(f, y),
            None => Ok(y),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let y = self.forward_linear(f, x)?;
        Ok(match self.act {
            Activation::None => y,
            Activation::Relu => f.tape.relu(y),
        })
    }
}

/// Two 3x3 convs with an additive skip; the skip gets a 1x1 projection when
/// the channel count or stride changes.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: ConvLayer,
    conv2: ConvLayer,
    proj: Option<ConvLayer>,
}

impl ResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        dilation: usize,
        norm: bool,
    ) -> Result<Self> {
        let conv1 = ConvLayer::new(
            store,
            &format!("{name}.conv1"),
            c_in,
            c_out,
            ConvOpts::k3(ConvSpec::new(stride, dilation, dilation), norm, Activation::Relu),
        )?;
        let conv2 = ConvLayer::new(
            store,
            &format!("{name}.conv2"),
            c_out,
            c_out,
            ConvOpts::k3(ConvSpec::same(3, dilation), norm, Activation::None),
        )?;
        let proj = if c_in != c_out || stride != 1 {
            let opts = ConvOpts {
                kernel: 1,
                spec: ConvSpec::new(stride, 1, 0),
                norm,
                act: Activation::None,
                bias: true,
            };
            Some(ConvLayer::new(store, &format!("{name}.proj"), c_in, c_out, opts)?)
        } else {
            None
        };
        Ok(ResidualBlock { conv1, conv2, proj })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let h = self.conv1.forward(f, x)?;
        let h = self.conv2.forward(f, h)?;
        let skip = match &self.proj {
            Some(p) => p.forward(f, x)?,
            None => x,
        };
        let sum = f.tape.add(h, skip)?;
        Ok(f.tape.relu(sum))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub index: usize,
    pub stride: usize,
    pub dilation: usize,
    pub channels: usize,
    blocks: [ResidualBlock; 2],
}

impl EncoderStage {
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let h = self.blocks[0].forward(f, x)?;
        self.blocks[1].forward(f, h)
    }
}

/// Output strides of the four stages relative to the input image.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 8, 8];
const STAGE_STEP: [usize; 4] = [2, 2, 1, 1];
const STAGE_DILATION: [usize; 4] = [1, 1, 2, 2];

/// Stride-2 stem followed by four residual stages at strides 4, 8, 8, 8; the
/// last two stages replace downsampling by dilation 2.
#[derive(Clone, Debug)]
pub struct Encoder {
    stem: ConvLayer,
    stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, channels: [usize; 4], norm: bool) -> Result<Self> {
        let stem = ConvLayer::new(
            store,
            "encoder.stem",
            3,
            channels[0],
            ConvOpts::k3(ConvSpec::strided(3, 2), norm, Activation::Relu),
        )?;
        let mut stages = Vec::with_capacity(4);
        let mut c_in = channels[0];
        for (i, &c_out) in channels.iter().enumerate() {
            let name = format!("encoder.stage{}", i + 1);
            let (stride, dilation) = (STAGE_STEP[i], STAGE_DILATION[i]);
            let b0 = ResidualBlock::new(store, &format!("{name}.block0"), c_in, c_out, stride, dilation, norm)?;
            let b1 = ResidualBlock::new(store, &format!("{name}.block1"), c_out, c_out, 1, dilation, norm)?;
            stages.push(EncoderStage {
                index: i + 1,
                stride: STAGE_STRIDES[i],
                dilation,
                channels: c_out,
                blocks: [b0, b1],
            });
            c_in = c_out;
        }
        Ok(Encoder { stem, stages })
    }

    pub fn stages(&self) -> &[EncoderStage] {
        &self.stages
    }

    /// Returns the four stage outputs `f_1..f_4`.
    pub fn forward(&self, f: &mut Forward, image: Var) -> Result<[Var; 4]> {
        let s = f.tape.shape(image);
        if !s.h.is_multiple_of(8) || !s.w.is_multiple_of(8) || s.h == 0 || s.w == 0 {
            return Err(Error::config(format!(
                "encoder input {}x{} must have height and width divisible by 8",
                s.h, s.w
            )));
        }
        let mut x = self.stem.forward(f, image)?;
        let mut out = [x; 4];
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(f, x)?;
            out[i] = x;
        }
        Ok(out)
    }
}

/// Canonical atrous rates of the three dilated pyramid branches.
pub const ASPP_BASE_RATES: [usize; 3] = [6, 12, 18];

pub fn scaled_aspp_rates(divisor: usize) -> [usize; 3] {
    ASPP_BASE_RATES.map(|r| (r / divisor.max(1)).max(1))
}

/// Atrous spatial pyramid pooling: a 1x1 branch, three dilated 3x3 branches,
/// an image-level pooling branch, then a 1x1 projection.
#[derive(Clone, Debug)]
pub struct Aspp {
    branches: Vec<ConvLayer>,
    pool: ConvLayer,
    project: ConvLayer,
    rates: [usize; 3],
}

impl Aspp {
    pub fn new(
        store: &mut ParamStore,
        c_in: usize,
        c_out: usize,
        rate_divisor: usize,
        branch_norm: bool,
        norm: bool,
    ) -> Result<Self> {
        let rates = scaled_aspp_rates(rate_divisor);
        let bn = branch_norm && norm;
        let mut branches = vec![ConvLayer::new(
            store,
            "aspp.branch0",
            c_in,
            c_out,
            ConvOpts::pointwise(bn, Activation::Relu),
        )?];
        for (i, &r) in rates.iter().enumerate() {
            branches.push(ConvLayer::new(
                store,
                &format!("aspp.branch{}", i + 1),
                c_in,
                c_out,
                ConvOpts::k3(ConvSpec::same(3, r), bn, Activation::Relu),
            )?);
        }
        // The pooled branch sees one value per channel and image, so it is never
        // batch-normalized.
        let pool = ConvLayer::new(store, "aspp.pool", c_in, c_out, ConvOpts::pointwise(false, Activation::Relu))?;
        let project = ConvLayer::new(
            store,
            "aspp.project",
            5 * c_out,
            c_out,
            ConvOpts::pointwise(norm, Activation::Relu),
        )?;
        Ok(Aspp {
            branches,
            pool,
            project,
            rates,
        })
    }

    pub fn rates(&self) -> [usize; 3] {
        self.rates
    }

    /// Output of branch `i` (0 = 1x1, 1..=3 dilated).
    pub fn branch_forward(&self, f: &mut Forward, i: usize, x: Var) -> Result<Var> {
        self.branches[i].forward(f, x)
    }

    /// Pooling branch, broadcast back to the spatial size of `x`.
    pub fn pool_forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let s = f.tape.shape(x);
        let pooled = f.tape.global_avg_pool(x);
        let p = self.pool.forward(f, pooled)?;
        f.tape.resize(p, s.h, s.w)
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let mut parts = Vec::with_capacity(5);
        for i in 0..self.branches.len() {
            parts.push(self.branch_forward(f, i, x)?);
        }
        parts.push(self.pool_forward(f, x)?);
        let cat = f.tape.concat_channels(&parts)?;
        self.project.forward(f, cat)
    }
}
