use crate::cca::{Cca, CcaTrace};
use crate::cgl::{Cgl, CglTrace};
use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{Activation, Aspp, ConvLayer, ConvOpts, Encoder, Forward, Mode, ParamStore};
use crate::tensor::{Tensor, Var};

use super::ModelConfig;

/// Probabilities below this are background in the binary mask.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Handles to every intermediate map of one forward pass.
#[derive(Clone, Debug)]
pub struct NetTrace {
    pub stages: [Var; 4],
    pub pyramid: Var,
    pub cca: Option<CcaTrace>,
    pub cgl: Option<CglTrace>,
    pub decoder_in: Var,
    pub decoded: Var,
    pub main_prob: Var,
    pub aux_prob: Option<Var>,
}

impl NetTrace {
    pub fn context(&self) -> Option<Var> {
        self.cca.as_ref().map(CcaTrace::context)
    }
}

/// Inference output at input resolution.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub prob: Tensor,
    pub aux_prob: Option<Tensor>,
    pub mask: Tensor,
}

impl Prediction {
    pub fn from_probs(prob: Tensor, aux_prob: Option<Tensor>) -> Self {
        let mask = binarize(&prob);
        Prediction { prob, aux_prob, mask }
    }
}

pub fn binarize(prob: &Tensor) -> Tensor {
    prob.map(|p| if p >= MASK_THRESHOLD { 1.0 } else { 0.0 })
}

/// Encoder, pyramid pooling, optional CCA/CGL, and the two-conv decoder.
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    pub params: ParamStore,
    encoder: Encoder,
    aspp: Aspp,
    cca: Option<Cca>,
    cgl: Option<Cgl>,
    fuse: ConvLayer,
    head: ConvLayer,
    aux_head: Option<ConvLayer>,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(config.seed);
        let store = &mut params;
        let ctx = config.ctx_channels;
        let norm = config.norm;
        let encoder = Encoder::new(store, config.encoder_channels, norm)?;
        let aspp = Aspp::new(
            store,
            config.encoder_channels[3],
            ctx,
            config.aspp_rate_divisor,
            config.aspp_branch_norm,
            norm,
        )?;
        let cca = config
            .use_cca
            .then(|| Cca::new(store, config.encoder_channels, ctx, norm, config.gate_bias))
            .transpose()?;
        let cgl = config
            .use_cgl
            .then(|| Cgl::new(store, ctx, config.use_cca, config.cgl_qk_proj))
            .transpose()?;
        let fuse = ConvLayer::new(
            store,
            "decoder.fuse",
            config.decoder_inputs() * ctx,
            ctx,
            ConvOpts::pointwise(norm, Activation::Relu),
        )?;
        let head = ConvLayer::new(store, "decoder.head", ctx, 1, ConvOpts::pointwise(false, Activation::None))?;
        let aux_head = config
            .aux_active()
            .then(|| ConvLayer::new(store, "aux.head", ctx, 1, ConvOpts::pointwise(false, Activation::None)))
            .transpose()?;
        Ok(Network {
            config,
            params,
            encoder,
            aspp,
            cca,
            cgl,
            fuse,
            head,
            aux_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn aspp(&self) -> &Aspp {
        &self.aspp
    }

    pub fn cca(&self) -> Option<&Cca> {
        self.cca.as_ref()
    }

    pub fn cgl(&self) -> Option<&Cgl> {
        self.cgl.as_ref()
    }

    pub fn forward(&self, f: &mut Forward, image: Var) -> Result<NetTrace> {
        let s = f.tape.shape(image);
        if s.c != 3 {
            return Err(Error::config(format!("expected a 3-channel image, got {s}")));
        }
        let stages = self.encoder.forward(f, image)?;
        let pyramid = self.aspp.forward(f, stages[3])?;
        let cca = match &self.cca {
            Some(m) => Some(m.forward(f, image, stages)?),
            None => None,
        };
        let context = cca.as_ref().map(CcaTrace::context);
        let cgl = match &self.cgl {
            Some(m) => Some(m.forward(f, pyramid, context)?),
            None => None,
        };
        let mut parts = Vec::with_capacity(3);
        parts.extend(context);
        parts.push(pyramid);
        parts.extend(cgl.map(|t| t.out));
        let decoder_in = f.tape.concat_channels(&parts)?;
        let decoded = self.fuse.forward(f, decoder_in)?;
        let main_prob = self.head_prob(f, &self.head, decoded, s.h, s.w)?;
        let aux_prob = match (&self.aux_head, context) {
            (Some(_), Some(c)) => Some(self.aux_forward(f, c, s.h, s.w)?),
            _ => None,
        };
        Ok(NetTrace {
            stages,
            pyramid,
            cca,
            cgl,
            decoder_in,
            decoded,
            main_prob,
            aux_prob,
        })
    }

    fn head_prob(&self, f: &mut Forward, head: &ConvLayer, x: Var, h: usize, w: usize) -> Result<Var> {
        let logits = head.forward(f, x)?;
        let up = f.tape.resize(logits, h, w)?;
        Ok(f.tape.sigmoid(up))
    }

    /// Auxiliary probability map from the context features.
    pub fn aux_forward(&self, f: &mut Forward, context: Var, h: usize, w: usize) -> Result<Var> {
        let head = self
            .aux_head
            .as_ref()
            .ok_or_else(|| Error::config("auxiliary head requires use_cca and use_aux"))?;
        self.head_prob(f, head, context, h, w)
    }

    /// Evaluation-mode inference on a `(n, 3, h, w)` batch.
    pub fn predict(&self, images: &Tensor) -> Result<Prediction> {
        let mut f = Forward::new(&self.params, Mode::Eval);
        let x = f.tape.constant(images.clone());
        let trace = self.forward(&mut f, x)?;
        let prob = f.tape.value(trace.main_prob).clone();
        let aux = trace.aux_prob.map(|v| f.tape.value(v).clone());
        Ok(Prediction::from_probs(prob, aux))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(self.config.to_text(), &self.params)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_text(&ckpt.config)?;
        let mut net = Network::new(config)?;
        ckpt.load_into(&mut net.params)?;
        Ok(net)
    }
}
