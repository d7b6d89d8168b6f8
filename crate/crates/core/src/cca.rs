//! Cascaded context aggregation.
//!
//! Stage features are reduced to a common width and fused one stage at a
//! time. Stage 1 passes through unchanged; every later stage adds the raw
//! image (resized to its resolution and lifted by a 3x3 conv) and the previous
//! cascade output, each scaled by a sigmoid gate computed from the stage
//! features and the previous output:
//!
//! ```text
//! out_1 = r_1
//! out_i = r_i + g_img * img_i + g_ctx * out_{i-1}
//! g_*   = sigmoid(W_* [r_i, out_{i-1}])
//! ```

use crate::error::{Error, Result};
use crate::nn::{Activation, ConvLayer, ConvOpts, Forward, ParamStore};
use crate::tensor::{ConvSpec, Var};

/// One gate-based integration unit.
#[derive(Clone, Debug)]
pub struct GateUnit {
    pub stage: usize,
    reduce: ConvLayer,
    fusion: Option<Fusion>,
}

#[derive(Clone, Debug)]
struct Fusion {
    image: ConvLayer,
    gate_img: ConvLayer,
    gate_ctx: ConvLayer,
}

/// Intermediate maps of one unit (stage >= 2).
#[derive(Clone, Copy, Debug)]
pub struct GateTrace {
    pub reduced: Var,
    pub image_feat: Var,
    /// Previous cascade output after resizing to this stage.
    pub prev: Var,
    pub gate_img: Var,
    pub gate_ctx: Var,
    pub out: Var,
}

#[derive(Clone, Debug)]
pub struct CcaTrace {
    /// `out_1..out_4`; the last entry is the context map.
    pub cascade: [Var; 4],
    pub reduced: [Var; 4],
    /// Units for stages 2, 3, 4.
    pub units: Vec<GateTrace>,
}

impl CcaTrace {
    pub fn context(&self) -> Var {
        self.cascade[3]
    }
}

impl GateUnit {
    pub fn new(
        store: &mut ParamStore,
        stage: usize,
        c_stage: usize,
        ctx: usize,
        norm: bool,
        gate_bias: bool,
    ) -> Result<Self> {
        let name = format!("cca.unit{stage}");
        let reduce = ConvLayer::new(
            store,
            &format!("{name}.reduce"),
            c_stage,
            ctx,
            ConvOpts::pointwise(norm, Activation::Relu),
        )?;
        let fusion = if stage > 1 {
            let image = ConvLayer::new(
                store,
                &format!("{name}.image"),
                3,
                ctx,
                ConvOpts::k3(ConvSpec::same(3, 1), norm, Activation::Relu),
            )?;
            let mut opts = ConvOpts::pointwise(false, Activation::None);
            if !gate_bias {
                opts = opts.without_bias();
            }
            let gate = |store: &mut ParamStore, which: &str| {
                ConvLayer::new(store, &format!("{name}.{which}"), 2 * ctx, ctx, opts)
            };
            Some(Fusion {
                image,
                gate_img: gate(store, "gate_img")?,
                gate_ctx: gate(store, "gate_ctx")?,
            })
        } else {
            None
        };
        Ok(GateUnit { stage, reduce, fusion })
    }

    pub fn reduce(&self, f: &mut Forward, stage_feat: Var) -> Result<Var> {
        self.reduce.forward(f, stage_feat)
    }

    /// Gated addition of image features and previous context onto the
    /// reduced stage features. All three inputs must share one shape.
    pub fn fuse(&self, f: &mut Forward, reduced: Var, image_feat: Var, prev: Var) -> Result<(Var, Var, Var)> {
        let fusion = self
            .fusion
            .as_ref()
            .ok_or_else(|| Error::config("stage 1 has no gated fusion"))?;
        let (sr, sp) = (f.tape.shape(reduced), f.tape.shape(prev));
        if sr != sp {
            return Err(Error::shape("gate unit", sr, sp));
        }
        let cat = f.tape.concat_channels(&[reduced, prev])?;
        let logits_img = fusion.gate_img.forward(f, cat)?;
        let logits_ctx = fusion.gate_ctx.forward(f, cat)?;
        let g_img = f.tape.sigmoid(logits_img);
        let g_ctx = f.tape.sigmoid(logits_ctx);
        let a = f.tape.mul(g_img, image_feat)?;
        let b = f.tape.mul(g_ctx, prev)?;
        let out = f.tape.add(reduced, a)?;
        let out = f.tape.add(out, b)?;
        Ok((out, g_img, g_ctx))
    }

    /// Full unit for stage >= 2: reduce, resize image and previous context to
    /// the stage resolution, then fuse.
    pub fn forward(&self, f: &mut Forward, stage_feat: Var, prev: Var, image: Var) -> Result<GateTrace> {
        let fusion = self
            .fusion
            .as_ref()
            .ok_or_else(|| Error::config("stage 1 has no gated fusion"))?;
        let reduced = self.reduce(f, stage_feat)?;
        let s = f.tape.shape(reduced);
        let small = f.tape.resize(image, s.h, s.w)?;
        let image_feat = fusion.image.forward(f, small)?;
        let ps = f.tape.shape(prev);
        if ps.c != s.c {
            return Err(Error::config(format!(
                "stage {} context has {} channels, previous output has {}",
                self.stage, s.c, ps.c
            )));
        }
        let prev = f.tape.resize(prev, s.h, s.w)?;
        let (out, gate_img, gate_ctx) = self.fuse(f, reduced, image_feat, prev)?;
        Ok(GateTrace {
            reduced,
            image_feat,
            prev,
            gate_img,
            gate_ctx,
            out,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Cca {
    units: Vec<GateUnit>,
}

impl Cca {
    pub fn new(
        store: &mut ParamStore,
        stage_channels: [usize; 4],
        ctx: usize,
        norm: bool,
        gate_bias: bool,
    ) -> Result<Self> {
        let units = stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| GateUnit::new(store, i + 1, c, ctx, norm, gate_bias))
            .collect::<Result<_>>()?;
        Ok(Cca { units })
    }

    pub fn units(&self) -> &[GateUnit] {
        &self.units
    }

    pub fn forward(&self, f: &mut Forward, image: Var, feats: [Var; 4]) -> Result<CcaTrace> {
        let first = self.units[0].reduce(f, feats[0])?;
        let mut cascade = [first; 4];
        let mut reduced = [first; 4];
        let mut traces = Vec::with_capacity(3);
        for i in 1..4 {
            let t = self.units[i].forward(f, feats[i], cascade[i - 1], image)?;
            cascade[i] = t.out;
            reduced[i] = t.reduced;
            traces.push(t);
        }
        Ok(CcaTrace {
            cascade,
            reduced,
            units: traces,
        })
    }
}
