//! Context-guided local affinity.
//!
//! The context map is gated into the pyramid features, positions are
//! compared by inner product, each row of the score matrix is softmax
//! normalized over the second index, and the result re-mixes the fused
//! features with the pyramid features added back:
//!
//! ```text
//! L   = A + sigmoid(W [A, C]) * C
//! S   = softmax_q(<L_p, L_q>)
//! out = sum_q S_pq L_q + A_p
//! ```
//!
//! Without a context map the fusion step is skipped and `L = A`.

use crate::error::{Error, Result};
use crate::nn::{Activation, ConvLayer, ConvOpts, Forward, ParamStore};
use crate::tensor::{Tape, Var};

/// Row-stochastic position affinity, `(n, 1, N, N)` with `N = h * w`.
pub fn affinity(tape: &mut Tape, query: Var, key: Var) -> Result<Var> {
    let scores = tape.inner_scores(query, key)?;
    Ok(tape.softmax_rows(scores))
}

/// `out_p = sum_q S_pq L_q + A_p`.
pub fn affinity_update(tape: &mut Tape, fused: Var, s: Var, residual: Var) -> Result<Var> {
    let mixed = tape.mix_positions(s, fused)?;
    tape.add(mixed, residual)
}

#[derive(Clone, Copy, Debug)]
pub struct CglTrace {
    pub fused: Var,
    pub gate: Option<Var>,
    pub affinity: Var,
    pub out: Var,
}

#[derive(Clone, Debug)]
pub struct Cgl {
    gate: Option<ConvLayer>,
    qk: Option<(ConvLayer, ConvLayer)>,
}

impl Cgl {
    pub fn new(store: &mut ParamStore, ctx: usize, with_context: bool, qk_proj: bool) -> Result<Self> {
        let gate = with_context
            .then(|| {
                ConvLayer::new(
                    store,
                    "cgl.gate",
                    2 * ctx,
                    ctx,
                    ConvOpts::pointwise(false, Activation::None),
                )
            })
            .transpose()?;
        let qk = if qk_proj {
            let q = ConvLayer::new(store, "cgl.query", ctx, ctx, ConvOpts::pointwise(false, Activation::None))?;
            let k = ConvLayer::new(store, "cgl.key", ctx, ctx, ConvOpts::pointwise(false, Activation::None))?;
            Some((q, k))
        } else {
            None
        };
        Ok(Cgl { gate, qk })
    }

    /// `L = A + sigmoid(W [A, C]) * C`; returns `(L, gate)`.
    pub fn fuse(&self, f: &mut Forward, pyramid: Var, context: Var) -> Result<(Var, Var)> {
        let gate = self
            .gate
            .as_ref()
            .ok_or_else(|| Error::config("context fusion requested without a context gate"))?;
        let (sa, sc) = (f.tape.shape(pyramid), f.tape.shape(context));
        if sa != sc {
            return Err(Error::shape("cgl_fuse", sa, sc));
        }
        let cat = f.tape.concat_channels(&[pyramid, context])?;
        let logits = gate.forward(f, cat)?;
        let g = f.tape.sigmoid(logits);
        let gated = f.tape.mul(g, context)?;
        Ok((f.tape.add(pyramid, gated)?, g))
    }

    pub fn forward(&self, f: &mut Forward, pyramid: Var, context: Option<Var>) -> Result<CglTrace> {
        let (fused, gate) = match (context, &self.gate) {
            (Some(c), Some(_)) => {
                let (l, g) = self.fuse(f, pyramid, c)?;
                (l, Some(g))
            }
            (None, None) => (pyramid, None),
            (Some(_), None) => return Err(Error::config("context map given but module built without it")),
            (None, Some(_)) => return Err(Error::config("module expects a context map")),
        };
        let s = match &self.qk {
            Some((q, k)) => {
                let qv = q.forward(f, fused)?;
                let kv = k.forward(f, fused)?;
                affinity(&mut f.tape, qv, kv)?
            }
            None => affinity(&mut f.tape, fused, fused)?,
        };
        let out = affinity_update(&mut f.tape, fused, s, pyramid)?;
        Ok(CglTrace {
            fused,
            gate,
            affinity: s,
            out,
        })
    }
}
