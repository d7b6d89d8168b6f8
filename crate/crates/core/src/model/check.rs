use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Forward, Mode, ParamId};
use crate::tensor::gradcheck::relative_error;
use crate::tensor::gradcheck::FD_STEP;
use crate::tensor::Tensor;

use super::{joint_loss, Network};

fn loss_value(net: &Network, image: &Tensor, mask: &Tensor, track: bool) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
    let c = net.config();
    let mut f = Forward::with_tracking(&net.params, Mode::Train, track);
    let x = f.tape.constant(image.clone());
    let trace = net.forward(&mut f, x)?;
    let (loss, terms) = joint_loss(&mut f.tape, trace.main_prob, trace.aux_prob, mask, c.lambda, c.epsilon)?;
    if !track {
        return Ok((terms.total, Vec::new()));
    }
    let g = f.tape.backward(loss)?;
    Ok((terms.total, f.param_grads(&g)))
}

/// Smallest gradient entry a central difference at `FD_STEP` resolves on a
/// unit-scale loss: the round-off in `L(p + h) - L(p - h)` is a few ulp, about
/// 1e-11 after division by `2h`.
pub const RESOLVABLE_GRADIENT: f64 = 1e-7;

/// Worst relative error between the autodiff gradient of the joint loss and
/// central differences, over `count` scalar parameter entries drawn uniformly
/// from the trainable entries whose gradient is at least
/// [`RESOLVABLE_GRADIENT`] in magnitude.
pub fn param_gradient_error(net: &mut Network, image: &Tensor, mask: &Tensor, count: usize, seed: u64) -> Result<f64> {
    let (_, grads) = loss_value(net, image, mask, true)?;
    let candidates: Vec<(usize, usize)> = grads
        .iter()
        .enumerate()
        .flat_map(|(i, (_, g))| {
            g.data()
                .iter()
                .enumerate()
                .filter(|(_, v)| v.abs() >= RESOLVABLE_GRADIENT)
                .map(move |(k, _)| (i, k))
        })
        .collect();
    if candidates.is_empty() {
        return Err(Error::State("no parameter has a resolvable gradient".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let (i, k) = candidates[rng.random_range(0..candidates.len())];
        let (id, g) = &grads[i];
        let orig = net.params.get(*id).data()[k];
        net.params.get_mut(*id).data_mut()[k] = orig + FD_STEP;
        let plus = loss_value(net, image, mask, false)?.0;
        net.params.get_mut(*id).data_mut()[k] = orig - FD_STEP;
        let minus = loss_value(net, image, mask, false)?.0;
        net.params.get_mut(*id).data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(g.data()[k], numeric));
    }
    Ok(worst)
}
