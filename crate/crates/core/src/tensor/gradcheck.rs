//! Central finite-difference oracle for the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / (|n| + 1e-8)`.
pub fn relative_error(autodiff: f64, numeric: f64) -> f64 {
    (autodiff - numeric).abs() / (numeric.abs() + 1e-8)
}

/// `(f(x + h) - f(x - h)) / 2h` for one scalar coordinate.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

/// Worst relative error between autodiff and central differences for every
/// entry of every input. The graph built by `op` is reduced to a scalar by a
/// fixed random weighting of its output, drawn from `seed`.
pub fn check_op(
    inputs: &[Tensor],
    seed: u64,
    op: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let probe_shape = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = op(&mut t, &vars)?;
        t.shape(out)
    };
    let weights = Tensor::from_fn(probe_shape, |_, _, _, _| rng.random_range(-1.0..1.0));

    let eval = |xs: &[Tensor], grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), grad)).collect();
        let out = op(&mut t, &vars)?;
        let w = t.constant(weights.clone());
        let prod = t.mul(out, w)?;
        let loss = t.sum(prod);
        let value = t.value(loss).item();
        if !grad {
            return Ok((value, Vec::new()));
        }
        let g = t.backward(loss)?;
        Ok((value, vars.iter().map(|&v| g.wrt(v)).collect()))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (i, ga) in analytic.iter().enumerate() {
        for j in 0..xs[i].data().len() {
            let orig = xs[i].data()[j];
            let mut probe = |v: f64| {
                xs[i].data_mut()[j] = v;
                eval(&xs, false).map(|r| r.0)
            };
            let plus = probe(orig + FD_STEP)?;
            let minus = probe(orig - FD_STEP)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(ga.data()[j], numeric));
        }
    }
    Ok(worst)
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One differentiable op with inputs drawn for a given seed.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

impl OpCase {
    fn new(name: &'static str, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Self {
        OpCase {
            name,
            inputs,
            build: Box::new(build),
        }
    }

    pub fn max_relative_error(&self, seed: u64) -> Result<f64> {
        check_op(&self.inputs, seed, &self.build)
    }
}

/// Every differentiable tape op on small random inputs. Inputs of the
/// rectifier avoid the kink and probabilities stay away from the clamp.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    use super::{ConvSpec, Shape};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |s: Shape, lo: f64, hi: f64| Tensor::from_fn(s, |_, _, _, _| rng.random_range(lo..hi));
    let s4 = Shape::new(2, 3, 4, 4);
    let bias = Shape::new(1, 3, 1, 1);
    let a = uniform(s4, -1.0, 1.0);
    let b = uniform(s4, -1.0, 1.0);
    let ch = uniform(bias, -1.0, 1.0);
    let kinked = uniform(s4, 0.1, 1.0);
    let signs = uniform(s4, -1.0, 1.0);
    let relu_in = Tensor::from_vec(
        s4,
        kinked.data().iter().zip(signs.data()).map(|(m, s)| m * s.signum()).collect(),
    )
    .expect("same shape");
    let conv_x = uniform(Shape::new(2, 2, 7, 6), -1.0, 1.0);
    let conv_w = uniform(Shape::new(3, 2, 3, 3), -1.0, 1.0);
    let conv_b = uniform(bias, -1.0, 1.0);
    let pw_w = uniform(Shape::new(3, 3, 1, 1), -1.0, 1.0);
    let gamma = uniform(bias, 0.5, 1.5);
    let beta = uniform(bias, -0.5, 0.5);
    let mean: Vec<f64> = uniform(bias, -0.5, 0.5).into_vec();
    let var: Vec<f64> = uniform(bias, 0.5, 2.0).into_vec();
    let small = uniform(Shape::new(1, 3, 3, 4), -1.0, 1.0);
    let big = uniform(Shape::new(1, 2, 6, 6), -1.0, 1.0);
    let f = uniform(Shape::new(2, 3, 2, 3), -1.0, 1.0);
    let g = uniform(Shape::new(2, 3, 2, 3), -1.0, 1.0);
    let scores = uniform(Shape::new(2, 1, 6, 6), -2.0, 2.0);
    let probs = uniform(Shape::new(2, 1, 4, 4), 0.05, 0.95);
    let target = uniform(Shape::new(2, 1, 4, 4), 0.0, 1.0).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let target2 = target.clone();
    let cat_b = uniform(Shape::new(2, 2, 4, 4), -1.0, 1.0);

    vec![
        OpCase::new("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1])),
        OpCase::new("add_bias", vec![a.clone(), ch.clone()], |t, v| t.add(v[0], v[1])),
        OpCase::new("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])),
        OpCase::new("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1])),
        OpCase::new("mul_channel", vec![a.clone(), ch], |t, v| t.mul(v[0], v[1])),
        OpCase::new("scale", vec![a.clone()], |t, v| Ok(t.scale(v[0], -1.7))),
        OpCase::new("sigmoid", vec![a.map(|x| 3.0 * x)], |t, v| Ok(t.sigmoid(v[0]))),
        OpCase::new("relu", vec![relu_in], |t, v| Ok(t.relu(v[0]))),
        OpCase::new("conv2d_dilated", vec![conv_x.clone(), conv_w.clone(), conv_b], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(1, 2, 2))
        }),
        OpCase::new("conv2d_strided", vec![conv_x, conv_w], |t, v| {
            t.conv2d(v[0], v[1], None, ConvSpec::new(2, 1, 1))
        }),
        OpCase::new("conv2d_pointwise", vec![a.clone(), pw_w], |t, v| {
            t.conv2d(v[0], v[1], None, ConvSpec::new(1, 1, 0))
        }),
        OpCase::new("batch_norm", vec![a.clone(), gamma.clone(), beta.clone()], |t, v| {
            Ok(t.batch_norm(v[0], v[1], v[2], 1e-5)?.0)
        }),
        OpCase::new("channel_affine", vec![a.clone(), gamma, beta], move |t, v| {
            t.channel_affine(v[0], v[1], v[2], &mean, &var, 1e-5)
        }),
        OpCase::new("resize_up", vec![small], |t, v| t.resize(v[0], 5, 7)),
        OpCase::new("resize_down", vec![big], |t, v| t.resize(v[0], 4, 3)),
        OpCase::new("global_avg_pool", vec![a.clone()], |t, v| Ok(t.global_avg_pool(v[0]))),
        OpCase::new("concat_channels", vec![a.clone(), cat_b], |t, v| t.concat_channels(&[v[0], v[1], v[0]])),
        OpCase::new("slice_channels", vec![a.clone()], |t, v| t.slice_channels(v[0], 1, 2)),
        OpCase::new("inner_scores", vec![f.clone(), g], |t, v| t.inner_scores(v[0], v[1])),
        OpCase::new("softmax_rows", vec![scores.clone()], |t, v| Ok(t.softmax_rows(v[0]))),
        OpCase::new("mix_positions", vec![scores.map(|x| x * 0.5), f], |t, v| t.mix_positions(v[0], v[1])),
        OpCase::new("sum", vec![a.clone()], |t, v| Ok(t.sum(v[0]))),
        OpCase::new("mean", vec![a], |t, v| Ok(t.mean(v[0]))),
        OpCase::new("weighted_bce", vec![probs.clone()], move |t, v| {
            t.weighted_bce(v[0], &target, &[0.3, 0.8], (1e-7, 1.0 - 1e-7))
        }),
        OpCase::new("dice_loss", vec![probs], move |t, v| t.dice_loss(v[0], &target2, 1.0)),
    ]
}
