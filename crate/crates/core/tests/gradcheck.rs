use cascade_seg::cca::GateUnit;
use cascade_seg::cgl::Cgl;
use cascade_seg::data::gen_synthetic;
use cascade_seg::model::{param_gradient_error, ModelConfig, Network};
use cascade_seg::nn::{Forward, Mode, ParamStore};
use cascade_seg::tensor::gradcheck::{op_cases, relative_error, FD_STEP};
use cascade_seg::tensor::{Shape, Tensor, Var};
use cascade_seg::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn random(shape: Shape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

#[test]
fn every_op_matches_central_differences() {
    for seed in SEEDS {
        for case in op_cases(seed) {
            let err = case.max_relative_error(seed).unwrap();
            assert!(err < 1e-4, "{} seed {seed}: {err:e}", case.name);
        }
    }
}

/// Finite differences on the inputs of a module forward pass.
fn check_module(
    store: &ParamStore,
    inputs: &[Tensor],
    seed: u64,
    build: impl Fn(&mut Forward, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |xs: &[Tensor], grad: bool| -> (f64, Vec<Tensor>) {
        let mut f = Forward::with_tracking(store, Mode::Train, false);
        let vars: Vec<Var> = xs.iter().map(|x| f.tape.leaf(x.clone(), grad)).collect();
        let out = build(&mut f, &vars).unwrap();
        let w = f.tape.constant(random(f.tape.shape(out), seed ^ 99));
        let prod = f.tape.mul(out, w).unwrap();
        let loss = f.tape.sum(prod);
        let value = f.tape.value(loss).item();
        if !grad {
            return (value, vec![]);
        }
        let g = f.tape.backward(loss).unwrap();
        (value, vars.iter().map(|&v| g.wrt(v)).collect())
    };
    let (_, analytic) = eval(inputs, true);
    let mut xs = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (i, ga) in analytic.iter().enumerate() {
        for j in 0..xs[i].data().len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&xs, false).0;
            xs[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&xs, false).0;
            xs[i].data_mut()[j] = orig;
            worst = worst.max(relative_error(ga.data()[j], (plus - minus) / (2.0 * FD_STEP)));
        }
    }
    worst
}

#[test]
fn affinity_chain_matches_central_differences() {
    for seed in SEEDS {
        let mut store = ParamStore::new(seed);
        let cgl = Cgl::new(&mut store, 4, true, false).unwrap();
        let a = random(Shape::new(1, 4, 3, 3), seed);
        let c = random(Shape::new(1, 4, 3, 3), seed + 10);
        let err = check_module(&store, &[a, c], seed, |f, v| Ok(cgl.forward(f, v[0], Some(v[1]))?.out));
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn gate_unit_matches_central_differences() {
    for seed in SEEDS {
        let mut store = ParamStore::new(seed);
        let unit = GateUnit::new(&mut store, 2, 5, 4, false, true).unwrap();
        let stage = random(Shape::new(1, 5, 4, 4), seed);
        let prev = random(Shape::new(1, 4, 8, 8), seed + 1);
        let image = random(Shape::new(1, 3, 16, 16), seed + 2).map(|v| v.abs());
        let err = check_module(&store, &[stage, prev, image], seed, |f, v| {
            Ok(unit.forward(f, v[0], v[1], v[2])?.out)
        });
        // The unit contains rectifiers; inputs are random so kinks are
        // crossed with negligible probability.
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        input_size: 32,
        norm: false,
        batch_size: 1,
        seed,
        ..ModelConfig::default()
    }
}

#[test]
fn full_network_matches_central_differences() {
    for seed in SEEDS {
        let mut net = Network::new(small_config(seed)).unwrap();
        let s = &gen_synthetic(1, 32, seed).unwrap()[0];
        let err = param_gradient_error(&mut net, &s.image, &s.mask, 20, seed).unwrap();
        assert!(err < 1e-3, "seed {seed}: {err:e}");
    }
}
