use cascade_seg::cca::{Cca, GateUnit};
use cascade_seg::cgl::{affinity, affinity_update, Cgl};
use cascade_seg::nn::{Encoder, Forward, Mode, ParamStore};
use cascade_seg::tensor::{Shape, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Shape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn tensor(shape: Shape, data: &[f64]) -> Tensor {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

/// Overwrite the gate convs of `cca.unit{stage}` with constant weights and biases.
fn set_gates(store: &mut ParamStore, stage: usize, ctx: usize, weight: f64, bias_img: f64, bias_ctx: f64) {
    for (which, bias) in [("gate_img", bias_img), ("gate_ctx", bias_ctx)] {
        let name = format!("cca.unit{stage}.{which}");
        store
            .assign(&format!("{name}.weight"), Tensor::full(Shape::new(ctx, 2 * ctx, 1, 1), weight))
            .unwrap();
        store
            .assign(&format!("{name}.bias"), Tensor::full(Shape::new(1, ctx, 1, 1), bias))
            .unwrap();
    }
}

/// Runs `GateUnit::fuse` on explicit maps; returns `(out, g_img, g_ctx)`.
fn fuse(store: &ParamStore, unit: &GateUnit, r: &Tensor, img: &Tensor, prev: &Tensor) -> [Tensor; 3] {
    let mut f = Forward::new(store, Mode::Eval);
    let (rv, iv, pv) = (f.tape.constant(r.clone()), f.tape.constant(img.clone()), f.tape.constant(prev.clone()));
    let (o, gi, gc) = unit.fuse(&mut f, rv, iv, pv).unwrap();
    [o, gi, gc].map(|v| f.tape.value(v).clone())
}

#[test]
fn zero_gate_convs_give_half_gates() {
    let mut store = ParamStore::new(0);
    let unit = GateUnit::new(&mut store, 2, 8, 4, false, true).unwrap();
    set_gates(&mut store, 2, 4, 0.0, 0.0, 0.0);
    let s = Shape::new(1, 4, 3, 3);
    let (r, i, p) = (random(s, 1), random(s, 2), random(s, 3));
    let [out, gi, gc] = fuse(&store, &unit, &r, &i, &p);
    assert!(gi.data().iter().chain(gc.data()).all(|&g| g == 0.5));
    for k in 0..s.numel() {
        let expect = r.data()[k] + 0.5 * i.data()[k] + 0.5 * p.data()[k];
        assert!((out.data()[k] - expect).abs() < 1e-15);
    }
}

#[test]
fn saturated_gates_pass_everything() {
    let mut store = ParamStore::new(0);
    let unit = GateUnit::new(&mut store, 3, 8, 4, false, true).unwrap();
    set_gates(&mut store, 3, 4, 0.0, 20.0, 20.0);
    let s = Shape::new(1, 4, 2, 2);
    let (r, i, p) = (random(s, 4), random(s, 5), random(s, 6));
    let [out, gi, _] = fuse(&store, &unit, &r, &i, &p);
    assert!(gi.data().iter().all(|&g| (1.0 - g) < 1e-8));
    for k in 0..s.numel() {
        let expect = r.data()[k] + i.data()[k] + p.data()[k];
        assert!((out.data()[k] - expect).abs() < 1e-8);
    }
}

#[test]
fn scalar_gate_unit_case() {
    let mut store = ParamStore::new(0);
    let unit = GateUnit::new(&mut store, 2, 1, 1, false, true).unwrap();
    set_gates(&mut store, 2, 1, 0.0, 3f64.ln(), 0.0);
    let s = Shape::new(1, 1, 1, 1);
    let [out, gi, gc] = fuse(&store, &unit, &tensor(s, &[1.0]), &tensor(s, &[2.0]), &tensor(s, &[3.0]));
    assert!((gi.item() - 0.75).abs() < 1e-15);
    assert_eq!(gc.item(), 0.5);
    assert!((out.item() - 4.0).abs() < 1e-12);
}

#[test]
fn closed_gates_degrade_to_skip() {
    let mut store = ParamStore::new(0);
    let unit = GateUnit::new(&mut store, 4, 8, 4, false, true).unwrap();
    set_gates(&mut store, 4, 4, 0.0, -40.0, -40.0);
    let s = Shape::new(2, 4, 3, 3);
    let (r, i, p) = (random(s, 7), random(s, 8), random(s, 9));
    let [out, _, _] = fuse(&store, &unit, &r, &i, &p);
    assert!(out.max_abs_diff(&r) < 1e-12);
}

#[test]
fn fuse_rejects_mismatched_maps() {
    let mut store = ParamStore::new(0);
    let unit = GateUnit::new(&mut store, 2, 8, 4, false, true).unwrap();
    let mut f = Forward::new(&store, Mode::Eval);
    let r = f.tape.constant(Tensor::zeros(Shape::new(1, 4, 3, 3)));
    let p = f.tape.constant(Tensor::zeros(Shape::new(1, 4, 2, 3)));
    assert!(unit.fuse(&mut f, r, r, p).is_err());
}

#[test]
fn unit_without_gate_bias_has_no_bias_parameter() {
    let mut store = ParamStore::new(0);
    GateUnit::new(&mut store, 2, 8, 4, false, false).unwrap();
    assert!(store.id("cca.unit2.gate_img.bias").is_none());
    assert!(store.id("cca.unit2.gate_img.weight").is_some());
}

struct CcaSetup {
    store: ParamStore,
    encoder: Encoder,
    cca: Cca,
}

fn cca_setup(seed: u64) -> CcaSetup {
    let mut store = ParamStore::new(seed);
    let encoder = Encoder::new(&mut store, [16, 32, 32, 32], false).unwrap();
    let cca = Cca::new(&mut store, [16, 32, 32, 32], 32, false, true).unwrap();
    CcaSetup { store, encoder, cca }
}

#[test]
fn context_shape_and_first_stage_identity() {
    let s = cca_setup(1);
    let mut f = Forward::new(&s.store, Mode::Eval);
    let x = f.tape.constant(random(Shape::new(2, 3, 64, 64), 0).map(f64::abs));
    let feats = s.encoder.forward(&mut f, x).unwrap();
    let trace = s.cca.forward(&mut f, x, feats).unwrap();
    assert_eq!(f.tape.shape(trace.context()), Shape::new(2, 32, 8, 8));
    assert_eq!(f.tape.value(trace.cascade[0]), f.tape.value(trace.reduced[0]));
    assert_eq!(f.tape.shape(trace.cascade[0]), Shape::new(2, 32, 16, 16));
    for u in &trace.units {
        for g in [u.gate_img, u.gate_ctx] {
            assert!(f.tape.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

#[test]
fn zero_image_gives_zero_context() {
    let mut s = cca_setup(2);
    let ids: Vec<_> = s.store.trainable_ids().collect();
    for id in ids {
        let shape = s.store.get(id).shape();
        *s.store.get_mut(id) = Tensor::zeros(shape);
    }
    let mut f = Forward::new(&s.store, Mode::Eval);
    let x = f.tape.constant(Tensor::zeros(Shape::new(1, 3, 64, 64)));
    let feats = s.encoder.forward(&mut f, x).unwrap();
    let trace = s.cca.forward(&mut f, x, feats).unwrap();
    assert!(f.tape.value(trace.context()).data().iter().all(|&v| v == 0.0));
}

#[test]
fn cascade_only_looks_backwards() {
    let s = cca_setup(3);
    let image = random(Shape::new(1, 3, 32, 32), 5).map(f64::abs);
    let run = |bump: f64| {
        let mut f = Forward::new(&s.store, Mode::Eval);
        let x = f.tape.constant(image.clone());
        let mut feats = s.encoder.forward(&mut f, x).unwrap();
        let mut stage3 = f.tape.value(feats[2]).clone();
        stage3.data_mut().iter_mut().for_each(|v| *v += bump);
        feats[2] = f.tape.constant(stage3);
        let trace = s.cca.forward(&mut f, x, feats).unwrap();
        trace.cascade.map(|v| f.tape.value(v).clone())
    };
    let (a, b) = (run(0.0), run(0.3));
    assert_eq!(a[0], b[0]);
    assert_eq!(a[1], b[1]);
    assert_ne!(a[2], b[2]);
    assert_ne!(a[3], b[3]);
}

#[test]
fn gradients_reach_all_three_unit_inputs() {
    let mut store = ParamStore::new(4);
    let unit = GateUnit::new(&mut store, 3, 5, 4, false, true).unwrap();
    let mut f = Forward::new(&store, Mode::Train);
    let stage = f.tape.variable(random(Shape::new(1, 5, 4, 4), 1));
    let prev = f.tape.variable(random(Shape::new(1, 4, 4, 4), 2));
    let image = f.tape.variable(random(Shape::new(1, 3, 16, 16), 3).map(f64::abs));
    let t = unit.forward(&mut f, stage, prev, image).unwrap();
    let w = f.tape.constant(random(Shape::new(1, 4, 4, 4), 9));
    let prod = f.tape.mul(t.out, w).unwrap();
    let loss = f.tape.sum(prod);
    let g = f.tape.backward(loss).unwrap();
    for v in [stage, prev, image] {
        assert!(g.wrt(v).data().iter().any(|&x| x != 0.0));
    }
}

fn values(tape: &Tape, v: Var) -> Vec<f64> {
    tape.value(v).data().to_vec()
}

#[test]
fn zero_context_leaves_pyramid_untouched() {
    let mut store = ParamStore::new(0);
    let cgl = Cgl::new(&mut store, 4, true, false).unwrap();
    let a = random(Shape::new(2, 4, 3, 3), 1);
    let mut f = Forward::new(&store, Mode::Eval);
    let av = f.tape.constant(a.clone());
    let cv = f.tape.constant(Tensor::zeros(a.shape()));
    let (l, g) = cgl.fuse(&mut f, av, cv).unwrap();
    assert_eq!(f.tape.value(l), &a);
    assert!(f.tape.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn saturated_context_gate_adds_context() {
    let mut store = ParamStore::new(0);
    let cgl = Cgl::new(&mut store, 4, true, false).unwrap();
    store.assign("cgl.gate.weight", Tensor::zeros(Shape::new(4, 8, 1, 1))).unwrap();
    store.assign("cgl.gate.bias", Tensor::full(Shape::new(1, 4, 1, 1), 20.0)).unwrap();
    let (a, c) = (random(Shape::new(1, 4, 3, 3), 2), random(Shape::new(1, 4, 3, 3), 3));
    let mut f = Forward::new(&store, Mode::Eval);
    let (av, cv) = (f.tape.constant(a.clone()), f.tape.constant(c.clone()));
    let (l, _) = cgl.fuse(&mut f, av, cv).unwrap();
    for ((l, a), c) in values(&f.tape, l).iter().zip(a.data()).zip(c.data()) {
        assert!((l - (a + c)).abs() < 1e-8);
    }
}

#[test]
fn fuse_rejects_shape_mismatch() {
    let mut store = ParamStore::new(0);
    let cgl = Cgl::new(&mut store, 4, true, false).unwrap();
    let mut f = Forward::new(&store, Mode::Eval);
    let a = f.tape.constant(Tensor::zeros(Shape::new(1, 4, 3, 3)));
    let c = f.tape.constant(Tensor::zeros(Shape::new(1, 4, 3, 2)));
    assert!(cgl.fuse(&mut f, a, c).is_err());
}

#[test]
fn without_context_fusion_is_skipped() {
    let mut store = ParamStore::new(0);
    let cgl = Cgl::new(&mut store, 4, false, false).unwrap();
    assert!(store.is_empty());
    let mut f = Forward::new(&store, Mode::Eval);
    let a = f.tape.constant(random(Shape::new(1, 4, 2, 2), 1));
    let t = cgl.forward(&mut f, a, None).unwrap();
    assert_eq!(t.fused, a);
    assert!(t.gate.is_none());
}

fn affinity_of(x: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let s = affinity(&mut t, v, v).unwrap();
    t.value(s).clone()
}

#[test]
fn two_position_affinity_closed_form() {
    // Channels (1, 0) at the first position and (0, 1) at the second.
    let x = tensor(Shape::new(1, 2, 1, 2), &[1.0, 0.0, 0.0, 1.0]);
    let s = affinity_of(&x);
    assert_eq!(s.shape(), Shape::new(1, 1, 2, 2));
    let e = std::f64::consts::E;
    assert!((s.data()[0] - e / (e + 1.0)).abs() < 1e-12);
    assert!((s.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    assert!((s.data()[0] - 0.73106).abs() < 1e-5);
    assert!((s.data()[1] - 0.26894).abs() < 1e-5);
}

#[test]
fn identical_positions_give_uniform_affinity() {
    let x = Tensor::from_fn(Shape::new(1, 3, 2, 3), |_, c, _, _| c as f64 * 0.4 - 0.3);
    let s = affinity_of(&x);
    assert!(s.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
}

#[test]
fn affinity_is_not_symmetric_after_normalization() {
    let s = affinity_of(&random(Shape::new(1, 3, 3, 3), 21));
    let n = 9;
    let asym = (0..n)
        .flat_map(|p| (0..n).map(move |q| (p, q)))
        .map(|(p, q)| (s.data()[p * n + q] - s.data()[q * n + p]).abs())
        .fold(0.0, f64::max);
    assert!(asym > 1e-3);
}

#[test]
fn affinity_stays_within_batch_item() {
    let a = random(Shape::new(1, 3, 2, 2), 1);
    let b = random(Shape::new(1, 3, 2, 2), 2);
    let both = Tensor::stack(&[a.clone(), b]).unwrap();
    let s = affinity_of(&both);
    assert_eq!(s.shape(), Shape::new(2, 1, 4, 4));
    assert_eq!(s.batch_item(0), affinity_of(&a));
}

fn update(fl: &Tensor, s: &Tensor, fa: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let (l, s, a) = (t.constant(fl.clone()), t.constant(s.clone()), t.constant(fa.clone()));
    let out = affinity_update(&mut t, l, s, a).unwrap();
    t.value(out).clone()
}

#[test]
fn update_hand_example() {
    let fl = tensor(Shape::new(1, 1, 1, 2), &[2.0, 4.0]);
    let s = tensor(Shape::new(1, 1, 2, 2), &[0.75, 0.25, 0.5, 0.5]);
    let fa = tensor(Shape::new(1, 1, 1, 2), &[1.0, 1.0]);
    assert_eq!(update(&fl, &s, &fa).data(), &[3.5, 4.0]);
}

#[test]
fn update_with_identity_and_uniform_mixing() {
    let fl = random(Shape::new(1, 2, 2, 2), 3);
    let fa = random(Shape::new(1, 2, 2, 2), 4);
    let eye = Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, p, q| if p == q { 1.0 } else { 0.0 });
    let out = update(&fl, &eye, &fa);
    for k in 0..8 {
        assert!((out.data()[k] - (fl.data()[k] + fa.data()[k])).abs() < 1e-15);
    }
    let v = 0.625;
    let uniform = Tensor::full(Shape::new(1, 1, 4, 4), 0.25);
    let out = update(&Tensor::full(fl.shape(), v), &uniform, &fa);
    for k in 0..8 {
        assert!((out.data()[k] - (v + fa.data()[k])).abs() < 1e-15);
    }
}

fn entropy(row: &[f64]) -> f64 {
    row.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn affinity_rows_are_stochastic(seed in any::<u64>(), scale in 0.1f64..4.0) {
        let s = affinity_of(&random(Shape::new(2, 4, 3, 4), seed).map(|v| v * scale));
        for row in s.data().chunks(12) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn scaling_features_sharpens_rows(seed in any::<u64>(), t in 1.0f64..3.0) {
        let x = random(Shape::new(1, 3, 3, 3), seed);
        let base = affinity_of(&x);
        let sharp = affinity_of(&x.map(|v| v * t));
        for (r0, r1) in base.data().chunks(9).zip(sharp.data().chunks(9)) {
            prop_assert!(entropy(r1) <= entropy(r0) + 1e-12);
        }
    }

    #[test]
    fn mixing_is_linear_in_features(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let shape = Shape::new(1, 2, 2, 3);
        let s = affinity_of(&random(shape, seed ^ 1));
        let (x, y) = (random(shape, seed ^ 2), random(shape, seed ^ 3));
        let zero = Tensor::zeros(shape);
        let combo = Tensor::from_vec(shape, x.data().iter().zip(y.data()).map(|(x, y)| a * x + b * y).collect()).unwrap();
        let lhs = update(&combo, &s, &zero);
        let (ux, uy) = (update(&x, &s, &zero), update(&y, &s, &zero));
        for k in 0..shape.numel() {
            prop_assert!((lhs.data()[k] - (a * ux.data()[k] + b * uy.data()[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn gates_stay_strictly_inside_unit_interval(seed in any::<u64>()) {
        let mut store = ParamStore::new(seed);
        let unit = GateUnit::new(&mut store, 2, 3, 3, false, true).unwrap();
        let s = Shape::new(1, 3, 3, 3);
        let scale = |t: Tensor| t.map(|v| v * 5.0);
        let [_, gi, gc] = fuse(&store, &unit, &scale(random(s, seed)), &random(s, seed ^ 5), &scale(random(s, seed ^ 9)));
        prop_assert!(gi.data().iter().chain(gc.data()).all(|&g| g > 0.0 && g < 1.0));
    }
}
