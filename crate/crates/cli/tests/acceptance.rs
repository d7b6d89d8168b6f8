//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Criteria 6-8 drive the `cascade-seg` binary.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use cascade_seg::cgl::affinity;
use cascade_seg::cca::GateUnit;
use cascade_seg::data::{gen_synthetic, Category};
use cascade_seg::metrics::{compute_metrics, confusion};
use cascade_seg::model::{
    dice_loss, param_gradient_error, wbce_loss, Ablation, ModelConfig, Network, PolySchedule,
};
use cascade_seg::nn::checkpoint::Checkpoint;
use cascade_seg::nn::{Forward, Mode, ParamStore};
use cascade_seg::tensor::gradcheck::op_cases;
use cascade_seg::tensor::{Shape, Tape, Tensor};
use cascade_seg::train::{evaluate, predict_masks, train, TrainOutputs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const BIN: &str = env!("CARGO_BIN_EXE_cascade-seg");
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn tensor(shape: Shape, data: &[f64]) -> Tensor {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| format!("spawn: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "`cascade-seg {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst_op = 0.0f64;
    for seed in SEEDS {
        for case in op_cases(seed) {
            let err = case.max_relative_error(seed).map_err(|e| format!("{}: {e}", case.name))?;
            ensure(err < 1e-4, || format!("op {} seed {seed}: {err:e}", case.name))?;
            worst_op = worst_op.max(err);
        }
    }
    let mut worst_net = 0.0f64;
    for seed in SEEDS {
        let config = ModelConfig {
            input_size: 32,
            norm: false,
            batch_size: 1,
            seed,
            ..ModelConfig::default()
        };
        let mut net = Network::new(config).map_err(|e| e.to_string())?;
        let s = &gen_synthetic(1, 32, seed).map_err(|e| e.to_string())?[0];
        let err = param_gradient_error(&mut net, &s.image, &s.mask, 20, seed).map_err(|e| e.to_string())?;
        ensure(err < 1e-3, || format!("network seed {seed}: {err:e}"))?;
        worst_net = worst_net.max(err);
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "worst op {worst_op:.1e}, worst end-to-end {worst_net:.1e}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn loss_value(build: impl FnOnce(&mut Tape) -> cascade_seg::tensor::Var) -> f64 {
    let mut t = Tape::new();
    let v = build(&mut t);
    t.value(v).item()
}

fn goldens() -> Outcome {
    let y = tensor(Shape::new(1, 1, 1, 2), &[1.0, 0.0]);
    let w = loss_value(|t| {
        let p = t.constant(Tensor::full(y.shape(), 0.5));
        wbce_loss(t, p, &y, None).unwrap()
    });
    ensure((w - std::f64::consts::LN_2 / 2.0).abs() < 1e-12, || format!("wbce {w}"))?;

    let cases: [(&[f64], &[f64], f64); 3] = [
        (&[1.0, 0.0], &[1.0, 0.0], 0.0),
        (&[1.0, 1.0], &[0.0, 0.0], 2.0 / 3.0),
        (&[0.0, 0.0], &[0.0, 0.0], 0.0),
    ];
    for (yv, pv, expect) in cases {
        let y = tensor(Shape::new(1, 1, 1, 2), yv);
        let d = loss_value(|t| {
            let p = t.constant(tensor(y.shape(), pv));
            dice_loss(t, p, &y, 1.0).unwrap()
        });
        // Exact up to f64 rounding: 1 - 1/3 lands one ulp above 2/3.
        ensure((d - expect).abs() <= 4.0 * f64::EPSILON, || format!("dice y={yv:?} p={pv:?}: {d} != {expect}"))?;
    }

    // r=1, img=2, prev=3 with gate logits ln 3 and 0: 1 + 0.75*2 + 0.5*3.
    let mut store = ParamStore::new(0);
    let unit = GateUnit::new(&mut store, 2, 1, 1, false, true).map_err(|e| e.to_string())?;
    for (which, bias) in [("gate_img", 3f64.ln()), ("gate_ctx", 0.0)] {
        let name = format!("cca.unit2.{which}");
        store.assign(&format!("{name}.weight"), Tensor::zeros(Shape::new(1, 2, 1, 1))).unwrap();
        store.assign(&format!("{name}.bias"), Tensor::full(Shape::new(1, 1, 1, 1), bias)).unwrap();
    }
    let mut f = Forward::new(&store, Mode::Eval);
    let [r, i, p] = [1.0, 2.0, 3.0].map(|v| f.tape.constant(Tensor::scalar(v)));
    let (out, _, _) = unit.fuse(&mut f, r, i, p).map_err(|e| e.to_string())?;
    let g = f.tape.value(out).item();
    ensure((g - 4.0).abs() < 1e-12, || format!("gate unit {g}"))?;

    let mut t = Tape::new();
    let x = t.constant(tensor(Shape::new(1, 2, 1, 2), &[1.0, 0.0, 0.0, 1.0]));
    let s = affinity(&mut t, x, x).map_err(|e| e.to_string())?;
    let row = &t.value(s).data()[..2];
    ensure(
        (row[0] - 0.73106).abs() < 1e-5 && (row[1] - 0.26894).abs() < 1e-5,
        || format!("affinity row {row:?}"),
    )?;

    let lr = PolySchedule {
        lr0: 1e-4,
        power: 0.9,
        total_iters: 1000,
    }
    .lr(500);
    ensure((lr - 5.3589e-5).abs() < 1e-9, || format!("poly lr {lr:e}"))?;
    Ok(format!("wbce {w:.12}, gate {g}, affinity [{:.5}, {:.5}], lr {lr:.4e}", row[0], row[1]))
}

/// Pixel-by-pixel counts over explicit index loops, independent of the
/// library's confusion code.
fn oracle(pred: &[u8], gt: &[u8]) -> ([u64; 4], [f64; 5]) {
    let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for k in 0..pred.len() {
        match (pred[k], gt[k]) {
            (1, 1) => tp += 1,
            (0, 0) => tn += 1,
            (1, 0) => fp += 1,
            _ => fn_ += 1,
        }
    }
    let ratio = |n: u64, d: u64| if d == 0 { 1.0 } else { n as f64 / d as f64 };
    (
        [tp, tn, fp, fn_],
        [
            ratio(tp + tn, tp + tn + fp + fn_),
            ratio(2 * tp, 2 * tp + fp + fn_),
            ratio(tp, tp + fp + fn_),
            ratio(tp, tp + fn_),
            ratio(tn, tn + fp),
        ],
    )
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let shape = Shape::new(1, 1, 16, 16);
    for pair in 0..1000 {
        let dp = [0.0, 0.05, 0.5, 0.95, 1.0][rng.random_range(0..5)];
        let dg = [0.0, 0.05, 0.5, 0.95, 1.0][rng.random_range(0..5)];
        let pred: Vec<u8> = (0..256).map(|_| rng.random_bool(dp) as u8).collect();
        let gt: Vec<u8> = (0..256).map(|_| rng.random_bool(dg) as u8).collect();
        let as_tensor = |m: &[u8]| tensor(shape, &m.iter().map(|&v| v as f64).collect::<Vec<_>>());
        let c = confusion(&as_tensor(&pred), &as_tensor(&gt)).map_err(|e| e.to_string())?;
        let (counts, expect) = oracle(&pred, &gt);
        ensure([c.tp, c.tn, c.fp, c.fn_] == counts, || format!("pair {pair}: counts differ"))?;
        let m = compute_metrics(&c);
        ensure(m.values() == expect, || format!("pair {pair}: {:?} vs {expect:?}", m.values()))?;
        ensure((m.di - 2.0 * m.ja / (1.0 + m.ja)).abs() < 1e-12, || format!("pair {pair}: DI identity"))?;
    }
    Ok("1000 pairs exact".into())
}

fn structure(ablation_dir: &Path) -> Outcome {
    let mut gates = 0usize;
    let mut rows = 0usize;
    for seed in SEEDS {
        let net = Network::new(ModelConfig {
            seed,
            ..ModelConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(Shape::new(2, 3, 64, 64), |_, _, _, _| rng.random_range(0.0..1.0));
        let mut f = Forward::new(&net.params, Mode::Eval);
        let xv = f.tape.constant(x);
        let trace = net.forward(&mut f, xv).map_err(|e| e.to_string())?;
        for u in &trace.cca.as_ref().ok_or("no cca trace")?.units {
            for v in [u.gate_img, u.gate_ctx] {
                let data = f.tape.value(v).data();
                ensure(data.iter().all(|&g| g > 0.0 && g < 1.0), || "gate outside (0,1)".into())?;
                gates += data.len();
            }
        }
        let s = f.tape.value(trace.cgl.as_ref().ok_or("no cgl trace")?.affinity);
        let n = s.shape().w;
        for row in s.data().chunks(n) {
            let sum: f64 = row.iter().sum();
            ensure((sum - 1.0).abs() < 1e-9, || format!("affinity row sum {sum}"))?;
            rows += 1;
        }
    }

    for size in [64, 96] {
        let net = Network::new(ModelConfig {
            input_size: size,
            ..ModelConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let p = net.predict(&Tensor::full(Shape::new(1, 3, size, size), 0.5)).map_err(|e| e.to_string())?;
        ensure(p.mask.shape() == Shape::new(1, 1, size, size), || format!("size {size}: {:?}", p.mask.shape()))?;
        // Samples at other resolutions come back at their own size.
        let samples = gen_synthetic(1, size + 16, 3).map_err(|e| e.to_string())?;
        let masks = predict_masks(&net, &samples).map_err(|e| e.to_string())?;
        ensure(masks[0].shape() == samples[0].mask.shape(), || format!("resampled size {size}"))?;
    }

    for ab in Ablation::ALL {
        let (cca, cgl, aux) = ab.flags();
        let ckpt = Checkpoint::load(&ablation_dir.join(ab.label()).join("checkpoints").join("final.ckpt"))
            .map_err(|e| format!("{}: {e}", ab.label()))?;
        let fresh = Network::new(ab.apply(&ModelConfig::default()))
            .map_err(|e| e.to_string())?
            .to_checkpoint();
        for entries in [&ckpt.entries, &fresh.entries] {
            for e in entries {
                let stray = (!cca && e.name.starts_with("cca."))
                    || (!cgl && e.name.starts_with("cgl."))
                    || (!(aux && cca) && e.name.starts_with("aux."));
                ensure(!stray, || format!("{} carries {}", ab.label(), e.name))?;
            }
        }
    }
    Ok(format!("{gates} gate values, {rows} affinity rows, sizes 64/96, 5 ablation checkpoints"))
}

fn overfit() -> Outcome {
    let data = gen_synthetic(8, 64, 0).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let (net, log) = train(ModelConfig::default(), data.clone(), &TrainOutputs::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(log.len() <= 500, || format!("{} iterations", log.len()))?;
    let ja = evaluate(&net, &data, 10).map_err(|e| e.to_string())?.overall.ja;
    ensure(ja >= 0.90, || format!("training JA {ja:.4}"))?;
    ensure(elapsed < Duration::from_secs(600), || format!("took {elapsed:?}"))?;
    let (again, log2) = train(ModelConfig::default(), data.clone(), &TrainOutputs::default()).map_err(|e| e.to_string())?;
    let same_log = log.iter().zip(&log2).all(|(a, b)| a.to_csv() == b.to_csv()) && log.len() == log2.len();
    let same_params = net.to_checkpoint().to_bytes() == again.to_checkpoint().to_bytes();
    ensure(same_log && same_params, || "second run diverged".into())?;
    Ok(format!("training JA {ja:.4} after {} iterations, {:.1}s, rerun identical", log.len(), elapsed.as_secs_f64()))
}

fn generalization(root: &Path) -> Outcome {
    let (train_dir, held_dir, out) = (root.join("train"), root.join("held"), root.join("run"));
    run_cli(&["gen-data", "--out", path(&train_dir), "--n", "64", "--size", "64", "--seed", "100"])?;
    run_cli(&["gen-data", "--out", path(&held_dir), "--n", "32", "--size", "64", "--seed", "200"])?;
    run_cli(&["train", "--data", path(&train_dir), "--eval-data", path(&held_dir), "--out", path(&out)])?;
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval").join("aggregates.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let ja = json["overall"]["JA"].as_f64().ok_or("missing overall JA")? / 100.0;
    let config = std::fs::read_to_string(out.join("config.txt")).map_err(|e| e.to_string())?;
    ensure(config.contains("eval_data"), || "config echo lacks eval_data".into())?;
    ensure(ja >= 0.70, || format!("held-out JA {ja:.3}"))?;
    let by_cat: Vec<String> = [Category::Melanoma, Category::NonMelanoma]
        .iter()
        .filter_map(|c| json[c.as_str()]["JA"].as_f64().map(|v| format!("{} {v:.1}", c.as_str())))
        .collect();
    Ok(format!("held-out JA {:.1}% ({}), config in run/config.txt", ja * 100.0, by_cat.join(", ")))
}

fn ablation(root: &Path) -> Outcome {
    let data = root.join("data");
    run_cli(&["gen-data", "--out", path(&data), "--n", "8", "--size", "64", "--seed", "0"])?;
    let table = run_cli(&[
        "train", "--data", path(&data), "--out", path(root), "--ablation-suite", "--seed", "0", "--total-iters", "500",
    ])?;
    let csv = std::fs::read_to_string(root.join("ablation.csv")).map_err(|e| e.to_string())?;
    let mut lines = csv.lines();
    ensure(lines.next() == Some("method,JA,DI,final_loss,final_total"), || "bad header".into())?;
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let labels: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    let expect: Vec<&str> = Ablation::ALL.iter().map(|a| a.label()).collect();
    ensure(labels == expect, || format!("row order {labels:?}"))?;
    ensure(table.lines().count() == 6, || format!("table:\n{table}"))?;
    let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s}: {e}"));
    for r in &rows {
        let (ja, di) = (num(r[1])?, num(r[2])?);
        ensure((0.0..=1.0).contains(&ja) && (0.0..=1.0).contains(&di), || format!("{}: JA {ja} DI {di}", r[0]))?;
    }
    let baseline = num(rows[0][3])?;
    let full = num(rows[4][3])?;
    ensure(full <= baseline, || format!("full loss {full} > baseline {baseline}"))?;
    Ok(format!("5 rows in order, final loss full {full:.4} <= baseline {baseline:.4}"))
}

fn determinism(root: &Path) -> Outcome {
    let data = root.join("data");
    run_cli(&["gen-data", "--out", path(&data), "--n", "8", "--size", "64", "--seed", "5"])?;
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let out = root.join(run);
        run_cli(&["train", "--data", path(&data), "--out", path(&out), "--total-iters", "20", "--seed", "3"])?;
        logs.push(std::fs::read(out.join("train_log.csv")).map_err(|e| e.to_string())?);
    }
    ensure(logs[0] == logs[1], || "logs differ".into())?;
    Ok(format!("{} log bytes identical", logs[0].len()))
}

fn main() {
    // libtest passes flags such as --nocapture; none apply here.
    let scratch = tempfile::tempdir().expect("tempdir");
    let sub = |name: &str| {
        let p = scratch.path().join(name);
        std::fs::create_dir_all(&p).expect("mkdir");
        p
    };
    let (gen_dir, abl_dir, det_dir) = (sub("generalization"), sub("ablation"), sub("determinism"));

    // The ablation run feeds the checkpoint check of criterion 4.
    let c7 = ablation(&abl_dir);
    let results: Vec<(&str, Outcome)> = vec![
        ("1 gradient correctness", gradients()),
        ("2 analytic golden values", goldens()),
        ("3 metrics oracle equivalence", metrics_oracle()),
        ("4 structural invariants", structure(&abl_dir)),
        ("5 overfit experiment", overfit()),
        ("6 generalization smoke test", generalization(&gen_dir)),
        ("7 ablation harness", c7),
        ("8 determinism", determinism(&det_dir)),
    ];
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
