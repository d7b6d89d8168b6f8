//! `cascade-seg`: synthetic data, training, ablation sweeps, prediction and
//! challenge-style evaluation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or validation
//! error. Verbosity follows `RUST_LOG` (default `info`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cascade_seg::data::codec::{read_image, write_image, Image8};
use cascade_seg::data::{gen_synthetic, load_manifest, resize_sample, write_dataset, SegSample};
use cascade_seg::kv;
use cascade_seg::metrics::{aggregate, Record};
use cascade_seg::model::{Ablation, ModelConfig, Network};
use cascade_seg::nn::checkpoint::Checkpoint;
use cascade_seg::nn::{Forward, Mode};
use cascade_seg::tensor::{Shape, Tensor};
use cascade_seg::train::{
    ablation_suite, evaluate, format_ablation_table, predict_masks, train, write_ablation_csv, TrainOutputs,
};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

/// Resolved settings of every run are written next to its outputs.
const CONFIG_ECHO: &str = "config.txt";
const TRAIN_LOG: &str = "train_log.csv";
const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] cascade_seg::Error),
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if !e.is_config() => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "cascade-seg", version, about = "Cascaded context enhancement lesion segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dermoscopy-style dataset.
    GenData(GenDataArgs),
    /// Train one configuration, or all five with --ablation-suite.
    Train(TrainArgs),
    /// Predict binary masks with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory containing manifest.csv.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Plain-text `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    no_cca: bool,
    #[arg(long)]
    no_cgl: bool,
    #[arg(long)]
    no_aux: bool,
    /// Disable flips, crops and rotations.
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    total_iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ckpt_every: Option<usize>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Train all five ablation configurations and write a combined table.
    #[arg(long)]
    ablation_suite: bool,
    /// Held-out dataset evaluated after training.
    #[arg(long)]
    eval_data: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write the mean gate maps of every cascade unit.
    #[arg(long)]
    dump_gates: bool,
    /// Write the position affinity matrix.
    #[arg(long)]
    dump_affinity: bool,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Directory of `<id>_pred.png` masks.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset directory with manifest.csv.
    #[arg(long)]
    gt: PathBuf,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
    /// JA histogram bins.
    #[arg(long)]
    histogram: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => run_train(&a),
        Command::Predict(a) => predict(&a),
        Command::Eval(a) => eval(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| cascade_seg::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| cascade_seg::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let samples = gen_synthetic(a.n, a.size, a.seed)?;
    write_dataset(&a.out, &samples)?;
    write_text(&a.out.join(CONFIG_ECHO), &kv::to_text(a))?;
    log::info!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

/// Defaults, then the config file, then flags.
fn resolve_config(a: &TrainArgs) -> Result<ModelConfig> {
    let mut config = ModelConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| cascade_seg::Error::Io {
            path: path.clone(),
            source: e,
        })?;
        config = kv::from_text(&config, &text, path)?;
    }
    let mut overrides: Vec<(String, Value)> = Vec::new();
    let mut put = |k: &str, v: Value| overrides.push((k.to_owned(), v));
    if a.no_cca {
        put("use_cca", false.into());
    }
    if a.no_cgl {
        put("use_cgl", false.into());
    }
    if a.no_aux {
        put("use_aux", false.into());
    }
    if a.no_augment {
        for k in ["augment_flip", "augment_crop", "augment_rotate"] {
            put(k, false.into());
        }
    }
    if let Some(v) = a.total_iters {
        put("total_iters", v.into());
    }
    if let Some(v) = a.batch_size {
        put("batch_size", v.into());
    }
    if let Some(v) = a.input_size {
        put("input_size", v.into());
    }
    if let Some(v) = a.lr0 {
        put("lr0", v.into());
    }
    if let Some(v) = a.lambda {
        put("lambda", v.into());
    }
    if let Some(v) = a.seed {
        put("seed", v.into());
    }
    if let Some(v) = a.ckpt_every {
        put("ckpt_every", v.into());
    }
    for pair in &a.set {
        let parsed = kv::parse(pair, Path::new("--set"))?;
        overrides.extend(parsed);
    }
    let config = kv::merge(&config, overrides)?;
    config.validate()?;
    Ok(config)
}

fn load_dataset(dir: &Path) -> Result<Vec<SegSample>> {
    let samples = load_manifest(dir)?;
    if samples.is_empty() {
        return Err(CliError::Invalid(format!("dataset {} is empty", dir.display())));
    }
    Ok(samples)
}

fn outputs_in(dir: &Path) -> Result<TrainOutputs> {
    create_dir(dir)?;
    Ok(TrainOutputs {
        log: Some(dir.join(TRAIN_LOG)),
        checkpoint_dir: Some(dir.join(CHECKPOINT_DIR)),
    })
}

fn write_report(report: &cascade_seg::metrics::MetricsReport, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    report.write_records_csv(&dir.join("per_image.csv"))?;
    report.write_json(&dir.join("aggregates.json"))?;
    report.write_histogram_csv(&dir.join("histogram.csv"))?;
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let config = resolve_config(a)?;
    let data = load_dataset(&a.data)?;
    let eval_set = a.eval_data.as_deref().map(load_dataset).transpose()?;
    create_dir(&a.out)?;
    let mut echo = config.to_text();
    echo.push_str(&format!("data = {:?}\n", a.data.display().to_string()));
    if let Some(e) = &a.eval_data {
        echo.push_str(&format!("eval_data = {:?}\n", e.display().to_string()));
    }
    write_text(&a.out.join(CONFIG_ECHO), &echo)?;

    if a.ablation_suite {
        let eval = eval_set.as_deref().unwrap_or(&data);
        let mut dirs = BTreeMap::new();
        for ab in Ablation::ALL {
            let dir = a.out.join(ab.label());
            create_dir(&dir)?;
            write_text(&dir.join(CONFIG_ECHO), &ab.apply(&config).to_text())?;
            dirs.insert(ab.label(), dir);
        }
        let rows = ablation_suite(&config, &data, eval, |ab| TrainOutputs {
            log: Some(dirs[ab.label()].join(TRAIN_LOG)),
            checkpoint_dir: Some(dirs[ab.label()].join(CHECKPOINT_DIR)),
        })?;
        let table = format_ablation_table(&rows);
        print!("{table}");
        write_text(&a.out.join("ablation.txt"), &table)?;
        write_ablation_csv(&a.out.join("ablation.csv"), &rows)?;
        return Ok(());
    }

    let (net, rows) = train(config, data, &outputs_in(&a.out)?)?;
    if let Some(last) = rows.last() {
        log::info!("finished {} iterations, final loss {:.5}", rows.len(), last.terms.total);
    }
    if let Some(eval) = eval_set {
        let report = evaluate(&net, &eval, 10)?;
        write_report(&report, &a.out.join("eval"))?;
        println!("{}", serde_json::to_string(&report.aggregates_json()).expect("json"));
    }
    Ok(())
}

fn gray(t: &Tensor) -> Tensor {
    let s = t.shape();
    Tensor::from_fn(Shape::new(1, 1, s.h, s.w), |_, _, y, x| {
        (0..s.c).map(|c| t.at(0, c, y, x)).sum::<f64>() / s.c as f64
    })
}

fn predict(a: &PredictArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let net = Network::from_checkpoint(&ckpt)?;
    let config = net.config();
    let mut unmet = Vec::new();
    if a.dump_gates && !config.use_cca {
        unmet.push("--dump-gates requires use_cca = true");
    }
    if a.dump_affinity && !config.use_cgl {
        unmet.push("--dump-affinity requires use_cgl = true");
    }
    if !unmet.is_empty() {
        return Err(CliError::Invalid(format!(
            "checkpoint does not support the requested dumps\ncheckpoint config:\n{}requested:\n{}",
            config.to_text(),
            unmet.join("\n")
        )));
    }
    let samples = load_manifest(&a.data)?;
    create_dir(&a.out)?;
    write_text(
        &a.out.join(CONFIG_ECHO),
        &format!(
            "ckpt = {:?}\ndata = {:?}\ndump_gates = {}\ndump_affinity = {}\n{}",
            a.ckpt.display().to_string(),
            a.data.display().to_string(),
            a.dump_gates,
            a.dump_affinity,
            config.to_text()
        ),
    )?;
    let masks = predict_masks(&net, &samples)?;
    for (s, m) in samples.iter().zip(&masks) {
        write_image(&a.out.join(format!("{}_pred.png", s.id)), &Image8::from_mask(m)?)?;
    }
    if a.dump_gates || a.dump_affinity {
        for s in &samples {
            dump_internals(&net, s, a)?;
        }
    }
    log::info!("wrote {} masks to {}", masks.len(), a.out.display());
    Ok(())
}

/// Gate maps (channel mean, upsampled to the sample) and the affinity matrix
/// scaled by its maximum.
fn dump_internals(net: &Network, s: &SegSample, a: &PredictArgs) -> Result<()> {
    let x = resize_sample(s, net.config().input_size);
    let mut f = Forward::new(&net.params, Mode::Eval);
    let xv = f.tape.constant(x.image);
    let trace = net.forward(&mut f, xv)?;
    if a.dump_gates {
        if let Some(cca) = &trace.cca {
            // Stage 1 passes through, so the first unit refines stage 2.
            for (i, u) in cca.units.iter().enumerate() {
                let stage = i + 2;
                for (kind, v) in [("img", u.gate_img), ("ctx", u.gate_ctx)] {
                    let map = gray(f.tape.value(v)).resized(s.height(), s.width());
                    let path = a.out.join(format!("{}_gate{stage}_{kind}.png", s.id));
                    write_image(&path, &Image8::from_tensor(&map)?)?;
                }
            }
        }
    }
    if a.dump_affinity {
        if let Some(cgl) = &trace.cgl {
            let m = f.tape.value(cgl.affinity);
            let max = m.data().iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
            let scaled = m.batch_item(0).map(|v| v / max);
            write_image(&a.out.join(format!("{}_affinity.png", s.id)), &Image8::from_tensor(&scaled)?)?;
        }
    }
    Ok(())
}

/// `<id>_pred.<ext>` image files in `dir`, keyed by id. Gate and affinity
/// dumps sharing the directory are skipped.
fn prediction_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| cascade_seg::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut out = BTreeMap::new();
    for entry in entries.flatten() {
        let path = entry.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        if !matches!(ext.as_str(), "png" | "pgm" | "pnm") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(id) = stem.strip_suffix("_pred") {
            out.insert(id.to_owned(), path);
        }
    }
    Ok(out)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let bins = a.histogram.unwrap_or(10);
    let gt = load_manifest(&a.gt)?;
    let preds = prediction_files(&a.pred)?;
    let gt_ids: BTreeMap<&str, &SegSample> = gt.iter().map(|s| (s.id.as_str(), s)).collect();
    let only_pred: Vec<&str> = preds.keys().map(String::as_str).filter(|id| !gt_ids.contains_key(id)).collect();
    let only_gt: Vec<&str> = gt_ids.keys().copied().filter(|id| !preds.contains_key(*id)).collect();

    let mut records = Vec::new();
    for (id, s) in &gt_ids {
        let Some(path) = preds.get(*id) else { continue };
        let img = read_image(path)?;
        let t = img.to_tensor();
        let mask = Tensor::from_fn(Shape::new(1, 1, img.height, img.width), |_, _, y, x| {
            if t.at(0, 0, y, x) > 127.0 / 255.0 {
                1.0
            } else {
                0.0
            }
        });
        records.push(Record::from_masks(*id, s.category, &mask, &s.mask).map_err(|e| {
            CliError::Invalid(format!("{id}: {e}"))
        })?);
    }
    create_dir(&a.out)?;
    write_text(&a.out.join(CONFIG_ECHO), &kv::to_text(a))?;
    if !records.is_empty() {
        let report = aggregate(records, bins)?;
        write_report(&report, &a.out)?;
        println!("{}", serde_json::to_string_pretty(&report.aggregates_json()).expect("json"));
    }
    if !only_pred.is_empty() || !only_gt.is_empty() {
        for id in &only_pred {
            eprintln!("only in predictions: {id}");
        }
        for id in &only_gt {
            eprintln!("only in ground truth: {id}");
        }
        return Err(CliError::Invalid(format!(
            "{} ids unmatched and excluded",
            only_pred.len() + only_gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(CliError::Invalid("no samples to evaluate".into()));
    }
    Ok(())
}
