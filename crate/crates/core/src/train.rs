//! Training loop, evaluation helper and the ablation sweep.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, collate, resize_sample, SegSample};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, MetricsReport, Record};
use crate::model::{binarize, joint_loss, Ablation, LossTerms, ModelConfig, Network, PolySchedule, Sgd};
use crate::nn::{Forward, Mode};

/// Column order of the training log.
pub const LOG_HEADER: &str = "iter,lr,wbce_main,dice_main,wbce_aux,dice_aux,total";

/// Independent generator streams. Both depend on the seed only, so every
/// architecture sees the same batches and the same augmentation draws.
const ORDER_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub terms: LossTerms,
}

impl LogRow {
    /// Shortest round-trip representation of every value.
    pub fn to_csv(&self) -> String {
        let t = &self.terms;
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.iter, self.lr, t.wbce_main, t.dice_main, t.wbce_aux, t.dice_aux, t.total
        )
    }
}

/// Where a run writes its artifacts. Absent paths are skipped.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

pub struct Trainer {
    net: Network,
    sgd: Sgd,
    schedule: PolySchedule,
    data: Vec<SegSample>,
    order_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    iter: usize,
    augment: bool,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Trainer {
    pub fn new(config: ModelConfig, data: Vec<SegSample>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let net = Network::new(config)?;
        let c = net.config().clone();
        let augment = c.augment_flip || c.augment_crop || c.augment_rotate;
        // Samples at another resolution are brought to the input size once,
        // unless the augmentation pipeline resizes them anyway.
        let data = if augment {
            data
        } else {
            data.iter().map(|s| resize_sample(s, c.input_size)).collect()
        };
        Ok(Trainer {
            sgd: Sgd::new(c.momentum),
            schedule: PolySchedule {
                lr0: c.lr0,
                power: c.poly_power,
                total_iters: c.total_iters,
            },
            order: (0..data.len()).collect(),
            cursor: data.len(),
            data,
            order_rng: stream(c.seed, ORDER_STREAM),
            augment_rng: stream(c.seed, AUGMENT_STREAM),
            iter: 0,
            augment,
            net,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.net.config().total_iters
    }

    /// Indices of the next batch, reshuffling after each pass over the data.
    fn next_batch(&mut self) -> Vec<usize> {
        let size = self.net.config().batch_size;
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.order_rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    pub fn step(&mut self) -> Result<LogRow> {
        let iter = self.iter;
        let lr = self.schedule.lr(iter);
        let batch: Vec<SegSample> = self
            .next_batch()
            .into_iter()
            .map(|i| {
                let s = &self.data[i];
                if self.augment {
                    augment(s, &self.net.config().augment_spec(), &mut self.augment_rng)
                } else {
                    s.clone()
                }
            })
            .collect();
        let refs: Vec<&SegSample> = batch.iter().collect();
        let (images, masks) = collate(&refs)?;

        let config = self.net.config();
        let (lambda, eps) = (config.lambda, config.epsilon);
        let mut f = Forward::new(&self.net.params, Mode::Train);
        let x = f.tape.constant(images);
        let trace = self.net.forward(&mut f, x)?;
        let (loss, terms) = joint_loss(&mut f.tape, trace.main_prob, trace.aux_prob, &masks, lambda, eps)?;
        if !terms.is_finite() {
            return Err(Error::NonFinite {
                iter,
                lr,
                terms: format!("{terms:?}"),
            });
        }
        let grads = f.tape.backward(loss)?;
        let param_grads = f.param_grads(&grads);
        let updates = f.take_stat_updates();
        drop(f);
        self.sgd.step(&mut self.net.params, &param_grads, lr);
        self.net.params.apply_stat_updates(&updates);
        self.iter += 1;
        Ok(LogRow { iter, lr, terms })
    }

    /// Run to completion, streaming the log and writing checkpoints.
    pub fn run(&mut self, outputs: &TrainOutputs) -> Result<Vec<LogRow>> {
        let mut log = match &outputs.log {
            Some(p) => {
                let mut w = BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?);
                writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io(p, e))?;
                Some((p.clone(), w))
            }
            None => None,
        };
        if let Some(dir) = &outputs.checkpoint_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let every = self.net.config().ckpt_every;
        let mut rows = Vec::new();
        while !self.is_done() {
            let row = self.step()?;
            if let Some((p, w)) = &mut log {
                writeln!(w, "{}", row.to_csv()).map_err(|e| Error::io(&*p, e))?;
            }
            if row.iter % 50 == 0 || self.is_done() {
                log::info!("iter {} lr {:.3e} loss {:.5}", row.iter, row.lr, row.terms.total);
            }
            rows.push(row);
            if let (Some(dir), true) = (&outputs.checkpoint_dir, every > 0 && self.iter.is_multiple_of(every)) {
                self.net
                    .to_checkpoint()
                    .save(&dir.join(format!("ckpt_{:06}.bin", self.iter)))?;
            }
        }
        if let Some((p, mut w)) = log {
            w.flush().map_err(|e| Error::io(&p, e))?;
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            self.net.to_checkpoint().save(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(rows)
    }
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn train(config: ModelConfig, data: Vec<SegSample>, outputs: &TrainOutputs) -> Result<(Network, Vec<LogRow>)> {
    let mut t = Trainer::new(config, data)?;
    let rows = t.run(outputs)?;
    Ok((t.into_network(), rows))
}

/// Binary masks at each sample's own resolution.
pub fn predict_masks(net: &Network, samples: &[SegSample]) -> Result<Vec<crate::tensor::Tensor>> {
    const CHUNK: usize = 8;
    let size = net.config().input_size;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let resized: Vec<SegSample> = chunk.iter().map(|s| resize_sample(s, size)).collect();
        let refs: Vec<&SegSample> = resized.iter().collect();
        let (images, _) = collate(&refs)?;
        let pred = net.predict(&images)?;
        for (i, s) in chunk.iter().enumerate() {
            let prob = pred.prob.batch_item(i).resized(s.height(), s.width());
            out.push(binarize(&prob));
        }
    }
    Ok(out)
}

pub fn evaluate(net: &Network, samples: &[SegSample], bins: usize) -> Result<MetricsReport> {
    let preds = predict_masks(net, samples)?;
    let records = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| Record::from_masks(s.id.clone(), s.category, p, &s.mask))
        .collect::<Result<Vec<_>>>()?;
    aggregate(records, bins)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub ja: f64,
    pub di: f64,
    /// Main-branch objective at the last iteration.
    pub final_loss: f64,
    pub final_total: f64,
}

/// Train every ablation configuration from the same seed and evaluate on
/// `eval`. `outputs_for` gives per-configuration artifact paths.
pub fn ablation_suite(
    base: &ModelConfig,
    train_set: &[SegSample],
    eval: &[SegSample],
    mut outputs_for: impl FnMut(Ablation) -> TrainOutputs,
) -> Result<Vec<AblationRow>> {
    Ablation::ALL
        .iter()
        .map(|&ab| {
            let config = ab.apply(base);
            let lambda = config.lambda;
            let (net, rows) = train(config, train_set.to_vec(), &outputs_for(ab))?;
            let last = rows.last().expect("at least one iteration").terms;
            let report = evaluate(&net, eval, 10)?;
            Ok(AblationRow {
                ablation: ab,
                ja: report.overall.ja,
                di: report.overall.di,
                final_loss: last.main(lambda),
                final_total: last.total,
            })
        })
        .collect()
}

/// Fixed-width table in table order, JA and DI in percent.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<22} {:>6} {:>6} {:>12}\n", "method", "JA", "DI", "final_loss");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<22} {:>6.1} {:>6.1} {:>12.6}",
            r.ablation.label(),
            r.ja * 100.0,
            r.di * 100.0,
            r.final_loss
        );
    }
    s
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut s = String::from("method,JA,DI,final_loss,final_total\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:?},{:?},{:?},{:?}",
            r.ablation.label(),
            r.ja,
            r.di,
            r.final_loss,
            r.final_total
        );
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
