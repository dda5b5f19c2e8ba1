//! SGD training with a step learning-rate schedule, per-exit evaluation and
//! metrics/checkpoint emission.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::label::{ModelConfig, NUM_PIPELINES};
use crate::network::{build_graph, Network};
use crate::nn::ops;
use crate::objective::matching_loss;
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "epoch,lr,train_loss,val_acc1,val_acc2,val_acc3";
pub const FINAL_CHECKPOINT: &str = "checkpoint";
const EVAL_CHUNK: usize = 128;
const AUGMENT_PAD: usize = 4;
const AUGMENT_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// (first epoch, rate) milestones.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 130,
            lr_schedule: vec![(0, 0.1), (50, 0.01), (100, 0.001)],
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            seed: 0,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self.lr_schedule.first() {
            None => return bad("learning-rate schedule is empty".into()),
            Some(&(e, _)) if e != 0 => return bad(format!("learning-rate schedule must start at epoch 0, starts at {e}")),
            _ => {}
        }
        for w in self.lr_schedule.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 >= w[0].1 {
                return bad(format!(
                    "schedule milestones must have increasing epochs and decreasing rates: {:?} then {:?}",
                    w[0], w[1]
                ));
            }
        }
        if self.lr_schedule.iter().any(|&(_, r)| !(r >= 0.0 && r.is_finite())) {
            return bad("learning rates must be finite and non-negative".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch size {} is below 2 (batch norm needs two samples)", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad(format!("momentum {} or weight decay {} out of range", self.momentum, self.weight_decay));
        }
        Ok(())
    }
}

/// Rate of the last milestone at or before `epoch`.
pub fn lr_at(schedule: &[(usize, f64)], epoch: usize) -> f64 {
    schedule
        .iter()
        .take_while(|&&(start, _)| start <= epoch)
        .last()
        .or(schedule.first())
        .map_or(0.0, |&(_, r)| r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: [f64; NUM_PIPELINES],
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.4},{:.4},{:.4}",
            self.epoch, self.lr, self.train_loss, self.val_acc[0], self.val_acc[1], self.val_acc[2]
        )
    }
}

/// Network plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: Network<f32>,
    pub model: ModelConfig,
    pub config: TrainConfig,
    velocity: Vec<Tensor<f32>>,
    frozen: Vec<bool>,
    pub epochs_completed: usize,
}

impl Trainer {
    /// Fresh network initialised from `config.seed`.
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        let net = build_graph(&model, config.seed)?;
        Self::from_parts(net, config, None, 0)
    }

    pub fn from_parts(
        net: Network<f32>,
        config: TrainConfig,
        velocity: Option<Vec<Tensor<f32>>>,
        epochs_completed: usize,
    ) -> Result<Self> {
        config.validate()?;
        let model = net
            .config()
            .cloned()
            .ok_or_else(|| Error::Config("trainer needs a network built from a model label".into()))?;
        model.validate_targets()?;
        let params = net.params();
        let velocity = match velocity {
            Some(v) => {
                if v.len() != params.len() || v.iter().zip(&params).any(|(a, p)| a.shape() != p.value.shape()) {
                    return Err(Error::Config("momentum buffers do not match the network parameters".into()));
                }
                v
            }
            None => params.iter().map(|p| Tensor::zeros_like(&p.value)).collect(),
        };
        // Parameters that no trained exit reads never move.
        let mut trained = BTreeSet::new();
        for census in net.parameter_census() {
            if model.is_trained(census.exit) {
                trained.extend(census.names);
            }
        }
        let frozen = params.iter().map(|p| !trained.contains(&p.name)).collect();
        Ok(Trainer {
            net,
            model,
            config,
            velocity,
            frozen,
            epochs_completed,
        })
    }

    pub fn velocity(&self) -> &[Tensor<f32>] {
        &self.velocity
    }

    pub fn frozen_params(&self) -> Vec<&str> {
        self.net
            .params()
            .into_iter()
            .zip(&self.frozen)
            .filter(|(_, &f)| f)
            .map(|(p, _)| p.name.as_str())
            .collect()
    }

    /// Shuffled batches for `epoch`; a trailing single sample joins the
    /// previous batch.
    pub fn batches(&self, n: usize, epoch: usize) -> Result<Vec<Vec<usize>>> {
        if n < 2 {
            return Err(Error::InvalidBatch {
                op: "train_epoch",
                detail: format!("dataset has {n} samples, batch norm needs at least 2"),
            });
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut batches: Vec<Vec<usize>> = order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let last = batches.pop().expect("non-empty");
            batches.last_mut().expect("non-empty").extend(last);
        }
        Ok(batches)
    }

    /// Momentum SGD: v <- mu v + g + lambda theta; theta <- theta - lr v.
    /// A zero rate leaves parameters and momentum untouched.
    pub fn sgd_step(&mut self, lr: f64) {
        if lr == 0.0 {
            return;
        }
        let (mu, wd, lr) = (self.config.momentum as f32, self.config.weight_decay as f32, lr as f32);
        for ((p, v), &frozen) in self.net.params_mut().into_iter().zip(&mut self.velocity).zip(&self.frozen) {
            if frozen {
                continue;
            }
            let decay = if p.decay { wd } else { 0.0 };
            for ((theta, vel), &g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(p.grad.data()) {
                *vel = mu * *vel + g + decay * *theta;
                *theta -= lr * *vel;
            }
        }
    }

    /// One pass over `data` at the scheduled rate; returns the mean loss.
    pub fn train_epoch(&mut self, data: &Dataset, epoch: usize) -> Result<f64> {
        let lr = lr_at(&self.config.lr_schedule, epoch);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        aug_rng.set_stream(AUGMENT_STREAM_BASE + epoch as u64);
        let mut weighted = 0.0;
        for (b, indices) in self.batches(data.len(), epoch)?.into_iter().enumerate() {
            let (mut x, labels) = data.batch(&indices);
            if self.config.augment {
                augment(&mut x, &mut aug_rng);
            }
            self.net.zero_grad();
            let (logits, tape) = self.net.forward_train(&[&x])?;
            let (report, grads) = matching_loss(&self.model, &logits, &labels)?;
            if !report.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    total: report.total,
                    terms: report.per_pipeline,
                });
            }
            self.net.backward(tape, &grads)?;
            self.sgd_step(lr);
            weighted += report.total * indices.len() as f64;
        }
        Ok(weighted / data.len() as f64)
    }
}

/// Random 4-pixel-padded crop and horizontal flip per sample.
fn augment(x: &mut Tensor<f32>, rng: &mut ChaCha8Rng) {
    let shape = x.shape().to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let per = c * h * w;
    for sample in x.data_mut().chunks_mut(per) {
        let dy = rng.random_range(0..=2 * AUGMENT_PAD) as isize - AUGMENT_PAD as isize;
        let dx = rng.random_range(0..=2 * AUGMENT_PAD) as isize - AUGMENT_PAD as isize;
        let flip = rng.random_bool(0.5);
        let src = sample.to_vec();
        for ch in 0..c {
            for y in 0..h {
                for xo in 0..w {
                    let xs = if flip { w - 1 - xo } else { xo };
                    let (sy, sx) = (y as isize + dy, xs as isize + dx);
                    let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                    sample[(ch * h + y) * w + xo] = if inside { src[(ch * h + sy as usize) * w + sx as usize] } else { 0.0 };
                }
            }
        }
    }
}

/// Evaluation-mode logits of every exit, visited in chunks of samples.
pub fn for_each_exit_logits(
    net: &Network<f32>,
    data: &Dataset,
    mut visit: impl FnMut(usize, &[Tensor<f32>]) -> Result<()>,
) -> Result<()> {
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, _) = data.batch(chunk);
        let logits = net.forward_eval(&[&x])?;
        visit(chunk[0], &logits)?;
    }
    Ok(())
}

/// Arg-max predictions of every exit for every sample.
pub fn predict(net: &Network<f32>, data: &Dataset) -> Result<Vec<[usize; NUM_PIPELINES]>> {
    let mut out = vec![[0; NUM_PIPELINES]; data.len()];
    for_each_exit_logits(net, data, |start, logits| {
        for (e, l) in logits.iter().enumerate() {
            let (_, k) = l.dims2("predict")?;
            for (r, row) in l.data().chunks(k).enumerate() {
                out[start + r][e] = ops::argmax(row);
            }
        }
        Ok(())
    })?;
    Ok(out)
}

/// Percent of samples whose arg-max matches the label, per exit.
pub fn evaluate(net: &Network<f32>, data: &Dataset) -> Result<[f64; NUM_PIPELINES]> {
    if data.is_empty() {
        return Err(Error::InvalidBatch {
            op: "evaluate",
            detail: "dataset is empty".into(),
        });
    }
    let preds = predict(net, data)?;
    let mut correct = [0usize; NUM_PIPELINES];
    for (p, &y) in preds.iter().zip(data.labels()) {
        for e in 0..NUM_PIPELINES {
            correct[e] += usize::from(p[e] == y);
        }
    }
    Ok(correct.map(|c| 100.0 * c as f64 / data.len() as f64))
}

pub fn checkpoint_dir_for_epoch(out: &Path, epochs_completed: usize) -> PathBuf {
    out.join(format!("checkpoint-epoch-{epochs_completed:03}"))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Existing metrics rows for epochs before `keep_before`.
fn metrics_prefix(path: &Path, keep_before: usize) -> Result<String> {
    let mut text = format!("{METRICS_HEADER}\n");
    if keep_before == 0 || !path.exists() {
        return Ok(text);
    }
    let old = fs::read_to_string(path).map_err(io(path))?;
    for line in old.lines().skip(1) {
        let epoch: Option<usize> = line.split(',').next().and_then(|e| e.parse().ok());
        if epoch.is_some_and(|e| e < keep_before) {
            text.push_str(line);
            text.push('\n');
        }
    }
    Ok(text)
}

/// Trains from `trainer.epochs_completed` up to the configured epoch count
/// (or `stop_after` completed epochs), appending to `metrics.csv` in
/// `out_dir`. Checkpoints are written before every rate drop and at the end.
pub fn run_training(
    trainer: &mut Trainer,
    train: &Dataset,
    val: &Dataset,
    out_dir: &Path,
    stop_after: Option<usize>,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let prefix = metrics_prefix(&metrics_path, trainer.epochs_completed)?;
    let mut file = fs::File::create(&metrics_path).map_err(io(&metrics_path))?;
    file.write_all(prefix.as_bytes()).map_err(io(&metrics_path))?;
    let end = stop_after.map_or(trainer.config.epochs, |s| s.min(trainer.config.epochs));
    let mut rows = Vec::new();
    for epoch in trainer.epochs_completed..end {
        let lr = lr_at(&trainer.config.lr_schedule, epoch);
        let train_loss = trainer.train_epoch(train, epoch)?;
        let val_acc = evaluate(&trainer.net, val)?;
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss,
            val_acc,
        };
        writeln!(file, "{}", m.csv_row()).map_err(io(&metrics_path))?;
        file.flush().map_err(io(&metrics_path))?;
        trainer.epochs_completed = epoch + 1;
        progress(&m);
        rows.push(m);
        let next = epoch + 1;
        if next < trainer.config.epochs && lr_at(&trainer.config.lr_schedule, next) != lr {
            checkpoint::save(&checkpoint_dir_for_epoch(out_dir, next), trainer)?;
        }
    }
    checkpoint::save(&out_dir.join(FINAL_CHECKPOINT), trainer)?;
    Ok(rows)
}
