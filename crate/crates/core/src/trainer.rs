//! Optimization loop: Adam, plateau learning-rate decay, checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{validate, TableSample};
use crate::error::{Error, Result};
use crate::features::PreparedInputs;
use crate::head::{self, LossWeights};
use crate::metrics::{self, MetricsReport};
use crate::model::{self, ModelConfig};
use crate::par::Exec;
use crate::tensor::{ModelParams, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub plateau_patience: usize,
    pub lr_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Monte Carlo partners per anchor and relation.
    pub sample_size: usize,
    pub threshold: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            plateau_patience: 10,
            lr_decay: 0.1,
            epochs: 200,
            seed: 0,
            weights: LossWeights::default(),
            sample_size: 10,
            threshold: 0.5,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Usage(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::Usage(format!("lr decay must lie in (0, 1), got {}", self.lr_decay)));
        }
        if self.sample_size < 2 {
            return Err(Error::Usage("sample size must be at least 2".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Usage(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        self.model.validate()
    }

    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        let mut model_kv = BTreeMap::new();
        for (k, v) in kv {
            let float = || -> Result<f64> {
                v.parse().map_err(|_| Error::Usage(format!("{k} expects a number, got {v:?}")))
            };
            let int = || -> Result<usize> {
                v.parse().map_err(|_| Error::Usage(format!("{k} expects an integer, got {v:?}")))
            };
            match k.as_str() {
                "lr" => self.lr = float()?,
                "patience" => self.plateau_patience = int()?,
                "lr_decay" => self.lr_decay = float()?,
                "epochs" => self.epochs = int()?,
                "seed" => self.seed = int()? as u64,
                "lambda1" => self.weights.lambda_class = float()?,
                "lambda2" => self.weights.lambda_con = float()?,
                "margin" => self.weights.margin = float()?,
                "samples" => self.sample_size = int()?,
                "threshold" => self.threshold = float()?,
                _ => {
                    model_kv.insert(k.clone(), v.clone());
                }
            }
        }
        self.model.apply_kv(&model_kv)
    }
}

/// Tracks the best loss and decides when to decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    best: f64,
    stale: usize,
}

impl Default for Plateau {
    fn default() -> Self {
        Plateau {
            best: f64::INFINITY,
            stale: 0,
        }
    }
}

impl Plateau {
    /// Records one epoch loss; true when the rate should decay now.
    pub fn observe(&mut self, loss: f64, patience: usize) -> bool {
        if loss < self.best - 1e-6 {
            self.best = loss;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= patience.max(1) {
            self.stale = 0;
            return true;
        }
        false
    }
}

/// Learning rate after replaying `history` from `cfg.lr`.
pub fn lr_step(history: &[f64], cfg: &TrainConfig) -> f64 {
    let mut plateau = Plateau::default();
    let mut lr = cfg.lr;
    for &loss in history {
        if plateau.observe(loss, cfg.plateau_patience) {
            lr *= cfg.lr_decay;
        }
    }
    lr
}

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn update(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_loss: Option<f64>,
    pub val_f1: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        write!(
            f,
            "epoch={} loss={:.6} lr={:e} val_loss={} val_f1={}",
            self.epoch,
            self.loss,
            self.lr,
            opt(self.val_loss),
            opt(self.val_f1)
        )
    }
}

pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub params: ModelParams,
    /// Parameters at the best validation (or training) loss.
    pub best: ModelParams,
    pub log: Vec<EpochLog>,
}

fn mix(seed: u64, a: usize, b: usize) -> u64 {
    seed ^ (a as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (b as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

/// Sampled loss of one table and its gradients.
pub fn loss_and_grads(
    params: &ModelParams,
    cfg: &TrainConfig,
    inputs: &PreparedInputs,
    sample: &TableSample,
    seed: u64,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let loss = sample_loss(&mut tape, params, cfg, inputs, sample, seed)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?.for_params(params);
    Ok((value, grads))
}

fn sample_loss(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &TrainConfig,
    inputs: &PreparedInputs,
    sample: &TableSample,
    seed: u64,
) -> Result<crate::tensor::Var> {
    let (e, _) = model::encode(tape, params, &cfg.model, inputs)?;
    let samples = head::monte_carlo_sample(&sample.relations, cfg.sample_size, seed)?;
    head::sampled_loss(tape, params, e, &samples, cfg.weights)
}

/// Mean sampled loss with fixed per-sample seeds; no gradients.
pub fn dataset_loss(params: &ModelParams, cfg: &TrainConfig, data: &[(PreparedInputs, &TableSample)], exec: Exec) -> Result<f64> {
    let losses: Vec<Result<f64>> = exec.map_range(data.len(), |i| {
        let mut tape = Tape::new();
        let l = sample_loss(&mut tape, params, cfg, &data[i].0, data[i].1, mix(cfg.seed, usize::MAX, i))?;
        Ok(tape.value(l).data()[0])
    });
    let total: f64 = losses.into_iter().sum::<Result<f64>>()?;
    Ok(total / data.len() as f64)
}

fn prepare<'a>(samples: &'a [TableSample], cfg: &TrainConfig, exec: Exec) -> Result<Vec<(PreparedInputs, &'a TableSample)>> {
    for (i, s) in samples.iter().enumerate() {
        if let Some(v) = validate(s).first() {
            return Err(Error::data(format!("sample {i} is malformed: {v}")));
        }
    }
    let prepared: Vec<Result<PreparedInputs>> = exec.map(samples, |s| PreparedInputs::new(s, &cfg.model.features));
    prepared.into_iter().zip(samples).map(|(p, s)| Ok((p?, s))).collect()
}

/// Trains from a seeded initialization. When `checkpoint_dir` is given, the
/// best parameters are written there as `model.ncgm` with `model.cfg`.
pub fn train(
    dataset: &[TableSample],
    val: &[TableSample],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    exec: Exec,
) -> Result<TrainOutcome> {
    let params = model::init_params(&cfg.model, cfg.seed)?;
    train_from(params, dataset, val, cfg, checkpoint_dir, exec, |_| {})
}

#[allow(clippy::too_many_arguments)]
pub fn train_from(
    mut params: ModelParams,
    dataset: &[TableSample],
    val: &[TableSample],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let train_data = prepare(dataset, cfg, exec)?;
    let val_data = prepare(val, cfg, exec)?;
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        cfg.model.save(dir.join("model.cfg"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::default();
    let mut plateau = Plateau::default();
    let mut lr = cfg.lr;
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (inputs, sample) = &train_data[i];
            let (loss, grads) = loss_and_grads(&params, cfg, inputs, sample, mix(cfg.seed, epoch, i))?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("loss is {loss} at epoch {epoch}, sample {i}")));
            }
            total += loss;
            adam.update(&mut params, &grads, lr);
            if !params.all_finite() {
                return Err(Error::Numerical(format!(
                    "parameters became non-finite at epoch {epoch}, sample {i}"
                )));
            }
        }
        let loss = total / train_data.len() as f64;
        let (val_loss, val_f1) = if val_data.is_empty() {
            (None, None)
        } else {
            let vl = dataset_loss(&params, cfg, &val_data, exec)?;
            let report = evaluate_prepared(&params, &cfg.model, &val_data, cfg.threshold, exec)?;
            (Some(vl), Some(report.overall_f1()))
        };
        let entry = EpochLog {
            epoch,
            loss,
            lr,
            val_loss,
            val_f1,
        };
        on_epoch(&entry);
        log.push(entry);

        let watched = val_loss.unwrap_or(loss);
        if watched < best_loss {
            best_loss = watched;
            best = params.clone();
            if let Some(dir) = checkpoint_dir {
                best.save(dir.join("model.ncgm"))?;
            }
        }
        if plateau.observe(loss, cfg.plateau_patience) {
            lr *= cfg.lr_decay;
        }
    }
    if cfg.epochs == 0 {
        if let Some(dir) = checkpoint_dir {
            best.save(dir.join("model.ncgm"))?;
        }
    }
    Ok(TrainOutcome { params, best, log })
}

fn evaluate_prepared(
    params: &ModelParams,
    cfg: &ModelConfig,
    data: &[(PreparedInputs, &TableSample)],
    threshold: f64,
    exec: Exec,
) -> Result<MetricsReport> {
    let preds: Vec<Result<model::Prediction>> = exec.map_range(data.len(), |i| model::predict(params, cfg, &data[i].0));
    let mut pairs = Vec::with_capacity(data.len());
    for (p, (_, s)) in preds.into_iter().zip(data) {
        pairs.push((p?.to_relations(threshold), *s));
    }
    metrics::report_from_relations(&pairs, threshold, exec)
}

/// Full unsampled inference, post-processing and every metric.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    dataset: &[TableSample],
    threshold: f64,
    exec: Exec,
) -> Result<MetricsReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Usage(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let tc = TrainConfig {
        model: cfg.clone(),
        ..TrainConfig::default()
    };
    let data = prepare(dataset, &tc, exec)?;
    evaluate_prepared(params, cfg, &data, threshold, exec)
}

/// One row of a block-count sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub layers: usize,
    pub train_f1: f64,
    pub test_f1: f64,
    pub final_loss: f64,
}

/// Trains one model per block count and scores it.
pub fn block_sweep(
    layers: &[usize],
    train_set: &[TableSample],
    test_set: &[TableSample],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(layers.len());
    for &l in layers {
        let mut c = cfg.clone();
        c.model.collab.layers = l;
        let out = train(train_set, &[], &c, None, exec)?;
        let train_f1 = evaluate(&out.params, &c.model, train_set, c.threshold, exec)?.overall_f1();
        let test_f1 = if test_set.is_empty() {
            f64::NAN
        } else {
            evaluate(&out.params, &c.model, test_set, c.threshold, exec)?.overall_f1()
        };
        rows.push(SweepRow {
            layers: l,
            train_f1,
            test_f1,
            final_loss: out.log.last().map_or(f64::NAN, |e| e.loss),
        });
    }
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = format!("{:>6}  {:>8}  {:>8}  {:>10}\n", "blocks", "train_f1", "test_f1", "final_loss");
    for r in rows {
        out.push_str(&format!(
            "{:>6}  {:>8.4}  {:>8.4}  {:>10.6}\n",
            r.layers, r.train_f1, r.test_f1, r.final_loss
        ));
    }
    out
}
