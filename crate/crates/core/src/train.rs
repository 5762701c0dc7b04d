//! Per-bag training loop, evaluation, cross-validation and the k sweep.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Bag, Dataset};
use crate::error::{Error, Result};
use crate::graph::EdgeVariant;
use crate::metrics::{MetricsReport, Summary};
use crate::model::{Architecture, Mode, Model, ModelConfig, Readout};
use crate::optim::{Adam, AdamConfig};
use crate::parallel::{self, Execution};
use crate::real::{DType, Real};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Training hyperparameters. Defaults follow the reference setup:
/// Adam at lr 1e-4 with weight decay 1e-5, k = 6, dropout 0.3, one bag
/// per step, 100 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub k: usize,
    pub dropout_p: f64,
    /// Bags per optimizer step; only 1 is supported.
    pub batch_size: usize,
    pub seed: u64,
    pub policy: EdgeVariant,
    pub readout: Readout,
    pub arch: Architecture,
    pub leaky_slope: f64,
    pub d_model: usize,
    pub attn_hidden: usize,
    pub exclude_self: bool,
    pub clamp_k: bool,
    /// Apply weight decay AdamW-style instead of as an L2 gradient term.
    pub decoupled_weight_decay: bool,
    pub zero_init_classifier: bool,
    pub precision: Precision,
}

/// Arithmetic used for training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Usage(format!("unknown precision `{other}` (f32, f64)"))),
        }
    }
}

impl From<DType> for Precision {
    fn from(d: DType) -> Self {
        match d {
            DType::F32 => Precision::F32,
            DType::F64 => Precision::F64,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let a = AdamConfig::default();
        Self {
            epochs: 100,
            lr: a.lr,
            weight_decay: a.weight_decay,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            k: m.k,
            dropout_p: m.dropout_p,
            batch_size: 1,
            seed: 0,
            policy: m.policy,
            readout: m.readout,
            arch: m.arch,
            leaky_slope: m.leaky_slope,
            d_model: m.d_model,
            attn_hidden: m.attn_hidden,
            exclude_self: m.exclude_self,
            clamp_k: m.clamp_k,
            decoupled_weight_decay: a.decoupled,
            zero_init_classifier: m.zero_init_classifier,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::param("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::param("dropout must lie in [0,1)"));
        }
        if self.batch_size != 1 {
            return Err(Error::param("batch size must be 1"));
        }
        if self.epochs == 0 {
            return Err(Error::param("at least one epoch required"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::param("weight decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::param("Adam betas must lie in [0,1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::param("Adam eps must be positive"));
        }
        Ok(())
    }

    pub fn model_config(&self, d_in: usize, n_classes: usize) -> ModelConfig {
        ModelConfig {
            arch: self.arch,
            d_in,
            d_model: self.d_model,
            n_classes,
            k: self.k,
            policy: self.policy,
            leaky_slope: self.leaky_slope,
            readout: self.readout,
            dropout_p: self.dropout_p,
            exclude_self: self.exclude_self,
            clamp_k: self.clamp_k,
            attn_hidden: self.attn_hidden,
            zero_init_classifier: self.zero_init_classifier,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            decoupled: self.decoupled_weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` without a validation set.
    pub val_auc: Option<f64>,
    pub seconds: f64,
}

pub fn write_epoch_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_auc", "seconds"])?;
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            format!("{:.6}", e.train_loss),
            e.val_auc.map(|a| format!("{a:.6}")).unwrap_or_default(),
            format!("{:.3}", e.seconds),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Model plus optimizer state, stepping one bag at a time.
pub struct Trainer<T> {
    pub model: Model<T>,
    optimizer: Adam<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, adam: AdamConfig) -> Result<Self> {
        let optimizer = Adam::new(adam, &model.params)?;
        Ok(Self { model, optimizer })
    }

    /// Loss and parameter gradients for one bag.
    pub fn loss_and_grads(
        &self,
        features: &Tensor<T>,
        label: usize,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape);
        let x = tape.constant(features.clone());
        let out = self.model.forward(&mut tape, &bound, x, features, mode, rng)?;
        let loss = tape.cross_entropy(out.logits, label)?;
        let value = tape.value(loss).data()[0].as_f64();
        let mut grads = tape.backward(loss)?;
        let shapes: Vec<Vec<usize>> = self.model.params.iter().map(|(_, t)| t.shape().to_vec()).collect();
        let grads = bound
            .vars()
            .zip(shapes)
            .map(|(v, s)| grads.take(v).unwrap_or_else(|| Tensor::zeros(&s)))
            .collect();
        Ok((value, grads))
    }

    /// One training-mode optimizer step; returns the loss before the update.
    pub fn step(&mut self, features: &Tensor<T>, label: usize, rng: &mut Rng) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(features, label, Mode::Train, rng)?;
        self.optimizer.step(&mut self.model.params, &grads)?;
        Ok(loss)
    }

    pub fn steps_taken(&self) -> u64 {
        self.optimizer.steps_taken()
    }
}

/// Per-fold seeds: model init, dropout stream and per-epoch shuffles all
/// derive from `(seed, fold)`.
#[derive(Debug, Clone, Copy)]
pub struct FoldSeeds {
    base: u64,
}

impl FoldSeeds {
    pub fn new(seed: u64, fold: usize) -> Self {
        Self {
            base: Rng::derive(seed, fold as u64).next_u64(),
        }
    }
    pub fn init(&self) -> u64 {
        Rng::derive(self.base, 0).next_u64()
    }
    pub fn dropout(&self) -> Rng {
        Rng::derive(self.base, 1)
    }
    pub fn shuffle(&self, epoch: usize) -> Rng {
        Rng::derive(self.base, 2 + epoch as u64)
    }
}

/// Result of fitting one model.
#[derive(Debug, Clone)]
pub struct FitOutcome<T> {
    /// Parameters at the epoch with the highest validation AUC (the last
    /// epoch when no validation set is given).
    pub best: Model<T>,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub log: Vec<EpochLog>,
}

fn cast_bags<T: Real>(bags: &[&Bag]) -> Vec<(Tensor<T>, usize)> {
    bags.iter().map(|b| (b.features.cast(), b.label)).collect()
}

/// Trains from scratch on `train`, selecting the best epoch on `val`.
pub fn fit<T: Real>(
    config: &TrainConfig,
    model_config: ModelConfig,
    train: &[&Bag],
    val: &[&Bag],
    seeds: FoldSeeds,
) -> Result<FitOutcome<T>> {
    config.validate()?;
    crate::alloc::retain_freed_memory();
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let model = Model::<T>::init(model_config, seeds.init())?;
    let mut trainer = Trainer::new(model, config.adam())?;
    let data = cast_bags::<T>(train);
    let val_data = cast_bags::<T>(val);
    let mut dropout_rng = seeds.dropout();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(Model<T>, usize, Option<f64>)> = None;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.sort_unstable();
        seeds.shuffle(epoch).shuffle(&mut order);
        let mut total = 0.0;
        for &i in &order {
            let (x, y) = &data[i];
            total += trainer.step(x, *y, &mut dropout_rng)?;
        }
        let val_auc = if val_data.is_empty() {
            None
        } else {
            let probs = predict_many(&trainer.model, &val_data, Execution::Sequential)?;
            let labels: Vec<usize> = val_data.iter().map(|(_, y)| *y).collect();
            crate::metrics::macro_ovr_auc(&probs, &labels, trainer.model.config.n_classes).0
        };
        let seconds = start.elapsed().as_secs_f64();
        let train_loss = total / data.len() as f64;
        log::debug!("epoch {epoch}: loss {train_loss:.4} val_auc {val_auc:?} ({seconds:.1}s)");
        log.push(EpochLog {
            epoch,
            train_loss,
            val_auc,
            seconds,
        });
        let improved = match (&best, val_auc) {
            (None, _) => true,
            (Some((_, _, Some(b))), Some(a)) => a > *b,
            (Some((_, _, None)), Some(_)) => true,
            (Some(_), None) => val_data.is_empty(),
        };
        if improved {
            best = Some((trainer.model.clone(), epoch, val_auc));
        }
    }
    let (best, best_epoch, best_val_auc) = best.expect("at least one epoch");
    Ok(FitOutcome {
        best,
        best_epoch,
        best_val_auc,
        log,
    })
}

fn predict_many<T: Real>(
    model: &Model<T>,
    bags: &[(Tensor<T>, usize)],
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    parallel::try_map(exec, bags, |(x, _)| predict_tensor(model, x))
}

fn predict_tensor<T: Real>(model: &Model<T>, raw: &Tensor<T>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let x = tape.constant(raw.clone());
    let mut rng = Rng::seeded(0);
    let out = model.forward(&mut tape, &bound, x, raw, Mode::Eval, &mut rng)?;
    let probs = tape.row_softmax(out.logits)?;
    Ok(tape.value(probs).data().iter().map(|v| v.as_f64()).collect())
}

/// Eval-mode metrics of `model` on `bags`; bags are scored in parallel
/// under [`Execution::Parallel`].
pub fn evaluate<T: Real>(model: &Model<T>, bags: &[&Bag], exec: Execution) -> Result<MetricsReport> {
    if let Some(b) = bags.iter().find(|b| b.d_in() != model.config.d_in) {
        return Err(Error::dim(format!(
            "bag {} has {} feature columns, checkpoint expects {}",
            b.id,
            b.d_in(),
            model.config.d_in
        )));
    }
    let data = cast_bags::<T>(bags);
    let probs = predict_many(model, &data, exec)?;
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    MetricsReport::compute(&probs, &labels, model.config.n_classes)
}

/// Validation fold paired with `test_fold`: the next fold cyclically, or
/// the test fold itself with only two folds.
pub fn validation_fold(test_fold: usize, n_folds: usize) -> usize {
    if n_folds <= 2 {
        test_fold
    } else {
        (test_fold + 1) % n_folds
    }
}

/// Train/validation/test partition for one held-out fold.
pub fn split(dataset: &Dataset, test_fold: usize) -> Result<(Vec<&Bag>, Vec<&Bag>, Vec<&Bag>)> {
    let f = dataset.n_folds();
    if f < 2 {
        return Err(Error::param("cross-validation needs at least two folds"));
    }
    if test_fold >= f {
        return Err(Error::param(format!("fold {test_fold} out of range 0..{f}")));
    }
    let val_fold = validation_fold(test_fold, f);
    let mut train = Vec::new();
    for (b, &k) in dataset.bags.iter().zip(&dataset.folds) {
        if k != test_fold && k != val_fold {
            train.push(b);
        }
    }
    Ok((train, dataset.fold_members(val_fold), dataset.fold_members(test_fold)))
}

/// One held-out fold: trained model and its test metrics.
#[derive(Debug, Clone)]
pub struct FoldRun<T> {
    pub fold: usize,
    pub fit: FitOutcome<T>,
    pub test: MetricsReport,
    pub seconds: f64,
}

pub fn train<T: Real>(dataset: &Dataset, test_fold: usize, config: &TrainConfig) -> Result<FoldRun<T>> {
    let start = Instant::now();
    let (train, val, test) = split(dataset, test_fold)?;
    let model_config = config.model_config(dataset.d_in(), dataset.n_classes);
    model_config.validate()?;
    if !model_config.arch.is_graph() && config.policy != EdgeVariant::Wikg {
        return Err(Error::Usage(format!(
            "edge policy {} applies only to the graph model",
            config.policy.name()
        )));
    }
    if model_config.arch.is_graph() {
        model_config.policy_for(dataset.min_bag_size())?;
    }
    let fit = fit::<T>(config, model_config, &train, &val, FoldSeeds::new(config.seed, test_fold))?;
    let test = evaluate(&fit.best, &test, Execution::Sequential)?;
    Ok(FoldRun {
        fold: test_fold,
        fit,
        test,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub metrics: MetricsReport,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub param_count: usize,
    pub seconds: f64,
    pub log: Vec<EpochLog>,
}

impl<T: Real> From<&FoldRun<T>> for FoldReport {
    fn from(r: &FoldRun<T>) -> Self {
        Self {
            fold: r.fold,
            metrics: r.test.clone(),
            best_epoch: r.fit.best_epoch,
            best_val_auc: r.fit.best_val_auc,
            param_count: r.fit.best.param_count(),
            seconds: r.seconds,
            log: r.fit.log.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: Summary,
    pub auc: Summary,
    pub weighted_f1: Summary,
}

impl MetricSummary {
    pub fn from_reports(reports: &[MetricsReport]) -> Self {
        let pick = |f: fn(&MetricsReport) -> f64| Summary::of(&reports.iter().map(f).collect::<Vec<_>>());
        Self {
            accuracy: pick(|r| r.accuracy),
            auc: pick(|r| r.auc),
            weighted_f1: pick(|r| r.weighted_f1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub config: TrainConfig,
    pub folds: Vec<FoldReport>,
    /// Mean and sample standard deviation across folds.
    pub summary: MetricSummary,
}

impl CvReport {
    pub fn from_folds(config: TrainConfig, folds: Vec<FoldReport>) -> Self {
        let metrics: Vec<MetricsReport> = folds.iter().map(|f| f.metrics.clone()).collect();
        Self {
            config,
            summary: MetricSummary::from_reports(&metrics),
            folds,
        }
    }

    /// Recomputes the summary from the stored per-fold metrics.
    pub fn recomputed_summary(&self) -> MetricSummary {
        let metrics: Vec<MetricsReport> = self.folds.iter().map(|f| f.metrics.clone()).collect();
        MetricSummary::from_reports(&metrics)
    }

    pub fn table(&self) -> String {
        let s = &self.summary;
        let pct = |x: Summary| format!("{:.2} ± {:.2}", 100.0 * x.mean, 100.0 * x.std);
        let mut out = String::from("fold  accuracy  auc  weighted_f1\n");
        for f in &self.folds {
            out.push_str(&format!(
                "{}  {:.2}  {:.2}  {:.2}\n",
                f.fold,
                100.0 * f.metrics.accuracy,
                100.0 * f.metrics.auc,
                100.0 * f.metrics.weighted_f1
            ));
        }
        out.push_str(&format!(
            "mean ± sample std (%)  accuracy {}  auc {}  weighted_f1 {}\n",
            pct(s.accuracy),
            pct(s.auc),
            pct(s.weighted_f1)
        ));
        out
    }
}

fn run_folds<T: Real>(dataset: &Dataset, config: &TrainConfig, exec: Execution) -> Result<Vec<FoldReport>> {
    let folds: Vec<usize> = (0..dataset.n_folds()).collect();
    parallel::try_map(exec, &folds, |&f| {
        let run = train::<T>(dataset, f, config)?;
        log::info!(
            "fold {f}: auc {:.4} acc {:.4} ({:.1}s)",
            run.test.auc,
            run.test.accuracy,
            run.seconds
        );
        Ok(FoldReport::from(&run))
    })
}

/// Trains and tests every fold; folds run in parallel under
/// [`Execution::Parallel`].
pub fn cross_validate(dataset: &Dataset, config: &TrainConfig, exec: Execution) -> Result<CvReport> {
    config.validate()?;
    let folds = match config.precision {
        Precision::F32 => run_folds::<f32>(dataset, config, exec)?,
        Precision::F64 => run_folds::<f64>(dataset, config, exec)?,
    };
    Ok(CvReport::from_folds(config.clone(), folds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub summary: MetricSummary,
}

/// One cross-validation per neighbour count.
pub fn neighbor_sweep(
    dataset: &Dataset,
    config: &TrainConfig,
    k_values: &[usize],
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    if k_values.is_empty() {
        return Err(Error::param("sweep needs at least one k"));
    }
    if !config.arch.is_graph() {
        return Err(Error::Usage("the k sweep applies only to the graph model".into()));
    }
    let min_n = dataset.min_bag_size();
    if !config.clamp_k {
        if let Some(&k) = k_values.iter().find(|&&k| k > min_n) {
            return Err(Error::param(format!(
                "k = {k} exceeds the smallest bag ({min_n} instances); enable clamping"
            )));
        }
    }
    k_values
        .iter()
        .map(|&k| {
            let cfg = TrainConfig { k, ..config.clone() };
            let report = cross_validate(dataset, &cfg, exec)?;
            Ok(SweepRow {
                k,
                summary: report.summary,
            })
        })
        .collect()
}

pub const SWEEP_HEADER: [&str; 7] = [
    "k",
    "auc_mean",
    "auc_std",
    "accuracy_mean",
    "accuracy_std",
    "weighted_f1_mean",
    "weighted_f1_std",
];

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        let s = &r.summary;
        w.write_record([
            r.k.to_string(),
            format!("{:.6}", s.auc.mean),
            format!("{:.6}", s.auc.std),
            format!("{:.6}", s.accuracy.mean),
            format!("{:.6}", s.accuracy.std),
            format!("{:.6}", s.weighted_f1.mean),
            format!("{:.6}", s.weighted_f1.std),
        ])?;
    }
    w.flush().map_err(|e| Error::Serde(e.to_string()))
}

/// Loss of the very first training step on `bag` with a freshly
/// initialised model.
pub fn first_step_loss<T: Real>(model_config: ModelConfig, bag: &Bag, seed: u64) -> Result<f64> {
    let model = Model::<T>::init(model_config, seed)?;
    let trainer = Trainer::new(model, AdamConfig::default())?;
    let mut rng = Rng::derive(seed, 1);
    let (loss, _) = trainer.loss_and_grads(&bag.features.cast(), bag.label, Mode::Train, &mut rng)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CooccurrenceSpec;

    fn tiny_dataset(n_bags: usize, folds: usize) -> Dataset {
        CooccurrenceSpec {
            n_bags,
            min_instances: 8,
            max_instances: 12,
            d_in: 16,
            min_key: 2,
            max_key: 3,
            seed: 3,
            ..CooccurrenceSpec::default()
        }
        .dataset(folds)
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            d_model: 8,
            k: 3,
            attn_hidden: 4,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_match_reference_setup() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.k, c.batch_size), (100, 6, 1));
        assert_eq!((c.lr, c.weight_decay, c.dropout_p), (1e-4, 1e-5, 0.3));
        assert_eq!((c.beta1, c.beta2, c.eps), (0.9, 0.999, 1e-8));
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        for c in [
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { dropout_p: 1.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 2, ..TrainConfig::default() },
        ] {
            assert!(matches!(c.validate(), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn validation_fold_choice() {
        assert_eq!(validation_fold(3, 4), 0);
        assert_eq!(validation_fold(0, 4), 1);
        assert_eq!(validation_fold(1, 2), 1);
    }

    #[test]
    fn split_partitions_dataset() {
        let ds = tiny_dataset(16, 4);
        let (tr, va, te) = split(&ds, 2).unwrap();
        assert_eq!(tr.len() + va.len() + te.len(), 16);
        assert!(split(&ds, 4).is_err());
    }

    #[test]
    fn same_seed_same_curves() {
        let ds = tiny_dataset(16, 4);
        let cfg = tiny_config();
        let a = train::<f64>(&ds, 0, &cfg).unwrap();
        let b = train::<f64>(&ds, 0, &cfg).unwrap();
        let la: Vec<f64> = a.fit.log.iter().map(|e| e.train_loss).collect();
        let lb: Vec<f64> = b.fit.log.iter().map(|e| e.train_loss).collect();
        assert_eq!(la, lb);
        assert_eq!(a.fit.best, b.fit.best);
    }

    #[test]
    fn cv_fold_parallelism_is_invisible() {
        let ds = tiny_dataset(16, 4);
        let cfg = TrainConfig { epochs: 2, ..tiny_config() };
        let seq = cross_validate(&ds, &cfg, Execution::Sequential).unwrap();
        let par = cross_validate(&ds, &cfg, Execution::Parallel).unwrap();
        let strip = |r: &CvReport| r.folds.iter().map(|f| f.metrics.clone()).collect::<Vec<_>>();
        assert_eq!(strip(&seq), strip(&par));
        assert_eq!(seq.summary.auc, seq.recomputed_summary().auc);
    }

    #[test]
    fn sweep_rejects_large_k_without_clamp() {
        let ds = tiny_dataset(16, 4);
        let err = neighbor_sweep(&ds, &tiny_config(), &[50], Execution::Sequential).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }

    #[test]
    fn sweep_csv_schema() {
        let s = Summary { mean: 0.5, std: 0.1 };
        let rows = vec![
            SweepRow { k: 2, summary: MetricSummary { accuracy: s, auc: s, weighted_f1: s } },
            SweepRow { k: 4, summary: MetricSummary { accuracy: s, auc: s, weighted_f1: s } },
        ];
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], SWEEP_HEADER.join(","));
    }

    #[test]
    fn policy_with_baseline_is_usage_error() {
        let ds = tiny_dataset(16, 4);
        let cfg = TrainConfig {
            arch: Architecture::MeanPool,
            policy: EdgeVariant::KnnCos,
            ..tiny_config()
        };
        assert!(matches!(train::<f32>(&ds, 0, &cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn epoch_log_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        write_epoch_log(
            &p,
            &[EpochLog { epoch: 1, train_loss: 0.5, val_auc: Some(0.75), seconds: 1.0 }],
        )
        .unwrap();
        let s = std::fs::read_to_string(p).unwrap();
        assert!(s.starts_with("epoch,train_loss,val_auc,seconds\n1,0.500000,0.750000,"));
    }
}
