//! Training loop, loss composition, evaluation metrics and the ablation grid.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var, EPSILON_NORM};
use crate::datagen::{self, ChipSpec, DatagenError, Dataset, Sample, Split};
use crate::io::write_atomic;
use crate::model::{argmax, cam_mask, Checkpoint, ModelError, Network, NetworkConfig, NetworkVars};
use crate::nil::{nil_loss, NilError};
use crate::proxy::{init_proxies, BatchEntry, BatchGroup, ProxyBank, ProxyConfig, ProxyError};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.json";
pub const LOG_FILE: &str = "log.jsonl";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("proxies are not initialized")]
    Uninitialized,
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("checkpoint does not match dataset: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Proxy(#[from] ProxyError),
    #[error(transparent)]
    Nil(#[from] NilError),
    #[error(transparent)]
    Data(#[from] DatagenError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which loss terms are active after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    /// Cross-entropy only.
    V1,
    /// Cross-entropy + noise-invariance loss over frozen batch-mean prototypes.
    V2,
    /// Cross-entropy + proxy loss + supervised contrastive loss.
    V3,
    /// Cross-entropy + proxy loss + noise-invariance loss.
    #[serde(rename = "FULL")]
    Full,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::V1, Mode::V2, Mode::V3, Mode::Full];

    fn uses_proxies(self) -> bool {
        matches!(self, Mode::V3 | Mode::Full)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::V1 => "V1",
            Mode::V2 => "V2",
            Mode::V3 => "V3",
            Mode::Full => "FULL",
        })
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "V1" => Ok(Mode::V1),
            "V2" => Ok(Mode::V2),
            "V3" => Ok(Mode::V3),
            "FULL" | "OURS" => Ok(Mode::Full),
            _ => Err(format!("unknown mode `{s}` (expected V1, V2, V3 or FULL)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Epochs between 10x learning-rate decays.
    pub lr_step: usize,
    pub k_n: usize,
    pub rho: f64,
    pub epsilon: f64,
    pub alpha: f64,
    /// Accepted for configuration compatibility; no loss term uses it.
    pub margin: f64,
    pub contrastive_temperature: f64,
    pub hidden_channels: usize,
    pub feature_channels: usize,
    pub input_scale: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            warmup_epochs: 10,
            batch_size: 32,
            lr0: 0.01,
            lr_step: 25,
            k_n: 3,
            rho: 2.0,
            epsilon: 0.05,
            alpha: 1.0,
            margin: 0.3,
            contrastive_temperature: 0.5,
            hidden_channels: 8,
            feature_channels: 16,
            input_scale: 8.0,
            mode: Mode::Full,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs < self.warmup_epochs {
            return bad("epochs must be at least warmup_epochs");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if self.lr_step == 0 {
            return bad("lr_step must be positive");
        }
        if self.k_n == 0 {
            return bad("k_n must be at least 1");
        }
        if self.rho < 0.0 || self.epsilon <= 0.0 || !(0.0..=1.0).contains(&self.alpha) {
            return bad("need rho >= 0, epsilon > 0 and alpha in [0, 1]");
        }
        if self.contrastive_temperature <= 0.0 {
            return bad("contrastive_temperature must be positive");
        }
        Ok(())
    }

    /// `lr0 * 0.1^floor(epoch / lr_step)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 / 10f64.powi((epoch / self.lr_step) as i32)
    }

    pub fn proxy_config(&self) -> ProxyConfig {
        ProxyConfig {
            rho: self.rho,
            epsilon: self.epsilon,
            alpha: self.alpha,
        }
    }

    pub fn network_config(&self, side: usize, num_classes: usize) -> NetworkConfig {
        NetworkConfig {
            side,
            num_classes,
            hidden_channels: self.hidden_channels,
            feature_channels: self.feature_channels,
            input_scale: self.input_scale,
        }
    }
}

/// Mean cross-entropy `-log softmax(z)[y]` over the batch.
pub fn ce_loss(tape: &mut Tape, logits: &[Var], labels: &[usize]) -> Result<Var, TrainError> {
    assert_eq!(logits.len(), labels.len(), "one label per logit row");
    if logits.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let mut terms = Vec::with_capacity(logits.len());
    for (z, y) in logits.iter().zip(labels) {
        let c = tape.value(*z).len();
        if *y >= c {
            return Err(TrainError::LabelOutOfRange {
                label: *y,
                num_classes: c,
            });
        }
        let lse = tape.logsumexp(*z);
        let zy = tape.index(*z, *y);
        terms.push(tape.sub(lse, zy));
    }
    let sum = tape.add_all(&terms);
    Ok(tape.scale(sum, 1.0 / logits.len() as f64))
}

/// Supervised contrastive loss over L2-normalized pooled features. Anchors
/// without a same-class partner are skipped; the result is the mean over the
/// remaining anchors (0 if none).
pub fn supcon_loss(
    tape: &mut Tape,
    features: &[Var],
    labels: &[usize],
    temperature: f64,
) -> Result<Var, TrainError> {
    let z = features
        .iter()
        .map(|f| tape.l2n(*f))
        .collect::<Result<Vec<_>, _>>()?;
    let mut terms = Vec::new();
    for a in 0..z.len() {
        let positives: Vec<usize> = (0..z.len()).filter(|b| *b != a && labels[*b] == labels[a]).collect();
        if positives.is_empty() {
            continue;
        }
        let mut sims = Vec::with_capacity(z.len() - 1);
        let mut pos_sims = Vec::new();
        for b in (0..z.len()).filter(|b| *b != a) {
            let d = tape.dot(z[a], z[b]);
            let s = tape.scale(d, 1.0 / temperature);
            if labels[b] == labels[a] {
                pos_sims.push(s);
            }
            sims.push(s);
        }
        let all = tape.concat(&sims);
        let lse = tape.logsumexp(all);
        let pos = tape.add_all(&pos_sims);
        let pos_mean = tape.scale(pos, 1.0 / positives.len() as f64);
        terms.push(tape.sub(lse, pos_mean));
    }
    if terms.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let n = terms.len() as f64;
    let sum = tape.add_all(&terms);
    Ok(tape.scale(sum, 1.0 / n))
}

/// Forward pass of a batch, recorded on one tape.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub group: BatchGroup,
    pub logits: Vec<Var>,
    pub pooled: Vec<Var>,
    pub labels: Vec<usize>,
}

pub fn prepare_batch(
    tape: &mut Tape,
    net: &Network,
    vars: &NetworkVars,
    samples: &[&Sample],
) -> Result<PreparedBatch, TrainError> {
    let cfg = *net.config();
    let fshape = [cfg.feature_channels, cfg.feature_side(), cfg.feature_side()];
    let mut entries = Vec::with_capacity(samples.len());
    let mut logits = Vec::with_capacity(samples.len());
    let mut pooled = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        if s.label >= cfg.num_classes {
            return Err(TrainError::LabelOutOfRange {
                label: s.label,
                num_classes: cfg.num_classes,
            });
        }
        let img = net.input(tape, &s.image)?;
        let out = net.forward(tape, vars, img)?;
        let z = tape.value(out.logits).to_vec();
        let mask = cam_mask(net.fc_weights(), tape.value(out.feature_map), &fshape, &z)?;
        entries.push(BatchEntry {
            sample_id: s.id,
            label: s.label,
            predicted: argmax(&z),
            feature_map: out.feature_map,
            pooled: out.pooled,
            mask,
        });
        logits.push(out.logits);
        pooled.push(out.pooled);
        labels.push(s.label);
    }
    Ok(PreparedBatch {
        group: BatchGroup::new(entries),
        logits,
        pooled,
        labels,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub proxy: f64,
    pub nil: f64,
    pub contrastive: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TotalLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Per-class batch means of pooled features, normalized, as constants. Absent classes get
/// a placeholder that is never read.
fn batch_prototypes(tape: &mut Tape, batch: &PreparedBatch, num_classes: usize) -> Vec<Var> {
    let dim = batch.pooled.first().map_or(1, |p| tape.value(*p).len());
    let mut sums = vec![vec![0.0; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (p, y) in batch.pooled.iter().zip(&batch.labels) {
        let v = tape.value(*p);
        if v.iter().map(|x| x * x).sum::<f64>().sqrt() <= EPSILON_NORM {
            continue;
        }
        sums[*y].iter_mut().zip(v).for_each(|(s, x)| *s += x);
        counts[*y] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| {
            // Unit length, like an initialized proxy.
            let norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            let data = if n == 0 || norm <= EPSILON_NORM {
                vec![1.0 / (dim as f64).sqrt(); dim]
            } else {
                s.into_iter().map(|x| x / norm).collect()
            };
            tape.constant(vec![dim], data)
        })
        .collect()
}

/// Composes the loss for `config.mode`. During warmup only cross-entropy is
/// active. `proxies` must hold the bank and its tape handles whenever the
/// mode uses proxies outside warmup.
pub fn total_loss(
    tape: &mut Tape,
    batch: &PreparedBatch,
    num_classes: usize,
    proxies: Option<(&mut ProxyBank, &[Var])>,
    config: &TrainConfig,
    warmup: bool,
) -> Result<TotalLoss, TrainError> {
    let ce = ce_loss(tape, &batch.logits, &batch.labels)?;
    let mut terms = vec![ce];
    let mut b = LossBreakdown {
        ce: tape.item(ce),
        ..LossBreakdown::default()
    };
    if !warmup {
        match config.mode {
            Mode::V1 => {}
            Mode::V2 => {
                let protos = batch_prototypes(tape, batch, num_classes);
                let nil = nil_loss(tape, &batch.group, &protos, config.k_n)?.loss;
                b.nil = tape.item(nil);
                terms.push(nil);
            }
            Mode::V3 | Mode::Full => {
                let (bank, vars) = proxies.ok_or(TrainError::Uninitialized)?;
                let lp = bank.proxy_loss(tape, &batch.group, vars)?;
                b.proxy = tape.item(lp);
                terms.push(lp);
                if config.mode == Mode::Full {
                    let nil = nil_loss(tape, &batch.group, vars, config.k_n)?.loss;
                    b.nil = tape.item(nil);
                    terms.push(nil);
                } else {
                    let usable: Vec<(Var, usize)> = batch
                        .pooled
                        .iter()
                        .zip(&batch.labels)
                        .filter(|(p, _)| tape.value(**p).iter().any(|x| *x != 0.0))
                        .map(|(p, y)| (*p, *y))
                        .collect();
                    let (feats, labels): (Vec<Var>, Vec<usize>) = usable.into_iter().unzip();
                    let con = supcon_loss(tape, &feats, &labels, config.contrastive_temperature)?;
                    b.contrastive = tape.item(con);
                    terms.push(con);
                }
            }
        }
    }
    let total = tape.add_all(&terms);
    b.total = tape.item(total);
    Ok(TotalLoss { total, breakdown: b })
}

/// Confusion-matrix based classification metrics (macro averages).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_recall: f64,
    pub macro_precision: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

impl Metrics {
    pub fn from_predictions(num_classes: usize, labels: &[usize], predictions: &[usize]) -> Self {
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (y, p) in labels.iter().zip(predictions) {
            confusion[*y][*p] += 1;
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let recall: Vec<f64> = (0..num_classes)
            .map(|c| ratio(confusion[c][c], confusion[c].iter().sum()))
            .collect();
        let precision: Vec<f64> = (0..num_classes)
            .map(|c| ratio(confusion[c][c], confusion.iter().map(|r| r[c]).sum()))
            .collect();
        let f1: Vec<f64> = recall
            .iter()
            .zip(&precision)
            .map(|(r, p)| if r + p > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        Self {
            macro_recall: mean(&recall),
            macro_precision: mean(&precision),
            macro_f1: mean(&f1),
            accuracy: ratio(correct, labels.len()),
            confusion,
            recall,
            precision,
            f1,
        }
    }
}

/// Predictions for every sample, evaluated in parallel (order preserved).
pub fn predict_all(net: &Network, samples: &[Sample]) -> Result<Vec<usize>, TrainError> {
    samples
        .par_iter()
        .map(|s| net.predict(&s.image).map_err(TrainError::from))
        .collect()
}

pub fn evaluate_network(net: &Network, samples: &[Sample]) -> Result<Metrics, TrainError> {
    let preds = predict_all(net, samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(Metrics::from_predictions(net.config().num_classes, &labels, &preds))
}

/// Metrics of a saved checkpoint on one split of a dataset.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, split: Split) -> Result<Metrics, TrainError> {
    let net = checkpoint.network()?;
    let spec = dataset.spec();
    if net.config().side != spec.side || net.config().num_classes != spec.num_classes {
        return Err(TrainError::Incompatible(format!(
            "network expects side {} / {} classes, dataset has side {} / {} classes",
            net.config().side,
            net.config().num_classes,
            spec.side,
            spec.num_classes
        )));
    }
    evaluate_network(&net, &dataset.samples(split))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub phase: String,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_proxy: f64,
    pub loss_nil: f64,
    pub loss_contrastive: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    pub network: Network,
    pub bank: Option<ProxyBank>,
    pub metrics: Metrics,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        let extra = self.bank.as_ref().map(ProxyBank::named_tensors).unwrap_or_default();
        let metadata = serde_json::json!({
            "mode": self.config.mode.to_string(),
            "config": self.config,
            "v2_prototypes": "l2-normalized per-class batch means of pooled features, detached, no instance/spatial weighting",
            "v3_contrastive": "supervised contrastive over l2-normalized pooled features",
        });
        Checkpoint::new(&self.network, &extra, metadata)
    }

    pub fn log_jsonl(&self) -> Result<String, TrainError> {
        let mut out = String::new();
        for line in &self.log {
            out.push_str(&serde_json::to_string(line)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes checkpoint, metrics and JSON-lines log into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), TrainError> {
        self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
        write_atomic(&dir.join(METRICS_FILE), &serde_json::to_vec_pretty(&self.metrics)?)?;
        write_atomic(&dir.join(LOG_FILE), self.log_jsonl()?.as_bytes())?;
        Ok(())
    }
}

fn collect_features(
    net: &Network,
    samples: &[Sample],
    into: &mut [Vec<Vec<f64>>],
) -> Result<(), TrainError> {
    for s in samples {
        into[s.label].push(net.infer(&s.image)?.1);
    }
    Ok(())
}

/// Trains one network on the training split and reports test metrics.
///
/// Epochs before `warmup_epochs` optimize cross-entropy only and collect
/// pooled features per class; proxies are initialized from those at the end
/// of warmup. Batch order is a seeded shuffle per epoch.
pub fn train_run(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let spec = dataset.spec();
    let num_classes = spec.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = Network::new(config.network_config(spec.side, num_classes), &mut rng)?;
    let train = dataset.samples(Split::Train);
    let test = dataset.samples(Split::Test);
    let mut warm_features = vec![Vec::new(); num_classes];
    let mut bank: Option<ProxyBank> = None;
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..config.epochs {
        let warmup = epoch < config.warmup_epochs;
        if !warmup && bank.is_none() && config.mode.uses_proxies() {
            if config.warmup_epochs == 0 {
                collect_features(&net, &train, &mut warm_features)?;
            }
            bank = Some(init_proxies(&warm_features, config.proxy_config(), &mut rng)?);
        }
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|i| &train[*i]).collect();
            let mut tape = Tape::new();
            let vars = net.attach(&mut tape);
            let prepared = prepare_batch(&mut tape, &net, &vars, &batch)?;
            if warmup {
                for (p, y) in prepared.pooled.iter().zip(&prepared.labels) {
                    warm_features[*y].push(tape.value(*p).to_vec());
                }
            }
            let proxy_vars = bank.as_ref().filter(|_| !warmup).map(|b| b.attach(&mut tape));
            let loss = total_loss(
                &mut tape,
                &prepared,
                num_classes,
                bank.as_mut().zip(proxy_vars.as_deref()),
                config,
                warmup,
            )?;
            if !loss.breakdown.total.is_finite() {
                return Err(TrainError::Diverged { epoch, step });
            }
            tape.backward(loss.total)?;
            net.sgd_step(&tape, &vars, lr);
            if let (Some(b), Some(v)) = (bank.as_mut(), proxy_vars.as_ref()) {
                b.sgd_step(&tape, v, lr);
            }
            let l = loss.breakdown;
            sums.ce += l.ce;
            sums.proxy += l.proxy;
            sums.nil += l.nil;
            sums.contrastive += l.contrastive;
            sums.total += l.total;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let metrics = evaluate_network(&net, &test)?;
        let entry = EpochLog {
            epoch,
            lr,
            phase: if warmup { "warmup" } else { "main" }.to_string(),
            loss_total: sums.total / n,
            loss_ce: sums.ce / n,
            loss_proxy: sums.proxy / n,
            loss_nil: sums.nil / n,
            loss_contrastive: sums.contrastive / n,
            test_accuracy: metrics.accuracy,
        };
        log::info!(
            "epoch {epoch:3} lr {lr:.0e} loss {:.4} (ce {:.4} p {:.4} nil {:.4} con {:.4}) test acc {:.4}",
            entry.loss_total,
            entry.loss_ce,
            entry.loss_proxy,
            entry.loss_nil,
            entry.loss_contrastive,
            entry.test_accuracy
        );
        log.push(entry);
    }
    let metrics = evaluate_network(&net, &test)?;
    Ok(TrainOutcome {
        config: config.clone(),
        network: net,
        bank,
        metrics,
        log,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub modes: Vec<Mode>,
    pub shots: Vec<usize>,
    pub seeds: usize,
    /// Worker threads for independent cells.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub shots: usize,
    pub seed: usize,
    pub accuracy: f64,
    pub per_class: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: Mode,
    pub shots: usize,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let classes = self.rows.first().map_or(0, |r| r.per_class.len());
        let mut out = String::from("mode,shots,seed,accuracy");
        for c in 0..classes {
            out.push_str(&format!(",acc_class_{c}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}", r.mode, r.shots, r.seed, r.accuracy));
            for a in &r.per_class {
                out.push_str(&format!(",{a}"));
            }
            out.push('\n');
        }
        out
    }

    /// Mean and sample standard deviation of accuracy per (mode, shots).
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut keys: Vec<(Mode, usize)> = self.rows.iter().map(|r| (r.mode, r.shots)).collect();
        keys.dedup();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .map(|(mode, shots)| {
                let acc: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.mode == mode && r.shots == shots)
                    .map(|r| r.accuracy)
                    .collect();
                let n = acc.len() as f64;
                let mean = acc.iter().sum::<f64>() / n;
                let var = if acc.len() > 1 {
                    acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                SummaryRow {
                    mode,
                    shots,
                    runs: acc.len(),
                    mean,
                    std: var.sqrt(),
                }
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("mode,shots,runs,mean_accuracy,std_accuracy\n");
        for s in self.summary() {
            out.push_str(&format!("{},{},{},{},{}\n", s.mode, s.shots, s.runs, s.mean, s.std));
        }
        out
    }

    pub fn mean_accuracy(&self, mode: Mode, shots: usize) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|s| s.mode == mode && s.shots == shots)
            .map(|s| s.mean)
    }
}

/// Runs every (mode, shots, seed) cell. Seed index `s` regenerates the data
/// with `base.seed + s` and trains with `config.seed + s`, so all modes in a
/// (shots, seed) pair see the same data and initialization.
pub fn ablate(config: &TrainConfig, base: &ChipSpec, grid: &AblationGrid) -> Result<AblationTable, TrainError> {
    if grid.modes.is_empty() || grid.shots.is_empty() || grid.seeds == 0 {
        return Err(TrainError::InvalidConfig("ablation grid is empty".into()));
    }
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(grid.threads.max(1))
        .build()
        .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    pool.install(|| {
        let data_keys: Vec<(usize, usize)> = grid
            .shots
            .iter()
            .flat_map(|k| (0..grid.seeds).map(move |s| (*k, s)))
            .collect();
        let datasets: Vec<Dataset> = data_keys
            .par_iter()
            .map(|(k, s)| {
                let spec = ChipSpec {
                    shots_per_class: *k,
                    seed: base.seed + *s as u64,
                    ..base.clone()
                };
                datagen::generate(&spec)
            })
            .collect::<Result<_, _>>()?;
        let cells: Vec<(Mode, usize)> = grid
            .modes
            .iter()
            .flat_map(|m| (0..data_keys.len()).map(move |d| (*m, d)))
            .collect();
        let rows = cells
            .par_iter()
            .map(|(mode, d)| {
                let (shots, seed) = data_keys[*d];
                let cfg = TrainConfig {
                    mode: *mode,
                    seed: config.seed + seed as u64,
                    ..config.clone()
                };
                let outcome = train_run(&cfg, &datasets[*d])?;
                log::info!("ablation {mode} K={shots} seed={seed}: acc {:.4}", outcome.metrics.accuracy);
                Ok(AblationRow {
                    mode: *mode,
                    shots,
                    seed,
                    accuracy: outcome.metrics.accuracy,
                    per_class: outcome.metrics.recall,
                })
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        Ok(AblationTable { rows })
    })
}
