//! Inner-class invariant proxies.
//!
//! One learnable proxy per class attracts that class's features under cosine
//! similarity. Each sample's pull is gated by an instance weight derived from
//! how its similarity moved since the previous step, and its feature map is
//! spatially reweighted by the class activation mask before pooling.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var, EPSILON_NORM};

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("class {0} has no warmup features")]
    EmptyClass(usize),
    #[error("proxies are not initialized")]
    Uninitialized,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    /// Exponent on the instance weight.
    pub rho: f64,
    /// Relative-change threshold that opens the instance gate.
    pub epsilon: f64,
    /// Spatial weighting strength for correctly predicted samples.
    pub alpha: f64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            rho: 2.0,
            epsilon: 0.05,
            alpha: 1.0,
        }
    }
}

/// Learnable per-class proxies plus the previous-step similarity of every
/// sample seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyBank {
    proxies: Vec<Tensor>,
    cache: BTreeMap<u64, f64>,
    config: ProxyConfig,
    fallback_classes: Vec<usize>,
}

/// Builds proxies as the normalized mean of each class's warmup features.
/// A class whose mean vanishes gets a random unit vector instead (reported by
/// [`ProxyBank::fallback_classes`]).
pub fn init_proxies<R: Rng + ?Sized>(
    warmup_features: &[Vec<Vec<f64>>],
    config: ProxyConfig,
    rng: &mut R,
) -> Result<ProxyBank, ProxyError> {
    let dim = warmup_features
        .iter()
        .flat_map(|c| c.first())
        .map(Vec::len)
        .next()
        .unwrap_or(0);
    let mut proxies = Vec::with_capacity(warmup_features.len());
    let mut fallback_classes = Vec::new();
    for (class, feats) in warmup_features.iter().enumerate() {
        if feats.is_empty() {
            return Err(ProxyError::EmptyClass(class));
        }
        let mut mean = vec![0.0; dim];
        for f in feats {
            if f.len() != dim {
                return Err(ProxyError::ShapeMismatch(format!(
                    "class {class}: feature of length {} (expected {dim})",
                    f.len()
                )));
            }
            mean.iter_mut().zip(f).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= feats.len() as f64);
        let data = match normalized(&mean) {
            Some(unit) => unit,
            None => {
                log::warn!("class {class}: warmup mean vanished, using a random unit proxy");
                fallback_classes.push(class);
                random_unit(dim, rng)
            }
        };
        proxies.push(Tensor::new(vec![dim], data)?.requiring_grad());
    }
    Ok(ProxyBank {
        proxies,
        cache: BTreeMap::new(),
        config,
        fallback_classes,
    })
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > EPSILON_NORM && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(u) = normalized(&v) {
            return u;
        }
    }
}

/// Cosine similarity of plain vectors; `None` if either is (near) zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (normalized(a)?, normalized(b)?);
    Some(na.iter().zip(&nb).map(|(x, y)| x * y).sum())
}

/// Instance weight `clamp(1 - beta (d_t + 2) / 2, 0, 1)^rho`.
///
/// The gate `beta` opens only when a previous similarity exists and the
/// relative change `(d_t - d_prev) / d_t` reaches `epsilon`; it stays shut when
/// `|d_t| < 1e-8`.
pub fn instance_weight(d_t: f64, d_prev: Option<f64>, rho: f64, epsilon: f64) -> f64 {
    let beta = match d_prev {
        Some(prev) if d_t.abs() >= 1e-8 && (d_t - prev) / d_t >= epsilon => 1.0,
        _ => 0.0,
    };
    let base = 1.0 - beta * (d_t + 2.0) / 2.0;
    base.clamp(0.0, 1.0).powf(rho)
}

/// `(1 + alpha (M - 1)) * f`, with the mask broadcast over channels. `alpha`
/// is forced to 0 for misclassified samples, which makes this the identity.
pub fn spatial_reweight(
    tape: &mut Tape,
    feature_map: Var,
    mask: &[f64],
    correct: bool,
    alpha: f64,
) -> Result<Var, ProxyError> {
    let shape = tape.shape(feature_map).to_vec();
    if shape.len() != 3 || shape[1] * shape[2] != mask.len() {
        return Err(ProxyError::ShapeMismatch(format!(
            "mask of {} values for feature map {shape:?}",
            mask.len()
        )));
    }
    let a = if correct { alpha } else { 0.0 };
    if a == 0.0 {
        return Ok(feature_map);
    }
    let weights = mask.iter().map(|m| 1.0 + a * (m - 1.0)).collect();
    let w = tape.constant(vec![shape[1], shape[2]], weights);
    Ok(tape.mul_spatial(feature_map, w))
}

/// One sample's view inside a training step.
#[derive(Debug, Clone)]
pub struct BatchEntry {
    pub sample_id: u64,
    pub label: usize,
    pub predicted: usize,
    /// `[C_feat, H', W']`
    pub feature_map: Var,
    /// `[C_feat]`, the unweighted global average of `feature_map`.
    pub pooled: Var,
    /// Class activation mask, `H' * W'` values in `[0, 1]`.
    pub mask: Vec<f64>,
}

/// Batch entries grouped by true label (ascending).
#[derive(Debug, Clone, Default)]
pub struct BatchGroup {
    classes: BTreeMap<usize, Vec<BatchEntry>>,
}

impl BatchGroup {
    pub fn new(entries: Vec<BatchEntry>) -> Self {
        let mut classes: BTreeMap<usize, Vec<BatchEntry>> = BTreeMap::new();
        for e in entries {
            classes.entry(e.label).or_default().push(e);
        }
        Self { classes }
    }

    pub fn classes(&self) -> impl Iterator<Item = (usize, &[BatchEntry])> {
        self.classes.iter().map(|(c, v)| (*c, v.as_slice()))
    }

    pub fn class(&self, label: usize) -> &[BatchEntry] {
        self.classes.get(&label).map_or(&[], Vec::as_slice)
    }

    pub fn entries(&self) -> impl Iterator<Item = &BatchEntry> {
        self.classes.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn num_classes_present(&self) -> usize {
        self.classes.len()
    }
}

impl ProxyBank {
    pub fn from_proxies(proxies: Vec<Tensor>, config: ProxyConfig) -> Self {
        Self {
            proxies: proxies.into_iter().map(Tensor::requiring_grad).collect(),
            cache: BTreeMap::new(),
            config,
            fallback_classes: Vec::new(),
        }
    }

    pub fn proxies(&self) -> &[Tensor] {
        &self.proxies
    }

    pub fn config(&self) -> &ProxyConfig {
        &self.config
    }

    pub fn cache(&self) -> &BTreeMap<u64, f64> {
        &self.cache
    }

    /// Classes whose proxy fell back to a random direction at init.
    pub fn fallback_classes(&self) -> &[usize] {
        &self.fallback_classes
    }

    pub fn num_classes(&self) -> usize {
        self.proxies.len()
    }

    /// Records every proxy on `tape` as a gradient-requiring leaf.
    pub fn attach(&self, tape: &mut Tape) -> Vec<Var> {
        self.proxies.iter().map(|p| tape.leaf(p)).collect()
    }

    /// Instance weight and current similarity for one sample, against the
    /// proxy value stored in the bank.
    fn gate(&self, sample_id: u64, pooled: &[f64], label: usize) -> Option<(f64, f64)> {
        let d_t = cosine(pooled, self.proxies[label].data())?;
        let lambda = instance_weight(
            d_t,
            self.cache.get(&sample_id).copied(),
            self.config.rho,
            self.config.epsilon,
        );
        Some((lambda, d_t))
    }

    /// `L_p = -sum_i sum_k lambda_ik cos(l2n(GAP(f^w_ik)), l2n(P_i))`.
    ///
    /// Instance weights use detached similarities of the unweighted pooled
    /// features and are constants for differentiation. Every sample seen has
    /// its cache entry replaced by the freshly computed similarity. Samples
    /// with a vanishing feature contribute nothing and are not cached.
    pub fn proxy_loss(
        &mut self,
        tape: &mut Tape,
        batch: &BatchGroup,
        proxies: &[Var],
    ) -> Result<Var, ProxyError> {
        if self.proxies.is_empty() || proxies.len() != self.proxies.len() {
            return Err(ProxyError::Uninitialized);
        }
        let mut terms = Vec::with_capacity(batch.len());
        let mut fresh = Vec::with_capacity(batch.len());
        for (label, entries) in batch.classes() {
            if label >= self.proxies.len() {
                return Err(ProxyError::ShapeMismatch(format!("label {label} has no proxy")));
            }
            for e in entries {
                let Some((lambda, d_t)) = self.gate(e.sample_id, tape.value(e.pooled), label) else {
                    log::debug!("sample {}: zero feature skipped in proxy loss", e.sample_id);
                    continue;
                };
                fresh.push((e.sample_id, d_t));
                let fw = spatial_reweight(
                    tape,
                    e.feature_map,
                    &e.mask,
                    e.predicted == e.label,
                    self.config.alpha,
                )?;
                let pooled_w = tape.global_avg_pool(fw);
                let sim = match tape.cosine_sim(pooled_w, proxies[label]) {
                    Ok(s) => s,
                    Err(AutodiffError::ZeroVector(_)) => continue,
                    Err(e) => return Err(e.into()),
                };
                terms.push(tape.scale(sim, -lambda));
            }
        }
        self.cache.extend(fresh);
        Ok(tape.add_all(&terms))
    }

    /// Applies one SGD step to the proxies. A proxy whose norm would collapse
    /// keeps its previous value.
    pub fn sgd_step(&mut self, tape: &Tape, vars: &[Var], lr: f64) {
        for (p, v) in self.proxies.iter_mut().zip(vars) {
            let before = p.data().to_vec();
            tape.write_grad(*v, p);
            p.sgd_step(lr);
            if p.norm() <= EPSILON_NORM || !p.norm().is_finite() {
                log::warn!("proxy collapsed during update; keeping previous value");
                p.data_mut().copy_from_slice(&before);
            }
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.proxies
            .iter()
            .enumerate()
            .map(|(i, p)| (format!("proxy.{i}"), p.clone()))
            .collect()
    }
}
