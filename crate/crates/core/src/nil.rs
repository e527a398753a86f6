//! Noise-invariance loss.
//!
//! Each class in turn is the anchor. Samples of the other classes are scored
//! by how their residual from their own proxy projects onto the anchor proxy,
//! sorted by that score and cut into `K_n` environments. Inside every
//! environment the anchor samples are contrasted against the environment's
//! samples, and an IRM-style penalty (the squared derivative of that loss
//! with respect to a scalar multiplier on all scores, taken at 1) discourages
//! environment-dependent solutions.

use thiserror::Error;

use crate::autodiff::{logsumexp, AutodiffError, Tape, Var, EPSILON_NORM};
use crate::proxy::BatchGroup;

#[derive(Debug, Error)]
pub enum NilError {
    #[error("no scores to partition")]
    EmptyInput,
    #[error("anchor class has no samples")]
    EmptyAnchor,
    #[error("environment has no samples")]
    EmptyEnvironment,
    #[error("number of environments must be at least 1")]
    InvalidEnvironmentCount,
    #[error("proxies are not initialized")]
    Uninitialized,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// `d_v = sum((l2n(f) - l2n(P_own)) * P_anchor)`.
pub fn virtual_noise_measure(
    tape: &mut Tape,
    feature: Var,
    own_proxy: Var,
    anchor_proxy: Var,
) -> Result<Var, NilError> {
    let nf = tape.l2n(feature)?;
    let np = tape.l2n(own_proxy)?;
    let residual = tape.sub(nf, np);
    Ok(tape.dot(residual, anchor_proxy))
}

/// Sorted scores cut into contiguous environments.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentPartition {
    pub anchor: usize,
    /// `(sample_id, score)`, score descending, ties by sample id ascending.
    pub sorted: Vec<(u64, f64)>,
    /// Sample ids of each environment, in sorted order.
    pub environments: Vec<Vec<u64>>,
}

impl EnvironmentPartition {
    pub fn len(&self) -> usize {
        self.environments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.environments.is_empty()
    }
}

/// Sorts scores descending and splits them into `k_n` contiguous groups whose
/// sizes differ by at most one, larger groups first. With fewer scores than
/// `k_n` the empty groups are dropped.
pub fn build_environments(
    anchor: usize,
    scores: &[(u64, f64)],
    k_n: usize,
) -> Result<EnvironmentPartition, NilError> {
    if k_n == 0 {
        return Err(NilError::InvalidEnvironmentCount);
    }
    if scores.is_empty() {
        return Err(NilError::EmptyInput);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let n = sorted.len();
    if n < k_n {
        log::debug!("anchor {anchor}: {n} scores for {k_n} environments; using {n}");
    }
    let k = k_n.min(n);
    let (q, r) = (n / k, n % k);
    let mut environments = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = q + usize::from(i < r);
        environments.push(sorted[start..start + len].iter().map(|s| s.0).collect());
        start += len;
    }
    Ok(EnvironmentPartition {
        anchor,
        sorted,
        environments,
    })
}

/// Relative-distribution loss of one environment:
/// `sum_k [logsumexp(s_k, negatives) - s_k]` over the anchor scores `s_k`.
pub fn env_loss(tape: &mut Tape, positives: &[Var], negatives: &[Var]) -> Result<Var, NilError> {
    if positives.is_empty() {
        return Err(NilError::EmptyAnchor);
    }
    if negatives.is_empty() {
        return Err(NilError::EmptyEnvironment);
    }
    let neg = tape.concat(negatives);
    let mut terms = Vec::with_capacity(positives.len());
    for p in positives {
        let all = tape.concat(&[*p, neg]);
        let lse = tape.logsumexp(all);
        terms.push(tape.sub(lse, *p));
    }
    Ok(tape.add_all(&terms))
}

/// Dummy-scale gradient penalty for one anchor score against one environment:
/// `(sum_j p_j s_j - s_+)^2` with `p = softmax(s_+, negatives)`.
pub fn irm_penalty(tape: &mut Tape, positive: Var, negatives: &[Var]) -> Result<Var, NilError> {
    if negatives.is_empty() {
        return Err(NilError::EmptyEnvironment);
    }
    let mut parts = Vec::with_capacity(negatives.len() + 1);
    parts.push(positive);
    parts.extend_from_slice(negatives);
    let scores = tape.concat(&parts);
    let p = tape.softmax(scores);
    let mean = tape.dot(p, scores);
    let diff = tape.sub(mean, positive);
    Ok(tape.mul(diff, diff))
}

/// Plain-value form of [`irm_penalty`].
pub fn irm_penalty_value(positive: f64, negatives: &[f64]) -> f64 {
    let mut all = vec![positive];
    all.extend_from_slice(negatives);
    let lse = logsumexp(&all);
    let mean: f64 = all.iter().map(|s| (s - lse).exp() * s).sum();
    (mean - positive).powi(2)
}

/// Per-anchor pieces of the loss, for logging.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorReport {
    pub anchor: usize,
    pub environments: usize,
    pub env_losses: Vec<f64>,
    pub penalties: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NilOutput {
    pub loss: Var,
    pub anchors: Vec<AnchorReport>,
}

fn usable(tape: &Tape, v: Var) -> bool {
    tape.value(v).iter().map(|x| x * x).sum::<f64>().sqrt() > EPSILON_NORM
}

/// Total noise-invariance loss over every anchor class present in `batch`.
/// `proxies[c]` is the proxy (or prototype) of class `c`. Anchors without any
/// other-class sample contribute 0; samples with a vanishing feature are
/// left out.
pub fn nil_loss(
    tape: &mut Tape,
    batch: &BatchGroup,
    proxies: &[Var],
    k_n: usize,
) -> Result<NilOutput, NilError> {
    if k_n == 0 {
        return Err(NilError::InvalidEnvironmentCount);
    }
    let present: Vec<usize> = batch.classes().map(|(c, _)| c).collect();
    if present.iter().any(|c| *c >= proxies.len()) {
        return Err(NilError::Uninitialized);
    }
    let feats: Vec<(u64, usize, Var)> = batch
        .entries()
        .filter(|e| {
            let ok = usable(tape, e.pooled);
            if !ok {
                log::debug!("sample {}: zero feature left out of noise-invariance loss", e.sample_id);
            }
            ok
        })
        .map(|e| (e.sample_id, e.label, e.pooled))
        .collect();
    let mut total = Vec::new();
    let mut anchors = Vec::new();
    for anchor in present {
        let p_anchor = proxies[anchor];
        let mut positives = Vec::new();
        let mut scored = Vec::new();
        let mut score_var = std::collections::HashMap::new();
        for (id, label, f) in &feats {
            if *label == anchor {
                positives.push(virtual_noise_measure(tape, *f, p_anchor, p_anchor)?);
            } else {
                let s = virtual_noise_measure(tape, *f, proxies[*label], p_anchor)?;
                scored.push((*id, tape.item(s)));
                score_var.insert(*id, s);
            }
        }
        if positives.is_empty() {
            continue;
        }
        if scored.is_empty() {
            log::debug!("anchor {anchor}: no other-class samples, contributes 0");
            continue;
        }
        let partition = build_environments(anchor, &scored, k_n)?;
        let mut report = AnchorReport {
            anchor,
            environments: partition.len(),
            env_losses: Vec::new(),
            penalties: Vec::new(),
        };
        for env in &partition.environments {
            let negs: Vec<Var> = env.iter().map(|id| score_var[id]).collect();
            let ld = env_loss(tape, &positives, &negs)?;
            let pens = positives
                .iter()
                .map(|p| irm_penalty(tape, *p, &negs))
                .collect::<Result<Vec<_>, _>>()?;
            let pen = tape.add_all(&pens);
            report.env_losses.push(tape.item(ld));
            report.penalties.push(tape.item(pen));
            total.push(ld);
            total.push(pen);
        }
        anchors.push(report);
    }
    Ok(NilOutput {
        loss: tape.add_all(&total),
        anchors,
    })
}
