//! Independent plain-value oracles shared by the integration tests. Nothing
//! here calls into the library's loss code.
#![allow(dead_code)]

pub mod criteria;

use std::collections::HashMap;

use invtrain::scm::CausalDag;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn unit(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    a.iter().map(|x| x / n).collect()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// `-ln softmax(z)[y]` without any stabilization.
pub fn ce(z: &[f64], y: usize) -> f64 {
    let denom: f64 = z.iter().map(|v| v.exp()).sum();
    -(z[y].exp() / denom).ln()
}

pub fn ce_mean(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    logits.iter().zip(labels).map(|(z, y)| ce(z, *y)).sum::<f64>() / labels.len() as f64
}

/// Class activation map for class `class`, min-max normalized, by explicit loops.
pub fn cam(w: &[f64], channels: usize, fmap: &[f64], class: usize) -> Vec<f64> {
    let hw = fmap.len() / channels;
    let mut raw = vec![0.0; hw];
    for p in 0..hw {
        for c in 0..channels {
            raw[p] += w[class * channels + c] * fmap[c * hw + p];
        }
    }
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-12 {
        return vec![1.0; hw];
    }
    raw.iter().map(|r| (r - lo) / (hi - lo)).collect()
}

pub struct ProxySample {
    pub label: usize,
    pub predicted: usize,
    pub channels: usize,
    pub fmap: Vec<f64>,
    pub mask: Vec<f64>,
    pub lambda: f64,
}

/// `-sum lambda cos(GAP((1 + a (M - 1)) f), P_y)` with `a = 0` for
/// misclassified samples.
pub fn proxy_loss(samples: &[ProxySample], proxies: &[Vec<f64>], alpha: f64) -> f64 {
    let mut total = 0.0;
    for s in samples {
        let hw = s.mask.len();
        let a = if s.label == s.predicted { alpha } else { 0.0 };
        let pooled: Vec<f64> = (0..s.channels)
            .map(|c| (0..hw).map(|p| (1.0 + a * (s.mask[p] - 1.0)) * s.fmap[c * hw + p]).sum::<f64>() / hw as f64)
            .collect();
        total -= s.lambda * cos(&pooled, &proxies[s.label]);
    }
    total
}

pub fn lambda(d_t: f64, d_prev: Option<f64>, rho: f64, eps: f64) -> f64 {
    let open = match d_prev {
        Some(prev) => d_t.abs() >= 1e-8 && (d_t - prev) / d_t >= eps,
        None => false,
    };
    let base = if open { 1.0 - (d_t + 2.0) / 2.0 } else { 1.0 };
    base.clamp(0.0, 1.0).powf(rho)
}

/// Straight-line noise-invariance loss. `samples` are `(id, label, feature)`.
pub fn nil_loss(samples: &[(u64, usize, Vec<f64>)], proxies: &[Vec<f64>], k_n: usize) -> f64 {
    let mut classes: Vec<usize> = samples.iter().map(|s| s.1).collect();
    classes.sort();
    classes.dedup();
    let mut total = 0.0;
    for &i in &classes {
        let pi = &proxies[i];
        let mut pos = Vec::new();
        let mut neg: Vec<(u64, f64)> = Vec::new();
        for (id, label, f) in samples {
            let uf = unit(f);
            let own = unit(&proxies[*label]);
            let mut s = 0.0;
            for d in 0..f.len() {
                s += (uf[d] - own[d]) * pi[d];
            }
            if *label == i {
                pos.push(s);
            } else {
                neg.push((*id, s));
            }
        }
        if neg.is_empty() {
            continue;
        }
        neg.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let k = k_n.min(neg.len());
        let base = neg.len() / k;
        let extra = neg.len() % k;
        let mut at = 0;
        for e in 0..k {
            let len = base + if e < extra { 1 } else { 0 };
            let env: Vec<f64> = neg[at..at + len].iter().map(|x| x.1).collect();
            at += len;
            for &sp in &pos {
                let z: f64 = sp.exp() + env.iter().map(|v| v.exp()).sum::<f64>();
                total += -(sp.exp() / z).ln();
                let mut mean = sp * sp.exp() / z;
                for v in &env {
                    mean += v * v.exp() / z;
                }
                total += (mean - sp) * (mean - sp);
            }
        }
    }
    total
}

/// Supervised contrastive loss over normalized features, mean over anchors
/// that have a positive.
pub fn supcon(feats: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let z: Vec<Vec<f64>> = feats.iter().map(|f| unit(f)).collect();
    let mut sum = 0.0;
    let mut count = 0;
    for a in 0..z.len() {
        let pos: Vec<usize> = (0..z.len()).filter(|&b| b != a && labels[b] == labels[a]).collect();
        if pos.is_empty() {
            continue;
        }
        let denom: f64 = (0..z.len()).filter(|&b| b != a).map(|b| (dot(&z[a], &z[b]) / tau).exp()).sum();
        let mut l = 0.0;
        for &p in &pos {
            l -= ((dot(&z[a], &z[p]) / tau).exp() / denom).ln();
        }
        sum += l / pos.len() as f64;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Mixed-radix digits of `index`, last variable fastest.
pub fn digits(mut index: usize, cards: &[usize]) -> Vec<usize> {
    let mut out = vec![0; cards.len()];
    for k in (0..cards.len()).rev() {
        out[k] = index % cards[k];
        index /= cards[k];
    }
    out
}

/// Joint by explicit product of CPT entries, optionally with `x` clamped
/// (truncated factorization).
pub fn joint_by_product(dag: &CausalDag, clamp: Option<(usize, usize)>) -> Vec<f64> {
    let cards: Vec<usize> = dag.variables().iter().map(|v| v.cardinality).collect();
    let total: usize = cards.iter().product();
    let mut out = vec![0.0; total];
    for (idx, slot) in out.iter_mut().enumerate() {
        let st = digits(idx, &cards);
        let mut p = 1.0;
        for v in 0..cards.len() {
            if let Some((x, value)) = clamp {
                if v == x {
                    if st[v] != value {
                        p = 0.0;
                    }
                    continue;
                }
            }
            let mut row = 0;
            for &u in dag.parents(v) {
                row = row * cards[u] + st[u];
            }
            p *= dag.cpt(v)[row * cards[v] + st[v]];
        }
        *slot = p;
    }
    out
}

/// `I(X; Y | Z)` in nats from a full joint table.
pub fn conditional_mi(joint: &[f64], cards: &[usize], x: usize, y: usize, z: &[usize]) -> f64 {
    let mut pxyz: HashMap<(usize, usize, Vec<usize>), f64> = HashMap::new();
    let mut pxz: HashMap<(usize, Vec<usize>), f64> = HashMap::new();
    let mut pyz: HashMap<(usize, Vec<usize>), f64> = HashMap::new();
    let mut pz: HashMap<Vec<usize>, f64> = HashMap::new();
    for (idx, p) in joint.iter().enumerate() {
        let st = digits(idx, cards);
        let zs: Vec<usize> = z.iter().map(|&k| st[k]).collect();
        *pxyz.entry((st[x], st[y], zs.clone())).or_default() += p;
        *pxz.entry((st[x], zs.clone())).or_default() += p;
        *pyz.entry((st[y], zs.clone())).or_default() += p;
        *pz.entry(zs).or_default() += p;
    }
    let mut mi = 0.0;
    for ((xv, yv, zs), p) in &pxyz {
        if *p <= 0.0 {
            continue;
        }
        let num = p * pz[zs];
        let den = pxz[&(*xv, zs.clone())] * pyz[&(*yv, zs.clone())];
        mi += p * (num / den).ln();
    }
    mi
}

/// Marginal of one variable from a full joint table.
pub fn marginal_of(joint: &[f64], cards: &[usize], v: usize) -> Vec<f64> {
    let mut out = vec![0.0; cards[v]];
    for (idx, p) in joint.iter().enumerate() {
        out[digits(idx, cards)[v]] += p;
    }
    out
}
