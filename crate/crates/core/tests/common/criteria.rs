//! Measurements behind the acceptance gate, shared with the integration
//! tests so both check the same numbers.

use invtrain::autodiff::{grad_check, Tape, Tensor, Var};
use invtrain::model::cam_mask;
use invtrain::nil::{build_environments, irm_penalty, irm_penalty_value, nil_loss, virtual_noise_measure};
use invtrain::proxy::{instance_weight, BatchEntry, BatchGroup, ProxyBank, ProxyConfig};
use invtrain::scm::CausalDag;
use invtrain::train::{ce_loss, total_loss, PreparedBatch};
use invtrain::{AutodiffError, Mode, NilError, TrainConfig, TrainError};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{conditional_mi, digits, joint_by_product, marginal_of, rand_vec, rng};

pub const FD_STEP: f64 = 1e-5;

/// Cuts a flat variable into consecutive pieces of the given shapes.
pub fn split(tape: &mut Tape, x: Var, shapes: &[Vec<usize>]) -> Vec<Var> {
    let mut at = 0;
    let mut out = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let n: usize = shape.iter().product();
        let parts: Vec<Var> = (at..at + n).map(|i| tape.index(x, i)).collect();
        let flat = tape.concat(&parts);
        out.push(tape.reshape(flat, shape.clone()));
        at += n;
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradReport {
    pub proxy: f64,
    pub nil: f64,
    pub ce: f64,
    pub penalty: f64,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.proxy.max(self.nil).max(self.ce).max(self.penalty)
    }
}

fn proxy_instance(r: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let (n, c, ch, side) = (4usize, 3usize, 3usize, 2usize);
    let hw = side * side;
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
    let predicted: Vec<usize> = labels.iter().map(|y| if r.gen_bool(0.6) { *y } else { (y + 1) % c }).collect();
    let masks: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(r, hw, 0.0, 1.0)).collect();
    let x = rand_vec(r, n * ch * hw + c * ch, -1.0, 1.0);
    let mut shapes = vec![vec![ch, side, side]; n];
    shapes.extend(vec![vec![ch]; c]);
    let init: Vec<Tensor> = (0..c)
        .map(|k| Tensor::new(vec![ch], x[n * ch * hw + k * ch..n * ch * hw + (k + 1) * ch].to_vec()).unwrap())
        .collect();
    let x = Tensor::new(vec![x.len()], x).unwrap();
    grad_check(
        |t: &mut Tape, v: Var| -> Result<Var, TrainError> {
            let parts = split(t, v, &shapes);
            let entries = (0..n)
                .map(|i| BatchEntry {
                    sample_id: i as u64,
                    label: labels[i],
                    predicted: predicted[i],
                    feature_map: parts[i],
                    pooled: t.global_avg_pool(parts[i]),
                    mask: masks[i].clone(),
                })
                .collect();
            let mut bank = ProxyBank::from_proxies(init.clone(), ProxyConfig::default());
            Ok(bank.proxy_loss(t, &BatchGroup::new(entries), &parts[n..])?)
        },
        &x,
        FD_STEP,
    )
}

fn nil_instance(r: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let (n, c, dim) = (7usize, 3usize, 4usize);
    let labels: Vec<usize> = (0..n).map(|i| if i < c { i } else { r.gen_range(0..c) }).collect();
    let x = Tensor::new(vec![(n + c) * dim], rand_vec(r, (n + c) * dim, -1.0, 1.0)).unwrap();
    let shapes = vec![vec![dim]; n + c];
    grad_check(
        |t: &mut Tape, v: Var| -> Result<Var, TrainError> {
            let parts = split(t, v, &shapes);
            let entries = (0..n)
                .map(|i| {
                    let fmap = t.reshape(parts[i], vec![dim, 1, 1]);
                    BatchEntry {
                        sample_id: i as u64,
                        label: labels[i],
                        predicted: labels[i],
                        feature_map: fmap,
                        pooled: parts[i],
                        mask: vec![1.0],
                    }
                })
                .collect();
            Ok(nil_loss(t, &BatchGroup::new(entries), &parts[n..], 3)?.loss)
        },
        &x,
        FD_STEP,
    )
}

fn ce_instance(r: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let (n, c) = (4usize, 5usize);
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
    let x = Tensor::new(vec![n * c], rand_vec(r, n * c, -3.0, 3.0)).unwrap();
    let shapes = vec![vec![c]; n];
    grad_check(
        |t: &mut Tape, v: Var| -> Result<Var, TrainError> {
            let parts = split(t, v, &shapes);
            ce_loss(t, &parts, &labels)
        },
        &x,
        FD_STEP,
    )
}

fn penalty_instance(r: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let x = Tensor::new(vec![5], rand_vec(r, 5, -2.0, 2.0)).unwrap();
    grad_check(
        |t: &mut Tape, v: Var| -> Result<Var, TrainError> {
            let s: Vec<Var> = (0..5).map(|i| t.index(v, i)).collect();
            Ok(irm_penalty(t, s[0], &s[1..])?)
        },
        &x,
        FD_STEP,
    )
}

/// Worst relative gradient error of each loss over `instances` random inputs.
pub fn gradient_errors(seed: u64, instances: usize) -> GradReport {
    let mut r = rng(seed);
    let mut rep = GradReport::default();
    for _ in 0..instances {
        rep.proxy = rep.proxy.max(proxy_instance(&mut r).unwrap());
        rep.nil = rep.nil.max(nil_instance(&mut r).unwrap());
        rep.ce = rep.ce.max(ce_instance(&mut r).unwrap());
        rep.penalty = rep.penalty.max(penalty_instance(&mut r).unwrap());
    }
    rep
}

/// `ln sum exp(w s) - w s_+` for one anchor score and its environment.
pub fn dummy_scaled_loss(w: f64, positive: f64, negatives: &[f64]) -> f64 {
    let mut z = (w * positive).exp();
    for s in negatives {
        z += (w * s).exp();
    }
    z.ln() - w * positive
}

/// Worst `|penalty - (dl/dw at 1)^2|` over `sets` random score sets.
pub fn penalty_fd_error(seed: u64, sets: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..sets {
        let k = r.gen_range(1..8);
        let pos = r.gen_range(-2.0..2.0);
        let negs = rand_vec(&mut r, k, -2.0, 2.0);
        let h = FD_STEP;
        let d = (dummy_scaled_loss(1.0 + h, pos, &negs) - dummy_scaled_loss(1.0 - h, pos, &negs)) / (2.0 * h);
        let mut t = Tape::new();
        let p = t.constant(vec![], vec![pos]);
        let n: Vec<Var> = negs.iter().map(|v| t.constant(vec![], vec![*v])).collect();
        let pen = irm_penalty(&mut t, p, &n).unwrap();
        worst = worst.max((t.item(pen) - d * d).abs());
        worst = worst.max((irm_penalty_value(pos, &negs) - d * d).abs());
    }
    worst
}

/// Property violations over `cases` random `build_environments` calls.
pub fn partition_violations(seed: u64, cases: usize) -> Vec<String> {
    let mut r = rng(seed);
    let mut bad = Vec::new();
    for case in 0..cases {
        let n = r.gen_range(1..40);
        let k_n = r.gen_range(1..8);
        let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 3 + 1).collect();
        ids.shuffle(&mut r);
        // Coarse grid so ties occur.
        let scores: Vec<(u64, f64)> = ids.iter().map(|id| (*id, r.gen_range(-8i32..8) as f64 / 4.0)).collect();
        bad.extend(partition_case(case, &scores, k_n, &mut r));
    }
    bad
}

pub fn partition_case(case: usize, scores: &[(u64, f64)], k_n: usize, r: &mut ChaCha8Rng) -> Vec<String> {
    let mut bad = Vec::new();
    let p = build_environments(0, scores, k_n).unwrap();
    let mut seen: Vec<u64> = p.environments.iter().flatten().copied().collect();
    let flat = seen.clone();
    seen.sort();
    let mut want: Vec<u64> = scores.iter().map(|s| s.0).collect();
    want.sort();
    if seen != want {
        bad.push(format!("case {case}: environments are not a partition of the input"));
    }
    let by_id: std::collections::HashMap<u64, f64> = scores.iter().copied().collect();
    for w in flat.windows(2) {
        let (a, b) = (by_id[&w[0]], by_id[&w[1]]);
        if a < b || (a == b && w[0] > w[1]) {
            bad.push(format!("case {case}: order broken at {} -> {}", w[0], w[1]));
        }
    }
    let sizes: Vec<usize> = p.environments.iter().map(Vec::len).collect();
    let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
    if hi - lo > 1 || sizes.windows(2).any(|w| w[0] < w[1]) || sizes.contains(&0) {
        bad.push(format!("case {case}: unbalanced sizes {sizes:?}"));
    }
    if p.len() != k_n.min(scores.len()) {
        bad.push(format!("case {case}: {} environments for k_n={k_n}, n={}", p.len(), scores.len()));
    }
    let mut shuffled = scores.to_vec();
    shuffled.shuffle(r);
    if build_environments(0, &shuffled, k_n).unwrap() != p || build_environments(0, scores, k_n).unwrap() != p {
        bad.push(format!("case {case}: not deterministic"));
    }
    bad
}

/// Binary DAG on `n` nodes with logistic CPTs, every parent having a
/// strong effect in every context.
pub fn logistic_dag(r: &mut ChaCha8Rng, n: usize, p_edge: f64) -> CausalDag {
    let names: Vec<String> = (0..n).map(|i| format!("V{i}")).collect();
    let mut edges = Vec::new();
    for j in 0..n {
        for i in 0..j {
            if r.gen_bool(p_edge) {
                edges.push((names[i].as_str(), names[j].as_str()));
            }
        }
    }
    let nodes: Vec<(&str, usize)> = names.iter().map(|s| (s.as_str(), 2)).collect();
    let mut dag = CausalDag::new(&nodes, &edges).unwrap();
    for (v, name) in names.iter().enumerate() {
        let k = dag.parents(v).len();
        let bias = r.gen_range(-1.0..1.0);
        let w: Vec<f64> = (0..k)
            .map(|_| r.gen_range(1.0..2.5) * if r.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let mut table = Vec::new();
        for row in 0..1usize << k {
            let st = digits(row, &vec![2; k]);
            let a = bias + st.iter().zip(&w).map(|(s, w)| *s as f64 * w).sum::<f64>();
            let p1 = 1.0 / (1.0 + (-a).exp());
            table.push(1.0 - p1);
            table.push(p1);
        }
        dag.set_cpt(name, table).unwrap();
    }
    dag
}

#[derive(Debug, Clone, Default)]
pub struct CausalReport {
    pub models: usize,
    pub adjustments: usize,
    pub adjust_err: f64,
    pub oracle_err: f64,
    pub dsep_queries: usize,
    pub dsep_mismatches: Vec<String>,
}

pub const MI_ZERO: f64 = 1e-10;

/// Backdoor adjustment against interventional enumeration, and d-separation
/// against exact conditional mutual information, on `models` random DAGs.
pub fn causal_check(seed: u64, models: usize) -> CausalReport {
    let mut r = rng(seed);
    let mut rep = CausalReport::default();
    while rep.models < models {
        let n = r.gen_range(2..=6);
        let dag = logistic_dag(&mut r, n, 0.5);
        let cards = vec![2; n];
        let joint = joint_by_product(&dag, None);
        let x = r.gen_range(0..n - 1);
        let y = r.gen_range(x + 1..n);
        let (xn, yn) = (dag.name(x).to_string(), dag.name(y).to_string());
        let others: Vec<usize> = (0..n).filter(|v| *v != x && *v != y).collect();
        let subsets: Vec<Vec<usize>> = (0..1usize << others.len())
            .map(|m| others.iter().enumerate().filter(|(b, _)| m >> b & 1 == 1).map(|(_, v)| *v).collect())
            .collect();
        let mut admissible = 0;
        for z in &subsets {
            let zn: Vec<&str> = z.iter().map(|v| dag.name(*v)).collect();
            if !dag.backdoor_criterion(&xn, &yn, &zn).unwrap() {
                continue;
            }
            admissible += 1;
            rep.adjustments += 1;
            for value in 0..2 {
                let oracle = dag.interventional_oracle(&xn, value, &yn).unwrap();
                let adj = dag.backdoor_adjust(&xn, value, &yn, &zn).unwrap();
                rep.adjust_err = rep.adjust_err.max(adj.max_abs_diff(&oracle));
                let truncated = marginal_of(&joint_by_product(&dag, Some((x, value))), &cards, y);
                for (a, b) in oracle.probs.iter().zip(&truncated) {
                    rep.oracle_err = rep.oracle_err.max((a - b).abs());
                }
            }
        }
        if admissible == 0 {
            continue;
        }
        for a in 0..n {
            for b in a + 1..n {
                let rest: Vec<usize> = (0..n).filter(|v| *v != a && *v != b).collect();
                for m in 0..1usize << rest.len() {
                    let z: Vec<usize> = rest.iter().enumerate().filter(|(i, _)| m >> i & 1 == 1).map(|(_, v)| *v).collect();
                    let zn: Vec<&str> = z.iter().map(|v| dag.name(*v)).collect();
                    let sep = dag.d_separated(dag.name(a), dag.name(b), &zn).unwrap();
                    let mi = conditional_mi(&joint, &cards, a, b, &z);
                    rep.dsep_queries += 1;
                    if sep != (mi < MI_ZERO) {
                        rep.dsep_mismatches.push(format!("{} _|_ {} | {zn:?}: d-sep {sep}, MI {mi:e}", dag.name(a), dag.name(b)));
                    }
                }
            }
        }
        rep.models += 1;
    }
    rep
}

fn entry(t: &mut Tape, id: u64, label: usize, feature: &[f64]) -> BatchEntry {
    let fmap = t.constant(vec![feature.len(), 1, 1], feature.to_vec());
    let pooled = t.global_avg_pool(fmap);
    BatchEntry {
        sample_id: id,
        label,
        predicted: label,
        feature_map: fmap,
        pooled,
        mask: vec![1.0],
    }
}

/// Each degenerate input with whether its contract held.
pub fn degenerate_suite() -> Vec<(&'static str, bool)> {
    let mut out = Vec::new();

    // Single-class batch under FULL: the noise-invariance term is exactly 0.
    let single = {
        let mut t = Tape::new();
        let feats = [[1.0, 0.5, 0.2], [0.3, 0.9, 0.1], [0.7, 0.7, 0.7]];
        let entries: Vec<BatchEntry> = feats.iter().enumerate().map(|(i, f)| entry(&mut t, i as u64, 1, f)).collect();
        let logits: Vec<Var> = (0..3).map(|i| t.constant(vec![2], vec![0.1 * i as f64, 0.2])).collect();
        let pooled = entries.iter().map(|e| e.pooled).collect();
        let batch = PreparedBatch {
            group: BatchGroup::new(entries),
            logits,
            pooled,
            labels: vec![1; 3],
        };
        let mut bank = ProxyBank::from_proxies(
            vec![
                Tensor::new(vec![3], vec![1.0, 0.0, 0.0]).unwrap(),
                Tensor::new(vec![3], vec![0.0, 1.0, 0.0]).unwrap(),
            ],
            ProxyConfig::default(),
        );
        let vars = bank.attach(&mut t);
        let config = TrainConfig {
            mode: Mode::Full,
            ..TrainConfig::default()
        };
        matches!(total_loss(&mut t, &batch, 2, Some((&mut bank, &vars)), &config, false),
            Ok(l) if l.breakdown.nil == 0.0 && l.breakdown.proxy.is_finite())
    };
    out.push(("single-class batch gives a zero noise-invariance term", single));

    let zero = {
        let mut t = Tape::new();
        let f = t.constant(vec![3], vec![0.0; 3]);
        let p = t.constant(vec![3], vec![1.0, 0.0, 0.0]);
        let q = t.constant(vec![3], vec![0.0, 1.0, 0.0]);
        matches!(t.l2n(f), Err(AutodiffError::ZeroVector(_)))
            && matches!(
                virtual_noise_measure(&mut t, f, p, q),
                Err(NilError::Autodiff(AutodiffError::ZeroVector(_)))
            )
            && matches!(t.cosine_sim(f, p), Err(AutodiffError::ZeroVector(_)))
    };
    out.push(("zero-vector feature raises ZeroVector", zero));

    let constant_cam = {
        let w = Tensor::new(vec![2, 3], vec![0.5, -0.2, 0.1, 0.3, 0.3, 0.3]).unwrap();
        let flat = cam_mask(&w, &[2.0; 12], &[3, 2, 2], &[0.1, 0.9]).unwrap();
        let zero = cam_mask(&w, &[0.0; 12], &[3, 2, 2], &[0.9, 0.1]).unwrap();
        flat == vec![1.0; 4] && zero == vec![1.0; 4]
    };
    out.push(("constant CAM gives an all-ones mask", constant_cam));

    let short = {
        let p = build_environments(0, &[(4, 0.2), (9, 0.7)], 3).unwrap();
        p.environments == vec![vec![9], vec![4]]
    };
    out.push(("|S| < K_n drops empty environments", short));

    let history = [-1.0, -0.3, 0.0, 0.4, 1.0]
        .iter()
        .all(|d| [0.5, 1.0, 2.0, 7.0].iter().all(|rho| instance_weight(*d, None, *rho, 0.05) == 1.0));
    out.push(("no-history lambda is 1", history));

    out
}
