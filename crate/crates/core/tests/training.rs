mod common;

use common::{cam, ce_mean, rng, unit};
use invtrain::datagen::{generate, Sample, Split};
use invtrain::proxy::{ProxyBank, ProxyConfig};
use invtrain::train::{evaluate, prepare_batch, total_loss, train_run, PreparedBatch, LOG_FILE};
use invtrain::{ablate, AblationGrid, Checkpoint, ChipSpec, Dataset, Mode, Network, Tape, Tensor, TrainConfig, TrainError};
use rand::Rng;

fn tiny_spec(seed: u64) -> ChipSpec {
    ChipSpec {
        side: 16,
        num_classes: 3,
        shots_per_class: 4,
        test_per_class: 3,
        seed,
        ..ChipSpec::default()
    }
}

fn tiny_config(mode: Mode, epochs: usize, warmup: usize) -> TrainConfig {
    TrainConfig {
        mode,
        epochs,
        warmup_epochs: warmup,
        batch_size: 5,
        ..TrainConfig::default()
    }
}

struct Recomputed {
    ce: f64,
    proxy: f64,
    nil_proxies: f64,
    nil_prototypes: f64,
    supcon: f64,
}

/// Every loss term of a batch recomputed from plain values: logits, feature
/// maps and fc weights are read off the tape, everything else is redone.
fn recompute(tape: &Tape, net: &Network, batch: &PreparedBatch, proxies: &[Vec<f64>], samples: &[&Sample]) -> Recomputed {
    let cfg = *net.config();
    let ch = cfg.feature_channels;
    let w = net.fc_weights().data();
    let logits: Vec<Vec<f64>> = batch.logits.iter().map(|z| tape.value(*z).to_vec()).collect();
    let entries: Vec<_> = batch.group.entries().cloned().collect();
    let mut fmaps = std::collections::HashMap::new();
    for e in &entries {
        fmaps.insert(e.sample_id, tape.value(e.feature_map).to_vec());
    }
    let mut proxy_samples = Vec::new();
    let mut pooled = Vec::new();
    for (s, z) in samples.iter().zip(&logits) {
        let pred = (0..z.len()).fold(0, |b, i| if z[i] > z[b] { i } else { b });
        let f = &fmaps[&s.id];
        let hw = f.len() / ch;
        pooled.push((s.id, s.label, (0..ch).map(|c| f[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64).collect::<Vec<f64>>()));
        proxy_samples.push(common::ProxySample {
            label: s.label,
            predicted: pred,
            channels: ch,
            fmap: f.clone(),
            mask: cam(w, ch, f, pred),
            lambda: 1.0,
        });
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let mut protos = vec![vec![1.0 / (ch as f64).sqrt(); ch]; cfg.num_classes];
    for (c, p) in protos.iter_mut().enumerate() {
        let members: Vec<&Vec<f64>> = pooled.iter().filter(|x| x.1 == c).map(|x| &x.2).collect();
        if !members.is_empty() {
            let mean: Vec<f64> = (0..ch).map(|d| members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64).collect();
            *p = unit(&mean);
        }
    }
    let feats: Vec<Vec<f64>> = pooled.iter().map(|x| x.2.clone()).collect();
    Recomputed {
        ce: ce_mean(&logits, &labels),
        proxy: common::proxy_loss(&proxy_samples, proxies, 1.0),
        nil_proxies: common::nil_loss(&pooled, proxies, 3),
        nil_prototypes: common::nil_loss(&pooled, &protos, 3),
        supcon: common::supcon(&feats, &labels, 0.5),
    }
}

fn random_bank(dim: usize, classes: usize, seed: u64) -> (Vec<Vec<f64>>, ProxyBank) {
    let mut r = rng(seed);
    let proxies: Vec<Vec<f64>> = (0..classes)
        .map(|_| unit(&(0..dim).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
        .collect();
    let bank = ProxyBank::from_proxies(
        proxies.iter().map(|p| Tensor::new(vec![dim], p.clone()).unwrap()).collect(),
        ProxyConfig::default(),
    );
    (proxies, bank)
}

#[test]
fn total_loss_decomposes_and_matches_recomputation() {
    let ds = generate(&tiny_spec(1)).unwrap();
    let train = ds.samples(Split::Train);
    let batch: Vec<&Sample> = train.iter().step_by(2).collect();
    let mut r = rng(2);
    let net = Network::new(tiny_config(Mode::Full, 1, 0).network_config(16, 3), &mut r).unwrap();
    let dim = net.config().feature_channels;
    let (proxies, _) = random_bank(dim, 3, 3);

    for mode in Mode::ALL {
        let (_, mut bank) = random_bank(dim, 3, 3);
        let config = tiny_config(mode, 1, 0);
        let mut tape = Tape::new();
        let vars = net.attach(&mut tape);
        let prepared = prepare_batch(&mut tape, &net, &vars, &batch).unwrap();
        let pv = bank.attach(&mut tape);
        let loss = total_loss(&mut tape, &prepared, 3, Some((&mut bank, &pv)), &config, false).unwrap();
        let b = loss.breakdown;
        assert_eq!(b.total, tape.item(loss.total));
        assert!((b.total - (b.ce + b.proxy + b.nil + b.contrastive)).abs() < 1e-12, "{mode}: {b:?}");

        let want = recompute(&tape, &net, &prepared, &proxies, &batch);
        assert!((b.ce - want.ce).abs() < 1e-9, "{mode} ce");
        match mode {
            Mode::V1 => {
                assert_eq!(b.total, b.ce);
            }
            Mode::V2 => {
                assert_eq!((b.proxy, b.contrastive), (0.0, 0.0));
                assert!((b.nil - want.nil_prototypes).abs() < 1e-9, "{} vs {}", b.nil, want.nil_prototypes);
            }
            Mode::V3 => {
                assert_eq!(b.nil, 0.0);
                assert!((b.proxy - want.proxy).abs() < 1e-9, "{} vs {}", b.proxy, want.proxy);
                assert!((b.contrastive - want.supcon).abs() < 1e-9);
            }
            Mode::Full => {
                assert_eq!(b.contrastive, 0.0);
                assert!((b.proxy - want.proxy).abs() < 1e-9, "{} vs {}", b.proxy, want.proxy);
                assert!((b.nil - want.nil_proxies).abs() < 1e-9, "{} vs {}", b.nil, want.nil_proxies);
            }
        }
    }
}

#[test]
fn warmup_touches_only_cross_entropy() {
    let ds = generate(&tiny_spec(4)).unwrap();
    let train = ds.samples(Split::Train);
    let batch: Vec<&Sample> = train.iter().collect();
    let net = Network::new(tiny_config(Mode::Full, 1, 0).network_config(16, 3), &mut rng(5)).unwrap();
    let (_, mut bank) = random_bank(net.config().feature_channels, 3, 6);
    let before = bank.clone();
    let mut tape = Tape::new();
    let vars = net.attach(&mut tape);
    let prepared = prepare_batch(&mut tape, &net, &vars, &batch).unwrap();
    let pv = bank.attach(&mut tape);
    let config = tiny_config(Mode::Full, 1, 0);
    let loss = total_loss(&mut tape, &prepared, 3, Some((&mut bank, &pv)), &config, true).unwrap();
    assert_eq!(loss.breakdown.total, loss.breakdown.ce);
    tape.backward(loss.total).unwrap();
    for v in &pv {
        assert!(tape.grad(*v).is_none_or(|g| g.iter().all(|x| *x == 0.0)));
    }
    assert_eq!(bank, before);

    let mut tape = Tape::new();
    let vars = net.attach(&mut tape);
    let prepared = prepare_batch(&mut tape, &net, &vars, &batch).unwrap();
    assert!(matches!(
        total_loss(&mut tape, &prepared, 3, None, &config, false),
        Err(TrainError::Uninitialized)
    ));
}

#[test]
fn runs_are_byte_identical() {
    let ds = generate(&tiny_spec(7)).unwrap();
    let config = tiny_config(Mode::Full, 4, 2);
    let a = train_run(&config, &ds).unwrap();
    let b = train_run(&config, &ds).unwrap();
    assert_eq!(a.log_jsonl().unwrap(), b.log_jsonl().unwrap());
    assert_eq!(a.checkpoint().to_bytes().unwrap(), b.checkpoint().to_bytes().unwrap());
    let other = train_run(&TrainConfig { seed: 1, ..config }, &ds).unwrap();
    assert_ne!(a.checkpoint().to_bytes().unwrap(), other.checkpoint().to_bytes().unwrap());
}

#[test]
fn schedule_and_phases_show_in_the_log() {
    let spec = ChipSpec {
        num_classes: 2,
        shots_per_class: 2,
        test_per_class: 1,
        ..tiny_spec(8)
    };
    let ds = generate(&spec).unwrap();
    let out = train_run(&tiny_config(Mode::Full, 60, 10), &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.write_to(dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 60);
    assert_eq!(lines[0]["lr"].as_f64(), Some(0.01));
    assert_eq!(lines[25]["lr"].as_f64(), Some(0.001));
    assert_eq!(lines[50]["lr"].as_f64(), Some(0.0001));
    for (e, l) in out.log.iter().enumerate() {
        assert_eq!(l.epoch, e);
        if e < 10 {
            assert_eq!(l.phase, "warmup");
            assert_eq!((l.loss_proxy, l.loss_nil, l.loss_contrastive), (0.0, 0.0, 0.0));
            assert_eq!(l.loss_total, l.loss_ce);
        } else {
            assert_eq!(l.phase, "main");
            assert!(l.loss_proxy < 0.0);
        }
    }
    assert_eq!(out.log.last().unwrap().test_accuracy, out.metrics.accuracy);
}

#[test]
fn evaluate_matches_hand_count() {
    let ds = generate(&tiny_spec(9)).unwrap();
    let net = Network::new(tiny_config(Mode::V1, 1, 0).network_config(16, 3), &mut rng(10)).unwrap();
    let ckpt = Checkpoint::new(&net, &[], serde_json::json!({}));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    ckpt.save(&path).unwrap();
    let m = evaluate(&Checkpoint::load(&path).unwrap(), &ds, Split::Test).unwrap();

    let test = ds.samples(Split::Test);
    let mut confusion = [[0usize; 3]; 3];
    for s in &test {
        confusion[s.label][net.predict(&s.image).unwrap()] += 1;
    }
    let trace: usize = (0..3).map(|c| confusion[c][c]).sum();
    assert_eq!(m.accuracy, trace as f64 / test.len() as f64);
    let mut f1_sum = 0.0;
    for c in 0..3 {
        let tp = confusion[c][c] as f64;
        let row: usize = confusion[c].iter().sum();
        let col: usize = (0..3).map(|r| confusion[r][c]).sum();
        let rec = if row == 0 { 0.0 } else { tp / row as f64 };
        let prec = if col == 0 { 0.0 } else { tp / col as f64 };
        f1_sum += if rec + prec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
        assert_eq!(m.confusion[c], confusion[c].to_vec());
    }
    assert!((m.macro_f1 - f1_sum / 3.0).abs() < 1e-15);

    let wrong = generate(&ChipSpec { num_classes: 4, ..tiny_spec(9) }).unwrap();
    assert!(matches!(evaluate(&ckpt, &wrong, Split::Test), Err(TrainError::Incompatible(_))));
}

#[test]
fn checkpoint_roundtrip_preserves_predictions() {
    let ds = generate(&tiny_spec(11)).unwrap();
    let out = train_run(&tiny_config(Mode::V3, 3, 1), &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.write_to(dir.path()).unwrap();
    let ckpt = Checkpoint::load(&dir.path().join(invtrain::train::CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt.header.metadata["mode"], "V3");
    assert!(ckpt.tensor("proxy.0").is_some());
    let net = ckpt.network().unwrap();
    for s in ds.samples(Split::Test) {
        assert_eq!(net.infer(&s.image).unwrap(), out.network.infer(&s.image).unwrap());
    }
    assert_eq!(evaluate(&ckpt, &ds, Split::Test).unwrap(), out.metrics);
}

#[test]
fn exploding_learning_rate_is_reported() {
    let ds: Dataset = generate(&tiny_spec(12)).unwrap();
    let config = TrainConfig {
        lr0: 1e300,
        ..tiny_config(Mode::V1, 5, 0)
    };
    assert!(matches!(train_run(&config, &ds), Err(TrainError::Diverged { .. })));
}

#[test]
fn ablation_has_one_row_per_cell() {
    let base = tiny_spec(13);
    let config = tiny_config(Mode::Full, 2, 1);
    let grid = AblationGrid {
        modes: vec![Mode::V1, Mode::Full],
        shots: vec![2, 3],
        seeds: 2,
        threads: 1,
    };
    let table = ablate(&config, &base, &grid).unwrap();
    assert_eq!(table.rows.len(), 8);
    let csv = table.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 9);
    assert_eq!(lines[0], "mode,shots,seed,accuracy,acc_class_0,acc_class_1,acc_class_2");
    let summary = table.summary();
    assert_eq!(summary.len(), 4);
    assert!(summary.iter().all(|s| s.runs == 2));

    // Same cell alone gives the same accuracy: cells do not interact.
    let single = ablate(
        &config,
        &base,
        &AblationGrid {
            modes: vec![Mode::Full],
            shots: vec![3],
            seeds: 2,
            threads: 1,
        },
    )
    .unwrap();
    let pick = |t: &invtrain::AblationTable| t.rows.iter().find(|r| r.mode == Mode::Full && r.shots == 3 && r.seed == 1).unwrap().accuracy;
    assert_eq!(pick(&single), pick(&table));
    assert!(ablate(&config, &base, &AblationGrid { seeds: 0, ..grid }).is_err());
}
