use nfuse::config::ExperimentConfig;
use nfuse::experiment::{dataset_for, init_model, train_and_evaluate};
use nfuse::harness::data::{generate_dataset, linear_probe, CorrelationMode, SyntheticTaskSpec};
use nfuse::harness::eval::{evaluate_all, paired_values};
use nfuse::harness::masks::{all_subsets, mask_for_sample, sample_missing_mask, MissingProtocol, Subset};
use nfuse::harness::rng;
use nfuse::harness::stats::wilcoxon_signed_rank;
use nfuse::harness::train::{TrainConfig, Trainer};
use nfuse::model::FuserKind;
use proptest::prelude::*;

fn spec(mode: CorrelationMode, noise_std: f64, seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec { correlation_mode: mode, noise_std, seed: Some(seed), ..SyntheticTaskSpec::default() }
}

#[test]
fn redundant_noiseless_modalities_are_each_linearly_separable() {
    let data = generate_dataset(&spec(CorrelationMode::Redundant, 0.0, 1)).unwrap();
    for k in 1..=4 {
        assert_eq!(linear_probe(&data.train, &data.test, k), 1.0, "modality {k}");
    }
}

#[test]
fn xor_pair_modalities_are_individually_uninformative() {
    let data = generate_dataset(&spec(CorrelationMode::XorPair, 0.0, 1)).unwrap();
    for k in 1..=4 {
        let acc = linear_probe(&data.train, &data.test, k);
        assert!(acc <= 0.6, "modality {k} probe accuracy {acc}");
    }
    assert!(data.probe_accuracy.iter().all(|&a| a <= 0.6), "{:?}", data.probe_accuracy);
}

#[test]
fn dataset_generation_is_deterministic() {
    for mode in [CorrelationMode::Redundant, CorrelationMode::Complementary, CorrelationMode::XorPair] {
        let a = generate_dataset(&spec(mode, 0.1, 9)).unwrap();
        let b = generate_dataset(&spec(mode, 0.1, 9)).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&spec(mode, 0.1, 10)).unwrap();
        assert_ne!(a.train.features, c.train.features);
    }
}

#[test]
fn missing_masks_are_uniform_over_the_fifteen_subsets() {
    let draws = 15_000;
    let mut counts = [0usize; 16];
    let mut r = rng::stream(7, "masks");
    for _ in 0..draws {
        let s = sample_missing_mask(4, &mut r);
        assert!(!s.is_empty() && s.max_id() <= 4);
        counts[s.bits() as usize] += 1;
    }
    assert_eq!(counts[0], 0);
    let expected = draws as f64 / 15.0;
    let mut chi2 = 0.0;
    for &c in &counts[1..] {
        assert!((c as f64 - expected).abs() <= 0.2 * expected, "count {c} vs {expected}");
        chi2 += (c as f64 - expected).powi(2) / expected;
    }
    // 0.999 quantile of chi-square with 14 degrees of freedom.
    assert!(chi2 < 36.12, "chi2 {chi2}");
    assert_eq!(all_subsets(4).len(), 15);
    for sample in 0..50 {
        assert_eq!(mask_for_sample(MissingProtocol::FixedPerSample, 1, 3, sample, 0), Subset::full(1));
    }
}

/// Two-sided p-value by enumerating all `2^n` sign assignments of the ranks.
fn brute_force_wilcoxon(deltas: &[f64]) -> Option<f64> {
    let nz: Vec<f64> = deltas.iter().copied().filter(|d| *d != 0.0).collect();
    if deltas.len() < 2 {
        return None;
    }
    if nz.is_empty() {
        return Some(1.0);
    }
    let mut order: Vec<usize> = (0..nz.len()).collect();
    order.sort_by(|&a, &b| nz[a].abs().partial_cmp(&nz[b].abs()).unwrap());
    let mut ranks = vec![0.0; nz.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && nz[order[j + 1]].abs() == nz[order[i]].abs() {
            j += 1;
        }
        for &o in &order[i..=j] {
            ranks[o] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    let observed: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let n = nz.len();
    let (mut le, mut ge) = (0u64, 0u64);
    for signs in 0u64..1 << n {
        let w: f64 = (0..n).filter(|b| signs >> b & 1 == 1).map(|b| ranks[b]).sum();
        if w <= observed + 1e-9 {
            le += 1;
        }
        if w >= observed - 1e-9 {
            ge += 1;
        }
    }
    let total = (1u64 << n) as f64;
    Some((2.0 * le.min(ge) as f64 / total).min(1.0))
}

#[test]
fn wilcoxon_degenerate_cases() {
    assert_eq!(wilcoxon_signed_rank(&[0.3]), None);
    assert_eq!(paired_values(vec![vec![1]], vec![0.3]).p_value, None);
    assert_eq!(wilcoxon_signed_rank(&[0.0; 15]), Some(1.0));
    let p = wilcoxon_signed_rank(&[1.0; 15]).unwrap();
    assert!(p < 0.05 && (p - 2.0 / 32768.0).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn wilcoxon_matches_exhaustive_enumeration(raw in proptest::collection::vec(-4i32..=4, 2..=14)) {
        // Small integer grid forces ties and zeros.
        let deltas: Vec<f64> = raw.iter().map(|&v| v as f64 * 0.25).collect();
        let fast = wilcoxon_signed_rank(&deltas);
        let slow = brute_force_wilcoxon(&deltas);
        match (fast, slow) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12, "{a} vs {b} for {deltas:?}"),
            (a, b) => prop_assert_eq!(a, b),
        }
    }
}

fn quick_config(seed: u64, fuser: FuserKind, steps: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { seed, fuser, ..ExperimentConfig::default() };
    cfg.train.steps = steps;
    cfg.resolved()
}

#[test]
fn untrained_models_sit_at_chance() {
    let mut total = 0.0;
    let seeds = 0..6u64;
    for seed in seeds.clone() {
        let cfg = quick_config(seed, FuserKind::Tfusion, 0);
        let data = dataset_for(&cfg).unwrap();
        let model = init_model::<f32>(&cfg).unwrap();
        total += evaluate_all(&model, &data.test, 4).unwrap().average;
    }
    let mean = total / seeds.end as f64;
    assert!((mean - 0.5).abs() <= 0.1, "untrained accuracy {mean}");
}

#[test]
fn training_halves_the_loss_on_the_redundant_task() {
    let mut cfg = quick_config(0, FuserKind::Tfusion, 2000);
    cfg.train.missing_protocol = MissingProtocol::Full;
    let data = dataset_for(&cfg).unwrap();
    let out = train_and_evaluate::<f32>(&cfg, &data).unwrap();
    let curve = &out.metrics.loss_curve;
    assert_eq!(curve.len(), 2000);
    let first = curve[0].loss;
    let tail = curve[curve.len() - 50..].iter().map(|p| p.loss).sum::<f64>() / 50.0;
    assert!(tail <= 0.5 * first, "loss {first} -> {tail}");
    assert!(out.metrics.table.rows.last().unwrap().accuracy >= 0.95);
}

#[test]
fn training_and_evaluation_are_bitwise_reproducible() {
    let cfg = quick_config(4, FuserKind::Tfusion, 60);
    let data = dataset_for(&cfg).unwrap();
    let a = train_and_evaluate::<f32>(&cfg, &data).unwrap();
    let b = train_and_evaluate::<f32>(&cfg, &data).unwrap();
    assert_eq!(serde_json::to_string(&a.metrics).unwrap(), serde_json::to_string(&b.metrics).unwrap());
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    let again = evaluate_all(&a.model, &data.test, 4).unwrap();
    assert_eq!(again, a.metrics.table);
}

#[test]
fn resumed_training_continues_the_same_trajectory() {
    let cfg = quick_config(2, FuserKind::Tfusion, 40);
    let data = dataset_for(&cfg).unwrap();
    let train = |t: &TrainConfig| Trainer::new(init_model::<f32>(&cfg).unwrap(), t, &data.train).unwrap();
    let mut straight = train(&cfg.train);
    let full = straight.run().unwrap();
    let mut first = train(&cfg.train);
    first.run_until(25).unwrap();
    let saved = nfuse::tensor::io::Archive::from_bytes(&first.checkpoint("").to_bytes().unwrap()).unwrap();
    let mut resumed = Trainer::resume(init_model::<f32>(&cfg).unwrap(), &cfg.train, &data.train, &saved).unwrap();
    let rest = resumed.run().unwrap();
    assert_eq!(rest.len(), 15);
    for (a, b) in full[25..].iter().zip(&rest) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }
}

#[test]
fn evaluation_rejects_subsets_beyond_the_dataset() {
    let cfg = quick_config(0, FuserKind::Mean, 0);
    let data = dataset_for(&cfg).unwrap();
    let model = init_model::<f32>(&cfg).unwrap();
    assert!(evaluate_all(&model, &data.test, 5).is_err());
}
