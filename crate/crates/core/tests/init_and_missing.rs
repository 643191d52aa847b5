mod common;

use common::*;
use proptest::prelude::*;
use rep_core::data::Sample;
use rep_core::math::Tensor;
use rep_core::missing::*;
use rep_core::rep::{
    embedding_summary, init_private_buffer, init_shared_buffer, Components, NoiseType, RepState,
};
use rep_core::rng::SeedTree;

fn std_dev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[test]
fn private_perturbation_std_matches_intensity() {
    let summary = Tensor::filled(&[100, 100], 0.7);
    for noise in [NoiseType::Gaussian, NoiseType::Uniform, NoiseType::Laplace] {
        for eps in [0.1, 0.2, 0.3] {
            let out = init_private_buffer(&summary, eps, noise, &SeedTree::new(17), 0).unwrap();
            let deltas: Vec<f64> = out.data().iter().map(|v| v - 0.7).collect();
            let (mean, sd) = std_dev(&deltas);
            assert!((sd / eps - 1.0).abs() <= 0.03, "{noise:?} eps={eps}: std {sd}");
            assert!(mean.abs() < 0.05 * eps, "{noise:?}: mean {mean}");
        }
    }
}

#[test]
fn zero_intensity_reproduces_the_embedding_seed() {
    let bb = backbone(2, 8, 1);
    let calib = samples(&bb.config, 8, 2);
    for m in 0..2 {
        let summary = embedding_summary(&bb, &calib, m, 3).unwrap();
        for noise in [NoiseType::Gaussian, NoiseType::Uniform, NoiseType::Laplace] {
            let out = init_private_buffer(&summary, 0.0, noise, &SeedTree::new(5), m).unwrap();
            assert!(out.bitwise_eq(&summary));
        }
    }

    // and through the full state init
    let config = rep_core::rep::RepConfig {
        noise_intensity: 0.0,
        ..rep_config(3, 2, Components::full())
    };
    let state = RepState::init(&config, &bb, &calib, &SeedTree::new(9)).unwrap();
    for m in 0..2 {
        let summary = embedding_summary(&bb, &calib, m, 3).unwrap();
        assert!(state.private[m].bitwise_eq(&summary));
    }
}

#[test]
fn embedding_summary_is_the_mean_embedding() {
    let bb = backbone(1, 8, 3);
    let calib = samples(&bb.config, 6, 4);
    for m in 0..2 {
        let summary = embedding_summary(&bb, &calib, m, 2).unwrap();
        let enc = &bb.encoders[m];
        let mut oracle = vec![0.0; 8];
        for s in &calib {
            let x = &s.features[m];
            for t in 0..x.rows() {
                for j in 0..8 {
                    let mut e = enc.pos.get(t, j);
                    for i in 0..x.cols() {
                        e += x.get(t, i) * enc.embed.get(i, j);
                    }
                    oracle[j] += e / (calib.len() * x.rows()) as f64;
                }
            }
        }
        for r in 0..2 {
            for j in 0..8 {
                assert!((summary.get(r, j) - oracle[j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn modalities_get_independent_perturbations() {
    let summary = Tensor::zeros(&[50, 50]);
    let seeds = SeedTree::new(8);
    let a = init_private_buffer(&summary, 1.0, NoiseType::Gaussian, &seeds, 0).unwrap();
    let b = init_private_buffer(&summary, 1.0, NoiseType::Gaussian, &seeds, 1).unwrap();
    let corr: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>() / (a.norm() * b.norm());
    assert!(corr.abs() < 0.05, "correlation {corr}");
}

#[test]
fn shared_buffer_lies_on_the_unit_sphere() {
    let mut all = Vec::new();
    for seed in 0..200 {
        let t = init_shared_buffer(4, 16, &mut SeedTree::new(seed).stream("shared")).unwrap();
        assert!((t.norm() - 1.0).abs() <= 1e-6);
        all.extend_from_slice(t.data());
    }
    // coordinates are symmetric around zero with variance 1 / (l·d)
    let (mean, sd) = std_dev(&all);
    assert!(mean.abs() < 0.05);
    assert!((sd * 8.0 - 1.0).abs() < 0.05, "std {sd}");
}

#[test]
fn even_split_of_a_full_budget() {
    let scenario = Scenario::Multi {
        modalities: vec![0, 1],
        rate: 1.0,
    };
    for seed in 0..20 {
        let p = sample_missing_pattern(100, 2, &scenario, &mut SeedTree::new(seed).stream("p")).unwrap();
        assert_eq!(p.counts(), vec![50, 50]);
        assert!(p.flags.iter().all(|row| row.iter().filter(|&&f| f).count() == 1));
    }
}

#[test]
fn single_rate_is_exact() {
    for m in 0..2 {
        let scenario = Scenario::Single { modality: m, rate: 0.7 };
        let p = sample_missing_pattern(100, 2, &scenario, &mut SeedTree::new(3).stream("p")).unwrap();
        let mut want = vec![0, 0];
        want[m] = 70;
        assert_eq!(p.counts(), want);
    }
}

fn bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

#[test]
fn placeholders_are_byte_stable() {
    let expected_text: Vec<f64> = {
        let mut v = vec![0.0; 4 * 6];
        v[0] = 1.0;
        v[7] = 1.0;
        v
    };
    for _ in 0..3 {
        assert_eq!(bytes(&placeholder(ModalityKind::Text, 4, 6)), bytes(&Tensor::new(vec![4, 6], expected_text.clone()).unwrap()));
        assert_eq!(bytes(&placeholder(ModalityKind::Image, 4, 6)), bytes(&Tensor::ones(&[4, 6])));
        assert_eq!(bytes(&placeholder(ModalityKind::Audio, 4, 6)), bytes(&Tensor::zeros(&[4, 6])));
    }
}

#[test]
fn applying_a_pattern_twice_changes_nothing() {
    let cfg = backbone_config(1, 4);
    let data = samples(&cfg, 40, 6);
    let kinds = [ModalityKind::Image, ModalityKind::Text];
    let scenario = Scenario::Multi {
        modalities: vec![0, 1],
        rate: 0.6,
    };
    let p = sample_missing_pattern(40, 2, &scenario, &mut SeedTree::new(4).stream("p")).unwrap();
    let once = p.apply(&data, &kinds).unwrap();
    let twice = p.apply(&once, &kinds).unwrap();
    assert_eq!(once, twice);
    for ((orig, masked), flags) in data.iter().zip(&once).zip(&p.flags) {
        for m in 0..2 {
            let same = orig.features[m] == masked.features[m];
            assert_eq!(same, !flags[m]);
        }
        assert_eq!(orig.label, masked.label);
    }
}

fn scenario_strategy() -> impl Strategy<Value = Scenario> {
    prop_oneof![
        (0usize..3, 0.0f64..=1.0).prop_map(|(modality, rate)| Scenario::Single { modality, rate }),
        (prop::sample::subsequence(vec![0usize, 1, 2], 1..=3), 0.0f64..=1.0)
            .prop_map(|(modalities, rate)| Scenario::Multi { modalities, rate }),
    ]
}

proptest! {
    #[test]
    fn realized_rates_are_within_one_sample(n in 1usize..300, scenario in scenario_strategy(), seed in any::<u64>()) {
        let p = sample_missing_pattern(n, 3, &scenario, &mut SeedTree::new(seed).stream("p")).unwrap();
        let realized = p.verify_missing_statistics();
        let requested = scenario.requested_rates(3);
        for (r, q) in realized.iter().zip(&requested) {
            prop_assert!((r - q).abs() <= 1.0 / n as f64 + 1e-12, "{realized:?} vs {requested:?}");
        }
        if let Scenario::Multi { .. } = scenario {
            prop_assert!(p.flags.iter().all(|row| row.iter().filter(|&&f| f).count() <= 1));
        }
    }

    #[test]
    fn patterns_are_deterministic(n in 1usize..100, seed in any::<u64>()) {
        let s = Scenario::Multi { modalities: vec![0, 1], rate: 0.7 };
        let a = sample_missing_pattern(n, 2, &s, &mut SeedTree::new(seed).stream("p")).unwrap();
        let b = sample_missing_pattern(n, 2, &s, &mut SeedTree::new(seed).stream("p")).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn placeholder_replaces_only_the_flagged_modality() {
    let sample = Sample {
        features: vec![Tensor::filled(&[2, 3], 0.5), Tensor::filled(&[2, 3], 0.5)],
        label: 0,
    };
    let kinds = [ModalityKind::Image, ModalityKind::Text];
    let out = apply_placeholder(&sample, &[false, true], &kinds).unwrap();
    assert_eq!(out.features[0], sample.features[0]);
    assert_eq!(out.features[1], placeholder(ModalityKind::Text, 2, 3));
}
