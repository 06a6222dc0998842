use super::*;
use crate::subject::{build_subject, generate_dataset, DatasetConfig, SubjectConfig};

fn setup() -> (Subject, ContrastiveDataset) {
    let s = build_subject(&SubjectConfig::default(), 7).unwrap();
    let cfg = DatasetConfig {
        n_pos: 60,
        n_neg: 60,
        n_test_pos: 0,
        n_test_neg: 20,
    };
    let d = generate_dataset(&s, &cfg, 1).unwrap();
    (s, d)
}

#[test]
fn pairs_repeat_single_examples_and_are_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(sample_pairs(1, 1, 4, &mut rng).unwrap(), vec![(0, 0); 4]);
    let a = sample_pairs(7, 9, 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = sample_pairs(7, 9, 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
    assert!(sample_pairs(0, 3, 2, &mut rng).is_err());
}

#[test]
fn pair_marginals_are_uniform() {
    let (n_neg, n_pos, draws) = (5usize, 8usize, 100_000usize);
    let pairs = sample_pairs(n_neg, n_pos, draws, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    for (n, pick) in [(n_neg, 0usize), (n_pos, 1)] {
        let mut counts = vec![0usize; n];
        for p in &pairs {
            counts[if pick == 0 { p.0 } else { p.1 }] += 1;
        }
        let p = 1.0 / n as f64;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{c} vs {mean} ± {sd}");
        }
    }
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut adam = Adam::new(AdamConfig::default(), 2);
    let mut p = vec![1.0, -2.0];
    adam.step(&mut p, &[0.5, -3.0]);
    assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
    assert!((p[1] - (-2.0 + 1e-3)).abs() < 1e-9);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate(16).is_ok());
    assert!(TrainConfig { coords: vec![16], ..Default::default() }.validate(16).is_err());
    assert!(TrainConfig { coords: vec![1, 1], ..Default::default() }.validate(16).is_err());
    assert!(TrainConfig { tau: 0.5, ..Default::default() }.validate(16).is_err());
    assert!(TrainConfig { tau: 1.0, ..Default::default() }.validate(16).is_ok());
    let mut c = TrainConfig::default();
    c.arch.kappa = 1.0;
    assert!(c.validate(16).is_err());
    assert_eq!(TrainConfig::default().linear().arch.slope, 1.0);
}

#[test]
fn zero_steps_returns_the_initialization() {
    let (s, d) = setup();
    let cfg = TrainConfig { steps: 0, ..Default::default() };
    let t = train_fmap(&s, &d, &cfg).unwrap();
    let init = IResNetFeatureMap::init(s.dim(), &cfg.arch, cfg.inversion, cfg.seed).unwrap();
    assert_eq!(t.map, init);
    assert!(t.report.loss.is_empty());
    assert!(t.sites.len() >= 5);
}

#[test]
fn short_run_is_deterministic_and_leaves_the_subject_alone() {
    let (s, d) = setup();
    let digest = s.weights_digest();
    let cfg = TrainConfig { steps: 30, batch: 8, ..Default::default() };
    let a = train_fmap(&s, &d, &cfg).unwrap();
    let b = train_fmap(&s, &d, &cfg).unwrap();
    assert_eq!(s.weights_digest(), digest);
    assert_eq!(a.map, b.map);
    assert!(a.report.same_run(&b.report));
    assert_eq!(a.report.loss.len(), 30);
    assert_eq!(a.report.saturation[0].len(), a.sites.len());
    assert_eq!(a.report.mu_bar_plus.len(), 1);
}

#[test]
fn edited_state_carries_the_positive_coordinate() {
    let (s, d) = setup();
    let cfg = TrainConfig::default();
    let obj = Objective::new(&s, &d, &cfg).unwrap();
    let map = IResNetFeatureMap::init(s.dim(), &cfg.arch, cfg.inversion, 4).unwrap().compile();
    for (n, p) in [(0, 0), (3, 7), (11, 2)] {
        let h = obj.edited(&map, n, p).unwrap();
        let got = map.forward(&h).unwrap()[0];
        let want = map.forward(obj.h_plus(p)).unwrap()[0];
        let scale = map.forward(obj.h_minus(n)).unwrap().norm().max(1.0);
        assert!((got - want).abs() <= 10.0 * cfg.inversion.rel_tol * scale, "{got} vs {want}");
    }
}

#[test]
fn gradients_match_finite_differences_at_init() {
    let (s, d) = setup();
    let cfg = TrainConfig { batch: 8, ..Default::default() };
    let gc = grad_check(&s, &d, &cfg, 60).unwrap();
    assert!(gc.max_relative_error <= 1e-3, "{gc:?}");
}

#[test]
fn identity_map_gradients_match_finite_differences() {
    let (s, d) = setup();
    let cfg = TrainConfig { batch: 8, ..Default::default() };
    let obj = Objective::new(&s, &d, &cfg).unwrap();
    let mut map = IResNetFeatureMap::init(s.dim(), &cfg.arch, cfg.inversion, 0).unwrap();
    for b in &mut map.blocks {
        b.w2.fill(0.0);
    }
    let gc = grad_check_map(&obj, &map, 60, 8, 2).unwrap();
    assert!(gc.max_relative_error <= 1e-3, "{gc:?}");
}

#[test]
fn empty_supervision_gives_zero_gradient() {
    let (s, d) = setup();
    let cfg = TrainConfig { batch: 4, ..Default::default() };
    let mut obj = Objective::new(&s, &d, &cfg).unwrap();
    for e in &mut obj.sites.entries {
        e.mu_plus = f64::NEG_INFINITY;
    }
    let map = IResNetFeatureMap::init(s.dim(), &cfg.arch, cfg.inversion, 0).unwrap();
    let bg = obj.batch_gradient(&map, &[(0, 0), (1, 2), (5, 5)]).unwrap();
    assert_eq!(bg.loss, 0.0);
    assert!(bg.gradient.iter().all(|&g| g == 0.0));
}
