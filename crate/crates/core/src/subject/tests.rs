use super::*;
use crate::sites::auc;
use rand::Rng;

fn default_subject() -> Subject {
    build_subject(&SubjectConfig::default(), 7).unwrap()
}

fn input(s: &Subject, radius: f64, seed: u64) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    s.make_input(radius, angle, &mut rng)
}

#[test]
fn site_resolution() {
    assert_eq!(Site::new(2, -1).resolve(6, 8).unwrap(), (2, 7));
    assert_eq!(Site::new(2, -3).resolve(6, 8).unwrap(), (2, 5));
    assert_eq!(Site::new(0, 0).resolve(6, 8).unwrap(), (0, 0));
    assert!(matches!(Site::new(6, 0).resolve(6, 8), Err(Error::UnresolvableSite { .. })));
    assert!(Site::new(1, 8).resolve(6, 8).is_err());
    assert!(Site::new(1, -9).resolve(6, 8).is_err());
}

#[test]
fn config_validation_names_the_field() {
    for (cfg, field) in [
        (SubjectConfig { layers: 3, ..Default::default() }, "layers"),
        (SubjectConfig { dim: 6, ..Default::default() }, "dim"),
        (SubjectConfig { r0: 0.0, ..Default::default() }, "r0"),
        (SubjectConfig { r0: -1.0, ..Default::default() }, "r0"),
        (SubjectConfig { planted_layer: 4, ..Default::default() }, "planted_layer"),
    ] {
        let err = build_subject(&cfg, 7).unwrap_err().to_string();
        assert!(err.contains(field), "{err}");
    }
}

#[test]
fn labels_follow_the_planted_radius() {
    let s = default_subject();
    for seed in 0..20 {
        assert_eq!(s.forward(&input(&s, 0.5, seed)).unwrap().behavior, Behavior::Refuse);
        assert_eq!(s.forward(&input(&s, 1.5, seed)).unwrap().behavior, Behavior::Comply);
    }
}

#[test]
fn planted_invariant_on_random_inputs() {
    let s = default_subject();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (lo, hi) = s.config().radius_range;
    for _ in 0..10_000 {
        let r = rng.random_range(lo..hi);
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let tokens = s.make_input(r, a, &mut rng);
        let run = s.forward(&tokens).unwrap();
        s.check_planted(&run).unwrap();
        let (l, t) = s.resolve(&s.planted_site()).unwrap();
        assert!((s.plane_radius(run.trace.at(l, t)) - r).abs() < 1e-12);
    }
}

#[test]
fn overwriting_the_radius_flips_refusals() {
    let s = default_subject();
    let site = s.planted_site();
    let [x, y] = s.layout().plane;
    let target = 2.0 * s.r0();
    let oracle = move |h: &Vector| -> Result<Vector> {
        let r = h[x].hypot(h[y]);
        let mut out = h.clone();
        out[x] *= target / r;
        out[y] *= target / r;
        Ok(out)
    };
    let mut flipped = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let r = rng.random_range(0.3..1.0);
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let tokens = s.make_input(r, a, &mut rng);
        let run = s.forward_with_hooks(&tokens, &[Edit::new(site, &oracle)]).unwrap();
        assert_eq!(run.edits.len(), 1);
        flipped += (run.behavior == Behavior::Comply) as usize;
    }
    assert_eq!(flipped, 1000);
}

#[test]
fn identity_edit_changes_nothing() {
    let s = default_subject();
    let tokens = input(&s, 0.8, 3);
    let plain = s.forward(&tokens).unwrap();
    let id = |h: &Vector| -> Result<Vector> { Ok(h.clone()) };
    let hooked = s.forward_with_hooks(&tokens, &[Edit::new(Site::new(2, -3), &id)]).unwrap();
    assert_eq!(plain.trace, hooked.trace);
    assert_eq!(plain.score, hooked.score);
}

#[test]
fn edits_only_reach_their_causal_cone() {
    let s = default_subject();
    let tokens = input(&s, 0.8, 4);
    let plain = s.forward(&tokens).unwrap();
    let bump = |h: &Vector| -> Result<Vector> { Ok(h.add_scalar(0.3)) };
    let hooked = s.forward_with_hooks(&tokens, &[Edit::new(Site::new(1, 4), &bump)]).unwrap();
    for l in 0..s.n_layers() {
        for t in 0..s.seq_len() {
            let same = plain.trace.at(l, t) == hooked.trace.at(l, t);
            if l < 1 || t < 4 || (l == 1 && t > 4) {
                assert!(same, "({l}, {t}) changed");
            }
        }
    }
    assert_ne!(plain.trace.at(1, 4), hooked.trace.at(1, 4));
}

#[test]
fn bad_edits_are_rejected() {
    let s = default_subject();
    let tokens = input(&s, 0.8, 4);
    let short = |_: &Vector| -> Result<Vector> { Ok(Vector::zeros(3)) };
    assert!(s.forward_with_hooks(&tokens, &[Edit::new(Site::new(1, 0), &short)]).is_err());
    let nan = |h: &Vector| -> Result<Vector> { Ok(h.add_scalar(f64::NAN)) };
    assert!(s.forward_with_hooks(&tokens, &[Edit::new(Site::new(1, 0), &nan)]).is_err());
    let id = |h: &Vector| -> Result<Vector> { Ok(h.clone()) };
    assert!(s.forward_with_hooks(&tokens, &[Edit::new(Site::new(9, 0), &id)]).is_err());
    assert!(s.forward(&tokens[..3]).is_err());
}

#[test]
fn continuation_matches_a_hooked_pass() {
    let s = default_subject();
    let tokens = input(&s, 0.6, 8);
    let base = s.forward(&tokens).unwrap();
    let (l, t) = (2, 5);
    let mut h = base.trace.at(l, t).clone();
    h[2] += 0.4;
    h[0] -= 0.2;
    let target = h.clone();
    let set = move |_: &Vector| -> Result<Vector> { Ok(target.clone()) };
    let hooked = s.forward_with_hooks(&tokens, &[Edit::new(Site::new(l, t as i64), &set)]).unwrap();
    let cont = s.continue_from(&base.trace, l, t, h).unwrap();
    for k in l..s.n_layers() {
        for p in t..s.seq_len() {
            assert_eq!(cont.state(k, p).unwrap(), hooked.trace.at(k, p), "({k}, {p})");
        }
    }
    assert!(cont.state(l, t - 1).is_none());
}

#[test]
fn continuation_backward_matches_finite_differences() {
    let s = default_subject();
    let tokens = input(&s, 1.3, 9);
    let base = s.forward(&tokens).unwrap();
    let (l, t) = (2, 5);
    let h0 = base.trace.at(l, t).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut terms = Vec::new();
    for k in l..s.n_layers() {
        for p in t..s.seq_len() {
            let g = crate::linalg::standard_normal_vector(&mut rng, s.dim());
            terms.push((k, p, g));
        }
    }
    let loss = |h: &Vector| -> f64 {
        let c = s.continue_from(&base.trace, l, t, h.clone()).unwrap();
        terms.iter().map(|(k, p, g)| g.dot(c.state(*k, *p).unwrap())).sum()
    };
    let cont = s.continue_from(&base.trace, l, t, h0.clone()).unwrap();
    let grad = s.continuation_backward(&cont, &terms);
    for i in 0..s.dim() {
        let mut up = h0.clone();
        up[i] += 1e-6;
        let mut down = h0.clone();
        down[i] -= 1e-6;
        let fd = (loss(&up) - loss(&down)) / 2e-6;
        assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "coord {i}: {fd} vs {}", grad[i]);
    }
}

#[test]
fn no_linear_direction_separates_the_planted_layer() {
    let s = default_subject();
    let data = generate_dataset(&s, &DatasetConfig { n_pos: 500, n_neg: 500, n_test_pos: 0, n_test_neg: 0 }, 3).unwrap();
    let (l, t) = s.resolve(&s.planted_site()).unwrap();
    let states = |label| -> Vec<Vector> {
        data.select(label, Split::Train)
            .iter()
            .map(|e| s.forward(&e.tokens).unwrap().trace.at(l, t).clone())
            .collect()
    };
    let plus = states(Behavior::Comply);
    let minus = states(Behavior::Refuse);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut best: f64 = 0.0;
    for _ in 0..10_000 {
        let v = crate::linalg::standard_normal_vector(&mut rng, s.dim());
        let sp: Vec<f64> = plus.iter().map(|h| v.dot(h)).collect();
        let sm: Vec<f64> = minus.iter().map(|h| v.dot(h)).collect();
        let a = auc(&sp, &sm);
        best = best.max(a).max(1.0 - a);
    }
    assert!(best < 0.8, "a random direction reached AUC {best}");
}

#[test]
fn dataset_labels_splits_and_round_trip() {
    let s = default_subject();
    let cfg = DatasetConfig { n_pos: 20, n_neg: 30, n_test_pos: 10, n_test_neg: 5 };
    let data = generate_dataset(&s, &cfg, 4).unwrap();
    assert_eq!(data.positives(Split::Train).len(), 20);
    assert_eq!(data.negatives(Split::Train).len(), 30);
    assert_eq!(data.positives(Split::Test).len(), 10);
    assert_eq!(data.negatives(Split::Test).len(), 5);
    for e in &data.examples {
        assert_eq!(s.forward(&e.tokens).unwrap().behavior, e.label);
        assert_eq!(e.label == Behavior::Comply, e.radius > s.r0());
    }
    for a in data.select(Behavior::Comply, Split::Train) {
        assert!(data.positives(Split::Test).iter().all(|b| b.tokens != a.tokens));
    }
    assert_eq!(data, generate_dataset(&s, &cfg, 4).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    write_jsonl(&data, &path).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), data);

    assert!(generate_dataset(&s, &DatasetConfig { n_pos: 0, ..cfg }, 4).is_err());
}

#[test]
fn subject_serde_round_trip_and_digest() {
    let s = default_subject();
    let json = serde_json::to_string(&s).unwrap();
    let back: Subject = serde_json::from_str(&json).unwrap();
    assert_eq!(back, s);
    assert_eq!(back.weights_digest(), s.weights_digest());
    assert_ne!(build_subject(&SubjectConfig::default(), 8).unwrap().weights_digest(), s.weights_digest());
}
