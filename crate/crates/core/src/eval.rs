//! Behavioral evaluation: compliance rates, intervention magnitudes, the
//! loss-site and linear-map baselines and the layer sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featmap::{CompiledMap, FeatureMap, IResNetFeatureMap};
use crate::intervene::{dim_direction, nonlinear_intervene, InterventionSpec, Scope, SteeringDirection};
use crate::linalg::Vector;
use crate::sites::LossSiteSet;
use crate::subject::{
    Behavior, ContrastiveDataset, Edit, EditFn, Example, HookedRun, Site, Split, Subject,
};
use crate::train::{train_fmap, TrainConfig, TrainReport, Trained};

/// A trained map with what is needed to apply it: site, clamped
/// coordinates and their positive-class means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringMap {
    pub map: FeatureMap,
    pub site: Site,
    pub coords: Vec<usize>,
    pub mu_bar_plus: Vec<f64>,
}

impl SteeringMap {
    pub fn from_trained(trained: &Trained, config: &TrainConfig) -> Self {
        Self::new(trained.map.clone(), config.site, config.coords.clone(), trained.report.mu_bar_plus.clone())
    }

    pub fn new(map: impl Into<FeatureMap>, site: Site, coords: Vec<usize>, mu_bar_plus: Vec<f64>) -> Self {
        Self {
            map: map.into(),
            site,
            coords,
            mu_bar_plus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum Method {
    None,
    /// Project the direction out of every block output.
    DimAblate { direction: SteeringDirection },
    /// Add `α v` at every position of the direction's layer.
    DimActadd { direction: SteeringDirection },
    /// Shift each loss site's projection to its positive-class mean.
    LinearAtLossSites { sites: LossSiteSet },
    /// Clamp feature coordinates at one site; covers both map kinds.
    Clamp { name: String, steering: SteeringMap },
    /// Rescale the planted plane to radius `2 r₀`.
    Oracle,
}

impl Method {
    pub fn name(&self) -> &str {
        match self {
            Self::None => "none",
            Self::DimAblate { .. } => "dim-ablate",
            Self::DimActadd { .. } => "dim-actadd",
            Self::LinearAtLossSites { .. } => "linear-at-loss-sites",
            Self::Clamp { name, .. } => name,
            Self::Oracle => "oracle",
        }
    }
}

type BoxedEdit<'a> = (Site, Box<EditFn<'a>>);

fn method_edits<'a>(subject: &'a Subject, method: &'a Method) -> Result<Vec<BoxedEdit<'a>>> {
    let all_positions = |layer: usize| (0..subject.seq_len() as i64).map(move |t| Site::new(layer, t));
    Ok(match method {
        Method::None => Vec::new(),
        Method::DimAblate { direction } | Method::DimActadd { direction } => {
            let layers: Vec<usize> = match direction.scope {
                Scope::AllLayers => (0..subject.n_layers()).collect(),
                Scope::Layer(l) => vec![l],
            };
            layers
                .into_iter()
                .flat_map(all_positions)
                .map(|s| (s, Box::new(move |h: &Vector| Ok(direction.edit(h))) as Box<EditFn<'a>>))
                .collect()
        }
        Method::LinearAtLossSites { sites } => sites
            .entries
            .iter()
            .map(|s| {
                let f = move |h: &Vector| Ok(h + &s.v * (s.mu_plus - s.v.dot(h)));
                (s.site, Box::new(f) as Box<EditFn<'a>>)
            })
            .collect(),
        Method::Clamp { steering, .. } => {
            let compiled: CompiledMap = steering.map.compile();
            let spec = InterventionSpec::clamp(steering.coords.clone(), steering.mu_bar_plus.clone())?;
            spec.validate(compiled.dim())?;
            let f = move |h: &Vector| nonlinear_intervene(h, &compiled, &spec);
            vec![(steering.site, Box::new(f) as Box<EditFn<'a>>)]
        }
        Method::Oracle => {
            let [x, y] = subject.layout().plane;
            let target = 2.0 * subject.r0();
            let f = move |h: &Vector| {
                let r = h[x].hypot(h[y]);
                let mut out = h.clone();
                if r > 0.0 {
                    out[x] *= target / r;
                    out[y] *= target / r;
                } else {
                    out[x] = target;
                }
                Ok(out)
            };
            vec![(subject.planted_site(), Box::new(f) as Box<EditFn<'a>>)]
        }
    })
}

/// Forward pass of one input under a method's edits.
pub fn run_method(subject: &Subject, method: &Method, tokens: &[Vector]) -> Result<HookedRun> {
    let boxed = method_edits(subject, method)?;
    let edits: Vec<Edit<'_>> = boxed.iter().map(|(s, f)| Edit::new(*s, f.as_ref())).collect();
    subject.forward_with_hooks(tokens, &edits)
}

fn run_all(subject: &Subject, method: &Method, examples: &[&Example]) -> Result<Vec<HookedRun>> {
    examples
        .par_iter()
        .map(|e| run_method(subject, method, &e.tokens))
        .collect()
}

/// Fraction of refusing inputs that comply under the method.
pub fn compliance_rate(subject: &Subject, method: &Method, negatives: &[&Example]) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::invalid("compliance needs at least one test negative"));
    }
    let runs = run_all(subject, method, negatives)?;
    let n = runs.iter().filter(|r| r.behavior == Behavior::Comply).count();
    Ok(n as f64 / negatives.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeReport {
    pub sites_per_example: Vec<usize>,
    pub l2_per_example: Vec<f64>,
    pub mean_sites: f64,
    /// Mean over examples of the summed per-site L2 edit norms.
    pub mean_l2: f64,
}

impl MagnitudeReport {
    pub fn from_runs(runs: &[HookedRun]) -> Self {
        let sites: Vec<usize> = runs.iter().map(|r| r.edits.len()).collect();
        let l2: Vec<f64> = runs
            .iter()
            .map(|r| r.edits.iter().fold(0.0, |acc, e| acc + e.l2()))
            .collect();
        let n = runs.len().max(1) as f64;
        Self {
            mean_sites: sites.iter().sum::<usize>() as f64 / n,
            mean_l2: l2.iter().fold(0.0, |acc, x| acc + x) / n,
            sites_per_example: sites,
            l2_per_example: l2,
        }
    }
}

pub fn intervention_magnitude(subject: &Subject, method: &Method, examples: &[&Example]) -> Result<MagnitudeReport> {
    Ok(MagnitudeReport::from_runs(&run_all(subject, method, examples)?))
}

/// Compliance and magnitude from one pass over the negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub compliance: f64,
    pub magnitude: MagnitudeReport,
}

pub fn evaluate(subject: &Subject, method: &Method, negatives: &[&Example]) -> Result<MethodResult> {
    if negatives.is_empty() {
        return Err(Error::invalid("evaluation needs at least one test negative"));
    }
    let runs = run_all(subject, method, negatives)?;
    let n = runs.iter().filter(|r| r.behavior == Behavior::Comply).count();
    Ok(MethodResult {
        method: method.name().to_string(),
        compliance: n as f64 / negatives.len() as f64,
        magnitude: MagnitudeReport::from_runs(&runs),
    })
}

pub fn linear_at_loss_sites(subject: &Subject, sites: &LossSiteSet, negatives: &[&Example]) -> Result<f64> {
    compliance_rate(subject, &Method::LinearAtLossSites { sites: sites.clone() }, negatives)
}

/// Difference-in-means direction read at the loss site with the highest AUC
/// (earliest on ties), as an all-layer ablation.
pub fn dim_baseline(subject: &Subject, dataset: &ContrastiveDataset, sites: &LossSiteSet) -> Result<SteeringDirection> {
    let best = sites
        .entries
        .iter()
        .fold(None::<&crate::sites::SiteStats>, |acc, s| match acc {
            Some(a) if a.auc >= s.auc => Some(a),
            _ => Some(s),
        })
        .ok_or(Error::NoSupervision { tau: sites.tau })?;
    let (l, t) = subject.resolve(&best.site)?;
    let acts = |label| -> Result<Vec<Vector>> {
        dataset
            .select(label, Split::Train)
            .iter()
            .map(|e| subject.forward(&e.tokens).map(|r| r.trace.at(l, t).clone()))
            .collect()
    };
    let dir = dim_direction(&acts(Behavior::Comply)?, &acts(Behavior::Refuse)?)?;
    Ok(SteeringDirection {
        scope: Scope::AllLayers,
        ..dir
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub layer: usize,
    pub compliance: Option<f64>,
    pub mean_l2: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub position: i64,
    pub entries: Vec<SweepEntry>,
}

impl SweepResult {
    /// Layer with the highest compliance; the earliest wins ties.
    pub fn best_layer(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for e in &self.entries {
            if let Some(c) = e.compliance {
                if best.is_none_or(|(_, b)| c > b) {
                    best = Some((e.layer, c));
                }
            }
        }
        best.map(|(l, _)| l)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,rate,magnitude\n");
        for e in &self.entries {
            let fmt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
            s.push_str(&format!("{},{},{}\n", e.layer, fmt(e.compliance), fmt(e.mean_l2)));
        }
        s
    }
}

/// Trains a map and evaluates its clamp on the held-out negatives.
pub fn train_and_evaluate(
    subject: &Subject,
    dataset: &ContrastiveDataset,
    config: &TrainConfig,
    name: &str,
) -> Result<(Trained, MethodResult)> {
    let trained = train_fmap(subject, dataset, config)?;
    let method = Method::Clamp {
        name: name.to_string(),
        steering: SteeringMap::from_trained(&trained, config),
    };
    let result = evaluate(subject, &method, &dataset.negatives(Split::Test))?;
    Ok((trained, result))
}

/// Retrains from scratch at each layer with the base config's position and seed.
pub fn layer_sweep(subject: &Subject, dataset: &ContrastiveDataset, base: &TrainConfig, layers: &[usize]) -> Result<SweepResult> {
    if layers.len() < 2 {
        return Err(Error::invalid("a sweep needs at least two layers"));
    }
    let entries = layers
        .iter()
        .map(|&layer| {
            let config = TrainConfig {
                site: Site::new(layer, base.site.position),
                ..base.clone()
            };
            match train_and_evaluate(subject, dataset, &config, "nonlinear-clamp") {
                Ok((_, r)) => SweepEntry {
                    layer,
                    compliance: Some(r.compliance),
                    mean_l2: Some(r.magnitude.mean_l2),
                    error: None,
                },
                Err(e) => SweepEntry {
                    layer,
                    compliance: None,
                    mean_l2: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(SweepResult {
        position: base.site.position,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearAblation {
    pub nonlinear: MethodResult,
    pub linear: MethodResult,
    pub nonlinear_report: TrainReport,
    pub linear_report: TrainReport,
}

impl LinearAblation {
    pub fn gap(&self) -> f64 {
        self.nonlinear.compliance - self.linear.compliance
    }
}

/// Trains the same pipeline twice, once with the map constrained to be affine.
pub fn run_linear_fmap_ablation(subject: &Subject, dataset: &ContrastiveDataset, config: &TrainConfig) -> Result<LinearAblation> {
    let (nl, nonlinear) = train_and_evaluate(subject, dataset, config, "nonlinear-clamp")?;
    let (lin, linear) = train_and_evaluate(subject, dataset, &config.clone().linear(), "linear-fmap")?;
    Ok(LinearAblation {
        nonlinear,
        linear,
        nonlinear_report: nl.report,
        linear_report: lin.report,
    })
}

/// Wraps an affine-constrained i-ResNet, for callers that hold one directly.
pub fn clamp_method(name: &str, map: IResNetFeatureMap, site: Site, coords: Vec<usize>, mu_bar_plus: Vec<f64>) -> Method {
    Method::Clamp {
        name: name.to_string(),
        steering: SteeringMap::new(map, site, coords, mu_bar_plus),
    }
}
