//! Learning the feature map from interchange-intervened forward passes
//! through the frozen subject.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featmap::{ArchConfig, BlockGrads, CompiledIResNet, IResNetFeatureMap, InversionConfig};
use crate::linalg::Vector;
use crate::sites::{mean_diff_stats, select_sites, LossSiteSet, SiteStats};
use crate::subject::{Behavior, ContrastiveDataset, Site, Split, Subject, Trace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub site: Site,
    pub coords: Vec<usize>,
    pub tau: f64,
    pub optimizer: AdamConfig,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub arch: ArchConfig,
    pub inversion: InversionConfig,
    /// Abort once more than this fraction of pairs failed to invert.
    pub max_skip_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            site: Site::new(2, -3),
            coords: vec![0],
            tau: 0.9,
            optimizer: AdamConfig::default(),
            steps: 2000,
            batch: 32,
            seed: 0,
            arch: ArchConfig::default(),
            inversion: InversionConfig::default(),
            max_skip_fraction: 0.01,
        }
    }
}

impl TrainConfig {
    /// Same pipeline with the map constrained to be affine.
    pub fn linear(mut self) -> Self {
        self.arch.slope = 1.0;
        self
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.coords.is_empty() || self.coords.iter().any(|&c| c >= dim) {
            return bad(format!("coords {:?} must be non-empty and below {dim}", self.coords));
        }
        let mut sorted = self.coords.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.coords.len() {
            return bad(format!("coords {:?} repeat an index", self.coords));
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if !(self.tau > 0.5 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0.5, 1], got {}", self.tau));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        if !(self.arch.kappa > 0.0 && self.arch.kappa < 1.0) {
            return bad(format!("kappa must lie in (0, 1), got {}", self.arch.kappa));
        }
        if self.arch.width == 0 || self.arch.blocks == 0 {
            return bad("arch needs positive width and block count".into());
        }
        if !(0.0..=1.0).contains(&self.max_skip_fraction) {
            return bad(format!("max_skip_fraction must lie in [0, 1], got {}", self.max_skip_fraction));
        }
        Ok(())
    }
}

/// Uniform independent draws of `(negative index, positive index)`.
pub fn sample_pairs(n_neg: usize, n_pos: usize, batch: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    if n_neg == 0 || n_pos == 0 {
        return Err(Error::invalid("both classes need at least one example"));
    }
    Ok((0..batch)
        .map(|_| (rng.random_range(0..n_neg), rng.random_range(0..n_pos)))
        .collect())
}

/// Site statistics over the training split, skipping degenerate sites.
pub fn collect_site_stats(subject: &Subject, plus: &[Trace], minus: &[Trace]) -> Result<Vec<SiteStats>> {
    let mut out = Vec::new();
    for site in subject.all_sites() {
        let (l, t) = subject.resolve(&site)?;
        let ap: Vec<Vector> = plus.iter().map(|tr| tr.at(l, t).clone()).collect();
        let am: Vec<Vector> = minus.iter().map(|tr| tr.at(l, t).clone()).collect();
        match mean_diff_stats(site, &ap, &am) {
            Ok(s) => out.push(s),
            Err(Error::DegenerateDirection { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub probes: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean hinge loss of each step's batch.
    pub loss: Vec<f64>,
    /// Per step, the fraction of pairs already satisfying each loss site.
    pub saturation: Vec<Vec<f64>>,
    /// Mean of the clamped coordinates of `f(h⁺)` over the training positives.
    pub mu_bar_plus: Vec<f64>,
    pub skipped_pairs: usize,
    pub grad_check: Option<GradCheck>,
    /// Not serialized, so saved reports are reproducible bit for bit.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.loss.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        s
    }

    /// `true` when the values compare equal apart from wall-clock time.
    pub fn same_run(&self, other: &Self) -> bool {
        let strip = |r: &Self| Self {
            wall_clock_secs: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub map: IResNetFeatureMap,
    pub sites: LossSiteSet,
    pub report: TrainReport,
}

/// Everything the objective needs: resolved site, traces and loss sites.
pub struct Objective<'a> {
    pub subject: &'a Subject,
    pub layer: usize,
    pub position: usize,
    pub coords: Vec<usize>,
    pub sites: LossSiteSet,
    resolved: Vec<(usize, usize)>,
    pub plus: Vec<Trace>,
    pub minus: Vec<Trace>,
}

/// Outcome of one pair.
enum PairResult {
    Done {
        loss: f64,
        satisfied: Vec<bool>,
        grads: Vec<BlockGrads>,
    },
    Skipped,
}

impl<'a> Objective<'a> {
    pub fn new(subject: &'a Subject, dataset: &ContrastiveDataset, config: &TrainConfig) -> Result<Self> {
        config.validate(subject.dim())?;
        let (layer, position) = subject.resolve(&config.site)?;
        let traces = |label| -> Result<Vec<Trace>> {
            dataset
                .select(label, Split::Train)
                .par_iter()
                .map(|e| subject.forward(&e.tokens).map(|r| r.trace))
                .collect()
        };
        let plus = traces(Behavior::Comply)?;
        let minus = traces(Behavior::Refuse)?;
        if plus.is_empty() || minus.is_empty() {
            return Err(Error::invalid("training split needs both positives and negatives"));
        }
        let stats = collect_site_stats(subject, &plus, &minus)?;
        let sites = select_sites(&stats, config.tau, config.site, subject.n_layers(), subject.seq_len())?;
        let resolved = sites
            .entries
            .iter()
            .map(|s| subject.resolve(&s.site))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            subject,
            layer,
            position,
            coords: config.coords.clone(),
            sites,
            resolved,
            plus,
            minus,
        })
    }

    pub fn h_plus(&self, i: usize) -> &Vector {
        self.plus[i].at(self.layer, self.position)
    }

    pub fn h_minus(&self, i: usize) -> &Vector {
        self.minus[i].at(self.layer, self.position)
    }

    /// Intervened state for one pair: `f⁻¹` of `f(h⁻)` with the target
    /// coordinates taken from `f(h⁺)`.
    pub fn edited(&self, map: &CompiledIResNet, neg: usize, pos: usize) -> Result<Vector> {
        let yp = map.forward(self.h_plus(pos))?;
        let mut y = map.forward(self.h_minus(neg))?;
        for &c in &self.coords {
            y[c] = yp[c];
        }
        Ok(map.inverse(&y)?.0)
    }

    /// Loss-site projections after replacing the intervention state by `h`.
    pub fn projections(&self, neg: usize, h: Vector) -> Result<Vec<f64>> {
        let cont = self.subject.continue_from(&self.minus[neg], self.layer, self.position, h)?;
        Ok(self.project(&cont, neg))
    }

    fn project(&self, cont: &crate::subject::Continuation, neg: usize) -> Vec<f64> {
        self.sites
            .entries
            .iter()
            .zip(&self.resolved)
            .map(|(s, &(l, t))| {
                let h = cont.state(l, t).unwrap_or_else(|| self.minus[neg].at(l, t));
                s.project(h)
            })
            .collect()
    }

    /// Hinge loss of one pair, or `None` when the inverse failed.
    pub fn pair_loss(&self, map: &CompiledIResNet, neg: usize, pos: usize) -> Result<Option<f64>> {
        match self.edited(map, neg, pos) {
            Ok(h) => Ok(Some(self.sites.hinge(&self.projections(neg, h)?))),
            Err(Error::NotConverged(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn pair_gradient(&self, map: &CompiledIResNet, n_blocks: usize, zero: &[BlockGrads], neg: usize, pos: usize) -> Result<PairResult> {
        debug_assert_eq!(zero.len(), n_blocks);
        let (yp, tape_p) = map.forward_taped(self.h_plus(pos))?;
        let (mut y, tape_m) = map.forward_taped(self.h_minus(neg))?;
        for &c in &self.coords {
            y[c] = yp[c];
        }
        let (h, _, tape_inv) = match map.inverse_taped(&y) {
            Ok(r) => r,
            Err(Error::NotConverged(_)) => return Ok(PairResult::Skipped),
            Err(e) => return Err(e),
        };
        let cont = self.subject.continue_from(&self.minus[neg], self.layer, self.position, h)?;
        let proj = self.project(&cont, neg);
        let loss = self.sites.hinge(&proj);
        let active = self.sites.active(&proj);
        let terms: Vec<(usize, usize, Vector)> = self
            .sites
            .entries
            .iter()
            .zip(&self.resolved)
            .zip(&active)
            .filter(|(_, &a)| a)
            .map(|((s, &(l, t)), _)| (l, t, -&s.v))
            .collect();
        let mut grads = zero.to_vec();
        let gh = self.subject.continuation_backward(&cont, &terms);
        let gy = map.backward_inverse(&tape_inv, &gh, &mut grads);
        let mut gy_minus = gy.clone();
        let mut gy_plus = Vector::zeros(gy.len());
        for &c in &self.coords {
            gy_plus[c] = gy[c];
            gy_minus[c] = 0.0;
        }
        map.backward_forward(&tape_m, &gy_minus, &mut grads);
        map.backward_forward(&tape_p, &gy_plus, &mut grads);
        Ok(PairResult::Done {
            loss,
            satisfied: active.iter().map(|a| !a).collect(),
            grads,
        })
    }

    /// Mean loss and flat raw-parameter gradient over `pairs`, reduced in
    /// pair order. Skipped pairs are counted and left out of the mean.
    pub fn batch_gradient(&self, map: &IResNetFeatureMap, pairs: &[(usize, usize)]) -> Result<BatchGradient> {
        let compiled = map.compile();
        let zero = map.zero_grads();
        let results: Vec<Result<PairResult>> = pairs
            .par_iter()
            .map(|&(n, p)| self.pair_gradient(&compiled, zero.len(), &zero, n, p))
            .collect();
        let mut total = zero.clone();
        let mut loss = 0.0;
        let mut used = 0usize;
        let mut satisfied = vec![0usize; self.sites.len()];
        for (k, r) in results.into_iter().enumerate() {
            match r? {
                PairResult::Done { loss: l, satisfied: s, grads } => {
                    if !l.is_finite() {
                        let (n, p) = pairs[k];
                        return Err(Error::Training(format!("non-finite loss {l} on pair (negative {n}, positive {p})")));
                    }
                    loss += l;
                    used += 1;
                    for (acc, g) in total.iter_mut().zip(&grads) {
                        acc.add_assign(g);
                    }
                    for (c, s) in satisfied.iter_mut().zip(s) {
                        *c += s as usize;
                    }
                }
                PairResult::Skipped => {}
            }
        }
        let skipped = pairs.len() - used;
        if used > 0 {
            let inv = 1.0 / used as f64;
            loss *= inv;
            for g in &mut total {
                g.scale(inv);
            }
        }
        Ok(BatchGradient {
            loss,
            gradient: map.raw_gradients(&total),
            saturation: satisfied.iter().map(|&c| c as f64 / used.max(1) as f64).collect(),
            skipped,
        })
    }

    /// Mean batch loss at the map's current parameters.
    pub fn batch_loss(&self, map: &IResNetFeatureMap, pairs: &[(usize, usize)]) -> Result<f64> {
        let compiled = map.compile();
        let mut total = 0.0;
        let mut used = 0;
        for &(n, p) in pairs {
            if let Some(l) = self.pair_loss(&compiled, n, p)? {
                total += l;
                used += 1;
            }
        }
        Ok(total / used.max(1) as f64)
    }

    /// Mean of the target coordinates of `f(h⁺)` over the training positives.
    pub fn mu_bar_plus(&self, map: &IResNetFeatureMap) -> Result<Vec<f64>> {
        let compiled = map.compile();
        let mut acc = vec![0.0; self.coords.len()];
        for i in 0..self.plus.len() {
            let y = compiled.forward(self.h_plus(i))?;
            for (a, &c) in acc.iter_mut().zip(&self.coords) {
                *a += y[c];
            }
        }
        Ok(acc.into_iter().map(|a| a / self.plus.len() as f64).collect())
    }
}

pub struct BatchGradient {
    pub loss: f64,
    pub gradient: Vec<f64>,
    pub saturation: Vec<f64>,
    pub skipped: usize,
}

/// Adaptive-moment optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let c = &self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i] + c.weight_decay * params[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            params[i] -= c.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + c.eps);
        }
    }
}

/// Extra power iterations after the last update, so the stored map uses a
/// settled spectral estimate.
const FREEZE_POWER_STEPS: usize = 20;

pub fn train_fmap(subject: &Subject, dataset: &ContrastiveDataset, config: &TrainConfig) -> Result<Trained> {
    let start = Instant::now();
    let obj = Objective::new(subject, dataset, config)?;
    let mut map = IResNetFeatureMap::init(subject.dim(), &config.arch, config.inversion, config.seed)?;
    let mut adam = Adam::new(config.optimizer.clone(), map.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e_ed0f_9a17);
    let mut loss = Vec::with_capacity(config.steps);
    let mut saturation = Vec::with_capacity(config.steps);
    let (mut skipped, mut seen) = (0usize, 0usize);

    for step in 0..config.steps {
        map.power_step();
        let pairs = sample_pairs(obj.minus.len(), obj.plus.len(), config.batch, &mut rng)?;
        let bg = obj.batch_gradient(&map, &pairs)?;
        skipped += bg.skipped;
        seen += pairs.len();
        if skipped as f64 > config.max_skip_fraction * seen.max(1000) as f64 {
            return Err(Error::Training(format!(
                "{skipped} of {seen} pairs failed to invert by step {step}"
            )));
        }
        if bg.gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient at step {step}")));
        }
        loss.push(bg.loss);
        saturation.push(bg.saturation);
        let mut params = map.params();
        adam.step(&mut params, &bg.gradient);
        map.set_params(&params)?;
    }
    if config.steps > 0 {
        for _ in 0..FREEZE_POWER_STEPS {
            map.power_step();
        }
    }
    let mu_bar_plus = obj.mu_bar_plus(&map)?;
    Ok(Trained {
        map,
        sites: obj.sites,
        report: TrainReport {
            loss,
            saturation,
            mu_bar_plus,
            skipped_pairs: skipped,
            grad_check: None,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    })
}

/// Inversion tight enough for finite differences to resolve the objective.
pub const GRAD_CHECK_INVERSION: InversionConfig = InversionConfig {
    max_iters: 500,
    rel_tol: 1e-14,
};

/// Compares analytic and central-difference gradients of the batch loss on
/// `n_probes` randomly chosen parameters; returns the largest relative error.
pub fn grad_check_map(obj: &Objective<'_>, map: &IResNetFeatureMap, n_probes: usize, batch: usize, seed: u64) -> Result<GradCheck> {
    const STEP: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let mut map = map.clone();
    map.inversion = GRAD_CHECK_INVERSION;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = sample_pairs(obj.minus.len(), obj.plus.len(), batch, &mut rng)?;
    let analytic = obj.batch_gradient(&map, &pairs)?;
    let base = map.params();
    let mut worst: f64 = 0.0;
    for _ in 0..n_probes {
        let i = rng.random_range(0..base.len());
        let mut p = base.clone();
        p[i] = base[i] + STEP;
        map.set_params(&p)?;
        let up = obj.batch_loss(&map, &pairs)?;
        p[i] = base[i] - STEP;
        map.set_params(&p)?;
        let down = obj.batch_loss(&map, &pairs)?;
        let fd = (up - down) / (2.0 * STEP);
        let a = analytic.gradient[i];
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(FLOOR);
        worst = worst.max(err);
    }
    Ok(GradCheck {
        probes: n_probes,
        max_relative_error: worst,
    })
}

/// Gradient check at the map's initialization.
pub fn grad_check(subject: &Subject, dataset: &ContrastiveDataset, config: &TrainConfig, n_probes: usize) -> Result<GradCheck> {
    let obj = Objective::new(subject, dataset, config)?;
    let map = IResNetFeatureMap::init(subject.dim(), &config.arch, config.inversion, config.seed)?;
    grad_check_map(&obj, &map, n_probes, config.batch, config.seed)
}

#[cfg(test)]
mod tests;
