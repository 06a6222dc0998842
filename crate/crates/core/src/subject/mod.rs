//! The model under intervention: a small causal residual stack whose
//! behavior is gated by the radius of a 2-D hidden subspace.
//!
//! Layout of the hidden state (default `d = 16`):
//!
//! | coords | role |
//! |---|---|
//! | 0 | scratch, low-variance noise, never read |
//! | 2, 3 | planted plane, gathered at the planted layer |
//! | 4.. | band-limited radius features, from the layer after the planted one |
//! | rest and 1 | content noise mixed by distractor blocks |
//!
//! The readout at the last position recomputes the squared radius from the
//! copied plane and compares it with the band `(r₀², r_hi²)`; the radius
//! features enter the score with a small weight. No coordinate carries the
//! radius linearly, so every downstream effect of the planted site goes
//! through the plane.

mod dataset;
mod layers;

use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_dim, check_finite, Matrix, Vector};

pub use dataset::{
    generate_dataset, read_jsonl, write_jsonl, ContrastiveDataset, DatasetConfig, Example, Split,
};
pub use layers::{Activation, BlockCache, Dense, MixHead, SubjectBlock};

/// Where inside a block a site reads. Only block outputs are exposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StreamPoint {
    #[default]
    BlockOutput,
}

/// Address of one hidden state. Negative positions count from the end of
/// the sequence, so `-1` is the last token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub layer: usize,
    pub position: i64,
    #[serde(default)]
    pub point: StreamPoint,
}

impl Site {
    pub fn new(layer: usize, position: i64) -> Self {
        Self {
            layer,
            position,
            point: StreamPoint::BlockOutput,
        }
    }

    /// Absolute `(layer, position)` for a model with `n_layers` blocks and a
    /// sequence of `seq_len` tokens.
    pub fn resolve(&self, n_layers: usize, seq_len: usize) -> Result<(usize, usize)> {
        let fail = |reason: String| Error::UnresolvableSite {
            layer: self.layer,
            position: self.position,
            reason,
        };
        if self.layer >= n_layers {
            return Err(fail(format!("model has {n_layers} layers")));
        }
        let t = seq_len as i64;
        let pos = if self.position < 0 { t + self.position } else { self.position };
        if pos < 0 || pos >= t {
            return Err(fail(format!("sequence has {seq_len} positions")));
        }
        Ok((self.layer, pos as usize))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Comply,
    Refuse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubjectConfig {
    pub layers: usize,
    pub dim: usize,
    pub seq_len: usize,
    pub r0: f64,
    pub planted_layer: usize,
    /// Inputs draw the planted radius from this interval.
    pub radius_range: (f64, f64),
    pub content_noise: f64,
    pub scratch_noise: f64,
    /// Weight of the radius features in the readout score.
    pub coupling: f64,
    /// Upper edge of the comply band on the radius, in units of r₀.
    pub band_upper: f64,
    /// Constant level added to every radius feature at every position.
    pub resting: f64,
}

impl Default for SubjectConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            dim: 16,
            seq_len: 8,
            r0: 1.0,
            planted_layer: 2,
            radius_range: (0.3, 2.0),
            content_noise: 0.3,
            scratch_noise: 0.1,
            coupling: 0.5,
            band_upper: 3.0,
            resting: 1.0,
        }
    }
}

/// Steepness of the tanh radius features.
const SHARPNESS: f64 = 1.5;
/// Feature thresholds on r², in units of r₀².
const THRESHOLDS: [f64; 5] = [0.5, 0.75, 1.0, 1.25, 1.5];
/// Positions that carry the two plane coordinates in the input.
const SOURCES: [usize; 2] = [1, 3];
const DISTRACTOR_UNITS: usize = 8;

impl SubjectConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.layers < 4 {
            return bad(format!("layers must be at least 4, got {}", self.layers));
        }
        if self.dim < 8 {
            return bad(format!("dim must be at least 8, got {}", self.dim));
        }
        if self.seq_len < 7 {
            return bad(format!("seq_len must be at least 7, got {}", self.seq_len));
        }
        if !(self.r0 > 0.0 && self.r0.is_finite()) {
            return bad(format!("r0 must be positive, got {}", self.r0));
        }
        if self.planted_layer + 3 > self.layers {
            return bad(format!(
                "planted_layer {} leaves fewer than two blocks after it in a {}-layer model",
                self.planted_layer, self.layers
            ));
        }
        let (lo, hi) = self.radius_range;
        if !(self.band_upper > 1.0 && self.band_upper.is_finite()) {
            return bad(format!("band_upper must exceed 1, got {}", self.band_upper));
        }
        if !(lo > 0.0 && lo < self.r0 && hi > self.r0 && hi < self.band_upper * self.r0) {
            return bad(format!(
                "radius_range ({lo}, {hi}) must straddle r0 = {} and stay below {}",
                self.r0,
                self.band_upper * self.r0
            ));
        }
        for (name, x) in [
            ("content_noise", self.content_noise),
            ("scratch_noise", self.scratch_noise),
            ("coupling", self.coupling),
            ("resting", self.resting),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return bad(format!("{name} must be non-negative, got {x}"));
            }
        }
        Ok(())
    }
}

/// Coordinate roles derived from `dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub scratch: usize,
    pub plane: [usize; 2],
    pub features: Vec<usize>,
    pub content: Vec<usize>,
}

impl Layout {
    fn new(dim: usize) -> Self {
        let n_feat = (dim - 5).min(THRESHOLDS.len());
        let features: Vec<usize> = (4..4 + n_feat).collect();
        let mut content = vec![1];
        content.extend(4 + n_feat..dim);
        Self {
            scratch: 0,
            plane: [2, 3],
            features,
            content,
        }
    }
}

/// Recorded block outputs: `states[layer][position]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub states: Vec<Vec<Vector>>,
}

impl Trace {
    pub fn at(&self, layer: usize, position: usize) -> &Vector {
        &self.states[layer][position]
    }
}

/// One applied edit, kept for magnitude accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct EditRecord {
    pub layer: usize,
    pub position: usize,
    pub before: Vector,
    pub after: Vector,
}

impl EditRecord {
    pub fn l2(&self) -> f64 {
        (&self.after - &self.before).norm()
    }
}

pub type EditFn<'a> = dyn Fn(&Vector) -> Result<Vector> + Sync + 'a;

/// A hook that rewrites the hidden state at `site`.
pub struct Edit<'a> {
    pub site: Site,
    pub apply: &'a EditFn<'a>,
}

impl<'a> Edit<'a> {
    pub fn new(site: Site, apply: &'a EditFn<'a>) -> Self {
        Self { site, apply }
    }
}

#[derive(Debug, Clone)]
pub struct HookedRun {
    pub behavior: Behavior,
    pub score: f64,
    pub trace: Trace,
    pub edits: Vec<EditRecord>,
}

/// Forward pass re-run from an edited site, with caches for backpropagation.
#[derive(Debug, Clone)]
pub struct Continuation {
    layer: usize,
    position: usize,
    /// `states[k][t]` holds layer `layer + k`, position `position + t`.
    states: Vec<Vec<Vector>>,
    caches: Vec<Vec<BlockCache>>,
}

impl Continuation {
    /// Hidden state at an absolute site inside the recomputed region.
    pub fn state(&self, layer: usize, position: usize) -> Option<&Vector> {
        if layer < self.layer || position < self.position {
            return None;
        }
        self.states.get(layer - self.layer)?.get(position - self.position)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    config: SubjectConfig,
    seed: u64,
    layout: Layout,
    blocks: Vec<SubjectBlock>,
    readout: Vec<Dense>,
}

fn band_feature(q: f64, c: f64, upper: f64) -> f64 {
    (SHARPNESS * (q - c)).tanh() - (SHARPNESS * (q - upper)).tanh()
}

/// Frozen subject with the planted radius feature.
pub fn build_subject(config: &SubjectConfig, seed: u64) -> Result<Subject> {
    config.validate()?;
    let d = config.dim;
    let t_len = config.seq_len;
    let layout = Layout::new(d);
    let p = config.planted_layer;
    let star = t_len - 3;
    let r0sq = config.r0 * config.r0;
    let thresholds: Vec<f64> = THRESHOLDS[..layout.features.len()].iter().map(|c| c * r0sq).collect();
    let upper = config.band_upper * config.band_upper * r0sq;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut blocks = Vec::with_capacity(config.layers);
    for layer in 0..config.layers {
        let block = if layer == p {
            gather_block(&layout, d, t_len, star)
        } else if layer == p + 1 {
            feature_block(&layout, d, &thresholds, upper, config.resting)
        } else if layer == p + 2 {
            copy_block(&layout, d, t_len, star, &thresholds, upper)
        } else {
            distractor_block(&layout, d, t_len, &mut rng)
        };
        blocks.push(block);
    }

    // Feature sum at the readout position when the radius equals r₀.
    let baseline: f64 = thresholds
        .iter()
        .map(|&c| config.resting + band_feature(0.0, c, upper) + band_feature(r0sq, c, upper))
        .sum();
    let mid = (r0sq + upper) / 2.0;
    let half = (upper - r0sq) / 2.0;
    let [x, y] = layout.plane;

    let mut w1 = Matrix::zeros(3, d);
    w1[(0, x)] = 1.0;
    w1[(1, y)] = 1.0;
    for &f in &layout.features {
        w1[(2, f)] = 1.0;
    }
    let r1 = Dense::new(w1, Vector::zeros(3), vec![Activation::Square, Activation::Square, Activation::Identity]);
    let r2 = Dense::new(
        Matrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
        Vector::from_vec(vec![-mid, -baseline]),
        vec![Activation::Square, Activation::Identity],
    );
    let r3 = Dense::new(
        Matrix::from_row_slice(1, 2, &[-1.0, config.coupling]),
        Vector::from_vec(vec![half * half]),
        vec![Activation::Identity],
    );

    Ok(Subject {
        config: config.clone(),
        seed,
        layout,
        blocks,
        readout: vec![r1, r2, r3],
    })
}

fn gather_block(layout: &Layout, d: usize, t_len: usize, star: usize) -> SubjectBlock {
    let mut pattern = Matrix::zeros(t_len, t_len);
    for &s in &SOURCES {
        pattern[(star, s)] = 1.0;
        pattern[(s, s)] = -1.0;
    }
    let mut value = Matrix::zeros(d, d);
    for &c in &layout.plane {
        value[(c, c)] = 1.0;
    }
    SubjectBlock {
        heads: vec![MixHead { pattern, value }],
        mlp: Vec::new(),
    }
}

/// Band features of the plane radius, added to the feature coordinates.
///
/// With `overwrite` set, the feature coordinates' previous contents are
/// subtracted first, so the result depends on the plane alone.
fn band_mlp(layout: &Layout, d: usize, thresholds: &[f64], upper: f64, resting: f64, overwrite: bool) -> Vec<Dense> {
    let [x, y] = layout.plane;
    let nf = thresholds.len();
    let nc = if overwrite { nf } else { 0 };

    let mut w1 = Matrix::zeros(2 + nc, d);
    w1[(0, x)] = 1.0;
    w1[(1, y)] = 1.0;
    for k in 0..nc {
        w1[(2 + k, layout.features[k])] = 1.0;
    }
    let mut act1 = vec![Activation::Square; 2];
    act1.extend(std::iter::repeat_n(Activation::Identity, nc));
    let l1 = Dense::new(w1, Vector::zeros(2 + nc), act1);

    // Units: one edge per threshold, the upper edge, then the pass-through.
    let n2 = nf + 1 + nc;
    let mut w2 = Matrix::zeros(n2, 2 + nc);
    let mut b2 = Vector::zeros(n2);
    let mut act2 = Vec::with_capacity(n2);
    for (j, &c) in thresholds.iter().chain(std::iter::once(&upper)).enumerate() {
        w2[(j, 0)] = SHARPNESS;
        w2[(j, 1)] = SHARPNESS;
        b2[j] = -SHARPNESS * c;
        act2.push(Activation::Tanh);
    }
    for k in 0..nc {
        w2[(nf + 1 + k, 2 + k)] = 1.0;
        act2.push(Activation::Identity);
    }
    let l2 = Dense::new(w2, b2, act2);

    let mut w3 = Matrix::zeros(d, n2);
    let mut b3 = Vector::zeros(d);
    for (j, &f) in layout.features.iter().enumerate() {
        w3[(f, j)] = 1.0;
        w3[(f, nf)] = -1.0;
        b3[f] = resting;
    }
    for k in 0..nc {
        w3[(layout.features[k], nf + 1 + k)] = -1.0;
    }
    let l3 = Dense::new(w3, b3, vec![Activation::Identity; d]);
    vec![l1, l2, l3]
}

fn feature_block(layout: &Layout, d: usize, thresholds: &[f64], upper: f64, resting: f64) -> SubjectBlock {
    SubjectBlock {
        heads: Vec::new(),
        mlp: band_mlp(layout, d, thresholds, upper, resting, true),
    }
}

/// Copies the plane to every later position, then adds band features of
/// the local plane everywhere.
fn copy_block(layout: &Layout, d: usize, t_len: usize, star: usize, thresholds: &[f64], upper: f64) -> SubjectBlock {
    let mut pattern = Matrix::zeros(t_len, t_len);
    for t in star + 1..t_len {
        pattern[(t, star)] = 1.0;
    }
    let mut value = Matrix::zeros(d, d);
    for &c in &layout.plane {
        value[(c, c)] = 1.0;
    }
    SubjectBlock {
        heads: vec![MixHead { pattern, value }],
        mlp: band_mlp(layout, d, thresholds, upper, 0.0, false),
    }
}

/// Random mixing confined to the content coordinates.
fn distractor_block(layout: &Layout, d: usize, t_len: usize, rng: &mut ChaCha8Rng) -> SubjectBlock {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let nc = layout.content.len() as f64;
    let mut pattern = Matrix::zeros(t_len, t_len);
    for t in 0..t_len {
        for s in 0..=t {
            pattern[(t, s)] = 1.0 / (t + 1) as f64;
        }
    }
    let mut value = Matrix::zeros(d, d);
    for &i in &layout.content {
        for &j in &layout.content {
            value[(i, j)] = 0.4 / nc.sqrt() * normal.sample(rng);
        }
    }
    let mut w1 = Matrix::zeros(DISTRACTOR_UNITS, d);
    let mut b1 = Vector::zeros(DISTRACTOR_UNITS);
    for u in 0..DISTRACTOR_UNITS {
        for &j in &layout.content {
            w1[(u, j)] = normal.sample(rng) / nc.sqrt();
        }
        b1[u] = 0.1 * normal.sample(rng);
    }
    let mut w2 = Matrix::zeros(d, DISTRACTOR_UNITS);
    for &i in &layout.content {
        for u in 0..DISTRACTOR_UNITS {
            w2[(i, u)] = 0.5 / (DISTRACTOR_UNITS as f64).sqrt() * normal.sample(rng);
        }
    }
    SubjectBlock {
        heads: vec![MixHead { pattern, value }],
        mlp: vec![
            Dense::new(w1, b1, vec![Activation::Tanh; DISTRACTOR_UNITS]),
            Dense::new(w2, Vector::zeros(d), vec![Activation::Identity; d]),
        ],
    }
}

impl Subject {
    pub fn config(&self) -> &SubjectConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    pub fn r0(&self) -> f64 {
        self.config.r0
    }

    /// Site whose plane coordinates carry the planted radius.
    pub fn planted_site(&self) -> Site {
        Site::new(self.config.planted_layer, -3)
    }

    pub fn resolve(&self, site: &Site) -> Result<(usize, usize)> {
        site.resolve(self.n_layers(), self.seq_len())
    }

    /// Every site the subject exposes, layer-major.
    pub fn all_sites(&self) -> Vec<Site> {
        (0..self.n_layers())
            .flat_map(|l| (0..self.seq_len() as i64).map(move |t| Site::new(l, t)))
            .collect()
    }

    /// Radius of the planted plane in a hidden state.
    pub fn plane_radius(&self, h: &Vector) -> f64 {
        let [x, y] = self.layout.plane;
        h[x].hypot(h[y])
    }

    /// Order-sensitive digest of every frozen weight.
    pub fn weights_digest(&self) -> u64 {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        let mut feed = |x: f64| x.to_bits().hash(&mut hasher);
        for b in &self.blocks {
            b.for_each_weight(&mut feed);
        }
        for l in &self.readout {
            l.w.iter().for_each(|&x| feed(x));
            l.b.iter().for_each(|&x| feed(x));
        }
        hasher.finish()
    }

    /// Input tokens with the plane written at the source positions.
    pub fn make_input<R: rand::Rng + ?Sized>(&self, radius: f64, angle: f64, rng: &mut R) -> Vec<Vector> {
        let d = self.dim();
        let content = Normal::new(0.0, self.config.content_noise).expect("finite noise scale");
        let scratch = Normal::new(0.0, self.config.scratch_noise).expect("finite noise scale");
        let mut tokens = Vec::with_capacity(self.seq_len());
        for _ in 0..self.seq_len() {
            let mut h = Vector::zeros(d);
            h[self.layout.scratch] = scratch.sample(rng);
            for &c in &self.layout.content {
                h[c] = content.sample(rng);
            }
            tokens.push(h);
        }
        tokens[SOURCES[0]][self.layout.plane[0]] = radius * angle.cos();
        tokens[SOURCES[1]][self.layout.plane[1]] = radius * angle.sin();
        tokens
    }

    fn check_input(&self, tokens: &[Vector]) -> Result<()> {
        if tokens.len() != self.seq_len() {
            return Err(Error::DimensionMismatch {
                expected: self.seq_len(),
                got: tokens.len(),
            });
        }
        for t in tokens {
            check_dim(t, self.dim())?;
            check_finite(t, "input token")?;
        }
        Ok(())
    }

    /// Readout score for the final hidden state at the last position.
    pub fn score(&self, last: &Vector) -> f64 {
        layers::chain_forward(&self.readout, last).0[0]
    }

    pub fn behavior_of(score: f64) -> Behavior {
        if score > 0.0 {
            Behavior::Comply
        } else {
            Behavior::Refuse
        }
    }

    /// Full forward pass with edits applied to block outputs as they are produced.
    pub fn forward_with_hooks(&self, tokens: &[Vector], edits: &[Edit<'_>]) -> Result<HookedRun> {
        self.check_input(tokens)?;
        let resolved = edits
            .iter()
            .map(|e| self.resolve(&e.site))
            .collect::<Result<Vec<_>>>()?;
        let mut states = Vec::with_capacity(self.n_layers());
        let mut records = Vec::new();
        let mut cur: Vec<Vector> = tokens.to_vec();
        for (layer, block) in self.blocks.iter().enumerate() {
            cur = block.forward(&cur);
            for (edit, &(l, t)) in edits.iter().zip(&resolved) {
                if l != layer {
                    continue;
                }
                let after = (edit.apply)(&cur[t])?;
                check_dim(&after, self.dim())?;
                check_finite(&after, "edited hidden state")?;
                let before = std::mem::replace(&mut cur[t], after.clone());
                records.push(EditRecord {
                    layer: l,
                    position: t,
                    before,
                    after,
                });
            }
            states.push(cur.clone());
        }
        let score = self.score(&cur[self.seq_len() - 1]);
        Ok(HookedRun {
            behavior: Self::behavior_of(score),
            score,
            trace: Trace { states },
            edits: records,
        })
    }

    pub fn forward(&self, tokens: &[Vector]) -> Result<HookedRun> {
        self.forward_with_hooks(tokens, &[])
    }

    /// Re-runs the stack after replacing the state at `(layer, position)` by `h`.
    /// Only the causal cone of the edit is recomputed.
    pub fn continue_from(&self, base: &Trace, layer: usize, position: usize, h: Vector) -> Result<Continuation> {
        if layer >= self.n_layers() || position >= self.seq_len() {
            return Err(Error::invalid(format!("site ({layer}, {position}) is outside the model")));
        }
        check_dim(&h, self.dim())?;
        let mut first: Vec<Vector> = base.states[layer][position..].to_vec();
        first[0] = h;
        let mut states = vec![first];
        let mut caches = Vec::new();
        for k in layer + 1..self.n_layers() {
            let prev = states.last().expect("non-empty");
            let inputs: Vec<Vector> = base.states[k - 1][..position].iter().chain(prev.iter()).cloned().collect();
            let (out, cache) = self.blocks[k].forward_from(&inputs, position);
            states.push(out);
            caches.push(cache);
        }
        Ok(Continuation {
            layer,
            position,
            states,
            caches,
        })
    }

    /// Gradient w.r.t. the edited state of `Σ gᵀ h` over the given
    /// `(layer, position, g)` terms. Terms outside the cone contribute nothing.
    pub fn continuation_backward(&self, cont: &Continuation, grads: &[(usize, usize, Vector)]) -> Vector {
        let d = self.dim();
        let width = self.seq_len() - cont.position;
        let mut g: Vec<Vec<Vector>> = vec![vec![Vector::zeros(d); width]; cont.states.len()];
        for (l, t, v) in grads {
            if *l >= cont.layer && *t >= cont.position {
                g[l - cont.layer][t - cont.position] += v;
            }
        }
        for k in (1..cont.states.len()).rev() {
            let gin = self.blocks[cont.layer + k].backward_from(&cont.caches[k - 1], &g[k], cont.position);
            for (acc, x) in g[k - 1].iter_mut().zip(gin) {
                *acc += x;
            }
        }
        g.swap_remove(0).swap_remove(0)
    }

    /// Checks comply ⇔ planted radius > r₀ on one forward pass.
    pub fn check_planted(&self, run: &HookedRun) -> Result<()> {
        let (l, t) = self.resolve(&self.planted_site())?;
        let r = self.plane_radius(run.trace.at(l, t));
        let expect = if r > self.r0() { Behavior::Comply } else { Behavior::Refuse };
        if run.behavior != expect {
            return Err(Error::Sampling(format!(
                "planted rule violated: radius {r} gave {:?} (score {})",
                run.behavior, run.score
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
