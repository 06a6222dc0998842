//! Loss-site statistics: per-site mean-difference directions, AUC gating
//! and the saturating hinge surrogate.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mean_of, serde_vector, Vector};
use crate::subject::Site;

/// Mean differences shorter than this mark a site as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteStats {
    pub site: Site,
    /// Unit direction from the negative-class mean toward the positive-class mean.
    #[serde(with = "serde_vector")]
    pub v: Vector,
    /// Mean positive-class projection onto `v`.
    pub mu_plus: f64,
    pub auc: f64,
}

impl SiteStats {
    pub fn project(&self, h: &Vector) -> f64 {
        self.v.dot(h)
    }
}

/// Direction, positive-class mean projection and AUC at one site.
pub fn mean_diff_stats(site: Site, acts_plus: &[Vector], acts_minus: &[Vector]) -> Result<SiteStats> {
    let mp = mean_of(acts_plus).ok_or_else(|| Error::invalid("positive activations are empty"))?;
    let mm = mean_of(acts_minus).ok_or_else(|| Error::invalid("negative activations are empty"))?;
    if mp.len() != mm.len() {
        return Err(Error::DimensionMismatch {
            expected: mp.len(),
            got: mm.len(),
        });
    }
    let diff = mp - mm;
    let norm = diff.norm();
    if !(norm >= DEGENERATE_NORM) {
        return Err(Error::DegenerateDirection { norm });
    }
    let v = diff / norm;
    let plus: Vec<f64> = acts_plus.iter().map(|h| v.dot(h)).collect();
    let minus: Vec<f64> = acts_minus.iter().map(|h| v.dot(h)).collect();
    let mu_plus = plus.iter().sum::<f64>() / plus.len() as f64;
    Ok(SiteStats {
        site,
        v,
        mu_plus,
        auc: auc(&plus, &minus),
    })
}

/// Probability that a random positive score exceeds a random negative one,
/// ties counting one half (Mann–Whitney U / (n⁺ n⁻)).
///
/// Computed from mid-ranks in exact integer arithmetic, so the result is
/// bit-identical to the exhaustive pairwise count.
pub fn auc(scores_plus: &[f64], scores_minus: &[f64]) -> f64 {
    let np = scores_plus.len() as u128;
    let nm = scores_minus.len() as u128;
    if np == 0 || nm == 0 {
        return f64::NAN;
    }
    let mut all: Vec<(f64, bool)> = scores_plus
        .iter()
        .map(|&s| (s, true))
        .chain(scores_minus.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Twice the rank sum of the positives; a tie group over 1-based ranks
    // i..=j has mid-rank (i + j) / 2.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0.total_cmp(&all[i].0) == Ordering::Equal {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        let pos_in_group = all[i..=j].iter().filter(|(_, p)| *p).count() as u128;
        twice_rank_sum += twice_mid * pos_in_group;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - np * (np + 1);
    (twice_u as f64 / 2.0) / (np * nm) as f64
}

/// Sites selected for supervision, in layer-major then position order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSiteSet {
    pub intervention_site: Site,
    pub tau: f64,
    pub entries: Vec<SiteStats>,
}

/// `true` when `candidate` lies in the causal cone of `origin`: a later layer,
/// or the same layer at a later position. Positions are absolute.
pub fn is_downstream(origin: (usize, usize), candidate: (usize, usize)) -> bool {
    candidate.0 > origin.0 || (candidate.0 == origin.0 && candidate.1 > origin.1)
}

/// Keeps downstream sites whose AUC is at least `tau`.
///
/// All sites are resolved against `(n_layers, seq_len)` before comparison.
pub fn select_sites(
    stats: &[SiteStats],
    tau: f64,
    intervention_site: Site,
    n_layers: usize,
    seq_len: usize,
) -> Result<LossSiteSet> {
    if !(tau > 0.5 && tau <= 1.0) {
        return Err(Error::invalid(format!("tau must lie in (0.5, 1], got {tau}")));
    }
    let origin = intervention_site.resolve(n_layers, seq_len)?;
    let mut kept = Vec::new();
    for s in stats {
        let at = s.site.resolve(n_layers, seq_len)?;
        if is_downstream(origin, at) && s.auc >= tau {
            kept.push((at, s.clone()));
        }
    }
    if kept.is_empty() {
        return Err(Error::NoSupervision { tau });
    }
    kept.sort_by_key(|(at, _)| *at);
    Ok(LossSiteSet {
        intervention_site,
        tau,
        entries: kept.into_iter().map(|(_, s)| s).collect(),
    })
}

impl LossSiteSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `Σ max(0, μ_s⁺ − p_s)` for projections aligned with `entries`.
    pub fn hinge(&self, projections: &[f64]) -> f64 {
        self.entries
            .iter()
            .zip(projections)
            .map(|(s, &p)| (s.mu_plus - p).max(0.0))
            .sum()
    }

    /// Sites whose hinge term is active (projection strictly below `μ_s⁺`).
    pub fn active(&self, projections: &[f64]) -> Vec<bool> {
        self.entries
            .iter()
            .zip(projections)
            .map(|(s, &p)| p < s.mu_plus)
            .collect()
    }
}

/// Hinge surrogate over a map from site to projection `v_sᵀ h_s`.
pub fn hinge_loss(projections: &HashMap<Site, f64>, set: &LossSiteSet) -> Result<f64> {
    let aligned = set
        .entries
        .iter()
        .map(|s| {
            projections.get(&s.site).copied().ok_or_else(|| {
                Error::invalid(format!(
                    "no projection for site (layer {}, position {})",
                    s.site.layer, s.site.position
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(set.hinge(&aligned))
}
