//! Synthetic recommendation world with a known click model.
//!
//! Items carry a unit-norm latent style, two noisy linear "modality" views of
//! that style and a power-law popularity. Users carry a unit-norm interest.
//! Impressions are generated round by round (one per user per round), and
//! each click is a Bernoulli draw from
//!
//! ```text
//! p* = σ(w_interest·⟨interest, style⟩ + w_recency·recency + w_pop·ln(pop) + bias)
//! ```
//!
//! where `recency` is the decay-weighted mean cosine between the candidate
//! and the user's most recent clicks.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Pareto};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::{dot, l2_norm, logit, sigmoid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub n_impressions: usize,
    pub d_style: usize,
    /// Number of style clusters; items scatter around cluster centers.
    pub n_clusters: usize,
    pub cluster_spread: f64,
    pub modality_a_dim: usize,
    pub modality_b_dim: usize,
    /// Std of the Gaussian noise added to each modality coordinate.
    pub modality_noise: f64,
    /// Pareto shape of the popularity draw (smaller is heavier-tailed).
    pub popularity_exponent: f64,
    /// Categorical cardinalities of the user profile fields.
    pub profile_cardinalities: Vec<usize>,
    pub n_max: usize,
    pub w_interest: f64,
    pub w_recency: f64,
    pub w_pop: f64,
    pub bias: f64,
    pub recency_window: usize,
    pub recency_decay: f64,
    /// Std of the logit-space noise that turns p* into base_pctr.
    pub base_noise: f64,
    /// Probability an impression comes from the style neighbourhood of the
    /// user's last click instead of the global popularity draw.
    pub related_exposure: f64,
    pub related_k: usize,
    pub session_window: u64,
    pub min_coclick: u32,
    /// Fraction of final rounds held out for evaluation.
    pub eval_fraction: f64,
    /// Optional cold-start filter: evaluation keeps candidates whose total
    /// PV is below this threshold.
    pub cold_start_max_pv: Option<u64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_items: 2000,
            n_users: 500,
            n_impressions: 200_000,
            d_style: 8,
            n_clusters: 40,
            cluster_spread: 0.5,
            modality_a_dim: 24,
            modality_b_dim: 16,
            modality_noise: 0.1,
            popularity_exponent: 1.2,
            profile_cardinalities: vec![6, 4],
            n_max: 20,
            w_interest: 2.0,
            w_recency: 4.0,
            w_pop: 0.3,
            bias: -4.0,
            recency_window: 20,
            recency_decay: 0.9,
            base_noise: 1.5,
            related_exposure: 0.5,
            related_k: 20,
            session_window: 50,
            min_coclick: 2,
            eval_fraction: 0.1,
            cold_start_max_pv: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: &str| Err(Error::config(format!("synth.{f}"), r));
        if self.d_style < 2 {
            return bad("d_style", "must be >= 2");
        }
        if self.n_items < 10 {
            return bad("n_items", "must be >= 10");
        }
        if self.n_users == 0 {
            return bad("n_users", "must be >= 1");
        }
        if self.n_impressions == 0 {
            return bad("n_impressions", "must be >= 1");
        }
        if self.n_clusters == 0 {
            return bad("n_clusters", "must be >= 1");
        }
        if self.modality_a_dim == 0 || self.modality_b_dim == 0 {
            return bad("modality_a_dim", "modality dims must be >= 1");
        }
        if !(self.popularity_exponent > 0.0) {
            return bad("popularity_exponent", "must be > 0");
        }
        if self.n_max == 0 {
            return bad("n_max", "must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.related_exposure) {
            return bad("related_exposure", "must be in [0, 1]");
        }
        if self.related_k == 0 || self.related_k >= self.n_items {
            return bad("related_k", "must be in [1, n_items)");
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad("eval_fraction", "must be in (0, 1)");
        }
        if self.min_coclick == 0 {
            return bad("min_coclick", "must be >= 1");
        }
        if self.base_noise < 0.0 || self.modality_noise < 0.0 || self.cluster_spread < 0.0 {
            return bad("base_noise", "noise levels must be >= 0");
        }
        if self.profile_cardinalities.contains(&0) {
            return bad("profile_cardinalities", "cardinalities must be >= 1");
        }
        Ok(())
    }

    pub fn rounds(&self) -> u64 {
        self.n_impressions.div_ceil(self.n_users) as u64
    }

    /// First round belonging to the evaluation window.
    pub fn eval_start_round(&self) -> u64 {
        let r = self.rounds();
        let held = ((r as f64) * self.eval_fraction).ceil() as u64;
        r.saturating_sub(held.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: u32,
    pub cluster: u32,
    pub style: Vec<f64>,
    pub modality_a: Vec<f64>,
    pub modality_b: Vec<f64>,
    pub popularity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub user_id: u32,
    pub interest: Vec<f64>,
    pub profile: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    pub user_id: u32,
    pub item_id: u32,
    pub clicked: bool,
    pub sequence_snapshot: Vec<u32>,
    pub base_pctr: f64,
    /// Ground-truth click probability p*.
    pub true_pctr: f64,
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemCatalog {
    pub items: Vec<Item>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionLog {
    pub impressions: Vec<Impression>,
}

/// Half-open PV intervals `[e₀,e₁), …, [e_last, ∞)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PvBucketing {
    edges: Vec<u64>,
}

impl PvBucketing {
    pub fn new(edges: Vec<u64>) -> Result<Self> {
        if edges.first() != Some(&0) {
            return Err(Error::config("bucket_edges", "must start at 0"));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("bucket_edges", "must be strictly increasing"));
        }
        Ok(PvBucketing { edges })
    }

    /// `[0,100), [100,500), [500,1000), [1000,5000), [5000,10000), [10000,20000), [20000,∞)`.
    pub fn table_default() -> Self {
        PvBucketing {
            edges: vec![0, 100, 500, 1000, 5000, 10_000, 20_000],
        }
    }

    pub fn edges(&self) -> &[u64] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn bucket_of(&self, pv: u64) -> usize {
        self.edges.partition_point(|&e| e <= pv) - 1
    }

    pub fn label(&self, b: usize) -> String {
        match self.edges.get(b + 1) {
            Some(hi) => format!("[{},{})", self.edges[b], hi),
            None => format!("[{},inf)", self.edges[b]),
        }
    }

    pub fn histogram(&self, pvs: &[u64]) -> Vec<usize> {
        let mut h = vec![0; self.len()];
        for &pv in pvs {
            h[self.bucket_of(pv)] += 1;
        }
        h
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn unit_gaussian(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: Vec<f64> = (0..d).map(|_| n.sample(rng)).collect();
        let norm = l2_norm(&v);
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = l2_norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn random_map(rng: &mut impl Rng, out: usize, d: usize) -> Vec<Vec<f64>> {
    let n = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
    (0..out).map(|_| (0..d).map(|_| n.sample(rng)).collect()).collect()
}

fn cluster_centers(cfg: &SynthConfig, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed, 1);
    (0..cfg.n_clusters)
        .map(|_| unit_gaussian(&mut rng, cfg.d_style))
        .collect()
}

pub fn generate_catalog(cfg: &SynthConfig, seed: u64) -> Result<ItemCatalog> {
    cfg.validate()?;
    let centers = cluster_centers(cfg, seed);
    let mut rng = rng_for(seed, 2);
    let map_a = random_map(&mut rng, cfg.modality_a_dim, cfg.d_style);
    let map_b = random_map(&mut rng, cfg.modality_b_dim, cfg.d_style);
    let noise = Normal::new(0.0, cfg.modality_noise.max(f64::MIN_POSITIVE)).unwrap();
    let spread = Normal::new(
        0.0,
        cfg.cluster_spread.max(f64::MIN_POSITIVE) / (cfg.d_style as f64).sqrt(),
    )
    .unwrap();
    let pareto = Pareto::new(1.0, cfg.popularity_exponent).unwrap();
    let project = |m: &[Vec<f64>], s: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        m.iter()
            .map(|row| {
                let e = if cfg.modality_noise > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                dot(row, s) + e
            })
            .collect()
    };
    let items = (0..cfg.n_items)
        .map(|i| {
            let cluster = rng.random_range(0..cfg.n_clusters);
            let style = loop {
                let v: Vec<f64> = centers[cluster]
                    .iter()
                    .map(|&c| {
                        c + if cfg.cluster_spread > 0.0 {
                            spread.sample(&mut rng)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if l2_norm(&v) > 1e-9 {
                    break normalized(v);
                }
            };
            let modality_a = project(&map_a, &style, &mut rng);
            let modality_b = project(&map_b, &style, &mut rng);
            let popularity = pareto.sample(&mut rng);
            Item {
                item_id: i as u32,
                cluster: cluster as u32,
                style,
                modality_a,
                modality_b,
                popularity,
            }
        })
        .collect();
    Ok(ItemCatalog { items })
}

pub fn generate_users(cfg: &SynthConfig, seed: u64) -> Result<Vec<User>> {
    cfg.validate()?;
    let centers = cluster_centers(cfg, seed);
    let mut rng = rng_for(seed, 3);
    let jitter = Normal::new(0.0, 0.3 / (cfg.d_style as f64).sqrt()).unwrap();
    Ok((0..cfg.n_users)
        .map(|u| {
            let a = &centers[rng.random_range(0..cfg.n_clusters)];
            let b = &centers[rng.random_range(0..cfg.n_clusters)];
            let mix: f64 = rng.random_range(0.5..1.0);
            let raw: Vec<f64> = a
                .iter()
                .zip(b)
                .map(|(x, y)| mix * x + (1.0 - mix) * y + jitter.sample(&mut rng))
                .collect();
            let interest = if l2_norm(&raw) > 1e-9 {
                normalized(raw)
            } else {
                unit_gaussian(&mut rng, cfg.d_style)
            };
            let profile = cfg
                .profile_cardinalities
                .iter()
                .map(|&c| rng.random_range(0..c) as u32)
                .collect();
            User {
                user_id: u as u32,
                interest,
                profile,
            }
        })
        .collect())
}

/// Cumulative-weight sampler.
struct WeightedIndex {
    cum: Vec<f64>,
}

impl WeightedIndex {
    fn new(weights: impl Iterator<Item = f64>) -> Self {
        let mut acc = 0.0;
        let cum = weights
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        WeightedIndex { cum }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        let total = *self.cum.last().unwrap();
        let x = rng.random::<f64>() * total;
        self.cum.partition_point(|&c| c <= x).min(self.cum.len() - 1)
    }
}

/// Top-`k` style neighbours (by cosine, excluding the item itself) per item.
pub fn style_neighbours(catalog: &ItemCatalog, k: usize) -> Vec<Vec<u32>> {
    let items = &catalog.items;
    items
        .iter()
        .map(|a| {
            let mut sims: Vec<(f64, u32)> = items
                .iter()
                .filter(|b| b.item_id != a.item_id)
                .map(|b| (dot(&a.style, &b.style), b.item_id))
                .collect();
            sims.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
            sims.truncate(k);
            sims.into_iter().map(|(_, id)| id).collect()
        })
        .collect()
}

/// Ground-truth click logit for a candidate given the user's click history
/// (most recent last).
pub fn true_logit(cfg: &SynthConfig, user: &User, item: &Item, history: &[&Item]) -> f64 {
    let mut recency = 0.0;
    if !history.is_empty() {
        let mut wsum = 0.0;
        for (age, past) in history.iter().rev().take(cfg.recency_window).enumerate() {
            let w = cfg.recency_decay.powi(age as i32);
            recency += w * dot(&past.style, &item.style);
            wsum += w;
        }
        recency /= wsum;
    }
    cfg.w_interest * dot(&user.interest, &item.style)
        + cfg.w_recency * recency
        + cfg.w_pop * item.popularity.ln()
        + cfg.bias
}

pub fn generate_interactions(
    catalog: &ItemCatalog,
    users: &[User],
    cfg: &SynthConfig,
    seed: u64,
) -> Result<InteractionLog> {
    cfg.validate()?;
    if catalog.items.len() != cfg.n_items || users.len() != cfg.n_users {
        return Err(Error::contract("catalog/users do not match the synth config sizes"));
    }
    let mut rng = rng_for(seed, 4);
    let global = WeightedIndex::new(catalog.items.iter().map(|i| i.popularity));
    let neighbours = if cfg.related_exposure > 0.0 {
        style_neighbours(catalog, cfg.related_k)
    } else {
        Vec::new()
    };
    let local: Vec<WeightedIndex> = neighbours
        .iter()
        .map(|ns| WeightedIndex::new(ns.iter().map(|&j| catalog.items[j as usize].popularity)))
        .collect();
    let base_noise = Normal::new(0.0, cfg.base_noise.max(f64::MIN_POSITIVE)).unwrap();
    let mut clicks: Vec<Vec<u32>> = vec![Vec::new(); users.len()];
    let mut impressions = Vec::with_capacity(cfg.n_impressions);
    let mut round = 0u64;
    'outer: loop {
        // clicks of this round only become visible from the next round on
        let mut new_clicks: Vec<(usize, u32)> = Vec::new();
        for user in users {
            if impressions.len() == cfg.n_impressions {
                break 'outer;
            }
            let u = user.user_id as usize;
            let last = clicks[u].last().copied();
            let item_idx = match last {
                Some(q) if rng.random::<f64>() < cfg.related_exposure => {
                    neighbours[q as usize][local[q as usize].sample(&mut rng)] as usize
                }
                _ => global.sample(&mut rng),
            };
            let item = &catalog.items[item_idx];
            let history: Vec<&Item> = clicks[u]
                .iter()
                .rev()
                .take(cfg.recency_window)
                .rev()
                .map(|&c| &catalog.items[c as usize])
                .collect();
            let z = true_logit(cfg, user, item, &history);
            let p = sigmoid(z);
            let clicked = rng.random::<f64>() < p;
            let base_pctr = if cfg.base_noise > 0.0 {
                sigmoid(z + base_noise.sample(&mut rng))
            } else {
                p
            }
            .clamp(1e-9, 1.0 - 1e-9);
            let seq = &clicks[u];
            let sequence_snapshot = seq[seq.len().saturating_sub(cfg.n_max)..].to_vec();
            impressions.push(Impression {
                user_id: user.user_id,
                item_id: item.item_id,
                clicked,
                sequence_snapshot,
                base_pctr,
                true_pctr: p,
                timestamp: round,
            });
            if clicked {
                new_clicks.push((u, item.item_id));
            }
        }
        for (u, i) in new_clicks {
            clicks[u].push(i);
        }
        round += 1;
    }
    Ok(InteractionLog { impressions })
}

/// Realized page views per item (impression counts over the whole log).
pub fn item_pv(log: &InteractionLog, n_items: usize) -> Vec<u64> {
    let mut pv = vec![0u64; n_items];
    for imp in &log.impressions {
        pv[imp.item_id as usize] += 1;
    }
    pv
}

/// Co-click pairs in canonical `(min, max)` order with their support: the
/// number of distinct users who clicked both items within `window` rounds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairSet {
    pairs: BTreeMap<(u32, u32), u32>,
}

impl PairSet {
    pub fn from_counts(pairs: BTreeMap<(u32, u32), u32>) -> Self {
        PairSet { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn count(&self, i: u32, j: u32) -> Option<u32> {
        self.pairs.get(&(i.min(j), i.max(j))).copied()
    }

    pub fn contains(&self, i: u32, j: u32) -> bool {
        self.count(i, j).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((u32, u32), u32)> + '_ {
        self.pairs.iter().map(|(&k, &v)| (k, v))
    }

    pub fn pairs(&self) -> Vec<(u32, u32)> {
        self.pairs.keys().copied().collect()
    }
}

pub fn mine_coclick_pairs(log: &InteractionLog, window: u64, min_count: u32) -> Result<PairSet> {
    if min_count == 0 {
        return Err(Error::config("min_count", "must be >= 1"));
    }
    let mut per_user: BTreeMap<u32, Vec<(u64, u32)>> = BTreeMap::new();
    for imp in log.impressions.iter().filter(|i| i.clicked) {
        per_user
            .entry(imp.user_id)
            .or_default()
            .push((imp.timestamp, imp.item_id));
    }
    let mut counts: BTreeMap<(u32, u32), u32> = BTreeMap::new();
    for clicks in per_user.values_mut() {
        clicks.sort_unstable();
        let mut seen: BTreeSet<(u32, u32)> = BTreeSet::new();
        for (a, &(ta, ia)) in clicks.iter().enumerate() {
            for &(tb, ib) in &clicks[a + 1..] {
                if tb - ta > window {
                    break;
                }
                if ia != ib {
                    seen.insert((ia.min(ib), ia.max(ib)));
                }
            }
        }
        for p in seen {
            *counts.entry(p).or_insert(0) += 1;
        }
    }
    counts.retain(|_, c| *c >= min_count);
    Ok(PairSet { pairs: counts })
}

/// AUC of the ground-truth click probability against realized clicks.
pub fn bayes_auc(log: &InteractionLog) -> Result<f64> {
    let scores: Vec<f64> = log.impressions.iter().map(|i| i.true_pctr).collect();
    let labels: Vec<bool> = log.impressions.iter().map(|i| i.clicked).collect();
    crate::evalkit::auc(&scores, &labels)
}

/// Consecutive click transitions `(query, next)` per user, restricted to
/// transitions whose second click happens at or after `from_round`.
pub fn click_transitions(log: &InteractionLog, from_round: u64) -> Vec<(u32, u32)> {
    let mut last: BTreeMap<u32, u32> = BTreeMap::new();
    let mut out = Vec::new();
    for imp in log.impressions.iter().filter(|i| i.clicked) {
        if let Some(&q) = last.get(&imp.user_id) {
            if imp.timestamp >= from_round && q != imp.item_id {
                out.push((q, imp.item_id));
            }
        }
        last.insert(imp.user_id, imp.item_id);
    }
    out
}

/// Logit-space gap between base_pctr and p*, for diagnostics.
pub fn base_noise_realized(log: &InteractionLog) -> f64 {
    let n = log.impressions.len() as f64;
    let ss: f64 = log
        .impressions
        .iter()
        .map(|i| (logit(i.base_pctr) - logit(i.true_pctr)).powi(2))
        .sum();
    (ss / n).sqrt()
}

pub fn shuffle_in_place<T>(v: &mut [T], rng: &mut impl Rng) {
    v.shuffle(rng);
}
