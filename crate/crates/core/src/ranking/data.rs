//! Ranking samples, chronological split and causal item statistics.

use crate::error::{Error, Result};
use crate::rqvae::SemanticId;
use crate::synthgen::{InteractionLog, User};

pub const STATS_DIM: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub user: u32,
    pub item: u32,
    pub seq: Vec<u32>,
    pub base_pctr: f64,
    pub label: bool,
    pub timestamp: u64,
}

#[derive(Clone, Debug, Default)]
struct Timeline {
    rounds: Vec<u64>,
    cum_imps: Vec<u64>,
    cum_clicks: Vec<u64>,
}

/// Per-item impression/click counts queryable at any time point, counting
/// only events strictly earlier than the query.
#[derive(Clone, Debug)]
pub struct ItemStats {
    timelines: Vec<Timeline>,
}

impl ItemStats {
    pub fn from_log(log: &InteractionLog, n_items: usize) -> Self {
        let mut timelines = vec![Timeline::default(); n_items];
        for imp in &log.impressions {
            let t = &mut timelines[imp.item_id as usize];
            let (imps, clicks) = match (t.cum_imps.last(), t.cum_clicks.last()) {
                (Some(&a), Some(&b)) => (a, b),
                _ => (0, 0),
            };
            let c = imp.clicked as u64;
            if t.rounds.last() == Some(&imp.timestamp) {
                *t.cum_imps.last_mut().unwrap() += 1;
                *t.cum_clicks.last_mut().unwrap() += c;
            } else {
                debug_assert!(t.rounds.last().is_none_or(|&r| r < imp.timestamp));
                t.rounds.push(imp.timestamp);
                t.cum_imps.push(imps + 1);
                t.cum_clicks.push(clicks + c);
            }
        }
        ItemStats { timelines }
    }

    /// `(impressions, clicks)` strictly before `t`.
    pub fn counts(&self, item: u32, t: u64) -> (u64, u64) {
        let tl = &self.timelines[item as usize];
        let n = tl.rounds.partition_point(|&r| r < t);
        if n == 0 {
            (0, 0)
        } else {
            (tl.cum_imps[n - 1], tl.cum_clicks[n - 1])
        }
    }

    /// `[log1p(imps), log1p(clicks), (clicks+1)/(imps+3)]` before `t`.
    pub fn features(&self, item: u32, t: u64) -> [f64; STATS_DIM] {
        let (i, c) = self.counts(item, t);
        [
            (i as f64).ln_1p(),
            (c as f64).ln_1p(),
            (c as f64 + 1.0) / (i as f64 + 3.0),
        ]
    }
}

/// Everything the ranker consumes apart from the frozen embedding table.
#[derive(Clone, Debug)]
pub struct RankingData {
    pub samples: Vec<Sample>,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub stats: ItemStats,
    pub profiles: Vec<Vec<u32>>,
    pub profile_cards: Vec<usize>,
    pub item_pv: Vec<u64>,
    pub codes: Vec<SemanticId>,
    pub n_items: usize,
}

impl RankingData {
    /// Splits at `eval_start` (rounds before train, rounds from it evaluate);
    /// `cold_start_max_pv` keeps only evaluation candidates below that PV.
    pub fn build(
        log: &InteractionLog,
        users: &[User],
        profile_cards: &[usize],
        codes: Vec<SemanticId>,
        n_items: usize,
        eval_start: u64,
        cold_start_max_pv: Option<u64>,
    ) -> Result<Self> {
        if codes.len() != n_items {
            return Err(Error::contract(format!(
                "{} semantic ids for {n_items} items",
                codes.len()
            )));
        }
        let item_pv = crate::synthgen::item_pv(log, n_items);
        let samples: Vec<Sample> = log
            .impressions
            .iter()
            .map(|i| Sample {
                user: i.user_id,
                item: i.item_id,
                seq: i.sequence_snapshot.clone(),
                base_pctr: i.base_pctr,
                label: i.clicked,
                timestamp: i.timestamp,
            })
            .collect();
        let train: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].timestamp < eval_start)
            .collect();
        let eval: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].timestamp >= eval_start)
            .filter(|&i| cold_start_max_pv.is_none_or(|m| item_pv[samples[i].item as usize] < m))
            .collect();
        Ok(RankingData {
            stats: ItemStats::from_log(log, n_items),
            profiles: users.iter().map(|u| u.profile.clone()).collect(),
            profile_cards: profile_cards.to_vec(),
            samples,
            train,
            eval,
            item_pv,
            codes,
            n_items,
        })
    }

    pub fn n_users(&self) -> usize {
        self.profiles.len()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<bool> {
        idx.iter().map(|&i| self.samples[i].label).collect()
    }

    pub fn pvs(&self, idx: &[usize]) -> Vec<u64> {
        idx.iter()
            .map(|&i| self.item_pv[self.samples[i].item as usize])
            .collect()
    }
}
