//! CTR ranker: alignment codebook over semantic IDs, bi-directional target
//! attention, DNN head, training loop and ablation switches.

pub mod data;
#[cfg(test)]
pub(crate) mod fixture;
pub mod model;
pub mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use data::{ItemStats, RankingData, Sample};
pub use model::{
    forward_logits, mba_forward, target_attention, AttnBlock, BiDta, BlockMask, FeatureSet, MbaParams, RankerParams,
};
pub use train::{ctr_loss, predict, train_ranker, EpochRecord, RankerRun};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreNorm {
    None,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ablation {
    Full,
    NoMba,
    NoRawMm,
    NoBidir,
    NoMm,
    NoId,
    NoStats,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Full,
        Ablation::NoMba,
        Ablation::NoRawMm,
        Ablation::NoBidir,
        Ablation::NoMm,
        Ablation::NoId,
        Ablation::NoStats,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoMba => "no_mba",
            Ablation::NoRawMm => "no_raw_mm",
            Ablation::NoBidir => "no_bidir",
            Ablation::NoMm => "no_mm",
            Ablation::NoId => "no_id",
            Ablation::NoStats => "no_stats",
        }
    }

    pub fn uses_modal(self) -> bool {
        self != Ablation::NoMm
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL.into_iter().find(|a| a.tag() == s).ok_or_else(|| {
            Error::config(
                "ablation",
                format!(
                    "unknown tag `{s}` (expected one of {})",
                    Ablation::ALL.map(|a| a.tag()).join(", ")
                ),
            )
        })
    }
}

impl Serialize for Ablation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.tag())
    }
}

impl<'de> Deserialize<'de> for Ablation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankerConfig {
    pub user_dim: usize,
    pub profile_dim: usize,
    pub id_dim: usize,
    pub d_mba: usize,
    pub mba_hidden: usize,
    /// Std of the first fusion layer's bias at initialization.
    pub mba_bias_std: f64,
    /// Norm floor of the L2 normalization applied to concatenated codewords.
    pub mba_norm_eps: f64,
    pub heads: usize,
    pub head_dim: usize,
    pub score_norm: ScoreNorm,
    pub dnn_hidden: Vec<usize>,
    pub batch: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub ablation: Ablation,
}

impl Default for RankerConfig {
    fn default() -> Self {
        RankerConfig {
            user_dim: 8,
            profile_dim: 4,
            id_dim: 16,
            d_mba: 16,
            mba_hidden: 32,
            mba_bias_std: 0.1,
            mba_norm_eps: 1.0,
            heads: 2,
            head_dim: 8,
            score_norm: ScoreNorm::None,
            dnn_hidden: vec![64, 32],
            batch: 256,
            epochs: 5,
            lr_start: 0.02,
            lr_end: 0.002,
            ablation: Ablation::Full,
        }
    }
}

impl RankerConfig {
    pub fn validate(&self) -> Result<()> {
        for (f, v) in [
            ("user_dim", self.user_dim),
            ("profile_dim", self.profile_dim),
            ("id_dim", self.id_dim),
            ("d_mba", self.d_mba),
            ("mba_hidden", self.mba_hidden),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("batch", self.batch),
        ] {
            if v == 0 {
                return Err(Error::config(format!("ranker.{f}"), "must be >= 1"));
            }
        }
        if !(self.mba_norm_eps > 0.0) {
            return Err(Error::config("ranker.mba_norm_eps", "must be > 0"));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::config("ranker.lr_start", "learning rates must be > 0"));
        }
        if self.mba_bias_std < 0.0 {
            return Err(Error::config("ranker.mba_bias_std", "must be >= 0"));
        }
        Ok(())
    }
}
