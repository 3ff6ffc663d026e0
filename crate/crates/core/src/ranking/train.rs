//! Cross-entropy training of the ranker and batched prediction.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalkit::auc;
use crate::numerics::checkpoint;
use crate::numerics::graph::Graph;
use crate::numerics::optim::{Adagrad, LrSchedule};
use crate::numerics::tensor::Tensor;
use crate::saviorenc::EmbeddingTable;

use super::data::RankingData;
use super::model::{forward_logits, RankerParams};
use super::{Ablation, RankerConfig};

/// Mean binary cross-entropy evaluated from logits.
pub fn ctr_loss(logits: &[f64], labels: &[bool]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::Dimension {
            op: "ctr_loss",
            lhs: vec![logits.len()],
            rhs: vec![labels.len()],
        });
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(logits.len(), 1, logits.to_vec())?);
    let y = Arc::new(labels.iter().map(|&l| l as u8 as f64).collect());
    let l = g.bce_with_logits(x, y)?;
    Ok(g.scalar(l))
}

/// Logits for `idx`, evaluated in chunks.
pub fn predict(p: &RankerParams, data: &RankingData, table: &EmbeddingTable, idx: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(1024) {
        let mut g = Graph::new();
        let l = forward_logits(&mut g, p, data, table, chunk)?;
        out.extend_from_slice(g.value(l).data());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_auc: Option<f64>,
}

/// Owns parameters and optimizer state for step-by-step training.
pub struct Trainer<'a> {
    pub params: RankerParams,
    opt: Adagrad,
    data: &'a RankingData,
    table: &'a EmbeddingTable,
}

impl<'a> Trainer<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cfg: &RankerConfig,
        ablation: Ablation,
        data: &'a RankingData,
        table: &'a EmbeddingTable,
        rq_books: &[Tensor],
        seed: u64,
        total_steps: u64,
    ) -> Result<Self> {
        let first = rq_books
            .first()
            .ok_or_else(|| Error::contract("ranker needs the RQ codebook stack"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(32);
        let mut params = RankerParams::new(cfg, ablation, data, table.dim(), rq_books.len(), first.rows(), &mut rng)?;
        if ablation == Ablation::NoRawMm {
            params.init_mba_from(rq_books)?;
        }
        let opt = Adagrad::new(
            &params.store,
            LrSchedule {
                start: cfg.lr_start,
                end: cfg.lr_end,
                horizon: total_steps.max(1),
            },
            1e-10,
        );
        Ok(Trainer {
            params,
            opt,
            data,
            table,
        })
    }

    /// One Adagrad step on the samples `idx`; returns the batch loss.
    pub fn step(&mut self, idx: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let logits = forward_logits(&mut g, &self.params, self.data, self.table, idx)?;
        let labels = Arc::new(idx.iter().map(|&i| self.data.samples[i].label as u8 as f64).collect());
        let loss = g.bce_with_logits(logits, labels)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence(format!("ranker loss {value}")));
        }
        let grads = g.backward(loss)?;
        g.accumulate_param_grads(&grads, &mut self.params.store);
        self.opt.step(&mut self.params.store)?;
        Ok(value)
    }
}

#[derive(Clone, Debug)]
pub struct RankerRun {
    pub params: RankerParams,
    pub history: Vec<EpochRecord>,
    /// SHA-256 over the ordered sample indices of every batch.
    pub stream_hash: String,
}

/// Shuffled batches over the training split; identical for every ablation
/// given the seed.
pub fn batch_stream(data: &RankingData, batch: usize, epochs: usize, seed: u64) -> Vec<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(31);
    (0..epochs)
        .map(|_| {
            let mut order = data.train.clone();
            order.shuffle(&mut rng);
            order.chunks(batch).map(|c| c.to_vec()).collect()
        })
        .collect()
}

pub fn stream_hash(epochs: &[Vec<Vec<usize>>]) -> String {
    let mut h = Sha256::new();
    for (e, batches) in epochs.iter().enumerate() {
        h.update((e as u64).to_le_bytes());
        for b in batches {
            h.update((b.len() as u64).to_le_bytes());
            for &i in b {
                h.update((i as u64).to_le_bytes());
            }
        }
    }
    format!("{:x}", h.finalize())
}

fn eval_metrics(p: &RankerParams, data: &RankingData, table: &EmbeddingTable) -> Result<(f64, Option<f64>)> {
    if data.eval.is_empty() {
        return Ok((f64::NAN, None));
    }
    let logits = predict(p, data, table, &data.eval)?;
    let labels = data.labels(&data.eval);
    Ok((ctr_loss(&logits, &labels)?, auc(&logits, &labels).ok()))
}

/// Trains the ranker for one ablation. The embedding table and semantic IDs
/// are read-only inputs.
#[allow(clippy::too_many_arguments)]
pub fn train_ranker(
    data: &RankingData,
    table: &EmbeddingTable,
    rq_books: &[Tensor],
    cfg: &RankerConfig,
    ablation: Ablation,
    seed: u64,
    abort_dir: Option<&Path>,
) -> Result<RankerRun> {
    cfg.validate()?;
    let labels = data.labels(&data.train);
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::DegenerateDataset(format!(
            "training split has {pos} clicks out of {} impressions; both classes are required",
            labels.len()
        )));
    }
    let stream = batch_stream(data, cfg.batch, cfg.epochs, seed);
    let total: usize = stream.iter().map(Vec::len).sum();
    let mut trainer = Trainer::new(cfg, ablation, data, table, rq_books, seed, total as u64)?;
    let (eval_loss, eval_auc) = eval_metrics(&trainer.params, data, table)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        steps: 0,
        train_loss: f64::NAN,
        eval_loss,
        eval_auc,
    }];
    let mut last_good = trainer.params.store.named_tensors();
    for (e, batches) in stream.iter().enumerate() {
        let mut sum = 0.0;
        for b in batches {
            match trainer.step(b) {
                Ok(v) => sum += v,
                Err(err @ Error::Divergence(_)) => {
                    if let Some(dir) = abort_dir {
                        checkpoint::write(&dir.join("ranker.last_good.savior"), &last_good)?;
                    }
                    return Err(err);
                }
                Err(err) => return Err(err),
            }
        }
        let (eval_loss, eval_auc) = eval_metrics(&trainer.params, data, table)?;
        history.push(EpochRecord {
            epoch: e + 1,
            steps: batches.len(),
            train_loss: sum / batches.len().max(1) as f64,
            eval_loss,
            eval_auc,
        });
        last_good = trainer.params.store.named_tensors();
        log::info!("ranker[{ablation}] epoch {}: {:?}", e + 1, history.last().unwrap());
    }
    Ok(RankerRun {
        params: trainer.params,
        history,
        stream_hash: stream_hash(&stream),
    })
}
