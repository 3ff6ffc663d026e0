//! Behavior-aware multimodal item encoder trained with InfoNCE on co-click
//! pairs, plus Hitrate@K retrieval evaluation.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::checkpoint;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::nn::Mlp;
use crate::numerics::optim::{Adagrad, LrSchedule};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::{cosine, dot, l2_normalize, Tensor};
use crate::synthgen::{Item, ItemCatalog, PairSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Mlp,
    Transformer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Hidden widths of each modality tower (empty: single linear layer).
    pub tower_hidden: Vec<usize>,
    pub d_enc: usize,
    pub fuse_hidden: Vec<usize>,
    pub d_fuse: usize,
    pub proj_hidden: Vec<usize>,
    pub d_z: usize,
    pub fusion: Fusion,
    pub tau: f64,
    pub epochs: usize,
    pub batch_pairs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Pairs held out from training to measure the loss curve.
    pub probe_pairs: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            tower_hidden: vec![32],
            d_enc: 32,
            fuse_hidden: vec![],
            d_fuse: 32,
            proj_hidden: vec![32],
            d_z: 32,
            fusion: Fusion::Mlp,
            tau: 0.07,
            epochs: 3,
            batch_pairs: 64,
            lr_start: 0.05,
            lr_end: 0.005,
            probe_pairs: 512,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fusion == Fusion::Transformer {
            return Err(Error::config(
                "encoder.fusion",
                "transformer fusion is not available in this build; use \"mlp\"",
            ));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("encoder.tau", "must be > 0"));
        }
        if self.batch_pairs < 2 {
            return Err(Error::config("encoder.batch_pairs", "must be >= 2"));
        }
        for (f, v) in [("d_enc", self.d_enc), ("d_fuse", self.d_fuse), ("d_z", self.d_z)] {
            if v == 0 {
                return Err(Error::config(format!("encoder.{f}"), "must be >= 1"));
            }
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::config("encoder.lr_start", "learning rates must be > 0"));
        }
        Ok(())
    }
}

fn dims(input: usize, hidden: &[usize], out: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(out);
    d
}

/// `z = g_proj(g_fuse([f_a(a); f_b(b)]))`.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub store: ParamStore,
    pub f_a: Mlp,
    pub f_b: Mlp,
    pub g_fuse: Mlp,
    pub g_proj: Mlp,
}

impl EncoderParams {
    pub fn new(a_dim: usize, b_dim: usize, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let f_a = Mlp::new(&mut store, "f_a", &dims(a_dim, &cfg.tower_hidden, cfg.d_enc), rng);
        let f_b = Mlp::new(&mut store, "f_b", &dims(b_dim, &cfg.tower_hidden, cfg.d_enc), rng);
        let g_fuse = Mlp::new(
            &mut store,
            "g_fuse",
            &dims(2 * cfg.d_enc, &cfg.fuse_hidden, cfg.d_fuse),
            rng,
        );
        let g_proj = Mlp::new(&mut store, "g_proj", &dims(cfg.d_fuse, &cfg.proj_hidden, cfg.d_z), rng);
        Ok(EncoderParams {
            store,
            f_a,
            f_b,
            g_fuse,
            g_proj,
        })
    }

    pub fn d_z(&self) -> usize {
        self.g_proj.out_dim()
    }

    /// Batched forward: `a` is `B×a_dim`, `b` is `B×b_dim`; returns `B×d_z`.
    pub fn forward(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        let ha = self.f_a.forward(g, &self.store, a)?;
        let hb = self.f_b.forward(g, &self.store, b)?;
        let cat = g.concat_cols(&[ha, hb])?;
        let fused = self.g_fuse.forward(g, &self.store, cat)?;
        self.g_proj.forward(g, &self.store, fused)
    }

    fn check_item(&self, item: &Item) -> Result<()> {
        if item.modality_a.len() != self.f_a.in_dim() || item.modality_b.len() != self.f_b.in_dim() {
            return Err(Error::contract(format!(
                "item {} has modality dims ({}, {}), encoder expects ({}, {})",
                item.item_id,
                item.modality_a.len(),
                item.modality_b.len(),
                self.f_a.in_dim(),
                self.f_b.in_dim()
            )));
        }
        Ok(())
    }

    pub fn encode_items(&self, items: &[&Item]) -> Result<Tensor> {
        for it in items {
            self.check_item(it)?;
        }
        let a = Tensor::from_rows(&items.iter().map(|i| i.modality_a.clone()).collect::<Vec<_>>())?;
        let b = Tensor::from_rows(&items.iter().map(|i| i.modality_b.clone()).collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a), g.constant(b));
        let z = self.forward(&mut g, av, bv)?;
        Ok(g.value(z).clone())
    }

    pub fn encode_item(&self, item: &Item) -> Result<Vec<f64>> {
        Ok(self.encode_items(&[item])?.row(0).to_vec())
    }
}

/// InfoNCE over `z` rows where `pairs` is a perfect matching of the rows.
/// Similarities are cosines; each row is an anchor whose negatives are all
/// rows other than itself and its partner.
pub fn info_nce_loss(g: &mut Graph, z: Var, pairs: &[(usize, usize)], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::config("tau", "temperature must be > 0"));
    }
    let n = g.value(z).rows();
    if pairs.len() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "InfoNCE needs at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let mut partner = vec![usize::MAX; n];
    for &(i, j) in pairs {
        if i >= n || j >= n || i == j || partner[i] != usize::MAX || partner[j] != usize::MAX {
            return Err(Error::contract(format!(
                "pair ({i},{j}) is not part of a perfect matching over {n} rows"
            )));
        }
        partner[i] = j;
        partner[j] = i;
    }
    if partner.contains(&usize::MAX) {
        return Err(Error::contract("every batch row must belong to exactly one pair"));
    }
    let zn = g.l2_normalize_rows(z, 1e-12);
    let sim = g.matmul_nt(zn, zn)?;
    g.info_nce(sim, Arc::new(partner), tau)
}

/// Frozen per-item embeddings, one row per catalog item. Reads are counted
/// so callers can assert that a code path never touches the table.
#[derive(Debug)]
pub struct EmbeddingTable {
    rows: Tensor,
    reads: AtomicU64,
}

impl Clone for EmbeddingTable {
    fn clone(&self) -> Self {
        EmbeddingTable {
            rows: self.rows.clone(),
            reads: AtomicU64::new(0),
        }
    }
}

impl PartialEq for EmbeddingTable {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows
    }
}

#[derive(Serialize, Deserialize)]
struct IndexRow {
    item_id: u32,
    row: usize,
}

pub const TABLE_TENSOR: &str = "embedding.z";

impl EmbeddingTable {
    pub fn new(rows: Tensor) -> Self {
        EmbeddingTable {
            rows,
            reads: AtomicU64::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn frozen(&self) -> bool {
        true
    }

    pub fn get(&self, item: u32) -> &[f64] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.rows.row(item as usize)
    }

    pub fn tensor(&self) -> &Tensor {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.rows
    }

    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    /// Copy with every row scaled to unit L2 norm.
    pub fn unit_rows(&self) -> EmbeddingTable {
        let mut t = self.rows.clone();
        let c = t.cols();
        for row in t.data_mut().chunks_mut(c) {
            let v = l2_normalize(row, 1e-12);
            row.copy_from_slice(&v);
        }
        EmbeddingTable::new(t)
    }

    /// Writes `<stem>.savior` and a `<stem>.index.jsonl` id→row map.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        checkpoint::write(
            &dir.join(format!("{stem}.savior")),
            &[(TABLE_TENSOR.to_string(), self.rows.clone())],
        )?;
        crate::io::write_jsonl(
            &dir.join(format!("{stem}.index.jsonl")),
            (0..self.len()).map(|r| IndexRow {
                item_id: r as u32,
                row: r,
            }),
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let tensors = checkpoint::read(&dir.join(format!("{stem}.savior")))?;
        let (_, t) = tensors
            .into_iter()
            .find(|(n, _)| n == TABLE_TENSOR)
            .ok_or_else(|| Error::Format(format!("missing tensor `{TABLE_TENSOR}`")))?;
        let index: Vec<IndexRow> = crate::io::read_jsonl(&dir.join(format!("{stem}.index.jsonl")))?;
        if index.len() != t.rows() || index.iter().any(|r| r.item_id as usize != r.row) {
            return Err(Error::Format("embedding index does not match tensor rows".into()));
        }
        Ok(EmbeddingTable::new(t))
    }
}

pub fn encode_catalog(params: &EncoderParams, catalog: &ItemCatalog) -> Result<EmbeddingTable> {
    let mut rows = Vec::with_capacity(catalog.items.len());
    for chunk in catalog.items.chunks(512) {
        let refs: Vec<&Item> = chunk.iter().collect();
        let z = params.encode_items(&refs)?;
        rows.extend((0..z.rows()).map(|r| z.row(r).to_vec()));
    }
    Ok(EmbeddingTable::new(Tensor::from_rows(&rows)?))
}

/// Groups pairs into batches where no item appears twice; pairs that would
/// repeat an item are carried to a later batch.
pub fn pack_batches(pairs: &[(u32, u32)], batch_pairs: usize) -> Vec<Vec<(u32, u32)>> {
    let mut pending: Vec<(u32, u32)> = pairs.to_vec();
    let mut batches = Vec::new();
    while !pending.is_empty() {
        let mut used = BTreeSet::new();
        let mut batch = Vec::with_capacity(batch_pairs);
        let mut rest = Vec::new();
        for p in pending {
            if batch.len() < batch_pairs && !used.contains(&p.0) && !used.contains(&p.1) {
                used.insert(p.0);
                used.insert(p.1);
                batch.push(p);
            } else {
                rest.push(p);
            }
        }
        if batch.len() < 2 {
            break;
        }
        batches.push(batch);
        pending = rest;
    }
    batches
}

fn batch_loss(
    params: &EncoderParams,
    g: &mut Graph,
    catalog: &ItemCatalog,
    batch: &[(u32, u32)],
    tau: f64,
) -> Result<Var> {
    let items: Vec<&Item> = batch
        .iter()
        .flat_map(|&(i, j)| [&catalog.items[i as usize], &catalog.items[j as usize]])
        .collect();
    let a = g.constant(Tensor::from_rows(
        &items.iter().map(|i| i.modality_a.clone()).collect::<Vec<_>>(),
    )?);
    let b = g.constant(Tensor::from_rows(
        &items.iter().map(|i| i.modality_b.clone()).collect::<Vec<_>>(),
    )?);
    let z = params.forward(g, a, b)?;
    let matching: Vec<(usize, usize)> = (0..batch.len()).map(|p| (2 * p, 2 * p + 1)).collect();
    info_nce_loss(g, z, &matching, tau)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderEpoch {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    /// Loss on the fixed probe batches (epoch 0 is before any update).
    pub probe_loss: f64,
    pub probe_pair_cosine: f64,
}

#[derive(Clone, Debug)]
pub struct EncoderRun {
    pub params: EncoderParams,
    pub table: EmbeddingTable,
    pub history: Vec<EncoderEpoch>,
}

fn mean_pair_cosine(table: &EmbeddingTable, pairs: &[(u32, u32)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|&(i, j)| cosine(table.get(i), table.get(j)))
        .sum::<f64>()
        / pairs.len() as f64
}

fn probe(params: &EncoderParams, catalog: &ItemCatalog, batches: &[Vec<(u32, u32)>], tau: f64) -> Result<f64> {
    if batches.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for b in batches {
        let mut g = Graph::new();
        let l = batch_loss(params, &mut g, catalog, b, tau)?;
        total += g.scalar(l);
    }
    Ok(total / batches.len() as f64)
}

/// Mean cosine over the given pairs under a table.
pub fn pair_cosine(table: &EmbeddingTable, pairs: &[(u32, u32)]) -> f64 {
    mean_pair_cosine(table, pairs)
}

/// Trains the encoder with Adagrad on InfoNCE over packed pair batches.
///
/// On divergence the last parameters that produced a finite epoch are
/// written to `abort_dir/encoder.last_good.savior` (when given) and a
/// divergence error is returned.
pub fn train_encoder(
    catalog: &ItemCatalog,
    pairs: &PairSet,
    cfg: &EncoderConfig,
    seed: u64,
    abort_dir: Option<&Path>,
) -> Result<EncoderRun> {
    cfg.validate()?;
    let first = catalog
        .items
        .first()
        .ok_or_else(|| Error::DegenerateDataset("empty catalog".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(11);
    let mut params = EncoderParams::new(first.modality_a.len(), first.modality_b.len(), cfg, &mut rng)?;
    let mut all: Vec<(u32, u32)> = pairs.pairs();
    if cfg.epochs > 0 && all.len() < cfg.batch_pairs {
        return Err(Error::DegenerateDataset(format!(
            "{} co-click pairs, need at least batch_pairs = {}",
            all.len(),
            cfg.batch_pairs
        )));
    }
    all.shuffle(&mut rng);
    let n_probe = cfg.probe_pairs.min(all.len() / 5);
    let probe_pairs: Vec<(u32, u32)> = all[..n_probe].to_vec();
    let train_pairs: Vec<(u32, u32)> = all[n_probe..].to_vec();
    let probe_batches = pack_batches(&probe_pairs, cfg.batch_pairs);

    let steps_per_epoch = train_pairs.len().div_ceil(cfg.batch_pairs.max(1));
    let horizon = (steps_per_epoch * cfg.epochs).max(1) as u64;
    let mut opt = Adagrad::new(
        &params.store,
        LrSchedule {
            start: cfg.lr_start,
            end: cfg.lr_end,
            horizon,
        },
        1e-10,
    );
    let table0 = encode_catalog(&params, catalog)?;
    let mut history = vec![EncoderEpoch {
        epoch: 0,
        steps: 0,
        train_loss: f64::NAN,
        probe_loss: probe(&params, catalog, &probe_batches, cfg.tau)?,
        probe_pair_cosine: mean_pair_cosine(&table0, &probe_pairs),
    }];
    let mut last_good = params.store.named_tensors();
    for epoch in 1..=cfg.epochs {
        let mut order = train_pairs.clone();
        order.shuffle(&mut rng);
        let batches = pack_batches(&order, cfg.batch_pairs);
        let mut sum = 0.0;
        for batch in &batches {
            let step: Result<f64> = (|| {
                let mut g = Graph::new();
                let loss = batch_loss(&params, &mut g, catalog, batch, cfg.tau)?;
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Divergence(format!("encoder loss {value} at epoch {epoch}")));
                }
                let grads = g.backward(loss)?;
                g.accumulate_param_grads(&grads, &mut params.store);
                opt.step(&mut params.store)?;
                Ok(value)
            })();
            match step {
                Ok(v) => sum += v,
                Err(e @ Error::Divergence(_)) => {
                    if let Some(dir) = abort_dir {
                        checkpoint::write(&dir.join("encoder.last_good.savior"), &last_good)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        let table = encode_catalog(&params, catalog)?;
        history.push(EncoderEpoch {
            epoch,
            steps: batches.len(),
            train_loss: sum / batches.len().max(1) as f64,
            probe_loss: probe(&params, catalog, &probe_batches, cfg.tau)?,
            probe_pair_cosine: mean_pair_cosine(&table, &probe_pairs),
        });
        last_good = params.store.named_tensors();
        log::info!(
            "encoder epoch {epoch}: train {:.4} probe {:.4}",
            history[epoch].train_loss,
            history[epoch].probe_loss
        );
    }
    let table = encode_catalog(&params, catalog)?;
    Ok(EncoderRun { params, table, history })
}

/// Fraction of `(query, next)` transitions whose next item is among the
/// `k` nearest items to the query by cosine (query excluded, ties broken by
/// lower item id).
pub fn hitrate_at_k(table: &EmbeddingTable, transitions: &[(u32, u32)], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("k", "must be >= 1"));
    }
    if transitions.is_empty() {
        return Err(Error::DegenerateDataset("no evaluation transitions".into()));
    }
    let n = table.len();
    let k = if k >= n {
        log::warn!("hitrate K={k} >= corpus size {n}; capping at {}", n - 1);
        n - 1
    } else {
        k
    };
    let unit: Vec<Vec<f64>> = (0..n).map(|i| l2_normalize(table.get(i as u32), 1e-12)).collect();
    let mut hits = 0usize;
    let mut sims = vec![0.0; n];
    let mut current = u32::MAX;
    let mut sorted: Vec<(u32, u32)> = transitions.to_vec();
    sorted.sort_unstable();
    for &(q, t) in &sorted {
        if q != current {
            for (j, u) in unit.iter().enumerate() {
                sims[j] = dot(&unit[q as usize], u);
            }
            current = q;
        }
        let st = sims[t as usize];
        let rank = (0..n)
            .filter(|&j| j != q as usize && j != t as usize)
            .filter(|&j| sims[j] > st || (sims[j] == st && j < t as usize))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / transitions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::SynthConfig;
    use rand::Rng;

    fn item(id: u32, a: Vec<f64>, b: Vec<f64>) -> Item {
        Item {
            item_id: id,
            cluster: 0,
            style: vec![1.0, 0.0],
            modality_a: a,
            modality_b: b,
            popularity: 1.0,
        }
    }

    fn loss_of(rows: Vec<Vec<f64>>, pairs: &[(usize, usize)], tau: f64) -> Result<f64> {
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_rows(&rows)?);
        let l = info_nce_loss(&mut g, z, pairs, tau)?;
        Ok(g.scalar(l))
    }

    #[test]
    fn identical_pair_members_orthogonal_pairs() {
        // anchor 0: positive e (row 1), negatives row 1 (e¹) and rows 2,3 (e⁰)
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let l = loss_of(rows, &[(0, 1), (2, 3)], 1.0).unwrap();
        let e = 1f64.exp();
        assert!((l + (e / (e + 2.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn all_orthogonal_gives_ln3() {
        let rows = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let l = loss_of(rows, &[(0, 1), (2, 3)], 1.0).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_separation_drives_loss_to_zero() {
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0], vec![-1.0, 0.0]];
        let mut prev = f64::INFINITY;
        for tau in [1.0, 0.1, 0.01] {
            let l = loss_of(rows.clone(), &[(0, 1), (2, 3)], tau).unwrap();
            assert!(l >= 0.0 && l < prev);
            prev = l;
        }
        assert!(prev < 1e-80);
    }

    #[test]
    fn loss_errors() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(
            loss_of(rows.clone(), &[(0, 1)], 1.0),
            Err(Error::DegenerateBatch(_))
        ));
        assert!(matches!(loss_of(rows, &[(0, 1)], 0.0), Err(Error::Config { .. })));
    }

    #[test]
    fn encode_is_deterministic_and_checks_dims() {
        let cfg = EncoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EncoderParams::new(3, 2, &cfg, &mut rng).unwrap();
        let it = item(0, vec![0.1, 0.2, 0.3], vec![1.0, -1.0]);
        assert_eq!(p.encode_item(&it).unwrap(), p.encode_item(&it.clone()).unwrap());
        let bad = item(1, vec![0.1], vec![1.0, -1.0]);
        assert!(matches!(p.encode_item(&bad), Err(Error::Contract(_))));
    }

    #[test]
    fn single_layer_identity_encoder_by_hand() {
        let cfg = EncoderConfig {
            tower_hidden: vec![],
            fuse_hidden: vec![],
            proj_hidden: vec![],
            d_enc: 1,
            d_fuse: 2,
            d_z: 2,
            ..EncoderConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = EncoderParams::new(1, 1, &cfg, &mut rng).unwrap();
        let set = |p: &mut EncoderParams, id, data: Vec<f64>| {
            let t = p.store.get_mut(id);
            *t = Tensor::new(t.shape().to_vec(), data).unwrap();
        };
        for m in [p.f_a.clone(), p.f_b.clone()] {
            set(&mut p, m.layers[0].w, vec![1.0]);
            set(&mut p, m.layers[0].b, vec![0.0]);
        }
        let (fuse, proj) = (p.g_fuse.layers[0].clone(), p.g_proj.layers[0].clone());
        set(&mut p, fuse.w, vec![1.0, 0.0, 0.0, 1.0]);
        set(&mut p, fuse.b, vec![0.0, 0.0]);
        // projection [[2,1],[0,3]]
        set(&mut p, proj.w, vec![2.0, 1.0, 0.0, 3.0]);
        set(&mut p, proj.b, vec![0.0, 0.0]);
        let z = p.encode_item(&item(0, vec![0.5], vec![-1.0])).unwrap();
        assert_eq!(z, vec![1.0, 0.5 - 3.0]);
    }

    #[test]
    fn pack_batches_never_repeats_items() {
        let pairs: Vec<(u32, u32)> = (0..200u32).map(|i| (i % 17, 17 + i % 23)).collect();
        let batches = pack_batches(&pairs, 8);
        for b in &batches {
            let mut seen = BTreeSet::new();
            for &(i, j) in b {
                assert!(seen.insert(i) && seen.insert(j));
            }
            assert!(b.len() >= 2 && b.len() <= 8);
        }
    }

    fn random_table(n: usize, d: usize, seed: u64) -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        EmbeddingTable::new(Tensor::from_rows(&rows).unwrap())
    }

    #[test]
    fn hitrate_full_corpus_is_one() {
        let t = random_table(50, 4, 0);
        let tr: Vec<(u32, u32)> = (0..49).map(|i| (i, i + 1)).collect();
        assert_eq!(hitrate_at_k(&t, &tr, 49).unwrap(), 1.0);
        assert_eq!(hitrate_at_k(&t, &tr, 500).unwrap(), 1.0);
    }

    #[test]
    fn hitrate_matches_sort_oracle() {
        let t = random_table(100, 3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tr: Vec<(u32, u32)> = (0..300)
            .map(|_| {
                let q = rng.random_range(0..100u32);
                let mut x = rng.random_range(0..100u32);
                while x == q {
                    x = rng.random_range(0..100u32);
                }
                (q, x)
            })
            .collect();
        for k in [1, 5, 10, 30] {
            let mut hits = 0;
            for &(q, x) in &tr {
                let mut cand: Vec<(f64, u32)> = (0..100u32)
                    .filter(|&j| j != q)
                    .map(|j| (cosine(t.get(q), t.get(j)), j))
                    .collect();
                cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                if cand[..k].iter().any(|c| c.1 == x) {
                    hits += 1;
                }
            }
            let expect = hits as f64 / tr.len() as f64;
            assert_eq!(hitrate_at_k(&t, &tr, k).unwrap(), expect);
        }
    }

    #[test]
    fn random_embeddings_hit_at_chance() {
        let n = 400;
        let t = random_table(n, 16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tr: Vec<(u32, u32)> = (0..3000)
            .map(|_| {
                let q = rng.random_range(0..n as u32);
                let mut x = rng.random_range(0..n as u32);
                while x == q {
                    x = rng.random_range(0..n as u32);
                }
                (q, x)
            })
            .collect();
        let k = 20;
        let p = k as f64 / (n - 1) as f64;
        let sigma = (p * (1.0 - p) / tr.len() as f64).sqrt();
        let h = hitrate_at_k(&t, &tr, k).unwrap();
        assert!((h - p).abs() < 3.0 * sigma, "hitrate {h} vs {p}");
    }

    #[test]
    fn epochs_zero_exports_random_encoder() {
        let sc = SynthConfig {
            n_items: 30,
            n_users: 5,
            n_impressions: 100,
            n_clusters: 3,
            related_k: 5,
            ..SynthConfig::default()
        };
        let cat = crate::synthgen::generate_catalog(&sc, 0).unwrap();
        let cfg = EncoderConfig {
            epochs: 0,
            ..EncoderConfig::default()
        };
        let run = train_encoder(&cat, &PairSet::default(), &cfg, 0, None).unwrap();
        assert_eq!(run.table.len(), 30);
        assert_eq!(run.table.dim(), cfg.d_z);
        assert_eq!(run.history.len(), 1);
    }

    #[test]
    fn table_round_trip() {
        let t = random_table(10, 3, 1);
        let dir = tempfile::tempdir().unwrap();
        t.save(dir.path(), "emb").unwrap();
        let back = EmbeddingTable::load(dir.path(), "emb").unwrap();
        assert_eq!(back, t);
    }
}
