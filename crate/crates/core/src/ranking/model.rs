//! Ranker parameters and the batched forward pass: alignment codebook,
//! four target-attention blocks and the DNN head.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::nn::{Init, Mlp};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::Tensor;
use crate::rqvae::{CodebookStack, SemanticId};
use crate::saviorenc::EmbeddingTable;

use super::data::{RankingData, Sample, STATS_DIM};
use super::{Ablation, RankerConfig, ScoreNorm};

/// Zero-initialized codebook indexed by semantic IDs plus a fusion MLP whose
/// last layer starts at zero, so its output is exactly zero at step 0.
#[derive(Clone, Debug)]
pub struct MbaParams {
    pub stack: CodebookStack,
    pub fusion: Mlp,
    pub eps: f64,
}

impl MbaParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        layers: usize,
        codes: usize,
        d_mba: usize,
        hidden: usize,
        d_z: usize,
        bias_std: f64,
        eps: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let stack = CodebookStack::new(store, "mba.codebook", layers, codes, d_mba);
        let fusion = Mlp::with_inits(
            store,
            "mba.fusion",
            &[layers * d_mba, hidden, d_z],
            &[Init::ScaledWithBias(bias_std), Init::Zeros],
            rng,
        );
        MbaParams { stack, fusion, eps }
    }

    /// `MLP(l2_normalize([C_1[c_1]; …; C_L[c_L]]))` for each ID, `n × d_z`.
    pub fn v_align(&self, g: &mut Graph, store: &ParamStore, ids: &[&SemanticId]) -> Result<Var> {
        for id in ids {
            id.validate(self.stack.layers(), self.stack.codes)?;
        }
        let mut parts = Vec::with_capacity(self.stack.layers());
        for l in 0..self.stack.layers() {
            let book = g.param(store, self.stack.ids[l]);
            let idx: Vec<usize> = ids.iter().map(|id| id.codes[l] as usize).collect();
            parts.push(g.gather_rows(book, Arc::new(idx))?);
        }
        let cat = g.concat_cols(&parts)?;
        let unit = g.l2_normalize_rows(cat, self.eps);
        self.fusion.forward(g, store, unit)
    }
}

/// `z_align = z + v_align` for a single item (or `v_align` alone when
/// `skip` is false).
pub fn mba_forward(z: &[f64], codes: &SemanticId, mba: &MbaParams, store: &ParamStore, skip: bool) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let v = mba.v_align(&mut g, store, &[codes])?;
    let out = g.value(v).row(0);
    if out.len() != z.len() {
        return Err(Error::Dimension {
            op: "mba_forward",
            lhs: vec![z.len()],
            rhs: vec![out.len()],
        });
    }
    Ok(if skip {
        z.iter().zip(out).map(|(a, b)| a + b).collect()
    } else {
        out.to_vec()
    })
}

/// One multi-head target-attention block (no biases).
#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        q_dim: usize,
        kv_key_dim: usize,
        v_dim: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut w = |n: &str, rows: usize| {
            let nd = Normal::new(0.0, (1.0 / rows as f64).sqrt()).unwrap();
            let data = (0..rows * heads * head_dim).map(|_| nd.sample(rng)).collect();
            store.add(
                format!("{name}.{n}"),
                Tensor::matrix(rows, heads * head_dim, data).expect("positive dims"),
            )
        };
        let wq = w("wq", q_dim);
        let wk = w("wk", kv_key_dim);
        let wv = w("wv", v_dim);
        AttnBlock {
            wq,
            wk,
            wv,
            heads,
            head_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// `q` is `B×dq` (one query per sequence), `k_in`/`v_in` hold all
    /// sequence rows back to back as delimited by `offsets`. Returns
    /// `B×(H·d)`; sequences with no rows produce zero rows.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        k_in: Option<Var>,
        v_in: Option<Var>,
        offsets: &Arc<Vec<usize>>,
        norm: ScoreNorm,
    ) -> Result<Var> {
        let b = g.value(q).rows();
        let (k_in, v_in) = match (k_in, v_in) {
            (Some(k), Some(v)) => (k, v),
            _ => return Ok(g.constant(Tensor::zeros(&[b, self.out_dim()]))),
        };
        if g.value(k_in).rows() != g.value(v_in).rows() {
            return Err(Error::contract("key and value sequences differ in length"));
        }
        let wq = g.param(store, self.wq);
        let wk = g.param(store, self.wk);
        let wv = g.param(store, self.wv);
        let qp = g.matmul(q, wq)?;
        let kp = g.matmul(k_in, wk)?;
        let vp = g.matmul(v_in, wv)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut s = g.attn_scores(qp, kp, offsets.clone(), self.heads, scale)?;
        if norm == ScoreNorm::Softmax {
            s = g.segment_softmax(s, offsets.clone())?;
        }
        g.attn_combine(s, vp, offsets.clone())
    }
}

/// Single-query target attention. Returns the output and whether the
/// sequence was empty (in which case the output is all zeros).
pub fn target_attention(
    block: &AttnBlock,
    store: &ParamStore,
    q: &[f64],
    seq_k: &[Vec<f64>],
    seq_v: &[Vec<f64>],
    norm: ScoreNorm,
) -> Result<(Vec<f64>, bool)> {
    if seq_k.len() != seq_v.len() {
        return Err(Error::contract("key and value sequences differ in length"));
    }
    if seq_k.is_empty() {
        return Ok((vec![0.0; block.out_dim()], true));
    }
    let mut g = Graph::new();
    let qv = g.constant(Tensor::from_rows(&[q.to_vec()])?);
    let kv = g.constant(Tensor::from_rows(seq_k)?);
    let vv = g.constant(Tensor::from_rows(seq_v)?);
    let offsets = Arc::new(vec![0, seq_k.len()]);
    let out = block.forward(&mut g, store, qv, Some(kv), Some(vv), &offsets, norm)?;
    Ok((g.value(out).row(0).to_vec(), false))
}

pub const BLOCK_ROLES: [&str; 4] = ["behavior", "modal", "modal2behavior", "behavior2modal"];

/// Blocks in role order: behavior, modal, modal→behavior, behavior→modal.
#[derive(Clone, Debug)]
pub struct BiDta {
    pub blocks: [AttnBlock; 4],
}

/// Which of the four block outputs to compute and concatenate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockMask(pub [bool; 4]);

impl BlockMask {
    pub const ALL: BlockMask = BlockMask([true; 4]);
}

impl BiDta {
    pub fn new(
        store: &mut ParamStore,
        h_dim: usize,
        z_dim: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut mk = |role: &str, q: usize, k: usize, v: usize| {
            AttnBlock::new(store, &format!("bidta.{role}"), q, k, v, heads, head_dim, rng)
        };
        let b = mk("behavior", h_dim, h_dim, h_dim);
        let m = mk("modal", z_dim, z_dim, z_dim);
        let m2b = mk("modal2behavior", z_dim, z_dim, h_dim);
        let b2m = mk("behavior2modal", h_dim, h_dim, z_dim);
        BiDta {
            blocks: [b, m, m2b, b2m],
        }
    }

    /// `h_b = TA(h, H, H)`, `h_m = TA(z, Z, Z)`, `h_m2b = TA(z, Z, H)`,
    /// `h_b2m = TA(h, H, Z)`; returns the enabled outputs in that order.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h_cand: Var,
        z_cand: Option<Var>,
        h_seq: Option<Var>,
        z_seq: Option<Var>,
        offsets: &Arc<Vec<usize>>,
        mask: BlockMask,
        norm: ScoreNorm,
    ) -> Result<Vec<Var>> {
        if let (Some(h), Some(z)) = (h_seq, z_seq) {
            if g.value(h).rows() != g.value(z).rows() {
                return Err(Error::contract(format!(
                    "behavior sequence has {} rows, modal sequence {}",
                    g.value(h).rows(),
                    g.value(z).rows()
                )));
            }
        }
        let mut out = Vec::new();
        let need_z = |z: Option<Var>| z.ok_or_else(|| Error::contract("modal block enabled without modal inputs"));
        if mask.0[0] {
            out.push(self.blocks[0].forward(g, store, h_cand, h_seq, h_seq, offsets, norm)?);
        }
        if mask.0[1] {
            let zc = need_z(z_cand)?;
            out.push(self.blocks[1].forward(g, store, zc, z_seq, z_seq, offsets, norm)?);
        }
        if mask.0[2] {
            let zc = need_z(z_cand)?;
            out.push(self.blocks[2].forward(g, store, zc, z_seq, h_seq, offsets, norm)?);
        }
        if mask.0[3] {
            need_z(z_cand)?;
            out.push(self.blocks[3].forward(g, store, h_cand, h_seq, z_seq, offsets, norm)?);
        }
        Ok(out)
    }
}

/// Per-ablation feature switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureSet {
    pub id: bool,
    pub stats: bool,
    pub modal: bool,
    pub mba: bool,
    pub z_skip: bool,
    pub blocks: BlockMask,
}

impl FeatureSet {
    pub fn of(a: Ablation) -> Self {
        let full = FeatureSet {
            id: true,
            stats: true,
            modal: true,
            mba: true,
            z_skip: true,
            blocks: BlockMask::ALL,
        };
        match a {
            Ablation::Full => full,
            Ablation::NoMba => FeatureSet { mba: false, ..full },
            Ablation::NoRawMm => FeatureSet { z_skip: false, ..full },
            Ablation::NoBidir => FeatureSet {
                blocks: BlockMask([true, true, false, false]),
                ..full
            },
            Ablation::NoMm => FeatureSet {
                modal: false,
                mba: false,
                z_skip: false,
                blocks: BlockMask([true, false, false, false]),
                ..full
            },
            Ablation::NoId => FeatureSet { id: false, ..full },
            Ablation::NoStats => FeatureSet { stats: false, ..full },
        }
    }

    pub fn h_dim(&self, id_dim: usize) -> usize {
        (if self.id { id_dim } else { 0 }) + (if self.stats { STATS_DIM } else { 0 })
    }
}

/// base_pctr, its logit and the empty-sequence flag.
const EXTRA_DIM: usize = 3;

#[derive(Clone, Debug)]
pub struct RankerParams {
    pub store: ParamStore,
    pub user_emb: ParamId,
    pub profile_emb: Vec<ParamId>,
    pub id_emb: ParamId,
    pub mba: MbaParams,
    pub bidta: BiDta,
    pub dnn: Mlp,
    pub features: FeatureSet,
    pub score_norm: ScoreNorm,
    pub d_z: usize,
}

fn embedding(store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> ParamId {
    let nd = Normal::new(0.0, 0.1).unwrap();
    let data = (0..rows * dim).map(|_| nd.sample(rng)).collect();
    store.add(name, Tensor::matrix(rows, dim, data).expect("positive dims"))
}

impl RankerParams {
    /// Parameters are created in the same order for every ablation; only the
    /// DNN input width (created last) depends on the ablation.
    pub fn new(
        cfg: &RankerConfig,
        ablation: Ablation,
        data: &RankingData,
        d_z: usize,
        rq_layers: usize,
        rq_codes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let features = FeatureSet::of(ablation);
        let mut store = ParamStore::new();
        let user_emb = embedding(&mut store, "user_emb", data.n_users(), cfg.user_dim, rng);
        let profile_emb = data
            .profile_cards
            .iter()
            .enumerate()
            .map(|(f, &card)| embedding(&mut store, &format!("profile_emb.{f}"), card, cfg.profile_dim, rng))
            .collect();
        let id_emb = embedding(&mut store, "id_emb", data.n_items, cfg.id_dim, rng);
        let mba = MbaParams::new(
            &mut store,
            rq_layers,
            rq_codes,
            cfg.d_mba,
            cfg.mba_hidden,
            d_z,
            cfg.mba_bias_std,
            cfg.mba_norm_eps,
            rng,
        );
        let h_full = STATS_DIM + cfg.id_dim;
        let bidta = BiDta::new(&mut store, h_full, d_z, cfg.heads, cfg.head_dim, rng);
        let attn_out = cfg.heads * cfg.head_dim;
        let n_blocks = features.blocks.0.iter().filter(|&&b| b).count();
        let dnn_in = cfg.user_dim
            + cfg.profile_dim * data.profile_cards.len()
            + h_full
            + if features.modal { d_z } else { 0 }
            + n_blocks * attn_out
            + EXTRA_DIM;
        let mut dims = vec![dnn_in];
        dims.extend_from_slice(&cfg.dnn_hidden);
        dims.push(1);
        let dnn = Mlp::new(&mut store, "dnn", &dims, rng);
        Ok(RankerParams {
            store,
            user_emb,
            profile_emb,
            id_emb,
            mba,
            bidta,
            dnn,
            features,
            score_norm: cfg.score_norm,
            d_z,
        })
    }

    /// Copies RQ codebooks into the alignment codebook (the `no_raw_mm`
    /// initialization).
    pub fn init_mba_from(&mut self, books: &[Tensor]) -> Result<()> {
        if books.len() != self.mba.stack.layers() {
            return Err(Error::config("ranker.d_mba", "RQ stack has a different layer count"));
        }
        for (l, b) in books.iter().enumerate() {
            let id = self.mba.stack.ids[l];
            if b.shape() != self.store.get(id).shape() {
                return Err(Error::config(
                    "ranker.d_mba",
                    format!(
                        "no_raw_mm copies RQ codebooks, which are {:?}; alignment codebook is {:?}",
                        b.shape(),
                        self.store.get(id).shape()
                    ),
                ));
            }
            *self.store.get_mut(id) = b.clone();
        }
        Ok(())
    }
}

/// Sequence layout for a batch: per-sample row ranges into the flattened
/// sequence plus the flattened item ids and timestamps.
struct SeqLayout {
    offsets: Arc<Vec<usize>>,
    items: Vec<u32>,
    times: Vec<u64>,
}

fn layout(samples: &[&Sample]) -> SeqLayout {
    let mut offsets = Vec::with_capacity(samples.len() + 1);
    offsets.push(0);
    let mut items = Vec::new();
    let mut times = Vec::new();
    for s in samples {
        items.extend_from_slice(&s.seq);
        times.extend(std::iter::repeat_n(s.timestamp, s.seq.len()));
        offsets.push(items.len());
    }
    SeqLayout {
        offsets: Arc::new(offsets),
        items,
        times,
    }
}

fn behavior_rows(g: &mut Graph, p: &RankerParams, data: &RankingData, items: &[u32], times: &[u64]) -> Result<Var> {
    let mut parts = Vec::new();
    if p.features.id {
        let table = g.param(&p.store, p.id_emb);
        parts.push(g.gather_rows(table, Arc::new(items.iter().map(|&i| i as usize).collect()))?);
    } else {
        parts.push(g.constant(Tensor::zeros(&[items.len(), p.store.get(p.id_emb).cols()])));
    }
    let stats: Vec<f64> = items
        .iter()
        .zip(times)
        .flat_map(|(&i, &t)| {
            if p.features.stats {
                data.stats.features(i, t)
            } else {
                [0.0; STATS_DIM]
            }
        })
        .collect();
    parts.push(g.constant(Tensor::matrix(items.len(), STATS_DIM, stats)?));
    g.concat_cols(&parts)
}

/// Logits (`B×1`) for the samples `idx` of `data`.
pub fn forward_logits(
    g: &mut Graph,
    p: &RankerParams,
    data: &RankingData,
    table: &EmbeddingTable,
    idx: &[usize],
) -> Result<Var> {
    let samples: Vec<&Sample> = idx.iter().map(|&i| &data.samples[i]).collect();
    let b = samples.len();
    let lay = layout(&samples);
    let mut dnn_in = Vec::new();

    let users = g.param(&p.store, p.user_emb);
    dnn_in.push(g.gather_rows(users, Arc::new(samples.iter().map(|s| s.user as usize).collect()))?);
    for (f, &id) in p.profile_emb.iter().enumerate() {
        let t = g.param(&p.store, id);
        let rows = samples
            .iter()
            .map(|s| data.profiles[s.user as usize][f] as usize)
            .collect();
        dnn_in.push(g.gather_rows(t, Arc::new(rows))?);
    }

    let cand_items: Vec<u32> = samples.iter().map(|s| s.item).collect();
    let cand_times: Vec<u64> = samples.iter().map(|s| s.timestamp).collect();
    let h_cand = behavior_rows(g, p, data, &cand_items, &cand_times)?;
    let h_seq = if lay.items.is_empty() {
        None
    } else {
        Some(behavior_rows(g, p, data, &lay.items, &lay.times)?)
    };
    dnn_in.push(h_cand);

    let (z_cand, z_seq) = if p.features.modal {
        let mut unique: BTreeMap<u32, usize> = BTreeMap::new();
        for &i in cand_items.iter().chain(&lay.items) {
            let n = unique.len();
            unique.entry(i).or_insert(n);
        }
        let mut order = vec![0u32; unique.len()];
        for (&item, &pos) in &unique {
            order[pos] = item;
        }
        let z_rows: Vec<Vec<f64>> = order.iter().map(|&i| table.get(i).to_vec()).collect();
        let z_u = g.constant(Tensor::from_rows(&z_rows)?);
        let aligned = if p.features.mba {
            let ids: Vec<&SemanticId> = order.iter().map(|&i| &data.codes[i as usize]).collect();
            let v = p.mba.v_align(g, &p.store, &ids)?;
            if p.features.z_skip {
                g.add(z_u, v)?
            } else {
                v
            }
        } else {
            z_u
        };
        let zc = g.gather_rows(aligned, Arc::new(cand_items.iter().map(|i| unique[i]).collect()))?;
        let zs = if lay.items.is_empty() {
            None
        } else {
            Some(g.gather_rows(aligned, Arc::new(lay.items.iter().map(|i| unique[i]).collect()))?)
        };
        (Some(zc), zs)
    } else {
        (None, None)
    };
    if let Some(zc) = z_cand {
        dnn_in.push(zc);
    }

    let blocks = p.bidta.forward(
        g,
        &p.store,
        h_cand,
        z_cand,
        h_seq,
        z_seq,
        &lay.offsets,
        p.features.blocks,
        p.score_norm,
    )?;
    dnn_in.extend(blocks);

    let extra: Vec<f64> = samples
        .iter()
        .flat_map(|s| {
            [
                s.base_pctr,
                crate::numerics::tensor::logit(s.base_pctr),
                if s.seq.is_empty() { 1.0 } else { 0.0 },
            ]
        })
        .collect();
    dnn_in.push(g.constant(Tensor::matrix(b, EXTRA_DIM, extra)?));
    let x = g.concat_cols(&dnn_in)?;
    p.dnn.forward(g, &p.store, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranking::fixture::{self, CODES, D_Z, LAYERS};
    use rand::SeedableRng;
    use rand_distr::StandardNormal;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn set(store: &mut ParamStore, id: ParamId, data: Vec<f64>) {
        let t = store.get_mut(id);
        let shape = t.shape().to_vec();
        *t = Tensor::new(shape, data).unwrap();
    }

    #[test]
    fn mba_is_identity_at_init() {
        let mut store = ParamStore::new();
        let mba = MbaParams::new(&mut store, LAYERS, CODES, 5, 7, D_Z, 0.5, 1e-12, &mut rng(1));
        let mut r = rng(2);
        for c in 0..CODES as u32 {
            let z = randn(&mut r, D_Z);
            let id = SemanticId {
                codes: vec![c, (c + 3) % CODES as u32, 0],
            };
            let out = mba_forward(&z, &id, &mba, &store, true).unwrap();
            assert_eq!(out, z);
            assert!(mba_forward(&z, &id, &mba, &store, false)
                .unwrap()
                .iter()
                .all(|&x| x == 0.0));
        }
    }

    #[test]
    fn mba_two_layer_hand_case() {
        let mut store = ParamStore::new();
        let mba = MbaParams::new(&mut store, 2, 3, 1, 2, 2, 0.0, 1e-12, &mut rng(0));
        set(&mut store, mba.stack.ids[0], vec![0.0, 3.0, 0.0]);
        set(&mut store, mba.stack.ids[1], vec![0.0, 0.0, 4.0]);
        for l in &mba.fusion.layers {
            set(&mut store, l.w, vec![1.0, 0.0, 0.0, 1.0]);
            set(&mut store, l.b, vec![0.0, 0.0]);
        }
        let id = SemanticId { codes: vec![1, 2] };
        let out = mba_forward(&[1.0, -1.0], &id, &mba, &store, true).unwrap();
        assert!((out[0] - 1.6).abs() < 1e-15 && (out[1] + 0.2).abs() < 1e-15, "{out:?}");
    }

    #[test]
    fn mba_gradient_touches_only_selected_rows() {
        let mut store = ParamStore::new();
        let mut r = rng(3);
        let mba = MbaParams::new(&mut store, LAYERS, CODES, 4, 6, D_Z, 0.5, 1e-12, &mut r);
        for (l, &id) in mba.stack.ids.iter().enumerate() {
            set(
                &mut store,
                id,
                randn(&mut r, CODES * 4).iter().map(|x| x + l as f64).collect(),
            );
        }
        let last = mba.fusion.layers.last().unwrap();
        set(&mut store, last.w, randn(&mut r, 6 * D_Z));
        let ids = [SemanticId { codes: vec![0, 5, 2] }, SemanticId { codes: vec![7, 5, 2] }];
        let mut g = Graph::new();
        let v = mba.v_align(&mut g, &store, &[&ids[0], &ids[1]]).unwrap();
        let loss = g.sum_squares(v).unwrap();
        let grads = g.backward(loss).unwrap();
        g.accumulate_param_grads(&grads, &mut store);
        let used = [vec![0, 7], vec![5], vec![2]];
        for l in 0..LAYERS {
            let t = store.get(mba.stack.ids[l]);
            let grad = t.grad().unwrap();
            for c in 0..CODES {
                let row = &grad[c * 4..(c + 1) * 4];
                let nonzero = row.iter().any(|&x| x != 0.0);
                assert_eq!(nonzero, used[l].contains(&c), "layer {l} code {c}");
            }
        }
    }

    fn block(heads: usize, head_dim: usize, dq: usize, dk: usize, dv: usize, seed: u64) -> (ParamStore, AttnBlock) {
        let mut store = ParamStore::new();
        let b = AttnBlock::new(&mut store, "b", dq, dk, dv, heads, head_dim, &mut rng(seed));
        (store, b)
    }

    fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
        (0..w.cols())
            .map(|j| (0..w.rows()).map(|i| x[i] * w.at(i, j)).sum())
            .collect()
    }

    #[test]
    fn attention_single_element_hand_case() {
        let (store, b) = block(2, 3, 4, 5, 2, 7);
        let mut r = rng(8);
        let q = randn(&mut r, 4);
        let k = randn(&mut r, 5);
        let v = randn(&mut r, 2);
        let qp = vec_mat(&q, store.get(b.wq));
        let kp = vec_mat(&k, store.get(b.wk));
        let vp = vec_mat(&v, store.get(b.wv));
        let (none, empty) = target_attention(&b, &store, &q, std::slice::from_ref(&k), std::slice::from_ref(&v), ScoreNorm::None).unwrap();
        assert!(!empty);
        for h in 0..2 {
            let s: f64 = (0..3).map(|j| qp[h * 3 + j] * kp[h * 3 + j]).sum::<f64>() / 3f64.sqrt();
            for j in 0..3 {
                assert!((none[h * 3 + j] - s * vp[h * 3 + j]).abs() < 1e-12);
            }
        }
        let (soft, _) = target_attention(&b, &store, &q, &[k], &[v], ScoreNorm::Softmax).unwrap();
        for j in 0..6 {
            assert!((soft[j] - vp[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_empty_sequence_is_zero() {
        let (store, b) = block(2, 2, 3, 3, 3, 0);
        let (out, empty) = target_attention(&b, &store, &[1.0, 2.0, 3.0], &[], &[], ScoreNorm::Softmax).unwrap();
        assert!(empty);
        assert_eq!(out, vec![0.0; 4]);
        assert!(target_attention(&b, &store, &[1.0; 3], &[vec![1.0; 3]], &[], ScoreNorm::None).is_err());
    }

    #[test]
    fn zero_query_key_with_softmax_is_mean() {
        let (mut store, b) = block(2, 2, 3, 3, 3, 4);
        set(&mut store, b.wq, vec![0.0; 12]);
        set(&mut store, b.wk, vec![0.0; 12]);
        let mut r = rng(5);
        let seq: Vec<Vec<f64>> = (0..6).map(|_| randn(&mut r, 3)).collect();
        let (out, _) = target_attention(&b, &store, &randn(&mut r, 3), &seq, &seq, ScoreNorm::Softmax).unwrap();
        let wv = store.get(b.wv);
        let mut mean = vec![0.0; 4];
        for s in &seq {
            for (m, x) in mean.iter_mut().zip(vec_mat(s, wv)) {
                *m += x / 6.0;
            }
        }
        for (a, e) in out.iter().zip(&mean) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn attention_ignores_sequence_order(seed in 0u64..1000, len in 1usize..12, soft: bool) {
            use rand::seq::SliceRandom;
            let (store, b) = block(2, 3, 4, 5, 3, seed);
            let mut r = rng(seed + 1);
            let q = randn(&mut r, 4);
            let ks: Vec<Vec<f64>> = (0..len).map(|_| randn(&mut r, 5)).collect();
            let vs: Vec<Vec<f64>> = (0..len).map(|_| randn(&mut r, 3)).collect();
            let norm = if soft { ScoreNorm::Softmax } else { ScoreNorm::None };
            let (a, _) = target_attention(&b, &store, &q, &ks, &vs, norm).unwrap();
            let mut perm: Vec<usize> = (0..len).collect();
            perm.shuffle(&mut r);
            let pk: Vec<Vec<f64>> = perm.iter().map(|&i| ks[i].clone()).collect();
            let pv: Vec<Vec<f64>> = perm.iter().map(|&i| vs[i].clone()).collect();
            let (b2, _) = target_attention(&b, &store, &q, &pk, &pv, norm).unwrap();
            for (x, y) in a.iter().zip(&b2) {
                proptest::prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }

    fn bidta_inputs(g: &mut Graph, seed: u64, d: usize) -> (Var, Var, Var, Var, Arc<Vec<usize>>) {
        let mut r = rng(seed);
        let offsets = Arc::new(vec![0, 3, 3, 7]);
        let hc = g.constant(Tensor::matrix(3, d, randn(&mut r, 3 * d)).unwrap());
        let zc = g.constant(Tensor::matrix(3, d, randn(&mut r, 3 * d)).unwrap());
        let hs = g.constant(Tensor::matrix(7, d, randn(&mut r, 7 * d)).unwrap());
        let zs = g.constant(Tensor::matrix(7, d, randn(&mut r, 7 * d)).unwrap());
        (hc, zc, hs, zs, offsets)
    }

    #[test]
    fn bidirectional_blocks_are_symmetric_with_shared_weights() {
        let d = 4;
        let mut store = ParamStore::new();
        let bi = BiDta::new(&mut store, d, d, 2, 3, &mut rng(9));
        let shared = [bi.blocks[0].wq, bi.blocks[0].wk, bi.blocks[0].wv].map(|id| store.get(id).clone());
        for blk in &bi.blocks[1..] {
            for (id, t) in [blk.wq, blk.wk, blk.wv].into_iter().zip(&shared) {
                *store.get_mut(id) = t.clone();
            }
        }
        for norm in [ScoreNorm::None, ScoreNorm::Softmax] {
            let mut g = Graph::new();
            let (hc, _, hs, _, offsets) = bidta_inputs(&mut g, 10, d);
            let out = bi
                .forward(
                    &mut g,
                    &store,
                    hc,
                    Some(hc),
                    Some(hs),
                    Some(hs),
                    &offsets,
                    BlockMask::ALL,
                    norm,
                )
                .unwrap();
            let first = g.value(out[0]).data().to_vec();
            assert!(first.iter().any(|&x| x != 0.0));
            for o in &out[1..] {
                assert_eq!(g.value(*o).data(), &first[..]);
            }
            // sample 1 has an empty sequence
            assert!(g.value(out[0]).row(1).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn behavior_projection_does_not_reach_modal_blocks() {
        let d = 4;
        let mut store = ParamStore::new();
        let bi = BiDta::new(&mut store, d, d, 2, 2, &mut rng(11));
        let run = |store: &ParamStore| {
            let mut g = Graph::new();
            let (hc, zc, hs, zs, offsets) = bidta_inputs(&mut g, 12, d);
            let out = bi
                .forward(
                    &mut g,
                    store,
                    hc,
                    Some(zc),
                    Some(hs),
                    Some(zs),
                    &offsets,
                    BlockMask::ALL,
                    ScoreNorm::None,
                )
                .unwrap();
            out.iter().map(|&o| g.value(o).data().to_vec()).collect::<Vec<_>>()
        };
        let before = run(&store);
        set(&mut store, bi.blocks[0].wq, vec![0.0; d * 4]);
        set(&mut store, bi.blocks[0].wk, vec![0.0; d * 4]);
        let after = run(&store);
        assert!(after[0].iter().all(|&x| x == 0.0));
        assert_ne!(before[0], after[0]);
        assert_eq!(before[1], after[1]);
        assert_eq!(before[2], after[2]);
        assert_eq!(before[3], after[3]);
    }

    #[test]
    fn bidta_rejects_mismatched_sequences() {
        let mut store = ParamStore::new();
        let bi = BiDta::new(&mut store, 2, 2, 1, 2, &mut rng(0));
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[1, 2]));
        let h = g.constant(Tensor::zeros(&[3, 2]));
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let offsets = Arc::new(vec![0, 3]);
        let r = bi.forward(
            &mut g,
            &store,
            q,
            Some(q),
            Some(h),
            Some(z),
            &offsets,
            BlockMask::ALL,
            ScoreNorm::None,
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn ablations_share_initial_parameters() {
        let (data, table) = fixture::world(0);
        let cfg = RankerConfig::default();
        let full = RankerParams::new(&cfg, Ablation::Full, &data, table.dim(), LAYERS, CODES, &mut rng(5)).unwrap();
        for a in Ablation::ALL {
            let p = RankerParams::new(&cfg, a, &data, table.dim(), LAYERS, CODES, &mut rng(5)).unwrap();
            for ((_, n1, t1), (_, n2, t2)) in full.store.iter().zip(p.store.iter()) {
                assert_eq!(n1, n2);
                if !n1.starts_with("dnn") {
                    assert_eq!(t1.data(), t2.data(), "{a} {n1}");
                }
            }
        }
    }

    #[test]
    fn no_mm_never_reads_the_table() {
        let (data, table) = fixture::world(1);
        let p = RankerParams::new(
            &RankerConfig::default(),
            Ablation::NoMm,
            &data,
            table.dim(),
            LAYERS,
            CODES,
            &mut rng(0),
        )
        .unwrap();
        let mut g = Graph::new();
        let idx: Vec<usize> = (0..data.samples.len()).collect();
        let out = forward_logits(&mut g, &p, &data, &table, &idx).unwrap();
        assert_eq!(g.value(out).shape(), &[idx.len(), 1]);
        assert_eq!(table.reads(), 0);
    }

    #[test]
    fn no_raw_mm_copies_rq_codebooks() {
        let (data, table) = fixture::world(2);
        let cfg = RankerConfig {
            d_mba: D_Z,
            ..RankerConfig::default()
        };
        let mut p = RankerParams::new(&cfg, Ablation::NoRawMm, &data, table.dim(), LAYERS, CODES, &mut rng(0)).unwrap();
        let mut r = rng(1);
        let books: Vec<Tensor> = (0..LAYERS)
            .map(|_| Tensor::matrix(CODES, D_Z, randn(&mut r, CODES * D_Z)).unwrap())
            .collect();
        p.init_mba_from(&books).unwrap();
        assert_eq!(p.mba.stack.tensors(&p.store), books);
        assert!(p.init_mba_from(&fixture::rq_books(3)).is_err());
    }
}
