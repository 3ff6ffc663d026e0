//! Residual-quantized autoencoder over frozen item embeddings, producing
//! L-level semantic IDs. Training assignment can use entropy-regularized
//! optimal transport (Sinkhorn) to keep code usage balanced.

use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::nn::Mlp;
use crate::numerics::optim::{Adagrad, LrSchedule};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::Tensor;
use crate::saviorenc::{info_nce_loss, pack_batches, EmbeddingTable};
use crate::synthgen::PairSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Assigner {
    Argmin,
    Sinkhorn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RqConfig {
    pub layers: usize,
    pub codes: usize,
    pub dim: usize,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    pub lambda_recon: f64,
    pub lambda_commit: f64,
    pub tau: f64,
    pub sinkhorn_reg: f64,
    pub sinkhorn_iters: usize,
    pub train_assigner: Assigner,
    pub epochs: usize,
    pub batch_pairs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
}

impl Default for RqConfig {
    fn default() -> Self {
        RqConfig {
            layers: 4,
            codes: 64,
            dim: 16,
            enc_hidden: vec![32],
            dec_hidden: vec![32],
            lambda_recon: 1000.0,
            lambda_commit: 0.5,
            tau: 0.07,
            sinkhorn_reg: 0.05,
            sinkhorn_iters: 50,
            train_assigner: Assigner::Sinkhorn,
            epochs: 2,
            batch_pairs: 64,
            lr_start: 0.01,
            lr_end: 0.001,
        }
    }
}

impl RqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_recon < 0.0 || !self.lambda_recon.is_finite() {
            return Err(Error::config("rqvae.lambda_recon", "must be >= 0"));
        }
        if self.lambda_commit < 0.0 || !self.lambda_commit.is_finite() {
            return Err(Error::config("rqvae.lambda_commit", "must be >= 0"));
        }
        for (f, v) in [("layers", self.layers), ("codes", self.codes), ("dim", self.dim)] {
            if v == 0 {
                return Err(Error::config(format!("rqvae.{f}"), "must be >= 1"));
            }
        }
        if !(self.sinkhorn_reg > 0.0) {
            return Err(Error::config("rqvae.sinkhorn_reg", "must be > 0"));
        }
        if self.sinkhorn_iters == 0 {
            return Err(Error::config("rqvae.sinkhorn_iters", "must be >= 1"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("rqvae.tau", "must be > 0"));
        }
        if self.batch_pairs < 2 {
            return Err(Error::config("rqvae.batch_pairs", "must be >= 2"));
        }
        Ok(())
    }
}

/// `layers` codebooks of `codes × dim`, each a trainable parameter.
#[derive(Clone, Debug)]
pub struct CodebookStack {
    pub ids: Vec<ParamId>,
    pub codes: usize,
    pub dim: usize,
}

impl CodebookStack {
    pub fn new(store: &mut ParamStore, name: &str, layers: usize, codes: usize, dim: usize) -> Self {
        let ids = (0..layers)
            .map(|l| store.add(format!("{name}.{l}"), Tensor::zeros(&[codes, dim])))
            .collect();
        CodebookStack { ids, codes, dim }
    }

    pub fn layers(&self) -> usize {
        self.ids.len()
    }

    pub fn layer<'a>(&self, store: &'a ParamStore, l: usize) -> &'a Tensor {
        store.get(self.ids[l])
    }

    pub fn tensors(&self, store: &ParamStore) -> Vec<Tensor> {
        self.ids.iter().map(|&id| store.get(id).clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SemanticId {
    pub codes: Vec<u32>,
}

impl SemanticId {
    pub fn validate(&self, layers: usize, k: usize) -> Result<()> {
        if self.codes.len() != layers {
            return Err(Error::contract(format!(
                "semantic id has {} codes, expected {layers}",
                self.codes.len()
            )));
        }
        if let Some(&c) = self.codes.iter().find(|&&c| c as usize >= k) {
            return Err(Error::contract(format!("code {c} out of range for K={k}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub id: SemanticId,
    /// `r¹ … r^{L+1}`.
    pub residuals: Vec<Vec<f64>>,
    pub reconstruction: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distances(rows: &[Vec<f64>], book: &Tensor) -> Tensor {
    let k = book.rows();
    let mut d = Vec::with_capacity(rows.len() * k);
    for r in rows {
        for c in 0..k {
            d.push(sq_dist(r, book.row(c)).sqrt());
        }
    }
    Tensor::matrix(rows.len(), k, d).expect("non-empty batch")
}

fn argmin_rows(dist: &Tensor) -> Vec<usize> {
    (0..dist.rows())
        .map(|i| {
            let row = dist.row(i);
            let mut best = 0;
            for (c, &x) in row.iter().enumerate() {
                if x < row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Entropy-regularized transport plan between `B` rows (mass `1/B` each) and
/// `K` columns (mass `1/K` each) for cost `dist`, computed in the log
/// domain. The final scaling step is over rows, so row sums are exact.
pub fn sinkhorn_plan(dist: &Tensor, iters: usize, reg: f64) -> Result<Tensor> {
    if iters == 0 {
        return Err(Error::config("sinkhorn_iters", "must be >= 1"));
    }
    if !(reg > 0.0) {
        return Err(Error::config("sinkhorn_reg", "must be > 0"));
    }
    if !dist.is_finite() {
        return Err(Error::contract("sinkhorn received non-finite distances"));
    }
    let (b, k) = (dist.rows(), dist.cols());
    let log_k: Vec<f64> = dist.data().iter().map(|&d| -d / reg).collect();
    let plan = match sinkhorn_scaled(&log_k, b, k, iters) {
        Some(p) => p,
        None => sinkhorn_log(&log_k, b, k, iters),
    };
    Tensor::matrix(b, k, plan)
}

fn sinkhorn_log(log_k: &[f64], b: usize, k: usize, iters: usize) -> Vec<f64> {
    let (la, lb) = (-(b as f64).ln(), -(k as f64).ln());
    let mut f = vec![0.0; b];
    let mut g = vec![0.0; k];
    for _ in 0..iters {
        for j in 0..k {
            g[j] = lb - log_sum_exp((0..b).map(|i| log_k[i * k + j] + f[i]));
        }
        for i in 0..b {
            f[i] = la - log_sum_exp((0..k).map(|j| log_k[i * k + j] + g[j]));
        }
    }
    (0..b * k).map(|x| (log_k[x] + f[x / k] + g[x % k]).exp()).collect()
}

/// Multiplicative Sinkhorn on the row-stabilized kernel. Returns `None`
/// when some column underflows or a scaling leaves the finite range, in
/// which case the caller falls back to log-domain iterations.
fn sinkhorn_scaled(log_k: &[f64], b: usize, k: usize, iters: usize) -> Option<Vec<f64>> {
    let mut kern = vec![0.0; b * k];
    for i in 0..b {
        let row = &log_k[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for j in 0..k {
            kern[i * k + j] = (row[j] - m).exp();
        }
    }
    let (ra, cb) = (1.0 / b as f64, 1.0 / k as f64);
    let mut u = vec![1.0; b];
    let mut v = vec![1.0; k];
    let mut col = vec![0.0; k];
    for _ in 0..iters {
        col.iter_mut().for_each(|c| *c = 0.0);
        for i in 0..b {
            let row = &kern[i * k..(i + 1) * k];
            for j in 0..k {
                col[j] += row[j] * u[i];
            }
        }
        for j in 0..k {
            v[j] = cb / col[j];
        }
        for i in 0..b {
            let row = &kern[i * k..(i + 1) * k];
            let s: f64 = row.iter().zip(&v).map(|(x, y)| x * y).sum();
            u[i] = ra / s;
        }
        if !(u.iter().chain(&v).all(|x| x.is_finite() && *x > 0.0)) {
            return None;
        }
    }
    let plan: Vec<f64> = (0..b * k).map(|x| u[x / k] * kern[x] * v[x % k]).collect();
    plan.iter().all(|x| x.is_finite()).then_some(plan)
}

/// Balanced assignment: each row goes to the column carrying most of its
/// transport mass. Exactly tied columns (identical codewords) share the
/// row's mass equally, so ties are dealt out round-robin by row index.
/// Rows whose plan underflows to zero fall back to the nearest code.
pub fn sinkhorn_assign(dist: &Tensor, iters: usize, reg: f64) -> Result<Vec<usize>> {
    let plan = sinkhorn_plan(dist, iters, reg)?;
    let nearest = argmin_rows(dist);
    Ok((0..plan.rows())
        .map(|i| {
            let row = plan.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !(max > 0.0) {
                return nearest[i];
            }
            let tied: Vec<usize> = (0..row.len()).filter(|&c| row[c] == max).collect();
            tied[i % tied.len()]
        })
        .collect())
}

fn assign(dist: &Tensor, assigner: Assigner, iters: usize, reg: f64) -> Result<Vec<usize>> {
    match assigner {
        Assigner::Argmin => Ok(argmin_rows(dist)),
        Assigner::Sinkhorn => sinkhorn_assign(dist, iters, reg),
    }
}

/// Residual quantization of a batch; assignments at each layer are made
/// jointly over the batch (which matters only for Sinkhorn).
pub fn quantize_batch(
    r1: &[Vec<f64>],
    books: &[Tensor],
    assigner: Assigner,
    iters: usize,
    reg: f64,
) -> Result<Vec<Quantized>> {
    if r1.is_empty() {
        return Ok(Vec::new());
    }
    if r1.iter().any(|r| r.iter().any(|x| !x.is_finite())) {
        return Err(Error::contract("quantize received a non-finite vector"));
    }
    let mut out: Vec<Quantized> = r1
        .iter()
        .map(|r| Quantized {
            id: SemanticId { codes: Vec::new() },
            residuals: vec![r.clone()],
            reconstruction: vec![0.0; r.len()],
        })
        .collect();
    for book in books {
        let current: Vec<Vec<f64>> = out.iter().map(|q| q.residuals.last().unwrap().clone()).collect();
        if current[0].len() != book.cols() {
            return Err(Error::Dimension {
                op: "quantize",
                lhs: vec![current[0].len()],
                rhs: book.shape().to_vec(),
            });
        }
        let codes = assign(&distances(&current, book), assigner, iters, reg)?;
        for ((q, r), c) in out.iter_mut().zip(&current).zip(codes) {
            let word = book.row(c);
            q.id.codes.push(c as u32);
            q.residuals.push(r.iter().zip(word).map(|(x, w)| x - w).collect());
            for (s, w) in q.reconstruction.iter_mut().zip(word) {
                *s += w;
            }
        }
    }
    Ok(out)
}

pub fn quantize(r1: &[f64], books: &[Tensor]) -> Result<Quantized> {
    Ok(quantize_batch(&[r1.to_vec()], books, Assigner::Argmin, 1, 1.0)?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerUsage {
    pub histogram: Vec<usize>,
    pub entropy: f64,
    pub perplexity: f64,
    pub dead_codes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub layers: Vec<LayerUsage>,
    pub warning: Option<String>,
}

/// Natural-log entropy of a count histogram.
pub fn entropy(hist: &[usize]) -> f64 {
    let n: usize = hist.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let h = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum::<f64>();
    h.max(0.0)
}

pub fn codebook_usage_stats(ids: &[SemanticId], k: usize) -> Result<UsageReport> {
    let first = ids
        .first()
        .ok_or_else(|| Error::DegenerateDataset("no semantic ids".into()))?;
    let layers = first.codes.len();
    for id in ids {
        id.validate(layers, k)?;
    }
    let layers: Vec<LayerUsage> = (0..layers)
        .map(|l| {
            let mut histogram = vec![0usize; k];
            for id in ids {
                histogram[id.codes[l] as usize] += 1;
            }
            let entropy = entropy(&histogram);
            LayerUsage {
                dead_codes: histogram.iter().filter(|&&c| c == 0).count(),
                perplexity: entropy.exp(),
                entropy,
                histogram,
            }
        })
        .collect();
    let dead: Vec<usize> = layers
        .iter()
        .enumerate()
        .filter(|(_, u)| u.perplexity <= 1.0 + 1e-12)
        .map(|(l, _)| l)
        .collect();
    let warning = (!dead.is_empty()).then(|| format!("codebook collapsed (perplexity 1) at layers {dead:?}"));
    Ok(UsageReport { layers, warning })
}

#[derive(Clone, Debug)]
pub struct RqVaeParams {
    pub store: ParamStore,
    pub enc: Mlp,
    pub dec: Mlp,
    pub stack: CodebookStack,
    pub lambda_recon: f64,
    pub lambda_commit: f64,
}

fn mlp_dims(input: usize, hidden: &[usize], out: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(out);
    d
}

impl RqVaeParams {
    pub fn new(d_z: usize, cfg: &RqConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let enc = Mlp::new(&mut store, "rq.enc", &mlp_dims(d_z, &cfg.enc_hidden, cfg.dim), rng);
        let dec = Mlp::new(&mut store, "rq.dec", &mlp_dims(cfg.dim, &cfg.dec_hidden, d_z), rng);
        let stack = CodebookStack::new(&mut store, "rq.codebook", cfg.layers, cfg.codes, cfg.dim);
        Ok(RqVaeParams {
            store,
            enc,
            dec,
            stack,
            lambda_recon: cfg.lambda_recon,
            lambda_commit: cfg.lambda_commit,
        })
    }

    pub fn books(&self) -> Vec<Tensor> {
        self.stack.tensors(&self.store)
    }

    pub fn encode(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let r = self.enc.forward(&mut g, &self.store, zv)?;
        Ok(g.value(r).clone())
    }

    /// Deterministic argmin IDs for every row of `z`.
    pub fn semantic_ids(&self, z: &Tensor) -> Result<Vec<SemanticId>> {
        let r1 = self.encode(z)?;
        let rows: Vec<Vec<f64>> = (0..r1.rows()).map(|i| r1.row(i).to_vec()).collect();
        let books = self.books();
        Ok(quantize_batch(&rows, &books, Assigner::Argmin, 1, 1.0)?
            .into_iter()
            .map(|q| q.id)
            .collect())
    }
}

/// Values held fixed while differentiating one RQ-VAE step: the chosen codes,
/// the straight-through offset `Σ C − r¹` and the detached codewords used by
/// the residual chain.
#[derive(Clone, Debug)]
pub struct StepConstants {
    pub codes: Vec<SemanticId>,
    pub st_offset: Tensor,
    pub chain_words: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RqLoss {
    pub reconstruct: f64,
    pub commit: f64,
    pub contrast: f64,
    pub total: f64,
}

pub struct RqForward {
    pub total: Var,
    pub reconstruct: Var,
    pub commit: Var,
    pub contrast: Option<Var>,
    pub constants: StepConstants,
}

impl RqForward {
    pub fn values(&self, g: &Graph) -> RqLoss {
        RqLoss {
            reconstruct: g.scalar(self.reconstruct),
            commit: g.scalar(self.commit),
            contrast: self.contrast.map(|c| g.scalar(c)).unwrap_or(0.0),
            total: g.scalar(self.total),
        }
    }
}

/// Builds `λ₀·L_rec + λ₁·L_commit + L_contrast` for a batch of embeddings.
///
/// `pairs` index rows of `z` and must form a perfect matching when given.
/// When `constants` is `None` codes are assigned with `assigner`, otherwise
/// the supplied codes and detached values are reused.
///
/// Reconstruction uses the straight-through value `r¹ + sg(Σ C − r¹)`. The
/// residual chain subtracts detached codewords; the commitment term
/// `mean Σ_l ‖r^l − C_l[c_l]‖²` is differentiated with respect to both the
/// residuals and the codebooks, which is what moves the codebooks.
#[allow(clippy::too_many_arguments)]
pub fn rqvae_forward(
    g: &mut Graph,
    params: &RqVaeParams,
    z: &Tensor,
    pairs: Option<&[(usize, usize)]>,
    tau: f64,
    assigner: Assigner,
    sinkhorn: (usize, f64),
    constants: Option<&StepConstants>,
) -> Result<RqForward> {
    if params.lambda_recon < 0.0 || params.lambda_commit < 0.0 {
        return Err(Error::config("rqvae.lambda", "loss weights must be >= 0"));
    }
    let b = z.rows();
    let zv = g.constant(z.clone());
    let r1 = params.enc.forward(g, &params.store, zv)?;
    let constants = match constants {
        Some(c) => c.clone(),
        None => {
            let rows: Vec<Vec<f64>> = (0..b).map(|i| g.value(r1).row(i).to_vec()).collect();
            let books = params.books();
            let q = quantize_batch(&rows, &books, assigner, sinkhorn.0, sinkhorn.1)?;
            let offset: Vec<Vec<f64>> = q
                .iter()
                .zip(&rows)
                .map(|(q, r)| q.reconstruction.iter().zip(r).map(|(s, x)| s - x).collect())
                .collect();
            let chain_words = (0..params.stack.layers())
                .map(|l| {
                    let words: Vec<Vec<f64>> = q
                        .iter()
                        .map(|q| books[l].row(q.id.codes[l] as usize).to_vec())
                        .collect();
                    Tensor::from_rows(&words)
                })
                .collect::<Result<Vec<_>>>()?;
            StepConstants {
                codes: q.into_iter().map(|q| q.id).collect(),
                st_offset: Tensor::from_rows(&offset)?,
                chain_words,
            }
        }
    };
    for id in &constants.codes {
        id.validate(params.stack.layers(), params.stack.codes)?;
    }
    let inv_b = 1.0 / b as f64;
    let mut r = r1;
    let mut commit_terms = Vec::new();
    for l in 0..params.stack.layers() {
        let book = g.param(&params.store, params.stack.ids[l]);
        let idx: Vec<usize> = constants.codes.iter().map(|c| c.codes[l] as usize).collect();
        let words = g.gather_rows(book, Arc::new(idx))?;
        let diff = g.sub(r, words)?;
        let sq = g.sum_squares(diff)?;
        commit_terms.push(sq);
        let fixed = g.constant(constants.chain_words[l].clone());
        r = g.sub(r, fixed)?;
    }
    let mut commit_sum = commit_terms[0];
    for &t in &commit_terms[1..] {
        commit_sum = g.add(commit_sum, t)?;
    }
    let commit = g.scale(commit_sum, inv_b);
    let offset = g.constant(constants.st_offset.clone());
    let q = g.add(r1, offset)?;
    let zhat = params.dec.forward(g, &params.store, q)?;
    let err = g.sub(zv, zhat)?;
    let rec_sum = g.sum_squares(err)?;
    let reconstruct = g.scale(rec_sum, inv_b);
    let a = g.scale(reconstruct, params.lambda_recon);
    let c = g.scale(commit, params.lambda_commit);
    let mut total = g.add(a, c)?;
    let mut contrast = None;
    if let Some(p) = pairs {
        let l = info_nce_loss(g, zhat, p, tau)?;
        total = g.add(total, l)?;
        contrast = Some(l);
    }
    Ok(RqForward {
        total,
        reconstruct,
        commit,
        contrast,
        constants,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RqEpoch {
    pub epoch: usize,
    pub steps: usize,
    pub train: RqLoss,
    /// Full-corpus reconstruction loss with argmin codes (epoch 0 is the
    /// freshly initialized model).
    pub corpus_reconstruct: f64,
}

#[derive(Clone, Debug)]
pub struct RqRun {
    pub params: RqVaeParams,
    pub ids: Vec<SemanticId>,
    pub usage: UsageReport,
    pub history: Vec<RqEpoch>,
}

fn rows_of(table: &EmbeddingTable, items: &[u32]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = items.iter().map(|&i| table.get(i).to_vec()).collect();
    Tensor::from_rows(&rows)
}

fn batch_items(batch: &[(u32, u32)]) -> Vec<u32> {
    batch.iter().flat_map(|&(i, j)| [i, j]).collect()
}

/// Seeds each codebook layer with residuals drawn from `z` (rows of the
/// first batch): layer `l` samples from residuals left after layers `< l`.
pub fn init_codebooks_from(params: &mut RqVaeParams, z: &Tensor, rng: &mut ChaCha8Rng) -> Result<()> {
    let r1 = params.encode(z)?;
    let mut current: Vec<Vec<f64>> = (0..r1.rows()).map(|i| r1.row(i).to_vec()).collect();
    let k = params.stack.codes;
    for l in 0..params.stack.layers() {
        let mut idx: Vec<usize> = (0..current.len()).collect();
        idx.shuffle(rng);
        let mut words: Vec<Vec<f64>> = Vec::with_capacity(k);
        for c in 0..k {
            let mut w = current[idx[c % idx.len()]].clone();
            if c >= idx.len() {
                // more codes than rows: jitter the repeats apart
                for x in w.iter_mut() {
                    *x += 1e-3 * (rng.random::<f64>() - 0.5);
                }
            }
            words.push(w);
        }
        let book = Tensor::from_rows(&words)?;
        let codes = argmin_rows(&distances(&current, &book));
        for (r, c) in current.iter_mut().zip(codes) {
            for (x, w) in r.iter_mut().zip(book.row(c)) {
                *x -= w;
            }
        }
        *params.store.get_mut(params.stack.ids[l]) = book;
    }
    Ok(())
}

fn corpus_reconstruct(params: &RqVaeParams, z: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let f = rqvae_forward(&mut g, params, z, None, 1.0, Assigner::Argmin, (1, 1.0), None)?;
    Ok(g.scalar(f.reconstruct))
}

/// Trains the RQ-VAE on the frozen table with batches of co-click pairs and
/// exports argmin semantic IDs for every item.
pub fn train_rqvae(
    table: &EmbeddingTable,
    pairs: &PairSet,
    cfg: &RqConfig,
    seed: u64,
    abort_dir: Option<&std::path::Path>,
) -> Result<RqRun> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(21);
    let mut params = RqVaeParams::new(table.dim(), cfg, &mut rng)?;
    let mut all = pairs.pairs();
    all.shuffle(&mut rng);
    let first: Vec<u32> = match pack_batches(&all, cfg.batch_pairs).first() {
        Some(b) => batch_items(b),
        None => {
            let ids: Vec<u32> = (0..table.len() as u32).collect();
            ids.choose_multiple(&mut rng, (2 * cfg.batch_pairs).min(table.len()))
                .copied()
                .collect()
        }
    };
    init_codebooks_from(&mut params, &rows_of(table, &first)?, &mut rng)?;
    if cfg.epochs > 0 && all.len() < cfg.batch_pairs {
        return Err(Error::DegenerateDataset(format!(
            "{} co-click pairs, need at least batch_pairs = {}",
            all.len(),
            cfg.batch_pairs
        )));
    }
    let full = table.tensor().clone();
    let mut history = vec![RqEpoch {
        epoch: 0,
        steps: 0,
        train: RqLoss::default(),
        corpus_reconstruct: corpus_reconstruct(&params, &full)?,
    }];
    let steps_per_epoch = all.len().div_ceil(cfg.batch_pairs);
    let mut opt = Adagrad::new(
        &params.store,
        LrSchedule {
            start: cfg.lr_start,
            end: cfg.lr_end,
            horizon: (steps_per_epoch * cfg.epochs).max(1) as u64,
        },
        1e-10,
    );
    let mut last_good = params.store.named_tensors();
    for epoch in 1..=cfg.epochs {
        all.shuffle(&mut rng);
        let batches = pack_batches(&all, cfg.batch_pairs);
        let mut acc = RqLoss::default();
        for batch in &batches {
            let z = rows_of(table, &batch_items(batch))?;
            let matching: Vec<(usize, usize)> = (0..batch.len()).map(|p| (2 * p, 2 * p + 1)).collect();
            let mut g = Graph::new();
            let f = rqvae_forward(
                &mut g,
                &params,
                &z,
                Some(&matching),
                cfg.tau,
                cfg.train_assigner,
                (cfg.sinkhorn_iters, cfg.sinkhorn_reg),
                None,
            )?;
            let v = f.values(&g);
            let step = if v.total.is_finite() {
                let grads = g.backward(f.total)?;
                g.accumulate_param_grads(&grads, &mut params.store);
                opt.step(&mut params.store)
            } else {
                Err(Error::Divergence(format!("rq-vae loss {} at epoch {epoch}", v.total)))
            };
            if let Err(e) = step {
                if let (Error::Divergence(_), Some(dir)) = (&e, abort_dir) {
                    crate::numerics::checkpoint::write(&dir.join("rqvae.last_good.savior"), &last_good)?;
                }
                return Err(e);
            }
            acc.reconstruct += v.reconstruct;
            acc.commit += v.commit;
            acc.contrast += v.contrast;
            acc.total += v.total;
        }
        let n = batches.len().max(1) as f64;
        history.push(RqEpoch {
            epoch,
            steps: batches.len(),
            train: RqLoss {
                reconstruct: acc.reconstruct / n,
                commit: acc.commit / n,
                contrast: acc.contrast / n,
                total: acc.total / n,
            },
            corpus_reconstruct: corpus_reconstruct(&params, &full)?,
        });
        last_good = params.store.named_tensors();
        log::info!("rq-vae epoch {epoch}: {:?}", history[epoch]);
    }
    let ids = params.semantic_ids(&full)?;
    let usage = codebook_usage_stats(&ids, cfg.codes)?;
    if let Some(w) = &usage.warning {
        log::warn!("{w}");
    }
    Ok(RqRun {
        params,
        ids,
        usage,
        history,
    })
}
