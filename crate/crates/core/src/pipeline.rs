//! Staged pipeline: configuration, artifact manifests, and the
//! gen → encode → quantize → rank → eval chain, plus the ablation suite and
//! the alignment-codebook dimension sweep.
//!
//! Stages talk only through files under `out_dir`. Every stage directory
//! carries a `manifest.json`, written last, recording the stage's chained
//! config hash; downstream stages refuse inputs whose hash disagrees with the
//! current config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalkit::{self, AblationRun, AblationTable, EvalReport, LayerImportance, ReportMeta};
use crate::io;
use crate::numerics::checkpoint;
use crate::numerics::tensor::Tensor;
use crate::ranking::{predict, train_ranker, Ablation, RankerConfig, RankerParams, RankingData};
use crate::rqvae::{RqConfig, SemanticId, UsageReport};
use crate::saviorenc::{hitrate_at_k, train_encoder, EmbeddingTable, EncoderConfig};
use crate::synthgen::{self, Impression, InteractionLog, Item, ItemCatalog, PairSet, PvBucketing, SynthConfig, User};

pub const CODE_VERSION: &str = concat!("coldrec ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bucket_edges: Vec<u64>,
    pub hitrate_k: usize,
    pub ablation_tags: Vec<Ablation>,
    /// Alignment codebook dimensions tried by `sweep-dims`.
    pub sweep_dims: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bucket_edges: vec![0, 100, 500, 1000, 5000, 10000, 20000],
            hitrate_k: 30,
            ablation_tags: Ablation::ALL.to_vec(),
            sweep_dims: vec![16, 8, 4, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
    pub rqvae: RqConfig,
    pub ranker: RankerConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            synth: SynthConfig::default(),
            encoder: EncoderConfig::default(),
            rqvae: RqConfig::default(),
            ranker: RankerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl PipelineConfig {
    /// Parses one or more TOML documents; later ones override earlier ones
    /// key by key. Relative `out_dir` is kept as written.
    pub fn from_toml_strs(docs: &[&str]) -> Result<Self> {
        let mut acc = toml::Value::Table(Default::default());
        for d in docs {
            let v: toml::Value = toml::from_str(d)?;
            merge(&mut acc, v);
        }
        let cfg: PipelineConfig = acc.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(paths: &[PathBuf]) -> Result<Self> {
        let texts = paths
            .iter()
            .map(std::fs::read_to_string)
            .collect::<std::io::Result<Vec<_>>>()?;
        Self::from_toml_strs(&texts.iter().map(String::as_str).collect::<Vec<_>>())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.encoder.validate()?;
        self.rqvae.validate()?;
        self.ranker.validate()?;
        PvBucketing::new(self.eval.bucket_edges.clone())?;
        if self.eval.hitrate_k == 0 {
            return Err(Error::config("eval.hitrate_k", "must be >= 1"));
        }
        if self.eval.sweep_dims.contains(&0) {
            return Err(Error::config("eval.sweep_dims", "dimensions must be >= 1"));
        }
        Ok(())
    }

    pub fn bucketing(&self) -> PvBucketing {
        PvBucketing::new(self.eval.bucket_edges.clone()).expect("validated")
    }

    fn ranker_for(&self, tag: Ablation) -> RankerConfig {
        RankerConfig {
            ablation: tag,
            ..self.ranker.clone()
        }
    }

    pub fn gen_hash(&self) -> String {
        digest(json!({ "seed": self.seed, "synth": self.synth }))
    }

    pub fn encode_hash(&self) -> String {
        digest(json!({ "up": self.gen_hash(), "encoder": self.encoder, "hitrate_k": self.eval.hitrate_k }))
    }

    pub fn quantize_hash(&self) -> String {
        digest(json!({ "up": self.encode_hash(), "rqvae": self.rqvae }))
    }

    pub fn rank_hash(&self, tag: Ablation) -> String {
        digest(json!({ "up": self.quantize_hash(), "ranker": self.ranker_for(tag) }))
    }

    pub fn eval_hash(&self, tag: Ablation) -> String {
        digest(json!({ "up": self.rank_hash(tag), "bucket_edges": self.eval.bucket_edges }))
    }

    pub fn ablate_hash(&self) -> String {
        digest(json!({
            "up": self.quantize_hash(),
            "ranker": self.ranker_for(Ablation::Full),
            "bucket_edges": self.eval.bucket_edges,
            "tags": self.eval.ablation_tags,
        }))
    }

    pub fn sweep_hash(&self) -> String {
        digest(json!({
            "up": self.quantize_hash(),
            "ranker": self.ranker_for(Ablation::Full),
            "bucket_edges": self.eval.bucket_edges,
            "dims": self.eval.sweep_dims,
        }))
    }
}

fn digest(v: serde_json::Value) -> String {
    let bytes = serde_json::to_vec(&v).expect("config values serialize");
    format!("{:x}", Sha256::digest(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub artifacts: Vec<String>,
}

pub const MANIFEST: &str = "manifest.json";

pub fn read_manifest(dir: &Path) -> Result<Option<Manifest>> {
    let p = dir.join(MANIFEST);
    if !p.exists() {
        return Ok(None);
    }
    io::read_json(&p).map(Some)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub i: u32,
    pub j: u32,
    pub count: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSummary {
    pub n_items: usize,
    pub n_users: usize,
    pub n_impressions: usize,
    pub clicks: usize,
    pub eval_start_round: u64,
    pub coclick_pairs: usize,
    /// AUC of p* against realized clicks over the whole log.
    pub bayes_auc: f64,
    pub bayes_auc_eval: f64,
    pub base_auc_eval: f64,
    pub base_noise_realized: f64,
    pub pv_histogram: Vec<(String, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitrateReport {
    pub k: usize,
    pub transitions: usize,
    pub trained: f64,
    pub untrained: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdRow {
    pub item_id: u32,
    pub codes: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ExportRow {
    item_id: u32,
    cluster: u32,
    z: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankMeta {
    pub ablation: Ablation,
    pub stream_hash: String,
}

/// Columns that only exist when the model consumes multimodal inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalColumns {
    pub hitrate: HitrateReport,
    pub rq_perplexity: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub layer_importance: Option<LayerImportance>,
}

/// AUCs pooled over the two lowest PV buckets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColdSummary {
    pub max_pv: u64,
    pub samples: usize,
    pub model: Option<f64>,
    pub base_pctr: Option<f64>,
    pub bayes: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub model: EvalReport,
    pub base_pctr: EvalReport,
    pub bayes: EvalReport,
    pub cold: ColdSummary,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub modal: Option<ModalColumns>,
}

impl FinalReport {
    pub fn to_text(&self) -> String {
        let m = &self.model.meta;
        let mut out = format!(
            "ablation {}  seed {}  config {}\n",
            m.ablation,
            m.seed,
            &m.config_hash[..12.min(m.config_hash.len())]
        );
        out.push_str(&evalkit::format_auc_table(&[
            (m.ablation.as_str(), &self.model),
            ("base_pctr", &self.base_pctr),
            ("bayes", &self.bayes),
        ]));
        let c = &self.cold;
        let opt = |x: Option<f64>| x.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            out,
            "cold (pv < {}, {} samples): model {}  base_pctr {}  bayes {}",
            c.max_pv,
            c.samples,
            opt(c.model),
            opt(c.base_pctr),
            opt(c.bayes)
        );
        if let Some(modal) = &self.modal {
            let _ = writeln!(
                out,
                "encoder hitrate@{}: trained {:.4}  untrained {:.4}  ({} transitions)",
                modal.hitrate.k, modal.hitrate.trained, modal.hitrate.untrained, modal.hitrate.transitions
            );
            let _ = writeln!(out, "rq perplexity per layer: {}", fmt_vec(&modal.rq_perplexity));
            if let Some(li) = &modal.layer_importance {
                let _ = writeln!(out, "mba layer importance (codebook): {}", fmt_vec(&li.codebook));
                let _ = writeln!(out, "mba layer importance (fusion):   {}", fmt_vec(&li.fusion));
                if let Some(w) = &li.warning {
                    let _ = writeln!(out, "warning: {w}");
                }
            }
        }
        out
    }
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub d_mba: Option<usize>,
    pub report: EvalReport,
}

/// Everything produced by `gen`, as read back from disk.
pub struct World {
    pub catalog: ItemCatalog,
    pub users: Vec<User>,
    pub log: InteractionLog,
    pub pairs: PairSet,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub force: bool,
}

fn stage_err(stage: &'static str) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage,
            source: Box::new(e),
        },
    }
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, force: bool) -> Self {
        Pipeline { cfg, force }
    }

    pub fn dir(&self, stage: &str) -> PathBuf {
        self.cfg.out_dir.join(stage)
    }

    fn rank_dir(&self, tag: Ablation) -> PathBuf {
        self.dir("rank").join(tag.tag())
    }

    fn eval_dir(&self, tag: Ablation) -> PathBuf {
        self.dir("eval").join(tag.tag())
    }

    /// `Ok(true)` when `dir` already holds this stage's outputs for `hash`.
    /// A manifest from a different config is an error unless forcing, in
    /// which case it is removed before anything is rewritten.
    fn prepare(&self, dir: &Path, hash: &str) -> Result<bool> {
        if let Some(m) = read_manifest(dir)? {
            if m.config_hash == hash {
                return Ok(true);
            }
            if !self.force {
                return Err(Error::ConfigHashMismatch {
                    path: dir.join(MANIFEST),
                    expected: hash.to_string(),
                    found: m.config_hash,
                });
            }
            std::fs::remove_file(dir.join(MANIFEST))?;
        }
        std::fs::create_dir_all(dir)?;
        Ok(false)
    }

    fn finish(&self, dir: &Path, stage: &str, hash: String, artifacts: &[&str]) -> Result<()> {
        io::write_json(
            &dir.join(MANIFEST),
            &Manifest {
                stage: stage.to_string(),
                config_hash: hash,
                seed: self.cfg.seed,
                code_version: CODE_VERSION.to_string(),
                artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
            },
        )
    }

    fn require(&self, dir: &Path, stage: &'static str, hash: &str) -> Result<()> {
        match read_manifest(dir)? {
            None => Err(Error::MissingArtifact {
                stage,
                path: dir.join(MANIFEST),
            }),
            Some(m) if m.config_hash != hash => Err(Error::ConfigHashMismatch {
                path: dir.join(MANIFEST),
                expected: hash.to_string(),
                found: m.config_hash,
            }),
            Some(_) => Ok(()),
        }
    }

    pub fn gen(&self) -> Result<Outcome> {
        self.gen_inner().map_err(stage_err("gen"))
    }

    fn gen_inner(&self) -> Result<Outcome> {
        let dir = self.dir("gen");
        let hash = self.cfg.gen_hash();
        if self.prepare(&dir, &hash)? {
            return Ok(Outcome::UpToDate);
        }
        let c = &self.cfg.synth;
        let seed = self.cfg.seed;
        let catalog = synthgen::generate_catalog(c, seed)?;
        let users = synthgen::generate_users(c, seed)?;
        let log = synthgen::generate_interactions(&catalog, &users, c, seed)?;
        let es = c.eval_start_round();
        let train_log = InteractionLog {
            impressions: log.impressions.iter().filter(|i| i.timestamp < es).cloned().collect(),
        };
        let pairs = synthgen::mine_coclick_pairs(&train_log, c.session_window, c.min_coclick)?;

        let eval: Vec<&Impression> = log.impressions.iter().filter(|i| i.timestamp >= es).collect();
        let ey: Vec<bool> = eval.iter().map(|i| i.clicked).collect();
        let pv = synthgen::item_pv(&log, c.n_items);
        let summary = WorldSummary {
            n_items: catalog.items.len(),
            n_users: users.len(),
            n_impressions: log.impressions.len(),
            clicks: log.impressions.iter().filter(|i| i.clicked).count(),
            eval_start_round: es,
            coclick_pairs: pairs.len(),
            bayes_auc: synthgen::bayes_auc(&log)?,
            bayes_auc_eval: evalkit::auc(&eval.iter().map(|i| i.true_pctr).collect::<Vec<_>>(), &ey)?,
            base_auc_eval: evalkit::auc(&eval.iter().map(|i| i.base_pctr).collect::<Vec<_>>(), &ey)?,
            base_noise_realized: synthgen::base_noise_realized(&log),
            pv_histogram: {
                let b = self.cfg.bucketing();
                let h = b.histogram(&pv);
                (0..b.len()).map(|k| (b.label(k), h[k])).collect()
            },
        };
        io::write_jsonl(&dir.join("catalog.jsonl"), &catalog.items)?;
        io::write_jsonl(&dir.join("users.jsonl"), &users)?;
        io::write_jsonl(&dir.join("impressions.jsonl"), &log.impressions)?;
        io::write_jsonl(
            &dir.join("pairs.jsonl"),
            pairs.iter().map(|((i, j), count)| PairRow { i, j, count }),
        )?;
        io::write_json(&dir.join("world.json"), &summary)?;
        log::info!(
            "gen: {} impressions, {} co-click pairs, Bayes AUC {:.4}",
            summary.n_impressions,
            summary.coclick_pairs,
            summary.bayes_auc
        );
        self.finish(
            &dir,
            "gen",
            hash,
            &[
                "catalog.jsonl",
                "users.jsonl",
                "impressions.jsonl",
                "pairs.jsonl",
                "world.json",
            ],
        )?;
        Ok(Outcome::Ran)
    }

    pub fn load_world(&self) -> Result<World> {
        let dir = self.dir("gen");
        self.require(&dir, "gen", &self.cfg.gen_hash())?;
        let items: Vec<Item> = io::read_jsonl(&dir.join("catalog.jsonl"))?;
        let users: Vec<User> = io::read_jsonl(&dir.join("users.jsonl"))?;
        let impressions: Vec<Impression> = io::read_jsonl(&dir.join("impressions.jsonl"))?;
        let rows: Vec<PairRow> = io::read_jsonl(&dir.join("pairs.jsonl"))?;
        Ok(World {
            catalog: ItemCatalog { items },
            users,
            log: InteractionLog { impressions },
            pairs: PairSet::from_counts(rows.into_iter().map(|r| ((r.i, r.j), r.count)).collect()),
        })
    }

    pub fn encode(&self) -> Result<Outcome> {
        self.encode_inner().map_err(stage_err("encode"))
    }

    fn encode_inner(&self) -> Result<Outcome> {
        let dir = self.dir("encode");
        let hash = self.cfg.encode_hash();
        let world = self.load_world()?;
        if self.prepare(&dir, &hash)? {
            return Ok(Outcome::UpToDate);
        }
        let seed = self.cfg.seed;
        let run = train_encoder(&world.catalog, &world.pairs, &self.cfg.encoder, seed, Some(&dir))?;
        let untrained_cfg = EncoderConfig {
            epochs: 0,
            ..self.cfg.encoder.clone()
        };
        let untrained = train_encoder(&world.catalog, &world.pairs, &untrained_cfg, seed, None)?;
        let table = run.table.unit_rows();
        let transitions = synthgen::click_transitions(&world.log, self.cfg.synth.eval_start_round());
        let k = self.cfg.eval.hitrate_k;
        let hit = HitrateReport {
            k,
            transitions: transitions.len(),
            trained: hitrate_at_k(&table, &transitions, k)?,
            untrained: hitrate_at_k(&untrained.table.unit_rows(), &transitions, k)?,
        };
        log::info!(
            "encode: hitrate@{k} trained {:.4} untrained {:.4}",
            hit.trained,
            hit.untrained
        );
        checkpoint::write(&dir.join("encoder.savior"), &run.params.store.named_tensors())?;
        table.save(&dir, "embedding")?;
        let t = table.tensor();
        io::write_jsonl(
            &dir.join("embedding_export.jsonl"),
            world.catalog.items.iter().map(|it| ExportRow {
                item_id: it.item_id,
                cluster: it.cluster,
                z: t.row(it.item_id as usize).to_vec(),
            }),
        )?;
        io::write_jsonl(&dir.join("history.jsonl"), &run.history)?;
        io::write_json(&dir.join("hitrate.json"), &hit)?;
        self.finish(
            &dir,
            "encode",
            hash,
            &[
                "encoder.savior",
                "embedding.savior",
                "embedding.index.jsonl",
                "embedding_export.jsonl",
                "history.jsonl",
                "hitrate.json",
            ],
        )?;
        Ok(Outcome::Ran)
    }

    pub fn load_table(&self) -> Result<EmbeddingTable> {
        let dir = self.dir("encode");
        self.require(&dir, "encode", &self.cfg.encode_hash())?;
        EmbeddingTable::load(&dir, "embedding")
    }

    pub fn quantize(&self) -> Result<Outcome> {
        self.quantize_inner().map_err(stage_err("quantize"))
    }

    fn quantize_inner(&self) -> Result<Outcome> {
        let dir = self.dir("quantize");
        let hash = self.cfg.quantize_hash();
        let world = self.load_world()?;
        let table = self.load_table()?;
        if self.prepare(&dir, &hash)? {
            return Ok(Outcome::UpToDate);
        }
        let run = crate::rqvae::train_rqvae(&table, &world.pairs, &self.cfg.rqvae, self.cfg.seed, Some(&dir))?;
        if let Some(w) = &run.usage.warning {
            log::warn!("quantize: {w}");
        }
        checkpoint::write(&dir.join("rqvae.savior"), &run.params.store.named_tensors())?;
        io::write_jsonl(
            &dir.join("semantic_ids.jsonl"),
            run.ids.iter().enumerate().map(|(i, id)| IdRow {
                item_id: i as u32,
                codes: id.codes.clone(),
            }),
        )?;
        io::write_json(&dir.join("usage.json"), &run.usage)?;
        io::write_jsonl(&dir.join("history.jsonl"), &run.history)?;
        self.finish(
            &dir,
            "quantize",
            hash,
            &["rqvae.savior", "semantic_ids.jsonl", "usage.json", "history.jsonl"],
        )?;
        Ok(Outcome::Ran)
    }

    /// Semantic IDs and the RQ codebook stack.
    pub fn load_codes(&self) -> Result<(Vec<SemanticId>, Vec<Tensor>, UsageReport)> {
        let dir = self.dir("quantize");
        self.require(&dir, "quantize", &self.cfg.quantize_hash())?;
        let rows: Vec<IdRow> = io::read_jsonl(&dir.join("semantic_ids.jsonl"))?;
        if rows.iter().enumerate().any(|(i, r)| r.item_id as usize != i) {
            return Err(Error::Format("semantic_ids.jsonl is not in item order".into()));
        }
        let ids: Vec<SemanticId> = rows.into_iter().map(|r| SemanticId { codes: r.codes }).collect();
        let tensors = checkpoint::read(&dir.join("rqvae.savior"))?;
        let books: Vec<Tensor> = (0..self.cfg.rqvae.layers)
            .map(|l| {
                let name = format!("rq.codebook.{l}");
                tensors
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| Error::Format(format!("rqvae.savior lacks `{name}`")))
            })
            .collect::<Result<_>>()?;
        let usage = io::read_json(&dir.join("usage.json"))?;
        Ok((ids, books, usage))
    }

    pub fn ranking_data(&self, world: &World, ids: Vec<SemanticId>) -> Result<RankingData> {
        let s = &self.cfg.synth;
        RankingData::build(
            &world.log,
            &world.users,
            &s.profile_cardinalities,
            ids,
            s.n_items,
            s.eval_start_round(),
            s.cold_start_max_pv,
        )
    }

    pub fn rank(&self, tag: Ablation) -> Result<Outcome> {
        self.rank_inner(tag).map_err(stage_err("rank"))
    }

    fn rank_inner(&self, tag: Ablation) -> Result<Outcome> {
        let dir = self.rank_dir(tag);
        let hash = self.cfg.rank_hash(tag);
        let world = self.load_world()?;
        let table = self.load_table()?;
        let (ids, books, _) = self.load_codes()?;
        if self.prepare(&dir, &hash)? {
            return Ok(Outcome::UpToDate);
        }
        let data = self.ranking_data(&world, ids)?;
        let t = Instant::now();
        let run = train_ranker(
            &data,
            &table,
            &books,
            &self.cfg.ranker_for(tag),
            tag,
            self.cfg.seed,
            Some(&dir),
        )?;
        log::info!("rank[{tag}]: trained in {:.1?}", t.elapsed());
        checkpoint::write(&dir.join("ranker.savior"), &run.params.store.named_tensors())?;
        io::write_jsonl(&dir.join("history.jsonl"), &run.history)?;
        io::write_json(
            &dir.join("meta.json"),
            &RankMeta {
                ablation: tag,
                stream_hash: run.stream_hash,
            },
        )?;
        self.finish(&dir, "rank", hash, &["ranker.savior", "history.jsonl", "meta.json"])?;
        Ok(Outcome::Ran)
    }

    pub fn eval(&self, tag: Ablation) -> Result<Outcome> {
        self.eval_inner(tag).map_err(stage_err("eval"))
    }

    fn eval_inner(&self, tag: Ablation) -> Result<Outcome> {
        let dir = self.eval_dir(tag);
        let hash = self.cfg.eval_hash(tag);
        let world = self.load_world()?;
        let table = self.load_table()?;
        let (ids, books, usage) = self.load_codes()?;
        let rank_dir = self.rank_dir(tag);
        self.require(&rank_dir, "rank", &self.cfg.rank_hash(tag))?;
        if self.prepare(&dir, &hash)? {
            return Ok(Outcome::UpToDate);
        }
        let data = self.ranking_data(&world, ids)?;
        let cfg = self.cfg.ranker_for(tag);
        let mut params = RankerParams::new(
            &cfg,
            tag,
            &data,
            table.dim(),
            books.len(),
            books[0].rows(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        params
            .store
            .load_named(&checkpoint::read(&rank_dir.join("ranker.savior"))?)?;
        let scores = predict(&params, &data, &table, &data.eval)?;
        let meta = ReportMeta {
            ablation: tag.tag().to_string(),
            seed: self.cfg.seed,
            config_hash: hash.clone(),
        };
        let report = self.build_report(&world, &data, &scores, meta, || {
            let hitrate: HitrateReport = io::read_json(&self.dir("encode").join("hitrate.json"))?;
            let layer_importance = if params.features.mba {
                let first = params
                    .mba
                    .fusion
                    .layers
                    .first()
                    .ok_or_else(|| Error::contract("alignment fusion has no layers"))?;
                Some(evalkit::layer_importance(
                    &params.mba.stack.tensors(&params.store),
                    params.store.get(first.w),
                )?)
            } else {
                None
            };
            Ok(ModalColumns {
                hitrate,
                rq_perplexity: usage.layers.iter().map(|l| l.perplexity).collect(),
                layer_importance,
            })
        })?;
        io::write_json(&dir.join("report.json"), &report)?;
        io::atomic_write(&dir.join("report.txt"), report.to_text().as_bytes())?;
        self.finish(&dir, "eval", hash, &["report.json", "report.txt"])?;
        Ok(Outcome::Ran)
    }

    fn build_report(
        &self,
        world: &World,
        data: &RankingData,
        scores: &[f64],
        meta: ReportMeta,
        modal: impl FnOnce() -> Result<ModalColumns>,
    ) -> Result<FinalReport> {
        let b = self.cfg.bucketing();
        let labels = data.labels(&data.eval);
        let pvs = data.pvs(&data.eval);
        let imp = |f: fn(&Impression) -> f64| -> Vec<f64> {
            data.eval.iter().map(|&i| f(&world.log.impressions[i])).collect()
        };
        let named = |name: &str| ReportMeta {
            ablation: name.to_string(),
            ..meta.clone()
        };
        let uses_modal = meta.ablation.parse::<Ablation>().map_or(true, Ablation::uses_modal);
        let base = imp(|i| i.base_pctr);
        let bayes = imp(|i| i.true_pctr);
        let max_pv = b.edges().get(2).copied().unwrap_or(u64::MAX);
        let cold_idx: Vec<usize> = (0..pvs.len()).filter(|&k| pvs[k] < max_pv).collect();
        let cold_labels: Vec<bool> = cold_idx.iter().map(|&k| labels[k]).collect();
        let cold_auc = |v: &[f64]| {
            let s: Vec<f64> = cold_idx.iter().map(|&k| v[k]).collect();
            evalkit::auc(&s, &cold_labels).ok()
        };
        Ok(FinalReport {
            model: evalkit::grouped_auc(scores, &labels, &pvs, &b, meta.clone())?,
            base_pctr: evalkit::grouped_auc(&base, &labels, &pvs, &b, named("base_pctr"))?,
            bayes: evalkit::grouped_auc(&bayes, &labels, &pvs, &b, named("bayes"))?,
            cold: ColdSummary {
                max_pv,
                samples: cold_idx.len(),
                model: cold_auc(scores),
                base_pctr: cold_auc(&base),
                bayes: cold_auc(&bayes),
            },
            modal: if uses_modal { Some(modal()?) } else { None },
        })
    }

    /// Reads the report written by `eval`.
    pub fn load_report(&self, tag: Ablation) -> Result<FinalReport> {
        let dir = self.eval_dir(tag);
        self.require(&dir, "eval", &self.cfg.eval_hash(tag))?;
        io::read_json(&dir.join("report.json"))
    }

    /// Trains and scores one ranker entirely in memory.
    fn train_and_score(
        &self,
        data: &RankingData,
        table: &EmbeddingTable,
        books: &[Tensor],
        cfg: &RankerConfig,
        label: &str,
    ) -> Result<(EvalReport, String)> {
        let t = Instant::now();
        let run = train_ranker(data, table, books, cfg, cfg.ablation, self.cfg.seed, None)?;
        let scores = predict(&run.params, data, table, &data.eval)?;
        let report = evalkit::grouped_auc(
            &scores,
            &data.labels(&data.eval),
            &data.pvs(&data.eval),
            &self.cfg.bucketing(),
            ReportMeta {
                ablation: label.to_string(),
                seed: self.cfg.seed,
                config_hash: String::new(),
            },
        )?;
        log::info!("{label}: total AUC {:.4} in {:.1?}", report.total_auc, t.elapsed());
        Ok((report, run.stream_hash))
    }

    pub fn ablate(&self) -> Result<AblationTable> {
        self.ablate_inner().map_err(stage_err("ablate"))
    }

    fn ablate_inner(&self) -> Result<AblationTable> {
        let dir = self.dir("ablate");
        let hash = self.cfg.ablate_hash();
        let world = self.load_world()?;
        let table = self.load_table()?;
        let (ids, books, _) = self.load_codes()?;
        if self.prepare(&dir, &hash)? {
            return io::read_json(&dir.join("ablation.json"));
        }
        let data = self.ranking_data(&world, ids)?;
        let tags: Vec<String> = self
            .cfg
            .eval
            .ablation_tags
            .iter()
            .map(|t| t.tag().to_string())
            .collect();
        let suite = evalkit::ablation_suite(&tags, |tag| {
            let a: Ablation = tag.parse()?;
            let (mut report, stream_hash) =
                self.train_and_score(&data, &table, &books, &self.cfg.ranker_for(a), tag)?;
            report.meta.config_hash = hash.clone();
            Ok(AblationRun { report, stream_hash })
        });
        let hashes: std::collections::BTreeSet<&str> =
            suite.rows.iter().filter_map(|r| r.stream_hash.as_deref()).collect();
        if hashes.len() > 1 {
            return Err(Error::contract("ablation members saw different sample streams"));
        }
        io::write_json(&dir.join("ablation.json"), &suite)?;
        io::atomic_write(&dir.join("ablation.txt"), suite.to_text().as_bytes())?;
        self.finish(&dir, "ablate", hash, &["ablation.json", "ablation.txt"])?;
        Ok(suite)
    }

    pub fn sweep_dims(&self) -> Result<Vec<SweepRow>> {
        self.sweep_inner().map_err(stage_err("sweep-dims"))
    }

    fn sweep_inner(&self) -> Result<Vec<SweepRow>> {
        let dir = self.dir("sweep-dims");
        let hash = self.cfg.sweep_hash();
        let world = self.load_world()?;
        let table = self.load_table()?;
        let (ids, books, _) = self.load_codes()?;
        if self.prepare(&dir, &hash)? {
            return io::read_jsonl(&dir.join("sweep.jsonl"));
        }
        let data = self.ranking_data(&world, ids)?;
        let mut rows = Vec::new();
        for &d in &self.cfg.eval.sweep_dims {
            let cfg = RankerConfig {
                d_mba: d,
                ..self.cfg.ranker_for(Ablation::Full)
            };
            let label = format!("d_mba={d}");
            let (mut report, _) = self.train_and_score(&data, &table, &books, &cfg, &label)?;
            report.meta.config_hash = hash.clone();
            rows.push(SweepRow {
                label,
                d_mba: Some(d),
                report,
            });
        }
        let (mut report, _) =
            self.train_and_score(&data, &table, &books, &self.cfg.ranker_for(Ablation::NoMba), "no_mba")?;
        report.meta.config_hash = hash.clone();
        rows.push(SweepRow {
            label: "no_mba".into(),
            d_mba: None,
            report,
        });
        io::write_jsonl(&dir.join("sweep.jsonl"), &rows)?;
        let table_rows: Vec<(&str, &EvalReport)> = rows.iter().map(|r| (r.label.as_str(), &r.report)).collect();
        io::atomic_write(
            &dir.join("sweep.txt"),
            evalkit::format_auc_table(&table_rows).as_bytes(),
        )?;
        self.finish(&dir, "sweep-dims", hash, &["sweep.jsonl", "sweep.txt"])?;
        Ok(rows)
    }

    /// gen → encode → quantize → rank → eval for the configured ablation.
    pub fn run_all(&self) -> Result<FinalReport> {
        let tag = self.cfg.ranker.ablation;
        for (name, step) in [
            ("gen", &(|| self.gen()) as &dyn Fn() -> Result<Outcome>),
            ("encode", &|| self.encode()),
            ("quantize", &|| self.quantize()),
            ("rank", &|| self.rank(tag)),
            ("eval", &|| self.eval(tag)),
        ] {
            let t = Instant::now();
            let o = step()?;
            log::info!("{name}: {o:?} in {:.1?}", t.elapsed());
        }
        self.load_report(tag).map_err(stage_err("eval"))
    }
}
