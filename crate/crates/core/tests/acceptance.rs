//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Criteria 3 and 7 to 11 share three full pipeline runs.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use coldrec::evalkit::{self, ReportMeta};
use coldrec::numerics::checkpoint;
use coldrec::numerics::graph::Graph;
use coldrec::numerics::params::{ParamId, ParamStore};
use coldrec::numerics::tensor::Tensor;
use coldrec::pipeline::{FinalReport, Pipeline, PipelineConfig};
use coldrec::ranking::train::{batch_stream, Trainer};
use coldrec::ranking::{
    forward_logits, mba_forward, predict, Ablation, BiDta, BlockMask, RankerConfig, RankerParams, RankingData,
    ScoreNorm,
};
use coldrec::rqvae::{self, quantize_batch, rqvae_forward, Assigner, RqConfig, RqVaeParams, SemanticId};
use coldrec::saviorenc::{info_nce_loss, EmbeddingTable, EncoderConfig, EncoderParams};
use coldrec::synthgen::{self, PvBucketing, SynthConfig};

type Outcome = coldrec::Result<(bool, String)>;

const SEEDS: [u64; 3] = [0, 1, 2];
const FD_INSTANCES: u64 = 20;
const FD_TOL: f64 = 1e-6;

fn enc_store(m: &mut EncoderParams) -> &mut ParamStore {
    &mut m.store
}

fn rq_store(m: &mut RqVaeParams) -> &mut ParamStore {
    &mut m.store
}

fn ranker_store(m: &mut RankerParams) -> &mut ParamStore {
    &mut m.store
}

fn group_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts[0] {
        "user_emb" | "profile_emb" | "id_emb" => "ranker embeddings".into(),
        "mba" | "rq" | "bidta" => format!("{} {}", parts[0], parts[1]),
        other => other.into(),
    }
}

fn record(worst: &mut BTreeMap<String, (f64, usize)>, errs: Vec<(String, f64)>) {
    let mut seen = std::collections::BTreeSet::new();
    for (name, e) in errs {
        let g = group_of(&name);
        let w = worst.entry(g.clone()).or_insert((0.0, 0));
        w.0 = w.0.max(e);
        if seen.insert(g) {
            w.1 += 1;
        }
    }
}

fn store_grads(g: &Graph, loss: coldrec::numerics::graph::Var, store: &mut ParamStore) -> coldrec::Result<()> {
    let grads = g.backward(loss)?;
    store.zero_grads();
    g.accumulate_param_grads(&grads, store);
    Ok(())
}

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.ids().collect()
}

fn fd_encoder(inst: u64, worst: &mut BTreeMap<String, (f64, usize)>) -> coldrec::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst);
    let cfg = EncoderConfig {
        tower_hidden: vec![6],
        d_enc: 5,
        fuse_hidden: vec![6],
        d_fuse: 5,
        proj_hidden: vec![5],
        d_z: 4,
        tau: 0.5,
        ..EncoderConfig::default()
    };
    let mut enc = EncoderParams::new(5, 4, &cfg, &mut rng)?;
    common::randomize(&mut enc.store, 0.5, &mut rng);
    let a = common::random_tensor(6, 5, &mut rng);
    let b = common::random_tensor(6, 4, &mut rng);
    let pairs = [(0, 1), (2, 3), (4, 5)];
    let build = |e: &EncoderParams, g: &mut Graph| {
        let av = g.constant(a.clone());
        let bv = g.constant(b.clone());
        let z = e.forward(g, av, bv).unwrap();
        info_nce_loss(g, z, &pairs, cfg.tau).unwrap()
    };
    let mut g = Graph::new();
    let l = build(&enc, &mut g);
    store_grads(&g, l, &mut enc.store)?;
    let ids = all_ids(&enc.store);
    let errs = common::fd_check(
        &mut enc,
        enc_store,
        &ids,
        |e| {
            let mut g = Graph::new();
            let l = build(e, &mut g);
            g.scalar(l)
        },
        8,
        &mut rng,
    );
    let errs = errs.into_iter().map(|(_, e)| ("encoder".to_string(), e)).collect();
    record(worst, errs);
    Ok(())
}

fn fd_rqvae(inst: u64, worst: &mut BTreeMap<String, (f64, usize)>) -> coldrec::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + inst);
    let cfg = RqConfig {
        layers: 3,
        codes: 5,
        dim: 4,
        enc_hidden: vec![5],
        dec_hidden: vec![5],
        lambda_recon: 2.0,
        lambda_commit: 0.5,
        tau: 0.5,
        ..RqConfig::default()
    };
    let mut p = RqVaeParams::new(6, &cfg, &mut rng)?;
    common::randomize(&mut p.store, 0.5, &mut rng);
    let z = common::random_tensor(8, 6, &mut rng);
    let pairs = [(0, 1), (2, 3), (4, 5), (6, 7)];
    let sk = (cfg.sinkhorn_iters, cfg.sinkhorn_reg);
    let assigner = if inst.is_multiple_of(2) {
        Assigner::Sinkhorn
    } else {
        Assigner::Argmin
    };
    let mut g = Graph::new();
    let fwd = rqvae_forward(&mut g, &p, &z, Some(&pairs), cfg.tau, assigner, sk, None)?;
    store_grads(&g, fwd.total, &mut p.store)?;
    let constants = fwd.constants;
    let ids = all_ids(&p.store);
    let errs = common::fd_check(
        &mut p,
        rq_store,
        &ids,
        |p| {
            let mut g = Graph::new();
            let f = rqvae_forward(&mut g, p, &z, Some(&pairs), cfg.tau, assigner, sk, Some(&constants)).unwrap();
            g.scalar(f.total)
        },
        8,
        &mut rng,
    );
    record(worst, errs);
    Ok(())
}

fn tiny_synth() -> SynthConfig {
    SynthConfig {
        n_items: 30,
        n_users: 8,
        n_impressions: 320,
        d_style: 4,
        n_clusters: 4,
        modality_a_dim: 5,
        modality_b_dim: 4,
        profile_cardinalities: vec![3, 2],
        n_max: 5,
        related_k: 5,
        eval_fraction: 0.25,
        ..SynthConfig::default()
    }
}

fn tiny_ranking_world(
    seed: u64,
    layers: usize,
    codes: usize,
    d_z: usize,
) -> coldrec::Result<(RankingData, EmbeddingTable)> {
    let cfg = tiny_synth();
    let catalog = synthgen::generate_catalog(&cfg, seed)?;
    let users = synthgen::generate_users(&cfg, seed)?;
    let log = synthgen::generate_interactions(&catalog, &users, &cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids = (0..cfg.n_items)
        .map(|_| SemanticId {
            codes: (0..layers).map(|_| rng.random_range(0..codes as u32)).collect(),
        })
        .collect();
    let data = RankingData::build(
        &log,
        &users,
        &cfg.profile_cardinalities,
        ids,
        cfg.n_items,
        cfg.eval_start_round(),
        None,
    )?;
    let table = EmbeddingTable::new(common::random_tensor(cfg.n_items, d_z, &mut rng));
    Ok((data, table))
}

fn fd_ranker(inst: u64, worst: &mut BTreeMap<String, (f64, usize)>) -> coldrec::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3000 + inst);
    let (layers, codes, d_z) = (3, 5, 4);
    let (data, table) = tiny_ranking_world(inst, layers, codes, d_z)?;
    let cfg = RankerConfig {
        user_dim: 3,
        profile_dim: 2,
        id_dim: 4,
        d_mba: 3,
        mba_hidden: 5,
        heads: 2,
        head_dim: 2,
        dnn_hidden: vec![6, 4],
        score_norm: if inst.is_multiple_of(2) {
            ScoreNorm::None
        } else {
            ScoreNorm::Softmax
        },
        mba_norm_eps: if inst.is_multiple_of(2) {
            RankerConfig::default().mba_norm_eps
        } else {
            1e-12
        },
        ..RankerConfig::default()
    };
    let mut p = RankerParams::new(&cfg, Ablation::Full, &data, d_z, layers, codes, &mut rng)?;
    common::randomize(&mut p.store, 0.5, &mut rng);
    let mut idx: Vec<usize> = data.train.clone();
    idx.shuffle(&mut rng);
    idx.truncate(12);
    let labels = Arc::new(data.labels(&idx).iter().map(|&y| y as u8 as f64).collect::<Vec<_>>());
    let build = |p: &RankerParams, g: &mut Graph| {
        let logits = forward_logits(g, p, &data, &table, &idx).unwrap();
        g.bce_with_logits(logits, labels.clone()).unwrap()
    };
    let mut g = Graph::new();
    let l = build(&p, &mut g);
    store_grads(&g, l, &mut p.store)?;
    let ids = all_ids(&p.store);
    let errs = common::fd_check(
        &mut p,
        ranker_store,
        &ids,
        |p| {
            let mut g = Graph::new();
            let l = build(p, &mut g);
            g.scalar(l)
        },
        6,
        &mut rng,
    );
    record(worst, errs);
    Ok(())
}

fn c1_gradients() -> Outcome {
    let t = Instant::now();
    let mut worst = BTreeMap::new();
    for inst in 0..FD_INSTANCES {
        fd_encoder(inst, &mut worst)?;
        fd_rqvae(inst, &mut worst)?;
        fd_ranker(inst, &mut worst)?;
    }
    let elapsed = t.elapsed();
    let enough = worst.values().all(|&(_, n)| n as u64 >= FD_INSTANCES);
    let ok = enough && worst.values().all(|&(e, _)| e < FD_TOL) && elapsed < Duration::from_secs(60);
    let detail = worst
        .iter()
        .map(|(k, (e, n))| format!("{k} {e:.1e} (n={n})"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((ok, format!("max rel err per group: {detail}; {elapsed:.1?}")))
}

fn c2_residual_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let books: Vec<Tensor> = (0..4).map(|_| common::random_tensor(32, 8, &mut rng)).collect();
    let rows: Vec<Vec<f64>> = (0..10_000)
        .map(|_| common::random_tensor(1, 8, &mut rng).into_data())
        .collect();
    let mut worst = 0.0f64;
    for chunk in rows.chunks(500) {
        for (q, r) in quantize_batch(chunk, &books, Assigner::Argmin, 1, 1.0)?
            .iter()
            .zip(chunk)
        {
            let last = q.residuals.last().unwrap();
            for d in 0..r.len() {
                let words: f64 = (0..books.len()).map(|l| books[l].row(q.id.codes[l] as usize)[d]).sum();
                worst = worst.max((r[d] - words - last[d]).abs());
            }
        }
    }
    Ok((
        worst <= 1e-12,
        format!("max |x − ΣC − r_L+1| = {worst:.2e} over 10000 vectors"),
    ))
}

fn c3_mba_identity(p: &Pipeline) -> Outcome {
    let world = p.load_world()?;
    let table = p.load_table()?;
    let (ids, books, _) = p.load_codes()?;
    let data = p.ranking_data(&world, ids)?;
    let cfg = &p.cfg.ranker;
    let seed = p.cfg.seed;
    let mut full = Trainer::new(cfg, Ablation::Full, &data, &table, &books, seed, 1000)?;
    let mut bitwise = true;
    for item in 0..table.len() as u32 {
        let z = table.get(item);
        let aligned = mba_forward(
            z,
            &data.codes[item as usize],
            &full.params.mba,
            &full.params.store,
            true,
        )?;
        bitwise &= aligned.iter().zip(z).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let mut bare = Trainer::new(cfg, Ablation::NoMba, &data, &table, &books, seed, 1000)?;
    let probe: Vec<usize> = data.eval.iter().copied().take(2000).collect();
    let p_full = predict(&full.params, &data, &table, &probe)?;
    let p_bare = predict(&bare.params, &data, &table, &probe)?;
    let same0 = p_full.iter().zip(&p_bare).all(|(a, b)| a.to_bits() == b.to_bits());
    let batch = batch_stream(&data, cfg.batch, 1, seed)[0][0].clone();
    full.step(&batch)?;
    bare.step(&batch)?;
    let p_full = predict(&full.params, &data, &table, &probe)?;
    let p_bare = predict(&bare.params, &data, &table, &probe)?;
    let diff = p_full
        .iter()
        .zip(&p_bare)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let ok = bitwise && same0 && diff > 1e-9;
    Ok((
        ok,
        format!(
            "z_align bitwise for {} items: {bitwise}; step-0 predictions identical: {same0}; max diff after one step {diff:.2e}",
            table.len()
        ),
    ))
}

fn c4_auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for case in 0..40 {
        let levels = [0, 2, 5, 50][case % 4];
        let scores: Vec<f64> = (0..1000)
            .map(|_| {
                if levels == 0 {
                    rng.random::<f64>()
                } else {
                    rng.random_range(0..levels) as f64 / levels as f64
                }
            })
            .collect();
        let rate = rng.random_range(0.05..0.95);
        let mut labels: Vec<bool> = (0..1000).map(|_| rng.random_bool(rate)).collect();
        labels[0] = true;
        labels[1] = false;
        let a = evalkit::auc(&scores, &labels)?;
        worst = worst.max((a - common::pair_count_auc(&scores, &labels)).abs());
    }
    let bucketing = PvBucketing::new(vec![0, 10, 100, 1000])?;
    let mut exact = true;
    for _ in 0..10 {
        let n = 1000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..20) as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let pvs: Vec<u64> = (0..n).map(|_| rng.random_range(0..3000)).collect();
        let meta = ReportMeta {
            ablation: "oracle".into(),
            seed: 0,
            config_hash: String::new(),
        };
        let report = evalkit::grouped_auc(&scores, &labels, &pvs, &bucketing, meta)?;
        for (b, row) in report.buckets.iter().enumerate() {
            let keep: Vec<usize> = (0..n).filter(|&i| bucketing.bucket_of(pvs[i]) == b).collect();
            let s: Vec<f64> = keep.iter().map(|&i| scores[i]).collect();
            let y: Vec<bool> = keep.iter().map(|&i| labels[i]).collect();
            let want = evalkit::auc(&s, &y).ok();
            exact &= row.auc.map(f64::to_bits) == want.map(f64::to_bits) && row.samples == keep.len();
        }
    }
    Ok((
        worst <= 1e-12 && exact,
        format!("max |auc − pair count| = {worst:.2e} over 40 sets; grouped matches subsets exactly: {exact}"),
    ))
}

fn c5_permutation() -> Outcome {
    let mut worst = 0.0f64;
    for cfg_i in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + cfg_i);
        let h_dim = rng.random_range(1..7);
        let z_dim = rng.random_range(1..7);
        let heads = rng.random_range(1..4);
        let head_dim = rng.random_range(1..5);
        let b = rng.random_range(1..4);
        let lens: Vec<usize> = (0..b).map(|_| rng.random_range(0..7)).collect();
        let mut store = ParamStore::new();
        let bidta = BiDta::new(&mut store, h_dim, z_dim, heads, head_dim, &mut rng);
        common::randomize(&mut store, 1.0, &mut rng);
        let mut offsets = vec![0];
        for l in &lens {
            offsets.push(offsets.last().unwrap() + l);
        }
        let n = *offsets.last().unwrap();
        let hc = common::random_tensor(b, h_dim, &mut rng);
        let zc = common::random_tensor(b, z_dim, &mut rng);
        let hs = common::random_tensor(n.max(1), h_dim, &mut rng);
        let zs = common::random_tensor(n.max(1), z_dim, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        for s in 0..b {
            perm[offsets[s]..offsets[s + 1]].shuffle(&mut rng);
        }
        let permute =
            |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let offsets = Arc::new(offsets);
        for norm in [ScoreNorm::None, ScoreNorm::Softmax] {
            let run = |hs: &Tensor, zs: &Tensor| -> coldrec::Result<Vec<Tensor>> {
                let mut g = Graph::new();
                let hcv = g.constant(hc.clone());
                let zcv = g.constant(zc.clone());
                let (hsv, zsv) = if n == 0 {
                    (None, None)
                } else {
                    (Some(g.constant(hs.clone())), Some(g.constant(zs.clone())))
                };
                let out = bidta.forward(&mut g, &store, hcv, Some(zcv), hsv, zsv, &offsets, BlockMask::ALL, norm)?;
                Ok(out.into_iter().map(|v| g.value(v).clone()).collect())
            };
            let base = run(&hs, &zs)?;
            let (hp, zp) = if n == 0 {
                (hs.clone(), zs.clone())
            } else {
                (permute(&hs), permute(&zs))
            };
            let moved = run(&hp, &zp)?;
            for (x, y) in base.iter().zip(&moved) {
                for (a, c) in x.data().iter().zip(y.data()) {
                    worst = worst.max((a - c).abs());
                }
            }
        }
    }
    Ok((
        worst < 1e-10,
        format!("max change over 100 configs x 4 blocks x 2 norms = {worst:.2e}"),
    ))
}

fn c6_sinkhorn_entropy() -> Outcome {
    let (layers, k, d, batch) = (3, 16, 6, 256);
    let cfg = RqConfig::default();
    let mut all = true;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let books: Vec<Tensor> = (0..layers)
            .map(|_| {
                let mut b = common::random_tensor(k, d, &mut rng);
                for c in 0..k {
                    let row = b.row_mut(c);
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    for x in row.iter_mut() {
                        *x = if c == 0 { 0.0 } else { *x * 10.0 / norm };
                    }
                }
                b
            })
            .collect();
        let rows: Vec<Vec<f64>> = (0..batch)
            .map(|_| common::random_tensor(1, d, &mut rng).into_data())
            .collect();
        let ent = |assigner| -> coldrec::Result<Vec<f64>> {
            let q = quantize_batch(&rows, &books, assigner, cfg.sinkhorn_iters, cfg.sinkhorn_reg)?;
            Ok((0..layers)
                .map(|l| {
                    let mut hist = vec![0usize; k];
                    for x in &q {
                        hist[x.id.codes[l] as usize] += 1;
                    }
                    rqvae::entropy(&hist)
                })
                .collect())
        };
        let sk = ent(Assigner::Sinkhorn)?;
        let am = ent(Assigner::Argmin)?;
        all &= sk.iter().zip(&am).all(|(s, a)| s > a);
        lines.push(format!(
            "seed {seed}: sinkhorn [{}] argmin [{}]",
            sk.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" "),
            am.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ")
        ));
    }
    Ok((all, format!("per-layer entropy (nats) {}", lines.join("; "))))
}

struct SeedRun {
    seed: u64,
    pipeline: Pipeline,
    gen_encode: Duration,
    full_pipeline: Duration,
    full: FinalReport,
    no_mm: FinalReport,
    no_mba: FinalReport,
    no_bidir: FinalReport,
}

fn pipeline_at(dir: &Path, seed: u64) -> Pipeline {
    let mut cfg = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    cfg.out_dir = dir.to_path_buf();
    Pipeline::new(cfg, false)
}

fn seed_run(root: &Path, seed: u64) -> coldrec::Result<SeedRun> {
    let p = pipeline_at(&root.join(format!("seed{seed}")), seed);
    let t = Instant::now();
    p.gen()?;
    p.encode()?;
    let gen_encode = t.elapsed();
    let full = p.run_all()?;
    let full_pipeline = t.elapsed();
    let tagged = |tag| -> coldrec::Result<FinalReport> {
        p.rank(tag)?;
        p.eval(tag)?;
        p.load_report(tag)
    };
    let no_mm = tagged(Ablation::NoMm)?;
    let no_mba = tagged(Ablation::NoMba)?;
    let no_bidir = tagged(Ablation::NoBidir)?;
    eprintln!(
        "acceptance: seed {seed} pipeline done in {full_pipeline:.1?} (ablations {:.1?})",
        t.elapsed()
    );
    Ok(SeedRun {
        seed,
        pipeline: p,
        gen_encode,
        full_pipeline,
        full,
        no_mm,
        no_mba,
        no_bidir,
    })
}

fn c7_hitrate(runs: &[SeedRun]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    let mut time = Duration::ZERO;
    for r in runs {
        let h = &r.full.modal.as_ref().expect("full report has modal columns").hitrate;
        ok &= h.trained - h.untrained >= 0.10;
        time += r.gen_encode;
        parts.push(format!("seed {}: {:.3} vs {:.3}", r.seed, h.trained, h.untrained));
    }
    ok &= time < Duration::from_secs(180);
    Ok((
        ok,
        format!(
            "hitrate@30 trained vs untrained {}; gen+encode {time:.1?}",
            parts.join(", ")
        ),
    ))
}

fn cold(r: &FinalReport) -> f64 {
    r.cold.model.unwrap_or(f64::NAN)
}

fn c8_cold_start(runs: &[SeedRun]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in runs {
        let full = cold(&r.full);
        let no_mm = cold(&r.no_mm);
        let bayes = r.full.cold.bayes.unwrap_or(f64::NAN);
        ok &= full - no_mm >= 0.03 && bayes - full <= 0.05;
        parts.push(format!(
            "seed {}: full {full:.4} no_mm {no_mm:.4} bayes {bayes:.4}",
            r.seed
        ));
    }
    let t = runs[0].full_pipeline;
    ok &= t < Duration::from_secs(600);
    Ok((
        ok,
        format!(
            "cold AUC (pv < {}) {}; seed-0 pipeline {t:.1?}",
            runs[0].full.cold.max_pv,
            parts.join(", ")
        ),
    ))
}

fn dominates(full: &[f64], other: &[f64]) -> bool {
    let wins = full.iter().zip(other).filter(|(a, b)| a > b).count();
    let ties = full.iter().zip(other).filter(|(a, b)| a == b).count();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    wins >= 2 || (wins + ties >= 2 && mean(full) >= mean(other))
}

fn c9_ablation_order(runs: &[SeedRun]) -> Outcome {
    let total = |f: fn(&SeedRun) -> &FinalReport| runs.iter().map(|r| f(r).model.total_auc).collect::<Vec<_>>();
    let full = total(|r| &r.full);
    let no_mba = total(|r| &r.no_mba);
    let no_bidir = total(|r| &r.no_bidir);
    let ok = dominates(&full, &no_mba) && dominates(&full, &no_bidir);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/");
    Ok((
        ok,
        format!(
            "total AUC full {} no_mba {} no_bidir {}",
            fmt(&full),
            fmt(&no_mba),
            fmt(&no_bidir)
        ),
    ))
}

fn c10_layer_importance(runs: &[SeedRun]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in runs {
        let li = r
            .full
            .modal
            .as_ref()
            .and_then(|m| m.layer_importance.as_ref())
            .expect("full report has layer importance");
        let max = li.codebook.iter().copied().fold(f64::MIN, f64::max);
        let min = li.codebook.iter().copied().fold(f64::MAX, f64::min);
        let ratio = max / min;
        let sum_c: f64 = li.codebook.iter().sum();
        let sum_f: f64 = li.fusion.iter().sum();
        ok &= ratio > 1.5 && (sum_c - 1.0).abs() <= 1e-12 && (sum_f - 1.0).abs() <= 1e-12;
        parts.push(format!(
            "seed {}: max/min {ratio:.2}, sums {:.1e}/{:.1e} from 1",
            r.seed,
            (sum_c - 1.0).abs(),
            (sum_f - 1.0).abs()
        ));
    }
    Ok((ok, parts.join("; ")))
}

fn c11_determinism(root: &Path, first: &Pipeline) -> Outcome {
    let second = pipeline_at(&root.join("seed0-again"), first.cfg.seed);
    second.run_all()?;
    let mut same = true;
    for name in ["report.json", "report.txt"] {
        let a = std::fs::read(first.dir("eval").join("full").join(name))?;
        let b = std::fs::read(second.dir("eval").join("full").join(name))?;
        same &= a == b;
    }
    let ckpts = [
        first.dir("encode").join("encoder.savior"),
        first.dir("encode").join("embedding.savior"),
        first.dir("quantize").join("rqvae.savior"),
        first.dir("rank").join("full").join("ranker.savior"),
    ];
    let scratch = root.join("roundtrip.savior");
    let mut exact = true;
    for path in &ckpts {
        let bytes = std::fs::read(path)?;
        let tensors = checkpoint::decode(&bytes)?;
        exact &= checkpoint::encode(&tensors) == bytes;
        checkpoint::write(&scratch, &tensors)?;
        let back = checkpoint::read(&scratch)?;
        exact &= back.len() == tensors.len()
            && back.iter().zip(&tensors).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape() == tb.shape()
                    && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            });
    }
    Ok((
        same && exact,
        format!(
            "reports byte-identical across runs: {same}; {} checkpoints round-trip bit-exactly: {exact}",
            ckpts.len()
        ),
    ))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut note = |n: usize, name: &'static str, o: Outcome| {
        let line = match &o {
            Ok((true, d)) => format!("PASS {n:>2} {name}: {d}"),
            Ok((false, d)) => format!("FAIL {n:>2} {name}: {d}"),
            Err(e) => format!("FAIL {n:>2} {name}: error: {e}"),
        };
        eprintln!("acceptance: {line}");
        results.push((n, name, o));
    };
    note(1, "gradient correctness", c1_gradients());
    note(2, "residual quantization identity", c2_residual_identity());
    note(4, "AUC oracle equivalence", c4_auc_oracle());
    note(5, "permutation invariance", c5_permutation());
    note(6, "Sinkhorn utilization", c6_sinkhorn_entropy());

    let root = tempfile::tempdir().expect("temp dir");
    let runs: coldrec::Result<Vec<SeedRun>> = SEEDS.iter().map(|&s| seed_run(root.path(), s)).collect();
    match &runs {
        Ok(runs) => {
            note(3, "alignment identity at init", c3_mba_identity(&runs[0].pipeline));
            note(7, "behavior alignment", c7_hitrate(runs));
            note(8, "cold-start gain", c8_cold_start(runs));
            note(9, "ablation ordering", c9_ablation_order(runs));
            note(10, "layer importance", c10_layer_importance(runs));
            note(
                11,
                "determinism and persistence",
                c11_determinism(root.path(), &runs[0].pipeline),
            );
        }
        Err(e) => {
            for (n, name) in [
                (3, "alignment identity at init"),
                (7, "behavior alignment"),
                (8, "cold-start gain"),
                (9, "ablation ordering"),
                (10, "layer importance"),
                (11, "determinism and persistence"),
            ] {
                note(
                    n,
                    name,
                    Err(coldrec::Error::contract(format!("pipeline run failed: {e}"))),
                );
            }
        }
    }

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    println!("acceptance criteria ({:.1?})", started.elapsed());
    for (n, name, o) in &results {
        match o {
            Ok((true, d)) => println!("PASS {n:>2} {name}: {d}"),
            Ok((false, d)) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {d}");
            }
            Err(e) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: error: {e}");
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
