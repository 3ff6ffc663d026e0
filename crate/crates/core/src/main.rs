use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use coldrec::pipeline::{Pipeline, PipelineConfig};
use coldrec::ranking::Ablation;

#[derive(Parser)]
#[command(
    name = "coldrec",
    version,
    about = "Cold-start CTR pipeline over a synthetic interaction world"
)]
struct Cli {
    /// TOML config; repeat to layer overlays (later files win).
    #[arg(long, global = true)]
    config: Vec<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `ranker.ablation` (full, no_mba, no_raw_mm, no_bidir, no_mm, no_id, no_stats).
    #[arg(long, global = true)]
    ablation: Option<Ablation>,
    /// Overwrite artifacts produced under a different config.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Synthetic catalog, users, impression log and co-click pairs.
    Gen,
    /// Contrastive item encoder and the frozen embedding table.
    Encode,
    /// RQ-VAE semantic IDs.
    Quantize,
    /// Train the ranker for the configured ablation.
    Rank,
    /// PV-bucketed AUC report for the configured ablation.
    Eval,
    /// Train and evaluate every configured ablation tag.
    Ablate,
    /// Alignment codebook dimension sweep.
    SweepDims,
    /// gen, encode, quantize, rank and eval in order.
    RunAll,
}

fn run(cli: Cli) -> coldrec::Result<()> {
    let mut cfg = if cli.config.is_empty() {
        PipelineConfig::default()
    } else {
        PipelineConfig::load(&cli.config)?
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(a) = cli.ablation {
        cfg.ranker.ablation = a;
    }
    let tag = cfg.ranker.ablation;
    let p = Pipeline::new(cfg, cli.force);
    match cli.cmd {
        Cmd::Gen => {
            let o = p.gen()?;
            log::info!("gen: {o:?}");
        }
        Cmd::Encode => {
            let o = p.encode()?;
            log::info!("encode: {o:?}");
        }
        Cmd::Quantize => {
            let o = p.quantize()?;
            log::info!("quantize: {o:?}");
        }
        Cmd::Rank => {
            let o = p.rank(tag)?;
            log::info!("rank: {o:?}");
        }
        Cmd::Eval => {
            p.eval(tag)?;
            print!("{}", p.load_report(tag)?.to_text());
        }
        Cmd::Ablate => print!("{}", p.ablate()?.to_text()),
        Cmd::SweepDims => {
            let rows = p.sweep_dims()?;
            let table: Vec<_> = rows.iter().map(|r| (r.label.as_str(), &r.report)).collect();
            print!("{}", coldrec::evalkit::format_auc_table(&table));
        }
        Cmd::RunAll => print!("{}", p.run_all()?.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
