use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use drl_core::checkpoint::load_checkpoint;
use drl_core::config::RunConfig;
use drl_core::datagen::generate_stream;
use drl_core::engine::Provenance;
use drl_core::experiment::{
    ablate, dump_embeddings, run_experiment, run_finetune_baseline, ExperimentOptions,
};
use drl_core::gradcheck::gradcheck_network_sweep;
use drl_core::ipa::{AttentionMode, FusionMode};
use drl_core::supervision::LossKind;

#[derive(Parser)]
#[command(name = "drl", about = "Incremental parallel adapter lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to a JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset: drl-default | drl-table-best.
    #[arg(long)]
    preset: Option<String>,
    /// Seed override (also honoured via DRL_SEED).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), None) => RunConfig::load(path)?,
            (None, Some(name)) => RunConfig::preset(name)?,
            (None, None) => RunConfig::default(),
            (Some(_), Some(_)) => bail!("pass either --config or --preset, not both"),
        };
        cfg.apply_env_override()?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a full incremental experiment and write artifacts.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (default: config's out_dir, else ./runs/seed<k>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also run the sequential finetune baseline for comparison.
        #[arg(long)]
        with_baseline: bool,
    },
    /// Finite-difference sweep over every trainable group for each loss.
    Gradcheck {
        /// Probe seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Cartesian sweep over fusion/attention/loss presets and seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2,3,4", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value = "sum,gate_part,gate_adapt", value_delimiter = ',')]
        fusion: Vec<String>,
        #[arg(long, default_value = "n_att,r_att", value_delimiter = ',')]
        attention: Vec<String>,
        #[arg(long, default_value = "das", value_delimiter = ',')]
        loss: Vec<String>,
    },
    /// Re-export the concatenated features of a checkpointed state as CSV.
    DumpEmbeddings {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print checkpoint metadata.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn parse_fusion(s: &str) -> Result<FusionMode> {
    Ok(match s {
        "sum" => FusionMode::Sum,
        "gate_part" => FusionMode::GatePart,
        "gate_adapt" => FusionMode::GateAdapt,
        "gate_extra" => FusionMode::GateExtra,
        other => bail!("unknown fusion mode {other:?}"),
    })
}

fn parse_attention(s: &str) -> Result<AttentionMode> {
    Ok(match s {
        "n_att" => AttentionMode::NAtt,
        "s_att" => AttentionMode::SAtt,
        "r_att" => AttentionMode::RAtt,
        other => bail!("unknown attention mode {other:?}"),
    })
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            with_baseline,
        } => {
            let cfg = config.resolve()?;
            let out_dir = out
                .or_else(|| cfg.out_dir.clone().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from(format!("runs/seed{}", cfg.seed)));
            let opts = ExperimentOptions::default();
            let outcome = run_experiment(&cfg, Some(&out_dir), &opts)
                .with_context(|| format!("experiment in {}", out_dir.display()))?;
            println!(
                "method=drl fusion={} attention={} loss={} seed={}",
                cfg.fusion_mode, cfg.attention_mode, cfg.supervision.kind, cfg.seed
            );
            for (i, a) in outcome.metrics.per_stage.iter().enumerate() {
                println!("  A_{} = {:.2}%", i + 1, a);
            }
            println!(
                "  A_bar = {:.2}%  A_T = {:.2}%  (artifacts in {})",
                outcome.metrics.a_bar,
                outcome.metrics.a_t,
                out_dir.display()
            );
            if with_baseline {
                let ft = run_finetune_baseline(&cfg, &opts)?;
                println!(
                    "finetune baseline: A_bar = {:.2}%  A_T = {:.2}%",
                    ft.a_bar, ft.a_t
                );
            }
        }
        Command::Gradcheck { seed, step } => {
            let started = std::time::Instant::now();
            let outcomes = gradcheck_network_sweep(seed, step)?;
            let mut worst: f64 = 0.0;
            for o in &outcomes {
                println!("[{}] max rel err = {:.3e}", o.label, o.max_rel_err());
                for item in &o.report.items {
                    println!(
                        "    {:<40} {:.3e}",
                        item.name, item.max_rel_err
                    );
                }
                worst = worst.max(o.max_rel_err());
            }
            println!(
                "worst over all groups: {:.3e} ({} arms, {:.1}s)",
                worst,
                outcomes.len(),
                started.elapsed().as_secs_f64()
            );
            if worst > 1e-4 {
                bail!("gradient check failed: {worst:.3e} > 1e-4");
            }
        }
        Command::Ablate {
            config,
            out,
            seeds,
            fusion,
            attention,
            loss,
        } => {
            let cfg = config.resolve()?;
            let fusions: Vec<FusionMode> =
                fusion.iter().map(|s| parse_fusion(s)).collect::<Result<_>>()?;
            let attentions: Vec<AttentionMode> = attention
                .iter()
                .map(|s| parse_attention(s))
                .collect::<Result<_>>()?;
            let losses: Vec<LossKind> = loss
                .iter()
                .map(|s| s.parse().map_err(anyhow::Error::from))
                .collect::<Result<_>>()?;
            let rows = ablate(
                &cfg,
                &fusions,
                &attentions,
                &losses,
                &seeds,
                &out,
                &ExperimentOptions::default(),
            )?;
            println!("{:<12} {:<8} {:<8} {:>6} {:>9} {:>9}", "fusion", "attn", "loss", "seed", "A_bar", "A_T");
            for r in rows {
                println!(
                    "{:<12} {:<8} {:<8} {:>6} {:>8.2}% {:>8.2}%",
                    r.fusion.to_string(),
                    r.attention.to_string(),
                    r.loss.to_string(),
                    r.seed,
                    r.a_bar,
                    r.a_t
                );
            }
            println!("summary written to {}", out.join("summary.csv").display());
        }
        Command::DumpEmbeddings { config, ckpt, out } => {
            let cfg = config.resolve()?;
            let loaded = load_checkpoint(&ckpt)?;
            let (_, stages) = generate_stream(&cfg.resolved_stream())?;
            let t = loaded.state.stage_index();
            if t == 0 || t > stages.len() {
                bail!("checkpoint stage {t} does not match the configured stream");
            }
            let seen: Vec<_> = stages[..t].iter().collect();
            dump_embeddings(&loaded.state, &seen, &out)?;
            println!(
                "wrote features of {} stages to {}",
                t,
                out.display()
            );
        }
        Command::Inspect { ckpt } => {
            let loaded = load_checkpoint(&ckpt)?;
            let digest: String = loaded
                .config_digest
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect();
            println!("version       : {}", loaded.version);
            println!("config digest : {digest}");
            println!("stage index   : {}", loaded.state.stage_index());
            let cfg = &loaded.state.backbone.config;
            println!(
                "backbone      : {}x{} px, patch {}, d={}, heads={}, blocks={}, ffn={}",
                cfg.image_side,
                cfg.image_side,
                cfg.patch_side,
                cfg.embed_dim,
                cfg.heads,
                cfg.blocks,
                cfg.ffn_hidden
            );
            for s in &loaded.state.streams {
                println!(
                    "stream {}      : fusion={} attention={} gamma={} r={} params={}",
                    s.stage,
                    s.fusion_mode,
                    s.attention_mode,
                    s.gamma,
                    s.bottleneck,
                    s.trainable_param_count()
                );
            }
            println!("classes       : {}", loaded.state.class_registry.len());
            let measured = loaded
                .store
                .entries
                .values()
                .flat_map(|p| p.segments.iter())
                .filter(|(_, p)| *p == Provenance::Measured)
                .count();
            let synthesized = loaded
                .store
                .entries
                .values()
                .flat_map(|p| p.segments.iter())
                .filter(|(_, p)| *p == Provenance::Synthesized)
                .count();
            println!(
                "prototypes    : {} classes, {measured} measured + {synthesized} synthesized segments",
                loaded.store.len()
            );
        }
    }
    Ok(())
}
