use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ctta::adapter::AdapterKind;
use ctta::harness::{
    emit_report, load_records, offline_train, run_ablation_grid, run_continual, AlignChoice, ArtifactCache,
    ExperimentConfig, GridAxes, OfflineArtifacts,
};

#[derive(Parser)]
#[command(name = "ctta", version, about = "Continual test-time adaptation experiments on synthetic domain-shift streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model, the parameter generator and the class centers.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Run one continual adaptation pass and write its report.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train`; trained on the fly when omitted.
        #[arg(long)]
        artifacts: Option<PathBuf>,
    },
    /// Run the adapter × generator × alignment ablation grid.
    Grid {
        #[command(flatten)]
        common: Common,
        /// Seeds to run; defaults to the config's ablation seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Reuse offline artifacts stored here across invocations.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Re-render metrics and plots from the run records in a directory.
    Report {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    no_generator: bool,
    #[arg(long, value_enum)]
    align: Option<AlignArg>,
    #[arg(long, value_enum)]
    adapter: Option<AdapterArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignArg {
    Ot,
    Kl,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum AdapterArg {
    Dual,
    Plain,
    Off,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.no_generator {
            cfg.ablation.use_generator = false;
        }
        if let Some(a) = self.align {
            cfg.ablation.align = match a {
                AlignArg::Ot => AlignChoice::Ot,
                AlignArg::Kl => AlignChoice::Kl,
                AlignArg::Off => AlignChoice::Off,
            };
        }
        if let Some(a) = self.adapter {
            cfg.ablation.use_adapter = match a {
                AdapterArg::Dual => AdapterKind::Dual,
                AdapterArg::Plain => AdapterKind::PlainLora,
                AdapterArg::Off => AdapterKind::Off,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_files(out: &Path, written: &[PathBuf]) {
    println!("wrote {} files under {}", written.len(), out.display());
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { common } => {
            let cfg = common.config()?;
            let artifacts = offline_train(&cfg)?;
            artifacts.save(&common.out)?;
            cfg.save(&common.out.join("config.toml"))?;
            println!(
                "source test accuracy {:.4}, {} snapshots",
                artifacts.report.source_test_accuracy, artifacts.report.snapshots
            );
            println!("artifacts in {}", common.out.display());
        }
        Command::Adapt { common, artifacts } => {
            let cfg = common.config()?;
            let artifacts = match artifacts {
                Some(dir) => OfflineArtifacts::load(&dir).with_context(|| format!("loading artifacts from {}", dir.display()))?,
                None => offline_train(&cfg)?,
            };
            let record = run_continual(&cfg, &artifacts)?;
            for d in &record.domains {
                println!("{:<18} {:.4}", d.name, d.accuracy);
            }
            println!(
                "mean shifted accuracy {:.4}, source drop {:+.4}",
                record.mean_shifted_accuracy, record.source_drop
            );
            let written = emit_report(std::slice::from_ref(&record), &common.out)?;
            write_files(&common.out, &written);
        }
        Command::Grid { common, seeds, cache } => {
            let cfg = common.config()?;
            let seeds = if seeds.is_empty() { cfg.ablation.seeds.clone() } else { seeds };
            let mut store = ArtifactCache::new(&cfg, cache.as_deref());
            let table = run_ablation_grid(&cfg, &GridAxes::full(seeds), &mut store)?;
            for row in &table.rows {
                println!(
                    "{:<24} acc {:.4} ± {:.4}  source drop {:+.4}",
                    row.label, row.mean_accuracy, row.std_accuracy, row.mean_source_drop
                );
            }
            std::fs::create_dir_all(&common.out)?;
            std::fs::write(common.out.join("ablation.csv"), table.to_csv()?)?;
            let written = emit_report(&table.all_records(), &common.out)?;
            write_files(&common.out, &written);
        }
        Command::Report { out } => {
            let records = load_records(&out)?;
            if records.is_empty() {
                bail!("no run records in {}", out.display());
            }
            let written = emit_report(&records, &out)?;
            write_files(&out, &written);
        }
    }
    Ok(())
}
