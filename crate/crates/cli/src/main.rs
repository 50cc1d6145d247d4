use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use attrmine::pipeline::{self, Backend, PipelineConfig, SyntheticSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Mine product attributes and their values from product titles.
#[derive(Parser, Debug)]
#[command(name = "attrmine", version, about)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML configuration file with dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for every artifact.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Upper bound on framework iterations.
    #[arg(long, global = true)]
    max_iter: Option<usize>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    seeds: Option<PathBuf>,
    #[arg(long, global = true)]
    gold: Option<PathBuf>,
    #[arg(long, global = true)]
    gold_spans: Option<PathBuf>,
    /// Extra `key=value` configuration overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Tiny,
    External,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Masked-LM pretraining of the tiny encoder.
    Pretrain,
    /// Segment titles into candidate values.
    Candidates {
        /// Segmentation threshold; disables calibration from gold spans.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Pretrain, generate candidates, and iterate training and discovery.
    Run {
        /// Reuse a pretrained checkpoint and candidate dump when present.
        #[arg(long)]
        resume: bool,
        /// Evaluate each iteration against the gold clusters.
        #[arg(long)]
        eval: bool,
    },
    /// Score persisted predictions against the gold clusters.
    Eval {
        /// Iteration to score; the last one by default.
        #[arg(long)]
        iteration: Option<usize>,
    },
    /// Export a 2-D projection of one product type's value embeddings.
    Project {
        #[arg(long = "type")]
        product_type: String,
    },
    /// Write a synthetic corpus with seeds and answers.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        types: usize,
        #[arg(long, default_value_t = 4)]
        attributes: usize,
        #[arg(long, default_value_t = 8)]
        values: usize,
        #[arg(long, default_value_t = 2000)]
        products: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        /// Share of values that end in their attribute's unit word.
        #[arg(long, default_value_t = 0.5)]
        unit_fraction: f64,
        #[arg(long, default_value_t = 2)]
        seeded_attributes: usize,
        #[arg(long, default_value_t = 3)]
        seeds_per_attribute: usize,
    },
}

fn build_config(global: &Global) -> attrmine::Result<PipelineConfig> {
    let mut config = match &global.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    if let Some(dir) = &global.workdir {
        config.paths.workdir = dir.clone();
    }
    if let Some(n) = global.max_iter {
        config.max_iter = n;
    }
    if let Some(b) = global.backend {
        config.backend = match b {
            BackendArg::Tiny => Backend::Tiny,
            BackendArg::External => Backend::External,
        };
    }
    for (slot, value) in [
        (&mut config.paths.corpus, &global.corpus),
        (&mut config.paths.seeds, &global.seeds),
        (&mut config.paths.gold, &global.gold),
        (&mut config.paths.gold_spans, &global.gold_spans),
    ] {
        if value.is_some() {
            slot.clone_from(value);
        }
    }
    for assignment in &global.overrides {
        config.apply_override(assignment)?;
    }
    config.validate()?;
    Ok(config)
}

fn execute(cli: Cli) -> Result<()> {
    let mut config = build_config(&cli.global)?;
    match cli.command {
        Command::Pretrain => {
            let (_, losses) = pipeline::pretrain(&config)?;
            println!(
                "pretrained {} steps, final loss {:.4}",
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Candidates { threshold } => {
            if let Some(t) = threshold {
                config.segmentation.threshold = t;
                config.calibration.products = 0;
            }
            config.validate()?;
            let products = pipeline::load_products(&config)?;
            let encoder = pipeline::open_encoder(&config)?;
            let out = pipeline::candidates(&config, &products, encoder.as_encoder())?;
            println!("threshold\t{:.4}", out.threshold);
            for (t, n) in out.counts() {
                println!("{t}\t{n}");
            }
        }
        Command::Run { resume, eval } => {
            if !eval {
                config.paths.gold = None;
            } else if config.paths.gold.is_none() {
                return Err(attrmine::Error::Config {
                    field: "paths.gold".into(),
                    message: "--eval needs gold clusters".into(),
                }
                .into());
            }
            let out = pipeline::run(&config, resume)?;
            for s in &out.iterations {
                println!(
                    "iteration {}: {} clusters ({} new), coverage {:.3}, change {:.3}{}",
                    s.iteration,
                    s.clusters,
                    s.fresh_clusters,
                    s.coverage,
                    s.change_rate,
                    s.ari.map(|a| format!(", ARI {a:.3}")).unwrap_or_default()
                );
            }
        }
        Command::Eval { iteration } => {
            let report = pipeline::eval(&config, iteration)?;
            println!("type\tmetric\tvalue\tn_labeled");
            for row in &report.rows {
                println!("{}\t{}\t{:.6}\t{}", row.product_type, row.metric, row.value, row.n_labeled);
            }
        }
        Command::Project { product_type } => {
            let (path, rows) = pipeline::project(&config, &product_type)?;
            println!("{} values written to {}", rows.len(), path.display());
        }
        Command::Synth {
            out,
            types,
            attributes,
            values,
            products,
            noise,
            unit_fraction,
            seeded_attributes,
            seeds_per_attribute,
        } => {
            let spec = SyntheticSpec {
                types,
                attributes,
                values,
                products,
                noise_p: noise,
                unit_fraction,
                seeded_attributes,
                seeds_per_attribute,
                seed: config.seed,
            };
            let files = pipeline::write_synthetic(&out, &spec)
                .map_err(|e| anyhow!("writing synthetic data to {}: {e}", out.display()))?;
            files.configure(&mut config);
            config.paths.workdir = out.join("work");
            std::fs::write(out.join("config.toml"), config.to_toml_string()?)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let config_error = e
                .downcast_ref::<attrmine::Error>()
                .is_some_and(attrmine::Error::is_config);
            eprintln!("error: {e}");
            if config_error {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
