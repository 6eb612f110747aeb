use std::path::PathBuf;
use std::process::ExitCode;

use anchorcap_cli::commands::{self, EvalSource};
use anchorcap_cli::config::{parse_override, RunConfig};
use anchorcap_cli::table::{ablation_grid, metric_table};
use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "anchorcap", about = "Zero-shot captioning on a synthetic micro-world")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` config file; command-line settings take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key (repeatable), e.g. `--set clm.q=0.25`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override, global = true)]
    overrides: Vec<(String, String)>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,

    #[arg(long, global = true)]
    checkpoint_dir: Option<PathBuf>,

    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Built-in world: A (park) or B (kitchen).
    #[arg(long, global = true)]
    domain_id: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate scenes, captions, image features and splits.
    GenData,
    /// Train the image/text dual encoder on the training pairs.
    TrainEncoder,
    /// Train the language model on text embeddings of the corpus.
    TrainClm {
        /// Anchor dropout probability (defaults to `clm.q`).
        #[arg(long)]
        q: Option<f64>,
    },
    /// Caption the images of a split.
    Caption {
        #[arg(long, default_value = "test")]
        split: String,
        /// Report per-image decode latency.
        #[arg(long)]
        timing: bool,
    },
    /// Score captions of a split against its references.
    Evaluate {
        #[arg(long, default_value = "test")]
        split: String,
        /// Also score with ground-truth anchors.
        #[arg(long)]
        noise_free: bool,
        /// Also score with the prefix zeroed.
        #[arg(long)]
        no_prefix: bool,
        /// Also score from text embeddings of the first reference.
        #[arg(long)]
        text_side: bool,
    },
    /// Train one model per q and score every (p, q) cell.
    Ablate,
    /// Train on each of two worlds and caption the other's images.
    CrossDomain {
        /// Dataset directory of the second world.
        #[arg(long)]
        data_b: PathBuf,
    },
    /// Turn a training log into per-epoch curve data.
    Dynamics {
        /// Defaults to the log next to the CLM checkpoint.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Shift image embeddings along a text-derived direction and recaption.
    Counterfactual {
        #[arg(long)]
        source: String,
        #[arg(long)]
        target: String,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// JSON file with `values` (and optional `anchors`) instead of the test images.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Use each scene's true categories as anchors instead of detector output.
        #[arg(long)]
        noise_free: bool,
    },
    /// Finite-difference check of every gradient.
    Gradcheck,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainEncoder => "train-encoder",
            Command::TrainClm { .. } => "train-clm",
            Command::Caption { .. } => "caption",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate => "ablate",
            Command::CrossDomain { .. } => "cross-domain",
            Command::Dynamics { .. } => "dynamics",
            Command::Counterfactual { .. } => "counterfactual",
            Command::Gradcheck => "gradcheck",
        }
    }
}

fn config(c: &Common) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    let path = |p: &PathBuf| p.display().to_string();
    let flags = [
        ("seed", c.seed.map(|s| s.to_string())),
        ("data_dir", c.data_dir.as_ref().map(path)),
        ("checkpoint_dir", c.checkpoint_dir.as_ref().map(path)),
        ("output_dir", c.output_dir.as_ref().map(path)),
        ("domain", c.domain_id.clone()),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    }
    overrides.extend(c.overrides.iter().cloned());
    RunConfig::load(c.config.as_deref(), &overrides)
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = config(&cli.common)?;
    match &cli.command {
        Command::GenData => {
            let b = commands::gen_data(&cfg)?;
            println!("dir={}", cfg.data_dir.display());
            println!("domain={} seed={}", b.spec.domain_id, cfg.seed);
            for (split, ids) in &b.splits {
                println!("{}={}", split.name(), ids.len());
            }
            println!("corpus={} images={} image_dim={}", b.text_corpus.len(), b.images.len(), b.image_dim());
        }
        Command::TrainEncoder => {
            let (_, log) = commands::cmd_train_encoder(&cfg)?;
            for e in &log.epochs {
                println!("epoch={} loss={:.4} val_retrieval={:.4} logit_scale={:.2}", e.epoch, e.loss, e.val_retrieval, e.logit_scale);
            }
            println!("checkpoint={}", cfg.checkpoint_dir.join(commands::ENCODER_CKPT).display());
        }
        Command::TrainClm { q } => {
            if let Some(q) = q {
                cfg.apply("clm.q", &q.to_string())?;
                cfg.validate()?;
            }
            let (_, log) = commands::cmd_train_clm(&cfg)?;
            for e in &log.epochs {
                let mean = |r: Option<anchorcap::metrics::MetricReport>| r.map_or(f64::NAN, |r| r.mean_score);
                println!("epoch={} loss={:.4} text_mean={:.1} caption_mean={:.1}", e.epoch, e.loss, mean(e.text), mean(e.caption));
            }
            println!("best_epoch={}", log.best_epoch);
            println!("checkpoint={}", cfg.checkpoint_dir.join(commands::CLM_CKPT).display());
        }
        Command::Caption { split, timing } => {
            let run = commands::cmd_caption(&cfg, commands::parse_split(split)?)?;
            for r in &run.records {
                println!("{}\t{}\t[{}]", r.scene_id, r.caption, r.anchors.join(","));
            }
            if *timing {
                println!("images={} ms_per_image={:.2}", run.records.len(), run.ms_per_image);
            }
        }
        Command::Evaluate { split, noise_free, no_prefix, text_side } => {
            let mut sources = vec![EvalSource::Image];
            for (on, s) in [(*noise_free, EvalSource::ImageNoiseFree), (*no_prefix, EvalSource::NoPrefix), (*text_side, EvalSource::Text)] {
                if on {
                    sources.push(s);
                }
            }
            let recs = commands::cmd_evaluate(&cfg, commands::parse_split(split)?, &sources)?;
            let rows: Vec<_> = recs.iter().map(|r| (r.source.clone(), r.report)).collect();
            print!("{}", metric_table(&rows));
            for r in &recs {
                println!("source={} object_mention={:.3}", r.source, r.object_mention);
            }
        }
        Command::Ablate => {
            let t = commands::cmd_ablate(&cfg)?;
            print!("{}", ablation_grid(&t));
        }
        Command::CrossDomain { data_b } => {
            let recs = commands::cmd_cross_domain(&cfg, data_b)?;
            let rows: Vec<_> = recs.iter().map(|r| (format!("{} => {}", r.source, r.target), r.report)).collect();
            print!("{}", metric_table(&rows));
        }
        Command::Dynamics { log } => {
            let recs = commands::cmd_dynamics(&cfg, log.as_deref())?;
            println!("{:>6} {:>10} {:>10}", "epoch", "text", "caption");
            for r in &recs {
                println!("{:>6} {:>10.1} {:>10.1}{}", r.epoch, r.text_mean, r.caption_mean, if r.early_stop { "  <- early stop" } else { "" });
            }
        }
        Command::Counterfactual { source, target, scale, image, noise_free } => {
            let run = commands::cmd_counterfactual(&cfg, source, target, *scale, image.as_deref(), *noise_free)?;
            for p in &run.pairs {
                println!("{}\t{}\t=>\t{}\t-[{}] +[{}]", p.scene_id, p.original.text(), p.counterfactual.text(), p.diff.removed.join(" "), p.diff.added.join(" "));
            }
            let s = &run.summary;
            println!(
                "pairs={} flipped={} flip_rate={:.3} categories_preserved={} preserve_rate={:.3} unchanged={}",
                s.pairs,
                s.flipped,
                s.flip_rate(),
                s.categories_preserved,
                s.preserve_rate(),
                s.unchanged
            );
            for (w, n) in &s.side_effects {
                println!("side_effect word={w} count={n}");
            }
        }
        Command::Gradcheck => {
            let checks = commands::cmd_gradcheck(&cfg)?;
            for c in &checks {
                println!(
                    "{:<28} max_rel_error={:.2e} tolerance={:.0e} checked={} {}",
                    c.name,
                    c.max_rel_error,
                    c.tolerance,
                    c.checked,
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            let failed = checks.iter().filter(|c| !c.passed()).count();
            if failed > 0 {
                bail!("{failed} gradient checks failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = serde_json::to_string(&format!("{e:#}")).unwrap_or_default();
            eprintln!("error command={} message={message}", cli.command.name());
            ExitCode::FAILURE
        }
    }
}
