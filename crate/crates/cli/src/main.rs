//! `evssl`: generate synthetic data, pre-train, embed, probe and inspect.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use evssl::config::{format_config, load_config, parse_config, RunConfig};
use evssl::eval::{embed_dataset, linear_probe, read_etab, write_etab, EmbedOutput};
use evssl::event::read_evt1;
use evssl::gradsuite::gradient_suite;
use evssl::losses::EventLoss;
use evssl::study::collapse_study;
use evssl::synth::gen_splits;
use evssl::trainer::pretrain;
use evssl::viewgen::{event_histogram, info_quantities, normalize_image, patch_distribution, patchify, EventImage};

#[derive(Parser)]
#[command(name = "evssl", version, about = "Self-supervised pre-training for event-camera streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (key = value lines under [section] headers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides [run] seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EventLossArg {
    Projection,
    Vanilla,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedArg {
    /// Pooled encoder features.
    Features,
    /// Event projection head output.
    EvtHead,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic moving-bar dataset: OUT/train and OUT/val, each
    /// with events/*.evt1, teachers/*.tvec and manifest.tsv.
    SynthGen {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train; writes ckpt-NNNNNN.evck, metrics.csv and the effective
    /// config (run.cfg) to the output directory.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Overrides [optim] steps.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, value_enum)]
        event_loss: Option<EventLossArg>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Embed a manifest with a checkpoint into an ETAB file.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to [data] manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "features")]
        output: EmbedArg,
        /// Destination ETAB file.
        #[arg(long)]
        table: PathBuf,
    },
    /// Linear probe: train on one ETAB, report top-1 on another.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Dump an event file's histogram and patch distribution.
    ///
    /// --dump-hist writes a binary PGM with one P5 page per polarity
    /// channel (positive first), counts scaled so the clip value is white.
    /// --dump-probs writes CSV `index,row,col,info,prob`.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        dump_hist: Option<PathBuf>,
        #[arg(long)]
        dump_probs: Option<PathBuf>,
    },
    /// Finite-difference check of every loss and the full model; prints the
    /// worst relative error per check and fails unless all are below 1e-5.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Pre-train twice, projection loss vs. plain event InfoNCE, and print
    /// collapse metrics and probe accuracy for both.
    CollapseStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<u64>,
    },
}

type AnyError = Box<dyn std::error::Error>;

fn load(common: &Common) -> Result<RunConfig, AnyError> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => parse_config("", Path::new("."))?,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.synth.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), AnyError> {
    match cli.command {
        Command::SynthGen { common } => {
            let cfg = load(&common)?;
            let out = common.out.unwrap_or_else(|| cfg.manifest.parent().and_then(Path::parent).unwrap_or(Path::new(".")).to_path_buf());
            let (train, val) = gen_splits(&cfg.synth, &out)?;
            eprintln!("wrote {} and {}", train.display(), val.display());
        }
        Command::Pretrain {
            common,
            steps,
            event_loss,
            resume,
        } => {
            let mut cfg = load(&common)?;
            if let Some(s) = steps {
                cfg.optim.steps = s;
            }
            if let Some(e) = event_loss {
                cfg.loss.event_loss = e.into();
            }
            let pc = cfg.pretrain_config()?;
            fs::create_dir_all(&pc.out_dir)?;
            // run.cfg must reload from any directory.
            let mut saved = cfg.clone();
            saved.manifest = std::path::absolute(&saved.manifest)?;
            saved.val_manifest = saved.val_manifest.map(std::path::absolute).transpose()?;
            saved.out_dir = std::path::absolute(&saved.out_dir)?;
            fs::write(pc.out_dir.join("run.cfg"), format_config(&saved))?;
            let every = (cfg.optim.steps / 20).max(1);
            let out = pretrain(&pc, resume.as_deref(), |m| {
                if m.step % every == 0 {
                    eprintln!("step {:>6}  l_total {:.5}  l_evt {:.5}  l_rgb {:.5}  l_kl {:.5}", m.step, m.l_total, m.l_evt, m.l_rgb, m.l_kl);
                }
            })?;
            eprintln!("checkpoint {}\nmetrics {}", out.checkpoint.display(), out.metrics.display());
        }
        Command::Embed {
            common,
            checkpoint,
            manifest,
            output,
            table,
        } => {
            let cfg = load(&common)?;
            let manifest = manifest.unwrap_or(cfg.manifest.clone());
            let which = match output {
                EmbedArg::Features => EmbedOutput::Features,
                EmbedArg::EvtHead => EmbedOutput::EventHead,
            };
            let tab = embed_dataset(&checkpoint, &manifest, &cfg.view, cfg.augment.out_width, cfg.augment.out_height, which)?;
            write_etab(&table, &tab)?;
            eprintln!("{} rows x {} dims -> {}", tab.n, tab.d, table.display());
        }
        Command::Probe { common, train, test } => {
            let cfg = load(&common)?;
            let acc = linear_probe(&read_etab(train)?, &read_etab(test)?, &cfg.probe)?;
            println!("top1 {acc:.6}");
        }
        Command::Inspect {
            common,
            events,
            dump_hist,
            dump_probs,
        } => {
            let cfg = load(&common)?;
            let stream = read_evt1(&events)?;
            let hist = event_histogram(&stream);
            eprintln!("{}x{} sensor, {} events, duration {} us", stream.width(), stream.height(), stream.len(), stream.duration());
            if let Some(p) = dump_hist {
                fs::write(p, pgm_pages(&hist, cfg.view.clip))?;
            }
            if let Some(p) = dump_probs {
                let img = normalize_image(&hist, cfg.view.clip)?;
                let patches = patchify(&img, cfg.view.patch_size)?;
                let info = info_quantities(&patches);
                let dist = patch_distribution(&info);
                let cols = (stream.width() as usize) / cfg.view.patch_size;
                let mut f = std::io::BufWriter::new(fs::File::create(p)?);
                writeln!(f, "index,row,col,info,prob")?;
                for (i, (d, q)) in info.iter().zip(&dist.probs).enumerate() {
                    writeln!(f, "{i},{},{},{d},{q}", i / cols, i % cols)?;
                }
                f.flush()?;
            }
        }
        Command::Gradcheck { seed, instances } => {
            let entries = gradient_suite(seed, instances)?;
            let mut ok = true;
            for e in &entries {
                let pass = e.max_rel_error < 1e-5;
                ok &= pass;
                println!(
                    "{:<18} max_rel_err {:.3e}  coords {:>7}  {}",
                    e.name,
                    e.max_rel_error,
                    e.coordinates,
                    if pass { "PASS" } else { "FAIL" }
                );
            }
            if !ok {
                return Err("gradient check failed".into());
            }
        }
        Command::CollapseStudy { common, steps } => {
            let mut cfg = load(&common)?;
            if let Some(s) = steps {
                cfg.optim.steps = s;
            }
            let out = cfg.out_dir.clone();
            let every = (cfg.optim.steps / 10).max(1);
            let report = collapse_study(&cfg, &out, |loss, m| {
                if m.step % every == 0 {
                    eprintln!("{loss:?} step {:>6}  l_total {:.5}", m.step, m.l_total);
                }
            })?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

impl From<EventLossArg> for EventLoss {
    fn from(a: EventLossArg) -> Self {
        match a {
            EventLossArg::Projection => EventLoss::Projection,
            EventLossArg::Vanilla => EventLoss::Vanilla,
        }
    }
}

/// Binary PGM, one page per channel.
fn pgm_pages(img: &EventImage, clip: u32) -> Vec<u8> {
    let (w, h) = (img.width as usize, img.height as usize);
    let mut out = Vec::new();
    for page in img.counts.chunks(w * h) {
        out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
        out.extend(page.iter().map(|&c| (c.min(clip) as u64 * 255 / clip.max(1) as u64) as u8));
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
