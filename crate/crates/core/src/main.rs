use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedmob_core::data::{
    apply_filters, collapse_duplicates, group_by_user, split_dataset_with, synth_generate_with_manifest,
    write_records, Format, Parser as CheckinParser, SynthConfig,
};
use fedmob_core::encoding::Vocab;
use fedmob_core::eval::alloc::TrackingAllocator;
use fedmob_core::eval::{evaluate_run_dir, report, run_ablation_suite, AblationConfig, ExperimentConfig};
use fedmob_core::Result;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser)]
#[command(name = "fedmob", version, about = "Federated next-location prediction")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic check-in corpus in the canonical record format.
    Synth {
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 120)]
        venues: usize,
        #[arg(long, default_value_t = 30)]
        days: i64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse, filter and split a raw check-in file.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        format: Format,
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline and write a run directory.
    Train {
        #[command(flatten)]
        exp: ExpArgs,
        /// Comma-separated ablation flags.
        #[arg(long, default_value = "")]
        ablation: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full model and every single-flag ablation into `<out>/<setting>`.
    Suite {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate a run directory on one split.
    Eval {
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Summarize run directories into a table, CSV and gnuplot script.
    Report {
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration.
    Config {
        #[command(flatten)]
        exp: ExpArgs,
    },
}

#[derive(Args)]
struct ExpArgs {
    /// `key = value` config file, applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `reference` (desk scale) or `full` (full-size shapes).
    #[arg(long, default_value = "reference")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    lk: Option<usize>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ExpArgs {
    fn build(&self) -> Result<ExperimentConfig> {
        let seed = self.seed.unwrap_or(0);
        let base = match self.preset.as_str() {
            "reference" => ExperimentConfig::reference(seed),
            "full" => ExperimentConfig {
                seed,
                ..ExperimentConfig::default()
            },
            other => {
                return Err(fedmob_core::Error::Config(format!("unknown preset {other:?}")));
            }
        };
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_text_over(&fs::read_to_string(p)?, base)?,
            None => base,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.rounds {
            cfg.fed.rounds = r;
        }
        if let Some(s) = self.sigma {
            cfg.privacy.sigma = s;
        }
        if let Some(c) = self.clip {
            cfg.privacy.clip_norm = c;
        }
        if let Some(l) = self.lk {
            cfg.llm.lk = l;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| fedmob_core::Error::Config(format!("expected KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_run(dir: &Path, r: &fedmob_core::eval::RunOutcome) {
    println!(
        "{:<28} acc@1 {:6.2}  acc@5 {:6.2}  acc@20 {:6.2}  mrr {:6.2}  m {}  ({:.1}s) -> {}",
        r.report.ablation,
        r.report.acc1,
        r.report.acc5,
        r.report.acc20,
        r.report.mrr,
        r.report.m,
        r.timing.wall_time_s,
        dir.display()
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth {
            users,
            venues,
            days,
            seed,
            out,
        } => {
            let (trajs, manifest) = synth_generate_with_manifest(&SynthConfig::new(users, venues, days, seed))?;
            fs::write(&out, write_records(trajs.iter().flat_map(|t| t.events.iter())))?;
            let mpath = out.with_extension("manifest.json");
            fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n")?;
            println!("{} check-ins -> {}", manifest.checkins, out.display());
        }
        Cmd::Ingest {
            input,
            format,
            exp,
            out,
        } => {
            let cfg = exp.build()?;
            let mut parser = CheckinParser::new(format, false);
            let mut trajs = group_by_user(parser.parse_file(&input)?);
            if cfg.data.collapse_secs > 0 {
                trajs
                    .iter_mut()
                    .for_each(|t| collapse_duplicates(t, cfg.data.collapse_secs));
            }
            let kept = apply_filters(trajs, &cfg.filter());
            let split = split_dataset_with(kept, cfg.seed, cfg.data.split)?;
            let vocab = Vocab::build(&split.train)?;
            fs::create_dir_all(&out)?;
            fs::write(
                out.join("split.json"),
                serde_json::to_string_pretty(&split.manifest(cfg.data.split, cfg.filter()))? + "\n",
            )?;
            fs::write(out.join("vocab.json"), vocab.to_json()?)?;
            let all = split.train.iter().chain(&split.valid).chain(&split.test);
            fs::write(out.join("checkins.tsv"), write_records(all.flat_map(|t| t.events.iter())))?;
            println!(
                "users train/valid/test {}/{}/{}, vocabulary {}, skipped lines {}",
                split.train.len(),
                split.valid.len(),
                split.test.len(),
                vocab.len(),
                parser.skipped
            );
        }
        Cmd::Train { exp, ablation, out } => {
            let mut cfg = exp.build()?;
            cfg.ablation = AblationConfig::parse_list(&ablation)?;
            let runs = run_ablation_suite(&cfg, &[cfg.ablation], Some(vec![out.clone()]))?;
            print_run(&out, &runs[0]);
        }
        Cmd::Suite { exp, out } => {
            let cfg = exp.build()?;
            let mut settings = vec![AblationConfig::default()];
            for name in AblationConfig::NAMES {
                settings.push(AblationConfig::parse_list(name)?);
            }
            let dirs: Vec<PathBuf> = settings.iter().map(|a| out.join(a.label())).collect();
            let runs = run_ablation_suite(&cfg, &settings, Some(dirs.clone()))?;
            for (d, r) in dirs.iter().zip(&runs) {
                print_run(d, r);
            }
        }
        Cmd::Eval { run, split } => {
            let (_, m) = evaluate_run_dir(&run, &split)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Cmd::Report { runs, out } => {
            let reports = report::collect_reports(&runs)?;
            print!("{}", report::summary_table(&reports));
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("runs.csv"), report::to_csv(&reports))?;
                let gp = report::write_gnuplot(&dir, &reports)?;
                println!("wrote {} and {}", dir.join("runs.csv").display(), gp.display());
            }
        }
        Cmd::Config { exp } => print!("{}", exp.build()?.to_text()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
