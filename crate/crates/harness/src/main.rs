use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use metarhc::exec::with_workers;
use metarhc::Execution;
use metarhc_harness::config::{self, RunConfig};
use metarhc_harness::plotdata::{plotdata, write_points, PlotKind};
use metarhc_harness::run::{read_manifest, run_meta, write_run, RunOptions};
use metarhc_harness::sweep::{sweep, Axis, SweepSpec};
use metarhc_harness::validate::validate;
use metarhc_harness::Experiment;

#[derive(Parser)]
#[command(name = "metarhc", version, about = "Meta-learning receding-horizon control experiments")]
struct Cli {
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    verbosity: log::LevelFilter,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: desk or scalar.
    #[arg(long)]
    preset: Option<String>,
    /// Override a config entry, e.g. `--flag episode.T=512`.
    #[arg(long = "flag", value_name = "KEY=VALUE")]
    flags: Vec<String>,
    /// Run seeds: `0,3,7` or `0..10`.
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    workers: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(p), _) => config::load_file(p, &self.flags)?,
            (None, Some(name)) => config::load_str(config::preset(name)?, &self.flags)?,
            (None, None) => config::load_str(config::DESK, &self.flags)?,
        };
        if let Some(s) = &self.seeds {
            cfg.run.seeds = s.clone();
        }
        if let Some(w) = self.workers {
            cfg.run.workers = w;
        }
        cfg.check()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Meta-run of N episodes per seed.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Continue from the meta state in a previous manifest.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Cross product of axis values and seeds, with log-log slopes.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        axis: Axis,
        /// Ascending axis values, comma separated.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
    /// Check sampled plants and print the derived constants.
    Validate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 16)]
        samples: usize,
    },
    /// Emit an (x, y, stderr) table from result files.
    Plotdata {
        /// A run or sweep output directory.
        #[arg(long)]
        input: PathBuf,
        /// regret-vs-T, regret-vs-N, coverage or traces.
        #[arg(long)]
        kind: PlotKind,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("{e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("{e}"))?;
        if a >= b {
            return Err(format!("empty seed range {s}"));
        }
        return Ok((a..b).collect());
    }
    s.split(',').map(|x| x.trim().parse::<u64>().map_err(|e| format!("{x}: {e}"))).collect()
}

fn run_cmd(cfg: RunConfig, out: &Path, resume: Option<&Path>) -> anyhow::Result<()> {
    let mut cfg = cfg;
    let resume = match resume {
        Some(p) => Some(read_manifest(p)?.meta.restore()?),
        None => None,
    };
    let seeds = cfg.run.seeds.clone();
    if seeds.len() > 1 && cfg.run.workers > 1 {
        cfg.control.execution = config::ExecutionMode::Sequential;
    }
    let exp = Experiment::new(&cfg)?;
    let flat = seeds.len() == 1;
    let results = with_workers(cfg.run.workers, || {
        Execution::Parallel.map(&seeds, |&seed| -> anyhow::Result<()> {
            let start = Instant::now();
            let opts = RunOptions { resume: resume.clone(), ..RunOptions::default() };
            let res = run_meta(&exp, seed, opts).with_context(|| format!("run seed {seed}"))?;
            let dir = if flat { out.to_path_buf() } else { out.join(format!("seed_{seed}")) };
            write_run(&dir, &exp, &res, Some(start.elapsed()))?;
            let a = res.aggregates();
            log::info!(
                "seed {seed}: {} episodes, mean regret {:.4}, mean E {:.3}, coverage {}/{}, PE {}/{}",
                a.episodes,
                a.mean_regret,
                a.mean_e_theta,
                a.coverage_episodes,
                a.episodes,
                a.pe_episodes,
                a.episodes
            );
            Ok(())
        })
    });
    let failed: Vec<_> = results.into_iter().filter_map(Result::err).collect();
    if let Some(e) = failed.into_iter().next() {
        return Err(e);
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.verbosity).init();
    match cli.cmd {
        Command::Run { cfg, out, resume } => run_cmd(cfg.load()?, &out, resume.as_deref()),
        Command::Sweep { cfg, axis, values, out } => {
            let base = cfg.load()?;
            if values.is_empty() {
                bail!("--values is required");
            }
            let spec = SweepSpec { axis, values, seeds: base.run.seeds.clone(), workers: base.run.workers };
            let res = sweep(&base, &spec, Some(&out))?;
            let show = |s: Option<f64>| s.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
            println!("slope vs {axis}: regret {}  violation {}  E_theta {}", show(res.slopes.regret), show(res.slopes.violation), show(res.slopes.e_theta));
            Ok(())
        }
        Command::Validate { cfg, samples } => {
            let cfg = cfg.load()?;
            let seed = cfg.run.seeds[0];
            print!("{}", validate(&cfg, samples, seed));
            Ok(())
        }
        Command::Plotdata { input, kind, out } => {
            let points = plotdata(&input, kind)?;
            match out {
                Some(p) => write_points(std::fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?, &points),
                None => write_points(std::io::stdout().lock(), &points),
            }
        }
    }
}
