use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use edit_bench::{bench, error_exit_code, flops_cmd, verify, weights_cmd};
use edit_core::{AttentionConfig, Error, Mechanism, Result};

/// Verification suites, latency scaling harness and analytic FLOP
/// reports for linear compressed / hybrid multimodal attention kernels.
#[derive(Parser)]
#[command(name = "edit-bench", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every oracle-equivalence suite and report per-suite max error.
    Verify {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Time mechanisms over a grid sweep; emits CSV and log-log slopes.
    Bench {
        #[command(flatten)]
        sel: Selection,
        /// Median of this many timed iterations.
        #[arg(long, default_value_t = 5)]
        iters: usize,
        /// Discarded warmup iterations.
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic multiply-accumulate counts for the same sweep.
    Flops {
        #[command(flatten)]
        sel: Selection,
        /// CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Weight-container utilities.
    Weights {
        #[command(subcommand)]
        cmd: WeightsCmd,
    },
}

#[derive(Args)]
struct Selection {
    /// Comma-separated mechanisms (sdpa, linear, sana, linfusion,
    /// kvcomp[:K], edit, joint, joint-decomposed, hybrid, hybrid-exact).
    #[arg(long, value_delimiter = ',', required = true)]
    mech: Vec<String>,
    /// Comma-separated grids, HxW (e.g. 16x16,64x64).
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<String>,
    /// Prompt token count for the multimodal mechanisms.
    #[arg(long, default_value_t = 16)]
    prompt_tokens: usize,
    /// Model dimension.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Attention heads.
    #[arg(long, default_value_t = 4)]
    heads: usize,
}

#[derive(Subcommand)]
enum WeightsCmd {
    /// Generate seeded weights for one mechanism.
    Gen {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        mech: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        /// Grid as HxW; sizes nothing but is recorded in the manifest
        /// validation config.
        #[arg(long, default_value = "64x64")]
        grid: String,
        #[arg(long, default_value_t = 16)]
        prompt_tokens: usize,
    },
    /// List the tensors inside a container.
    Inspect { file: PathBuf },
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("bad grid `{s}`, expected HxW")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("bad grid extent `{v}`")))
    };
    Ok((parse(h)?, parse(w)?))
}

fn configs(sel: &Selection) -> Result<Vec<AttentionConfig>> {
    let mechs: Vec<Mechanism> = sel
        .mech
        .iter()
        .map(|m| Mechanism::parse(m))
        .collect::<Result<_>>()?;
    let grids: Vec<(usize, usize)> = sel
        .grid
        .iter()
        .map(|g| parse_grid(g))
        .collect::<Result<_>>()?;
    let mut cfgs = Vec::new();
    for mech in &mechs {
        for &(h, w) in &grids {
            cfgs.push(AttentionConfig::new(
                *mech,
                sel.dim,
                sel.heads,
                h,
                w,
                sel.prompt_tokens,
            )?);
        }
    }
    Ok(cfgs)
}

fn write_file(path: &PathBuf, contents: &str) -> Result<()> {
    std::fs::write(path, contents)?;
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::Verify { seed, tolerance } => {
            let results = verify::run_all(seed)?;
            let (text, ok) = verify::report(&results, seed, tolerance);
            print!("{text}");
            Ok(if ok { 0 } else { 1 })
        }
        Cmd::Bench {
            sel,
            iters,
            warmup,
            seed,
            out,
        } => {
            let cfgs = configs(&sel)?;
            let opts = bench::BenchOptions {
                iters,
                warmup,
                seed,
            };
            opts.validate()?;
            let records = bench::run_sweep(&cfgs, &opts)?;
            let csv = bench::csv_string(&records);
            print!("{csv}");
            for (mech, slope) in bench::slopes_by_mechanism(&records) {
                println!("# loglog-slope {mech} {slope:.3}");
            }
            if let Some(path) = out {
                write_file(&path, &csv)?;
            }
            Ok(0)
        }
        Cmd::Flops { sel, out } => {
            let rows = flops_cmd::rows(&configs(&sel)?);
            print!("{}", flops_cmd::table(&rows));
            if let Some(path) = out {
                write_file(&path, &flops_cmd::csv_string(&rows))?;
            }
            Ok(0)
        }
        Cmd::Weights { cmd } => match cmd {
            WeightsCmd::Gen {
                seed,
                mech,
                out,
                dim,
                heads,
                grid,
                prompt_tokens,
            } => {
                let (h, w) = parse_grid(&grid)?;
                let cfg =
                    AttentionConfig::new(Mechanism::parse(&mech)?, dim, heads, h, w, prompt_tokens)?;
                print!("{}", weights_cmd::gen(&cfg, seed, &out)?);
                Ok(0)
            }
            WeightsCmd::Inspect { file } => {
                print!("{}", weights_cmd::inspect(&file)?);
                Ok(0)
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_exit_code(&e))
        }
    }
}
