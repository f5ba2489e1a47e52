//! Latency harness: monotonic-clock timing, median of N iterations after
//! warmup discards, CSV output and log-log slope fits.
//!
//! Timing always runs inside a single-thread pool so scaling exponents
//! measure algorithmic cost, not core count.

use std::fmt::Write as _;
use std::time::Instant;

use edit_core::flops::flop_model;
use edit_core::mechanism::{run_mechanism, MechanismInputs};
use edit_core::weights::generate;
use edit_core::{AttentionConfig, Error, Result};

/// One benchmark measurement row.
#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub mechanism: String,
    pub height: usize,
    pub width: usize,
    pub n_image: usize,
    pub n_prompt: usize,
    pub dim: usize,
    pub heads: usize,
    pub wall_ms: f64,
    pub flops: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    pub iters: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl BenchOptions {
    pub fn validate(&self) -> Result<()> {
        if self.iters < 3 {
            return Err(Error::Config("bench needs at least 3 iterations".into()));
        }
        Ok(())
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times one configuration inside `pool` and returns its record.
pub fn run_config(
    cfg: &AttentionConfig,
    opts: &BenchOptions,
    pool: &rayon::ThreadPool,
) -> Result<BenchRecord> {
    opts.validate()?;
    cfg.validate()?;
    let store = generate(cfg, opts.seed)?;
    let inputs = MechanismInputs::seeded(cfg, opts.seed)?;
    let times = pool.install(|| -> Result<Vec<f64>> {
        for _ in 0..opts.warmup {
            std::hint::black_box(run_mechanism(cfg, &store, &inputs)?);
        }
        let mut times = Vec::with_capacity(opts.iters);
        for _ in 0..opts.iters {
            let t0 = Instant::now();
            std::hint::black_box(run_mechanism(cfg, &store, &inputs)?);
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        Ok(times)
    })?;
    let n_prompt = if cfg.mechanism.is_multimodal() {
        cfg.prompt_tokens
    } else {
        0
    };
    Ok(BenchRecord {
        mechanism: cfg.mechanism.id(),
        height: cfg.height,
        width: cfg.width,
        n_image: cfg.n_image(),
        n_prompt,
        dim: cfg.dim,
        heads: cfg.heads,
        wall_ms: median(times),
        flops: flop_model(cfg).total(),
        seed: opts.seed,
    })
}

/// Builds the single-thread pool used for all timing runs.
pub fn timing_pool() -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("single-thread timing pool")
}

/// Runs configurations sequentially (parallel sweeps would contaminate
/// the timings).
pub fn run_sweep(cfgs: &[AttentionConfig], opts: &BenchOptions) -> Result<Vec<BenchRecord>> {
    let pool = timing_pool();
    cfgs.iter().map(|cfg| run_config(cfg, opts, &pool)).collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for (x, y) in points {
        sx += x.ln();
        sy += y.ln();
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in points {
        num += (x.ln() - mx) * (y.ln() - my);
        den += (x.ln() - mx) * (x.ln() - mx);
    }
    num / den
}

/// Per-mechanism slope of wall time in the image-token count, for
/// mechanisms with at least two distinct sizes.
pub fn slopes_by_mechanism(records: &[BenchRecord]) -> Vec<(String, f64)> {
    let mut order: Vec<String> = Vec::new();
    for r in records {
        if !order.contains(&r.mechanism) {
            order.push(r.mechanism.clone());
        }
    }
    let mut out = Vec::new();
    for mech in order {
        let mut pts: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.mechanism == mech)
            .map(|r| (r.n_image as f64, r.wall_ms))
            .collect();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        pts.dedup_by(|a, b| a.0 == b.0);
        if pts.len() >= 2 {
            out.push((mech, loglog_slope(&pts)));
        }
    }
    out
}

pub const CSV_HEADER: &str = "mechanism,H,W,n_image,n_prompt,d,heads,wall_ms,flops,seed";

/// Stable-schema CSV: header then one row per record.
pub fn csv_string(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{:.6},{},{}",
            r.mechanism,
            r.height,
            r.width,
            r.n_image,
            r.n_prompt,
            r.dim,
            r.heads,
            r.wall_ms,
            r.flops,
            r.seed
        )
        .expect("writing to string");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use edit_core::Mechanism;

    #[test]
    fn smoke_one_by_one_grid_under_a_second() {
        let t0 = Instant::now();
        let cfgs: Vec<AttentionConfig> = [
            Mechanism::Sdpa,
            Mechanism::Edit,
            Mechanism::Hybrid,
            Mechanism::KvComp { factor: 2 },
        ]
        .into_iter()
        .map(|m| AttentionConfig::new(m, 64, 4, 1, 1, 16).unwrap())
        .collect();
        let records = run_sweep(
            &cfgs,
            &BenchOptions {
                iters: 3,
                warmup: 0,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(records.len(), 4);
        assert!(records.iter().all(|r| r.wall_ms > 0.0));
        assert!(t0.elapsed().as_secs_f64() < 1.0);
    }

    #[test]
    fn csv_schema_is_stable() {
        let rec = BenchRecord {
            mechanism: "edit".into(),
            height: 2,
            width: 3,
            n_image: 6,
            n_prompt: 0,
            dim: 8,
            heads: 2,
            wall_ms: 0.5,
            flops: 1234,
            seed: 42,
        };
        let csv = csv_string(&[rec]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "mechanism,H,W,n_image,n_prompt,d,heads,wall_ms,flops,seed"
        );
        assert_eq!(lines.next().unwrap(), "edit,2,3,6,0,8,2,0.500000,1234,42");
    }

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = [256.0, 1024.0, 4096.0]
            .iter()
            .map(|&n: &f64| (n, 3.0 * n.powf(1.8)))
            .collect();
        assert!((loglog_slope(&pts) - 1.8).abs() < 1e-9);
    }

    #[test]
    fn too_few_iterations_is_a_usage_error() {
        let opts = BenchOptions {
            iters: 2,
            warmup: 0,
            seed: 0,
        };
        assert!(opts.validate().is_err());
    }
}
