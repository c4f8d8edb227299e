use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use memattn_core::analysis::{compare_variants_with, flop_count, time_median, ProblemShape};
use memattn_core::attention::{
    bank_cross_attention, efficient_cross_attention, linformer_cross_attention, surrogate_bank,
    AttentionVariant, PoolingSpec, ProjectedBank,
};
use memattn_core::synthetic::{
    derive_seed, gen_queries, gen_random_bank, gen_smooth_instance, gen_window_constant_bank,
    BankShape, SmoothnessSpec,
};
use memattn_core::tensor::relative_frobenius_error;
use memattn_core::{AttnError, TokenMatrix};

use crate::config::{ConfigError, RunConfig};
use crate::report::{write_rows, ApproxRow, BenchRow, CheckRow, FlopRow, Row};

pub const IDENTITY_TOL: f64 = 1e-10;
pub const EQUIV_TOL: f64 = 1e-12;

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Io {
        path: Option<PathBuf>,
        source: io::Error,
    },
    Kernel(AttnError),
    ChecksFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ChecksFailed(_) | CliError::Kernel(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => e.fmt(f),
            CliError::Io {
                path: Some(p),
                source,
            } => write!(f, "{}: {source}", p.display()),
            CliError::Io { path: None, source } => source.fmt(f),
            CliError::Kernel(e) => e.fmt(f),
            CliError::ChecksFailed(n) => write!(f, "{n} check(s) failed"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<AttnError> for CliError {
    fn from(e: AttnError) -> Self {
        match e {
            AttnError::Io(source) => CliError::Io { path: None, source },
            other => CliError::Kernel(other),
        }
    }
}

/// Report destination, opened before any work so a bad path fails fast.
pub struct Output {
    path: Option<PathBuf>,
    writer: Box<dyn Write>,
}

impl Output {
    pub fn open(config: &RunConfig) -> Result<Self, CliError> {
        let writer: Box<dyn Write> = match &config.out {
            Some(path) => Box::new(BufWriter::new(File::create(path).map_err(|source| {
                CliError::Io {
                    path: Some(path.clone()),
                    source,
                }
            })?)),
            None => Box::new(io::stdout()),
        };
        Ok(Self {
            path: config.out.clone(),
            writer,
        })
    }

    pub fn write<R: Row>(self, config: &RunConfig, rows: &[R]) -> Result<(), CliError> {
        let path = self.path;
        write_rows(rows, config.format, self.writer).map_err(|source| CliError::Io { path, source })
    }
}

fn smooth_spec(config: &RunConfig, bandwidth: u32, seed: u64) -> SmoothnessSpec {
    SmoothnessSpec::new(bandwidth, config.amplitude, seed)
}

/// The queries and smooth bank used by `approx` and `bench` for one cell.
pub fn smooth_instance(
    config: &RunConfig,
    bandwidth: u32,
    seed: u64,
) -> Result<(TokenMatrix, ProjectedBank), CliError> {
    Ok(gen_smooth_instance(
        config.l,
        config.d_q,
        config.bank_shape(),
        &smooth_spec(config, bandwidth, seed),
    )?)
}

pub fn cmd_approx(config: &RunConfig) -> Result<Vec<ApproxRow>, CliError> {
    let grid = config.variant_grid();
    let variants: Vec<AttentionVariant> = grid.iter().map(|(v, _)| *v).collect();
    let cells: Vec<(u32, u64)> = config
        .bandwidths
        .iter()
        .flat_map(|&b| config.seeds.iter().map(move |&s| (b, s)))
        .collect();
    // reports[cell][variant], reordered below to variant x pooling x cell.
    let mut reports = Vec::with_capacity(cells.len());
    for &(bandwidth, seed) in &cells {
        let (q, bank) = smooth_instance(config, bandwidth, seed)?;
        reports.push(compare_variants_with(
            &q,
            &bank,
            &variants,
            config.timing(),
        )?);
    }
    let mut rows = Vec::with_capacity(grid.len() * cells.len());
    for (vi, (variant, pooling)) in grid.iter().enumerate() {
        for (ci, &(bandwidth, seed)) in cells.iter().enumerate() {
            let r = &reports[ci][vi];
            rows.push(ApproxRow {
                variant: variant.name().into(),
                pooling: pooling.to_string(),
                bandwidth,
                seed,
                l: r.shape.l,
                n: r.shape.n,
                p: r.shape.p,
                d: r.shape.d,
                rel_frobenius: r.rel_frobenius,
                max_row_rel: r.max_row_rel,
                locality_c: r.locality_c,
                wall_ns_exact: r.wall_ns_exact,
                wall_ns_variant: r.wall_ns_variant,
            });
        }
    }
    Ok(rows)
}

pub fn cmd_bench(config: &RunConfig) -> Result<Vec<BenchRow>, CliError> {
    let timing = config.timing();
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let (q, bank) = smooth_instance(config, config.bandwidths[0], seed)?;
        let shape = ProblemShape::of(&q, &bank);
        let (_, exact_ns) = time_median(timing, || bank_cross_attention(&q, &bank))?;
        for (variant, pooling) in config.variant_grid() {
            let (_, ns) = time_median(timing, || variant.attend(&q, &bank))?;
            rows.push(BenchRow {
                variant: variant.name().into(),
                pooling: pooling.to_string(),
                seed,
                l: shape.l,
                n: shape.n,
                p: shape.p,
                d: shape.d,
                warmups: timing.warmups,
                runs: timing.runs,
                median_ns: ns,
                exact_median_ns: exact_ns,
                speedup_vs_exact: exact_ns as f64 / ns as f64,
            });
        }
    }
    Ok(rows)
}

pub fn cmd_flops(config: &RunConfig) -> Result<Vec<FlopRow>, CliError> {
    let shape = ProblemShape {
        l: config.l,
        n: config.spatial_len(),
        p: config.p,
        d: config.d,
    };
    let exact = flop_count(&AttentionVariant::Exact, shape)?.attention_terms();
    config
        .variant_grid()
        .into_iter()
        .map(|(variant, pooling)| {
            let f = flop_count(&variant, shape)?;
            Ok(FlopRow {
                variant: variant.name().into(),
                pooling: pooling.to_string(),
                l: shape.l,
                n: shape.n,
                p: shape.p,
                d: shape.d,
                logits: f.logits,
                softmax: f.softmax,
                weighted_sum: f.weighted_sum,
                pooling_ops: f.pooling,
                other: f.other,
                attention_terms: f.attention_terms(),
                total: f.total(),
                attention_ratio: exact as f64 / f.attention_terms() as f64,
            })
        })
        .collect()
}

/// Per-check outcome of `verify`, in the order the checks ran.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckSummary {
    pub check: &'static str,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub failures: usize,
}

impl CheckSummary {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl fmt::Display for CheckSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} ({} cases, worst {:.3e}, tolerance {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.check,
            self.cases,
            self.worst,
            self.tolerance
        )
    }
}

pub const CHECKS: [&str; 5] = [
    "surrogate-identity",
    "degenerate-pooling",
    "p0-shift",
    "window-constant",
    "convexity",
];

struct Recorder {
    rows: Vec<CheckRow>,
}

impl Recorder {
    fn push(&mut self, check: &str, seed: u64, case: String, error: f64, tolerance: f64) {
        self.rows.push(CheckRow {
            check: check.into(),
            seed,
            case,
            error,
            tolerance,
            pass: error <= tolerance,
        });
    }
}

/// How far `out` strays outside the per-column range of `values`.
fn convexity_violation(out: &TokenMatrix, values: &TokenMatrix) -> f64 {
    let lo: Vec<f64> = (0..values.cols())
        .map(|c| {
            values
                .iter_rows()
                .map(|r| r[c])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let hi: Vec<f64> = (0..values.cols())
        .map(|c| {
            values
                .iter_rows()
                .map(|r| r[c])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    out.iter_rows()
        .flat_map(|r| {
            r.iter()
                .enumerate()
                .map(|(c, &x)| (lo[c] - x).max(x - hi[c]).max(0.0))
        })
        .fold(0.0, f64::max)
}

/// Runs the invariant suite on seeded random instances and returns the
/// per-case rows plus one summary per check.
pub fn cmd_verify(config: &RunConfig) -> Result<(Vec<CheckRow>, Vec<CheckSummary>), CliError> {
    let mut rec = Recorder { rows: Vec::new() };
    let shape = config.bank_shape();
    let no_pointers = BankShape {
        pointers: 0,
        ..shape
    };
    for &seed in &config.seeds {
        let q = gen_queries(config.l, config.d_q, config.d, derive_seed(seed, 0x51))?;
        let bank = gen_random_bank(shape, seed)?;
        let exact = bank_cross_attention(&q, &bank)?;

        for &pool in &config.pooling {
            let eff = efficient_cross_attention(&q, &bank, pool)?;
            let sur = ProjectedBank::new(
                surrogate_bank(bank.keys(), pool)?,
                surrogate_bank(bank.values(), pool)?,
            )?;
            let reference = bank_cross_attention(&q, &sur)?;
            rec.push(
                "surrogate-identity",
                seed,
                pool.to_string(),
                relative_frobenius_error(&eff, &reference)?,
                IDENTITY_TOL,
            );
        }

        for name in ["efficient", "key-offset", "linformer"] {
            let v = AttentionVariant::from_name(name, PoolingSpec::IDENTITY, config.segments)
                .expect("known name");
            let err = relative_frobenius_error(&v.attend(&q, &bank)?, &exact)?;
            rec.push("degenerate-pooling", seed, name.into(), err, EQUIV_TOL);
        }

        let bank0 = gen_random_bank(no_pointers, derive_seed(seed, 0x30))?;
        for &pool in &config.pooling {
            let a = efficient_cross_attention(&q, &bank0, pool)?;
            let b = linformer_cross_attention(&q, &bank0, pool)?;
            rec.push(
                "p0-shift",
                seed,
                pool.to_string(),
                relative_frobenius_error(&a, &b)?,
                EQUIV_TOL,
            );
        }

        for &pool in &config.pooling {
            let wc = gen_window_constant_bank(shape, pool, derive_seed(seed, 0x43))?;
            let err = relative_frobenius_error(
                &efficient_cross_attention(&q, &wc, pool)?,
                &bank_cross_attention(&q, &wc)?,
            )?;
            rec.push("window-constant", seed, pool.to_string(), err, EQUIV_TOL);
        }

        let values = bank.values().flatten();
        let scale = values
            .data()
            .iter()
            .fold(0.0f64, |m, x| m.max(x.abs()))
            .max(1.0);
        let keys = bank.keys().len();
        let mut convex = vec![AttentionVariant::Exact, AttentionVariant::Linear];
        if config.l.is_multiple_of(config.segments) && keys % config.segments == 0 {
            convex.push(AttentionVariant::LocalWindowed {
                segments: config.segments,
            });
        }
        for &pool in &config.pooling {
            convex.push(AttentionVariant::EfficientRebalanced { pooling: pool });
            convex.push(AttentionVariant::KeyOffset { pooling: pool });
            convex.push(AttentionVariant::Linformer { pooling: pool });
        }
        for v in convex {
            let out = v.attend(&q, &bank)?;
            rec.push(
                "convexity",
                seed,
                v.to_string(),
                convexity_violation(&out, &values),
                EQUIV_TOL * scale,
            );
        }
    }

    let summaries = CHECKS
        .iter()
        .map(|&check| {
            let rows: Vec<&CheckRow> = rec.rows.iter().filter(|r| r.check == check).collect();
            CheckSummary {
                check,
                cases: rows.len(),
                worst: rows.iter().map(|r| r.error).fold(0.0, f64::max),
                tolerance: rows.iter().map(|r| r.tolerance).fold(0.0, f64::max),
                failures: rows.iter().filter(|r| !r.pass).count(),
            }
        })
        .collect();
    Ok((rec.rows, summaries))
}

/// Prints one line per check and writes the case rows if `--out` is set.
pub fn run_verify(config: &RunConfig) -> Result<(), CliError> {
    let output = config
        .out
        .as_ref()
        .map(|_| Output::open(config))
        .transpose()?;
    let (rows, summaries) = cmd_verify(config)?;
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    for s in &summaries {
        writeln!(lock, "{s}").map_err(|source| CliError::Io { path: None, source })?;
    }
    drop(lock);
    if let Some(output) = output {
        output.write(config, &rows)?;
    }
    match summaries.iter().filter(|s| !s.passed()).count() {
        0 => Ok(()),
        n => Err(CliError::ChecksFailed(n)),
    }
}
