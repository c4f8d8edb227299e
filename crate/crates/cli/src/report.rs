//! Report rows and their CSV/JSON encodings.

use std::io::Write;

use serde::Serialize;

use crate::config::Format;

/// A flat report row with a fixed column order.
pub trait Row: Serialize {
    const HEADERS: &'static [&'static str];
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub check: String,
    pub seed: u64,
    pub case: String,
    pub error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Row for CheckRow {
    const HEADERS: &'static [&'static str] =
        &["check", "seed", "case", "error", "tolerance", "pass"];
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApproxRow {
    pub variant: String,
    pub pooling: String,
    pub bandwidth: u32,
    pub seed: u64,
    #[serde(rename = "L")]
    pub l: usize,
    pub n: usize,
    #[serde(rename = "P")]
    pub p: usize,
    pub d: usize,
    pub rel_frobenius: f64,
    pub max_row_rel: f64,
    pub locality_c: f64,
    pub wall_ns_exact: u64,
    pub wall_ns_variant: u64,
}

impl Row for ApproxRow {
    const HEADERS: &'static [&'static str] = &[
        "variant",
        "pooling",
        "bandwidth",
        "seed",
        "L",
        "n",
        "P",
        "d",
        "rel_frobenius",
        "max_row_rel",
        "locality_c",
        "wall_ns_exact",
        "wall_ns_variant",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub variant: String,
    pub pooling: String,
    pub seed: u64,
    #[serde(rename = "L")]
    pub l: usize,
    pub n: usize,
    #[serde(rename = "P")]
    pub p: usize,
    pub d: usize,
    pub warmups: usize,
    pub runs: usize,
    pub median_ns: u64,
    pub exact_median_ns: u64,
    pub speedup_vs_exact: f64,
}

impl Row for BenchRow {
    const HEADERS: &'static [&'static str] = &[
        "variant",
        "pooling",
        "seed",
        "L",
        "n",
        "P",
        "d",
        "warmups",
        "runs",
        "median_ns",
        "exact_median_ns",
        "speedup_vs_exact",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopRow {
    pub variant: String,
    pub pooling: String,
    #[serde(rename = "L")]
    pub l: usize,
    pub n: usize,
    #[serde(rename = "P")]
    pub p: usize,
    pub d: usize,
    pub logits: u64,
    pub softmax: u64,
    pub weighted_sum: u64,
    pub pooling_ops: u64,
    pub other: u64,
    pub attention_terms: u64,
    pub total: u64,
    /// Exact attention terms divided by this variant's.
    pub attention_ratio: f64,
}

impl Row for FlopRow {
    const HEADERS: &'static [&'static str] = &[
        "variant",
        "pooling",
        "L",
        "n",
        "P",
        "d",
        "logits",
        "softmax",
        "weighted_sum",
        "pooling_ops",
        "other",
        "attention_terms",
        "total",
        "attention_ratio",
    ];
}

/// Writes `rows` with an explicit header, so an empty report still has one.
pub fn write_rows<R: Row, W: Write>(rows: &[R], format: Format, mut out: W) -> std::io::Result<()> {
    match format {
        Format::Csv => {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(&mut out);
            w.write_record(R::HEADERS)?;
            for row in rows {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, rows)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()
}
