//! Approximation-error reports against exact attention, and an analytic
//! operation-count model of every variant.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{bank_cross_attention, AttentionVariant, PoolingSpec, ProjectedBank};
use crate::error::{AttnError, Result};
use crate::synthetic::measure_locality;
use crate::tensor::{relative_frobenius_error, TokenMatrix};

/// Problem size: `l` queries, `n` spatial and `p` pointer memory tokens,
/// attention width `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemShape {
    pub l: usize,
    pub n: usize,
    pub p: usize,
    pub d: usize,
}

impl ProblemShape {
    pub fn of(q: &TokenMatrix, bank: &ProjectedBank) -> Self {
        Self {
            l: q.rows(),
            n: bank.spatial_len(),
            p: bank.pointer_len(),
            d: bank.dim(),
        }
    }
}

/// Warm-up and measured repetitions for wall-clock timing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingPolicy {
    pub warmups: usize,
    pub runs: usize,
}

impl TimingPolicy {
    pub const DEFAULT: TimingPolicy = TimingPolicy {
        warmups: 2,
        runs: 5,
    };
    /// Compute once, record no timings.
    pub const NONE: TimingPolicy = TimingPolicy {
        warmups: 0,
        runs: 0,
    };
}

impl Default for TimingPolicy {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Runs `f` under `policy` and returns its last output with the median
/// wall time in nanoseconds (0 when `policy.runs == 0`).
pub fn time_median<T>(policy: TimingPolicy, mut f: impl FnMut() -> Result<T>) -> Result<(T, u64)> {
    for _ in 0..policy.warmups {
        f()?;
    }
    if policy.runs == 0 {
        return Ok((f()?, 0));
    }
    let mut samples = Vec::with_capacity(policy.runs);
    let mut last = None;
    for _ in 0..policy.runs {
        let start = Instant::now();
        let out = f()?;
        samples.push((start.elapsed().as_nanos() as u64).max(1));
        last = Some(out);
    }
    samples.sort_unstable();
    Ok((last.expect("runs > 0"), samples[samples.len() / 2]))
}

/// One exact-vs-variant comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxReport {
    pub variant: AttentionVariant,
    pub shape: ProblemShape,
    pub pooling: Option<PoolingSpec>,
    /// `||variant - exact||_F / ||exact||_F`.
    pub rel_frobenius: f64,
    /// Largest per-row relative L2 error.
    pub max_row_rel: f64,
    /// Largest raster locality constant over the key frames (NaN when the
    /// frames hold a single token).
    pub locality_c: f64,
    pub wall_ns_exact: u64,
    pub wall_ns_variant: u64,
}

/// `max_i ||approx_i - exact_i|| / ||exact_i||`; rows where both are zero
/// count as 0.
pub fn max_row_relative_error(approx: &TokenMatrix, exact: &TokenMatrix) -> Result<f64> {
    if approx.shape() != exact.shape() {
        return Err(AttnError::Shape {
            op: "max_row_relative_error",
            left: approx.shape(),
            right: exact.shape(),
        });
    }
    Ok(approx
        .iter_rows()
        .zip(exact.iter_rows())
        .map(|(a, e)| {
            let diff: f64 = a.iter().zip(e).map(|(x, y)| (x - y) * (x - y)).sum();
            let base: f64 = e.iter().map(|y| y * y).sum();
            if diff == 0.0 {
                0.0
            } else {
                (diff / base).sqrt()
            }
        })
        .fold(0.0, f64::max))
}

/// Largest raster locality constant among the key frames of `bank`.
pub fn bank_locality(bank: &ProjectedBank) -> f64 {
    bank.keys()
        .frames()
        .iter()
        .map(|f| measure_locality(f).unwrap_or(f64::NAN))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Compares each variant with exact attention, timing with the default
/// policy (2 warm-ups, median of 5).
pub fn compare_variants(
    q: &TokenMatrix,
    bank: &ProjectedBank,
    variants: &[AttentionVariant],
) -> Result<Vec<ApproxReport>> {
    compare_variants_with(q, bank, variants, TimingPolicy::DEFAULT)
}

/// [`compare_variants`] with an explicit timing policy. The exact kernel
/// runs once per policy regardless of how many variants are compared.
pub fn compare_variants_with(
    q: &TokenMatrix,
    bank: &ProjectedBank,
    variants: &[AttentionVariant],
    timing: TimingPolicy,
) -> Result<Vec<ApproxReport>> {
    let (exact, wall_ns_exact) = time_median(timing, || bank_cross_attention(q, bank))?;
    let shape = ProblemShape::of(q, bank);
    let locality_c = bank_locality(bank);
    variants
        .iter()
        .map(|variant| {
            let (out, wall_ns_variant) = time_median(timing, || variant.attend(q, bank))?;
            Ok(ApproxReport {
                variant: *variant,
                shape,
                pooling: variant.pooling(),
                rel_frobenius: relative_frobenius_error(&out, &exact)?,
                max_row_rel: max_row_relative_error(&out, &exact)?,
                locality_c,
                wall_ns_exact,
                wall_ns_variant,
            })
        })
        .collect()
}

/// Operation counts of one kernel invocation. Multiplies and adds count
/// separately; softmax costs three operations per logit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    /// `Q K^T`: one multiply and one add per query, key and channel.
    pub logits: u64,
    /// Max subtraction, exponential and division per logit.
    pub softmax: u64,
    /// Weights times values: one multiply and one add per weight and channel.
    pub weighted_sum: u64,
    /// Window averaging of spatial tokens, `n * d`.
    pub pooling: u64,
    /// Feature maps and normalizers of linear attention.
    pub other: u64,
}

impl FlopCount {
    /// Terms that scale with the number of attended tokens.
    pub fn attention_terms(&self) -> u64 {
        self.logits + self.softmax + self.weighted_sum
    }

    pub fn total(&self) -> u64 {
        self.attention_terms() + self.pooling + self.other
    }

    fn dense(l: u64, m: u64, d: u64) -> Self {
        Self {
            logits: 2 * l * m * d,
            softmax: 3 * l * m,
            weighted_sum: 2 * l * m * d,
            ..Self::default()
        }
    }
}

/// Closed-form operation count of `variant` at `shape`.
///
/// Exact attention over `m = n + P` keys costs `4 L m d + 3 L m`. Pooled
/// variants replace `n` by `n / (l_w l_h)` and add `n d` for pooling.
pub fn flop_count(variant: &AttentionVariant, shape: ProblemShape) -> Result<FlopCount> {
    let ProblemShape { l, n, p, d } = shape;
    let (lu, du) = (l as u64, d as u64);
    let m = (n + p) as u64;
    Ok(match *variant {
        AttentionVariant::Exact => FlopCount::dense(lu, m, du),
        AttentionVariant::EfficientRebalanced { pooling }
        | AttentionVariant::KeyOffset { pooling }
        | AttentionVariant::Linformer { pooling } => {
            let window = pooling.window();
            if window == 0 || n % window != 0 {
                return Err(AttnError::PoolingTokens {
                    n,
                    l_w: pooling.l_w,
                    l_h: pooling.l_h,
                });
            }
            let coarse = (n / window + p) as u64;
            FlopCount {
                pooling: (n * d) as u64,
                ..FlopCount::dense(lu, coarse, du)
            }
        }
        AttentionVariant::LocalWindowed { segments } => {
            if segments == 0 || l % segments != 0 || (n + p) % segments != 0 {
                return Err(AttnError::Segmentation {
                    queries: l,
                    keys: n + p,
                    segments,
                });
            }
            let s = segments as u64;
            FlopCount::dense(lu / s, m / s, du).times(s)
        }
        AttentionVariant::Linear => FlopCount {
            logits: 0,
            softmax: 0,
            // phi(K)^T V, then phi(Q) times the d x d summary.
            weighted_sum: 2 * m * du * du + 2 * lu * du * du,
            pooling: 0,
            // Feature maps (max + add), key sums, normalizers, division.
            other: 2 * (lu + m) * du + m * du + 2 * lu * du + lu * du,
        },
    })
}

impl FlopCount {
    fn times(self, k: u64) -> Self {
        Self {
            logits: self.logits * k,
            softmax: self.softmax * k,
            weighted_sum: self.weighted_sum * k,
            pooling: self.pooling * k,
            other: self.other * k,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{gen_smooth_bank, gen_uniform, BankShape, SmoothnessSpec};

    fn instance() -> (TokenMatrix, ProjectedBank) {
        let shape = BankShape {
            frames: 2,
            w: 8,
            h: 8,
            pointers: 4,
            d: 16,
        };
        let bank = gen_smooth_bank(shape, &SmoothnessSpec::new(2, 1.0, 3)).unwrap();
        (gen_uniform(12, 16, 4), bank)
    }

    #[test]
    fn exact_flops_by_hand() {
        let f = flop_count(
            &AttentionVariant::Exact,
            ProblemShape {
                l: 1,
                n: 1,
                p: 0,
                d: 1,
            },
        )
        .unwrap();
        assert_eq!(f.total(), 7);
    }

    #[test]
    fn pooled_flops_quarter_the_attention_terms() {
        let shape = ProblemShape {
            l: 64,
            n: 1024,
            p: 0,
            d: 32,
        };
        let exact = flop_count(&AttentionVariant::Exact, shape).unwrap();
        let pooled = flop_count(
            &AttentionVariant::EfficientRebalanced {
                pooling: PoolingSpec::square(2),
            },
            shape,
        )
        .unwrap();
        assert_eq!(exact.attention_terms(), 4 * pooled.attention_terms());
        assert_eq!(pooled.pooling, 1024 * 32);
        assert_eq!(pooled.total(), pooled.attention_terms() + 1024 * 32);
    }

    #[test]
    fn flop_errors() {
        let shape = ProblemShape {
            l: 6,
            n: 10,
            p: 2,
            d: 4,
        };
        let pooled = AttentionVariant::Linformer {
            pooling: PoolingSpec::new(2, 2),
        };
        assert!(matches!(
            flop_count(&pooled, shape),
            Err(AttnError::PoolingTokens { n: 10, .. })
        ));
        let lw = AttentionVariant::LocalWindowed { segments: 4 };
        assert!(flop_count(&lw, shape).is_err());
        let lw = AttentionVariant::LocalWindowed { segments: 3 };
        let f = flop_count(&lw, shape).unwrap();
        let exact = flop_count(&AttentionVariant::Exact, shape).unwrap();
        assert_eq!(f.attention_terms() * 3, exact.attention_terms());
    }

    #[test]
    fn exact_self_comparison_is_zero() {
        let (q, bank) = instance();
        let r = compare_variants_with(&q, &bank, &[AttentionVariant::Exact], TimingPolicy::NONE)
            .unwrap();
        assert_eq!(r[0].rel_frobenius, 0.0);
        assert_eq!(r[0].max_row_rel, 0.0);
        assert_eq!(r[0].wall_ns_exact, 0);
        assert_eq!(
            r[0].shape,
            ProblemShape {
                l: 12,
                n: 128,
                p: 4,
                d: 16
            }
        );
        assert!(r[0].locality_c > 0.0);
    }

    #[test]
    fn unpooled_variants_are_within_rounding() {
        let (q, bank) = instance();
        let id = PoolingSpec::IDENTITY;
        let variants = [
            AttentionVariant::EfficientRebalanced { pooling: id },
            AttentionVariant::KeyOffset { pooling: id },
            AttentionVariant::Linformer { pooling: id },
        ];
        for r in compare_variants(&q, &bank, &variants).unwrap() {
            assert!(r.rel_frobenius <= 1e-12, "{r:?}");
            assert!(r.wall_ns_exact > 0 && r.wall_ns_variant > 0);
            assert_eq!(r.pooling, Some(id));
        }
    }

    #[test]
    fn error_fields_are_deterministic() {
        let (q, bank) = instance();
        let v = [
            AttentionVariant::EfficientRebalanced {
                pooling: PoolingSpec::square(2),
            },
            AttentionVariant::Linear,
        ];
        let a = compare_variants(&q, &bank, &v).unwrap();
        let b = compare_variants(&q, &bank, &v).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.rel_frobenius.to_bits(), y.rel_frobenius.to_bits());
            assert_eq!(x.max_row_rel.to_bits(), y.max_row_rel.to_bits());
            assert_eq!(x.locality_c.to_bits(), y.locality_c.to_bits());
        }
        assert!(a[0].max_row_rel >= a[0].rel_frobenius * 0.0);
    }

    #[test]
    fn median_of_runs() {
        let mut calls = 0;
        let (v, ns) = time_median(
            TimingPolicy {
                warmups: 2,
                runs: 3,
            },
            || {
                calls += 1;
                Ok(calls)
            },
        )
        .unwrap();
        assert_eq!(calls, 5);
        assert_eq!(v, 5);
        assert!(ns > 0);
    }
}
