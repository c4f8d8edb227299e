//! Single-head cross-attention kernels.
//!
//! All softmax-based kernels reduce to [`biased_attention`]: scaled
//! dot-product logits, an optional constant added to a leading block of
//! key columns, a row softmax, and a weighted sum of value rows.

use rayon::prelude::*;

use super::bank::{PoolingSpec, ProjectedBank};
use super::pooling::pool_bank;
use crate::error::{AttnError, Result};
use crate::tensor::{matmul, matmul_transposed, softmax_row, TokenMatrix};

/// Additive constant of the shifted-ReLU feature map used by
/// [`linear_cross_attention`].
pub const LINEAR_FEATURE_EPS: f64 = 1e-6;

/// Segment count used by the local-windowed baseline unless overridden.
pub const DEFAULT_SEGMENTS: usize = 4;

fn check_qkv(op: &'static str, q: &TokenMatrix, k: &TokenMatrix, v: &TokenMatrix) -> Result<()> {
    if q.cols() != k.cols() || q.cols() == 0 {
        return Err(AttnError::Shape {
            op,
            left: q.shape(),
            right: k.shape(),
        });
    }
    if k.shape() != v.shape() {
        return Err(AttnError::Shape {
            op,
            left: k.shape(),
            right: v.shape(),
        });
    }
    if k.rows() == 0 {
        return Err(AttnError::EmptyMemory);
    }
    Ok(())
}

/// `softmax(Q K^T / sqrt(d) + B) V` where `B` adds `bias` to the first
/// `biased_cols` key columns of every row and zero elsewhere.
pub fn biased_attention(
    q: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
    biased_cols: usize,
    bias: f64,
) -> Result<TokenMatrix> {
    check_qkv("cross_attention", q, k, v)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut weights = matmul_transposed(q, k)?;
    let m = k.rows();
    let biased_cols = biased_cols.min(m);
    let bad = weights
        .data_mut()
        .par_chunks_mut(m)
        .enumerate()
        .filter_map(|(i, row)| {
            let (head, tail) = row.split_at_mut(biased_cols);
            head.iter_mut().for_each(|x| *x = *x * scale + bias);
            tail.iter_mut().for_each(|x| *x *= scale);
            (!softmax_row(row)).then_some(i)
        })
        .min();
    if let Some(row) = bad {
        return Err(AttnError::NonFinite {
            op: "cross_attention",
            row,
        });
    }
    matmul(&weights, v)
}

/// Exact scaled dot-product cross-attention `softmax(Q K^T / sqrt(d)) V`.
pub fn cross_attention(q: &TokenMatrix, k: &TokenMatrix, v: &TokenMatrix) -> Result<TokenMatrix> {
    biased_attention(q, k, v, 0, 0.0)
}

fn check_bank(op: &'static str, q: &TokenMatrix, bank: &ProjectedBank) -> Result<()> {
    if q.cols() != bank.dim() {
        return Err(AttnError::Shape {
            op,
            left: q.shape(),
            right: (bank.keys().len(), bank.dim()),
        });
    }
    Ok(())
}

/// Pooled keys `[K̃_s; K_p]`, pooled values `[Ṽ_s; V_p]`, and `ñ`.
fn pooled_operands(
    bank: &ProjectedBank,
    spec: PoolingSpec,
) -> Result<(TokenMatrix, TokenMatrix, usize)> {
    let keys = pool_bank(bank.keys(), spec)?;
    let values = pool_bank(bank.values(), spec)?;
    let coarse = keys.spatial_len();
    Ok((keys.flatten(), values.flatten(), coarse))
}

/// Exact attention over a projected bank, with keys `[K_s; K_p]`.
pub fn bank_cross_attention(q: &TokenMatrix, bank: &ProjectedBank) -> Result<TokenMatrix> {
    check_bank("bank_cross_attention", q, bank)?;
    cross_attention(q, &bank.keys().flatten(), &bank.values().flatten())
}

/// Efficient memory cross-attention over pooled spatial tokens.
///
/// Spatial keys and values are window-averaged per frame, pointer tokens
/// are kept, and `ln(l_w * l_h)` is added to every pooled-spatial logit.
/// The result equals exact attention over the replicated surrogate bank.
pub fn efficient_cross_attention(
    q: &TokenMatrix,
    bank: &ProjectedBank,
    spec: PoolingSpec,
) -> Result<TokenMatrix> {
    check_bank("efficient_cross_attention", q, bank)?;
    let (k, v, coarse) = pooled_operands(bank, spec)?;
    biased_attention(q, &k, &v, coarse, spec.balancing_log())
}

/// Pooled attention with `ln(l_w * l_h)` added to every entry of the pooled
/// spatial keys (not to the logits).
pub fn key_offset_cross_attention(
    q: &TokenMatrix,
    bank: &ProjectedBank,
    spec: PoolingSpec,
) -> Result<TokenMatrix> {
    check_bank("key_offset_cross_attention", q, bank)?;
    let (mut k, v, coarse) = pooled_operands(bank, spec)?;
    let offset = spec.balancing_log();
    let d = k.cols();
    k.data_mut()[..coarse * d]
        .iter_mut()
        .for_each(|x| *x += offset);
    cross_attention(q, &k, &v)
}

/// Pooled attention without any balancing term (average-pooling Linformer).
pub fn linformer_cross_attention(
    q: &TokenMatrix,
    bank: &ProjectedBank,
    spec: PoolingSpec,
) -> Result<TokenMatrix> {
    check_bank("linformer_cross_attention", q, bank)?;
    let (k, v, _) = pooled_operands(bank, spec)?;
    cross_attention(q, &k, &v)
}

/// Block-diagonal attention: query segment `i` attends only to key/value
/// segment `i`, with both sides split into `segments` contiguous blocks.
pub fn local_windowed_cross_attention(
    q: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
    segments: usize,
) -> Result<TokenMatrix> {
    check_qkv("local_windowed_cross_attention", q, k, v)?;
    if segments == 0 || !q.rows().is_multiple_of(segments) || !k.rows().is_multiple_of(segments) {
        return Err(AttnError::Segmentation {
            queries: q.rows(),
            keys: k.rows(),
            segments,
        });
    }
    let (qs, ks) = (q.rows() / segments, k.rows() / segments);
    let mut out = TokenMatrix::zeros(q.rows(), v.cols());
    let cols = v.cols();
    for s in 0..segments {
        let block = cross_attention(
            &q.row_block(s * qs, qs),
            &k.row_block(s * ks, ks),
            &v.row_block(s * ks, ks),
        )?;
        out.data_mut()[s * qs * cols..(s + 1) * qs * cols].copy_from_slice(block.data());
    }
    Ok(out)
}

/// Shifted-ReLU feature map `max(x, 0) + eps`.
#[inline]
pub fn linear_feature(x: f64) -> f64 {
    x.max(0.0) + LINEAR_FEATURE_EPS
}

/// Associativity-based linear attention
/// `diag(φ(Q) φ(K)^T 1)^-1 φ(Q) (φ(K)^T V)`; keys and values are reduced to
/// a `d x d` summary before any query is touched.
pub fn linear_cross_attention(
    q: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
) -> Result<TokenMatrix> {
    check_qkv("linear_cross_attention", q, k, v)?;
    let fq = q.map(linear_feature);
    let fk = k.map(linear_feature);
    let summary = matmul(&fk.transpose(), v)?;
    let key_sum = fk.column_sums();
    let mut out = matmul(&fq, &summary)?;
    for i in 0..out.rows() {
        let norm: f64 = fq.row(i).iter().zip(&key_sum).map(|(a, b)| a * b).sum();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(AttnError::DegenerateQuery { row: i });
        }
        out.row_mut(i).iter_mut().for_each(|x| *x /= norm);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::bank::{MemoryBank, SpatialGrid};
    use crate::attention::pooling::surrogate_bank;

    fn pseudo(rows: usize, cols: usize, seed: u64) -> TokenMatrix {
        let mut s = seed ^ 0x9E37_79B9_7F4A_7C15;
        TokenMatrix::from_fn(rows, cols, |_, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 20_001) as f64 / 10_000.0 - 1.0
        })
    }

    /// Triple-loop scaled dot-product attention.
    fn naive_attention(q: &TokenMatrix, k: &TokenMatrix, v: &TokenMatrix) -> TokenMatrix {
        let d = q.cols() as f64;
        let mut out = TokenMatrix::zeros(q.rows(), v.cols());
        for i in 0..q.rows() {
            let logits: Vec<f64> = (0..k.rows())
                .map(|j| {
                    (0..q.cols())
                        .map(|c| q.get(i, c) * k.get(j, c))
                        .sum::<f64>()
                        / d.sqrt()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..v.cols() {
                out.set(i, c, (0..k.rows()).map(|j| e[j] / z * v.get(j, c)).sum());
            }
        }
        out
    }

    fn random_bank(
        frames: usize,
        w: usize,
        h: usize,
        p: usize,
        d: usize,
        seed: u64,
    ) -> ProjectedBank {
        let half = |off: u64| {
            let grids = (0..frames)
                .map(|f| {
                    SpatialGrid::new(w, h, pseudo(w * h, d, seed + off + f as u64 * 31)).unwrap()
                })
                .collect();
            MemoryBank::new(grids, pseudo(p, d, seed + off + 977)).unwrap()
        };
        ProjectedBank::new(half(0), half(5000)).unwrap()
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = pseudo(4, 3, 1);
        let k = pseudo(1, 3, 2);
        let v = TokenMatrix::from_rows(&[vec![0.5, -2.0, 7.0]]).unwrap();
        let out = cross_attention(&q, &k, &v).unwrap();
        for row in out.iter_rows() {
            for (a, b) in row.iter().zip(v.row(0)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let q = pseudo(3, 2, 3);
        let k = TokenMatrix::from_fn(5, 2, |_, c| c as f64 + 0.3);
        let v = pseudo(5, 2, 4);
        let out = cross_attention(&q, &k, &v).unwrap();
        let mean = v.column_means();
        for row in out.iter_rows() {
            for (a, b) in row.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn exact_matches_triple_loop() {
        let q = TokenMatrix::from_rows(&[vec![0.3, -1.2], vec![0.9, 0.4]]).unwrap();
        let k =
            TokenMatrix::from_rows(&[vec![1.0, 0.5], vec![-0.7, 0.2], vec![0.1, -0.9]]).unwrap();
        let v =
            TokenMatrix::from_rows(&[vec![2.0, -1.0], vec![0.5, 0.25], vec![-3.0, 1.5]]).unwrap();
        let got = cross_attention(&q, &k, &v).unwrap();
        assert!(got.max_abs_diff(&naive_attention(&q, &k, &v)).unwrap() < 1e-12);

        let (q, k, v) = (pseudo(9, 13, 5), pseudo(21, 13, 6), pseudo(21, 13, 7));
        let got = cross_attention(&q, &k, &v).unwrap();
        assert!(got.max_abs_diff(&naive_attention(&q, &k, &v)).unwrap() < 1e-12);
    }

    #[test]
    fn exact_errors() {
        let q = pseudo(2, 3, 1);
        assert!(matches!(
            cross_attention(&q, &TokenMatrix::zeros(0, 3), &TokenMatrix::zeros(0, 3)),
            Err(AttnError::EmptyMemory)
        ));
        assert!(matches!(
            cross_attention(&q, &pseudo(2, 4, 1), &pseudo(2, 4, 1)),
            Err(AttnError::Shape { .. })
        ));
        assert!(matches!(
            cross_attention(&q, &pseudo(2, 3, 1), &pseudo(3, 3, 1)),
            Err(AttnError::Shape { .. })
        ));
        let mut bad = q.clone();
        bad.set(1, 0, f64::NAN);
        assert!(matches!(
            cross_attention(&bad, &pseudo(2, 3, 1), &pseudo(2, 3, 1)),
            Err(AttnError::NonFinite { row: 1, .. })
        ));
    }

    #[test]
    fn pooled_variants_reduce_to_exact_without_pooling() {
        let bank = random_bank(2, 2, 4, 3, 5, 11);
        let q = pseudo(6, 5, 12);
        let exact = bank_cross_attention(&q, &bank).unwrap();
        let id = PoolingSpec::IDENTITY;
        for out in [
            efficient_cross_attention(&q, &bank, id).unwrap(),
            key_offset_cross_attention(&q, &bank, id).unwrap(),
            linformer_cross_attention(&q, &bank, id).unwrap(),
        ] {
            assert!(out.max_abs_diff(&exact).unwrap() < 1e-12);
        }
    }

    #[test]
    fn efficient_equals_surrogate_attention() {
        for (spec, p) in [
            (PoolingSpec::square(2), 0),
            (PoolingSpec::new(2, 4), 3),
            (PoolingSpec::new(4, 1), 7),
        ] {
            let bank = random_bank(3, 4, 8, p, 6, 21);
            let q = pseudo(5, 6, 22);
            let eff = efficient_cross_attention(&q, &bank, spec).unwrap();
            let sk = surrogate_bank(bank.keys(), spec).unwrap().flatten();
            let sv = surrogate_bank(bank.values(), spec).unwrap().flatten();
            let sur = cross_attention(&q, &sk, &sv).unwrap();
            let err = crate::tensor::relative_frobenius_error(&eff, &sur).unwrap();
            assert!(err < 1e-12, "spec {spec} P={p}: {err}");
        }
    }

    #[test]
    fn linformer_drops_only_the_balancing_term() {
        let bank = random_bank(1, 4, 4, 0, 4, 31);
        let q = pseudo(3, 4, 32);
        let spec = PoolingSpec::square(2);
        let lin = linformer_cross_attention(&q, &bank, spec).unwrap();
        let eff = efficient_cross_attention(&q, &bank, spec).unwrap();
        assert!(lin.max_abs_diff(&eff).unwrap() < 1e-12);

        let bank = random_bank(1, 4, 4, 5, 4, 33);
        let lin = linformer_cross_attention(&q, &bank, spec).unwrap();
        let eff = efficient_cross_attention(&q, &bank, spec).unwrap();
        assert!(crate::tensor::relative_frobenius_error(&lin, &eff).unwrap() > 1e-8);
    }

    #[test]
    fn key_offset_matches_literal_formula() {
        let bank = random_bank(2, 2, 2, 2, 3, 41);
        let q = pseudo(4, 3, 42);
        let spec = PoolingSpec::square(2);
        let got = key_offset_cross_attention(&q, &bank, spec).unwrap();

        let c = 4f64.ln();
        let mut keys = Vec::new();
        let mut vals = Vec::new();
        for (kf, vf) in bank.keys().frames().iter().zip(bank.values().frames()) {
            let mean = |g: &SpatialGrid| -> Vec<f64> {
                (0..3)
                    .map(|ch| (0..4).map(|i| g.tokens().get(i, ch)).sum::<f64>() / 4.0)
                    .collect()
            };
            keys.push(mean(kf).into_iter().map(|x| x + c).collect::<Vec<_>>());
            vals.push(mean(vf));
        }
        for i in 0..2 {
            keys.push(bank.keys().pointers().row(i).to_vec());
            vals.push(bank.values().pointers().row(i).to_vec());
        }
        let k = TokenMatrix::from_rows(&keys).unwrap();
        let v = TokenMatrix::from_rows(&vals).unwrap();
        assert!(got.max_abs_diff(&naive_attention(&q, &k, &v)).unwrap() < 1e-12);
    }

    #[test]
    fn bank_kernels_check_dimension() {
        let bank = random_bank(1, 2, 2, 1, 4, 51);
        let q = pseudo(2, 3, 52);
        let spec = PoolingSpec::square(2);
        assert!(matches!(
            efficient_cross_attention(&q, &bank, spec),
            Err(AttnError::Shape { .. })
        ));
        assert!(matches!(
            linformer_cross_attention(&q, &bank, spec),
            Err(AttnError::Shape { .. })
        ));
        assert!(matches!(
            key_offset_cross_attention(&q, &bank, spec),
            Err(AttnError::Shape { .. })
        ));
        let q = pseudo(2, 4, 52);
        assert!(matches!(
            efficient_cross_attention(&q, &bank, PoolingSpec::new(3, 1)),
            Err(AttnError::PoolingSpec { .. })
        ));
    }

    #[test]
    fn local_windowed_segments() {
        let (q, k, v) = (pseudo(8, 4, 61), pseudo(12, 4, 62), pseudo(12, 4, 63));
        let one = local_windowed_cross_attention(&q, &k, &v, 1).unwrap();
        assert_eq!(one, cross_attention(&q, &k, &v).unwrap());

        let four = local_windowed_cross_attention(&q, &k, &v, 4).unwrap();
        for s in 0..4 {
            let block = naive_attention(
                &q.row_block(2 * s, 2),
                &k.row_block(3 * s, 3),
                &v.row_block(3 * s, 3),
            );
            assert!(four.row_block(2 * s, 2).max_abs_diff(&block).unwrap() < 1e-12);
        }

        let (kh, vh) = (pseudo(6, 4, 64), pseudo(6, 4, 65));
        let k2 = TokenMatrix::vstack(&[&kh, &kh]).unwrap();
        let v2 = TokenMatrix::vstack(&[&vh, &vh]).unwrap();
        let two = local_windowed_cross_attention(&q, &k2, &v2, 2).unwrap();
        assert!(
            two.max_abs_diff(&cross_attention(&q, &k2, &v2).unwrap())
                .unwrap()
                < 1e-12
        );

        assert!(matches!(
            local_windowed_cross_attention(&q, &k, &v, 5),
            Err(AttnError::Segmentation { segments: 5, .. })
        ));
        assert!(local_windowed_cross_attention(&q, &k, &v, 0).is_err());
    }

    fn naive_linear(q: &TokenMatrix, k: &TokenMatrix, v: &TokenMatrix) -> TokenMatrix {
        let phi = |x: f64| x.max(0.0) + 1e-6;
        TokenMatrix::from_fn(q.rows(), v.cols(), |i, c| {
            let mut num = 0.0;
            let mut den = 0.0;
            for j in 0..k.rows() {
                let s: f64 = (0..q.cols())
                    .map(|t| phi(q.get(i, t)) * phi(k.get(j, t)))
                    .sum();
                num += s * v.get(j, c);
                den += s;
            }
            num / den
        })
    }

    #[test]
    fn linear_attention_examples() {
        let q = pseudo(3, 2, 71);
        let k = pseudo(1, 2, 72);
        let v = TokenMatrix::from_rows(&[vec![3.0, -4.0]]).unwrap();
        let out = linear_cross_attention(&q, &k, &v).unwrap();
        for row in out.iter_rows() {
            assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] + 4.0).abs() < 1e-12);
        }

        let q = pseudo(2, 2, 73).map(f64::abs);
        let k = pseudo(3, 2, 74).map(f64::abs);
        let v = pseudo(3, 2, 75);
        let got = linear_cross_attention(&q, &k, &v).unwrap();
        assert!(got.max_abs_diff(&naive_linear(&q, &k, &v)).unwrap() < 1e-12);

        let (q, k, v) = (pseudo(6, 8, 76), pseudo(20, 8, 77), pseudo(20, 8, 78));
        let lin = linear_cross_attention(&q, &k, &v).unwrap();
        assert!(lin.max_abs_diff(&naive_linear(&q, &k, &v)).unwrap() < 1e-12);
        let exact = cross_attention(&q, &k, &v).unwrap();
        assert!(crate::tensor::relative_frobenius_error(&lin, &exact).unwrap() > 1e-6);
    }

    #[test]
    fn linear_attention_degenerate_normalizer() {
        let q = pseudo(2, 2, 81);
        let k = TokenMatrix::from_rows(&[vec![f64::INFINITY, 0.0], vec![0.0, 0.0]]).unwrap();
        let v = pseudo(2, 2, 82);
        assert!(matches!(
            linear_cross_attention(&q, &k, &v),
            Err(AttnError::DegenerateQuery { row: 0 })
        ));
    }
}
