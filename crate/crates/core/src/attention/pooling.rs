//! Window-average token pooling and its replicated-surrogate inverse.

use super::bank::{MemoryBank, PoolingSpec, SpatialGrid};
use crate::error::Result;
use crate::tensor::TokenMatrix;

/// Averages each `l_w x l_h` window of `grid` into one coarse token.
///
/// Coarse token `(i, j)` is the mean of fine tokens `(p, q)` with
/// `p in [i*l_w, (i+1)*l_w)` and `q in [j*l_h, (j+1)*l_h)`.
pub fn pool_spatial_tokens(grid: &SpatialGrid, spec: PoolingSpec) -> Result<SpatialGrid> {
    let (cw, ch) = spec.coarse_shape(grid.w(), grid.h())?;
    let d = grid.dim();
    let inv = 1.0 / spec.window() as f64;
    let mut out = TokenMatrix::zeros(cw * ch, d);
    for i in 0..cw {
        for j in 0..ch {
            let acc = out.row_mut(i * ch + j);
            for p in i * spec.l_w..(i + 1) * spec.l_w {
                for q in j * spec.l_h..(j + 1) * spec.l_h {
                    for (a, x) in acc.iter_mut().zip(grid.token(p, q)) {
                        *a += x;
                    }
                }
            }
            acc.iter_mut().for_each(|a| *a *= inv);
        }
    }
    SpatialGrid::new(cw, ch, out)
}

/// Replicates each coarse token over its window, giving a grid of the
/// original `(w̃·l_w) x (h̃·l_h)` size in the original layout.
pub fn expand_surrogate(pooled: &SpatialGrid, spec: PoolingSpec) -> Result<SpatialGrid> {
    // Reuse the pooling validator so zero-sized windows are rejected.
    let (w, h) = (pooled.w() * spec.l_w, pooled.h() * spec.l_h);
    spec.coarse_shape(w, h)?;
    let d = pooled.dim();
    let mut out = TokenMatrix::zeros(w * h, d);
    for p in 0..w {
        for q in 0..h {
            out.row_mut(p * h + q)
                .copy_from_slice(pooled.token(p / spec.l_w, q / spec.l_h));
        }
    }
    SpatialGrid::new(w, h, out)
}

/// Pools every frame of `bank` independently, keeping frame order and
/// leaving pointer tokens untouched.
pub fn pool_bank(bank: &MemoryBank, spec: PoolingSpec) -> Result<MemoryBank> {
    let frames = bank
        .frames()
        .iter()
        .map(|f| pool_spatial_tokens(f, spec))
        .collect::<Result<Vec<_>>>()?;
    MemoryBank::new(frames, bank.pointers().clone())
}

/// `[K̄_s; K_p]`-style surrogate bank: each frame pooled then expanded back.
pub fn surrogate_bank(bank: &MemoryBank, spec: PoolingSpec) -> Result<MemoryBank> {
    let frames = bank
        .frames()
        .iter()
        .map(|f| pool_spatial_tokens(f, spec).and_then(|p| expand_surrogate(&p, spec)))
        .collect::<Result<Vec<_>>>()?;
    MemoryBank::new(frames, bank.pointers().clone())
}
