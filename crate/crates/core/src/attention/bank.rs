//! Memory-bank containers: spatial token grids, pointer tokens, and the
//! projections that map raw memory into query/key/value space.

use serde::{Deserialize, Serialize};

use crate::error::{AttnError, Result};
use crate::tensor::{matmul, TokenMatrix};

/// A `w x h` grid of `d`-channel tokens.
///
/// Token `(p, q)` (row `p < w`, column `q < h`) lives at flat row `p * h + q`
/// of the underlying token matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGrid {
    w: usize,
    h: usize,
    tokens: TokenMatrix,
}

impl SpatialGrid {
    pub fn new(w: usize, h: usize, tokens: TokenMatrix) -> Result<Self> {
        if tokens.rows() != w * h {
            return Err(AttnError::Shape {
                op: "SpatialGrid::new",
                left: (w, h),
                right: tokens.shape(),
            });
        }
        Ok(Self { w, h, tokens })
    }

    pub fn from_data(w: usize, h: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(w, h, TokenMatrix::new(w * h, d, data)?)
    }

    pub fn from_fn(
        w: usize,
        h: usize,
        d: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let tokens = TokenMatrix::from_fn(w * h, d, |i, c| f(i / h, i % h, c));
        Self { w, h, tokens }
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.w * self.h
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn token(&self, p: usize, q: usize) -> &[f64] {
        self.tokens.row(p * self.h + q)
    }

    #[inline]
    pub fn token_mut(&mut self, p: usize, q: usize) -> &mut [f64] {
        self.tokens.row_mut(p * self.h + q)
    }

    pub fn tokens(&self) -> &TokenMatrix {
        &self.tokens
    }

    pub fn into_tokens(self) -> TokenMatrix {
        self.tokens
    }

    /// Applies a right-multiplication to every token, keeping the layout.
    pub fn map_tokens(&self, weight: &TokenMatrix) -> Result<SpatialGrid> {
        Ok(SpatialGrid {
            w: self.w,
            h: self.h,
            tokens: matmul(&self.tokens, weight)?,
        })
    }
}

/// Memory tokens: one spatial grid per stored frame plus `P` object-pointer
/// tokens. All frames share `(w, h, d)`; pointers are `P x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    frames: Vec<SpatialGrid>,
    pointers: TokenMatrix,
}

impl MemoryBank {
    pub fn new(frames: Vec<SpatialGrid>, pointers: TokenMatrix) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| AttnError::InvalidBank("at least one frame is required".into()))?;
        let (w, h, d) = (first.w, first.h, first.dim());
        if w * h == 0 {
            return Err(AttnError::InvalidBank(
                "frames must contain at least one token".into(),
            ));
        }
        if let Some((i, f)) = frames
            .iter()
            .enumerate()
            .find(|(_, f)| (f.w, f.h, f.dim()) != (w, h, d))
        {
            return Err(AttnError::InvalidBank(format!(
                "frame {i} has shape {}x{}x{}, expected {w}x{h}x{d}",
                f.w,
                f.h,
                f.dim()
            )));
        }
        if pointers.cols() != d && pointers.rows() > 0 {
            return Err(AttnError::Shape {
                op: "MemoryBank::new",
                left: (w * h, d),
                right: pointers.shape(),
            });
        }
        // A 0 x k pointer block is normalized to 0 x d.
        let pointers = if pointers.rows() == 0 {
            TokenMatrix::zeros(0, d)
        } else {
            pointers
        };
        Ok(Self { frames, pointers })
    }

    pub fn frames(&self) -> &[SpatialGrid] {
        &self.frames
    }

    pub fn pointers(&self) -> &TokenMatrix {
        &self.pointers
    }

    pub fn frame_shape(&self) -> (usize, usize) {
        (self.frames[0].w, self.frames[0].h)
    }

    pub fn dim(&self) -> usize {
        self.frames[0].dim()
    }

    /// Spatial token count `n` over all frames.
    pub fn spatial_len(&self) -> usize {
        self.frames.len() * self.frames[0].len()
    }

    /// Pointer token count `P`.
    pub fn pointer_len(&self) -> usize {
        self.pointers.rows()
    }

    pub fn len(&self) -> usize {
        self.spatial_len() + self.pointer_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All spatial tokens in frame order, `n x d`.
    pub fn spatial_tokens(&self) -> TokenMatrix {
        let parts: Vec<&TokenMatrix> = self.frames.iter().map(|f| &f.tokens).collect();
        TokenMatrix::vstack(&parts).expect("frames share a channel count")
    }

    /// `[M_s; M_p]`: frames in order followed by the pointer tokens.
    pub fn flatten(&self) -> TokenMatrix {
        let mut parts: Vec<&TokenMatrix> = self.frames.iter().map(|f| &f.tokens).collect();
        parts.push(&self.pointers);
        TokenMatrix::vstack(&parts).expect("bank parts share a channel count")
    }

    /// Maps every token through `weight` (`d x d'`), preserving layout.
    pub fn map_tokens(&self, weight: &TokenMatrix) -> Result<MemoryBank> {
        let frames = self
            .frames
            .iter()
            .map(|f| f.map_tokens(weight))
            .collect::<Result<Vec<_>>>()?;
        let pointers = if self.pointers.rows() == 0 {
            TokenMatrix::zeros(0, weight.cols())
        } else {
            matmul(&self.pointers, weight)?
        };
        Ok(MemoryBank { frames, pointers })
    }
}

/// Keys and values derived from the same memory bank. Both halves share
/// frame count, grid shape, pointer count and channel dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedBank {
    keys: MemoryBank,
    values: MemoryBank,
}

impl ProjectedBank {
    pub fn new(keys: MemoryBank, values: MemoryBank) -> Result<Self> {
        let same = keys.frames.len() == values.frames.len()
            && keys.frame_shape() == values.frame_shape()
            && keys.pointer_len() == values.pointer_len()
            && keys.dim() == values.dim();
        if !same {
            return Err(AttnError::InvalidBank(format!(
                "keys ({} frames of {:?}, {} pointers, d={}) and values ({} frames of {:?}, {} pointers, d={}) differ",
                keys.frames.len(),
                keys.frame_shape(),
                keys.pointer_len(),
                keys.dim(),
                values.frames.len(),
                values.frame_shape(),
                values.pointer_len(),
                values.dim(),
            )));
        }
        Ok(Self { keys, values })
    }

    pub fn keys(&self) -> &MemoryBank {
        &self.keys
    }

    pub fn values(&self) -> &MemoryBank {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.keys.dim()
    }

    pub fn spatial_len(&self) -> usize {
        self.keys.spatial_len()
    }

    pub fn pointer_len(&self) -> usize {
        self.keys.pointer_len()
    }
}

/// Pooling window of `l_w x l_h` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolingSpec {
    pub l_w: usize,
    pub l_h: usize,
}

impl PoolingSpec {
    pub const IDENTITY: PoolingSpec = PoolingSpec { l_w: 1, l_h: 1 };

    pub fn new(l_w: usize, l_h: usize) -> Self {
        Self { l_w, l_h }
    }

    pub fn square(l: usize) -> Self {
        Self { l_w: l, l_h: l }
    }

    /// Tokens averaged per window.
    pub fn window(&self) -> usize {
        self.l_w * self.l_h
    }

    /// The logit offset `ln(l_w * l_h)` that rebalances pooled tokens.
    pub fn balancing_log(&self) -> f64 {
        (self.window() as f64).ln()
    }

    /// Checks the window tiles a `w x h` grid and returns the coarse shape.
    pub fn coarse_shape(&self, w: usize, h: usize) -> Result<(usize, usize)> {
        if self.l_w == 0
            || self.l_h == 0
            || !w.is_multiple_of(self.l_w)
            || !h.is_multiple_of(self.l_h)
        {
            return Err(AttnError::PoolingSpec {
                w,
                h,
                l_w: self.l_w,
                l_h: self.l_h,
            });
        }
        Ok((w / self.l_w, h / self.l_h))
    }
}

impl std::fmt::Display for PoolingSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.l_w, self.l_h)
    }
}

impl std::str::FromStr for PoolingSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (a, b) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected <l_w>x<l_h>, got {s:?}"))?;
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| format!("bad window size {t:?} in {s:?}: {e}"))
        };
        let spec = PoolingSpec::new(parse(a)?, parse(b)?);
        if spec.l_w == 0 || spec.l_h == 0 {
            return Err(format!("window sizes must be >= 1, got {s:?}"));
        }
        Ok(spec)
    }
}

/// Single-head projections: queries from `d_q`, keys and values from `d_m`,
/// all into a shared dimension `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProjections {
    w_q: TokenMatrix,
    w_k: TokenMatrix,
    w_v: TokenMatrix,
}

impl AttentionProjections {
    pub fn new(w_q: TokenMatrix, w_k: TokenMatrix, w_v: TokenMatrix) -> Result<Self> {
        let d = w_q.cols();
        if w_k.cols() != d || w_v.cols() != d || w_k.rows() != w_v.rows() {
            return Err(AttnError::InvalidParams(format!(
                "projection shapes w_q {:?}, w_k {:?}, w_v {:?} do not share an output dimension",
                w_q.shape(),
                w_k.shape(),
                w_v.shape()
            )));
        }
        Ok(Self { w_q, w_k, w_v })
    }

    pub fn identity(d: usize) -> Self {
        let i = TokenMatrix::identity(d);
        Self {
            w_q: i.clone(),
            w_k: i.clone(),
            w_v: i,
        }
    }

    pub fn w_q(&self) -> &TokenMatrix {
        &self.w_q
    }

    pub fn w_k(&self) -> &TokenMatrix {
        &self.w_k
    }

    pub fn w_v(&self) -> &TokenMatrix {
        &self.w_v
    }

    pub fn query_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn memory_dim(&self) -> usize {
        self.w_k.rows()
    }

    pub fn dim(&self) -> usize {
        self.w_q.cols()
    }
}

/// Projects frame features to queries and the raw bank to keys and values.
pub fn project(
    x: &TokenMatrix,
    bank: &MemoryBank,
    proj: &AttentionProjections,
) -> Result<(TokenMatrix, ProjectedBank)> {
    if x.cols() != proj.query_dim() {
        return Err(AttnError::Shape {
            op: "project (queries)",
            left: x.shape(),
            right: proj.w_q.shape(),
        });
    }
    if bank.dim() != proj.memory_dim() {
        return Err(AttnError::Shape {
            op: "project (memory)",
            left: (bank.len(), bank.dim()),
            right: proj.w_k.shape(),
        });
    }
    let q = matmul(x, &proj.w_q)?;
    let keys = bank.map_tokens(&proj.w_k)?;
    let values = bank.map_tokens(&proj.w_v)?;
    Ok((q, ProjectedBank::new(keys, values)?))
}
