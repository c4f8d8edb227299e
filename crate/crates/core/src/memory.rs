//! Memory-attention transformer blocks.
//!
//! Each block is pre-norm with three residual sublayers:
//!
//! ```text
//! x1  = x  + SelfAttn(Norm1(x))
//! x2  = x1 + CrossAttn_variant(Norm2(x1), bank)
//! out = x2 + Mlp(Norm3(x2))
//! ```
//!
//! Self-attention is always exact; the cross-attention sublayer runs the
//! requested [`AttentionVariant`] against the projected memory bank.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    cross_attention, project, AttentionProjections, AttentionVariant, MemoryBank,
};
use crate::error::{AttnError, Result};
use crate::tensor::{matmul, TokenMatrix};

/// Variance epsilon of [`LayerNorm`].
pub const NORM_EPS: f64 = 1e-5;

/// Half-width of the uniform range used by [`BlockParams::seeded`].
pub const INIT_RANGE: f64 = 0.05;

/// Current-frame tokens, `L x d_q`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures {
    tokens: TokenMatrix,
    grid_shape: Option<(usize, usize)>,
}

impl FrameFeatures {
    pub fn new(tokens: TokenMatrix) -> Result<Self> {
        if tokens.rows() == 0 {
            return Err(AttnError::InvalidParams(
                "frame features need at least one token".into(),
            ));
        }
        let side = (tokens.rows() as f64).sqrt().round() as usize;
        let grid_shape = (side * side == tokens.rows()).then_some((side, side));
        Ok(Self { tokens, grid_shape })
    }

    pub fn tokens(&self) -> &TokenMatrix {
        &self.tokens
    }

    pub fn into_tokens(self) -> TokenMatrix {
        self.tokens
    }

    /// `(sqrt L, sqrt L)` when `L` is a perfect square.
    pub fn grid_shape(&self) -> Option<(usize, usize)> {
        self.grid_shape
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// Per-token channel standardization with learned scale and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    pub fn unit(dim: usize) -> Self {
        Self {
            scale: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn apply(&self, x: &TokenMatrix) -> TokenMatrix {
        let mut out = x.clone();
        let n = x.cols() as f64;
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for ((v, s), b) in row.iter_mut().zip(&self.scale).zip(&self.bias) {
                *v = (*v - mean) * inv * s + b;
            }
        }
        out
    }
}

/// Two-layer feed-forward `relu(x W_in + b_in) W_out + b_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w_in: TokenMatrix,
    pub b_in: Vec<f64>,
    pub w_out: TokenMatrix,
    pub b_out: Vec<f64>,
}

impl Mlp {
    pub fn hidden_dim(&self) -> usize {
        self.w_in.cols()
    }

    pub fn apply(&self, x: &TokenMatrix) -> Result<TokenMatrix> {
        let mut h = matmul(x, &self.w_in)?;
        add_row_bias(&mut h, &self.b_in);
        h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let mut out = matmul(&h, &self.w_out)?;
        add_row_bias(&mut out, &self.b_out);
        Ok(out)
    }
}

fn add_row_bias(m: &mut TokenMatrix, bias: &[f64]) {
    for i in 0..m.rows() {
        for (v, b) in m.row_mut(i).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Dimensions of one block: token width `d_q`, memory width `d_m`,
/// attention width `d` and MLP hidden width `d_ff`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub d_q: usize,
    pub d_m: usize,
    pub d: usize,
    pub d_ff: usize,
}

/// Parameters of one memory-attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    /// Self-attention projections, `d_q -> d` for queries, keys and values.
    pub self_attn: AttentionProjections,
    /// Self-attention output map, `d x d_q`.
    pub self_out: TokenMatrix,
    /// Cross-attention projections: queries `d_q -> d`, memory `d_m -> d`.
    pub cross_attn: AttentionProjections,
    /// Cross-attention output map, `d x d_q`.
    pub cross_out: TokenMatrix,
    pub mlp: Mlp,
    /// Pre-norms for the self-attention, cross-attention and MLP sublayers.
    pub norms: [LayerNorm; 3],
}

impl BlockParams {
    /// Deterministic parameters drawn uniformly from `[-0.05, 0.05]`;
    /// norms start at unit scale and zero bias.
    pub fn seeded(dims: BlockDims, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |r: usize, c: usize| {
            TokenMatrix::from_fn(r, c, |_, _| rng.random_range(-INIT_RANGE..=INIT_RANGE))
        };
        let self_attn = AttentionProjections::new(
            mat(dims.d_q, dims.d),
            mat(dims.d_q, dims.d),
            mat(dims.d_q, dims.d),
        )?;
        let self_out = mat(dims.d, dims.d_q);
        let cross_attn = AttentionProjections::new(
            mat(dims.d_q, dims.d),
            mat(dims.d_m, dims.d),
            mat(dims.d_m, dims.d),
        )?;
        let cross_out = mat(dims.d, dims.d_q);
        let w_in = mat(dims.d_q, dims.d_ff);
        let b_in = mat(1, dims.d_ff).into_data();
        let w_out = mat(dims.d_ff, dims.d_q);
        let b_out = mat(1, dims.d_q).into_data();
        let params = Self {
            self_attn,
            self_out,
            cross_attn,
            cross_out,
            mlp: Mlp {
                w_in,
                b_in,
                w_out,
                b_out,
            },
            norms: std::array::from_fn(|_| LayerNorm::unit(dims.d_q)),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn dims(&self) -> BlockDims {
        BlockDims {
            d_q: self.self_attn.query_dim(),
            d_m: self.cross_attn.memory_dim(),
            d: self.cross_attn.dim(),
            d_ff: self.mlp.hidden_dim(),
        }
    }

    /// Checks every shape against `d_q`, `d_ff >= d_q`, and finiteness.
    pub fn validate(&self) -> Result<()> {
        let d_q = self.self_attn.query_dim();
        let bad = |what: String| Err(AttnError::InvalidParams(what));
        if self.self_attn.memory_dim() != d_q {
            return bad(format!(
                "self-attention key/value input {} != token width {d_q}",
                self.self_attn.memory_dim()
            ));
        }
        if self.self_out.shape() != (self.self_attn.dim(), d_q) {
            return bad(format!("self_out has shape {:?}", self.self_out.shape()));
        }
        if self.cross_attn.query_dim() != d_q {
            return bad(format!(
                "cross-attention query input {} != {d_q}",
                self.cross_attn.query_dim()
            ));
        }
        if self.cross_out.shape() != (self.cross_attn.dim(), d_q) {
            return bad(format!("cross_out has shape {:?}", self.cross_out.shape()));
        }
        let d_ff = self.mlp.hidden_dim();
        if self.mlp.w_in.rows() != d_q
            || self.mlp.w_out.shape() != (d_ff, d_q)
            || self.mlp.b_in.len() != d_ff
            || self.mlp.b_out.len() != d_q
        {
            return bad("MLP shapes are inconsistent".into());
        }
        if d_ff < d_q {
            return bad(format!(
                "MLP hidden width {d_ff} is below token width {d_q}"
            ));
        }
        for (i, norm) in self.norms.iter().enumerate() {
            if norm.scale.len() != d_q || norm.bias.len() != d_q {
                return bad(format!(
                    "norm {i} has width {} (expected {d_q})",
                    norm.scale.len()
                ));
            }
            if !norm.scale.iter().chain(&norm.bias).all(|v| v.is_finite()) {
                return bad(format!("norm {i} has non-finite parameters"));
            }
        }
        Ok(())
    }
}

/// One pre-norm memory-attention block; the output has the input's shape.
pub fn memory_attention_block(
    x: &FrameFeatures,
    bank: &MemoryBank,
    params: &BlockParams,
    variant: &AttentionVariant,
) -> Result<FrameFeatures> {
    params.validate()?;
    let x0 = &x.tokens;
    if x0.cols() != params.self_attn.query_dim() {
        return Err(AttnError::Shape {
            op: "memory_attention_block",
            left: x0.shape(),
            right: params.self_attn.w_q().shape(),
        });
    }

    let n1 = params.norms[0].apply(x0);
    let q = matmul(&n1, params.self_attn.w_q())?;
    let k = matmul(&n1, params.self_attn.w_k())?;
    let v = matmul(&n1, params.self_attn.w_v())?;
    let sa = matmul(&cross_attention(&q, &k, &v)?, &params.self_out)?;
    let x1 = x0.add(&sa)?;

    let n2 = params.norms[1].apply(&x1);
    let (q, projected) = project(&n2, bank, &params.cross_attn)?;
    let ca = matmul(&variant.attend(&q, &projected)?, &params.cross_out)?;
    let x2 = x1.add(&ca)?;

    let n3 = params.norms[2].apply(&x2);
    let out = x2.add(&params.mlp.apply(&n3)?)?;
    Ok(FrameFeatures {
        tokens: out,
        grid_shape: x.grid_shape,
    })
}

/// Applies `blocks` in order. An empty stack returns `x` unchanged.
pub fn memory_attention_stack(
    x: &FrameFeatures,
    bank: &MemoryBank,
    blocks: &[BlockParams],
    variant: &AttentionVariant,
) -> Result<FrameFeatures> {
    let mut cur = x.clone();
    for params in blocks {
        cur = memory_attention_block(&cur, bank, params, variant)?;
    }
    Ok(cur)
}

/// Identifier stored in every parameter manifest.
pub const MANIFEST_FORMAT: &str = "memattn-block-params";
pub const MANIFEST_VERSION: u32 = 1;

/// One named parameter array. Matrices have a two-entry shape, vectors one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON manifest of all block parameters, named `blocks.<i>.<field>`.
///
/// Floats are written in shortest round-trip form and parsed exactly, so
/// saving and loading is lossless for every finite `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamManifest {
    pub format: String,
    pub version: u32,
    pub blocks: usize,
    pub arrays: Vec<NamedArray>,
}

impl ParamManifest {
    pub fn from_blocks(blocks: &[BlockParams]) -> Self {
        let mut arrays = Vec::new();
        let mut mat = |name: String, m: &TokenMatrix| {
            arrays.push(NamedArray {
                name,
                shape: vec![m.rows(), m.cols()],
                data: m.data().to_vec(),
            })
        };
        for (i, b) in blocks.iter().enumerate() {
            mat(format!("blocks.{i}.self_attn.w_q"), b.self_attn.w_q());
            mat(format!("blocks.{i}.self_attn.w_k"), b.self_attn.w_k());
            mat(format!("blocks.{i}.self_attn.w_v"), b.self_attn.w_v());
            mat(format!("blocks.{i}.self_out"), &b.self_out);
            mat(format!("blocks.{i}.cross_attn.w_q"), b.cross_attn.w_q());
            mat(format!("blocks.{i}.cross_attn.w_k"), b.cross_attn.w_k());
            mat(format!("blocks.{i}.cross_attn.w_v"), b.cross_attn.w_v());
            mat(format!("blocks.{i}.cross_out"), &b.cross_out);
            mat(format!("blocks.{i}.mlp.w_in"), &b.mlp.w_in);
            mat(format!("blocks.{i}.mlp.w_out"), &b.mlp.w_out);
        }
        let mut vec_arr = |name: String, v: &[f64]| {
            arrays.push(NamedArray {
                name,
                shape: vec![v.len()],
                data: v.to_vec(),
            })
        };
        for (i, b) in blocks.iter().enumerate() {
            vec_arr(format!("blocks.{i}.mlp.b_in"), &b.mlp.b_in);
            vec_arr(format!("blocks.{i}.mlp.b_out"), &b.mlp.b_out);
            for (j, n) in b.norms.iter().enumerate() {
                vec_arr(format!("blocks.{i}.norm{j}.scale"), &n.scale);
                vec_arr(format!("blocks.{i}.norm{j}.bias"), &n.bias);
            }
        }
        Self {
            format: MANIFEST_FORMAT.to_string(),
            version: MANIFEST_VERSION,
            blocks: blocks.len(),
            arrays,
        }
    }

    pub fn to_blocks(&self) -> Result<Vec<BlockParams>> {
        if self.format != MANIFEST_FORMAT || self.version != MANIFEST_VERSION {
            return Err(AttnError::Format(format!(
                "unsupported manifest {:?} version {}",
                self.format, self.version
            )));
        }
        let find = |name: &str| -> Result<&NamedArray> {
            self.arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| AttnError::Format(format!("missing parameter array {name}")))
        };
        let mat = |name: String| -> Result<TokenMatrix> {
            let a = find(&name)?;
            match a.shape[..] {
                [r, c] => TokenMatrix::new(r, c, a.data.clone()).map_err(|_| {
                    AttnError::Format(format!("{name}: data does not match shape {:?}", a.shape))
                }),
                _ => Err(AttnError::Format(format!(
                    "{name}: expected a matrix, got shape {:?}",
                    a.shape
                ))),
            }
        };
        let vector = |name: String| -> Result<Vec<f64>> {
            let a = find(&name)?;
            if a.shape.len() != 1 || a.shape[0] != a.data.len() {
                return Err(AttnError::Format(format!(
                    "{name}: bad vector shape {:?}",
                    a.shape
                )));
            }
            Ok(a.data.clone())
        };
        (0..self.blocks)
            .map(|i| {
                let p = |f: &str| format!("blocks.{i}.{f}");
                let norm = |j: usize| -> Result<LayerNorm> {
                    Ok(LayerNorm {
                        scale: vector(p(&format!("norm{j}.scale")))?,
                        bias: vector(p(&format!("norm{j}.bias")))?,
                    })
                };
                let params = BlockParams {
                    self_attn: AttentionProjections::new(
                        mat(p("self_attn.w_q"))?,
                        mat(p("self_attn.w_k"))?,
                        mat(p("self_attn.w_v"))?,
                    )?,
                    self_out: mat(p("self_out"))?,
                    cross_attn: AttentionProjections::new(
                        mat(p("cross_attn.w_q"))?,
                        mat(p("cross_attn.w_k"))?,
                        mat(p("cross_attn.w_v"))?,
                    )?,
                    cross_out: mat(p("cross_out"))?,
                    mlp: Mlp {
                        w_in: mat(p("mlp.w_in"))?,
                        b_in: vector(p("mlp.b_in"))?,
                        w_out: mat(p("mlp.w_out"))?,
                        b_out: vector(p("mlp.b_out"))?,
                    },
                    norms: [norm(0)?, norm(1)?, norm(2)?],
                };
                params.validate()?;
                Ok(params)
            })
            .collect()
    }
}

pub fn save_params<W: Write>(blocks: &[BlockParams], writer: W) -> Result<()> {
    serde_json::to_writer(writer, &ParamManifest::from_blocks(blocks))?;
    Ok(())
}

pub fn load_params<R: Read>(reader: R) -> Result<Vec<BlockParams>> {
    let manifest: ParamManifest = serde_json::from_reader(reader)?;
    manifest.to_blocks()
}
