//! Seeded token generators with a tunable spatial-smoothness knob, and the
//! locality estimator used to quantify it.
//!
//! Smooth grids are sums of low-frequency 2-D cosine modes. Each channel
//! carries `bandwidth` modes whose spatial frequencies are bounded by
//! `bandwidth / max(w, h)` cycles per token, so lowering the bandwidth
//! lowers both the number and the frequency of modes.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{expand_surrogate, MemoryBank, PoolingSpec, ProjectedBank, SpatialGrid};
use crate::error::{AttnError, Result};
use crate::tensor::{matmul, TokenMatrix};

/// Smooth-field generation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessSpec {
    /// When set, the generated grid is rescaled so that its measured raster
    /// locality equals this value.
    pub c_target: Option<f64>,
    /// Number of cosine modes per channel and the frequency bound, >= 1.
    pub bandwidth: u32,
    /// Token value scale, > 0.
    pub amplitude: f64,
    pub seed: u64,
}

impl SmoothnessSpec {
    pub fn new(bandwidth: u32, amplitude: f64, seed: u64) -> Self {
        Self {
            c_target: None,
            bandwidth,
            amplitude,
            seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidth < 1 {
            return Err(AttnError::InvalidParams("bandwidth must be >= 1".into()));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(AttnError::InvalidParams(format!(
                "amplitude must be positive and finite, got {}",
                self.amplitude
            )));
        }
        if let Some(c) = self.c_target {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(AttnError::InvalidParams(format!(
                    "c_target must be >= 0, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; derives independent sub-seeds from one seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A smooth `w x h x d` grid built from seeded cosine modes.
pub fn gen_smooth_grid(w: usize, h: usize, d: usize, spec: &SmoothnessSpec) -> Result<SpatialGrid> {
    spec.validate()?;
    let modes = spec.bandwidth as usize;
    let f_max = spec.bandwidth as f64 / w.max(h).max(1) as f64;
    let gain = spec.amplitude / (modes as f64).sqrt();
    // (fx, fy, phase) per channel and mode. Each (channel, mode) pair has
    // its own stream, so a mode's draws do not depend on the bandwidth.
    let params: Vec<[f64; 3]> = (0..d)
        .flat_map(|c| (0..modes).map(move |m| (c, m)))
        .map(|(c, m)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(((c as u64) << 32) | m as u64);
            let fx = rng.random::<f64>() * f_max;
            let fy = rng.random_range(-1.0..1.0) * f_max;
            let phase = rng.random::<f64>() * TAU;
            [fx, fy, phase]
        })
        .collect();
    let mut grid = SpatialGrid::from_fn(w, h, d, |p, q, c| {
        let mode_params = &params[c * modes..(c + 1) * modes];
        gain * mode_params
            .iter()
            .map(|[fx, fy, ph]| (TAU * (fx * p as f64 + fy * q as f64) + ph).cos())
            .sum::<f64>()
    });
    if let Some(target) = spec.c_target {
        if grid.len() >= 2 {
            let current = measure_locality(&grid)?;
            if current > 0.0 {
                let s = (target / current).sqrt();
                let tokens = grid.tokens().scale(s);
                grid = SpatialGrid::new(w, h, tokens)?;
            }
        }
    }
    Ok(grid)
}

/// I.i.d. uniform `[-1, 1]` tokens: a non-smooth baseline.
pub fn gen_random_grid(w: usize, h: usize, d: usize, seed: u64) -> SpatialGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SpatialGrid::from_fn(w, h, d, |_, _, _| rng.random_range(-1.0..=1.0))
}

/// Uniform `[-1, 1]` matrix, used for queries and pointer tokens.
pub fn gen_uniform(rows: usize, cols: usize, seed: u64) -> TokenMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TokenMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..=1.0))
}

/// Which token pairs count as neighbours when measuring locality.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalityMode {
    /// Consecutive tokens in flat row-major order, including the jump from
    /// the end of one grid row to the start of the next.
    #[default]
    Raster,
    /// Horizontal and vertical grid neighbours.
    FourNeighbor,
}

/// `n^2 * max ||k_i - k_{i+1}||^2` over raster-adjacent pairs: the smallest
/// `c` with `||k_i - k_{i+1}||^2 <= c / n^2` for the whole grid.
pub fn measure_locality(grid: &SpatialGrid) -> Result<f64> {
    measure_locality_with(grid, LocalityMode::Raster)
}

pub fn measure_locality_with(grid: &SpatialGrid, mode: LocalityMode) -> Result<f64> {
    let n = grid.len();
    if n < 2 {
        return Err(AttnError::UndefinedLocality { tokens: n });
    }
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let t = grid.tokens();
    let max = match mode {
        LocalityMode::Raster => (0..n - 1)
            .map(|i| sq(t.row(i), t.row(i + 1)))
            .fold(0.0, f64::max),
        LocalityMode::FourNeighbor => {
            let mut m = 0.0f64;
            for p in 0..grid.w() {
                for q in 0..grid.h() {
                    if q + 1 < grid.h() {
                        m = m.max(sq(grid.token(p, q), grid.token(p, q + 1)));
                    }
                    if p + 1 < grid.w() {
                        m = m.max(sq(grid.token(p, q), grid.token(p + 1, q)));
                    }
                }
            }
            m
        }
    };
    Ok((n * n) as f64 * max)
}

/// Layout of a synthetic bank: `frames` grids of `w x h` tokens plus
/// `pointers` object-pointer tokens, all of width `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankShape {
    pub frames: usize,
    pub w: usize,
    pub h: usize,
    pub pointers: usize,
    pub d: usize,
}

impl BankShape {
    pub fn spatial_len(&self) -> usize {
        self.frames * self.w * self.h
    }
}

/// One memory bank with smooth spatial frames and uniform pointer tokens
/// scaled by the amplitude.
pub fn gen_smooth_memory(shape: BankShape, spec: &SmoothnessSpec) -> Result<MemoryBank> {
    let frames = (0..shape.frames)
        .map(|f| {
            let s = spec.with_seed(derive_seed(spec.seed, f as u64));
            gen_smooth_grid(shape.w, shape.h, shape.d, &s)
        })
        .collect::<Result<Vec<_>>>()?;
    let pointers = gen_uniform(shape.pointers, shape.d, derive_seed(spec.seed, u64::MAX))
        .scale(spec.amplitude);
    MemoryBank::new(frames, pointers)
}

/// Keys and values from independent smooth fields with the same spec.
pub fn gen_smooth_bank(shape: BankShape, spec: &SmoothnessSpec) -> Result<ProjectedBank> {
    let keys = gen_smooth_memory(shape, &spec.with_seed(derive_seed(spec.seed, 0x4B)))?;
    let values = gen_smooth_memory(shape, &spec.with_seed(derive_seed(spec.seed, 0x56)))?;
    ProjectedBank::new(keys, values)
}

/// `l` queries of width `d`: uniform `[-1, 1]` features of width `d_q`
/// through a seeded projection scaled so entries keep the same variance.
pub fn gen_queries(l: usize, d_q: usize, d: usize, seed: u64) -> Result<TokenMatrix> {
    let x = gen_uniform(l, d_q, derive_seed(seed, 0x58));
    let scale = (3.0 / d_q.max(1) as f64).sqrt();
    let w_q = gen_uniform(d_q, d, derive_seed(seed, 0x57)).scale(scale);
    matmul(&x, &w_q)
}

/// Queries plus a smooth bank, all derived from `spec.seed`.
pub fn gen_smooth_instance(
    l: usize,
    d_q: usize,
    shape: BankShape,
    spec: &SmoothnessSpec,
) -> Result<(TokenMatrix, ProjectedBank)> {
    let q = gen_queries(l, d_q, shape.d, derive_seed(spec.seed, 0x51))?;
    Ok((q, gen_smooth_bank(shape, spec)?))
}

/// Keys and values with i.i.d. uniform tokens everywhere.
pub fn gen_random_bank(shape: BankShape, seed: u64) -> Result<ProjectedBank> {
    let half = |tag: u64| {
        let base = derive_seed(seed, tag);
        let frames = (0..shape.frames)
            .map(|f| gen_random_grid(shape.w, shape.h, shape.d, derive_seed(base, f as u64)))
            .collect();
        MemoryBank::new(
            frames,
            gen_uniform(shape.pointers, shape.d, derive_seed(base, u64::MAX)),
        )
    };
    ProjectedBank::new(half(0x4B)?, half(0x56)?)
}

/// A bank whose every pooling window holds identical tokens, built by
/// replicating random coarse grids.
pub fn gen_window_constant_bank(
    shape: BankShape,
    pooling: PoolingSpec,
    seed: u64,
) -> Result<ProjectedBank> {
    let (cw, ch) = pooling.coarse_shape(shape.w, shape.h)?;
    let half = |tag: u64| -> Result<MemoryBank> {
        let base = derive_seed(seed, tag);
        let frames = (0..shape.frames)
            .map(|f| {
                expand_surrogate(
                    &gen_random_grid(cw, ch, shape.d, derive_seed(base, f as u64)),
                    pooling,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        MemoryBank::new(
            frames,
            gen_uniform(shape.pointers, shape.d, derive_seed(base, u64::MAX)),
        )
    };
    ProjectedBank::new(half(0x4B)?, half(0x56)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(xs: impl Iterator<Item = f64>) -> f64 {
        let v: Vec<f64> = xs.collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn smooth_grid_is_deterministic() {
        let spec = SmoothnessSpec::new(3, 1.0, 42);
        let a = gen_smooth_grid(8, 8, 4, &spec).unwrap();
        let b = gen_smooth_grid(8, 8, 4, &spec).unwrap();
        assert!(a
            .tokens()
            .data()
            .iter()
            .zip(b.tokens().data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a, gen_smooth_grid(8, 8, 4, &spec.with_seed(43)).unwrap());
    }

    #[test]
    fn low_bandwidth_grid_is_near_constant() {
        // One mode with at most one cycle across a 64-wide grid: adjacent
        // tokens differ by at most 2*pi/64 per channel, tiny against the
        // spread of a random grid.
        let spec = SmoothnessSpec::new(1, 1.0, 5);
        let g = gen_smooth_grid(64, 64, 4, &spec).unwrap();
        let n2 = (64.0f64 * 64.0).powi(2);
        let four = measure_locality_with(&g, LocalityMode::FourNeighbor).unwrap() / n2;
        assert!(four <= 4.0 * (TAU / 64.0).powi(2), "{four}");
        let rand =
            measure_locality_with(&gen_random_grid(64, 64, 4, 5), LocalityMode::FourNeighbor)
                .unwrap()
                / n2;
        assert!(four < 1e-2 * rand);
    }

    #[test]
    fn locality_grows_with_bandwidth() {
        let levels = [1u32, 2, 4, 8];
        let means: Vec<f64> = levels
            .iter()
            .map(|&b| {
                mean((0..20).map(|s| {
                    let g = gen_smooth_grid(16, 16, 8, &SmoothnessSpec::new(b, 1.0, s)).unwrap();
                    measure_locality(&g).unwrap()
                }))
            })
            .collect();
        for w in means.windows(2) {
            assert!(w[0] <= w[1], "{means:?}");
        }
    }

    #[test]
    fn random_grid_basics() {
        assert_eq!(gen_random_grid(4, 4, 3, 9), gen_random_grid(4, 4, 3, 9));
        let one = gen_random_grid(1, 1, 3, 9);
        assert_eq!(one.len(), 1);
        assert!(one.tokens().data().iter().all(|x| (-1.0..=1.0).contains(x)));
        // Tall grids keep the raster row-wrap jumps short.
        let smooth = mean((0..20).map(|s| {
            measure_locality(&gen_smooth_grid(32, 4, 8, &SmoothnessSpec::new(2, 1.0, s)).unwrap())
                .unwrap()
        }));
        let random =
            mean((0..20).map(|s| measure_locality(&gen_random_grid(32, 4, 8, s)).unwrap()));
        assert!(random > 2.0 * smooth, "{random} vs {smooth}");
    }

    #[test]
    fn locality_by_hand() {
        let g = SpatialGrid::from_fn(3, 3, 2, |_, _, _| 0.25);
        assert_eq!(measure_locality(&g).unwrap(), 0.0);
        let pair = SpatialGrid::from_data(1, 2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(measure_locality(&pair).unwrap(), 4.0);
        assert!(matches!(
            measure_locality(&gen_random_grid(1, 1, 2, 0)),
            Err(AttnError::UndefinedLocality { tokens: 1 })
        ));
        // Raster order includes the row wrap (0,1) -> (1,0); four-neighbour
        // order does not.
        let g = SpatialGrid::from_data(2, 2, 1, vec![0.0, 0.0, 3.0, 3.0]).unwrap();
        assert_eq!(measure_locality(&g).unwrap(), 16.0 * 9.0);
        assert_eq!(
            measure_locality_with(&g, LocalityMode::FourNeighbor).unwrap(),
            16.0 * 9.0
        );
        let g = SpatialGrid::from_data(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(measure_locality(&g).unwrap(), 16.0);
        assert_eq!(
            measure_locality_with(&g, LocalityMode::FourNeighbor).unwrap(),
            16.0
        );
    }

    #[test]
    fn c_target_rescales() {
        let mut spec = SmoothnessSpec::new(2, 1.0, 3);
        spec.c_target = Some(50.0);
        let g = gen_smooth_grid(8, 8, 3, &spec).unwrap();
        assert!((measure_locality(&g).unwrap() - 50.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_specs() {
        assert!(gen_smooth_grid(2, 2, 1, &SmoothnessSpec::new(0, 1.0, 0)).is_err());
        assert!(gen_smooth_grid(2, 2, 1, &SmoothnessSpec::new(1, 0.0, 0)).is_err());
    }

    #[test]
    fn shuffling_smooth_grid_raises_locality() {
        use rand::seq::SliceRandom;
        let trials = 100;
        let mut raised = 0;
        for s in 0..trials {
            let g = gen_smooth_grid(32, 4, 4, &SmoothnessSpec::new(2, 1.0, s)).unwrap();
            let mut order: Vec<usize> = (0..g.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(1000 + s));
            let shuffled =
                TokenMatrix::from_fn(g.len(), g.dim(), |i, c| g.tokens().get(order[i], c));
            let sg = SpatialGrid::new(32, 4, shuffled).unwrap();
            if measure_locality(&sg).unwrap() > measure_locality(&g).unwrap() {
                raised += 1;
            }
        }
        assert!(raised as f64 >= 0.95 * trials as f64, "{raised}/{trials}");
    }

    #[test]
    fn banks_have_requested_layout() {
        let shape = BankShape {
            frames: 3,
            w: 4,
            h: 6,
            pointers: 5,
            d: 7,
        };
        let b = gen_smooth_bank(shape, &SmoothnessSpec::new(2, 1.0, 1)).unwrap();
        assert_eq!(b.spatial_len(), 72);
        assert_eq!(b.pointer_len(), 5);
        assert_eq!(b.dim(), 7);
        assert_ne!(b.keys(), b.values());
        let r = gen_random_bank(shape, 2).unwrap();
        assert_eq!(r.keys().frame_shape(), (4, 6));
        let wc = gen_window_constant_bank(shape, PoolingSpec::new(2, 3), 3).unwrap();
        let f = &wc.keys().frames()[1];
        assert_eq!(f.token(0, 0), f.token(1, 2));
        assert!(gen_window_constant_bank(shape, PoolingSpec::new(3, 3), 3).is_err());
    }
}
