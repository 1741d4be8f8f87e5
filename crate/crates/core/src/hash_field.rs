//! Multi-resolution hash-grid encoding.
//!
//! Every level `l` (0-based) is a virtual grid of resolution
//! `N_l = floor(N_min * b^l)` whose integer vertices are hashed into a table of
//! `T` rows with `F` features each. A position is encoded by trilinear
//! interpolation of the 8 surrounding vertices on each level, and the `L`
//! per-level features are concatenated after multiplication with a
//! coarse-to-fine level weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::geometry::Aabb;
use crate::{Error, Real, Result};

/// Spatial hash primes; the first is 1 so that the coarse levels stay
/// cache-coherent along x.
pub const DEFAULT_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub levels: usize,
    /// Rows per level table; power of two.
    pub table_size: usize,
    pub features_per_level: usize,
    pub base_resolution: u32,
    pub growth_factor: f64,
    pub primes: [u32; 3],
    pub bounds: Aabb,
}

impl HashGridConfig {
    /// 16 levels, 2^14 rows, 2 features, resolutions 16 .. ~2048.
    pub fn with_bounds(bounds: Aabb) -> Self {
        Self {
            levels: 16,
            table_size: 1 << 14,
            features_per_level: 2,
            base_resolution: 16,
            growth_factor: 1.382,
            primes: DEFAULT_PRIMES,
            bounds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::domain("hash grid needs at least one level"));
        }
        if !self.table_size.is_power_of_two() || self.table_size > (1 << 31) {
            return Err(Error::domain(format!(
                "table size {} is not a power of two",
                self.table_size
            )));
        }
        if self.features_per_level == 0 {
            return Err(Error::domain("features_per_level must be >= 1"));
        }
        if self.base_resolution == 0 {
            return Err(Error::domain("base resolution must be >= 1"));
        }
        if !(self.growth_factor.is_finite() && self.growth_factor > 1.0) && self.levels > 1 {
            return Err(Error::domain("growth factor must be > 1"));
        }
        self.bounds.validate()?;
        // the finest level must fit u32 vertex coordinates
        if self.resolution(self.levels - 1) >= u32::MAX / 2 {
            return Err(Error::domain("finest resolution overflows"));
        }
        Ok(())
    }

    /// Grid resolution of the 0-based `level`.
    pub fn resolution(&self, level: usize) -> u32 {
        (self.base_resolution as f64 * self.growth_factor.powi(level as i32)).floor() as u32
    }

    /// Width of the encoded feature, `L * F`.
    pub fn encoded_len(&self) -> usize {
        self.levels * self.features_per_level
    }

    pub fn parameter_count(&self) -> usize {
        self.levels * self.table_size * self.features_per_level
    }
}

/// Hashed row of the vertex `coords` on `level`:
/// `(c0*p0 xor c1*p1 xor c2*p2) mod T` in wrapping 32-bit arithmetic.
pub fn grid_index(config: &HashGridConfig, level: usize, coords: [u32; 3]) -> Result<usize> {
    if level >= config.levels {
        return Err(Error::domain(format!(
            "level {level} out of range (levels = {})",
            config.levels
        )));
    }
    Ok(hash(coords, &config.primes, config.table_size))
}

#[inline(always)]
fn hash(c: [u32; 3], p: &[u32; 3], table_size: usize) -> usize {
    let h = c[0].wrapping_mul(p[0]) ^ c[1].wrapping_mul(p[1]) ^ c[2].wrapping_mul(p[2]);
    (h as usize) & (table_size - 1)
}

/// Coarse-to-fine weight of level `k` at progress `alpha`:
/// 0 below `k`, a raised-cosine ramp on `[k, k+1)`, and 1 from `k+1` on.
///
/// The encoder passes the 0-based level index as `k`, so at `alpha = L`
/// every level is fully open and at `alpha = 8` exactly the 8 coarsest
/// levels are.
pub fn tdlf_weight(k: usize, alpha: f64) -> f64 {
    let x = alpha - k as f64;
    if x < 0.0 {
        0.0
    } else if x < 1.0 {
        0.5 * (1.0 - (x * PI).cos())
    } else {
        1.0
    }
}

/// `min(alpha0 + progress, 1) * L`.
pub fn alpha_schedule(progress: f64, alpha0: f64, levels: usize) -> f64 {
    (alpha0 + progress).min(1.0) * levels as f64
}

/// Coarse-to-fine filter state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdlfState {
    pub alpha: f64,
    pub alpha0: f64,
    pub levels: usize,
}

impl TdlfState {
    /// All levels fully weighted.
    pub fn open(levels: usize) -> Self {
        Self {
            alpha: levels as f64,
            alpha0: 1.0,
            levels,
        }
    }

    pub fn scheduled(progress: f64, alpha0: f64, levels: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&progress) || !(0.0..=1.0).contains(&alpha0) {
            return Err(Error::domain(format!(
                "progress {progress} / alpha0 {alpha0} outside [0, 1]"
            )));
        }
        Ok(Self {
            alpha: alpha_schedule(progress, alpha0, levels),
            alpha0,
            levels,
        })
    }

    /// Moves to `progress`; alpha never decreases.
    pub fn advance(&mut self, progress: f64) {
        let next = alpha_schedule(progress.clamp(0.0, 1.0), self.alpha0, self.levels);
        self.alpha = self.alpha.max(next);
    }

    /// `ceil(alpha)`, as a 1-based level number clamped to `[1, L]`.
    pub fn active_level(&self) -> usize {
        (self.alpha.ceil() as usize).clamp(1, self.levels.max(1))
    }

    pub fn is_open(&self) -> bool {
        self.alpha >= self.levels as f64
    }

    pub fn weights<S: Real>(&self) -> Vec<S> {
        (0..self.levels)
            .map(|k| S::lit(tdlf_weight(k, self.alpha)))
            .collect()
    }

    /// Numerical-gradient step in normalized `[0, 1]` coordinates: the cell
    /// size of the active level.
    pub fn numerical_step(&self, config: &HashGridConfig) -> f64 {
        1.0 / config.resolution(self.active_level() - 1) as f64
    }
}

/// Weighted concatenation plus the unweighted per-level blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedFeature<S> {
    pub values: Vec<S>,
    pub per_level: Vec<S>,
}

/// Result of [`HashGrid::encode_backward`]. `table_grads` holds
/// `(flat table index, gradient)` pairs and may repeat an index when corners
/// collide.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodeGrad<S> {
    pub table_grads: Vec<(usize, S)>,
    pub x_grad: [S; 3],
}

/// Derivative of the encoding with respect to position, one column per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodingJacobian<S> {
    pub columns: [Vec<S>; 3],
}

impl<S: Real> EncodingJacobian<S> {
    /// Chain rule: `sum_j upstream_j * d enc_j / d x_a` for each axis.
    pub fn apply(&self, upstream: &[S]) -> [S; 3] {
        [
            crate::real::dot(&self.columns[0], upstream),
            crate::real::dot(&self.columns[1], upstream),
            crate::real::dot(&self.columns[2], upstream),
        ]
    }
}

/// Interpolation stencil of one level.
struct Stencil<S> {
    rows: [usize; 8],
    weights: [S; 8],
    frac: [S; 3],
    /// d(normalized cell coordinate) / d(scene coordinate)
    scale: [S; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashGrid<S> {
    pub config: HashGridConfig,
    /// Level-major, then row, then feature.
    pub tables: Vec<S>,
}

impl<S: Real> HashGrid<S> {
    pub fn zeros(config: HashGridConfig) -> Result<Self> {
        config.validate()?;
        let tables = vec![S::zero(); config.parameter_count()];
        Ok(Self { config, tables })
    }

    /// Uniform initialization in `[-1e-4, 1e-4]`.
    pub fn random(config: HashGridConfig, seed: u64) -> Result<Self> {
        let mut grid = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in grid.tables.iter_mut() {
            *v = S::lit(rng.random_range(-1e-4..1e-4));
        }
        Ok(grid)
    }

    pub fn from_tables(config: HashGridConfig, tables: Vec<S>) -> Result<Self> {
        config.validate()?;
        if tables.len() != config.parameter_count() {
            return Err(Error::domain(format!(
                "expected {} table entries, got {}",
                config.parameter_count(),
                tables.len()
            )));
        }
        if tables.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("hash table holds non-finite values"));
        }
        Ok(Self { config, tables })
    }

    pub fn cast<T: Real>(&self) -> HashGrid<T> {
        HashGrid {
            config: self.config.clone(),
            tables: self.tables.iter().map(|v| T::lit(v.f64())).collect(),
        }
    }

    /// Flat index of `(level, row, feature)` in `tables`.
    pub fn flat_index(&self, level: usize, row: usize, feature: usize) -> usize {
        (level * self.config.table_size + row) * self.config.features_per_level + feature
    }

    /// Feature vector stored for a vertex.
    pub fn vertex_feature(&self, level: usize, coords: [u32; 3]) -> Result<&[S]> {
        let row = grid_index(&self.config, level, coords)?;
        let f = self.config.features_per_level;
        let start = self.flat_index(level, row, 0);
        Ok(&self.tables[start..start + f])
    }

    pub fn vertex_feature_mut(&mut self, level: usize, coords: [u32; 3]) -> Result<&mut [S]> {
        let row = grid_index(&self.config, level, coords)?;
        let f = self.config.features_per_level;
        let start = self.flat_index(level, row, 0);
        Ok(&mut self.tables[start..start + f])
    }

    /// Scene-to-normalized mapping; errors outside the bounds.
    pub fn normalize(&self, x: [S; 3]) -> Result<[S; 3]> {
        let b = &self.config.bounds;
        let mut u = [S::zero(); 3];
        for i in 0..3 {
            let lo = S::lit(b.min[i]);
            let hi = S::lit(b.max[i]);
            // NaN fails both comparisons and is rejected here too
            if !(x[i] >= lo && x[i] <= hi) {
                return Err(Error::domain(format!(
                    "position {:?} outside scene bounds",
                    x.map(|v| v.f64())
                )));
            }
            u[i] = (x[i] - lo) / (hi - lo);
        }
        Ok(u)
    }

    #[inline]
    fn stencil(&self, level: usize, u: &[S; 3]) -> Stencil<S> {
        let cfg = &self.config;
        let res = cfg.resolution(level);
        let n = S::lit(res as f64);
        let mut frac = [S::zero(); 3];
        let mut scale = [S::zero(); 3];
        // per axis: hashed term for the lower and upper vertex, and the
        // matching interpolation factor
        let mut terms = [[0u32; 2]; 3];
        let mut factors = [[S::zero(); 2]; 3];
        let one = S::one();
        for i in 0..3 {
            let p = u[i] * n;
            // u >= 0, so truncation is the floor
            let c = p.to_u32().unwrap_or(0).min(res - 1);
            frac[i] = p - S::lit(c as f64);
            scale[i] = n / S::lit(cfg.bounds.max[i] - cfg.bounds.min[i]);
            terms[i] = [c.wrapping_mul(cfg.primes[i]), (c + 1).wrapping_mul(cfg.primes[i])];
            factors[i] = [one - frac[i], frac[i]];
        }
        let mask = cfg.table_size - 1;
        let mut rows = [0usize; 8];
        let mut weights = [S::zero(); 8];
        for corner in 0..8 {
            let (bx, by, bz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            rows[corner] = ((terms[0][bx] ^ terms[1][by] ^ terms[2][bz]) as usize) & mask;
            weights[corner] = factors[0][bx] * factors[1][by] * factors[2][bz];
        }
        Stencil {
            rows,
            weights,
            frac,
            scale,
        }
    }

    /// Writes the level-weighted encoding of `x` into `out` (length `L*F`).
    /// Levels whose weight is zero are skipped and left as zeros.
    pub fn encode_weighted(&self, x: [S; 3], level_weights: &[S], out: &mut [S]) -> Result<()> {
        let u = self.normalize(x)?;
        self.encode_normalized(&u, level_weights, out);
        Ok(())
    }

    fn encode_normalized(&self, u: &[S; 3], level_weights: &[S], out: &mut [S]) {
        let f = self.config.features_per_level;
        let t = self.config.table_size;
        debug_assert_eq!(out.len(), self.config.encoded_len());
        for (level, (&lw, block)) in level_weights.iter().zip(out.chunks_exact_mut(f)).enumerate() {
            block.iter_mut().for_each(|v| *v = S::zero());
            if lw == S::zero() {
                continue;
            }
            let st = self.stencil(level, u);
            let base = level * t * f;
            for (row, w) in st.rows.iter().zip(st.weights.iter()) {
                let w = *w * lw;
                let entry = &self.tables[base + row * f..base + row * f + f];
                for (o, e) in block.iter_mut().zip(entry) {
                    *o += w * *e;
                }
            }
        }
    }

    pub fn encode(&self, x: [S; 3], tdlf: &TdlfState) -> Result<EncodedFeature<S>> {
        let u = self.normalize(x)?;
        let weights = tdlf.weights::<S>();
        let ones = vec![S::one(); self.config.levels];
        let len = self.config.encoded_len();
        let mut per_level = vec![S::zero(); len];
        self.encode_normalized(&u, &ones, &mut per_level);
        let f = self.config.features_per_level;
        let values = per_level
            .iter()
            .enumerate()
            .map(|(j, v)| weights[j / f] * *v)
            .collect();
        Ok(EncodedFeature { values, per_level })
    }

    /// Reverse pass of [`encode_weighted`](Self::encode_weighted).
    ///
    /// `table_sink` receives `(flat index, d loss / d entry)` for every touched
    /// entry; the returned vector is `d loss / d x` in scene units (the exact
    /// derivative of the piecewise-trilinear interpolation).
    pub fn backward_weighted(
        &self,
        x: [S; 3],
        level_weights: &[S],
        upstream: &[S],
        mut table_sink: Option<&mut dyn FnMut(usize, S)>,
        want_x_grad: bool,
    ) -> Result<[S; 3]> {
        let u = self.normalize(x)?;
        let f = self.config.features_per_level;
        let t = self.config.table_size;
        let one = S::one();
        let mut xg = [S::zero(); 3];
        for (level, (&lw, up)) in level_weights.iter().zip(upstream.chunks_exact(f)).enumerate() {
            if lw == S::zero() || up.iter().all(|v| *v == S::zero()) {
                continue;
            }
            let st = self.stencil(level, &u);
            let base = level * t * f;
            for corner in 0..8 {
                let row = st.rows[corner];
                let start = base + row * f;
                if let Some(sink) = table_sink.as_deref_mut() {
                    let w = st.weights[corner] * lw;
                    for (j, g) in up.iter().enumerate() {
                        sink(start + j, w * *g);
                    }
                }
                if want_x_grad {
                    let entry = &self.tables[start..start + f];
                    let proj = crate::real::dot(entry, up) * lw;
                    for a in 0..3 {
                        let mut dw = one;
                        for i in 0..3 {
                            let bit = corner & (1 << i) != 0;
                            dw *= match (i == a, bit) {
                                (true, true) => one,
                                (true, false) => -one,
                                (false, true) => st.frac[i],
                                (false, false) => one - st.frac[i],
                            };
                        }
                        xg[a] += proj * dw * st.scale[a];
                    }
                }
            }
        }
        Ok(xg)
    }

    pub fn encode_backward(&self, x: [S; 3], tdlf: &TdlfState, upstream: &[S]) -> Result<EncodeGrad<S>> {
        if upstream.len() != self.config.encoded_len() {
            return Err(Error::domain(format!(
                "upstream has {} values, expected {}",
                upstream.len(),
                self.config.encoded_len()
            )));
        }
        let weights = tdlf.weights::<S>();
        let mut table_grads = Vec::new();
        let mut sink = |i: usize, g: S| table_grads.push((i, g));
        let x_grad = self.backward_weighted(x, &weights, upstream, Some(&mut sink), true)?;
        Ok(EncodeGrad { table_grads, x_grad })
    }

    /// Central differences with the step tied to the active level:
    /// `eps = 1 / N_{L_act}` in normalized coordinates.
    pub fn numerical_gradient(&self, x: [S; 3], tdlf: &TdlfState) -> Result<EncodingJacobian<S>> {
        self.numerical_gradient_with_step(x, tdlf, tdlf.numerical_step(&self.config))
    }

    /// Central differences with an explicit normalized step. Errors if any of
    /// the six probes leaves the bounds.
    pub fn numerical_gradient_with_step(
        &self,
        x: [S; 3],
        tdlf: &TdlfState,
        step: f64,
    ) -> Result<EncodingJacobian<S>> {
        self.normalize(x)?;
        let weights = tdlf.weights::<S>();
        let len = self.config.encoded_len();
        let steps = self.scene_steps(step);
        let columns = central_difference(
            |p| {
                let mut out = vec![S::zero(); len];
                self.encode_weighted(p, &weights, &mut out)?;
                Ok(out)
            },
            x,
            steps,
        )?;
        Ok(EncodingJacobian { columns })
    }

    /// Normalized step expressed in scene units per axis.
    pub fn scene_steps(&self, step: f64) -> [S; 3] {
        let e = self.config.bounds.extent();
        [S::lit(step * e[0]), S::lit(step * e[1]), S::lit(step * e[2])]
    }

    /// `d loss / d x` through central differences, with probes clamped into
    /// the bounds and the denominator set to the actual probe span.
    ///
    /// `scratch` must hold `2 * L * F` values.
    pub fn numerical_x_grad_clamped(
        &self,
        x: [S; 3],
        level_weights: &[S],
        steps: [S; 3],
        upstream: &[S],
        scratch: &mut [S],
    ) -> Result<[S; 3]> {
        self.normalize(x)?;
        let len = self.config.encoded_len();
        let (plus, minus) = scratch[..2 * len].split_at_mut(len);
        let b = &self.config.bounds;
        let mut g = [S::zero(); 3];
        for a in 0..3 {
            let lo = S::lit(b.min[a]);
            let hi = S::lit(b.max[a]);
            let mut xp = x;
            let mut xm = x;
            xp[a] = (x[a] + steps[a]).min(hi);
            xm[a] = (x[a] - steps[a]).max(lo);
            let span = xp[a] - xm[a];
            if span <= S::zero() {
                continue;
            }
            self.encode_weighted(xp, level_weights, plus)?;
            self.encode_weighted(xm, level_weights, minus)?;
            let mut acc = S::zero();
            for ((p, m), u) in plus.iter().zip(minus.iter()).zip(upstream) {
                acc += (*p - *m) * *u;
            }
            g[a] = acc / span;
        }
        Ok(g)
    }
}

/// Central-difference Jacobian of a vector field: column `a` is
/// `(f(x + h_a e_a) - f(x - h_a e_a)) / (2 h_a)`.
pub fn central_difference<S: Real, F>(f: F, x: [S; 3], steps: [S; 3]) -> Result<[Vec<S>; 3]>
where
    F: Fn([S; 3]) -> Result<Vec<S>>,
{
    let mut cols: [Vec<S>; 3] = Default::default();
    let two = S::lit(2.0);
    for a in 0..3 {
        let mut xp = x;
        let mut xm = x;
        xp[a] += steps[a];
        xm[a] -= steps[a];
        let fp = f(xp)?;
        let fm = f(xm)?;
        cols[a] = fp
            .iter()
            .zip(&fm)
            .map(|(p, m)| (*p - *m) / (two * steps[a]))
            .collect();
    }
    Ok(cols)
}
