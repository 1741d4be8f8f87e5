//! The learned radiance field: hash grid + decoder, and per-ray forward and
//! reverse passes shared by map training and pose refinement.

use crate::decoder::{sh_encode_with_grad, MlpGrads, MlpParams, MlpScratch, RadianceSample, SH_DIM};
use crate::geometry::Aabb;
use crate::hash_field::{HashGrid, HashGridConfig};
use crate::renderer::{composite_backward_into, composite_into};
use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField<S> {
    pub grid: HashGrid<S>,
    pub mlp: MlpParams<S>,
    pub background: [f64; 3],
}

impl<S: Real> RadianceField<S> {
    /// Randomly initialized field (small uniform tables, He-uniform MLP).
    pub fn new(config: HashGridConfig, background: [f64; 3], seed: u64) -> Result<Self> {
        let grid = HashGrid::random(config, seed)?;
        let mlp = MlpParams::he_uniform(grid.config.encoded_len(), seed.wrapping_add(1));
        Ok(Self {
            grid,
            mlp,
            background,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.config.validate()?;
        self.mlp.validate()?;
        if self.mlp.feature_len() != self.grid.config.encoded_len() {
            return Err(Error::domain("decoder input width does not match the encoding"));
        }
        Ok(())
    }

    pub fn bounds(&self) -> &Aabb {
        &self.grid.config.bounds
    }

    pub fn levels(&self) -> usize {
        self.grid.config.levels
    }

    pub fn cast<T: Real>(&self) -> RadianceField<T> {
        RadianceField {
            grid: self.grid.cast(),
            mlp: self.mlp.cast(),
            background: self.background,
        }
    }

    /// Converts a scene point to the working precision, clamped so rounding
    /// cannot push it outside the bounds.
    pub fn to_grid_point(&self, x: [f64; 3]) -> [S; 3] {
        let b = self.bounds();
        let mut out = [S::zero(); 3];
        for i in 0..3 {
            out[i] = S::lit(x[i]).max(S::lit(b.min[i])).min(S::lit(b.max[i]));
        }
        out
    }

    /// Single query `F(x, d)` with explicit level weights.
    pub fn query(&self, x: [S; 3], d: [S; 3], level_weights: &[S]) -> Result<RadianceSample<S>> {
        let mut enc = vec![S::zero(); self.grid.config.encoded_len()];
        self.grid.encode_weighted(x, level_weights, &mut enc)?;
        let sh = crate::decoder::sh_encode(d)?;
        crate::decoder::decode(&self.mlp, &enc, &sh)
    }

    /// All parameter tensors: hash tables first, then the MLP.
    pub fn tensors_mut(&mut self) -> Vec<&mut [S]> {
        let mut out: Vec<&mut [S]> = vec![self.grid.tables.as_mut_slice()];
        out.extend(self.mlp.tensors_mut());
        out
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        let mut out = vec![self.grid.tables.len()];
        out.extend(self.mlp.tensors().iter().map(|t| t.len()));
        out
    }
}

/// How position gradients are formed in the reverse pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PositionGrad<S> {
    None,
    /// Exact derivative of the trilinear interpolation.
    Analytic,
    /// Central differences with per-axis scene-unit steps.
    Numerical { steps: [S; 3] },
}

/// Per-ray buffers, reused across rays to avoid allocation.
pub struct RayWorkspace<S> {
    scratches: Vec<MlpScratch<S>>,
    samples: Vec<RadianceSample<S>>,
    positions: Vec<[S; 3]>,
    deltas: Vec<S>,
    used: usize,
    sh: [S; SH_DIM],
    sh_jac: [[S; 3]; SH_DIM],
    enc: Vec<S>,
    feature_grad: Vec<S>,
    probe: Vec<S>,
    grad_c: Vec<[S; 3]>,
    grad_sigma: Vec<S>,
    /// d loss / d position for each used sample after [`RadianceField::trace_backward`].
    pub position_grads: Vec<[S; 3]>,
    /// d loss / d direction after [`RadianceField::trace_backward`].
    pub direction_grad: [S; 3],
    /// Number of position probes that had to be clamped or rejected.
    pub out_of_bounds: usize,
}

impl<S: Real> RayWorkspace<S> {
    pub fn new(feature_len: usize) -> Self {
        Self {
            scratches: Vec::new(),
            samples: Vec::new(),
            positions: Vec::new(),
            deltas: Vec::new(),
            used: 0,
            sh: [S::zero(); SH_DIM],
            sh_jac: [[S::zero(); 3]; SH_DIM],
            enc: vec![S::zero(); feature_len],
            feature_grad: vec![S::zero(); feature_len],
            probe: vec![S::zero(); 2 * feature_len],
            grad_c: Vec::new(),
            grad_sigma: Vec::new(),
            position_grads: Vec::new(),
            direction_grad: [S::zero(); 3],
            out_of_bounds: 0,
        }
    }

    /// Samples that contributed to the last traced color.
    pub fn used(&self) -> usize {
        self.used
    }
}

/// Gradient destinations for [`RadianceField::trace_backward`].
pub struct BackwardSinks<'a, S> {
    pub mlp: Option<&'a mut MlpGrads<S>>,
    pub tables: Option<&'a mut dyn FnMut(usize, S)>,
    pub position: PositionGrad<S>,
    pub direction: bool,
}

impl<S: Real> RadianceField<S> {
    /// Renders one ray through the given sample positions and returns the
    /// composited color. Marching stops once transmittance drops below
    /// `min_transmittance`; the remainder is composited against the
    /// background. State for the reverse pass is kept in `ws`.
    pub fn trace_forward(
        &self,
        direction: [S; 3],
        positions: &[[S; 3]],
        deltas: &[S],
        level_weights: &[S],
        min_transmittance: S,
        ws: &mut RayWorkspace<S>,
    ) -> Result<[S; 3]> {
        let n = positions.len();
        if deltas.len() != n {
            return Err(Error::domain("positions and deltas differ in length"));
        }
        let (sh, jac) = sh_encode_with_grad(direction)?;
        ws.sh = sh;
        ws.sh_jac = jac;
        let flen = self.grid.config.encoded_len();
        while ws.scratches.len() < n {
            ws.scratches.push(MlpScratch::new(flen));
        }
        ws.samples.clear();
        ws.positions.clear();
        ws.deltas.clear();
        ws.out_of_bounds = 0;
        let mut transmittance = S::one();
        for i in 0..n {
            if transmittance < min_transmittance {
                break;
            }
            self.grid.encode_weighted(positions[i], level_weights, &mut ws.enc)?;
            let s = self.mlp.forward(&ws.enc, &ws.sh, &mut ws.scratches[i]);
            transmittance *= (-s.sigma * deltas[i]).exp();
            ws.samples.push(s);
            ws.positions.push(positions[i]);
            ws.deltas.push(deltas[i]);
        }
        ws.used = ws.samples.len();
        let bg = self.background.map(S::lit);
        let (color, _) = composite_into(&ws.samples, &ws.deltas, bg);
        Ok(color)
    }

    /// Reverse pass of the last [`trace_forward`](Self::trace_forward) in `ws`.
    pub fn trace_backward(
        &self,
        level_weights: &[S],
        upstream_color: [S; 3],
        sinks: BackwardSinks<'_, S>,
        ws: &mut RayWorkspace<S>,
    ) -> Result<()> {
        let BackwardSinks {
            mut mlp,
            mut tables,
            position,
            direction,
        } = sinks;
        let bg = self.background.map(S::lit);
        let n = ws.used;
        ws.grad_c.resize(n, [S::zero(); 3]);
        ws.grad_sigma.resize(n, S::zero());
        composite_backward_into(
            &ws.samples,
            &ws.deltas,
            bg,
            upstream_color,
            &mut ws.grad_c,
            &mut ws.grad_sigma,
        );
        ws.position_grads.clear();
        ws.direction_grad = [S::zero(); 3];
        let mut sh_total = [S::zero(); SH_DIM];
        let mut sh_grad = [S::zero(); SH_DIM];
        for i in 0..n {
            self.mlp.backward(
                &mut ws.scratches[i],
                ws.grad_c[i],
                ws.grad_sigma[i],
                mlp.as_deref_mut(),
                &mut ws.feature_grad,
                direction.then_some(&mut sh_grad),
            );
            if direction {
                for (t, g) in sh_total.iter_mut().zip(&sh_grad) {
                    *t += *g;
                }
            }
            let x = ws.positions[i];
            let want_analytic = matches!(position, PositionGrad::Analytic);
            let xg = if tables.is_some() || want_analytic {
                self.grid.backward_weighted(
                    x,
                    level_weights,
                    &ws.feature_grad,
                    match tables {
                        Some(ref mut t) => Some(&mut **t as &mut dyn FnMut(usize, S)),
                        None => None,
                    },
                    want_analytic,
                )?
            } else {
                [S::zero(); 3]
            };
            match position {
                PositionGrad::None => {}
                PositionGrad::Analytic => ws.position_grads.push(xg),
                PositionGrad::Numerical { steps } => {
                    let g = self.grid.numerical_x_grad_clamped(
                        x,
                        level_weights,
                        steps,
                        &ws.feature_grad,
                        &mut ws.probe,
                    )?;
                    let b = self.bounds();
                    for a in 0..3 {
                        let xa = x[a].f64();
                        let h = steps[a].f64();
                        if xa + h > b.max[a] || xa - h < b.min[a] {
                            ws.out_of_bounds += 1;
                            break;
                        }
                    }
                    ws.position_grads.push(g);
                }
            }
        }
        if direction {
            for a in 0..3 {
                ws.direction_grad[a] = (0..SH_DIM).map(|k| sh_total[k] * ws.sh_jac[k][a]).sum();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hash_field::{HashGridConfig, TdlfState};

    #[test]
    fn zero_decoder_gives_constant_sample() {
        let cfg = HashGridConfig::with_bounds(Aabb::new([-0.5; 3], [0.5; 3]).unwrap());
        let mut f = RadianceField::<f64>::new(cfg, [1.0; 3], 1).unwrap();
        f.mlp = MlpParams::zeros(f.grid.config.encoded_len());
        let w = TdlfState::open(16).weights::<f64>();
        let s = f.query([0.1, 0.0, -0.2], [0.0, 0.0, 1.0], &w).unwrap();
        assert_eq!(s.color, [0.5; 3]);
        assert!((s.sigma - 2f64.ln()).abs() < 1e-15);
        f.validate().unwrap();
    }
}
