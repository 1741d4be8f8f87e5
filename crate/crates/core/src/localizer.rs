//! Pose refinement against a trained map: left-multiplicative SE(3) updates
//! driven by the photometric L1 loss, with coarse-to-fine level filtering and
//! numerical encoding gradients as optional toggles.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{AdamConfig, AdamState, ExpDecay};
use crate::field::{BackwardSinks, PositionGrad, RadianceField, RayWorkspace};
use crate::geometry::{exp_se3, pose_error, ray_for_pixel, CameraIntrinsics, PoseSE3, Twist, Vec3};
use crate::hash_field::TdlfState;
use crate::image::Image;
use crate::mapper::RAYS_PER_CHUNK;
use crate::normalizer::{Normalizer, ShadowTruth};
use crate::renderer::{clipped_samples, mix_seed, RenderConfig};
use crate::{Error, Real, Result};

/// Largest tolerated `|R^T R - I|` entry of any iterate.
pub const ORTHONORMALITY_LIMIT: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizeConfig {
    pub iterations: usize,
    pub rays_per_iter: usize,
    pub samples_per_ray: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// Starting fraction of levels for the coarse-to-fine filter.
    pub alpha0: f64,
    pub use_tdlf: bool,
    pub use_numerical_grad: bool,
    pub loss_scale: f64,
    pub seed: u64,
    pub min_transmittance: f64,
    /// Leaves wall time out of the report so repeated runs serialize
    /// identically.
    pub deterministic: bool,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            rays_per_iter: 1024,
            samples_per_ray: 64,
            lr_initial: 1.2e-2,
            lr_final: 1.2e-3,
            alpha0: 0.5,
            use_tdlf: true,
            use_numerical_grad: true,
            loss_scale: 1024.0,
            seed: 0,
            min_transmittance: 1e-4,
            deterministic: false,
        }
    }
}

impl LocalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.rays_per_iter == 0 || self.samples_per_ray == 0 {
            return Err(Error::domain("iterations, rays_per_iter and samples_per_ray must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.alpha0) {
            return Err(Error::domain(format!("alpha0 {} outside [0, 1]", self.alpha0)));
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0) {
            return Err(Error::domain("learning rates must be positive"));
        }
        if !(self.loss_scale > 0.0 && self.loss_scale.is_finite()) {
            return Err(Error::domain("loss scale must be positive"));
        }
        Ok(())
    }

    /// Filter state at `progress` in `[0, 1]`.
    pub fn tdlf_at(&self, progress: f64, levels: usize) -> Result<TdlfState> {
        if self.use_tdlf {
            TdlfState::scheduled(progress, self.alpha0, levels)
        } else {
            Ok(TdlfState::open(levels))
        }
    }
}

/// One ray of a pose batch. Sample depths are fixed when the batch is drawn
/// so the loss is a smooth function of the pose around the anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseRay {
    pub pixel: [f64; 2],
    pub target: [f64; 3],
    /// Empty if the ray missed the scene bounds at the anchor pose.
    pub t_values: Vec<f64>,
    pub deltas: Vec<f64>,
}

/// Draws `n` random pixels of `target` and their sample depths at `pose`.
#[allow(clippy::too_many_arguments)]
pub fn sample_pose_rays<S: Real>(
    field: &RadianceField<S>,
    intr: &CameraIntrinsics,
    pose: &PoseSE3,
    target: &Image,
    n: usize,
    render: &RenderConfig,
    seed: u64,
) -> Result<Vec<PoseRay>> {
    if target.width != intr.width || target.height != intr.height {
        return Err(Error::domain("target image does not match the intrinsics"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (x, y) = (rng.random_range(0..intr.width), rng.random_range(0..intr.height));
            let ray_seed: u64 = rng.random();
            let pixel = [x as f64 + 0.5, y as f64 + 0.5];
            let ray = ray_for_pixel(intr, pose, pixel[0], pixel[1])?;
            let (t_values, deltas) = match clipped_samples(field.bounds(), &ray, render, ray_seed)? {
                Some(s) => (s.t_values, s.deltas),
                None => (Vec::new(), Vec::new()),
            };
            Ok(PoseRay {
                pixel,
                target: target.get(x, y),
                t_values,
                deltas,
            })
        })
        .collect()
}

/// Loss and its gradient with respect to a twist applied on the left of the
/// pose, at zero twist.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseGradient {
    /// Mean L1 color error per ray.
    pub loss: f64,
    /// `(omega, v)` ordering.
    pub grad: [f64; 6],
    /// Rays that miss the scene and contribute no gradient.
    pub missed_rays: usize,
    /// Numerical-gradient probes that had to be clamped at the bounds.
    pub clamped_probes: usize,
}

/// How `d HE / d x` is formed inside the pose gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncodingGrad {
    Analytic,
    /// Central differences with the step of the active filter level.
    Numerical,
}

/// Evaluates the batch at `pose`. With `want_grad` the gradient is chained
/// through compositing, the decoder and the encoding to the sample points
/// `x = o + t d` and the view direction, then to the twist:
/// `dL/domega = sum x_i x g_i + d x g_d`, `dL/dv = sum g_i`.
#[allow(clippy::too_many_arguments)]
pub fn pose_loss_and_gradient<S: Real>(
    field: &RadianceField<S>,
    intr: &CameraIntrinsics,
    pose: &PoseSE3,
    rays: &[PoseRay],
    tdlf: &TdlfState,
    mode: EncodingGrad,
    loss_scale: f64,
    min_transmittance: f64,
    want_grad: bool,
) -> Result<PoseGradient> {
    if rays.is_empty() {
        return Err(Error::domain("empty ray batch"));
    }
    let weights: Vec<S> = tdlf.weights();
    let position = match (want_grad, mode) {
        (false, _) => PositionGrad::None,
        (true, EncodingGrad::Analytic) => PositionGrad::Analytic,
        (true, EncodingGrad::Numerical) => PositionGrad::Numerical {
            steps: field.grid.scene_steps(tdlf.numerical_step(&field.grid.config)),
        },
    };
    let n = rays.len() as f64;
    let up_scale = S::lit(loss_scale / n);
    let partials: Vec<PoseGradient> = rays
        .par_chunks(RAYS_PER_CHUNK)
        .map(|chunk| -> Result<PoseGradient> {
            let mut acc = PoseGradient::default();
            let mut ws = RayWorkspace::new(field.grid.config.encoded_len());
            let mut positions: Vec<[S; 3]> = Vec::new();
            let mut deltas: Vec<S> = Vec::new();
            let mut world: Vec<Vec3> = Vec::new();
            for r in chunk {
                let ray = ray_for_pixel(intr, pose, r.pixel[0], r.pixel[1])?;
                if r.t_values.is_empty() {
                    acc.missed_rays += 1;
                    acc.loss += (0..3).map(|c| (field.background[c] - r.target[c]).abs()).sum::<f64>();
                    continue;
                }
                world.clear();
                world.extend(r.t_values.iter().map(|&t| ray.at(t)));
                positions.clear();
                positions.extend(world.iter().map(|p| field.to_grid_point([p.x, p.y, p.z])));
                deltas.clear();
                deltas.extend(r.deltas.iter().map(|&d| S::lit(d)));
                let dir = [ray.direction.x, ray.direction.y, ray.direction.z].map(S::lit);
                let color = field.trace_forward(dir, &positions, &deltas, &weights, S::lit(min_transmittance), &mut ws)?;
                let mut up = [S::zero(); 3];
                for c in 0..3 {
                    let diff = color[c].f64() - r.target[c];
                    acc.loss += diff.abs();
                    up[c] = if diff > 0.0 {
                        up_scale
                    } else if diff < 0.0 {
                        -up_scale
                    } else {
                        S::zero()
                    };
                }
                if !want_grad {
                    continue;
                }
                field.trace_backward(
                    &weights,
                    up,
                    BackwardSinks {
                        mlp: None,
                        tables: None,
                        position,
                        direction: true,
                    },
                    &mut ws,
                )?;
                acc.clamped_probes += ws.out_of_bounds;
                let mut g_omega = Vec3::zeros();
                let mut g_v = Vec3::zeros();
                for (x, g) in world.iter().zip(&ws.position_grads) {
                    let g = Vec3::new(g[0].f64(), g[1].f64(), g[2].f64());
                    g_omega += x.cross(&g);
                    g_v += g;
                }
                let gd = ws.direction_grad;
                g_omega += ray.direction.cross(&Vec3::new(gd[0].f64(), gd[1].f64(), gd[2].f64()));
                for a in 0..3 {
                    acc.grad[a] += g_omega[a];
                    acc.grad[3 + a] += g_v[a];
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = PoseGradient::default();
    for p in &partials {
        total.loss += p.loss;
        total.missed_rays += p.missed_rays;
        total.clamped_probes += p.clamped_probes;
        for a in 0..6 {
            total.grad[a] += p.grad[a];
        }
    }
    total.loss /= n;
    total.grad.iter_mut().for_each(|g| *g /= loss_scale);
    Ok(total)
}

/// Gradient of the batch loss at `pose` with rays drawn from the normalized
/// test image.
pub fn pose_gradient<S: Real>(
    field: &RadianceField<S>,
    intr: &CameraIntrinsics,
    target: &Image,
    pose: &PoseSE3,
    tdlf: &TdlfState,
    cfg: &LocalizeConfig,
    seed: u64,
) -> Result<PoseGradient> {
    let render = render_config(cfg, seed);
    let rays = sample_pose_rays(field, intr, pose, target, cfg.rays_per_iter, &render, seed)?;
    pose_loss_and_gradient(
        field,
        intr,
        pose,
        &rays,
        tdlf,
        mode_of(cfg),
        cfg.loss_scale,
        cfg.min_transmittance,
        true,
    )
}

fn render_config(cfg: &LocalizeConfig, seed: u64) -> RenderConfig {
    RenderConfig {
        samples_per_ray: cfg.samples_per_ray,
        jitter: true,
        seed,
        min_transmittance: cfg.min_transmittance,
        ..RenderConfig::default()
    }
}

fn mode_of(cfg: &LocalizeConfig) -> EncodingGrad {
    if cfg.use_numerical_grad {
        EncodingGrad::Numerical
    } else {
        EncodingGrad::Analytic
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub loss: f64,
    pub alpha: f64,
    /// Pose after this iteration's update.
    pub pose: PoseSE3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizeReport {
    pub iterations: Vec<IterationRecord>,
    pub final_pose: PoseSE3,
    pub initial_pose: PoseSE3,
    pub translation_error: Option<f64>,
    pub rotation_error_deg: Option<f64>,
    pub initial_translation_error: Option<f64>,
    pub initial_rotation_error_deg: Option<f64>,
    pub missed_rays: usize,
    pub clamped_probes: usize,
    /// Iteration at which a non-finite pose or loss stopped the run.
    pub failed_at: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

/// Runs the refinement from `init`. The test image is normalized once with
/// `normalizer` (the oracle variant consults `truth`).
#[allow(clippy::too_many_arguments)]
pub fn localize<S: Real>(
    field: &RadianceField<S>,
    intr: &CameraIntrinsics,
    test_image: &Image,
    init: &PoseSE3,
    cfg: &LocalizeConfig,
    normalizer: &Normalizer,
    truth: Option<&ShadowTruth>,
    ground_truth: Option<&PoseSE3>,
) -> Result<LocalizeReport> {
    cfg.validate()?;
    let start = Instant::now();
    let target = normalizer.normalize(test_image, truth)?;
    let levels = field.levels();
    let mut adam = AdamState::<f64>::new(
        AdamConfig::new(ExpDecay {
            initial: cfg.lr_initial,
            final_lr: cfg.lr_final,
            total_steps: cfg.iterations as u64,
        }),
        &[6],
    );
    let mut pose = *init;
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut tdlf = cfg.tdlf_at(0.0, levels)?;
    let mut missed = 0;
    let mut clamped = 0;
    let mut failed_at = None;
    for it in 0..cfg.iterations {
        tdlf.advance(it as f64 / cfg.iterations as f64);
        let g = pose_gradient(field, intr, &target, &pose, &tdlf, cfg, mix_seed(cfg.seed, it as u64))?;
        missed += g.missed_rays;
        clamped += g.clamped_probes;
        if !g.loss.is_finite() || g.grad.iter().any(|v| !v.is_finite()) {
            log::warn!("localization stopped at iteration {it}: non-finite loss or gradient");
            failed_at = Some(it);
            break;
        }
        let mut xi = [0.0f64; 6];
        adam.step(&mut [&mut xi], &[&g.grad], 1.0)?;
        let next = exp_se3(&Twist::from_array(xi)).compose(&pose);
        if next.orthonormality_error() > ORTHONORMALITY_LIMIT || !next.translation.iter().all(|v| v.is_finite()) {
            failed_at = Some(it);
            break;
        }
        pose = next;
        records.push(IterationRecord {
            loss: g.loss,
            alpha: tdlf.alpha,
            pose,
        });
    }
    let errors = ground_truth.map(|gt| pose_error(&pose, gt));
    let initial = ground_truth.map(|gt| pose_error(init, gt));
    Ok(LocalizeReport {
        iterations: records,
        final_pose: pose,
        initial_pose: *init,
        translation_error: errors.map(|e| e.0),
        rotation_error_deg: errors.map(|e| e.1),
        initial_translation_error: initial.map(|e| e.0),
        initial_rotation_error_deg: initial.map(|e| e.1),
        missed_rays: missed,
        clamped_probes: clamped,
        failed_at,
        wall_time_s: (!cfg.deterministic).then(|| start.elapsed().as_secs_f64()),
    })
}

/// Ground truth moved by `translation` scene units along a random direction
/// and rotated by `rotation_deg` about a random axis through the camera
/// center.
pub fn perturb_pose(gt: &PoseSE3, translation: f64, rotation_deg: f64, seed: u64) -> PoseSE3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = || loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    };
    let dir = unit();
    let axis = unit();
    let r = PoseSE3::from_axis_angle(&axis, rotation_deg.to_radians(), Vec3::zeros());
    PoseSE3 {
        rotation: r.rotation * gt.rotation,
        translation: gt.translation + dir * translation,
    }
}

/// Initial pose error of one ablation cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCell {
    /// Label in the reference unit (e.g. meters of the original experiment).
    pub label: f64,
    /// Translation in scene units.
    pub translation: f64,
    pub rotation_deg: f64,
}

/// The four combinations of the two toggles.
pub const TOGGLES: [(bool, bool); 4] = [(false, false), (false, true), (true, false), (true, true)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: ErrorCell,
    pub tdlf: bool,
    pub numgrad: bool,
    /// Mean over positions that finished.
    pub mean_translation_error: Option<f64>,
    pub mean_rotation_error_deg: Option<f64>,
    pub translation_errors: Vec<Option<f64>>,
    pub rotation_errors_deg: Vec<Option<f64>>,
    /// Positions whose run failed.
    pub dnf: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationHeader {
    pub scene_extent: f64,
    /// Scene units per reference unit of the cell labels.
    pub units_per_label: f64,
    pub positions: usize,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub header: AblationHeader,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, label: f64, tdlf: bool, numgrad: bool) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.cell.label == label && r.tdlf == tdlf && r.numgrad == numgrad)
    }

    /// Plain-text table: one line per cell, translation error per toggle.
    pub fn to_table(&self) -> String {
        let mut s = String::from("initial   baseline  +numgrad  +tdlf     +both\n");
        let mut labels: Vec<f64> = self.rows.iter().map(|r| r.cell.label).collect();
        labels.dedup();
        for l in labels {
            s.push_str(&format!("{l:<9.3}"));
            for (t, n) in TOGGLES {
                let v = self.row(l, t, n).and_then(|r| r.mean_translation_error);
                match v {
                    Some(v) => s.push_str(&format!(" {v:<9.4}")),
                    None => s.push_str(" DNF      "),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// A test view with its ground-truth pose.
#[derive(Clone, Debug)]
pub struct TestView {
    pub image: Image,
    pub pose: PoseSE3,
    pub truth: Option<ShadowTruth>,
}

/// Localizes every view from every initial-error cell under the four toggle
/// combinations. Perturbation directions depend on the position only, so all
/// toggles start from the same poses.
#[allow(clippy::too_many_arguments)]
pub fn ablation_sweep<S: Real>(
    field: &RadianceField<S>,
    intr: &CameraIntrinsics,
    views: &[TestView],
    grid: &[ErrorCell],
    units_per_label: f64,
    cfg: &LocalizeConfig,
    normalizer: &Normalizer,
) -> Result<AblationReport> {
    if views.is_empty() {
        return Err(Error::domain("ablation needs at least one position"));
    }
    let mut rows = Vec::new();
    for cell in grid {
        for (tdlf, numgrad) in TOGGLES {
            let run_cfg = LocalizeConfig {
                use_tdlf: tdlf,
                use_numerical_grad: numgrad,
                ..cfg.clone()
            };
            let mut t_err = Vec::new();
            let mut r_err = Vec::new();
            for (p, v) in views.iter().enumerate() {
                let init = perturb_pose(&v.pose, cell.translation, cell.rotation_deg, mix_seed(cfg.seed, p as u64));
                let out = localize(field, intr, &v.image, &init, &run_cfg, normalizer, v.truth.as_ref(), Some(&v.pose));
                match out {
                    Ok(r) if r.failed_at.is_none() => {
                        t_err.push(r.translation_error);
                        r_err.push(r.rotation_error_deg);
                    }
                    Ok(_) => {
                        t_err.push(None);
                        r_err.push(None);
                    }
                    Err(e) => {
                        log::warn!("ablation run failed: {e}");
                        t_err.push(None);
                        r_err.push(None);
                    }
                }
            }
            let mean = |v: &[Option<f64>]| {
                let ok: Vec<f64> = v.iter().flatten().copied().collect();
                (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
            };
            let row = AblationRow {
                cell: *cell,
                tdlf,
                numgrad,
                mean_translation_error: mean(&t_err),
                mean_rotation_error_deg: mean(&r_err),
                dnf: t_err.iter().filter(|e| e.is_none()).count(),
                translation_errors: t_err,
                rotation_errors_deg: r_err,
            };
            log::info!(
                "ablation cell {} tdlf={} numgrad={}: mean translation error {:?}",
                cell.label,
                tdlf,
                numgrad,
                row.mean_translation_error
            );
            rows.push(row);
        }
    }
    Ok(AblationReport {
        header: AblationHeader {
            scene_extent: field.bounds().max_extent(),
            units_per_label,
            positions: views.len(),
            iterations: cfg.iterations,
            seed: cfg.seed,
        },
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perturbation_has_requested_size() {
        let gt = PoseSE3::look_at(&Vec3::new(1.0, 0.5, 1.0), &Vec3::zeros(), &Vec3::y()).unwrap();
        let p = perturb_pose(&gt, 0.05, 5.0, 3);
        let (t, r) = pose_error(&p, &gt);
        assert!((t - 0.05).abs() < 1e-12);
        assert!((r - 5.0).abs() < 1e-9);
        assert_eq!(perturb_pose(&gt, 0.05, 5.0, 3), p);
    }

    #[test]
    fn config_checks() {
        let mut c = LocalizeConfig::default();
        c.validate().unwrap();
        c.alpha0 = 1.5;
        assert!(c.validate().is_err());
        let c = LocalizeConfig {
            use_tdlf: false,
            ..LocalizeConfig::default()
        };
        assert!(c.tdlf_at(0.0, 16).unwrap().is_open());
        let c = LocalizeConfig::default();
        assert_eq!(c.tdlf_at(0.0, 16).unwrap().alpha, 8.0);
    }
}
