//! Map construction: fits the radiance field to normalized posed images with
//! an L1 ray loss.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, TrainMeta, CHECKPOINT_VERSION, MAGIC,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{AdamConfig, AdamState, ExpDecay, MlpGrads};
use crate::field::{BackwardSinks, PositionGrad, RadianceField, RayWorkspace};
use crate::geometry::{ray_for_pixel, CameraIntrinsics, PoseSE3};
use crate::hash_field::HashGridConfig;
use crate::image::Image;
use crate::normalizer::Normalizer;
use crate::renderer::{clipped_samples, mix_seed, RenderConfig};
use crate::scenegen::DatasetManifest;
use crate::{Error, Result};

/// Upper bound on samples evaluated per optimizer step.
pub const MAX_POINTS_PER_BATCH: usize = 1 << 18;
/// Rays per work unit; partial results are reduced in unit order so the
/// outcome does not depend on the thread count.
pub(crate) const RAYS_PER_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub rays_per_batch: usize,
    pub samples_per_ray: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub loss_scale: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub normalizer: Normalizer,
    /// Lighting tags to train on; `None` uses every frame.
    pub lighting: Option<Vec<String>>,
    pub levels: usize,
    pub log2_table_size: u32,
    pub min_transmittance: f64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            rays_per_batch: 4096,
            samples_per_ray: 64,
            lr_initial: 1e-2,
            lr_final: 1e-4,
            loss_scale: 1024.0,
            seed: 0,
            deterministic: true,
            normalizer: Normalizer::default(),
            lighting: None,
            levels: 16,
            log2_table_size: 14,
            min_transmittance: 1e-4,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::domain("iterations must be > 0"));
        }
        if self.rays_per_batch == 0 || self.samples_per_ray == 0 {
            return Err(Error::domain("rays_per_batch and samples_per_ray must be > 0"));
        }
        if self.rays_per_batch * self.samples_per_ray > MAX_POINTS_PER_BATCH {
            return Err(Error::domain(format!(
                "{} rays x {} samples exceeds the {} point budget",
                self.rays_per_batch, self.samples_per_ray, MAX_POINTS_PER_BATCH
            )));
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0) {
            return Err(Error::domain("learning rates must be positive"));
        }
        if !(self.loss_scale > 0.0 && self.loss_scale.is_finite()) {
            return Err(Error::domain("loss scale must be positive"));
        }
        if self.log2_table_size > 24 {
            return Err(Error::domain("table size above 2^24 is not supported"));
        }
        Ok(())
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            samples_per_ray: self.samples_per_ray,
            jitter: true,
            seed: self.seed,
            min_transmittance: self.min_transmittance,
            ..RenderConfig::default()
        }
    }
}

/// A normalized training view.
#[derive(Clone, Debug)]
pub struct TrainView {
    pub pose: PoseSE3,
    pub image: Image,
}

/// Loads the selected frames and applies the normalizer once, offline.
pub fn prepare_views(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<Vec<TrainView>> {
    let selected: Vec<usize> = (0..manifest.frames.len())
        .filter(|&i| {
            cfg.lighting
                .as_ref()
                .is_none_or(|tags| tags.iter().any(|t| *t == manifest.frames[i].lighting))
        })
        .collect();
    if selected.is_empty() {
        return Err(Error::domain("no frames match the requested lighting tags"));
    }
    selected
        .par_iter()
        .map(|&i| {
            let img = manifest.load_image(i)?;
            let truth = manifest.truth(i)?;
            Ok(TrainView {
                pose: manifest.frames[i].pose,
                image: cfg.normalizer.normalize(&img, Some(&truth))?,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    /// Mean L1 per ray at each iteration.
    pub losses: Vec<f64>,
    /// Iteration at which a non-finite loss or gradient stopped training; the
    /// checkpoint then holds the parameters from before that step.
    pub diverged_at: Option<u64>,
}

struct ChunkGrads {
    loss: f64,
    mlp: MlpGrads<f32>,
    tables: Vec<(u32, f32)>,
}

/// Ray picked for one training step.
struct TrainRay {
    view: usize,
    pixel: u32,
    seed: u64,
}

pub fn train_map(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let views = prepare_views(manifest, cfg)?;
    train_on_views(&views, &manifest.intrinsics, manifest, cfg)
}

/// Training loop over already normalized views.
pub fn train_on_views(
    views: &[TrainView],
    intr: &CameraIntrinsics,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::domain("no training views"));
    }
    let mut grid = HashGridConfig::with_bounds(manifest.bounds);
    grid.levels = cfg.levels;
    grid.table_size = 1 << cfg.log2_table_size;
    let mut field = RadianceField::<f32>::new(grid, manifest.background, cfg.seed)?;
    let shapes = field.tensor_sizes();
    let mut adam = AdamState::<f32>::new(
        AdamConfig::new(ExpDecay {
            initial: cfg.lr_initial,
            final_lr: cfg.lr_final,
            total_steps: cfg.iterations,
        }),
        &shapes,
    );
    let weights = vec![1.0f32; field.levels()];
    let render = cfg.render_config();
    let pixels = intr.width * intr.height;
    let mut table_grad = vec![0.0f32; shapes[0]];
    let mut mlp_grad = field.mlp.zero_like();
    let mut losses = Vec::with_capacity(cfg.iterations as usize);
    let mut diverged_at = None;
    let scale = cfg.loss_scale as f32;

    for iter in 0..cfg.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, iter));
        let rays: Vec<TrainRay> = (0..cfg.rays_per_batch)
            .map(|_| TrainRay {
                view: rng.random_range(0..views.len()),
                pixel: rng.random_range(0..pixels),
                seed: rng.random(),
            })
            .collect();
        let upstream_scale = scale / cfg.rays_per_batch as f32;
        let chunks: Vec<ChunkGrads> = rays
            .par_chunks(RAYS_PER_CHUNK)
            .map(|chunk| {
                let mut out = ChunkGrads {
                    loss: 0.0,
                    mlp: field.mlp.zero_like(),
                    tables: Vec::new(),
                };
                let mut ws = RayWorkspace::new(field.grid.config.encoded_len());
                for r in chunk {
                    let view = &views[r.view];
                    let (px, py) = (r.pixel % intr.width, r.pixel / intr.width);
                    let target = view.image.get(px, py);
                    let ray = ray_for_pixel(intr, &view.pose, px as f64 + 0.5, py as f64 + 0.5)?;
                    let Some(samples) = clipped_samples(field.bounds(), &ray, &render, r.seed)? else {
                        out.loss += (0..3).map(|c| (field.background[c] - target[c]).abs()).sum::<f64>();
                        continue;
                    };
                    let positions: Vec<[f32; 3]> = samples.positions.iter().map(|p| field.to_grid_point(*p)).collect();
                    let deltas: Vec<f32> = samples.deltas.iter().map(|&d| d as f32).collect();
                    let dir = [ray.direction.x as f32, ray.direction.y as f32, ray.direction.z as f32];
                    let color = field.trace_forward(dir, &positions, &deltas, &weights, cfg.min_transmittance as f32, &mut ws)?;
                    let mut up = [0.0f32; 3];
                    for c in 0..3 {
                        let diff = color[c] as f64 - target[c];
                        out.loss += diff.abs();
                        up[c] = if diff > 0.0 {
                            upstream_scale
                        } else if diff < 0.0 {
                            -upstream_scale
                        } else {
                            0.0
                        };
                    }
                    let tables = &mut out.tables;
                    let mut sink = |i: usize, g: f32| tables.push((i as u32, g));
                    field.trace_backward(
                        &weights,
                        up,
                        BackwardSinks {
                            mlp: Some(&mut out.mlp),
                            tables: Some(&mut sink),
                            position: PositionGrad::None,
                            direction: false,
                        },
                        &mut ws,
                    )?;
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;

        table_grad.iter_mut().for_each(|g| *g = 0.0);
        mlp_grad.fill_zero();
        let mut loss = 0.0;
        for c in &chunks {
            loss += c.loss;
            mlp_grad.add_assign(&c.mlp);
            for &(i, g) in &c.tables {
                table_grad[i as usize] += g;
            }
        }
        let loss = loss / cfg.rays_per_batch as f64;
        let grads_finite =
            table_grad.iter().all(|g| g.is_finite()) && mlp_grad.tensors().iter().all(|t| t.iter().all(|g| g.is_finite()));
        if !loss.is_finite() || !grads_finite {
            log::warn!("training diverged at iteration {iter} (loss {loss})");
            diverged_at = Some(iter);
            break;
        }
        losses.push(loss);
        let mut grads: Vec<&[f32]> = vec![&table_grad];
        grads.extend(mlp_grad.tensors());
        adam.step(&mut field.tensors_mut(), &grads, cfg.loss_scale)?;
        if cfg.log_every > 0 && (iter % cfg.log_every == 0 || iter + 1 == cfg.iterations) {
            log::info!("train iter {iter:>6} loss {loss:.5} lr {:.2e}", adam.config.schedule.at(iter));
        }
    }

    let meta = TrainMeta {
        iterations: losses.len() as u64,
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        seed: cfg.seed,
    };
    Ok(TrainOutput {
        checkpoint: Checkpoint { field, meta },
        losses,
        diverged_at,
    })
}

/// Means of consecutive, non-overlapping windows of the loss curve.
pub fn windowed_means(losses: &[f64], window: usize) -> Vec<f64> {
    losses
        .chunks(window.max(1))
        .filter(|c| c.len() == window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_limits() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.rays_per_batch = 8192;
        assert!(c.validate().is_err());
        c.rays_per_batch = 16;
        c.iterations = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn windows() {
        let l = [4.0, 2.0, 3.0, 1.0, 9.0];
        assert_eq!(windowed_means(&l, 2), vec![3.0, 2.0]);
    }
}
