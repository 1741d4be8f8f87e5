//! Ray sampling, emission-absorption compositing, the L1 photometric loss and
//! image metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::RadianceSample;
use crate::field::RadianceField;
use crate::geometry::{ray_for_pixel, Aabb, CameraIntrinsics, PoseSE3, Ray};
use crate::hash_field::TdlfState;
use crate::image::Image;
use crate::{Error, Real, Result};

/// Stratified samples along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub t_values: Vec<f64>,
    pub positions: Vec<[f64; 3]>,
    /// `t[i+1] - t[i]`; the last one is `far - t[n-1]`.
    pub deltas: Vec<f64>,
}

/// SplitMix64 finalizer, used to derive independent per-ray seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` stratified samples on `[near, far]`: bin centers, or uniform within
/// each bin when `jitter` is set.
pub fn sample_ray(ray: &Ray, near: f64, far: f64, n: usize, jitter: bool, seed: u64) -> Result<RaySamples> {
    if !(near >= 0.0 && far > near && far.is_finite()) || n == 0 {
        return Err(Error::domain(format!(
            "invalid sample range [{near}, {far}] with {n} samples"
        )));
    }
    let step = (far - near) / n as f64;
    let mut rng = jitter.then(|| ChaCha8Rng::seed_from_u64(seed));
    let t_values: Vec<f64> = (0..n)
        .map(|i| {
            let offset = match rng.as_mut() {
                Some(r) => r.random::<f64>(),
                None => 0.5,
            };
            near + (i as f64 + offset) * step
        })
        .collect();
    let mut deltas: Vec<f64> = t_values.windows(2).map(|w| w[1] - w[0]).collect();
    deltas.push(far - t_values[n - 1]);
    // jittered neighbours can coincide only with probability zero, but keep
    // the positivity invariant regardless
    deltas.iter_mut().for_each(|d| *d = d.max(1e-12 * step));
    let positions = t_values
        .iter()
        .map(|&t| {
            let p = ray.at(t);
            [p.x, p.y, p.z]
        })
        .collect();
    Ok(RaySamples {
        t_values,
        positions,
        deltas,
    })
}

/// Emission-absorption quadrature without argument checks.
pub(crate) fn composite_into<S: Real>(samples: &[RadianceSample<S>], deltas: &[S], background: [S; 3]) -> ([S; 3], S) {
    let mut t = S::one();
    let mut color = [S::zero(); 3];
    for (s, &d) in samples.iter().zip(deltas) {
        let alpha = S::one() - (-s.sigma * d).exp();
        let w = t * alpha;
        for c in 0..3 {
            color[c] += w * s.color[c];
        }
        t *= S::one() - alpha;
    }
    for c in 0..3 {
        color[c] += t * background[c];
    }
    (color, t)
}

/// `a_i = 1 - exp(-sigma_i delta_i)`, `T_1 = 1`, `T_{i+1} = T_i (1 - a_i)`,
/// `color = sum T_i a_i c_i + T_final * background`.
pub fn composite<S: Real>(samples: &[RadianceSample<S>], deltas: &[S], background: [S; 3]) -> Result<([S; 3], S)> {
    check_composite_args(samples, deltas)?;
    Ok(composite_into(samples, deltas, background))
}

fn check_composite_args<S: Real>(samples: &[RadianceSample<S>], deltas: &[S]) -> Result<()> {
    if samples.len() != deltas.len() {
        return Err(Error::domain("samples and deltas differ in length"));
    }
    if samples.iter().any(|s| !(s.sigma >= S::zero())) || deltas.iter().any(|d| !(*d > S::zero())) {
        return Err(Error::domain("densities must be >= 0 and deltas > 0"));
    }
    Ok(())
}

/// Compositing weights `T_i a_i` and the final transmittance.
pub fn composite_weights<S: Real>(samples: &[RadianceSample<S>], deltas: &[S]) -> (Vec<S>, S) {
    let mut t = S::one();
    let mut w = Vec::with_capacity(samples.len());
    for (s, &d) in samples.iter().zip(deltas) {
        let alpha = S::one() - (-s.sigma * d).exp();
        w.push(t * alpha);
        t *= S::one() - alpha;
    }
    (w, t)
}

pub(crate) fn composite_backward_into<S: Real>(
    samples: &[RadianceSample<S>],
    deltas: &[S],
    background: [S; 3],
    upstream: [S; 3],
    grad_color: &mut [[S; 3]],
    grad_sigma: &mut [S],
) {
    let n = samples.len();
    // suffix[c] = sum_{j > i} T_j a_j c_j + T_final * background, accumulated
    // back to front
    let (_, t_final) = composite_weights(samples, deltas);
    let mut suffix = [S::zero(); 3];
    for c in 0..3 {
        suffix[c] = t_final * background[c];
    }
    // transmittance after sample i, walking backwards
    let mut t_after = t_final;
    for i in (0..n).rev() {
        let s = &samples[i];
        let decay = (-s.sigma * deltas[i]).exp();
        let t_before = if decay > S::zero() {
            t_after / decay
        } else {
            // fully opaque sample: recompute the prefix product directly
            samples[..i]
                .iter()
                .zip(&deltas[..i])
                .fold(S::one(), |t, (p, d)| t * (-p.sigma * *d).exp())
        };
        let w = t_before * (S::one() - decay);
        let mut gs = S::zero();
        for c in 0..3 {
            grad_color[i][c] = upstream[c] * w;
            gs += upstream[c] * (t_after * s.color[c] - suffix[c]);
        }
        grad_sigma[i] = gs * deltas[i];
        for c in 0..3 {
            suffix[c] += w * s.color[c];
        }
        t_after = t_before;
    }
}

/// Gradients of `dot(upstream, color)` with respect to every sample color and
/// density.
pub fn composite_backward<S: Real>(
    samples: &[RadianceSample<S>],
    deltas: &[S],
    background: [S; 3],
    upstream: [S; 3],
) -> Result<(Vec<[S; 3]>, Vec<S>)> {
    check_composite_args(samples, deltas)?;
    let mut gc = vec![[S::zero(); 3]; samples.len()];
    let mut gs = vec![S::zero(); samples.len()];
    composite_backward_into(samples, deltas, background, upstream, &mut gc, &mut gs);
    Ok((gc, gs))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub near: f64,
    pub far: f64,
    pub samples_per_ray: usize,
    pub jitter: bool,
    pub seed: u64,
    /// Ray marching stops below this transmittance; 0 disables the cut.
    pub min_transmittance: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            near: 0.0,
            far: 100.0,
            samples_per_ray: 64,
            jitter: false,
            seed: 0,
            min_transmittance: 1e-4,
        }
    }
}

/// Something that can be rendered: a bounded radiance function.
pub trait RadianceSource: Sync {
    type Scratch: Send;
    fn make_scratch(&self) -> Self::Scratch;
    fn bounds(&self) -> Aabb;
    fn background(&self) -> [f64; 3];
    fn radiance(&self, x: [f64; 3], d: [f64; 3], scratch: &mut Self::Scratch) -> Result<RadianceSample<f64>>;
}

/// Learned field with fixed level weights.
pub struct FieldSource<'a, S> {
    pub field: &'a RadianceField<S>,
    pub level_weights: Vec<S>,
}

impl<'a, S: Real> FieldSource<'a, S> {
    pub fn new(field: &'a RadianceField<S>, tdlf: &TdlfState) -> Self {
        Self {
            field,
            level_weights: tdlf.weights(),
        }
    }
}

impl<S: Real> RadianceSource for FieldSource<'_, S> {
    type Scratch = (Vec<S>, crate::decoder::MlpScratch<S>);

    fn make_scratch(&self) -> Self::Scratch {
        let n = self.field.grid.config.encoded_len();
        (vec![S::zero(); n], crate::decoder::MlpScratch::new(n))
    }

    fn bounds(&self) -> Aabb {
        *self.field.bounds()
    }

    fn background(&self) -> [f64; 3] {
        self.field.background
    }

    fn radiance(&self, x: [f64; 3], d: [f64; 3], scratch: &mut Self::Scratch) -> Result<RadianceSample<f64>> {
        let (enc, mlp) = scratch;
        self.field
            .grid
            .encode_weighted(x.map(S::lit), &self.level_weights, enc)?;
        let sh = crate::decoder::sh_encode(d.map(S::lit))?;
        let s = self.field.mlp.forward(enc, &sh, mlp);
        Ok(RadianceSample {
            color: s.color.map(|c| c.f64()),
            sigma: s.sigma.f64(),
        })
    }
}

/// Samples of `ray` clipped to `bounds`; `None` if the ray misses the box.
pub fn clipped_samples(bounds: &Aabb, ray: &Ray, cfg: &RenderConfig, seed: u64) -> Result<Option<RaySamples>> {
    let Some((t0, t1)) = bounds.clip_ray(ray, cfg.near, cfg.far) else {
        return Ok(None);
    };
    let mut s = sample_ray(ray, t0, t1, cfg.samples_per_ray, cfg.jitter, seed)?;
    for p in s.positions.iter_mut() {
        for i in 0..3 {
            p[i] = p[i].clamp(bounds.min[i], bounds.max[i]);
        }
    }
    Ok(Some(s))
}

/// Composited color of one ray through any source.
pub fn render_ray<Src: RadianceSource>(
    source: &Src,
    ray: &Ray,
    cfg: &RenderConfig,
    seed: u64,
    scratch: &mut Src::Scratch,
) -> Result<[f64; 3]> {
    let bg = source.background();
    let Some(samples) = clipped_samples(&source.bounds(), ray, cfg, seed)? else {
        return Ok(bg);
    };
    let d = [ray.direction.x, ray.direction.y, ray.direction.z];
    let mut t = 1.0;
    let mut color = [0.0; 3];
    for (p, &delta) in samples.positions.iter().zip(&samples.deltas) {
        if t < cfg.min_transmittance {
            break;
        }
        let s = source.radiance(*p, d, scratch)?;
        let alpha = 1.0 - (-s.sigma * delta).exp();
        for c in 0..3 {
            color[c] += t * alpha * s.color[c];
        }
        t *= 1.0 - alpha;
    }
    for c in 0..3 {
        color[c] = (color[c] + t * bg[c]).clamp(0.0, 1.0);
    }
    Ok(color)
}

/// Renders a full image at pixel centers. Rows are rendered in parallel;
/// each pixel has its own jitter seed so the result does not depend on
/// scheduling.
pub fn render_image_with<Src: RadianceSource>(
    source: &Src,
    pose: &PoseSE3,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> Result<Image> {
    intr.validate()?;
    let w = intr.width;
    let rows: Vec<Vec<[f64; 3]>> = (0..intr.height)
        .into_par_iter()
        .map(|y| {
            let mut scratch = source.make_scratch();
            (0..w)
                .map(|x| {
                    let ray = ray_for_pixel(intr, pose, x as f64 + 0.5, y as f64 + 0.5)?;
                    let seed = mix_seed(cfg.seed, y as u64 * w as u64 + x as u64);
                    render_ray(source, &ray, cfg, seed, &mut scratch)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut img = Image::new(w, intr.height)?;
    for (y, row) in rows.into_iter().enumerate() {
        for (x, c) in row.into_iter().enumerate() {
            img.set(x as u32, y as u32, c);
        }
    }
    Ok(img)
}

pub fn render_image<S: Real>(
    field: &RadianceField<S>,
    pose: &PoseSE3,
    intr: &CameraIntrinsics,
    tdlf: &TdlfState,
    cfg: &RenderConfig,
) -> Result<Image> {
    render_image_with(&FieldSource::new(field, tdlf), pose, intr, cfg)
}

/// `sum_r |rendered(r) - target(r)|_1`.
pub fn photometric_l1(rendered: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    if rendered.len() != target.len() {
        return Err(Error::domain(format!(
            "batch sizes differ: {} vs {}",
            rendered.len(),
            target.len()
        )));
    }
    Ok(rendered
        .iter()
        .zip(target)
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>())
        .sum())
}

pub const PSNR_CAP: f64 = 99.0;

/// `10 log10(1 / MSE)`, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::domain("PSNR: image dimensions differ"));
    }
    let mse = a.rgb.iter().zip(&b.rgb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.rgb.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// Mean SSIM on luma with an 11x11 Gaussian window (sigma 1.5),
/// `K1 = 0.01`, `K2 = 0.03`, over all fully contained windows.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::domain("SSIM: image dimensions differ"));
    }
    let (w, h) = (a.width as usize, a.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::domain("SSIM needs images of at least 11x11 pixels"));
    }
    let half = (SSIM_WINDOW / 2) as i64;
    let mut kernel: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let la = a.luma();
    let lb = b.luma();
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (j, kj) in kernel.iter().enumerate() {
                for (i, ki) in kernel.iter().enumerate() {
                    let k = kj * ki;
                    let idx = (y0 + j) * w + x0 + i;
                    let (pa, pb) = (la[idx], lb[idx]);
                    ma += k * pa;
                    mb += k * pb;
                    saa += k * pa * pa;
                    sbb += k * pb * pb;
                    sab += k * pa * pb;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
