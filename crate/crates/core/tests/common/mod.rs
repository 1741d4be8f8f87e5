//! Checks shared by the integration tests and the acceptance report. Each
//! returns the worst error it saw so callers can assert or print it.
#![allow(dead_code)]

use nalgebra::{Matrix4, Vector3};
use nerf_reloc::decoder::{MlpParams, MlpScratch, SH_DIM};
use nerf_reloc::field::RadianceField;
use nerf_reloc::geometry::{exp_se3, Aabb, CameraIntrinsics, PoseSE3, Twist};
use nerf_reloc::hash_field::{alpha_schedule, tdlf_weight, HashGrid, HashGridConfig, TdlfState};
use nerf_reloc::image::Image;
use nerf_reloc::localizer::{pose_loss_and_gradient, sample_pose_rays, EncodingGrad};
use nerf_reloc::renderer::{composite_weights, RenderConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn unit_bounds() -> Aabb {
    Aabb::new([-0.5; 3], [0.5; 3]).unwrap()
}

/// `|a - b| / |b|` over whole vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

/// Double-precision field with O(1) table entries so that it has structure
/// at every level.
pub fn textured_field(seed: u64) -> RadianceField<f64> {
    let mut f = RadianceField::<f64>::new(HashGridConfig::with_bounds(unit_bounds()), [1.0; 3], seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for v in f.grid.tables.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    f
}

// ---- unit math ----

/// Largest deviation of the level weight from its three cases and the largest
/// jump across the case boundaries.
pub fn tdlf_checks() -> (f64, f64) {
    let mut case_err: f64 = 0.0;
    case_err = case_err.max(tdlf_weight(5, 3.0).abs());
    case_err = case_err.max((tdlf_weight(3, 3.5) - 0.5).abs());
    case_err = case_err.max((tdlf_weight(2, 3.0) - 1.0).abs());
    let mut jump: f64 = 0.0;
    for k in 1..=16usize {
        for edge in [k as f64, k as f64 + 1.0] {
            let below = tdlf_weight(k, edge - 1e-13);
            let above = tdlf_weight(k, edge);
            jump = jump.max((above - below).abs());
        }
    }
    (case_err, jump)
}

pub fn initial_alpha() -> f64 {
    alpha_schedule(0.0, 0.5, 16)
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(a: &Matrix4<f64>) -> Matrix4<f64> {
    let norm = a.abs().max();
    let squarings = if norm > 0.25 { (norm / 0.25).log2().ceil() as u32 } else { 0 };
    let b = a / 2f64.powi(squarings as i32);
    let mut term = Matrix4::identity();
    let mut sum = Matrix4::identity();
    for k in 1..=20 {
        term = term * b / k as f64;
        sum += term;
    }
    for _ in 0..squarings {
        sum = sum * sum;
    }
    sum
}

fn hat(xi: &[f64; 6]) -> Matrix4<f64> {
    let (w, v) = (xi, &xi[3..]);
    Matrix4::new(
        0.0, -w[2], w[1], v[0], //
        w[2], 0.0, -w[0], v[1], //
        -w[1], w[0], 0.0, v[2], //
        0.0, 0.0, 0.0, 0.0,
    )
}

fn as_matrix(p: &PoseSE3) -> Matrix4<f64> {
    let m = p.to_row_major();
    Matrix4::from_row_slice(&m)
}

/// Worst entrywise difference between `exp_se3` and the series oracle over
/// random twists with rotation angles up to pi.
pub fn se3_exp_error(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0f64),
        )
        .normalize();
        // cover the small-angle regime as well as large turns
        let angle = if i % 4 == 0 {
            10f64.powf(rng.random_range(-9.0..-2.0))
        } else {
            rng.random_range(0.0..std::f64::consts::PI)
        };
        let w = axis * angle;
        let xi = [
            w.x,
            w.y,
            w.z,
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ];
        let d = (as_matrix(&exp_se3(&Twist::from_array(xi))) - expm(&hat(&xi))).abs().max();
        worst = worst.max(d);
    }
    worst
}

/// Worst `|sum of weights + transmittance - 1|` over random sample sets.
pub fn composite_weight_error(n: usize, seed: u64) -> f64 {
    use nerf_reloc::decoder::RadianceSample;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let k = rng.random_range(1..128);
        let samples: Vec<RadianceSample<f64>> = (0..k)
            .map(|_| RadianceSample {
                color: [0.5; 3],
                sigma: 10f64.powf(rng.random_range(-3.0..3.0)),
            })
            .collect();
        let deltas: Vec<f64> = (0..k).map(|_| rng.random_range(1e-4..0.1)).collect();
        let (w, t) = composite_weights(&samples, &deltas);
        worst = worst.max((w.iter().sum::<f64>() + t - 1.0).abs());
    }
    worst
}

// ---- gradients ----

/// Decoder reverse pass against central differences of
/// `u . color + v * sigma`, over every parameter, the feature and the
/// direction encoding. Returns the worst relative error of the three.
pub fn decoder_grad_error(seed: u64) -> f64 {
    let flen = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = MlpParams::<f64>::he_uniform(flen, seed);
    let feature: Vec<f64> = (0..flen).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut sh = [0.0; SH_DIM];
    sh.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let u = [0.3, -0.7, 0.45];
    let v = 0.8;
    let loss = |p: &MlpParams<f64>, f: &[f64], sh: &[f64; SH_DIM]| {
        let mut s = MlpScratch::new(flen);
        let r = p.forward(f, sh, &mut s);
        u[0] * r.color[0] + u[1] * r.color[1] + u[2] * r.color[2] + v * r.sigma
    };
    let mut scratch = MlpScratch::new(flen);
    params.forward(&feature, &sh, &mut scratch);
    let mut grads = params.zero_like();
    let mut fgrad = vec![0.0; flen];
    let mut shgrad = [0.0; SH_DIM];
    params.backward(&mut scratch, u, v, Some(&mut grads), &mut fgrad, Some(&mut shgrad));

    let h = 1e-6;
    let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    let count: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    for (ti, &len) in count.iter().enumerate() {
        for j in 0..len {
            let orig = params.tensors()[ti][j];
            params.tensors_mut()[ti][j] = orig + h;
            let lp = loss(&params, &feature, &sh);
            params.tensors_mut()[ti][j] = orig - h;
            let lm = loss(&params, &feature, &sh);
            params.tensors_mut()[ti][j] = orig;
            numeric.push((lp - lm) / (2.0 * h));
        }
    }
    let mut worst = rel_err(&analytic, &numeric);

    let mut fnum = vec![0.0; flen];
    for j in 0..flen {
        let mut fp = feature.clone();
        let mut fm = feature.clone();
        fp[j] += h;
        fm[j] -= h;
        fnum[j] = (loss(&params, &fp, &sh) - loss(&params, &fm, &sh)) / (2.0 * h);
    }
    worst = worst.max(rel_err(&fgrad, &fnum));

    let mut shnum = [0.0; SH_DIM];
    for j in 0..SH_DIM {
        let mut sp = sh;
        let mut sm = sh;
        sp[j] += h;
        sm[j] -= h;
        shnum[j] = (loss(&params, &feature, &sp) - loss(&params, &feature, &sm)) / (2.0 * h);
    }
    worst.max(rel_err(&shgrad, &shnum))
}

/// Points whose probes at distance `eps` stay inside one cell on every level.
fn interior_point(grid: &HashGrid<f64>, eps: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let b = &grid.config.bounds;
    loop {
        let x: [f64; 3] = std::array::from_fn(|i| rng.random_range(b.min[i] + 0.01..b.max[i] - 0.01));
        let ok = (0..grid.config.levels).all(|l| {
            let n = grid.config.resolution(l) as f64;
            (0..3).all(|i| {
                let u = (x[i] - b.min[i]) / (b.max[i] - b.min[i]);
                let du = eps / (b.max[i] - b.min[i]);
                ((u - du) * n).floor() == ((u + du) * n).floor()
            })
        });
        if ok {
            return x;
        }
    }
}

/// Encoder reverse pass: table gradients against central differences over
/// every touched entry, and the position gradient against central
/// differences at points away from cell faces.
pub fn encoder_grad_error(seed: u64) -> f64 {
    let field = textured_field(seed);
    let grid = &field.grid;
    let len = grid.config.encoded_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = TdlfState::open(grid.config.levels).weights::<f64>();
    let upstream: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |g: &HashGrid<f64>, x: [f64; 3]| {
        let mut out = vec![0.0; len];
        g.encode_weighted(x, &w, &mut out).unwrap();
        out.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let h = 1e-7;
        let x = interior_point(grid, 2.0 * h, &mut rng);
        let mut touched: Vec<(usize, f64)> = Vec::new();
        let mut sink = |i: usize, g: f64| touched.push((i, g));
        let xg = grid.backward_weighted(x, &w, &upstream, Some(&mut sink), true).unwrap();
        // merge colliding entries
        touched.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::new();
        for (i, g) in touched {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += g,
                _ => merged.push((i, g)),
            }
        }
        let mut probe = grid.clone();
        let th = 1e-4;
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for &(i, g) in merged.iter().step_by(7) {
            let orig = probe.tables[i];
            probe.tables[i] = orig + th;
            let lp = loss(&probe, x);
            probe.tables[i] = orig - th;
            let lm = loss(&probe, x);
            probe.tables[i] = orig;
            a.push(g);
            n.push((lp - lm) / (2.0 * th));
        }
        worst = worst.max(rel_err(&a, &n));
        let mut xn = [0.0; 3];
        for i in 0..3 {
            let mut p = x;
            let mut m = x;
            p[i] += h;
            m[i] -= h;
            xn[i] = (loss(grid, p) - loss(grid, m)) / (2.0 * h);
        }
        worst = worst.max(rel_err(&xg, &xn));
    }
    worst
}

/// Central-difference position gradient with a step below the finest cell
/// against the analytic one, at interior points and a partly closed filter.
pub fn numerical_vs_analytic_error(seed: u64) -> f64 {
    let field = textured_field(seed);
    let grid = &field.grid;
    let len = grid.config.encoded_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let finest = 1.0 / grid.config.resolution(grid.config.levels - 1) as f64;
    let eps = 0.25 * finest;
    let mut worst: f64 = 0.0;
    for alpha in [16.0, 11.5, 8.0] {
        let w = TdlfState {
            alpha,
            alpha0: 0.5,
            levels: 16,
        }
        .weights::<f64>();
        for _ in 0..10 {
            let upstream: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = interior_point(grid, eps, &mut rng);
            let analytic = grid.backward_weighted(x, &w, &upstream, None, true).unwrap();
            let mut scratch = vec![0.0; 2 * len];
            let numeric = grid
                .numerical_x_grad_clamped(x, &w, grid.scene_steps(eps), &upstream, &mut scratch)
                .unwrap();
            worst = worst.max(rel_err(&numeric, &analytic));
        }
    }
    worst
}

/// Full pose gradient (compositing, decoder, encoder, twist) against central
/// differences of the batch loss over each twist coordinate.
pub fn pose_grad_error(seed: u64, n_rays: usize) -> f64 {
    let field = textured_field(seed);
    let intr = CameraIntrinsics::from_fov(32, 32, 50.0).unwrap();
    let pose = PoseSE3::look_at(&Vector3::new(0.3, 0.4, 1.2), &Vector3::zeros(), &Vector3::y()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let colors: Vec<[f64; 3]> = (0..32 * 32).map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect();
    let target = Image::from_fn(32, 32, |x, y| colors[(y * 32 + x) as usize]).unwrap();
    let render = RenderConfig {
        samples_per_ray: 24,
        jitter: true,
        seed,
        min_transmittance: 0.0,
        ..RenderConfig::default()
    };
    let rays = sample_pose_rays(&field, &intr, &pose, &target, n_rays, &render, seed).unwrap();
    let tdlf = TdlfState::open(16);
    let eval = |p: &PoseSE3, grad: bool| {
        pose_loss_and_gradient(&field, &intr, p, &rays, &tdlf, EncodingGrad::Analytic, 1.0, 0.0, grad).unwrap()
    };
    let g = eval(&pose, true);
    // the encoding is piecewise trilinear with cells of ~5e-4 at the finest
    // level; the step has to be small enough that almost no sample crosses
    // a face, where the slope jumps
    let h = 1e-10;
    let mut fd = [0.0; 6];
    for k in 0..6 {
        let mut xi = [0.0; 6];
        xi[k] = h;
        let lp = eval(&exp_se3(&Twist::from_array(xi)).compose(&pose), false).loss;
        xi[k] = -h;
        let lm = eval(&exp_se3(&Twist::from_array(xi)).compose(&pose), false).loss;
        fd[k] = (lp - lm) / (2.0 * h);
    }
    rel_err(&g.grad, &fd)
}
