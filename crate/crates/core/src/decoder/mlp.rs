use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sh::SH_DIM;
use crate::real::{axpy, dot};
use crate::{Error, Real, Result};

pub const BASE_HIDDEN: usize = 64;
pub const BASE_OUT: usize = 16;
pub const HEAD_HIDDEN: usize = 64;

/// Color and density at one sample point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadianceSample<S> {
    pub color: [S; 3],
    pub sigma: S,
}

/// Fully connected layer, `weights` row-major `outputs x inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<S> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Real> Dense<S> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![S::zero(); inputs * outputs],
            bias: vec![S::zero(); outputs],
        }
    }

    /// He-uniform weights, zero bias.
    fn he_uniform(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / inputs as f64).sqrt();
        let mut d = Self::zeros(inputs, outputs);
        for w in d.weights.iter_mut() {
            *w = S::lit(rng.random_range(-limit..limit));
        }
        d
    }

    fn row(&self, o: usize) -> &[S] {
        &self.weights[o * self.inputs..(o + 1) * self.inputs]
    }

    #[inline]
    fn forward(&self, input: &[S], out: &mut [S]) {
        for (o, y) in out.iter_mut().enumerate() {
            *y = self.bias[o] + dot(self.row(o), input);
        }
    }

    /// Accumulates parameter grads into `grads` (if given) and writes the
    /// input gradient into `g_in` (if given).
    #[inline]
    fn backward(&self, input: &[S], g_out: &[S], grads: Option<&mut Dense<S>>, g_in: Option<&mut [S]>) {
        if let Some(gr) = grads {
            for (o, &g) in g_out.iter().enumerate() {
                if g == S::zero() {
                    continue;
                }
                gr.bias[o] += g;
                axpy(g, input, &mut gr.weights[o * self.inputs..(o + 1) * self.inputs]);
            }
        }
        if let Some(g_in) = g_in {
            g_in.iter_mut().for_each(|v| *v = S::zero());
            for (o, &g) in g_out.iter().enumerate() {
                if g != S::zero() {
                    axpy(g, self.row(o), g_in);
                }
            }
        }
    }

    fn cast<T: Real>(&self) -> Dense<T> {
        Dense {
            inputs: self.inputs,
            outputs: self.outputs,
            weights: self.weights.iter().map(|v| T::lit(v.f64())).collect(),
            bias: self.bias.iter().map(|v| T::lit(v.f64())).collect(),
        }
    }
}

/// Base network `L*F -> 64 -> 16` and head `16 + 16 -> 64 -> 64 -> 3`.
///
/// Base output channel 0 goes through softplus to give density; all 16 base
/// channels together with the direction encoding feed the head, whose output
/// goes through a sigmoid to give color. Hidden layers use ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<S> {
    pub base: [Dense<S>; 2],
    pub head: [Dense<S>; 3],
}

/// Gradients share the parameter layout.
pub type MlpGrads<S> = MlpParams<S>;

impl<S: Real> MlpParams<S> {
    pub fn zeros(feature_len: usize) -> Self {
        Self {
            base: [
                Dense::zeros(feature_len, BASE_HIDDEN),
                Dense::zeros(BASE_HIDDEN, BASE_OUT),
            ],
            head: [
                Dense::zeros(BASE_OUT + SH_DIM, HEAD_HIDDEN),
                Dense::zeros(HEAD_HIDDEN, HEAD_HIDDEN),
                Dense::zeros(HEAD_HIDDEN, 3),
            ],
        }
    }

    pub fn he_uniform(feature_len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            base: [
                Dense::he_uniform(feature_len, BASE_HIDDEN, &mut rng),
                Dense::he_uniform(BASE_HIDDEN, BASE_OUT, &mut rng),
            ],
            head: [
                Dense::he_uniform(BASE_OUT + SH_DIM, HEAD_HIDDEN, &mut rng),
                Dense::he_uniform(HEAD_HIDDEN, HEAD_HIDDEN, &mut rng),
                Dense::he_uniform(HEAD_HIDDEN, 3, &mut rng),
            ],
        }
    }

    pub fn feature_len(&self) -> usize {
        self.base[0].inputs
    }

    /// Layers in serialization order: base 0, base 1, head 0, head 1, head 2.
    pub fn layers(&self) -> impl Iterator<Item = &Dense<S>> {
        self.base.iter().chain(self.head.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense<S>> {
        self.base.iter_mut().chain(self.head.iter_mut())
    }

    /// Flat tensors (weights then bias per layer) for the optimizer.
    pub fn tensors(&self) -> Vec<&[S]> {
        self.layers()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [S]> {
        self.layers_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn zero_like(&self) -> Self {
        Self::zeros(self.feature_len())
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    /// `self += other`
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        }
    }

    pub fn cast<T: Real>(&self) -> MlpParams<T> {
        MlpParams {
            base: [self.base[0].cast(), self.base[1].cast()],
            head: [self.head[0].cast(), self.head[1].cast(), self.head[2].cast()],
        }
    }

    /// Checks the fixed widths and that every value is finite.
    pub fn validate(&self) -> Result<()> {
        let f = self.feature_len();
        let shapes = [
            (f, BASE_HIDDEN),
            (BASE_HIDDEN, BASE_OUT),
            (BASE_OUT + SH_DIM, HEAD_HIDDEN),
            (HEAD_HIDDEN, HEAD_HIDDEN),
            (HEAD_HIDDEN, 3),
        ];
        for (layer, (i, o)) in self.layers().zip(shapes) {
            if layer.inputs != i
                || layer.outputs != o
                || layer.weights.len() != i * o
                || layer.bias.len() != o
            {
                return Err(Error::domain(format!(
                    "layer shape {}x{} does not match expected {i}x{o}",
                    layer.inputs, layer.outputs
                )));
            }
        }
        if self.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::domain("MLP holds non-finite parameters"));
        }
        Ok(())
    }
}

/// Activations kept from the forward pass for the reverse pass.
#[derive(Clone, Debug)]
pub struct MlpScratch<S> {
    feature: Vec<S>,
    base_h: Vec<S>,
    head_in: Vec<S>,
    head_h1: Vec<S>,
    head_h2: Vec<S>,
    out: [S; 3],
    color: [S; 3],
    g_h2: Vec<S>,
    g_h1: Vec<S>,
    g_head_in: Vec<S>,
    g_base_out: Vec<S>,
    g_base_h: Vec<S>,
}

impl<S: Real> MlpScratch<S> {
    pub fn new(feature_len: usize) -> Self {
        Self {
            feature: vec![S::zero(); feature_len],
            base_h: vec![S::zero(); BASE_HIDDEN],
            head_in: vec![S::zero(); BASE_OUT + SH_DIM],
            head_h1: vec![S::zero(); HEAD_HIDDEN],
            head_h2: vec![S::zero(); HEAD_HIDDEN],
            out: [S::zero(); 3],
            color: [S::zero(); 3],
            g_h2: vec![S::zero(); HEAD_HIDDEN],
            g_h1: vec![S::zero(); HEAD_HIDDEN],
            g_head_in: vec![S::zero(); BASE_OUT + SH_DIM],
            g_base_out: vec![S::zero(); BASE_OUT],
            g_base_h: vec![S::zero(); BASE_HIDDEN],
        }
    }
}

#[inline]
fn relu_inplace<S: Real>(v: &mut [S]) {
    v.iter_mut().for_each(|x| *x = x.max(S::zero()));
}

#[inline]
fn mask_relu<S: Real>(g: &mut [S], post: &[S]) {
    g.iter_mut()
        .zip(post)
        .for_each(|(g, a)| if *a <= S::zero() { *g = S::zero() });
}

#[inline]
fn sigmoid<S: Real>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<S: Real>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

impl<S: Real> MlpParams<S> {
    /// Forward pass that keeps activations in `scratch`.
    pub fn forward(&self, feature: &[S], sh: &[S; SH_DIM], scratch: &mut MlpScratch<S>) -> RadianceSample<S> {
        let s = scratch;
        s.feature.copy_from_slice(feature);
        self.base[0].forward(feature, &mut s.base_h);
        relu_inplace(&mut s.base_h);
        self.base[1].forward(&s.base_h, &mut s.head_in[..BASE_OUT]);
        s.head_in[BASE_OUT..].copy_from_slice(sh);
        self.head[0].forward(&s.head_in, &mut s.head_h1);
        relu_inplace(&mut s.head_h1);
        self.head[1].forward(&s.head_h1, &mut s.head_h2);
        relu_inplace(&mut s.head_h2);
        self.head[2].forward(&s.head_h2, &mut s.out);
        s.color = s.out.map(sigmoid);
        RadianceSample {
            color: s.color,
            sigma: softplus(s.head_in[0]),
        }
    }

    /// Reverse pass for the last [`forward`](Self::forward) held in
    /// `scratch`. Parameter gradients are accumulated into `grads`; the
    /// feature and direction-encoding gradients are overwritten.
    pub fn backward(
        &self,
        scratch: &mut MlpScratch<S>,
        upstream_color: [S; 3],
        upstream_sigma: S,
        mut grads: Option<&mut MlpGrads<S>>,
        feature_grad: &mut [S],
        sh_grad: Option<&mut [S; SH_DIM]>,
    ) {
        let s = scratch;
        let mut g_out = [S::zero(); 3];
        for i in 0..3 {
            g_out[i] = upstream_color[i] * s.color[i] * (S::one() - s.color[i]);
        }
        self.head[2].backward(
            &s.head_h2,
            &g_out,
            grads.as_deref_mut().map(|g| &mut g.head[2]),
            Some(&mut s.g_h2),
        );
        mask_relu(&mut s.g_h2, &s.head_h2);
        self.head[1].backward(
            &s.head_h1,
            &s.g_h2,
            grads.as_deref_mut().map(|g| &mut g.head[1]),
            Some(&mut s.g_h1),
        );
        mask_relu(&mut s.g_h1, &s.head_h1);
        self.head[0].backward(
            &s.head_in,
            &s.g_h1,
            grads.as_deref_mut().map(|g| &mut g.head[0]),
            Some(&mut s.g_head_in),
        );
        if let Some(shg) = sh_grad {
            shg.copy_from_slice(&s.g_head_in[BASE_OUT..]);
        }
        s.g_base_out.copy_from_slice(&s.g_head_in[..BASE_OUT]);
        s.g_base_out[0] += upstream_sigma * sigmoid(s.head_in[0]);
        self.base[1].backward(
            &s.base_h,
            &s.g_base_out,
            grads.as_deref_mut().map(|g| &mut g.base[1]),
            Some(&mut s.g_base_h),
        );
        mask_relu(&mut s.g_base_h, &s.base_h);
        self.base[0].backward(
            &s.feature,
            &s.g_base_h,
            grads.map(|g| &mut g.base[0]),
            Some(feature_grad),
        );
    }
}

/// One-shot forward pass.
pub fn decode<S: Real>(params: &MlpParams<S>, feature: &[S], sh: &[S; SH_DIM]) -> Result<RadianceSample<S>> {
    if feature.len() != params.feature_len() {
        return Err(Error::domain(format!(
            "feature has {} values, network expects {}",
            feature.len(),
            params.feature_len()
        )));
    }
    let mut scratch = MlpScratch::new(feature.len());
    Ok(params.forward(feature, sh, &mut scratch))
}

/// One-shot reverse pass: `(parameter grads, feature grad, direction-encoding grad)`.
pub fn decode_backward<S: Real>(
    params: &MlpParams<S>,
    feature: &[S],
    sh: &[S; SH_DIM],
    upstream_color: [S; 3],
    upstream_sigma: S,
) -> Result<(MlpGrads<S>, Vec<S>, [S; SH_DIM])> {
    if feature.len() != params.feature_len() {
        return Err(Error::domain("feature width does not match network"));
    }
    let mut scratch = MlpScratch::new(feature.len());
    params.forward(feature, sh, &mut scratch);
    let mut grads = params.zero_like();
    let mut fg = vec![S::zero(); feature.len()];
    let mut shg = [S::zero(); SH_DIM];
    params.backward(
        &mut scratch,
        upstream_color,
        upstream_sigma,
        Some(&mut grads),
        &mut fg,
        Some(&mut shg),
    );
    Ok((grads, fg, shg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn random_input(seed: u64, n: usize) -> (Vec<f64>, [f64; SH_DIM]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = crate::decoder::sh_encode([0.48, -0.6, 0.64]).unwrap();
        (f, d)
    }

    /// Straight-line reference built on dense matrices.
    fn reference(p: &MlpParams<f64>, f: &[f64], sh: &[f64; SH_DIM]) -> ([f64; 3], f64) {
        let lin = |l: &Dense<f64>, x: &DVector<f64>| {
            DMatrix::from_row_slice(l.outputs, l.inputs, &l.weights) * x + DVector::from_column_slice(&l.bias)
        };
        let relu = |v: DVector<f64>| v.map(|x| if x > 0.0 { x } else { 0.0 });
        let h = relu(lin(&p.base[0], &DVector::from_column_slice(f)));
        let b = lin(&p.base[1], &h);
        let sigma = (1.0 + b[0].exp()).ln();
        let mut hin = b.as_slice().to_vec();
        hin.extend_from_slice(sh);
        let h1 = relu(lin(&p.head[0], &DVector::from_vec(hin)));
        let h2 = relu(lin(&p.head[1], &h1));
        let o = lin(&p.head[2], &h2);
        let c = [0, 1, 2].map(|i| 1.0 / (1.0 + (-o[i]).exp()));
        (c, sigma)
    }

    #[test]
    fn zero_network_output() {
        let p = MlpParams::<f64>::zeros(32);
        let (f, sh) = random_input(1, 32);
        let out = decode(&p, &f, &sh).unwrap();
        assert_eq!(out.color, [0.5; 3]);
        assert!((out.sigma - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn head_without_direction_weights_ignores_direction() {
        let mut p = MlpParams::<f64>::he_uniform(32, 3);
        for o in 0..HEAD_HIDDEN {
            for i in BASE_OUT..BASE_OUT + SH_DIM {
                p.head[0].weights[o * (BASE_OUT + SH_DIM) + i] = 0.0;
            }
        }
        let (f, sh) = random_input(2, 32);
        let other = crate::decoder::sh_encode([0.0, 1.0, 0.0]).unwrap();
        assert_eq!(decode(&p, &f, &sh).unwrap(), decode(&p, &f, &other).unwrap());
    }

    #[test]
    fn matches_dense_reference() {
        for seed in 0..5 {
            let p = MlpParams::<f64>::he_uniform(32, seed);
            let (f, sh) = random_input(seed + 100, 32);
            let out = decode(&p, &f, &sh).unwrap();
            let (c, sigma) = reference(&p, &f, &sh);
            for i in 0..3 {
                assert!((out.color[i] - c[i]).abs() < 1e-12);
            }
            assert!((out.sigma - sigma).abs() < 1e-12);
        }
    }

    #[test]
    fn output_ranges() {
        let mut p = MlpParams::<f64>::he_uniform(32, 9);
        p.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|v| *v *= 30.0));
        for seed in 0..20 {
            let (f, sh) = random_input(seed, 32);
            let out = decode(&p, &f, &sh).unwrap();
            assert!(out.sigma >= 0.0);
            assert!(out.color.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let p = MlpParams::<f64>::he_uniform(32, 4);
        let (f, sh) = random_input(5, 32);
        let (g, fg, shg) = decode_backward(&p, &f, &sh, [0.0; 3], 0.0).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0)));
        assert!(fg.iter().all(|v| *v == 0.0));
        assert!(shg.iter().all(|v| *v == 0.0));
    }

    /// Smallest |pre-activation| over all ReLU units; finite differences are
    /// only meaningful away from kinks.
    fn min_kink_distance(p: &MlpParams<f64>, f: &[f64], sh: &[f64; SH_DIM]) -> f64 {
        let mut m = f64::INFINITY;
        let mut h = vec![0.0; BASE_HIDDEN];
        p.base[0].forward(f, &mut h);
        m = h.iter().fold(m, |a, v| a.min(v.abs()));
        relu_inplace(&mut h);
        let mut hin = vec![0.0; BASE_OUT + SH_DIM];
        p.base[1].forward(&h, &mut hin[..BASE_OUT]);
        hin[BASE_OUT..].copy_from_slice(sh);
        let mut h1 = vec![0.0; HEAD_HIDDEN];
        p.head[0].forward(&hin, &mut h1);
        m = h1.iter().fold(m, |a, v| a.min(v.abs()));
        relu_inplace(&mut h1);
        let mut h2 = vec![0.0; HEAD_HIDDEN];
        p.head[1].forward(&h1, &mut h2);
        h2.iter().fold(m, |a, v| a.min(v.abs()))
    }

    #[test]
    fn grads_match_finite_differences() {
        let up_c = [0.7, -1.3, 0.4];
        let up_s = 0.9;
        let loss = |p: &MlpParams<f64>, f: &[f64], sh: &[f64; SH_DIM]| {
            let o = decode(p, f, sh).unwrap();
            o.color.iter().zip(&up_c).map(|(c, u)| c * u).sum::<f64>() + o.sigma * up_s
        };
        let mut seed = 10;
        let mut checked = 0;
        while checked < 3 {
            seed += 1;
            let p = MlpParams::<f64>::he_uniform(32, seed);
            let (f, sh) = random_input(seed + 50, 32);
            if min_kink_distance(&p, &f, &sh) < 1e-4 {
                continue;
            }
            checked += 1;
            let (g, fg, shg) = decode_backward(&p, &f, &sh, up_c, up_s).unwrap();
            let h = 1e-6;
            let check = |fd: f64, an: f64, what: &str| {
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
                assert!(rel < 1e-5 || (fd - an).abs() < 1e-9, "{what}: fd {fd} analytic {an}");
            };
            let n_tensors = p.tensors().len();
            for t in 0..n_tensors {
                let len = p.tensors()[t].len();
                for i in 0..len {
                    let mut pp = p.clone();
                    pp.tensors_mut()[t][i] += h;
                    let mut pm = p.clone();
                    pm.tensors_mut()[t][i] -= h;
                    let fd = (loss(&pp, &f, &sh) - loss(&pm, &f, &sh)) / (2.0 * h);
                    check(fd, g.tensors()[t][i], &format!("tensor {t} entry {i}"));
                }
            }
            for i in 0..f.len() {
                let mut fp = f.clone();
                fp[i] += h;
                let mut fm = f.clone();
                fm[i] -= h;
                let fd = (loss(&p, &fp, &sh) - loss(&p, &fm, &sh)) / (2.0 * h);
                check(fd, fg[i], &format!("feature {i}"));
            }
            for i in 0..SH_DIM {
                let mut sp = sh;
                sp[i] += h;
                let mut sm = sh;
                sm[i] -= h;
                let fd = (loss(&p, &f, &sp) - loss(&p, &f, &sm)) / (2.0 * h);
                check(fd, shg[i], &format!("sh {i}"));
            }
        }
    }
}
