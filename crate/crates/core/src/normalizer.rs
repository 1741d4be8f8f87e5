//! Shadow compositing, heuristic shadow detection and mask-conditioned
//! removal, behind one [`Normalizer`] used for both map training targets and
//! test images.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::image::{load_gray_png, save_gray_png, Image};
use crate::{Error, Result};

/// Per-pixel shadow membership, 1 = fully shadowed.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowMask {
    pub width: u32,
    pub height: u32,
    pub m: Vec<f64>,
}

impl ShadowMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            m: vec![0.0; width as usize * height as usize],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.m.len() != self.width as usize * self.height as usize {
            return Err(Error::domain("mask size does not match its dimensions"));
        }
        if self.m.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::domain("mask values outside [0, 1]"));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.m.iter().all(|&v| v <= 0.0)
    }

    /// Intersection over union of the two masks thresholded at 0.5.
    pub fn iou(&self, other: &ShadowMask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.m.iter().zip(&other.m) {
            let (a, b) = (*a > 0.5, *b > 0.5);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Rounds to 8-bit levels so the mask survives a PNG round trip exactly.
    pub fn quantized(mut self) -> Self {
        self.m
            .iter_mut()
            .for_each(|v| *v = crate::image::quantize(*v) as f64 / 255.0);
        self
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_gray_png(path, self.width, self.height, &self.m)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (width, height, m) = load_gray_png(path)?;
        Ok(Self { width, height, m })
    }
}

/// Region of a synthetic shadow in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShadowShape {
    /// Pixels with `normal . (p - point) > 0` are shadowed.
    HalfPlane { point: [f64; 2], normal: [f64; 2] },
    Ellipse {
        center: [f64; 2],
        radii: [f64; 2],
        angle_deg: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowSpec {
    pub shape: ShadowShape,
    /// Fraction of light removed inside the shadow, in (0, 1).
    pub attenuation: f64,
    /// Gaussian blur radius of the mask edge in pixels; 0 = hard edge.
    pub softness: f64,
}

impl ShadowSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.attenuation > 0.0 && self.attenuation < 1.0) {
            return Err(Error::domain(format!(
                "shadow attenuation must lie in (0, 1), got {}",
                self.attenuation
            )));
        }
        if !(self.softness >= 0.0 && self.softness.is_finite()) {
            return Err(Error::domain("shadow softness must be finite and >= 0"));
        }
        Ok(())
    }

    /// The mask this spec paints on a `width x height` image, quantized to
    /// 8 bits.
    pub fn mask(&self, width: u32, height: u32) -> ShadowMask {
        let (w, h) = (width as usize, height as usize);
        let mut m = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                let inside = match self.shape {
                    ShadowShape::HalfPlane { point, normal } => {
                        normal[0] * (p[0] - point[0]) + normal[1] * (p[1] - point[1]) > 0.0
                    }
                    ShadowShape::Ellipse {
                        center,
                        radii,
                        angle_deg,
                    } => {
                        let (s, c) = angle_deg.to_radians().sin_cos();
                        let dx = p[0] - center[0];
                        let dy = p[1] - center[1];
                        let u = (c * dx + s * dy) / radii[0];
                        let v = (-s * dx + c * dy) / radii[1];
                        u * u + v * v <= 1.0
                    }
                };
                m[y * w + x] = inside as u8 as f64;
            }
        }
        if self.softness > 0.0 {
            m = gaussian_blur(&m, w, h, self.softness / 2.0, self.softness.ceil() as usize);
        }
        ShadowMask { width, height, m }.quantized()
    }
}

/// `out = img * (1 - s * M)` per pixel and channel.
pub fn apply_mask(img: &Image, mask: &ShadowMask, attenuation: f64) -> Result<Image> {
    check_dims(img, mask)?;
    let mut out = img.clone();
    for (i, m) in mask.m.iter().enumerate() {
        let f = 1.0 - attenuation * m;
        for c in 0..3 {
            out.rgb[3 * i + c] *= f;
        }
    }
    Ok(out)
}

/// Composites a synthetic shadow and returns the exact mask used.
pub fn apply_shadow(img: &Image, spec: &ShadowSpec) -> Result<(Image, ShadowMask)> {
    spec.validate()?;
    let mask = spec.mask(img.width, img.height);
    Ok((apply_mask(img, &mask, spec.attenuation)?, mask))
}

fn check_dims(img: &Image, mask: &ShadowMask) -> Result<()> {
    if img.width != mask.width || img.height != mask.height || mask.m.len() != img.pixel_count() {
        return Err(Error::domain(format!(
            "mask is {}x{} but image is {}x{}",
            mask.width, mask.height, img.width, img.height
        )));
    }
    Ok(())
}

/// Separable Gaussian with clamped borders.
fn gaussian_blur(v: &[f64], w: usize, h: usize, sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|x| *x /= s);
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * v[y * w + clamp(x as i64 + d, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * tmp[clamp(y as i64 + d, h) * w + x])
                .sum();
        }
    }
    out.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    out
}

fn disk_offsets(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Binary dilation (`grow = true`) or erosion with a disk; outside the image
/// counts as background for dilation and as foreground for erosion.
fn morph(b: &[bool], w: usize, h: usize, radius: usize, grow: bool) -> Vec<bool> {
    let offs = disk_offsets(radius);
    let mut out = vec![false; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let hit = |(dx, dy): &(i64, i64)| {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    !grow
                } else {
                    b[ny as usize * w + nx as usize]
                }
            };
            out[y as usize * w + x as usize] = if grow {
                offs.iter().any(hit)
            } else {
                offs.iter().all(hit)
            };
        }
    }
    out
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    /// MAD multiplier for the seed threshold.
    pub k: f64,
    /// Lower bound on the MAD as a fraction of the median luma, so uniform
    /// regions do not flag everything below the median.
    pub mad_floor: f64,
    pub closing_radius: usize,
    pub edge_radius: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            k: 2.5,
            mad_floor: 0.1,
            closing_radius: 2,
            edge_radius: 3,
        }
    }
}

/// Luma-statistics shadow detector: seeds below `median - k * MAD`, a
/// morphological closing, then a Gaussian edge softening.
pub fn detect_shadow_with(img: &Image, cfg: &DetectConfig) -> ShadowMask {
    let (w, h) = (img.width as usize, img.height as usize);
    let luma = img.luma();
    let mut sorted = luma.clone();
    let med = median(&mut sorted);
    let mut dev: Vec<f64> = luma.iter().map(|l| (l - med).abs()).collect();
    let mad = median(&mut dev).max(cfg.mad_floor * med);
    let threshold = med - cfg.k * mad;
    let seeds: Vec<bool> = luma.iter().map(|&l| l < threshold).collect();
    if !seeds.iter().any(|&s| s) {
        return ShadowMask::empty(img.width, img.height);
    }
    let closed = morph(
        &morph(&seeds, w, h, cfg.closing_radius, true),
        w,
        h,
        cfg.closing_radius,
        false,
    );
    let hard: Vec<f64> = closed.iter().map(|&b| b as u8 as f64).collect();
    let m = if cfg.edge_radius > 0 {
        gaussian_blur(&hard, w, h, cfg.edge_radius as f64 / 3.0, cfg.edge_radius)
    } else {
        hard
    };
    ShadowMask {
        width: img.width,
        height: img.height,
        m,
    }
}

pub fn detect_shadow(img: &Image) -> ShadowMask {
    detect_shadow_with(img, &DetectConfig::default())
}

/// Core pixels used for attenuation estimation and the surrounding ring.
const CORE_LEVEL: f64 = 0.99;
const RING_WIDTH: usize = 5;

/// Attenuation estimate `1 - mean luma(core) / mean luma(ring)` where the
/// ring is the band of unshadowed pixels within 5 px of the mask.
pub fn estimate_attenuation(img: &Image, mask: &ShadowMask) -> Result<f64> {
    check_dims(img, mask)?;
    let (w, h) = (img.width as usize, img.height as usize);
    let luma = img.luma();
    let mut core: Vec<usize> = (0..luma.len()).filter(|&i| mask.m[i] >= CORE_LEVEL).collect();
    if core.is_empty() {
        core = (0..luma.len()).filter(|&i| mask.m[i] > 0.5).collect();
    }
    if core.is_empty() {
        core = (0..luma.len()).filter(|&i| mask.m[i] > 0.0).collect();
    }
    let touched: Vec<bool> = mask.m.iter().map(|&v| v > 0.0).collect();
    let grown = morph(&touched, w, h, RING_WIDTH, true);
    let ring: Vec<usize> = (0..luma.len()).filter(|&i| grown[i] && !touched[i]).collect();
    if ring.is_empty() {
        return Err(Error::domain(
            "shadow mask covers the whole image; no unshadowed reference ring",
        ));
    }
    let mean = |idx: &[usize]| idx.iter().map(|&i| luma[i]).sum::<f64>() / idx.len() as f64;
    let ring_luma = mean(&ring);
    if ring_luma <= 0.0 {
        return Ok(0.0);
    }
    Ok((1.0 - mean(&core) / ring_luma).clamp(0.0, 0.95))
}

/// `img / (1 - s * M)`, clipped to [0, 1].
pub fn remove_with_attenuation(img: &Image, mask: &ShadowMask, attenuation: f64) -> Result<Image> {
    check_dims(img, mask)?;
    if !(0.0..1.0).contains(&attenuation) {
        return Err(Error::domain(format!("attenuation {attenuation} outside [0, 1)")));
    }
    let mut out = img.clone();
    for (i, m) in mask.m.iter().enumerate() {
        let f = 1.0 - attenuation * m;
        for c in 0..3 {
            let v = &mut out.rgb[3 * i + c];
            *v = (*v / f).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Mask-conditioned removal with the attenuation estimated from the image.
pub fn remove_shadow(img: &Image, mask: &ShadowMask) -> Result<Image> {
    check_dims(img, mask)?;
    if mask.is_empty() {
        return Ok(img.clone());
    }
    let s = estimate_attenuation(img, mask)?;
    remove_with_attenuation(img, mask, s)
}

/// Side-channel truth available to the oracle normalizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShadowTruth {
    pub mask: Option<ShadowMask>,
    pub attenuation: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizerKind {
    #[default]
    Heuristic,
    Oracle,
    Identity,
}

impl std::str::FromStr for NormalizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heuristic" => Ok(Self::Heuristic),
            "oracle" => Ok(Self::Oracle),
            "identity" => Ok(Self::Identity),
            other => Err(Error::domain(format!(
                "unknown normalizer '{other}' (expected heuristic, oracle or identity)"
            ))),
        }
    }
}

/// Maps an image under any lighting to the shadow-free condition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub kind: NormalizerKind,
    pub detect: DetectConfig,
}

impl Normalizer {
    pub fn new(kind: NormalizerKind) -> Self {
        Self {
            kind,
            detect: DetectConfig::default(),
        }
    }

    /// `truth` is consulted only by the oracle variant; without a mask the
    /// oracle returns its input.
    pub fn normalize(&self, img: &Image, truth: Option<&ShadowTruth>) -> Result<Image> {
        let out = match self.kind {
            NormalizerKind::Identity => img.clone(),
            NormalizerKind::Heuristic => {
                let mask = detect_shadow_with(img, &self.detect);
                match remove_shadow(img, &mask) {
                    Ok(out) => out,
                    // a mask without a reference ring carries no usable
                    // attenuation estimate
                    Err(Error::Domain(_)) => img.clone(),
                    Err(e) => return Err(e),
                }
            }
            NormalizerKind::Oracle => match truth.and_then(|t| t.mask.as_ref().map(|m| (m, t.attenuation))) {
                None => img.clone(),
                Some((mask, Some(s))) => remove_with_attenuation(img, mask, s)?,
                Some((mask, None)) => remove_shadow(img, mask)?,
            },
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn textured(w: u32, h: u32) -> Image {
        Image::from_fn(w, h, |x, y| {
            let a = ((x / 8 + y / 8) % 3) as f64;
            [0.7 + 0.1 * a, 0.85 - 0.05 * a, 0.8 + 0.05 * a]
        })
        .unwrap()
    }

    fn ellipse(s: f64, softness: f64) -> ShadowSpec {
        ShadowSpec {
            shape: ShadowShape::Ellipse {
                center: [40.0, 30.0],
                radii: [18.0, 10.0],
                angle_deg: 20.0,
            },
            attenuation: s,
            softness,
        }
    }

    #[test]
    fn tiny_attenuation_is_identity() {
        let img = textured(64, 48);
        let (out, _) = apply_shadow(&img, &ellipse(1e-12, 0.0)).unwrap();
        assert!(out.mean_abs_diff(&img).unwrap() < 1e-11);
    }

    #[test]
    fn full_mask_halves() {
        let img = textured(16, 16);
        let spec = ShadowSpec {
            shape: ShadowShape::HalfPlane {
                point: [-1.0, 0.0],
                normal: [1.0, 0.0],
            },
            attenuation: 0.5,
            softness: 0.0,
        };
        let (out, mask) = apply_shadow(&img, &spec).unwrap();
        assert!(mask.m.iter().all(|&v| v == 1.0));
        for (a, b) in out.rgb.iter().zip(&img.rgb) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn invalid_attenuation_rejected() {
        assert!(apply_shadow(&textured(8, 8), &ellipse(1.0, 0.0)).is_err());
        assert!(apply_shadow(&textured(8, 8), &ellipse(0.0, 0.0)).is_err());
    }

    #[test]
    fn exact_inverse_up_to_quantization() {
        let img = textured(64, 48);
        for softness in [0.0, 3.0] {
            let spec = ellipse(0.6, softness);
            let (out, mask) = apply_shadow(&img, &spec).unwrap();
            let back = remove_with_attenuation(&out, &mask, 0.6).unwrap();
            for (a, b) in back.rgb.iter().zip(&img.rgb) {
                assert!((a - b).abs() < 1e-12);
            }
            let stored = out.quantized();
            let back = remove_with_attenuation(&stored, &mask, 0.6).unwrap();
            // 8-bit storage error, amplified by at most 1 / (1 - s)
            let bound = 0.5 / 255.0 / 0.4 + 1e-12;
            assert!(back.rgb.iter().zip(&img.rgb).all(|(a, b)| (a - b).abs() <= bound));
        }
    }

    #[test]
    fn mask_survives_png() {
        let dir = tempfile::tempdir().unwrap();
        let mask = ellipse(0.5, 2.5).mask(40, 30);
        let p = dir.path().join("m.png");
        mask.save_png(&p).unwrap();
        assert_eq!(ShadowMask::load_png(&p).unwrap(), mask);
    }

    #[test]
    fn constant_image_has_no_shadow() {
        let img = Image::filled(32, 32, [0.6, 0.6, 0.6]).unwrap();
        assert!(detect_shadow(&img).is_empty());
    }

    #[test]
    fn detects_hard_ellipse() {
        let img = textured(64, 48);
        let (out, truth) = apply_shadow(&img, &ellipse(0.6, 0.0)).unwrap();
        let found = detect_shadow(&out);
        assert!(found.iou(&truth) > 0.7, "iou {}", found.iou(&truth));
    }

    #[test]
    fn empty_mask_removal_is_identity() {
        let img = textured(16, 16);
        let out = remove_shadow(&img, &ShadowMask::empty(16, 16)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn whole_image_mask_is_flagged() {
        let img = textured(16, 16);
        let mut m = ShadowMask::empty(16, 16);
        m.m.iter_mut().for_each(|v| *v = 1.0);
        assert!(remove_shadow(&img, &m).is_err());
    }

    #[test]
    fn mismatched_mask_rejected() {
        let img = textured(16, 16);
        assert!(remove_shadow(&img, &ShadowMask::empty(8, 16)).is_err());
    }

    #[test]
    fn removal_with_known_mask_restores_image() {
        let img = Image::filled(128, 128, [0.8, 0.75, 0.7]).unwrap();
        let spec = ShadowSpec {
            shape: ShadowShape::Ellipse {
                center: [64.0, 64.0],
                radii: [30.0, 20.0],
                angle_deg: 0.0,
            },
            attenuation: 0.6,
            softness: 0.0,
        };
        let (out, mask) = apply_shadow(&img, &spec).unwrap();
        let out = out.quantized();
        let removed = remove_shadow(&out, &mask).unwrap();
        assert!(crate::renderer::psnr(&removed, &img).unwrap() > 30.0);
        let s = estimate_attenuation(&out, &mask).unwrap();
        let again = apply_mask(&removed, &mask, s).unwrap();
        assert!(again.mean_abs_diff(&out).unwrap() < 2.0 / 255.0);
    }

    #[test]
    fn oracle_without_mask_is_identity() {
        let img = textured(16, 16);
        let n = Normalizer::new(NormalizerKind::Oracle);
        assert_eq!(n.normalize(&img, None).unwrap(), img);
        assert_eq!(n.normalize(&img, Some(&ShadowTruth::default())).unwrap(), img);
    }

    #[test]
    fn normalizer_names_parse() {
        assert_eq!("oracle".parse::<NormalizerKind>().unwrap(), NormalizerKind::Oracle);
        assert!("mtmt".parse::<NormalizerKind>().is_err());
    }

    proptest! {
        #[test]
        fn normalize_stays_in_range(seed in 0u64..1000, s in 0.2f64..0.8) {
            let img = Image::from_fn(32, 32, |x, y| {
                let h = crate::renderer::mix_seed(seed, (y * 32 + x) as u64);
                let v = (h % 1000) as f64 / 1000.0;
                [v, 0.5 * v + 0.4, 1.0 - 0.5 * v]
            }).unwrap();
            let spec = ShadowSpec {
                shape: ShadowShape::HalfPlane { point: [16.0, 0.0], normal: [1.0, 0.3] },
                attenuation: s,
                softness: 1.0,
            };
            let (out, _) = apply_shadow(&img, &spec).unwrap();
            let n = Normalizer::default().normalize(&out, None).unwrap();
            prop_assert!(n.rgb.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn detection_ignores_brightness_scale(seed in 0u64..1000) {
            // values kept below 1/1.2 so scaling never clips
            let base = Image::from_fn(48, 48, |x, y| {
                let h = crate::renderer::mix_seed(seed, ((y / 6) * 8 + x / 6) as u64);
                let v = 0.6 + 0.2 * (h % 100) as f64 / 100.0;
                [v, v * 0.95, v * 0.9]
            }).unwrap();
            let spec = ShadowSpec {
                shape: ShadowShape::Ellipse { center: [24.0, 24.0], radii: [12.0, 8.0], angle_deg: 30.0 },
                attenuation: 0.6,
                softness: 0.0,
            };
            let (img, _) = apply_shadow(&base, &spec).unwrap();
            let mut bright = img.clone();
            bright.rgb.iter_mut().for_each(|v| *v *= 1.2);
            let a = detect_shadow(&img);
            let b = detect_shadow(&bright);
            let diff: f64 = a.m.iter().zip(&b.m).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.m.len() as f64;
            prop_assert!(diff < 1e-3, "mask difference {}", diff);
        }
    }
}
