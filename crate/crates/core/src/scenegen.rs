//! Analytic ground-truth scenes, orbit trajectories and the on-disk dataset
//! format.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::RadianceSample;
use crate::geometry::{Aabb, CameraIntrinsics, PoseSE3, Vec3, POSE_TOLERANCE};
use crate::image::Image;
use crate::normalizer::{apply_shadow, ShadowMask, ShadowShape, ShadowSpec, ShadowTruth};
use crate::renderer::{render_image_with, RadianceSource, RenderConfig};
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const SUPPORTED_VERSIONS: &[u32] = &[MANIFEST_VERSION];
/// Lighting tag of the canonical shadow-free images.
pub const CLEAN_TAG: &str = "l0";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Box {
        min: [f64; 3],
        max: [f64; 3],
        color: [f64; 3],
        density: f64,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        color: [f64; 3],
        density: f64,
    },
}

impl Primitive {
    pub fn contains(&self, x: [f64; 3]) -> bool {
        match self {
            Primitive::Box { min, max, .. } => (0..3).all(|i| x[i] >= min[i] && x[i] <= max[i]),
            Primitive::Sphere { center, radius, .. } => {
                (0..3).map(|i| (x[i] - center[i]).powi(2)).sum::<f64>() <= radius * radius
            }
        }
    }

    pub fn color(&self) -> [f64; 3] {
        match self {
            Primitive::Box { color, .. } | Primitive::Sphere { color, .. } => *color,
        }
    }

    pub fn density(&self) -> f64 {
        match self {
            Primitive::Box { density, .. } | Primitive::Sphere { density, .. } => *density,
        }
    }

    fn aabb(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Primitive::Box { min, max, .. } => (*min, *max),
            Primitive::Sphere { center, radius, .. } => (center.map(|c| c - radius), center.map(|c| c + radius)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub bounds: Aabb,
    pub background: [f64; 3],
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        for (i, p) in self.primitives.iter().enumerate() {
            let (lo, hi) = p.aabb();
            let inside = (0..3).all(|a| lo[a] >= self.bounds.min[a] - 1e-12 && hi[a] <= self.bounds.max[a] + 1e-12);
            if !inside {
                return Err(Error::domain(format!("primitive {i} leaves the scene bounds")));
            }
            if !(p.density() > 0.0 && p.density().is_finite()) {
                return Err(Error::domain(format!("primitive {i} needs a finite positive density")));
            }
            if p.color().iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::domain(format!("primitive {i} color outside [0, 1]")));
            }
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::domain("background color outside [0, 1]"));
        }
        Ok(())
    }
}

/// Ground-truth field: the first primitive containing `x` determines color
/// and density; empty space has zero density.
pub fn analytic_radiance(spec: &SceneSpec, x: [f64; 3], _d: [f64; 3]) -> RadianceSample<f64> {
    match spec.primitives.iter().find(|p| p.contains(x)) {
        Some(p) => RadianceSample {
            color: p.color(),
            sigma: p.density(),
        },
        None => RadianceSample {
            color: [0.0; 3],
            sigma: 0.0,
        },
    }
}

impl RadianceSource for SceneSpec {
    type Scratch = ();

    fn make_scratch(&self) {}

    fn bounds(&self) -> Aabb {
        self.bounds
    }

    fn background(&self) -> [f64; 3] {
        self.background
    }

    fn radiance(&self, x: [f64; 3], d: [f64; 3], _: &mut ()) -> Result<RadianceSample<f64>> {
        Ok(analytic_radiance(self, x, d))
    }
}

const DESK_DENSITY: f64 = 40.0;

/// Unit-cube desk: a light floor slab, four boxes and a sphere in pastel
/// colors against a white background, y up.
pub fn desk_scene(seed: u64) -> SceneSpec {
    let b = |min: [f64; 3], max: [f64; 3], color: [f64; 3]| Primitive::Box {
        min,
        max,
        color,
        density: DESK_DENSITY,
    };
    SceneSpec {
        primitives: vec![
            b([-0.35, -0.4, -0.3], [-0.1, -0.1, -0.05], [1.0, 0.72, 0.62]),
            b([0.1, -0.4, -0.35], [0.35, 0.05, -0.1], [0.62, 0.92, 0.62]),
            b([0.05, -0.4, 0.1], [0.3, -0.2, 0.35], [0.7, 0.82, 1.0]),
            Primitive::Sphere {
                center: [-0.2, -0.25, 0.22],
                radius: 0.15,
                color: [1.0, 0.92, 0.5],
                density: DESK_DENSITY,
            },
            b([-0.42, -0.4, 0.3], [-0.32, 0.2, 0.4], [0.95, 0.75, 0.95]),
            b([-0.5, -0.5, -0.5], [0.5, -0.4, 0.5], [0.85, 0.85, 0.85]),
        ],
        bounds: Aabb {
            min: [-0.5; 3],
            max: [0.5; 3],
        },
        background: [1.0; 3],
        seed,
    }
}

/// Circular camera path around a look-at point, y up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orbit {
    pub radius: f64,
    /// Camera height above the look-at point.
    pub height: f64,
    pub n_views: usize,
    pub look_at: [f64; 3],
    pub start_deg: f64,
}

impl Orbit {
    pub fn desk(n_views: usize) -> Self {
        Self {
            radius: 1.3,
            height: 0.7,
            n_views,
            look_at: [0.0, -0.25, 0.0],
            start_deg: 0.0,
        }
    }

    pub fn eye(&self, angle_deg: f64) -> Vec3 {
        let a = angle_deg.to_radians();
        Vec3::new(
            self.look_at[0] + self.radius * a.cos(),
            self.look_at[1] + self.height,
            self.look_at[2] + self.radius * a.sin(),
        )
    }

    pub fn pose_at(&self, angle_deg: f64) -> Result<PoseSE3> {
        let target = Vec3::from(self.look_at);
        PoseSE3::look_at(&self.eye(angle_deg), &target, &Vec3::y())
    }

    pub fn poses(&self) -> Result<Vec<PoseSE3>> {
        if self.n_views == 0 {
            return Err(Error::domain("orbit needs at least one view"));
        }
        (0..self.n_views)
            .map(|i| self.pose_at(self.start_deg + 360.0 * i as f64 / self.n_views as f64))
            .collect()
    }
}

/// 50 degree horizontal field of view, square pixels.
pub fn desk_intrinsics(width: u32, height: u32) -> Result<CameraIntrinsics> {
    CameraIntrinsics::from_fov(width, height, 50.0)
}

/// A named lighting condition realized as an image-space shadow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    pub tag: String,
    pub shadow: ShadowSpec,
}

/// Two shadowed conditions scaled to the image size: a soft ellipse over the
/// lower center and a diagonal half-plane.
pub fn desk_lighting(width: u32, height: u32) -> Vec<Lighting> {
    let (w, h) = (width as f64, height as f64);
    vec![
        Lighting {
            tag: "l1".into(),
            shadow: ShadowSpec {
                shape: ShadowShape::Ellipse {
                    center: [0.45 * w, 0.62 * h],
                    radii: [0.28 * w, 0.16 * h],
                    angle_deg: -15.0,
                },
                attenuation: 0.6,
                softness: 0.0,
            },
        },
        Lighting {
            tag: "l2".into(),
            shadow: ShadowSpec {
                shape: ShadowShape::HalfPlane {
                    point: [0.7 * w, 0.0],
                    normal: [1.0, -0.4],
                },
                attenuation: 0.5,
                softness: 1.5,
            },
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    /// Path relative to the manifest directory.
    pub image: String,
    pub pose: PoseSE3,
    pub lighting: String,
    pub mask: Option<String>,
    /// Shadow attenuation used to synthesize the frame, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attenuation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub intrinsics: CameraIntrinsics,
    pub bounds: Aabb,
    pub background: [f64; 3],
    pub frames: Vec<Frame>,
    /// Directory that frame paths are relative to.
    pub root: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("manifest not found: {0}")]
    NotFound(PathBuf),
    #[error("cannot parse manifest {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("unsupported manifest format_version {found} (supported: {supported:?})")]
    UnsupportedVersion { found: u64, supported: Vec<u32> },
    #[error("frame {frame}: invalid pose: {detail}")]
    PoseInvariant { frame: usize, detail: String },
    #[error("frame {frame}: referenced file {path} does not exist")]
    MissingFile { frame: usize, path: PathBuf },
    #[error("invalid manifest: {0}")]
    Invalid(String),
}

/// On-disk layout; poses are kept raw so that invariant violations are
/// reported as such rather than as parse errors.
#[derive(Serialize, Deserialize)]
struct RawManifest {
    format_version: u32,
    intrinsics: CameraIntrinsics,
    bounds: [[f64; 3]; 2],
    background: [f64; 3],
    frames: Vec<RawFrame>,
}

#[derive(Serialize, Deserialize)]
struct RawFrame {
    image: String,
    pose: Vec<f64>,
    lighting: String,
    mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attenuation: Option<f64>,
}

impl DatasetManifest {
    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.frames[i].image)
    }

    pub fn load_image(&self, i: usize) -> Result<Image> {
        let img = Image::load_png(&self.image_path(i))?;
        if img.width != self.intrinsics.width || img.height != self.intrinsics.height {
            return Err(Error::domain(format!(
                "frame {i} is {}x{}, intrinsics say {}x{}",
                img.width, img.height, self.intrinsics.width, self.intrinsics.height
            )));
        }
        Ok(img)
    }

    pub fn load_mask(&self, i: usize) -> Result<Option<ShadowMask>> {
        self.frames[i]
            .mask
            .as_ref()
            .map(|m| ShadowMask::load_png(&self.root.join(m)))
            .transpose()
    }

    /// Side-channel truth for the oracle normalizer.
    pub fn truth(&self, i: usize) -> Result<ShadowTruth> {
        Ok(ShadowTruth {
            mask: self.load_mask(i)?,
            attenuation: self.frames[i].attenuation,
        })
    }

    pub fn frames_with_tag(&self, tag: &str) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| self.frames[i].lighting == tag).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let raw = RawManifest {
            format_version: self.format_version,
            intrinsics: self.intrinsics,
            bounds: [self.bounds.min, self.bounds.max],
            background: self.background,
            frames: self
                .frames
                .iter()
                .map(|f| RawFrame {
                    image: f.image.clone(),
                    pose: f.pose.to_row_major().to_vec(),
                    lighting: f.lighting.clone(),
                    mask: f.mask.clone(),
                    attenuation: f.attenuation,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&raw)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Reads and fully validates a manifest, including the existence of every
/// referenced file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ManifestError::NotFound(path.to_path_buf()).into(),
        _ => Error::io(path, e),
    })?;
    let parse_err = |e: serde_json::Error| ManifestError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(parse_err)?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| ManifestError::Invalid("missing integer format_version".into()))?;
    if !SUPPORTED_VERSIONS.iter().any(|&v| v as u64 == version) {
        return Err(ManifestError::UnsupportedVersion {
            found: version,
            supported: SUPPORTED_VERSIONS.to_vec(),
        }
        .into());
    }
    let raw: RawManifest = serde_json::from_value(value).map_err(parse_err)?;
    let invalid = |e: Error| ManifestError::Invalid(e.to_string());
    raw.intrinsics.validate().map_err(invalid)?;
    let bounds = Aabb::new(raw.bounds[0], raw.bounds[1]).map_err(invalid)?;
    if raw.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(ManifestError::Invalid("background outside [0, 1]".into()).into());
    }
    if raw.frames.is_empty() {
        return Err(ManifestError::Invalid("manifest has no frames".into()).into());
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut frames = Vec::with_capacity(raw.frames.len());
    for (i, f) in raw.frames.into_iter().enumerate() {
        let pose = PoseSE3::from_row_major(&f.pose).map_err(|e| ManifestError::PoseInvariant {
            frame: i,
            detail: e.to_string(),
        })?;
        for rel in std::iter::once(&f.image).chain(f.mask.as_ref()) {
            let p = root.join(rel);
            if !p.is_file() {
                return Err(ManifestError::MissingFile { frame: i, path: p }.into());
            }
        }
        if let Some(s) = f.attenuation {
            if !(0.0..1.0).contains(&s) {
                return Err(ManifestError::Invalid(format!("frame {i}: attenuation {s} outside [0, 1)")).into());
            }
        }
        frames.push(Frame {
            image: f.image,
            pose,
            lighting: f.lighting,
            mask: f.mask,
            attenuation: f.attenuation,
        });
    }
    Ok(DatasetManifest {
        format_version: raw.format_version,
        intrinsics: raw.intrinsics,
        bounds,
        background: raw.background,
        frames,
        root,
    })
}

/// Sampling used to render ground-truth views: many fixed samples so the
/// quadrature error is well below 8-bit quantization.
pub fn ground_truth_render_config() -> RenderConfig {
    RenderConfig {
        samples_per_ray: 256,
        ..RenderConfig::default()
    }
}

/// Renders every orbit view of the analytic scene, writes the shadow-free
/// images under [`CLEAN_TAG`] and one shadowed copy per lighting condition
/// (with its mask), then writes `manifest.json` into `out_dir`.
pub fn generate_dataset(
    spec: &SceneSpec,
    orbit: &Orbit,
    intr: &CameraIntrinsics,
    lighting: &[Lighting],
    render: &RenderConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    intr.validate()?;
    for l in lighting {
        l.shadow.validate()?;
        if l.tag == CLEAN_TAG {
            return Err(Error::domain(format!("lighting tag '{CLEAN_TAG}' is reserved for shadow-free images")));
        }
    }
    let poses = orbit.poses()?;
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let per_view: Vec<Vec<Frame>> = poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| -> Result<Vec<Frame>> {
            let clean = render_image_with(spec, pose, intr, render)?.quantized();
            let name = format!("images/{CLEAN_TAG}_{i:03}.png");
            clean.save_png(&out_dir.join(&name))?;
            let mut frames = vec![Frame {
                image: name,
                pose: *pose,
                lighting: CLEAN_TAG.into(),
                mask: None,
                attenuation: None,
            }];
            for l in lighting {
                let (shadowed, mask) = apply_shadow(&clean, &l.shadow)?;
                let name = format!("images/{}_{i:03}.png", l.tag);
                let mask_name = format!("masks/{}_{i:03}.png", l.tag);
                shadowed.save_png(&out_dir.join(&name))?;
                mask.save_png(&out_dir.join(&mask_name))?;
                frames.push(Frame {
                    image: name,
                    pose: *pose,
                    lighting: l.tag.clone(),
                    mask: Some(mask_name),
                    attenuation: Some(l.shadow.attenuation),
                });
            }
            Ok(frames)
        })
        .collect::<Result<_>>()?;
    // group frames by lighting tag, views in order
    let mut frames: Vec<Frame> = Vec::with_capacity(per_view.len() * (1 + lighting.len()));
    for k in 0..=lighting.len() {
        frames.extend(per_view.iter().map(|v| v[k].clone()));
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        intrinsics: *intr,
        bounds: spec.bounds,
        background: spec.background,
        frames,
        root: out_dir.to_path_buf(),
    };
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Checks that a pose's optical axis passes through `target`; returns the
/// distance of `target` from the axis.
pub fn look_at_residual(pose: &PoseSE3, target: &Vec3) -> f64 {
    let axis = -pose.rotation.column(2).into_owned();
    let v = target - pose.translation;
    (v - axis * v.dot(&axis)).norm()
}

/// Whether a pose is usable as a dataset pose.
pub fn check_pose(pose: &PoseSE3) -> Result<()> {
    pose.validate(POSE_TOLERANCE)
}
