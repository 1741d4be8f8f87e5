use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use nerf_reloc::geometry::{pose_error, CameraIntrinsics, PoseSE3};
use nerf_reloc::hash_field::TdlfState;
use nerf_reloc::image::Image;
use nerf_reloc::localizer::{self, ErrorCell, LocalizeConfig, TestView};
use nerf_reloc::mapper::{self, Checkpoint, TrainConfig};
use nerf_reloc::normalizer::{Normalizer, NormalizerKind, ShadowMask, ShadowTruth};
use nerf_reloc::renderer::{self, RenderConfig};
use nerf_reloc::scenegen::{self, load_manifest, DatasetManifest, Orbit};
use nerf_reloc::{Error, Result};

/// Prints a line to stdout. A closed pipe (e.g. `| head`) is not an error.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

/// Flags shared by every subcommand.
pub struct Global {
    pub seed: u64,
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Scene preset; only `default` exists.
    #[arg(long, default_value = "default", value_parser = ["default"])]
    pub scene: String,
    #[arg(long, default_value_t = 40)]
    pub views: usize,
    #[arg(long, default_value_t = 64)]
    pub width: u32,
    #[arg(long, default_value_t = 64)]
    pub height: u32,
    /// Samples per ray for the ground-truth renders.
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    /// Skip the shadowed lighting conditions.
    #[arg(long)]
    pub no_shadows: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen(g: &Global, a: GenArgs) -> Result<()> {
    let spec = scenegen::desk_scene(g.seed);
    let intr = scenegen::desk_intrinsics(a.width, a.height)?;
    let lighting = if a.no_shadows {
        Vec::new()
    } else {
        scenegen::desk_lighting(a.width, a.height)
    };
    let cfg = RenderConfig {
        samples_per_ray: a.samples,
        ..RenderConfig::default()
    };
    let m = scenegen::generate_dataset(&spec, &Orbit::desk(a.views), &intr, &lighting, &cfg, &a.out)?;
    say!("wrote {} frames to {}", m.frames.len(), a.out.join("manifest.json").display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct NormalizeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory of true masks with the same file names; selects the oracle
    /// normalizer.
    #[arg(long)]
    pub oracle_masks: Option<PathBuf>,
}

pub fn normalize(_: &Global, a: NormalizeArgs) -> Result<()> {
    if a.out == a.input {
        return Err(Error::domain("--out must differ from --in"));
    }
    let mut names: Vec<PathBuf> = fs::read_dir(&a.input)
        .map_err(|e| Error::io(&a.input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    names.sort();
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let norm = Normalizer::new(if a.oracle_masks.is_some() {
        NormalizerKind::Oracle
    } else {
        NormalizerKind::Heuristic
    });
    for p in &names {
        let img = Image::load_png(p)?;
        let name = p.file_name().expect("file name");
        let truth = match &a.oracle_masks {
            Some(dir) if dir.join(name).is_file() => Some(ShadowTruth {
                mask: Some(ShadowMask::load_png(&dir.join(name))?),
                attenuation: None,
            }),
            _ => None,
        };
        norm.normalize(&img, truth.as_ref())?.save_png(&a.out.join(name))?;
    }
    say!("normalized {} images into {}", names.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    pub iters: u64,
    #[arg(long, default_value_t = 4096)]
    pub rays: usize,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    /// Comma-separated lighting tags to train on (default: all frames).
    #[arg(long, value_delimiter = ',')]
    pub lighting: Option<Vec<String>>,
    #[arg(long, default_value = "heuristic", value_parser = parse_normalizer)]
    pub normalizer: NormalizerKind,
    /// Write the per-iteration loss curve as JSON.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

fn parse_normalizer(s: &str) -> std::result::Result<NormalizerKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub fn train(g: &Global, a: TrainArgs) -> Result<()> {
    let manifest = load_manifest(&a.data)?;
    let cfg = TrainConfig {
        iterations: a.iters,
        rays_per_batch: a.rays,
        samples_per_ray: a.samples,
        seed: g.seed,
        deterministic: g.deterministic,
        normalizer: Normalizer::new(a.normalizer),
        lighting: a.lighting,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = mapper::train_map(&manifest, &cfg)?;
    out.checkpoint.save(&a.out)?;
    if let Some(p) = &a.loss_log {
        fs::write(p, serde_json::to_string(&out.losses)?).map_err(|e| Error::io(p, e))?;
    }
    if let Some(it) = out.diverged_at {
        return Err(Error::Diverged {
            iteration: it as usize,
            what: format!("training loss; last good map saved to {}", a.out.display()),
        });
    }
    say!(
        "trained {} iterations in {:.1}s, final loss {:.5}, map saved to {}",
        out.checkpoint.meta.iterations,
        start.elapsed().as_secs_f64(),
        out.checkpoint.meta.final_loss,
        a.out.display()
    );
    Ok(())
}

/// Options shared by `localize` and `ablate`.
#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 1024)]
    pub rays: usize,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value = "heuristic", value_parser = parse_normalizer)]
    pub normalizer: NormalizerKind,
}

impl RefineArgs {
    fn config(&self, g: &Global, tdlf: bool, numgrad: bool) -> LocalizeConfig {
        LocalizeConfig {
            iterations: self.iters,
            rays_per_iter: self.rays,
            samples_per_ray: self.samples,
            use_tdlf: tdlf,
            use_numerical_grad: numgrad,
            seed: g.seed,
            deterministic: g.deterministic,
            ..LocalizeConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// JSON array of 16 row-major values (camera-to-world).
    #[arg(long)]
    pub init_pose: PathBuf,
    #[arg(long)]
    pub gt_pose: Option<PathBuf>,
    /// Manifest whose intrinsics describe the image (default: 50 degree
    /// horizontal field of view).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// True shadow mask for the oracle normalizer.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub no_tdlf: bool,
    #[arg(long)]
    pub no_numgrad: bool,
    #[command(flatten)]
    pub refine: RefineArgs,
    #[arg(long)]
    pub report: PathBuf,
}

fn read_pose(path: &Path) -> Result<PoseSE3> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn intrinsics_for(data: Option<&Path>, img: &Image) -> Result<CameraIntrinsics> {
    match data {
        Some(p) => Ok(load_manifest(p)?.intrinsics),
        None => scenegen::desk_intrinsics(img.width, img.height),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::io(path, e))
}

pub fn localize(g: &Global, a: LocalizeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.map)?;
    let img = Image::load_png(&a.image)?;
    let intr = intrinsics_for(a.data.as_deref(), &img)?;
    let init = read_pose(&a.init_pose)?;
    let gt = a.gt_pose.as_deref().map(read_pose).transpose()?;
    let truth = a
        .mask
        .as_deref()
        .map(|p| -> Result<ShadowTruth> {
            Ok(ShadowTruth {
                mask: Some(ShadowMask::load_png(p)?),
                attenuation: None,
            })
        })
        .transpose()?;
    let cfg = a.refine.config(g, !a.no_tdlf, !a.no_numgrad);
    let report = localizer::localize(
        &ckpt.field,
        &intr,
        &img,
        &init,
        &cfg,
        &Normalizer::new(a.refine.normalizer),
        truth.as_ref(),
        gt.as_ref(),
    )?;
    write_json(&a.report, &report)?;
    match (report.translation_error, report.rotation_error_deg) {
        (Some(t), Some(r)) => say!("final error: {t:.5} translation, {r:.4} deg"),
        _ => say!("final pose written to {}", a.report.display()),
    }
    if let Some(it) = report.failed_at {
        return Err(Error::Diverged {
            iteration: it,
            what: "pose".into(),
        });
    }
    Ok(())
}

/// `t:4,8,12,16` (translation labels) or `r:2,5` (rotation degrees).
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub rotation: bool,
    pub values: Vec<f64>,
}

pub fn parse_grid(s: &str) -> std::result::Result<GridSpec, String> {
    let (kind, rest) = s.split_once(':').ok_or("expected t:<values> or r:<values>")?;
    let rotation = match kind {
        "t" => false,
        "r" => true,
        other => return Err(format!("unknown grid axis '{other}' (use t or r)")),
    };
    let values = rest
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("bad grid value '{v}': {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if values.is_empty() || values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err("grid values must be finite and >= 0".into());
    }
    Ok(GridSpec { rotation, values })
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub map: PathBuf,
    /// Dataset supplying test views and intrinsics.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "t:4,8,12,16", value_parser = parse_grid)]
    pub grid: GridSpec,
    /// Scene units per translation label.
    #[arg(long, default_value_t = 0.025)]
    pub units_per_label: f64,
    #[arg(long, default_value_t = 6)]
    pub positions: usize,
    /// Lighting tag of the test views.
    #[arg(long, default_value = "l0")]
    pub lighting: String,
    #[command(flatten)]
    pub refine: RefineArgs,
    #[arg(long)]
    pub report: PathBuf,
}

/// Picks `n` distinct frames with the given tag, deterministically from
/// `seed`.
pub fn pick_test_views(m: &DatasetManifest, tag: &str, n: usize, seed: u64) -> Result<Vec<TestView>> {
    let mut pool = m.frames_with_tag(tag);
    if pool.len() < n {
        return Err(Error::domain(format!(
            "only {} frames tagged '{tag}', {n} positions requested",
            pool.len()
        )));
    }
    let mut picked = Vec::with_capacity(n);
    for k in 0..n {
        let j = (renderer::mix_seed(seed, k as u64) % pool.len() as u64) as usize;
        picked.push(pool.swap_remove(j));
    }
    picked
        .into_iter()
        .map(|i| {
            Ok(TestView {
                image: m.load_image(i)?,
                pose: m.frames[i].pose,
                truth: Some(m.truth(i)?),
            })
        })
        .collect()
}

pub fn ablate(g: &Global, a: AblateArgs) -> Result<()> {
    if a.positions == 0 {
        return Err(Error::domain("--positions must be >= 1"));
    }
    let ckpt = Checkpoint::load(&a.map)?;
    let m = load_manifest(&a.data)?;
    let views = pick_test_views(&m, &a.lighting, a.positions, g.seed)?;
    let cells: Vec<ErrorCell> = a
        .grid
        .values
        .iter()
        .map(|&v| ErrorCell {
            label: v,
            translation: if a.grid.rotation { 0.0 } else { v * a.units_per_label },
            rotation_deg: if a.grid.rotation { v } else { 0.0 },
        })
        .collect();
    let cfg = a.refine.config(g, true, true);
    let report = localizer::ablation_sweep(
        &ckpt.field,
        &m.intrinsics,
        &views,
        &cells,
        a.units_per_label,
        &cfg,
        &Normalizer::new(a.refine.normalizer),
    )?;
    write_json(&a.report, &report)?;
    say!("{}", report.to_table().trim_end());
    Ok(())
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub pose: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest providing intrinsics (default: --width/--height at 50 degrees).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub width: u32,
    #[arg(long, default_value_t = 64)]
    pub height: u32,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
}

pub fn render(g: &Global, a: RenderArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.map)?;
    let pose = read_pose(&a.pose)?;
    let intr = match &a.data {
        Some(p) => load_manifest(p)?.intrinsics,
        None => scenegen::desk_intrinsics(a.width, a.height)?,
    };
    let cfg = RenderConfig {
        samples_per_ray: a.samples,
        seed: g.seed,
        ..RenderConfig::default()
    };
    let img = renderer::render_image(&ckpt.field, &pose, &intr, &TdlfState::open(ckpt.field.levels()), &cfg)?;
    img.save_png(&a.out)?;
    say!("rendered {}x{} image to {}", img.width, img.height, a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, requires = "pose_b")]
    pub pose_a: Option<PathBuf>,
    #[arg(long, requires = "pose_a")]
    pub pose_b: Option<PathBuf>,
}

pub fn eval(_: &Global, a: EvalArgs) -> Result<()> {
    let x = Image::load_png(&a.a)?;
    let y = Image::load_png(&a.b)?;
    say!("PSNR {:.1}", renderer::psnr(&x, &y)?);
    say!("SSIM {:.4}", renderer::ssim(&x, &y)?);
    if let (Some(pa), Some(pb)) = (&a.pose_a, &a.pose_b) {
        let (t, r) = pose_error(&read_pose(pa)?, &read_pose(pb)?);
        say!("translation error {t:.6}");
        say!("rotation error {r:.4} deg");
    }
    Ok(())
}
