//! Command implementations behind the `lensfield` binary.
//!
//! Commands read a plain-text key-value config (unknown keys are rejected),
//! apply CLI override flags, and write a resolved copy of the final
//! configuration next to their outputs, so any run can be reproduced from
//! its output directory alone.
//!
//! Exit codes: 0 success, 2 configuration/usage errors, 3 numeric failures.

use crate::error::{Error, Result};
use crate::field::rebuild_occupancy;
use crate::grad::{run_gradcheck, GradCheckConfig, GradKind};
use crate::io::{self, Split};
use crate::metrics::{psnr, ssim, SrgbImage};
use crate::plot::{line_chart, Series};
use crate::recon::{run_reconstruction, CameraModel, ReconConfig, ReconOutcome};
use crate::render::{render_image, LinearImage, RenderConfig};
use crate::scenegen::{
    fabricate_dataset, make_hemisphere_cameras, ApertureSpec, DatasetSpec, SceneSpec,
};
use crate::Rgb;
use clap::{Args, Parser, Subcommand};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "lensfield",
    about = "Thin-lens volumetric rendering and radiance-field reconstruction from defocused captures",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Bake a synthetic scene and render a defocused training dataset.
    Fabricate(CommonArgs),
    /// Optimize a voxel field (and optionally the lens parameters) on a dataset.
    Reconstruct(ReconArgs),
    /// Render views from a checkpoint next to their ground truth.
    Render(CommonArgs),
    /// Score a directory of renders against ground truth (PSNR / SSIM).
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients against finite differences and report.
    Gradcheck(CommonArgs),
    /// Reconstruction quality and runtime across rays-per-pixel settings.
    AblateRpp(ReconArgs),
    /// Reconstruction quality across perturbed defocus initializations.
    AblateDefocusInit(ReconArgs),
}

#[derive(Args, Clone)]
pub struct CommonArgs {
    /// Plain-text key-value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the config's RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Deterministic single-threaded mode.
    #[arg(long)]
    pub serial: bool,
}

#[derive(Args, Clone)]
pub struct ReconArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset directory (overrides the config's `dataset`).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Override rays per pixel.
    #[arg(long)]
    pub rpp: Option<usize>,
    /// Disable aperture-radius optimization.
    #[arg(long)]
    pub no_opt_aperture: bool,
    /// Disable focus-distance optimization.
    #[arg(long)]
    pub no_opt_focus: bool,
}

#[derive(Args, Clone)]
pub struct EvaluateArgs {
    /// Directory of rendered images (PNG).
    pub render_dir: PathBuf,
    /// Directory of ground-truth images with matching filenames.
    pub gt_dir: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Entry point used by the binary; returns the process exit code.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Fabricate(args) => cmd_fabricate(&args),
        Command::Reconstruct(args) => cmd_reconstruct(&args).map(|_| ()),
        Command::Render(args) => cmd_render(&args),
        Command::Evaluate(args) => cmd_evaluate(&args).map(|_| ()),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::AblateRpp(args) => cmd_ablate_rpp(&args),
        Command::AblateDefocusInit(args) => cmd_ablate_defocus(&args),
    }
}

// ---------------------------------------------------------------------------
// Key-value configuration
// ---------------------------------------------------------------------------

/// Parsed config file with unknown-key detection: every key must be taken
/// by the command, or loading fails.
pub struct ConfigMap {
    path: PathBuf,
    map: BTreeMap<String, String>,
    taken: BTreeSet<String>,
}

impl ConfigMap {
    pub fn load(path: Option<&Path>) -> Result<ConfigMap> {
        let mut map = BTreeMap::new();
        let path_buf = path.map(Path::to_path_buf).unwrap_or_else(|| "<none>".into());
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            for (ln, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((key, value)) = line.split_once(char::is_whitespace) else {
                    return Err(Error::config(format!(
                        "{}:{}: expected 'key value', got '{line}'",
                        p.display(),
                        ln + 1
                    )));
                };
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(ConfigMap {
            path: path_buf,
            map,
            taken: BTreeSet::new(),
        })
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.taken.insert(key.to_string());
        self.map.get(key).cloned()
    }

    pub fn get_string(&mut self, key: &str, default: &str) -> String {
        self.raw(key).unwrap_or_else(|| default.to_string())
    }

    pub fn get_opt_string(&mut self, key: &str) -> Option<String> {
        self.raw(key)
    }

    pub fn get_f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(format!("bad float for '{key}': '{v}'"))),
        }
    }

    pub fn get_usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(format!("bad integer for '{key}': '{v}'"))),
        }
    }

    pub fn get_u64(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(format!("bad integer for '{key}': '{v}'"))),
        }
    }

    pub fn get_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::config(format!("bad bool for '{key}': '{v}'"))),
            },
        }
    }

    /// Fails if the file contained keys nobody asked for.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<&String> = self
            .map
            .keys()
            .filter(|k| !self.taken.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "unknown keys in {}: {}",
                self.path.display(),
                unknown
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

// ---------------------------------------------------------------------------
// fabricate
// ---------------------------------------------------------------------------

struct FabricateConfig {
    scene: String,
    spec: DatasetSpec,
}

fn fabricate_config(args: &CommonArgs) -> Result<FabricateConfig> {
    let mut cfg = ConfigMap::load(args.config.as_deref())?;
    let scene = cfg.get_string("scene", "occluder");
    let defaults = DatasetSpec::desk_default();
    let focal_length = cfg.get_f64("focal_length", defaults.focal_length)?;
    let aperture = match (cfg.get_opt_string("aperture_radius"), cfg.get_opt_string("f_number")) {
        (Some(_), Some(_)) => {
            return Err(Error::config(
                "give either aperture_radius or f_number, not both",
            ))
        }
        (Some(r), None) => ApertureSpec::Radius(
            r.parse()
                .map_err(|_| Error::config("bad float for 'aperture_radius'"))?,
        ),
        (None, Some(n)) => ApertureSpec::FNumber(
            n.parse()
                .map_err(|_| Error::config("bad float for 'f_number'"))?,
        ),
        (None, None) => defaults.aperture,
    };
    let spec = DatasetSpec {
        train_count: cfg.get_usize("train_views", defaults.train_count)?,
        val_count: cfg.get_usize("val_views", defaults.val_count)?,
        hemisphere_radius: cfg.get_f64("hemisphere_radius", defaults.hemisphere_radius)?,
        width: cfg.get_usize("width", defaults.width as usize)? as u32,
        height: cfg.get_usize("height", defaults.height as usize)? as u32,
        fov_deg: cfg.get_f64("fov_deg", defaults.fov_deg)?,
        focal_length,
        focus_distance: cfg.get_f64("focus_distance", defaults.focus_distance)?,
        aperture,
        seed: args.seed.map(Ok).unwrap_or_else(|| cfg.get_u64("seed", defaults.seed))?,
        gt_rays_per_pixel: cfg.get_usize("gt_rays_per_pixel", defaults.gt_rays_per_pixel)?,
        step_size: cfg.get_f64("step_size", defaults.step_size)?,
        bake_resolution: cfg.get_usize("bake_resolution", defaults.bake_resolution)?,
    };
    cfg.finish()?;
    Ok(FabricateConfig { scene, spec })
}

fn fabricate_resolved_text(fc: &FabricateConfig) -> String {
    let s = &fc.spec;
    let mut t = String::from("# resolved fabricate config\n");
    let _ = writeln!(t, "scene {}", fc.scene);
    let _ = writeln!(t, "train_views {}", s.train_count);
    let _ = writeln!(t, "val_views {}", s.val_count);
    let _ = writeln!(t, "hemisphere_radius {}", io::fmt_f64(s.hemisphere_radius));
    let _ = writeln!(t, "width {}", s.width);
    let _ = writeln!(t, "height {}", s.height);
    let _ = writeln!(t, "fov_deg {}", io::fmt_f64(s.fov_deg));
    let _ = writeln!(t, "focal_length {}", io::fmt_f64(s.focal_length));
    let _ = writeln!(t, "focus_distance {}", io::fmt_f64(s.focus_distance));
    let _ = writeln!(
        t,
        "aperture_radius {}",
        io::fmt_f64(s.aperture.radius(s.focal_length))
    );
    let _ = writeln!(t, "seed {}", s.seed);
    let _ = writeln!(t, "gt_rays_per_pixel {}", s.gt_rays_per_pixel);
    let _ = writeln!(t, "step_size {}", io::fmt_f64(s.step_size));
    let _ = writeln!(t, "bake_resolution {}", s.bake_resolution);
    t
}

fn cmd_fabricate(args: &CommonArgs) -> Result<()> {
    let fc = fabricate_config(args)?;
    ensure_out_dir(&args.out)?;
    let scene = SceneSpec::by_name(&fc.scene)?;
    log::info!(
        "fabricating '{}': {}+{} views at {}x{}",
        fc.scene,
        fc.spec.train_count,
        fc.spec.val_count,
        fc.spec.width,
        fc.spec.height
    );
    fabricate_dataset(&scene, &fc.spec, &args.out)?;
    io::write_text(&args.out.join("resolved.cfg"), &fabricate_resolved_text(&fc))?;
    println!("dataset written to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// reconstruct
// ---------------------------------------------------------------------------

struct ReconRun {
    dataset_dir: PathBuf,
    cfg: ReconConfig,
}

fn recon_config(args: &ReconArgs) -> Result<ReconRun> {
    let mut cfg_map = ConfigMap::load(args.common.config.as_deref())?;
    let d = ReconConfig::default();
    let dataset_dir = args
        .dataset
        .clone()
        .or_else(|| cfg_map.get_opt_string("dataset").map(PathBuf::from))
        .ok_or_else(|| Error::config("no dataset given (config 'dataset' or --dataset)"))?;
    let grid = cfg_map.get_usize("grid_resolution", d.grid_resolution[0])?;
    let camera_model = match cfg_map.get_string("camera_model", "lens").as_str() {
        "lens" => CameraModel::Lens,
        "pinhole" => CameraModel::Pinhole,
        other => {
            return Err(Error::config(format!(
                "camera_model must be lens|pinhole, got '{other}'"
            )))
        }
    };
    let steps = cfg_map.get_usize("steps", d.steps)?;
    let background = Rgb::new(
        cfg_map.get_f64("background_r", 0.0)?,
        cfg_map.get_f64("background_g", 0.0)?,
        cfg_map.get_f64("background_b", 0.0)?,
    );
    let fixed = cfg_map.get_usize("fixed_pixels_per_batch", 0)?;
    let cfg = ReconConfig {
        grid_resolution: [grid; 3],
        lr: cfg_map.get_f64("lr", d.lr)?,
        steps,
        decay_factor: cfg_map.get_f64("decay_factor", d.decay_factor)?,
        decay_steps: [
            cfg_map.get_usize("decay_step1", 0)?,
            cfg_map.get_usize("decay_step2", 0)?,
        ],
        sample_point_target: cfg_map.get_usize("sample_point_target", d.sample_point_target)?,
        fixed_pixels_per_batch: (fixed > 0).then_some(fixed),
        rays_per_pixel: args
            .rpp
            .map(Ok)
            .unwrap_or_else(|| cfg_map.get_usize("rays_per_pixel", d.rays_per_pixel))?,
        rpp_doubling: cfg_map.get_bool("rpp_doubling", d.rpp_doubling)?,
        optimize_aperture: !args.no_opt_aperture
            && cfg_map.get_bool("optimize_aperture", d.optimize_aperture)?,
        optimize_focus: !args.no_opt_focus
            && cfg_map.get_bool("optimize_focus", d.optimize_focus)?,
        defocus_lr: cfg_map.get_f64("defocus_lr", d.defocus_lr)?,
        seed: args
            .common
            .seed
            .map(Ok)
            .unwrap_or_else(|| cfg_map.get_u64("seed", d.seed))?,
        camera_model,
        aperture_scale: cfg_map.get_f64("aperture_scale", d.aperture_scale)?,
        focus_scale: cfg_map.get_f64("focus_scale", d.focus_scale)?,
        step_size: cfg_map.get_f64("step_size", d.step_size)?,
        max_samples_per_ray: cfg_map.get_usize("max_samples_per_ray", d.max_samples_per_ray)?,
        background,
        use_occupancy: cfg_map.get_bool("use_occupancy", d.use_occupancy)?,
        occupancy_threshold: cfg_map.get_f64("occupancy_threshold", d.occupancy_threshold)?,
        occupancy_interval: cfg_map.get_usize("occupancy_interval", d.occupancy_interval)?,
        eval_interval: cfg_map.get_usize("eval_interval", d.eval_interval)?,
        serial: args.common.serial || cfg_map.get_bool("serial", false)?,
    };
    cfg_map.finish()?;
    cfg.validate()?;
    Ok(ReconRun { dataset_dir, cfg })
}

fn recon_resolved_text(run: &ReconRun) -> String {
    let c = &run.cfg;
    let mut t = String::from("# resolved reconstruct config\n");
    let _ = writeln!(t, "dataset {}", run.dataset_dir.display());
    let _ = writeln!(t, "grid_resolution {}", c.grid_resolution[0]);
    let _ = writeln!(t, "lr {}", io::fmt_f64(c.lr));
    let _ = writeln!(t, "steps {}", c.steps);
    let _ = writeln!(t, "decay_factor {}", io::fmt_f64(c.decay_factor));
    let _ = writeln!(t, "decay_step1 {}", c.schedule()[0]);
    let _ = writeln!(t, "decay_step2 {}", c.schedule()[1]);
    let _ = writeln!(t, "sample_point_target {}", c.sample_point_target);
    let _ = writeln!(
        t,
        "fixed_pixels_per_batch {}",
        c.fixed_pixels_per_batch.unwrap_or(0)
    );
    let _ = writeln!(t, "rays_per_pixel {}", c.rays_per_pixel);
    let _ = writeln!(t, "rpp_doubling {}", c.rpp_doubling);
    let _ = writeln!(t, "optimize_aperture {}", c.optimize_aperture);
    let _ = writeln!(t, "optimize_focus {}", c.optimize_focus);
    let _ = writeln!(t, "defocus_lr {}", io::fmt_f64(c.defocus_lr));
    let _ = writeln!(t, "seed {}", c.seed);
    let _ = writeln!(
        t,
        "camera_model {}",
        match c.camera_model {
            CameraModel::Lens => "lens",
            CameraModel::Pinhole => "pinhole",
        }
    );
    let _ = writeln!(t, "aperture_scale {}", io::fmt_f64(c.aperture_scale));
    let _ = writeln!(t, "focus_scale {}", io::fmt_f64(c.focus_scale));
    let _ = writeln!(t, "step_size {}", io::fmt_f64(c.step_size));
    let _ = writeln!(t, "max_samples_per_ray {}", c.max_samples_per_ray);
    let _ = writeln!(t, "background_r {}", io::fmt_f64(c.background.x));
    let _ = writeln!(t, "background_g {}", io::fmt_f64(c.background.y));
    let _ = writeln!(t, "background_b {}", io::fmt_f64(c.background.z));
    let _ = writeln!(t, "use_occupancy {}", c.use_occupancy);
    let _ = writeln!(t, "occupancy_threshold {}", io::fmt_f64(c.occupancy_threshold));
    let _ = writeln!(t, "occupancy_interval {}", c.occupancy_interval);
    let _ = writeln!(t, "eval_interval {}", c.eval_interval);
    let _ = writeln!(t, "serial {}", c.serial);
    t
}

fn cmd_reconstruct(args: &ReconArgs) -> Result<ReconOutcome> {
    let run = recon_config(args)?;
    ensure_out_dir(&args.common.out)?;
    io::write_text(&args.common.out.join("resolved.cfg"), &recon_resolved_text(&run))?;
    let dataset = io::load_dataset(&run.dataset_dir)?;
    let outcome = run_reconstruction(&dataset, &run.cfg, &args.common.out)?;
    println!(
        "final: psnr {:.2} dB ssim {:.4} a_R {:.6e} z_f {:.6e} ({:.1}s)",
        outcome.val_psnr,
        outcome.val_ssim,
        outcome.aperture,
        outcome.focus,
        outcome.wall_seconds
    );
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

fn cmd_render(args: &CommonArgs) -> Result<()> {
    let mut cfg_map = ConfigMap::load(args.config.as_deref())?;
    let dataset_dir = PathBuf::from(
        cfg_map
            .get_opt_string("dataset")
            .ok_or_else(|| Error::config("render needs 'dataset' in the config"))?,
    );
    let checkpoint = cfg_map
        .get_opt_string("checkpoint")
        .map(PathBuf::from)
        .unwrap_or_else(|| dataset_dir.join("field_gt.ckpt"));
    let split = cfg_map.get_string("split", "val");
    let rays = cfg_map.get_usize("rays_per_pixel", 8)?;
    let step_size = cfg_map.get_f64("step_size", 2e-3)?;
    let seed = args.seed.map(Ok).unwrap_or_else(|| cfg_map.get_u64("seed", 0))?;
    cfg_map.finish()?;

    ensure_out_dir(&args.out)?;
    let dataset = io::load_dataset(&dataset_dir)?;
    let field = io::load_checkpoint(&checkpoint)?;
    let occupancy = rebuild_occupancy(&field, 1e-3)?;
    let bounds = crate::recon::dataset_bounds(&dataset);
    let mut resolved = String::from("# resolved render config\n");
    let _ = writeln!(resolved, "dataset {}", dataset_dir.display());
    let _ = writeln!(resolved, "checkpoint {}", checkpoint.display());
    let _ = writeln!(resolved, "split {split}");
    let _ = writeln!(resolved, "rays_per_pixel {rays}");
    let _ = writeln!(resolved, "step_size {}", io::fmt_f64(step_size));
    let _ = writeln!(resolved, "seed {seed}");
    io::write_text(&args.out.join("resolved.cfg"), &resolved)?;

    for (idx, view) in dataset.views.iter().enumerate() {
        let wanted = match split.as_str() {
            "train" => view.split == Split::Train,
            "val" => view.split == Split::Val,
            "all" => true,
            other => return Err(Error::config(format!("bad split '{other}'"))),
        };
        if !wanted {
            continue;
        }
        let cfg = RenderConfig {
            rays_per_pixel: rays,
            step_size,
            bounds,
            max_samples_per_ray: 4096,
            background: Rgb::zeros(),
            use_occupancy: true,
            min_transmittance: crate::render::TRANSMITTANCE_EPS,
            seed,
            serial: args.serial,
        };
        let img = render_image(&field, Some(&occupancy), &view.camera, &cfg)?;
        io::write_png_srgb(&args.out.join(format!("render_{idx:03}.png")), &img)?;
        io::write_pfm(&args.out.join(format!("render_{idx:03}.pfm")), &img)?;
        io::write_png_srgb(&args.out.join(format!("gt_{idx:03}.png")), &view.target)?;
        let mut diff = LinearImage::new(img.width, img.height);
        for y in 0..img.height {
            for x in 0..img.width {
                let d = img.get(x, y) - view.target.get(x, y);
                diff.set(x, y, d.abs());
            }
        }
        io::write_png_srgb(&args.out.join(format!("diff_{idx:03}.png")), &diff)?;
        log::info!("rendered view {idx:03} ({})", view.name);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Per-view metric rows plus aggregates.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub rows: Vec<(String, f64, f64)>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub runtime_seconds: f64,
}

pub fn evaluate_dirs(render_dir: &Path, gt_dir: &Path) -> Result<MetricReport> {
    let started = Instant::now();
    let mut names: Vec<String> = std::fs::read_dir(render_dir)
        .map_err(|e| Error::io(render_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png") && gt_dir.join(n).exists())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::domain(format!(
            "no common PNG filenames between {} and {}",
            render_dir.display(),
            gt_dir.display()
        )));
    }
    let mut rows = Vec::new();
    let mut sum_psnr = 0.0;
    let mut sum_ssim = 0.0;
    for name in &names {
        let (wa, ha, da) = io::read_png_srgb_u8(&render_dir.join(name))?;
        let (wb, hb, db) = io::read_png_srgb_u8(&gt_dir.join(name))?;
        if (wa, ha) != (wb, hb) {
            return Err(Error::domain(format!(
                "size mismatch for '{name}': {wa}x{ha} in {} vs {wb}x{hb} in {}",
                render_dir.display(),
                gt_dir.display()
            )));
        }
        let a = SrgbImage::from_raw(wa, ha, da)?;
        let b = SrgbImage::from_raw(wb, hb, db)?;
        let p = psnr(&a, &b)?;
        let s = ssim(&a, &b)?;
        sum_psnr += p;
        sum_ssim += s;
        rows.push((name.clone(), p, s));
    }
    let n = rows.len() as f64;
    Ok(MetricReport {
        rows,
        mean_psnr: sum_psnr / n,
        mean_ssim: sum_ssim / n,
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn metric_report_csv(report: &MetricReport) -> String {
    // Column names carry the protocol: sRGB, 8-bit quantized.
    let mut s = String::from("view,psnr_srgb8_db,ssim_srgb8\n");
    for (name, p, q) in &report.rows {
        s.push_str(&format!("{name},{p:.4},{q:.6}\n"));
    }
    s.push_str(&format!(
        "mean,{:.4},{:.6}\n",
        report.mean_psnr, report.mean_ssim
    ));
    s
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<MetricReport> {
    let report = evaluate_dirs(&args.render_dir, &args.gt_dir)?;
    ensure_out_dir(&args.common.out)?;
    io::write_text(
        &args.common.out.join("evaluate.csv"),
        &metric_report_csv(&report),
    )?;
    let mut resolved = String::from("# resolved evaluate config\n");
    let _ = writeln!(resolved, "render_dir {}", args.render_dir.display());
    let _ = writeln!(resolved, "gt_dir {}", args.gt_dir.display());
    io::write_text(&args.common.out.join("resolved.cfg"), &resolved)?;
    for (name, p, s) in &report.rows {
        println!("{name}: psnr {p:.2} dB  ssim {s:.4}");
    }
    println!(
        "mean over {} views: psnr {:.2} dB  ssim {:.4}  ({:.2}s)",
        report.rows.len(),
        report.mean_psnr,
        report.mean_ssim,
        report.runtime_seconds
    );
    Ok(report)
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

fn cmd_gradcheck(args: &CommonArgs) -> Result<()> {
    let mut cfg_map = ConfigMap::load(args.config.as_deref())?;
    let scene_name = cfg_map.get_string("scene", "soft_occluder");
    let bake_resolution = cfg_map.get_usize("bake_resolution", 48)?;
    let width = cfg_map.get_usize("width", 24)? as u32;
    let camera_count = cfg_map.get_usize("cameras", 4)?;
    let probes = cfg_map.get_usize("probes", 50)?;
    let rays = cfg_map.get_usize("rays_per_pixel", 4)?;
    let step_size = cfg_map.get_f64("step_size", 2e-3)?;
    let seed = args
        .seed
        .map(Ok)
        .unwrap_or_else(|| cfg_map.get_u64("seed", 0x9d2c))?;
    cfg_map.finish()?;

    ensure_out_dir(&args.out)?;
    let scene = SceneSpec::by_name(&scene_name)?;
    let field = crate::scenegen::bake_scene(&scene, [bake_resolution; 3])?;
    let ds_spec = DatasetSpec {
        train_count: camera_count,
        val_count: 1,
        width,
        height: width,
        ..DatasetSpec::desk_default()
    };
    let cameras = make_hemisphere_cameras(&ds_spec)?;
    let render_cfg = RenderConfig {
        rays_per_pixel: rays,
        step_size,
        bounds: crate::scenegen::scene_bounds(&ds_spec, &scene.bbox),
        max_samples_per_ray: 4096,
        background: Rgb::zeros(),
        use_occupancy: false,
        min_transmittance: crate::render::TRANSMITTANCE_EPS,
        seed,
        serial: args.serial,
    };
    let gc = GradCheckConfig {
        field_probes: probes,
        focus_probes: probes,
        aperture_probes: probes,
        seed,
        ..GradCheckConfig::default()
    };
    let rows = run_gradcheck(&field, &cameras, &render_cfg, &gc)?;
    io::write_text(
        &args.out.join("gradcheck.csv"),
        &crate::grad::gradcheck_csv(&rows),
    )?;
    let mut resolved = String::from("# resolved gradcheck config\n");
    let _ = writeln!(resolved, "scene {scene_name}");
    let _ = writeln!(resolved, "bake_resolution {bake_resolution}");
    let _ = writeln!(resolved, "width {width}");
    let _ = writeln!(resolved, "cameras {camera_count}");
    let _ = writeln!(resolved, "probes {probes}");
    let _ = writeln!(resolved, "rays_per_pixel {rays}");
    let _ = writeln!(resolved, "step_size {}", io::fmt_f64(step_size));
    let _ = writeln!(resolved, "seed {seed}");
    io::write_text(&args.out.join("resolved.cfg"), &resolved)?;

    let mut failed = false;
    for kind in [GradKind::Field, GradKind::Focus, GradKind::Aperture] {
        let tol = match kind {
            GradKind::Field => 1e-3,
            GradKind::Focus => 1e-2,
            GradKind::Aperture => 5e-2,
        };
        let errs: Vec<f64> = rows
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.rel_err)
            .collect();
        let worst = errs.iter().cloned().fold(0.0, f64::max);
        let ok = worst < tol && !errs.is_empty();
        println!(
            "{}: {} probes, worst rel err {:.3e} (tolerance {tol:.0e}) {}",
            kind.as_str(),
            errs.len(),
            worst,
            if ok { "PASS" } else { "FAIL" }
        );
        failed |= !ok;
    }
    if failed {
        return Err(Error::numeric(
            "gradient check exceeded tolerance; see gradcheck.csv",
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ablations
// ---------------------------------------------------------------------------

fn parse_rpp_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad rays-per-pixel entry '{t}'")))
        })
        .collect()
}

fn cmd_ablate_rpp(args: &ReconArgs) -> Result<()> {
    let mut cfg_map = ConfigMap::load(args.common.config.as_deref())?;
    let rpp_list = parse_rpp_list(&cfg_map.get_string("rpp_list", "1,2,4,8,16,32"))?;
    drop(cfg_map);
    let base = recon_config(args)?;
    ensure_out_dir(&args.common.out)?;

    let dataset = io::load_dataset(&base.dataset_dir)?;
    let mut csv = String::from("rays_per_pixel,val_psnr_srgb8_db,val_ssim_srgb8,wall_seconds\n");
    let mut quality = Vec::new();
    let mut runtime = Vec::new();
    for &rpp in &rpp_list {
        let mut cfg = base.cfg.clone();
        cfg.rays_per_pixel = rpp;
        // Constant pixels per batch, so runtime scales with rays alone.
        cfg.fixed_pixels_per_batch = Some(cfg.fixed_pixels_per_batch.unwrap_or(1024));
        let out = args.common.out.join(format!("rpp_{rpp:02}"));
        let outcome = run_reconstruction(&dataset, &cfg, &out)?;
        log::info!(
            "rpp {rpp}: psnr {:.2} ssim {:.4} in {:.1}s",
            outcome.val_psnr,
            outcome.val_ssim,
            outcome.wall_seconds
        );
        csv.push_str(&format!(
            "{rpp},{:.4},{:.6},{:.2}\n",
            outcome.val_psnr, outcome.val_ssim, outcome.wall_seconds
        ));
        quality.push((rpp as f64, outcome.val_psnr));
        runtime.push((rpp as f64, outcome.wall_seconds));
    }
    io::write_text(&args.common.out.join("rpp.csv"), &csv)?;
    let mut resolved = recon_resolved_text(&base);
    let _ = writeln!(
        resolved,
        "rpp_list {}",
        rpp_list
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    io::write_text(&args.common.out.join("resolved.cfg"), &resolved)?;
    line_chart(
        &args.common.out.join("rpp.png"),
        "QUALITY AND RUNTIME VS RAYS PER PIXEL",
        "RAYS PER PIXEL",
        "PSNR DB / SECONDS",
        &[
            Series {
                label: "PSNR DB".into(),
                points: quality,
            },
            Series {
                label: "SECONDS".into(),
                points: runtime,
            },
        ],
    )?;
    println!("rays-per-pixel study written to {}", args.common.out.display());
    Ok(())
}

fn cmd_ablate_defocus(args: &ReconArgs) -> Result<()> {
    let base = recon_config(args)?;
    ensure_out_dir(&args.common.out)?;
    let dataset = io::load_dataset(&base.dataset_dir)?;
    // Mirrors the perturbation grid: one parameter off at a time, with the
    // true-initialization row repeated for both optimization variants.
    let grid: [(f64, f64); 6] = [
        (0.8, 1.0),
        (1.0, 1.0),
        (1.2, 1.0),
        (1.0, 0.8),
        (1.0, 1.0),
        (1.0, 1.2),
    ];
    let mut csv = String::from(
        "aperture_init_pct,focus_init_pct,variant,val_psnr_srgb8_db,val_ssim_srgb8,final_aperture,final_focus,aperture_rel_err,focus_rel_err,wall_seconds\n",
    );
    for (row, &(ap_scale, focus_scale)) in grid.iter().enumerate() {
        for joint in [false, true] {
            let mut cfg = base.cfg.clone();
            cfg.aperture_scale = ap_scale;
            cfg.focus_scale = focus_scale;
            cfg.optimize_aperture = joint;
            cfg.optimize_focus = joint;
            let variant = if joint { "joint" } else { "scene_only" };
            let out = args
                .common
                .out
                .join(format!("row{row}_{variant}"));
            let outcome = run_reconstruction(&dataset, &cfg, &out)?;
            let ap_err = (outcome.aperture - dataset.aperture_radius).abs()
                / dataset.aperture_radius.max(1e-12);
            let focus_err =
                (outcome.focus - dataset.focus_distance).abs() / dataset.focus_distance;
            log::info!(
                "init ({:.0}%, {:.0}%) {variant}: psnr {:.2} ssim {:.4} a_R err {:.2}% z_f err {:.2}%",
                ap_scale * 100.0,
                focus_scale * 100.0,
                outcome.val_psnr,
                outcome.val_ssim,
                ap_err * 100.0,
                focus_err * 100.0
            );
            csv.push_str(&format!(
                "{:.0},{:.0},{variant},{:.4},{:.6},{:.9e},{:.9e},{:.6},{:.6},{:.2}\n",
                ap_scale * 100.0,
                focus_scale * 100.0,
                outcome.val_psnr,
                outcome.val_ssim,
                outcome.aperture,
                outcome.focus,
                ap_err,
                focus_err,
                outcome.wall_seconds
            ));
        }
    }
    io::write_text(&args.common.out.join("defocus_init.csv"), &csv)?;
    io::write_text(
        &args.common.out.join("resolved.cfg"),
        &recon_resolved_text(&base),
    )?;
    println!(
        "defocus-initialization study written to {}",
        args.common.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn config_unknown_key_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        std::fs::write(&path, "steps 100\nbanana 3\n").unwrap();
        let mut cfg = ConfigMap::load(Some(&path)).unwrap();
        assert_eq!(cfg.get_usize("steps", 0).unwrap(), 100);
        let err = cfg.finish().unwrap_err();
        assert!(err.to_string().contains("banana"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn config_parses_values_and_defaults() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        std::fs::write(&path, "# comment\nlr 5e-2\nuse_occupancy false\nname  spaced value\n")
            .unwrap();
        let mut cfg = ConfigMap::load(Some(&path)).unwrap();
        assert_eq!(cfg.get_f64("lr", 0.0).unwrap(), 5e-2);
        assert!(!cfg.get_bool("use_occupancy", true).unwrap());
        assert_eq!(cfg.get_string("name", ""), "spaced value");
        assert_eq!(cfg.get_usize("missing", 7).unwrap(), 7);
        cfg.finish().unwrap();
    }

    #[test]
    fn rpp_list_parsing() {
        assert_eq!(parse_rpp_list("1,2, 4").unwrap(), vec![1, 2, 4]);
        assert!(parse_rpp_list("1,x").is_err());
    }

    #[test]
    fn bad_float_is_config_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        std::fs::write(&path, "lr banana\n").unwrap();
        let mut cfg = ConfigMap::load(Some(&path)).unwrap();
        let err = cfg.get_f64("lr", 0.0).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
