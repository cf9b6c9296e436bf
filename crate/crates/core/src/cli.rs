//! Command-line front end: configuration, manifests and the eight subcommands.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calib::{fit_calibration, evaluate_points, CalibPose, CalibReport, PolyCalibration};
use crate::error::{Error, Result};
use crate::geomfit::{
    error_map_with, fit_plane, fit_sphere_center, fit_sphere_free, regional_rmse, ErrorStats, HistogramSpec,
    ImageAxis, RegionalRmse, Sphere, Surface,
};
use crate::io::{read_pfm, read_pgm, read_ply, write_pfm, write_pgm16, write_pgm8, write_ply};
use crate::metrology::{series_summary, BudgetOutcome, BudgetSpec, MeasurementSeries, SeriesSummary};
use crate::phase::{wrapped_phase_with, PhaseOptions, WrappedPhaseMap};
use crate::pipeline::{absolute_phase, simulated_pose, SimulationSetup, UnwrapWavelengths};
use crate::raster::{texture_and_modulation, FrequencyTag, FringeStack, PointMap, ScalarMap};
use crate::sim::{render_fringe_stack, CameraModel, CylindricalProjector, RenderConfig, SceneSurface};
use crate::unwrap::{unwrap_pair, AbsolutePhaseMap};

pub const SCHEMA: &str = "fringeforge/1";
pub const STACK_SCHEMA: &str = "fringeforge/stack-1";
pub const THREADS_ENV: &str = "FRINGEFORGE_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Simulate,
    Wrap,
    Unwrap,
    Calibrate,
    Reconstruct,
    Fit,
    Uncertainty,
    Report,
}

#[derive(Debug, Parser)]
#[command(name = "fringeforge", version, about = "Fringe projection profilometry pipeline")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub freq: Option<FrequencyTag>,
}

fn default_intensity_scale() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputOptions {
    /// Intensity mapped to full scale in 16-bit frame images.
    #[serde(default = "default_intensity_scale")]
    pub intensity_scale: f64,
}

impl Default for OutputOptions {
    fn default() -> Self {
        Self {
            intensity_scale: default_intensity_scale(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputPaths {
    pub high_manifest: Option<PathBuf>,
    pub low_manifest: Option<PathBuf>,
    pub wrapped_high: Option<PathBuf>,
    pub wrapped_low: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub cloud: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSweep {
    pub z_min_mm: f64,
    pub z_max_mm: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoseConfig {
    Simulated {
        id: String,
        scene: SceneSurface,
    },
    External {
        id: String,
        high_manifest: PathBuf,
        low_manifest: PathBuf,
        /// Reference depth map; X and Y follow from the camera rays.
        reference_z: PathBuf,
        /// Replace the reference by the least-squares plane through it.
        #[serde(default)]
        plane_denoise: bool,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    #[serde(default)]
    pub poses: Vec<PoseConfig>,
    /// Fronto-parallel simulated planes evenly spaced over a depth range.
    #[serde(default)]
    pub simulated_planes: Option<PlaneSweep>,
    /// Declared working range; reference depths outside it are rejected.
    #[serde(default)]
    pub working_range_mm: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitSurface {
    #[default]
    Plane,
    Sphere,
}

fn default_radius() -> f64 {
    50.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub axis: ImageAxis,
    pub central_fraction: f64,
    pub outer_fraction: f64,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            axis: ImageAxis::U,
            central_fraction: 0.3,
            outer_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default)]
    pub surface: FitSurface,
    #[serde(default = "default_radius")]
    pub radius_mm: f64,
    /// Fit the sphere radius too instead of holding it at `radius_mm`.
    #[serde(default)]
    pub free_radius: bool,
    #[serde(default)]
    pub histogram: HistogramSpec,
    /// Explicit bands; when absent the default bands are tried and skipped if empty.
    #[serde(default)]
    pub regions: Option<RegionConfig>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            surface: FitSurface::Plane,
            radius_mm: default_radius(),
            free_radius: false,
            histogram: HistogramSpec::default(),
            regions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledPath {
    pub label: String,
    pub path: PathBuf,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Fit reports produced by `fit`, one row each.
    #[serde(default)]
    pub fits: Vec<LabeledPath>,
    #[serde(default)]
    pub series: Vec<MeasurementSeries>,
    #[serde(default = "yes")]
    pub include_budget: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub projector: CylindricalProjector,
    #[serde(default)]
    pub camera: CameraModel,
    #[serde(default)]
    pub scene: Option<SceneSurface>,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub output: OutputOptions,
    #[serde(default)]
    pub phase: PhaseOptions,
    #[serde(default)]
    pub unwrap: Option<UnwrapWavelengths>,
    #[serde(default)]
    pub inputs: InputPaths,
    #[serde(default)]
    pub calibration: Option<CalibrationConfig>,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub budget: Option<BudgetSpec>,
    #[serde(default)]
    pub report: Option<ReportConfig>,
}

/// Parsed configuration plus where it came from.
pub struct LoadedConfig {
    pub config: PipelineConfig,
    pub base_dir: PathBuf,
    pub sha256: String,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        match value.get("schema").and_then(|s| s.as_str()) {
            Some(SCHEMA) => {}
            Some(other) => return Err(Error::Config(format!("unrecognized schema {other:?}, expected {SCHEMA:?}"))),
            None => return Err(Error::Config(format!("missing \"schema\": {SCHEMA:?}"))),
        }
        let config: PipelineConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.projector.validate()?;
        config.camera.validate()?;
        config.render.validate()?;
        if let Some(scene) = &config.scene {
            scene.validate()?;
        }
        if !(config.output.intensity_scale > 0.0) {
            return Err(Error::Config("output.intensity_scale must be positive".into()));
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self {
            config,
            base_dir,
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn input(&self, value: &Option<PathBuf>, field: &str, command: &str) -> Result<PathBuf> {
        let p = value
            .as_ref()
            .ok_or_else(|| Error::Config(format!("inputs.{field} is required for {command}")))?;
        self.existing(p)
    }

    fn existing(&self, p: &Path) -> Result<PathBuf> {
        let path = self.resolve(p);
        if !path.is_file() {
            return Err(Error::io(
                &path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
            ));
        }
        Ok(path)
    }

    fn wavelengths(&self) -> UnwrapWavelengths {
        self.config
            .unwrap
            .unwrap_or_else(|| UnwrapWavelengths::from_projector(&self.config.projector))
    }

    fn setup(&self) -> SimulationSetup<'_> {
        SimulationSetup {
            projector: &self.config.projector,
            camera: &self.config.camera,
            render: &self.config.render,
            phase: &self.config.phase,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackManifest {
    pub schema: String,
    pub frequency: FrequencyTag,
    /// Frame image paths, relative to the manifest.
    pub frames: Vec<PathBuf>,
    pub shifts_rad: Vec<f64>,
    pub intensity_scale: f64,
    #[serde(default)]
    pub slot_interval_deg: Option<f64>,
    #[serde(default)]
    pub wavelength_hint_mm: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Sub-rectangle of each frame to keep; the whole frame when absent.
    #[serde(default)]
    pub crop: Option<CropRect>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropRect {
    pub u0: usize,
    pub v0: usize,
    pub width: usize,
    pub height: usize,
}

impl CropRect {
    pub fn apply(&self, path: &Path, map: &ScalarMap) -> Result<ScalarMap> {
        let (w, h) = map.dims();
        if self.width == 0 || self.height == 0 || self.u0 + self.width > w || self.v0 + self.height > h {
            return Err(Error::format(
                path,
                format!("crop {self:?} does not fit inside a {w}x{h} frame"),
            ));
        }
        Ok(ScalarMap::from_fn(self.width, self.height, |u, v| {
            map.get(u + self.u0, v + self.v0)
        }))
    }
}

/// Reads a manifest and its frames; a missing frame is reported by path.
pub fn load_stack(manifest_path: &Path) -> Result<FringeStack> {
    let bytes = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: StackManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Config(format!("{}: {e}", manifest_path.display())))?;
    if manifest.schema != STACK_SCHEMA {
        return Err(Error::Config(format!(
            "{}: unrecognized manifest schema {:?}",
            manifest_path.display(),
            manifest.schema
        )));
    }
    if manifest.frames.len() != manifest.shifts_rad.len() {
        return Err(Error::Config(format!(
            "{}: {} frames but {} shifts",
            manifest_path.display(),
            manifest.frames.len(),
            manifest.shifts_rad.len()
        )));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new(""));
    let paths: Vec<PathBuf> = manifest.frames.iter().map(|f| dir.join(f)).collect();
    if let Some(missing) = paths.iter().find(|p| !p.is_file()) {
        return Err(Error::io(
            missing,
            std::io::Error::new(std::io::ErrorKind::NotFound, "frame listed in manifest not found"),
        ));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let mut frame = read_pgm(p, manifest.intensity_scale)?;
        if let Some(crop) = &manifest.crop {
            frame = crop.apply(p, &frame)?;
        }
        if let Some(first) = frames.first() {
            let first: &ScalarMap = first;
            if first.dims() != frame.dims() {
                return Err(Error::DimensionMismatch {
                    expected: first.dims(),
                    found: frame.dims(),
                });
            }
        }
        frames.push(frame);
    }
    let mut stack = FringeStack::new(frames, manifest.shifts_rad, manifest.frequency);
    stack.wavelength_hint_mm = manifest.wavelength_hint_mm;
    Ok(stack)
}

/// Collects output files and writes them in order.
struct OutputDir {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl OutputDir {
    fn create(root: PathBuf) -> Result<Self> {
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self {
            root,
            written: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.root.join(name);
        self.written.push(p.clone());
        p
    }

    fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
        text.push('\n');
        self.bytes(name, text.as_bytes())
    }

    fn pfm(&mut self, name: &str, map: &ScalarMap) -> Result<()> {
        let p = self.path(name);
        write_pfm(&p, map)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
}

fn provenance(loaded: &LoadedConfig, command: &str, seed: u64) -> Provenance {
    Provenance {
        command: command.into(),
        config_sha256: loaded.sha256.clone(),
        seed,
        version: env!("CARGO_PKG_VERSION").into(),
    }
}

struct Context {
    loaded: LoadedConfig,
    seed: u64,
    out: OutputDir,
    freq: Option<FrequencyTag>,
}

impl Context {
    fn frequencies(&self) -> Vec<FrequencyTag> {
        match self.freq {
            Some(f) => vec![f],
            None => vec![FrequencyTag::High, FrequencyTag::Low],
        }
    }
}

/// Runs one subcommand and returns the files it wrote.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let loaded = LoadedConfig::load(&cli.config)?;
    let seed = cli.seed.unwrap_or(loaded.config.seed);
    check_inputs(&loaded, cli.command)?;
    let root = match (&cli.out, &loaded.config.output_dir) {
        (Some(out), _) => out.clone(),
        (None, Some(dir)) => loaded.resolve(dir),
        (None, None) => PathBuf::from("fringeforge-out"),
    };
    let mut ctx = Context {
        loaded,
        seed,
        out: OutputDir::create(root)?,
        freq: cli.freq,
    };
    match cli.command {
        Command::Simulate => cmd_simulate(&mut ctx)?,
        Command::Wrap => cmd_wrap(&mut ctx)?,
        Command::Unwrap => cmd_unwrap(&mut ctx)?,
        Command::Calibrate => cmd_calibrate(&mut ctx)?,
        Command::Reconstruct => cmd_reconstruct(&mut ctx)?,
        Command::Fit => cmd_fit(&mut ctx)?,
        Command::Uncertainty => cmd_uncertainty(&mut ctx)?,
        Command::Report => cmd_report(&mut ctx)?,
    }
    Ok(ctx.out.written)
}

/// Fails early when a file the subcommand needs does not exist.
fn check_inputs(loaded: &LoadedConfig, command: Command) -> Result<()> {
    let c = &loaded.config;
    let i = &c.inputs;
    match command {
        Command::Simulate => {
            if c.scene.is_none() {
                return Err(Error::Config("simulate needs a \"scene\"".into()));
            }
        }
        Command::Wrap => {
            loaded.input(&i.high_manifest, "high_manifest", "wrap")?;
            loaded.input(&i.low_manifest, "low_manifest", "wrap")?;
        }
        Command::Unwrap => {
            if i.wrapped_high.is_some() || i.wrapped_low.is_some() {
                loaded.input(&i.wrapped_high, "wrapped_high", "unwrap")?;
                loaded.input(&i.wrapped_low, "wrapped_low", "unwrap")?;
            } else {
                loaded.input(&i.high_manifest, "high_manifest", "unwrap")?;
                loaded.input(&i.low_manifest, "low_manifest", "unwrap")?;
            }
        }
        Command::Calibrate => {
            let calib = c
                .calibration
                .as_ref()
                .ok_or_else(|| Error::Config("calibrate needs a \"calibration\" section".into()))?;
            for pose in &calib.poses {
                if let PoseConfig::External {
                    high_manifest,
                    low_manifest,
                    reference_z,
                    ..
                } = pose
                {
                    for p in [high_manifest, low_manifest, reference_z] {
                        loaded.existing(p)?;
                    }
                }
            }
        }
        Command::Reconstruct => {
            loaded.input(&i.high_manifest, "high_manifest", "reconstruct")?;
            loaded.input(&i.low_manifest, "low_manifest", "reconstruct")?;
            loaded.input(&i.calibration, "calibration", "reconstruct")?;
        }
        Command::Fit => {
            loaded.input(&i.cloud, "cloud", "fit")?;
        }
        Command::Uncertainty => {
            if c.budget.is_none() {
                return Err(Error::Config("uncertainty needs a \"budget\" section".into()));
            }
        }
        Command::Report => {
            let report = c
                .report
                .as_ref()
                .ok_or_else(|| Error::Config("report needs a \"report\" section".into()))?;
            for fit in &report.fits {
                loaded.existing(&fit.path)?;
            }
        }
    }
    Ok(())
}

fn frame_name(freq: FrequencyTag, k: usize) -> String {
    format!("{}_{k:03}.pgm", freq.as_str())
}

fn cmd_simulate(ctx: &mut Context) -> Result<()> {
    let c = &ctx.loaded.config;
    let scene = c.scene.clone().expect("checked in check_inputs");
    let scale = c.output.intensity_scale;
    let mut truth = None;
    for freq in ctx.frequencies() {
        let rendered = render_fringe_stack(&scene, &c.projector, &c.camera, freq, &c.render, ctx.seed)?;
        let mut frames = Vec::with_capacity(rendered.stack.len());
        for (k, frame) in rendered.stack.frames.iter().enumerate() {
            let name = frame_name(freq, k);
            let p = ctx.out.path(&name);
            write_pgm16(&p, frame, scale)?;
            frames.push(PathBuf::from(name));
        }
        let manifest = StackManifest {
            schema: STACK_SCHEMA.into(),
            frequency: freq,
            frames,
            shifts_rad: rendered.stack.shifts.clone(),
            intensity_scale: scale,
            slot_interval_deg: Some(c.projector.interval_deg(freq)),
            wavelength_hint_mm: rendered.stack.wavelength_hint_mm,
            seed: Some(ctx.seed),
            crop: None,
        };
        ctx.out.json(&format!("{}.json", freq.as_str()), &manifest)?;
        if freq == FrequencyTag::High || truth.is_none() {
            truth = Some(rendered.truth);
        }
    }
    let truth = truth.expect("at least one frequency rendered");
    ctx.out.pfm("gt_phase.pfm", &truth.phase)?;
    ctx.out.pfm("gt_depth.pfm", truth.depth())?;
    let record = provenance(&ctx.loaded, "simulate", ctx.seed);
    ctx.out.json("provenance.json", &record)
}

fn load_inputs_pair(ctx: &Context) -> Result<(FringeStack, FringeStack)> {
    let l = &ctx.loaded;
    let i = &l.config.inputs;
    let high = load_stack(&l.input(&i.high_manifest, "high_manifest", "this command")?)?;
    let low = load_stack(&l.input(&i.low_manifest, "low_manifest", "this command")?)?;
    Ok((high, low))
}

fn cmd_wrap(ctx: &mut Context) -> Result<()> {
    let l = &ctx.loaded;
    let i = &l.config.inputs;
    for freq in ctx.frequencies() {
        let field = match freq {
            FrequencyTag::High => &i.high_manifest,
            FrequencyTag::Low => &i.low_manifest,
        };
        let stack = load_stack(&l.input(field, &format!("{}_manifest", freq.as_str()), "wrap")?)?;
        let wrapped = wrapped_phase_with(&stack, &l.config.phase)?;
        let tm = texture_and_modulation(&stack)?;
        let f = freq.as_str();
        ctx.out.pfm(&format!("wrapped_{f}.pfm"), &wrapped.phase)?;
        ctx.out.pfm(&format!("modulation_{f}.pfm"), &tm.modulation)?;
        ctx.out.pfm(&format!("average_{f}.pfm"), &tm.average)?;
    }
    Ok(())
}

pub const QUALITY_MASKED: u8 = 1;
pub const QUALITY_ORDER_CLAMPED: u8 = 2;
pub const QUALITY_OUT_OF_DOMAIN: u8 = 4;

fn order_map(abs: &AbsolutePhaseMap) -> ScalarMap {
    let (w, h) = abs.fringe_order.dims();
    ScalarMap::from_options(w, h, abs.fringe_order.orders().iter().map(|k| k.map(|k| k as f64)).collect())
}

fn quality_flags(abs: &AbsolutePhaseMap, out_of_domain: Option<&[bool]>) -> Vec<u8> {
    (0..abs.phase.len())
        .map(|i| {
            let mut q = 0;
            if !abs.phase.is_valid(i) {
                q |= QUALITY_MASKED;
            }
            if abs.fringe_order.clamped()[i] {
                q |= QUALITY_ORDER_CLAMPED;
            }
            if out_of_domain.is_some_and(|o| o[i]) {
                q |= QUALITY_OUT_OF_DOMAIN;
            }
            q
        })
        .collect()
}

fn write_phase_products(ctx: &mut Context, abs: &AbsolutePhaseMap, out_of_domain: Option<&[bool]>) -> Result<Vec<u8>> {
    let (w, h) = abs.phase.dims();
    ctx.out.pfm("abs_phase.pfm", &abs.phase)?;
    ctx.out.pfm("fringe_order.pfm", &order_map(abs))?;
    let quality = quality_flags(abs, out_of_domain);
    let p = ctx.out.path("quality.pgm");
    write_pgm8(&p, w, h, &quality)?;
    Ok(quality)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct UnwrapSummary {
    lambda_high: f64,
    lambda_low: f64,
    lambda_eq: f64,
    valid_pixels: usize,
    clamped_pixels: usize,
    max_order: i64,
}

fn unwrap_summary(abs: &AbsolutePhaseMap) -> UnwrapSummary {
    UnwrapSummary {
        lambda_high: abs.wavelengths.high,
        lambda_low: abs.wavelengths.low,
        lambda_eq: abs.wavelengths.equivalent,
        valid_pixels: abs.phase.valid_count(),
        clamped_pixels: abs.fringe_order.clamped_count(),
        max_order: abs.fringe_order.max_order(),
    }
}

fn cmd_unwrap(ctx: &mut Context) -> Result<()> {
    let l = &ctx.loaded;
    let i = &l.config.inputs;
    let lambdas = l.wavelengths();
    let abs = if i.wrapped_high.is_some() {
        let high = WrappedPhaseMap {
            phase: read_pfm(&l.input(&i.wrapped_high, "wrapped_high", "unwrap")?)?,
            frequency: FrequencyTag::High,
        };
        let low = WrappedPhaseMap {
            phase: read_pfm(&l.input(&i.wrapped_low, "wrapped_low", "unwrap")?)?,
            frequency: FrequencyTag::Low,
        };
        unwrap_pair(&high, &low, lambdas.lambda_high, lambdas.lambda_low)?
    } else {
        let (high, low) = load_inputs_pair(ctx)?;
        absolute_phase(&high, &low, &l.config.phase, lambdas)?.absolute
    };
    write_phase_products(ctx, &abs, None)?;
    ctx.out.json("unwrap.json", &unwrap_summary(&abs))
}

/// Points on the camera rays of every pixel at the given world depth.
fn rays_at_depth(camera: &CameraModel, depth: &ScalarMap) -> Result<PointMap> {
    if depth.dims() != (camera.width_px, camera.height_px) {
        return Err(Error::DimensionMismatch {
            expected: (camera.width_px, camera.height_px),
            found: depth.dims(),
        });
    }
    let w = camera.width_px;
    let points: Vec<Option<Vector3<f64>>> = (0..depth.len())
        .map(|i| {
            let z = depth.at(i)?;
            let ray = camera.pixel_ray((i % w) as f64, (i / w) as f64);
            (ray.direction.z.abs() > 1e-12).then(|| ray.at((z - ray.origin.z) / ray.direction.z))
        })
        .collect();
    Ok(PointMap::from_points(w, depth.height(), &points))
}

fn denoise_to_plane(camera: &CameraModel, reference: &PointMap) -> Result<PointMap> {
    let plane = fit_plane(&reference.points())?;
    let n = Vector3::from(plane.normal);
    let (w, h) = reference.dims();
    let points: Vec<Option<Vector3<f64>>> = (0..w * h)
        .map(|i| {
            reference.point(i)?;
            let ray = camera.pixel_ray((i % w) as f64, (i / w) as f64);
            let denom = n.dot(&ray.direction);
            (denom.abs() > 1e-12).then(|| ray.at((plane.offset_mm - n.dot(&ray.origin)) / denom))
        })
        .collect();
    Ok(PointMap::from_points(w, h, &points))
}

fn calibration_poses(ctx: &Context) -> Result<(Vec<CalibPose>, String)> {
    let l = &ctx.loaded;
    let calib = l.config.calibration.as_ref().expect("checked in check_inputs");
    let mut specs = calib.poses.clone();
    if let Some(sweep) = &calib.simulated_planes {
        if sweep.count < 2 || !(sweep.z_max_mm > sweep.z_min_mm) {
            return Err(Error::Config("simulated_planes needs count >= 2 and z_max_mm > z_min_mm".into()));
        }
        for j in 0..sweep.count {
            let z = sweep.z_min_mm + (sweep.z_max_mm - sweep.z_min_mm) * j as f64 / (sweep.count - 1) as f64;
            let mut scene = l.config.scene.clone().unwrap_or_else(|| SceneSurface::fronto_parallel(z));
            scene.kind = SceneSurface::fronto_parallel(z).kind;
            specs.push(PoseConfig::Simulated {
                id: format!("plane_{z:.3}"),
                scene,
            });
        }
    }
    let mut hasher = Sha256::new();
    hasher.update(l.sha256.as_bytes());
    hasher.update(ctx.seed.to_le_bytes());
    let setup = l.setup();
    let mut poses = Vec::with_capacity(specs.len());
    for (j, spec) in specs.iter().enumerate() {
        match spec {
            PoseConfig::Simulated { id, scene } => {
                poses.push(simulated_pose(&setup, id, scene, ctx.seed.wrapping_add(j as u64))?);
            }
            PoseConfig::External {
                id,
                high_manifest,
                low_manifest,
                reference_z,
                plane_denoise,
            } => {
                let paths = [l.existing(high_manifest)?, l.existing(low_manifest)?, l.existing(reference_z)?];
                for p in &paths {
                    hasher.update(fs::read(p).map_err(|e| Error::io(p, e))?);
                }
                let high = load_stack(&paths[0])?;
                let low = load_stack(&paths[1])?;
                let products = absolute_phase(&high, &low, &l.config.phase, l.wavelengths())?;
                let mut reference = rays_at_depth(&l.config.camera, &read_pfm(&paths[2])?)?;
                if *plane_denoise {
                    reference = denoise_to_plane(&l.config.camera, &reference)?;
                }
                poses.push(CalibPose::new(id.clone(), products.absolute.phase, reference)?);
            }
        }
    }
    if let Some([lo, hi]) = calib.working_range_mm {
        for pose in &poses {
            if let Some(z) = pose.reference.z.valid_values().find(|z| *z < lo || *z > hi) {
                return Err(Error::Config(format!(
                    "pose {} has reference depth {z} mm outside the working range [{lo}, {hi}]",
                    pose.pose_id
                )));
            }
        }
    }
    Ok((poses, hex::encode(hasher.finalize())))
}

fn cmd_calibrate(ctx: &mut Context) -> Result<()> {
    let (poses, provenance_hash) = calibration_poses(ctx)?;
    let (calib, report) = fit_calibration(&poses)?;
    let p = ctx.out.path("calibration.ffc");
    calib.write_to(&p, &provenance_hash)?;
    ctx.out.json("calib_report.json", &report)?;
    ctx.out.bytes("calib_poses.csv", pose_csv(&report).as_bytes())
}

fn pose_csv(report: &CalibReport) -> String {
    let mut csv = String::from("pose,rmse_z_mm,valid_pixels\n");
    for p in &report.poses {
        let _ = writeln!(csv, "{},{:.6},{}", p.pose_id, p.rmse_z_mm, p.valid_pixels);
    }
    csv
}

fn cmd_reconstruct(ctx: &mut Context) -> Result<()> {
    let l = &ctx.loaded;
    let calib_path = l.input(&l.config.inputs.calibration, "calibration", "reconstruct")?;
    let (high, low) = load_inputs_pair(ctx)?;
    let (calib, _) = PolyCalibration::read_from(&calib_path)?;
    if calib.dims() != high.dims() {
        return Err(Error::DimensionMismatch {
            expected: calib.dims(),
            found: high.dims(),
        });
    }
    let products = absolute_phase(&high, &low, &l.config.phase, l.wavelengths())?;
    let abs = products.absolute;
    let rec = evaluate_points(&calib, &abs.phase)?;
    let quality = write_phase_products(ctx, &abs, Some(&rec.out_of_domain))?;
    ctx.out.pfm("depth.pfm", &rec.points.z)?;
    let p = ctx.out.path("cloud.ply");
    write_ply(&p, &rec.points, &quality)?;
    let mut summary = serde_json::to_value(unwrap_summary(&abs)).map_err(|e| Error::Config(e.to_string()))?;
    summary["points"] = rec.points.valid_count().into();
    summary["out_of_domain_pixels"] = rec.out_of_domain_count().into();
    ctx.out.json("reconstruct.json", &summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub surface: Surface,
    #[serde(default)]
    pub nominal_radius_mm: Option<f64>,
    pub stats: ErrorStats,
    #[serde(default)]
    pub regional: Option<RegionalRmse>,
}

fn fit_surface(cfg: &FitConfig, points: &[Vector3<f64>]) -> Result<Surface> {
    Ok(match cfg.surface {
        FitSurface::Plane => Surface::Plane(fit_plane(points)?),
        FitSurface::Sphere if cfg.free_radius => Surface::Sphere(fit_sphere_free(points)?),
        FitSurface::Sphere => Surface::Sphere(Sphere {
            center_mm: fit_sphere_center(points, cfg.radius_mm)?.into(),
            radius_mm: cfg.radius_mm,
        }),
    })
}

fn cmd_fit(ctx: &mut Context) -> Result<()> {
    let l = &ctx.loaded;
    let cfg = l.config.fit.clone();
    let cloud = read_ply(&l.input(&l.config.inputs.cloud, "cloud", "fit")?)?;
    let points = cloud.points();
    if points.is_empty() {
        return Err(Error::EmptyInput("point cloud has no vertices".into()));
    }
    let surface = fit_surface(&cfg, &points)?;
    let grid = cloud.to_point_map();
    let (errors, stats) = match &grid {
        Some(map) => {
            let (errors, stats) = error_map_with(map, &surface, &cfg.histogram);
            (Some(errors), stats)
        }
        None => {
            let values: Vec<f64> = points.iter().map(|p| surface.signed_distance(p)).collect();
            (None, ErrorStats::from_values(&values, &cfg.histogram))
        }
    };
    let regional = match (&errors, cfg.regions) {
        (Some(e), Some(r)) => Some(regional_rmse(e, r.axis, r.central_fraction, r.outer_fraction)?),
        (Some(e), None) => {
            let r = RegionConfig::default();
            regional_rmse(e, r.axis, r.central_fraction, r.outer_fraction).ok()
        }
        (None, _) => None,
    };
    let report = FitReport {
        surface,
        nominal_radius_mm: (cfg.surface == FitSurface::Sphere).then_some(cfg.radius_mm),
        stats,
        regional,
    };
    if let Some(errors) = &errors {
        ctx.out.pfm("error_map.pfm", errors)?;
        ctx.out.bytes("column_rmse.csv", column_profile(errors).as_bytes())?;
    }
    ctx.out.bytes("histogram.csv", histogram_csv(&report.stats).as_bytes())?;
    ctx.out.json("fit_report.json", &report)
}

fn histogram_csv(stats: &ErrorStats) -> String {
    let mut csv = String::from("lower_mm,upper_mm,count\n");
    let h = &stats.histogram;
    for (k, count) in h.counts.iter().enumerate() {
        let _ = writeln!(csv, "{:.6},{:.6},{count}", h.edges_mm[k], h.edges_mm[k + 1]);
    }
    csv
}

/// RMSE of each image column, for plotting error growth along u.
fn column_profile(errors: &ScalarMap) -> String {
    let (w, h) = errors.dims();
    let mut csv = String::from("u,rmse_mm,count\n");
    for u in 0..w {
        let (sum, n) = (0..h)
            .filter_map(|v| errors.get(u, v))
            .fold((0.0, 0usize), |(s, n), e| (s + e * e, n + 1));
        if n > 0 {
            let _ = writeln!(csv, "{u},{:.6},{n}", (sum / n as f64).sqrt());
        }
    }
    csv
}

fn budget_csv(outcome: &BudgetOutcome) -> String {
    let b = &outcome.budget;
    let mut csv = String::from("component,symbol,type,u_mm\n");
    for c in &b.components {
        let _ = writeln!(csv, "{},{},{:?},{:.3}", c.name, c.symbol, c.kind, c.u_mm);
    }
    let _ = writeln!(csv, "combined standard uncertainty,u_c,,{:.3}", b.combined_mm);
    let _ = writeln!(csv, "expanded uncertainty,U,,{:.3}", b.expanded_mm);
    csv
}

fn cmd_uncertainty(ctx: &mut Context) -> Result<()> {
    let spec = ctx.loaded.config.budget.clone().expect("checked in check_inputs");
    let outcome = spec.evaluate()?;
    ctx.out.json("budget.json", &outcome)?;
    ctx.out.bytes("budget.csv", budget_csv(&outcome).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReportRow {
    label: String,
    rmse_mm: f64,
    mean_mm: f64,
    std_mm: f64,
    radius_mm: Option<f64>,
    central_rmse_mm: Option<f64>,
    outer_rmse_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReportBundle {
    rows: Vec<ReportRow>,
    rmse_summary: Option<SeriesSummary>,
    series: Vec<(String, SeriesSummary)>,
    budget: Option<BudgetOutcome>,
}

fn cmd_report(ctx: &mut Context) -> Result<()> {
    let l = &ctx.loaded;
    let cfg = l.config.report.clone().expect("checked in check_inputs");
    let mut rows = Vec::with_capacity(cfg.fits.len());
    for fit in &cfg.fits {
        let path = l.existing(&fit.path)?;
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let report: FitReport =
            serde_json::from_slice(&text).map_err(|e| Error::format(&path, format!("bad fit report: {e}")))?;
        rows.push(ReportRow {
            label: fit.label.clone(),
            rmse_mm: report.stats.rmse_mm,
            mean_mm: report.stats.mean_mm,
            std_mm: report.stats.std_sample_mm,
            radius_mm: match report.surface {
                Surface::Sphere(s) => Some(s.radius_mm),
                Surface::Plane(_) => None,
            },
            central_rmse_mm: report.regional.map(|r| r.central_mm),
            outer_rmse_mm: report.regional.map(|r| r.outer_mm),
        });
    }
    let rmse_summary = (!rows.is_empty())
        .then(|| series_summary(&MeasurementSeries::new("rmse", rows.iter().map(|r| r.rmse_mm).collect())))
        .transpose()?;
    let series = cfg
        .series
        .iter()
        .map(|s| Ok((s.label.clone(), series_summary(s)?)))
        .collect::<Result<Vec<_>>>()?;
    let budget = match (&l.config.budget, cfg.include_budget) {
        (Some(spec), true) => Some(spec.evaluate()?),
        _ => None,
    };
    let bundle = ReportBundle {
        rows,
        rmse_summary,
        series,
        budget,
    };
    let mut csv = String::from("pose,rmse_mm,mean_mm,std_mm,radius_mm\n");
    for r in &bundle.rows {
        let radius = r.radius_mm.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(csv, "{},{:.6},{:.6},{:.6},{radius}", r.label, r.rmse_mm, r.mean_mm, r.std_mm);
    }
    ctx.out.json("report.json", &bundle)?;
    ctx.out.bytes("reproducibility.csv", csv.as_bytes())
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
}

#[derive(Serialize)]
struct ErrorEnvelope<'a> {
    error: ErrorBody<'a>,
}

pub fn error_json(kind: &str, message: String) -> String {
    serde_json::to_string(&ErrorEnvelope {
        error: ErrorBody { kind, message },
    })
    .expect("error envelope serializes")
}

fn thread_count() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

fn run_with_pool(cli: &Cli) -> Result<Vec<PathBuf>> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count()? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run(cli))
}

/// Process entry point; returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{}", error_json("UsageError", e.to_string().trim().to_string()));
            return 2;
        }
    };
    match run_with_pool(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("{}", error_json(e.kind(), e.to_string()));
            1
        }
    }
}
