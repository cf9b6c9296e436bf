//! Forward model of the cylindrical slot projector and a pinhole camera.
//!
//! The light source is an ideal point on the cylinder axis, so the pattern a
//! scene point receives depends only on its azimuth β around the axis. One
//! fringe period spans one slot interval θ of azimuth; the high- and
//! low-frequency halves of the cylinder use θ_h and θ_l respectively.
//!
//! # Phase convention
//!
//! [`ground_truth_phase`] returns the pattern phase `Φ_gt = 2π(β − α0)/θ`,
//! proportional to azimuth. The intensity model is arranged so that the
//! least-squares estimator returns `wrap(Φ_gt − π)` and the multi-wavelength
//! unwrapper reconstructs exactly `Φ_gt − π`; rendered ground-truth bundles
//! store that pipeline-consistent value (see [`pipeline_phase`]).

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phase::phase_shifts;
use crate::raster::{FrequencyTag, FringeStack, PointMap, ScalarMap};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WavelengthMode {
    Exact,
    Approx,
}

/// Fringe wavelength on a surface at perpendicular distance `d_mm` for slot
/// interval `theta_deg`: `d[tan(θ/4) + tan(3θ/4)]`, or `d·θ` in approx mode.
pub fn fringe_wavelength(d_mm: f64, theta_deg: f64, mode: WavelengthMode) -> Result<f64> {
    if !(theta_deg > 0.0 && theta_deg < 90.0) {
        return Err(Error::Domain(format!(
            "slot interval must lie in (0°, 90°), got {theta_deg}°"
        )));
    }
    if !(d_mm > 0.0) {
        return Err(Error::Domain(format!("distance must be positive, got {d_mm} mm")));
    }
    let theta = theta_deg.to_radians();
    Ok(match mode {
        WavelengthMode::Exact => d_mm * ((theta / 4.0).tan() + (0.75 * theta).tan()),
        WavelengthMode::Approx => d_mm * theta,
    })
}

/// Converts a pattern phase into the value the phase-retrieval and unwrapping
/// chain reconstructs for it.
pub fn pipeline_phase(pattern_phase: f64) -> f64 {
    pattern_phase - PI
}

/// Placement of the cylinder axis. `origin_mm` is the light source on the
/// axis, `reference` the zero-azimuth direction (orthogonalized against `axis`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisPose {
    pub origin_mm: [f64; 3],
    pub axis: [f64; 3],
    pub reference: [f64; 3],
}

#[derive(Debug, Clone, Copy)]
struct AxisFrame {
    origin: Vec3,
    e1: Vec3,
    e2: Vec3,
}

impl AxisPose {
    fn frame(&self) -> Result<AxisFrame> {
        let axis = Vec3::from(self.axis);
        let reference = Vec3::from(self.reference);
        let axis = axis
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Config("projector axis must be non-zero".into()))?;
        let e1 = (reference - axis * axis.dot(&reference))
            .try_normalize(1e-9)
            .ok_or_else(|| Error::Config("projector reference direction is parallel to the axis".into()))?;
        Ok(AxisFrame {
            origin: Vec3::from(self.origin_mm),
            e1,
            e2: axis.cross(&e1),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CylindricalProjector {
    pub theta_h_deg: f64,
    pub theta_l_deg: f64,
    /// Only constrains validity; with a point source on the axis the pattern
    /// geometry does not depend on it.
    pub cylinder_radius_mm: f64,
    pub axis_pose: AxisPose,
    /// Azimuth α0 at which pattern phase zero sits.
    pub rotation_offset_deg: f64,
    pub stage_resolution_deg: f64,
    /// Distance at which irradiance is normalized and wavelength hints are quoted.
    pub reference_distance_mm: f64,
}

impl Default for CylindricalProjector {
    fn default() -> Self {
        let baseline = 125.0;
        let stand_off = 580.0;
        Self {
            theta_h_deg: 5.0,
            theta_l_deg: 5.625,
            cylinder_radius_mm: 40.0,
            axis_pose: AxisPose {
                origin_mm: [-baseline, 0.0, 0.0],
                axis: [0.0, 1.0, 0.0],
                reference: [baseline, 0.0, stand_off],
            },
            rotation_offset_deg: -22.5,
            stage_resolution_deg: 0.004,
            reference_distance_mm: 600.0,
        }
    }
}

impl CylindricalProjector {
    pub fn validate(&self) -> Result<()> {
        let (h, l) = (self.theta_h_deg, self.theta_l_deg);
        if !(h > 0.0 && h < l) {
            return Err(Error::Config(format!(
                "slot intervals must satisfy 0 < θ_h < θ_l, got {h}° and {l}°"
            )));
        }
        for theta in [h, l] {
            let slots = 360.0 / theta;
            if (slots - slots.round()).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "360° is not an integer multiple of the slot interval {theta}°"
                )));
            }
        }
        if !(self.stage_resolution_deg > 0.0) {
            return Err(Error::Config("stage resolution must be positive".into()));
        }
        if !(self.cylinder_radius_mm > 0.0) || !(self.reference_distance_mm > 0.0) {
            return Err(Error::Config("cylinder radius and reference distance must be positive".into()));
        }
        self.axis_pose.frame()?;
        Ok(())
    }

    pub fn interval_deg(&self, freq: FrequencyTag) -> f64 {
        match freq {
            FrequencyTag::High => self.theta_h_deg,
            FrequencyTag::Low => self.theta_l_deg,
        }
    }

    pub fn source_mm(&self) -> Vec3 {
        Vec3::from(self.axis_pose.origin_mm)
    }

    /// Azimuth of `point` around the cylinder axis, degrees in (−180, 180].
    pub fn azimuth_deg(&self, point: &Vec3) -> Result<f64> {
        let frame = self.axis_pose.frame()?;
        Ok(frame.azimuth_deg(point))
    }

    /// Unwrapped pattern phase 2π(β − α0)/θ at a world point.
    pub fn pattern_phase(&self, point: &Vec3, freq: FrequencyTag) -> Result<f64> {
        Ok(self.phase_from_azimuth(self.azimuth_deg(point)?, freq))
    }

    fn phase_from_azimuth(&self, beta_deg: f64, freq: FrequencyTag) -> f64 {
        TAU * (beta_deg - self.rotation_offset_deg) / self.interval_deg(freq)
    }

    /// Stage rotation for step `k` of `n`, snapped to the stage grid when requested.
    pub fn rotation_deg(&self, freq: FrequencyTag, k: usize, n: usize, quantize: bool) -> f64 {
        let nominal = self.interval_deg(freq) * k as f64 / n as f64;
        if quantize {
            (nominal / self.stage_resolution_deg).round() * self.stage_resolution_deg
        } else {
            nominal
        }
    }
}

impl AxisFrame {
    fn azimuth_deg(&self, point: &Vec3) -> f64 {
        let rel = point - self.origin;
        rel.dot(&self.e2).atan2(rel.dot(&self.e1)).to_degrees()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Pinhole camera: `s [u v 1]ᵀ = A [R | t] [X Y Z 1]ᵀ` with zero skew.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraModel {
    pub fx_px: f64,
    pub fy_px: f64,
    pub cu_px: f64,
    pub cv_px: f64,
    pub width_px: usize,
    pub height_px: usize,
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation_mm: [f64; 3],
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            fx_px: 1500.0,
            fy_px: 1500.0,
            cu_px: 499.5,
            cv_px: 399.5,
            width_px: 1000,
            height_px: 800,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation_mm: [0.0; 3],
        }
    }
}

impl CameraModel {
    /// Same optics resampled to a different resolution (focal lengths and
    /// principal point scale with the width ratio).
    pub fn scaled(&self, width_px: usize, height_px: usize) -> Self {
        let sx = width_px as f64 / self.width_px as f64;
        let sy = height_px as f64 / self.height_px as f64;
        Self {
            fx_px: self.fx_px * sx,
            fy_px: self.fy_px * sy,
            cu_px: (self.cu_px + 0.5) * sx - 0.5,
            cv_px: (self.cv_px + 0.5) * sy - 0.5,
            width_px,
            height_px,
            ..self.clone()
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let r = &self.rotation;
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn intrinsic_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx_px, 0.0, self.cu_px, 0.0, self.fy_px, self.cv_px, 0.0, 0.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation_matrix();
        let orthogonality = (r.transpose() * r - Matrix3::identity()).abs().max();
        if orthogonality > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "camera rotation must be orthonormal with determinant +1".into(),
            ));
        }
        if !(self.fx_px > 0.0 && self.fy_px > 0.0) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::Config("camera resolution must be non-zero".into()));
        }
        let inside = |c: f64, n: usize| (0.0..=n as f64).contains(&c);
        if !inside(self.cu_px, self.width_px) || !inside(self.cv_px, self.height_px) {
            return Err(Error::Config("principal point lies outside the image".into()));
        }
        Ok(())
    }

    pub fn center_mm(&self) -> Vec3 {
        -(self.rotation_matrix().transpose() * Vec3::from(self.translation_mm))
    }

    pub fn project_point(&self, point: &Vec3) -> Result<Projection> {
        let cam = self.rotation_matrix() * point + Vec3::from(self.translation_mm);
        let h = self.intrinsic_matrix() * cam;
        let s = h.z;
        if !(s > 0.0) {
            return Err(Error::BehindCamera(s));
        }
        Ok(Projection {
            u: h.x / s,
            v: h.y / s,
            s,
        })
    }

    /// World point on the ray through pixel `(u, v)` at projective depth `s`;
    /// the inverse of [`CameraModel::project_point`].
    pub fn back_project(&self, u: f64, v: f64, s: f64) -> Vec3 {
        let cam = Vec3::new((u - self.cu_px) / self.fx_px, (v - self.cv_px) / self.fy_px, 1.0) * s;
        self.rotation_matrix().transpose() * (cam - Vec3::from(self.translation_mm))
    }

    /// Ray through the center of pixel `(u, v)` (integer coordinates address
    /// pixel centers).
    pub fn pixel_ray(&self, u: f64, v: f64) -> Ray {
        let cam = Vec3::new((u - self.cu_px) / self.fx_px, (v - self.cv_px) / self.fy_px, 1.0);
        Ray {
            origin: self.center_mm(),
            direction: (self.rotation_matrix().transpose() * cam).normalize(),
        }
    }
}

/// Regular grid of absolute surface heights Z(x, y), row-major in y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightGrid {
    pub origin_mm: [f64; 2],
    pub spacing_mm: f64,
    pub columns: usize,
    pub rows: usize,
    pub heights_mm: Vec<f64>,
}

impl HeightGrid {
    fn extent(&self) -> ([f64; 2], [f64; 2]) {
        let [x0, y0] = self.origin_mm;
        let x1 = x0 + self.spacing_mm * (self.columns - 1) as f64;
        let y1 = y0 + self.spacing_mm * (self.rows - 1) as f64;
        ([x0, x1], [y0, y1])
    }

    /// Bilinear height and gradient (∂Z/∂x, ∂Z/∂y); `None` outside the grid.
    fn sample(&self, x: f64, y: f64) -> Option<(f64, f64, f64)> {
        let gx = (x - self.origin_mm[0]) / self.spacing_mm;
        let gy = (y - self.origin_mm[1]) / self.spacing_mm;
        let max_x = (self.columns - 1) as f64;
        let max_y = (self.rows - 1) as f64;
        if !(0.0..=max_x).contains(&gx) || !(0.0..=max_y).contains(&gy) {
            return None;
        }
        let i = (gx.floor() as usize).min(self.columns - 2);
        let j = (gy.floor() as usize).min(self.rows - 2);
        let fx = gx - i as f64;
        let fy = gy - j as f64;
        let h = |a: usize, b: usize| self.heights_mm[b * self.columns + a];
        let (h00, h10, h01, h11) = (h(i, j), h(i + 1, j), h(i, j + 1), h(i + 1, j + 1));
        let z = h00 * (1.0 - fx) * (1.0 - fy) + h10 * fx * (1.0 - fy) + h01 * (1.0 - fx) * fy + h11 * fx * fy;
        let dzdx = ((h10 - h00) * (1.0 - fy) + (h11 - h01) * fy) / self.spacing_mm;
        let dzdy = ((h01 - h00) * (1.0 - fx) + (h11 - h10) * fx) / self.spacing_mm;
        Some((z, dzdx, dzdy))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SurfaceKind {
    Plane { point_mm: [f64; 3], normal: [f64; 3] },
    Sphere { center_mm: [f64; 3], radius_mm: f64 },
    Heightmap(HeightGrid),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSurface {
    #[serde(flatten)]
    pub kind: SurfaceKind,
    #[serde(default = "default_reflectance")]
    pub reflectance: f64,
    #[serde(default = "default_ambient")]
    pub ambient: f64,
}

fn default_reflectance() -> f64 {
    0.8
}

fn default_ambient() -> f64 {
    0.1
}

/// A ray–surface hit with the surface normal facing the ray origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Intersection {
    Hit(Hit),
    Miss,
    /// Ray grazes the surface within tolerance.
    Degenerate,
}

const HEIGHTMAP_TOLERANCE_MM: f64 = 1e-6;

impl SceneSurface {
    pub fn plane(point_mm: [f64; 3], normal: [f64; 3]) -> Self {
        Self {
            kind: SurfaceKind::Plane { point_mm, normal },
            reflectance: default_reflectance(),
            ambient: default_ambient(),
        }
    }

    /// Plane `Z = z_mm` facing the camera.
    pub fn fronto_parallel(z_mm: f64) -> Self {
        Self::plane([0.0, 0.0, z_mm], [0.0, 0.0, 1.0])
    }

    pub fn sphere(center_mm: [f64; 3], radius_mm: f64) -> Self {
        Self {
            kind: SurfaceKind::Sphere { center_mm, radius_mm },
            reflectance: default_reflectance(),
            ambient: default_ambient(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reflectance > 0.0 && self.reflectance <= 1.0) {
            return Err(Error::Config("reflectance must lie in (0, 1]".into()));
        }
        if !(self.ambient >= 0.0) {
            return Err(Error::Config("ambient level must be non-negative".into()));
        }
        match &self.kind {
            SurfaceKind::Plane { normal, .. } => {
                let n = Vec3::from(*normal).norm();
                if (n - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("plane normal must be unit length, has norm {n}")));
                }
            }
            SurfaceKind::Sphere { radius_mm, .. } => {
                if !(*radius_mm > 0.0) {
                    return Err(Error::Config("sphere radius must be positive".into()));
                }
            }
            SurfaceKind::Heightmap(grid) => {
                if grid.columns < 2 || grid.rows < 2 || grid.heights_mm.len() != grid.columns * grid.rows {
                    return Err(Error::Config("heightmap needs at least 2x2 samples matching its size".into()));
                }
                if !(grid.spacing_mm > 0.0) || grid.heights_mm.iter().any(|h| !h.is_finite()) {
                    return Err(Error::Config("heightmap spacing must be positive and heights finite".into()));
                }
            }
        }
        Ok(())
    }

    pub fn intersect(&self, ray: &Ray) -> Intersection {
        let hit = match &self.kind {
            SurfaceKind::Plane { point_mm, normal } => intersect_plane(ray, &Vec3::from(*point_mm), &Vec3::from(*normal)),
            SurfaceKind::Sphere { center_mm, radius_mm } => intersect_sphere(ray, &Vec3::from(*center_mm), *radius_mm),
            SurfaceKind::Heightmap(grid) => intersect_heightmap(ray, grid),
        };
        match hit {
            Intersection::Hit(mut h) => {
                if h.normal.dot(&ray.direction) > 0.0 {
                    h.normal = -h.normal;
                }
                Intersection::Hit(h)
            }
            other => other,
        }
    }
}

fn intersect_plane(ray: &Ray, point: &Vec3, normal: &Vec3) -> Intersection {
    let denom = normal.dot(&ray.direction);
    if denom.abs() < 1e-12 {
        return Intersection::Degenerate;
    }
    let t = normal.dot(&(point - ray.origin)) / denom;
    if t <= 0.0 {
        return Intersection::Miss;
    }
    Intersection::Hit(Hit {
        t,
        point: ray.at(t),
        normal: *normal,
    })
}

fn intersect_sphere(ray: &Ray, center: &Vec3, radius: f64) -> Intersection {
    let oc = ray.origin - center;
    let b = oc.dot(&ray.direction);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return Intersection::Miss;
    }
    let root = disc.sqrt();
    let t = if -b - root > 0.0 { -b - root } else { -b + root };
    if t <= 0.0 {
        return Intersection::Miss;
    }
    let point = ray.at(t);
    Intersection::Hit(Hit {
        t,
        point,
        normal: (point - center) / radius,
    })
}

/// Slab test against the axis-aligned box; returns the entry/exit parameters.
fn slab(ray: &Ray, lo: &Vec3, hi: &Vec3) -> Option<(f64, f64)> {
    let mut t0: f64 = 0.0;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let d = ray.direction[a];
        let o = ray.origin[a];
        if d.abs() < 1e-15 {
            if o < lo[a] || o > hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[a] - o) / d, (hi[a] - o) / d);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1).then_some((t0, t1))
}

fn intersect_heightmap(ray: &Ray, grid: &HeightGrid) -> Intersection {
    let ([x0, x1], [y0, y1]) = grid.extent();
    let (zmin, zmax) = grid
        .heights_mm
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &h| (a.min(h), b.max(h)));
    let pad = HEIGHTMAP_TOLERANCE_MM;
    let Some((t_in, t_out)) = slab(
        ray,
        &Vec3::new(x0, y0, zmin - pad),
        &Vec3::new(x1, y1, zmax + pad),
    ) else {
        return Intersection::Miss;
    };
    // Signed gap between the ray and the surface; negative before the crossing.
    let gap = |t: f64| -> Option<f64> {
        let p = ray.at(t);
        grid.sample(p.x, p.y).map(|(z, _, _)| p.z - z)
    };
    let step = 0.25 * grid.spacing_mm;
    let steps = (((t_out - t_in) / step).ceil() as usize).clamp(1, 1_000_000);
    let dt = (t_out - t_in) / steps as f64;
    let mut prev_t = t_in;
    let mut prev_gap = gap(prev_t);
    for s in 1..=steps {
        let t = t_in + dt * s as f64;
        let g = gap(t);
        if let (Some(a), Some(b)) = (prev_gap, g) {
            if a.abs() <= pad {
                return heightmap_hit(ray, grid, prev_t);
            }
            if a < 0.0 && b >= 0.0 {
                let (mut lo, mut hi) = (prev_t, t);
                while hi - lo > HEIGHTMAP_TOLERANCE_MM {
                    let mid = 0.5 * (lo + hi);
                    match gap(mid) {
                        Some(m) if m < 0.0 => lo = mid,
                        Some(_) => hi = mid,
                        None => return Intersection::Degenerate,
                    }
                }
                return heightmap_hit(ray, grid, 0.5 * (lo + hi));
            }
        }
        prev_t = t;
        prev_gap = g;
    }
    Intersection::Miss
}

fn heightmap_hit(ray: &Ray, grid: &HeightGrid, t: f64) -> Intersection {
    let p = ray.at(t);
    match grid.sample(p.x, p.y) {
        Some((_, dzdx, dzdy)) => Intersection::Hit(Hit {
            t,
            point: p,
            normal: Vec3::new(-dzdx, -dzdy, 1.0).normalize(),
        }),
        None => Intersection::Degenerate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    /// Exact sinusoid, uniform illumination.
    IdealSinusoid,
    /// Gaussian-blurred binary slot transmittance with point-source irradiance falloff.
    SlotTransmission,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub n_steps: usize,
    pub fidelity: Fidelity,
    pub blur_sigma_deg: f64,
    pub noise_sigma: f64,
    pub quantize_stage: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_steps: 25,
            fidelity: Fidelity::IdealSinusoid,
            blur_sigma_deg: 0.25,
            noise_sigma: 0.0,
            quantize_stage: false,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 3 {
            return Err(Error::Config(format!("n_steps must be at least 3, got {}", self.n_steps)));
        }
        if !(self.blur_sigma_deg >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("blur and noise sigmas must be non-negative".into()));
        }
        Ok(())
    }
}

/// What the camera sees at one pixel.
#[derive(Debug, Clone, Copy)]
struct PixelSample {
    point: Vec3,
    azimuth_deg: f64,
    /// Irradiance relative to normal incidence at the reference distance.
    irradiance: f64,
}

struct TracedScene {
    width: usize,
    height: usize,
    samples: Vec<Option<PixelSample>>,
}

fn trace(scene: &SceneSurface, projector: &CylindricalProjector, camera: &CameraModel) -> Result<TracedScene> {
    scene.validate()?;
    projector.validate()?;
    camera.validate()?;
    let frame = projector.axis_pose.frame()?;
    let source = projector.source_mm();
    let (width, height) = (camera.width_px, camera.height_px);
    let samples = (0..width * height)
        .into_par_iter()
        .map(|i| {
            let ray = camera.pixel_ray((i % width) as f64, (i / width) as f64);
            let Intersection::Hit(hit) = scene.intersect(&ray) else {
                return None;
            };
            let to_source = source - hit.point;
            let distance = to_source.norm();
            let cos_incidence = hit.normal.dot(&to_source) / distance;
            let ratio = projector.reference_distance_mm / distance;
            Some(PixelSample {
                point: hit.point,
                azimuth_deg: frame.azimuth_deg(&hit.point),
                irradiance: cos_incidence.max(0.0) * ratio * ratio,
            })
        })
        .collect();
    Ok(TracedScene {
        width,
        height,
        samples,
    })
}

/// Pattern phase Φ_gt = 2π(β − α0)/θ of the scene point seen by every pixel;
/// pixels whose ray misses the scene are masked.
pub fn ground_truth_phase(
    scene: &SceneSurface,
    projector: &CylindricalProjector,
    camera: &CameraModel,
    freq: FrequencyTag,
) -> Result<ScalarMap> {
    let traced = trace(scene, projector, camera)?;
    Ok(pattern_phase_map(&traced, projector, freq))
}

fn pattern_phase_map(traced: &TracedScene, projector: &CylindricalProjector, freq: FrequencyTag) -> ScalarMap {
    ScalarMap::from_options(
        traced.width,
        traced.height,
        traced
            .samples
            .iter()
            .map(|s| s.map(|s| projector.phase_from_azimuth(s.azimuth_deg, freq)))
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Pattern phase 2π(β − α0)/θ.
    pub pattern_phase: ScalarMap,
    /// Absolute phase in the convention the retrieval/unwrapping chain reproduces.
    pub phase: ScalarMap,
    pub points: PointMap,
}

impl GroundTruth {
    pub fn depth(&self) -> &ScalarMap {
        &self.points.z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedStack {
    pub stack: FringeStack,
    pub truth: GroundTruth,
}

/// Binary slot transmittance (OFF centered on pattern phase zero, 50% duty)
/// convolved with a Gaussian of `sigma_deg`; `x_deg` is the pattern coordinate.
pub fn slot_transmittance(x_deg: f64, theta_deg: f64, sigma_deg: f64) -> f64 {
    let x = x_deg.rem_euclid(theta_deg);
    let (on_start, on_end) = (0.25 * theta_deg, 0.75 * theta_deg);
    if sigma_deg <= 0.0 {
        return if (on_start..on_end).contains(&x) { 1.0 } else { 0.0 };
    }
    let cdf = |z: f64| 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2);
    let reach = (8.0 * sigma_deg / theta_deg).ceil() as i64 + 1;
    (-reach..=reach)
        .map(|j| {
            let shift = j as f64 * theta_deg;
            cdf((x - on_start - shift) / sigma_deg) - cdf((x - on_end - shift) / sigma_deg)
        })
        .sum()
}

/// Renders the N phase-shifted frames of one frequency plus ground truth.
///
/// Noise is additive Gaussian, keyed by `(seed, frequency, frame, pixel)` so
/// the result does not depend on how pixels are scheduled.
pub fn render_fringe_stack(
    scene: &SceneSurface,
    projector: &CylindricalProjector,
    camera: &CameraModel,
    freq: FrequencyTag,
    config: &RenderConfig,
    seed: u64,
) -> Result<RenderedStack> {
    config.validate()?;
    let traced = trace(scene, projector, camera)?;
    Ok(render_traced(&traced, scene, projector, freq, config, seed))
}

/// Both frequencies of one scene, tracing the camera rays once.
pub fn render_pair(
    scene: &SceneSurface,
    projector: &CylindricalProjector,
    camera: &CameraModel,
    config: &RenderConfig,
    seed: u64,
) -> Result<(RenderedStack, RenderedStack)> {
    config.validate()?;
    let traced = trace(scene, projector, camera)?;
    Ok((
        render_traced(&traced, scene, projector, FrequencyTag::High, config, seed),
        render_traced(&traced, scene, projector, FrequencyTag::Low, config, seed),
    ))
}

fn render_traced(
    traced: &TracedScene,
    scene: &SceneSurface,
    projector: &CylindricalProjector,
    freq: FrequencyTag,
    config: &RenderConfig,
    seed: u64,
) -> RenderedStack {
    let (width, height) = (traced.width, traced.height);
    let n = config.n_steps;
    let theta = projector.interval_deg(freq);
    let shifts = phase_shifts(n).expect("n_steps validated").into_shifts();

    let frames = (0..n)
        .map(|k| {
            let rotation = projector.rotation_deg(freq, k, n, config.quantize_stage);
            let stream = ((freq as u64) << 32) | k as u64;
            let rows: Vec<Vec<Option<f64>>> = (0..height)
                .into_par_iter()
                .map(|row| {
                    let mut noise = PixelNoise::new(seed, stream, row * width, config.noise_sigma);
                    (row * width..(row + 1) * width)
                        .map(|i| {
                            let eps = noise.next();
                            traced.samples[i].map(|s| {
                                let clean = intensity(s, scene, projector, freq, theta, rotation, config);
                                (clean + eps).max(0.0)
                            })
                        })
                        .collect()
                })
                .collect();
            ScalarMap::from_options(width, height, rows.into_iter().flatten().collect())
        })
        .collect();

    let hint = fringe_wavelength(projector.reference_distance_mm, theta, WavelengthMode::Exact).ok();
    let mut stack = FringeStack::new(frames, shifts, freq);
    stack.wavelength_hint_mm = hint;

    let pattern_phase = pattern_phase_map(traced, projector, freq);
    let phase = pattern_phase.map(pipeline_phase);
    let points: Vec<Option<Vec3>> = traced.samples.iter().map(|s| s.map(|s| s.point)).collect();
    RenderedStack {
        stack,
        truth: GroundTruth {
            pattern_phase,
            phase,
            points: PointMap::from_points(width, height, &points),
        },
    }
}

fn intensity(
    sample: PixelSample,
    scene: &SceneSurface,
    projector: &CylindricalProjector,
    freq: FrequencyTag,
    theta_deg: f64,
    rotation_deg: f64,
    config: &RenderConfig,
) -> f64 {
    // The cylinder turns toward decreasing azimuth, so the pattern coordinate
    // at step k is β − α0 + rotation_k.
    let x = sample.azimuth_deg - projector.rotation_offset_deg + rotation_deg;
    match config.fidelity {
        Fidelity::IdealSinusoid => {
            let _ = freq;
            scene.ambient + scene.reflectance * (0.5 - 0.5 * (TAU * x / theta_deg).cos())
        }
        Fidelity::SlotTransmission => {
            scene.ambient
                + scene.reflectance
                    * sample.irradiance
                    * slot_transmittance(x, theta_deg, config.blur_sigma_deg)
        }
    }
}

/// Counter-based Gaussian source: a ChaCha stream per (seed, frame) whose
/// word position is tied to the pixel index, four words per pixel.
struct PixelNoise {
    rng: Option<ChaCha8Rng>,
    sigma: f64,
}

impl PixelNoise {
    fn new(seed: u64, stream: u64, first_pixel: usize, sigma: f64) -> Self {
        let rng = (sigma > 0.0).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            rng.set_word_pos(4 * first_pixel as u128);
            rng
        });
        Self { rng, sigma }
    }

    fn next(&mut self) -> f64 {
        let Some(rng) = self.rng.as_mut() else {
            return 0.0;
        };
        let unit = |bits: u64| (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let u1 = 1.0 - unit(rng.next_u64());
        let u2 = unit(rng.next_u64());
        self.sigma * (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
    }
}
