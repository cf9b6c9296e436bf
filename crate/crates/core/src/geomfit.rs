//! Plane and sphere fitting, error maps and error statistics.

use nalgebra::{DMatrix, Matrix3, Matrix4, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{PointMap, ScalarMap};

/// Plane {p : n·p = d₀} with unit normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset_mm: f64,
}

impl Plane {
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        Vector3::from(self.normal).dot(p) - self.offset_mm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center_mm: [f64; 3],
    pub radius_mm: f64,
}

impl Sphere {
    /// Positive outside the sphere.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        (p - Vector3::from(self.center_mm)).norm() - self.radius_mm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Surface {
    Plane(Plane),
    Sphere(Sphere),
}

impl Surface {
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Surface::Plane(s) => s.signed_distance(p),
            Surface::Sphere(s) => s.signed_distance(p),
        }
    }
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / points.len() as f64
}

/// Orthogonal-distance least-squares plane. The normal is oriented with
/// non-negative Z, falling back to Y then X when Z vanishes.
pub fn fit_plane(points: &[Vector3<f64>]) -> Result<Plane> {
    if points.len() < 3 {
        return Err(Error::DegenerateInput(format!("plane fit needs at least 3 points, got {}", points.len())));
    }
    let c = centroid(points);
    let centered = DMatrix::from_fn(points.len(), 3, |r, k| points[r][k] - c[k]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let s = &svd.singular_values;
    let (order, _) = sorted_desc(&[s[0], s[1], s[2]]);
    let (largest, middle, smallest) = (s[order[0]], s[order[1]], order[2]);
    if !(middle > 1e-12 * largest) {
        return Err(Error::DegenerateInput("points are collinear or coincident".into()));
    }
    let mut n = Vector3::new(v_t[(smallest, 0)], v_t[(smallest, 1)], v_t[(smallest, 2)]).normalize();
    let flip = n
        .iter()
        .rev()
        .find(|v| **v != 0.0)
        .is_some_and(|v| *v < 0.0);
    if flip {
        n = -n;
    }
    Ok(Plane {
        normal: n.into(),
        offset_mm: n.dot(&c),
    })
}

fn sorted_desc(v: &[f64; 3]) -> ([usize; 3], [f64; 3]) {
    let mut idx = [0, 1, 2];
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    (idx, [v[idx[0]], v[idx[1]], v[idx[2]]])
}

fn ensure_not_coplanar(points: &[Vector3<f64>]) -> Result<Vector3<f64>> {
    if points.len() < 4 {
        return Err(Error::DegenerateInput(format!("sphere fit needs at least 4 points, got {}", points.len())));
    }
    let c = centroid(points);
    let scatter = points.iter().fold(Matrix3::zeros(), |acc, p| {
        let d = p - c;
        acc + d * d.transpose()
    });
    let eig = scatter.symmetric_eigenvalues();
    let (_, sorted) = sorted_desc(&[eig[0], eig[1], eig[2]]);
    if !(sorted[2] > 1e-12 * sorted[0]) {
        return Err(Error::DegenerateInput("points are coplanar".into()));
    }
    Ok(c)
}

/// Linear (Coope) fit of |p|² = 2c·p + k on centroid-shifted coordinates.
pub fn fit_sphere_algebraic(points: &[Vector3<f64>]) -> Result<Sphere> {
    let c0 = ensure_not_coplanar(points)?;
    let mut normal = Matrix4::<f64>::zeros();
    let mut rhs = Vector4::<f64>::zeros();
    for p in points {
        let d = p - c0;
        let row = Vector4::new(2.0 * d.x, 2.0 * d.y, 2.0 * d.z, 1.0);
        normal += row * row.transpose();
        rhs += row * d.norm_squared();
    }
    let sol = normal
        .cholesky()
        .ok_or_else(|| Error::DegenerateInput("algebraic sphere system is singular".into()))?
        .solve(&rhs);
    let center = Vector3::new(sol[0], sol[1], sol[2]);
    let r2 = sol[3] + center.norm_squared();
    if !(r2 > 0.0) {
        return Err(Error::DegenerateInput("algebraic fit yields no real radius".into()));
    }
    Ok(Sphere {
        center_mm: (center + c0).into(),
        radius_mm: r2.sqrt(),
    })
}

pub const MAX_ITERATIONS: usize = 100;
const STEP_TOLERANCE_MM: f64 = 1e-9;

fn geometric_cost(points: &[Vector3<f64>], center: &Vector3<f64>, radius: f64) -> f64 {
    points.iter().map(|p| ((p - center).norm() - radius).powi(2)).sum()
}

/// Gauss–Newton with step halving. `free_radius` adds the radius as a fourth parameter.
fn gauss_newton(points: &[Vector3<f64>], start: Sphere, free_radius: bool) -> Result<Sphere> {
    let mut center = Vector3::from(start.center_mm);
    let mut radius = start.radius_mm;
    let mut cost = geometric_cost(points, &center, radius);
    for _ in 0..MAX_ITERATIONS {
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        for p in points {
            let d = p - center;
            let dist = d.norm();
            if dist == 0.0 {
                return Err(Error::DegenerateInput("a point coincides with the sphere center".into()));
            }
            let u = d / dist;
            let row = Vector4::new(-u.x, -u.y, -u.z, if free_radius { -1.0 } else { 0.0 });
            let r = dist - radius;
            jtj += row * row.transpose();
            jtr += row * r;
        }
        if !free_radius {
            jtj[(3, 3)] = 1.0;
        }
        let step = jtj
            .cholesky()
            .ok_or_else(|| Error::DegenerateInput("sphere fit is ill-conditioned".into()))?
            .solve(&(-jtr));
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let c = center + Vector3::new(step[0], step[1], step[2]) * scale;
            let r = radius + step[3] * scale;
            let trial = geometric_cost(points, &c, r);
            if trial <= cost {
                accepted = Some((c, r, trial, scale));
                break;
            }
            scale *= 0.5;
        }
        let Some((c, r, trial, scale)) = accepted else {
            // No descent along the Gauss–Newton direction: at a minimum to machine precision.
            return finish(center, radius);
        };
        center = c;
        radius = r;
        cost = trial;
        if step.norm() * scale < STEP_TOLERANCE_MM {
            return finish(center, radius);
        }
    }
    Err(Error::NoConvergence(MAX_ITERATIONS))
}

fn finish(center: Vector3<f64>, radius: f64) -> Result<Sphere> {
    if !(radius > 0.0) {
        return Err(Error::DegenerateInput("fit collapsed to a non-positive radius".into()));
    }
    Ok(Sphere {
        center_mm: center.into(),
        radius_mm: radius,
    })
}

/// Center minimizing Σ(‖pᵢ − c‖ − r)² for a known radius.
pub fn fit_sphere_center(points: &[Vector3<f64>], radius_mm: f64) -> Result<Vector3<f64>> {
    if !(radius_mm > 0.0) {
        return Err(Error::Domain(format!("sphere radius must be positive, got {radius_mm}")));
    }
    let start = fit_sphere_algebraic(points)?;
    let start = Sphere {
        radius_mm,
        ..start
    };
    Ok(Vector3::from(gauss_newton(points, start, false)?.center_mm))
}

/// Joint center and radius geometric least squares.
pub fn fit_sphere_free(points: &[Vector3<f64>]) -> Result<Sphere> {
    gauss_newton(points, fit_sphere_algebraic(points)?, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistogramSpec {
    pub bins: usize,
    pub half_range_mm: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            bins: 101,
            half_range_mm: 1.0,
        }
    }
}

/// Values outside the range are counted in the end bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges_mm: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn build(values: &[f64], spec: &HistogramSpec) -> Self {
        let bins = spec.bins.max(1);
        let lo = -spec.half_range_mm;
        let width = 2.0 * spec.half_range_mm / bins as f64;
        let edges_mm = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = ((v - lo) / width).floor();
            let b = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(bins - 1) };
            counts[b] += 1;
        }
        Self { edges_mm, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub rmse_mm: f64,
    pub mean_mm: f64,
    pub std_pop_mm: f64,
    pub std_sample_mm: f64,
    pub min_mm: f64,
    pub max_mm: f64,
    pub count: usize,
    pub histogram: Histogram,
}

impl ErrorStats {
    /// Undefined moments are NaN (no values, or a single value for the sample STD).
    pub fn from_values(values: &[f64], spec: &HistogramSpec) -> Self {
        let n = values.len();
        let nf = n as f64;
        let mean = values.iter().sum::<f64>() / nf;
        let ss = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        let (min, max) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        Self {
            rmse_mm: (values.iter().map(|v| v * v).sum::<f64>() / nf).sqrt(),
            mean_mm: mean,
            std_pop_mm: (ss / nf).sqrt(),
            std_sample_mm: if n > 1 { (ss / (nf - 1.0)).sqrt() } else { f64::NAN },
            min_mm: if n > 0 { min } else { f64::NAN },
            max_mm: if n > 0 { max } else { f64::NAN },
            count: n,
            histogram: Histogram::build(values, spec),
        }
    }
}

pub fn error_map(points: &PointMap, surface: &Surface) -> (ScalarMap, ErrorStats) {
    error_map_with(points, surface, &HistogramSpec::default())
}

/// Signed orthogonal distance of every valid point to the surface.
pub fn error_map_with(points: &PointMap, surface: &Surface, spec: &HistogramSpec) -> (ScalarMap, ErrorStats) {
    let (w, h) = points.dims();
    let cells: Vec<Option<f64>> = (0..w * h)
        .into_par_iter()
        .map(|i| points.point(i).map(|p| surface.signed_distance(&p)))
        .collect();
    let map = ScalarMap::from_options(w, h, cells);
    let values: Vec<f64> = map.valid_values().collect();
    let stats = ErrorStats::from_values(&values, spec);
    (map, stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageAxis {
    U,
    V,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionalRmse {
    pub central_mm: f64,
    pub outer_mm: f64,
    pub central_count: usize,
    pub outer_count: usize,
}

/// RMSE over the central band of width `central_fraction` and over the two
/// outer bands of width `outer_fraction` each, measured at pixel centers.
pub fn regional_rmse(
    errors: &ScalarMap,
    axis: ImageAxis,
    central_fraction: f64,
    outer_fraction: f64,
) -> Result<RegionalRmse> {
    let valid = |f: f64| f > 0.0 && f < 1.0;
    if !valid(central_fraction) || !valid(outer_fraction) || central_fraction + 2.0 * outer_fraction > 1.0 + 1e-12 {
        return Err(Error::Domain(format!(
            "band fractions must lie in (0, 1) and fit in the image, got central {central_fraction}, outer {outer_fraction}"
        )));
    }
    let (w, h) = errors.dims();
    let extent = match axis {
        ImageAxis::U => w,
        ImageAxis::V => h,
    } as f64;
    let (mut cs, mut cn, mut os, mut on) = (0.0, 0usize, 0.0, 0usize);
    for (i, e) in errors.valid() {
        let coord = match axis {
            ImageAxis::U => i % w,
            ImageAxis::V => i / w,
        } as f64;
        let f = (coord + 0.5) / extent;
        if (0.5 - central_fraction / 2.0..0.5 + central_fraction / 2.0).contains(&f) {
            cs += e * e;
            cn += 1;
        }
        if f < outer_fraction || f >= 1.0 - outer_fraction {
            os += e * e;
            on += 1;
        }
    }
    if cn == 0 || on == 0 {
        return Err(Error::EmptyRegion(format!(
            "{cn} valid pixels in the central band, {on} in the outer bands"
        )));
    }
    Ok(RegionalRmse {
        central_mm: (cs / cn as f64).sqrt(),
        outer_mm: (os / on as f64).sqrt(),
        central_count: cn,
        outer_count: on,
    })
}
