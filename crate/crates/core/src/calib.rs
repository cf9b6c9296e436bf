//! Per-pixel cubic phase-to-coordinate calibration.
//!
//! Each valid pixel carries three cubics X(Φ), Y(Φ), Z(Φ) fitted across the
//! reference poses. Fits run on phases centered and scaled to [−1, 1] and are
//! mapped back to raw-phase coefficients afterward.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{Matrix4, Matrix4x3, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{PointMap, ScalarMap};

/// One reference pose: its absolute phase map and the known XYZ at each pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibPose {
    pub pose_id: String,
    pub phase: ScalarMap,
    pub reference: PointMap,
}

impl CalibPose {
    pub fn new(pose_id: impl Into<String>, phase: ScalarMap, reference: PointMap) -> Result<Self> {
        phase.ensure_same_dims(&reference.z)?;
        Ok(Self {
            pose_id: pose_id.into(),
            phase,
            reference,
        })
    }

    fn sample(&self, i: usize) -> Option<(f64, Vector3<f64>)> {
        Some((self.phase.at(i)?, self.reference.point(i)?))
    }
}

pub const MIN_POSES: usize = 4;

/// Cubic coefficients (constant term first) for X, Y and Z at one pixel.
pub type PixelCubics = [[f64; 4]; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct PolyCalibration {
    width: usize,
    height: usize,
    coeffs: Vec<PixelCubics>,
    phase_min: Vec<f64>,
    phase_max: Vec<f64>,
    mask: Vec<bool>,
    pub working_range_mm: [f64; 2],
}

fn horner(c: &[f64; 4], phi: f64) -> f64 {
    ((c[3] * phi + c[2]) * phi + c[1]) * phi + c[0]
}

fn horner_derivative(c: &[f64; 4], phi: f64) -> f64 {
    (3.0 * c[3] * phi + 2.0 * c[2]) * phi + c[1]
}

impl PolyCalibration {
    /// Same cubics at every pixel with an unbounded phase domain.
    pub fn uniform(width: usize, height: usize, cubics: PixelCubics, working_range_mm: [f64; 2]) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            coeffs: vec![cubics; n],
            phase_min: vec![f64::NEG_INFINITY; n],
            phase_max: vec![f64::INFINITY; n],
            mask: vec![true; n],
            working_range_mm,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn cubics(&self, i: usize) -> Option<&PixelCubics> {
        self.mask[i].then(|| &self.coeffs[i])
    }

    /// Phase range seen at calibration time.
    pub fn phase_domain(&self, i: usize) -> Option<(f64, f64)> {
        self.mask[i].then(|| (self.phase_min[i], self.phase_max[i]))
    }

    pub fn evaluate(&self, i: usize, phi: f64) -> Option<Vector3<f64>> {
        let c = self.cubics(i)?;
        Some(Vector3::new(horner(&c[0], phi), horner(&c[1], phi), horner(&c[2], phi)))
    }

    /// ∂Z/∂Φ at one pixel.
    pub fn depth_sensitivity(&self, i: usize, phi: f64) -> Option<f64> {
        Some(horner_derivative(&self.cubics(i)?[2], phi))
    }

    fn ensure_dims(&self, dims: (usize, usize)) -> Result<()> {
        if dims != self.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: dims,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseResidual {
    pub pose_id: String,
    pub rmse_z_mm: f64,
    pub valid_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibReport {
    pub pose_count: usize,
    pub poses: Vec<PoseResidual>,
    /// Pooled RMSE of depth residuals over all valid pixels of all poses.
    pub sigma_cal_mm: f64,
    pub rmse_x_mm: f64,
    pub rmse_y_mm: f64,
    /// Largest absolute depth residual; how far the cubic model misses the data.
    pub adequacy_bound_mm: f64,
    pub s_eff_mm_per_rad: f64,
    pub valid_pixels: usize,
    pub rejected_pixels: usize,
}

/// Least-squares cubics for one pixel, or `None` when fewer than four
/// distinct phases are available.
pub fn fit_pixel(samples: &[(f64, Vector3<f64>)]) -> Option<PixelCubics> {
    let (lo, hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.0), hi.max(s.0)));
    if !(hi > lo) {
        return None;
    }
    let center = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let mut scaled: Vec<f64> = samples.iter().map(|s| (s.0 - center) / half).collect();
    scaled.sort_by(f64::total_cmp);
    let distinct = 1 + scaled.windows(2).filter(|w| w[1] - w[0] > 1e-9).count();
    if distinct < MIN_POSES {
        return None;
    }

    let mut normal = Matrix4::<f64>::zeros();
    let mut rhs = Matrix4x3::<f64>::zeros();
    for (phi, xyz) in samples {
        let t = (phi - center) / half;
        let basis = Vector4::new(1.0, t, t * t, t * t * t);
        normal += basis * basis.transpose();
        rhs += basis * xyz.transpose();
    }
    let solution = normal.cholesky()?.solve(&rhs);

    // Back to raw phase: t = (Φ − m)/h, so t^i = Σ_n C(i,n) Φ^n (−m)^(i−n) / h^i.
    let binom = [[1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0], [1.0, 2.0, 1.0, 0.0], [1.0, 3.0, 3.0, 1.0]];
    let mut out = [[0.0; 4]; 3];
    for (axis, raw) in out.iter_mut().enumerate() {
        for i in 0..4 {
            let q = solution[(i, axis)] / half.powi(i as i32);
            for (n, slot) in raw.iter_mut().enumerate().take(i + 1) {
                *slot += q * binom[i][n] * (-center).powi((i - n) as i32);
            }
        }
    }
    out.iter().flatten().all(|c| c.is_finite()).then_some(out)
}

fn ensure_pose_dims(poses: &[CalibPose]) -> Result<(usize, usize)> {
    let first = poses.first().ok_or(Error::InsufficientPoses(0))?;
    let dims = first.phase.dims();
    for pose in poses {
        for map in [&pose.phase, &pose.reference.z] {
            if map.dims() != dims {
                return Err(Error::DimensionMismatch {
                    expected: dims,
                    found: map.dims(),
                });
            }
        }
    }
    Ok(dims)
}

pub fn fit_calibration(poses: &[CalibPose]) -> Result<(PolyCalibration, CalibReport)> {
    if poses.len() < MIN_POSES {
        return Err(Error::InsufficientPoses(poses.len()));
    }
    let (width, height) = ensure_pose_dims(poses)?;

    let fits: Vec<Option<(PixelCubics, f64, f64)>> = (0..width * height)
        .into_par_iter()
        .map(|i| {
            let samples: Vec<(f64, Vector3<f64>)> = poses.iter().filter_map(|p| p.sample(i)).collect();
            let cubics = fit_pixel(&samples)?;
            let (lo, hi) = samples
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.0), hi.max(s.0)));
            Some((cubics, lo, hi))
        })
        .collect();

    let n = width * height;
    let mut coeffs = vec![[[0.0; 4]; 3]; n];
    let mut phase_min = vec![0.0; n];
    let mut phase_max = vec![0.0; n];
    let mut mask = vec![false; n];
    for (i, fit) in fits.into_iter().enumerate() {
        if let Some((c, lo, hi)) = fit {
            coeffs[i] = c;
            phase_min[i] = lo;
            phase_max[i] = hi;
            mask[i] = true;
        }
    }

    let working_range_mm = poses
        .iter()
        .flat_map(|p| p.reference.z.valid_values())
        .fold([f64::INFINITY, f64::NEG_INFINITY], |[lo, hi], z| [lo.min(z), hi.max(z)]);
    let calib = PolyCalibration {
        width,
        height,
        coeffs,
        phase_min,
        phase_max,
        mask,
        working_range_mm,
    };
    let report = calibration_report(&calib, poses)?;
    Ok((calib, report))
}

/// Residual maps (fitted − reference) of one coordinate for every pose.
pub fn residual_maps(calib: &PolyCalibration, poses: &[CalibPose], axis: usize) -> Result<Vec<ScalarMap>> {
    poses
        .iter()
        .map(|pose| {
            calib.ensure_dims(pose.phase.dims())?;
            let (w, h) = pose.phase.dims();
            let cells = (0..w * h)
                .into_par_iter()
                .map(|i| {
                    let (phi, reference) = pose.sample(i)?;
                    Some(calib.evaluate(i, phi)?[axis] - reference[axis])
                })
                .collect();
            Ok(ScalarMap::from_options(w, h, cells))
        })
        .collect()
}

pub fn calibration_report(calib: &PolyCalibration, poses: &[CalibPose]) -> Result<CalibReport> {
    let z = residual_maps(calib, poses, 2)?;
    let pose_residuals = poses
        .iter()
        .zip(&z)
        .map(|(pose, map)| PoseResidual {
            pose_id: pose.pose_id.clone(),
            rmse_z_mm: if map.valid_count() > 0 { pooled_rmse(std::slice::from_ref(map)).unwrap_or(0.0) } else { f64::NAN },
            valid_pixels: map.valid_count(),
        })
        .collect();
    let adequacy = z
        .iter()
        .flat_map(|m| m.valid_values())
        .fold(0.0_f64, |acc, r| acc.max(r.abs()));
    Ok(CalibReport {
        pose_count: poses.len(),
        poses: pose_residuals,
        sigma_cal_mm: pooled_rmse(&z)?,
        rmse_x_mm: pooled_rmse(&residual_maps(calib, poses, 0)?)?,
        rmse_y_mm: pooled_rmse(&residual_maps(calib, poses, 1)?)?,
        adequacy_bound_mm: adequacy,
        s_eff_mm_per_rad: effective_sensitivity(calib, poses)?,
        valid_pixels: calib.valid_count(),
        rejected_pixels: calib.len() - calib.valid_count(),
    })
}

/// √(mean r²) over all valid pixels of all maps, accumulated map by map in
/// ascending pixel order.
pub fn pooled_rmse(residuals: &[ScalarMap]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for map in residuals {
        for r in map.valid_values() {
            sum += r * r;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("no valid residuals to pool".into()));
    }
    Ok((sum / count as f64).sqrt())
}

/// Mean of |∂Z/∂Φ| over all valid pixels of all poses, evaluated at each pose's phase.
pub fn effective_sensitivity(calib: &PolyCalibration, poses: &[CalibPose]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for pose in poses {
        calib.ensure_dims(pose.phase.dims())?;
        for (i, phi) in pose.phase.valid() {
            if let Some(d) = calib.depth_sensitivity(i, phi) {
                sum += d.abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("no calibrated pixels with phase samples".into()));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub points: PointMap,
    /// Pixels whose phase lies outside the calibrated phase range (still evaluated).
    pub out_of_domain: Vec<bool>,
}

impl Reconstruction {
    pub fn out_of_domain_count(&self) -> usize {
        self.out_of_domain.iter().filter(|&&f| f).count()
    }
}

pub fn evaluate_points(calib: &PolyCalibration, phase: &ScalarMap) -> Result<Reconstruction> {
    calib.ensure_dims(phase.dims())?;
    let (w, h) = phase.dims();
    let cells: Vec<(Option<Vector3<f64>>, bool)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let Some(phi) = phase.at(i) else {
                return (None, false);
            };
            match calib.evaluate(i, phi) {
                Some(p) => (Some(p), phi < calib.phase_min[i] || phi > calib.phase_max[i]),
                None => (None, false),
            }
        })
        .collect();
    let (points, out_of_domain): (Vec<_>, Vec<_>) = cells.into_iter().unzip();
    Ok(Reconstruction {
        points: PointMap::from_points(w, h, &points),
        out_of_domain,
    })
}

const CONTAINER_FORMAT: &str = "fringeforge-calibration/1";
const CONTAINER_LAYOUT: &str =
    "planar f64le: a0 a1 a2 a3 b0 b1 b2 b3 c0 c1 c2 c3 phase_min phase_max; then mask u8";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub format: String,
    pub width: usize,
    pub height: usize,
    pub layout: String,
    pub phase_domain: bool,
    pub working_range_mm: [f64; 2],
    pub creator: String,
    /// SHA-256 of the inputs the calibration was derived from.
    pub provenance_sha256: String,
}

impl PolyCalibration {
    pub fn write_to(&self, path: &Path, provenance_sha256: &str) -> Result<()> {
        let header = ContainerHeader {
            format: CONTAINER_FORMAT.into(),
            width: self.width,
            height: self.height,
            layout: CONTAINER_LAYOUT.into(),
            phase_domain: true,
            working_range_mm: self.working_range_mm,
            creator: concat!("fringeforge ", env!("CARGO_PKG_VERSION")).into(),
            provenance_sha256: provenance_sha256.into(),
        };
        let mut bytes = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
        bytes.extend_from_slice(b"\n\0");
        let n = self.len();
        bytes.reserve(n * 8 * 14 + n);
        for axis in 0..3 {
            for power in 0..4 {
                for c in &self.coeffs {
                    bytes.extend_from_slice(&c[axis][power].to_le_bytes());
                }
            }
        }
        for arr in [&self.phase_min, &self.phase_max] {
            for v in arr {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes.extend(self.mask.iter().map(|&m| u8::from(m)));
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_from(path: &Path) -> Result<(Self, ContainerHeader)> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut header_bytes = Vec::new();
        reader.read_until(0, &mut header_bytes).map_err(|e| Error::io(path, e))?;
        if !header_bytes.ends_with(b"\n\0") {
            return Err(Error::format(path, "calibration header must end with newline + NUL"));
        }
        header_bytes.truncate(header_bytes.len() - 2);
        let header: ContainerHeader =
            serde_json::from_slice(&header_bytes).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        if header.format != CONTAINER_FORMAT {
            return Err(Error::format(path, format!("unsupported container format {:?}", header.format)));
        }
        let n = header
            .width
            .checked_mul(header.height)
            .ok_or_else(|| Error::format(path, "dimensions overflow"))?;
        let mut body = Vec::new();
        reader.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
        if body.len() != n * 8 * 14 + n {
            return Err(Error::format(
                path,
                format!("expected {} payload bytes, found {}", n * 8 * 14 + n, body.len()),
            ));
        }
        let plane = |k: usize| -> Vec<f64> {
            body[k * n * 8..(k + 1) * n * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect()
        };
        let planes: Vec<Vec<f64>> = (0..14).map(plane).collect();
        let coeffs = (0..n)
            .map(|i| {
                let mut c = [[0.0; 4]; 3];
                for (axis, row) in c.iter_mut().enumerate() {
                    for (power, slot) in row.iter_mut().enumerate() {
                        *slot = planes[axis * 4 + power][i];
                    }
                }
                c
            })
            .collect();
        let mask = body[n * 8 * 14..].iter().map(|&b| b != 0).collect();
        let calib = PolyCalibration {
            width: header.width,
            height: header.height,
            coeffs,
            phase_min: planes[12].clone(),
            phase_max: planes[13].clone(),
            mask,
            working_range_mm: header.working_range_mm,
        };
        Ok((calib, header))
    }
}
