//! Masked raster maps and fringe stacks.
//!
//! A [`ScalarMap`] is a row-major grid of `f64` values with a validity mask;
//! every reduction in the crate skips invalid pixels. A [`FringeStack`] is the
//! ordered set of phase-shifted frames for one fringe frequency.

use std::f64::consts::TAU;
use std::fmt;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A masked 2D grid of values. `mask[i] == true` marks a valid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl ScalarMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if values.len() != n || mask.len() != n {
            return Err(Error::Domain(format!(
                "map of {width}x{height} needs {n} values and mask entries, got {} and {}",
                values.len(),
                mask.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
            mask,
        })
    }

    /// All pixels valid.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(width, height, values, vec![true; width * height])
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            values: vec![value; n],
            mask: vec![true; n],
        }
    }

    /// Builds a map by evaluating `f(u, v)` at every pixel in parallel; `None`
    /// marks the pixel invalid. Output order is row-major regardless of scheduling.
    pub fn from_fn<F>(width: usize, height: usize, f: F) -> Self
    where
        F: Fn(usize, usize) -> Option<f64> + Sync,
    {
        let cells: Vec<Option<f64>> = (0..width * height)
            .into_par_iter()
            .map(|i| f(i % width, i / width))
            .collect();
        Self::from_options(width, height, cells)
    }

    pub fn from_options(width: usize, height: usize, cells: Vec<Option<f64>>) -> Self {
        let mask = cells.iter().map(Option::is_some).collect();
        let values = cells.into_iter().map(|c| c.unwrap_or(0.0)).collect();
        Self {
            width,
            height,
            values,
            mask,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Raw values including masked-out pixels (their content is unspecified).
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    pub fn is_valid(&self, index: usize) -> bool {
        self.mask[index]
    }

    /// Value at a flat index, `None` when masked.
    pub fn at(&self, index: usize) -> Option<f64> {
        self.mask[index].then(|| self.values[index])
    }

    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        if u >= self.width || v >= self.height {
            return None;
        }
        self.at(self.index(u, v))
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `(index, value)` for valid pixels in ascending index order.
    pub fn valid(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values
            .iter()
            .zip(&self.mask)
            .enumerate()
            .filter_map(|(i, (&v, &m))| m.then_some((i, v)))
    }

    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.valid().map(|(_, v)| v)
    }

    /// Applies `f` to every valid pixel; masked pixels stay masked.
    pub fn map<F>(&self, f: F) -> ScalarMap
    where
        F: Fn(f64) -> f64 + Sync,
    {
        let values = self
            .values
            .par_iter()
            .zip(self.mask.par_iter())
            .map(|(&v, &m)| if m { f(v) } else { 0.0 })
            .collect();
        ScalarMap {
            width: self.width,
            height: self.height,
            values,
            mask: self.mask.clone(),
        }
    }

    /// Restricts validity to pixels also valid in `mask`.
    pub fn restrict(&mut self, mask: &[bool]) {
        assert_eq!(mask.len(), self.mask.len(), "mask length mismatch");
        for (m, &other) in self.mask.iter_mut().zip(mask) {
            *m &= other;
        }
    }

    pub fn set(&mut self, index: usize, value: Option<f64>) {
        match value {
            Some(v) => {
                self.values[index] = v;
                self.mask[index] = true;
            }
            None => self.mask[index] = false,
        }
    }

    pub(crate) fn ensure_same_dims(&self, other: &ScalarMap) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: other.dims(),
            });
        }
        Ok(())
    }
}

/// Per-pixel XYZ coordinates in millimeters sharing one validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    pub x: ScalarMap,
    pub y: ScalarMap,
    pub z: ScalarMap,
}

impl PointMap {
    /// Combines three coordinate maps; the shared mask is their intersection.
    pub fn new(mut x: ScalarMap, mut y: ScalarMap, mut z: ScalarMap) -> Result<Self> {
        x.ensure_same_dims(&y)?;
        x.ensure_same_dims(&z)?;
        let shared: Vec<bool> = (0..x.len()).map(|i| x.mask[i] && y.mask[i] && z.mask[i]).collect();
        for map in [&mut x, &mut y, &mut z] {
            map.mask.clone_from(&shared);
        }
        Ok(Self { x, y, z })
    }

    pub fn from_points(width: usize, height: usize, points: &[Option<Vector3<f64>>]) -> Self {
        let coord = |axis: usize| {
            ScalarMap::from_options(width, height, points.iter().map(|p| p.map(|p| p[axis])).collect())
        };
        Self {
            x: coord(0),
            y: coord(1),
            z: coord(2),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.z.dims()
    }

    pub fn mask(&self) -> &[bool] {
        self.z.mask()
    }

    pub fn valid_count(&self) -> usize {
        self.z.valid_count()
    }

    pub fn point(&self, index: usize) -> Option<Vector3<f64>> {
        self.z.is_valid(index).then(|| {
            Vector3::new(self.x.values[index], self.y.values[index], self.z.values[index])
        })
    }

    /// Valid points with their flat pixel index, in ascending index order.
    pub fn indexed_points(&self) -> Vec<(usize, Vector3<f64>)> {
        (0..self.z.len())
            .filter_map(|i| self.point(i).map(|p| (i, p)))
            .collect()
    }

    pub fn points(&self) -> Vec<Vector3<f64>> {
        (0..self.z.len()).filter_map(|i| self.point(i)).collect()
    }
}

/// Which of the two slot intervals produced a stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyTag {
    High,
    Low,
}

impl FrequencyTag {
    pub fn as_str(self) -> &'static str {
        match self {
            FrequencyTag::High => "high",
            FrequencyTag::Low => "low",
        }
    }

    pub fn other(self) -> Self {
        match self {
            FrequencyTag::High => FrequencyTag::Low,
            FrequencyTag::Low => FrequencyTag::High,
        }
    }
}

impl fmt::Display for FrequencyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FrequencyTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(FrequencyTag::High),
            "low" => Ok(FrequencyTag::Low),
            other => Err(Error::Config(format!(
                "unknown frequency tag {other:?} (expected high or low)"
            ))),
        }
    }
}

/// Phase-shifted frames of one fringe frequency with their shift schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct FringeStack {
    pub frames: Vec<ScalarMap>,
    /// Phase shift of each frame in radians.
    pub shifts: Vec<f64>,
    pub frequency: FrequencyTag,
    /// Fringe wavelength at the reference distance, millimeters.
    pub wavelength_hint_mm: Option<f64>,
}

impl FringeStack {
    /// Assembles a stack. When all frames share dimensions their masks are
    /// replaced by the intersection of every frame's mask; otherwise the frames
    /// are kept as given and [`validate_stack`] reports the mismatch.
    pub fn new(mut frames: Vec<ScalarMap>, shifts: Vec<f64>, frequency: FrequencyTag) -> Self {
        if let Some(first) = frames.first() {
            let dims = first.dims();
            if frames.iter().all(|f| f.dims() == dims) {
                let mut shared = vec![true; first.len()];
                for frame in &frames {
                    for (s, &m) in shared.iter_mut().zip(frame.mask()) {
                        *s &= m;
                    }
                }
                for frame in &mut frames {
                    frame.mask.clone_from(&shared);
                }
            }
        }
        Self {
            frames,
            shifts,
            frequency,
            wavelength_hint_mm: None,
        }
    }

    pub fn with_wavelength_hint(mut self, wavelength_mm: f64) -> Self {
        self.wavelength_hint_mm = Some(wavelength_mm);
        self
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames.first().map(ScalarMap::dims).unwrap_or((0, 0))
    }

    /// Shared validity mask (that of the first frame).
    pub fn mask(&self) -> &[bool] {
        self.frames.first().map(ScalarMap::mask).unwrap_or(&[])
    }

    pub(crate) fn ensure_valid(&self) -> Result<()> {
        let report = validate_stack(self);
        if report.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidStack(report))
        }
    }

    /// `(Σ I_k, Σ I_k sin δ_k, Σ I_k cos δ_k)` at one pixel, summed in ascending k.
    pub(crate) fn pixel_sums(&self, trig: &[(f64, f64)], index: usize) -> (f64, f64, f64) {
        let mut sum = 0.0;
        let mut sin_sum = 0.0;
        let mut cos_sum = 0.0;
        for (frame, &(s, c)) in self.frames.iter().zip(trig) {
            let i = frame.values[index];
            sum += i;
            sin_sum += i * s;
            cos_sum += i * c;
        }
        (sum, sin_sum, cos_sum)
    }

    pub(crate) fn shift_trig(&self) -> Vec<(f64, f64)> {
        self.shifts.iter().map(|d| d.sin_cos()).collect()
    }
}

/// Lists every violated stack invariant; an empty list means the stack is valid.
pub fn validate_stack(stack: &FringeStack) -> Vec<String> {
    let mut report = Vec::new();
    let n = stack.frames.len();
    if n < 3 {
        report.push(format!("N >= 3 required for least-squares phase retrieval, got {n} frames"));
    }
    if stack.shifts.len() != n {
        report.push(format!(
            "frame count {n} differs from shift count {}",
            stack.shifts.len()
        ));
    }
    if let Some(first) = stack.frames.first() {
        if stack.frames.iter().any(|f| f.dims() != first.dims()) {
            report.push("frames must share dimensions".to_owned());
        } else if stack.frames.iter().any(|f| f.mask != first.mask) {
            report.push("frames must share one mask".to_owned());
        }
    }
    if stack.shifts.iter().any(|d| !d.is_finite() || *d < 0.0 || *d >= TAU) {
        report.push("shifts must lie within [0, 2π)".to_owned());
    }
    if stack.shifts.windows(2).any(|w| w[1] <= w[0]) {
        report.push("shifts must be strictly increasing".to_owned());
    }
    report
}

/// Average intensity I′ and modulation I″ of a stack.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureModulation {
    pub average: ScalarMap,
    pub modulation: ScalarMap,
}

impl TextureModulation {
    /// Valid pixels whose modulation exceeds the average, which cannot happen
    /// for unclipped sinusoidal intensities and therefore indicates saturation.
    pub fn saturated_pixels(&self) -> Vec<usize> {
        self.average
            .valid()
            .filter(|&(i, avg)| self.modulation.values[i] > avg)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn texture_and_modulation(stack: &FringeStack) -> Result<TextureModulation> {
    stack.ensure_valid()?;
    let (width, height) = stack.dims();
    let n = stack.len() as f64;
    let trig = stack.shift_trig();
    let mask = stack.mask();
    let cells: Vec<Option<(f64, f64)>> = (0..width * height)
        .into_par_iter()
        .map(|i| {
            if !mask[i] {
                return None;
            }
            let (sum, s, c) = stack.pixel_sums(&trig, i);
            Some((sum / n, 2.0 / n * s.hypot(c)))
        })
        .collect();
    let average = ScalarMap::from_options(width, height, cells.iter().map(|c| c.map(|p| p.0)).collect());
    let modulation = ScalarMap::from_options(width, height, cells.iter().map(|c| c.map(|p| p.1)).collect());
    Ok(TextureModulation {
        average,
        modulation,
    })
}
