//! Two-frequency temporal phase unwrapping.

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::phase::WrappedPhaseMap;
use crate::raster::ScalarMap;

/// Beat wavelength λ_h·λ_l / (λ_l − λ_h).
pub fn equivalent_wavelength(lambda_high: f64, lambda_low: f64) -> Result<f64> {
    if !(lambda_high > 0.0 && lambda_low > lambda_high) {
        return Err(Error::Domain(format!(
            "equivalent wavelength needs 0 < λ_h < λ_l, got λ_h = {lambda_high}, λ_l = {lambda_low}"
        )));
    }
    Ok(lambda_high * lambda_low / (lambda_low - lambda_high))
}

/// Beat phase of one pixel, in [0, 2π).
pub fn pixel_equivalent_phase(phi_high: f64, phi_low: f64) -> f64 {
    let diff = phi_high - phi_low;
    let r = diff - TAU * (diff / TAU).floor();
    // Guard the rounding edge where the subtraction lands exactly on 2π.
    if r >= TAU {
        r - TAU
    } else {
        r
    }
}

pub fn equivalent_phase(high: &WrappedPhaseMap, low: &WrappedPhaseMap) -> Result<ScalarMap> {
    high.phase.ensure_same_dims(&low.phase)?;
    let (width, height) = high.phase.dims();
    let cells = (0..width * height)
        .into_par_iter()
        .map(|i| Some(pixel_equivalent_phase(high.phase.at(i)?, low.phase.at(i)?)))
        .collect();
    Ok(ScalarMap::from_options(width, height, cells))
}

/// Unclamped fringe order Round[((λ_eq/λ_h)·φ_eq − (φ_h + π)) / 2π], ties away from zero.
pub fn pixel_fringe_order(phi_high: f64, phi_eq: f64, ratio: f64) -> i64 {
    ((ratio * phi_eq - (phi_high + PI)) / TAU).round() as i64
}

/// Integer fringe orders with the wavelengths they were derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct FringeOrderMap {
    width: usize,
    height: usize,
    orders: Vec<Option<i64>>,
    /// Pixels whose raw order fell outside [0, K_max] and was clamped.
    clamped: Vec<bool>,
    pub lambda_high: f64,
    pub lambda_eq: f64,
}

impl FringeOrderMap {
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    pub fn at(&self, index: usize) -> Option<i64> {
        self.orders[index]
    }

    pub fn get(&self, u: usize, v: usize) -> Option<i64> {
        self.orders[v * self.width + u]
    }

    pub fn orders(&self) -> &[Option<i64>] {
        &self.orders
    }

    pub fn clamped(&self) -> &[bool] {
        &self.clamped
    }

    pub fn clamped_count(&self) -> usize {
        self.clamped.iter().filter(|&&c| c).count()
    }

    pub fn valid_count(&self) -> usize {
        self.orders.iter().flatten().count()
    }

    /// Largest order inside the designed range, ceil(λ_eq/λ_h) − 1.
    pub fn max_order(&self) -> i64 {
        max_order(self.lambda_eq / self.lambda_high)
    }
}

fn max_order(ratio: f64) -> i64 {
    // Tolerate ratios that are integers up to rounding noise.
    (ratio - 1e-9).ceil() as i64 - 1
}

pub fn fringe_order(
    high: &WrappedPhaseMap,
    phi_eq: &ScalarMap,
    lambda_high: f64,
    lambda_eq: f64,
) -> Result<FringeOrderMap> {
    high.phase.ensure_same_dims(phi_eq)?;
    if !(lambda_high > 0.0 && lambda_eq > lambda_high) {
        return Err(Error::Domain(format!(
            "fringe order needs 0 < λ_h < λ_eq, got λ_h = {lambda_high}, λ_eq = {lambda_eq}"
        )));
    }
    let ratio = lambda_eq / lambda_high;
    let k_max = max_order(ratio);
    let (width, height) = high.phase.dims();
    let cells: Vec<(Option<i64>, bool)> = (0..width * height)
        .into_par_iter()
        .map(|i| match (high.phase.at(i), phi_eq.at(i)) {
            (Some(h), Some(eq)) => {
                let raw = pixel_fringe_order(h, eq, ratio);
                let k = raw.clamp(0, k_max);
                (Some(k), k != raw)
            }
            _ => (None, false),
        })
        .collect();
    let (orders, clamped) = cells.into_iter().unzip();
    Ok(FringeOrderMap {
        width,
        height,
        orders,
        clamped,
        lambda_high,
        lambda_eq,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wavelengths {
    pub high: f64,
    pub low: f64,
    pub equivalent: f64,
}

/// Continuous phase Φ = φ_h + 2πK.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsolutePhaseMap {
    pub phase: ScalarMap,
    pub fringe_order: FringeOrderMap,
    pub wavelengths: Wavelengths,
}

pub fn unwrap_phase(high: &WrappedPhaseMap, orders: &FringeOrderMap) -> Result<AbsolutePhaseMap> {
    let (width, height) = high.phase.dims();
    if orders.dims() != (width, height) {
        return Err(Error::DimensionMismatch {
            expected: (width, height),
            found: orders.dims(),
        });
    }
    let cells = (0..width * height)
        .into_par_iter()
        .map(|i| Some(high.phase.at(i)? + TAU * orders.at(i)? as f64))
        .collect();
    let (lh, leq) = (orders.lambda_high, orders.lambda_eq);
    Ok(AbsolutePhaseMap {
        phase: ScalarMap::from_options(width, height, cells),
        fringe_order: orders.clone(),
        wavelengths: Wavelengths {
            high: lh,
            low: lh * leq / (leq - lh),
            equivalent: leq,
        },
    })
}

/// Full chain: beat phase, fringe order and absolute phase from the two wrapped maps.
pub fn unwrap_pair(
    high: &WrappedPhaseMap,
    low: &WrappedPhaseMap,
    lambda_high: f64,
    lambda_low: f64,
) -> Result<AbsolutePhaseMap> {
    let lambda_eq = equivalent_wavelength(lambda_high, lambda_low)?;
    let phi_eq = equivalent_phase(high, low)?;
    let orders = fringe_order(high, &phi_eq, lambda_high, lambda_eq)?;
    unwrap_phase(high, &orders)
}
