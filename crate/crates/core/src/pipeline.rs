//! End-to-end helpers shared by the CLI and the test suites.

use crate::calib::CalibPose;
use crate::error::Result;
use crate::phase::{wrapped_phase_with, PhaseOptions, WrappedPhaseMap};
use crate::raster::{FringeStack, PointMap};
use crate::sim::{render_pair, CameraModel, CylindricalProjector, GroundTruth, RenderConfig, SceneSurface};
use crate::unwrap::{unwrap_pair, AbsolutePhaseMap};

/// Wavelengths used for unwrapping. Only their ratio enters the fringe order,
/// so slot intervals in degrees serve directly.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UnwrapWavelengths {
    pub lambda_high: f64,
    pub lambda_low: f64,
}

impl UnwrapWavelengths {
    pub fn from_projector(projector: &CylindricalProjector) -> Self {
        Self {
            lambda_high: projector.theta_h_deg,
            lambda_low: projector.theta_l_deg,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseProducts {
    pub wrapped_high: WrappedPhaseMap,
    pub wrapped_low: WrappedPhaseMap,
    pub absolute: AbsolutePhaseMap,
}

pub fn absolute_phase(
    high: &FringeStack,
    low: &FringeStack,
    options: &PhaseOptions,
    wavelengths: UnwrapWavelengths,
) -> Result<PhaseProducts> {
    let wrapped_high = wrapped_phase_with(high, options)?;
    let wrapped_low = wrapped_phase_with(low, options)?;
    let absolute = unwrap_pair(&wrapped_high, &wrapped_low, wavelengths.lambda_high, wavelengths.lambda_low)?;
    Ok(PhaseProducts {
        wrapped_high,
        wrapped_low,
        absolute,
    })
}

#[derive(Debug, Clone)]
pub struct SimulationSetup<'a> {
    pub projector: &'a CylindricalProjector,
    pub camera: &'a CameraModel,
    pub render: &'a RenderConfig,
    pub phase: &'a PhaseOptions,
}

/// Renders both frequencies of a scene and unwraps them.
pub fn simulate_absolute_phase(
    setup: &SimulationSetup<'_>,
    scene: &SceneSurface,
    seed: u64,
) -> Result<(PhaseProducts, GroundTruth)> {
    let (high, low) = render_pair(scene, setup.projector, setup.camera, setup.render, seed)?;
    let products = absolute_phase(
        &high.stack,
        &low.stack,
        setup.phase,
        UnwrapWavelengths::from_projector(setup.projector),
    )?;
    Ok((products, high.truth))
}

/// Calibration pose from a simulated scene, referenced to simulator ground truth.
pub fn simulated_pose(
    setup: &SimulationSetup<'_>,
    id: &str,
    scene: &SceneSurface,
    seed: u64,
) -> Result<CalibPose> {
    let (products, truth) = simulate_absolute_phase(setup, scene, seed)?;
    let phase = products.absolute.phase;
    let GroundTruth { points, .. } = truth;
    let mut reference = points;
    for map in [&mut reference.x, &mut reference.y, &mut reference.z] {
        map.restrict(phase.mask());
    }
    let reference = PointMap::new(reference.x, reference.y, reference.z)?;
    CalibPose::new(id, phase, reference)
}
