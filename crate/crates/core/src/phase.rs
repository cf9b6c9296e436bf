//! N-step least-squares phase retrieval.

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{FrequencyTag, FringeStack, ScalarMap};

/// Uniform phase-shift schedule δ_k = 2πk/N.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseShiftSchedule {
    shifts: Vec<f64>,
}

impl PhaseShiftSchedule {
    pub fn n(&self) -> usize {
        self.shifts.len()
    }

    pub fn shifts(&self) -> &[f64] {
        &self.shifts
    }

    pub fn into_shifts(self) -> Vec<f64> {
        self.shifts
    }
}

pub fn phase_shifts(n: usize) -> Result<PhaseShiftSchedule> {
    if n < 3 {
        return Err(Error::Domain(format!(
            "phase shifting needs N >= 3 steps, got {n}"
        )));
    }
    let shifts = (0..n).map(|k| TAU * k as f64 / n as f64).collect();
    Ok(PhaseShiftSchedule { shifts })
}

/// Wraps an angle into (−π, π].
pub fn wrap_to_pi(angle: f64) -> f64 {
    let r = angle.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Least-squares phase of one pixel's samples, wrapped into (−π, π].
pub fn pixel_phase(intensities: &[f64], shifts: &[f64]) -> f64 {
    let (s, c) = intensities
        .iter()
        .zip(shifts)
        .fold((0.0, 0.0), |(s, c), (&i, &d)| (s + i * d.sin(), c + i * d.cos()));
    standardize(-s.atan2(c))
}

fn standardize(phi: f64) -> f64 {
    if phi <= -PI {
        phi + TAU
    } else {
        phi
    }
}

/// Wrapped phase in (−π, π] for one fringe frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct WrappedPhaseMap {
    pub phase: ScalarMap,
    pub frequency: FrequencyTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseOptions {
    /// Pixels whose modulation I″ does not exceed this fraction of the stack's
    /// peak average intensity are masked.
    pub modulation_threshold: f64,
    /// Relative floor on the shift-weighted sums below which the phase is undefined.
    pub numeric_epsilon: f64,
}

impl Default for PhaseOptions {
    fn default() -> Self {
        Self {
            modulation_threshold: 0.02,
            numeric_epsilon: 1e-12,
        }
    }
}

pub fn wrapped_phase(stack: &FringeStack) -> Result<WrappedPhaseMap> {
    wrapped_phase_with(stack, &PhaseOptions::default())
}

/// φ = −atan2(Σ I_k sin δ_k, Σ I_k cos δ_k), wrapped into (−π, π].
pub fn wrapped_phase_with(stack: &FringeStack, options: &PhaseOptions) -> Result<WrappedPhaseMap> {
    stack.ensure_valid()?;
    let (width, height) = stack.dims();
    let n = stack.len() as f64;
    let trig = stack.shift_trig();
    let mask = stack.mask();

    let sums: Vec<Option<(f64, f64, f64)>> = (0..width * height)
        .into_par_iter()
        .map(|i| mask[i].then(|| stack.pixel_sums(&trig, i)))
        .collect();

    // Fixed-order max keeps the threshold independent of scheduling.
    let peak_average = sums
        .iter()
        .flatten()
        .map(|&(sum, _, _)| sum / n)
        .fold(0.0_f64, f64::max);
    let modulation_floor = options.modulation_threshold * peak_average;
    let numeric_floor = options.numeric_epsilon * n * peak_average.max(f64::MIN_POSITIVE);

    let cells = sums
        .into_par_iter()
        .map(|cell| {
            let (_, s, c) = cell?;
            let modulation = 2.0 / n * s.hypot(c);
            if modulation <= modulation_floor || (s.abs() < numeric_floor && c.abs() < numeric_floor) {
                return None;
            }
            Some(standardize(-s.atan2(c)))
        })
        .collect();

    Ok(WrappedPhaseMap {
        phase: ScalarMap::from_options(width, height, cells),
        frequency: stack.frequency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stack_from_fn(n: usize, width: usize, f: impl Fn(usize, f64) -> f64) -> FringeStack {
        let shifts = phase_shifts(n).unwrap().into_shifts();
        let frames = shifts
            .iter()
            .map(|&d| ScalarMap::from_values(width, 1, (0..width).map(|i| f(i, d)).collect()).unwrap())
            .collect();
        FringeStack::new(frames, shifts, FrequencyTag::High)
    }

    fn angle_diff(a: f64, b: f64) -> f64 {
        wrap_to_pi(a - b).abs()
    }

    #[test]
    fn schedule_values() {
        let s4 = phase_shifts(4).unwrap();
        let expected = [0.0, PI / 2.0, PI, 3.0 * PI / 2.0];
        for (a, b) in s4.shifts().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let s25 = phase_shifts(25).unwrap();
        assert_eq!(s25.n(), 25);
        assert!((s25.shifts()[24] - 48.0 * PI / 25.0).abs() < 1e-14);
        for w in s25.shifts().windows(2) {
            assert!((w[1] - w[0] - TAU / 25.0).abs() < 1e-14);
        }
        assert_eq!(phase_shifts(2).unwrap_err().kind(), "DomainError");
    }

    #[test]
    fn wrap_interval_is_half_open() {
        assert_eq!(wrap_to_pi(-PI), PI);
        assert_eq!(wrap_to_pi(PI), PI);
        assert!((wrap_to_pi(3.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn recovers_negated_phase() {
        let phi0 = PI / 3.0;
        let stack = stack_from_fn(25, 4, |_, d| 0.5 + 0.5 * (phi0 - d).cos());
        let wrapped = wrapped_phase(&stack).unwrap();
        for v in wrapped.phase.valid_values() {
            assert!((v + phi0).abs() < 1e-10, "{v}");
        }
    }

    #[test]
    fn minus_pi_maps_to_plus_pi() {
        let stack = stack_from_fn(4, 1, |_, d| 1.0 + (PI - d).cos());
        let v = wrapped_phase(&stack).unwrap().phase.at(0).unwrap();
        assert!((v - PI).abs() < 1e-12 && v > 0.0);
    }

    #[test]
    fn constant_frames_are_masked() {
        let stack = stack_from_fn(25, 3, |_, _| 0.4);
        assert_eq!(wrapped_phase(&stack).unwrap().phase.valid_count(), 0);
    }

    #[test]
    fn low_modulation_pixels_masked() {
        // Pixel 1 has 1% modulation relative to the 0.5 peak average.
        let stack = stack_from_fn(12, 2, |i, d| {
            let amp = if i == 0 { 0.4 } else { 0.005 };
            0.5 + amp * (1.0 - d).cos()
        });
        let wrapped = wrapped_phase(&stack).unwrap();
        assert!(wrapped.phase.is_valid(0));
        assert!(!wrapped.phase.is_valid(1));
        let lax = PhaseOptions {
            modulation_threshold: 0.0,
            ..PhaseOptions::default()
        };
        assert!(wrapped_phase_with(&stack, &lax).unwrap().phase.is_valid(1));
    }

    /// Independent route: least-squares fit of I = B + C cos δ + S sin δ via
    /// the normal equations; the estimator's phase is −atan2(S, C).
    fn normal_equation_phase(intensities: &[f64], shifts: &[f64]) -> f64 {
        let n = shifts.len();
        let design = DMatrix::from_fn(n, 3, |r, c| match c {
            0 => 1.0,
            1 => shifts[r].cos(),
            _ => shifts[r].sin(),
        });
        let y = DVector::from_column_slice(intensities);
        let normal = design.transpose() * &design;
        let rhs = design.transpose() * y;
        let sol = normal.lu().solve(&rhs).unwrap();
        -sol[2].atan2(sol[1])
    }

    #[test]
    fn matches_normal_equation_fit_on_random_stacks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &n in &[3usize, 5, 25] {
            let width = 200;
            let data: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..width).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            let shifts = phase_shifts(n).unwrap().into_shifts();
            let frames = data
                .iter()
                .map(|row| ScalarMap::from_values(width, 1, row.clone()).unwrap())
                .collect();
            let stack = FringeStack::new(frames, shifts.clone(), FrequencyTag::Low);
            let opts = PhaseOptions {
                modulation_threshold: 0.0,
                ..PhaseOptions::default()
            };
            let wrapped = wrapped_phase_with(&stack, &opts).unwrap();
            for (i, phi) in wrapped.phase.valid() {
                let samples: Vec<f64> = data.iter().map(|row| row[i]).collect();
                let oracle = normal_equation_phase(&samples, &shifts);
                assert!(angle_diff(phi, oracle) < 1e-8, "N={n} pixel {i}: {phi} vs {oracle}");
            }
        }
    }

    #[test]
    fn amplitude_and_offset_invariance() {
        let base = stack_from_fn(9, 50, |i, d| 0.3 + 0.2 * (0.13 * i as f64 - d).cos() + 0.01 * (i as f64 * d).sin());
        let reference = wrapped_phase(&base).unwrap();
        for (scale, offset) in [(3.7, 0.0), (0.01, 0.0), (1.0, 5.0), (2.0, 0.25)] {
            let mut alt = base.clone();
            for frame in &mut alt.frames {
                *frame = frame.map(|v| scale * v + offset);
            }
            let opts = PhaseOptions {
                modulation_threshold: 0.0,
                ..PhaseOptions::default()
            };
            let got = wrapped_phase_with(&alt, &opts).unwrap();
            for (i, phi) in reference.phase.valid() {
                assert!(angle_diff(got.phase.at(i).unwrap(), phi) < 1e-12);
            }
        }
    }

    #[test]
    fn cyclic_relabeling_with_shifts_is_invariant() {
        let shifts = phase_shifts(7).unwrap().into_shifts();
        let samples: Vec<f64> = shifts.iter().map(|d| 0.5 + 0.4 * (2.1 - d).cos() + 0.02 * (3.0 * d).cos()).collect();
        let reference = pixel_phase(&samples, &shifts);
        let mut rotated_samples = samples.clone();
        let mut rotated_shifts = shifts.clone();
        for _ in 0..7 {
            rotated_samples.rotate_left(1);
            rotated_shifts.rotate_left(1);
            let got = pixel_phase(&rotated_samples, &rotated_shifts);
            assert!(angle_diff(got, reference) < 1e-12);
        }
    }
}
