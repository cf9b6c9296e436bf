use num::bigint::BigInt;
use num::rational::BigRational;
use num::{ToPrimitive, Zero};

use fringeforge::phase::wrapped_phase;
use fringeforge::raster::{texture_and_modulation, FrequencyTag, FringeStack, ScalarMap};
use fringeforge::sim::{render_fringe_stack, CameraModel, CylindricalProjector, Fidelity, RenderConfig, SceneSurface};

fn exact(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite sample")
}

#[test]
fn slot_stack_modulation_matches_exact_accumulation() {
    let camera = CameraModel::default().scaled(40, 32);
    let config = RenderConfig {
        fidelity: Fidelity::SlotTransmission,
        ..RenderConfig::default()
    };
    let scene = SceneSurface::fronto_parallel(600.0);
    let rendered = render_fringe_stack(
        &scene,
        &CylindricalProjector::default(),
        &camera,
        FrequencyTag::High,
        &config,
        1,
    )
    .unwrap();
    let stack = &rendered.stack;
    let tm = texture_and_modulation(stack).unwrap();
    let trig: Vec<(BigRational, BigRational)> =
        stack.shifts.iter().map(|d| (exact(d.sin()), exact(d.cos()))).collect();
    let n = BigRational::from_integer(BigInt::from(stack.len()));
    let mut checked = 0;
    for (i, modulation) in tm.modulation.valid() {
        let (mut s, mut c, mut sum) = (BigRational::zero(), BigRational::zero(), BigRational::zero());
        for (frame, (sin, cos)) in stack.frames.iter().zip(&trig) {
            let v = exact(frame.at(i).unwrap());
            s += &v * sin;
            c += &v * cos;
            sum += v;
        }
        let average = (sum / &n).to_f64().unwrap();
        let power = ((&s * &s + &c * &c) / (&n * &n)).to_f64().unwrap();
        let oracle = 2.0 * power.sqrt();
        assert!(oracle > 0.0);
        assert!((modulation - oracle).abs() <= 1e-12 * oracle, "pixel {i}: {modulation} vs {oracle}");
        assert!((tm.average.at(i).unwrap() - average).abs() <= 1e-12 * average);
        checked += 1;
    }
    assert_eq!(checked, 40 * 32);
}

#[test]
fn masked_values_never_reach_reductions() {
    let (w, h, n) = (5, 4, 7);
    let shifts: Vec<f64> = (0..n).map(|k| std::f64::consts::TAU * k as f64 / n as f64).collect();
    let masked = [3usize, 11, 19];
    let build = |poison: f64| {
        let frames = shifts
            .iter()
            .map(|d| {
                let values: Vec<f64> = (0..w * h)
                    .map(|i| if masked.contains(&i) { poison } else { 0.5 + 0.2 * (0.1 * i as f64 - d).cos() })
                    .collect();
                let mask = (0..w * h).map(|i| !masked.contains(&i)).collect();
                ScalarMap::new(w, h, values, mask).unwrap()
            })
            .collect();
        FringeStack::new(frames, shifts.clone(), FrequencyTag::High)
    };
    let (clean, poisoned) = (build(0.0), build(f64::NAN));
    let (a, b) = (texture_and_modulation(&clean).unwrap(), texture_and_modulation(&poisoned).unwrap());
    let (pa, pb) = (wrapped_phase(&clean).unwrap(), wrapped_phase(&poisoned).unwrap());
    for (x, y) in [(&a.average, &b.average), (&a.modulation, &b.modulation), (&pa.phase, &pb.phase)] {
        assert_eq!(x.mask(), y.mask());
        let xs: Vec<f64> = x.valid_values().collect();
        let ys: Vec<f64> = y.valid_values().collect();
        assert_eq!(xs, ys);
        assert!(ys.iter().all(|v| v.is_finite()));
        assert_eq!(xs.len(), w * h - masked.len());
    }
}
