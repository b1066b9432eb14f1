use ionop::ionic::{
    integrate, solve, FhnParams, HhParams, IonicModel, ModelId, SolverOptions, StimulusProtocol,
};

const N: usize = 256;

fn max_v(model: &IonicModel, amplitude: f64, duration: f64) -> f64 {
    let traj = solve(model, &StimulusProtocol::new(amplitude, duration), N, &SolverOptions::default()).unwrap();
    traj.validate().unwrap();
    traj.channel(0).iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn hh_subthreshold_current_stays_quiet() {
    let hh = IonicModel::Hh(HhParams::default());
    assert!(max_v(&hh, 1.0, 100.0) < 40.0);
}

#[test]
fn hh_suprathreshold_current_fires() {
    let hh = IonicModel::Hh(HhParams::default());
    assert!(max_v(&hh, 10.0, 100.0) > 80.0);
}

#[test]
fn hh_rest_state_is_nearly_stationary() {
    let hh = IonicModel::Hh(HhParams::default());
    let traj = solve(&hh, &StimulusProtocol::new(0.0, 0.0), N, &SolverOptions::default()).unwrap();
    for j in 0..4 {
        let ch = traj.channel(j);
        let drift = ch.iter().map(|x| (x - ch[0]).abs()).fold(0.0, f64::max);
        let tol = if j == 0 { 0.1 } else { 1e-3 };
        assert!(drift < tol, "channel {j} drifts by {drift}");
    }
}

#[test]
fn fhn_equilibrium_persists() {
    let fhn = IonicModel::Fhn(FhnParams::default());
    let traj = solve(&fhn, &StimulusProtocol::new(0.0, 0.0), N, &SolverOptions::default()).unwrap();
    assert!(traj.values.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn fhn_strong_current_excites() {
    let fhn = IonicModel::Fhn(FhnParams::default());
    assert!(max_v(&fhn, 1.0, 100.0) > 0.8);
}

#[test]
fn gating_variables_stay_in_unit_interval() {
    let hh = IonicModel::Hh(HhParams::default());
    for amp in [0.0, 2.0, 5.0, 15.0] {
        let traj = solve(&hh, &StimulusProtocol::new(amp, 60.0), N, &SolverOptions::default()).unwrap();
        for j in 1..4 {
            assert!(traj.channel(j).iter().all(|g| (0.0..=1.0).contains(g)));
        }
    }
}

#[test]
fn damped_rotation_matches_closed_form() {
    let (a, w) = (0.3, 2.0);
    let times: Vec<f64> = (0..=50).map(|k| k as f64 * 0.2).collect();
    let opts = SolverOptions::with_tolerances(1e-9, 1e-12);
    let (ys, _, _) = integrate(
        |_, y, dy| {
            dy[0] = -a * y[0] - w * y[1];
            dy[1] = w * y[0] - a * y[1];
        },
        &[1.0, 0.0],
        0.0,
        10.0,
        &times,
        &opts,
    )
    .unwrap();
    for (t, y) in times.iter().zip(&ys) {
        let r = (-a * t).exp();
        assert!((y[0] - r * (w * t).cos()).abs() < 1e-6, "t {t}");
        assert!((y[1] - r * (w * t).sin()).abs() < 1e-6, "t {t}");
    }
}

#[test]
fn stiff_decoupled_system_matches_closed_form() {
    let times = [0.0, 0.5, 1.0, 2.0];
    let opts = SolverOptions::with_tolerances(1e-8, 1e-12);
    let (ys, _, _) = integrate(
        |t, y, dy| {
            dy[0] = -1000.0 * (y[0] - t.cos());
            dy[1] = -0.5 * y[1];
        },
        &[1.0, 2.0],
        0.0,
        2.0,
        &times,
        &opts,
    )
    .unwrap();
    for (t, y) in times.iter().zip(&ys) {
        // Slow manifold of the fast component plus its exponentially small transient.
        let k = 1000.0f64;
        let slow = (k * k * t.cos() + k * t.sin()) / (k * k + 1.0);
        let fast = (1.0 - k * k / (k * k + 1.0)) * (-k * t).exp();
        assert!((y[0] - slow - fast).abs() < 1e-5, "t {t}");
        assert!((y[1] - 2.0 * (-0.5 * t).exp()).abs() < 1e-6, "t {t}");
    }
}

#[test]
fn ord_cannot_be_simulated() {
    assert!(IonicModel::default_for(ModelId::Ord).is_err());
}
