// End-to-end runs through the public API only.

use zoomstab::analysis::{self, DiagnosticConfig, Verdict};
use zoomstab::closed_loop::{LoopConfig, LoopMode, LoopPlan, MultiSensorPolicy};
use zoomstab::decomposition::{build_block_decomposition, sufficient_rate, sufficient_rate_worst_case};
use zoomstab::system::{LinearSystem, Sensor};
use zoomstab::{Complex64, Matrix};

fn scalar(lam: f64) -> LinearSystem {
    LinearSystem::new(
        Matrix::from_element(1, 1, lam),
        Matrix::from_element(1, 1, 1.0),
        vec![Sensor::new(Matrix::from_element(1, 1, 1.0))],
    )
    .unwrap()
}

fn two_sensor(a: &[f64]) -> LinearSystem {
    LinearSystem::new(
        Matrix::from_row_slice(2, 2, a),
        Matrix::identity(2, 2),
        vec![
            Sensor::new(Matrix::from_row_slice(1, 2, &[1.0, 0.0])),
            Sensor::new(Matrix::from_row_slice(1, 2, &[0.0, 1.0])),
        ],
    )
    .unwrap()
}

#[test]
fn scalar_loop_is_bounded_and_open_loop_is_not() {
    let sys = scalar(2.0);
    let cfg = LoopConfig::new(600);
    let diag = DiagnosticConfig::default();

    let plan = LoopPlan::new(&sys, &cfg).unwrap();
    let runs = plan.run_trials(11, 120);
    assert!(runs.iter().all(|r| r.aborted.is_none()));
    let m = analysis::moment_diagnostic(&runs, &diag);
    assert_eq!(m.verdict, Verdict::Bounded, "{:?}", m.overall);

    let open = LoopPlan::new(&sys, &LoopConfig { open_loop: true, ..cfg }).unwrap();
    let m = analysis::moment_diagnostic(&open.run_trials(11, 120), &diag);
    assert_eq!(m.verdict, Verdict::Diverging);
}

#[test]
fn trials_do_not_depend_on_the_batch_size() {
    let plan = LoopPlan::new(&scalar(1.7), &LoopConfig::new(150)).unwrap();
    let few = plan.run_trials(5, 3);
    let many = plan.run_trials(5, 40);
    assert_eq!(few[..], many[..3]);
}

#[test]
fn rate_audit_matches_the_alphabet() {
    let plan = LoopPlan::new(&scalar(2.0), &LoopConfig::new(100)).unwrap();
    let r = plan.run_trial(2, 0);
    let audit = r.audit();
    let k = r.ks[0] as f64;
    // one symbol from a K+1 alphabet per stage, no feedback bits for one sensor
    let expected = (k + 1.0).log2() + audit.feedback_bits / audit.periods as f64;
    assert!((audit.bits_per_period - expected).abs() < 1e-12, "{audit:?}");
    assert!(audit.bits_per_period >= analysis::min_rate(&[Complex64::new(2.0, 0.0)]));
}

#[test]
fn uncoupled_two_sensor_system_reaches_the_minimum_rate() {
    let sys = two_sensor(&[3.0, 0.0, 0.0, 2.0]);
    let d = build_block_decomposition(&sys, &[0, 1]).unwrap();
    assert!(!d.coupled(0, 1) && !d.coupled(1, 0));
    let min = analysis::min_rate(&d.spectrum());
    assert!((min - 6f64.log2()).abs() < 1e-9);
    assert!((sufficient_rate(&d) - min).abs() < 1e-9);
    assert!((sufficient_rate_worst_case(&d) - 2.0 * 3f64.log2()).abs() < 1e-9);
}

#[test]
fn coupled_two_sensor_loop_stays_bounded() {
    let sys = two_sensor(&[3.0, 0.0, 1.0, 2.0]);
    let cfg = LoopConfig {
        mode: LoopMode::MultiSensor(MultiSensorPolicy::BlockTriangular { order: Some(vec![0, 1]) }),
        noise_margin: Some(4.0),
        ..LoopConfig::new(300)
    };
    let plan = LoopPlan::new(&sys, &cfg).unwrap();
    let runs = plan.run_trials(7, 120);
    assert!(runs.iter().all(|r| r.aborted.is_none()));
    let m = analysis::moment_diagnostic(&runs, &DiagnosticConfig::default());
    assert_eq!(m.verdict, Verdict::Bounded, "{:?}", m.per_coordinate);
}

#[test]
fn gaussian_bound_is_not_beaten_by_sampling() {
    let sigma = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let delta = [3.0, 2.5];
    let bound = analysis::gaussian_tail_bound(&sigma, &delta).unwrap();
    let mc = analysis::gaussian_tail_mc(&sigma, &delta, 100_000, 4).unwrap();
    assert!(bound >= mc.p - 4.0 * mc.se, "bound {bound} vs {mc:?}");
}
