//! Closed-loop clock properties at desk scale.

use clockforge::clock::{adev_slope, extrapolation_range, run_clock, run_ensemble, ClockConfig, ServoConfig};
use clockforge::noise::NoiseSpec;
use clockforge::prior::{width_from_interrogation, NoiseExponent};
use clockforge::protocol::ProtocolSpec;

fn config(spec: ProtocolSpec, t_over_z: f64, cycles: usize, seed: u64) -> ClockConfig {
    let noise = NoiseSpec::for_coherence_time(NoiseExponent::Flicker, 1.0, 1.0).unwrap();
    let w = width_from_interrogation(t_over_z, NoiseExponent::Flicker).unwrap();
    let mut cfg = ClockConfig::new(spec, noise, t_over_z, cycles, w);
    cfg.seed = seed;
    cfg
}

#[test]
fn identical_configs_reproduce_bit_for_bit() {
    let mut cfg = config(ProtocolSpec::css(6), 0.2, 20_000, 5);
    cfg.keep_trace = true;
    let a = run_clock(&cfg).unwrap();
    let b = run_clock(&cfg).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.adev.sigmas, b.adev.sigmas);
    cfg.seed = 6;
    assert_ne!(run_clock(&cfg).unwrap().trace, a.trace);
}

#[test]
fn ensembles_do_not_depend_on_thread_count() {
    let cfg = config(ProtocolSpec::css(4), 0.2, 10_000, 8);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_ensemble(&cfg, 3).unwrap())
    };
    let a: Vec<_> = run(1).into_iter().map(|r| r.adev.sigmas).collect();
    let b: Vec<_> = run(2).into_iter().map(|r| r.adev.sigmas).collect();
    assert_eq!(a, b);
}

#[test]
fn locked_residuals_are_close_to_normal() {
    let r = run_clock(&config(ProtocolSpec::css(8), 0.2, 200_000, 11)).unwrap();
    assert!(!r.fringe_hop.detected);
    let (s, k) = (r.residual.skewness(), r.residual.excess_kurtosis());
    assert!(s.abs() < 0.2, "skewness {s}");
    assert!(k.abs() < 0.5, "excess kurtosis {k}");
}

#[test]
fn stabilized_adev_averages_down_as_white_noise() {
    let n = 2_000_000;
    let r = run_clock(&config(ProtocolSpec::css(8), 0.1, n, 12)).unwrap();
    // the range used for the unit-time extrapolation, past the servo memory
    let (lo, hi) = extrapolation_range(r.t_c, n, ServoConfig::default().memory_cycles());
    let k = adev_slope(&r.adev, lo, hi).unwrap();
    assert!((k + 0.5).abs() < 0.05, "slope {k}");
}

#[test]
fn both_servos_lock() {
    for servo in [ServoConfig::Integrator { gain: 0.5 }, ServoConfig::default()] {
        let mut cfg = config(ProtocolSpec::css(8), 0.2, 50_000, 13);
        cfg.servo = servo;
        let r = run_clock(&cfg).unwrap();
        assert!(!r.fringe_hop.detected, "{servo:?}");
        assert!(r.extrapolated.is_some());
    }
}

#[test]
fn ghz_loses_lock_at_long_interrogation() {
    let r = run_clock(&config(ProtocolSpec::ghz_parity(8), 0.3, 50_000, 14)).unwrap();
    assert!(r.fringe_hop.detected);
}
