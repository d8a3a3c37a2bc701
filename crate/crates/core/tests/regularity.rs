//! Scaling behaviour of the regularity statistics on the two reference
//! fields: stable normalised moments for the smooth bump, a growing
//! inverse-Jacobian sup for the deterministic counterexample, and a
//! noise-stabilised one under Brownian forcing.

mod common;

use common::loglog_slope;
use stochastic_transport::fields::{CounterexampleField, GaussianBumpField};
use stochastic_transport::flow::{FlowOptions, Noise};
use stochastic_transport::stats::{holder_jacobian_diff, jacobian_inverse_sup, jacobian_sup_moment, pair_moment, McOptions};

fn mc(n_samples: usize) -> McOptions {
    McOptions {
        n_samples,
        ..McOptions::default()
    }
}

fn spread(v: &[f64]) -> f64 {
    let hi = v.iter().cloned().fold(f64::MIN, f64::max);
    let lo = v.iter().cloned().fold(f64::MAX, f64::min);
    hi / lo
}

#[test]
fn smooth_pair_moment_ratio_is_scale_stable() {
    let b = GaussianBumpField::standard(2);
    let ratios: Vec<f64> = [0.1, 0.05, 0.025]
        .iter()
        .map(|s| pair_moment(&b, &[0.0, 0.0], &[*s, 0.0], 2.0, &mc(1000)).unwrap().ratio.unwrap())
        .collect();
    assert!(spread(&ratios) <= 2.0, "{ratios:?}");
}

#[test]
fn smooth_jacobian_difference_is_lipschitz_scale_stable() {
    let b = GaussianBumpField::standard(2);
    let values: Vec<f64> = [0.1, 0.05, 0.025]
        .iter()
        .map(|s| holder_jacobian_diff(&b, &[0.0, 0.0], &[*s, 0.0], 2.0, 1.0, &mc(500)).unwrap().value)
        .collect();
    assert!(spread(&values) <= 2.0, "{values:?}");
}

fn column(x: f64) -> Vec<Vec<f64>> {
    [0.5, 1.0, 1.5].iter().map(|y| vec![x, *y]).collect()
}

#[test]
fn deterministic_inverse_jacobian_grows_like_a_power() {
    let b = CounterexampleField;
    let noise = Noise::deterministic(1.0, 1000).unwrap();
    let eps = [1e-4, 1e-5, 1e-6, 1e-7];
    let sups: Vec<f64> = eps
        .iter()
        .map(|e| jacobian_inverse_sup(&b, &column(*e), &[1.0], &noise, &FlowOptions::default()).unwrap())
        .collect();
    assert!(sups.windows(2).all(|w| w[1] > w[0]), "{sups:?}");
    let slope = loglog_slope(&eps, &sups);
    assert!((slope + 0.25).abs() <= 0.1, "slope {slope}");
}

fn geometric_column(eps_min: f64) -> Vec<Vec<f64>> {
    let decades = (-eps_min.log10()).round() as i32;
    (0..=decades)
        .flat_map(|k| column(10f64.powi(-k)))
        .collect()
}

#[test]
fn noisy_inverse_jacobian_moment_is_stable_near_the_singularity() {
    let b = CounterexampleField;
    let opts = mc(1000);
    let coarse = jacobian_sup_moment(&b, &geometric_column(1e-3), &[0.5, 1.0], 1.0, &opts).unwrap();
    let fine = jacobian_sup_moment(&b, &geometric_column(1e-4), &[0.5, 1.0], 1.0, &opts).unwrap();
    let rel = (fine.value - coarse.value).abs() / coarse.value;
    assert!(rel <= 0.1, "{} vs {}", coarse.value, fine.value);
    assert_eq!(fine.excluded, 0);
}
