use jointinv::basis::{synthesize, Grid, ScalarField, SpectralCoeffs};
use jointinv::rng::stream;
use jointinv::synth::{corrupt, NoiseKind};
use proptest::prelude::*;

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[test]
fn additive_noise_is_scaled_by_rms() {
    let n = 40_000;
    let clean: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 3.0 } else { -3.0 }).collect();
    let mut noisy = clean.clone();
    corrupt(&mut noisy, NoiseKind::Additive, 0.05, &mut stream(9, 0));
    let z: Vec<f64> = noisy.iter().zip(&clean).map(|(a, b)| (a - b) / (0.05 * 3.0)).collect();
    let (mean, sd) = moments(&z);
    assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
    assert!((sd - 1.0).abs() < 0.02, "sd {sd}");
}

#[test]
fn multiplicative_noise_is_relative() {
    let n = 40_000;
    let clean: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64).collect();
    let mut noisy = clean.clone();
    corrupt(&mut noisy, NoiseKind::Multiplicative, 0.1, &mut stream(9, 1));
    let z: Vec<f64> = noisy.iter().zip(&clean).map(|(a, b)| (a / b - 1.0) / 0.1).collect();
    let (mean, sd) = moments(&z);
    assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
    assert!((sd - 1.0).abs() < 0.02, "sd {sd}");
}

#[test]
fn zero_stays_zero_under_multiplicative_noise() {
    let mut v = vec![0.0; 100];
    corrupt(&mut v, NoiseKind::Multiplicative, 0.2, &mut stream(1, 0));
    assert!(v.iter().all(|x| *x == 0.0));
}

#[test]
fn restriction_injects_nodes() {
    let f = |x: f64, y: f64| (3.0 * x).sin() + y * y;
    for (fine, coarse) in [(Grid::unit(24), Grid::unit(8)), (Grid::lowered(24), Grid::lowered(12))] {
        let r = ScalarField::from_fn(fine, f).restrict(&coarse).unwrap();
        assert_eq!(r, ScalarField::from_fn(coarse, f));
    }
    assert!(ScalarField::constant(Grid::unit(24), 1.0).restrict(&Grid::unit(7)).is_err());
    assert!(ScalarField::constant(Grid::unit(24), 1.0).restrict(&Grid::lowered(8)).is_err());
}

proptest! {
    #[test]
    fn synthesis_commutes_with_restriction(seed in 0u64..1000, r in 2usize..4) {
        use rand::Rng as _;
        let k = 3;
        let mut rng = stream(seed, 0);
        let c = SpectralCoeffs::from_vec(k, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let coarse = Grid::unit(12);
        let fine = Grid::unit(12 * r);
        let a = synthesize(&c, &fine).restrict(&coarse).unwrap();
        let b = synthesize(&c, &coarse);
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}
