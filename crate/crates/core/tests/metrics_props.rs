use ppboost::geometry::{CovariateStack, Lattice, PointPattern, QuadratureGrid, Window};
use ppboost::metrics::{fold_assignment, iae, kfold_eval, test_loglik_cells};
use ppboost::simulate::{sample_grf, sample_poisson, GrfSpec};
use ppboost::trainer::FitConfig;
use proptest::prelude::*;

fn fields(n: usize) -> impl Strategy<Value = [Vec<f64>; 3]> {
    let f = || prop::collection::vec(0.0..500.0f64, n * n);
    (f(), f(), f()).prop_map(|(a, b, c)| [a, b, c])
}

proptest! {
    #[test]
    fn iae_is_a_metric([a, b, c] in fields(6)) {
        let g = QuadratureGrid::new(Lattice::unit(6).unwrap());
        let ab = iae(&a, &b, &g).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(iae(&a, &a, &g).unwrap(), 0.0);
        prop_assert!((ab - iae(&b, &a, &g).unwrap()).abs() <= 1e-12 * ab.max(1.0));
        prop_assert!(ab <= iae(&a, &c, &g).unwrap() + iae(&c, &b, &g).unwrap() + 1e-9);
    }

    #[test]
    fn folds_partition_the_events(n in 0usize..200, folds in 1usize..10, seed in any::<u64>()) {
        let a = fold_assignment(n, folds, seed);
        prop_assert_eq!(a.len(), folds);
        let mut all: Vec<usize> = a.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let (lo, hi) = (a.iter().map(Vec::len).min().unwrap(), a.iter().map(Vec::len).max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert_eq!(a, fold_assignment(n, folds, seed));
    }
}

#[test]
fn true_intensity_beats_a_perturbed_one() {
    let g = QuadratureGrid::new(Lattice::unit(16).unwrap());
    let z = sample_grf(&GrfSpec::covariate(), &g, 1).unwrap();
    let lambda: Vec<f64> = z.iter().map(|v| 300.0 * v.exp()).collect();
    let noise = sample_grf(&GrfSpec::covariate(), &g, 2).unwrap();
    let perturbed: Vec<f64> = lambda
        .iter()
        .zip(&noise)
        .map(|(l, e)| l * (0.3 * e).exp())
        .collect();
    let reps = 100;
    let mut wins = 0;
    let mut diff = 0.0;
    for seed in 0..reps {
        let p = sample_poisson(&lambda, &g, 100 + seed).unwrap();
        let d = test_loglik_cells(&lambda, &p, &g, 1.0).unwrap()
            - test_loglik_cells(&perturbed, &p, &g, 1.0).unwrap();
        diff += d;
        wins += usize::from(d > 0.0);
    }
    assert!(diff > 0.0);
    assert!(wins * 2 > reps as usize, "{wins} of {reps}");
}

/// Constant covariates force the homogeneous fit `N_train / |S|`, so the
/// k-fold score has the closed form
/// `Σ_i [n_i log(N_train,i / ((K-1)|S|)) - N_train,i / (K-1)]`.
fn homogeneous_kfold(fold_sizes: &[usize], area: f64) -> f64 {
    let total: usize = fold_sizes.iter().sum();
    let k = (fold_sizes.len() - 1) as f64;
    fold_sizes
        .iter()
        .map(|&n_test| {
            let n_train = (total - n_test) as f64;
            n_test as f64 * (n_train / (k * area)).ln() - n_train / k
        })
        .sum()
}

fn constant_setup(window: Window, points: Vec<[f64; 2]>) -> (PointPattern, CovariateStack, QuadratureGrid) {
    let lattice = Lattice::new(window, 4, 4).unwrap();
    let stack = CovariateStack::from_layers(lattice, vec![vec![1.0; 16]]).unwrap();
    let grid = QuadratureGrid::new(lattice);
    (PointPattern::new(points, window).unwrap(), stack, grid)
}

#[test]
fn kfold_of_eight_points_matches_closed_form() {
    let points: Vec<[f64; 2]> = (0..8).map(|i| [0.1 + 0.1 * i as f64, 0.5]).collect();
    let (pattern, stack, grid) = constant_setup(Window::unit(), points);
    let config = FitConfig {
        iterations: 5,
        ..FitConfig::default()
    };
    let got = kfold_eval(&pattern, &stack, &grid, 4, &config, 3).unwrap();
    let want = homogeneous_kfold(&[2, 2, 2, 2], 1.0);
    assert!((want - (8.0 * 2f64.ln() - 8.0)).abs() < 1e-12);
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn kfold_closed_form_on_a_larger_window() {
    let w = Window::new(0.0, 3.0, 0.0, 2.0).unwrap();
    let points: Vec<[f64; 2]> = (0..11).map(|i| [0.25 * i as f64, 1.0]).collect();
    let (pattern, stack, grid) = constant_setup(w, points);
    let got = kfold_eval(&pattern, &stack, &grid, 3, &FitConfig::default(), 0).unwrap();
    let want = homogeneous_kfold(&[4, 4, 3], 6.0);
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}
