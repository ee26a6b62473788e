use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use spectral_guidance::diffusion::DiffusionSchedule;
use spectral_guidance::guidance::estimate_coefficients;
use spectral_guidance::linalg::sample_covariance;
use spectral_guidance::net::{NetConfig, SpectralNetwork};
use spectral_guidance::oracles::{discrete_operator_matrix, gaussian_eigenvalues, principal_angle_cosines, CircleFourierBasis};
use spectral_guidance::priors::{
    CenteredGaussianPrior, DiscretePrior, GaussianMixturePrior, GuidanceSignal, ManifoldKind, ManifoldPrior, Prior,
    SignalKind,
};
use spectral_guidance::rng::{gaussian_matrix, rng_from_seed};
use spectral_guidance::training::{batch_whitening, compute_reference_stats, ssl_loss, ReferenceConfig};

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig { cases: n, ..ProptestConfig::default() }
}

fn random_mixture(n: usize, d: usize, seed: u64) -> GaussianMixturePrior {
    let mut rng = rng_from_seed(seed);
    let raw = gaussian_matrix(n, d + 1, &mut rng);
    let w: Vec<f64> = (0..n).map(|i| 0.1 + raw[(i, d)].abs()).collect();
    let s: f64 = w.iter().sum();
    let means = (0..n).map(|i| raw.row(i).columns(0, d).transpose() * 3.0).collect();
    GaussianMixturePrior::isotropic(w.iter().map(|v| v / s).collect(), means, 0.4).unwrap()
}

proptest! {
    #![proptest_config(cases(48))]

    #[test]
    fn mixture_weights_and_posteriors_are_in_the_simplex(n in 1usize..7, d in 1usize..4, seed in any::<u64>()) {
        let gmm = random_mixture(n, d, seed);
        prop_assert!((gmm.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(gmm.weights().iter().all(|&w| w > 0.0));
        for c in gmm.covariances() {
            prop_assert!((c - c.transpose()).amax() < 1e-12);
            prop_assert!(c.symmetric_eigenvalues().min() >= 0.0);
        }
        let x = gaussian_matrix(20, d, &mut rng_from_seed(seed ^ 1)) * 5.0;
        let p = gmm.component_posterior_batch(&x);
        for row in p.row_iter() {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn class_probability_signals_are_probabilities(n in 2usize..6, seed in any::<u64>(), mask in 1u32..63) {
        let gmm = random_mixture(n, 2, seed);
        let classes: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        prop_assume!(!classes.is_empty());
        let sig = GuidanceSignal::class_set(&gmm, &classes).unwrap();
        let h = sig.eval(&(gaussian_matrix(30, 2, &mut rng_from_seed(seed)) * 4.0)).unwrap();
        prop_assert!(h.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn geometric_gaussian_spectrum_is_ordered(d in 1usize..12, scale in 0.1f64..50.0, ratio in 0.1f64..1.0, seed in any::<u64>()) {
        let g = CenteredGaussianPrior::geometric(d, scale, ratio, Some(seed)).unwrap();
        let rho = g.eigenvalues();
        prop_assert!(rho.iter().all(|&r| r > 0.0));
        prop_assert!(rho.as_slice().windows(2).all(|w| w[0] >= w[1]));
        let u = g.eigenvectors();
        prop_assert!((u.transpose() * u - DMatrix::identity(d, d)).amax() < 1e-10);
        for abar in [0.0, 0.3, 0.999] {
            let lam = gaussian_eigenvalues(&g, abar).unwrap();
            prop_assert_eq!(lam[0], 1.0);
            prop_assert!(lam.iter().all(|&l| (0.0..=1.0).contains(&l)));
            prop_assert!(lam.as_slice().windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn manifold_samples_lie_on_their_support(r_in in 0.05f64..2.0, gap in 0.01f64..2.0, radius in 0.1f64..3.0, seed in any::<u64>()) {
        let circle = ManifoldPrior::new(ManifoldKind::Circle { radius }).unwrap().sample(200, seed).x;
        for row in circle.row_iter() {
            prop_assert!((row.norm() - radius).abs() < 1e-12 * radius.max(1.0));
        }
        let r_out = r_in + gap;
        let ann = ManifoldPrior::new(ManifoldKind::Annulus { r_in, r_out }).unwrap().sample(200, seed).x;
        for row in ann.row_iter() {
            let r = row.norm();
            prop_assert!(r >= r_in * (1.0 - 1e-12) && r <= r_out * (1.0 + 1e-12));
        }
    }

    #[test]
    fn sampling_is_seed_deterministic(seed in any::<u64>()) {
        let priors = [
            Prior::GaussianMixture(GaussianMixturePrior::pentagon_benchmark()),
            Prior::CenteredGaussian(CenteredGaussianPrior::geometric(3, 2.0, 0.5, Some(1)).unwrap()),
            Prior::Manifold(ManifoldPrior::unit_circle()),
        ];
        for p in &priors {
            let a = p.sample(64, seed).x;
            let b = p.sample(64, seed).x;
            prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn schedule_is_a_decreasing_running_product(steps in 2usize..2000, lo in 1e-5f64..0.05, span in 0.0f64..0.2) {
        let s = DiffusionSchedule::linear(steps, lo, lo + span).unwrap();
        let mut acc = 1.0;
        for t in 1..=steps {
            let b = s.beta(t);
            prop_assert!(b > 0.0 && b < 1.0);
            acc *= 1.0 - b;
            prop_assert!((s.alpha_bar(t) - acc).abs() < 1e-12);
            if t > 1 {
                prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
        prop_assert!(s.alpha_bar(1) < 1.0);
    }

    #[test]
    fn score_matches_finite_differences(seed in any::<u64>(), abar in 0.05f64..0.95) {
        let priors = [
            Prior::GaussianMixture(random_mixture(3, 2, seed)),
            Prior::CenteredGaussian(CenteredGaussianPrior::geometric(2, 3.0, 0.4, Some(seed)).unwrap()),
        ];
        let x = gaussian_matrix(1, 2, &mut rng_from_seed(seed)).row(0).transpose() * 2.0;
        for p in &priors {
            let score = p.score_t_batch(&DMatrix::from_row_slice(1, 2, x.as_slice()), abar).unwrap().row(0).transpose();
            let h = 1e-5;
            let fd = DVector::from_fn(2, |j, _| {
                let mut e = DVector::zeros(2);
                e[j] = h;
                (p.log_density_t(&(&x + &e), abar).unwrap() - p.log_density_t(&(&x - &e), abar).unwrap()) / (2.0 * h)
            });
            prop_assert!((&score - &fd).norm() <= 1e-6 * score.norm().max(1.0), "{} vs {}", score, fd);
        }
    }
}

fn full_rank_batch(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    let mix = gaussian_matrix(k, k, &mut rng) + DMatrix::identity(k, k) * 2.0;
    gaussian_matrix(n, k, &mut rng) * mix
}

proptest! {
    #![proptest_config(cases(32))]

    #[test]
    fn whitening_is_exact_and_idempotent(k in 1usize..6, seed in any::<u64>()) {
        let z = full_rank_batch(200, k, seed);
        let st = batch_whitening(&z, 0.0).unwrap();
        let v_cols = st.w.column_iter().map(|c| c.normalize()).collect::<Vec<_>>();
        let v = DMatrix::from_columns(&v_cols);
        prop_assert!((v.transpose() * &v - DMatrix::identity(k, k)).amax() < 1e-10);
        let cov = sample_covariance(&z);
        prop_assert!((st.w.transpose() * cov * &st.w - DMatrix::identity(k, k)).amax() < 1e-8);
        let zw = st.apply(&z);
        let again = batch_whitening(&zw, 0.0).unwrap().apply(&zw);
        prop_assert!((sample_covariance(&again) - DMatrix::identity(k, k)).amax() < 1e-8);
    }

    #[test]
    fn ssl_loss_ignores_common_linear_maps(k in 1usize..5, seed in any::<u64>()) {
        let z = full_rank_batch(300, k, seed);
        let noise = gaussian_matrix(600, k, &mut rng_from_seed(seed ^ 7)) * 0.5;
        let zt = &z + noise.rows(300, 300);
        let z = &z + noise.rows(0, 300);
        let a = gaussian_matrix(k, k, &mut rng_from_seed(seed ^ 9)) + DMatrix::identity(k, k) * 3.0;
        let base = ssl_loss(&z, &zt, 0.0).unwrap();
        let mapped = ssl_loss(&(&z * &a), &(&zt * &a), 0.0).unwrap();
        prop_assert!((base - mapped).abs() < 1e-8, "{} vs {}", base, mapped);
        prop_assert!(-base <= 1.1, "objective {}", -base);
    }

    #[test]
    fn principal_angles_ignore_column_recombination(k in 1usize..4, seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let u = gaussian_matrix(100, k, &mut rng);
        let v = gaussian_matrix(100, k, &mut rng) + &u;
        let r = gaussian_matrix(k, k, &mut rng) + DMatrix::identity(k, k) * 3.0;
        let a = principal_angle_cosines(&u, &v).unwrap();
        let b = principal_angle_cosines(&(&u * &r), &v).unwrap();
        prop_assert!(a.iter().all(|&c| (0.0..=1.0 + 1e-12).contains(&c)));
        prop_assert!(a.as_slice().windows(2).all(|w| w[0] >= w[1] - 1e-12));
        prop_assert!((a - b).amax() < 1e-9);
    }

    #[test]
    fn fourier_pairs_rotate_into_themselves(n in 1usize..6, theta in 0.0f64..6.3, alpha in 0.0f64..6.3) {
        let basis = CircleFourierBasis::new(n).unwrap();
        let f = basis.eval(theta);
        let g = basis.eval(theta + alpha);
        for m in 1..=n {
            let (c, s) = (f[2 * m - 1], f[2 * m]);
            let (ca, sa) = ((m as f64 * alpha).cos(), (m as f64 * alpha).sin());
            prop_assert!((g[2 * m - 1] - (c * ca - s * sa)).abs() < 1e-12);
            prop_assert!((g[2 * m] - (s * ca + c * sa)).abs() < 1e-12);
        }
    }

    #[test]
    fn network_outputs_have_k_finite_columns(d in 1usize..5, k in 1usize..6, t in 1usize..1000, seed in any::<u64>()) {
        let net = SpectralNetwork::new(NetConfig::new(d, k).with_width(8).with_blocks(1).with_time_freqs(4), seed).unwrap();
        let x = gaussian_matrix(7, d, &mut rng_from_seed(seed)) * 3.0;
        let f = net.forward(&x, t).unwrap();
        prop_assert_eq!((f.nrows(), f.ncols()), (7, k));
        prop_assert!(f.iter().all(|v| v.is_finite()));
        prop_assert_eq!(net.time_embedding(t), net.time_embedding(t));
    }
}

proptest! {
    #![proptest_config(cases(8))]

    #[test]
    fn constant_mode_coefficient_is_the_signal_mean(seed in any::<u64>(), dh in 1usize..4) {
        let prior = Prior::GaussianMixture(GaussianMixturePrior::pentagon_benchmark());
        let sched = DiffusionSchedule::ddpm_default().with_guided_timesteps(vec![100, 500]).unwrap();
        let mut net = SpectralNetwork::new(NetConfig::new(2, 3).with_width(8).with_blocks(1).with_time_freqs(4), seed).unwrap();
        spectral_guidance::net::perturb_params(net.params_mut(), 0.3, &mut rng_from_seed(seed));
        let basis = compute_reference_stats(&net, &prior, &sched, &ReferenceConfig::new(100, seed)).unwrap();
        let h = gaussian_matrix(100, dh, &mut rng_from_seed(seed ^ 3));
        let c = estimate_coefficients(&basis, &h, SignalKind::Embedding).unwrap();
        for t in [100, 500] {
            let row = c.get(t).unwrap().row(0).transpose();
            let means = DVector::from_fn(dh, |j, _| h.column(j).mean());
            prop_assert!((row - means).amax() < 1e-12);
            prop_assert!(basis.entry(t).unwrap().phi.column(0).iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn operator_matrix_rows_sum_to_one(n in 2usize..5, seed in any::<u64>(), abar in 0.05f64..0.95) {
        let atoms: Vec<DVector<f64>> = (0..n).map(|i| DVector::from_vec(vec![i as f64 * 1.3, (seed % 7) as f64 * 0.1])).collect();
        let masses = vec![1.0 / n as f64; n];
        let prior = DiscretePrior::new(atoms, masses).unwrap();
        let m = discrete_operator_matrix(&prior, abar, 4000, seed).unwrap();
        let rows = m.row_sums();
        let se = m.row_sum_stderr();
        for i in 0..n {
            prop_assert!((rows[i] - 1.0).abs() <= 1e-9 + 4.0 * se[i], "row {} sums to {}", i, rows[i]);
        }
        let ev = m.eigenvalues().unwrap();
        let ev_se = m.eigenvalue_stderr();
        for (l, s) in ev.iter().zip(ev_se.iter()) {
            prop_assert!(*l <= 1.0 + 1e-9 + 4.0 * s && *l >= -1e-9 - 4.0 * s, "eigenvalue {} +- {}", l, s);
        }
    }
}
