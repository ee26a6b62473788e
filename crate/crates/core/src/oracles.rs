//! Ground-truth spectra used to validate the learned singular functions.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::diffusion::{corrupt, coupled_views_with, DiffusionSchedule};
use crate::error::{invalid, shape, Error, Result};
use crate::linalg::{center_rows, column_means, inv_sqrt_psd, sorted_symmetric_eigen};
use crate::net::SpectralNetwork;
use crate::priors::{CenteredGaussianPrior, DiscretePrior, Prior};
use crate::rng::{rng_from_seed, stratified_gaussian_matrix, substream};
use crate::training::WhiteningStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumSource {
    ClosedForm,
    MatrixOracle,
    Learned,
}

impl SpectrumSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            SpectrumSource::ClosedForm => "closed-form",
            SpectrumSource::MatrixOracle => "matrix-oracle",
            SpectrumSource::Learned => "learned",
        }
    }
}

/// Descending eigenvalues `lambda_{t,k}` of `T_t T_t^*`, constant mode first.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumEstimate {
    pub t: usize,
    pub eigenvalues: DVector<f64>,
    pub stderr: Option<DVector<f64>>,
    pub source: SpectrumSource,
}

/// `lambda = abar rho / (abar rho + 1 - abar)` for each covariance
/// eigenvalue, with the constant mode's 1 prepended.
pub fn gaussian_eigenvalues(prior: &CenteredGaussianPrior, abar: f64) -> Result<DVector<f64>> {
    if !(0.0..=1.0).contains(&abar) {
        return Err(invalid(format!("abar must lie in [0, 1], got {abar}")));
    }
    let rho = prior.eigenvalues();
    let mut out = DVector::zeros(rho.len() + 1);
    out[0] = 1.0;
    for (k, &r) in rho.iter().enumerate() {
        out[k + 1] = abar * r / (abar * r + 1.0 - abar);
    }
    Ok(out)
}

pub fn gaussian_spectrum(prior: &CenteredGaussianPrior, schedule: &DiffusionSchedule, t: usize) -> Result<SpectrumEstimate> {
    schedule.check_timestep(t)?;
    Ok(SpectrumEstimate {
        t,
        eigenvalues: gaussian_eigenvalues(prior, schedule.alpha_bar(t))?,
        stderr: None,
        source: SpectrumSource::ClosedForm,
    })
}

/// `{1, sqrt2 cos(n theta), sqrt2 sin(n theta)}` for `n = 1..=n_max`, in
/// that interleaved order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CircleFourierBasis {
    n_max: usize,
}

impl CircleFourierBasis {
    pub fn new(n_max: usize) -> Result<Self> {
        if n_max == 0 {
            return Err(invalid("circle basis needs n_max >= 1"));
        }
        Ok(Self { n_max })
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn len(&self) -> usize {
        2 * self.n_max + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eval(&self, theta: f64) -> DVector<f64> {
        let mut v = DVector::zeros(self.len());
        v[0] = 1.0;
        for n in 1..=self.n_max {
            let a = n as f64 * theta;
            v[2 * n - 1] = SQRT_2 * a.cos();
            v[2 * n] = SQRT_2 * a.sin();
        }
        v
    }

    /// Rows are angles.
    pub fn eval_many(&self, thetas: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(thetas.len(), self.len());
        for (i, &th) in thetas.iter().enumerate() {
            m.row_mut(i).copy_from(&self.eval(th).transpose());
        }
        m
    }

    /// Non-constant columns only.
    pub fn eval_nonconstant(&self, thetas: &[f64]) -> DMatrix<f64> {
        let m = self.eval_many(thetas);
        m.columns(1, self.len() - 1).into_owned()
    }
}

/// Evenly spaced angles `2 pi i / n` plus a common offset.
pub fn uniform_angles(n: usize, offset: f64) -> Vec<f64> {
    (0..n).map(|i| offset + 2.0 * PI * i as f64 / n as f64).collect()
}

/// Monte-Carlo discretisation of `T_t^* T_t` on a finite support:
/// `A[i][j] = E_{x_t | atom_i}[p(atom_j | x_t)]`.
#[derive(Debug, Clone)]
pub struct OperatorMatrix {
    pub a: DMatrix<f64>,
    /// Standard error of each entry of `a`.
    pub a_stderr: DMatrix<f64>,
    pub atoms: Vec<DVector<f64>>,
    pub masses: Vec<f64>,
    pub mc_samples: usize,
    /// Per-replicate symmetrised eigenvalues, used for standard errors.
    replicate_eigenvalues: Vec<DVector<f64>>,
    replicate_row_sums: Vec<DVector<f64>>,
}

fn symmetrized_eigenvalues(a: &DMatrix<f64>, masses: &[f64]) -> Result<DVector<f64>> {
    let n = a.nrows();
    let s = DMatrix::from_fn(n, n, |i, j| masses[i].sqrt() * a[(i, j)] / masses[j].sqrt());
    Ok(sorted_symmetric_eigen(&s)?.values)
}

fn mean_and_stderr(reps: &[DVector<f64>]) -> (DVector<f64>, DVector<f64>) {
    let r = reps.len() as f64;
    let n = reps[0].len();
    let mean = reps.iter().fold(DVector::zeros(n), |acc, v| acc + v) / r;
    let var = reps.iter().fold(DVector::zeros(n), |acc: DVector<f64>, v| {
        acc + (v - &mean).map(|d| d * d)
    }) / (r - 1.0).max(1.0);
    (mean, var.map(|v| (v / r).sqrt()))
}

impl OperatorMatrix {
    /// Eigenvalues of `D^{1/2} A D^{-1/2}`, descending.
    pub fn eigenvalues(&self) -> Result<DVector<f64>> {
        symmetrized_eigenvalues(&self.a, &self.masses)
    }

    /// Standard error of each eigenvalue across independent replicates.
    pub fn eigenvalue_stderr(&self) -> DVector<f64> {
        mean_and_stderr(&self.replicate_eigenvalues).1
    }

    pub fn row_sums(&self) -> DVector<f64> {
        DVector::from_iterator(self.a.nrows(), self.a.row_iter().map(|r| r.sum()))
    }

    pub fn row_sum_stderr(&self) -> DVector<f64> {
        mean_and_stderr(&self.replicate_row_sums).1
    }

    pub fn spectrum(&self, t: usize) -> Result<SpectrumEstimate> {
        Ok(SpectrumEstimate {
            t,
            eigenvalues: self.eigenvalues()?,
            stderr: Some(self.eigenvalue_stderr()),
            source: SpectrumSource::MatrixOracle,
        })
    }
}

const ORACLE_REPLICATES: usize = 10;

/// Builds the operator matrix from `mc_samples` noise draws per atom, split
/// into independent replicates. Noise is stratified over the Box-Muller
/// square, which keeps every draw exactly Gaussian while sharply reducing
/// the variance of these smooth one-dimensional integrands.
pub fn discrete_operator_matrix(prior: &DiscretePrior, abar: f64, mc_samples: usize, seed: u64) -> Result<OperatorMatrix> {
    let n = prior.len();
    if n < 2 {
        return Err(invalid("operator matrix needs at least two atoms"));
    }
    if mc_samples < 1000 {
        return Err(invalid(format!("need at least 1000 Monte-Carlo samples, got {mc_samples}")));
    }
    if prior.has_duplicate_atoms() {
        return Err(invalid("duplicate atoms make the operator matrix degenerate"));
    }
    if !(0.0..1.0).contains(&abar) {
        return Err(invalid(format!("abar must lie in [0, 1), got {abar}")));
    }
    let d = prior.dim();
    let per_rep = mc_samples.div_ceil(ORACLE_REPLICATES);
    let (sa, sb) = (abar.sqrt(), (1.0 - abar).sqrt());
    let mut reps = Vec::with_capacity(ORACLE_REPLICATES);
    for r in 0..ORACLE_REPLICATES {
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut rng = rng_from_seed(substream(seed, (r * n + i) as u64));
            let eps = stratified_gaussian_matrix(per_rep, d, &mut rng);
            let center = &prior.atoms()[i] * sa;
            for row in eps.row_iter() {
                let x = &center + row.transpose() * sb;
                let post = prior.atom_posterior(&x, abar)?;
                for j in 0..n {
                    a[(i, j)] += post[j];
                }
            }
        }
        reps.push(a / per_rep as f64);
    }
    let total = reps.len() as f64;
    let mean = reps.iter().fold(DMatrix::zeros(n, n), |acc, m| acc + m) / total;
    let var = reps.iter().fold(DMatrix::zeros(n, n), |acc: DMatrix<f64>, m| {
        acc + (m - &mean).map(|v| v * v)
    }) / (total - 1.0);
    let a_stderr = var.map(|v| (v / total).sqrt());
    let replicate_eigenvalues = reps
        .iter()
        .map(|m| symmetrized_eigenvalues(m, prior.masses()))
        .collect::<Result<Vec<_>>>()?;
    let replicate_row_sums = reps
        .iter()
        .map(|m| DVector::from_iterator(n, m.row_iter().map(|r| r.sum())))
        .collect();
    Ok(OperatorMatrix {
        a: mean,
        a_stderr,
        atoms: prior.atoms().to_vec(),
        masses: prior.masses().to_vec(),
        mc_samples: per_rep * ORACLE_REPLICATES,
        replicate_eigenvalues,
        replicate_row_sums,
    })
}

fn orthonormal_basis(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if m.ncols() == 0 || m.nrows() < m.ncols() {
        return Err(shape(format!("{what} is {}x{}; need rows >= cols >= 1", m.nrows(), m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    let qr = m.clone().qr();
    let r = qr.r();
    let scale = m.norm().max(f64::MIN_POSITIVE);
    for i in 0..r.ncols() {
        if r[(i, i)].abs() <= 1e-10 * scale {
            return Err(Error::RankDeficient(format!("{what} does not have full column rank")));
        }
    }
    Ok(qr.q())
}

/// Cosines of the principal angles between `span(U)` and `span(V)`, descending.
pub fn principal_angle_cosines(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DVector<f64>> {
    if u.nrows() != v.nrows() {
        return Err(shape(format!("subspaces live in R^{} and R^{}", u.nrows(), v.nrows())));
    }
    let qu = orthonormal_basis(u, "first subspace")?;
    let qv = orthonormal_basis(v, "second subspace")?;
    let mut s = (qu.transpose() * qv).svd(false, false).singular_values;
    s.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    Ok(s.map(|c| c.clamp(0.0, 1.0)))
}

/// Mean principal-angle cosine between two sets of sampled functions after
/// removing each column's mean (the constant mode is excluded).
pub fn mean_function_cosine(f: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<f64> {
    let fc = center_rows(f, &column_means(f));
    let gc = center_rows(g, &column_means(g));
    Ok(principal_angle_cosines(&fc, &gc)?.mean())
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
}

fn log_gaussian_kernel(x: &DVector<f64>, center: &DVector<f64>, var: f64) -> f64 {
    let d = x.len() as f64;
    -0.5 * (x - center).norm_squared() / var - 0.5 * d * (2.0 * PI * var).ln()
}

/// `E_{x0}[chi^2(p_t(. | x0) || p_t)]`, an upper bound on every non-constant
/// squared singular value, by importance sampling from the conditional.
pub fn chi2_singular_bound(prior: &Prior, abar: f64, mc_samples: usize, seed: u64) -> Result<McEstimate> {
    if !(0.0..1.0).contains(&abar) {
        return Err(invalid(format!("abar must lie in [0, 1), got {abar}")));
    }
    if mc_samples < 2 {
        return Err(invalid("need at least two samples"));
    }
    if matches!(prior, Prior::Manifold(_)) {
        return Err(Error::Unsupported("closed-form marginal density (manifold prior)".into()));
    }
    let x0 = prior.sample(mc_samples, substream(seed, 1)).x;
    let mut rng = rng_from_seed(substream(seed, 2));
    let eps = stratified_gaussian_matrix(mc_samples, prior.dim(), &mut rng);
    let (sa, sb) = (abar.sqrt(), (1.0 - abar).sqrt());
    let mut vals = Vec::with_capacity(mc_samples);
    for i in 0..mc_samples {
        let c = x0.row(i).transpose() * sa;
        let x = &c + eps.row(i).transpose() * sb;
        let lr = log_gaussian_kernel(&x, &c, 1.0 - abar) - prior.log_density_t(&x, abar)?;
        vals.push(lr.exp() - 1.0);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(McEstimate { value: mean, stderr: (var / n).sqrt() })
}

/// Both sides of `<g, T_t f>_{mu_t} = <T_t^* g, f>_{mu_0}` for a function `f`
/// on the atoms and `g` on the noisy space, each with its standard error.
pub fn adjointness_check(
    prior: &DiscretePrior,
    abar: f64,
    f: &[f64],
    g: impl Fn(&DVector<f64>) -> f64,
    mc_samples: usize,
    seed: u64,
) -> Result<(McEstimate, McEstimate)> {
    if f.len() != prior.len() {
        return Err(shape(format!("f has {} values for {} atoms", f.len(), prior.len())));
    }
    if !(0.0..1.0).contains(&abar) {
        return Err(invalid(format!("abar must lie in [0, 1), got {abar}")));
    }
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        McEstimate { value: m, stderr: (var / n).sqrt() }
    };
    // Left: x_t ~ p_t, integrand g(x) E[f(X0) | x].
    let s = prior.sample(mc_samples, substream(seed, 1));
    let mut rng = rng_from_seed(substream(seed, 2));
    let xt = corrupt(&s.x, abar, &mut rng);
    let mut lhs = Vec::with_capacity(mc_samples);
    for row in xt.row_iter() {
        let x = row.transpose();
        let post = prior.atom_posterior(&x, abar)?;
        let tf: f64 = post.iter().zip(f).map(|(p, fj)| p * fj).sum();
        lhs.push(g(&x) * tf);
    }
    // Right: x0 ~ mu_0, integrand f(x0) g(x_t) with x_t | x0.
    let s = prior.sample(mc_samples, substream(seed, 3));
    let xt = corrupt(&s.x, abar, &mut rng_from_seed(substream(seed, 4)));
    let labels = s.labels.expect("discrete samples carry atom labels");
    let rhs: Vec<f64> = xt.row_iter().zip(&labels).map(|(r, &i)| f[i] * g(&r.transpose())).collect();
    Ok((stats(&lhs), stats(&rhs)))
}

/// Eigenvalues of the symmetrised whitened cross-covariance of the network's
/// features over fresh coupled views, constant mode prepended.
///
/// Both views share a pooled mean and covariance; the estimate is the
/// spectrum of `S^{-1/2} (C + C^T)/2 S^{-1/2}`.
pub fn learned_spectrum(
    net: &SpectralNetwork,
    prior: &Prior,
    schedule: &DiffusionSchedule,
    t: usize,
    n_eval: usize,
    seed: u64,
) -> Result<SpectrumEstimate> {
    let k = net.output_dim();
    if n_eval < k + 2 {
        return Err(invalid(format!("n_eval {n_eval} must be at least K + 2")));
    }
    let x0 = prior.sample(n_eval, substream(seed, 1)).x;
    let mut rng = rng_from_seed(substream(seed, 2));
    let v = coupled_views_with(&x0, t, schedule, &mut rng)?;
    let za = net.forward(&v.x_t, t)?;
    let zb = net.forward(&v.x_tilde, t)?;
    let n = n_eval as f64;
    let mu = (column_means(&za) + column_means(&zb)) * 0.5;
    let ca = center_rows(&za, &mu);
    let cb = center_rows(&zb, &mu);
    let s = (ca.transpose() * &ca + cb.transpose() * &cb) / (2.0 * (n - 1.0));
    let c = ca.transpose() * &cb / (n - 1.0);
    let ridge = 1e-12 * s.trace().max(f64::MIN_POSITIVE);
    let w = inv_sqrt_psd(&s, ridge)?;
    let m = &w * (&c + c.transpose()) * 0.5 * &w;
    let vals = sorted_symmetric_eigen(&m)?.values;
    let mut out = DVector::zeros(k + 1);
    out[0] = 1.0;
    out.rows_mut(1, k).copy_from(&vals);
    Ok(SpectrumEstimate { t, eigenvalues: out, stderr: None, source: SpectrumSource::Learned })
}

/// Monte-Carlo right singular functions: for each clean point `x0` the
/// average over noise of the whitened non-constant features,
/// `E_eps[(f(sqrt(abar) x0 + sqrt(1 - abar) eps, t) - mu) W]`.
pub fn right_singular_functions(
    net: &SpectralNetwork,
    stats: &WhiteningStats,
    x0: &DMatrix<f64>,
    t: usize,
    schedule: &DiffusionSchedule,
    n_noise: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    schedule.check_timestep(t)?;
    if n_noise == 0 {
        return Err(invalid("need at least one noise draw"));
    }
    let abar = schedule.alpha_bar(t);
    let mut acc = DMatrix::zeros(x0.nrows(), stats.dim());
    let mut rng = rng_from_seed(seed);
    for _ in 0..n_noise {
        let xt = corrupt(x0, abar, &mut rng);
        acc += stats.apply(&net.forward(&xt, t)?);
    }
    Ok(acc / n_noise as f64)
}

/// Whitening statistics of the network's features on a fresh noisy batch.
pub fn fresh_whitening(
    net: &SpectralNetwork,
    prior: &Prior,
    schedule: &DiffusionSchedule,
    t: usize,
    n: usize,
    ridge: f64,
    seed: u64,
) -> Result<WhiteningStats> {
    let x0 = prior.sample(n, substream(seed, 1)).x;
    let xt = corrupt(&x0, schedule.alpha_bar(t), &mut rng_from_seed(substream(seed, 2)));
    crate::training::batch_whitening(&net.forward(&xt, t)?, ridge)
}

/// Uniformly random angles in `[0, 2 pi)`.
pub fn random_angles(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::GaussianMixturePrior;
    use approx::assert_abs_diff_eq;

    fn two_atoms() -> DiscretePrior {
        DiscretePrior::new(vec![DVector::from_element(1, -1.0), DVector::from_element(1, 1.0)], vec![0.5, 0.5]).unwrap()
    }

    /// `lambda_2 = 2 a - 1` with `a = E_{x ~ N(s, b^2)}[sigmoid(2 s x / b^2)]`,
    /// integrated by the trapezoid rule on a wide fine grid.
    fn two_atom_lambda2_quadrature(abar: f64) -> f64 {
        let (s, b) = (abar.sqrt(), (1.0 - abar).sqrt());
        let n = 200_001;
        let (lo, hi) = (s - 14.0 * b, s + 14.0 * b);
        let h = (hi - lo) / (n - 1) as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let x = lo + h * i as f64;
            let dens = (-(x - s).powi(2) / (2.0 * b * b)).exp() / (b * (2.0 * PI).sqrt());
            let sig = 1.0 / (1.0 + (-2.0 * s * x / (b * b)).exp());
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            acc += w * dens * sig;
        }
        2.0 * acc * h - 1.0
    }

    #[test]
    fn gaussian_closed_form_values() {
        let p = CenteredGaussianPrior::new(DVector::from_vec(vec![40.0, 4.0]), DMatrix::identity(2, 2)).unwrap();
        let l = gaussian_eigenvalues(&p, 0.5).unwrap();
        assert_abs_diff_eq!(l[1], 20.0 / 20.5, epsilon = 1e-15);
        assert_abs_diff_eq!(l[1], 0.975610, epsilon = 1e-6);
        assert_eq!(gaussian_eigenvalues(&p, 1.0).unwrap(), DVector::from_vec(vec![1.0, 1.0, 1.0]));
        assert_eq!(gaussian_eigenvalues(&p, 0.0).unwrap(), DVector::from_vec(vec![1.0, 0.0, 0.0]));
        assert!(gaussian_eigenvalues(&p, 1.5).is_err());
    }

    #[test]
    fn gaussian_spectrum_decreases_in_t() {
        let p = CenteredGaussianPrior::geometric(20, 40.0, 0.7, None).unwrap();
        let s = DiffusionSchedule::ddpm_default();
        let mut prev = gaussian_spectrum(&p, &s, 1).unwrap().eigenvalues;
        for t in 2..=1000 {
            let cur = gaussian_spectrum(&p, &s, t).unwrap().eigenvalues;
            for k in 1..21 {
                assert!(cur[k] < prev[k]);
            }
            prev = cur;
        }
    }

    #[test]
    fn circle_basis_orthonormal_and_rotation_closed() {
        let b = CircleFourierBasis::new(4).unwrap();
        assert_eq!(b.eval(0.0)[1], SQRT_2);
        let th = random_angles(100_000, 1);
        let m = b.eval_many(&th);
        let gram = m.transpose() * &m / th.len() as f64;
        assert!((gram - DMatrix::identity(9, 9)).amax() < 0.01);
        let mut rng = rng_from_seed(2);
        for _ in 0..20 {
            let (theta, alpha) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
            for n in 1..=4 {
                let (c, s) = ((n as f64 * alpha).cos(), (n as f64 * alpha).sin());
                let v = b.eval(theta);
                let r = b.eval(theta + alpha);
                assert_abs_diff_eq!(r[2 * n - 1], c * v[2 * n - 1] - s * v[2 * n], epsilon = 1e-12);
                assert_abs_diff_eq!(r[2 * n], s * v[2 * n - 1] + c * v[2 * n], epsilon = 1e-12);
            }
        }
        assert!(CircleFourierBasis::new(0).is_err());
    }

    #[test]
    fn two_atom_limits() {
        let p = two_atoms();
        let hi = discrete_operator_matrix(&p, 0.9999, 10_000, 1).unwrap().eigenvalues().unwrap();
        assert_abs_diff_eq!(hi[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(hi[1], 1.0, epsilon = 1e-3);
        let lo = discrete_operator_matrix(&p, 1e-6, 10_000, 1).unwrap().eigenvalues().unwrap();
        assert_abs_diff_eq!(lo[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(lo[1], 0.0, epsilon = 1e-4);
    }

    #[test]
    fn two_atom_matches_quadrature() {
        let p = two_atoms();
        for abar in [0.1, 0.5, 0.9] {
            let op = discrete_operator_matrix(&p, abar, 1_000_000, 7).unwrap();
            let l2 = op.eigenvalues().unwrap()[1];
            let q = two_atom_lambda2_quadrature(abar);
            let se = op.eigenvalue_stderr()[1];
            assert!((l2 - q).abs() <= 5e-4 * q.abs(), "abar {abar}: {l2} vs {q} (se {se})");
            assert!(op.row_sums().iter().all(|s| (s - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn operator_matrix_rejects_bad_input() {
        let dup = DiscretePrior::new(vec![DVector::from_element(1, 1.0), DVector::from_element(1, 1.0)], vec![0.5, 0.5]).unwrap();
        assert!(discrete_operator_matrix(&dup, 0.5, 10_000, 0).is_err());
        assert!(discrete_operator_matrix(&two_atoms(), 0.5, 10, 0).is_err());
    }

    #[test]
    fn principal_angles_basic_and_projector_identity() {
        let mut rng = rng_from_seed(3);
        let u = crate::rng::gaussian_matrix(20, 3, &mut rng);
        let c = principal_angle_cosines(&u, &u).unwrap();
        assert!(c.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0]);
        let c = principal_angle_cosines(&u, &(&u * a)).unwrap();
        assert!(c.iter().all(|v| (v - 1.0).abs() < 1e-10));
        let e = DMatrix::<f64>::identity(20, 20);
        let c = principal_angle_cosines(&e.columns(0, 3).into_owned(), &e.columns(3, 3).into_owned()).unwrap();
        assert!(c.iter().all(|&v| v < 1e-12));
        for _ in 0..10 {
            let u = crate::rng::gaussian_matrix(20, 3, &mut rng);
            let v = crate::rng::gaussian_matrix(20, 3, &mut rng);
            let c = principal_angle_cosines(&u, &v).unwrap();
            let proj = |m: &DMatrix<f64>| m * (m.transpose() * m).try_inverse().unwrap() * m.transpose();
            let tr = (proj(&u) * proj(&v)).trace();
            assert_abs_diff_eq!(c.map(|x| x * x).sum(), tr, epsilon = 1e-8);
            assert!(c.as_slice().windows(2).all(|w| w[0] >= w[1]));
        }
        let mut bad = u.clone();
        bad.column_mut(2).copy_from(&u.column(0));
        assert!(matches!(principal_angle_cosines(&bad, &u), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn chi2_bound_limits_and_two_atoms() {
        let tight = Prior::GaussianMixture(
            GaussianMixturePrior::isotropic(vec![1.0], vec![DVector::from_vec(vec![0.3, -0.2])], 1e-4).unwrap(),
        );
        assert!(chi2_singular_bound(&tight, 0.5, 10_000, 1).unwrap().value < 1e-6);
        let gmm = Prior::GaussianMixture(GaussianMixturePrior::pentagon_benchmark());
        assert!(chi2_singular_bound(&gmm, 1e-6, 10_000, 1).unwrap().value.abs() < 1e-3);
        let p = two_atoms();
        let op = discrete_operator_matrix(&p, 0.5, 100_000, 2).unwrap();
        let b = chi2_singular_bound(&Prior::Discrete(p), 0.5, 100_000, 3).unwrap();
        let se = (b.stderr.powi(2) + op.eigenvalue_stderr()[1].powi(2)).sqrt();
        assert!(b.value >= op.eigenvalues().unwrap()[1] - 2.0 * se);
    }

    #[test]
    fn adjointness_holds_within_mc_error() {
        let p = DiscretePrior::new(
            vec![DVector::from_vec(vec![0.0, 1.0]), DVector::from_vec(vec![1.5, -0.5]), DVector::from_vec(vec![-1.0, 0.0])],
            vec![0.2, 0.5, 0.3],
        )
        .unwrap();
        let g = |x: &DVector<f64>| 1.0 + 0.5 * x[0] - x[1] * x[1] + 0.3 * x[0] * x[1];
        let (l, r) = adjointness_check(&p, 0.6, &[2.0, -1.0, 0.5], g, 200_000, 9).unwrap();
        let se = (l.stderr.powi(2) + r.stderr.powi(2)).sqrt();
        assert!((l.value - r.value).abs() < 2.0 * se, "{l:?} {r:?}");
    }
}
