//! Clean-data distributions `p_0`.
//!
//! Gaussian mixtures, centered Gaussians and discrete priors have closed-form
//! noisy marginals under the variance-preserving forward kernel
//! `x_t | x_0 ~ N(sqrt(abar) x_0, (1 - abar) I)`, so their scores are exact.
//! Manifold priors (circle, square, disk, annulus) are sample-only.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, shape, Error, Result};
use crate::rng::{gaussian_matrix, rng_from_seed};

const LN_TAU: f64 = 1.837_877_066_409_345_5;

/// Clean samples, optionally tagged with the generating component.
#[derive(Debug, Clone)]
pub struct Samples {
    pub x: DMatrix<f64>,
    pub labels: Option<Vec<usize>>,
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalized probabilities from log-weights.
pub(crate) fn softmax(logits: &[f64]) -> DVector<f64> {
    let lse = log_sum_exp(logits);
    let mut p = DVector::from_iterator(logits.len(), logits.iter().map(|l| (l - lse).exp()));
    let s = p.sum();
    p /= s;
    p
}

fn check_abar(abar: f64) -> Result<()> {
    if !(abar > 0.0 && abar <= 1.0) {
        return Err(invalid(format!("abar must lie in (0, 1], got {abar}")));
    }
    Ok(())
}

fn check_simplex(w: &[f64], what: &str) -> Result<()> {
    if w.is_empty() {
        return Err(invalid(format!("{what}: empty")));
    }
    if w.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(invalid(format!("{what}: every entry must be positive")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(invalid(format!("{what}: sum to {s}, expected 1")));
    }
    Ok(())
}

/// A Gaussian with precomputed Cholesky factor.
#[derive(Debug, Clone)]
struct GaussianFactor {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    half_log_det: f64,
}

impl GaussianFactor {
    fn new(mean: DVector<f64>, cov: DMatrix<f64>, what: &str) -> Result<Self> {
        let chol = Cholesky::new(cov).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))?;
        let half_log_det = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        Ok(Self { mean, chol, half_log_det })
    }

    fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let y = self.chol.l_dirty().solve_lower_triangular(&diff).expect("nonsingular factor");
        -0.5 * y.norm_squared() - self.half_log_det - 0.5 * x.len() as f64 * LN_TAU
    }

    /// `-C^{-1}(x - m)`.
    fn score(&self, x: &DVector<f64>) -> DVector<f64> {
        -self.chol.solve(&(x - &self.mean))
    }
}

#[derive(Debug, Clone)]
pub struct GaussianMixturePrior {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    sampling_factors: Vec<DMatrix<f64>>,
}

impl GaussianMixturePrior {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        check_simplex(&weights, "mixture weights")?;
        if means.len() != weights.len() || covariances.len() != weights.len() {
            return Err(shape("weights, means and covariances must have equal length"));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(invalid("dimension must be positive"));
        }
        let mut sampling_factors = Vec::with_capacity(weights.len());
        for (i, (m, c)) in means.iter().zip(&covariances).enumerate() {
            if m.len() != dim || c.nrows() != dim || c.ncols() != dim {
                return Err(shape(format!("component {i} does not have dimension {dim}")));
            }
            if (c - c.transpose()).amax() > 1e-12 {
                return Err(invalid(format!("component {i} covariance is not symmetric")));
            }
            let chol = Cholesky::new(c.clone()).ok_or_else(|| {
                Error::NotPositiveDefinite(format!("component {i} covariance is rank deficient"))
            })?;
            sampling_factors.push(chol.l());
        }
        Ok(Self { dim, weights, means, covariances, sampling_factors })
    }

    /// Mixture of isotropic components `N(mean_i, std^2 I)`.
    pub fn isotropic(weights: Vec<f64>, means: Vec<DVector<f64>>, std: f64) -> Result<Self> {
        let dim = means.first().map(|m| m.len()).unwrap_or(0);
        let covs = vec![DMatrix::identity(dim, dim) * (std * std); means.len()];
        Self::new(weights, means, covs)
    }

    /// Five isotropic components (std 0.25) on a regular pentagon of radius 2
    /// with weights (0.25, 0.2, 0.2, 0.2, 0.15). Used by the guidance
    /// benchmarks.
    pub fn pentagon_benchmark() -> Self {
        let means = (0..5)
            .map(|i| {
                let a = PI / 2.0 + TAU * i as f64 / 5.0;
                DVector::from_vec(vec![2.0 * a.cos(), 2.0 * a.sin()])
            })
            .collect();
        Self::isotropic(vec![0.25, 0.2, 0.2, 0.2, 0.15], means, 0.25).expect("valid benchmark mixture")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    pub fn sample(&self, n: usize, seed: u64) -> Samples {
        let mut rng = rng_from_seed(seed);
        let pick = WeightedIndex::new(&self.weights).expect("validated weights");
        let mut x = DMatrix::zeros(n, self.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = pick.sample(&mut rng);
            let z = DVector::from_iterator(self.dim, (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let row = &self.means[c] + &self.sampling_factors[c] * z;
            x.set_row(i, &row.transpose());
            labels.push(c);
        }
        Samples { x, labels: Some(labels) }
    }

    /// Components of the noisy marginal at `abar`: means `sqrt(abar) mu_i`,
    /// covariances `abar Sigma_i + (1 - abar) I`.
    fn diffused(&self, abar: f64) -> Result<Vec<GaussianFactor>> {
        check_abar(abar)?;
        let s = abar.sqrt();
        self.means
            .iter()
            .zip(&self.covariances)
            .enumerate()
            .map(|(i, (m, c))| {
                let cov = c * abar + DMatrix::identity(self.dim, self.dim) * (1.0 - abar);
                GaussianFactor::new(m * s, cov, &format!("effective covariance of component {i} at abar = {abar}"))
            })
            .collect()
    }

    fn log_joint(&self, factors: &[GaussianFactor], x: &DVector<f64>) -> Vec<f64> {
        factors.iter().zip(&self.weights).map(|(f, w)| w.ln() + f.log_pdf(x)).collect()
    }

    pub fn log_density_t(&self, x: &DVector<f64>, abar: f64) -> Result<f64> {
        self.check_point(x)?;
        let factors = self.diffused(abar)?;
        Ok(log_sum_exp(&self.log_joint(&factors, x)))
    }

    /// Exact score `grad log p_t(x)` of the noisy marginal.
    pub fn score_t(&self, x: &DVector<f64>, abar: f64) -> Result<DVector<f64>> {
        self.check_point(x)?;
        let factors = self.diffused(abar)?;
        Ok(self.score_with(&factors, x))
    }

    fn score_with(&self, factors: &[GaussianFactor], x: &DVector<f64>) -> DVector<f64> {
        let r = softmax(&self.log_joint(factors, x));
        let mut s = DVector::zeros(self.dim);
        for (f, ri) in factors.iter().zip(r.iter()) {
            if *ri > 0.0 {
                s += f.score(x) * *ri;
            }
        }
        s
    }

    pub fn score_t_batch(&self, x: &DMatrix<f64>, abar: f64) -> Result<DMatrix<f64>> {
        if x.ncols() != self.dim {
            return Err(shape(format!("expected {} columns, got {}", self.dim, x.ncols())));
        }
        let factors = self.diffused(abar)?;
        let mut out = DMatrix::zeros(x.nrows(), self.dim);
        for i in 0..x.nrows() {
            let row = x.row(i).transpose();
            out.set_row(i, &self.score_with(&factors, &row).transpose());
        }
        Ok(out)
    }

    /// Component responsibilities under the noisy marginal: `p_t(i | x_t)`.
    pub fn diffused_posterior(&self, x_t: &DVector<f64>, abar: f64) -> Result<DVector<f64>> {
        self.check_point(x_t)?;
        let factors = self.diffused(abar)?;
        Ok(softmax(&self.log_joint(&factors, x_t)))
    }

    /// `p(i | x_0)`, proportional to `w_i N(x_0; mu_i, Sigma_i)`.
    pub fn component_posterior(&self, x0: &DVector<f64>) -> DVector<f64> {
        self.diffused_posterior(x0, 1.0).expect("abar = 1 is always valid for a validated mixture")
    }

    pub fn component_posterior_batch(&self, x0: &DMatrix<f64>) -> DMatrix<f64> {
        let factors = self.diffused(1.0).expect("validated mixture");
        let mut out = DMatrix::zeros(x0.nrows(), self.n_components());
        for i in 0..x0.nrows() {
            let row = x0.row(i).transpose();
            out.set_row(i, &softmax(&self.log_joint(&factors, &row)).transpose());
        }
        out
    }

    /// Index of the most probable component for each row.
    pub fn assign(&self, x0: &DMatrix<f64>) -> Vec<usize> {
        let post = self.component_posterior_batch(x0);
        post.row_iter().map(|r| r.transpose().argmax().0).collect()
    }

    fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(shape(format!("expected a point of dimension {}, got {}", self.dim, x.len())));
        }
        Ok(())
    }
}

/// `N(0, Sigma)` with `Sigma = U diag(rho) U^T`.
#[derive(Debug, Clone)]
pub struct CenteredGaussianPrior {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl CenteredGaussianPrior {
    pub fn new(eigenvalues: DVector<f64>, eigenvectors: DMatrix<f64>) -> Result<Self> {
        let d = eigenvalues.len();
        if d == 0 || eigenvectors.nrows() != d || eigenvectors.ncols() != d {
            return Err(shape("eigenvector matrix must be d x d"));
        }
        if eigenvalues.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(invalid("covariance eigenvalues must be positive"));
        }
        if eigenvalues.as_slice().windows(2).any(|w| w[0] < w[1]) {
            return Err(invalid("covariance eigenvalues must be sorted in descending order"));
        }
        let gram = eigenvectors.transpose() * &eigenvectors;
        if (gram - DMatrix::identity(d, d)).amax() > 1e-10 {
            return Err(invalid("eigenvectors are not orthonormal"));
        }
        Ok(Self { eigenvalues, eigenvectors })
    }

    /// Spectrum `scale * ratio^(k-1)`, `k = 1..=dim`. The eigenbasis is the
    /// identity, or a Haar-random rotation when `rotation_seed` is given.
    pub fn geometric(dim: usize, scale: f64, ratio: f64, rotation_seed: Option<u64>) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) || !(scale > 0.0) {
            return Err(invalid("geometric spectrum needs scale > 0 and ratio in (0, 1]"));
        }
        let rho = DVector::from_iterator(dim, (0..dim).map(|k| scale * ratio.powi(k as i32)));
        let u = match rotation_seed {
            None => DMatrix::identity(dim, dim),
            Some(seed) => random_orthogonal(dim, seed),
        };
        Self::new(rho, u)
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.eigenvectors * DMatrix::from_diagonal(&self.eigenvalues) * self.eigenvectors.transpose()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Samples {
        let mut rng = rng_from_seed(seed);
        let mut z = gaussian_matrix(n, self.dim(), &mut rng);
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col *= self.eigenvalues[j].sqrt();
        }
        Samples { x: z * self.eigenvectors.transpose(), labels: None }
    }

    fn marginal_variances(&self, abar: f64) -> DVector<f64> {
        self.eigenvalues.map(|r| abar * r + 1.0 - abar)
    }

    pub fn score_t_batch(&self, x: &DMatrix<f64>, abar: f64) -> Result<DMatrix<f64>> {
        check_abar(abar)?;
        if x.ncols() != self.dim() {
            return Err(shape(format!("expected {} columns, got {}", self.dim(), x.ncols())));
        }
        let v = self.marginal_variances(abar);
        let mut proj = x * &self.eigenvectors;
        for (j, mut col) in proj.column_iter_mut().enumerate() {
            col /= -v[j];
        }
        Ok(proj * self.eigenvectors.transpose())
    }

    pub fn score_t(&self, x: &DVector<f64>, abar: f64) -> Result<DVector<f64>> {
        let m = self.score_t_batch(&DMatrix::from_row_slice(1, x.len(), x.as_slice()), abar)?;
        Ok(m.row(0).transpose())
    }

    pub fn log_density_t(&self, x: &DVector<f64>, abar: f64) -> Result<f64> {
        check_abar(abar)?;
        if x.len() != self.dim() {
            return Err(shape("point dimension mismatch"));
        }
        let v = self.marginal_variances(abar);
        let y = self.eigenvectors.transpose() * x;
        let quad: f64 = y.iter().zip(v.iter()).map(|(yi, vi)| yi * yi / vi).sum();
        let logdet: f64 = v.iter().map(|vi| vi.ln()).sum();
        Ok(-0.5 * (quad + logdet + self.dim() as f64 * LN_TAU))
    }

    pub fn to_mixture(&self) -> GaussianMixturePrior {
        let c = self.covariance();
        let c = (&c + c.transpose()) * 0.5;
        GaussianMixturePrior::new(vec![1.0], vec![DVector::zeros(self.dim())], vec![c]).expect("positive definite")
    }
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with the
/// sign of `R`'s diagonal fixed).
pub fn random_orthogonal(dim: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    let g = gaussian_matrix(dim, dim, &mut rng);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ManifoldKind {
    Circle { radius: f64 },
    Square { half_width: f64 },
    Disk { radius: f64 },
    Annulus { r_in: f64, r_out: f64 },
}

/// Uniform distributions on simple planar sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManifoldPrior {
    kind: ManifoldKind,
}

impl ManifoldPrior {
    pub fn new(kind: ManifoldKind) -> Result<Self> {
        let ok = match kind {
            ManifoldKind::Circle { radius } | ManifoldKind::Disk { radius } => radius > 0.0,
            ManifoldKind::Square { half_width } => half_width > 0.0,
            ManifoldKind::Annulus { r_in, r_out } => r_in >= 0.0 && r_out > r_in,
        };
        if !ok {
            return Err(invalid(format!("invalid geometry {kind:?}")));
        }
        Ok(Self { kind })
    }

    pub fn unit_circle() -> Self {
        Self { kind: ManifoldKind::Circle { radius: 1.0 } }
    }

    pub fn kind(&self) -> ManifoldKind {
        self.kind
    }

    pub fn sample(&self, n: usize, seed: u64) -> Samples {
        let mut rng = rng_from_seed(seed);
        let mut x = DMatrix::zeros(n, 2);
        for i in 0..n {
            let (a, b) = match self.kind {
                ManifoldKind::Circle { radius } => {
                    let th = TAU * rng.random::<f64>();
                    (radius * th.cos(), radius * th.sin())
                }
                ManifoldKind::Square { half_width } => (
                    half_width * (2.0 * rng.random::<f64>() - 1.0),
                    half_width * (2.0 * rng.random::<f64>() - 1.0),
                ),
                ManifoldKind::Disk { radius } => {
                    let th = TAU * rng.random::<f64>();
                    let r = radius * rng.random::<f64>().sqrt();
                    (r * th.cos(), r * th.sin())
                }
                ManifoldKind::Annulus { r_in, r_out } => {
                    let th = TAU * rng.random::<f64>();
                    let u: f64 = rng.random();
                    let r = (u * (r_out * r_out - r_in * r_in) + r_in * r_in).sqrt();
                    (r * th.cos(), r * th.sin())
                }
            };
            x[(i, 0)] = a;
            x[(i, 1)] = b;
        }
        Samples { x, labels: None }
    }
}

/// Finitely many atoms with positive masses.
#[derive(Debug, Clone)]
pub struct DiscretePrior {
    atoms: Vec<DVector<f64>>,
    masses: Vec<f64>,
}

impl DiscretePrior {
    pub fn new(atoms: Vec<DVector<f64>>, masses: Vec<f64>) -> Result<Self> {
        check_simplex(&masses, "atom masses")?;
        if atoms.len() != masses.len() {
            return Err(shape("atoms and masses must have equal length"));
        }
        let d = atoms[0].len();
        if d == 0 || atoms.iter().any(|a| a.len() != d) {
            return Err(shape("atoms must share a positive dimension"));
        }
        Ok(Self { atoms, masses })
    }

    pub fn point_mass(point: DVector<f64>) -> Self {
        Self { atoms: vec![point], masses: vec![1.0] }
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    pub fn atoms(&self) -> &[DVector<f64>] {
        &self.atoms
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn has_duplicate_atoms(&self) -> bool {
        for i in 0..self.atoms.len() {
            for j in 0..i {
                if (&self.atoms[i] - &self.atoms[j]).amax() == 0.0 {
                    return true;
                }
            }
        }
        false
    }

    pub fn sample(&self, n: usize, seed: u64) -> Samples {
        let mut rng = rng_from_seed(seed);
        let pick = WeightedIndex::new(&self.masses).expect("validated masses");
        let mut x = DMatrix::zeros(n, self.dim());
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let j = pick.sample(&mut rng);
            x.set_row(i, &self.atoms[j].transpose());
            labels.push(j);
        }
        Samples { x, labels: Some(labels) }
    }

    fn log_joint(&self, x: &DVector<f64>, abar: f64) -> Vec<f64> {
        let s = abar.sqrt();
        let var = 1.0 - abar;
        let d = self.dim() as f64;
        self.atoms
            .iter()
            .zip(&self.masses)
            .map(|(a, m)| m.ln() - 0.5 * (x - a * s).norm_squared() / var - 0.5 * d * (LN_TAU + var.ln()))
            .collect()
    }

    fn check_noisy(&self, abar: f64) -> Result<()> {
        if !(abar >= 0.0 && abar < 1.0) {
            return Err(invalid(format!("a discrete prior has a density only for abar in [0, 1), got {abar}")));
        }
        Ok(())
    }

    /// `p(atom_j | x_t)` for every atom.
    pub fn atom_posterior(&self, x_t: &DVector<f64>, abar: f64) -> Result<DVector<f64>> {
        self.check_noisy(abar)?;
        Ok(softmax(&self.log_joint(x_t, abar)))
    }

    pub fn log_density_t(&self, x: &DVector<f64>, abar: f64) -> Result<f64> {
        self.check_noisy(abar)?;
        Ok(log_sum_exp(&self.log_joint(x, abar)))
    }

    pub fn score_t(&self, x: &DVector<f64>, abar: f64) -> Result<DVector<f64>> {
        let r = self.atom_posterior(x, abar)?;
        let s = abar.sqrt();
        let mut out = DVector::zeros(self.dim());
        for (a, ri) in self.atoms.iter().zip(r.iter()) {
            out -= (x - a * s) * (*ri / (1.0 - abar));
        }
        Ok(out)
    }
}

/// Any clean-data distribution.
#[derive(Debug, Clone)]
pub enum Prior {
    GaussianMixture(GaussianMixturePrior),
    CenteredGaussian(CenteredGaussianPrior),
    Manifold(ManifoldPrior),
    Discrete(DiscretePrior),
}

impl Prior {
    pub fn dim(&self) -> usize {
        match self {
            Prior::GaussianMixture(p) => p.dim(),
            Prior::CenteredGaussian(p) => p.dim(),
            Prior::Manifold(_) => 2,
            Prior::Discrete(p) => p.dim(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Prior::GaussianMixture(_) => "gaussian_mixture",
            Prior::CenteredGaussian(_) => "centered_gaussian",
            Prior::Manifold(_) => "manifold",
            Prior::Discrete(_) => "discrete",
        }
    }

    /// `n` i.i.d. draws; deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Samples {
        match self {
            Prior::GaussianMixture(p) => p.sample(n, seed),
            Prior::CenteredGaussian(p) => p.sample(n, seed),
            Prior::Manifold(p) => p.sample(n, seed),
            Prior::Discrete(p) => p.sample(n, seed),
        }
    }

    pub fn has_exact_score(&self) -> bool {
        !matches!(self, Prior::Manifold(_))
    }

    /// Exact score of the noisy marginal for each row of `x`.
    pub fn score_t_batch(&self, x: &DMatrix<f64>, abar: f64) -> Result<DMatrix<f64>> {
        match self {
            Prior::GaussianMixture(p) => p.score_t_batch(x, abar),
            Prior::CenteredGaussian(p) => p.score_t_batch(x, abar),
            Prior::Discrete(p) => {
                let mut out = DMatrix::zeros(x.nrows(), x.ncols());
                for i in 0..x.nrows() {
                    out.set_row(i, &p.score_t(&x.row(i).transpose(), abar)?.transpose());
                }
                Ok(out)
            }
            Prior::Manifold(_) => Err(Error::Unsupported("exact scores (manifold prior)".into())),
        }
    }

    pub fn log_density_t(&self, x: &DVector<f64>, abar: f64) -> Result<f64> {
        match self {
            Prior::GaussianMixture(p) => p.log_density_t(x, abar),
            Prior::CenteredGaussian(p) => p.log_density_t(x, abar),
            Prior::Discrete(p) => p.log_density_t(x, abar),
            Prior::Manifold(_) => Err(Error::Unsupported("closed-form densities (manifold prior)".into())),
        }
    }

    pub fn as_mixture(&self) -> Result<&GaussianMixturePrior> {
        match self {
            Prior::GaussianMixture(p) => Ok(p),
            _ => Err(Error::Unsupported(format!("component labels ({} prior)", self.name()))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalKind {
    ClassProbability,
    Embedding,
    TargetVector,
}

type SignalFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

#[derive(Clone)]
enum SignalImpl {
    Constant(DVector<f64>),
    ClassSet { prior: GaussianMixturePrior, classes: Vec<usize> },
    ClassProbabilities(GaussianMixturePrior),
    Identity,
    Custom(SignalFn),
}

/// A clean-data signal `h(x_0)` in `R^{D_h}`.
#[derive(Clone)]
pub struct GuidanceSignal {
    kind: SignalKind,
    dim: usize,
    imp: SignalImpl,
}

impl fmt::Debug for GuidanceSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GuidanceSignal").field("kind", &self.kind).field("dim", &self.dim).finish()
    }
}

impl GuidanceSignal {
    pub fn constant(value: DVector<f64>) -> Self {
        Self { kind: SignalKind::TargetVector, dim: value.len(), imp: SignalImpl::Constant(value) }
    }

    /// `h(x_0) = sum_{y in classes} p(y | x_0)`, a scalar.
    pub fn class_set(prior: &GaussianMixturePrior, classes: &[usize]) -> Result<Self> {
        if classes.is_empty() {
            return Err(invalid("empty conditioning set"));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= prior.n_components()) {
            return Err(invalid(format!("class {c} out of range for a {}-component mixture", prior.n_components())));
        }
        let mut classes = classes.to_vec();
        classes.sort_unstable();
        classes.dedup();
        Ok(Self {
            kind: SignalKind::ClassProbability,
            dim: 1,
            imp: SignalImpl::ClassSet { prior: prior.clone(), classes },
        })
    }

    /// The full vector of component posteriors.
    pub fn class_probabilities(prior: &GaussianMixturePrior) -> Self {
        Self {
            kind: SignalKind::ClassProbability,
            dim: prior.n_components(),
            imp: SignalImpl::ClassProbabilities(prior.clone()),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self { kind: SignalKind::Embedding, dim, imp: SignalImpl::Identity }
    }

    pub fn custom<F>(kind: SignalKind, dim: usize, f: F) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self { kind, dim, imp: SignalImpl::Custom(Arc::new(f)) }
    }

    pub fn kind(&self) -> SignalKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval_one(&self, x0: &DVector<f64>) -> DVector<f64> {
        let v = match &self.imp {
            SignalImpl::Constant(c) => c.clone(),
            SignalImpl::ClassSet { prior, classes } => {
                let p = prior.component_posterior(x0);
                DVector::from_element(1, classes.iter().map(|&c| p[c]).sum::<f64>())
            }
            SignalImpl::ClassProbabilities(prior) => prior.component_posterior(x0),
            SignalImpl::Identity => x0.clone(),
            SignalImpl::Custom(f) => f(x0),
        };
        if self.kind == SignalKind::ClassProbability {
            v.map(|p| p.clamp(0.0, 1.0))
        } else {
            v
        }
    }

    /// The matrix `H` whose row `i` is `h(x0_i)`.
    pub fn eval(&self, x0: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x0.nrows() == 0 {
            return Err(invalid("empty batch"));
        }
        let mut h = DMatrix::zeros(x0.nrows(), self.dim);
        for i in 0..x0.nrows() {
            let v = self.eval_one(&x0.row(i).transpose());
            if v.len() != self.dim {
                return Err(shape(format!("signal returned {} values, expected {}", v.len(), self.dim)));
            }
            h.set_row(i, &v.transpose());
        }
        Ok(h)
    }
}
