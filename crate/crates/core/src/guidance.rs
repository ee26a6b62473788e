//! Spectral guidance: coefficient estimation, truncated posterior
//! expectations, guidance gradients and the guided DDIM sampler.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::diffusion::{reverse_chain, DiffusionSchedule, TrajectoryPoint};
use crate::error::{invalid, shape, Error, Result};
use crate::net::SpectralNetwork;
use crate::priors::{GaussianMixturePrior, GuidanceSignal, Prior, SignalKind};
use crate::training::ReferenceBasis;

pub const DEFAULT_DELTA: f64 = 1e-4;

/// Per-timestep expansion coefficients `c_t = Phi_t^T H / M`, each `(K+1) x D_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceCoefficients {
    pub per_t: BTreeMap<usize, DMatrix<f64>>,
    pub kind: SignalKind,
}

impl GuidanceCoefficients {
    pub fn get(&self, t: usize) -> Result<&DMatrix<f64>> {
        self.per_t.get(&t).ok_or(Error::MissingTimestep(t))
    }

    pub fn signal_dim(&self) -> usize {
        self.per_t.values().next().map_or(0, |c| c.ncols())
    }
}

pub fn estimate_coefficients(basis: &ReferenceBasis, h: &DMatrix<f64>, kind: SignalKind) -> Result<GuidanceCoefficients> {
    let m = basis.size();
    if h.nrows() != m {
        return Err(shape(format!("H has {} rows but the reference set has {m}", h.nrows())));
    }
    if h.ncols() == 0 {
        return Err(shape("H has no columns"));
    }
    let per_t = basis
        .entries
        .iter()
        .map(|(&t, e)| (t, e.phi.transpose() * h / m as f64))
        .collect();
    Ok(GuidanceCoefficients { per_t, kind })
}

/// Evaluates `signal` on the reference set and estimates its coefficients.
pub fn coefficients_for_signal(basis: &ReferenceBasis, signal: &GuidanceSignal) -> Result<GuidanceCoefficients> {
    estimate_coefficients(basis, &signal.eval(&basis.x0)?, signal.kind())
}

#[derive(Debug, Clone, PartialEq)]
pub enum GuidanceLoss {
    /// `log z` for a scalar class-probability signal.
    LogLikelihood,
    /// `z^T e / |z|`.
    Cosine { target: DVector<f64> },
    /// `-|z - target|^2`.
    NegSquaredError { target: DVector<f64> },
}

impl GuidanceLoss {
    pub fn name(&self) -> &'static str {
        match self {
            GuidanceLoss::LogLikelihood => "log-likelihood",
            GuidanceLoss::Cosine { .. } => "cosine",
            GuidanceLoss::NegSquaredError { .. } => "negative-squared-error",
        }
    }

    /// Scalar value of the loss at `z`, with the log-likelihood floored at `delta`.
    pub fn value(&self, z: &DVector<f64>, delta: f64) -> f64 {
        match self {
            GuidanceLoss::LogLikelihood => z[0].max(delta).ln(),
            GuidanceLoss::Cosine { target } => z.dot(target) / z.norm(),
            GuidanceLoss::NegSquaredError { target } => -(z - target).norm_squared(),
        }
    }

    /// `dL/dz`. The log-likelihood divides by `max(z, delta)`.
    pub fn cotangent(&self, z: &DVector<f64>, delta: f64) -> DVector<f64> {
        match self {
            GuidanceLoss::LogLikelihood => DVector::from_element(1, 1.0 / z[0].max(delta)),
            GuidanceLoss::Cosine { target } => {
                let n = z.norm();
                if n == 0.0 {
                    return DVector::zeros(z.len());
                }
                target / n - z * (z.dot(target) / (n * n * n))
            }
            GuidanceLoss::NegSquaredError { target } => (z - target) * -2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub kappa: f64,
    /// Number of non-constant modes used; `None` uses all `K`.
    pub rank: Option<usize>,
    pub loss: GuidanceLoss,
    pub delta: f64,
    /// Inclusive range of source timesteps at which guidance is applied;
    /// `None` applies it everywhere. `lo > hi` is an empty window.
    pub window: Option<(usize, usize)>,
    /// Evaluate the guidance gradient at the source timestep `t` instead of
    /// the destination `t_prev`.
    pub eval_at_source: bool,
}

impl GuidanceConfig {
    pub fn log_likelihood(kappa: f64) -> Self {
        Self { kappa, rank: None, loss: GuidanceLoss::LogLikelihood, delta: DEFAULT_DELTA, window: None, eval_at_source: false }
    }

    pub fn with_window(mut self, lo: usize, hi: usize) -> Self {
        self.window = Some((lo, hi));
        self
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.rank = Some(rank);
        self
    }

    pub fn in_window(&self, t: usize) -> bool {
        self.window.is_none_or(|(lo, hi)| lo <= t && t <= hi)
    }

    pub fn validate(&self, coeffs: &GuidanceCoefficients, k: usize) -> Result<()> {
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return Err(invalid(format!("kappa must be a non-negative number, got {}", self.kappa)));
        }
        if !(self.delta > 0.0) {
            return Err(invalid(format!("delta must be positive, got {}", self.delta)));
        }
        if let Some(r) = self.rank {
            if r > k {
                return Err(invalid(format!("rank {r} exceeds the network's K = {k}")));
            }
        }
        let dh = coeffs.signal_dim();
        match (&self.loss, coeffs.kind) {
            (GuidanceLoss::LogLikelihood, SignalKind::ClassProbability) if dh == 1 => Ok(()),
            (GuidanceLoss::LogLikelihood, _) => Err(invalid(
                "log-likelihood guidance needs a scalar class-probability signal",
            )),
            (GuidanceLoss::Cosine { target }, SignalKind::Embedding)
            | (GuidanceLoss::NegSquaredError { target }, SignalKind::TargetVector) => {
                if target.len() != dh {
                    Err(shape(format!("target has {} entries, signal has {dh}", target.len())))
                } else {
                    Ok(())
                }
            }
            (loss, kind) => Err(invalid(format!("{} loss is inconsistent with a {kind:?} signal", loss.name()))),
        }
    }

    fn used_modes(&self, k: usize) -> usize {
        self.rank.unwrap_or(k).min(k)
    }
}

/// Whitened features `[1, (f - mu) W]` truncated to `rank + 1` columns, the
/// matching coefficient rows, and the trace of the raw forward pass.
fn truncated_features(
    net: &SpectralNetwork,
    basis: &ReferenceBasis,
    x_t: &DMatrix<f64>,
    t: usize,
) -> Result<(DMatrix<f64>, crate::net::Trace)> {
    let entry = basis.entry(t)?;
    let (f, trace) = net.forward_traced(x_t, t)?;
    Ok((entry.stats.apply_with_constant(&f), trace))
}

/// `c_t^T f^w(x_t, t)` per row, using the leading `rank` non-constant modes.
pub fn posterior_expectation(
    net: &SpectralNetwork,
    basis: &ReferenceBasis,
    coeffs: &GuidanceCoefficients,
    x_t: &DMatrix<f64>,
    t: usize,
    rank: Option<usize>,
) -> Result<DMatrix<f64>> {
    let c = coeffs.get(t)?;
    let r = rank.unwrap_or(net.output_dim()).min(net.output_dim());
    let fw = basis.entry(t)?.stats.apply_with_constant(&net.forward(x_t, t)?);
    Ok(fw.columns(0, r + 1) * c.rows(0, r + 1))
}

/// Guidance vectors `grad_x L(c_t^T f^w(x_t, t))` for every row, plus the
/// scalar diagnostic value per row (the floored posterior for class signals,
/// the loss value otherwise).
pub fn guidance_gradient(
    net: &SpectralNetwork,
    basis: &ReferenceBasis,
    coeffs: &GuidanceCoefficients,
    config: &GuidanceConfig,
    x_t: &DMatrix<f64>,
    t: usize,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let k = net.output_dim();
    let r = config.used_modes(k);
    let c = coeffs.get(t)?;
    let stats = &basis.entry(t)?.stats;
    let (fw, trace) = truncated_features(net, basis, x_t, t)?;
    let z = fw.columns(0, r + 1) * c.rows(0, r + 1);
    let mut cot_w = DMatrix::zeros(x_t.nrows(), k);
    let mut values = Vec::with_capacity(x_t.nrows());
    let c_used = c.rows(1, r);
    for i in 0..x_t.nrows() {
        let zi = z.row(i).transpose();
        let dz = config.loss.cotangent(&zi, config.delta);
        // dL/df^w for the non-constant modes; truncated modes get zero.
        let dfw = &c_used * &dz;
        cot_w.view_mut((i, 0), (1, r)).copy_from(&dfw.transpose());
        values.push(match config.loss {
            GuidanceLoss::LogLikelihood => zi[0].clamp(config.delta, 1.0),
            _ => config.loss.value(&zi, config.delta),
        });
    }
    let cot = cot_w * stats.w.transpose();
    let (_, g) = net.backward(&trace, &cot)?;
    Ok((g, values))
}

/// One row of the per-step guidance diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceDiagnostic {
    pub sample_id: usize,
    pub t: usize,
    pub grad_norm: f64,
    pub posterior_value: f64,
}

#[derive(Debug, Clone)]
pub struct GuidedOutput {
    pub samples: DMatrix<f64>,
    pub failed: Vec<bool>,
    pub diagnostics: Vec<GuidanceDiagnostic>,
    pub trajectory: Vec<TrajectoryPoint>,
}

impl GuidedOutput {
    pub fn failures(&self) -> usize {
        self.failed.iter().filter(|&&f| f).count()
    }
}

/// Sampler settings shared by guided and unguided runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerSettings {
    pub n: usize,
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
    pub record_trajectory: bool,
}

/// Exact-score DDIM with spectral guidance. After each DDIM step from `t` to
/// `t_prev`, rows are moved by `kappa sqrt(1 - abar_t) g`, where `g` is
/// evaluated on the new state at `t_prev` (or at `t` with
/// `eval_at_source`). Guidance is applied only when the source `t` lies in
/// the window, and never on the final step into `t = 0`.
#[allow(clippy::too_many_arguments)]
pub fn guided_sample(
    prior: &Prior,
    net: &SpectralNetwork,
    basis: &ReferenceBasis,
    coeffs: &GuidanceCoefficients,
    config: &GuidanceConfig,
    schedule: &DiffusionSchedule,
    settings: &SamplerSettings,
) -> Result<GuidedOutput> {
    if !prior.has_exact_score() {
        return Err(Error::Unsupported(format!("sampling without an exact score ({} prior)", prior.name())));
    }
    if prior.dim() != net.input_dim() {
        return Err(shape(format!("prior has dimension {}, network expects {}", prior.dim(), net.input_dim())));
    }
    config.validate(coeffs, net.output_dim())?;
    let mut diagnostics = Vec::new();
    let active = config.kappa > 0.0;
    let mut hook = |_step: usize, t: usize, t_prev: usize, x: &mut DMatrix<f64>, failed: &[bool]| -> Result<()> {
        if !active || !config.in_window(t) {
            return Ok(());
        }
        let t_eval = if config.eval_at_source { t } else { t_prev };
        if t_eval == 0 {
            return Ok(());
        }
        let mut live = x.clone();
        for (i, f) in failed.iter().enumerate() {
            if *f {
                live.row_mut(i).fill(0.0);
            }
        }
        let (g, values) = guidance_gradient(net, basis, coeffs, config, &live, t_eval)?;
        let scale = config.kappa * (1.0 - schedule.alpha_bar(t)).sqrt();
        for i in 0..x.nrows() {
            if failed[i] {
                continue;
            }
            let gi = g.row(i);
            let norm = gi.norm();
            if !norm.is_finite() {
                log::warn!("non-finite guidance gradient for sample {i} at t = {t_eval}; trajectory aborted");
                x.row_mut(i).fill(f64::NAN);
            } else {
                let upd = gi * scale;
                let mut row = x.row_mut(i);
                row += upd;
            }
            diagnostics.push(GuidanceDiagnostic { sample_id: i, t: t_eval, grad_norm: norm, posterior_value: values[i] });
        }
        Ok(())
    };
    let out = reverse_chain(
        prior,
        schedule,
        settings.n,
        settings.steps,
        settings.eta,
        settings.seed,
        settings.record_trajectory,
        &mut hook,
    )?;
    Ok(GuidedOutput { samples: out.samples, failed: out.failed, diagnostics, trajectory: out.trajectory })
}

/// Fraction of finite samples whose most likely component lies in `targets`;
/// failed samples count as misses.
pub fn target_accuracy(prior: &GaussianMixturePrior, samples: &DMatrix<f64>, targets: &[usize]) -> f64 {
    if samples.nrows() == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    for row in samples.row_iter() {
        if row.iter().all(|v| v.is_finite()) {
            let x = row.transpose();
            let p = prior.component_posterior(&x);
            if targets.contains(&p.argmax().0) {
                hits += 1;
            }
        }
    }
    hits as f64 / samples.nrows() as f64
}

/// Linear interpolation of a `(t, value)` curve sorted by `t`, clamped at the ends.
pub fn interpolate_curve(curve: &[(usize, f64)], t: f64) -> f64 {
    if curve.is_empty() {
        return f64::NAN;
    }
    if t <= curve[0].0 as f64 {
        return curve[0].1;
    }
    for w in curve.windows(2) {
        let (t0, v0) = (w[0].0 as f64, w[0].1);
        let (t1, v1) = (w[1].0 as f64, w[1].1);
        if t <= t1 {
            return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
        }
    }
    curve[curve.len() - 1].1
}

/// Curve divided by its maximum.
pub fn normalize_curve(curve: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let max = curve.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    curve.iter().map(|&(t, v)| (t, if max > 0.0 { v / max } else { 0.0 })).collect()
}

/// `[t_hi, t_lo]` where a normalised, decreasing-in-`t` curve first drops to
/// `hi` and then to `lo` (linearly interpolated).
pub fn transition_interval(curve: &[(usize, f64)], hi: f64, lo: f64) -> Option<(f64, f64)> {
    let crossing = |level: f64| -> Option<f64> {
        if curve.first()?.1 <= level {
            return Some(curve[0].0 as f64);
        }
        curve.windows(2).find(|w| w[0].1 > level && w[1].1 <= level).map(|w| {
            let (t0, v0, t1, v1) = (w[0].0 as f64, w[0].1, w[1].0 as f64, w[1].1);
            t0 + (t1 - t0) * (v0 - level) / (v0 - v1)
        })
    };
    Some((crossing(hi)?, crossing(lo)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSweepRow {
    pub tau: usize,
    pub accuracy: f64,
    pub trace_proxy: f64,
}

/// Guided accuracy with guidance restricted to `[tau - half_width, tau + half_width]`
/// for each centre, alongside the normalised trace proxy at `tau`.
#[allow(clippy::too_many_arguments)]
pub fn window_sweep(
    prior: &Prior,
    net: &SpectralNetwork,
    basis: &ReferenceBasis,
    coeffs: &GuidanceCoefficients,
    config: &GuidanceConfig,
    schedule: &DiffusionSchedule,
    settings: &SamplerSettings,
    targets: &[usize],
    centers: &[usize],
    half_width: usize,
    trace_curve: &[(usize, f64)],
) -> Result<Vec<WindowSweepRow>> {
    let gmm = prior.as_mixture()?;
    let total = schedule.total_steps();
    let norm = normalize_curve(trace_curve);
    let mut rows = Vec::with_capacity(centers.len());
    for &tau in centers {
        if tau == 0 || tau > total {
            return Err(invalid(format!("window centre {tau} outside 1..={total}")));
        }
        let cfg = config.clone().with_window(tau.saturating_sub(half_width).max(1), (tau + half_width).min(total));
        let out = guided_sample(prior, net, basis, coeffs, &cfg, schedule, settings)?;
        rows.push(WindowSweepRow {
            tau,
            accuracy: target_accuracy(gmm, &out.samples, targets),
            trace_proxy: interpolate_curve(&norm, tau as f64),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::unconditional_sample;
    use crate::net::NetConfig;
    use crate::rng::{gaussian_matrix, rng_from_seed};
    use crate::training::{compute_reference_stats, ReferenceConfig};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    struct Fixture {
        prior: Prior,
        gmm: GaussianMixturePrior,
        net: SpectralNetwork,
        basis: ReferenceBasis,
        schedule: DiffusionSchedule,
    }

    fn fixture() -> Fixture {
        let gmm = GaussianMixturePrior::pentagon_benchmark();
        let prior = Prior::GaussianMixture(gmm.clone());
        let schedule = DiffusionSchedule::ddpm_default().with_guided_timesteps(
            DiffusionSchedule::ddpm_default().sampling_timesteps(20).unwrap(),
        ).unwrap();
        let mut net = SpectralNetwork::new(NetConfig::new(2, 6).with_width(16).with_blocks(1).with_time_freqs(4), 3).unwrap();
        crate::net::perturb_params(net.params_mut(), 0.3, &mut rng_from_seed(4));
        let basis = compute_reference_stats(&net, &prior, &schedule, &ReferenceConfig::new(600, 5)).unwrap();
        Fixture { prior, gmm, net, basis, schedule }
    }

    #[test]
    fn constant_mode_row_is_column_mean() {
        let f = fixture();
        let sig = GuidanceSignal::class_set(&f.gmm, &[0, 2]).unwrap();
        let h = sig.eval(&f.basis.x0).unwrap();
        let c = estimate_coefficients(&f.basis, &h, sig.kind()).unwrap();
        let mean = h.column(0).sum() / h.nrows() as f64;
        for ct in c.per_t.values() {
            assert_abs_diff_eq!(ct[(0, 0)], mean, epsilon = 1e-12);
        }
        let bad = DMatrix::zeros(5, 1);
        assert!(estimate_coefficients(&f.basis, &bad, sig.kind()).is_err());
    }

    #[test]
    fn ones_and_self_columns_give_basis_vectors() {
        let f = fixture();
        let m = f.basis.size() as f64;
        let ones = DMatrix::from_element(f.basis.size(), 1, 1.0);
        let c = estimate_coefficients(&f.basis, &ones, SignalKind::TargetVector).unwrap();
        for ct in c.per_t.values() {
            assert_abs_diff_eq!(ct[(0, 0)], 1.0, epsilon = 1e-12);
            assert!(ct.rows(1, 6).amax() < 3.0 / m.sqrt());
        }
        let t = f.basis.timesteps()[3];
        let col = f.basis.entries[&t].phi.column(2).into_owned();
        let c = estimate_coefficients(&f.basis, &DMatrix::from_column_slice(col.len(), 1, col.as_slice()), SignalKind::TargetVector).unwrap();
        let ct = c.get(t).unwrap();
        for k in 0..7 {
            let expect = if k == 2 { 1.0 } else { 0.0 };
            assert!((ct[(k, 0)] - expect).abs() < 3.0 / m.sqrt(), "k={k}: {}", ct[(k, 0)]);
        }
    }

    #[test]
    fn constant_signal_expectation_is_constant() {
        let f = fixture();
        let sig = GuidanceSignal::constant(DVector::from_vec(vec![0.7, -2.0]));
        let c = coefficients_for_signal(&f.basis, &sig).unwrap();
        let x = gaussian_matrix(20, 2, &mut rng_from_seed(1));
        let t = f.basis.timesteps()[5];
        let pe = posterior_expectation(&f.net, &f.basis, &c, &x, t, None).unwrap();
        for r in pe.row_iter() {
            assert_abs_diff_eq!(r[0], 0.7, epsilon = 1e-12);
            assert_abs_diff_eq!(r[1], -2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn loss_cotangents() {
        let target = DVector::from_vec(vec![1.0, -2.0]);
        let nse = GuidanceLoss::NegSquaredError { target: target.clone() };
        assert_eq!(nse.cotangent(&target, 1e-4), DVector::zeros(2));
        let cos = GuidanceLoss::Cosine { target: target.clone() };
        let z = DVector::from_vec(vec![0.3, 0.4]);
        let g = cos.cotangent(&z, 1e-4);
        let h = 1e-6;
        for i in 0..2 {
            let mut zp = z.clone();
            zp[i] += h;
            let mut zm = z.clone();
            zm[i] -= h;
            let fd = (cos.value(&zp, 0.0) - cos.value(&zm, 0.0)) / (2.0 * h);
            assert_abs_diff_eq!(fd, g[i], epsilon = 1e-8);
        }
        let ll = GuidanceLoss::LogLikelihood;
        assert_eq!(ll.cotangent(&DVector::from_element(1, -0.5), 1e-4)[0], 1e4);
    }

    #[test]
    fn log_likelihood_gradient_matches_finite_differences() {
        let f = fixture();
        let sig = GuidanceSignal::class_set(&f.gmm, &[1]).unwrap();
        let c = coefficients_for_signal(&f.basis, &sig).unwrap();
        let cfg = GuidanceConfig::log_likelihood(3.0);
        let mut rng = rng_from_seed(9);
        let ts = f.basis.timesteps();
        let mut checked = 0;
        while checked < 50 {
            let t = ts[rng.random_range(0..ts.len())];
            let x = DMatrix::from_fn(1, 2, |_, _| rng.random_range(-3.0..3.0));
            let z = posterior_expectation(&f.net, &f.basis, &c, &x, t, None).unwrap()[(0, 0)];
            if z < 2.0 * cfg.delta {
                continue;
            }
            let (g, _) = guidance_gradient(&f.net, &f.basis, &c, &cfg, &x, t).unwrap();
            let h = 1e-5;
            for i in 0..2 {
                let mut xp = x.clone();
                xp[(0, i)] += h;
                let mut xm = x.clone();
                xm[(0, i)] -= h;
                let lp = posterior_expectation(&f.net, &f.basis, &c, &xp, t, None).unwrap()[(0, 0)].max(cfg.delta).ln();
                let lm = posterior_expectation(&f.net, &f.basis, &c, &xm, t, None).unwrap()[(0, 0)].max(cfg.delta).ln();
                let fd = (lp - lm) / (2.0 * h);
                let rel = (fd - g[(0, i)]).abs() / g.row(0).norm().max(1e-8);
                assert!(rel < 1e-4, "t={t}: {fd} vs {}", g[(0, i)]);
            }
            checked += 1;
        }
        // The gradient does not depend on kappa.
        let x = DMatrix::from_row_slice(1, 2, &[0.1, 0.2]);
        let a = guidance_gradient(&f.net, &f.basis, &c, &cfg, &x, ts[2]).unwrap().0;
        let b = guidance_gradient(&f.net, &f.basis, &c, &GuidanceConfig::log_likelihood(50.0), &x, ts[2]).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn zero_kappa_and_empty_window_reproduce_unconditional_sampling() {
        let f = fixture();
        let sig = GuidanceSignal::class_set(&f.gmm, &[0]).unwrap();
        let c = coefficients_for_signal(&f.basis, &sig).unwrap();
        let settings = SamplerSettings { n: 50, steps: 20, eta: 1.0, seed: 17, record_trajectory: false };
        let plain = unconditional_sample(&f.prior, &f.schedule, 50, 20, 1.0, 17).unwrap();
        let out = guided_sample(&f.prior, &f.net, &f.basis, &c, &GuidanceConfig::log_likelihood(0.0), &f.schedule, &settings).unwrap();
        assert_eq!(out.samples, plain);
        assert!(out.diagnostics.is_empty());
        let empty = GuidanceConfig::log_likelihood(5.0).with_window(500, 400);
        let out = guided_sample(&f.prior, &f.net, &f.basis, &c, &empty, &f.schedule, &settings).unwrap();
        assert_eq!(out.samples, plain);

        // A constant target-vector signal has zero gradient everywhere.
        let k = GuidanceSignal::constant(DVector::from_element(1, 0.4));
        let ck = coefficients_for_signal(&f.basis, &k).unwrap();
        let cfg = GuidanceConfig {
            loss: GuidanceLoss::NegSquaredError { target: DVector::from_element(1, 1.0) },
            ..GuidanceConfig::log_likelihood(2.0)
        };
        let out = guided_sample(&f.prior, &f.net, &f.basis, &ck, &cfg, &f.schedule, &settings).unwrap();
        assert_abs_diff_eq!(out.samples, plain, epsilon = 1e-9);
        assert!(out.diagnostics.iter().all(|d| d.grad_norm < 1e-9));
    }

    #[test]
    fn config_validation() {
        let f = fixture();
        let sig = GuidanceSignal::class_set(&f.gmm, &[0]).unwrap();
        let c = coefficients_for_signal(&f.basis, &sig).unwrap();
        assert!(GuidanceConfig::log_likelihood(-1.0).validate(&c, 6).is_err());
        assert!(GuidanceConfig::log_likelihood(1.0).with_rank(7).validate(&c, 6).is_err());
        let cos = GuidanceConfig { loss: GuidanceLoss::Cosine { target: DVector::zeros(1) }, ..GuidanceConfig::log_likelihood(1.0) };
        assert!(cos.validate(&c, 6).is_err());
        let bad_delta = GuidanceConfig { delta: 0.0, ..GuidanceConfig::log_likelihood(1.0) };
        assert!(bad_delta.validate(&c, 6).is_err());
    }

    #[test]
    fn curve_helpers() {
        let curve = vec![(0, 1.0), (100, 0.95), (200, 0.5), (300, 0.05), (400, 0.0)];
        let (hi, lo) = transition_interval(&curve, 0.9, 0.1).unwrap();
        assert_abs_diff_eq!(hi, 100.0 + 100.0 * 0.05 / 0.45, epsilon = 1e-12);
        assert_abs_diff_eq!(lo, 200.0 + 100.0 * 0.4 / 0.45, epsilon = 1e-12);
        assert_abs_diff_eq!(interpolate_curve(&curve, 250.0), 0.275, epsilon = 1e-12);
        assert_eq!(normalize_curve(&[(1, 2.0), (2, 1.0)]), vec![(1, 1.0), (2, 0.5)]);
    }
}
