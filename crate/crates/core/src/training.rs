//! Whitened cross-correlation objective, optimiser loop and per-timestep
//! reference statistics.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::diffusion::{corrupt, coupled_views_with, DiffusionSchedule};
use crate::error::{invalid, shape, Error, Result};
use crate::linalg::{center_rows, column_means, sorted_symmetric_eigen};
use crate::net::{GradContext, NetParams, SpectralNetwork};
use crate::priors::Prior;
use crate::rng::{rng_from_seed, substream};

/// `(mu, W)` with `W = V (Lambda + ridge I)^{-1/2}` for the sample covariance
/// `V Lambda V^T` of a batch of features.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningStats {
    pub mu: DVector<f64>,
    pub w: DMatrix<f64>,
    pub ridge: f64,
    /// Eigenvalues of the sample covariance, descending.
    pub covariance_eigenvalues: DVector<f64>,
}

impl WhiteningStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `(Z - mu) W`.
    pub fn apply(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        center_rows(z, &self.mu) * &self.w
    }

    /// `[1, (Z - mu) W]`.
    pub fn apply_with_constant(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let zw = self.apply(z);
        let mut out = DMatrix::from_element(z.nrows(), zw.ncols() + 1, 1.0);
        out.columns_mut(1, zw.ncols()).copy_from(&zw);
        out
    }
}

pub fn batch_whitening(z: &DMatrix<f64>, ridge: f64) -> Result<WhiteningStats> {
    if z.nrows() < 2 {
        return Err(invalid(format!("whitening needs at least 2 rows, got {}", z.nrows())));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(invalid(format!("ridge must be non-negative, got {ridge}")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("whitening input".into()));
    }
    let mu = column_means(z);
    let zc = center_rows(z, &mu);
    let cov = zc.transpose() * &zc / (z.nrows() - 1) as f64;
    let eig = sorted_symmetric_eigen(&cov)?;
    let mut w = eig.vectors.clone();
    for j in 0..w.ncols() {
        let v = eig.values[j].max(0.0) + ridge;
        if v <= 0.0 {
            return Err(Error::RankDeficient("whitening a singular covariance with zero ridge".into()));
        }
        w.column_mut(j).scale_mut(1.0 / v.sqrt());
    }
    Ok(WhiteningStats { mu, w, ridge, covariance_eigenvalues: eig.values })
}

/// Loss value and its gradients with respect to both feature views.
#[derive(Debug, Clone)]
pub struct SslOutput {
    pub loss: f64,
    /// `dL/dZ_tilde`.
    pub grad_tilde: DMatrix<f64>,
    /// `dL/dZ`, present only when the whitening view is not detached.
    pub grad_anchor: Option<DMatrix<f64>>,
}

fn check_views(z: &DMatrix<f64>, zt: &DMatrix<f64>) -> Result<()> {
    if z.shape() != zt.shape() {
        return Err(shape(format!("views are {:?} and {:?}", z.shape(), zt.shape())));
    }
    if z.iter().chain(zt.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss inputs".into()));
    }
    Ok(())
}

/// `L = -Tr((Z^w)^T Z_tilde^w) / (K (B - 1))`, both views whitened with the
/// statistics of `Z`.
pub fn ssl_loss(z: &DMatrix<f64>, z_tilde: &DMatrix<f64>, ridge: f64) -> Result<f64> {
    check_views(z, z_tilde)?;
    let stats = batch_whitening(z, ridge)?;
    let c = (z.ncols() * (z.nrows() - 1)) as f64;
    Ok(-(stats.apply(z).component_mul(&stats.apply(z_tilde))).sum() / c)
}

/// Loss and gradients. With `stop_gradient` the anchor view `Z` and its
/// whitening statistics are constants.
///
/// Writing `P = W W^T = (Sigma + xi I)^{-1}`, `Zc = Z - mu`, `Zt = Z_tilde - mu`
/// and `c = K (B - 1)`, the loss is `-<Zc P, Zt> / c`, so
/// `dL/dZ_tilde = -Zc P / c`. Without the stop-gradient the anchor also
/// receives `-Zt P / c + 2 Zc S / (B - 1)` with
/// `S = sym(P Zc^T Zt P) / c`, projected onto centred columns. The path
/// through `mu` inside `Zt` vanishes because `Zc` has zero column sums.
pub fn ssl_loss_and_grads(z: &DMatrix<f64>, z_tilde: &DMatrix<f64>, ridge: f64, stop_gradient: bool) -> Result<SslOutput> {
    check_views(z, z_tilde)?;
    if z.nrows() < 2 {
        return Err(invalid("loss needs at least 2 rows"));
    }
    let b = z.nrows();
    let k = z.ncols();
    let c = (k * (b - 1)) as f64;
    let stats = batch_whitening(z, ridge)?;
    let p = &stats.w * stats.w.transpose();
    let zc = center_rows(z, &stats.mu);
    let zt = center_rows(z_tilde, &stats.mu);
    let zcp = &zc * &p;
    let loss = -zcp.component_mul(&zt).sum() / c;
    let grad_tilde = &zcp * (-1.0 / c);
    let grad_anchor = if stop_gradient {
        None
    } else {
        let g = zc.transpose() * &zt;
        let pgp = &p * &g * &p;
        let s = (&pgp + pgp.transpose()) / (2.0 * c);
        let raw = &zt * &p * (-1.0 / c) + &zc * s * (2.0 / (b - 1) as f64);
        let mean = column_means(&raw);
        Some(center_rows(&raw, &mean))
    };
    Ok(SslOutput { loss, grad_tilde, grad_anchor })
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: NetParams,
    v: NetParams,
    step: i32,
}

impl Adam {
    pub fn new(params: &NetParams) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: NetParams::zeros_like(params),
            v: NetParams::zeros_like(params),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut NetParams, grads: &NetParams, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let gs = grads.named();
        for (((p, m), v), (_, g)) in params
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(gs)
        {
            let (ps, ms, vs, gs) = (p.as_mut_slice(), m.as_mut_slice(), v.as_mut_slice(), g.as_slice());
            for i in 0..ps.len() {
                ms[i] = b1 * ms[i] + (1.0 - b1) * gs[i];
                vs[i] = b2 * vs[i] + (1.0 - b2) * gs[i] * gs[i];
                ps[i] -= lr * (ms[i] / bc1) / ((vs[i] / bc2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Optimiser steps per epoch; the learning rate decays once per epoch.
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub ridge: f64,
    /// Training timesteps; `None` uses the schedule's guided set.
    pub timesteps: Option<Vec<usize>>,
    pub seed: u64,
    pub stop_gradient: bool,
    /// Detach the second view instead of the first.
    pub swap_views: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 2048,
            epochs: 100,
            steps_per_epoch: 50,
            learning_rate: 1e-4,
            lr_decay: 0.995,
            ridge: 1e-3,
            timesteps: None,
            seed: 0,
            stop_gradient: true,
            swap_views: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.batch_size < k + 2 {
            return Err(invalid(format!("batch size {} must be at least K + 2 = {}", self.batch_size, k + 2)));
        }
        if !(self.ridge > 0.0) {
            return Err(invalid(format!("ridge must be positive, got {}", self.ridge)));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(invalid("learning rate must be positive and decay in (0, 1]"));
        }
        if self.steps_per_epoch == 0 {
            return Err(invalid("steps per epoch must be positive"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub t: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingHistory {
    pub records: Vec<LossRecord>,
}

impl TrainingHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Mean loss per epoch.
    pub fn epoch_means(&self, steps_per_epoch: usize) -> Vec<f64> {
        self.records
            .chunks(steps_per_epoch.max(1))
            .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,t,loss,lr")?;
        for r in &self.records {
            writeln!(w, "{},{},{},{}", r.step, r.t, r.loss, r.lr)?;
        }
        Ok(())
    }
}

fn resolve_timesteps(schedule: &DiffusionSchedule, ts: &Option<Vec<usize>>) -> Result<Vec<usize>> {
    let ts = ts.clone().unwrap_or_else(|| schedule.guided_timesteps().to_vec());
    if ts.is_empty() {
        return Err(invalid("timestep set is empty"));
    }
    for &t in &ts {
        schedule.check_timestep(t)?;
    }
    Ok(ts)
}

/// Loss and parameter gradient on one coupled-view batch.
pub fn loss_and_gradient(
    net: &SpectralNetwork,
    x_a: &DMatrix<f64>,
    x_b: &DMatrix<f64>,
    t: usize,
    ridge: f64,
    stop_gradient: bool,
) -> Result<(f64, NetParams)> {
    let mut ctx_a = GradContext::new(net);
    let mut ctx_b = GradContext::new(net);
    let z = ctx_a.forward(x_a, t)?;
    let zt = ctx_b.forward(x_b, t)?;
    let out = ssl_loss_and_grads(&z, &zt, ridge, stop_gradient)?;
    let mut grads = ctx_b.parameter_gradient(&out.grad_tilde)?;
    if let Some(ga) = &out.grad_anchor {
        let extra = ctx_a.parameter_gradient(ga)?;
        for (dst, (_, src)) in grads.tensors_mut().into_iter().zip(extra.named()) {
            *dst += src;
        }
    }
    Ok((out.loss, grads))
}

/// Runs the training loop in place. `on_step` is called after every update.
pub fn train(
    net: &mut SpectralNetwork,
    prior: &Prior,
    schedule: &DiffusionSchedule,
    config: &TrainerConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainingHistory> {
    config.validate(net.output_dim())?;
    if prior.dim() != net.input_dim() {
        return Err(shape(format!("prior has dimension {}, network expects {}", prior.dim(), net.input_dim())));
    }
    let ts = resolve_timesteps(schedule, &config.timesteps)?;
    let mut adam = Adam::new(net.params());
    let mut rng = rng_from_seed(substream(config.seed, 0x7EA1));
    let mut history = TrainingHistory::default();
    let mut lr = config.learning_rate;
    for step in 0..config.total_steps() {
        if step > 0 && step % config.steps_per_epoch == 0 {
            lr *= config.lr_decay;
        }
        let t = ts[rng.random_range(0..ts.len())];
        let x0 = prior.sample(config.batch_size, substream(config.seed, step as u64 + 1)).x;
        let mut views = coupled_views_with(&x0, t, schedule, &mut rng)?;
        if config.swap_views {
            views = views.swapped();
        }
        let (loss, grads) = match loss_and_gradient(net, &views.x_t, &views.x_tilde, t, config.ridge, config.stop_gradient) {
            Ok(v) => v,
            Err(e) => {
                return Err(Error::Diverged {
                    step,
                    t,
                    detail: format!("{e}; parameter norm {:.4e}", net.params().norm()),
                })
            }
        };
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                step,
                t,
                detail: format!(
                    "loss {loss}, gradient norm {:.4e}, parameter norm {:.4e}",
                    grads.norm(),
                    net.params().norm()
                ),
            });
        }
        adam.update(net.params_mut(), &grads, lr);
        if !net.params().is_finite() {
            return Err(Error::Diverged { step, t, detail: "parameters became non-finite".into() });
        }
        let rec = LossRecord { step, t, loss, lr };
        on_step(&rec);
        history.records.push(rec);
    }
    Ok(history)
}

/// Objective value `-L` on a fresh coupled-view batch.
pub fn empirical_objective(
    net: &SpectralNetwork,
    prior: &Prior,
    schedule: &DiffusionSchedule,
    t: usize,
    batch: usize,
    ridge: f64,
    seed: u64,
) -> Result<f64> {
    let x0 = prior.sample(batch, substream(seed, 1)).x;
    let mut rng = rng_from_seed(substream(seed, 2));
    let v = coupled_views_with(&x0, t, schedule, &mut rng)?;
    Ok(-ssl_loss(&net.forward(&v.x_t, t)?, &net.forward(&v.x_tilde, t)?, ridge)?)
}

/// Per-timestep entry of a [`ReferenceBasis`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEntry {
    pub stats: WhiteningStats,
    /// `M x (K+1)` cached whitened features with a leading ones column.
    pub phi: DMatrix<f64>,
    /// Estimated squared singular values of the non-constant modes in
    /// column order (all zeros when modes were not aligned).
    pub mode_spectrum: DVector<f64>,
}

/// Reference clean set and per-timestep whitening of the trained network.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBasis {
    pub x0: DMatrix<f64>,
    pub ridge: f64,
    pub seed: u64,
    pub entries: BTreeMap<usize, ReferenceEntry>,
}

const BASIS_MAGIC: &[u8; 4] = b"SGRB";
const BASIS_VERSION: u32 = 1;

impl ReferenceBasis {
    pub fn size(&self) -> usize {
        self.x0.nrows()
    }

    pub fn k(&self) -> usize {
        self.entries.values().next().map_or(0, |e| e.stats.dim())
    }

    pub fn timesteps(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn entry(&self, t: usize) -> Result<&ReferenceEntry> {
        self.entries.get(&t).ok_or(Error::MissingTimestep(t))
    }

    /// Little-endian binary layout:
    ///
    /// ```text
    /// "SGRB" u32 version | u32 K | u64 M | u32 d | u32 n_t | f64 ridge | u64 seed
    /// x0: M*d f64 row-major
    /// n_t times: u64 t | mu: K f64 | W: K*K f64 row-major | spectrum: K f64
    ///            | Phi: M*(K+1) f64 row-major
    /// ```
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let k = self.k();
        let (m, d) = self.x0.shape();
        w.write_all(BASIS_MAGIC)?;
        w.write_all(&BASIS_VERSION.to_le_bytes())?;
        w.write_all(&(k as u32).to_le_bytes())?;
        w.write_all(&(m as u64).to_le_bytes())?;
        w.write_all(&(d as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        w.write_all(&self.ridge.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let put = |w: &mut W, m: &DMatrix<f64>| -> std::io::Result<()> {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    w.write_all(&m[(i, j)].to_le_bytes())?;
                }
            }
            Ok(())
        };
        put(&mut w, &self.x0)?;
        for (&t, e) in &self.entries {
            w.write_all(&(t as u64).to_le_bytes())?;
            for v in e.stats.mu.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
            put(&mut w, &e.stats.w)?;
            for v in e.mode_spectrum.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
            put(&mut w, &e.phi)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        fn bytes<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
            let mut b = [0u8; N];
            r.read_exact(&mut b)?;
            Ok(b)
        }
        fn mat<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
            let mut m = DMatrix::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    m[(i, j)] = f64::from_le_bytes(bytes::<8, R>(r)?);
                }
            }
            Ok(m)
        }
        let magic: [u8; 4] = bytes(&mut r)?;
        if &magic != BASIS_MAGIC {
            return Err(Error::Checkpoint("not a reference-basis file".into()));
        }
        let version = u32::from_le_bytes(bytes(&mut r)?);
        if version != BASIS_VERSION {
            return Err(Error::Checkpoint(format!("unsupported basis version {version}")));
        }
        let k = u32::from_le_bytes(bytes(&mut r)?) as usize;
        let m = u64::from_le_bytes(bytes(&mut r)?) as usize;
        let d = u32::from_le_bytes(bytes(&mut r)?) as usize;
        let n_t = u32::from_le_bytes(bytes(&mut r)?) as usize;
        let ridge = f64::from_le_bytes(bytes(&mut r)?);
        let seed = u64::from_le_bytes(bytes(&mut r)?);
        let x0 = mat(&mut r, m, d)?;
        let mut entries = BTreeMap::new();
        for _ in 0..n_t {
            let t = u64::from_le_bytes(bytes(&mut r)?) as usize;
            let mu = mat(&mut r, k, 1)?.column(0).into_owned();
            let w = mat(&mut r, k, k)?;
            let mode_spectrum = mat(&mut r, k, 1)?.column(0).into_owned();
            let phi = mat(&mut r, m, k + 1)?;
            let stats = WhiteningStats { mu, w, ridge, covariance_eigenvalues: DVector::zeros(0) };
            entries.insert(t, ReferenceEntry { stats, phi, mode_spectrum });
        }
        Ok(Self { x0, ridge, seed, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceConfig {
    pub size: usize,
    pub ridge: f64,
    pub seed: u64,
    /// Rotate each timestep's whitened modes to diagonalise the symmetric
    /// cross-view correlation, ordering columns by estimated singular value.
    pub align_modes: bool,
    /// Timesteps to cache; `None` uses the schedule's guided set.
    pub timesteps: Option<Vec<usize>>,
}

impl ReferenceConfig {
    pub fn new(size: usize, seed: u64) -> Self {
        Self { size, ridge: 1e-3, seed, align_modes: true, timesteps: None }
    }
}

/// Rotation `R` (orthogonal, `K x K`) and eigenvalues of the symmetrised
/// cross-correlation of two whitened views.
pub fn mode_alignment(zw_a: &DMatrix<f64>, zw_b: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = zw_a.nrows().max(2) - 1;
    let c = zw_a.transpose() * zw_b / n as f64;
    let sym = (&c + c.transpose()) * 0.5;
    let eig = sorted_symmetric_eigen(&sym)?;
    Ok((eig.vectors, eig.values))
}

pub fn compute_reference_stats(
    net: &SpectralNetwork,
    prior: &Prior,
    schedule: &DiffusionSchedule,
    config: &ReferenceConfig,
) -> Result<ReferenceBasis> {
    let k = net.output_dim();
    if config.size < k + 2 {
        return Err(invalid(format!("reference size {} must be at least K + 2 = {}", config.size, k + 2)));
    }
    let ts = resolve_timesteps(schedule, &config.timesteps)?;
    let x0 = prior.sample(config.size, substream(config.seed, 0)).x;
    let mut entries = BTreeMap::new();
    for t in ts {
        let abar = schedule.alpha_bar(t);
        let mut rng = rng_from_seed(substream(config.seed, t as u64));
        let x_t = corrupt(&x0, abar, &mut rng);
        let z = net.forward(&x_t, t)?;
        let mut stats = batch_whitening(&z, config.ridge)?;
        let mut spectrum = DVector::zeros(k);
        if config.align_modes {
            let x_b = corrupt(&x0, abar, &mut rng);
            let zb = net.forward(&x_b, t)?;
            let (r, vals) = mode_alignment(&stats.apply(&z), &stats.apply(&zb))?;
            stats.w = &stats.w * r;
            spectrum = vals;
        }
        let phi = stats.apply_with_constant(&z);
        entries.insert(t, ReferenceEntry { stats, phi, mode_spectrum: spectrum });
    }
    Ok(ReferenceBasis { x0, ridge: config.ridge, seed: config.seed, entries })
}

/// `[1, (f(x_t, t) - mu_t) W_t]` for every row of `x_t`.
pub fn whitened_eval(net: &SpectralNetwork, basis: &ReferenceBasis, x_t: &DMatrix<f64>, t: usize) -> Result<DMatrix<f64>> {
    let entry = basis.entry(t)?;
    Ok(entry.stats.apply_with_constant(&net.forward(x_t, t)?))
}
