//! Time-modulated residual MLP `f(x_t, t) -> R^K` with hand-written
//! reverse-mode gradients.
//!
//! Layout (rows are batch elements):
//!
//! ```text
//! s   = [sin(w_j t/T), cos(w_j t/T)]          frequency bank, j < n_freqs
//! e   = silu(s Wt + bt)                        time embedding, width E = width
//! h   = x Win + bin
//! per block:
//!   n     = layernorm(h)                       no affine
//!   gamma = 1 + e Wg + bg,  beta = e Wb + bb
//!   u     = gamma * n + beta
//!   h    += silu(u W1 + b1) W2 + b2
//! f   = h Wout + bout
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSchedule;
use crate::error::{invalid, shape, Error, Result};
use crate::rng::{gaussian_matrix, rng_from_seed};

const LN_EPS: f64 = 1e-5;
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    /// K, the number of learned non-constant modes.
    pub output_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub time_freqs: usize,
    /// Diffusion horizon T used to normalise the time input.
    pub horizon: usize,
}

impl NetConfig {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self { input_dim, output_dim, width: 128, blocks: 4, time_freqs: 64, horizon: 1000 }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn with_blocks(mut self, blocks: usize) -> Self {
        self.blocks = blocks;
        self
    }

    pub fn with_time_freqs(mut self, n: usize) -> Self {
        self.time_freqs = n;
        self
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.width == 0 || self.time_freqs == 0 {
            return Err(invalid(format!("network dimensions must be positive: {self:?}")));
        }
        if self.horizon == 0 {
            return Err(invalid("network horizon must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub wg: DMatrix<f64>,
    pub bg: DMatrix<f64>,
    pub wb: DMatrix<f64>,
    pub bb: DMatrix<f64>,
    pub w1: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DMatrix<f64>,
}

/// All trainable tensors. Biases are stored as `1 x n` matrices. The same
/// type doubles as the gradient bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub wt: DMatrix<f64>,
    pub bt: DMatrix<f64>,
    pub w_in: DMatrix<f64>,
    pub b_in: DMatrix<f64>,
    pub blocks: Vec<Block>,
    pub w_out: DMatrix<f64>,
    pub b_out: DMatrix<f64>,
}

impl NetParams {
    fn init(cfg: &NetConfig, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let w = cfg.width;
        let tf = 2 * cfg.time_freqs;
        let dense = |fan_in: usize, fan_out: usize, scale: f64, rng: &mut dyn rand::RngCore| {
            gaussian_matrix(fan_in, fan_out, rng) * (scale / (fan_in as f64).sqrt())
        };
        let wt = dense(tf, w, 1.0, &mut rng);
        let w_in = dense(cfg.input_dim, w, 1.0, &mut rng);
        let blocks = (0..cfg.blocks)
            .map(|_| Block {
                wg: dense(w, w, 0.1, &mut rng),
                bg: DMatrix::zeros(1, w),
                wb: dense(w, w, 0.1, &mut rng),
                bb: DMatrix::zeros(1, w),
                w1: dense(w, w, 1.0, &mut rng),
                b1: DMatrix::zeros(1, w),
                // zero-initialised so every block starts as the identity
                w2: DMatrix::zeros(w, w),
                b2: DMatrix::zeros(1, w),
            })
            .collect();
        let w_out = dense(w, cfg.output_dim, 0.1, &mut rng);
        Self {
            wt,
            bt: DMatrix::zeros(1, w),
            w_in,
            b_in: DMatrix::zeros(1, w),
            blocks,
            w_out,
            b_out: DMatrix::zeros(1, cfg.output_dim),
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        let mut z = other.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Names paired with tensors, in a fixed order.
    pub fn named(&self) -> Vec<(String, &DMatrix<f64>)> {
        let mut out = vec![
            ("wt".to_string(), &self.wt),
            ("bt".to_string(), &self.bt),
            ("w_in".to_string(), &self.w_in),
            ("b_in".to_string(), &self.b_in),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in [
                ("wg", &b.wg),
                ("bg", &b.bg),
                ("wb", &b.wb),
                ("bb", &b.bb),
                ("w1", &b.w1),
                ("b1", &b.b1),
                ("w2", &b.w2),
                ("b2", &b.b2),
            ] {
                out.push((format!("block{i}.{n}"), t));
            }
        }
        out.push(("w_out".to_string(), &self.w_out));
        out.push(("b_out".to_string(), &self.b_out));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut out = vec![&mut self.wt, &mut self.bt, &mut self.w_in, &mut self.b_in];
        for b in &mut self.blocks {
            out.extend([
                &mut b.wg, &mut b.bg, &mut b.wb, &mut b.bb, &mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2,
            ]);
        }
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    pub fn len(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.named().iter().map(|(_, t)| t.norm_squared()).sum::<f64>().sqrt()
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn add_bias(m: &mut DMatrix<f64>, b: &DMatrix<f64>) {
    for j in 0..m.ncols() {
        let bj = b[(0, j)];
        m.column_mut(j).add_scalar_mut(bj);
    }
}

fn col_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(1, m.ncols(), |_, j| m.column(j).sum())
}

/// Row-wise layer normalisation; returns the normalised matrix and `1/sigma` per row.
fn layer_norm(h: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let w = h.ncols() as f64;
    let mut n = h.clone();
    let mut inv = Vec::with_capacity(h.nrows());
    for mut row in n.row_iter_mut() {
        let mean = row.sum() / w;
        row.add_scalar_mut(-mean);
        let var = row.norm_squared() / w;
        let r = 1.0 / (var + LN_EPS).sqrt();
        row.scale_mut(r);
        inv.push(r);
    }
    (n, inv)
}

fn layer_norm_backward(n: &DMatrix<f64>, inv: &[f64], dn: &DMatrix<f64>) -> DMatrix<f64> {
    let w = n.ncols() as f64;
    let mut dh = dn.clone();
    for i in 0..n.nrows() {
        let nr = n.row(i);
        let dr = dn.row(i);
        let m1 = dr.sum() / w;
        let m2 = dr.dot(&nr) / w;
        for j in 0..n.ncols() {
            dh[(i, j)] = inv[i] * (dr[j] - m1 - nr[j] * m2);
        }
    }
    dh
}

struct BlockTrace {
    n: DMatrix<f64>,
    inv: Vec<f64>,
    gamma: DMatrix<f64>,
    u: DMatrix<f64>,
    a: DMatrix<f64>,
    s1: DMatrix<f64>,
}

/// Intermediates of one forward pass, consumed by the backward pass.
pub struct Trace {
    x: DMatrix<f64>,
    s: DMatrix<f64>,
    e_pre: DMatrix<f64>,
    e: DMatrix<f64>,
    blocks: Vec<BlockTrace>,
    h_last: DMatrix<f64>,
    t: usize,
}

impl Trace {
    pub fn timestep(&self) -> usize {
        self.t
    }

    pub fn batch(&self) -> usize {
        self.x.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralNetwork {
    config: NetConfig,
    params: NetParams,
}

impl SpectralNetwork {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self { params: NetParams::init(&config, seed), config })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &NetParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NetParams {
        &mut self.params
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn frequency_features(&self, t: usize) -> DMatrix<f64> {
        let nf = self.config.time_freqs;
        let tau = t as f64 / self.config.horizon as f64;
        let mut s = DMatrix::zeros(1, 2 * nf);
        for j in 0..nf {
            let frac = if nf > 1 { j as f64 / (nf - 1) as f64 } else { 0.0 };
            let w = std::f64::consts::PI * 100f64.powf(frac);
            s[(0, j)] = (w * tau).sin();
            s[(0, nf + j)] = (w * tau).cos();
        }
        s
    }

    /// Time embedding `e(t)`, a `1 x width` row.
    pub fn time_embedding(&self, t: usize) -> DMatrix<f64> {
        let mut e = self.frequency_features(t) * &self.params.wt;
        add_bias(&mut e, &self.params.bt);
        e.map(silu)
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(shape(format!("network expects {} input columns, got {}", self.config.input_dim, x.ncols())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &DMatrix<f64>, t: usize) -> Result<DMatrix<f64>> {
        Ok(self.forward_traced(x, t)?.0)
    }

    pub fn forward_traced(&self, x: &DMatrix<f64>, t: usize) -> Result<(DMatrix<f64>, Trace)> {
        self.check_input(x)?;
        let p = &self.params;
        let s = self.frequency_features(t);
        let mut e_pre = &s * &p.wt;
        add_bias(&mut e_pre, &p.bt);
        let e = e_pre.map(silu);

        let mut h = x * &p.w_in;
        add_bias(&mut h, &p.b_in);
        let mut traces = Vec::with_capacity(p.blocks.len());
        for b in &p.blocks {
            let (n, inv) = layer_norm(&h);
            let mut gamma = &e * &b.wg;
            add_bias(&mut gamma, &b.bg);
            gamma.add_scalar_mut(1.0);
            let mut beta = &e * &b.wb;
            add_bias(&mut beta, &b.bb);
            let mut u = n.clone();
            for j in 0..u.ncols() {
                let (g, bt) = (gamma[(0, j)], beta[(0, j)]);
                u.column_mut(j).iter_mut().for_each(|v| *v = *v * g + bt);
            }
            let mut a = &u * &b.w1;
            add_bias(&mut a, &b.b1);
            let s1 = a.map(silu);
            h += &s1 * &b.w2;
            add_bias(&mut h, &b.b2);
            traces.push(BlockTrace { n, inv, gamma, u, a, s1 });
        }
        let mut out = &h * &p.w_out;
        add_bias(&mut out, &p.b_out);
        Ok((out, Trace { x: x.clone(), s, e_pre, e, blocks: traces, h_last: h, t }))
    }

    /// Reverse pass. Returns parameter gradients and the input gradient for
    /// the upstream cotangent `g_out` (`B x K`).
    pub fn backward(&self, trace: &Trace, g_out: &DMatrix<f64>) -> Result<(NetParams, DMatrix<f64>)> {
        if g_out.nrows() != trace.x.nrows() || g_out.ncols() != self.config.output_dim {
            return Err(shape(format!(
                "cotangent is {}x{}, expected {}x{}",
                g_out.nrows(),
                g_out.ncols(),
                trace.x.nrows(),
                self.config.output_dim
            )));
        }
        let p = &self.params;
        let mut g = NetParams::zeros_like(p);
        g.w_out = trace.h_last.transpose() * g_out;
        g.b_out = col_sums(g_out);
        let mut dh = g_out * p.w_out.transpose();
        let mut de = DMatrix::zeros(1, self.config.width);

        for (k, (b, bt)) in p.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            let gb = &mut g.blocks[k];
            gb.w2 = bt.s1.transpose() * &dh;
            gb.b2 = col_sums(&dh);
            let mut da = &dh * b.w2.transpose();
            da.zip_apply(&bt.a, |d, a| *d *= silu_grad(a));
            gb.w1 = bt.u.transpose() * &da;
            gb.b1 = col_sums(&da);
            let du = &da * b.w1.transpose();
            let dgamma = col_sums(&du.component_mul(&bt.n));
            let dbeta = col_sums(&du);
            gb.wg = trace.e.transpose() * &dgamma;
            gb.bg = dgamma.clone();
            gb.wb = trace.e.transpose() * &dbeta;
            gb.bb = dbeta.clone();
            de += &dgamma * b.wg.transpose() + &dbeta * b.wb.transpose();
            let mut dn = du;
            for j in 0..dn.ncols() {
                let gj = bt.gamma[(0, j)];
                dn.column_mut(j).scale_mut(gj);
            }
            dh += layer_norm_backward(&bt.n, &bt.inv, &dn);
        }
        g.w_in = trace.x.transpose() * &dh;
        g.b_in = col_sums(&dh);
        let dx = &dh * p.w_in.transpose();

        let mut de_pre = de;
        de_pre.zip_apply(&trace.e_pre, |d, a| *d *= silu_grad(a));
        g.wt = trace.s.transpose() * &de_pre;
        g.bt = de_pre;
        Ok((g, dx))
    }

    /// `J^T cotangent` for a single input row.
    pub fn input_gradient(&self, x: &DVector<f64>, t: usize, cotangent: &DVector<f64>) -> Result<DVector<f64>> {
        let xm = DMatrix::from_row_slice(1, x.len(), x.as_slice());
        let gm = DMatrix::from_row_slice(1, cotangent.len(), cotangent.as_slice());
        Ok(self.input_gradient_batch(&xm, t, &gm)?.row(0).transpose())
    }

    /// Row-wise `J_i^T c_i` for a batch of inputs and cotangents.
    pub fn input_gradient_batch(&self, x: &DMatrix<f64>, t: usize, cotangents: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if cotangents.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input-gradient cotangent".into()));
        }
        let (_, trace) = self.forward_traced(x, t)?;
        Ok(self.backward(&trace, cotangents)?.1)
    }

    /// Plain gradient descent step helper used by tests.
    pub fn apply_update(&mut self, delta: &NetParams, scale: f64) {
        let src = delta.named();
        for (dst, (_, d)) in self.params.tensors_mut().into_iter().zip(src) {
            *dst += d * scale;
        }
    }

    pub fn save(&self, path: &Path, schedule: &DiffusionSchedule, metadata: &TrainingMetadata) -> Result<()> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config,
            schedule_fingerprint: schedule.fingerprint(),
            metadata: metadata.clone(),
            tensors: self
                .params
                .named()
                .into_iter()
                .map(|(name, t)| TensorRecord {
                    name,
                    rows: t.nrows(),
                    cols: t.ncols(),
                    data: t.transpose().as_slice().to_vec(),
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    /// Loads a checkpoint. `expected_k` rejects a mismatched output dimension;
    /// a schedule whose fingerprint differs is reported through the returned
    /// warning list and the `log` crate.
    pub fn load(path: &Path, expected_k: Option<usize>, schedule: Option<&DiffusionSchedule>) -> Result<LoadedNetwork> {
        let ck: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        if let Some(k) = expected_k {
            if k != ck.config.output_dim {
                return Err(shape(format!("checkpoint has K = {}, expected K = {k}", ck.config.output_dim)));
            }
        }
        ck.config.validate()?;
        let mut net = Self::new(ck.config, 0)?;
        let expected: Vec<(String, usize, usize)> =
            net.params.named().into_iter().map(|(n, t)| (n, t.nrows(), t.ncols())).collect();
        if expected.len() != ck.tensors.len() {
            return Err(shape(format!("checkpoint has {} tensors, expected {}", ck.tensors.len(), expected.len())));
        }
        for ((dst, (name, r, c)), rec) in net.params.tensors_mut().into_iter().zip(&expected).zip(&ck.tensors) {
            if &rec.name != name || rec.rows != *r || rec.cols != *c || rec.data.len() != r * c {
                return Err(shape(format!(
                    "tensor {} is {}x{}, expected {name} {r}x{c}",
                    rec.name, rec.rows, rec.cols
                )));
            }
            *dst = DMatrix::from_row_slice(*r, *c, &rec.data);
        }
        if !net.params.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        let mut warnings = Vec::new();
        if let Some(s) = schedule {
            if s.fingerprint() != ck.schedule_fingerprint {
                let w = format!(
                    "schedule fingerprint mismatch: checkpoint {}, current {}",
                    ck.schedule_fingerprint,
                    s.fingerprint()
                );
                log::warn!("{w}");
                warnings.push(w);
            }
        }
        Ok(LoadedNetwork { net, metadata: ck.metadata, schedule_fingerprint: ck.schedule_fingerprint, warnings })
    }
}

/// Training history stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs: usize,
    pub steps: usize,
    pub seed: u64,
    pub loss_curve: Vec<f64>,
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    /// Row-major.
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: NetConfig,
    schedule_fingerprint: String,
    metadata: TrainingMetadata,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug)]
pub struct LoadedNetwork {
    pub net: SpectralNetwork,
    pub metadata: TrainingMetadata,
    pub schedule_fingerprint: String,
    pub warnings: Vec<String>,
}

/// Exclusive recording context for parameter gradients. Holds the
/// intermediates of the most recent forward pass.
pub struct GradContext<'a> {
    net: &'a SpectralNetwork,
    trace: Option<Trace>,
}

impl<'a> GradContext<'a> {
    pub fn new(net: &'a SpectralNetwork) -> Self {
        Self { net, trace: None }
    }

    pub fn forward(&mut self, x: &DMatrix<f64>, t: usize) -> Result<DMatrix<f64>> {
        let (out, trace) = self.net.forward_traced(x, t)?;
        self.trace = Some(trace);
        Ok(out)
    }

    /// Consumes the recorded forward pass.
    pub fn parameter_gradient(&mut self, loss_cotangents: &DMatrix<f64>) -> Result<NetParams> {
        let trace = self.trace.take().ok_or(Error::NoForwardPass)?;
        Ok(self.net.backward(&trace, loss_cotangents)?.0)
    }
}

/// Random perturbation helper for property tests.
pub fn perturb_params<R: Rng + ?Sized>(params: &mut NetParams, scale: f64, rng: &mut R) {
    for t in params.tensors_mut() {
        let noise = gaussian_matrix(t.nrows(), t.ncols(), rng) * scale;
        *t += noise;
    }
}
