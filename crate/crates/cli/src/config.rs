//! Experiment configuration (TOML).
//!
//! ```toml
//! kind = "spectrum"          # train | spectrum | guide | window-sweep | visualize | oracle
//! seed = 1
//! output_dir = "out/gaussian"
//!
//! [prior]
//! kind = "centered-gaussian"
//! dim = 20
//! scale = 40.0
//! ratio = 0.7
//! rotation_seed = 1
//!
//! [network]
//! k = 3
//! width = 64
//! blocks = 2
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use spectral_guidance::diffusion::DiffusionSchedule;
use spectral_guidance::guidance::{GuidanceConfig, GuidanceLoss, DEFAULT_DELTA};
use spectral_guidance::net::NetConfig;
use spectral_guidance::priors::{
    CenteredGaussianPrior, DiscretePrior, GaussianMixturePrior, ManifoldKind, ManifoldPrior, Prior,
};
use spectral_guidance::training::TrainerConfig;

use crate::error::CliError;

pub const KINDS: [&str; 6] = ["train", "spectrum", "guide", "window-sweep", "visualize", "oracle"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Train,
    Spectrum,
    Guide,
    WindowSweep,
    Visualize,
    Oracle,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Train => "train",
            ExperimentKind::Spectrum => "spectrum",
            ExperimentKind::Guide => "guide",
            ExperimentKind::WindowSweep => "window-sweep",
            ExperimentKind::Visualize => "visualize",
            ExperimentKind::Oracle => "oracle",
        }
    }

    fn needs_network(self) -> bool {
        !matches!(self, ExperimentKind::Oracle)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub prior: PriorSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    pub network: Option<NetworkSpec>,
    #[serde(default)]
    pub trainer: TrainerSpec,
    #[serde(default)]
    pub reference: ReferenceSpec,
    pub guidance: Option<GuidanceSpec>,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub evaluation: EvaluationSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PriorSpec {
    CenteredGaussian {
        dim: Option<usize>,
        scale: Option<f64>,
        ratio: Option<f64>,
        eigenvalues: Option<Vec<f64>>,
        rotation_seed: Option<u64>,
    },
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        std: f64,
    },
    Pentagon,
    Circle {
        #[serde(default = "one")]
        radius: f64,
    },
    Square {
        #[serde(default = "one")]
        half_width: f64,
    },
    Disk {
        #[serde(default = "one")]
        radius: f64,
    },
    Annulus {
        r_in: f64,
        r_out: f64,
    },
    Discrete {
        atoms: Vec<Vec<f64>>,
        masses: Vec<f64>,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Number of sampling steps; also fixes the trained and guided timesteps.
    pub sampling_steps: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02, sampling_steps: 100 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub k: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_freqs")]
    pub time_freqs: usize,
    /// Existing checkpoint; when absent the network is trained in the run.
    pub checkpoint: Option<PathBuf>,
}

fn default_width() -> usize {
    64
}
fn default_blocks() -> usize {
    2
}
fn default_freqs() -> usize {
    64
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSpec {
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub ridge: f64,
    pub stop_gradient: bool,
    pub swap_views: bool,
}

impl Default for TrainerSpec {
    fn default() -> Self {
        let d = TrainerConfig::default();
        Self {
            batch_size: d.batch_size,
            epochs: d.epochs,
            steps_per_epoch: d.steps_per_epoch,
            learning_rate: d.learning_rate,
            lr_decay: d.lr_decay,
            ridge: d.ridge,
            stop_gradient: d.stop_gradient,
            swap_views: d.swap_views,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSpec {
    pub size: usize,
    pub ridge: f64,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        Self { size: 4000, ridge: 1e-3 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSpec {
    /// Mixture components forming the conditioning set.
    pub targets: Vec<usize>,
    /// One value, or a list expanded into one run per value.
    pub kappa: OneOrMany<f64>,
    pub rank: Option<OneOrMany<usize>>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub window: Option<[usize; 2]>,
    #[serde(default)]
    pub eval_at_source: bool,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}
fn default_samples() -> usize {
    2000
}
fn default_eta() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn values(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub centers: Vec<usize>,
    pub half_width: usize,
    pub samples: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self { centers: (1..=9).map(|i| i * 100).collect(), half_width: 100, samples: 1000 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSpec {
    /// Timesteps for spectra; defaults to the sampling subsequence.
    pub timesteps: Option<Vec<usize>>,
    pub n_eval: usize,
    /// Monte Carlo draws per atom for operator-matrix oracles.
    pub mc_samples: usize,
    /// Timestep for eigenfunction visualisation.
    pub t: usize,
    pub points: usize,
    pub noise_draws: usize,
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        Self { timesteps: None, n_eval: 8192, mc_samples: 100_000, t: 100, points: 1000, noise_draws: 256 }
    }
}

/// A parsed configuration together with the directory its relative paths
/// refer to.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub kind: ExperimentKind,
    pub base_dir: PathBuf,
    pub source: Vec<u8>,
}

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    pub fn checkpoint(&self) -> Option<PathBuf> {
        self.config.network.as_ref()?.checkpoint.as_deref().map(|p| self.resolve(p))
    }
}

fn field(path: &str, msg: impl Into<String>) -> CliError {
    CliError::Config(format!("{path}: {}", msg.into()))
}

pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
    let source = std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&source).map_err(|_| CliError::Config(format!("{} is not UTF-8", path.display())))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse(text, source.clone(), base_dir)
}

pub fn parse(text: &str, source: Vec<u8>, base_dir: PathBuf) -> Result<LoadedConfig, CliError> {
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    let kind = parse_kind(&config.kind)?;
    let loaded = LoadedConfig { config, kind, base_dir, source };
    validate(&loaded)?;
    Ok(loaded)
}

pub fn parse_kind(s: &str) -> Result<ExperimentKind, CliError> {
    let v = toml::Value::String(s.to_string());
    v.try_into()
        .map_err(|_| field("kind", format!("unknown experiment kind {s:?}; valid kinds: {}", KINDS.join(", "))))
}

fn validate(l: &LoadedConfig) -> Result<(), CliError> {
    let c = &l.config;
    build_prior(&c.prior)?;
    build_schedule(&c.schedule)?;
    if l.kind.needs_network() {
        let net = c.network.as_ref().ok_or_else(|| field("network", "required for this experiment kind"))?;
        if net.k == 0 || net.width == 0 || net.time_freqs == 0 {
            return Err(field("network", "k, width and time_freqs must be positive"));
        }
        if let Some(p) = l.checkpoint() {
            if !p.is_file() {
                return Err(field("network.checkpoint", format!("{} does not exist", p.display())));
            }
        }
        let tc = trainer_config(c, c.seed);
        tc.validate(net.k).map_err(|e| field("trainer", e.to_string()))?;
        if c.reference.size < net.k + 2 {
            return Err(field("reference.size", "must be at least k + 2"));
        }
        if c.reference.ridge.is_nan() || c.reference.ridge < 0.0 {
            return Err(field("reference.ridge", "must be non-negative"));
        }
    }
    let ev = &c.evaluation;
    if ev.n_eval < 4 {
        return Err(field("evaluation.n_eval", "must be at least 4"));
    }
    if let Some(ts) = &ev.timesteps {
        if ts.is_empty() || ts.iter().any(|&t| t == 0 || t > c.schedule.steps) {
            return Err(field("evaluation.timesteps", format!("must be non-empty and within 1..={}", c.schedule.steps)));
        }
    }
    match l.kind {
        ExperimentKind::Guide | ExperimentKind::WindowSweep => {
            if !matches!(c.prior, PriorSpec::GaussianMixture { .. } | PriorSpec::Pentagon) {
                return Err(field("prior.kind", "guidance experiments need a gaussian-mixture or pentagon prior"));
            }
            let g = c.guidance.as_ref().ok_or_else(|| field("guidance", "required for this experiment kind"))?;
            let n_comp = mixture(&c.prior)?.n_components();
            if g.targets.is_empty() || g.targets.iter().any(|&t| t >= n_comp) {
                return Err(field("guidance.targets", format!("must be non-empty component indices below {n_comp}")));
            }
            if g.kappa.values().is_empty() || g.kappa.values().iter().any(|k| !(*k >= 0.0 && k.is_finite())) {
                return Err(field("guidance.kappa", "must be finite and non-negative"));
            }
            let k = c.network.as_ref().map_or(0, |n| n.k);
            if let Some(r) = &g.rank {
                if r.values().is_empty() || r.values().iter().any(|&r| r == 0 || r > k) {
                    return Err(field("guidance.rank", format!("must lie in 1..={k}")));
                }
            }
            if !(g.delta > 0.0) {
                return Err(field("guidance.delta", "must be positive"));
            }
            if g.samples == 0 {
                return Err(field("guidance.samples", "must be positive"));
            }
            if !(0.0..=1.0).contains(&g.eta) {
                return Err(field("guidance.eta", "must lie in [0, 1]"));
            }
            if l.kind == ExperimentKind::WindowSweep {
                if g.kappa.values().len() != 1 {
                    return Err(field("guidance.kappa", "window sweeps take a single value"));
                }
                let s = &c.sweep;
                if s.centers.is_empty() || s.centers.iter().any(|&t| t == 0 || t > c.schedule.steps) {
                    return Err(field("sweep.centers", format!("must be non-empty and within 1..={}", c.schedule.steps)));
                }
                if s.samples == 0 {
                    return Err(field("sweep.samples", "must be positive"));
                }
            }
        }
        ExperimentKind::Visualize => {
            if !matches!(c.prior, PriorSpec::Circle { .. } | PriorSpec::Square { .. } | PriorSpec::Disk { .. } | PriorSpec::Annulus { .. }) {
                return Err(field("prior.kind", "visualize needs a planar geometric prior (circle, square, disk, annulus)"));
            }
            if ev.t == 0 || ev.t > c.schedule.steps {
                return Err(field("evaluation.t", format!("must lie in 1..={}", c.schedule.steps)));
            }
            if ev.points < 2 || ev.noise_draws == 0 {
                return Err(field("evaluation", "points must be at least 2 and noise_draws positive"));
            }
        }
        ExperimentKind::Oracle => {
            if !matches!(c.prior, PriorSpec::CenteredGaussian { .. } | PriorSpec::Discrete { .. }) {
                return Err(field("prior.kind", "oracle spectra exist for centered-gaussian and discrete priors"));
            }
            if ev.mc_samples < 100 {
                return Err(field("evaluation.mc_samples", "must be at least 100"));
            }
        }
        ExperimentKind::Train | ExperimentKind::Spectrum => {}
    }
    Ok(())
}

fn mixture(p: &PriorSpec) -> Result<GaussianMixturePrior, CliError> {
    match build_prior(p)? {
        Prior::GaussianMixture(g) => Ok(g),
        _ => Err(field("prior.kind", "expected a mixture")),
    }
}

pub fn build_prior(p: &PriorSpec) -> Result<Prior, CliError> {
    let err = |e: spectral_guidance::Error| field("prior", e.to_string());
    Ok(match p {
        PriorSpec::CenteredGaussian { dim, scale, ratio, eigenvalues, rotation_seed } => {
            let gp = match eigenvalues {
                Some(ev) => {
                    if dim.is_some_and(|d| d != ev.len()) {
                        return Err(field("prior.dim", "disagrees with the number of eigenvalues"));
                    }
                    let d = ev.len();
                    let basis = match rotation_seed {
                        Some(s) => spectral_guidance::priors::random_orthogonal(d, *s),
                        None => DMatrix::identity(d, d),
                    };
                    CenteredGaussianPrior::new(DVector::from_vec(ev.clone()), basis).map_err(err)?
                }
                None => {
                    let d = dim.ok_or_else(|| field("prior.dim", "required without explicit eigenvalues"))?;
                    CenteredGaussianPrior::geometric(d, scale.unwrap_or(1.0), ratio.unwrap_or(1.0), *rotation_seed)
                        .map_err(err)?
                }
            };
            Prior::CenteredGaussian(gp)
        }
        PriorSpec::GaussianMixture { weights, means, std } => Prior::GaussianMixture(
            GaussianMixturePrior::isotropic(weights.clone(), means.iter().map(|m| DVector::from_vec(m.clone())).collect(), *std)
                .map_err(err)?,
        ),
        PriorSpec::Pentagon => Prior::GaussianMixture(GaussianMixturePrior::pentagon_benchmark()),
        PriorSpec::Circle { radius } => Prior::Manifold(ManifoldPrior::new(ManifoldKind::Circle { radius: *radius }).map_err(err)?),
        PriorSpec::Square { half_width } => {
            Prior::Manifold(ManifoldPrior::new(ManifoldKind::Square { half_width: *half_width }).map_err(err)?)
        }
        PriorSpec::Disk { radius } => Prior::Manifold(ManifoldPrior::new(ManifoldKind::Disk { radius: *radius }).map_err(err)?),
        PriorSpec::Annulus { r_in, r_out } => {
            Prior::Manifold(ManifoldPrior::new(ManifoldKind::Annulus { r_in: *r_in, r_out: *r_out }).map_err(err)?)
        }
        PriorSpec::Discrete { atoms, masses } => Prior::Discrete(
            DiscretePrior::new(atoms.iter().map(|a| DVector::from_vec(a.clone())).collect(), masses.clone()).map_err(err)?,
        ),
    })
}

pub fn build_schedule(s: &ScheduleSpec) -> Result<DiffusionSchedule, CliError> {
    let sched = DiffusionSchedule::linear(s.steps, s.beta_start, s.beta_end).map_err(|e| field("schedule", e.to_string()))?;
    let guided = sched.sampling_timesteps(s.sampling_steps).map_err(|e| field("schedule.sampling_steps", e.to_string()))?;
    sched.with_guided_timesteps(guided).map_err(|e| field("schedule.sampling_steps", e.to_string()))
}

pub fn net_config(c: &ExperimentConfig, input_dim: usize) -> Option<NetConfig> {
    let n = c.network.as_ref()?;
    Some(
        NetConfig::new(input_dim, n.k)
            .with_width(n.width)
            .with_blocks(n.blocks)
            .with_time_freqs(n.time_freqs)
            .with_horizon(c.schedule.steps),
    )
}

pub fn trainer_config(c: &ExperimentConfig, seed: u64) -> TrainerConfig {
    let t = &c.trainer;
    TrainerConfig {
        batch_size: t.batch_size,
        epochs: t.epochs,
        steps_per_epoch: t.steps_per_epoch,
        learning_rate: t.learning_rate,
        lr_decay: t.lr_decay,
        ridge: t.ridge,
        timesteps: None,
        seed,
        stop_gradient: t.stop_gradient,
        swap_views: t.swap_views,
    }
}

pub fn guidance_config(g: &GuidanceSpec, kappa: f64, rank: Option<usize>) -> GuidanceConfig {
    GuidanceConfig {
        kappa,
        rank,
        loss: GuidanceLoss::LogLikelihood,
        delta: g.delta,
        window: g.window.map(|w| (w[0], w[1])),
        eval_at_source: g.eval_at_source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"
kind = "oracle"
seed = 3
output_dir = "out"
[prior]
kind = "centered-gaussian"
dim = 4
scale = 2.0
ratio = 0.5
"#;

    fn parse_str(s: &str) -> Result<LoadedConfig, CliError> {
        parse(s, s.as_bytes().to_vec(), PathBuf::from("/tmp"))
    }

    #[test]
    fn minimal_oracle_config() {
        let l = parse_str(MIN).unwrap();
        assert_eq!(l.kind, ExperimentKind::Oracle);
        assert_eq!(l.output_dir(), PathBuf::from("/tmp/out"));
        assert_eq!(l.config.schedule.steps, 1000);
    }

    #[test]
    fn unknown_kind_lists_valid_kinds() {
        let e = parse_str(&MIN.replace("\"oracle\"", "\"bake\"")).unwrap_err().to_string();
        assert!(e.contains("kind") && e.contains("window-sweep") && e.contains("visualize"), "{e}");
    }

    #[test]
    fn errors_name_the_field() {
        let e = parse_str(&MIN.replace("kind = \"oracle\"", "kind = \"train\"")).unwrap_err().to_string();
        assert!(e.starts_with("network"), "{e}");
        let bad = format!("{}\n[network]\nk = 3\n[trainer]\nlearning_rate = -1.0\n", MIN.replace("\"oracle\"", "\"train\""));
        assert!(parse_str(&bad).unwrap_err().to_string().starts_with("trainer"));
        let typo = format!("{MIN}\n[schedule]\nstepz = 3\n");
        assert!(parse_str(&typo).unwrap_err().to_string().contains("stepz"));
        assert!(parse_str(&MIN.replace("seed = 3\n", "")).unwrap_err().to_string().contains("seed"));
    }

    #[test]
    fn missing_checkpoint_is_rejected() {
        let s = format!("{}\n[network]\nk = 3\ncheckpoint = \"nope.json\"\n", MIN.replace("\"oracle\"", "\"spectrum\""));
        let e = parse_str(&s).unwrap_err().to_string();
        assert!(e.starts_with("network.checkpoint"), "{e}");
    }

    #[test]
    fn guidance_checks() {
        let base = r#"
kind = "guide"
seed = 1
output_dir = "o"
[prior]
kind = "pentagon"
[network]
k = 6
[guidance]
targets = [7]
kappa = [0.1, 1.0]
"#;
        assert!(parse_str(base).unwrap_err().to_string().starts_with("guidance.targets"));
        let ok = parse_str(&base.replace("[7]", "[0, 2]")).unwrap();
        assert_eq!(ok.config.guidance.unwrap().kappa.values(), vec![0.1, 1.0]);
        let sweep = base.replace("[7]", "[0]").replace("\"guide\"", "\"window-sweep\"");
        assert!(parse_str(&sweep).unwrap_err().to_string().starts_with("guidance.kappa"));
    }
}
