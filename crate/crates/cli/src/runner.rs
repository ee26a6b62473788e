//! Experiment pipelines. Each writes CSV tables, SVG plots and a manifest
//! into the configured output directory.

use std::path::Path;

use nalgebra::DMatrix;
use serde_json::json;

use spectral_guidance::benchmarks::gaussian_recovery;
use spectral_guidance::diffusion::DiffusionSchedule;
use spectral_guidance::guidance::{
    coefficients_for_signal, guided_sample, normalize_curve, target_accuracy, transition_interval, window_sweep,
    GuidanceCoefficients, SamplerSettings,
};
use spectral_guidance::net::{SpectralNetwork, TrainingMetadata};
use spectral_guidance::oracles::{
    discrete_operator_matrix, fresh_whitening, gaussian_spectrum, learned_spectrum, right_singular_functions,
    SpectrumEstimate,
};
use spectral_guidance::priors::{GuidanceSignal, Prior};
use spectral_guidance::rng::substream;
use spectral_guidance::training::{compute_reference_stats, train, ReferenceBasis, ReferenceConfig};

use crate::config::{self, ExperimentKind, LoadedConfig};
use crate::error::{CliError, Stage};
use crate::manifest::{Manifest, Outputs};
use crate::plot::{PlotSpec, Table};

const SEED_TRAIN: u64 = 1;
const SEED_REFERENCE: u64 = 2;
const SEED_EVAL: u64 = 3;
const SEED_SAMPLING: u64 = 4;

struct Ctx<'a> {
    cfg: &'a LoadedConfig,
    prior: Prior,
    schedule: DiffusionSchedule,
    out: Outputs,
}

impl Ctx<'_> {
    fn seed(&mut self, name: &str, tag: u64) -> u64 {
        let s = substream(self.cfg.config.seed, tag);
        self.out.seeds.insert(name.to_string(), s);
        s
    }

    fn timesteps(&self) -> Vec<usize> {
        self.cfg.config.evaluation.timesteps.clone().unwrap_or_else(|| self.schedule.guided_timesteps().to_vec())
    }
}

/// Runs the experiment described by `cfg`. `output_dir` overrides the
/// configured directory.
pub fn run(cfg: &LoadedConfig, output_dir: Option<&Path>) -> Result<Manifest, CliError> {
    let root = output_dir.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir());
    let mut ctx = Ctx {
        cfg,
        prior: config::build_prior(&cfg.config.prior)?,
        schedule: config::build_schedule(&cfg.config.schedule)?,
        out: Outputs::create(&root)?,
    };
    ctx.out.seeds.insert("master".into(), cfg.config.seed);
    log::info!("{} experiment, output in {}", cfg.kind.name(), root.display());
    match cfg.kind {
        ExperimentKind::Oracle => oracle(&mut ctx)?,
        ExperimentKind::Train => {
            let net = network(&mut ctx, true)?;
            reference(&mut ctx, &net)?;
        }
        ExperimentKind::Spectrum => spectrum(&mut ctx)?,
        ExperimentKind::Guide => guide(&mut ctx)?,
        ExperimentKind::WindowSweep => sweep(&mut ctx)?,
        ExperimentKind::Visualize => visualize(&mut ctx)?,
    }
    ctx.out.finish(cfg.kind.name(), &cfg.source)
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn spectrum_rows(table: &mut Table, est: &SpectrumEstimate) {
    for (k, &lambda) in est.eigenvalues.iter().enumerate() {
        let se = est.stderr.as_ref().map(|s| num(s[k])).unwrap_or_default();
        table.rows.push(vec![est.t.to_string(), k.to_string(), num(lambda), est.source.as_str().into(), se]);
    }
}

fn spectrum_table() -> Table {
    Table { headers: ["t", "k", "lambda", "source", "stderr"].map(String::from).to_vec(), rows: Vec::new() }
}

/// Non-constant modes of one source, for plotting.
fn filtered(table: &Table, source: &str) -> Table {
    Table {
        headers: table.headers.clone(),
        rows: table.rows.iter().filter(|r| r[3] == source && r[1] != "0").cloned().collect(),
    }
}

fn oracle(ctx: &mut Ctx) -> Result<(), CliError> {
    let ts = ctx.timesteps();
    let seed = ctx.seed("evaluation", SEED_EVAL);
    let mc = ctx.cfg.config.evaluation.mc_samples;
    let mut table = spectrum_table();
    let prior = ctx.prior.clone();
    let schedule = ctx.schedule.clone();
    let source = ctx.out.timed("oracle", |_| {
        let mut source = "closed-form";
        for &t in &ts {
            let est = match &prior {
                Prior::CenteredGaussian(g) => gaussian_spectrum(g, &schedule, t).stage("oracle")?,
                Prior::Discrete(d) => {
                    source = "matrix-oracle";
                    schedule.check_timestep(t).stage("oracle")?;
                    discrete_operator_matrix(d, schedule.alpha_bar(t), mc, substream(seed, t as u64))
                        .and_then(|m| m.spectrum(t))
                        .stage("oracle")?
                }
                _ => unreachable!("validated prior kind"),
            };
            spectrum_rows(&mut table, &est);
        }
        Ok(source)
    })?;
    ctx.out.write_table("spectrum.csv", &table)?;
    ctx.out.write_plot("spectrum.svg", &filtered(&table, source), &PlotSpec::line("t", &["lambda"], Some("k"), "operator spectrum"))?;
    Ok(())
}

/// Loads the configured checkpoint, or trains a network and writes
/// `checkpoint.json`, `loss.csv` and `loss.svg`.
fn network(ctx: &mut Ctx, force_train: bool) -> Result<SpectralNetwork, CliError> {
    let net_cfg = config::net_config(&ctx.cfg.config, ctx.prior.dim()).expect("validated network section");
    if let (Some(p), false) = (ctx.cfg.checkpoint(), force_train) {
        let loaded = SpectralNetwork::load(&p, Some(net_cfg.output_dim), Some(&ctx.schedule)).stage("checkpoint")?;
        for w in &loaded.warnings {
            log::warn!("{}: {w}", p.display());
        }
        if loaded.net.input_dim() != ctx.prior.dim() {
            return Err(CliError::Config(format!(
                "network.checkpoint: network input dimension {} does not match the prior's {}",
                loaded.net.input_dim(),
                ctx.prior.dim()
            )));
        }
        ctx.out.summary.insert("checkpoint".into(), json!(p.display().to_string()));
        return Ok(loaded.net);
    }
    let seed = ctx.seed("train", SEED_TRAIN);
    let tc = config::trainer_config(&ctx.cfg.config, seed);
    let mut net = SpectralNetwork::new(net_cfg, substream(seed, 0)).stage("train")?;
    let prior = ctx.prior.clone();
    let schedule = ctx.schedule.clone();
    let every = tc.steps_per_epoch.max(1);
    let history = ctx.out.timed("train", |_| {
        train(&mut net, &prior, &schedule, &tc, |r| {
            if (r.step + 1) % every == 0 {
                log::info!("epoch {} loss {:.5} lr {:.3e}", (r.step + 1) / every, r.loss, r.lr);
            }
        })
        .stage("train")
    })?;
    let epoch_means = history.epoch_means(tc.steps_per_epoch);
    let meta = TrainingMetadata {
        epochs: tc.epochs,
        steps: tc.total_steps(),
        seed,
        loss_curve: epoch_means.clone(),
        extra: [("prior".to_string(), prior.name().to_string())].into(),
    };
    let ck = ctx.out.path("checkpoint.json");
    net.save(&ck, &schedule, &meta).stage("checkpoint")?;
    ctx.out.record("checkpoint.json")?;
    let mut loss = Vec::new();
    history.write_csv(&mut loss).stage("train")?;
    ctx.out.write("loss.csv", &loss)?;
    let epochs = Table {
        headers: vec!["epoch".into(), "mean_loss".into()],
        rows: epoch_means.iter().enumerate().map(|(e, l)| vec![(e + 1).to_string(), num(*l)]).collect(),
    };
    ctx.out.write_plot("loss.svg", &epochs, &PlotSpec::line("epoch", &["mean_loss"], None, "training loss"))?;
    ctx.out.summary.insert("final_epoch_loss".into(), json!(epoch_means.last()));
    Ok(net)
}

/// Reference basis on the guided timesteps, written to `reference.bin`.
fn reference(ctx: &mut Ctx, net: &SpectralNetwork) -> Result<ReferenceBasis, CliError> {
    let seed = ctx.seed("reference", SEED_REFERENCE);
    let rc = ReferenceConfig { ridge: ctx.cfg.config.reference.ridge, ..ReferenceConfig::new(ctx.cfg.config.reference.size, seed) };
    let (prior, schedule) = (ctx.prior.clone(), ctx.schedule.clone());
    let basis = ctx.out.timed("reference", |_| compute_reference_stats(net, &prior, &schedule, &rc).stage("reference"))?;
    basis.save(&ctx.out.path("reference.bin")).stage("reference")?;
    ctx.out.record("reference.bin")?;
    Ok(basis)
}

fn spectrum(ctx: &mut Ctx) -> Result<(), CliError> {
    let net = network(ctx, false)?;
    let ts = ctx.timesteps();
    let seed = ctx.seed("evaluation", SEED_EVAL);
    let n_eval = ctx.cfg.config.evaluation.n_eval;
    let (prior, schedule) = (ctx.prior.clone(), ctx.schedule.clone());
    let mut table = spectrum_table();
    ctx.out.timed("learned-spectrum", |_| {
        for &t in &ts {
            let est = learned_spectrum(&net, &prior, &schedule, t, n_eval, substream(seed, t as u64)).stage("spectrum")?;
            spectrum_rows(&mut table, &est);
        }
        Ok(())
    })?;
    let k = net.output_dim();
    if let Prior::CenteredGaussian(gp) = &prior {
        for &t in &ts {
            let mut est = gaussian_spectrum(gp, &schedule, t).stage("oracle")?;
            est.eigenvalues = est.eigenvalues.rows(0, (k + 1).min(est.eigenvalues.len())).into_owned();
            spectrum_rows(&mut table, &est);
        }
        if k <= gp.dim() {
            let rows = ctx.out.timed("principal-angles", |_| {
                gaussian_recovery(&net, gp, &schedule, &ts, n_eval, substream(seed, 0xA11)).stage("principal-angles")
            })?;
            let angles = Table {
                headers: ["t", "mean_cos", "min_cos"].map(String::from).to_vec(),
                rows: rows.iter().map(|r| vec![r.t.to_string(), num(r.mean_cos()), num(r.min_cos())]).collect(),
            };
            let residual = Table {
                headers: ["t", "max_residual"].map(String::from).to_vec(),
                rows: rows.iter().map(|r| vec![r.t.to_string(), num(r.max_residual)]).collect(),
            };
            ctx.out.write_table("principal_angles.csv", &angles)?;
            ctx.out.write_plot("principal_angles.svg", &angles, &PlotSpec::line("t", &["mean_cos", "min_cos"], None, "principal-angle cosines"))?;
            ctx.out.write_table("residual.csv", &residual)?;
            ctx.out.write_plot("residual.svg", &residual, &PlotSpec::line("t", &["max_residual"], None, "spectrum residual"))?;
            let worst = rows.iter().map(|r| r.max_residual).fold(0.0, f64::max);
            ctx.out.summary.insert("max_residual".into(), json!(worst));
        } else {
            log::warn!("K = {k} exceeds the Gaussian's {} modes; principal angles skipped", gp.dim());
        }
    }
    ctx.out.write_table("spectrum.csv", &table)?;
    ctx.out.write_plot("spectrum.svg", &filtered(&table, "learned"), &PlotSpec::line("t", &["lambda"], Some("k"), "learned spectrum"))?;
    Ok(())
}

struct GuidanceSetup {
    net: SpectralNetwork,
    basis: ReferenceBasis,
    coeffs: GuidanceCoefficients,
    targets: Vec<usize>,
}

fn guidance_setup(ctx: &mut Ctx) -> Result<GuidanceSetup, CliError> {
    let net = network(ctx, false)?;
    let basis = reference(ctx, &net)?;
    let g = ctx.cfg.config.guidance.as_ref().expect("validated guidance section");
    let gmm = ctx.prior.as_mixture().stage("guidance")?;
    let signal = GuidanceSignal::class_set(gmm, &g.targets).stage("guidance")?;
    let coeffs = coefficients_for_signal(&basis, &signal).stage("guidance")?;
    Ok(GuidanceSetup { net, basis, coeffs, targets: g.targets.clone() })
}

fn samples_table(prior: &Prior, samples: &DMatrix<f64>, targets: &[usize]) -> Result<Table, CliError> {
    let gmm = prior.as_mixture().stage("guidance")?;
    let d = samples.ncols();
    let mut headers = vec!["sample_id".to_string()];
    headers.extend((0..d).map(|j| format!("x_{j}")));
    headers.extend(["assigned_component".to_string(), "posterior_mass_on_target".to_string()]);
    let mut rows = Vec::with_capacity(samples.nrows());
    for (i, row) in samples.row_iter().enumerate() {
        let mut r = vec![i.to_string()];
        r.extend(row.iter().map(|v| num(*v)));
        if row.iter().all(|v| v.is_finite()) {
            let p = gmm.component_posterior(&row.transpose());
            r.push(p.argmax().0.to_string());
            r.push(num(targets.iter().map(|&c| p[c]).sum()));
        } else {
            r.extend([String::new(), String::new()]);
        }
        rows.push(r);
    }
    Ok(Table { headers, rows })
}

fn guide(ctx: &mut Ctx) -> Result<(), CliError> {
    let setup = guidance_setup(ctx)?;
    let g = ctx.cfg.config.guidance.clone().expect("validated guidance section");
    let sample_seed = ctx.seed("sampling", SEED_SAMPLING);
    let settings = SamplerSettings {
        n: g.samples,
        steps: ctx.cfg.config.schedule.sampling_steps,
        eta: g.eta,
        seed: sample_seed,
        record_trajectory: false,
    };
    let ranks: Vec<Option<usize>> = match &g.rank {
        Some(r) => r.values().into_iter().map(Some).collect(),
        None => vec![None],
    };
    let runs: Vec<(f64, Option<usize>)> =
        g.kappa.values().into_iter().flat_map(|k| ranks.iter().map(move |&r| (k, r))).collect();
    let single = runs.len() == 1;
    let mut summary = Table {
        headers: ["run", "kappa", "rank", "accuracy", "failures"].map(String::from).to_vec(),
        rows: Vec::new(),
    };
    let (prior, schedule) = (ctx.prior.clone(), ctx.schedule.clone());
    let gmm = prior.as_mixture().stage("guidance")?.clone();
    for (i, &(kappa, rank)) in runs.iter().enumerate() {
        let gc = config::guidance_config(&g, kappa, rank);
        let out = ctx.out.timed("sampling", |_| {
            guided_sample(&prior, &setup.net, &setup.basis, &setup.coeffs, &gc, &schedule, &settings).stage("sampling")
        })?;
        let acc = target_accuracy(&gmm, &out.samples, &setup.targets);
        let rank_s = rank.map(|r| r.to_string()).unwrap_or_else(|| setup.net.output_dim().to_string());
        log::info!("kappa {kappa} rank {rank_s}: accuracy {acc:.4}, {} failures", out.failures());
        if out.failures() > 0 {
            log::warn!("{} of {} trajectories failed", out.failures(), settings.n);
        }
        summary.rows.push(vec![i.to_string(), num(kappa), rank_s, num(acc), out.failures().to_string()]);

        let prefix = if single { String::new() } else { format!("run_{i}/") };
        let samples = samples_table(&prior, &out.samples, &setup.targets)?;
        ctx.out.write_table(&format!("{prefix}samples.csv"), &samples)?;
        let diag = Table {
            headers: ["sample_id", "t", "grad_norm", "posterior_value"].map(String::from).to_vec(),
            rows: out
                .diagnostics
                .iter()
                .map(|d| vec![d.sample_id.to_string(), d.t.to_string(), num(d.grad_norm), num(d.posterior_value)])
                .collect(),
        };
        ctx.out.write_table(&format!("{prefix}diagnostics.csv"), &diag)?;
        if prior.dim() == 2 {
            let finite = Table {
                headers: samples.headers.clone(),
                rows: samples.rows.iter().filter(|r| !r[3].is_empty()).cloned().collect(),
            };
            let title = format!("guided samples, kappa = {kappa}");
            ctx.out.write_plot(&format!("{prefix}samples.svg"), &finite, &PlotSpec::scatter("x_0", "x_1", Some("assigned_component"), &title))?;
        }
        if single {
            ctx.out.summary.insert("accuracy".into(), json!(acc));
        }
    }
    if !single {
        ctx.out.write_table("summary.csv", &summary)?;
    }
    Ok(())
}

fn sweep(ctx: &mut Ctx) -> Result<(), CliError> {
    let setup = guidance_setup(ctx)?;
    let g = ctx.cfg.config.guidance.clone().expect("validated guidance section");
    let sw = ctx.cfg.config.sweep.clone();
    let eval_seed = ctx.seed("evaluation", SEED_EVAL);
    let sample_seed = ctx.seed("sampling", SEED_SAMPLING);
    let n_eval = ctx.cfg.config.evaluation.n_eval;
    let (prior, schedule) = (ctx.prior.clone(), ctx.schedule.clone());
    let ts = ctx.timesteps();
    let curve = ctx.out.timed("trace-proxy", |_| {
        ts.iter()
            .map(|&t| {
                let est = learned_spectrum(&setup.net, &prior, &schedule, t, n_eval, substream(eval_seed, t as u64))?;
                Ok((t, est.eigenvalues.iter().skip(1).sum::<f64>() / setup.net.output_dim() as f64))
            })
            .collect::<spectral_guidance::Result<Vec<_>>>()
            .stage("trace-proxy")
    })?;
    let normalized = normalize_curve(&curve);
    let interval = transition_interval(&normalized, 0.9, 0.1);
    let trace = Table {
        headers: ["t", "trace", "normalized"].map(String::from).to_vec(),
        rows: curve.iter().zip(&normalized).map(|(c, n)| vec![c.0.to_string(), num(c.1), num(n.1)]).collect(),
    };
    ctx.out.write_table("trace.csv", &trace)?;

    let gc = config::guidance_config(&g, g.kappa.values()[0], g.rank.as_ref().map(|r| r.values()[0]));
    let settings = SamplerSettings {
        n: sw.samples,
        steps: ctx.cfg.config.schedule.sampling_steps,
        eta: g.eta,
        seed: sample_seed,
        record_trajectory: false,
    };
    let rows = ctx.out.timed("sweep", |_| {
        window_sweep(&prior, &setup.net, &setup.basis, &setup.coeffs, &gc, &schedule, &settings, &setup.targets, &sw.centers, sw.half_width, &curve)
            .stage("sweep")
    })?;
    let table = Table {
        headers: ["tau", "accuracy", "trace_proxy"].map(String::from).to_vec(),
        rows: rows.iter().map(|r| vec![r.tau.to_string(), num(r.accuracy), num(r.trace_proxy)]).collect(),
    };
    ctx.out.write_table("window_sweep.csv", &table)?;
    ctx.out.write_plot("window_sweep.svg", &table, &PlotSpec::line("tau", &["accuracy", "trace_proxy"], None, "window sweep"))?;
    let best = rows.iter().fold(rows[0], |b, &r| if r.accuracy > b.accuracy { r } else { b });
    ctx.out.summary.insert("best_tau".into(), json!(best.tau));
    ctx.out.summary.insert("best_accuracy".into(), json!(best.accuracy));
    ctx.out.summary.insert("transition_interval".into(), json!(interval.map(|(a, b)| [a, b])));
    Ok(())
}

fn visualize(ctx: &mut Ctx) -> Result<(), CliError> {
    let net = network(ctx, false)?;
    let ev = ctx.cfg.config.evaluation.clone();
    let seed = ctx.seed("evaluation", SEED_EVAL);
    let (prior, schedule) = (ctx.prior.clone(), ctx.schedule.clone());
    let ridge = ctx.cfg.config.reference.ridge;
    let (x0, g) = ctx.out.timed("eigenfunctions", |_| {
        let eval = || -> spectral_guidance::Result<_> {
            let x0 = prior.sample(ev.points, substream(seed, 1)).x;
            let stats = fresh_whitening(&net, &prior, &schedule, ev.t, ev.n_eval, ridge, substream(seed, 2))?;
            let g = right_singular_functions(&net, &stats, &x0, ev.t, &schedule, ev.noise_draws, substream(seed, 3))?;
            Ok((x0, g))
        };
        eval().stage("eigenfunctions")
    })?;
    let k = g.ncols();
    let mut headers = vec!["x_0".to_string(), "x_1".to_string()];
    headers.extend((1..=k).map(|j| format!("psi_{j}")));
    let rows = (0..x0.nrows())
        .map(|i| {
            let mut r = vec![num(x0[(i, 0)]), num(x0[(i, 1)])];
            r.extend((0..k).map(|j| num(g[(i, j)])));
            r
        })
        .collect();
    let table = Table { headers, rows };
    ctx.out.write_table("eigenfunctions.csv", &table)?;
    for j in 1..=k {
        let col = format!("psi_{j}");
        let title = format!("mode {j} at t = {}", ev.t);
        ctx.out.write_plot(&format!("psi_{j}.svg"), &table, &PlotSpec::scatter("x_0", "x_1", Some(&col), &title))?;
    }
    Ok(())
}
