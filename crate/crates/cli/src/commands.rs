use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use atlas_core::closed_loop::exact_cost;
use atlas_core::dynamics::{from_linear, ControlAffineModel};
use atlas_core::hamiltonian::{build, spectrum};
use atlas_core::learn::{
    classify_learned_solution, eval_initial_states, evaluate_policy, lqr_value, td_stats, train, Checkpoint,
    Classification, PolicyEval, QuadraticValue, TrainConfig,
};
use atlas_core::linalg::{matrix_to_rows, ser_complex, ser_matrix};
use atlas_core::network::{ValueFunction, ValueNetwork};
use atlas_core::riccati::{boundary_filter, enumerate, stabilizing_solution, Boundary, RiccatiSolution};
use atlas_core::tabular::{value_iteration, TabularMdp};
use atlas_core::{AtlasError, LinearSystem};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::config::{
    failure_mode_train_defaults, load_system, overlay, parse, EnumerateConfig, EvalConfig, FailureModeConfig,
    TabularConfig, TrainCommandConfig,
};
use crate::output::OutputDir;
use crate::{CliError, CliResult};

pub struct Context {
    /// Directory of the config file; relative paths resolve against it.
    pub base: PathBuf,
    /// Seeds given on the command line, replacing the config's.
    pub seeds: Vec<u64>,
}

impl Context {
    fn seeds(&self, configured: &[u64]) -> Vec<u64> {
        if self.seeds.is_empty() { configured.to_vec() } else { self.seeds.clone() }
    }

    fn seed(&self, configured: u64) -> u64 {
        self.seeds.first().copied().unwrap_or(configured)
    }
}

fn csv_row(out: &mut String, fields: &[String]) {
    out.push_str(&fields.join(","));
    out.push('\n');
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

// ---------------------------------------------------------------- enumerate

#[derive(Serialize)]
struct Survivor {
    #[serde(serialize_with = "ser_matrix")]
    p: DMatrix<f64>,
    offset: f64,
    stable: bool,
    isolated: bool,
}

#[derive(Serialize)]
struct EnumerationReport<'a> {
    n: usize,
    m: usize,
    mode: atlas_core::TimeMode,
    discount: Option<f64>,
    #[serde(serialize_with = "ser_complex")]
    hamiltonian_eigenvalues: Vec<Complex64>,
    count_discrete: usize,
    has_continuum: bool,
    singular_selections: usize,
    stable_index: Option<usize>,
    stable_count: usize,
    isolated: &'a [RiccatiSolution],
    family_templates: Vec<Vec<usize>>,
    family_samples: &'a [RiccatiSolution],
    survivors: Option<Vec<Survivor>>,
}

fn format_complex(z: Complex64) -> String {
    if z.im == 0.0 {
        format!("{:.6}", z.re)
    } else {
        format!("{:.6}{:+.6}i", z.re, z.im)
    }
}

pub fn cmd_enumerate(ctx: &Context, value: Value, dir: &OutputDir) -> CliResult<()> {
    let cfg: EnumerateConfig = parse(value)?;
    let sys = load_system(&cfg.system, &ctx.base)?;
    let spec = spectrum(&build(&sys)?)?;
    let family = enumerate(&spec, &sys)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed(cfg.seed));
    let samples = family.sample(cfg.family_samples, &mut rng);

    let survivors = if cfg.boundaries.is_empty() {
        None
    } else {
        let boundaries = cfg
            .boundaries
            .iter()
            .map(|b| match (&b.radius_sq, &b.points) {
                (Some(r), None) => Ok(Boundary::Sphere { radius_sq: *r, value: b.value }),
                (None, Some(pts)) => {
                    let points: Vec<DVector<f64>> = pts.iter().map(|p| DVector::from_vec(p.clone())).collect();
                    if points.iter().any(|p| p.len() != sys.n()) {
                        return Err(CliError::Validation("boundary point has the wrong dimension".into()));
                    }
                    Ok(Boundary::Points { points, value: b.value })
                }
                _ => Err(CliError::Validation("a boundary needs exactly one of radius_sq or points".into())),
            })
            .collect::<CliResult<Vec<_>>>()?;
        let candidates: Vec<RiccatiSolution> = family.isolated.iter().chain(&samples).cloned().collect();
        let kept = boundary_filter(&candidates, &boundaries, cfg.allow_offset, &sys)?;
        Some(
            kept.into_iter()
                .map(|(s, offset)| Survivor {
                    isolated: matches!(s.source, atlas_core::riccati::SolutionSource::Subspace(_)),
                    stable: s.stable,
                    p: s.p,
                    offset,
                })
                .collect::<Vec<_>>(),
        )
    };

    let mut summary = String::new();
    let _ = writeln!(summary, "state dimension: {}", sys.n());
    let _ = writeln!(summary, "isolated solutions: {}", family.count_discrete);
    let _ = writeln!(summary, "continuum: {}", if family.has_continuum { "yes" } else { "no" });
    match family.stable_index() {
        Some(i) => {
            let _ = writeln!(summary, "stable solution: #{i}");
            for row in matrix_to_rows(&family.isolated[i].p) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.10}")).collect();
                let _ = writeln!(summary, "  [{}]", cells.join(", "));
            }
        }
        None => {
            let _ = writeln!(summary, "stable solution: none");
        }
    }
    let _ = writeln!(summary, "stable count: {}", family.stable_count());
    let _ = writeln!(summary);
    let _ = writeln!(summary, "#  stable  are_residual  closed-loop eigenvalues");
    for (i, s) in family.isolated.iter().enumerate() {
        let eigs: Vec<String> = s.closed_loop_eigs.iter().map(|&z| format_complex(z)).collect();
        let _ = writeln!(summary, "{i:<2} {:<7} {:<13.3e} {}", s.stable, s.are_residual, eigs.join(" "));
    }
    if let Some(surv) = &survivors {
        let _ = writeln!(summary);
        let _ = writeln!(summary, "boundary survivors: {}", surv.len());
        for s in surv {
            let _ = writeln!(summary, "  offset {:.10} stable {} isolated {}", s.offset, s.stable, s.isolated);
        }
    }

    let report = EnumerationReport {
        n: sys.n(),
        m: sys.m(),
        mode: sys.mode,
        discount: sys.discount,
        hamiltonian_eigenvalues: spec.eigenvalues.clone(),
        count_discrete: family.count_discrete,
        has_continuum: family.has_continuum,
        singular_selections: family.singular_selections,
        stable_index: family.stable_index(),
        stable_count: family.stable_count(),
        isolated: &family.isolated,
        family_templates: family.templates.iter().map(|t| t.counts.clone()).collect(),
        family_samples: &samples,
        survivors,
    };
    dir.write_json("solutions.json", &report)?;
    dir.write("summary.txt", summary.as_bytes())
}

// ------------------------------------------------------------- shared helpers

fn is_training_divergence(e: &AtlasError) -> bool {
    matches!(e, AtlasError::TrainingDiverged { .. })
}

fn rollouts_csv(x0s: &[DVector<f64>], eval: &PolicyEval) -> String {
    let n = x0s.first().map_or(0, |x| x.len());
    let mut out = String::new();
    let mut header = vec!["rollout".to_string()];
    header.extend((1..=n).map(|i| format!("x0_{i}")));
    header.extend(["steps", "cost", "diverged"].map(String::from));
    csv_row(&mut out, &header);
    for (k, (x0, t)) in x0s.iter().zip(&eval.trajectories).enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(x0.iter().map(|v| v.to_string()));
        row.extend([(t.len() - 1).to_string(), t.cumulative_cost.to_string(), t.diverged.to_string()]);
        csv_row(&mut out, &row);
    }
    out
}

/// Values on a grid over the first two state coordinates, the rest held at
/// the equilibrium.
fn value_surface(x_eq: &DVector<f64>, half: f64, k: usize, surfaces: &[(&str, &dyn ValueFunction)]) -> String {
    let n = x_eq.len();
    let dims = n.min(2);
    let k = k.max(2);
    let count = k.pow(dims as u32);
    let xs = DMatrix::from_fn(n, count, |r, c| {
        if r < dims {
            let idx = (c / k.pow(r as u32)) % k;
            x_eq[r] - half + 2.0 * half * idx as f64 / (k - 1) as f64
        } else {
            x_eq[r]
        }
    });
    let columns: Vec<DVector<f64>> = surfaces.iter().map(|(_, v)| v.values(&xs)).collect();
    let mut out = String::new();
    let mut header: Vec<String> = (1..=dims).map(|i| format!("x_{i}")).collect();
    header.extend(surfaces.iter().map(|(name, _)| name.to_string()));
    csv_row(&mut out, &header);
    for c in 0..count {
        let mut row: Vec<String> = (0..dims).map(|r| xs[(r, c)].to_string()).collect();
        row.extend(columns.iter().map(|col| col[c].to_string()));
        csv_row(&mut out, &row);
    }
    out
}

fn name_of<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

// ------------------------------------------------------------- failure-mode

struct FailureRun {
    initializer: String,
    seed: u64,
    status: String,
    epochs: usize,
    final_mse: Option<f64>,
    classification: Option<Classification>,
    eval: Option<PolicyEval>,
}

#[allow(clippy::too_many_arguments)]
fn failure_run(
    sys: &LinearSystem,
    model: &ControlAffineModel,
    stable: &QuadraticValue,
    config: &TrainConfig,
    cfg: &FailureModeConfig,
    prefix: &str,
    dir: &OutputDir,
) -> CliResult<FailureRun> {
    let mut run = FailureRun {
        initializer: name_of(&config.initializer),
        seed: config.seed,
        status: "ok".into(),
        epochs: 0,
        final_mse: None,
        classification: None,
        eval: None,
    };
    let outcome = match train(model, config) {
        Ok(o) => o,
        Err(e) if is_training_divergence(&e) => {
            log::warn!("{prefix}: {e}");
            run.status = "training_diverged".into();
            return Ok(run);
        }
        Err(e) => return Err(e.into()),
    };
    run.epochs = outcome.history.epochs.len();
    let stats = td_stats(&outcome.net, model, &outcome.dataset, config.tau);
    run.final_mse = Some(stats.mse);
    let class = classify_learned_solution(&outcome.net, sys, cfg.half_width)?;
    let x0s = eval_initial_states(model, cfg.eval_rollouts, config.seed);
    let eval = evaluate_policy(&outcome.net, model, &x0s, cfg.eval_steps, config.dt)?;

    let fitted = QuadraticValue { p: class.p_hat.clone(), c: class.offset, x_eq: model.x_eq.clone() };
    let nearest = QuadraticValue::new(class.nearest.clone());
    let surface = value_surface(
        &model.x_eq,
        cfg.half_width,
        cfg.grid,
        &[("learned", &outcome.net), ("fitted", &fitted), ("nearest", &nearest), ("stable", stable)],
    );
    dir.write(&format!("{prefix}/value_surface.csv"), surface.as_bytes())?;
    dir.write(&format!("{prefix}/rollouts.csv"), rollouts_csv(&x0s, &eval).as_bytes())?;
    dir.write(&format!("{prefix}/history.csv"), outcome.history.to_csv().as_bytes())?;
    dir.write_json(&format!("{prefix}/classification.json"), &class)?;
    let ck = Checkpoint::from_network(&outcome.net, config.seed, &config.hash());
    dir.write(&format!("{prefix}/checkpoint.json"), ck.to_json()?.as_bytes())?;
    run.classification = Some(class);
    run.eval = Some(eval);
    Ok(run)
}

pub fn cmd_failure_mode(ctx: &Context, value: Value, dir: &OutputDir) -> CliResult<()> {
    let cfg: FailureModeConfig = parse(value)?;
    let sys = match &cfg.system {
        Some(spec) => load_system(spec, &ctx.base)?,
        None => LinearSystem::toy(),
    };
    let model = from_linear(&sys)?;
    let stable = QuadraticValue::new(stabilizing_solution(&sys)?.p);
    let base = overlay(&failure_mode_train_defaults(), &cfg.train)?;
    let seeds = ctx.seeds(&cfg.seeds);
    let mut jobs = Vec::new();
    for &init in &cfg.initializers {
        for &seed in &seeds {
            let config = TrainConfig { initializer: init, seed, ..base.clone() };
            config.validate()?;
            jobs.push(config);
        }
    }
    let runs = jobs
        .par_iter()
        .map(|config| {
            let prefix = format!("{}/seed-{}", name_of(&config.initializer), config.seed);
            failure_run(&sys, &model, &stable, config, &cfg, &prefix, dir)
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut out = String::new();
    csv_row(
        &mut out,
        &[
            "initializer", "seed", "status", "epochs", "final_mse", "fit_residual", "fitted_stable", "nearest_stable",
            "nearest_isolated", "distance", "distance_to_stable", "eval_mean_cost", "divergence_fraction",
        ]
        .map(String::from),
    );
    for r in &runs {
        let c = r.classification.as_ref();
        let e = r.eval.as_ref();
        csv_row(
            &mut out,
            &[
                r.initializer.clone(),
                r.seed.to_string(),
                r.status.clone(),
                r.epochs.to_string(),
                opt(r.final_mse),
                opt(c.map(|c| c.fit_residual)),
                c.map_or_else(String::new, |c| c.fitted_stable.to_string()),
                c.map_or_else(String::new, |c| c.nearest_stable.to_string()),
                c.map_or_else(String::new, |c| c.nearest_isolated.to_string()),
                opt(c.map(|c| c.distance)),
                opt(c.map(|c| c.distance_to_stable)),
                opt(e.map(|e| e.mean_cost)),
                opt(e.map(|e| e.divergence_fraction)),
            ],
        );
    }
    dir.write("results.csv", out.as_bytes())
}

// ------------------------------------------------------------------- train

/// Mean exact cost-to-go `x0^T P x0` under the stabilizing solution, for
/// linear models only.
fn exact_reference(model: &ControlAffineModel, x0s: &[DVector<f64>]) -> CliResult<Option<f64>> {
    let atlas_core::dynamics::Dynamics::Linear { a, b } = &model.dynamics else {
        return Ok(None);
    };
    let sys = LinearSystem::new(a.clone(), b.clone(), model.q.clone(), model.r.clone(), atlas_core::TimeMode::Continuous);
    let p = stabilizing_solution(&sys)?.p;
    let total: f64 = x0s.iter().map(|x| exact_cost(&p, &(x - &model.x_eq))).sum();
    Ok(Some(total / x0s.len().max(1) as f64))
}

struct Reference {
    lqr_cost: f64,
    lqr_divergence: f64,
    exact_cost: Option<f64>,
}

fn reference(model: &ControlAffineModel, x0s: &[DVector<f64>], steps: usize, dt: f64) -> CliResult<Reference> {
    let lqr = evaluate_policy(&lqr_value(model)?, model, x0s, steps, dt)?;
    Ok(Reference {
        lqr_cost: lqr.mean_cost,
        lqr_divergence: lqr.divergence_fraction,
        exact_cost: exact_reference(model, x0s)?,
    })
}

struct TrainRun {
    seed: u64,
    status: String,
    epochs: usize,
    weighted_loss: Option<f64>,
    mse: Option<f64>,
    eval: Option<PolicyEval>,
    reference: Reference,
}

pub fn cmd_train(ctx: &Context, value: Value, dir: &OutputDir) -> CliResult<()> {
    let cfg: TrainCommandConfig = parse(value)?;
    let model = cfg.model.build(&ctx.base)?;
    let base = overlay(&TrainConfig::default(), &cfg.train)?;
    base.validate()?;
    let seeds = ctx.seeds(&cfg.seeds);
    let runs = seeds
        .par_iter()
        .map(|&seed| -> CliResult<TrainRun> {
            let config = TrainConfig { seed, ..base.clone() };
            let x0s = eval_initial_states(&model, config.eval_rollouts, seed);
            let reference = reference(&model, &x0s, config.max_traj_len, config.dt)?;
            let mut run = TrainRun {
                seed,
                status: "ok".into(),
                epochs: 0,
                weighted_loss: None,
                mse: None,
                eval: None,
                reference,
            };
            let outcome = match train(&model, &config) {
                Ok(o) => o,
                Err(e) if is_training_divergence(&e) => {
                    log::warn!("seed {seed}: {e}");
                    run.status = "training_diverged".into();
                    return Ok(run);
                }
                Err(e) => return Err(e.into()),
            };
            let prefix = format!("seed-{seed}");
            let last = outcome.history.last().cloned();
            run.epochs = outcome.history.epochs.len();
            run.weighted_loss = last.as_ref().map(|r| r.weighted_loss);
            run.mse = last.as_ref().map(|r| r.mse);
            run.eval = Some(evaluate_policy(&outcome.net, &model, &x0s, config.max_traj_len, config.dt)?);
            dir.write(&format!("{prefix}/history.csv"), outcome.history.to_csv().as_bytes())?;
            let ck = Checkpoint::from_network(&outcome.net, seed, &config.hash());
            dir.write(&format!("{prefix}/checkpoint.json"), ck.to_json()?.as_bytes())?;
            Ok(run)
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut out = String::new();
    csv_row(
        &mut out,
        &[
            "seed", "status", "epochs", "weighted_loss", "mse", "eval_mean_cost", "divergence_fraction", "lqr_cost",
            "lqr_divergence_fraction", "exact_cost",
        ]
        .map(String::from),
    );
    for r in &runs {
        let e = r.eval.as_ref();
        csv_row(
            &mut out,
            &[
                r.seed.to_string(),
                r.status.clone(),
                r.epochs.to_string(),
                opt(r.weighted_loss),
                opt(r.mse),
                opt(e.map(|e| e.mean_cost)),
                opt(e.map(|e| e.divergence_fraction)),
                r.reference.lqr_cost.to_string(),
                r.reference.lqr_divergence.to_string(),
                opt(r.reference.exact_cost),
            ],
        );
    }
    dir.write("results.csv", out.as_bytes())
}

// -------------------------------------------------------------------- eval

/// Expands directories into the `seed-*/checkpoint.json` files they hold.
fn checkpoint_files(base: &Path, entries: &[String]) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in entries {
        let path = base.join(entry);
        if path.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(&path)?
                .filter_map(|e| e.ok().map(|e| e.path().join("checkpoint.json")))
                .filter(|p| p.is_file())
                .collect();
            found.sort();
            if found.is_empty() {
                return Err(CliError::Validation(format!("no checkpoints under {}", path.display())));
            }
            files.extend(found);
        } else {
            files.push(path);
        }
    }
    Ok(files)
}

pub fn cmd_eval(ctx: &Context, value: Value, dir: &OutputDir) -> CliResult<()> {
    let cfg: EvalConfig = parse(value)?;
    let model = cfg.model.build(&ctx.base)?;
    let base = overlay(&TrainConfig::default(), &cfg.train)?;
    base.validate()?;
    let steps = cfg.steps.unwrap_or(base.max_traj_len);
    let mut loaded: Vec<(PathBuf, Checkpoint, ValueNetwork)> = Vec::new();
    for path in checkpoint_files(&ctx.base, &cfg.checkpoints)? {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let ck = Checkpoint::from_json(&text)?;
        let expected = TrainConfig { seed: ck.seed, ..base.clone() }.hash();
        let net = ck.network(Some(&expected)).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
        if net.n != model.n {
            return Err(CliError::Checkpoint(format!(
                "{}: network takes {} states, model has {}",
                path.display(),
                net.n,
                model.n
            )));
        }
        loaded.push((path, ck, net));
    }
    if !ctx.seeds.is_empty() {
        loaded.retain(|(_, ck, _)| ctx.seeds.contains(&ck.seed));
    }
    let evals = loaded
        .par_iter()
        .map(|(_, ck, net)| -> CliResult<(PolicyEval, Reference, Vec<DVector<f64>>)> {
            let x0s = eval_initial_states(&model, cfg.rollouts, ck.seed);
            let eval = evaluate_policy(net, &model, &x0s, steps, base.dt)?;
            Ok((eval, reference(&model, &x0s, steps, base.dt)?, x0s))
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut out = String::new();
    csv_row(
        &mut out,
        &["checkpoint", "seed", "mean_cost", "divergence_fraction", "lqr_cost", "lqr_divergence_fraction", "exact_cost"]
            .map(String::from),
    );
    for (k, ((path, ck, _), (eval, r, x0s))) in loaded.iter().zip(&evals).enumerate() {
        let label = path.strip_prefix(&ctx.base).unwrap_or(path).display().to_string();
        csv_row(
            &mut out,
            &[
                label,
                ck.seed.to_string(),
                eval.mean_cost.to_string(),
                eval.divergence_fraction.to_string(),
                r.lqr_cost.to_string(),
                r.lqr_divergence.to_string(),
                opt(r.exact_cost),
            ],
        );
        dir.write(&format!("rollouts/{k}.csv"), rollouts_csv(x0s, eval).as_bytes())?;
        if cfg.write_trajectories {
            for (i, t) in eval.trajectories.iter().enumerate() {
                dir.write(&format!("trajectories/{k}-{i}.csv"), t.to_csv().as_bytes())?;
            }
        }
    }
    dir.write("results.csv", out.as_bytes())
}

// ----------------------------------------------------------------- tabular

#[derive(Serialize)]
struct ContinuousContrast {
    isolated_solutions: usize,
    continuum: bool,
    stable_count: usize,
}

#[derive(Serialize)]
struct TabularSummary {
    mdps: usize,
    inits: usize,
    tol: f64,
    sweeps: usize,
    max_ratio_minus_gamma: f64,
    contraction_holds: bool,
    max_fixed_point_spread: f64,
    unique_fixed_point: bool,
    /// The toy linear-quadratic problem, which has several solutions.
    continuous_contrast: ContinuousContrast,
}

/// Tolerance on contraction ratios.
const RATIO_SLACK: f64 = 1e-12;
/// Tolerance on fixed-point agreement across initializations.
const AGREEMENT_TOL: f64 = 1e-8;

pub fn cmd_tabular(ctx: &Context, value: Value, dir: &OutputDir) -> CliResult<()> {
    let cfg: TabularConfig = parse(value)?;
    if !(cfg.tol > 0.0) {
        return Err(CliError::Validation(format!("tol must be positive, got {}", cfg.tol)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed(cfg.seed));
    let mdps: Vec<TabularMdp> = match &cfg.mdp {
        Some(path) => {
            let full = ctx.base.join(path);
            let text = std::fs::read_to_string(&full)
                .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", full.display())))?;
            vec![TabularMdp::from_json(&text)?]
        }
        None => {
            if cfg.max_states == 0 || cfg.max_actions == 0 {
                return Err(CliError::Validation("max_states and max_actions must be positive".into()));
            }
            (0..cfg.mdps)
                .map(|_| {
                    let s = rng.random_range(1..=cfg.max_states);
                    let a = rng.random_range(1..=cfg.max_actions);
                    TabularMdp::random(s, a, cfg.gamma, &mut rng)
                })
                .collect::<atlas_core::Result<_>>()?
        }
    };

    let mut ratios = String::from("mdp,init,sweep,ratio,gamma\n");
    let mut sweeps = 0;
    let mut worst_ratio = f64::NEG_INFINITY;
    let mut spread: f64 = 0.0;
    for (i, mdp) in mdps.iter().enumerate() {
        let reach = 10.0 / (1.0 - mdp.gamma);
        let mut first: Option<DVector<f64>> = None;
        for k in 0..cfg.inits {
            let w0 = DVector::from_fn(mdp.num_states(), |_, _| rng.random_range(-reach..reach));
            let vi = value_iteration(mdp, &w0, cfg.tol)?;
            for (j, r) in vi.ratios.iter().enumerate() {
                let _ = writeln!(ratios, "{i},{k},{j},{r},{}", mdp.gamma);
                worst_ratio = worst_ratio.max(r - mdp.gamma);
            }
            sweeps += vi.ratios.len();
            match &first {
                None => first = Some(vi.value),
                Some(v0) => spread = spread.max((&vi.value - v0).amax()),
            }
        }
    }

    let toy = LinearSystem::toy();
    let family = enumerate(&spectrum(&build(&toy)?)?, &toy)?;
    let summary = TabularSummary {
        mdps: mdps.len(),
        inits: cfg.inits,
        tol: cfg.tol,
        sweeps,
        max_ratio_minus_gamma: if sweeps == 0 { 0.0 } else { worst_ratio },
        contraction_holds: sweeps == 0 || worst_ratio <= RATIO_SLACK,
        max_fixed_point_spread: spread,
        unique_fixed_point: spread <= AGREEMENT_TOL,
        continuous_contrast: ContinuousContrast {
            isolated_solutions: family.count_discrete,
            continuum: family.has_continuum,
            stable_count: family.stable_count(),
        },
    };
    dir.write("ratios.csv", ratios.as_bytes())?;
    dir.write_json("summary.json", &summary)
}
