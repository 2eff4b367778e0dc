//! Experiment steps shared by the command-line tool and the tests. Each step
//! reads and writes artifacts by path only.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, GeneratorConfig, ModelKind};
use crate::data::{CovariateSchema, Dataset, DatasetMeta, Trajectory};
use crate::datagen::{self, exact_gformula, gen_oracle_mdp, OracleMdp, TabularEstimator};
use crate::error::{Error, Result};
use crate::gcomp::{
    build_residual_bank, fit_linear_gcomp, simulate_mc, simulate_unit, ConditionalDensityEstimator, ResidualBank,
    SimulationConfig, SimulationResult, TreatmentRegime,
};
use crate::gtransformer::{fit_observational_policy, train_with_progress, EpochLog, GTransformer};
use crate::io::{self, CheckpointFile, Model, PolicyFile, SimulationHeader, Stamp, TrainingDigest};
use crate::metrics::{self, line_chart_svg, Evaluation, MetricReport};
use crate::seed;

pub const EFFECTIVE_CONFIG: &str = "config.effective.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.gfc";
pub const POLICY_FILE: &str = "policy.gfp";
pub const POLICY_REGIME: &str = "observational_policy";

/// Writes the merged configuration next to the outputs in `dir`.
pub fn write_effective_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let text = format!("# config hash {}\n{}", cfg.hash(), cfg.to_toml()?);
    io::write_bytes(&dir.join(EFFECTIVE_CONFIG), text.as_bytes())
}

fn dataset_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.gfd"))
}

/// File stem of the counterfactual split for `regime`.
pub fn counterfactual_name(regime: &str) -> String {
    format!("cf_{regime}")
}

/// Generates the observational splits and the counterfactual test sets,
/// writing `train`, `val`, `test` and `cf_<regime>` dataset files.
pub fn generate(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let seed = cfg.derived_seed("generator");
    let mut out: Vec<(String, Dataset)> = Vec::new();
    match &cfg.generator {
        GeneratorConfig::Tumor(c) => {
            let c = datagen::TumorSimConfig { seed, ..c.clone() };
            let d = datagen::gen_tumor(&c)?;
            out.extend([("train".into(), d.train), ("val".into(), d.val), ("test".into(), d.test)]);
            for (r, data) in d.counterfactual {
                out.push((counterfactual_name(r.id()), data));
            }
        }
        GeneratorConfig::Hemo(c) => {
            let c = datagen::HemoSimConfig { seed, ..c.clone() };
            let d = datagen::gen_hemo(&c)?;
            out.extend([
                ("train".into(), d.train),
                ("val".into(), d.val),
                ("test".into(), d.test),
                (counterfactual_name("g_c1"), d.c1),
                (counterfactual_name("g_c2"), d.c2),
            ]);
        }
        GeneratorConfig::Oracle(o) => {
            let (all, mdp) = gen_oracle_mdp(&o.mdp_config(seed))?;
            let n = all.len();
            let n_train = (o.train_fraction * n as f64).round() as usize;
            let n_val = (o.val_fraction * n as f64).round() as usize;
            let test = all.slice(n_train + n_val..n, "test");
            let exact = TabularEstimator::exact(&mdp);
            for id in cfg.regime_ids() {
                let regime = cfg.regime(&id, &mdp.schema)?;
                let cf = sample_counterfactual(&exact, &test, &regime, o.switch_time, seed)?;
                out.push((counterfactual_name(&id), cf));
            }
            out.insert(0, ("test".into(), test));
            out.insert(0, ("val".into(), all.slice(n_train..n_train + n_val, "val")));
            out.insert(0, ("train".into(), all.slice(0..n_train, "train")));
        }
    }
    let mut paths = Vec::new();
    for (name, data) in &out {
        let p = dataset_path(dir, name);
        io::save_dataset(&p, data)?;
        paths.push(p);
    }
    write_effective_config(cfg, dir)?;
    Ok(paths)
}

/// One trajectory per unit from a known system: history before `start` is
/// kept and later rows follow `regime`.
pub fn sample_counterfactual(
    est: &dyn ConditionalDensityEstimator,
    data: &Dataset,
    regime: &TreatmentRegime,
    start: usize,
    seed: u64,
) -> Result<Dataset> {
    let schema = est.schema();
    let (d_l, d_a) = (schema.num_covariates(), schema.num_treatments());
    let units = data
        .units
        .iter()
        .map(|u| {
            let mut cfg = SimulationConfig::new(1, start, u.steps, seed);
            cfg.keep_draws = true;
            let sim = simulate_unit(est, u, regime, &ResidualBank::empty(), &cfg)?;
            let draws = sim.draws.expect("draws kept");
            let mut cov = u.covariates[..start * d_l].to_vec();
            cov.extend_from_slice(&draws);
            let mut treat = u.treatments[..(start - 1) * d_a].to_vec();
            treat.extend_from_slice(&sim.action_mean);
            treat.extend(std::iter::repeat_n(0.0, d_a));
            Ok(Trajectory::new(u.id, u.statics.clone(), cov, treat, u.steps))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = DatasetMeta {
        regime_id: regime.id.clone(),
        switch_time: Some(start),
        split: "counterfactual".into(),
        ..data.meta.clone()
    };
    Ok(Dataset::new(data.schema.clone(), meta, units))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub log: Option<PathBuf>,
    pub policy: Option<PathBuf>,
}

/// Fits the configured estimator (and optionally the observational policy),
/// builds the residual bank on the validation split and writes the
/// checkpoint plus training logs into `dir`.
pub fn train(
    cfg: &ExperimentConfig,
    train: &Dataset,
    val: &Dataset,
    dir: &Path,
    progress: &mut dyn FnMut(&str, &EpochLog),
) -> Result<TrainOutput> {
    if train.schema != val.schema {
        return Err(Error::Schema("training and validation schemas differ".into()));
    }
    let hash = cfg.hash();
    let seed = cfg.derived_seed("train");
    let tc = crate::gtransformer::TrainConfig {
        seed,
        ..cfg.model.train.clone()
    };
    let (model, digest, log_path) = match cfg.model.kind {
        ModelKind::GTransformer => {
            let mut m = GTransformer::new(crate::data::Normalizer::fit(train), &cfg.model.gtransformer, seed)?;
            let log = train_with_progress(&mut m, train, val, &tc, &mut |e| progress("model", e))?;
            let p = dir.join("train_log.csv");
            io::write_bytes(&p, log.to_csv().as_bytes())?;
            (Model::GTransformer(Box::new(m)), Some(TrainingDigest::of(&log)), Some(p))
        }
        ModelKind::Linear => (Model::Linear(Box::new(fit_linear_gcomp(train, &cfg.model.linear)?)), None, None),
    };
    let bank = build_residual_bank(model.estimator(), &val.units, tc.first_target, cfg.model.residual_mode)?;
    let ckpt = CheckpointFile::new(model, bank, digest, &hash, seed);
    let checkpoint = dir.join(CHECKPOINT_FILE);
    io::save_checkpoint(&checkpoint, &ckpt)?;
    let policy = if cfg.model.policy {
        let pc = crate::gtransformer::TrainConfig {
            seed: cfg.derived_seed("policy"),
            ..tc.clone()
        };
        let (pm, log) = fit_observational_policy(train, val, &cfg.model.gtransformer, &pc, &mut |e| progress("policy", e))?;
        io::write_bytes(&dir.join("policy_log.csv"), log.to_csv().as_bytes())?;
        let file = PolicyFile {
            stamp: Stamp::new(io::KIND_POLICY, &hash, pc.seed),
            schema: pm.schema.clone(),
            policy: pm,
            training: Some(TrainingDigest::of(&log)),
        };
        let p = dir.join(POLICY_FILE);
        io::save_policy(&p, &file)?;
        Some(p)
    } else {
        None
    };
    write_effective_config(cfg, dir)?;
    Ok(TrainOutput {
        checkpoint,
        log: log_path,
        policy,
    })
}

/// Resolves `regime_id`, including the fitted observational policy.
pub fn resolve_regime(
    cfg: &ExperimentConfig,
    regime_id: &str,
    schema: &CovariateSchema,
    policy: Option<&PolicyFile>,
) -> Result<TreatmentRegime> {
    if regime_id == POLICY_REGIME {
        let p = policy.ok_or_else(|| Error::MissingRegime(format!("{POLICY_REGIME} (no policy file given)")))?;
        if p.schema != *schema {
            return Err(Error::Schema("policy schema differs from the checkpoint schema".into()));
        }
        return Ok(TreatmentRegime::policy(POLICY_REGIME, Arc::new(p.policy.clone())));
    }
    cfg.regime(regime_id, schema)
}

/// Monte Carlo simulation of every unit in `data` under `regime_id` over
/// rows `start..end`.
pub fn simulate(
    cfg: &ExperimentConfig,
    ckpt: &CheckpointFile,
    policy: Option<&PolicyFile>,
    data: &Dataset,
    regime_id: &str,
    draws: usize,
    start: usize,
    end: usize,
) -> Result<SimulationResult> {
    ckpt.check_schema(data)?;
    let regime = resolve_regime(cfg, regime_id, &ckpt.schema, policy)?;
    let mut sc = SimulationConfig::new(draws, start, end, cfg.derived_seed("simulate"));
    sc.quantiles = cfg.simulation.quantiles;
    sc.keep_draws = cfg.simulation.keep_draws;
    simulate_mc(ckpt.model.estimator(), &data.units, &regime, &ckpt.residual_bank, &sc)
}

/// File name of a simulation result.
pub fn simulation_name(model: &str, regime: &str) -> String {
    format!("sim_{model}_{regime}.gfs")
}

pub fn save_simulation(cfg: &ExperimentConfig, ckpt: &CheckpointFile, res: &SimulationResult, path: &Path) -> Result<()> {
    io::save_simulation(path, res, &ckpt.schema, &ckpt.model.estimator().continuous_scale(), &cfg.hash())
}

/// Computes the requested metrics for a simulation against `truth`.
pub fn evaluate(
    cfg: &ExperimentConfig,
    header: &SimulationHeader,
    res: &SimulationResult,
    truth: &Dataset,
    metrics: &[String],
) -> Result<Vec<MetricReport>> {
    if header.schema != truth.schema {
        return Err(Error::Schema("simulation schema differs from the truth schema".into()));
    }
    let (columns, scales, note) = metrics::scored_columns(&header.schema, &header.continuous_scale);
    if scales.len() != columns.len() {
        return Err(Error::data("simulation file lacks covariate scales"));
    }
    let names: Vec<String> = columns.iter().map(|&c| header.schema.covariates[c].name.clone()).collect();
    let hash = cfg.hash();
    let ev = Evaluation {
        results: res,
        truth,
        columns,
        scales,
        config_hash: hash.clone(),
    };
    if metrics.iter().any(|m| m == "calibration") && res.draws_per_unit < metrics::MIN_CALIBRATION_DRAWS {
        return Err(Error::config(format!(
            "calibration needs at least {} draws per unit",
            metrics::MIN_CALIBRATION_DRAWS
        )));
    }
    let mut out: Vec<MetricReport> = ev
        .standard_reports(&names)?
        .into_iter()
        .filter(|r| metrics.contains(&r.metric))
        .collect();
    if metrics.iter().any(|m| m == "percent_rmse") {
        out.push(percent_rmse_report(cfg, &header.schema, res, truth, &hash)?);
    }
    if let Some(n) = note {
        out.iter_mut().for_each(|r| r.notes.push(n.clone()));
    }
    Ok(out)
}

fn percent_rmse_report(
    cfg: &ExperimentConfig,
    schema: &CovariateSchema,
    res: &SimulationResult,
    truth: &Dataset,
    hash: &str,
) -> Result<MetricReport> {
    let GeneratorConfig::Tumor(t) = &cfg.generator else {
        return Err(Error::config("percent_rmse is defined for the tumor generator only"));
    };
    let (steps, d_l, y) = (res.steps(), res.num_covariates, schema.outcome);
    let mut pred = Vec::new();
    let mut obs = Vec::new();
    for sim in &res.units {
        let u = truth
            .find(sim.unit_id)
            .ok_or_else(|| Error::data(format!("unit {} missing from the truth dataset", sim.unit_id)))?;
        for s in 0..steps {
            pred.push(sim.mean[s * d_l + y]);
            obs.push(u.covariate(res.start + s, y));
        }
    }
    let r = metrics::percent_rmse(&pred, &obs, steps, t.max_volume)?;
    Ok(MetricReport {
        metric: "percent_rmse".into(),
        regime_id: res.regime_id.clone(),
        times: (res.start..res.end).collect(),
        values: r.per_step,
        counts: vec![res.units.len(); steps],
        aggregate: r.overall,
        aggregation: "RMSE pooled over all units and steps, percent of the maximum volume".into(),
        config_hash: hash.into(),
        notes: vec![format!("outcome `{}` scaled by {}", schema.covariates[y].name, t.max_volume)],
        breakdown: Default::default(),
    })
}

/// Writes each report as `<tag>_<metric>.csv` and `.json`, plus `.svg`
/// charts when enabled.
pub fn write_reports(cfg: &ExperimentConfig, reports: &[MetricReport], dir: &Path, tag: &str) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for r in reports {
        let stem = dir.join(format!("{tag}_{}", r.metric));
        let csv = stem.with_extension("csv");
        io::write_bytes(&csv, r.to_csv().as_bytes())?;
        let json = stem.with_extension("json");
        io::write_bytes(&json, r.to_json()?.as_bytes())?;
        paths.extend([csv, json]);
        if cfg.evaluation.plots {
            let pts = r.times.iter().zip(&r.values).map(|(&t, &v)| (t as f64, v)).collect();
            let svg = line_chart_svg(&format!("{} ({})", r.metric, r.regime_id), "time", &[(tag.to_string(), pts)]);
            let p = stem.with_extension("svg");
            io::write_bytes(&p, svg.as_bytes())?;
            paths.push(p);
        }
    }
    write_effective_config(cfg, dir)?;
    Ok(paths)
}

/// Simulates `data` under the fitted observational policy from row `start`
/// and scores it against the observed trajectories.
pub fn predictive_check(
    cfg: &ExperimentConfig,
    ckpt: &CheckpointFile,
    policy: &PolicyFile,
    data: &Dataset,
    start: usize,
) -> Result<Vec<MetricReport>> {
    ckpt.check_schema(data)?;
    if policy.schema != ckpt.schema {
        return Err(Error::Schema("policy schema differs from the checkpoint schema".into()));
    }
    let end = data.max_steps();
    metrics::predictive_check(
        ckpt.model.estimator(),
        Arc::new(policy.policy.clone()),
        &ckpt.residual_bank,
        data,
        start,
        end,
        cfg.simulation.draws,
        cfg.derived_seed("predictive-check"),
        &cfg.hash(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub regime: String,
    pub unit: u64,
    pub row: usize,
    pub total_variation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Empirical distribution of the joint state at `row` over kept draws.
pub fn empirical_joint(mdp: &OracleMdp, res: &crate::gcomp::UnitSimulation, start: usize, row: usize, draws: usize) -> Vec<f64> {
    let d_l = mdp.schema.num_covariates();
    let steps = res.mean.len() / d_l;
    let d = res.draws.as_ref().expect("draws kept");
    let mut out = vec![0.0; mdp.num_states()];
    for r in 0..draws {
        let i = (r * steps + row - start) * d_l;
        out[mdp.encode(&d[i..i + d_l])] += 1.0 / draws as f64;
    }
    out
}

/// Compares Monte Carlo simulation with the true transition tables against
/// exact enumeration of the g-formula at the first two simulated rows.
pub fn verify_oracle(cfg: &ExperimentConfig) -> Result<Vec<OracleCheck>> {
    let GeneratorConfig::Oracle(o) = &cfg.generator else {
        return Err(Error::config("verify-oracle needs an oracle generator"));
    };
    let seed = cfg.derived_seed("generator");
    let (data, mdp) = gen_oracle_mdp(&o.mdp_config(seed))?;
    let exact = TabularEstimator::exact(&mdp);
    let start = o.switch_time;
    let end = (start + 2).min(o.steps);
    let mut out = Vec::new();
    for id in ["withhold", "treat_high"] {
        let regime = cfg.regime(id, &mdp.schema)?;
        for (k, unit) in data.units.iter().take(o.verify_units).enumerate() {
            let mut sc = SimulationConfig::new(o.verify_draws, start, end, seed::derive(cfg.seed, "verify", k as u64, 0));
            sc.keep_draws = true;
            let sim = simulate_unit(&exact, unit, &regime, &ResidualBank::empty(), &sc)?;
            for row in start..end {
                let p = exact_gformula(&mdp, unit, start, &regime, row)?;
                let q = empirical_joint(&mdp, &sim, start, row, o.verify_draws);
                let tv = total_variation(&p, &q);
                out.push(OracleCheck {
                    regime: id.into(),
                    unit: unit.id,
                    row,
                    total_variation: tv,
                    tolerance: o.verify_tolerance,
                    pass: tv < o.verify_tolerance,
                });
            }
        }
    }
    Ok(out)
}

pub fn oracle_table(rows: &[OracleCheck]) -> String {
    let mut s = String::from("regime,unit,row,total_variation,tolerance,result\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.5},{},{}",
            r.regime,
            r.unit,
            r.row,
            r.total_variation,
            r.tolerance,
            if r.pass { "pass" } else { "fail" }
        );
    }
    s
}


/// Summary of a full run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub model: String,
    /// `(regime, metric, aggregate)`.
    pub aggregates: Vec<(String, String, f64)>,
}

/// `gen`, `train`, `simulate` and `eval` for every configured regime, plus
/// the predictive check when a policy is fitted. Outputs go to
/// `root/{data,model,sim,eval}`.
pub fn run_all(
    cfg: &ExperimentConfig,
    root: &Path,
    progress: &mut dyn FnMut(&str, &EpochLog),
) -> Result<RunSummary> {
    let data_dir = root.join("data");
    generate(cfg, &data_dir)?;
    let load = |n: &str| io::load_dataset(&dataset_path(&data_dir, n));
    let (tr, va, te) = (load("train")?, load("val")?, load("test")?);
    let trained = train(cfg, &tr, &va, &root.join("model"), progress)?;
    let ckpt = io::load_checkpoint(&trained.checkpoint)?;
    let policy = trained.policy.as_deref().map(io::load_policy).transpose()?;
    let (start, end) = cfg.window();
    let mut aggregates = Vec::new();
    let (sim_dir, eval_dir) = (root.join("sim"), root.join("eval"));
    for id in cfg.regime_ids() {
        let cf_path = dataset_path(&data_dir, &counterfactual_name(&id));
        let truth = if cf_path.exists() { io::load_dataset(&cf_path)? } else { te.clone() };
        let res = simulate(cfg, &ckpt, policy.as_ref(), &truth, &id, cfg.simulation.draws, start, end)?;
        let path = sim_dir.join(simulation_name(ckpt.model.name(), &id));
        save_simulation(cfg, &ckpt, &res, &path)?;
        if !cf_path.exists() {
            continue;
        }
        let (header, res) = io::load_simulation(&path)?;
        let metrics: Vec<String> = cfg
            .evaluation
            .metrics
            .iter()
            .filter(|m| *m != "calibration" || res.draws_per_unit >= metrics::MIN_CALIBRATION_DRAWS)
            .filter(|m| *m != "percent_rmse" || matches!(cfg.generator, GeneratorConfig::Tumor(_)))
            .cloned()
            .collect();
        let reports = evaluate(cfg, &header, &res, &truth, &metrics)?;
        write_reports(cfg, &reports, &eval_dir, &format!("{}_{id}", ckpt.model.name()))?;
        aggregates.extend(reports.iter().map(|r| (id.clone(), r.metric.clone(), r.aggregate)));
    }
    write_effective_config(cfg, &sim_dir)?;
    if let Some(p) = &policy {
        let k = cfg.evaluation.predictive_check_start.unwrap_or(start);
        let reports = predictive_check(cfg, &ckpt, p, &te, k)?;
        write_reports(cfg, &reports, &eval_dir, &format!("{}_check", ckpt.model.name()))?;
        aggregates.extend(reports.iter().map(|r| (POLICY_REGIME.to_string(), r.metric.clone(), r.aggregate)));
    }
    let summary = RunSummary {
        config_hash: cfg.hash(),
        model: ckpt.model.name().into(),
        aggregates,
    };
    io::write_bytes(&eval_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(summary)
}
