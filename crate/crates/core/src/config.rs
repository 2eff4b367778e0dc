//! Experiment configuration: one TOML file per experiment, with dotted
//! `key=value` overrides applied on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CovariateSchema, Trajectory};
use crate::datagen::{HemoRegime, HemoSimConfig, OracleMdpConfig, TumorRegime, TumorSimConfig};
use crate::error::{Error, Result};
use crate::gcomp::{LinearConfig, LinearScore, ResidualMode, Term, Transform, TreatmentRegime, TreatmentRule};
use crate::gtransformer::{ModelConfig, TrainConfig};
use crate::seed;

/// Environment variable naming the directory relative output paths live in.
pub const OUTPUT_ROOT_ENV: &str = "GFORMER_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Master seed; every module seed is derived from it.
    pub seed: u64,
    /// Relative paths resolve against `$GFORMER_OUTPUT_ROOT` (default `.`).
    pub output_dir: PathBuf,
    pub generator: GeneratorConfig,
    pub model: ModelSection,
    pub simulation: SimulationSection,
    pub evaluation: EvaluationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            output_dir: PathBuf::from("runs/experiment"),
            generator: GeneratorConfig::default(),
            model: ModelSection::default(),
            simulation: SimulationSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorConfig {
    Tumor(TumorSimConfig),
    Hemo(HemoSimConfig),
    Oracle(OracleSection),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::Oracle(OracleSection::default())
    }
}

/// Random discrete Markov system with known transition tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub classes: Vec<usize>,
    pub steps: usize,
    pub num_units: usize,
    /// Fractions of units in the training and validation splits; the rest
    /// form the test split.
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub switch_time: usize,
    /// Draws and total-variation tolerance used by `verify-oracle`.
    pub verify_draws: usize,
    pub verify_tolerance: f64,
    pub verify_units: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            classes: vec![3, 2],
            steps: 5,
            num_units: 1000,
            train_fraction: 0.8,
            val_fraction: 0.1,
            switch_time: 3,
            verify_draws: 100_000,
            verify_tolerance: 0.02,
            verify_units: 3,
        }
    }
}

impl OracleSection {
    pub fn mdp_config(&self, seed: u64) -> OracleMdpConfig {
        OracleMdpConfig::random(&self.classes, self.steps, self.num_units, seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    #[serde(rename = "gtransformer")]
    GTransformer,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub gtransformer: ModelConfig,
    pub train: TrainConfig,
    pub linear: LinearConfig,
    /// Also fit the observational treatment policy.
    pub policy: bool,
    pub residual_mode: ResidualMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::GTransformer,
            gtransformer: ModelConfig::default(),
            train: TrainConfig::default(),
            linear: LinearConfig::default(),
            policy: false,
            residual_mode: ResidualMode::Independent,
        }
    }
}

/// A regime defined in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RegimeSpec {
    Withhold { id: String },
    Static { id: String, actions: Vec<Vec<f64>> },
    Rules { id: String, rules: Vec<TreatmentRule> },
}

impl RegimeSpec {
    pub fn id(&self) -> &str {
        match self {
            RegimeSpec::Withhold { id } | RegimeSpec::Static { id, .. } | RegimeSpec::Rules { id, .. } => id,
        }
    }

    fn build(&self) -> TreatmentRegime {
        match self {
            RegimeSpec::Withhold { id } => TreatmentRegime::withhold(id),
            RegimeSpec::Static { id, actions } => TreatmentRegime::static_sequence(id, actions.clone()),
            RegimeSpec::Rules { id, rules } => TreatmentRegime::rule_based(id, rules.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    /// Monte Carlo draws per unit.
    pub draws: usize,
    /// First simulated row; defaults to the generator's switch time.
    pub start: Option<usize>,
    /// Rows simulated are `start..end`; defaults to the full length.
    pub end: Option<usize>,
    /// Regimes to simulate; defaults to the generator's built-in set.
    pub regimes: Vec<String>,
    pub custom_regimes: Vec<RegimeSpec>,
    pub keep_draws: bool,
    pub quantiles: (f64, f64),
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            draws: 100,
            start: None,
            end: None,
            regimes: Vec::new(),
            custom_regimes: Vec::new(),
            keep_draws: false,
            quantiles: (0.05, 0.95),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// Any of `individual_rmse`, `population_rmse`, `calibration`,
    /// `percent_rmse`.
    pub metrics: Vec<String>,
    pub plots: bool,
    /// Row the predictive check starts simulating from; defaults to the
    /// simulation start.
    pub predictive_check_start: Option<usize>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            metrics: vec!["individual_rmse".into(), "population_rmse".into(), "calibration".into()],
            plots: true,
            predictive_check_start: None,
        }
    }
}

pub const KNOWN_METRICS: [&str; 4] = ["individual_rmse", "population_rmse", "calibration", "percent_rmse"];

/// Hyperparameter values explored for the transformer model.
const HIDDEN_RANGE: [usize; 3] = [32, 64, 128];
const LAYER_RANGE: [usize; 4] = [2, 3, 4, 6];
const BATCH_RANGE: [usize; 2] = [16, 32];
const LR_RANGE: [f64; 3] = [1e-3, 1e-4, 1e-5];

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults) and applies `key.path=value`
    /// overrides, where `value` is TOML (bare words are taken as strings).
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_table(value)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_table(toml::from_str(text).map_err(|e| Error::config(e.to_string()))?)
    }

    /// A generator table without `kind` selects the default generator.
    fn from_table(mut value: toml::Table) -> Result<Self> {
        if let Some(toml::Value::Table(g)) = value.get_mut("generator") {
            g.entry("kind").or_insert_with(|| toml::Value::String("oracle".into()));
        }
        let cfg: Self = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form of the configuration, excluding
    /// the output location.
    pub fn hash(&self) -> String {
        crate::datagen::config_hash(&Self {
            output_dir: PathBuf::new(),
            ..self.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.train.validate()?;
        if self.simulation.draws == 0 {
            return Err(Error::config("simulation.draws must be positive"));
        }
        let (start, end) = self.window();
        if start == 0 || start > end || end > self.steps() {
            return Err(Error::config(format!("simulation window {start}..{end} is invalid")));
        }
        let (lo, hi) = self.simulation.quantiles;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::config("quantiles must satisfy 0 <= low <= high <= 1"));
        }
        for m in &self.evaluation.metrics {
            if !KNOWN_METRICS.contains(&m.as_str()) {
                return Err(Error::config(format!("unknown metric `{m}`")));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.simulation.custom_regimes {
            if !seen.insert(r.id()) {
                return Err(Error::config(format!("regime `{}` defined twice", r.id())));
            }
        }
        match &self.generator {
            GeneratorConfig::Tumor(c) => c.validate()?,
            GeneratorConfig::Hemo(c) => c.validate()?,
            GeneratorConfig::Oracle(c) => {
                let f = c.train_fraction + c.val_fraction;
                if c.classes.is_empty() || c.steps < 2 || !(f > 0.0 && f < 1.0) {
                    return Err(Error::config("oracle needs classes, two or more steps and a nonempty test split"));
                }
            }
        }
        let schema = self.schema();
        for id in self.regime_ids() {
            self.regime(&id, &schema)?;
        }
        Ok(())
    }

    /// Settings outside the explored hyperparameter ranges.
    pub fn range_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.model.kind != ModelKind::GTransformer {
            return out;
        }
        let (m, t) = (&self.model.gtransformer, &self.model.train);
        if !HIDDEN_RANGE.contains(&m.hidden_dim) {
            out.push(format!("hidden_dim {} outside {HIDDEN_RANGE:?}", m.hidden_dim));
        }
        if !LAYER_RANGE.contains(&m.num_layers) {
            out.push(format!("num_layers {} outside {LAYER_RANGE:?}", m.num_layers));
        }
        if !BATCH_RANGE.contains(&t.batch_size) {
            out.push(format!("batch_size {} outside {BATCH_RANGE:?}", t.batch_size));
        }
        if !LR_RANGE.iter().any(|&v| (v - t.learning_rate).abs() < 1e-12) {
            out.push(format!("learning_rate {} outside {LR_RANGE:?}", t.learning_rate));
        }
        out
    }

    pub fn generator_name(&self) -> &'static str {
        match self.generator {
            GeneratorConfig::Tumor(_) => "tumor",
            GeneratorConfig::Hemo(_) => "hemo",
            GeneratorConfig::Oracle(_) => "oracle",
        }
    }

    /// Covariate rows per trajectory.
    pub fn steps(&self) -> usize {
        match &self.generator {
            GeneratorConfig::Tumor(c) => c.steps,
            GeneratorConfig::Hemo(c) => c.steps,
            GeneratorConfig::Oracle(c) => c.steps,
        }
    }

    pub fn switch_time(&self) -> usize {
        match &self.generator {
            GeneratorConfig::Tumor(c) => c.switch_time(),
            GeneratorConfig::Hemo(c) => c.switch_time,
            GeneratorConfig::Oracle(c) => c.switch_time,
        }
    }

    /// Simulated rows `start..end`.
    pub fn window(&self) -> (usize, usize) {
        (
            self.simulation.start.unwrap_or_else(|| self.switch_time()),
            self.simulation.end.unwrap_or_else(|| self.steps()),
        )
    }

    pub fn schema(&self) -> CovariateSchema {
        match &self.generator {
            GeneratorConfig::Tumor(_) => crate::datagen::tumor::tumor_schema(),
            GeneratorConfig::Hemo(_) => crate::datagen::hemo::hemo_schema(),
            GeneratorConfig::Oracle(c) => crate::datagen::OracleMdp::new(c.mdp_config(0))
                .map(|m| m.schema)
                .unwrap_or_else(|_| CovariateSchema {
                    covariates: vec![],
                    treatments: vec![],
                    outcome: 0,
                    statics: vec![],
                }),
        }
    }

    /// Seed of the module stream `label`.
    pub fn derived_seed(&self, label: &str) -> u64 {
        seed::derive(self.seed, label, 0, 0)
    }

    /// Regimes with counterfactual ground truth from the generator.
    pub fn builtin_regimes(&self) -> Vec<String> {
        match &self.generator {
            GeneratorConfig::Tumor(_) => [TumorRegime::Radio, TumorRegime::Chemo, TumorRegime::Both, TumorRegime::None]
                .iter()
                .map(|r| r.id().to_string())
                .collect(),
            GeneratorConfig::Hemo(_) => [HemoRegime::C1, HemoRegime::C2].iter().map(|r| r.id().to_string()).collect(),
            GeneratorConfig::Oracle(_) => vec!["withhold".into(), "treat_high".into()],
        }
    }

    pub fn regime_ids(&self) -> Vec<String> {
        if self.simulation.regimes.is_empty() {
            self.builtin_regimes()
        } else {
            self.simulation.regimes.clone()
        }
    }

    /// Resolves a regime id: config-defined regimes first, then built-ins.
    pub fn regime(&self, id: &str, schema: &CovariateSchema) -> Result<TreatmentRegime> {
        let regime = if let Some(spec) = self.simulation.custom_regimes.iter().find(|r| r.id() == id) {
            spec.build()
        } else {
            match &self.generator {
                GeneratorConfig::Tumor(_) => TumorRegime::from_id(id)?.regime(),
                GeneratorConfig::Hemo(c) => HemoRegime::from_id(id)?.regime(c),
                GeneratorConfig::Oracle(_) => match id {
                    "withhold" => TreatmentRegime::withhold(id),
                    "treat_high" => oracle_treat_high(),
                    _ => return Err(Error::MissingRegime(id.into())),
                },
            }
        };
        // Compiling against a dummy unit surfaces unknown covariate names.
        let dummy = Trajectory::new(
            0,
            vec![0.0; schema.statics.len()],
            vec![0.0; 2 * schema.num_covariates()],
            vec![0.0; 2 * schema.num_treatments()],
            2,
        );
        if !regime.is_stochastic() {
            regime.start(schema, &dummy, 1, 1)?;
        }
        Ok(regime)
    }
}

/// Oracle rule regime: treat whenever the first covariate is above class 0.
pub fn oracle_treat_high() -> TreatmentRegime {
    TreatmentRegime::rule_based(
        "treat_high",
        vec![TreatmentRule {
            treatment: "a".into(),
            trigger: LinearScore {
                intercept: -0.5,
                terms: vec![Term {
                    covariate: "s0".into(),
                    coef: 1.0,
                    transform: Transform::Identity,
                }],
            },
            dose: None,
        }],
    )
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{spec}` is not key=value")))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override path `{key}` crosses a non-table value")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Output root from the environment, defaulting to the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

/// Resolves `p` against the output root unless it is absolute.
pub fn resolve_output(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        output_root().join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_lie_in_range() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert!(cfg.range_warnings().is_empty());
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let cfg = ExperimentConfig::load(None, &["generator.kind=hemo".into(), "seed=7".into()]).unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.window(), (34, 66));
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = ExperimentConfig::load(
            None,
            &[
                "generator.kind=tumor".into(),
                "generator.num_train=50".into(),
                "model.gtransformer.hidden_dim=32".into(),
                "simulation.regimes=[\"none\", \"chemo\"]".into(),
            ],
        )
        .unwrap();
        match &cfg.generator {
            GeneratorConfig::Tumor(c) => assert_eq!(c.num_train, 50),
            g => panic!("{g:?}"),
        }
        assert_eq!(cfg.model.gtransformer.hidden_dim, 32);
        assert_eq!(cfg.regime_ids(), vec!["none", "chemo"]);
    }

    #[test]
    fn undefined_regime_is_rejected() {
        let err = ExperimentConfig::load(None, &["simulation.regimes=[\"nope\"]".into()]).unwrap_err();
        assert!(matches!(err, Error::MissingRegime(_)), "{err:?}");
    }

    #[test]
    fn custom_regime_with_unknown_covariate_is_rejected() {
        let text = r#"
            [generator]
            kind = "oracle"
            [simulation]
            regimes = ["mine"]
            [[simulation.custom_regimes]]
            type = "rules"
            id = "mine"
            rules = [{ treatment = "a", trigger = { intercept = 1.0, terms = [{ covariate = "zz", coef = 1.0 }] } }]
        "#;
        assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Schema(_))));
        let ok = text.replace("\"zz\"", "\"s1\"");
        assert_eq!(ExperimentConfig::from_toml(&ok).unwrap().regime_ids(), vec!["mine"]);
    }

    #[test]
    fn unknown_keys_fail() {
        assert!(ExperimentConfig::from_toml("sede = 3").is_err());
        assert!(ExperimentConfig::load(None, &["evaluation.metrics=[\"auc\"]".into()]).is_err());
    }
}
