//! On-disk artifacts.
//!
//! Every file starts with a text line `GFORMER <kind> v<version>`, followed
//! by a one-line JSON header and an optional little-endian binary body.
//! Headers always carry the format version, the config hash and the seed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{CovariateSchema, Dataset, DatasetMeta, Normalizer, Trajectory};
use crate::error::{Error, Result};
use crate::gcomp::{ConditionalDensityEstimator, LinearGcomp, ResidualBank, SimulationResult, UnitSimulation};
use crate::gtransformer::{GTransformer, PolicyModel, TrainLog};

pub const FORMAT_VERSION: u32 = 1;

pub const KIND_DATASET: &str = "dataset";
pub const KIND_CHECKPOINT: &str = "checkpoint";
pub const KIND_POLICY: &str = "policy";
pub const KIND_SIMULATION: &str = "simulation";

/// Fields shared by every artifact header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub format_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    pub fn new(kind: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.into(),
            config_hash: config_hash.into(),
            seed,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Assembles an artifact from its header and body.
pub fn encode_artifact<H: Serialize>(kind: &str, header: &H, body: &[u8]) -> Result<Vec<u8>> {
    let mut out = format!("GFORMER {kind} v{FORMAT_VERSION}\n").into_bytes();
    out.extend(serde_json::to_vec(header)?);
    out.push(b'\n');
    out.extend_from_slice(body);
    Ok(out)
}

/// Splits an artifact into its header and body after checking the kind and
/// version.
pub fn decode_artifact<H: DeserializeOwned>(kind: &str, bytes: &[u8]) -> Result<(H, Vec<u8>)> {
    let (magic, rest) = split_line(bytes).ok_or_else(|| Error::data("not a gformer artifact"))?;
    let magic = std::str::from_utf8(magic).map_err(|_| Error::data("not a gformer artifact"))?;
    let mut parts = magic.split(' ');
    if parts.next() != Some("GFORMER") {
        return Err(Error::data("not a gformer artifact"));
    }
    let found_kind = parts.next().unwrap_or_default();
    let version = parts
        .next()
        .and_then(|v| v.strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| Error::data("malformed artifact version"))?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if found_kind != kind {
        return Err(Error::data(format!("expected a {kind} file, found {found_kind}")));
    }
    let (header, body) = split_line(rest).ok_or_else(|| Error::data("truncated artifact header"))?;
    let stamp: Stamp = serde_json::from_slice(header)?;
    if stamp.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: stamp.format_version,
            expected: FORMAT_VERSION,
        });
    }
    if stamp.kind != kind {
        return Err(Error::data(format!("header kind {} does not match {kind}", stamp.kind)));
    }
    Ok((serde_json::from_slice(header)?, body.to_vec()))
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let i = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..i], &bytes[i + 1..]))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend(x.to_le_bytes());
        }
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::data("artifact body is truncated"));
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::data("corrupt length"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(Error::data("trailing bytes after artifact body"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub schema: CovariateSchema,
    pub meta: DatasetMeta,
    /// Statistics of this file's own covariates, for inspection.
    pub normalization: Normalizer,
    pub units: usize,
    pub body_sha256: String,
}

pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>> {
    data.validate()?;
    let mut w = Writer(Vec::new());
    for u in &data.units {
        w.u64(u.id);
        w.u64(u.steps as u64);
        w.f64s(&u.statics);
        w.f64s(&u.covariates);
        w.f64s(&u.treatments);
    }
    let header = DatasetHeader {
        stamp: Stamp::new(KIND_DATASET, &data.meta.config_hash, data.meta.seed),
        schema: data.schema.clone(),
        meta: data.meta.clone(),
        normalization: Normalizer::fit(data),
        units: data.units.len(),
        body_sha256: sha256_hex(&w.0),
    };
    encode_artifact(KIND_DATASET, &header, &w.0)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let (h, body): (DatasetHeader, _) = decode_artifact(KIND_DATASET, bytes)?;
    if sha256_hex(&body) != h.body_sha256 {
        return Err(Error::data("dataset body checksum mismatch"));
    }
    h.schema.validate()?;
    let (d_s, d_l, d_a) = (h.schema.statics.len(), h.schema.num_covariates(), h.schema.num_treatments());
    let mut r = Reader(&body);
    let mut units = Vec::with_capacity(h.units);
    for _ in 0..h.units {
        let id = r.u64()?;
        let steps = r.u64()? as usize;
        let statics = r.f64s(d_s)?;
        let covariates = r.f64s(steps * d_l)?;
        let treatments = r.f64s(steps * d_a)?;
        units.push(Trajectory::new(id, statics, covariates, treatments, steps));
    }
    r.finish()?;
    let data = Dataset::new(h.schema, h.meta, units);
    data.validate()?;
    Ok(data)
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    write_bytes(path, &encode_dataset(data)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

/// Lossless text export: `header.json` plus `data.csv` with one row per
/// `(unit, time)`. Values use the shortest representation that parses back
/// to the same `f64`.
pub fn export_csv_bundle(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = serde_json::json!({
        "format_version": FORMAT_VERSION,
        "schema": data.schema,
        "meta": data.meta,
    });
    fs::write(dir.join("header.json"), serde_json::to_string_pretty(&header)?)?;
    let s = &data.schema;
    let mut csv = String::from("unit_id,t");
    for name in s
        .covariates
        .iter()
        .map(|c| &c.name)
        .chain(s.treatments.iter().map(|t| &t.name))
        .chain(&s.statics)
    {
        let _ = write!(csv, ",{name}");
    }
    csv.push('\n');
    for u in &data.units {
        for t in 0..u.steps {
            let _ = write!(csv, "{},{t}", u.id);
            for v in u.covariate_row(t).iter().chain(u.treatment_row(t)).chain(&u.statics) {
                let _ = write!(csv, ",{v:?}");
            }
            csv.push('\n');
        }
    }
    fs::write(dir.join("data.csv"), csv)?;
    Ok(())
}

/// Reads a bundle written by [`export_csv_bundle`].
pub fn import_csv_bundle(dir: &Path) -> Result<Dataset> {
    #[derive(Deserialize)]
    struct Header {
        format_version: u32,
        schema: CovariateSchema,
        meta: DatasetMeta,
    }
    let h: Header = serde_json::from_str(&fs::read_to_string(dir.join("header.json"))?)?;
    if h.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: h.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let (d_l, d_a, d_s) = (h.schema.num_covariates(), h.schema.num_treatments(), h.schema.statics.len());
    let text = fs::read_to_string(dir.join("data.csv"))?;
    let mut units: Vec<Trajectory> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 2 + d_l + d_a + d_s {
            return Err(Error::data(format!("csv line {} has {} fields", i + 1, f.len())));
        }
        let id: u64 = f[0].parse().map_err(|_| Error::data(format!("bad unit id on csv line {}", i + 1)))?;
        let vals = f[2..]
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| Error::data(format!("bad value `{v}` on csv line {}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        if units.last().map(|u| u.id) != Some(id) {
            units.push(Trajectory::new(id, vals[d_l + d_a..].to_vec(), vec![], vec![], 0));
        }
        let u = units.last_mut().expect("pushed above");
        u.covariates.extend_from_slice(&vals[..d_l]);
        u.treatments.extend_from_slice(&vals[d_l..d_l + d_a]);
        u.steps += 1;
    }
    let data = Dataset::new(h.schema, h.meta, units);
    data.validate()?;
    Ok(data)
}

/// A fitted conditional density estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "model", rename_all = "snake_case")]
pub enum Model {
    #[serde(rename = "gtransformer")]
    GTransformer(Box<GTransformer>),
    Linear(Box<LinearGcomp>),
}

impl Model {
    pub fn estimator(&self) -> &dyn ConditionalDensityEstimator {
        match self {
            Model::GTransformer(m) => m.as_ref(),
            Model::Linear(m) => m.as_ref(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Model::GTransformer(_) => "gtransformer",
            Model::Linear(_) => "linear",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingDigest {
    /// SHA-256 of the training-log CSV.
    pub log_sha256: String,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_val_total: f64,
}

impl TrainingDigest {
    pub fn of(log: &TrainLog) -> Self {
        Self {
            log_sha256: sha256_hex(log.to_csv().as_bytes()),
            epochs: log.epochs.len(),
            best_epoch: log.best_epoch,
            best_val_total: log.best_val_total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub schema: CovariateSchema,
    pub model: Model,
    pub residual_bank: ResidualBank,
    pub training: Option<TrainingDigest>,
}

impl CheckpointFile {
    pub fn new(
        model: Model,
        residual_bank: ResidualBank,
        training: Option<TrainingDigest>,
        config_hash: &str,
        seed: u64,
    ) -> Self {
        Self {
            stamp: Stamp::new(KIND_CHECKPOINT, config_hash, seed),
            schema: model.estimator().schema().clone(),
            model,
            residual_bank,
            training,
        }
    }

    pub fn check_schema(&self, data: &Dataset) -> Result<()> {
        if self.schema != data.schema {
            return Err(Error::Schema("dataset schema differs from the checkpoint schema".into()));
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &CheckpointFile) -> Result<()> {
    write_bytes(path, &encode_artifact(KIND_CHECKPOINT, ckpt, &[])?)
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let (ckpt, body): (CheckpointFile, _) = decode_artifact(KIND_CHECKPOINT, &fs::read(path)?)?;
    if !body.is_empty() {
        return Err(Error::data("unexpected checkpoint body"));
    }
    if ckpt.schema != *ckpt.model.estimator().schema() {
        return Err(Error::Schema("checkpoint schema differs from its model".into()));
    }
    Ok(ckpt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub schema: CovariateSchema,
    pub policy: PolicyModel,
    pub training: Option<TrainingDigest>,
}

pub fn save_policy(path: &Path, file: &PolicyFile) -> Result<()> {
    write_bytes(path, &encode_artifact(KIND_POLICY, file, &[])?)
}

pub fn load_policy(path: &Path) -> Result<PolicyFile> {
    let (file, _): (PolicyFile, _) = decode_artifact(KIND_POLICY, &fs::read(path)?)?;
    if file.schema != file.policy.schema {
        return Err(Error::Schema("policy schema differs from its model".into()));
    }
    Ok(file)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationHeader {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub regime_id: String,
    pub schema: CovariateSchema,
    pub start: usize,
    pub end: usize,
    pub draws_per_unit: usize,
    pub quantiles: (f64, f64),
    /// Per continuous covariate scale of the estimator, used to normalize
    /// errors at evaluation.
    pub continuous_scale: Vec<f64>,
    pub units: usize,
    pub body_sha256: String,
}

pub fn encode_simulation(
    res: &SimulationResult,
    schema: &CovariateSchema,
    continuous_scale: &[f64],
    config_hash: &str,
) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    for u in &res.units {
        w.u64(u.unit_id);
        w.u64(u64::from(u.draws.is_some()));
        w.f64s(&u.mean);
        w.f64s(&u.q_low);
        w.f64s(&u.q_high);
        w.f64s(&u.action_mean);
        if let Some(d) = &u.draws {
            w.f64s(d);
        }
    }
    let header = SimulationHeader {
        stamp: Stamp::new(KIND_SIMULATION, config_hash, res.seed),
        regime_id: res.regime_id.clone(),
        schema: schema.clone(),
        start: res.start,
        end: res.end,
        draws_per_unit: res.draws_per_unit,
        quantiles: res.quantiles,
        continuous_scale: continuous_scale.to_vec(),
        units: res.units.len(),
        body_sha256: sha256_hex(&w.0),
    };
    encode_artifact(KIND_SIMULATION, &header, &w.0)
}

pub fn decode_simulation(bytes: &[u8]) -> Result<(SimulationHeader, SimulationResult)> {
    let (h, body): (SimulationHeader, _) = decode_artifact(KIND_SIMULATION, bytes)?;
    if sha256_hex(&body) != h.body_sha256 {
        return Err(Error::data("simulation body checksum mismatch"));
    }
    if h.start > h.end {
        return Err(Error::data("simulation window is inverted"));
    }
    let (d_l, d_a) = (h.schema.num_covariates(), h.schema.num_treatments());
    let steps = h.end - h.start;
    let mut r = Reader(&body);
    let mut units = Vec::with_capacity(h.units);
    for _ in 0..h.units {
        let unit_id = r.u64()?;
        let has_draws = r.u64()? != 0;
        let mean = r.f64s(steps * d_l)?;
        let q_low = r.f64s(steps * d_l)?;
        let q_high = r.f64s(steps * d_l)?;
        let action_mean = r.f64s(steps * d_a)?;
        let draws = if has_draws {
            Some(r.f64s(h.draws_per_unit * steps * d_l)?)
        } else {
            None
        };
        units.push(UnitSimulation {
            unit_id,
            mean,
            q_low,
            q_high,
            action_mean,
            draws,
        });
    }
    r.finish()?;
    let res = SimulationResult {
        regime_id: h.regime_id.clone(),
        seed: h.stamp.seed,
        start: h.start,
        end: h.end,
        draws_per_unit: h.draws_per_unit,
        quantiles: h.quantiles,
        num_covariates: d_l,
        num_treatments: d_a,
        units,
    };
    Ok((h, res))
}

pub fn save_simulation(
    path: &Path,
    res: &SimulationResult,
    schema: &CovariateSchema,
    continuous_scale: &[f64],
    config_hash: &str,
) -> Result<()> {
    write_bytes(path, &encode_simulation(res, schema, continuous_scale, config_hash)?)
}

pub fn load_simulation(path: &Path) -> Result<(SimulationHeader, SimulationResult)> {
    decode_simulation(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::testutil::mixed_schema;
    use proptest::prelude::*;

    fn dataset(values: &[f64], steps: usize) -> Dataset {
        let schema = mixed_schema();
        let units = values
            .chunks(steps)
            .enumerate()
            .map(|(i, c)| {
                let cov = c
                    .iter()
                    .flat_map(|&v| [(v.abs() as usize % 3) as f64, v, (v.abs() as usize % 2) as f64, -v])
                    .collect();
                Trajectory::new(i as u64 * 7, vec![], cov, c.iter().map(|v| v * 0.5).collect(), c.len())
            })
            .collect();
        let meta = DatasetMeta {
            generator: "test".into(),
            config_hash: "abc".into(),
            seed: 3,
            regime_id: "g_o".into(),
            switch_time: Some(2),
            split: "train".into(),
            extra: Default::default(),
        };
        Dataset::new(schema, meta, units)
    }

    proptest! {
        #[test]
        fn dataset_round_trips_bitwise(values in prop::collection::vec(-1e6f64..1e6, 1..40), steps in 1usize..6) {
            let d = dataset(&values, steps);
            let bytes = encode_dataset(&d).unwrap();
            let back = decode_dataset(&bytes).unwrap();
            prop_assert_eq!(&back, &d);
            prop_assert_eq!(encode_dataset(&back).unwrap(), bytes);
        }

        #[test]
        fn csv_bundle_is_lossless(values in prop::collection::vec(-1e6f64..1e6, 1..20)) {
            let d = dataset(&values, 3);
            let dir = tempfile::tempdir().unwrap();
            export_csv_bundle(&d, dir.path()).unwrap();
            prop_assert_eq!(import_csv_bundle(dir.path()).unwrap(), d);
        }
    }

    #[test]
    fn wrong_version_and_kind_are_rejected() {
        let d = dataset(&[1.0, 2.0], 2);
        let bytes = encode_dataset(&d).unwrap();
        let text = String::from_utf8_lossy(&bytes).replacen("v1\n", "v9\n", 1);
        assert!(matches!(
            decode_dataset(text.as_bytes()),
            Err(Error::Version { found: 9, expected: 1 })
        ));
        assert!(matches!(
            decode_artifact::<Stamp>(KIND_CHECKPOINT, &bytes),
            Err(Error::Data(_))
        ));
        let mut corrupt = bytes.clone();
        *corrupt.last_mut().unwrap() ^= 1;
        assert!(decode_dataset(&corrupt).is_err());
        assert!(decode_dataset(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn simulation_round_trips() {
        let schema = mixed_schema();
        let res = SimulationResult {
            regime_id: "g".into(),
            seed: 4,
            start: 1,
            end: 3,
            draws_per_unit: 2,
            quantiles: (0.1, 0.9),
            num_covariates: 4,
            num_treatments: 1,
            units: vec![
                UnitSimulation {
                    unit_id: 5,
                    mean: (0..8).map(f64::from).collect(),
                    q_low: vec![0.5; 8],
                    q_high: vec![1.5; 8],
                    action_mean: vec![0.25, 0.75],
                    draws: Some((0..16).map(|v| f64::from(v) * 0.1).collect()),
                },
                UnitSimulation {
                    unit_id: 6,
                    mean: vec![1.0; 8],
                    q_low: vec![0.0; 8],
                    q_high: vec![2.0; 8],
                    action_mean: vec![0.0, 1.0],
                    draws: None,
                },
            ],
        };
        let bytes = encode_simulation(&res, &schema, &[1.0, 2.0], "h").unwrap();
        let (h, back) = decode_simulation(&bytes).unwrap();
        assert_eq!(back, res);
        assert_eq!(h.stamp.config_hash, "h");
        assert_eq!(h.regime_id, "g");
    }
}
