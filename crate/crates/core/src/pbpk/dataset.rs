//! Dataset assembly, splitting, normalization and persistence.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ode::{rk4_integrate, CompartmentSystem};
use super::{DataError, DrugDescriptor, Organ, OrganGraph, DESCRIPTOR_LEN};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const MIN_DRUGS: usize = 10;
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenConfig {
    pub n_drugs: usize,
    pub seed: u64,
    pub t_steps: usize,
    pub t_end_h: f64,
    /// Internal integrator step, hours.
    pub dt_h: f64,
    /// IV bolus into venous blood, mg/kg.
    pub dose_mg_per_kg: f64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            n_drugs: 200,
            seed: 7,
            t_steps: 48,
            t_end_h: 24.0,
            dt_h: 0.001,
            dose_mg_per_kg: 1.0,
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_drugs < MIN_DRUGS {
            return Err(DataError::InvalidConfig(format!("n_drugs must be ≥ {MIN_DRUGS}, got {}", self.n_drugs)));
        }
        if self.t_steps < 2 {
            return Err(DataError::InvalidConfig(format!("t_steps must be ≥ 2, got {}", self.t_steps)));
        }
        if !(self.t_end_h > 0.0 && self.t_end_h.is_finite()) {
            return Err(DataError::InvalidConfig(format!("t_end_h must be positive, got {}", self.t_end_h)));
        }
        if !(self.dt_h > 0.0 && self.dt_h.is_finite()) {
            return Err(DataError::InvalidConfig(format!("dt_h must be positive, got {}", self.dt_h)));
        }
        if !(self.dose_mg_per_kg >= 0.0 && self.dose_mg_per_kg.is_finite()) {
            return Err(DataError::InvalidConfig(format!("dose must be ≥ 0, got {}", self.dose_mg_per_kg)));
        }
        Ok(())
    }

    /// Sampling interval of the output grid.
    pub fn grid_dt(&self) -> f64 {
        self.t_end_h / self.t_steps as f64
    }
}

/// Raw concentrations `N×T×O` (mg/L) with their time grid, organs and
/// descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationTensor {
    pub seed: u64,
    pub graph: OrganGraph,
    pub time_h: Vec<f64>,
    pub drugs: Vec<DrugDescriptor>,
    pub config: DatagenConfig,
    values: Vec<f64>,
}

impl ConcentrationTensor {
    pub fn n_drugs(&self) -> usize {
        self.drugs.len()
    }

    pub fn n_times(&self) -> usize {
        self.time_h.len()
    }

    pub fn n_organs(&self) -> usize {
        self.graph.len()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_drugs(), self.n_times(), self.n_organs())
    }

    pub fn organ_names(&self) -> Vec<String> {
        self.graph.names()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, drug: usize, t: usize, organ: usize) -> f64 {
        let (_, nt, no) = self.shape();
        self.values[(drug * nt + t) * no + organ]
    }

    /// The `T×O` trajectory of one drug, row-major.
    pub fn trajectory(&self, drug: usize) -> &[f64] {
        let (_, nt, no) = self.shape();
        &self.values[drug * nt * no..(drug + 1) * nt * no]
    }

    pub fn from_parts(
        config: DatagenConfig,
        graph: OrganGraph,
        time_h: Vec<f64>,
        drugs: Vec<DrugDescriptor>,
        values: Vec<f64>,
    ) -> Result<Self, DataError> {
        let expected = drugs.len() * time_h.len() * graph.len();
        if values.len() != expected {
            return Err(DataError::Format(format!(
                "values hold {} numbers, expected {expected}",
                values.len()
            )));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(DataError::Format("concentrations must be finite and non-negative".into()));
        }
        if time_h.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DataError::Format("time grid must be strictly increasing".into()));
        }
        Ok(Self {
            seed: config.seed,
            graph,
            time_h,
            drugs,
            config,
            values,
        })
    }

    pub fn to_json(&self, provenance: Option<serde_json::Value>) -> Result<String, DataError> {
        let (n, nt, no) = self.shape();
        let values = (0..n)
            .map(|d| (0..nt).map(|t| (0..no).map(|o| self.get(d, t, o)).collect()).collect())
            .collect();
        let file = DatasetFile {
            schema_version: DATASET_SCHEMA_VERSION,
            seed: self.seed,
            organs: self.organ_names(),
            time_h: self.time_h.clone(),
            drugs: self.drugs.clone(),
            values,
            organ_table: self.graph.organs().to_vec(),
            generator: self.config.clone(),
            run_config: provenance,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let file: DatasetFile = serde_json::from_str(text)?;
        if file.schema_version != DATASET_SCHEMA_VERSION {
            return Err(DataError::Format(format!(
                "unsupported dataset schema_version {}",
                file.schema_version
            )));
        }
        let graph = OrganGraph::new(file.organ_table)?;
        if graph.names() != file.organs {
            return Err(DataError::Format("organ labels disagree with the organ table".into()));
        }
        let (nt, no) = (file.time_h.len(), graph.len());
        if file.values.len() != file.drugs.len()
            || file.values.iter().any(|d| d.len() != nt || d.iter().any(|r| r.len() != no))
        {
            return Err(DataError::Format("values are not shaped N×T×O".into()));
        }
        let values = file.values.into_iter().flatten().flatten().collect();
        let mut config = file.generator;
        config.seed = file.seed;
        Self::from_parts(config, graph, file.time_h, file.drugs, values)
    }

    pub fn save(&self, path: &Path, provenance: Option<serde_json::Value>) -> Result<(), DataError> {
        std::fs::write(path, self.to_json(provenance)?).map_err(|e| DataError::Io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::Io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    /// One row per (drug, time) with one column per organ.
    pub fn to_csv(&self) -> String {
        let (n, nt, no) = self.shape();
        let mut s = String::from("drug,time_h");
        for name in self.organ_names() {
            s.push(',');
            s.push_str(&name);
        }
        s.push('\n');
        for d in 0..n {
            for t in 0..nt {
                let _ = write!(s, "{d},{}", self.time_h[t]);
                for o in 0..no {
                    let _ = write!(s, ",{}", self.get(d, t, o));
                }
                s.push('\n');
            }
        }
        s
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    schema_version: u32,
    seed: u64,
    organs: Vec<String>,
    time_h: Vec<f64>,
    drugs: Vec<DrugDescriptor>,
    values: Vec<Vec<Vec<f64>>>,
    organ_table: Vec<Organ>,
    generator: DatagenConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run_config: Option<serde_json::Value>,
}

/// Simulates one drug on the configured grid, returning `T×O` rows.
pub fn simulate_drug(drug: &DrugDescriptor, graph: &OrganGraph, config: &DatagenConfig) -> Result<Vec<Vec<f64>>, DataError> {
    let sys = CompartmentSystem::pbpk(drug, graph);
    rk4_integrate(
        &sys,
        graph.venous(),
        config.dose_mg_per_kg,
        config.grid_dt(),
        config.t_steps,
        config.dt_h,
    )
}

/// Samples `n_drugs` compounds from one seeded stream and simulates each.
pub fn generate_dataset(config: &DatagenConfig, graph: &OrganGraph) -> Result<ConcentrationTensor, DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let drugs: Vec<DrugDescriptor> = (0..config.n_drugs).map(|_| DrugDescriptor::sample(&mut rng)).collect();
    let mut values = Vec::with_capacity(config.n_drugs * config.t_steps * graph.len());
    for (i, d) in drugs.iter().enumerate() {
        let traj = simulate_drug(d, graph, config).map_err(|e| DataError::Drug {
            index: i,
            source: Box::new(e),
        })?;
        values.extend(traj.into_iter().flatten());
    }
    let time_h = (0..config.t_steps).map(|t| t as f64 * config.grid_dt()).collect();
    ConcentrationTensor::from_parts(config.clone(), graph.clone(), time_h, drugs, values)
}

/// Drug indices for training, validation and testing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl SplitPart {
    pub fn name(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Val => "val",
            SplitPart::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitPart {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "train" => Ok(SplitPart::Train),
            "val" => Ok(SplitPart::Val),
            "test" => Ok(SplitPart::Test),
            other => Err(DataError::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

impl DatasetSplit {
    pub fn part(&self, part: SplitPart) -> &[usize] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }
}

/// Seeded shuffle cut into ⌊0.70N⌋ train, ⌊0.15N⌋ validation and the
/// remainder for testing.
pub fn split_dataset(n_drugs: usize, seed: u64) -> Result<DatasetSplit, DataError> {
    if n_drugs < MIN_DRUGS {
        return Err(DataError::InvalidConfig(format!("n_drugs must be ≥ {MIN_DRUGS}, got {n_drugs}")));
    }
    let mut idx: Vec<usize> = (0..n_drugs).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n_drugs * 70 / 100;
    let n_val = n_drugs * 15 / 100;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(DatasetSplit { train: idx, val, test })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Per-organ statistics pooled over training drugs and all times.
    #[default]
    PerOrgan,
    /// Per-drug, per-organ statistics over each drug's own trajectory.
    PerDrug,
}

/// z-score statistics for concentrations and descriptors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mode: NormMode,
    pub eps: f64,
    pub organs: Vec<String>,
    pub organ_mean: Vec<f64>,
    pub organ_std: Vec<f64>,
    /// `N×O` means and stds, present in per-drug mode only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub drug_mean: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub drug_std: Vec<Vec<f64>>,
    pub descriptor_mean: Vec<f64>,
    pub descriptor_std: Vec<f64>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(NORM_EPS))
}

impl NormStats {
    /// Fits statistics on the training drugs of `split`.
    pub fn fit(data: &ConcentrationTensor, train: &[usize], mode: NormMode) -> Result<Self, DataError> {
        if train.is_empty() {
            return Err(DataError::EmptySplit("train"));
        }
        let (n, nt, no) = data.shape();
        if let Some(&bad) = train.iter().find(|&&d| d >= n) {
            return Err(DataError::InvalidConfig(format!("train index {bad} out of range for {n} drugs")));
        }
        let mut organ_mean = Vec::with_capacity(no);
        let mut organ_std = Vec::with_capacity(no);
        for o in 0..no {
            let (m, s) = mean_std(train.iter().flat_map(|&d| (0..nt).map(move |t| data.get(d, t, o))));
            organ_mean.push(m);
            organ_std.push(s);
        }
        let (mut drug_mean, mut drug_std) = (Vec::new(), Vec::new());
        if mode == NormMode::PerDrug {
            for d in 0..n {
                let (ms, ss): (Vec<f64>, Vec<f64>) = (0..no).map(|o| mean_std((0..nt).map(|t| data.get(d, t, o)))).unzip();
                drug_mean.push(ms);
                drug_std.push(ss);
            }
        }
        let mut descriptor_mean = Vec::with_capacity(DESCRIPTOR_LEN);
        let mut descriptor_std = Vec::with_capacity(DESCRIPTOR_LEN);
        for k in 0..DESCRIPTOR_LEN {
            let (m, s) = mean_std(train.iter().map(|&d| data.drugs[d].features()[k]));
            descriptor_mean.push(m);
            descriptor_std.push(s);
        }
        Ok(Self {
            mode,
            eps: NORM_EPS,
            organs: data.organ_names(),
            organ_mean,
            organ_std,
            drug_mean,
            drug_std,
            descriptor_mean,
            descriptor_std,
        })
    }

    fn affine(&self, drug: usize, organ: usize) -> (f64, f64) {
        match self.mode {
            NormMode::PerOrgan => (self.organ_mean[organ], self.organ_std[organ]),
            NormMode::PerDrug => (self.drug_mean[drug][organ], self.drug_std[drug][organ]),
        }
    }

    pub fn normalize(&self, drug: usize, organ: usize, x: f64) -> f64 {
        let (m, s) = self.affine(drug, organ);
        (x - m) / s
    }

    pub fn denormalize(&self, drug: usize, organ: usize, z: f64) -> f64 {
        let (m, s) = self.affine(drug, organ);
        z * s + m
    }

    pub fn descriptor(&self, drug: &DrugDescriptor) -> [f64; DESCRIPTOR_LEN] {
        let mut f = drug.features();
        for (k, v) in f.iter_mut().enumerate() {
            *v = (*v - self.descriptor_mean[k]) / self.descriptor_std[k];
        }
        f
    }

    /// Checks that these statistics were fitted on a dataset with the
    /// same organs (and, per drug, the same drug count).
    pub fn check_compatible(&self, data: &ConcentrationTensor) -> Result<(), DataError> {
        if self.organs != data.organ_names() {
            return Err(DataError::OrganMismatch {
                expected: self.organs.clone(),
                got: data.organ_names(),
            });
        }
        if self.mode == NormMode::PerDrug && self.drug_mean.len() != data.n_drugs() {
            return Err(DataError::InvalidConfig(format!(
                "per-drug statistics cover {} drugs, dataset has {}",
                self.drug_mean.len(),
                data.n_drugs()
            )));
        }
        Ok(())
    }

    /// Normalized sequences for the given drugs.
    pub fn sequences(&self, data: &ConcentrationTensor, drugs: &[usize]) -> Vec<DrugSequence> {
        let (_, nt, no) = data.shape();
        drugs
            .iter()
            .map(|&d| {
                let mut values = Vec::with_capacity(nt * no);
                for t in 0..nt {
                    for o in 0..no {
                        values.push(self.normalize(d, o, data.get(d, t, o)));
                    }
                }
                DrugSequence {
                    drug: d,
                    descriptor: self.descriptor(&data.drugs[d]),
                    n_times: nt,
                    n_organs: no,
                    values,
                }
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String, DataError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// One drug's normalized trajectory and descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct DrugSequence {
    pub drug: usize,
    pub descriptor: [f64; DESCRIPTOR_LEN],
    pub n_times: usize,
    pub n_organs: usize,
    /// `T×O`, row-major.
    pub values: Vec<f64>,
}

impl DrugSequence {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_organs..(t + 1) * self.n_organs]
    }

    /// Rows `0..t`.
    pub fn history(&self, t: usize) -> &[f64] {
        &self.values[..t * self.n_organs]
    }
}

/// Next-step training example: rows `0..t` predict row `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedPair {
    pub drug: usize,
    pub t: usize,
    /// `t×O`, row-major.
    pub history: Vec<f64>,
    pub descriptor: [f64; DESCRIPTOR_LEN],
    pub target: Vec<f64>,
}

/// Every (drug, t ∈ 1..T) pair of the given sequences.
pub fn make_supervised_pairs(sequences: &[DrugSequence]) -> Result<Vec<SupervisedPair>, DataError> {
    let mut pairs = Vec::new();
    for s in sequences {
        if s.n_times < 2 {
            return Err(DataError::InvalidConfig(format!(
                "need at least 2 time steps for next-step pairs, got {}",
                s.n_times
            )));
        }
        for t in 1..s.n_times {
            pairs.push(SupervisedPair {
                drug: s.drug,
                t,
                history: s.history(t).to_vec(),
                descriptor: s.descriptor,
                target: s.row(t).to_vec(),
            });
        }
    }
    Ok(pairs)
}
