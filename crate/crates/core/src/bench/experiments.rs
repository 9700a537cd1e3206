//! Experiment suites over a synthetic task family: the main method
//! comparison, composition ablations, few-shot down-sampling and hub
//! expansion.
//!
//! A [`Lab`] owns the family and lazily trains the shared artifacts (the
//! pre-trained backbone, the module hubs, the multi-task backbone) the first
//! time a suite needs them. Every cell derives its seeds from the family
//! seed and its coordinates, so results are independent of scheduling.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::OnceLock;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amc::{amc_run, compose, AmcConfig, AmcResult};
use crate::bench::family::{generate_task_family, TaskFamily, TaskFamilyConfig};
use crate::bench::report::{ContinualReport, ContinualRow, ExperimentReport, ReportRow, WeightRow};
use crate::dataset::{SplitDataset, TargetScaler};
use crate::encoder::{init_backbone, Activation, EncoderConfig, Module, ModuleKind};
use crate::error::{Error, Result};
use crate::numerics::WeightVector;
use crate::rng::{derive_seed, rng_from, tag};
use crate::trainer::{evaluate_mae, finetune, reference, train_module, train_multitask, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl TrainSettings {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
            target_standardize: true,
        }
    }

    fn from_config(c: TrainConfig) -> Self {
        TrainSettings {
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            max_epochs: c.max_epochs,
            patience: c.patience,
        }
    }
}

/// Train-split size used by a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "SizeRepr", into = "SizeRepr")]
pub enum TrainSize {
    Full,
    Rows(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SizeRepr {
    Rows(usize),
    Word(String),
}

impl TryFrom<SizeRepr> for TrainSize {
    type Error = String;

    fn try_from(r: SizeRepr) -> std::result::Result<Self, String> {
        match r {
            SizeRepr::Rows(0) => Err("train size must be positive".into()),
            SizeRepr::Rows(n) => Ok(TrainSize::Rows(n)),
            SizeRepr::Word(w) if w == "full" => Ok(TrainSize::Full),
            SizeRepr::Word(w) => Err(format!("unknown train size `{w}`")),
        }
    }
}

impl From<TrainSize> for SizeRepr {
    fn from(s: TrainSize) -> Self {
        match s {
            TrainSize::Full => SizeRepr::Word("full".into()),
            TrainSize::Rows(n) => SizeRepr::Rows(n),
        }
    }
}

impl fmt::Display for TrainSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainSize::Full => f.write_str("full"),
            TrainSize::Rows(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub family: TaskFamilyConfig,
    pub n_splits: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    pub pretrain: TrainSettings,
    pub module_training: TrainSettings,
    pub multitask: TrainSettings,
    pub finetune: TrainSettings,
    pub k_neighbors: usize,
    pub fewshot_sizes: Vec<TrainSize>,
    /// Extra clusters whose upstream modules join the hub in the continual
    /// suite.
    pub continual_new_clusters: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            family: TaskFamilyConfig::default(),
            n_splits: 5,
            hidden_dims: vec![32],
            embed_dim: 8,
            activation: Activation::Tanh,
            pretrain: TrainSettings::from_config(TrainConfig::module_training(0)),
            module_training: TrainSettings::from_config(TrainConfig::module_training(0)),
            multitask: TrainSettings {
                batch_size: reference::MULTITASK_BATCH_SIZE,
                learning_rate: TrainConfig::module_training(0).learning_rate,
                max_epochs: reference::MULTITASK_EPOCHS,
                patience: reference::MULTITASK_EPOCHS,
            },
            finetune: TrainSettings::from_config(TrainConfig::finetuning(0)),
            k_neighbors: crate::amc::DEFAULT_K_NEIGHBORS,
            fewshot_sizes: vec![TrainSize::Full, TrainSize::Rows(60), TrainSize::Rows(10)],
            continual_new_clusters: 1,
        }
    }
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: BenchConfig =
            toml::from_str(text).map_err(|e| Error::InvalidInput(format!("bench config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        self.encoder_config().validate()?;
        if self.n_splits == 0 {
            return Err(Error::InvalidInput("n_splits must be positive".into()));
        }
        if self.k_neighbors == 0 {
            return Err(Error::InvalidInput("k_neighbors must be positive".into()));
        }
        for s in [&self.pretrain, &self.module_training, &self.multitask, &self.finetune] {
            s.with_seed(0).validate()?;
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            activation: self.activation,
            ..EncoderConfig::new(self.family.input_dim, self.hidden_dims.clone(), self.embed_dim)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Scratch,
    BackboneFt,
    MultitaskFt,
    MomaFull,
    MomaAdapter,
    SelectAverage,
    AllAverage,
    RandomSelection,
}

impl Method {
    pub const MAIN: [Method; 5] = [
        Method::Scratch,
        Method::BackboneFt,
        Method::MultitaskFt,
        Method::MomaFull,
        Method::MomaAdapter,
    ];
    pub const ABLATION: [Method; 4] = [
        Method::MomaFull,
        Method::SelectAverage,
        Method::AllAverage,
        Method::RandomSelection,
    ];
    pub const FEWSHOT: [Method; 2] = [Method::BackboneFt, Method::MomaFull];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Scratch => "scratch",
            Method::BackboneFt => "backbone_ft",
            Method::MultitaskFt => "multitask_ft",
            Method::MomaFull => "moma_full",
            Method::MomaAdapter => "moma_adapter",
            Method::SelectAverage => "select_average",
            Method::AllAverage => "all_average",
            Method::RandomSelection => "random_selection",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Experiment {
    Main,
    Ablation,
    FewShot,
    Continual,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Main => "main",
            Experiment::Ablation => "ablation",
            Experiment::FewShot => "fewshot",
            Experiment::Continual => "continual",
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "main" => Ok(Experiment::Main),
            "ablation" => Ok(Experiment::Ablation),
            "fewshot" => Ok(Experiment::FewShot),
            "continual" => Ok(Experiment::Continual),
            other => Err(Error::InvalidInput(format!("unknown experiment `{other}`"))),
        }
    }
}

/// One unit of work: a downstream task under one split seed, method and
/// train size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cell {
    pub task: usize,
    pub split: usize,
    pub method: Method,
    pub size: TrainSize,
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub test_mae: f64,
    pub normalized_mae: f64,
    pub amc: Option<AmcResult>,
}

pub struct Lab {
    pub config: BenchConfig,
    pub family: TaskFamily,
    /// Upstream tasks of clusters at or past this index are withheld from
    /// the initial hub (continual suite only).
    first_new_cluster: usize,
    backbone: OnceLock<Module>,
    full_hub: OnceLock<Vec<Module>>,
    adapter_hub: OnceLock<Vec<Module>>,
    multitask: OnceLock<Module>,
}

impl Lab {
    pub fn new(config: BenchConfig) -> Result<Self> {
        config.validate()?;
        let family = generate_task_family(&config.family)?;
        let n = config.family.n_clusters;
        Ok(Lab::with_family(config, family, n))
    }

    /// A lab whose family has `continual_new_clusters` extra clusters. Their
    /// upstream modules are absent from the hub until the continual suite
    /// adds them.
    pub fn continual(config: BenchConfig) -> Result<Self> {
        config.validate()?;
        if config.continual_new_clusters == 0 {
            return Err(Error::InvalidInput("continual_new_clusters must be positive".into()));
        }
        let family_cfg = TaskFamilyConfig {
            n_clusters: config.family.n_clusters + config.continual_new_clusters,
            ..config.family.clone()
        };
        let family = generate_task_family(&family_cfg)?;
        let n = config.family.n_clusters;
        Ok(Lab::with_family(config, family, n))
    }

    fn with_family(config: BenchConfig, family: TaskFamily, first_new_cluster: usize) -> Self {
        Lab {
            config,
            family,
            first_new_cluster,
            backbone: OnceLock::new(),
            full_hub: OnceLock::new(),
            adapter_hub: OnceLock::new(),
            multitask: OnceLock::new(),
        }
    }

    fn seed(&self, tags: &[u64]) -> u64 {
        derive_seed(self.family.config.seed, tags)
    }

    pub fn n_tasks(&self) -> usize {
        self.family.downstream.len()
    }

    pub fn task_name(&self, task: usize) -> &str {
        &self.family.downstream_specs[task].name
    }

    /// Backbone pre-trained jointly on the family's pre-training domains,
    /// one head per domain.
    pub fn backbone(&self) -> Result<&Module> {
        if let Some(b) = self.backbone.get() {
            return Ok(b);
        }
        let init = init_backbone(&self.config.encoder_config(), self.seed(&[tag("backbone-init")]))?;
        let cfg = self.config.pretrain.with_seed(self.seed(&[tag("pretrain")]));
        let mut b = train_multitask(&init, &self.family.pretrain_domains, &cfg)?;
        b.meta.id = "pretrained-backbone".into();
        Ok(self.backbone.get_or_init(|| b))
    }

    fn train_hub(&self, kind: ModuleKind) -> Result<Vec<Module>> {
        let backbone = self.backbone()?;
        self.family
            .upstream
            .par_iter()
            .enumerate()
            .map(|(t, data)| {
                let cfg = self
                    .config
                    .module_training
                    .with_seed(self.seed(&[tag("module"), tag(kind.as_str()), t as u64]));
                let mut m = train_module(backbone, data, &cfg, kind)?.module;
                m.meta.id = format!("{}-{kind}", data.name());
                Ok(m)
            })
            .collect()
    }

    /// Every upstream module of `kind`, in upstream task order.
    pub fn hub(&self, kind: ModuleKind) -> Result<&[Module]> {
        let slot = match kind {
            ModuleKind::Full => &self.full_hub,
            ModuleKind::Adapter => &self.adapter_hub,
        };
        if let Some(h) = slot.get() {
            return Ok(h);
        }
        let h = self.train_hub(kind)?;
        Ok(slot.get_or_init(|| h))
    }

    /// Hub modules available before the continual expansion.
    pub fn initial_hub(&self, kind: ModuleKind) -> Result<Vec<Module>> {
        Ok(self
            .hub(kind)?
            .iter()
            .zip(&self.family.upstream_specs)
            .filter(|(_, s)| s.cluster < self.first_new_cluster)
            .map(|(m, _)| m.clone())
            .collect())
    }

    /// Shared backbone after multi-task training on all initial upstream
    /// tasks.
    pub fn multitask_backbone(&self) -> Result<&Module> {
        if let Some(m) = self.multitask.get() {
            return Ok(m);
        }
        let tasks: Vec<SplitDataset> = self
            .family
            .upstream
            .iter()
            .zip(&self.family.upstream_specs)
            .filter(|(_, s)| s.cluster < self.first_new_cluster)
            .map(|(d, _)| d.clone())
            .collect();
        let cfg = self.config.multitask.with_seed(self.seed(&[tag("multitask")]));
        let m = train_multitask(self.backbone()?, &tasks, &cfg)?;
        Ok(self.multitask.get_or_init(|| m))
    }

    /// Downstream split plus the train-target std used for normalization.
    /// Few-shot sizes keep a random subset of the train rows (see
    /// [`fewshot_indices`]); validation and test rows are unchanged.
    pub fn cell_data(&self, task: usize, split: usize, size: TrainSize) -> Result<(SplitDataset, f64)> {
        let mut data = self.family.downstream_split(task, split)?;
        let std = TargetScaler::fit(data.train.targets())?.std;
        if let TrainSize::Rows(n) = size {
            let seed = self.seed(&[tag("fewshot"), task as u64, split as u64, n as u64]);
            let idx = fewshot_indices(data.train.len(), n, seed);
            data.train = data.train.subset(&idx)?;
        }
        Ok((data, std))
    }

    fn amc(&self, modules: &[Module], backbone: Option<&Module>, data: &SplitDataset, kind: ModuleKind) -> Result<AmcResult> {
        let cfg = AmcConfig {
            k_neighbors: self.config.k_neighbors,
            ..AmcConfig::with_kind(kind)
        };
        amc_run(modules, backbone, data, &cfg)
    }

    /// Trains and evaluates one cell.
    pub fn run_cell(&self, cell: Cell) -> Result<CellResult> {
        let (data, std) = self.cell_data(cell.task, cell.split, cell.size)?;
        let ft_cfg = self
            .config
            .finetune
            .with_seed(self.seed(&[tag("finetune"), cell.task as u64, cell.split as u64]));
        let full = AmcConfig {
            k_neighbors: self.config.k_neighbors,
            ..AmcConfig::default()
        };
        let uniform_over = |modules: &[&Module]| -> Result<Module> {
            compose(modules, &WeightVector::uniform(modules.len())?, &full)
        };

        let mut amc = None;
        let (start, frozen): (Module, Option<&Module>) = match cell.method {
            Method::Scratch => (
                init_backbone(
                    &self.config.encoder_config(),
                    self.seed(&[tag("scratch"), cell.task as u64, cell.split as u64]),
                )?,
                None,
            ),
            Method::BackboneFt => (self.backbone()?.clone(), None),
            Method::MultitaskFt => (self.multitask_backbone()?.clone(), None),
            Method::MomaFull => {
                let r = self.amc(self.hub(ModuleKind::Full)?, None, &data, ModuleKind::Full)?;
                let m = r.composed.clone();
                amc = Some(r);
                (m, None)
            }
            Method::MomaAdapter => {
                let backbone = self.backbone()?;
                let r = self.amc(self.hub(ModuleKind::Adapter)?, Some(backbone), &data, ModuleKind::Adapter)?;
                let m = r.composed.clone();
                amc = Some(r);
                (m, Some(backbone))
            }
            Method::SelectAverage | Method::RandomSelection => {
                let hub = self.hub(ModuleKind::Full)?;
                let r = self.amc(hub, None, &data, ModuleKind::Full)?;
                let picked: Vec<&Module> = if cell.method == Method::SelectAverage {
                    hub.iter().filter(|m| r.selected_ids.contains(&m.meta.id)).collect()
                } else {
                    let mut rng = rng_from(self.seed(&[tag("random-selection"), cell.task as u64, cell.split as u64]));
                    let mut idx = sample(&mut rng, hub.len(), r.selected_ids.len()).into_vec();
                    idx.sort_unstable();
                    idx.into_iter().map(|i| &hub[i]).collect()
                };
                (uniform_over(&picked)?, None)
            }
            Method::AllAverage => {
                let hub: Vec<&Module> = self.hub(ModuleKind::Full)?.iter().collect();
                (uniform_over(&hub)?, None)
            }
        };

        let outcome = finetune(&start, frozen, &data, &ft_cfg)?;
        let test_mae = evaluate_mae(&outcome.module, frozen, &outcome.head, &data.test)?;
        Ok(CellResult {
            cell,
            test_mae,
            normalized_mae: test_mae / std,
            amc,
        })
    }

    fn run_cells(&self, cells: &[Cell]) -> Result<Vec<CellResult>> {
        cells
            .par_iter()
            .map(|&c| {
                self.run_cell(c).map_err(|e| Error::Cell {
                    cell: self.cell_label(c),
                    source: Box::new(e),
                })
            })
            .collect()
    }

    pub fn cell_label(&self, c: Cell) -> String {
        format!(
            "task={} split={} method={} size={}",
            self.task_name(c.task),
            c.split,
            c.method,
            c.size
        )
    }

    fn report(&self, experiment: Experiment, results: &[CellResult], label: impl Fn(Method) -> String) -> Result<ExperimentReport> {
        let rows = results
            .iter()
            .map(|r| ReportRow {
                task: self.task_name(r.cell.task).to_string(),
                method: label(r.cell.method),
                setting: r.cell.size.to_string(),
                split: r.cell.split,
                test_mae: r.test_mae,
                normalized_mae: r.normalized_mae,
            })
            .collect();
        ExperimentReport::new(experiment.as_str(), rows)
    }

    /// Cells each suite evaluates, in a fixed order.
    pub fn plan(&self, experiment: Experiment) -> Vec<Cell> {
        let (methods, sizes): (&[Method], Vec<TrainSize>) = match experiment {
            Experiment::Main => (&Method::MAIN, vec![TrainSize::Full]),
            Experiment::Ablation => (&Method::ABLATION, vec![TrainSize::Full]),
            Experiment::FewShot => (&Method::FEWSHOT, self.config.fewshot_sizes.clone()),
            Experiment::Continual => (&[Method::MomaFull], vec![TrainSize::Full]),
        };
        let mut cells = vec![];
        for task in 0..self.n_tasks() {
            for split in 0..self.config.n_splits {
                for &size in &sizes {
                    for &method in methods {
                        cells.push(Cell { task, split, method, size });
                    }
                }
            }
        }
        cells
    }

    /// Main comparison. Also returns the AMC weights of every
    /// `moma_full` cell.
    pub fn run_main(&self) -> Result<(ExperimentReport, Vec<WeightRow>)> {
        let results = self.run_cells(&self.plan(Experiment::Main))?;
        let mut weights = vec![];
        for r in results.iter().filter(|r| r.cell.method == Method::MomaFull) {
            let amc = r.amc.as_ref().expect("moma cells carry their AMC result");
            for (id, w) in amc.module_ids.iter().zip(amc.weights.as_slice()) {
                weights.push(WeightRow {
                    task: self.task_name(r.cell.task).to_string(),
                    split: r.cell.split,
                    module: id.clone(),
                    weight: *w,
                });
            }
        }
        Ok((self.report(Experiment::Main, &results, |m| m.to_string())?, weights))
    }

    /// AMC against averaging variants; the AMC rows are labelled `amc`.
    pub fn run_ablation(&self) -> Result<ExperimentReport> {
        let results = self.run_cells(&self.plan(Experiment::Ablation))?;
        self.report(Experiment::Ablation, &results, |m| match m {
            Method::MomaFull => "amc".to_string(),
            other => other.to_string(),
        })
    }

    pub fn run_fewshot(&self) -> Result<ExperimentReport> {
        let results = self.run_cells(&self.plan(Experiment::FewShot))?;
        self.report(Experiment::FewShot, &results, |m| m.to_string())
    }

    /// Re-runs AMC and fine-tuning after adding the withheld clusters'
    /// modules to the hub, for every (task, split) where a new module is
    /// selected.
    pub fn run_continual(&self) -> Result<ContinualReport> {
        let all = self.hub(ModuleKind::Full)?;
        if self.first_new_cluster >= self.family.config.n_clusters {
            return Err(Error::InvalidInput("lab has no withheld clusters; build it with Lab::continual".into()));
        }
        let before = self.initial_hub(ModuleKind::Full)?;
        let new_ids: BTreeSet<&str> = all
            .iter()
            .zip(&self.family.upstream_specs)
            .filter(|(_, s)| s.cluster >= self.first_new_cluster)
            .map(|(m, _)| m.meta.id.as_str())
            .collect();
        let cells = self.plan(Experiment::Continual);
        let rows: Vec<Option<ContinualRow>> = cells
            .par_iter()
            .map(|&c| {
                self.continual_cell(c, &before, all, &new_ids).map_err(|e| Error::Cell {
                    cell: self.cell_label(c),
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()?;
        Ok(ContinualReport::new(rows.into_iter().flatten().collect(), cells.len()))
    }

    fn continual_cell(
        &self,
        c: Cell,
        before: &[Module],
        after: &[Module],
        new_ids: &BTreeSet<&str>,
    ) -> Result<Option<ContinualRow>> {
        let (data, std) = self.cell_data(c.task, c.split, c.size)?;
        let amc_after = self.amc(after, None, &data, ModuleKind::Full)?;
        if !amc_after.selected_ids.iter().any(|id| new_ids.contains(id.as_str())) {
            return Ok(None);
        }
        let amc_before = self.amc(before, None, &data, ModuleKind::Full)?;
        let ft_cfg = self
            .config
            .finetune
            .with_seed(self.seed(&[tag("finetune"), c.task as u64, c.split as u64]));
        let mae = |composed: &Module| -> Result<f64> {
            let o = finetune(composed, None, &data, &ft_cfg)?;
            evaluate_mae(&o.module, None, &o.head, &data.test)
        };
        let mae_before = mae(&amc_before.composed)?;
        let mae_after = mae(&amc_after.composed)?;
        Ok(Some(ContinualRow {
            task: self.task_name(c.task).to_string(),
            split: c.split,
            proxy_error_before: amc_before.proxy_error,
            proxy_error_after: amc_after.proxy_error,
            mae_before,
            mae_after,
            normalized_mae_decrease: (mae_before - mae_after) / std,
        }))
    }
}

/// Sorted indices of an `n`-row random subset of `0..m`. `n > m` is
/// clamped to `m` with a warning.
pub fn fewshot_indices(m: usize, n: usize, seed: u64) -> Vec<usize> {
    if n >= m {
        if n > m {
            log::warn!("few-shot size {n} exceeds {m} train rows; using all rows");
        }
        return (0..m).collect();
    }
    let mut idx = sample(&mut rng_from(seed), m, n).into_vec();
    idx.sort_unstable();
    idx
}

/// Mean over tasks of (`baseline` − `method`) split-averaged normalized MAE,
/// per setting.
pub fn normalized_margin(report: &ExperimentReport, setting: &str, baseline: &str, method: &str) -> Option<f64> {
    let means = report.task_means(setting, |r| r.normalized_mae);
    let diffs: Vec<f64> = means
        .values()
        .filter_map(|by| Some(by.get(baseline)? - by.get(method)?))
        .collect();
    (!diffs.is_empty()).then(|| diffs.iter().sum::<f64>() / diffs.len() as f64)
}

/// Fraction of tasks where `method`'s split-averaged test MAE is at most
/// `other`'s.
pub fn win_fraction(report: &ExperimentReport, setting: &str, method: &str, other: &str) -> Option<f64> {
    let means = report.task_means(setting, |r| r.test_mae);
    let outcomes: Vec<bool> = means
        .values()
        .filter_map(|by| Some(by.get(method)? <= by.get(other)?))
        .collect();
    (!outcomes.is_empty()).then(|| outcomes.iter().filter(|&&w| w).count() as f64 / outcomes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A family small enough for unit tests.
    fn tiny() -> BenchConfig {
        let quick = TrainSettings {
            batch_size: 16,
            learning_rate: 0.05,
            max_epochs: 3,
            patience: 2,
        };
        BenchConfig {
            family: TaskFamilyConfig {
                n_clusters: 2,
                tasks_per_cluster: 2,
                downstream_tasks: 2,
                input_dim: 4,
                latent_dim: 2,
                samples_upstream: 120,
                samples_downstream: 60,
                seed: 5,
                ..TaskFamilyConfig::default()
            },
            n_splits: 2,
            hidden_dims: vec![6],
            embed_dim: 3,
            pretrain: quick.clone(),
            module_training: quick.clone(),
            multitask: quick.clone(),
            finetune: quick,
            fewshot_sizes: vec![TrainSize::Full, TrainSize::Rows(10)],
            ..BenchConfig::default()
        }
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = BenchConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(BenchConfig::from_toml(&text).unwrap(), cfg);
        let partial = BenchConfig::from_toml("n_splits = 2\nfewshot_sizes = [\"full\", 7]\n[family]\nseed = 3\n").unwrap();
        assert_eq!(partial.n_splits, 2);
        assert_eq!(partial.family.seed, 3);
        assert_eq!(partial.fewshot_sizes, vec![TrainSize::Full, TrainSize::Rows(7)]);
        assert!(BenchConfig::from_toml("fewshot_sizes = [\"most\"]").is_err());
        assert!(BenchConfig::from_toml("n_splits = 0").is_err());
    }

    #[test]
    fn fewshot_subsets_are_strict_subsets() {
        let idx = fewshot_indices(210, 60, 9);
        assert_eq!(idx.len(), 60);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert!(idx.iter().all(|&i| i < 210));
        assert_eq!(fewshot_indices(5, 9, 1), vec![0, 1, 2, 3, 4]);

        let lab = Lab::new(tiny()).unwrap();
        let (full, _) = lab.cell_data(0, 1, TrainSize::Full).unwrap();
        let (few, _) = lab.cell_data(0, 1, TrainSize::Rows(10)).unwrap();
        assert_eq!(few.train.len(), 10);
        for (x, y) in few.train.iter() {
            assert!(full.train.iter().any(|(fx, fy)| fx == x && fy == y));
        }
        assert_eq!(few.val, full.val);
        assert_eq!(few.test, full.test);
    }

    #[test]
    fn suites_are_reproducible_and_complete() {
        let a = Lab::new(tiny()).unwrap();
        let b = Lab::new(tiny()).unwrap();
        let (ra, wa) = a.run_main().unwrap();
        let (rb, wb) = b.run_main().unwrap();
        assert_eq!(ra.to_csv(), rb.to_csv());
        assert_eq!(wa, wb);
        assert_eq!(ra.rows().len(), 2 * 2 * 5);
        assert_eq!(ra.summary().aggregates.len(), 5);

        // The full-size few-shot cells equal the main run's cells.
        let few = a.run_fewshot().unwrap();
        for r in few.rows().iter().filter(|r| r.setting == "full") {
            let m = ra
                .rows()
                .iter()
                .find(|x| x.task == r.task && x.method == r.method && x.split == r.split)
                .unwrap();
            assert_eq!(m.test_mae.to_bits(), r.test_mae.to_bits());
        }

        let abl = a.run_ablation().unwrap();
        let methods: BTreeSet<&str> = abl.rows().iter().map(|r| r.method.as_str()).collect();
        assert_eq!(
            methods,
            ["all_average", "amc", "random_selection", "select_average"].into_iter().collect()
        );
    }

    #[test]
    fn continual_requires_withheld_clusters() {
        assert!(Lab::new(tiny()).unwrap().run_continual().is_err());
        let lab = Lab::continual(tiny()).unwrap();
        assert_eq!(lab.family.config.n_clusters, 3);
        assert_eq!(lab.initial_hub(ModuleKind::Full).unwrap().len(), 4);
        assert_eq!(lab.hub(ModuleKind::Full).unwrap().len(), 6);
        let r = lab.run_continual().unwrap();
        assert_eq!(r.cells_examined, 4);
        for row in &r.rows {
            assert!(row.proxy_error_after <= row.proxy_error_before + 1e-6);
        }
    }
}
