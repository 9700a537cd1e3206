//! Adaptive module composition.
//!
//! For a downstream train split, every hub module embeds the inputs and
//! predicts each sample's (standardized) label from its K most
//! cosine-similar other samples with exponential-cosine weights. Those
//! leave-one-out predictions form the columns of a prediction matrix; simplex
//! weights minimizing the mean squared error of the blended column give the
//! proxy error, and the same weights average the module parameters into a
//! single composed module.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, SplitDataset, TargetScaler};
use crate::encoder::{Fingerprint, Module, ModuleKind, ModuleMeta};
use crate::error::{Error, Result};
use crate::numerics::{
    blend_parameters, cosine_with_norms, kernel_from_similarities, norm, solve_simplex_lsq, Matrix,
    WeightVector, DEFAULT_LSQ_MAX_ITERS, DEFAULT_LSQ_TOL,
};
use crate::trainer::embed_all;

pub const DEFAULT_K_NEIGHBORS: usize = 5;
pub const DEFAULT_SELECTION_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmcConfig {
    pub k_neighbors: usize,
    pub selection_threshold: f64,
    pub kind_filter: ModuleKind,
}

impl Default for AmcConfig {
    fn default() -> Self {
        AmcConfig {
            k_neighbors: DEFAULT_K_NEIGHBORS,
            selection_threshold: DEFAULT_SELECTION_THRESHOLD,
            kind_filter: ModuleKind::Full,
        }
    }
}

impl AmcConfig {
    pub fn with_kind(kind: ModuleKind) -> Self {
        AmcConfig {
            kind_filter: kind,
            ..AmcConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors == 0 {
            return Err(Error::InvalidInput("k_neighbors must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.selection_threshold) {
            return Err(Error::InvalidInput(format!(
                "selection_threshold {} must lie in [0, 1)",
                self.selection_threshold
            )));
        }
        Ok(())
    }
}

/// Leave-one-out predictions of one module, `values[i][j]` for sample `i`
/// and module `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMatrix {
    pub values: Matrix,
    pub module_ids: Vec<String>,
}

impl PredictionMatrix {
    pub fn sample_count(&self) -> usize {
        self.values.rows()
    }
}

/// Leave-one-out kNN estimates together with the neighbor sets that
/// produced them (nearest first).
#[derive(Clone, Debug, PartialEq)]
pub struct LooEstimate {
    pub predictions: Vec<f64>,
    pub neighbors: Vec<Vec<usize>>,
}

/// Leave-one-out label propagation over precomputed embeddings.
///
/// Each sample takes the `min(k, m − 1)` other samples with the highest
/// cosine similarity (ties go to the lower index) and predicts the
/// exponential-cosine weighted mean of their labels.
pub fn loo_knn(embeddings: &[Vec<f64>], labels: &[f64], k: usize) -> Result<LooEstimate> {
    let m = embeddings.len();
    if m < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: m });
    }
    if labels.len() != m {
        return Err(Error::shape(format!("{m} labels"), labels.len()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let dim = embeddings[0].len();
    if let Some(bad) = embeddings.iter().find(|e| e.len() != dim) {
        return Err(Error::shape(format!("embeddings of width {dim}"), bad.len()));
    }
    let norms: Vec<f64> = embeddings.iter().map(|e| norm(e)).collect();
    if norms.iter().any(|n| !n.is_finite()) {
        return Err(Error::InvalidInput("non-finite embedding".into()));
    }
    if norms.iter().any(|&n| n == 0.0) {
        return Err(Error::ZeroVector);
    }
    let k = k.min(m - 1);

    let mut predictions = Vec::with_capacity(m);
    let mut neighbors = Vec::with_capacity(m);
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for i in 0..m {
        best.clear();
        for j in (0..m).filter(|&j| j != i) {
            let sim = cosine_with_norms(&embeddings[i], norms[i], &embeddings[j], norms[j]);
            if best.len() == k && sim <= best[k - 1].0 {
                continue;
            }
            // Strictly greater moves ahead; equal similarity stays behind the
            // earlier (lower) index.
            let pos = best.iter().position(|&(s, _)| sim > s).unwrap_or(best.len());
            best.insert(pos, (sim, j));
            best.truncate(k);
        }
        let sims: Vec<f64> = best.iter().map(|&(s, _)| s).collect();
        let weights = kernel_from_similarities(&sims);
        predictions.push(
            weights
                .iter()
                .zip(&best)
                .map(|(w, &(_, j))| w * labels[j])
                .sum(),
        );
        neighbors.push(best.iter().map(|&(_, j)| j).collect());
    }
    Ok(LooEstimate {
        predictions,
        neighbors,
    })
}

/// Leave-one-out kNN estimates of `module` on `data`, using its targets as
/// labels.
pub fn estimate_predictions(
    module: &Module,
    backbone: Option<&Module>,
    data: &LabeledDataset,
    k: usize,
) -> Result<Vec<f64>> {
    if data.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: data.len() });
    }
    let embeddings = embed_all(module, backbone, data)?;
    Ok(loo_knn(&embeddings, data.targets(), k)?.predictions)
}

/// Modules eligible for composition: of the configured kind, sharing one
/// fingerprint (the backbone's for adapters, else the first match's) and
/// accepting `input_dim` inputs.
pub fn eligible_modules<'a>(
    modules: &'a [Module],
    backbone: Option<&Module>,
    cfg: &AmcConfig,
    input_dim: usize,
) -> Result<Vec<&'a Module>> {
    let of_kind: Vec<&Module> = modules
        .iter()
        .filter(|m| m.kind() == cfg.kind_filter && m.config().input_dim == input_dim)
        .collect();
    if of_kind.is_empty() {
        return Err(Error::EmptyHub);
    }
    let reference: Option<Fingerprint> = match cfg.kind_filter {
        ModuleKind::Adapter => Some(backbone.ok_or(Error::MissingBackbone)?.fingerprint()),
        ModuleKind::Full => of_kind.first().map(|m| m.fingerprint()),
    };
    let Some(reference) = reference else {
        return Err(Error::EmptyHub);
    };
    let chosen: Vec<&Module> = of_kind
        .into_iter()
        .filter(|m| {
            let keep = m.fingerprint() == reference;
            if !keep {
                log::warn!("skipping `{}`: fingerprint differs", m.meta.id);
            }
            keep
        })
        .collect();
    if chosen.is_empty() {
        return Err(Error::EmptyHub);
    }
    Ok(chosen)
}

/// Stacks every eligible module's leave-one-out estimates on the train
/// split, with targets standardized by train statistics. Columns follow
/// the order of `modules`.
pub fn build_prediction_matrix(
    modules: &[Module],
    backbone: Option<&Module>,
    train: &LabeledDataset,
    cfg: &AmcConfig,
) -> Result<PredictionMatrix> {
    cfg.validate()?;
    let chosen = eligible_modules(modules, backbone, cfg, train.input_dim())?;
    let standardized = standardized_targets(train)?;
    let columns = chosen
        .par_iter()
        .map(|m| estimate_predictions(m, backbone, &standardized, cfg.k_neighbors))
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionMatrix {
        values: Matrix::from_columns(&columns)?,
        module_ids: chosen.iter().map(|m| m.meta.id.clone()).collect(),
    })
}

/// The train split with targets mapped to zero mean and unit variance.
pub fn standardized_targets(train: &LabeledDataset) -> Result<LabeledDataset> {
    let scaler = TargetScaler::fit(train.targets())?;
    train.with_targets(scaler.standardize_all(train.targets()))
}

/// Simplex weights minimizing the proxy error of the blended predictions.
pub fn optimize_weights(p: &PredictionMatrix, y: &[f64]) -> Result<(WeightVector, f64)> {
    let sol = solve_simplex_lsq(&p.values, y, DEFAULT_LSQ_TOL, DEFAULT_LSQ_MAX_ITERS)?;
    Ok((sol.weights, sol.proxy_error))
}

/// Drops weights under the threshold and renormalizes the rest. The largest
/// weight always survives.
pub fn effective_weights(weights: &WeightVector, threshold: f64) -> Result<WeightVector> {
    let keep_max = weights.argmax();
    let kept: Vec<f64> = weights
        .as_slice()
        .iter()
        .enumerate()
        .map(|(j, &w)| if w >= threshold || j == keep_max { w } else { 0.0 })
        .collect();
    let total: f64 = kept.iter().sum();
    if total <= 0.0 {
        return WeightVector::one_hot(weights.len(), keep_max);
    }
    WeightVector::new(kept.into_iter().map(|w| w / total).collect())
}

/// Weighted parameter average of `modules` after thresholding `weights`.
pub fn compose(modules: &[&Module], weights: &WeightVector, cfg: &AmcConfig) -> Result<Module> {
    if modules.is_empty() {
        return Err(Error::EmptyHub);
    }
    if modules.len() != weights.len() {
        return Err(Error::shape(format!("{} weights", modules.len()), weights.len()));
    }
    let first = modules[0];
    for m in modules {
        if m.kind() != cfg.kind_filter || m.kind() != first.kind() {
            return Err(Error::ConfigMismatch(format!(
                "cannot compose {} module `{}` as {}",
                m.kind(),
                m.meta.id,
                cfg.kind_filter
            )));
        }
        if m.fingerprint() != first.fingerprint() {
            return Err(Error::ConfigMismatch(format!(
                "module `{}` has a different architecture fingerprint",
                m.meta.id
            )));
        }
    }
    let effective = effective_weights(weights, cfg.selection_threshold)?;
    let params: Vec<&[f64]> = modules.iter().map(|m| m.params()).collect();
    let blended = blend_parameters(&params, &effective)?;
    let recipe: Vec<(String, f64)> = modules
        .iter()
        .zip(effective.as_slice())
        .filter(|(_, &w)| w > 0.0)
        .map(|(m, &w)| (m.meta.id.clone(), w))
        .collect();
    Module::new(
        first.kind(),
        first.config().clone(),
        blended,
        ModuleMeta {
            id: String::new(),
            task_name: String::new(),
            created_from_seed: 0,
            train_mae: f64::NAN,
            notes: format!("composed from {}", serde_json::to_string(&recipe)?),
        },
    )
}

#[derive(Clone, Debug)]
pub struct AmcResult {
    pub module_ids: Vec<String>,
    /// Optimized weights aligned with `module_ids`.
    pub weights: WeightVector,
    /// Weights actually used for composition, after thresholding.
    pub effective_weights: WeightVector,
    /// Proxy error at the optimum, in standardized target units.
    pub proxy_error: f64,
    pub selected_ids: Vec<String>,
    pub composed: Module,
}

/// Serializable summary of an [`AmcResult`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmcReport {
    pub task: String,
    pub kind: ModuleKind,
    pub k_neighbors: usize,
    pub selection_threshold: f64,
    pub module_ids: Vec<String>,
    pub weights: Vec<f64>,
    pub effective_weights: Vec<f64>,
    pub proxy_error: f64,
    pub selected_ids: Vec<String>,
}

impl AmcResult {
    pub fn report(&self, task: &str, cfg: &AmcConfig) -> AmcReport {
        AmcReport {
            task: task.to_string(),
            kind: cfg.kind_filter,
            k_neighbors: cfg.k_neighbors,
            selection_threshold: cfg.selection_threshold,
            module_ids: self.module_ids.clone(),
            weights: self.weights.as_slice().to_vec(),
            effective_weights: self.effective_weights.as_slice().to_vec(),
            proxy_error: self.proxy_error,
            selected_ids: self.selected_ids.clone(),
        }
    }
}

impl AmcReport {
    /// `task,module,weight` rows, one per module.
    pub fn weight_rows_csv(&self, with_header: bool) -> String {
        let mut out = String::new();
        if with_header {
            out.push_str("task,module,weight\n");
        }
        for (id, w) in self.module_ids.iter().zip(&self.weights) {
            out.push_str(&format!("{},{},{}\n", self.task, id, w));
        }
        out
    }
}

/// Full composition pipeline on the train split of `data`.
pub fn amc_run(
    modules: &[Module],
    backbone: Option<&Module>,
    data: &SplitDataset,
    cfg: &AmcConfig,
) -> Result<AmcResult> {
    let p = build_prediction_matrix(modules, backbone, &data.train, cfg)?;
    let y = standardized_targets(&data.train)?.targets().to_vec();
    let (weights, proxy_error) = optimize_weights(&p, &y)?;
    let chosen = eligible_modules(modules, backbone, cfg, data.input_dim())?;
    let mut composed = compose(&chosen, &weights, cfg)?;
    composed.meta.task_name = data.name().to_string();
    let effective = effective_weights(&weights, cfg.selection_threshold)?;
    let selected_ids = p
        .module_ids
        .iter()
        .zip(effective.as_slice())
        .filter(|(_, &w)| w > 0.0)
        .map(|(id, _)| id.clone())
        .collect();
    Ok(AmcResult {
        module_ids: p.module_ids,
        weights,
        effective_weights: effective,
        proxy_error,
        selected_ids,
        composed,
    })
}
