//! Mini-batch SGD loops: module training, downstream fine-tuning, surrogate
//! pre-training and the multi-task baseline, all with early stopping on
//! validation MAE.
//!
//! Targets are standardized with train-split statistics while optimizing;
//! every returned [`Head`] predicts in original target units.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, SplitDataset, TargetScaler, DEFAULT_SPLIT_RATIOS};
use crate::encoder::{attach_adapters, check_head, Encoder, Head, Module, ModuleKind};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

/// Learning rates and batch sizes reported for the original large-backbone
/// setup. Kept for reference; the desk-scale defaults below use plain SGD on
/// a small encoder and need larger steps.
pub mod reference {
    pub const MODULE_BATCH_SIZE: usize = 64;
    pub const MODULE_LEARNING_RATE: f64 = 5e-4;
    pub const MODULE_EPOCHS: usize = 80;
    pub const FINETUNE_BATCH_SIZE: usize = 32;
    pub const FINETUNE_LEARNING_RATE: f64 = 8e-5;
    pub const FINETUNE_EPOCHS: usize = 60;
    pub const FINETUNE_PATIENCE: usize = 10;
    pub const MULTITASK_BATCH_SIZE: usize = 16;
    pub const MULTITASK_EPOCHS: usize = 5;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub target_standardize: bool,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    /// Stage-1 defaults for training hub modules.
    pub fn module_training(seed: u64) -> Self {
        TrainConfig {
            batch_size: reference::MODULE_BATCH_SIZE,
            learning_rate: 0.05,
            max_epochs: reference::MODULE_EPOCHS,
            patience: 15,
            seed,
            target_standardize: true,
        }
    }

    /// Stage-2 defaults for downstream fine-tuning.
    pub fn finetuning(seed: u64) -> Self {
        TrainConfig {
            batch_size: reference::FINETUNE_BATCH_SIZE,
            learning_rate: 0.02,
            max_epochs: reference::FINETUNE_EPOCHS,
            patience: reference::FINETUNE_PATIENCE,
            seed,
            target_standardize: true,
        }
    }

    /// `max_epochs = 0` is allowed and skips gradient steps entirely.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidInput(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.patience == 0 {
            return Err(Error::InvalidInput("patience must be positive".into()));
        }
        if self.max_epochs > 0 && self.patience > self.max_epochs {
            return Err(Error::InvalidInput(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub module: Module,
    pub head: Head,
    /// Epoch 0 is the evaluation before any update.
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub scaler: TargetScaler,
}

impl TrainOutcome {
    pub fn best_val_mae(&self) -> f64 {
        self.history[self.best_epoch].val_mae
    }

    pub fn final_train_mae(&self) -> f64 {
        self.history[self.best_epoch].train_mae
    }
}

/// Writes history rows as `epoch,train_mae,val_mae`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_mae,val_mae\n");
    for r in history {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.train_mae, r.val_mae));
    }
    out
}

/// Mean absolute error of `head` on top of the encoder, in target units.
pub fn evaluate_mae(
    module: &Module,
    backbone: Option<&Module>,
    head: &Head,
    data: &LabeledDataset,
) -> Result<f64> {
    check_head(module, head)?;
    let preds = predict_all(module, backbone, head, data)?;
    crate::bench::metrics::mae(&preds, data.targets())
}

pub fn predict_all(
    module: &Module,
    backbone: Option<&Module>,
    head: &Head,
    data: &LabeledDataset,
) -> Result<Vec<f64>> {
    let encoder = Encoder::new(module, backbone)?;
    data.features()
        .iter()
        .map(|x| Ok(head.predict(&encoder.embed(x)?)))
        .collect()
}

pub fn embed_all(module: &Module, backbone: Option<&Module>, data: &LabeledDataset) -> Result<Vec<Vec<f64>>> {
    let encoder = Encoder::new(module, backbone)?;
    data.features().iter().map(|x| encoder.embed(x)).collect()
}

/// Least-squares head `argmin ‖E w + b − y‖²` over the given embeddings.
pub fn fit_head(embeddings: &[Vec<f64>], targets: &[f64]) -> Result<Head> {
    let m = embeddings.len();
    if m == 0 {
        return Err(Error::EmptyDataset);
    }
    let d = embeddings[0].len();
    let a = DMatrix::from_fn(m, d + 1, |i, j| if j < d { embeddings[i][j] } else { 1.0 });
    let b = DVector::from_column_slice(targets);
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::InvalidInput(format!("head least squares: {e}")))?;
    Ok(Head {
        weights: sol.rows(0, d).iter().copied().collect(),
        bias: sol[d],
    })
}

fn to_original_units(head: &Head, scaler: &TargetScaler) -> Head {
    Head {
        weights: head.weights.iter().map(|w| w * scaler.std).collect(),
        bias: head.bias * scaler.std + scaler.mean,
    }
}

fn check_input_dim(module: &Module, data: &SplitDataset) -> Result<()> {
    if module.config().input_dim != data.input_dim() {
        return Err(Error::ConfigMismatch(format!(
            "module expects inputs of dimension {}, data has {}",
            module.config().input_dim,
            data.input_dim()
        )));
    }
    Ok(())
}

/// One early-stopped SGD run over `trainable` (and its head).
fn fit(
    mut trainable: Module,
    backbone: Option<&Module>,
    data: &SplitDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_input_dim(&trainable, data)?;
    let scaler = if cfg.target_standardize {
        TargetScaler::fit(data.train.targets())?
    } else {
        TargetScaler::IDENTITY
    };
    let targets = scaler.standardize_all(data.train.targets());

    let mut head = {
        let embeddings = embed_all(&trainable, backbone, &data.train)?;
        fit_head(&embeddings, &targets)?
    };

    let evaluate = |module: &Module, head: &Head| -> Result<EpochRecord> {
        let original = to_original_units(head, &scaler);
        Ok(EpochRecord {
            epoch: 0,
            train_mae: evaluate_mae(module, backbone, &original, &data.train)?,
            val_mae: evaluate_mae(module, backbone, &original, &data.val)?,
        })
    };

    let mut history = vec![evaluate(&trainable, &head)?];
    let mut best = (0usize, trainable.params().to_vec(), head.clone());
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng_from(derive_seed(cfg.seed, &[epoch as u64])));
        for batch in order.chunks(cfg.batch_size) {
            let (grad, head_grad, loss) = {
                let encoder = Encoder::new(&trainable, backbone)?;
                let mut grad = vec![0.0; encoder.trainable_len()];
                let mut head_grad = vec![0.0; head.weights.len() + 1];
                let mut loss = 0.0;
                for &i in batch {
                    let trace = encoder.trace(&data.train.features()[i])?;
                    let residual = head.predict(&trace.embedding) - targets[i];
                    loss += residual * residual;
                    let scale = 2.0 * residual;
                    for (g, e) in head_grad.iter_mut().zip(&trace.embedding) {
                        *g += scale * e;
                    }
                    head_grad[head.weights.len()] += scale;
                    let g_embed: Vec<f64> = head.weights.iter().map(|w| scale * w).collect();
                    encoder.backward(&trace, &g_embed, &mut grad);
                }
                (grad, head_grad, loss)
            };
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for (p, g) in trainable.params_mut().iter_mut().zip(&grad) {
                *p -= step * g;
            }
            for (w, g) in head.weights.iter_mut().zip(&head_grad) {
                *w -= step * g;
            }
            head.bias -= step * head_grad[head.weights.len()];
        }

        let mut record = evaluate(&trainable, &head)?;
        record.epoch = epoch;
        history.push(record);
        if record.val_mae < history[best.0].val_mae {
            best = (epoch, trainable.params().to_vec(), head.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let (best_epoch, params, head) = best;
    let module = trainable.with_params(params)?;
    Ok(TrainOutcome {
        module,
        head: to_original_units(&head, &scaler),
        history,
        best_epoch,
        scaler,
    })
}

/// Trains a hub module from `init`. Full modules update every backbone
/// weight; adapter modules attach fresh adapters to the frozen `init` and
/// update only those.
pub fn train_module(
    init: &Module,
    data: &SplitDataset,
    cfg: &TrainConfig,
    kind: ModuleKind,
) -> Result<TrainOutcome> {
    if init.kind() != ModuleKind::Full {
        return Err(Error::ConfigMismatch("module training starts from a full backbone".into()));
    }
    check_input_dim(init, data)?;
    let mut outcome = match kind {
        ModuleKind::Full => fit(init.clone(), None, data, cfg)?,
        ModuleKind::Adapter => {
            let adapters = attach_adapters(init, init.config(), cfg.seed)?;
            fit(adapters, Some(init), data, cfg)?
        }
    };
    outcome.module.meta.task_name = data.name().to_string();
    outcome.module.meta.created_from_seed = cfg.seed;
    outcome.module.meta.train_mae = outcome.final_train_mae();
    outcome.module.meta.notes = format!("trained {kind} module, best epoch {}", outcome.best_epoch);
    Ok(outcome)
}

/// Fine-tunes a (typically composed) module on a downstream task. The head
/// starts from the closed-form least-squares fit on train embeddings.
pub fn finetune(
    composed: &Module,
    backbone: Option<&Module>,
    data: &SplitDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    fit(composed.clone(), backbone, data, cfg)
}

/// Trains the backbone on a pooled auxiliary task and discards the head.
pub fn surrogate_pretrain(init: &Module, pool: &LabeledDataset, cfg: &TrainConfig) -> Result<Module> {
    if cfg.max_epochs == 0 {
        return Ok(init.clone());
    }
    let split = pool.split(DEFAULT_SPLIT_RATIOS, derive_seed(cfg.seed, &[0x9007]))?;
    let mut module = fit(init.clone(), None, &split, cfg)?.module;
    module.meta.notes = format!("surrogate-pretrained on `{}`", pool.name);
    Ok(module)
}

/// Shared-backbone multi-task training with one head per task. Each epoch
/// visits every train row of every task once in shuffled order, so tasks
/// are sampled in proportion to their size. Early stopping tracks the mean
/// standardized validation MAE across tasks.
pub fn train_multitask(init: &Module, tasks: &[SplitDataset], cfg: &TrainConfig) -> Result<Module> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for t in tasks {
        check_input_dim(init, t)?;
    }
    let mut backbone = init.clone();
    let scalers: Vec<TargetScaler> = tasks
        .iter()
        .map(|t| TargetScaler::fit(t.train.targets()))
        .collect::<Result<_>>()?;
    let targets: Vec<Vec<f64>> = tasks
        .iter()
        .zip(&scalers)
        .map(|(t, s)| s.standardize_all(t.train.targets()))
        .collect();
    let mut heads: Vec<Head> = tasks
        .iter()
        .zip(&targets)
        .map(|(t, y)| fit_head(&embed_all(&backbone, None, &t.train)?, y))
        .collect::<Result<_>>()?;

    let val_score = |backbone: &Module, heads: &[Head]| -> Result<f64> {
        let mut total = 0.0;
        for ((t, s), h) in tasks.iter().zip(&scalers).zip(heads) {
            total += evaluate_mae(backbone, None, &to_original_units(h, s), &t.val)? / s.std;
        }
        Ok(total / tasks.len() as f64)
    };

    let mut rows: Vec<(usize, usize)> = tasks
        .iter()
        .enumerate()
        .flat_map(|(k, t)| (0..t.train.len()).map(move |i| (k, i)))
        .collect();
    let mut best = (val_score(&backbone, &heads)?, backbone.params().to_vec());
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        rows.shuffle(&mut rng_from(derive_seed(cfg.seed, &[0x3717, epoch as u64])));
        for batch in rows.chunks(cfg.batch_size) {
            let mut head_grads: Vec<Vec<f64>> = heads.iter().map(|h| vec![0.0; h.weights.len() + 1]).collect();
            let (grad, loss) = {
                let encoder = Encoder::new(&backbone, None)?;
                let mut grad = vec![0.0; encoder.trainable_len()];
                let mut loss = 0.0;
                for &(k, i) in batch {
                    let trace = encoder.trace(&tasks[k].train.features()[i])?;
                    let head = &heads[k];
                    let residual = head.predict(&trace.embedding) - targets[k][i];
                    loss += residual * residual;
                    let scale = 2.0 * residual;
                    let hg = &mut head_grads[k];
                    for (g, e) in hg.iter_mut().zip(&trace.embedding) {
                        *g += scale * e;
                    }
                    hg[head.weights.len()] += scale;
                    let g_embed: Vec<f64> = head.weights.iter().map(|w| scale * w).collect();
                    encoder.backward(&trace, &g_embed, &mut grad);
                }
                (grad, loss)
            };
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for (p, g) in backbone.params_mut().iter_mut().zip(&grad) {
                *p -= step * g;
            }
            for (head, hg) in heads.iter_mut().zip(&head_grads) {
                let d = head.weights.len();
                for (w, g) in head.weights.iter_mut().zip(hg) {
                    *w -= step * g;
                }
                head.bias -= step * hg[d];
            }
        }
        let score = val_score(&backbone, &heads)?;
        if score < best.0 {
            best = (score, backbone.params().to_vec());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let mut module = backbone.with_params(best.1)?;
    module.meta.notes = format!("multi-task trained on {} tasks", tasks.len());
    Ok(module)
}
