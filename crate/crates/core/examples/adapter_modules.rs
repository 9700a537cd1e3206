//! Trains adapter modules on a frozen backbone and composes them for a
//! downstream task. Adapters pay off on wide layers; at the narrow widths
//! used here they carry more parameters than a full module.
//!
//! ```text
//! cargo run --release --example adapter_modules
//! ```

use moma::amc::{amc_run, AmcConfig};
use moma::bench::{generate_task_family, TaskFamilyConfig};
use moma::encoder::{init_backbone, EncoderConfig, ModuleKind};
use moma::trainer::{evaluate_mae, finetune, train_module, train_multitask, TrainConfig};

fn main() -> moma::Result<()> {
    let family = generate_task_family(&TaskFamilyConfig {
        samples_upstream: 800,
        ..TaskFamilyConfig::default()
    })?;
    let encoder = EncoderConfig::new(family.config.input_dim, vec![32], 8);
    println!(
        "parameters per module: full {}, adapter {}",
        encoder.param_count(ModuleKind::Full),
        encoder.param_count(ModuleKind::Adapter)
    );
    let backbone = train_multitask(
        &init_backbone(&encoder, 1)?,
        &family.pretrain_domains,
        &TrainConfig::module_training(1),
    )?;

    let mut adapters = vec![];
    for (i, task) in family.upstream.iter().enumerate() {
        let out = train_module(&backbone, task, &TrainConfig::module_training(200 + i as u64), ModuleKind::Adapter)?;
        let mut m = out.module;
        m.meta.id = format!("{}-adapter", task.name());
        adapters.push(m);
    }

    let task = family.downstream_split(1, 0)?;
    let cfg = AmcConfig::with_kind(ModuleKind::Adapter);
    let result = amc_run(&adapters, Some(&backbone), &task, &cfg)?;
    println!("selected {:?}", result.selected_ids);

    let tuned = finetune(&result.composed, Some(&backbone), &task, &TrainConfig::finetuning(5))?;
    println!(
        "{}: test MAE {:.4} with composed adapters",
        task.name(),
        evaluate_mae(&tuned.module, Some(&backbone), &tuned.head, &task.test)?
    );
    Ok(())
}
