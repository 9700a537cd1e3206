//! Composes hub modules for a downstream task and compares fine-tuning the
//! composition against fine-tuning the bare backbone.
//!
//! ```text
//! cargo run --release --example compose_and_finetune
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
    let backbone = train_multitask(
        &init_backbone(&encoder, 1)?,
        &family.pretrain_domains,
        &TrainConfig::module_training(1),
    )?;

    let mut modules = vec![];
    for (i, task) in family.upstream.iter().enumerate() {
        let mut m = train_module(&backbone, task, &TrainConfig::module_training(100 + i as u64), ModuleKind::Full)?.module;
        m.meta.id = task.name().to_string();
        modules.push(m);
    }

    let task = family.downstream_split(0, 0)?;
    println!("downstream task {} (cluster {})", task.name(), family.downstream_specs[0].cluster);
    let result = amc_run(&modules, None, &task, &AmcConfig::default())?;
    for (id, w) in result.module_ids.iter().zip(result.weights.as_slice()) {
        if *w > 1e-3 {
            println!("  {id:<10} weight {w:.3}");
        }
    }
    println!("  proxy error {:.4}", result.proxy_error);

    let cfg = TrainConfig::finetuning(3);
    let composed = finetune(&result.composed, None, &task, &cfg)?;
    let plain = finetune(&backbone, None, &task, &cfg)?;
    println!(
        "test MAE  composed {:.4}  backbone {:.4}",
        evaluate_mae(&composed.module, None, &composed.head, &task.test)?,
        evaluate_mae(&plain.module, None, &plain.head, &task.test)?
    );
    Ok(())
}
