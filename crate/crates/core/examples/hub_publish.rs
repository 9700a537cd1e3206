//! Pre-trains a small backbone, trains one full module per upstream task
//! and publishes them to a hub directory, then lists and checks the hub.
//!
//! ```text
//! cargo run --release --example hub_publish [-- hub_dir]
//! ```

use moma::bench::{generate_task_family, TaskFamilyConfig};
use moma::encoder::{init_backbone, EncoderConfig, ModuleKind};
use moma::hub::Hub;
use moma::trainer::{train_module, train_multitask, TrainConfig};

fn main() -> moma::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("moma-hub-{}", std::process::id())));

    let family = generate_task_family(&TaskFamilyConfig {
        n_clusters: 2,
        tasks_per_cluster: 2,
        samples_upstream: 600,
        ..TaskFamilyConfig::default()
    })?;

    let encoder = EncoderConfig::new(family.config.input_dim, vec![32], 8);
    let backbone = train_multitask(
        &init_backbone(&encoder, 7)?,
        &family.pretrain_domains,
        &TrainConfig::module_training(7),
    )?;

    let mut hub = Hub::init(&dir)?;
    for task in &family.upstream {
        let out = train_module(&backbone, task, &TrainConfig::module_training(11), ModuleKind::Full)?;
        let id = hub.add(&out.module, &out.head)?;
        println!("{id}: best epoch {}, val MAE {:.4}", out.best_epoch, out.best_val_mae());
    }

    println!("\n{} modules in {}", hub.len(), hub.root().display());
    for e in hub.entries() {
        println!("  {:<36} task {:<10} train MAE {:.4}", e.id, e.task_name, e.train_mae);
    }
    let report = hub.fsck()?;
    println!("fsck clean: {}", report.is_clean());
    Ok(())
}
