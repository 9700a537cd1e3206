//! Writes a synthetic task family as CSV files for use with the `moma`
//! binary: one file per upstream task and one per downstream task, each
//! with a `split` column.
//!
//! ```text
//! cargo run --example export_family -- out_dir [seed]
//! ```

use std::path::PathBuf;

use moma::bench::{generate_task_family, TaskFamilyConfig};
use moma::dataset::write_split_csv;

fn main() -> moma::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "family".into()));
    let seed = args.next().map(|s| s.parse().expect("seed must be an integer")).unwrap_or(42);
    std::fs::create_dir_all(&dir)?;

    let family = generate_task_family(&TaskFamilyConfig {
        seed,
        ..TaskFamilyConfig::default()
    })?;
    for task in &family.upstream {
        let path = dir.join(format!("{}.csv", task.name()));
        write_split_csv(&path, task)?;
        println!("{}", path.display());
    }
    for t in 0..family.downstream.len() {
        let task = family.downstream_split(t, 0)?;
        let path = dir.join(format!("{}.csv", task.name()));
        write_split_csv(&path, &task)?;
        println!("{}", path.display());
    }
    Ok(())
}
