//! Runs every experiment suite on the default synthetic family and prints
//! the headline numbers: average ranks, ablation win rates, few-shot
//! margins and the hub-expansion correlation.
//!
//! ```text
//! cargo run --release --example benchmark_suite [-- config.toml [out_dir]]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use moma::bench::experiments::{normalized_margin, win_fraction};
use moma::bench::{BenchConfig, Lab};

fn main() -> moma::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let config = match args.first() {
        Some(path) => BenchConfig::from_toml(&std::fs::read_to_string(path)?)?,
        None => BenchConfig::default(),
    };
    let out = args.get(1).map(PathBuf::from);

    let t = Instant::now();
    let lab = Lab::new(config.clone())?;
    let (main, _) = lab.run_main()?;
    println!("main ({:.0?})", t.elapsed());
    for a in main.summary().aggregates {
        println!(
            "  {:<14} rank {:.3} ± {:.3}  mean MAE {:.4}  normalized {:.4}",
            a.method, a.average_rank, a.rank_std, a.mean_test_mae, a.mean_normalized_mae
        );
    }

    let t = Instant::now();
    let ablation = lab.run_ablation()?;
    println!("ablation ({:.0?})", t.elapsed());
    for variant in ["select_average", "all_average", "random_selection"] {
        let f = win_fraction(&ablation, "full", "amc", variant).unwrap_or(f64::NAN);
        println!("  amc <= {variant:<16} on {:.0}% of tasks", 100.0 * f);
    }

    let t = Instant::now();
    let fewshot = lab.run_fewshot()?;
    println!("few-shot ({:.0?})", t.elapsed());
    for size in &config.fewshot_sizes {
        let m = normalized_margin(&fewshot, &size.to_string(), "backbone_ft", "moma_full").unwrap_or(f64::NAN);
        println!("  train size {size:<5} margin {m:+.4}");
    }

    let t = Instant::now();
    let continual = Lab::continual(config)?.run_continual()?;
    println!(
        "continual ({:.0?}): {} of {} cells affected, pearson {:?}",
        t.elapsed(),
        continual.rows.len(),
        continual.cells_examined,
        continual.pearson
    );

    if let Some(dir) = out {
        for path in [main.write(&dir)?, ablation.write(&dir)?, fewshot.write(&dir)?, continual.write(&dir)?].concat() {
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
