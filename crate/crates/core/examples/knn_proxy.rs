//! Scores two hand-built "modules" by leave-one-out kNN on their
//! embeddings, then finds the simplex weights that best blend the two
//! proxy predictions.
//!
//! ```text
//! cargo run --example knn_proxy
//! ```

use moma::amc::{loo_knn, optimize_weights, PredictionMatrix};
use moma::numerics::Matrix;

fn main() -> moma::Result<()> {
    // Targets depend on the angle of a point on the unit circle.
    let n = 40;
    let angles: Vec<f64> = (0..n).map(|i| i as f64 * std::f64::consts::TAU / n as f64).collect();
    let y: Vec<f64> = angles.iter().map(|a| a.sin()).collect();

    // Module A embeds the angle faithfully, module B scrambles half of it.
    let good: Vec<Vec<f64>> = angles.iter().map(|a| vec![a.cos(), a.sin(), 0.1]).collect();
    let poor: Vec<Vec<f64>> = angles
        .iter()
        .enumerate()
        .map(|(i, a)| vec![a.cos(), (3.0 * i as f64).sin(), 1.0])
        .collect();

    let k = 5;
    let a = loo_knn(&good, &y, k)?;
    let b = loo_knn(&poor, &y, k)?;
    println!("row 0 neighbors under module A: {:?}", a.neighbors[0]);
    println!("row 0 neighbors under module B: {:?}", b.neighbors[0]);

    let mse = |p: &[f64]| p.iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n as f64;
    println!("proxy MSE  A {:.4}  B {:.4}", mse(&a.predictions), mse(&b.predictions));

    let p = PredictionMatrix {
        values: Matrix::from_columns(&[a.predictions, b.predictions])?,
        module_ids: vec!["A".into(), "B".into()],
    };
    let (w, err) = optimize_weights(&p, &y)?;
    for (id, w) in p.module_ids.iter().zip(w.as_slice()) {
        println!("weight {id} = {w:.4}");
    }
    println!("blended proxy MSE {err:.4}");
    Ok(())
}
