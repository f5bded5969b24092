//! Hard Gumbel-Softmax draws over [keep, mask] logits. The one-hot share
//! of "mask" matches its softmax probability at any temperature; only the
//! soft relaxation sharpens or flattens.
//!
//!     cargo run --release --example gumbel_softmax

use tokenmask::masking::{gumbel_softmax, mask_probability};
use tokenmask::rng;
use tokenmask::tensor::Tensor;

fn main() -> tokenmask::Result<()> {
    let rows = 50_000;
    let logits = [0.3, -0.9];
    let data: Vec<f64> = (0..rows).flat_map(|_| logits).collect();
    let batch = Tensor::from_vec(rows, 2, data);
    let mut r = rng::stream(0, "example/gumbel");
    println!("logits {logits:?}");
    for temperature in [0.25, 1.0, 4.0] {
        let sample = gumbel_softmax(&batch, temperature, true, &mut r)?;
        let wins = (0..rows).filter(|&i| sample.hard.get(i, 1) == 1.0).count();
        let soft_mean = (0..rows).map(|i| sample.soft.get(i, 1)).sum::<f64>() / rows as f64;
        println!(
            "tau {temperature:<4} mask share {:.4}  softmax {:.4}  mean soft mask weight {:.4}",
            wins as f64 / rows as f64,
            mask_probability(&logits, 1.0),
            soft_mean
        );
    }
    Ok(())
}
