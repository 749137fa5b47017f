//! Spectral similarity and Procrustes + CSLS retrieval on a rotated copy of
//! a random embedding space, then on a noisy copy.
//!
//!     cargo run --release --example alignment

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semst::analysis::{align, eigenvector_similarity, hubness_skewness, precision_at_k, random_orthogonal};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (n, d) = (300, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect()).collect();
    let r = random_orthogonal(d, 2);
    let rotated: Vec<Vec<f64>> =
        x.iter().map(|v| (&r * nalgebra::DVector::from_column_slice(v)).iter().copied().collect()).collect();
    let train: Vec<(usize, usize)> = (0..d).map(|i| (i, i)).collect();
    let eval: Vec<(usize, usize)> = (d..n).map(|i| (i, i)).collect();

    for noise in [0.0, 0.5, 1.0] {
        let y: Vec<Vec<f64>> = rotated
            .iter()
            .map(|v| v.iter().map(|a| a + noise * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect())
            .collect();
        let a = align(&x, &y, &train, &eval, 10)?;
        println!(
            "noise {noise:.1}: eig-sim {:8.4}  P@1 {:5.1}%  P@5 {:5.1}%  ||W-R|| {:.2e}",
            eigenvector_similarity(&x, &y)?,
            100.0 * precision_at_k(&a, 1)?,
            100.0 * precision_at_k(&a, 5)?,
            (&a.map.w - &r).norm()
        );
    }
    println!("hubness skewness (k=10): {:.3}", hubness_skewness(&x, 10)?);
    Ok(())
}
