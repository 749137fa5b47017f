//! Build a small graph by hand, run backprop and compare against central
//! differences.
//!
//!     cargo run --example gradient_check

use semst::diffcore::{gradient_check, Graph, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.8, 0.5, 0.1, -0.4])?;
    let w = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?;

    let mut g = Graph::new();
    let xi = g.leaf(x.clone(), true);
    let wi = g.constant(w.clone());
    let h = g.matmul(xi, wi)?;
    let h = g.tanh(h)?;
    let lp = g.log_softmax(h, 0.5)?;
    let loss = g.nll(lp, vec![1, 3], vec![0.5, 0.5])?;
    let grads = g.backward(loss)?;
    println!("loss {:.6}", g.val(loss).data()[0]);
    println!("d loss / d x = {:?}", grads.get(xi).map(|t| t.data().to_vec()));

    let err = gradient_check(
        |g, x| {
            let wi = g.constant(w.clone());
            let h = g.matmul(x, wi)?;
            let h = g.tanh(h)?;
            let lp = g.log_softmax(h, 0.5)?;
            g.nll(lp, vec![1, 3], vec![0.5, 0.5])
        },
        &x,
        1e-5,
    )?;
    println!("max relative error against finite differences: {err:.2e}");
    Ok(())
}
