mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semst::diffcore::{gradient_check, DiffError, Graph, Tensor};

#[test]
fn every_primitive_passes_gradient_check_on_ten_points() {
    for (name, shape, build) in common::primitive_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..10 {
            let x = common::rand_tensor(&mut rng, &shape, 1.0);
            let err = gradient_check(|g, x| build(g, x), &x, 1e-5).unwrap();
            assert!(err < 1e-6, "{name} trial {trial}: relative error {err:e}");
        }
    }
}

#[test]
fn sum_of_squares_is_exact_up_to_roundoff() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = common::rand_tensor(&mut rng, &[4, 5], 2.0);
    let err = gradient_check(
        |g, x| {
            let y = g.mul(x, x)?;
            g.sum(y)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err:e}");
}

#[test]
fn norm_at_origin_is_rejected() {
    let x = Tensor::zeros(&[1, 3]);
    let res = gradient_check(
        |g, x| {
            let sq = g.mul(x, x)?;
            let s = g.sum(sq)?;
            let l = g.log(s)?;
            let half = g.scale(l, 0.5)?;
            g.exp(half)
        },
        &x,
        1e-5,
    );
    assert!(matches!(res, Err(DiffError::NonFinite { .. })), "{res:?}");
}

#[test]
fn forward_is_bit_identical_across_rebinding() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (_, shape, build) = common::primitive_cases()
        .into_iter()
        .find(|(name, _, _)| *name == "lstm_cell_gates")
        .unwrap();
    let x0 = common::rand_tensor(&mut rng, &shape, 1.0);
    let mut g = Graph::new();
    let x = g.input(&shape, true);
    let out = build(&mut g, x).unwrap();
    g.forward(&[(x, x0.clone())]).unwrap();
    let first = g.val(out).item().to_bits();
    g.forward(&[(x, x0)]).unwrap();
    assert_eq!(first, g.val(out).item().to_bits());
}
