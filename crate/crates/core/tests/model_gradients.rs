mod common;

use common::{gradcheck_batch, gradcheck_model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semst::diffcore::check_graph;
use semst::model::Objective;

#[test]
fn full_model_losses_pass_gradient_check() {
    let [a, b] = gradcheck_batch();
    for obj in Objective::ALL {
        let m = gradcheck_model(obj);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lg = m.loss_graph(&[&a, &b], 0.5, &mut rng).unwrap();
        for (name, &leaf) in m.params.names().iter().zip(&lg.params) {
            let err = check_graph(&mut lg.graph, lg.loss, &[leaf], 1e-5).unwrap();
            assert!(err < 1e-4, "{obj} {name}: max relative error {err:e}");
        }
    }
}
