mod common;

use common::{model_gradcheck, op_gradchecks, rand_tensor, MODEL_TOL, OP_TOL};
use icrcaps::network::{Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let results = op_gradchecks(&mut rng);
    assert!(results.len() >= 25);
    for (name, r) in results {
        assert!(r.passes(OP_TOL), "{name}: {r:?}");
    }
}

#[test]
fn desk_model_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = Model::build(ModelConfig::desk(4), 5).unwrap();
    let x = rand_tensor(&mut rng, &[2, 1, 8, 8]).map(|v| v.abs());
    let r = model_gradcheck(&model, &x, &[1, 3], 3, &mut rng);
    assert!(r.passes(MODEL_TOL), "{r:?}");
}
