//! Random finite-difference checks of the closed-form gradient.

use factlab::corpus::{ClassId, EmbeddingTable, TokenRole};
use factlab::grad::{fd_check, FD_TOLERANCE};
use factlab::model::{init_params, ModelParams, ModelSpec, Sequence};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const FD_DIM: usize = 16;
pub const FD_WIDTH: usize = 4;
pub const FD_STEP: f64 = 1e-5;

/// A three-token vocabulary (context, subject, relation) on random basis
/// coordinates, a random model and a random `[o]`, `[o s]` or `[o s r]`
/// input with a label among the three classes.
pub fn fd_instance(seed: u64) -> (ModelParams, Sequence, ClassId) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<usize> = (0..FD_DIM).collect();
    coords.shuffle(&mut rng);
    coords.truncate(3);
    let roles = vec![TokenRole::Context, TokenRole::Subject(0), TokenRole::Relation(0)];
    let table = EmbeddingTable::from_assignment(FD_DIM, roles, coords.clone()).expect("3 tokens fit in 16 dims");
    let len = rng.gen_range(1..=3);
    let context: Vec<usize> = (0..len).collect();
    let label = coords[rng.gen_range(0..3)];
    let spec = ModelSpec {
        dim: FD_DIM,
        m: FD_WIDTH,
        lambda: rng.gen_range(0.5..10.0),
    };
    let params = init_params(&spec, rng.gen_range(0.05..0.5), rng.gen()).expect("valid spec");
    (params, table.sequence(&context), label)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckSummary {
    pub instances: usize,
    pub max_rel_err: f64,
    pub filtered_max_rel_err: f64,
    pub n_kinks: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn grad_check(seed: u64, instances: usize) -> GradCheckSummary {
    let mut s = GradCheckSummary {
        instances,
        max_rel_err: 0.0,
        filtered_max_rel_err: 0.0,
        n_kinks: 0,
        tolerance: FD_TOLERANCE,
        passed: true,
    };
    for i in 0..instances as u64 {
        let (p, x, y) = fd_instance(seed.wrapping_mul(1_000_003).wrapping_add(i));
        let r = fd_check(&p, &x, y, FD_STEP);
        s.max_rel_err = s.max_rel_err.max(r.max_rel_err);
        s.filtered_max_rel_err = s.filtered_max_rel_err.max(r.filtered_max_rel_err);
        s.n_kinks += r.n_kinks;
        s.passed &= !r.flagged;
    }
    s
}
