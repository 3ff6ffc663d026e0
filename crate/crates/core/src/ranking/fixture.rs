//! Small hand-built ranking worlds for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::tensor::Tensor;
use crate::rqvae::SemanticId;
use crate::saviorenc::EmbeddingTable;
use crate::synthgen::{Impression, InteractionLog, User};

use super::data::RankingData;

pub const N_ITEMS: usize = 9;
pub const N_USERS: usize = 3;
pub const LAYERS: usize = 3;
pub const CODES: usize = 8;
pub const D_Z: usize = 4;

/// Mixed labels, some empty sequences, two rounds (the second one evaluates).
pub fn world(seed: u64) -> (RankingData, EmbeddingTable) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut impressions = Vec::new();
    for t in 0..2u64 {
        for k in 0..24u32 {
            let len = rng.random_range(0..5usize);
            impressions.push(Impression {
                user_id: k % N_USERS as u32,
                item_id: rng.random_range(0..N_ITEMS as u32),
                clicked: k % 3 == 0,
                sequence_snapshot: (0..len).map(|_| rng.random_range(0..N_ITEMS as u32)).collect(),
                base_pctr: rng.random_range(0.05..0.95),
                true_pctr: 0.5,
                timestamp: t,
            });
        }
    }
    let log = InteractionLog { impressions };
    let users: Vec<User> = (0..N_USERS as u32)
        .map(|u| User {
            user_id: u,
            interest: vec![1.0, 0.0],
            profile: vec![u % 2],
        })
        .collect();
    let codes = (0..N_ITEMS)
        .map(|_| SemanticId {
            codes: (0..LAYERS).map(|_| rng.random_range(0..CODES as u32)).collect(),
        })
        .collect();
    let data = RankingData::build(&log, &users, &[2], codes, N_ITEMS, 1, None).unwrap();
    let z: Vec<f64> = (0..N_ITEMS * D_Z).map(|_| StandardNormal.sample(&mut rng)).collect();
    let table = EmbeddingTable::new(Tensor::matrix(N_ITEMS, D_Z, z).unwrap());
    (data, table)
}

/// Zero RQ codebooks of the fixture's shape.
pub fn rq_books(d: usize) -> Vec<Tensor> {
    vec![Tensor::zeros(&[CODES, d]); LAYERS]
}
