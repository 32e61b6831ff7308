use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ContextSet;
use crate::par;

/// Uniform sample without replacement per test id. Test id `t` draws from
/// stream `t` of a ChaCha8 generator seeded with `seed`, so contexts are
/// independent of evaluation order.
pub fn random_retrieve(index_size: usize, test_size: usize, ice_num: usize, seed: u64) -> ContextSet {
    let k = ice_num.min(index_size);
    let contexts = par::map_range(test_size, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        rand::seq::index::sample(&mut rng, index_size, k).into_vec()
    });
    ContextSet::instance_level(ice_num, contexts)
}
