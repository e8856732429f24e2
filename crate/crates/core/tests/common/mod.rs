#![allow(dead_code, clippy::needless_range_loop)]

pub mod exact;
pub mod reference;

use pointssm_core::nn::ParamStore;
use pointssm_core::Tensor;
use rand::Rng;

/// Adds uniform noise of the given amplitude to every parameter, so tests do
/// not run at the identity-like initial values.
pub fn perturb(store: &mut ParamStore, rng: &mut impl Rng, amp: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get(id);
        let noisy = Tensor::from_fn(t.shape().to_vec(), |i| {
            t.data()[i] + rng.gen_range(-amp..amp)
        });
        store.set(id, noisy).unwrap();
    }
}
