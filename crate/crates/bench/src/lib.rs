//! Fixtures shared by the benchmarks.

use saml_core::adapters::{SamlLayer, SamlShape};
use saml_core::numerics::{Component, ParamStore, SeededRng, Tensor};

/// A full-mode mixture layer with random (non-zero) expert weights.
pub fn random_layer(d: usize, k: usize, n: usize, r: usize, seed: u64) -> (ParamStore, SamlLayer) {
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::new();
    let base = store.add("w0", Component::AttentionBase, Tensor::randn(&[d, k], 0.5, &mut rng), false);
    let shape = SamlShape {
        d,
        k,
        n_experts: n,
        rank: r,
        alpha: r as f32,
    };
    let layer = SamlLayer::with_router(&mut store, "layer", base, shape, &mut rng).expect("valid shape");
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = Tensor::randn(&shape, 0.3, &mut rng);
    }
    (store, layer)
}
