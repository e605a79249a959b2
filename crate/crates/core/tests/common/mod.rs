#![allow(dead_code)]

use saml_core::numerics::{Graph, NodeId, ParamId, ParamStore};

/// Central finite difference step.
pub const FD_EPS: f32 = 1e-3;

/// Largest per-tensor relative error `‖fd − analytic‖ / max(‖fd‖, ‖analytic‖)`
/// over `ids`, where the analytic gradient comes from `backward` on
/// `graph_loss` and the finite differences from the same FP32 graph.
pub fn max_relative_error<F>(store: &mut ParamStore, ids: &[ParamId], graph_loss: F) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> NodeId,
{
    let fd_loss = |s: &ParamStore| {
        let mut g = Graph::new();
        let l = graph_loss(&mut g, s);
        g.value(l).data()[0] as f64
    };
    max_relative_error_with(store, ids, &graph_loss, fd_loss)
}

/// As [`max_relative_error`], with finite differences taken on an
/// independently written `fd_loss` (typically an f64 evaluation of the same
/// function, free of FP32 round-off).
pub fn max_relative_error_with<F, O>(store: &mut ParamStore, ids: &[ParamId], graph_loss: F, fd_loss: O) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> NodeId,
    O: Fn(&ParamStore) -> f64,
{
    store.zero_grads();
    let mut g = Graph::new();
    let l = graph_loss(&mut g, store);
    g.backward(l, store).expect("backward");
    let analytic: Vec<Vec<f32>> = ids.iter().map(|&id| store.get(id).grad.data().to_vec()).collect();
    store.zero_grads();

    let mut worst = 0.0f64;
    for (&id, an) in ids.iter().zip(&analytic) {
        let mut diff = 0.0f64;
        let mut norm_fd = 0.0f64;
        let mut norm_an = 0.0f64;
        for i in 0..an.len() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + FD_EPS;
            let plus = fd_loss(store);
            store.get_mut(id).value.data_mut()[i] = orig - FD_EPS;
            let minus = fd_loss(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            // the perturbation actually applied after FP32 rounding
            let h = ((orig + FD_EPS) as f64) - ((orig - FD_EPS) as f64);
            let fd = (plus - minus) / h;
            diff += (fd - an[i] as f64).powi(2);
            norm_fd += fd * fd;
            norm_an += (an[i] as f64).powi(2);
        }
        let denom = norm_fd.sqrt().max(norm_an.sqrt()).max(1e-12);
        worst = worst.max(diff.sqrt() / denom);
    }
    worst
}
