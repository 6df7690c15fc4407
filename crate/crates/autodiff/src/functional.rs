//! Composite differentiable functions built from graph primitives.

use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor on the product of norms in a cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

/// `uᵀv / max(‖u‖‖v‖, 1e-12)` for two rank-1 nodes of equal length.
pub fn cosine_similarity<T: Scalar>(g: &mut Graph<T>, u: NodeId, v: NodeId) -> NodeId {
    assert!(
        g.shape(u).len() == 1 && g.shape(u) == g.shape(v),
        "cosine_similarity: expected equal-length vectors, got {:?} and {:?}",
        g.shape(u),
        g.shape(v)
    );
    let uv = g.mul(u, v);
    let dot = g.sum(uv);
    let nu = g.l2_norm_last(u);
    let nv = g.l2_norm_last(v);
    let denom = g.mul(nu, nv);
    let denom = g.clamp_min(denom, T::of(COSINE_EPS));
    g.div(dot, denom)
}

/// All-pairs cosine similarity between the rows of `z: [n, d]`, giving `[n, n]`.
pub fn pairwise_cosine<T: Scalar>(g: &mut Graph<T>, z: NodeId) -> NodeId {
    let s = g.shape(z).to_vec();
    assert_eq!(s.len(), 2, "pairwise_cosine: expected [n, d], got {s:?}");
    let n = s[0];
    let zt = g.transpose(z);
    let dots = g.matmul(z, zt);
    let norms = g.l2_norm_last(z);
    let col = g.reshape(norms, &[n, 1]);
    let row = g.reshape(norms, &[1, n]);
    let denom = g.matmul(col, row);
    let denom = g.clamp_min(denom, T::of(COSINE_EPS));
    g.div(dots, denom)
}

/// Plain-value cosine similarity with the same guard.
pub fn cosine_value<T: Scalar>(u: &[T], v: &[T]) -> f64 {
    let mut g = Graph::<T>::new();
    let a = g.constant(Tensor::from_vec(&[u.len()], u.to_vec()));
    let b = g.constant(Tensor::from_vec(&[v.len()], v.to_vec()));
    let c = cosine_similarity(&mut g, a, b);
    g.value(c).item().as_f64()
}
