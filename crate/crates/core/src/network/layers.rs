//! Building blocks of the reconstruction network.

use rand::Rng;

use crate::attention::{AttentionKind, AttentionLayer, Neighborhood};
use crate::diffcore::{Activation, Bound, Graph, Linear, Mlp, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Position-aware aggregation `g_i = Σ_j Ω(q_i - p_j) ⊙ f_j` over the
/// neighbours of each query. Serves as both the transfer layer between point
/// sets and the indicator in front of the occupancy head.
#[derive(Clone, Debug, PartialEq)]
pub struct IndicatorLayer {
    pub omega: Mlp,
    /// Offsets are multiplied by this before entering Ω.
    pub offset_scale: f64,
}

impl IndicatorLayer {
    /// `Ω: 3 -> d -> d`.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, offset_scale: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            omega: Mlp::new(store, &format!("{name}.omega"), &[3, dim, dim], Activation::None, rng)?,
            offset_scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.omega.out_dim()
    }

    /// `nbr` anchors are the queries; its offsets are `p_j - q_i`.
    pub fn forward(&self, graph: &mut Graph, params: &Bound, features: Var, nbr: &Neighborhood) -> Result<Var> {
        let shape = graph.shape(features).to_vec();
        if shape.len() != 2 || shape[1] != self.dim() {
            return Err(Error::shape("indicator features", &shape, &[nbr.k(), self.dim()]));
        }
        if nbr.max_index().is_some_and(|m| m >= shape[0]) {
            return Err(Error::invalid("indicator neighbour index past the feature rows"));
        }
        let (q, k, d) = (nbr.anchors(), nbr.k(), self.dim());
        let s = -self.offset_scale;
        let rel: Vec<f64> = nbr
            .offsets()
            .iter()
            .flat_map(|o| [s * o[0], s * o[1], s * o[2]])
            .collect();
        let rel = graph.constant(Tensor::new([q * k, 3], rel)?);
        let w = self.omega.forward(graph, params, rel)?;
        let f = graph.gather(features, nbr.indices())?;
        let h = graph.hadamard(w, f)?;
        let h = graph.reshape(h, &[q, k, d])?;
        graph.sum_axis(h, 1)
    }
}

/// Linear in, attention, relu, linear out; residual when widths agree.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorformerBlock {
    pub lin_in: Linear,
    pub attention: AttentionLayer,
    pub lin_out: Linear,
}

impl TensorformerBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        kind: AttentionKind,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            lin_in: Linear::new(store, &format!("{name}.in"), in_dim, out_dim, rng),
            attention: AttentionLayer::new(store, &format!("{name}.attn"), kind, out_dim, rng)?,
            lin_out: Linear::new(store, &format!("{name}.out"), out_dim, out_dim, rng),
        })
    }

    pub fn residual(&self) -> bool {
        self.lin_in.in_dim == self.lin_out.out_dim
    }

    pub fn forward(&self, graph: &mut Graph, params: &Bound, x: Var, nbr: &Neighborhood) -> Result<Var> {
        let h = self.lin_in.forward(graph, params, x)?;
        let a = self.attention.forward(graph, params, h, nbr)?;
        let a = graph.relu(a);
        let y = self.lin_out.forward(graph, params, a)?;
        if self.residual() {
            graph.add(x, y)
        } else {
            Ok(y)
        }
    }
}

/// `Θ` followed by a sigmoid: `[d, indicator_dim, head_dims..]`.
pub fn occupancy_head<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    in_dim: usize,
    indicator_dim: usize,
    head_dims: &[usize],
    rng: &mut R,
) -> Result<Mlp> {
    if head_dims.last() != Some(&1) {
        return Err(Error::invalid("occupancy head must end at width 1"));
    }
    let mut dims = vec![in_dim, indicator_dim];
    dims.extend_from_slice(head_dims);
    Mlp::new(store, name, &dims, Activation::Sigmoid, rng)
}
