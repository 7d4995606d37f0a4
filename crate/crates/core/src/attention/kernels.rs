//! Local patch attention kernels.
//!
//! Each kernel maps anchor features `[N, d]` and a [`Neighborhood`] to output
//! features `[N, d]`. Work is laid out per (anchor, neighbour) pair: `P = N k`
//! rows, anchor-major, in the neighbourhood's canonical order.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::neighborhood::Neighborhood;
use crate::diffcore::{Bound, DenomPolicy, Graph, Mlp, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Attention variant used by a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttentionKind {
    /// Softmax over feature inner products, scalar weight per neighbour.
    ScalarDot,
    /// Per-channel weights `softmax_j(Φ(f_i - f_j))`, Hadamard aggregation.
    Vector,
    /// Raw `Ψ(f_i - f_j)` matrices, no normalization.
    Matrix,
    /// `Ψ` matrices with softmax across neighbours per entry.
    MatrixSoftmax,
    /// Network-ablation name for [`AttentionKind::Matrix`].
    MatrixUnnormalized,
    /// `Ψ` matrices with every row divided by its L1 norm.
    NormalizedMatrix,
    /// Weights from relative positions only.
    PointConv,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 7] = [
        AttentionKind::ScalarDot,
        AttentionKind::Vector,
        AttentionKind::Matrix,
        AttentionKind::MatrixSoftmax,
        AttentionKind::MatrixUnnormalized,
        AttentionKind::NormalizedMatrix,
        AttentionKind::PointConv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::ScalarDot => "scalar_dot",
            AttentionKind::Vector => "vector",
            AttentionKind::Matrix => "matrix",
            AttentionKind::MatrixSoftmax => "matrix_softmax",
            AttentionKind::MatrixUnnormalized => "matrix_unnormalized",
            AttentionKind::NormalizedMatrix => "normalized_matrix",
            AttentionKind::PointConv => "point_conv",
        }
    }

    /// Normalization of the matrix kinds; `None` for the others.
    pub fn matrix_norm(self) -> Option<MatrixNorm> {
        match self {
            AttentionKind::Matrix | AttentionKind::MatrixUnnormalized => Some(MatrixNorm::None),
            AttentionKind::MatrixSoftmax => Some(MatrixNorm::Softmax),
            AttentionKind::NormalizedMatrix => Some(MatrixNorm::Linear(DenomPolicy::default())),
            _ => None,
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .or(match s {
                "tensorformer" => Some(AttentionKind::NormalizedMatrix),
                _ => None,
            })
            .ok_or_else(|| Error::invalid(format!("unknown attention kind `{s}`")))
    }
}

/// Normalization applied to matrix attention weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MatrixNorm {
    None,
    /// Softmax across the k neighbours, independently for every matrix entry.
    Softmax,
    /// Each matrix row divided by the L1 norm of that row.
    Linear(DenomPolicy),
}

/// Structural shape of the weight matrices produced by a weight function.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WeightLayout {
    /// Weight function yields `[P, d*d]`, rows are output channels.
    #[default]
    Full,
    /// Weight function yields `[P, d]`, placed on the diagonal; off-diagonal
    /// entries are structurally zero and excluded from normalization.
    Diagonal,
}

fn check_features(graph: &Graph, features: Var, nbr: &Neighborhood) -> Result<(usize, usize)> {
    let shape = graph.shape(features);
    if shape.len() != 2 || shape[0] != nbr.anchors() || nbr.max_index().is_some_and(|m| m >= shape[0]) {
        return Err(Error::shape("attention features", shape, &[nbr.anchors(), nbr.k()]));
    }
    if shape[1] == 0 {
        return Err(Error::invalid("attention needs d >= 1"));
    }
    Ok((shape[0], shape[1]))
}

/// Gathers `(f_anchor, f_neighbor)` rows, each `[P, d]`, in canonical order.
pub fn gather_pairs(graph: &mut Graph, features: Var, nbr: &Neighborhood) -> Result<(Var, Var)> {
    let nbr = nbr.to_canonical();
    let anchors = graph.gather(features, &nbr.anchor_index())?;
    let neighbors = graph.gather(features, nbr.indices())?;
    Ok((anchors, neighbors))
}

/// `z_i = sum_j softmax_j(f_i . f_nj) f_nj`.
pub fn scaled_dot_attention(graph: &mut Graph, features: Var, nbr: &Neighborhood) -> Result<Var> {
    let (n, d) = check_features(graph, features, nbr)?;
    let k = nbr.k();
    let (fa, fn_) = gather_pairs(graph, features, nbr)?;
    let prod = graph.hadamard(fa, fn_)?;
    let logits = graph.sum_axis(prod, 1)?;
    let logits = graph.reshape(logits, &[n, k])?;
    let w = graph.softmax(logits, 1)?;
    let w = graph.reshape(w, &[n * k, 1])?;
    let weighted = graph.scale_rows(fn_, w)?;
    let weighted = graph.reshape(weighted, &[n, k, d])?;
    graph.sum_axis(weighted, 1)
}

/// Per-channel softmax of `logits` (`[N k, d]`) across neighbours, then
/// Hadamard-weighted sum of neighbour features.
pub fn vector_aggregate(graph: &mut Graph, features: Var, nbr: &Neighborhood, logits: Var) -> Result<Var> {
    let (n, d) = check_features(graph, features, nbr)?;
    let k = nbr.k();
    if graph.shape(logits) != [n * k, d] {
        return Err(Error::shape(
            "vector attention logits",
            graph.shape(logits),
            &[n * k, d],
        ));
    }
    let nbr = nbr.to_canonical();
    let fn_ = graph.gather(features, nbr.indices())?;
    let logits = graph.reshape(logits, &[n, k, d])?;
    let w = graph.softmax(logits, 1)?;
    let fn3 = graph.reshape(fn_, &[n, k, d])?;
    let weighted = graph.hadamard(w, fn3)?;
    graph.sum_axis(weighted, 1)
}

/// `z_i = sum_j softmax_j(Φ(f_i - f_nj)) ⊙ f_nj`.
pub fn vector_attention(
    graph: &mut Graph,
    params: &Bound,
    features: Var,
    nbr: &Neighborhood,
    phi: &Mlp,
) -> Result<Var> {
    let (_, d) = check_features(graph, features, nbr)?;
    if phi.in_dim() != d || phi.out_dim() != d {
        return Err(Error::shape(
            "vector attention phi",
            &[phi.in_dim(), phi.out_dim()],
            &[d, d],
        ));
    }
    let (fa, fn_) = gather_pairs(graph, features, nbr)?;
    let diff = graph.sub(fa, fn_)?;
    let logits = phi.forward(graph, params, diff)?;
    vector_aggregate(graph, features, nbr, logits)
}

/// Applies `norm` to raw weights of shape `[N k, d, d]`.
pub fn normalize_weights(
    graph: &mut Graph,
    raw: Var,
    anchors: usize,
    k: usize,
    layout: WeightLayout,
    norm: MatrixNorm,
) -> Result<Var> {
    let shape = graph.shape(raw).to_vec();
    if shape.len() != 3 || shape[0] != anchors * k || shape[1] != shape[2] {
        return Err(Error::shape("matrix weights", &shape, &[anchors * k]));
    }
    let d = shape[1];
    match norm {
        MatrixNorm::None => Ok(raw),
        MatrixNorm::Linear(policy) => graph.l1_normalize(raw, 2, policy),
        MatrixNorm::Softmax => {
            let flat = graph.reshape(raw, &[anchors, k, d * d])?;
            let mask = match layout {
                WeightLayout::Full => None,
                WeightLayout::Diagonal => Some(diagonal_mask(anchors * k, d)),
            };
            let w = graph.softmax_masked(flat, 1, mask.as_deref())?;
            graph.reshape(w, &[anchors * k, d, d])
        }
    }
}

fn diagonal_mask(pairs: usize, d: usize) -> Vec<bool> {
    let mut m = vec![false; pairs * d * d];
    for p in 0..pairs {
        for i in 0..d {
            m[(p * d + i) * d + i] = true;
        }
    }
    m
}

/// Normalizes raw `[N k, d, d]` weights, multiplies each with its neighbour
/// feature and sums over neighbours.
pub fn matrix_aggregate(
    graph: &mut Graph,
    features: Var,
    nbr: &Neighborhood,
    raw: Var,
    layout: WeightLayout,
    norm: MatrixNorm,
) -> Result<Var> {
    let (n, d) = check_features(graph, features, nbr)?;
    let k = nbr.k();
    let shape = graph.shape(raw);
    if shape.len() != 3 || shape[0] != n * k || shape[1] != d || shape[2] != d {
        return Err(Error::shape("matrix weights", shape, &[n * k, d, d]));
    }
    let nbr = nbr.to_canonical();
    let fn_ = graph.gather(features, nbr.indices())?;
    let out = match norm {
        // Fused: the normalized matrices are never materialized.
        MatrixNorm::Linear(policy) => graph.l1_bmv(raw, fn_, policy)?,
        _ => {
            let w = normalize_weights(graph, raw, n, k, layout, norm)?;
            graph.bmv(w, fn_)?
        }
    };
    let out = graph.reshape(out, &[n, k, d])?;
    graph.sum_axis(out, 1)
}

/// Matrix attention with an arbitrary weight function of the gathered
/// `(f_anchor, f_neighbor)` rows. The function returns `[P, d*d]` for
/// [`WeightLayout::Full`] or `[P, d]` for [`WeightLayout::Diagonal`].
pub fn matrix_attention_with<F>(
    graph: &mut Graph,
    features: Var,
    nbr: &Neighborhood,
    layout: WeightLayout,
    norm: MatrixNorm,
    weight_fn: F,
) -> Result<Var>
where
    F: FnOnce(&mut Graph, Var, Var) -> Result<Var>,
{
    let (n, d) = check_features(graph, features, nbr)?;
    let pairs = n * nbr.k();
    let (fa, fn_) = gather_pairs(graph, features, nbr)?;
    let w = weight_fn(graph, fa, fn_)?;
    let raw = match layout {
        WeightLayout::Full => {
            if graph.shape(w) != [pairs, d * d] {
                return Err(Error::shape("matrix attention psi", graph.shape(w), &[pairs, d * d]));
            }
            graph.reshape(w, &[pairs, d, d])?
        }
        WeightLayout::Diagonal => {
            if graph.shape(w) != [pairs, d] {
                return Err(Error::shape(
                    "matrix attention diagonal psi",
                    graph.shape(w),
                    &[pairs, d],
                ));
            }
            graph.diag_embed(w)?
        }
    };
    matrix_aggregate(graph, features, nbr, raw, layout, norm)
}

/// `z_i = sum_j Norm(Ψ(f_i - f_nj)) f_nj` with `Ψ: R^d -> R^(d*d)`.
pub fn matrix_attention(
    graph: &mut Graph,
    params: &Bound,
    features: Var,
    nbr: &Neighborhood,
    psi: &Mlp,
    norm: MatrixNorm,
) -> Result<Var> {
    let (_, d) = check_features(graph, features, nbr)?;
    if psi.in_dim() != d || psi.out_dim() != d * d {
        return Err(Error::shape(
            "matrix attention psi",
            &[psi.in_dim(), psi.out_dim()],
            &[d, d * d],
        ));
    }
    matrix_attention_with(graph, features, nbr, WeightLayout::Full, norm, |g, fa, fn_| {
        let diff = g.sub(fa, fn_)?;
        psi.forward(g, params, diff)
    })
}

/// Convolution weights `W(p_nj - p_i)` as `[P, d, d]`. Depends on the
/// neighbourhood offsets only.
pub fn point_conv_weights(graph: &mut Graph, params: &Bound, nbr: &Neighborhood, wnet: &Mlp) -> Result<Var> {
    let out = wnet.out_dim();
    let d = (out as f64).sqrt().round() as usize;
    if wnet.in_dim() != 3 || d * d != out {
        return Err(Error::invalid(format!(
            "point conv weight net must map 3 -> d*d, got {} -> {}",
            wnet.in_dim(),
            out
        )));
    }
    let nbr = nbr.to_canonical();
    let offsets: Vec<f64> = nbr.offsets().iter().flatten().copied().collect();
    let offsets = graph.constant(Tensor::new([nbr.pairs(), 3], offsets)?);
    let w = wnet.forward(graph, params, offsets)?;
    graph.reshape(w, &[nbr.pairs(), d, d])
}

/// `z_i = sum_j W(p_nj - p_i) f_nj`.
pub fn point_conv(graph: &mut Graph, params: &Bound, features: Var, nbr: &Neighborhood, wnet: &Mlp) -> Result<Var> {
    let (_, d) = check_features(graph, features, nbr)?;
    if wnet.out_dim() != d * d {
        return Err(Error::shape("point conv", &[wnet.out_dim()], &[d * d]));
    }
    let w = point_conv_weights(graph, params, nbr, wnet)?;
    matrix_aggregate(graph, features, nbr, w, WeightLayout::Full, MatrixNorm::None)
}

/// An attention kernel together with its weight network.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer {
    pub kind: AttentionKind,
    pub dim: usize,
    net: Option<Mlp>,
}

impl AttentionLayer {
    /// Weight networks: `Φ: d -> d -> d`, `Ψ: d -> d -> d*d`,
    /// point-conv `W: 3 -> d -> d*d`; scalar dot has none.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        kind: AttentionKind,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        use crate::diffcore::Activation;
        let dims: Option<Vec<usize>> = match kind {
            AttentionKind::ScalarDot => None,
            AttentionKind::Vector => Some(vec![dim, dim, dim]),
            AttentionKind::PointConv => Some(vec![3, dim, dim * dim]),
            _ => Some(vec![dim, dim, dim * dim]),
        };
        let net = match dims {
            Some(dims) => Some(Mlp::new(
                store,
                &format!("{name}.{}", net_name(kind)),
                &dims,
                Activation::None,
                rng,
            )?),
            None => None,
        };
        Ok(Self { kind, dim, net })
    }

    pub fn weight_net(&self) -> Option<&Mlp> {
        self.net.as_ref()
    }

    pub fn forward(&self, graph: &mut Graph, params: &Bound, features: Var, nbr: &Neighborhood) -> Result<Var> {
        let net = || self.net.as_ref().expect("kind has a weight net");
        match self.kind {
            AttentionKind::ScalarDot => scaled_dot_attention(graph, features, nbr),
            AttentionKind::Vector => vector_attention(graph, params, features, nbr, net()),
            AttentionKind::PointConv => point_conv(graph, params, features, nbr, net()),
            kind => {
                let norm = kind.matrix_norm().expect("matrix kind");
                matrix_attention(graph, params, features, nbr, net(), norm)
            }
        }
    }
}

fn net_name(kind: AttentionKind) -> &'static str {
    match kind {
        AttentionKind::Vector => "phi",
        AttentionKind::PointConv => "wnet",
        _ => "psi",
    }
}
