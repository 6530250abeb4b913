//! Multimodal dialogue graphs.
//!
//! A dialogue with `N` utterances becomes a graph with one node per
//! (utterance, active modality), ordered modality-major: all audio nodes,
//! then visual, then text. Nodes of the same modality are fully connected;
//! nodes of the same utterance are connected across modalities. Edge weights
//! are angular similarities of the node features, scaled by `gamma` for
//! cross-modal edges, and propagation uses the renormalised Laplacian
//! `(D + I)^-1/2 (A + I) (D + I)^-1/2`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::modality::{Modality, ModalityMask};
use crate::numerics::{CustomOp, Tape, Tensor, Var};

/// Cosine similarity clamped to `[-1, 1]`; zero when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// `1 - arccos(cos(a, b)) / pi`, in `[0, 1]`.
pub fn angular_weight(a: &[f64], b: &[f64]) -> f64 {
    let unit = |x: &[f64]| -> Vec<f64> {
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.iter().map(|v| if n > 0.0 { v / n } else { 0.0 }).collect()
    };
    1.0 - angle_between_units(&unit(a), &unit(b)) / PI
}

/// Angle between two unit (or zero) vectors. The half-angle form stays
/// accurate near 0 and pi, where `acos` of a rounded cosine does not.
fn angle_between_units(u: &[f64], v: &[f64]) -> f64 {
    let (mut diff, mut sum, mut zero_u, mut zero_v) = (0.0, 0.0, true, true);
    for (&a, &b) in u.iter().zip(v) {
        diff += (a - b) * (a - b);
        sum += (a + b) * (a + b);
        zero_u &= a == 0.0;
        zero_v &= b == 0.0;
    }
    if zero_u || zero_v {
        return PI / 2.0;
    }
    2.0 * diff.sqrt().atan2(sum.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeMeta {
    pub utterance: usize,
    pub modality: Modality,
}

/// Node metadata in modality-major order.
pub fn node_layout(num_utterances: usize, mask: ModalityMask) -> Vec<NodeMeta> {
    mask.modalities()
        .into_iter()
        .flat_map(|modality| {
            (0..num_utterances).map(move |utterance| NodeMeta { utterance, modality })
        })
        .collect()
}

/// Edge scale for every node pair: 1 for intra-modality edges, `gamma` for
/// cross-modality edges of one utterance, 0 where there is no edge.
pub fn edge_scales(meta: &[NodeMeta], gamma: f64) -> Tensor {
    let n = meta.len();
    let mut s = Tensor::zeros(n, n);
    for (i, a) in meta.iter().enumerate() {
        for (j, b) in meta.iter().enumerate() {
            if i == j {
                continue;
            }
            if a.modality == b.modality {
                s.set(i, j, 1.0);
            } else if a.utterance == b.utterance {
                s.set(i, j, gamma);
            }
        }
    }
    s
}

/// Intermediates of the adjacency and Laplacian computation, kept for the
/// backward pass.
struct Propagation {
    unit: Tensor,
    norms: Vec<f64>,
    cosine: Tensor,
    adjacency: Tensor,
    inv_sqrt_degree: Vec<f64>,
    laplacian: Tensor,
}

fn propagate(x: &Tensor, scales: &Tensor) -> Propagation {
    let n = x.rows();
    let mut unit = x.clone();
    let mut norms = Vec::with_capacity(n);
    for r in 0..n {
        let row = unit.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        norms.push(norm);
    }
    let cosine = unit.matmul_t(&unit).map(|c| c.clamp(-1.0, 1.0));
    let mut adjacency = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let s = scales.get(i, j);
            if s != 0.0 {
                let angle = angle_between_units(unit.row(i), unit.row(j));
                adjacency.set(i, j, s * (1.0 - angle / PI));
            }
        }
    }
    let inv_sqrt_degree: Vec<f64> = (0..n)
        .map(|i| 1.0 / (1.0 + adjacency.row(i).iter().sum::<f64>()).sqrt())
        .collect();
    let laplacian = laplacian_from(&adjacency, &inv_sqrt_degree);
    Propagation {
        unit,
        norms,
        cosine,
        adjacency,
        inv_sqrt_degree,
        laplacian,
    }
}

fn laplacian_from(adjacency: &Tensor, r: &[f64]) -> Tensor {
    let n = adjacency.rows();
    let mut p = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let a = adjacency.get(i, j) + if i == j { 1.0 } else { 0.0 };
            p.set(i, j, r[i] * a * r[j]);
        }
    }
    p
}

/// `(D + I)^-1/2 (A + I) (D + I)^-1/2` with `D` the weighted degree matrix.
pub fn renormalized_laplacian(adjacency: &Tensor) -> Result<Tensor> {
    let n = adjacency.rows();
    if adjacency.cols() != n {
        return Err(Error::shape(
            "renormalized_laplacian",
            format!("adjacency must be square, got {:?}", adjacency.shape()),
        ));
    }
    for i in 0..n {
        if adjacency.get(i, i) != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "adjacency has a self-loop at node {i}"
            )));
        }
        for j in 0..n {
            let (a, b) = (adjacency.get(i, j), adjacency.get(j, i));
            if a < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "negative edge weight {a} at ({i}, {j})"
                )));
            }
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                return Err(Error::InvalidArgument(format!(
                    "adjacency is not symmetric at ({i}, {j}): {a} vs {b}"
                )));
            }
        }
    }
    let r: Vec<f64> = (0..n)
        .map(|i| 1.0 / (1.0 + adjacency.row(i).iter().sum::<f64>()).sqrt())
        .collect();
    Ok(laplacian_from(adjacency, &r))
}

#[derive(Clone, Debug)]
pub struct MultimodalGraph {
    /// Stacked node initialisations, one row per node.
    pub node_features: Tensor,
    pub node_meta: Vec<NodeMeta>,
    pub adjacency: Tensor,
    pub laplacian: Tensor,
    pub num_utterances: usize,
    pub mask: ModalityMask,
}

impl MultimodalGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_meta.len()
    }

    /// Undirected edges of the graph structure, whatever their weight.
    pub fn num_edges(&self) -> usize {
        let m = &self.node_meta;
        (0..m.len())
            .flat_map(|i| (i + 1..m.len()).map(move |j| (i, j)))
            .filter(|&(i, j)| m[i].modality == m[j].modality || m[i].utterance == m[j].utterance)
            .count()
    }

    pub fn node_index(&self, utterance: usize, modality: Modality) -> Option<usize> {
        self.node_meta
            .iter()
            .position(|m| m.utterance == utterance && m.modality == modality)
    }
}

/// Builds the graph for one dialogue from per-modality node initialisations
/// (each `N x d`). Modalities outside `mask` contribute no nodes.
pub fn build_graph(
    inits: &[(Modality, &Tensor)],
    gamma: f64,
    mask: ModalityMask,
) -> Result<MultimodalGraph> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    let active: Vec<&Tensor> = mask
        .modalities()
        .into_iter()
        .map(|m| {
            inits
                .iter()
                .find(|(k, _)| *k == m)
                .map(|&(_, t)| t)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("no node features for active modality {m}"))
                })
        })
        .collect::<Result<_>>()?;
    let n = active[0].rows();
    if n == 0 {
        return Err(Error::InvalidArgument("dialogue has no utterances".into()));
    }
    if let Some(bad) = active.iter().find(|t| t.shape() != active[0].shape()) {
        return Err(Error::shape(
            "build_graph",
            format!(
                "modality features disagree: {:?} vs {:?}",
                active[0].shape(),
                bad.shape()
            ),
        ));
    }
    let node_features = crate::numerics::concat_rows(&active)?;
    let node_meta = node_layout(n, mask);
    let prop = propagate(&node_features, &edge_scales(&node_meta, gamma));
    Ok(MultimodalGraph {
        node_features,
        node_meta,
        adjacency: prop.adjacency,
        laplacian: prop.laplacian,
        num_utterances: n,
        mask,
    })
}

/// Records `P~ = L(x)` on the tape: the renormalised Laplacian of the
/// angular-similarity adjacency of the rows of `x`, with edge scales given
/// by `scales`. Gradients flow back into `x` through the edge weights.
pub fn propagation_matrix(tape: &mut Tape, x: Var, scales: Tensor) -> Result<Var> {
    let n = tape.value(x).rows();
    if scales.shape() != [n, n] {
        return Err(Error::shape(
            "propagation_matrix",
            format!("{n} nodes but scales {:?}", scales.shape()),
        ));
    }
    let prop = propagate(tape.value(x), &scales);
    let value = prop.laplacian.clone();
    tape.custom(vec![x], value, Box::new(PropagationOp { scales, prop }))
}

struct PropagationOp {
    scales: Tensor,
    prop: Propagation,
}

impl CustomOp for PropagationOp {
    fn name(&self) -> &'static str {
        "propagation_matrix"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let p = &self.prop;
        let n = grad.rows();
        let r = &p.inv_sqrt_degree;

        // d/dr_k of r_i (A+I)_ij r_j, summed over both positions of k.
        let tilde = |i: usize, j: usize| p.adjacency.get(i, j) + if i == j { 1.0 } else { 0.0 };
        let mut d_degree = vec![0.0; n];
        for k in 0..n {
            let mut dr = 0.0;
            for j in 0..n {
                dr += grad.get(k, j) * tilde(k, j) * r[j];
                dr += grad.get(j, k) * r[j] * tilde(j, k);
            }
            // r = (1 + deg)^-1/2
            d_degree[k] = dr * -0.5 * r[k] * r[k] * r[k];
        }

        // Gradient through each edge weight, then through the angular map.
        let mut d_cos = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let scale = self.scales.get(i, j);
                if scale == 0.0 {
                    continue;
                }
                let d_weight = grad.get(i, j) * r[i] * r[j] + d_degree[i];
                let c = p.cosine.get(i, j);
                if c.abs() >= 1.0 {
                    continue;
                }
                let slope = scale / (PI * (1.0 - c * c).max(1e-12).sqrt());
                d_cos.set(i, j, d_weight * slope);
            }
        }
        // cos = U U^T, so dU = (G + G^T) U.
        let sym = d_cos.zip_map(&d_cos.transpose(), |a, b| a + b).expect("square");
        let d_unit = sym.matmul(&p.unit).expect("shapes agree");

        // U_i = x_i / |x_i|
        let mut dx = Tensor::zeros(n, p.unit.cols());
        for i in 0..n {
            let norm = p.norms[i];
            if norm == 0.0 {
                continue;
            }
            let u = p.unit.row(i);
            let du = d_unit.row(i);
            let radial: f64 = du.iter().zip(u).map(|(a, b)| a * b).sum();
            for ((o, &a), &b) in dx.row_mut(i).iter_mut().zip(du).zip(u) {
                *o = (a - radial * b) / norm;
            }
        }
        vec![Some(dx)]
    }
}

/// One cell of an adjacency heatmap row.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapEntry {
    pub modality: Modality,
    pub utterance: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub utterance: usize,
    pub entries: Vec<HeatmapEntry>,
}

impl Heatmap {
    /// CSV with header `modality,utterance_index,weight`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("modality,utterance_index,weight\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{}",
                e.modality.letter(),
                e.utterance,
                format_significant(e.weight, 9)
            );
        }
        out
    }
}

/// For each active modality, the adjacency row of `utterance`'s node over the
/// nodes of the same modality.
pub fn export_adjacency_heatmap(graph: &MultimodalGraph, utterance: usize) -> Result<Heatmap> {
    if utterance >= graph.num_utterances {
        return Err(Error::InvalidArgument(format!(
            "utterance index {utterance} out of range for a dialogue of {} utterances",
            graph.num_utterances
        )));
    }
    let mut entries = Vec::new();
    for m in graph.mask.modalities() {
        let row = graph.node_index(utterance, m).expect("active modality");
        for other in 0..graph.num_utterances {
            let col = graph.node_index(other, m).expect("active modality");
            entries.push(HeatmapEntry {
                modality: m,
                utterance: other,
                weight: graph.adjacency.get(row, col),
            });
        }
    }
    Ok(Heatmap { utterance, entries })
}

fn format_significant(v: f64, digits: usize) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let magnitude = v.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}
