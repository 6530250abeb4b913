//! Comparison fusion strategies built from the same encoders, graph
//! propagation, classifier and training loop as the multimodal graph.
//!
//! * early: one node per utterance holding `[h_a, h_v, h_t, S]`;
//! * late: one graph per modality with its own layer weights, outputs
//!   concatenated before the classifier;
//! * gated: the late-fusion graphs, combined pairwise by sigmoid gates:
//!   `r = tanh(W h)`, `z = sigmoid(W_z h_j)`, `r_jk = z r_j + (1 - z) r_k`,
//!   `e = [r_av, r_at, r_vt]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dialogue;
use crate::encoders;
use crate::error::{Error, Result};
use crate::graph::propagation_matrix;
use crate::modality::Modality;
use crate::model::network::{classify, classify_input, complete_scales, encoder_config, gcn_stack};
use crate::model::{FusionKind, ForwardTrace, ModelShape, RunConfig};
use crate::numerics::{BoundParams, ParamStore, Tape, Tensor, Var};

/// Modality pairs of the gated variant, in output order.
pub const GATE_PAIRS: [(Modality, Modality); 3] = [
    (Modality::Audio, Modality::Visual),
    (Modality::Audio, Modality::Text),
    (Modality::Visual, Modality::Text),
];

/// Parameter names `(W_j, W_k, W_z)` of one gate.
pub fn gate_param_names(j: Modality, k: Modality) -> [String; 3] {
    let p = format!("gate.{}{}", j.letter(), k.letter());
    [
        format!("{p}.w_{}", j.letter()),
        format!("{p}.w_{}", k.letter()),
        format!("{p}.w_z"),
    ]
}

pub(crate) fn init_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &RunConfig,
    d: usize,
    rng: &mut R,
) {
    if cfg.fusion != FusionKind::Gated {
        return;
    }
    for (j, k) in GATE_PAIRS {
        for name in gate_param_names(j, k) {
            store.insert_uniform(name, d, d, rng);
        }
    }
}

pub(crate) fn early_fusion_forward(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &RunConfig,
    shape: &ModelShape,
    dialogue: &Dialogue,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardTrace> {
    let inits = encoders::build_node_inits(
        tape,
        params,
        &encoder_config(cfg, shape),
        dialogue,
        cfg.modalities,
        |t, v| t.dropout(v, cfg.dropout, training, rng),
    )?;
    let mut parts: Vec<Var> = inits.encodings.iter().map(|&(_, v)| v).collect();
    parts.extend(inits.speaker);
    let x = tape.concat_cols(&parts)?;
    let p = propagation_matrix(tape, x, complete_scales(dialogue.len()))?;
    let h0 = tape.dropout(x, cfg.dropout, training, rng)?;
    let layers = gcn_stack(tape, params, cfg, "gcn", h0, p)?;
    let g = *layers.last().expect("non-empty");
    classify(tape, params, vec![layers], x, g)
}

/// Per-modality graphs; returns the branches and the node initialisations.
fn modality_branches(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &RunConfig,
    shape: &ModelShape,
    dialogue: &Dialogue,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<(Modality, Vec<Var>)>, Vec<Var>)> {
    let inits = encoders::build_node_inits(
        tape,
        params,
        &encoder_config(cfg, shape),
        dialogue,
        cfg.modalities,
        |t, v| t.dropout(v, cfg.dropout, training, rng),
    )?;
    let mut branches = Vec::new();
    let mut nodes = Vec::new();
    for &(m, x) in &inits.modalities {
        let p = propagation_matrix(tape, x, complete_scales(dialogue.len()))?;
        let h0 = tape.dropout(x, cfg.dropout, training, rng)?;
        let layers = gcn_stack(tape, params, cfg, &format!("gcn.{}", m.name()), h0, p)?;
        branches.push((m, layers));
        nodes.push(x);
    }
    Ok((branches, nodes))
}

pub(crate) fn late_fusion_forward(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &RunConfig,
    shape: &ModelShape,
    dialogue: &Dialogue,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardTrace> {
    let (branches, nodes) = modality_branches(tape, params, cfg, shape, dialogue, training, rng)?;
    let outputs: Vec<Var> = branches.iter().map(|(_, l)| *l.last().expect("non-empty")).collect();
    let g = tape.concat_cols(&outputs)?;
    let h_prime = tape.concat_cols(&nodes)?;
    classify(tape, params, branches.into_iter().map(|(_, l)| l).collect(), h_prime, g)
}

pub(crate) fn gated_fusion_forward(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &RunConfig,
    shape: &ModelShape,
    dialogue: &Dialogue,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardTrace> {
    let (branches, nodes) = modality_branches(tape, params, cfg, shape, dialogue, training, rng)?;
    let output = |m: Modality| -> Result<Var> {
        branches
            .iter()
            .find(|(k, _)| *k == m)
            .map(|(_, l)| *l.last().expect("non-empty"))
            .ok_or_else(|| Error::InvalidArgument(format!("gated fusion is missing modality {m}")))
    };
    let h = [output(Modality::Audio)?, output(Modality::Visual)?, output(Modality::Text)?];
    let e = gated_attention_fuse(tape, params, h)?;
    let g = tape.concat_cols(&h)?;
    let h_prime = tape.concat_cols(&nodes)?;
    classify_input(tape, params, branches.into_iter().map(|(_, l)| l).collect(), h_prime, g, e)
}

/// Pairwise gated combination of per-utterance modality vectors
/// `h = [h_a, h_v, h_t]` (each `N x d`), giving `N x 3d`.
pub fn gated_attention_fuse(tape: &mut Tape, params: &BoundParams, h: [Var; 3]) -> Result<Var> {
    let d = tape.value(h[0]).cols();
    if h.iter().any(|&v| tape.value(v).shape() != tape.value(h[0]).shape()) {
        return Err(Error::shape(
            "gated_attention_fuse",
            format!(
                "modality vectors disagree: {:?}",
                h.iter().map(|&v| tape.value(v).shape()).collect::<Vec<_>>()
            ),
        ));
    }
    let of = |m: Modality| h[Modality::ALL.iter().position(|&k| k == m).expect("known")];
    let mut fused = Vec::with_capacity(3);
    for (j, k) in GATE_PAIRS {
        let [wj, wk, wz] = gate_param_names(j, k).map(|n| params.var(&n));
        let (wj, wk, wz) = (wj?, wk?, wz?);
        if tape.value(wz).shape() != [d, d] {
            return Err(Error::shape(
                "gated_attention_fuse",
                format!("gate weights {:?} for width {d}", tape.value(wz).shape()),
            ));
        }
        let (hj, hk) = (of(j), of(k));
        let rj = tape.matmul(hj, wj)?;
        let rj = tape.tanh(rj)?;
        let rk = tape.matmul(hk, wk)?;
        let rk = tape.tanh(rk)?;
        let z = tape.matmul(hj, wz)?;
        let z = tape.sigmoid(z)?;
        let not_z = tape.affine(z, -1.0, 1.0)?;
        let a = tape.mul(z, rj)?;
        let b = tape.mul(not_z, rk)?;
        fused.push(tape.add(a, b)?);
    }
    tape.concat_cols(&fused)
}

/// Value-level convenience wrapper around [`gated_attention_fuse`].
pub fn gated_attention_fuse_values(params: &ParamStore, h: [&Tensor; 3]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let vars = [
        tape.leaf(h[0].clone())?,
        tape.leaf(h[1].clone())?,
        tape.leaf(h[2].clone())?,
    ];
    let out = gated_attention_fuse(&mut tape, &bound, vars)?;
    Ok(tape.value(out).clone())
}
