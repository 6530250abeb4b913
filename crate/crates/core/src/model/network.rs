use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{FusionKind, RunConfig};
use crate::data::{Corpus, Dialogue, FeatureDims};
use crate::encoders::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion;
use crate::graph::{edge_scales, node_layout, propagation_matrix};
use crate::numerics::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::rng::{stream, Stream};

/// Corpus-dependent sizes a model is built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub dims: FeatureDims,
    pub max_speakers: usize,
    pub class_names: Vec<String>,
}

impl ModelShape {
    pub fn from_corpus(corpus: &Corpus, cfg: &RunConfig) -> Self {
        Self {
            dims: corpus.dims,
            max_speakers: cfg.max_speakers.unwrap_or(corpus.max_speakers),
            class_names: corpus.class_names.clone(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

pub fn encoder_config(cfg: &RunConfig, shape: &ModelShape) -> EncoderConfig {
    EncoderConfig {
        dims: shape.dims,
        d_h: cfg.d_h,
        d_s: cfg.d_s,
        max_speakers: shape.max_speakers,
        speaker_embedding: cfg.speaker_embedding,
    }
}

/// Width of one graph node.
pub fn node_dim(cfg: &RunConfig, shape: &ModelShape) -> usize {
    let enc = encoder_config(cfg, shape);
    match cfg.fusion {
        FusionKind::Early => cfg.modalities.count() * cfg.d_h + enc.speaker_dim(),
        _ => enc.node_dim(),
    }
}

/// Width of the classifier input `e`.
pub fn classifier_input_dim(cfg: &RunConfig, shape: &ModelShape) -> usize {
    let d = node_dim(cfg, shape);
    match cfg.fusion {
        FusionKind::Mmgcn | FusionKind::Late => 2 * cfg.modalities.count() * d,
        FusionKind::Early => 2 * d,
        FusionKind::Gated => 3 * d,
    }
}

pub(crate) fn layer_name(prefix: &str, l: usize) -> String {
    format!("{prefix}.layer{l}.weight")
}

pub(crate) const CLASSIFIER_HIDDEN_WEIGHT: &str = "classifier.hidden.weight";
pub(crate) const CLASSIFIER_HIDDEN_BIAS: &str = "classifier.hidden.bias";
pub(crate) const CLASSIFIER_OUTPUT_WEIGHT: &str = "classifier.output.weight";
pub(crate) const CLASSIFIER_OUTPUT_BIAS: &str = "classifier.output.bias";

/// Fresh parameters drawn from the run's init stream.
pub fn init_params(cfg: &RunConfig, shape: &ModelShape) -> Result<ParamStore> {
    cfg.validate()?;
    if shape.num_classes() < 2 {
        return Err(Error::InvalidArgument("a model needs at least two classes".into()));
    }
    let mut rng = stream(cfg.seed, Stream::Init);
    let mut store = ParamStore::new();
    encoders::init_params(&mut store, &encoder_config(cfg, shape), cfg.modalities, &mut rng)?;
    let d = node_dim(cfg, shape);
    for prefix in gcn_prefixes(cfg) {
        for l in 0..cfg.num_layers {
            store.insert_uniform(layer_name(&prefix, l), d, d, &mut rng);
        }
    }
    fusion::init_params(&mut store, cfg, d, &mut rng);
    let d_in = classifier_input_dim(cfg, shape);
    let d_mlp = cfg.d_mlp.unwrap_or(d);
    store.insert_uniform(CLASSIFIER_HIDDEN_WEIGHT, d_in, d_mlp, &mut rng);
    store.insert(CLASSIFIER_HIDDEN_BIAS, Tensor::zeros(1, d_mlp));
    store.insert_uniform(CLASSIFIER_OUTPUT_WEIGHT, d_mlp, shape.num_classes(), &mut rng);
    store.insert(CLASSIFIER_OUTPUT_BIAS, Tensor::zeros(1, shape.num_classes()));
    Ok(store)
}

/// Parameter prefixes of the GCN stacks a configuration uses.
pub(crate) fn gcn_prefixes(cfg: &RunConfig) -> Vec<String> {
    match cfg.fusion {
        FusionKind::Mmgcn | FusionKind::Early => vec!["gcn".to_string()],
        FusionKind::Late | FusionKind::Gated => cfg
            .modalities
            .modalities()
            .into_iter()
            .map(|m| format!("gcn.{}", m.name()))
            .collect(),
    }
}

/// Identity-mapping strength for the layer with 1-based index `l`:
/// `ln(eta / l + 1)`.
pub fn beta_schedule(l: usize, eta: f64) -> Result<f64> {
    if l == 0 {
        return Err(Error::InvalidArgument("layer indices start at 1".into()));
    }
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be positive, got {eta}")));
    }
    Ok((eta / l as f64 + 1.0).ln())
}

/// `relu(((1 - alpha) P H + alpha H0) ((1 - beta) I + beta W))`.
pub fn gcn_layer(
    tape: &mut Tape,
    h: Var,
    h0: Var,
    p: Var,
    w: Var,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let [n, d] = tape.value(h).shape();
    let ok = tape.value(h0).shape() == [n, d]
        && tape.value(p).shape() == [n, n]
        && tape.value(w).shape() == [d, d];
    if !ok {
        return Err(Error::shape(
            "gcn_layer",
            format!(
                "H {:?}, H0 {:?}, P {:?}, W {:?}",
                [n, d],
                tape.value(h0).shape(),
                tape.value(p).shape(),
                tape.value(w).shape()
            ),
        ));
    }
    let ph = tape.matmul(p, h)?;
    let ph = tape.scale(ph, 1.0 - alpha)?;
    let res = tape.scale(h0, alpha)?;
    let support = tape.add(ph, res)?;
    let keep = tape.scale(support, 1.0 - beta)?;
    let mixed = tape.matmul(support, w)?;
    let mixed = tape.scale(mixed, beta)?;
    let out = tape.add(keep, mixed)?;
    tape.relu(out)
}

/// `H0` followed by every layer output.
pub(crate) fn gcn_stack(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &RunConfig,
    prefix: &str,
    h0: Var,
    p: Var,
) -> Result<Vec<Var>> {
    let mut layers = vec![h0];
    for l in 0..cfg.num_layers {
        let w = params.var(&layer_name(prefix, l))?;
        let beta = beta_schedule(l + 1, cfg.eta)?;
        let h = *layers.last().expect("non-empty");
        layers.push(gcn_layer(tape, h, h0, p, w, cfg.alpha, beta)?);
    }
    Ok(layers)
}

/// Fully connected graph over `n` nodes of one kind.
pub(crate) fn complete_scales(n: usize) -> Tensor {
    let mut s = Tensor::full(n, n, 1.0);
    for i in 0..n {
        s.set(i, i, 0.0);
    }
    s
}

/// Handles into the tape for one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// For each graph, `H0` and every layer output.
    pub branches: Vec<Vec<Var>>,
    /// Node initialisations per utterance, `N x (k d)`.
    pub h_prime: Var,
    /// Graph outputs per utterance.
    pub g: Var,
    /// Classifier input.
    pub e: Var,
    pub logits: Var,
    pub probs: Var,
}

/// Runs the configured network over one dialogue.
pub fn forward(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &RunConfig,
    shape: &ModelShape,
    dialogue: &Dialogue,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardTrace> {
    if dialogue.is_empty() {
        return Err(Error::InvalidArgument(format!("dialogue {} is empty", dialogue.id)));
    }
    match cfg.fusion {
        FusionKind::Mmgcn => mmgcn_forward(tape, params, cfg, shape, dialogue, training, rng),
        FusionKind::Early => fusion::early_fusion_forward(tape, params, cfg, shape, dialogue, training, rng),
        FusionKind::Late => fusion::late_fusion_forward(tape, params, cfg, shape, dialogue, training, rng),
        FusionKind::Gated => fusion::gated_fusion_forward(tape, params, cfg, shape, dialogue, training, rng),
    }
}

fn mmgcn_forward(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &RunConfig,
    shape: &ModelShape,
    dialogue: &Dialogue,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardTrace> {
    let n = dialogue.len();
    let inits = encoders::build_node_inits(
        tape,
        params,
        &encoder_config(cfg, shape),
        dialogue,
        cfg.modalities,
        |t, v| t.dropout(v, cfg.dropout, training, rng),
    )?;
    let blocks: Vec<Var> = inits.modalities.iter().map(|&(_, v)| v).collect();
    let x = tape.concat_rows(&blocks)?;
    let p = propagation_matrix(tape, x, edge_scales(&node_layout(n, cfg.modalities), cfg.gamma))?;
    let h0 = tape.dropout(x, cfg.dropout, training, rng)?;
    let layers = gcn_stack(tape, params, cfg, "gcn", h0, p)?;
    let last = *layers.last().expect("non-empty");
    let per_modality = (0..blocks.len())
        .map(|b| tape.slice_rows(last, b * n, n))
        .collect::<Result<Vec<_>>>()?;
    let g = tape.concat_cols(&per_modality)?;
    let h_prime = tape.concat_cols(&blocks)?;
    classify(tape, params, vec![layers], h_prime, g)
}

/// `e = [h', g]` through the ReLU MLP and softmax.
pub(crate) fn classify(
    tape: &mut Tape,
    params: &BoundParams,
    branches: Vec<Vec<Var>>,
    h_prime: Var,
    g: Var,
) -> Result<ForwardTrace> {
    let e = tape.concat_cols(&[h_prime, g])?;
    classify_input(tape, params, branches, h_prime, g, e)
}

pub(crate) fn classify_input(
    tape: &mut Tape,
    params: &BoundParams,
    branches: Vec<Vec<Var>>,
    h_prime: Var,
    g: Var,
    e: Var,
) -> Result<ForwardTrace> {
    let w1 = params.var(CLASSIFIER_HIDDEN_WEIGHT)?;
    let b1 = params.var(CLASSIFIER_HIDDEN_BIAS)?;
    let w2 = params.var(CLASSIFIER_OUTPUT_WEIGHT)?;
    let b2 = params.var(CLASSIFIER_OUTPUT_BIAS)?;
    let hidden = tape.matmul(e, w1)?;
    let hidden = tape.add_row(hidden, b1)?;
    let hidden = tape.relu(hidden)?;
    let logits = tape.matmul(hidden, w2)?;
    let logits = tape.add_row(logits, b2)?;
    let probs = tape.softmax_rows(logits)?;
    Ok(ForwardTrace {
        branches,
        h_prime,
        g,
        e,
        logits,
        probs,
    })
}

/// Index of the largest entry in each row; ties go to the lower class.
pub fn argmax_rows(p: &Tensor) -> Vec<usize> {
    (0..p.rows())
        .map(|r| {
            let row = p.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
