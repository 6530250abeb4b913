//! The multimodal graph network: deep GCN iteration with initial residual
//! and identity mapping over the dialogue graph, an MLP classifier on the
//! concatenated node initialisations and graph outputs, the training
//! objective, the training loop and checkpoints.

mod checkpoint;
mod config;
mod loss;
pub(crate) mod network;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use config::{FusionKind, LossKind, Regularizer, RunConfig};
pub use loss::{
    cross_entropy, inverse_frequency_weights, loss_ce_l2, loss_focal, weight_penalty, LOG_FLOOR,
};
pub use network::{
    argmax_rows, beta_schedule, classifier_input_dim, encoder_config, forward, gcn_layer,
    init_params, node_dim, ForwardTrace, ModelShape,
};
pub use train::{train, train_with_observer, EpochRecord, RunReport, StopReason};

use crate::data::{Corpus, Dialogue};
use crate::encoders;
use crate::error::{Error, Result};
use crate::graph::{build_graph, MultimodalGraph};
use crate::numerics::{ParamStore, Tape, Tensor};

/// A configuration, the corpus shape it was built for, and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: RunConfig,
    pub shape: ModelShape,
    pub params: ParamStore,
}

impl Model {
    /// Freshly initialised model.
    pub fn new(config: RunConfig, shape: ModelShape) -> Result<Self> {
        let params = init_params(&config, &shape)?;
        Ok(Self {
            config,
            shape,
            params,
        })
    }

    /// Class probabilities for every utterance, dropout disabled.
    pub fn probabilities(&self, dialogue: &Dialogue) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape)?;
        // Evaluation never draws from the stream.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = forward(
            &mut tape,
            &bound,
            &self.config,
            &self.shape,
            dialogue,
            false,
            &mut rng,
        )?;
        Ok(tape.value(trace.probs).clone())
    }

    pub fn predict_dialogue(&self, dialogue: &Dialogue) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.probabilities(dialogue)?))
    }

    /// Predicted labels, one list per dialogue.
    pub fn predict(&self, corpus: &Corpus) -> Result<Vec<Vec<usize>>> {
        self.check_corpus(corpus)?;
        corpus.dialogues.iter().map(|d| self.predict_dialogue(d)).collect()
    }

    /// Errors unless `corpus` has the feature dimensions and label set the
    /// model was built for.
    pub fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        let (want, got) = (self.shape.dims, corpus.dims);
        if want != got {
            return Err(Error::InvalidArgument(format!(
                "feature dimensions mismatch: model expects (a={}, v={}, t={}), corpus has (a={}, v={}, t={})",
                want.a, want.v, want.t, got.a, got.v, got.t
            )));
        }
        if corpus.class_names != self.shape.class_names {
            return Err(Error::InvalidArgument(format!(
                "label set mismatch: model expects {:?}, corpus has {:?}",
                self.shape.class_names, corpus.class_names
            )));
        }
        if corpus.max_speakers > self.shape.max_speakers {
            return Err(Error::InvalidArgument(format!(
                "corpus allows {} speakers but the model's table has {}",
                corpus.max_speakers, self.shape.max_speakers
            )));
        }
        Ok(())
    }

    /// The multimodal graph over this model's node initialisations for one
    /// dialogue (evaluation mode). Only defined when every node is a single
    /// (utterance, modality) pair, i.e. not for early fusion.
    pub fn graph(&self, dialogue: &Dialogue) -> Result<MultimodalGraph> {
        if self.config.fusion == FusionKind::Early {
            return Err(Error::InvalidArgument(
                "early fusion has no per-modality nodes to build a graph from".into(),
            ));
        }
        if dialogue.is_empty() {
            return Err(Error::InvalidArgument(format!("dialogue {} is empty", dialogue.id)));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape)?;
        let inits = encoders::build_node_inits(
            &mut tape,
            &bound,
            &encoder_config(&self.config, &self.shape),
            dialogue,
            self.config.modalities,
            |_, v| Ok(v),
        )?;
        let values: Vec<_> = inits
            .modalities
            .iter()
            .map(|&(m, v)| (m, tape.value(v).clone()))
            .collect();
        let refs: Vec<_> = values.iter().map(|(m, t)| (*m, t)).collect();
        build_graph(&refs, self.config.gamma, self.config.modalities)
    }
}
