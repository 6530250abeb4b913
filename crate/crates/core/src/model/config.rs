use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::modality::ModalityMask;

/// How modalities are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    /// One graph over every (utterance, modality) node.
    #[default]
    Mmgcn,
    /// Modality encodings concatenated into one node per utterance.
    Early,
    /// One independent graph per modality, outputs concatenated.
    Late,
    /// One graph per modality, outputs combined by pairwise gates.
    Gated,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [
        FusionKind::Mmgcn,
        FusionKind::Early,
        FusionKind::Late,
        FusionKind::Gated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Mmgcn => "mmgcn",
            FusionKind::Early => "early",
            FusionKind::Late => "late",
            FusionKind::Gated => "gated",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown fusion {s:?}; expected one of mmgcn, early, late, gated"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    #[serde(rename = "ce")]
    CrossEntropy,
    Focal,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::CrossEntropy => "ce",
            LossKind::Focal => "focal",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "cross-entropy" | "cross_entropy" => Ok(LossKind::CrossEntropy),
            "focal" => Ok(LossKind::Focal),
            _ => Err(Error::InvalidArgument(format!(
                "unknown loss {s:?}; expected ce or focal"
            ))),
        }
    }
}

/// Form of the weight penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    /// `lambda * |theta|^2`
    #[default]
    SquaredNorm,
    /// `lambda * |theta|`
    Norm,
}

/// Every hyperparameter of a run. Serialised verbatim into reports and
/// checkpoints; its hash is the run's fingerprint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub num_layers: usize,
    /// Initial-residual weight.
    pub alpha: f64,
    /// Identity-mapping decay.
    pub eta: f64,
    /// Scale of cross-modal edge weights.
    pub gamma: f64,
    pub d_h: usize,
    pub d_s: usize,
    /// Classifier hidden width; the node width when unset.
    pub d_mlp: Option<usize>,
    pub dropout: f64,
    pub lr: f64,
    pub l2: f64,
    pub regularizer: Regularizer,
    pub loss: LossKind,
    pub focal_gamma: f64,
    pub fusion: FusionKind,
    pub modalities: ModalityMask,
    pub speaker_embedding: bool,
    /// Speaker table size; taken from the corpus when unset.
    pub max_speakers: Option<usize>,
    pub epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Share of training dialogues held out for model selection; 0 disables it.
    pub val_fraction: f64,
    /// Stop once accuracy on the training dialogues reaches this value.
    pub target_train_accuracy: Option<f64>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            alpha: 0.1,
            eta: 0.5,
            gamma: 0.7,
            d_h: 100,
            d_s: 100,
            d_mlp: None,
            dropout: 0.4,
            lr: 3e-4,
            l2: 3e-5,
            regularizer: Regularizer::SquaredNorm,
            loss: LossKind::CrossEntropy,
            focal_gamma: 2.0,
            fusion: FusionKind::Mmgcn,
            modalities: ModalityMask::ALL,
            speaker_embedding: true,
            max_speakers: None,
            epochs: 60,
            patience: None,
            val_fraction: 0.1,
            target_train_accuracy: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Checks every range and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.num_layers == 0 {
            p.push("num_layers must be at least 1".to_string());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            p.push(format!("alpha {} must lie in (0, 1)", self.alpha));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            p.push(format!("eta {} must be positive", self.eta));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            p.push(format!("gamma {} must be positive", self.gamma));
        }
        if self.d_h == 0 || self.d_h % 2 != 0 {
            p.push(format!("d_h {} must be a positive even number", self.d_h));
        }
        if self.speaker_embedding && self.d_s == 0 {
            p.push("d_s must be positive when the speaker embedding is on".to_string());
        }
        if self.d_mlp == Some(0) {
            p.push("d_mlp must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            p.push(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            p.push(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            p.push(format!("l2 {} must be finite and non-negative", self.l2));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            p.push(format!("focal_gamma {} must be non-negative", self.focal_gamma));
        }
        if self.fusion == FusionKind::Gated && self.modalities != ModalityMask::ALL {
            p.push(format!(
                "gated fusion needs all three modalities, got {}",
                self.modalities
            ));
        }
        if self.max_speakers == Some(0) {
            p.push("max_speakers must be positive".to_string());
        }
        if self.epochs == 0 {
            p.push("epochs must be at least 1".to_string());
        }
        if self.patience == Some(0) {
            p.push("patience must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            p.push(format!("val_fraction {} must lie in [0, 1)", self.val_fraction));
        }
        if let Some(t) = self.target_train_accuracy {
            if !(t > 0.0 && t <= 1.0) {
                p.push(format!("target_train_accuracy {t} must lie in (0, 1]"));
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.fingerprint(), c.fingerprint());
        assert_eq!(c.fingerprint().len(), 64);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: RunConfig =
            serde_json::from_str(r#"{"num_layers": 2, "modalities": "at", "loss": "focal"}"#).unwrap();
        assert_eq!(c.num_layers, 2);
        assert_eq!(c.modalities.to_string(), "at");
        assert_eq!(c.loss, LossKind::Focal);
        assert_eq!(c.alpha, 0.1);
        assert!(serde_json::from_str::<RunConfig>(r#"{"layers": 2}"#).is_err());
    }

    #[test]
    fn validation_lists_every_problem() {
        let c = RunConfig {
            num_layers: 0,
            alpha: 1.5,
            dropout: 1.0,
            fusion: FusionKind::Gated,
            modalities: "at".parse().unwrap(),
            ..RunConfig::default()
        };
        match c.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 4, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fingerprint_tracks_changes() {
        let a = RunConfig::default();
        let b = RunConfig { gamma: 0.5, ..a.clone() };
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn kinds_parse() {
        for k in FusionKind::ALL {
            assert_eq!(k.name().parse::<FusionKind>().unwrap(), k);
        }
        assert!("mult".parse::<FusionKind>().is_err());
        assert_eq!("focal".parse::<LossKind>().unwrap(), LossKind::Focal);
        assert_eq!(serde_json::to_string(&LossKind::CrossEntropy).unwrap(), "\"ce\"");
    }
}
