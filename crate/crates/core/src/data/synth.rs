//! Synthetic dialogue corpora with a known generative process.
//!
//! Each party in a dialogue carries a latent emotion that evolves as a
//! first-order Markov chain: on every turn the speaker keeps their previous
//! emotion with probability `persistence`, otherwise a fresh one is drawn from
//! that speaker slot's preference distribution. The gold label is the
//! speaker's current emotion. Every modality observes the label through a
//! noisy linear projection `informativeness_m * prototype_m[label] + noise`,
//! so each modality alone is a partial signal and combining them helps.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Corpus, Dialogue, FeatureDims, Split, Utterance};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::rng::{stream, Stream};

/// Signal strength per modality, each in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Informativeness {
    pub a: f64,
    pub v: f64,
    pub t: f64,
}

impl Informativeness {
    pub fn get(&self, m: Modality) -> f64 {
        match m {
            Modality::Audio => self.a,
            Modality::Visual => self.v,
            Modality::Text => self.t,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_dialogues: usize,
    /// Inclusive range of utterances per dialogue.
    pub len_range: (usize, usize),
    pub num_classes: usize,
    pub max_speakers: usize,
    pub dims: FeatureDims,
    pub informativeness: Informativeness,
    /// Probability that a speaker keeps their emotion from their previous turn.
    pub persistence: f64,
    /// How strongly each speaker slot prefers its own subset of classes, in `[0, 1]`.
    pub speaker_bias: f64,
    /// Standard deviation of the additive feature noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_dialogues: 30,
            len_range: (5, 50),
            num_classes: 6,
            max_speakers: 2,
            dims: FeatureDims { a: 8, v: 8, t: 8 },
            informativeness: Informativeness {
                a: 0.6,
                v: 0.3,
                t: 0.9,
            },
            persistence: 0.7,
            speaker_bias: 0.0,
            noise: 1.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_dialogues == 0 {
            problems.push("num_dialogues must be positive".to_string());
        }
        let (lo, hi) = self.len_range;
        if lo == 0 || lo > hi {
            problems.push(format!("len_range ({lo}, {hi}) must satisfy 1 <= min <= max"));
        }
        if self.num_classes < 2 {
            problems.push("num_classes must be at least 2".to_string());
        }
        if self.max_speakers == 0 {
            problems.push("max_speakers must be positive".to_string());
        }
        if self.dims.a == 0 || self.dims.v == 0 || self.dims.t == 0 {
            problems.push("feature dimensions must be positive".to_string());
        }
        for m in Modality::ALL {
            let q = self.informativeness.get(m);
            if !(0.0..=1.0).contains(&q) {
                problems.push(format!("{} informativeness {q} outside [0, 1]", m.name()));
            }
        }
        if !(0.0..=1.0).contains(&self.persistence) {
            problems.push(format!("persistence {} outside [0, 1]", self.persistence));
        }
        if !(0.0..=1.0).contains(&self.speaker_bias) {
            problems.push(format!("speaker_bias {} outside [0, 1]", self.speaker_bias));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            problems.push(format!("noise {} must be finite and non-negative", self.noise));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Conventional label sets for the two common corpus shapes.
pub fn default_class_names(k: usize) -> Vec<String> {
    let names: &[&str] = match k {
        6 => &["happy", "sad", "neutral", "angry", "excited", "frustrated"],
        7 => &["neutral", "surprise", "fear", "sadness", "joy", "disgust", "anger"],
        _ => &[],
    };
    if names.is_empty() {
        (0..k).map(|i| format!("class{i}")).collect()
    } else {
        names.iter().map(|s| s.to_string()).collect()
    }
}

/// Probability that a dialogue's next turn stays with the current speaker.
const SAME_SPEAKER_PROB: f64 = 0.15;

pub fn synthesize_corpus(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Stream::Synth);
    let k = spec.num_classes;

    let prototypes: Vec<Vec<Vec<f64>>> = Modality::ALL
        .iter()
        .map(|&m| {
            (0..k)
                .map(|_| gaussian_vec(spec.dims.get(m), &mut rng))
                .collect()
        })
        .collect();

    // Speaker slot p prefers classes c with c % slots == p % slots.
    let slots = spec.max_speakers.min(k).max(1);
    let preference = |p: usize| -> Vec<f64> {
        let preferred: Vec<bool> = (0..k).map(|c| c % slots == p % slots).collect();
        let n_pref = preferred.iter().filter(|&&b| b).count() as f64;
        preferred
            .iter()
            .map(|&b| {
                (1.0 - spec.speaker_bias) / k as f64
                    + if b { spec.speaker_bias / n_pref } else { 0.0 }
            })
            .collect()
    };

    let mut dialogues = Vec::with_capacity(spec.num_dialogues);
    for di in 0..spec.num_dialogues {
        let n = rng.random_range(spec.len_range.0..=spec.len_range.1);
        let parties = if spec.max_speakers <= 2 {
            spec.max_speakers
        } else {
            rng.random_range(2..=spec.max_speakers)
        };
        let mut state: Vec<Option<usize>> = vec![None; parties];
        let mut speaker = 0usize;
        let mut utterances = Vec::with_capacity(n);
        for i in 0..n {
            if i > 0 && parties > 1 && rng.random::<f64>() >= SAME_SPEAKER_PROB {
                speaker = (speaker + 1) % parties;
            }
            let label = match state[speaker] {
                Some(prev) if rng.random::<f64>() < spec.persistence => prev,
                _ => sample_categorical(&preference(speaker), &mut rng),
            };
            state[speaker] = Some(label);

            let mut feats = Modality::ALL.iter().enumerate().map(|(mi, &m)| {
                let q = spec.informativeness.get(m);
                prototypes[mi][label]
                    .iter()
                    .map(|&p| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        q * p + spec.noise * z
                    })
                    .collect::<Vec<f64>>()
            });
            let audio = feats.next().expect("three modalities");
            let visual = feats.next().expect("three modalities");
            let text = feats.next().expect("three modalities");
            utterances.push(Utterance {
                speaker,
                label,
                audio,
                visual,
                text,
            });
        }
        dialogues.push(Dialogue {
            id: format!("dlg{di:04}"),
            utterances,
        });
    }

    let corpus = Corpus {
        class_names: default_class_names(k),
        dims: spec.dims,
        max_speakers: spec.max_speakers,
        split: Split::All,
        dialogues,
    };
    corpus.validate()?;
    Ok(corpus)
}

fn gaussian_vec(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn sample_categorical(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random::<f64>() * p.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}
