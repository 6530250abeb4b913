//! Dialogue corpora: in-memory model, JSON Lines storage and splitting.
//!
//! On disk a corpus is UTF-8 JSON Lines. The first line is a header
//! `{"meta": {"classes": [...], "dims": {"a": .., "v": .., "t": ..}, "max_speakers": ..}}`
//! and every following line holds one dialogue:
//! `{"id": "..", "utterances": [{"speaker": 0, "label": "sad", "a": [..], "v": [..], "t": [..]}]}`.

mod synth;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use synth::{default_class_names, synthesize_corpus, Informativeness, SynthSpec};

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::numerics::Tensor;
use crate::rng::{stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub a: usize,
    pub v: usize,
    pub t: usize,
}

impl FeatureDims {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Audio => self.a,
            Modality::Visual => self.v,
            Modality::Text => self.t,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    /// Local speaker index within the dialogue.
    pub speaker: usize,
    pub label: usize,
    pub audio: Vec<f64>,
    pub visual: Vec<f64>,
    pub text: Vec<f64>,
}

impl Utterance {
    pub fn features(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
            Modality::Text => &self.text,
        }
    }

    pub fn features_mut(&mut self, m: Modality) -> &mut Vec<f64> {
        match m {
            Modality::Audio => &mut self.audio,
            Modality::Visual => &mut self.visual,
            Modality::Text => &mut self.text,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// `N x d_m` matrix of one modality's features in utterance order.
    pub fn feature_matrix(&self, m: Modality) -> Result<Tensor> {
        let rows: Vec<&[f64]> = self.utterances.iter().map(|u| u.features(m)).collect();
        Tensor::from_rows(&rows)
    }

    pub fn speakers(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.speaker).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.label).collect()
    }

    pub fn num_speakers(&self) -> usize {
        self.utterances.iter().map(|u| u.speaker + 1).max().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    All,
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub class_names: Vec<String>,
    pub dims: FeatureDims,
    pub max_speakers: usize,
    pub split: Split,
    pub dialogues: Vec<Dialogue>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaLine {
    meta: Meta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    classes: Vec<String>,
    dims: FeatureDims,
    max_speakers: usize,
    #[serde(default, skip_serializing_if = "is_all")]
    split: Split,
}

fn is_all(s: &Split) -> bool {
    *s == Split::All
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DialogueRecord {
    id: String,
    utterances: Vec<UtteranceRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceRecord {
    speaker: usize,
    label: String,
    a: Vec<f64>,
    v: Vec<f64>,
    t: Vec<f64>,
}

impl Corpus {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_utterances(&self) -> usize {
        self.dialogues.iter().map(Dialogue::len).sum()
    }

    pub fn dialogue(&self, id: &str) -> Option<&Dialogue> {
        self.dialogues.iter().find(|d| d.id == id)
    }

    /// Gold labels of every utterance, dialogue by dialogue.
    pub fn labels(&self) -> Vec<usize> {
        self.dialogues.iter().flat_map(Dialogue::labels).collect()
    }

    /// Checks every structural invariant and reports the first violation.
    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::InvalidArgument("corpus declares no classes".into()));
        }
        if self.max_speakers == 0 {
            return Err(Error::InvalidArgument("max_speakers must be at least 1".into()));
        }
        for d in &self.dialogues {
            validate_dialogue(d, self)?;
        }
        Ok(())
    }

    /// Copy holding the dialogues at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Corpus {
        Corpus {
            class_names: self.class_names.clone(),
            dims: self.dims,
            max_speakers: self.max_speakers,
            split,
            dialogues: indices.iter().map(|&i| self.dialogues[i].clone()).collect(),
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&MetaLine {
            meta: Meta {
                classes: self.class_names.clone(),
                dims: self.dims,
                max_speakers: self.max_speakers,
                split: self.split,
            },
        })?;
        out.push('\n');
        for d in &self.dialogues {
            let rec = DialogueRecord {
                id: d.id.clone(),
                utterances: d
                    .utterances
                    .iter()
                    .map(|u| UtteranceRecord {
                        speaker: u.speaker,
                        label: self.class_names[u.label].clone(),
                        a: u.audio.clone(),
                        v: u.visual.clone(),
                        t: u.text.clone(),
                    })
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = self.to_jsonl()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn validate_dialogue(d: &Dialogue, c: &Corpus) -> Result<()> {
    let bad = |msg: String| Err(Error::InvalidArgument(format!("dialogue {}: {msg}", d.id)));
    if d.utterances.is_empty() {
        return bad("has no utterances".into());
    }
    let mut seen = vec![false; c.max_speakers];
    for (i, u) in d.utterances.iter().enumerate() {
        for m in Modality::ALL {
            let want = c.dims.get(m);
            let got = u.features(m).len();
            if got != want {
                return bad(format!(
                    "utterance {i}: {} features have dimension {got}, expected {want}",
                    m.name()
                ));
            }
            if u.features(m).iter().any(|v| !v.is_finite()) {
                return bad(format!("utterance {i}: non-finite {} feature", m.name()));
            }
        }
        if u.label >= c.class_names.len() {
            return bad(format!("utterance {i}: label index {} out of range", u.label));
        }
        if u.speaker >= c.max_speakers {
            return bad(format!(
                "utterance {i}: speaker {} exceeds max_speakers {}",
                u.speaker, c.max_speakers
            ));
        }
        seen[u.speaker] = true;
    }
    let k = d.num_speakers();
    if let Some(missing) = (0..k).find(|&s| !seen[s]) {
        return bad(format!(
            "speaker indices must form a contiguous prefix 0..{k}, speaker {missing} never speaks"
        ));
    }
    Ok(())
}

/// Reads a JSON Lines corpus. When `expected_dims` is given the header must
/// declare exactly those feature dimensions.
pub fn load_corpus(path: impl AsRef<Path>, expected_dims: Option<FeatureDims>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut lines = BufReader::new(file).lines().enumerate();
    let meta = loop {
        match lines.next() {
            None => return Err(parse_err(1, "empty file, expected a meta header".into())),
            Some((i, line)) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let m: MetaLine = serde_json::from_str(&line)
                    .map_err(|e| parse_err(i + 1, format!("invalid meta header: {e}")))?;
                break m.meta;
            }
        }
    };
    if let Some(want) = expected_dims {
        if want != meta.dims {
            return Err(Error::InvalidArgument(format!(
                "feature dimensions mismatch: expected (a={}, v={}, t={}), corpus declares (a={}, v={}, t={})",
                want.a, want.v, want.t, meta.dims.a, meta.dims.v, meta.dims.t
            )));
        }
    }

    let mut corpus = Corpus {
        class_names: meta.classes,
        dims: meta.dims,
        max_speakers: meta.max_speakers,
        split: meta.split,
        dialogues: Vec::new(),
    };
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DialogueRecord = serde_json::from_str(&line)
            .map_err(|e| parse_err(i + 1, format!("malformed dialogue record: {e}")))?;
        let mut utterances = Vec::with_capacity(rec.utterances.len());
        for (j, u) in rec.utterances.into_iter().enumerate() {
            let label = corpus
                .class_names
                .iter()
                .position(|c| *c == u.label)
                .ok_or_else(|| {
                    parse_err(i + 1, format!("utterance {j}: unknown label \"{}\"", u.label))
                })?;
            utterances.push(Utterance {
                speaker: u.speaker,
                label,
                audio: u.a,
                visual: u.v,
                text: u.t,
            });
        }
        let d = Dialogue {
            id: rec.id,
            utterances,
        };
        validate_dialogue(&d, &corpus).map_err(|e| parse_err(i + 1, e.to_string()))?;
        corpus.dialogues.push(d);
    }
    corpus.validate()?;
    Ok(corpus)
}

/// Dialogue-level partition into `(train, test)`; `ratio` is the train share,
/// rounded down.
pub fn split_corpus(corpus: &Corpus, ratio: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    split_with(corpus, ratio, seed, Split::Train, Split::Test)
}

pub(crate) fn split_with(
    corpus: &Corpus,
    ratio: f64,
    seed: u64,
    first: Split,
    second: Split,
) -> Result<(Corpus, Corpus)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let n = corpus.dialogues.len();
    let n_first = ((ratio * n as f64) + 1e-9).floor() as usize;
    if n_first == 0 || n_first == n {
        return Err(Error::InvalidArgument(format!(
            "split of {n} dialogues at ratio {ratio} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Stream::Split));
    let mut a = order[..n_first].to_vec();
    let mut b = order[n_first..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    Ok((corpus.subset(&a, first), corpus.subset(&b, second)))
}
