//! Context-aware utterance encoders and speaker embeddings.
//!
//! Text runs through a single-layer bidirectional LSTM over the utterances
//! of a dialogue; audio and visual features go through one affine map each.
//! A speaker table maps each local speaker index to a layer-normalised
//! embedding, which is appended to every modality's encoding to form the
//! graph node initialisations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dialogue, FeatureDims};
use crate::error::{Error, Result};
use crate::modality::{Modality, ModalityMask};
use crate::numerics::{BoundParams, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dims: FeatureDims,
    /// Width of every modality encoding; the text LSTM uses `d_h / 2` per direction.
    pub d_h: usize,
    /// Width of the speaker embedding.
    pub d_s: usize,
    pub max_speakers: usize,
    pub speaker_embedding: bool,
}

impl EncoderConfig {
    /// Width of one node initialisation `[h, S]`.
    pub fn node_dim(&self) -> usize {
        self.d_h + self.speaker_dim()
    }

    pub fn speaker_dim(&self) -> usize {
        if self.speaker_embedding {
            self.d_s
        } else {
            0
        }
    }
}

pub const SPEAKER_TABLE: &str = "speaker.table";
pub const SPEAKER_BIAS: &str = "speaker.bias";
pub const SPEAKER_NORM_GAIN: &str = "speaker.norm.gain";
pub const SPEAKER_NORM_BIAS: &str = "speaker.norm.bias";

fn lstm_prefix(backward: bool) -> &'static str {
    if backward {
        "encoder.text.bwd"
    } else {
        "encoder.text.fwd"
    }
}

fn affine_names(m: Modality) -> (String, String) {
    (
        format!("encoder.{}.weight", m.name()),
        format!("encoder.{}.bias", m.name()),
    )
}

/// Adds encoder parameters for the active modalities to `store`.
pub fn init_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    mask: ModalityMask,
    rng: &mut R,
) -> Result<()> {
    if cfg.d_h == 0 || cfg.d_h % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "d_h must be a positive even number, got {}",
            cfg.d_h
        )));
    }
    for m in mask.modalities() {
        match m {
            Modality::Text => {
                let hidden = cfg.d_h / 2;
                for backward in [false, true] {
                    let p = lstm_prefix(backward);
                    store.insert_uniform(format!("{p}.w_input"), cfg.dims.t, 4 * hidden, rng);
                    store.insert_uniform(format!("{p}.w_hidden"), hidden, 4 * hidden, rng);
                    // Gate layout [input, forget, cell, output]; forget bias starts at 1.
                    let mut b = Tensor::zeros(1, 4 * hidden);
                    for v in &mut b.data_mut()[hidden..2 * hidden] {
                        *v = 1.0;
                    }
                    store.insert(format!("{p}.bias"), b);
                }
            }
            Modality::Audio | Modality::Visual => {
                let (w, b) = affine_names(m);
                store.insert_uniform(w, cfg.dims.get(m), cfg.d_h, rng);
                store.insert(b, Tensor::zeros(1, cfg.d_h));
            }
        }
    }
    if cfg.speaker_embedding {
        if cfg.d_s == 0 {
            return Err(Error::InvalidArgument("d_s must be positive".into()));
        }
        store.insert_uniform(SPEAKER_TABLE, cfg.max_speakers, cfg.d_s, rng);
        store.insert(SPEAKER_BIAS, Tensor::zeros(1, cfg.d_s));
        store.insert(SPEAKER_NORM_GAIN, Tensor::full(1, cfg.d_s, 1.0));
        store.insert(SPEAKER_NORM_BIAS, Tensor::zeros(1, cfg.d_s));
    }
    Ok(())
}

/// One LSTM direction over the rows of precomputed input projections.
/// Returns one hidden state per row, in input order.
fn lstm_direction(
    tape: &mut Tape,
    params: &BoundParams,
    x: Var,
    backward: bool,
) -> Result<Vec<Var>> {
    let p = lstm_prefix(backward);
    let w_input = params.var(&format!("{p}.w_input"))?;
    let w_hidden = params.var(&format!("{p}.w_hidden"))?;
    let bias = params.var(&format!("{p}.bias"))?;
    let hidden = tape.value(w_hidden).rows();
    let n = tape.value(x).rows();

    let projected = tape.matmul(x, w_input)?;
    let projected = tape.add_row(projected, bias)?;
    let mut h = tape.leaf(Tensor::zeros(1, hidden))?;
    let mut c = tape.leaf(Tensor::zeros(1, hidden))?;
    let mut states = vec![h; n];
    let order: Vec<usize> = if backward {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for i in order {
        let xi = tape.slice_rows(projected, i, 1)?;
        let rec = tape.matmul(h, w_hidden)?;
        let z = tape.add(xi, rec)?;
        let zi = tape.slice_cols(z, 0, hidden)?;
        let zf = tape.slice_cols(z, hidden, hidden)?;
        let zg = tape.slice_cols(z, 2 * hidden, hidden)?;
        let zo = tape.slice_cols(z, 3 * hidden, hidden)?;
        let ig = tape.sigmoid(zi)?;
        let fg = tape.sigmoid(zf)?;
        let gg = tape.tanh(zg)?;
        let og = tape.sigmoid(zo)?;
        let keep = tape.mul(fg, c)?;
        let write = tape.mul(ig, gg)?;
        c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        h = tape.mul(og, tc)?;
        states[i] = h;
    }
    Ok(states)
}

/// Bidirectional LSTM over an `N x d_t` sequence; row `i` of the `N x d_h`
/// output is `[forward state at i, backward state at i]`.
pub fn encode_text(tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
    let n = tape.value(x).rows();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot encode an empty sequence".into()));
    }
    let expected = tape
        .value(params.var(&format!("{}.w_input", lstm_prefix(false)))?)
        .rows();
    if tape.value(x).cols() != expected {
        return Err(Error::shape(
            "encode_text",
            format!("input width {}, expected {expected}", tape.value(x).cols()),
        ));
    }
    let fwd = lstm_direction(tape, params, x, false)?;
    let bwd = lstm_direction(tape, params, x, true)?;
    let fwd = tape.concat_rows(&fwd)?;
    let bwd = tape.concat_rows(&bwd)?;
    tape.concat_cols(&[fwd, bwd])
}

/// `x W + b` for the audio or visual encoder; no activation.
pub fn encode_affine(tape: &mut Tape, params: &BoundParams, m: Modality, x: Var) -> Result<Var> {
    let (w, b) = affine_names(m);
    let w = params.var(&w)?;
    let b = params.var(&b)?;
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

/// Context-aware encoding of one modality for every utterance (`N x d_h`).
pub fn encode_modality(
    tape: &mut Tape,
    params: &BoundParams,
    m: Modality,
    dialogue: &Dialogue,
) -> Result<Var> {
    let x = tape.leaf(dialogue.feature_matrix(m)?)?;
    match m {
        Modality::Text => encode_text(tape, params, x),
        Modality::Audio | Modality::Visual => encode_affine(tape, params, m, x),
    }
}

/// Layer-normalised speaker embeddings, one row per utterance (`N x d_s`):
/// `layer_norm(onehot(s_i) W_s + b_s)`.
pub fn speaker_embed(tape: &mut Tape, params: &BoundParams, speakers: &[usize]) -> Result<Var> {
    let table = params.var(SPEAKER_TABLE)?;
    let m = tape.value(table).rows();
    if let Some(&bad) = speakers.iter().find(|&&s| s >= m) {
        return Err(Error::InvalidArgument(format!(
            "speaker index {bad} out of range for {m} speakers"
        )));
    }
    let mut onehot = Tensor::zeros(speakers.len(), m);
    for (i, &s) in speakers.iter().enumerate() {
        onehot.set(i, s, 1.0);
    }
    let onehot = tape.leaf(onehot)?;
    let raw = tape.matmul(onehot, table)?;
    let bias = params.var(SPEAKER_BIAS)?;
    let raw = tape.add_row(raw, bias)?;
    let gain = params.var(SPEAKER_NORM_GAIN)?;
    let shift = params.var(SPEAKER_NORM_BIAS)?;
    tape.layer_norm(raw, gain, shift)
}

/// Per-modality node initialisations `h'^m = [h^m, S]`, each `N x (d_h + d_s)`,
/// for the active modalities in a, v, t order.
#[derive(Clone, Debug)]
pub struct NodeInits {
    pub modalities: Vec<(Modality, Var)>,
    /// Encoder outputs before the speaker columns are attached.
    pub encodings: Vec<(Modality, Var)>,
    pub speaker: Option<Var>,
}

impl NodeInits {
    pub fn get(&self, m: Modality) -> Option<Var> {
        self.modalities.iter().find(|(k, _)| *k == m).map(|&(_, v)| v)
    }
}

/// Encodes every active modality, applies `dropout` to each encoding and
/// appends the speaker embedding.
pub fn build_node_inits(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &EncoderConfig,
    dialogue: &Dialogue,
    mask: ModalityMask,
    mut dropout: impl FnMut(&mut Tape, Var) -> Result<Var>,
) -> Result<NodeInits> {
    let speaker = if cfg.speaker_embedding {
        Some(speaker_embed(tape, params, &dialogue.speakers())?)
    } else {
        None
    };
    let mut modalities = Vec::new();
    let mut encodings = Vec::new();
    for m in mask.modalities() {
        let h = encode_modality(tape, params, m, dialogue)?;
        let h = dropout(tape, h)?;
        encodings.push((m, h));
        let node = match speaker {
            Some(s) => tape.concat_cols(&[h, s])?,
            None => h,
        };
        modalities.push((m, node));
    }
    Ok(NodeInits {
        modalities,
        encodings,
        speaker,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::Utterance;
    use crate::numerics::gradcheck;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            dims: FeatureDims { a: 3, v: 2, t: 4 },
            d_h: 4,
            d_s: 2,
            max_speakers: 2,
            speaker_embedding: true,
        }
    }

    fn dialogue(n: usize, seed: u64) -> Dialogue {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |d: usize| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>();
        Dialogue {
            id: "d".into(),
            utterances: (0..n)
                .map(|i| Utterance {
                    speaker: i % 2,
                    label: 0,
                    audio: v(3),
                    visual: v(2),
                    text: v(4),
                })
                .collect(),
        }
    }

    fn store(seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_params(&mut s, &cfg(), ModalityMask::ALL, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        s
    }

    fn text_output(store: &ParamStore, rows: &[Vec<f64>]) -> Tensor {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let x = tape.leaf(Tensor::from_rows(rows).unwrap()).unwrap();
        let y = encode_text(&mut tape, &p, x).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn text_length_one_concatenates_both_directions() {
        let s = store(1);
        let out = text_output(&s, &[vec![0.1, -0.2, 0.3, 0.4]]);
        assert_eq!(out.shape(), [1, 4]);
        // Both directions see the same single step from a zero state.
        let single = |prefix: &str| {
            let w = s.get(&format!("{prefix}.w_input")).unwrap();
            let b = s.get(&format!("{prefix}.bias")).unwrap();
            let x = Tensor::row_vector(&[0.1, -0.2, 0.3, 0.4]);
            let z = x.matmul(w).unwrap().zip_map(b, |a, c| a + c).unwrap();
            let z = z.data();
            (0..2)
                .map(|j| {
                    let i = crate::numerics::sigmoid(z[j]);
                    let g = z[4 + j].tanh();
                    let o = crate::numerics::sigmoid(z[6 + j]);
                    o * (i * g).tanh()
                })
                .collect::<Vec<_>>()
        };
        let mut expected = single("encoder.text.fwd");
        expected.extend(single("encoder.text.bwd"));
        assert!(out.max_abs_diff(&Tensor::row_vector(&expected)) < 1e-14);
    }

    #[test]
    fn reversing_sequence_swaps_directions() {
        // Give both directions identical weights: reversing the input then
        // mirrors positions and swaps the two halves exactly.
        let mut s = store(2);
        for part in ["w_input", "w_hidden", "bias"] {
            let fwd = s.get(&format!("encoder.text.fwd.{part}")).unwrap().clone();
            s.insert(format!("encoder.text.bwd.{part}"), fwd);
        }
        let d = dialogue(5, 3);
        let rows: Vec<Vec<f64>> = d.utterances.iter().map(|u| u.text.clone()).collect();
        let mut rev = rows.clone();
        rev.reverse();
        let a = text_output(&s, &rows);
        let b = text_output(&s, &rev);
        for i in 0..5 {
            let j = 4 - i;
            assert_eq!(&a.row(i)[..2], &b.row(j)[2..]);
            assert_eq!(&a.row(i)[2..], &b.row(j)[..2]);
        }
    }

    #[test]
    fn zero_text_weights_give_zero_output() {
        let mut s = store(3);
        let names: Vec<String> = s.names().filter(|n| n.starts_with("encoder.text")).map(String::from).collect();
        for n in names {
            let t = s.get_mut(&n).unwrap();
            *t = Tensor::zeros(t.rows(), t.cols());
        }
        let d = dialogue(4, 4);
        let rows: Vec<Vec<f64>> = d.utterances.iter().map(|u| u.text.clone()).collect();
        assert!(text_output(&s, &rows).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn text_rejects_wrong_width() {
        let s = store(3);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape).unwrap();
        let x = tape.leaf(Tensor::zeros(2, 3)).unwrap();
        assert!(encode_text(&mut tape, &p, x).is_err());
    }

    #[test]
    fn affine_encoder_examples() {
        let mut c = cfg();
        c.dims.a = 4;
        let mut s = ParamStore::new();
        init_params(&mut s, &c, ModalityMask::only(Modality::Audio), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        s.insert("encoder.audio.weight", Tensor::identity(4));
        let mut tape = Tape::new();
        let p = s.bind(&mut tape).unwrap();
        let u = Tensor::row_vector(&[0.5, -1.0, 2.0, 0.0]);
        let x = tape.leaf(u.clone()).unwrap();
        let y = encode_affine(&mut tape, &p, Modality::Audio, x).unwrap();
        assert_eq!(tape.value(y), &u);

        let b = Tensor::row_vector(&[1.0, 2.0, 3.0, 4.0]);
        s.insert("encoder.audio.bias", b.clone());
        let mut tape = Tape::new();
        let p = s.bind(&mut tape).unwrap();
        let x = tape.leaf(Tensor::zeros(1, 4)).unwrap();
        let y = encode_affine(&mut tape, &p, Modality::Audio, x).unwrap();
        assert_eq!(tape.value(y), &b);

        // Random weights against a hand-rolled matrix-vector product.
        let s = store(5);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape).unwrap();
        let u = [0.3, -0.7];
        let x = tape.leaf(Tensor::row_vector(&u)).unwrap();
        let y = encode_affine(&mut tape, &p, Modality::Visual, x).unwrap();
        let w = s.get("encoder.visual.weight").unwrap();
        for j in 0..4 {
            let expected = u[0] * w.get(0, j) + u[1] * w.get(1, j);
            assert!((tape.value(y).get(0, j) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn speaker_embedding_examples() {
        let s = store(6);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape).unwrap();
        let e = speaker_embed(&mut tape, &p, &[0, 1, 0]).unwrap();
        let e = tape.value(e).clone();
        assert_eq!(e.row(0), e.row(2));
        assert_ne!(e.row(0), e.row(1));
        // Speaker i maps to the normalised row i of the table.
        let table = s.get(SPEAKER_TABLE).unwrap();
        for i in 0..2 {
            let row = table.row(i);
            let mean = row.iter().sum::<f64>() / 2.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 2.0;
            let inv = 1.0 / (var + crate::numerics::LAYER_NORM_EPS).sqrt();
            for j in 0..2 {
                assert!((e.get(i, j) - (row[j] - mean) * inv).abs() < 1e-14);
            }
            assert!(e.row(i).iter().sum::<f64>().abs() < 1e-12);
        }
        let mut tape = Tape::new();
        let p = s.bind(&mut tape).unwrap();
        assert!(speaker_embed(&mut tape, &p, &[2]).is_err());
    }

    #[test]
    fn node_inits_shapes_and_shared_speaker_columns() {
        let s = store(7);
        let d = dialogue(3, 8);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape).unwrap();
        let inits =
            build_node_inits(&mut tape, &p, &cfg(), &d, ModalityMask::ALL, |_, v| Ok(v)).unwrap();
        assert_eq!(inits.modalities.len(), 3);
        let a = tape.value(inits.get(Modality::Audio).unwrap()).clone();
        let t = tape.value(inits.get(Modality::Text).unwrap()).clone();
        assert_eq!(a.shape(), [3, 6]);
        for i in 0..3 {
            assert_eq!(&a.row(i)[4..], &t.row(i)[4..]);
        }
    }

    #[test]
    fn zeroed_speaker_gain_pins_columns_to_bias() {
        let mut s = store(9);
        s.insert(SPEAKER_TABLE, Tensor::zeros(2, 2));
        s.insert(SPEAKER_NORM_GAIN, Tensor::zeros(1, 2));
        s.insert(SPEAKER_NORM_BIAS, Tensor::row_vector(&[0.3, -0.2]));
        let d = dialogue(4, 10);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape).unwrap();
        let inits =
            build_node_inits(&mut tape, &p, &cfg(), &d, ModalityMask::ALL, |_, v| Ok(v)).unwrap();
        for (_, v) in &inits.modalities {
            for i in 0..4 {
                assert_eq!(&tape.value(*v).row(i)[4..], &[0.3, -0.2]);
            }
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let s = store(11);
        let d = dialogue(3, 12);
        let loss_of = |store: &ParamStore| -> Result<(Tape, BoundParams, Var)> {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape)?;
            let inits = build_node_inits(&mut tape, &p, &cfg(), &d, ModalityMask::ALL, |_, v| Ok(v))?;
            let all: Vec<Var> = inits.modalities.iter().map(|&(_, v)| v).collect();
            let cat = tape.concat_cols(&all)?;
            let sq = tape.tanh(cat)?;
            let w = tape.leaf(Tensor::from_vec(3, 18, (0..54).map(|i| (i as f64).cos()).collect())?)?;
            let prod = tape.mul(sq, w)?;
            let loss = tape.sum(prod)?;
            Ok((tape, p, loss))
        };
        let (tape, p, loss) = loss_of(&s).unwrap();
        let grads = p.gradients(&tape, &tape.backward(loss).unwrap());
        for (name, g) in &grads {
            let err = gradcheck::max_relative_error(&s, name, g.data(), 1e-5, 1e-6, |st| {
                let (t, _, l) = loss_of(st)?;
                Ok(t.value(l).get(0, 0))
            })
            .unwrap();
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }
}
