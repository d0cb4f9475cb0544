//! The full relevance model: sentence encoder, gated image projection and
//! pair scoring, wired onto a tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_matrix, LstmParams, LstmVars};
use crate::error::{Error, Result};
use crate::image::{compute_gate, project_gated, GateParams, GateVars};
use crate::loss::{pair_scores, ScoreKind};
use crate::tensor::{Mode, Tape, Tensor, Var};
use crate::vocab::{embed_matrix, EmbeddingTable, Sentence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub feature_dim: usize,
}

/// Every trainable array.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embeddings: EmbeddingTable,
    pub lstm: LstmParams,
    pub gate: GateParams,
}

/// Parameter group names, in the order used by [`ModelParams::groups`].
pub const GROUP_NAMES: [&str; 7] = [
    "embeddings",
    "lstm.w_input",
    "lstm.w_recurrent",
    "lstm.bias",
    "gate.w_gate",
    "gate.b_gate",
    "gate.w_proj",
];

impl ModelParams {
    /// N(0, 0.1²) everywhere, drawn in a fixed order from `rng`.
    pub fn random<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Self {
        let embeddings = EmbeddingTable::random(dims.vocab_size, dims.embed_dim, rng);
        let lstm = LstmParams::random(dims.embed_dim, dims.hidden, rng);
        let gate = GateParams::random(dims.hidden, dims.feature_dim, rng);
        Self {
            embeddings,
            lstm,
            gate,
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab_size: self.embeddings.vocab_size(),
            embed_dim: self.embeddings.dim(),
            hidden: self.lstm.hidden(),
            feature_dim: self.gate.feature_dim(),
        }
    }

    pub fn groups(&self) -> [(&'static str, &Tensor); 7] {
        let n = GROUP_NAMES;
        [
            (n[0], &self.embeddings.weights),
            (n[1], &self.lstm.w_input),
            (n[2], &self.lstm.w_recurrent),
            (n[3], &self.lstm.bias),
            (n[4], &self.gate.w_gate),
            (n[5], &self.gate.b_gate),
            (n[6], &self.gate.w_proj),
        ]
    }

    pub fn groups_mut(&mut self) -> [(&'static str, &mut Tensor); 7] {
        let n = GROUP_NAMES;
        [
            (n[0], &mut self.embeddings.weights),
            (n[1], &mut self.lstm.w_input),
            (n[2], &mut self.lstm.w_recurrent),
            (n[3], &mut self.lstm.bias),
            (n[4], &mut self.gate.w_gate),
            (n[5], &mut self.gate.b_gate),
            (n[6], &mut self.gate.w_proj),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|(_, t)| t.is_finite())
    }

    /// Registers every array on the tape as a trainable leaf.
    pub fn track(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            embeddings: tape.param(self.embeddings.weights.clone()),
            lstm: LstmVars::track(tape, &self.lstm),
            gate: GateVars::track(tape, &self.gate),
        }
    }

    /// Registers every array as a constant.
    pub fn frozen(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            embeddings: tape.constant(self.embeddings.weights.clone()),
            lstm: LstmVars::frozen(tape, &self.lstm),
            gate: GateVars::frozen(tape, &self.gate),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub embeddings: Var,
    pub lstm: LstmVars,
    pub gate: GateVars,
}

impl ModelVars {
    pub fn vars(&self) -> [Var; 7] {
        [
            self.embeddings,
            self.lstm.w_input,
            self.lstm.w_recurrent,
            self.lstm.bias,
            self.gate.w_gate,
            self.gate.b_gate,
            self.gate.w_proj,
        ]
    }
}

/// Architecture switches that are not parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardConfig {
    pub gating: bool,
    pub score: ScoreKind,
    pub dropout: f64,
}

/// Sentence vectors `u` for each sentence, stacked as `S x H`.
pub fn sentence_vectors<R: Rng + ?Sized>(
    tape: &mut Tape,
    vars: &ModelVars,
    sentences: &[&Sentence],
    cfg: &ForwardConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if sentences.is_empty() {
        return Err(Error::Contract("no sentences to encode".into()));
    }
    let mut rows = Vec::with_capacity(sentences.len());
    for s in sentences {
        let tokens = embed_matrix(tape, vars.embeddings, s, cfg.dropout, mode, rng)?;
        rows.push(encode_matrix(tape, tokens, &vars.lstm)?);
    }
    tape.stack_rows(&rows)
}

/// Stacks raw feature rows as an `I x K` constant.
pub fn image_matrix(tape: &mut Tape, images: &[&[f64]], feature_dim: usize) -> Result<Var> {
    if images.is_empty() {
        return Err(Error::Contract("no images to score".into()));
    }
    let mut data = Vec::with_capacity(images.len() * feature_dim);
    for x in images {
        if x.len() != feature_dim {
            return Err(Error::Data(format!(
                "image feature width {} does not match model feature width {feature_dim}",
                x.len()
            )));
        }
        data.extend_from_slice(x);
    }
    Ok(tape.constant(Tensor::matrix(images.len(), feature_dim, data)?))
}

/// Scores `(sentence, image)` index pairs as a `P x 1` node, given sentence
/// vectors `u` (`S x H`) and already-dropped-out image features `x` (`I x K`).
pub fn score_pairs(
    tape: &mut Tape,
    gate: &GateVars,
    u: Var,
    x: Var,
    pairs: &[(usize, usize)],
    cfg: &ForwardConfig,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Contract("no pairs to score".into()));
    }
    let sent_idx: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let img_idx: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let v = if cfg.gating {
        let z = compute_gate(tape, u, gate)?;
        let z_pairs = tape.gather_rows(z, &sent_idx)?;
        let x_pairs = tape.gather_rows(x, &img_idx)?;
        project_gated(tape, x_pairs, Some(z_pairs), gate.w_proj)?
    } else {
        let v_img = project_gated(tape, x, None, gate.w_proj)?;
        tape.gather_rows(v_img, &img_idx)?
    };
    let u_pairs = tape.gather_rows(u, &sent_idx)?;
    pair_scores(tape, u_pairs, v, cfg.score)
}

/// The `B x B` training score matrix for aligned sentences and images:
/// entry `(i, j)` scores sentence `j` against image `i`. Dropout masks are
/// drawn once per sentence and once per image.
pub fn batch_scores<R: Rng + ?Sized>(
    tape: &mut Tape,
    vars: &ModelVars,
    sentences: &[&Sentence],
    images: &[&[f64]],
    cfg: &ForwardConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let b = sentences.len();
    if images.len() != b {
        return Err(Error::Contract(format!(
            "{b} sentences but {} images in batch",
            images.len()
        )));
    }
    let feature_dim = tape.value(vars.gate.w_proj).rows();
    let u = sentence_vectors(tape, vars, sentences, cfg, mode, rng)?;
    let x = image_matrix(tape, images, feature_dim)?;
    let x = tape.dropout(x, cfg.dropout, mode, rng)?;
    let pairs: Vec<(usize, usize)> = (0..b).flat_map(|i| (0..b).map(move |j| (j, i))).collect();
    let flat = score_pairs(tape, &vars.gate, u, x, &pairs, cfg)?;
    tape.reshape(flat, &[b, b])
}

/// A trained model evaluated in test mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: ModelParams,
    pub config: ForwardConfig,
}

/// Pairs scored per tape when evaluating large lists.
const SCORE_CHUNK: usize = 2048;

impl Model {
    pub fn new(params: ModelParams, config: ForwardConfig) -> Self {
        Self { params, config }
    }

    pub fn feature_dim(&self) -> usize {
        self.params.gate.feature_dim()
    }

    /// Test-mode sentence vectors, `S x H`.
    pub fn encode(&self, sentences: &[&Sentence]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.frozen(&mut tape);
        // Test mode draws no random numbers.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = sentence_vectors(&mut tape, &vars, sentences, &self.config, Mode::Test, &mut rng)?;
        Ok(tape.value(u).clone())
    }

    /// Gate activations `z` for each sentence, `S x K`.
    pub fn gates(&self, sentences: &[&Sentence]) -> Result<Tensor> {
        let u = self.encode(sentences)?;
        let mut tape = Tape::new();
        let gate = GateVars::frozen(&mut tape, &self.params.gate);
        let uv = tape.constant(u);
        let z = compute_gate(&mut tape, uv, &gate)?;
        Ok(tape.value(z).clone())
    }

    /// Scores `(sentence index, image index)` pairs in test mode.
    pub fn score_pairs(&self, sentences: &[&Sentence], images: &[&[f64]], pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        for &(s, i) in pairs {
            if s >= sentences.len() || i >= images.len() {
                return Err(Error::Contract(format!("pair ({s}, {i}) out of range")));
            }
        }
        let u = self.encode(sentences)?;
        let k = self.feature_dim();
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(SCORE_CHUNK) {
            let mut tape = Tape::new();
            let gate = GateVars::frozen(&mut tape, &self.params.gate);
            let uv = tape.constant(u.clone());
            let x = image_matrix(&mut tape, images, k)?;
            let x = tape.scale(x, 1.0 - self.config.dropout);
            let s = score_pairs(&mut tape, &gate, uv, x, chunk, &self.config)?;
            out.extend_from_slice(tape.value(s).data());
        }
        if let Some(bad) = out.iter().find(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite score {bad}")));
        }
        Ok(out)
    }

    pub fn score(&self, sentence: &Sentence, image: &[f64]) -> Result<f64> {
        Ok(self.score_pairs(&[sentence], &[image], &[(0, 0)])?[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{build_vocab, encode_sentence, tokenize};

    fn setup() -> (Vec<Sentence>, ModelParams) {
        let corpus = ["a red dog runs", "two cats sleep", "a bird in the sky"];
        let tokenized: Vec<Vec<String>> = corpus.iter().map(|s| tokenize(s)).collect();
        let vocab = build_vocab(&tokenized, 1).unwrap();
        let sentences = corpus.iter().map(|s| encode_sentence(s, &vocab).unwrap()).collect();
        let dims = ModelDims {
            vocab_size: vocab.len(),
            embed_dim: 4,
            hidden: 4,
            feature_dim: 6,
        };
        let params = ModelParams::random(dims, &mut ChaCha8Rng::seed_from_u64(1));
        (sentences, params)
    }

    fn images(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn batch_matrix_agrees_with_single_pair_scores() {
        let (sentences, params) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let imgs = images(&mut rng, 3, 6);
        let img_refs: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
        let sent_refs: Vec<&Sentence> = sentences.iter().collect();
        for gating in [true, false] {
            for score in [ScoreKind::Cosine, ScoreKind::Dot] {
                let cfg = ForwardConfig {
                    gating,
                    score,
                    dropout: 0.5,
                };
                let model = Model::new(params.clone(), cfg);
                let mut tape = Tape::new();
                let vars = params.frozen(&mut tape);
                let m = batch_scores(&mut tape, &vars, &sent_refs, &img_refs, &cfg, Mode::Test, &mut rng).unwrap();
                for i in 0..3 {
                    for j in 0..3 {
                        let single = model.score(&sentences[j], &imgs[i]).unwrap();
                        assert!((tape.value(m).get(i, j) - single).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn wrong_feature_width_is_a_data_error() {
        let (sentences, params) = setup();
        let model = Model::new(
            params,
            ForwardConfig {
                gating: true,
                score: ScoreKind::Dot,
                dropout: 0.0,
            },
        );
        let err = model.score(&sentences[0], &[0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains('5') && err.to_string().contains('6'));
    }

    #[test]
    fn gates_lie_in_unit_interval() {
        let (sentences, params) = setup();
        let model = Model::new(
            params,
            ForwardConfig {
                gating: true,
                score: ScoreKind::Dot,
                dropout: 0.5,
            },
        );
        let refs: Vec<&Sentence> = sentences.iter().collect();
        let z = model.gates(&refs).unwrap();
        assert_eq!(z.shape(), &[3, 6]);
        assert!(z.data().iter().all(|&g| g > 0.0 && g < 1.0));
    }
}
