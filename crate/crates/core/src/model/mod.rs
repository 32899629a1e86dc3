//! Forward path: text-conditioned frame pooling, per-stream concept
//! projection, the confidence MLP and confidence-weighted cosine similarity.
//!
//! Pair layouts follow one convention throughout: for `q` captions and `g`
//! videos, pair `(i, j)` lives in row `i·g + j`.

mod checkpoint;
pub(crate) mod params;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, stored_precision, CheckpointHeader, Dtype, TensorInfo};
pub(crate) use checkpoint::{decode_payload, encode_payload, read_container, write_container};
pub use params::{check_dims, ModelParams, TagUsage, Temperatures, MLP_HIDDEN, TENSOR_NAMES};

use crate::databank::{BatchIndex, FeatureBank};
use crate::error::{Error, Result};
use crate::numkernel::{dot, sigmoid, softmax_rows, Matrix, Tape, Var, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stream {
    #[serde(rename = "v")]
    Video,
    #[serde(rename = "t")]
    Text,
    #[serde(rename = "av")]
    TagVisual,
    #[serde(rename = "at")]
    TagTextual,
}

impl Stream {
    pub const ALL: [Stream; 4] = [Stream::Video, Stream::Text, Stream::TagVisual, Stream::TagTextual];

    pub fn label(self) -> &'static str {
        match self {
            Stream::Video => "v",
            Stream::Text => "t",
            Stream::TagVisual => "av",
            Stream::TagTextual => "at",
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// K concept sub-vectors of one sample in one stream, stored as a `K×(d/K)` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSet {
    pub stream: Stream,
    pub concepts: Matrix,
}

impl ConceptSet {
    pub fn k(&self) -> usize {
        self.concepts.rows()
    }

    pub fn concept(&self, k: usize) -> &[f64] {
        self.concepts.row(k)
    }
}

/// Per-concept matching confidences, each in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceVector(pub Vec<f64>);

impl ModelParams {
    pub fn projector(&self, stream: Stream) -> &Matrix {
        match stream {
            Stream::Video => &self.w_video,
            Stream::Text => &self.w_text,
            Stream::TagVisual => &self.w_tag_visual,
            Stream::TagTextual => &self.w_tag_textual,
        }
    }
}

/// Attention-pooled video embedding for one caption: frame weights are the
/// softmax over frames of `⟨text, frame⟩ / temperature`.
pub fn text_conditioned_pool(text: &[f64], frames: &[f64], temperature: f64) -> Result<Vec<f64>> {
    let d = text.len();
    if d == 0 || frames.is_empty() || !frames.len().is_multiple_of(d) {
        return Err(Error::Dimension {
            op: "text_conditioned_pool",
            left: (1, d),
            right: (frames.len() / d.max(1), d),
        });
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Parameter(format!(
            "pool temperature must be positive, got {temperature}"
        )));
    }
    let logits: Vec<f64> = frames.chunks_exact(d).map(|f| dot(text, f)).collect();
    let weights = softmax_rows(&Matrix::row_vector(&logits), temperature);
    let mut pooled = vec![0.0; d];
    for (w, f) in weights.data().iter().zip(frames.chunks_exact(d)) {
        for (p, x) in pooled.iter_mut().zip(f) {
            *p += w * x;
        }
    }
    Ok(pooled)
}

/// Differentiable pooling: `text` is `1×d`, `frames` is `N_v×d`.
pub fn text_conditioned_pool_on_tape(tape: &mut Tape, text: Var, frames: Var, temperature: f64) -> Result<Var> {
    let frames_t = tape.transpose(frames);
    let logits = tape.matmul(text, frames_t)?;
    let weights = tape.softmax_rows(logits, temperature)?;
    tape.matmul(weights, frames)
}

/// Pooled video embeddings for every (caption, video) pair, `(q·g)×d`.
pub fn pool_pairs(bank: &FeatureBank, captions: &[usize], videos: &[usize], temperature: f64) -> Result<Matrix> {
    pool_pairs_across(bank, bank, captions, videos, temperature)
}

/// [`pool_pairs`] with captions and videos drawn from different banks.
pub fn pool_pairs_across(
    query_bank: &FeatureBank,
    gallery_bank: &FeatureBank,
    captions: &[usize],
    videos: &[usize],
    temperature: f64,
) -> Result<Matrix> {
    let d = gallery_bank.d();
    let mut data = Vec::with_capacity(captions.len() * videos.len() * d);
    for &i in captions {
        for &j in videos {
            data.extend(text_conditioned_pool(query_bank.text_row(i), gallery_bank.frames_of(j), temperature)?);
        }
    }
    Matrix::new(captions.len() * videos.len(), d, data)
}

/// Projects `x` with each of the stream's `K` matrices.
pub fn disentangle(params: &ModelParams, x: &[f64], stream: Stream) -> Result<ConceptSet> {
    if x.len() != params.d {
        return Err(Error::Dimension {
            op: "disentangle",
            left: (1, x.len()),
            right: (1, params.d),
        });
    }
    let projected = Matrix::row_vector(x).matmul_transposed(params.projector(stream))?;
    Ok(ConceptSet {
        stream,
        concepts: projected.reshape(params.k, params.concept_dim())?,
    })
}

/// `sigmoid(w2 · relu(w1 · [v, t, av, at] + b1) + b2)` for one concept index.
pub fn confidence(params: &ModelParams, video: &[f64], text: &[f64], tag_visual: &[f64], tag_textual: &[f64]) -> Result<f64> {
    let m = params.concept_dim();
    if [video, text, tag_visual, tag_textual].iter().any(|x| x.len() != m) {
        return Err(Error::Parameter(format!("confidence inputs must each have {m} entries")));
    }
    let mut input = Vec::with_capacity(4 * m);
    for part in [video, text, tag_visual, tag_textual] {
        input.extend_from_slice(part);
    }
    let mut out = params.mlp_b2.item();
    for h in 0..MLP_HIDDEN {
        let pre = dot(params.mlp_w1.row(h), &input) + params.mlp_b1.data()[h];
        out += params.mlp_w2.data()[h] * pre.max(0.0);
    }
    Ok(sigmoid(out))
}

/// Confidences for all K concepts of one (caption, video) pair. Disabled tag
/// streams are fed as zero vectors.
pub fn confidences(
    params: &ModelParams,
    video: &ConceptSet,
    text: &ConceptSet,
    tag_visual: &ConceptSet,
    tag_textual: &ConceptSet,
) -> Result<ConfidenceVector> {
    let zeros = vec![0.0; params.concept_dim()];
    (0..params.k)
        .map(|k| {
            let av = if params.tags.visual { tag_visual.concept(k) } else { &zeros };
            let at = if params.tags.textual { tag_textual.concept(k) } else { &zeros };
            confidence(params, video.concept(k), text.concept(k), av, at)
        })
        .collect::<Result<_>>()
        .map(ConfidenceVector)
}

fn cosine(a: &[f64], b: &[f64], row: usize) -> Result<f64> {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Err(Error::Degenerate {
            op: "weighted_similarity",
            row,
        });
    }
    Ok(dot(a, b) / (na * nb))
}

/// `Σ_k c_k · cos(text_k, video_k)`.
pub fn weighted_similarity(text: &ConceptSet, video: &ConceptSet, c: &ConfidenceVector) -> Result<f64> {
    if text.concepts.shape() != video.concepts.shape() || c.0.len() != text.k() {
        return Err(Error::Dimension {
            op: "weighted_similarity",
            left: text.concepts.shape(),
            right: video.concepts.shape(),
        });
    }
    let mut s = 0.0;
    for (k, ck) in c.0.iter().enumerate() {
        s += ck * cosine(text.concept(k), video.concept(k), k)?;
    }
    Ok(s)
}

/// Tape handles of the trainable tensors.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub w_video: Var,
    pub w_text: Var,
    pub w_tag_visual: Var,
    pub w_tag_textual: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

impl ParamVars {
    /// Registers the tensors as trainable (`trainable = true`) or constant leaves.
    pub fn register(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        Self {
            w_video: leaf(&params.w_video),
            w_text: leaf(&params.w_text),
            w_tag_visual: leaf(&params.w_tag_visual),
            w_tag_textual: leaf(&params.w_tag_textual),
            mlp_w1: leaf(&params.mlp_w1),
            mlp_b1: leaf(&params.mlp_b1),
            mlp_w2: leaf(&params.mlp_w2),
            mlp_b2: leaf(&params.mlp_b2),
        }
    }

    pub fn all(&self) -> [Var; 8] {
        [
            self.w_video,
            self.w_text,
            self.w_tag_visual,
            self.w_tag_textual,
            self.mlp_w1,
            self.mlp_b1,
            self.mlp_w2,
            self.mlp_b2,
        ]
    }
}

/// Frozen-encoder inputs for scoring `q` captions against `g` videos.
#[derive(Debug, Clone)]
pub struct PairInputs {
    /// `q×d` caption embeddings.
    pub text: Matrix,
    /// `q×d` textual-tag sentence embeddings.
    pub tag_textual: Matrix,
    /// `g×d` visual-tag sentence embeddings.
    pub tag_visual: Matrix,
    /// `(q·g)×d` pooled video embeddings; row `i·g + j` pools video `j` under caption `i`.
    pub video_pairs: Matrix,
}

impl PairInputs {
    pub fn gather(bank: &FeatureBank, captions: &BatchIndex, videos: &BatchIndex, pool_temperature: f64) -> Result<Self> {
        Self::gather_across(bank, bank, captions, videos, pool_temperature)
    }

    /// Captions (and their textual tags) from `query_bank`, videos (and
    /// their visual tags) from `gallery_bank`.
    pub fn gather_across(
        query_bank: &FeatureBank,
        gallery_bank: &FeatureBank,
        captions: &BatchIndex,
        videos: &BatchIndex,
        pool_temperature: f64,
    ) -> Result<Self> {
        if query_bank.d() != gallery_bank.d() {
            return Err(Error::Dimension {
                op: "gather_across",
                left: (query_bank.len(), query_bank.d()),
                right: (gallery_bank.len(), gallery_bank.d()),
            });
        }
        let (bank, q) = (query_bank, captions.len());
        let g = videos.len();
        let text = stack_rows(bank.d(), captions.samples.iter().map(|&i| bank.text_row(i)))?;
        let tag_textual = stack_rows(
            bank.d(),
            (0..q).map(|r| bank.tag_textual_row(captions.samples[r], captions.textual_variants[r])),
        )?;
        let tag_visual = stack_rows(
            bank.d(),
            (0..g).map(|r| gallery_bank.tag_visual_row(videos.samples[r], videos.visual_variants[r])),
        )?;
        Ok(Self {
            text,
            tag_textual,
            tag_visual,
            video_pairs: pool_pairs_across(query_bank, gallery_bank, &captions.samples, &videos.samples, pool_temperature)?,
        })
    }

    pub fn n_captions(&self) -> usize {
        self.text.rows()
    }

    pub fn n_videos(&self) -> usize {
        self.tag_visual.rows()
    }
}

fn stack_rows<'a>(d: usize, rows: impl Iterator<Item = &'a [f64]>) -> Result<Matrix> {
    let mut data = Vec::new();
    for r in rows {
        data.extend_from_slice(r);
    }
    Matrix::new(data.len() / d, d, data)
}

/// Tape outputs of [`forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `q×g` similarity matrix.
    pub similarity: Var,
    /// `q×d` caption concepts.
    pub text: Var,
    /// `q×d` textual-tag concepts.
    pub tag_textual: Var,
    /// `g×d` visual-tag concepts.
    pub tag_visual: Var,
    /// `(q·g)×d` video concepts per pair.
    pub video_pairs: Var,
}

/// Builds the similarity computation on `tape`.
pub fn forward(tape: &mut Tape, params: &ModelParams, vars: &ParamVars, inputs: &PairInputs) -> Result<ForwardOutput> {
    let (q, g) = (inputs.n_captions(), inputs.n_videos());
    if inputs.video_pairs.rows() != q * g {
        return Err(Error::Dimension {
            op: "forward",
            left: inputs.video_pairs.shape(),
            right: (q * g, params.d),
        });
    }
    let m = params.concept_dim();

    let project = |tape: &mut Tape, x: &Matrix, w: Var| -> Result<Var> {
        let x = tape.constant(x.clone());
        let wt = tape.transpose(w);
        tape.matmul(x, wt)
    };
    let text = project(tape, &inputs.text, vars.w_text)?;
    let tag_textual = project(tape, &inputs.tag_textual, vars.w_tag_textual)?;
    let tag_visual = project(tape, &inputs.tag_visual, vars.w_tag_visual)?;
    let video_pairs = project(tape, &inputs.video_pairs, vars.w_video)?;

    let mut w1_blocks = [vars.mlp_w1; 4];
    for (b, slot) in w1_blocks.iter_mut().enumerate() {
        *slot = tape.slice_cols(vars.mlp_w1, b * m, (b + 1) * m)?;
    }
    let [w1_video, w1_text, w1_tag_visual, w1_tag_textual] = w1_blocks.map(|w| (w, tape.transpose(w)));

    let mut total: Option<Var> = None;
    for k in 0..params.k {
        let (lo, hi) = (k * m, (k + 1) * m);
        let ev = tape.slice_cols(video_pairs, lo, hi)?;
        let et = tape.slice_cols(text, lo, hi)?;

        let mut caption_side = tape.matmul(et, w1_text.1)?;
        if params.tags.textual {
            let eat = tape.slice_cols(tag_textual, lo, hi)?;
            let h = tape.matmul(eat, w1_tag_textual.1)?;
            caption_side = tape.add(caption_side, h)?;
        }
        let gallery_side = if params.tags.visual {
            let eav = tape.slice_cols(tag_visual, lo, hi)?;
            Some(tape.matmul(eav, w1_tag_visual.1)?)
        } else {
            None
        };
        let logit = tape.pair_mlp(ev, w1_video.0, caption_side, gallery_side, vars.mlp_b1, vars.mlp_w2)?;
        let logit = tape.add_row(logit, vars.mlp_b2)?;
        let conf = tape.sigmoid(logit);

        let nv = tape.l2_normalize_rows(ev)?;
        let nt = tape.l2_normalize_rows(et)?;
        let nt = tape.repeat_each_row(nt, g);
        let prod = tape.mul(nv, nt)?;
        let cos = tape.sum_rows(prod);
        let term = tape.mul(conf, cos)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let flat = total.expect("K >= 1");
    let similarity = tape.reshape(flat, q, g)?;
    Ok(ForwardOutput {
        similarity,
        text,
        tag_textual,
        tag_visual,
        video_pairs,
    })
}

/// Similarity of every caption in `captions` against every video in `videos`.
pub fn batch_similarity_matrix(
    bank: &FeatureBank,
    params: &ModelParams,
    captions: &BatchIndex,
    videos: &BatchIndex,
) -> Result<Matrix> {
    batch_similarity_across(bank, bank, params, captions, videos)
}

fn batch_similarity_across(
    query_bank: &FeatureBank,
    gallery_bank: &FeatureBank,
    params: &ModelParams,
    captions: &BatchIndex,
    videos: &BatchIndex,
) -> Result<Matrix> {
    check_bank(query_bank, params)?;
    check_bank(gallery_bank, params)?;
    let inputs = PairInputs::gather_across(query_bank, gallery_bank, captions, videos, params.temperatures.pool)?;
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false);
    let out = forward(&mut tape, params, &vars, &inputs)?;
    Ok(tape.value(out.similarity).clone())
}

/// Full `n×n` caption-to-video similarity matrix over `bank` using tag
/// variant 0, computed in caption chunks of `chunk` rows.
pub fn similarity_matrix(bank: &FeatureBank, params: &ModelParams, chunk: usize) -> Result<Matrix> {
    similarity_across(bank, bank, params, chunk)
}

/// Captions of `query_bank` scored against every video of `gallery_bank`,
/// `n_query × n_gallery`, tag variant 0.
pub fn similarity_across(
    query_bank: &FeatureBank,
    gallery_bank: &FeatureBank,
    params: &ModelParams,
    chunk: usize,
) -> Result<Matrix> {
    let (n, g) = (query_bank.len(), gallery_bank.len());
    let all = BatchIndex::all_infer(g);
    let chunk = chunk.max(1);
    let mut data = Vec::with_capacity(n * g);
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let captions = BatchIndex {
            samples: (start..end).collect(),
            visual_variants: vec![0; end - start],
            textual_variants: vec![0; end - start],
        };
        let block = batch_similarity_across(query_bank, gallery_bank, params, &captions, &all)?;
        data.extend_from_slice(block.data());
    }
    Matrix::new(n, g, data)
}

pub(crate) fn check_bank(bank: &FeatureBank, params: &ModelParams) -> Result<()> {
    if bank.d() != params.d {
        return Err(Error::Checkpoint(format!(
            "model dimension {} does not match bank dimension {}",
            params.d,
            bank.d()
        )));
    }
    Ok(())
}

/// Concept sets of sample `i` with video pooled under its own caption and tag variant 0.
pub fn sample_concepts(bank: &FeatureBank, params: &ModelParams, i: usize) -> Result<[ConceptSet; 4]> {
    let pooled = text_conditioned_pool(bank.text_row(i), bank.frames_of(i), params.temperatures.pool)?;
    Ok([
        disentangle(params, &pooled, Stream::Video)?,
        disentangle(params, bank.text_row(i), Stream::Text)?,
        disentangle(params, bank.tag_visual_row(i, 0), Stream::TagVisual)?,
        disentangle(params, bank.tag_textual_row(i, 0), Stream::TagTextual)?,
    ])
}
