//! Training objectives: symmetric cross-modal InfoNCE over the similarity
//! matrix, the within-sample concept contrastive loss between modality
//! concepts, and the alignment loss tying modality concepts to tag concepts.
//!
//! All functions build on a [`Tape`] so gradients reach every parameter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_c: f64,
    pub alpha_a: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_c: 1.0,
            alpha_a: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_c >= 0.0 && self.alpha_a >= 0.0) {
            return Err(Error::Parameter(format!(
                "loss weights must be non-negative, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Values of the three terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cross_modal: f64,
    pub concept: f64,
    pub alignment: f64,
    pub total: f64,
}

impl LossReport {
    pub fn compose(cross_modal: f64, concept: f64, alignment: f64, weights: &LossWeights) -> Self {
        Self {
            cross_modal,
            concept,
            alignment,
            total: cross_modal + weights.alpha_c * concept + weights.alpha_a * alignment,
        }
    }

    /// First non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("L_S", self.cross_modal),
            ("L_C", self.concept),
            ("L_A", self.alignment),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

/// `-mean_i log softmax_j(x_ij / temperature)[i]` for a square `x`.
fn diagonal_cross_entropy(tape: &mut Tape, x: Var, temperature: f64) -> Result<Var> {
    let logp = tape.log_softmax_rows(x, temperature)?;
    let diag = tape.diag(logp)?;
    let mean = tape.mean(diag);
    Ok(tape.scale(mean, -1.0))
}

/// Mean of row-wise and column-wise diagonal cross-entropy.
fn symmetric_cross_entropy(tape: &mut Tape, x: Var, temperature: f64) -> Result<Var> {
    let (r, c) = tape.shape(x);
    if r != c {
        return Err(Error::Dimension {
            op: "symmetric_cross_entropy",
            left: (r, c),
            right: (c, r),
        });
    }
    let rows = diagonal_cross_entropy(tape, x, temperature)?;
    let xt = tape.transpose(x);
    let cols = diagonal_cross_entropy(tape, xt, temperature)?;
    let sum = tape.add(rows, cols)?;
    Ok(tape.scale(sum, 0.5))
}

/// Symmetric InfoNCE on a `B×B` similarity matrix with positives on the diagonal.
pub fn infonce_cross_modal(tape: &mut Tape, similarity: Var, temperature: f64) -> Result<Var> {
    symmetric_cross_entropy(tape, similarity, temperature)
}

/// Within-sample contrastive loss between two `K×(d/K)` concept sets:
/// concept `k` of `a` should match concept `k` of `b` against every other
/// concept `l ≠ k`, by cosine, in both directions.
pub fn concept_contrastive(tape: &mut Tape, a: Var, b: Var, temperature: f64) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Dimension {
            op: "concept_contrastive",
            left: tape.shape(a),
            right: tape.shape(b),
        });
    }
    let na = tape.l2_normalize_rows(a)?;
    let nb = tape.l2_normalize_rows(b)?;
    let nbt = tape.transpose(nb);
    let cosines = tape.matmul(na, nbt)?;
    symmetric_cross_entropy(tape, cosines, temperature)
}

/// Per-sample concept sets from a `B×d` concept matrix: sample `i` becomes
/// rows `[i·K, (i+1)·K)` of the `(B·K)×(d/K)` reshape.
fn per_sample(tape: &mut Tape, concepts: Var, k: usize) -> Result<(Var, usize)> {
    let (b, d) = tape.shape(concepts);
    if k == 0 || d % k != 0 {
        return Err(Error::Parameter(format!("d={d} not divisible by K={k}")));
    }
    Ok((tape.reshape(concepts, b * k, d / k)?, b))
}

/// Batch mean of [`concept_contrastive`] between matching rows of two `B×d`
/// concept matrices. Terms are summed in sample order.
pub fn batch_concept_contrastive(tape: &mut Tape, a: Var, b: Var, k: usize, temperature: f64) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Dimension {
            op: "batch_concept_contrastive",
            left: tape.shape(a),
            right: tape.shape(b),
        });
    }
    let (ra, n) = per_sample(tape, a, k)?;
    let (rb, _) = per_sample(tape, b, k)?;
    let mut total: Option<Var> = None;
    for i in 0..n {
        let ai = tape.slice_rows(ra, i * k, (i + 1) * k)?;
        let bi = tape.slice_rows(rb, i * k, (i + 1) * k)?;
        let li = concept_contrastive(tape, ai, bi, temperature)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, li)?,
            None => li,
        });
    }
    let total = total.ok_or_else(|| Error::Parameter("empty batch".into()))?;
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Modality concept loss between video and text concepts (`B×d` each).
pub fn loss_concept(tape: &mut Tape, video: Var, text: Var, k: usize, temperature: f64) -> Result<Var> {
    batch_concept_contrastive(tape, video, text, k, temperature)
}

/// Alignment loss: video concepts against visual-tag concepts plus text
/// concepts against textual-tag concepts. A `None` tag stream drops its half.
pub fn loss_alignment(
    tape: &mut Tape,
    video: Var,
    text: Var,
    tag_visual: Option<Var>,
    tag_textual: Option<Var>,
    k: usize,
    temperature: f64,
) -> Result<Option<Var>> {
    let mut parts = Vec::new();
    if let Some(av) = tag_visual {
        parts.push(batch_concept_contrastive(tape, video, av, k, temperature)?);
    }
    if let Some(at) = tag_textual {
        parts.push(batch_concept_contrastive(tape, text, at, k, temperature)?);
    }
    let mut it = parts.into_iter();
    let Some(first) = it.next() else {
        return Ok(None);
    };
    it.try_fold(first, |acc, p| tape.add(acc, p)).map(Some)
}

/// Handles of the assembled objective.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub cross_modal: Var,
    pub concept: Var,
    pub alignment: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn report(&self, tape: &Tape) -> LossReport {
        let alignment = self.alignment.map_or(0.0, |v| tape.value(v).item());
        LossReport {
            cross_modal: tape.value(self.cross_modal).item(),
            concept: tape.value(self.concept).item(),
            alignment,
            total: tape.value(self.total).item(),
        }
    }
}

/// `L_S + α_C·L_C + α_A·L_A`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    similarity: Var,
    video: Var,
    text: Var,
    tag_visual: Option<Var>,
    tag_textual: Option<Var>,
    k: usize,
    weights: &LossWeights,
    concept_temperature: f64,
    cross_modal_temperature: f64,
) -> Result<LossVars> {
    weights.validate()?;
    let cross_modal = infonce_cross_modal(tape, similarity, cross_modal_temperature)?;
    let concept = loss_concept(tape, video, text, k, concept_temperature)?;
    let alignment = loss_alignment(tape, video, text, tag_visual, tag_textual, k, concept_temperature)?;
    let weighted_c = tape.scale(concept, weights.alpha_c);
    let mut total = tape.add(cross_modal, weighted_c)?;
    if let Some(a) = alignment {
        let weighted_a = tape.scale(a, weights.alpha_a);
        total = tape.add(total, weighted_a)?;
    }
    Ok(LossVars {
        cross_modal,
        concept,
        alignment,
        total,
    })
}

/// Convenience evaluation of [`concept_contrastive`] on plain matrices.
pub fn concept_contrastive_value(a: &Matrix, b: &Matrix, temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let l = concept_contrastive(&mut tape, va, vb, temperature)?;
    Ok(tape.value(l).item())
}

/// Convenience evaluation of [`infonce_cross_modal`] on a plain matrix.
pub fn infonce_value(similarity: &Matrix, temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(similarity.clone());
    let l = infonce_cross_modal(&mut tape, s, temperature)?;
    Ok(tape.value(l).item())
}
