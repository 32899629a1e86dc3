//! Tag-stream ablation: the same training run with tag streams switched on
//! and off, evaluated under each inference strategy.

use std::fmt::Write as _;

use crate::databank::FeatureBank;
use crate::error::Result;
use crate::inference::{evaluate_scores, EvalSettings, RetrievalMetrics, SimilarityMatrix, Strategy, SCORE_CHUNK};
use crate::model::{similarity_matrix, stored_precision};
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// No tag concepts and no alignment loss.
    Baseline,
    VisualTags,
    TextualTags,
    BothTags,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::VisualTags, Variant::TextualTags, Variant::BothTags];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::VisualTags => "+VT",
            Variant::TextualTags => "+TT",
            Variant::BothTags => "+VT+TT",
        }
    }

    /// `base` with this variant's tag switches.
    pub fn config(self, base: &TrainConfig) -> TrainConfig {
        let (visual, textual) = match self {
            Variant::Baseline => (false, false),
            Variant::VisualTags => (true, false),
            Variant::TextualTags => (false, true),
            Variant::BothTags => (true, true),
        };
        let mut cfg = base.clone();
        cfg.use_visual_tags = visual;
        cfg.use_textual_tags = textual;
        if self == Variant::Baseline {
            cfg.alpha_a = 0.0;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: RetrievalMetrics,
}

/// Trains every variant on `bank` and evaluates each under every strategy
/// in `strategies`. Models are evaluated at checkpoint precision, so rows
/// match a separate train-then-eval run.
pub fn run_ablation(
    bank: &FeatureBank,
    base: &TrainConfig,
    strategies: &[Strategy],
    settings: &EvalSettings<'_>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(Variant::ALL.len() * strategies.len());
    for variant in Variant::ALL {
        let outcome = train(bank, &variant.config(base))?;
        let params = stored_precision(outcome.params());
        let s = SimilarityMatrix::with_identity_truth(similarity_matrix(bank, &params, SCORE_CHUNK)?)?;
        for &strategy in strategies {
            let metrics = evaluate_scores(&s, bank, &params, &EvalSettings { strategy, ..*settings })?;
            rows.push(AblationRow { variant, metrics });
        }
    }
    Ok(rows)
}

pub const ABLATION_HEADER: &str = "variant,strategy,R1,R5,R10,MR,MeanR,RSum";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for row in rows {
        let m = &row.metrics;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.variant.name(),
            m.strategy.name(),
            m.r1,
            m.r5,
            m.r10,
            m.median_rank,
            m.mean_rank,
            m.rsum
        )
        .expect("write to string");
    }
    out
}

/// RSum of `variant` under `strategy`, if present.
pub fn rsum_of(rows: &[AblationRow], variant: Variant, strategy: Strategy) -> Option<f64> {
    rows.iter()
        .find(|r| r.variant == variant && r.metrics.strategy == strategy)
        .map(|r| r.metrics.rsum)
}
