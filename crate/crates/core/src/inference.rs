//! Inference-time re-scoring (dual-softmax prior, querybank normalization with
//! dynamic inverted softmax) and rank-based retrieval metrics.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::databank::FeatureBank;
use crate::error::{Error, Result};
use crate::model::{similarity_across, ModelParams};
use crate::numkernel::{log_sum_exp, Matrix};

/// Caption rows scored per forward pass when building full matrices.
pub const SCORE_CHUNK: usize = 16;

pub const DEFAULT_TAU_R: f64 = 100.0;
pub const DEFAULT_BETA: f64 = 20.0;

/// Query × gallery scores plus the true gallery index of each query.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    scores: Matrix,
    truth: Vec<usize>,
}

impl SimilarityMatrix {
    /// Square matrix with query `i` matching gallery item `i`.
    pub fn with_identity_truth(scores: Matrix) -> Result<Self> {
        let truth = (0..scores.rows()).collect();
        Self::new(scores, truth)
    }

    pub fn new(scores: Matrix, truth: Vec<usize>) -> Result<Self> {
        if truth.len() != scores.rows() {
            return Err(Error::Parameter(format!(
                "{} ground-truth entries for {} queries",
                truth.len(),
                scores.rows()
            )));
        }
        if let Some(&g) = truth.iter().find(|&&g| g >= scores.cols()) {
            return Err(Error::Parameter(format!(
                "ground-truth index {g} outside gallery of {}",
                scores.cols()
            )));
        }
        let mut seen = vec![false; scores.cols()];
        for &g in &truth {
            if std::mem::replace(&mut seen[g], true) {
                return Err(Error::Parameter(format!("gallery index {g} is the truth for two queries")));
            }
        }
        if !scores.is_finite() {
            return Err(Error::Parameter("similarity matrix has non-finite entries".into()));
        }
        Ok(Self { scores, truth })
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }

    pub fn truth(&self) -> &[usize] {
        &self.truth
    }

    pub fn n_query(&self) -> usize {
        self.scores.rows()
    }

    pub fn n_gallery(&self) -> usize {
        self.scores.cols()
    }

    fn with_scores(&self, scores: Matrix) -> Self {
        Self {
            scores,
            truth: self.truth.clone(),
        }
    }
}

/// Probe similarities: one row per querybank query, one column per gallery item.
#[derive(Debug, Clone, PartialEq)]
pub struct Querybank {
    probes: Matrix,
}

impl Querybank {
    pub fn new(probes: Matrix) -> Result<Self> {
        if !probes.is_finite() {
            return Err(Error::Parameter("querybank has non-finite entries".into()));
        }
        Ok(Self { probes })
    }

    pub fn empty(n_gallery: usize) -> Self {
        Self {
            probes: Matrix::zeros(0, n_gallery),
        }
    }

    /// Seeded sample of `n_probe` rows from a training-caption similarity matrix.
    pub fn sample_rows(train_scores: &Matrix, n_probe: usize, seed: u64) -> Result<Self> {
        if n_probe > train_scores.rows() {
            return Err(Error::Parameter(format!(
                "cannot sample {n_probe} probes from {} queries",
                train_scores.rows()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = sample(&mut rng, train_scores.rows(), n_probe).into_vec();
        rows.sort_unstable();
        Self::new(train_scores.select_rows(&rows)?)
    }

    /// Probe similarities of every caption in `probe_bank` against the
    /// videos of `gallery`.
    pub fn from_bank(probe_bank: &FeatureBank, gallery: &FeatureBank, params: &ModelParams) -> Result<Self> {
        Self::new(similarity_across(probe_bank, gallery, params, SCORE_CHUNK)?)
    }

    pub fn probes(&self) -> &Matrix {
        &self.probes
    }

    pub fn len(&self) -> usize {
        self.probes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.rows() == 0
    }
}

fn argmax(row: &[f64]) -> usize {
    // first index wins ties
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Dual-softmax prior: column-wise softmax of `τ_r·S` over queries, so each
/// gallery item distributes unit mass across the queries competing for it.
pub fn dsl_prior(scores: &Matrix, tau_r: f64) -> Result<Matrix> {
    if !(tau_r > 0.0 && tau_r.is_finite()) {
        return Err(Error::Parameter(format!("tau_r must be positive, got {tau_r}")));
    }
    let columns = scores.transpose();
    let mut prior = Matrix::zeros(scores.rows(), scores.cols());
    for j in 0..columns.rows() {
        let col = columns.row(j);
        let lse = log_sum_exp(col, 1.0 / tau_r);
        for (i, &s) in col.iter().enumerate() {
            prior.set(i, j, (tau_r * s - lse).exp());
        }
    }
    Ok(prior)
}

/// `Ŝ = S ⊙ prior` with the dual-softmax prior of [`dsl_prior`].
pub fn dsl_rerank(s: &SimilarityMatrix, tau_r: f64) -> Result<SimilarityMatrix> {
    let prior = dsl_prior(s.scores(), tau_r)?;
    Ok(s.with_scores(s.scores().zip_map(&prior, |a, b| a * b)?))
}

/// Querybank normalization with dynamic inverted softmax.
///
/// Gallery items that are the top match of at least one probe form the
/// activation set. A query row whose own top match is in that set is
/// replaced by `exp(β·s_j) / Σ_q exp(β·P_qj)`; other rows are unchanged.
pub fn qb_normalize(s: &SimilarityMatrix, qb: &Querybank, beta: f64) -> Result<SimilarityMatrix> {
    if qb.probes().cols() != s.n_gallery() {
        return Err(Error::Dimension {
            op: "qb_normalize",
            left: s.scores().shape(),
            right: qb.probes().shape(),
        });
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Parameter(format!("beta must be positive, got {beta}")));
    }
    if qb.is_empty() {
        return Ok(s.clone());
    }
    let probes = qb.probes();
    let mut active = vec![false; s.n_gallery()];
    for q in 0..probes.rows() {
        active[argmax(probes.row(q))] = true;
    }
    let columns = probes.transpose();
    let log_denominators: Vec<f64> = (0..columns.rows())
        .map(|j| log_sum_exp(columns.row(j), 1.0 / beta))
        .collect();
    let mut out = s.scores().clone();
    for i in 0..out.rows() {
        if !active[argmax(s.scores().row(i))] {
            continue;
        }
        for (v, lse) in out.row_mut(i).iter_mut().zip(&log_denominators) {
            *v = (beta * *v - lse).exp();
        }
    }
    Ok(s.with_scores(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TiePolicy {
    /// Items tied with the true item rank ahead of it.
    #[default]
    Pessimistic,
    /// Items tied with the true item rank behind it.
    Optimistic,
}

/// 1-based rank of gallery item `truth` in `row`.
pub fn rank_of(row: &[f64], truth: usize, policy: TiePolicy) -> usize {
    let target = row[truth];
    let mut rank = 1;
    for (j, &v) in row.iter().enumerate() {
        if v > target || (policy == TiePolicy::Pessimistic && j != truth && v == target) {
            rank += 1;
        }
    }
    rank
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    None,
    Qb,
    Dsl,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::None, Strategy::Qb, Strategy::Dsl];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Qb => "qb",
            Strategy::Dsl => "dsl",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Strategy::None),
            "qb" => Ok(Strategy::Qb),
            "dsl" => Ok(Strategy::Dsl),
            other => Err(Error::Parameter(format!("unknown strategy '{other}'"))),
        }
    }
}

/// Inputs of an inference strategy.
#[derive(Debug, Clone)]
pub enum StrategyParams<'a> {
    None,
    Qb { querybank: &'a Querybank, beta: f64 },
    Dsl { tau_r: f64 },
}

impl StrategyParams<'_> {
    pub fn strategy(&self) -> Strategy {
        match self {
            StrategyParams::None => Strategy::None,
            StrategyParams::Qb { .. } => Strategy::Qb,
            StrategyParams::Dsl { .. } => Strategy::Dsl,
        }
    }

    pub fn apply(&self, s: &SimilarityMatrix) -> Result<SimilarityMatrix> {
        match self {
            StrategyParams::None => Ok(s.clone()),
            StrategyParams::Qb { querybank, beta } => qb_normalize(s, querybank, *beta),
            StrategyParams::Dsl { tau_r } => dsl_rerank(s, *tau_r),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub strategy: Strategy,
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R5")]
    pub r5: f64,
    #[serde(rename = "R10")]
    pub r10: f64,
    #[serde(rename = "MR")]
    pub median_rank: f64,
    #[serde(rename = "MeanR")]
    pub mean_rank: f64,
    #[serde(rename = "RSum")]
    pub rsum: f64,
    pub n_query: usize,
    pub n_gallery: usize,
}

impl RetrievalMetrics {
    /// Metrics from per-query ranks. The median of an even count is the
    /// lower of the two central values.
    pub fn from_ranks(ranks: &[usize], n_gallery: usize, strategy: Strategy) -> Self {
        let n = ranks.len().max(1) as f64;
        let recall = |l: usize| 100.0 * ranks.iter().filter(|&&r| r <= l).count() as f64 / n;
        let (r1, r5, r10) = (recall(1), recall(5), recall(10));
        let mut sorted = ranks.to_vec();
        sorted.sort_unstable();
        let median_rank = sorted.get(sorted.len().saturating_sub(1) / 2).copied().unwrap_or(0) as f64;
        let mean_rank = ranks.iter().sum::<usize>() as f64 / n;
        Self {
            strategy,
            r1,
            r5,
            r10,
            median_rank,
            mean_rank,
            rsum: r1 + r5 + r10,
            n_query: ranks.len(),
            n_gallery,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Ranks of every query's true item under the pessimistic tie policy.
pub fn ranks(s: &SimilarityMatrix) -> Vec<usize> {
    (0..s.n_query())
        .map(|i| rank_of(s.scores().row(i), s.truth()[i], TiePolicy::Pessimistic))
        .collect()
}

/// Applies the strategy, then computes R@1/5/10, MR, MeanR and RSum.
pub fn evaluate(s: &SimilarityMatrix, params: &StrategyParams<'_>) -> Result<RetrievalMetrics> {
    let rescored = params.apply(s)?;
    Ok(RetrievalMetrics::from_ranks(&ranks(&rescored), s.n_gallery(), params.strategy()))
}

/// Strategy selection and its hyperparameters for [`evaluate_model`].
#[derive(Debug, Clone, Copy)]
pub struct EvalSettings<'a> {
    pub strategy: Strategy,
    pub tau_r: f64,
    pub beta: f64,
    /// Probe captions for `qb`; `None` uses the evaluated bank's own captions.
    pub querybank: Option<&'a FeatureBank>,
}

impl EvalSettings<'_> {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            tau_r: DEFAULT_TAU_R,
            beta: DEFAULT_BETA,
            querybank: None,
        }
    }
}

/// Scores every caption of `bank` against every video and evaluates with
/// sample `i`'s video as the ground truth for caption `i`.
pub fn evaluate_model(bank: &FeatureBank, params: &ModelParams, settings: &EvalSettings<'_>) -> Result<RetrievalMetrics> {
    let s = SimilarityMatrix::with_identity_truth(similarity_across(bank, bank, params, SCORE_CHUNK)?)?;
    evaluate_scores(&s, bank, params, settings)
}

/// Evaluates precomputed scores of `bank`, building a querybank if needed.
pub fn evaluate_scores(
    s: &SimilarityMatrix,
    bank: &FeatureBank,
    params: &ModelParams,
    settings: &EvalSettings<'_>,
) -> Result<RetrievalMetrics> {
    match settings.strategy {
        Strategy::None => evaluate(s, &StrategyParams::None),
        Strategy::Dsl => evaluate(s, &StrategyParams::Dsl { tau_r: settings.tau_r }),
        Strategy::Qb => {
            let querybank = match settings.querybank {
                Some(probe_bank) => Querybank::from_bank(probe_bank, bank, params)?,
                None => Querybank::new(s.scores().clone())?,
            };
            evaluate(s, &StrategyParams::Qb { querybank: &querybank, beta: settings.beta })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Strategy;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn sim(rows: &[Vec<f64>]) -> SimilarityMatrix {
        SimilarityMatrix::with_identity_truth(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    fn random(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Diagonal 0.6 plus small noise, with gallery column `hub` raised by +0.5.
    fn hub_scenario(n: usize, hub: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, n, |i, j| {
            let base = if i == j { 0.6 } else { rng.random_range(0.0..0.3) };
            if j == hub { base + 0.5 } else { base }
        })
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of(&[0.1, 0.9, 0.3], 1, TiePolicy::Pessimistic), 1);
        assert_eq!(rank_of(&[0.5; 5], 2, TiePolicy::Pessimistic), 5);
        assert_eq!(rank_of(&[0.5; 5], 2, TiePolicy::Optimistic), 1);
        assert_eq!(rank_of(&[0.9, 0.1, 0.5], 1, TiePolicy::Pessimistic), 3);
    }

    #[test]
    fn rank_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.random_range(1..=8);
            // coarse values so ties occur
            let row: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
            let g = rng.random_range(0..n);
            // oracle: sort (value desc, truth last among equals) and locate the truth
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                row[b]
                    .partial_cmp(&row[a])
                    .unwrap()
                    .then((a == g).cmp(&(b == g)))
            });
            let expected = order.iter().position(|&j| j == g).unwrap() + 1;
            assert_eq!(rank_of(&row, g, TiePolicy::Pessimistic), expected);
        }
    }

    #[test]
    fn perfect_and_anti_perfect() {
        let perfect = SimilarityMatrix::with_identity_truth(Matrix::identity(12)).unwrap();
        let m = evaluate(&perfect, &StrategyParams::None).unwrap();
        assert_eq!((m.r1, m.r5, m.r10, m.median_rank, m.mean_rank, m.rsum), (100.0, 100.0, 100.0, 1.0, 1.0, 300.0));

        let anti = SimilarityMatrix::with_identity_truth(Matrix::identity(20).scale(-1.0)).unwrap();
        let m = evaluate(&anti, &StrategyParams::None).unwrap();
        assert_eq!(m.r10, 0.0);
        assert_eq!(m.mean_rank, 20.0);
        assert_eq!(m.median_rank, 20.0);
    }

    #[test]
    fn even_count_median_takes_lower_central_value() {
        let m = RetrievalMetrics::from_ranks(&[1, 2, 7, 9], 10, Strategy::None);
        assert_eq!(m.median_rank, 2.0);
        assert_eq!(m.mean_rank, 4.75);
        assert_eq!(m.r5, 50.0);
    }

    #[test]
    fn metrics_json_shape() {
        let m = RetrievalMetrics::from_ranks(&[1, 3], 4, Strategy::Dsl);
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        for key in ["strategy", "R1", "R5", "R10", "MR", "MeanR", "RSum", "n_query", "n_gallery"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["strategy"], "dsl");
    }

    #[test]
    fn dsl_examples() {
        let one = sim(&[vec![0.42]]);
        assert_eq!(dsl_rerank(&one, 100.0).unwrap(), one);

        let constant = sim(&[vec![0.3; 4], vec![0.3; 4], vec![0.3; 4]].iter().map(|r| r[..3].to_vec()).collect::<Vec<_>>());
        let prior = dsl_prior(constant.scores(), 100.0).unwrap();
        assert!(prior.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));

        // 2×2 direct formula
        let s = sim(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let r = dsl_rerank(&s, 1.0).unwrap();
        let e = std::f64::consts::E;
        let hi = e * e / (e * e + e);
        let lo = e / (e * e + e);
        let expected = [2.0 * hi, 1.0 * lo, 1.0 * lo, 2.0 * hi];
        for (a, b) in r.scores().data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let ratio_before = s.scores().get(0, 0) / s.scores().get(0, 1);
        let ratio_after = r.scores().get(0, 0) / r.scores().get(0, 1);
        assert!(ratio_after > ratio_before);
        assert!(dsl_prior(s.scores(), 0.0).is_err());
    }

    #[test]
    fn dsl_suppresses_a_hub() {
        let s = SimilarityMatrix::with_identity_truth(hub_scenario(16, 3, 5)).unwrap();
        let raw = evaluate(&s, &StrategyParams::None).unwrap();
        let dsl = evaluate(&s, &StrategyParams::Dsl { tau_r: DEFAULT_TAU_R }).unwrap();
        assert!(dsl.r1 > raw.r1, "{} vs {}", dsl.r1, raw.r1);
    }

    #[test]
    fn qb_examples() {
        let s = SimilarityMatrix::with_identity_truth(random(6, 3)).unwrap();
        let same = qb_normalize(&s, &Querybank::empty(6), 20.0).unwrap();
        assert_eq!(same, s);
        assert!(same.scores().data().iter().zip(s.scores().data()).all(|(a, b)| a.to_bits() == b.to_bits()));

        // probes only ever top-rank gallery item 0; a query topped by item 2 stays unchanged
        let probes = Querybank::new(Matrix::from_rows(&[vec![0.9, 0.1, 0.2], vec![0.8, 0.3, 0.1]]).unwrap()).unwrap();
        let q = sim(&[vec![0.1, 0.2, 0.7], vec![0.6, 0.5, 0.1], vec![0.2, 0.1, 0.3]]);
        let out = qb_normalize(&q, &probes, 20.0).unwrap();
        assert_eq!(out.scores().row(0), q.scores().row(0));
        assert_eq!(out.scores().row(2), q.scores().row(2));
        assert_ne!(out.scores().row(1), q.scores().row(1));
        let expected: Vec<f64> = (0..3)
            .map(|j| {
                let denom: f64 = (0..2).map(|p| (20.0 * probes.probes().get(p, j)).exp()).sum();
                (20.0 * q.scores().get(1, j)).exp() / denom
            })
            .collect();
        for (a, b) in out.scores().row(1).iter().zip(expected) {
            assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
        }

        assert!(qb_normalize(&q, &Querybank::empty(4), 20.0).is_err());
    }

    #[test]
    fn qb_suppresses_a_hub() {
        let s = SimilarityMatrix::with_identity_truth(hub_scenario(16, 3, 6)).unwrap();
        let probes = Querybank::new(hub_scenario(16, 3, 7)).unwrap();
        let raw = evaluate(&s, &StrategyParams::None).unwrap();
        let qb = evaluate(&s, &StrategyParams::Qb { querybank: &probes, beta: DEFAULT_BETA }).unwrap();
        assert!(qb.r1 > raw.r1, "{} vs {}", qb.r1, raw.r1);
    }

    #[test]
    fn querybank_sampling_is_seeded() {
        let train = random(10, 4);
        let a = Querybank::sample_rows(&train, 4, 1).unwrap();
        let b = Querybank::sample_rows(&train, 4, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(Querybank::sample_rows(&train, 11, 1).is_err());
    }

    #[test]
    fn similarity_matrix_validation() {
        assert!(SimilarityMatrix::new(Matrix::zeros(2, 3), vec![0, 0]).is_err());
        assert!(SimilarityMatrix::new(Matrix::zeros(2, 3), vec![0, 3]).is_err());
        assert!(SimilarityMatrix::new(Matrix::zeros(2, 3), vec![2, 0]).is_ok());
        let mut bad = Matrix::zeros(2, 2);
        bad.set(0, 1, f64::NAN);
        assert!(SimilarityMatrix::with_identity_truth(bad).is_err());
    }

    proptest! {
        #[test]
        fn metrics_invariant_under_monotone_transform(seed in 0u64..2000, n in 2usize..12) {
            let s = SimilarityMatrix::with_identity_truth(random(n, seed)).unwrap();
            let t = SimilarityMatrix::with_identity_truth(s.scores().map(f64::tanh)).unwrap();
            prop_assert_eq!(evaluate(&s, &StrategyParams::None).unwrap(), evaluate(&t, &StrategyParams::None).unwrap());
        }

        #[test]
        fn recall_is_monotone_and_bounded(seed in 0u64..2000, n in 1usize..30) {
            let s = SimilarityMatrix::with_identity_truth(random(n, seed)).unwrap();
            for p in [StrategyParams::None, StrategyParams::Dsl { tau_r: 10.0 }] {
                let m = evaluate(&s, &p).unwrap();
                prop_assert!(0.0 <= m.r1 && m.r1 <= m.r5 && m.r5 <= m.r10 && m.r10 <= 100.0);
                prop_assert!((m.rsum - (m.r1 + m.r5 + m.r10)).abs() < 1e-9);
                prop_assert!(1.0 <= m.median_rank && m.median_rank <= n as f64);
                prop_assert!(1.0 <= m.mean_rank && m.mean_rank <= n as f64);
            }
        }

        #[test]
        fn dsl_prior_columns_sum_to_one(seed in 0u64..2000, n in 1usize..10, tau in 0.1f64..200.0) {
            let p = dsl_prior(&random(n, seed).scale(3.0), tau).unwrap();
            for j in 0..n {
                let col: f64 = (0..n).map(|i| p.get(i, j)).sum();
                prop_assert!((col - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn tiny_tau_r_keeps_row_rankings(seed in 0u64..2000, n in 2usize..10) {
            // positive scores so the near-uniform prior preserves order
            let s = SimilarityMatrix::with_identity_truth(random(n, seed).map(|x| x + 2.0)).unwrap();
            let r = dsl_rerank(&s, 1e-9).unwrap();
            for i in 0..n {
                for a in 0..n {
                    for b in 0..n {
                        if s.scores().get(i, a) > s.scores().get(i, b) + 1e-6 {
                            prop_assert!(r.scores().get(i, a) > r.scores().get(i, b));
                        }
                    }
                }
            }
        }
    }
}
