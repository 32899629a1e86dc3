//! Synthetic planted-concept banks and brute-force reference implementations.
//!
//! Every sample carries `K` latent unit codes of width `d/K`, one per concept
//! slot. Each code is a jittered copy of one of [`PROTOTYPES`] per-slot
//! prototypes, and the prototype index is the sample's concept label for that
//! slot. Text, video and tag streams are fixed random orthogonal mixtures of
//! the stacked codes plus Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::databank::FeatureBank;
use crate::error::{Error, Result};
use crate::model::params::{check_dims, orthogonal};
use crate::numkernel::Matrix;

/// Prototypes per concept slot.
pub const PROTOTYPES: usize = 8;
/// Per-dimension jitter added to a prototype before renormalizing.
pub const CODE_JITTER: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub n_frames: usize,
    pub n_variants: usize,
    /// Noise norm relative to the unit-norm signal.
    pub noise_sigma: f64,
    pub tag_informative: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 64,
            d: 32,
            k: 4,
            n_frames: 4,
            n_variants: 3,
            noise_sigma: 0.1,
            tag_informative: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        check_dims(self.d, self.k)?;
        if self.n == 0 || self.n_frames == 0 || self.n_variants == 0 {
            return Err(Error::Parameter("n, n_frames and n_variants must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Parameter(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Ground truth behind a planted bank.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTruth {
    /// `n×d`, row `i` is the stacked unit codes of sample `i`.
    pub codes: Matrix,
    /// `labels[i][k]` is the prototype index of sample `i` in slot `k`.
    pub labels: Vec<Vec<usize>>,
    /// Mixing matrices for text, video, visual tags and textual tags.
    pub mixing: [Matrix; 4],
}

fn gaussian(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// `mix · code + noise`, with the code scaled to unit norm.
fn emit(mix: &Matrix, code: &[f64], k: usize, noise: &[f64]) -> Vec<f64> {
    let scale = 1.0 / (k as f64).sqrt();
    (0..mix.rows())
        .map(|r| scale * crate::numkernel::dot(mix.row(r), code) + noise[r])
        .collect()
}

/// Generates a planted bank. Deterministic in `cfg.seed`.
pub fn generate_planted_bank(cfg: &SynthConfig) -> Result<(FeatureBank, PlantedTruth)> {
    cfg.validate()?;
    let SynthConfig { n, d, k, n_frames, n_variants, .. } = *cfg;
    let m = d / k;
    let noise = cfg.noise_sigma / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let prototypes: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|_| (0..PROTOTYPES).map(|_| normalized(gaussian(&mut rng, m, 1.0))).collect())
        .collect();
    let mixing = [(); 4].map(|_| orthogonal(d, &mut rng));

    let mut codes = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = Vec::with_capacity(k);
        for slot in &prototypes {
            let label = rng.random_range(0..PROTOTYPES);
            let jitter = gaussian(&mut rng, m, CODE_JITTER / (m as f64).sqrt());
            let code: Vec<f64> = slot[label].iter().zip(&jitter).map(|(p, j)| p + j).collect();
            codes.extend(normalized(code));
            row.push(label);
        }
        labels.push(row);
    }
    let codes = Matrix::new(n, d, codes)?;

    let [mix_text, mix_video, mix_tv, mix_tt] = &mixing;
    let mut text = Vec::with_capacity(n * d);
    let mut frames = Vec::with_capacity(n * n_frames * d);
    let mut tags_visual = Vec::with_capacity(n * n_variants * d);
    let mut tags_textual = Vec::with_capacity(n * n_variants * d);
    for i in 0..n {
        let z = codes.row(i);
        text.extend(emit(mix_text, z, k, &gaussian(&mut rng, d, noise)));
        let video = emit(mix_video, z, k, &gaussian(&mut rng, d, noise));
        for _ in 0..n_frames {
            frames.extend(video.iter().zip(gaussian(&mut rng, d, noise)).map(|(v, e)| v + e));
        }
        for (mix, out) in [(mix_tv, &mut tags_visual), (mix_tt, &mut tags_textual)] {
            for _ in 0..n_variants {
                if cfg.tag_informative {
                    out.extend(emit(mix, z, k, &gaussian(&mut rng, d, noise)));
                } else {
                    out.extend(gaussian(&mut rng, d, 1.0 / (d as f64).sqrt()));
                }
            }
        }
    }
    let bank = FeatureBank::new(
        Matrix::new(n, d, text)?,
        Matrix::new(n * n_frames, d, frames)?,
        Matrix::new(n * n_variants, d, tags_visual)?,
        Matrix::new(n * n_variants, d, tags_textual)?,
        n_frames,
        n_variants,
    )?
    .with_ids((0..n).map(|i| format!("synth{i:05}")).collect())?;
    Ok((bank, PlantedTruth { codes, labels, mixing }))
}

/// Brute-force metrics: `[R1, R5, R10, MR, MeanR, RSum]` with ground truth on
/// the diagonal, ties ranked pessimistically and MR the lower middle rank.
pub fn oracle_metrics(scores: &[Vec<f64>]) -> [f64; 6] {
    let n = scores.len();
    let mut ranks = Vec::with_capacity(n);
    for (i, row) in scores.iter().enumerate() {
        // order gallery by score, placing the true item after its equals
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .expect("finite scores")
                .then((a == i).cmp(&(b == i)))
        });
        let position = order.iter().position(|&j| j == i).expect("square matrix");
        ranks.push(position + 1);
    }
    let recall = |l: usize| 100.0 * ranks.iter().filter(|&&r| r <= l).count() as f64 / n as f64;
    let (r1, r5, r10) = (recall(1), recall(5), recall(10));
    ranks.sort();
    let median = ranks[(n - 1) / 2] as f64;
    let mean = ranks.iter().sum::<usize>() as f64 / n as f64;
    [r1, r5, r10, median, mean, r1 + r5 + r10]
}

/// Softmax of `x / temperature` by direct exponentiation.
pub fn oracle_softmax(x: &[f64], temperature: f64) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

/// `Σ_k c_k · cos(text_k, video_k)` with explicit loops.
pub fn oracle_similarity(text: &[Vec<f64>], video: &[Vec<f64>], c: &[f64]) -> f64 {
    let mut total = 0.0;
    for k in 0..c.len() {
        let (mut dot, mut nt, mut nv) = (0.0, 0.0, 0.0);
        for j in 0..text[k].len() {
            dot += text[k][j] * video[k][j];
            nt += text[k][j] * text[k][j];
            nv += video[k][j] * video[k][j];
        }
        total += c[k] * dot / (nt.sqrt() * nv.sqrt());
    }
    total
}
