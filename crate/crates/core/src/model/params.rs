use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{dot, Matrix};

/// Hidden width of the confidence MLP.
pub const MLP_HIDDEN: usize = 256;

/// Names of the trainable tensors in checkpoint order.
pub const TENSOR_NAMES: [&str; 8] = [
    "w_video",
    "w_text",
    "w_tag_visual",
    "w_tag_textual",
    "mlp_w1",
    "mlp_b1",
    "mlp_w2",
    "mlp_b2",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    /// Frame-attention temperature of text-conditioned pooling.
    pub pool: f64,
    /// Temperature of the within-sample concept contrastive loss.
    pub concept: f64,
    /// Temperature of the cross-modal InfoNCE loss.
    pub cross_modal: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            pool: 3.0,
            concept: 0.1,
            cross_modal: 0.05,
        }
    }
}

impl Temperatures {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("pool", self.pool),
            ("concept", self.concept),
            ("cross_modal", self.cross_modal),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Parameter(format!(
                    "temperature {name} must be positive, got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Which tag streams feed the model. A disabled stream contributes zero
/// concepts to the confidence MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagUsage {
    pub visual: bool,
    pub textual: bool,
}

impl Default for TagUsage {
    fn default() -> Self {
        Self::BOTH
    }
}

impl TagUsage {
    pub const NONE: TagUsage = TagUsage {
        visual: false,
        textual: false,
    };
    pub const BOTH: TagUsage = TagUsage {
        visual: true,
        textual: true,
    };
}

/// Trainable heads plus the fixed hyperparameters the forward pass needs.
///
/// Each projector is stored stacked as a `d×d` matrix whose rows
/// `[k·d/K, (k+1)·d/K)` hold the concept-`k` projection `W_k`.
/// `mlp_w1` columns are laid out as `[video | text | tag_visual | tag_textual]`
/// blocks of width `d/K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub d: usize,
    pub k: usize,
    pub w_video: Matrix,
    pub w_text: Matrix,
    pub w_tag_visual: Matrix,
    pub w_tag_textual: Matrix,
    pub mlp_w1: Matrix,
    pub mlp_b1: Matrix,
    pub mlp_w2: Matrix,
    pub mlp_b2: Matrix,
    pub temperatures: Temperatures,
    pub tags: TagUsage,
}

impl ModelParams {
    /// Seeded initialization: orthogonal projector rows scaled by `1/√d`,
    /// uniform `±1/√fan_in` MLP weights, zero biases.
    pub fn init(
        d: usize,
        k: usize,
        seed: u64,
        temperatures: Temperatures,
        tags: TagUsage,
    ) -> Result<Self> {
        check_dims(d, k)?;
        temperatures.validate()?;
        let m = d / k;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d as f64).sqrt();
        let mut projector = || orthogonal(d, &mut rng).scale(scale);
        let w_video = projector();
        let w_text = projector();
        let w_tag_visual = projector();
        let w_tag_textual = projector();
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
        };
        let mlp_w1 = uniform(MLP_HIDDEN, 4 * m, 4 * m);
        let mlp_w2 = uniform(1, MLP_HIDDEN, MLP_HIDDEN);
        Ok(Self {
            d,
            k,
            w_video,
            w_text,
            w_tag_visual,
            w_tag_textual,
            mlp_w1,
            mlp_b1: Matrix::zeros(1, MLP_HIDDEN),
            mlp_w2,
            mlp_b2: Matrix::zeros(1, 1),
            temperatures,
            tags,
        })
    }

    /// Dimension of one concept sub-vector.
    pub fn concept_dim(&self) -> usize {
        self.d / self.k
    }

    pub fn tensors(&self) -> [&Matrix; 8] {
        [
            &self.w_video,
            &self.w_text,
            &self.w_tag_visual,
            &self.w_tag_textual,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 8] {
        [
            &mut self.w_video,
            &mut self.w_text,
            &mut self.w_tag_visual,
            &mut self.w_tag_textual,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
        ]
    }

    /// Expected shape of every tensor, in checkpoint order.
    pub fn expected_shapes(d: usize, k: usize) -> [(usize, usize); 8] {
        let m = d / k;
        [
            (d, d),
            (d, d),
            (d, d),
            (d, d),
            (MLP_HIDDEN, 4 * m),
            (1, MLP_HIDDEN),
            (1, MLP_HIDDEN),
            (1, 1),
        ]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    pub(crate) fn from_tensors(
        d: usize,
        k: usize,
        tensors: Vec<Matrix>,
        temperatures: Temperatures,
        tags: TagUsage,
    ) -> Result<Self> {
        check_dims(d, k)?;
        let shapes = Self::expected_shapes(d, k);
        if tensors.len() != 8 {
            return Err(Error::Checkpoint(format!("expected 8 tensors, got {}", tensors.len())));
        }
        for ((t, shape), name) in tensors.iter().zip(shapes).zip(TENSOR_NAMES) {
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        Ok(Self {
            d,
            k,
            w_video: next(),
            w_text: next(),
            w_tag_visual: next(),
            w_tag_textual: next(),
            mlp_w1: next(),
            mlp_b1: next(),
            mlp_w2: next(),
            mlp_b2: next(),
            temperatures,
            tags,
        })
    }
}

pub fn check_dims(d: usize, k: usize) -> Result<()> {
    if d == 0 || k == 0 || !d.is_multiple_of(k) {
        return Err(Error::Parameter(format!(
            "embedding dim {d} must be positive and divisible by K={k}"
        )));
    }
    Ok(())
}

/// Random `n×n` matrix with orthonormal rows (Gram-Schmidt on Gaussian rows).
pub(crate) fn orthogonal(n: usize, rng: &mut impl Rng) -> Matrix {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for r in &rows {
                let p = dot(&v, r);
                for (x, y) in v.iter_mut().zip(r) {
                    *x -= p * y;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
    }
    Matrix::from_rows(&rows).expect("square")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_shapes_and_orthogonality() {
        let p = ModelParams::init(16, 4, 3, Temperatures::default(), TagUsage::BOTH).unwrap();
        for (t, s) in p.tensors().iter().zip(ModelParams::expected_shapes(16, 4)) {
            assert_eq!(t.shape(), s);
        }
        let gram = p.w_video.matmul_transposed(&p.w_video).unwrap();
        let expect = Matrix::identity(16).scale(1.0 / 16.0);
        for (a, b) in gram.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_ne!(p.w_video, p.w_text);
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::init(8, 2, 5, Temperatures::default(), TagUsage::BOTH).unwrap();
        let b = ModelParams::init(8, 2, 5, Temperatures::default(), TagUsage::BOTH).unwrap();
        let c = ModelParams::init(8, 2, 6, Temperatures::default(), TagUsage::BOTH).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_dims_and_temperatures() {
        assert!(ModelParams::init(10, 4, 0, Temperatures::default(), TagUsage::BOTH).is_err());
        let bad = Temperatures {
            pool: 0.0,
            ..Temperatures::default()
        };
        assert!(ModelParams::init(8, 4, 0, bad, TagUsage::BOTH).is_err());
    }
}
