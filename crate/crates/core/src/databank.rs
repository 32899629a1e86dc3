//! Feature banks: frozen-encoder outputs stored as raw little-endian `f32`
//! streams described by a JSON manifest, plus seeded batch sampling.
//!
//! Layout on disk (all row-major, no header):
//!
//! | stream         | shape        | order                         |
//! |----------------|--------------|-------------------------------|
//! | `text`         | n × d        | sample                        |
//! | `frames`       | n × N_v × d  | sample-major, then frame      |
//! | `tags_visual`  | n × R × d    | sample-major, then variant    |
//! | `tags_textual` | n × R × d    | sample-major, then variant    |
//!
//! Tag variant 0 is the deterministic inference sentence.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

pub const MANIFEST_VERSION: u32 = 1;
pub const DTYPE_F32LE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamPaths {
    pub text: PathBuf,
    pub frames: PathBuf,
    pub tags_visual: PathBuf,
    pub tags_textual: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub d: usize,
    pub n: usize,
    pub n_frames: usize,
    pub n_tag_variants: usize,
    pub dtype: String,
    pub streams: StreamPaths,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ids: Option<Vec<String>>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        manifest.validate(path)?;
        Ok(manifest)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::Manifest {
                path: path.to_path_buf(),
                reason,
            })
        };
        if self.version != MANIFEST_VERSION {
            return fail(format!("unsupported version {}", self.version));
        }
        if self.dtype != DTYPE_F32LE {
            return fail(format!("dtype must be \"{DTYPE_F32LE}\", got \"{}\"", self.dtype));
        }
        if self.d == 0 || self.n == 0 || self.n_frames == 0 || self.n_tag_variants == 0 {
            return fail("d, n, n_frames and n_tag_variants must all be positive".into());
        }
        if let Some(ids) = &self.ids {
            if ids.len() != self.n {
                return fail(format!("{} ids for {} samples", ids.len(), self.n));
            }
        }
        Ok(())
    }
}

/// Per-sample embeddings of the four input streams.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    d: usize,
    n: usize,
    n_frames: usize,
    n_variants: usize,
    text: Matrix,
    frames: Matrix,
    tags_visual: Matrix,
    tags_textual: Matrix,
    ids: Option<Vec<String>>,
}

impl FeatureBank {
    /// Assembles a bank from in-memory streams, validating shapes and finiteness.
    ///
    /// `frames` is `(n·n_frames)×d`, tag streams are `(n·n_variants)×d`.
    pub fn new(
        text: Matrix,
        frames: Matrix,
        tags_visual: Matrix,
        tags_textual: Matrix,
        n_frames: usize,
        n_variants: usize,
    ) -> Result<Self> {
        let (n, d) = text.shape();
        if n == 0 || d == 0 || n_frames == 0 || n_variants == 0 {
            return Err(Error::Parameter(
                "bank dimensions must all be positive".into(),
            ));
        }
        let expect = [
            ("frames", &frames, n * n_frames),
            ("tags_visual", &tags_visual, n * n_variants),
            ("tags_textual", &tags_textual, n * n_variants),
        ];
        for (name, m, rows) in expect {
            if m.shape() != (rows, d) {
                return Err(Error::Dimension {
                    op: name,
                    left: m.shape(),
                    right: (rows, d),
                });
            }
        }
        for (name, m) in [
            ("text", &text),
            ("frames", &frames),
            ("tags_visual", &tags_visual),
            ("tags_textual", &tags_textual),
        ] {
            if let Some(index) = m.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteInput {
                    stream: name.into(),
                    index,
                });
            }
        }
        Ok(Self {
            d,
            n,
            n_frames,
            n_variants,
            text,
            frames,
            tags_visual,
            tags_textual,
            ids: None,
        })
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n {
            return Err(Error::Parameter(format!(
                "{} ids for {} samples",
                ids.len(),
                self.n
            )));
        }
        self.ids = Some(ids);
        Ok(self)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_variants(&self) -> usize {
        self.n_variants
    }

    pub fn ids(&self) -> Option<&[String]> {
        self.ids.as_deref()
    }

    /// Display id of sample `i`: the manifest id if present, else the index.
    pub fn id(&self, i: usize) -> String {
        match &self.ids {
            Some(ids) => ids[i].clone(),
            None => i.to_string(),
        }
    }

    pub fn text(&self) -> &Matrix {
        &self.text
    }

    pub fn frames(&self) -> &Matrix {
        &self.frames
    }

    pub fn tags_visual(&self) -> &Matrix {
        &self.tags_visual
    }

    pub fn tags_textual(&self) -> &Matrix {
        &self.tags_textual
    }

    pub fn text_row(&self, i: usize) -> &[f64] {
        self.text.row(i)
    }

    /// `n_frames × d` block of sample `i`.
    pub fn frames_of(&self, i: usize) -> &[f64] {
        let width = self.n_frames * self.d;
        &self.frames.data()[i * width..(i + 1) * width]
    }

    pub fn tag_visual_row(&self, i: usize, variant: usize) -> &[f64] {
        self.tags_visual.row(i * self.n_variants + variant)
    }

    pub fn tag_textual_row(&self, i: usize, variant: usize) -> &[f64] {
        self.tags_textual.row(i * self.n_variants + variant)
    }

    /// Copy of this bank with every sample's video-side streams scaled by `factor`.
    pub fn with_scaled_video(&self, factor: f64) -> Result<Self> {
        FeatureBank::new(
            self.text.clone(),
            self.frames.scale(factor),
            self.tags_visual.scale(factor),
            self.tags_textual.clone(),
            self.n_frames,
            self.n_variants,
        )
    }

    fn manifest(&self, stem: &str) -> Manifest {
        let file = |s: &str| PathBuf::from(format!("{stem}{s}.f32"));
        Manifest {
            version: MANIFEST_VERSION,
            d: self.d,
            n: self.n,
            n_frames: self.n_frames,
            n_tag_variants: self.n_variants,
            dtype: DTYPE_F32LE.into(),
            streams: StreamPaths {
                text: file("text"),
                frames: file("frames"),
                tags_visual: file("tags_visual"),
                tags_textual: file("tags_textual"),
            },
            ids: self.ids.clone(),
        }
    }

    /// Writes `manifest.json` and the four stream files into `dir`.
    /// Returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest("");
        let streams = [
            (&manifest.streams.text, &self.text),
            (&manifest.streams.frames, &self.frames),
            (&manifest.streams.tags_visual, &self.tags_visual),
            (&manifest.streams.tags_textual, &self.tags_textual),
        ];
        for (rel, m) in streams {
            let path = dir.join(rel);
            fs::write(&path, encode_f32le(m.data())).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Loads and validates the bank described by `manifest_path`. Stream paths
/// are resolved relative to the manifest's directory.
pub fn load_bank(manifest_path: &Path) -> Result<FeatureBank> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let (n, d) = (manifest.n, manifest.d);
    let read = |name: &str, rel: &Path, rows: usize| -> Result<Matrix> {
        let path = base.join(rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = (rows * d * 4) as u64;
        if bytes.len() as u64 != expected {
            return Err(Error::SizeMismatch {
                stream: name.into(),
                expected,
                found: bytes.len() as u64,
            });
        }
        let data = decode_f32le(&bytes);
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput {
                stream: name.into(),
                index,
            });
        }
        Matrix::new(rows, d, data)
    };
    let s = &manifest.streams;
    let text = read("text", &s.text, n)?;
    let frames = read("frames", &s.frames, n * manifest.n_frames)?;
    let tags_visual = read("tags_visual", &s.tags_visual, n * manifest.n_tag_variants)?;
    let tags_textual = read("tags_textual", &s.tags_textual, n * manifest.n_tag_variants)?;
    let bank = FeatureBank::new(
        text,
        frames,
        tags_visual,
        tags_textual,
        manifest.n_frames,
        manifest.n_tag_variants,
    )?;
    match manifest.ids {
        Some(ids) => bank.with_ids(ids),
        None => Ok(bank),
    }
}

pub fn encode_f32le(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&x| (x as f32).to_le_bytes())
        .collect()
}

/// Decodes raw `f32le` bytes, upcasting to `f64`. Trailing partial words are ignored.
pub fn decode_f32le(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Train,
    Infer,
}

/// Sample indices of one batch with the tag variant chosen for each sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndex {
    pub samples: Vec<usize>,
    pub visual_variants: Vec<usize>,
    pub textual_variants: Vec<usize>,
}

impl BatchIndex {
    /// Every sample in order, variant 0 throughout.
    pub fn all_infer(n: usize) -> Self {
        Self {
            samples: (0..n).collect(),
            visual_variants: vec![0; n],
            textual_variants: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Deterministic epoch-by-epoch batch schedule.
///
/// Epoch `e` uses its own ChaCha stream, so any step can be reconstructed
/// without replaying earlier epochs. The final batch of an epoch may be short.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSchedule {
    n: usize,
    n_variants: usize,
    batch_size: usize,
    seed: u64,
    mode: SampleMode,
}

impl BatchSchedule {
    pub fn new(
        n: usize,
        n_variants: usize,
        batch_size: usize,
        seed: u64,
        mode: SampleMode,
    ) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(Error::Parameter(format!(
                "batch size {batch_size} must be in 1..={n}"
            )));
        }
        if n_variants == 0 {
            return Err(Error::Parameter("n_variants must be positive".into()));
        }
        Ok(Self {
            n,
            n_variants,
            batch_size,
            seed,
            mode,
        })
    }

    pub fn for_bank(bank: &FeatureBank, batch_size: usize, seed: u64, mode: SampleMode) -> Result<Self> {
        Self::new(bank.len(), bank.n_variants(), batch_size, seed, mode)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    /// All batches of epoch `epoch` (0-based).
    pub fn epoch(&self, epoch: usize) -> Vec<BatchIndex> {
        let order: Vec<usize> = match self.mode {
            SampleMode::Infer => (0..self.n).collect(),
            SampleMode::Train => {
                let mut rng = self.epoch_rng(epoch);
                let mut order: Vec<usize> = (0..self.n).collect();
                order.shuffle(&mut rng);
                order
            }
        };
        let mut rng = self.epoch_rng(epoch);
        // skip past the shuffle draws by using an independent word position
        rng.set_word_pos(1 << 32);
        order
            .chunks(self.batch_size)
            .map(|chunk| {
                let mut visual = Vec::with_capacity(chunk.len());
                let mut textual = Vec::with_capacity(chunk.len());
                for _ in chunk {
                    match self.mode {
                        SampleMode::Infer => {
                            visual.push(0);
                            textual.push(0);
                        }
                        SampleMode::Train => {
                            visual.push(rng.random_range(0..self.n_variants));
                            textual.push(rng.random_range(0..self.n_variants));
                        }
                    }
                }
                BatchIndex {
                    samples: chunk.to_vec(),
                    visual_variants: visual,
                    textual_variants: textual,
                }
            })
            .collect()
    }

    /// Batch used at global step `step` (0-based).
    pub fn batch_at(&self, step: usize) -> BatchIndex {
        let per = self.steps_per_epoch();
        self.epoch(step / per).swap_remove(step % per)
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }
}

/// First batch of a seeded schedule over `bank`.
pub fn sample_batch(
    bank: &FeatureBank,
    batch_size: usize,
    rng_seed: u64,
    mode: SampleMode,
) -> Result<BatchIndex> {
    Ok(BatchSchedule::for_bank(bank, batch_size, rng_seed, mode)?.batch_at(0))
}
