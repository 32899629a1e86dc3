//! Seeded optimization loop over a [`FeatureBank`].
//!
//! Only the heads train; encoder features are frozen inputs. Runs are
//! bitwise reproducible for a given bank, config and seed, and a run split
//! by save/resume matches an uninterrupted run exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::databank::{BatchIndex, BatchSchedule, FeatureBank, SampleMode};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossReport, LossVars, LossWeights};
use crate::model::{
    check_dims, decode_payload, encode_payload, forward, read_container, save_checkpoint,
    write_container, CheckpointHeader, Dtype, ForwardOutput, ModelParams, PairInputs, ParamVars,
    TagUsage, Temperatures,
};
use crate::numkernel::{adam_step, AdamState, Tape};

pub const TRAINER_STATE_FORMAT: &str = "macvr-trainer-state";

/// Training hyperparameters. Every field has a default, so a config file
/// only needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of latent concepts.
    pub k: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub alpha_c: f64,
    pub alpha_a: f64,
    /// Frame pooling temperature.
    pub tau_a: f64,
    /// Concept contrastive temperature.
    pub tau_c: f64,
    /// Cross-modal InfoNCE temperature.
    pub tau_s: f64,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub use_visual_tags: bool,
    pub use_textual_tags: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let t = Temperatures::default();
        let w = LossWeights::default();
        Self {
            k: 8,
            batch_size: 32,
            epochs: 100,
            base_lr: 1e-3,
            warmup_steps: 100,
            seed: 0,
            alpha_c: w.alpha_c,
            alpha_a: w.alpha_a,
            tau_a: t.pool,
            tau_c: t.concept,
            tau_s: t.cross_modal,
            checkpoint_every: 0,
            use_visual_tags: true,
            use_textual_tags: true,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha_c: self.alpha_c,
            alpha_a: self.alpha_a,
        }
    }

    pub fn temperatures(&self) -> Temperatures {
        Temperatures {
            pool: self.tau_a,
            concept: self.tau_c,
            cross_modal: self.tau_s,
        }
    }

    pub fn tags(&self) -> TagUsage {
        TagUsage {
            visual: self.use_visual_tags,
            textual: self.use_textual_tags,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        check_dims(d, self.k)?;
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Parameter(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        self.weights().validate()?;
        self.temperatures().validate()
    }
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub report: LossReport,
    pub lr: f64,
}

pub const CURVE_HEADER: &str = "step,L_S,L_C,L_A,total,lr";

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.report.cross_modal, r.report.concept, r.report.alignment, r.report.total, r.lr
        );
    }
    out
}

/// Builds the full training objective for one batch on `tape`.
pub fn objective(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ParamVars,
    bank: &FeatureBank,
    batch: &BatchIndex,
    weights: &LossWeights,
) -> Result<(LossVars, ForwardOutput)> {
    let inputs = PairInputs::gather(bank, batch, batch, params.temperatures.pool)?;
    let out = forward(tape, params, vars, &inputs)?;
    let b = batch.len();
    let diagonal: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let video = tape.select_rows(out.video_pairs, &diagonal)?;
    let losses = total_loss(
        tape,
        out.similarity,
        video,
        out.text,
        params.tags.visual.then_some(out.tag_visual),
        params.tags.textual.then_some(out.tag_textual),
        params.k,
        weights,
        params.temperatures.concept,
        params.temperatures.cross_modal,
    )?;
    Ok((losses, out))
}

/// Parameters, optimizer moments and step counter: everything needed to
/// continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub step: usize,
    pub seed: u64,
    pub params: ModelParams,
    pub adam: Vec<AdamState>,
}

impl TrainerState {
    /// Writes the state as a full-precision (`f64le`) container: parameters,
    /// then first moments, then second moments, each in checkpoint order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = CheckpointHeader::for_params(&self.params, Dtype::F64le, self.seed, self.step);
        header.format = TRAINER_STATE_FORMAT.into();
        let tensors = self
            .params
            .tensors()
            .into_iter()
            .chain(self.adam.iter().map(|a| &a.m))
            .chain(self.adam.iter().map(|a| &a.v));
        write_container(path, &header, &encode_payload(tensors, Dtype::F64le))
    }

    /// Reads a state file; optimizer hyperparameters come from `config`.
    pub fn load(path: &Path, config: &TrainConfig) -> Result<Self> {
        let (header, payload): (CheckpointHeader, _) = read_container(path)?;
        if header.format != TRAINER_STATE_FORMAT {
            return Err(Error::Checkpoint(format!("{} is not a trainer state file", path.display())));
        }
        if header.k != config.k {
            return Err(Error::Checkpoint(format!(
                "state has K={}, config has K={}",
                header.k, config.k
            )));
        }
        check_dims(header.d, header.k).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let shapes = ModelParams::expected_shapes(header.d, header.k);
        let all: Vec<_> = shapes.iter().chain(&shapes).chain(&shapes).copied().collect();
        let mut tensors = decode_payload(&payload, header.dtype, &all)?;
        let v = tensors.split_off(16);
        let m = tensors.split_off(8);
        let params = ModelParams::from_tensors(
            header.d,
            header.k,
            tensors,
            config.temperatures(),
            config.tags(),
        )?;
        let adam = m
            .into_iter()
            .zip(v)
            .map(|(m, v)| AdamState {
                step: header.step,
                m,
                v,
                ..AdamState::new((0, 0), config.base_lr, config.warmup_steps)
            })
            .collect();
        Ok(Self {
            step: header.step,
            seed: header.seed,
            params,
            adam,
        })
    }
}

pub struct Trainer<'a> {
    bank: &'a FeatureBank,
    config: TrainConfig,
    schedule: BatchSchedule,
    state: TrainerState,
}

impl<'a> Trainer<'a> {
    pub fn new(bank: &'a FeatureBank, config: TrainConfig) -> Result<Self> {
        config.validate(bank.d())?;
        let params = ModelParams::init(bank.d(), config.k, config.seed, config.temperatures(), config.tags())?;
        let adam = params
            .tensors()
            .iter()
            .map(|t| AdamState::new(t.shape(), config.base_lr, config.warmup_steps))
            .collect();
        let state = TrainerState {
            step: 0,
            seed: config.seed,
            params,
            adam,
        };
        Self::from_state(bank, config, state)
    }

    /// Continues from a saved state. The state's dimensions must match the
    /// bank and config.
    pub fn from_state(bank: &'a FeatureBank, config: TrainConfig, state: TrainerState) -> Result<Self> {
        config.validate(bank.d())?;
        if state.params.d != bank.d() || state.params.k != config.k {
            return Err(Error::Checkpoint(format!(
                "state has d={}, K={}; bank/config need d={}, K={}",
                state.params.d,
                state.params.k,
                bank.d(),
                config.k
            )));
        }
        let schedule = BatchSchedule::for_bank(bank, config.batch_size, state.seed, SampleMode::Train)?;
        Ok(Self {
            bank,
            config,
            schedule,
            state,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.config.epochs * self.schedule.steps_per_epoch()
    }

    pub fn steps_done(&self) -> usize {
        self.state.step
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    pub fn params(&self) -> &ModelParams {
        &self.state.params
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schedule(&self) -> &BatchSchedule {
        &self.schedule
    }

    /// One forward/backward/update on the scheduled batch.
    pub fn step(&mut self) -> Result<CurveRow> {
        let step = self.state.step;
        let batch = self.schedule.batch_at(step);
        let weights = self.config.weights();
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &self.state.params, true);
        let (losses, _) = objective(&mut tape, &self.state.params, &vars, self.bank, &batch, &weights)?;
        let report = losses.report(&tape);
        if let Some(term) = report.non_finite_term() {
            return Err(Error::NonFiniteLoss { step, term });
        }
        let mut grads = tape.backward(losses.total)?;
        let mut lr = self.config.base_lr;
        for ((param, adam), var) in self
            .state
            .params
            .tensors_mut()
            .into_iter()
            .zip(self.state.adam.iter_mut())
            .zip(vars.all())
        {
            let grad = grads
                .take(var)
                .unwrap_or_else(|| crate::Matrix::zeros(param.rows(), param.cols()));
            lr = adam_step(param, &grad, adam)?;
        }
        self.state.step += 1;
        Ok(CurveRow { step, report, lr })
    }

    /// Steps until `total_steps`, calling `on_step` after each update.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &CurveRow) -> Result<()>) -> Result<Vec<CurveRow>> {
        let mut curve = Vec::with_capacity(self.total_steps().saturating_sub(self.state.step));
        while !self.is_finished() {
            let row = self.step()?;
            on_step(self, &row)?;
            curve.push(row);
        }
        Ok(curve)
    }

    pub fn into_state(self) -> TrainerState {
        self.state
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainerState,
    pub curve: Vec<CurveRow>,
}

impl TrainOutcome {
    pub fn params(&self) -> &ModelParams {
        &self.state.params
    }
}

/// Trains from scratch in memory.
pub fn train(bank: &FeatureBank, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(bank, config.clone())?;
    let curve = trainer.run(|_, _| Ok(()))?;
    Ok(TrainOutcome {
        state: trainer.into_state(),
        curve,
    })
}

/// Files written by [`train_to_dir`] and [`resume_to_dir`].
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub trainer_state: PathBuf,
    pub loss_curve: PathBuf,
}

impl TrainArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join("checkpoint.bin"),
            trainer_state: dir.join("trainer_state.bin"),
            loss_curve: dir.join("loss_curve.csv"),
        }
    }
}

fn run_with_artifacts(mut trainer: Trainer<'_>, out_dir: &Path, mut curve: Vec<CurveRow>) -> Result<(TrainOutcome, TrainArtifacts)> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let every = trainer.config().checkpoint_every;
    let seed = trainer.state().seed;
    curve.extend(trainer.run(|t, _| {
        let done = t.steps_done();
        if every > 0 && done % every == 0 && !t.is_finished() {
            let path = out_dir.join(format!("checkpoint_step{done}.bin"));
            save_checkpoint(&path, t.params(), seed, done)?;
        }
        Ok(())
    })?);
    let artifacts = TrainArtifacts::in_dir(out_dir);
    let state = trainer.into_state();
    save_checkpoint(&artifacts.checkpoint, &state.params, state.seed, state.step)?;
    state.save(&artifacts.trainer_state)?;
    fs::write(&artifacts.loss_curve, curve_csv(&curve)).map_err(|e| Error::io(&artifacts.loss_curve, e))?;
    Ok((TrainOutcome { state, curve }, artifacts))
}

/// Trains from scratch, writing the final checkpoint, the trainer state,
/// the loss curve and any intermediate checkpoints into `out_dir`.
pub fn train_to_dir(bank: &FeatureBank, config: &TrainConfig, out_dir: &Path) -> Result<(TrainOutcome, TrainArtifacts)> {
    run_with_artifacts(Trainer::new(bank, config.clone())?, out_dir, Vec::new())
}

/// Continues a run from a trainer state file up to the config's total step
/// count. The loss curve written to `out_dir` covers only the resumed steps.
pub fn resume_to_dir(
    state_path: &Path,
    bank: &FeatureBank,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<(TrainOutcome, TrainArtifacts)> {
    let state = TrainerState::load(state_path, config)?;
    run_with_artifacts(Trainer::from_state(bank, config.clone(), state)?, out_dir, Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank(n: usize, d: usize) -> FeatureBank {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut m = |rows: usize| Matrix::from_fn(rows, d, |_, _| rng.random_range(-1.0..1.0));
        FeatureBank::new(m(n), m(n * 2), m(n * 2), m(n * 2), 2, 2).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            k: 2,
            batch_size: 4,
            epochs: 3,
            warmup_steps: 4,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn epoch_accounting() {
        let b = bank(8, 8);
        let bad = TrainConfig { epochs: 0, ..small_config() };
        assert!(Trainer::new(&b, bad).is_err());
        let one = TrainConfig { epochs: 1, batch_size: 8, ..small_config() };
        let out = train(&b, &one).unwrap();
        assert_eq!(out.curve.len(), 1);
        assert_eq!(out.state.step, 1);
        let t = Trainer::new(&b, small_config()).unwrap();
        assert_eq!(t.total_steps(), 6);
    }

    #[test]
    fn warmup_lr_increases_and_curve_is_finite() {
        let b = bank(8, 8);
        let out = train(&b, &small_config()).unwrap();
        let lrs: Vec<f64> = out.curve.iter().map(|r| r.lr).collect();
        assert!(lrs[..4].windows(2).all(|w| w[1] > w[0]));
        assert_eq!(lrs[4], 1e-3);
        assert!(out.curve.iter().all(|r| r.report.non_finite_term().is_none()));
        let csv = curve_csv(&out.curve);
        assert!(csv.starts_with("step,L_S,L_C,L_A,total,lr\n"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn same_seed_same_params() {
        let b = bank(8, 8);
        let a = train(&b, &small_config()).unwrap();
        let c = train(&b, &small_config()).unwrap();
        assert_eq!(a.state, c.state);
        let other = train(&b, &TrainConfig { seed: 10, ..small_config() }).unwrap();
        assert_ne!(a.state.params, other.state.params);
    }

    #[test]
    fn split_run_matches_straight_run() {
        let b = bank(8, 8);
        let config = TrainConfig { epochs: 5, ..small_config() };
        let straight = train(&b, &config).unwrap();
        assert_eq!(straight.state.step, 10);

        let dir = tempfile::tempdir().unwrap();
        let mut first = Trainer::new(&b, config.clone()).unwrap();
        for _ in 0..5 {
            first.step().unwrap();
        }
        let path = dir.path().join("state.bin");
        first.state().save(&path).unwrap();
        let restored = TrainerState::load(&path, &config).unwrap();
        assert_eq!(&restored, first.state());
        let mut second = Trainer::from_state(&b, config, restored).unwrap();
        second.run(|_, _| Ok(())).unwrap();
        for (x, y) in second.params().tensors().iter().zip(straight.params().tensors()) {
            let diff = x.zip_map(y, |a, b| (a - b).abs()).unwrap().max_abs();
            assert!(diff <= 1e-12, "{diff}");
        }
    }

    #[test]
    fn resume_for_zero_steps_is_identity() {
        let b = bank(8, 8);
        let config = small_config();
        let dir = tempfile::tempdir().unwrap();
        let (_, first) = train_to_dir(&b, &config, &dir.path().join("a")).unwrap();
        let (out, second) = resume_to_dir(&first.trainer_state, &b, &config, &dir.path().join("b")).unwrap();
        assert!(out.curve.is_empty());
        assert_eq!(fs::read(first.checkpoint).unwrap(), fs::read(second.checkpoint).unwrap());
        assert_eq!(fs::read(first.trainer_state).unwrap(), fs::read(second.trainer_state).unwrap());
    }

    #[test]
    fn mismatched_k_is_rejected() {
        let b = bank(8, 8);
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig { k: 4, epochs: 1, ..small_config() };
        let (_, art) = train_to_dir(&b, &config, dir.path()).unwrap();
        let eight = TrainConfig { k: 8, ..config };
        let err = TrainerState::load(&art.trainer_state, &eight).unwrap_err();
        assert_eq!(err.code(), "model.checkpoint");
    }

    #[test]
    fn periodic_checkpoints_are_written() {
        let b = bank(8, 8);
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig { checkpoint_every: 2, ..small_config() };
        train_to_dir(&b, &config, dir.path()).unwrap();
        for s in [2, 4] {
            assert!(dir.path().join(format!("checkpoint_step{s}.bin")).exists());
        }
        assert!(!dir.path().join("checkpoint_step6.bin").exists());
        assert!(dir.path().join("checkpoint.bin").exists());
    }

    #[test]
    fn non_finite_loss_aborts_with_step_and_term() {
        let b = bank(8, 8);
        let mut t = Trainer::new(&b, small_config()).unwrap();
        t.state.params.mlp_b2 = Matrix::scalar(f64::NAN);
        match t.step() {
            Err(Error::NonFiniteLoss { step, term }) => {
                assert_eq!(step, 0);
                assert_eq!(term, "L_S");
            }
            other => panic!("expected non-finite loss, got {other:?}"),
        }
    }
}
