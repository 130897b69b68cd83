//! Progressive training: fade-in schedule, alternating encoder/decoder
//! updates, Adam, margin scheduling, EMA, logging and divergence tracking.

pub mod ablation;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::config::Config;
use crate::data::{BatchCursor, Dataset, Partition};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{
    decoder_objective, encoder_objective, fit_diagonal_gaussian, margin_for, LossReport, LossWeights, Margin,
    MarginSchedule,
};
use crate::model::{
    build_networks, codes_to_tensor, ema_update, named_grads, Binder, Decoder, Encoder, FrozenModel, ImageBatch,
    LatentCode, Params, PhaseState, SpectralMode,
};
use crate::normalization::{power_iteration, wrap_layers, SpectralSet};
use crate::tensor::Tensor;

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta1: 0.0,
            beta2: 0.99,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.alpha.is_finite();
        if !ok {
            return Err(Error::config(
                "train.optimizer",
                "need alpha >= 0, beta1 and beta2 in [0, 1), epsilon > 0",
            ));
        }
        Ok(())
    }
}

/// First and second moment estimates of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    /// Updates applied to this parameter so far.
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with per-parameter bias correction; parameters without a gradient are left alone.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub moments: BTreeMap<String, Moment>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let AdamConfig {
            alpha,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        for (name, grad) in grads {
            let w = params
                .get_mut(name)
                .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter `{name}`")))?;
            if w.shape() != grad.shape() {
                return Err(Error::Shape(format!("gradient shape mismatch for `{name}`")));
            }
            let n = w.numel();
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moment {
                t: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            mo.t += 1;
            let c1 = 1.0 - beta1.powi(mo.t as i32);
            let c2 = 1.0 - beta2.powi(mo.t as i32);
            for (((w, g), m), v) in w.data_mut().iter_mut().zip(grad.data()).zip(&mut mo.m).zip(&mut mo.v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= alpha * mhat / (vhat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Margin source for the encoder hinge.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum MarginOverride {
    /// Follow `train.margin_schedule`.
    #[default]
    Schedule,
    /// A fixed margin for the whole run (`inf` disables the hinge).
    Fixed(Margin),
}

impl Serialize for MarginOverride {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MarginOverride::Schedule => s.serialize_str("schedule"),
            MarginOverride::Fixed(m) => m.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for MarginOverride {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Text(t) if t == "schedule" => Ok(MarginOverride::Schedule),
            Repr::Text(t) => t.parse().map(MarginOverride::Fixed).map_err(serde::de::Error::custom),
            Repr::Num(v) if v > 0.0 => Ok(MarginOverride::Fixed(Margin(v))),
            Repr::Num(v) => Err(serde::de::Error::custom(format!("margin must be > 0, got {v}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Multiplies every sample budget and margin threshold.
    pub sample_scale: f64,
    /// Samples per resolution level before scaling.
    pub phase_samples: Vec<u64>,
    pub batch_schedule: Vec<usize>,
    pub optimizer: AdamConfig,
    /// Encoder step size relative to `optimizer.alpha`.
    #[serde(default = "unit_scale")]
    pub encoder_lr_scale: f64,
    pub decoder_steps_per_encoder_step: usize,
    pub ema_decay: f64,
    /// Power iterations refreshing spectral estimates on EMA weights for snapshots.
    pub ema_power_iterations: usize,
    /// Thresholds in unscaled samples.
    pub margin_schedule: MarginSchedule,
    pub margin: MarginOverride,
    pub loss: LossWeights,
    /// Samples between metric windows.
    pub metric_every: u64,
    /// Samples between checkpoints; 0 saves only at phase ends.
    pub checkpoint_every: u64,
    pub divergence_threshold: f64,
    pub divergence_windows: usize,
    pub abort_on_divergence: bool,
}

fn unit_scale() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sample_scale: 1.0,
            phase_samples: vec![2_400_000, 2_400_000, 2_400_000, 2_400_000, 4_800_000, 5_640_000, 7_260_000],
            batch_schedule: vec![128, 128, 128, 128, 64, 32, 16],
            optimizer: AdamConfig::default(),
            encoder_lr_scale: 1.0,
            decoder_steps_per_encoder_step: 2,
            ema_decay: 0.999,
            ema_power_iterations: 10,
            margin_schedule: MarginSchedule::default(),
            margin: MarginOverride::Schedule,
            loss: LossWeights::default(),
            metric_every: 100_000,
            checkpoint_every: 0,
            divergence_threshold: 50.0,
            divergence_windows: 3,
            abort_on_divergence: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, levels: usize) -> Result<()> {
        if !(self.sample_scale > 0.0 && self.sample_scale.is_finite()) {
            return Err(Error::config("train.sample_scale", "must be finite and > 0"));
        }
        if self.phase_samples.len() < levels {
            return Err(Error::config(
                "train.phase_samples",
                format!("needs an entry for each of the {levels} levels"),
            ));
        }
        if self.batch_schedule.len() < levels {
            return Err(Error::config(
                "train.batch_schedule",
                format!("needs an entry for each of the {levels} levels"),
            ));
        }
        if self.batch_schedule.iter().any(|&b| b < 2) {
            return Err(Error::config("train.batch_schedule", "batch sizes must be >= 2"));
        }
        for level in 0..levels {
            if self.phase_budget(level) == 0 {
                return Err(Error::config("train.phase_samples", format!("level {level} has an empty budget")));
            }
        }
        if !(self.encoder_lr_scale.is_finite() && self.encoder_lr_scale > 0.0) {
            return Err(Error::config("train.encoder_lr_scale", "must be finite and > 0"));
        }
        if self.decoder_steps_per_encoder_step == 0 {
            return Err(Error::config("train.decoder_steps_per_encoder_step", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config("train.ema_decay", "must lie in [0, 1]"));
        }
        if self.metric_every == 0 {
            return Err(Error::config("train.metric_every", "must be > 0"));
        }
        if self.divergence_windows == 0 || !(self.divergence_threshold > 0.0) {
            return Err(Error::config("train.divergence_threshold", "threshold and windows must be > 0"));
        }
        self.optimizer.validate()?;
        self.margin_schedule.validate()?;
        self.loss.validate()
    }

    /// Scaled sample budget of a level.
    pub fn phase_budget(&self, level: usize) -> u64 {
        (self.phase_samples[level] as f64 * self.sample_scale).round() as u64
    }

    pub fn scaled_margin_schedule(&self) -> MarginSchedule {
        self.margin_schedule.scaled(self.sample_scale)
    }

    pub fn margin_at(&self, phase: &PhaseState) -> Margin {
        match self.margin {
            MarginOverride::Fixed(m) => m,
            MarginOverride::Schedule => margin_for(&self.scaled_margin_schedule(), phase),
        }
    }
}

/// Fade-in weight: a linear ramp over the first half of the phase, then 1.
pub fn fade_alpha(level: usize, samples_in_phase: u64, budget: u64) -> f64 {
    if level == 0 {
        return 1.0;
    }
    let half = budget as f64 / 2.0;
    if half <= 0.0 {
        1.0
    } else {
        (samples_in_phase as f64 / half).min(1.0)
    }
}

/// Counters of a training run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub level: usize,
    pub samples_in_phase: u64,
    pub samples_seen: u64,
    pub steps: u64,
    pub encoder_updates: u64,
    pub decoder_updates: u64,
    /// `samples_seen` at which the next metric window closes.
    pub next_window: u64,
    pub finished: bool,
}

/// Running sums of the current metric window and the divergence detector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Monitor {
    pub steps: u64,
    pub gap: f64,
    pub kl_real: f64,
    pub kl_fake: f64,
    pub recon_x: f64,
    pub recon_z: f64,
    /// Consecutive windows with `|mean gap|` above the blow-up threshold.
    pub blowup_windows: usize,
    /// Consecutive windows with mean gap below `-M_gap - 0.5`.
    pub below_margin_windows: usize,
    pub max_below_margin_windows: usize,
    pub diverged: bool,
}

/// Gap slack used when counting windows that sit below the margin.
pub const MARGIN_SLACK: f64 = 0.5;

impl Monitor {
    fn add(&mut self, r: &LossReport) {
        self.steps += 1;
        self.gap += r.gap;
        self.kl_real += r.kl_real;
        self.kl_fake += r.kl_fake;
        self.recon_x += r.recon_x;
        self.recon_z += r.recon_z;
    }

    fn close(&mut self, cfg: &TrainConfig, margin: Margin) -> WindowMeans {
        let n = self.steps.max(1) as f64;
        let means = WindowMeans {
            steps: self.steps,
            gap: self.gap / n,
            kl_real: self.kl_real / n,
            kl_fake: self.kl_fake / n,
            recon_x: self.recon_x / n,
            recon_z: self.recon_z / n,
        };
        if means.gap.abs() > cfg.divergence_threshold {
            self.blowup_windows += 1;
        } else {
            self.blowup_windows = 0;
        }
        if self.blowup_windows >= cfg.divergence_windows {
            self.diverged = true;
        }
        if margin.is_enabled() && means.gap < -margin.value() - MARGIN_SLACK {
            self.below_margin_windows += 1;
        } else {
            self.below_margin_windows = 0;
        }
        self.max_below_margin_windows = self.max_below_margin_windows.max(self.below_margin_windows);
        self.steps = 0;
        self.gap = 0.0;
        self.kl_real = 0.0;
        self.kl_fake = 0.0;
        self.recon_x = 0.0;
        self.recon_z = 0.0;
        means
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowMeans {
    pub steps: u64,
    pub gap: f64,
    pub kl_real: f64,
    pub kl_fake: f64,
    pub recon_x: f64,
    pub recon_z: f64,
}

/// One training step in the log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub schema_version: u32,
    pub step: u64,
    pub level: usize,
    pub resolution: usize,
    pub alpha: f64,
    pub samples_seen: u64,
    pub margin: Margin,
    #[serde(flatten)]
    pub report: LossReport,
    pub wall_clock: f64,
}

/// Means over one metric window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub schema_version: u32,
    pub samples_seen: u64,
    pub level: usize,
    pub margin: Margin,
    #[serde(flatten)]
    pub means: WindowMeans,
    pub below_margin_windows: usize,
    pub blowup_windows: usize,
    pub diverged: bool,
    pub wall_clock: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub schema_version: u32,
    pub level: usize,
    pub resolution: usize,
    pub samples_seen: u64,
    pub wall_clock: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Window(WindowRecord),
    PhaseEnd(PhaseRecord),
}

/// Hooks fired by the training loop.
pub trait Observer {
    fn on_step(&mut self, _state: &TrainState, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_metric_window(&mut self, _state: &TrainState, _record: &WindowRecord) -> Result<()> {
        Ok(())
    }

    /// Fired with the state as it stands at the end of the phase, before the level advances.
    fn on_phase_end(&mut self, _state: &TrainState, _record: &PhaseRecord) -> Result<()> {
        Ok(())
    }
}

/// Keeps every record in memory.
#[derive(Debug, Default)]
pub struct MemoryLog {
    pub records: Vec<LogRecord>,
}

impl Observer for MemoryLog {
    fn on_step(&mut self, _: &TrainState, r: &StepRecord) -> Result<()> {
        self.records.push(LogRecord::Step(r.clone()));
        Ok(())
    }

    fn on_metric_window(&mut self, _: &TrainState, r: &WindowRecord) -> Result<()> {
        self.records.push(LogRecord::Window(r.clone()));
        Ok(())
    }

    fn on_phase_end(&mut self, _: &TrainState, r: &PhaseRecord) -> Result<()> {
        self.records.push(LogRecord::PhaseEnd(r.clone()));
        Ok(())
    }
}

/// Appends records to a JSON-lines file.
pub struct JsonlLog {
    out: BufWriter<File>,
}

impl JsonlLog {
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    fn write(&mut self, record: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }
}

impl Observer for JsonlLog {
    fn on_step(&mut self, _: &TrainState, r: &StepRecord) -> Result<()> {
        self.write(&LogRecord::Step(r.clone()))
    }

    fn on_metric_window(&mut self, _: &TrainState, r: &WindowRecord) -> Result<()> {
        self.write(&LogRecord::Window(r.clone()))?;
        self.out.flush()?;
        Ok(())
    }

    fn on_phase_end(&mut self, _: &TrainState, r: &PhaseRecord) -> Result<()> {
        self.write(&LogRecord::PhaseEnd(r.clone()))?;
        self.out.flush()?;
        Ok(())
    }
}

impl Drop for JsonlLog {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Saves a checkpoint every `every` samples and at each phase end.
pub struct Checkpointer {
    pub path: std::path::PathBuf,
    pub every: u64,
    next: u64,
}

impl Checkpointer {
    pub fn new(path: impl Into<std::path::PathBuf>, every: u64, state: &TrainState) -> Self {
        let next = if every == 0 {
            u64::MAX
        } else {
            (state.progress.samples_seen / every + 1) * every
        };
        Self {
            path: path.into(),
            every,
            next,
        }
    }
}

impl Observer for Checkpointer {
    fn on_step(&mut self, state: &TrainState, _: &StepRecord) -> Result<()> {
        if state.progress.samples_seen >= self.next {
            crate::checkpoint::save(state, &self.path)?;
            while self.next <= state.progress.samples_seen {
                self.next += self.every;
            }
        }
        Ok(())
    }

    fn on_phase_end(&mut self, state: &TrainState, _: &PhaseRecord) -> Result<()> {
        crate::checkpoint::save(state, &self.path)
    }
}

pub(crate) fn wall_clock() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Everything a training run owns; checkpoints serialize exactly this.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: Config,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub encoder_params: Params,
    pub decoder_params: Params,
    pub ema_params: Params,
    pub encoder_spectral: SpectralSet,
    pub decoder_spectral: SpectralSet,
    pub encoder_opt: Adam,
    pub decoder_opt: Adam,
    pub progress: Progress,
    pub rng: ChaCha8Rng,
    pub cursor: BatchCursor,
    pub monitor: Monitor,
}

/// Builds and wraps the network pair described by `config`.
pub fn wrapped_networks(config: &Config) -> Result<(Encoder, Decoder)> {
    let (mut encoder, mut decoder) = build_networks(&config.model)?;
    wrap_layers(&mut encoder, &config.norm)?;
    wrap_layers(&mut decoder, &config.norm)?;
    Ok((encoder, decoder))
}

impl TrainState {
    /// Fresh state: seeded initialization, empty optimizer moments, level 0.
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let (encoder, decoder) = wrapped_networks(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder_params = encoder.init_params(&mut rng);
        let decoder_params = decoder.init_params(&mut rng);
        let iters = config.norm.power_iterations;
        let encoder_spectral = encoder.init_spectral(&encoder_params, iters, &mut rng);
        let decoder_spectral = decoder.init_spectral(&decoder_params, iters, &mut rng);
        let opt = config.train.optimizer;
        Ok(Self {
            ema_params: decoder_params.clone(),
            encoder,
            decoder,
            encoder_params,
            decoder_params,
            encoder_spectral,
            decoder_spectral,
            encoder_opt: Adam::new(AdamConfig {
                alpha: opt.alpha * config.train.encoder_lr_scale,
                ..opt
            }),
            decoder_opt: Adam::new(opt),
            progress: Progress {
                next_window: config.train.metric_every,
                ..Progress::default()
            },
            rng,
            cursor: BatchCursor::default(),
            monitor: Monitor::default(),
            config,
        })
    }

    pub fn top_level(&self) -> usize {
        self.config.model.levels() - 1
    }

    pub fn phase(&self) -> PhaseState {
        let p = &self.progress;
        PhaseState {
            level: p.level,
            alpha: fade_alpha(p.level, p.samples_in_phase, self.config.train.phase_budget(p.level)),
            samples_seen: p.samples_seen,
        }
    }

    pub fn margin(&self) -> Margin {
        self.config.train.margin_at(&self.phase())
    }

    pub fn batch_size(&self) -> usize {
        self.config.train.batch_schedule[self.progress.level]
    }

    /// Live encoder with the EMA decoder; decoder spectral estimates are
    /// refined on the averaged weights.
    pub fn snapshot(&self) -> FrozenModel {
        let mut decoder_spectral = self.decoder_spectral.clone();
        for layer in self.decoder.layers.iter().filter(|l| l.wrap.spectral) {
            let w = &self.ema_params[&layer.weight_name()];
            if let Some(state) = decoder_spectral.get_mut(&layer.name) {
                let pi = power_iteration(
                    w.data(),
                    layer.spectral_rows(),
                    w.numel() / layer.spectral_rows(),
                    &state.u,
                    self.config.train.ema_power_iterations,
                );
                state.u = pi.u;
            }
        }
        FrozenModel {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            encoder_params: self.encoder_params.clone(),
            decoder_params: self.ema_params.clone(),
            encoder_spectral: self.encoder_spectral.clone(),
            decoder_spectral,
            phase: self.phase(),
            pixelnorm_epsilon: self.config.norm.pixelnorm_epsilon,
        }
    }

    fn sample_codes(&mut self, n: usize) -> Result<Tensor> {
        let d = self.config.model.latent_dim;
        let codes: Vec<LatentCode> = (0..n).map(|_| LatentCode::sample(d, &mut self.rng)).collect();
        codes_to_tensor(&codes)
    }

    /// One encoder update followed by the configured number of decoder
    /// updates and an EMA update. A non-finite loss leaves every parameter,
    /// optimizer moment and spectral estimate untouched and sets
    /// `report.non_finite`.
    pub fn train_step(&mut self, batch: &ImageBatch) -> Result<LossReport> {
        let phase = self.phase();
        let res = self.config.model.resolution(phase.level);
        if batch.resolution() != res || batch.len() < 2 {
            return Err(Error::Shape(format!(
                "training batch must hold >= 2 images at {res}x{res}, got {:?}",
                batch.values.shape()
            )));
        }
        let margin = self.margin();
        let weights = self.config.train.loss;
        let eps = self.config.norm.pixelnorm_epsilon;
        let iters = self.config.norm.power_iterations;
        let n = batch.len();
        let d = self.config.model.latent_dim;
        let mut report = LossReport::default();

        let z_hat = self.sample_codes(n)?;
        let mut enc_spectral = self.encoder_spectral.clone();
        let mut g = Graph::new();
        let enc_grads = {
            let mut dec = Binder::new(&self.decoder_params, SpectralMode::Frozen(&self.decoder_spectral), false)
                .with_pixelnorm_epsilon(eps);
            let mut enc = Binder::new(&self.encoder_params, SpectralMode::Update(&mut enc_spectral, iters), true)
                .with_pixelnorm_epsilon(eps);
            let zh = g.constant(z_hat);
            let x_fake = self.decoder.forward(&mut g, &mut dec, zh, &phase)?;
            let x = g.constant(batch.values.clone());
            let z_real = self.encoder.forward(&mut g, &mut enc, x, &phase)?;
            let z_fake = self.encoder.forward(&mut g, &mut enc, x_fake, &phase)?;
            let x_rec = self.decoder.forward(&mut g, &mut dec, z_real, &phase)?;
            let terms = encoder_objective(&mut g, z_real, z_fake, x, x_rec, &weights, margin)?;
            report.kl_real = g.value(terms.kl_real).item();
            report.kl_fake = g.value(terms.kl_fake).item();
            report.gap = report.kl_real - report.kl_fake;
            report.hinge_active = margin.is_enabled() && report.gap < -margin.value();
            report.recon_x = g.value(terms.recon_x).item();
            report.encoder_total = g.value(terms.loss).item();
            report.degenerate_variance = fit_diagonal_gaussian(g.value(z_real).data(), n, d).degenerate()
                || fit_diagonal_gaussian(g.value(z_fake).data(), n, d).degenerate();
            if !report.encoder_total.is_finite() {
                report.non_finite = true;
                return Ok(report);
            }
            named_grads(enc.bound(), &mut g.backward(terms.loss)?)
        };
        let mut encoder_params = self.encoder_params.clone();
        let mut encoder_opt = self.encoder_opt.clone();
        encoder_opt.step(&mut encoder_params, &enc_grads)?;

        let mut decoder_params = self.decoder_params.clone();
        let mut decoder_opt = self.decoder_opt.clone();
        let mut dec_spectral = self.decoder_spectral.clone();
        for _ in 0..self.config.train.decoder_steps_per_encoder_step {
            let z_hat = self.sample_codes(n)?;
            let mut g = Graph::new();
            let dec_grads = {
                let mut dec = Binder::new(&decoder_params, SpectralMode::Update(&mut dec_spectral, iters), true)
                    .with_pixelnorm_epsilon(eps);
                let mut enc = Binder::new(&encoder_params, SpectralMode::Frozen(&enc_spectral), false)
                    .with_pixelnorm_epsilon(eps);
                let z = g.constant(z_hat);
                let x_fake = self.decoder.forward(&mut g, &mut dec, z, &phase)?;
                let z_rec = self.encoder.forward(&mut g, &mut enc, x_fake, &phase)?;
                let terms = decoder_objective(&mut g, z, z_rec, &weights)?;
                report.recon_z = g.value(terms.recon_z).item();
                report.decoder_total = g.value(terms.loss).item();
                if !report.decoder_total.is_finite() {
                    report.non_finite = true;
                    return Ok(report);
                }
                named_grads(dec.bound(), &mut g.backward(terms.loss)?)
            };
            decoder_opt.step(&mut decoder_params, &dec_grads)?;
        }
        let mut ema = self.ema_params.clone();
        ema_update(&mut ema, &decoder_params, self.config.train.ema_decay)?;

        self.encoder_params = encoder_params;
        self.encoder_opt = encoder_opt;
        self.encoder_spectral = enc_spectral;
        self.decoder_params = decoder_params;
        self.decoder_opt = decoder_opt;
        self.decoder_spectral = dec_spectral;
        self.ema_params = ema;
        let p = &mut self.progress;
        p.steps += 1;
        p.encoder_updates += 1;
        p.decoder_updates += self.config.train.decoder_steps_per_encoder_step as u64;
        p.samples_seen += n as u64;
        p.samples_in_phase += n as u64;
        Ok(report)
    }
}

/// How a training loop ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunOutcome {
    Completed,
    /// The divergence detector fired and `train.abort_on_divergence` is set.
    Diverged,
    /// A step limit was reached first.
    Paused,
}

/// Runs a single step with all bookkeeping; `None` once training has finished.
fn advance(state: &mut TrainState, dataset: &Dataset, observers: &mut [&mut dyn Observer]) -> Result<Option<RunOutcome>> {
    if state.progress.finished {
        return Ok(Some(RunOutcome::Completed));
    }
    let phase = state.phase();
    let margin = state.margin();
    let (batch, cursor) = dataset.batch_at_resolution(Partition::Train, phase.level, state.batch_size(), state.cursor)?;
    let report = state.train_step(&batch)?;
    if report.non_finite {
        return Err(Error::NonFinite {
            step: state.progress.steps,
            detail: format!("encoder {} decoder {}", report.encoder_total, report.decoder_total),
        });
    }
    state.cursor = cursor;
    state.monitor.add(&report);
    let record = StepRecord {
        schema_version: LOG_SCHEMA_VERSION,
        step: state.progress.steps,
        level: phase.level,
        resolution: state.config.model.resolution(phase.level),
        alpha: phase.alpha,
        samples_seen: state.progress.samples_seen,
        margin,
        report,
        wall_clock: wall_clock(),
    };
    for o in observers.iter_mut() {
        o.on_step(state, &record)?;
    }

    if state.progress.samples_seen >= state.progress.next_window {
        let cfg = state.config.train.clone();
        let means = state.monitor.close(&cfg, margin);
        while state.progress.next_window <= state.progress.samples_seen {
            state.progress.next_window += cfg.metric_every;
        }
        let record = WindowRecord {
            schema_version: LOG_SCHEMA_VERSION,
            samples_seen: state.progress.samples_seen,
            level: phase.level,
            margin,
            means,
            below_margin_windows: state.monitor.below_margin_windows,
            blowup_windows: state.monitor.blowup_windows,
            diverged: state.monitor.diverged,
            wall_clock: wall_clock(),
        };
        for o in observers.iter_mut() {
            o.on_metric_window(state, &record)?;
        }
        if state.monitor.diverged && cfg.abort_on_divergence {
            return Ok(Some(RunOutcome::Diverged));
        }
    }

    let level = state.progress.level;
    if state.progress.samples_in_phase >= state.config.train.phase_budget(level) {
        let record = PhaseRecord {
            schema_version: LOG_SCHEMA_VERSION,
            level,
            resolution: state.config.model.resolution(level),
            samples_seen: state.progress.samples_seen,
            wall_clock: wall_clock(),
        };
        if level == state.top_level() {
            state.progress.finished = true;
        }
        for o in observers.iter_mut() {
            o.on_phase_end(state, &record)?;
        }
        if level < state.top_level() {
            state.progress.level += 1;
            state.progress.samples_in_phase = 0;
        } else {
            return Ok(Some(RunOutcome::Completed));
        }
    }
    Ok(None)
}

fn check_dataset(state: &TrainState, dataset: &Dataset) -> Result<()> {
    if dataset.max_level() < state.top_level() {
        return Err(Error::Data(format!(
            "dataset resolution {} is below the model's {}",
            dataset.resolution(dataset.max_level()),
            state.config.model.max_resolution
        )));
    }
    Ok(())
}

/// Trains until the current phase ends and returns the phase state after it.
pub fn run_phase(
    state: &mut TrainState,
    dataset: &Dataset,
    observers: &mut [&mut dyn Observer],
) -> Result<(PhaseState, RunOutcome)> {
    check_dataset(state, dataset)?;
    let level = state.progress.level;
    loop {
        if let Some(outcome) = advance(state, dataset, observers)? {
            return Ok((state.phase(), outcome));
        }
        if state.progress.level != level {
            return Ok((state.phase(), RunOutcome::Paused));
        }
    }
}

/// Trains every remaining phase, base to top resolution.
pub fn run_schedule(
    state: &mut TrainState,
    dataset: &Dataset,
    observers: &mut [&mut dyn Observer],
) -> Result<RunOutcome> {
    run_steps(state, dataset, observers, u64::MAX)
}

/// Trains for at most `max_steps` further steps.
pub fn run_steps(
    state: &mut TrainState,
    dataset: &Dataset,
    observers: &mut [&mut dyn Observer],
    max_steps: u64,
) -> Result<RunOutcome> {
    check_dataset(state, dataset)?;
    for _ in 0..max_steps {
        if let Some(outcome) = advance(state, dataset, observers)? {
            return Ok(outcome);
        }
    }
    Ok(if state.progress.finished {
        RunOutcome::Completed
    } else {
        RunOutcome::Paused
    })
}
