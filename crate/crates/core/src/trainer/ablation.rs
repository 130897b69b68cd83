//! Normalization-scheme by margin ablation matrix.

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::Margin;
use crate::metrics::{fid, FeatureExtractor, FeatureStats};
use crate::normalization::{NormScheme, Sites};
use crate::trainer::{run_schedule, MarginOverride, Observer, RunOutcome, TrainState, WindowRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub norm: NormScheme,
    /// Follow the base margin schedule; otherwise the hinge is disabled.
    pub margin: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub cells: Vec<AblationCell>,
    /// Fraction of the base sample budget each cell trains for.
    pub budget_fraction: f64,
    /// Metric windows between FID evaluations.
    pub fid_every_windows: usize,
    pub fid_samples: usize,
}

/// Pixel norm, equalized learning rate and their combination replace spectral
/// normalization in the decoder only; the encoder keeps it, as in the baseline
/// architecture.
fn decoder_scheme(pixelnorm: bool, eqlr: bool) -> NormScheme {
    let on = |b| if b { Sites::Decoder } else { Sites::None };
    NormScheme {
        spectral: Sites::Encoder,
        pixelnorm: on(pixelnorm),
        eqlr: on(eqlr),
        ..NormScheme::none()
    }
}

impl AblationSpec {
    /// The nine cells: eight scheme/margin combinations plus no normalization at all.
    pub fn standard() -> Self {
        let mut cells = Vec::new();
        for (name, norm) in [
            ("PN", decoder_scheme(true, false)),
            ("EQLR", decoder_scheme(false, true)),
            ("EQLR+PN", decoder_scheme(true, true)),
            ("SN", NormScheme::balanced()),
        ] {
            for margin in [false, true] {
                cells.push(AblationCell {
                    name: if margin { format!("{name}+margin") } else { name.to_string() },
                    norm: norm.clone(),
                    margin,
                });
            }
        }
        cells.push(AblationCell {
            name: "none".into(),
            norm: NormScheme::none(),
            margin: false,
        });
        Self {
            cells,
            budget_fraction: 0.2,
            fid_every_windows: 2,
            fid_samples: 500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::config("ablation.cells", "at least one cell is required"));
        }
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return Err(Error::config("ablation.budget_fraction", "must lie in (0, 1]"));
        }
        if self.fid_every_windows == 0 || self.fid_samples < 2 {
            return Err(Error::config("ablation.fid_every_windows", "cadence and sample count must be positive"));
        }
        let mut names: Vec<_> = self.cells.iter().map(|c| &c.name).collect();
        names.sort();
        names.dedup();
        if names.len() != self.cells.len() {
            return Err(Error::config("ablation.cells", "cell names must be unique"));
        }
        for c in &self.cells {
            c.norm.validate()?;
        }
        Ok(())
    }

    /// The shared configuration every cell starts from: the base with the
    /// reduced budget, training continuing through divergence so it can be
    /// recorded.
    pub fn shared_config(&self, base: &Config) -> Config {
        let mut c = base.clone();
        c.train.sample_scale *= self.budget_fraction;
        c.train.metric_every = ((c.train.metric_every as f64 * self.budget_fraction).round() as u64).max(1);
        c.train.abort_on_divergence = true;
        c
    }

    pub fn cell_config(&self, base: &Config, cell: &AblationCell) -> Config {
        let mut c = self.shared_config(base);
        c.norm = cell.norm.clone();
        c.train.margin = if cell.margin {
            MarginOverride::Schedule
        } else {
            MarginOverride::Fixed(Margin::DISABLED)
        };
        c
    }
}

/// Config keys a cell may differ on.
pub fn is_declared_factor(key: &str) -> bool {
    key.starts_with("norm.") || key == "train.margin"
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidPoint {
    pub samples_seen: u64,
    pub fid: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTrace {
    pub name: String,
    pub margin: bool,
    pub diverged: bool,
    /// Set when training stopped on an error such as a non-finite loss.
    pub error: Option<String>,
    pub samples_seen: u64,
    pub windows: Vec<WindowRecord>,
    pub fid: Vec<FidPoint>,
    /// FID at the end of training; absent for diverged cells.
    pub final_fid: Option<f64>,
    pub best_fid: Option<f64>,
    /// Config keys that differ from the shared configuration.
    pub config_diff: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub cells: Vec<CellTrace>,
}

/// Marker printed in place of a diverged cell's FID.
pub const DIVERGED: &str = "---";

impl AblationReport {
    /// Tab-separated summary, one row per cell.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>, diverged: bool| match v {
            Some(v) if !diverged => format!("{v:.3}"),
            _ => DIVERGED.to_string(),
        };
        let mut out = String::from("cell\tmargin\tdiverged\tfinal_fid\tbest_fid\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                c.name,
                c.margin,
                c.diverged,
                fmt(c.final_fid, c.diverged),
                c.best_fid.map_or(DIVERGED.to_string(), |v| format!("{v:.3}")),
            ));
        }
        out
    }

    /// Per-window KL traces of every cell, long format.
    pub fn kl_traces(&self) -> String {
        let mut out = String::from("cell\tsamples_seen\tkl_real\tkl_fake\tgap\tmargin\n");
        for c in &self.cells {
            for w in &c.windows {
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\n",
                    c.name, w.samples_seen, w.means.kl_real, w.means.kl_fake, w.means.gap, w.margin
                ));
            }
        }
        out
    }
}

struct CellObserver<'a> {
    extractor: &'a dyn FeatureExtractor,
    reference: &'a FeatureStats,
    every: usize,
    samples: usize,
    seed: u64,
    seen: usize,
    windows: Vec<WindowRecord>,
    fid: Vec<FidPoint>,
}

impl CellObserver<'_> {
    fn measure(&mut self, state: &TrainState) -> Result<()> {
        let model = state.snapshot();
        let value = fid(&model, self.extractor, self.reference, self.samples, self.seed)?;
        self.fid.push(FidPoint {
            samples_seen: state.progress.samples_seen,
            fid: value,
        });
        Ok(())
    }
}

impl Observer for CellObserver<'_> {
    fn on_metric_window(&mut self, state: &TrainState, record: &WindowRecord) -> Result<()> {
        self.windows.push(record.clone());
        self.seen += 1;
        if self.seen % self.every == 0 {
            self.measure(state)?;
        }
        Ok(())
    }
}

/// Trains every cell from the same seed and data and collects its traces.
/// Divergence and numeric failures are recorded per cell.
pub fn run_ablation(
    spec: &AblationSpec,
    base: &Config,
    dataset: &Dataset,
    extractor: &dyn FeatureExtractor,
    reference: &FeatureStats,
    mut progress: impl FnMut(&CellTrace),
) -> Result<AblationReport> {
    spec.validate()?;
    let shared = spec.shared_config(base);
    let mut cells = Vec::new();
    for cell in &spec.cells {
        let config = spec.cell_config(base, cell);
        let config_diff = shared.diff(&config);
        let mut obs = CellObserver {
            extractor,
            reference,
            every: spec.fid_every_windows,
            samples: spec.fid_samples,
            seed: config.seed,
            seen: 0,
            windows: Vec::new(),
            fid: Vec::new(),
        };
        let mut state = TrainState::new(config)?;
        let outcome = run_schedule(&mut state, dataset, &mut [&mut obs]);
        let (diverged, error) = match outcome {
            Ok(RunOutcome::Diverged) => (true, None),
            Ok(_) => (false, None),
            Err(e @ Error::NonFinite { .. }) => (true, Some(e.to_string())),
            Err(e) => return Err(e),
        };
        let final_fid = if diverged {
            None
        } else {
            obs.measure(&state)?;
            obs.fid.last().map(|p| p.fid)
        };
        let best_fid = obs.fid.iter().map(|p| p.fid).filter(|v| v.is_finite()).reduce(f64::min);
        let trace = CellTrace {
            name: cell.name.clone(),
            margin: cell.margin,
            diverged,
            error,
            samples_seen: state.progress.samples_seen,
            windows: obs.windows,
            fid: obs.fid,
            final_fid,
            best_fid,
            config_diff,
        };
        progress(&trace);
        cells.push(trace);
    }
    Ok(AblationReport {
        schema_version: crate::trainer::LOG_SCHEMA_VERSION,
        cells,
    })
}
