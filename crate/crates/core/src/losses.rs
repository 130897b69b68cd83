//! Divergence and reconstruction terms, and the encoder/decoder objectives.
//!
//! The encoder minimizes `max(-M_gap, KL(real) - KL(fake)) + lambda_x * L1`,
//! the decoder minimizes `KL(fake) + lambda_z * (1 - cos)`. With `M_gap = inf`
//! the encoder objective is the plain unbounded difference.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{ImageBatch, LatentCode, PhaseState};
use crate::tensor::dot;

/// Per-dimension variances below this are clamped before taking the log.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Tolerance on `|‖z‖ - 1|` for inputs that must live on the unit sphere.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_x: f64,
    pub lambda_z: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_x: 1.0,
            lambda_z: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("lambda_x", self.lambda_x), ("lambda_z", self.lambda_z)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("train.loss.{key}"), "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Lower bound on the KL gap. `Margin::DISABLED` (infinity) turns the hinge off.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Margin(pub f64);

impl Margin {
    pub const DISABLED: Margin = Margin(f64::INFINITY);

    pub fn is_enabled(self) -> bool {
        self.0.is_finite()
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl std::fmt::Display for Margin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_enabled() {
            write!(f, "{}", self.0)
        } else {
            f.write_str("inf")
        }
    }
}

impl std::str::FromStr for Margin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinity" | "off" | "none" => Ok(Margin::DISABLED),
            other => {
                let v: f64 = other
                    .parse()
                    .map_err(|_| Error::Argument(format!("bad margin `{other}`")))?;
                if v.is_nan() || v <= 0.0 {
                    return Err(Error::Argument(format!("margin must be > 0, got {v}")));
                }
                Ok(Margin(v))
            }
        }
    }
}

impl Serialize for Margin {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_enabled() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str("inf")
        }
    }
}

impl<'de> Deserialize<'de> for Margin {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) if v > 0.0 => Ok(Margin(v)),
            Repr::Num(v) => Err(serde::de::Error::custom(format!("margin must be > 0, got {v}"))),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginEntry {
    /// Samples seen (global) from which this entry applies.
    pub threshold: u64,
    /// Lowest resolution level the entry applies to.
    pub min_level: usize,
    pub m_gap: Margin,
}

/// Piecewise margin as a function of training position.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MarginSchedule {
    pub entries: Vec<MarginEntry>,
}

impl MarginSchedule {
    pub fn validate(&self) -> Result<()> {
        for pair in self.entries.windows(2) {
            if pair[1].threshold <= pair[0].threshold {
                return Err(Error::config(
                    "train.margin_schedule",
                    "thresholds must be strictly increasing",
                ));
            }
        }
        if self.entries.iter().any(|e| e.m_gap.0.is_nan() || e.m_gap.0 <= 0.0) {
            return Err(Error::config("train.margin_schedule", "m_gap must be > 0 or inf"));
        }
        Ok(())
    }

    /// Multiplies every threshold by `factor` (desk-scale budgets).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| MarginEntry {
                    threshold: (e.threshold as f64 * factor).round() as u64,
                    ..e.clone()
                })
                .collect(),
        }
    }
}

/// The margin in force at `phase`: the last entry whose threshold has been
/// reached and whose level bound is met, or disabled before any entry applies.
pub fn margin_for(schedule: &MarginSchedule, phase: &PhaseState) -> Margin {
    schedule
        .entries
        .iter()
        .rev()
        .find(|e| e.threshold <= phase.samples_seen && e.min_level <= phase.level)
        .map(|e| e.m_gap)
        .unwrap_or(Margin::DISABLED)
}

/// Moments of a batch of codes and the KL of their diagonal Gaussian fit to N(0, I).
#[derive(Clone, Debug)]
pub struct GaussianFit {
    pub kl: f64,
    pub mean: Vec<f64>,
    /// Population variances after flooring.
    pub var: Vec<f64>,
    pub floored: Vec<bool>,
}

impl GaussianFit {
    pub fn degenerate(&self) -> bool {
        self.floored.iter().any(|&f| f)
    }
}

pub fn fit_diagonal_gaussian(codes: &[f64], m: usize, d: usize) -> GaussianFit {
    let inv_m = 1.0 / m as f64;
    let mut mean = vec![0.0; d];
    for row in codes.chunks(d).take(m) {
        for (mu, z) in mean.iter_mut().zip(row) {
            *mu += z;
        }
    }
    mean.iter_mut().for_each(|mu| *mu *= inv_m);
    let mut var = vec![0.0; d];
    for row in codes.chunks(d).take(m) {
        for ((v, z), mu) in var.iter_mut().zip(row).zip(&mean) {
            *v += (z - mu) * (z - mu);
        }
    }
    let mut floored = vec![false; d];
    for (v, f) in var.iter_mut().zip(floored.iter_mut()) {
        *v *= inv_m;
        if *v < VARIANCE_FLOOR {
            *v = VARIANCE_FLOOR;
            *f = true;
        }
    }
    let kl = mean
        .iter()
        .zip(&var)
        .map(|(mu, s)| 0.5 * (mu * mu + s) - 0.5 * s.ln() - 0.5)
        .sum();
    GaussianFit {
        kl,
        mean,
        var,
        floored,
    }
}

fn codes_matrix(codes: &[LatentCode]) -> Result<(Vec<f64>, usize)> {
    let d = codes
        .first()
        .map(|c| c.dim())
        .ok_or_else(|| Error::Argument("empty code batch".into()))?;
    if codes.iter().any(|c| c.dim() != d) {
        return Err(Error::Shape("codes of differing dimension".into()));
    }
    Ok((codes.iter().flat_map(|c| c.values().iter().copied()).collect(), d))
}

/// KL divergence of the batch-fitted diagonal Gaussian from N(0, I).
pub fn kl_unit_gaussian(codes: &[LatentCode]) -> Result<GaussianFit> {
    if codes.len() < 2 {
        return Err(Error::Argument("kl needs at least two codes".into()));
    }
    let (flat, d) = codes_matrix(codes)?;
    Ok(fit_diagonal_gaussian(&flat, codes.len(), d))
}

/// Mean over the batch of the per-sample mean absolute error.
pub fn recon_x(x: &ImageBatch, x_rec: &ImageBatch) -> Result<f64> {
    if x.values.shape() != x_rec.values.shape() {
        return Err(Error::Shape(format!(
            "recon_x: {:?} vs {:?}",
            x.values.shape(),
            x_rec.values.shape()
        )));
    }
    let n = x.len();
    if n == 0 {
        return Err(Error::Argument("recon_x on an empty batch".into()));
    }
    let per = x.values.numel() / n;
    let total: f64 = x
        .values
        .data()
        .chunks(per)
        .zip(x_rec.values.data().chunks(per))
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / per as f64)
        .sum();
    Ok(total / n as f64)
}

/// Mean cosine distance `1 - <z, z_rec>` between unit codes.
pub fn recon_z(z: &[LatentCode], z_rec: &[LatentCode]) -> Result<f64> {
    if z.len() != z_rec.len() || z.is_empty() {
        return Err(Error::Shape("recon_z needs equal, non-empty batches".into()));
    }
    let mut total = 0.0;
    for (a, b) in z.iter().zip(z_rec) {
        a.ensure_unit()?;
        b.ensure_unit()?;
        if a.dim() != b.dim() {
            return Err(Error::Shape("recon_z dimension mismatch".into()));
        }
        total += 1.0 - dot(a.values(), b.values());
    }
    Ok(total / z.len() as f64)
}

/// Hinge-bounded encoder objective.
pub fn encoder_loss(kl_real: f64, kl_fake: f64, recon_x: f64, weights: &LossWeights, m_gap: Margin) -> f64 {
    (kl_real - kl_fake).max(-m_gap.0) + weights.lambda_x * recon_x
}

pub fn decoder_loss(kl_fake: f64, recon_z: f64, weights: &LossWeights) -> f64 {
    kl_fake + weights.lambda_z * recon_z
}

/// Losses and diagnostics of one training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub kl_real: f64,
    pub kl_fake: f64,
    pub gap: f64,
    pub hinge_active: bool,
    pub recon_x: f64,
    pub recon_z: f64,
    pub encoder_total: f64,
    pub decoder_total: f64,
    #[serde(default)]
    pub degenerate_variance: bool,
    #[serde(default)]
    pub non_finite: bool,
}

/// Graph nodes of the encoder objective.
pub struct EncoderTerms {
    pub loss: Var,
    pub kl_real: Var,
    pub kl_fake: Var,
    pub recon_x: Var,
}

/// Builds `max(-m_gap, KL(z_real) - KL(z_fake)) + lambda_x * L1(x, x_rec)` on the graph.
pub fn encoder_objective(
    g: &mut Graph,
    z_real: Var,
    z_fake: Var,
    x: Var,
    x_rec: Var,
    weights: &LossWeights,
    m_gap: Margin,
) -> Result<EncoderTerms> {
    let kl_real = g.kl_unit_gaussian(z_real)?;
    let kl_fake = g.kl_unit_gaussian(z_fake)?;
    let gap = g.sub(kl_real, kl_fake)?;
    let hinge = if m_gap.is_enabled() {
        g.max_const(gap, -m_gap.0)
    } else {
        gap
    };
    let recon_x = g.mean_abs_diff(x, x_rec)?;
    let weighted = g.scale(recon_x, weights.lambda_x);
    let loss = g.add(hinge, weighted)?;
    Ok(EncoderTerms {
        loss,
        kl_real,
        kl_fake,
        recon_x,
    })
}

pub struct DecoderTerms {
    pub loss: Var,
    pub kl_fake: Var,
    pub recon_z: Var,
}

/// Builds `KL(z_rec) + lambda_z * mean(1 - <z, z_rec>)` on the graph.
pub fn decoder_objective(g: &mut Graph, z: Var, z_rec: Var, weights: &LossWeights) -> Result<DecoderTerms> {
    let kl_fake = g.kl_unit_gaussian(z_rec)?;
    let recon_z = g.mean_cosine_distance(z, z_rec)?;
    let weighted = g.scale(recon_z, weights.lambda_z);
    let loss = g.add(kl_fake, weighted)?;
    Ok(DecoderTerms {
        loss,
        kl_fake,
        recon_z,
    })
}
