//! Weight and activation normalization: spectral normalization, pixel norm and
//! the equalized learning rate, as toggleable per-layer wrappers.
//!
//! Every wrapped layer evaluates in the fixed order
//! `EQLR scale -> spectral divide -> convolution -> pixel norm`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Tensor};

/// Smallest singular-value estimate used as a divisor.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Which networks a normalization technique is applied to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Sites {
    #[default]
    None,
    Encoder,
    Decoder,
    Both,
}

impl Sites {
    pub fn covers(self, site: Site) -> bool {
        matches!(
            (self, site),
            (Sites::Both, _) | (Sites::Encoder, Site::Encoder) | (Sites::Decoder, Site::Decoder)
        )
    }

    fn as_str(self) -> &'static str {
        match self {
            Sites::None => "none",
            Sites::Encoder => "encoder",
            Sites::Decoder => "decoder",
            Sites::Both => "both",
        }
    }
}

impl std::str::FromStr for Sites {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "false" => Ok(Sites::None),
            "encoder" => Ok(Sites::Encoder),
            "decoder" => Ok(Sites::Decoder),
            "both" | "true" => Ok(Sites::Both),
            other => Err(Error::Argument(format!(
                "expected none|encoder|decoder|both, got `{other}`"
            ))),
        }
    }
}

impl Serialize for Sites {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Sites {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Flag(bool),
            Name(String),
        }
        match Repr::deserialize(d)? {
            Repr::Flag(true) => Ok(Sites::Both),
            Repr::Flag(false) => Ok(Sites::None),
            Repr::Name(n) => n.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    Encoder,
    Decoder,
}

/// Selection of normalization techniques and where they apply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormScheme {
    pub spectral: Sites,
    pub pixelnorm: Sites,
    pub eqlr: Sites,
    pub power_iterations: usize,
    pub pixelnorm_epsilon: f64,
}

impl Default for NormScheme {
    fn default() -> Self {
        Self::balanced()
    }
}

impl NormScheme {
    /// Spectral normalization on every layer of both networks, nothing else.
    pub fn balanced() -> Self {
        Self {
            spectral: Sites::Both,
            ..Self::none()
        }
    }

    /// Equalized learning rate and pixel norm in the decoder, spectral
    /// normalization in the encoder.
    pub fn baseline() -> Self {
        Self {
            spectral: Sites::Encoder,
            pixelnorm: Sites::Decoder,
            eqlr: Sites::Decoder,
            ..Self::none()
        }
    }

    pub fn none() -> Self {
        Self {
            spectral: Sites::None,
            pixelnorm: Sites::None,
            eqlr: Sites::None,
            power_iterations: 1,
            pixelnorm_epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.power_iterations == 0 {
            return Err(Error::config("norm.power_iterations", "must be >= 1"));
        }
        if !(self.pixelnorm_epsilon > 0.0) {
            return Err(Error::config("norm.pixelnorm_epsilon", "must be > 0"));
        }
        Ok(())
    }

    pub fn wrap_for(&self, site: Site) -> LayerWrap {
        LayerWrap {
            eqlr: self.eqlr.covers(site),
            spectral: self.spectral.covers(site),
            pixelnorm: self.pixelnorm.covers(site),
        }
    }
}

/// Wrappers carried by a single layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerWrap {
    pub eqlr: bool,
    pub spectral: bool,
    pub pixelnorm: bool,
}

impl LayerWrap {
    pub fn is_empty(&self) -> bool {
        !(self.eqlr || self.spectral || self.pixelnorm)
    }
}

/// Something whose layers can carry [`LayerWrap`]s.
pub trait Wrappable {
    fn site(&self) -> Site;
    /// `(layer name, current wrap, whether pixel norm may follow the layer)`.
    fn wrap_slots(&mut self) -> Vec<(&str, &mut LayerWrap, bool)>;
}

/// Applies the scheme's wrappers for the model's site to every layer.
///
/// Requesting a wrapper a layer already carries is an error.
pub fn wrap_layers<M: Wrappable>(model: &mut M, scheme: &NormScheme) -> Result<()> {
    scheme.validate()?;
    let want = scheme.wrap_for(model.site());
    let mut slots = model.wrap_slots();
    for (name, wrap, _) in slots.iter() {
        if (want.eqlr && wrap.eqlr) || (want.spectral && wrap.spectral) || (want.pixelnorm && wrap.pixelnorm) {
            return Err(Error::Norm(format!("layer `{name}` is already wrapped")));
        }
    }
    for (_, wrap, pn_ok) in slots.iter_mut() {
        wrap.eqlr |= want.eqlr;
        wrap.spectral |= want.spectral;
        wrap.pixelnorm |= want.pixelnorm && *pn_ok;
    }
    Ok(())
}

/// He constant `sqrt(2 / fan_in)`.
pub fn eqlr_scale(fan_in: usize) -> Result<f64> {
    if fan_in == 0 {
        return Err(Error::Argument("fan_in must be >= 1".into()));
    }
    Ok((2.0 / fan_in as f64).sqrt())
}

/// Left singular-vector estimate for one weight matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    pub u: Vec<f64>,
}

impl SpectralState {
    /// Random unit vector of length `rows`.
    pub fn random(rows: usize, rng: &mut impl Rng) -> Self {
        let mut u: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&u).max(SIGMA_FLOOR);
        u.iter_mut().for_each(|x| *x /= n);
        Self { u }
    }
}

/// Spectral states of every wrapped layer of a network, keyed by layer name.
pub type SpectralSet = BTreeMap<String, SpectralState>;

/// Result of a power-iteration pass over a weight matrix.
#[derive(Clone, Debug)]
pub struct PowerIteration {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub sigma: f64,
}

fn normalized(mut x: Vec<f64>) -> Option<Vec<f64>> {
    let n = norm(&x);
    if n <= SIGMA_FLOOR || !n.is_finite() {
        return None;
    }
    x.iter_mut().for_each(|v| *v /= n);
    Some(x)
}

fn mat_t_vec(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, row) in w.chunks(cols).take(rows).enumerate() {
        for (o, x) in out.iter_mut().zip(row) {
            *o += u[r] * x;
        }
    }
    out
}

fn mat_vec(w: &[f64], cols: usize, v: &[f64]) -> Vec<f64> {
    w.chunks(cols).map(|row| dot(row, v)).collect()
}

/// Estimates the top singular triplet of the `rows x cols` matrix `w` from `u`.
///
/// Each iteration refreshes `v = norm(W^T u)` then `u = norm(W v)`. With zero
/// iterations `u` is kept and only `v` is derived from it, so the estimate
/// `sigma = u^T W v` is a smooth function of `w`.
pub fn power_iteration(w: &[f64], rows: usize, cols: usize, u: &[f64], iterations: usize) -> PowerIteration {
    let mut u = u.to_vec();
    let mut v = normalized(mat_t_vec(w, rows, cols, &u)).unwrap_or_else(|| vec![0.0; cols]);
    for _ in 0..iterations {
        if let Some(nv) = normalized(mat_t_vec(w, rows, cols, &u)) {
            v = nv;
        }
        if let Some(nu) = normalized(mat_vec(w, cols, &v)) {
            u = nu;
        }
    }
    let sigma = dot(&u, &mat_vec(w, cols, &v));
    PowerIteration { u, v, sigma }
}

/// Divides `weight` (viewed as `out x rest`) by its power-iteration estimate of
/// the largest singular value, returning the refreshed state.
pub fn spectral_normalize(weight: &Tensor, state: &SpectralState, iterations: usize) -> Result<(Tensor, SpectralState)> {
    let rows = *weight
        .shape()
        .first()
        .ok_or_else(|| Error::Shape("spectral_normalize needs a matrix".into()))?;
    let cols = weight.numel() / rows.max(1);
    if state.u.len() != rows {
        return Err(Error::Shape(format!(
            "spectral state has {} rows, weight has {rows}",
            state.u.len()
        )));
    }
    let pi = power_iteration(weight.data(), rows, cols, &state.u, iterations);
    let sigma = pi.sigma.max(SIGMA_FLOOR);
    Ok((weight.map(|x| x / sigma), SpectralState { u: pi.u }))
}

/// Per-pixel channel normalization of raw `[n, c, hw]` data.
pub(crate) fn pixel_norm_values(x: &[f64], n: usize, c: usize, hw: usize, epsilon: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        let base = ni * c * hw;
        for p in 0..hw {
            let ms = (0..c).map(|ci| x[base + ci * hw + p].powi(2)).sum::<f64>() / c as f64;
            let r = (ms + epsilon).sqrt();
            for ci in 0..c {
                out[base + ci * hw + p] = x[base + ci * hw + p] / r;
            }
        }
    }
    out
}

/// Normalizes each pixel's channel vector of an `[N, C, H, W]` tensor to unit RMS.
pub fn pixel_norm(features: &Tensor, epsilon: f64) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 4 || s[1] == 0 {
        return Err(Error::Shape(format!("pixel_norm expects [N,C,H,W], got {s:?}")));
    }
    Tensor::new(s, pixel_norm_values(features.data(), s[0], s[1], s[2] * s[3], epsilon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_is_unchanged() {
        let w = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let st = SpectralState::random(3, &mut ChaCha8Rng::seed_from_u64(0));
        let (out, _) = spectral_normalize(&w, &st, 1).unwrap();
        assert!(out.max_abs_diff(&w) < 1e-12);
    }

    #[test]
    fn diagonal_with_converged_state() {
        let w = Tensor::new(&[2, 2], vec![4.0, 0.0, 0.0, 1.0]).unwrap();
        let st = SpectralState { u: vec![1.0, 0.0] };
        let (out, st2) = spectral_normalize(&w, &st, 1).unwrap();
        let expected = [1.0, 0.0, 0.0, 0.25];
        for (a, b) in out.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!((norm(&st2.u) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_uses_floor() {
        let w = Tensor::zeros(&[2, 3]);
        let st = SpectralState { u: vec![1.0, 0.0] };
        let (out, _) = spectral_normalize(&w, &st, 3).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
        assert!(spectral_normalize(&w, &SpectralState { u: vec![1.0] }, 1).is_err());
    }

    #[test]
    fn pixel_norm_examples() {
        let t = Tensor::new(&[1, 2, 1, 1], vec![3.0, 4.0]).unwrap();
        let out = pixel_norm(&t, 1e-8).unwrap();
        let r = (12.5f64 + 1e-8).sqrt();
        assert!((out.data()[0] - 3.0 / r).abs() < 1e-12);
        assert!((out.data()[0] - 0.8485).abs() < 1e-4);
        assert!((out.data()[1] - 1.1314).abs() < 1e-4);

        let unit = Tensor::new(&[1, 2, 1, 1], vec![1.0, -1.0]).unwrap();
        assert!(pixel_norm(&unit, 1e-8).unwrap().max_abs_diff(&unit) < 1e-6);

        let zero = Tensor::zeros(&[1, 3, 2, 2]);
        assert!(pixel_norm(&zero, 1e-8).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn eqlr_examples() {
        assert_eq!(eqlr_scale(2).unwrap(), 1.0);
        assert_eq!(eqlr_scale(8).unwrap(), 0.5);
        assert!((eqlr_scale(18).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(eqlr_scale(0).is_err());
    }

    #[test]
    fn sites_parse_from_flags_and_names() {
        let s: Sites = serde_json::from_str("true").unwrap();
        assert_eq!(s, Sites::Both);
        let s: Sites = serde_json::from_str("\"decoder\"").unwrap();
        assert_eq!(s, Sites::Decoder);
        assert!(Sites::Decoder.covers(Site::Decoder));
        assert!(!Sites::Decoder.covers(Site::Encoder));
    }
}
