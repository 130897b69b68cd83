//! The symmetric progressive encoder/decoder pair.
//!
//! Both networks are built for every resolution level up front; a
//! [`PhaseState`] selects how much of each is active and how strongly the
//! newest level is blended in. All layers are convolutions:
//!
//! * encoder: `from_rgb{L}` (1x1) -> `block{L}` .. `block1` (stride-2 residual
//!   blocks) -> `block0` (4x4, stride 1) -> `head` (4x4 valid conv to the
//!   latent) -> unit normalization;
//! * decoder: `head` (1x1 conv from the latent to a 4x4 map) -> `block0` ->
//!   `block1` .. `block{L}` (nearest upsample + stride-1 residual blocks) ->
//!   `to_rgb{L}` (1x1).

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::losses::UNIT_NORM_TOLERANCE;
use crate::normalization::{
    eqlr_scale, power_iteration, LayerWrap, Site, SpectralSet, SpectralState, Wrappable, SIGMA_FLOOR,
};
use crate::tensor::{norm, Tensor};

/// Named parameter tensors of one network.
pub type Params = BTreeMap<String, Tensor>;

/// A point on the unit sphere of the latent space (once normalized).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentCode {
    values: Vec<f64>,
}

impl LatentCode {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    /// Projects `values` onto the unit sphere; fails on a (numerically) zero vector.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if !(n > 1e-12) || !n.is_finite() {
            return Err(Error::Argument("cannot normalize a zero or non-finite code".into()));
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / n).collect(),
        })
    }

    /// Like [`LatentCode::normalized`], but keeps values that are already
    /// unit-norm to within 1e-12 bit-for-bit.
    pub fn unit(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if (n - 1.0).abs() <= 1e-12 {
            Ok(Self { values })
        } else {
            Self::normalized(values)
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn ensure_unit(&self) -> Result<()> {
        let n = self.norm();
        if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::Argument(format!("latent code has norm {n}, expected 1")));
        }
        Ok(())
    }

    /// Draws from N(0, I) and projects onto the sphere.
    pub fn sample(dim: usize, rng: &mut impl Rng) -> Self {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            if let Ok(c) = Self::normalized(v) {
                return c;
            }
        }
    }
}

/// Stacks codes into an `[N, D]` tensor.
pub fn codes_to_tensor(codes: &[LatentCode]) -> Result<Tensor> {
    let d = codes.first().map(|c| c.dim()).unwrap_or(0);
    if codes.iter().any(|c| c.dim() != d) {
        return Err(Error::Shape("codes of differing dimension".into()));
    }
    Tensor::new(
        &[codes.len(), d],
        codes.iter().flat_map(|c| c.values.iter().copied()).collect(),
    )
}

pub fn tensor_to_codes(t: &Tensor) -> Vec<LatentCode> {
    t.rows().map(|r| LatentCode::new(r.to_vec())).collect()
}

/// `N x C x H x W` images, `H == W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub values: Tensor,
}

impl ImageBatch {
    pub fn new(values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(Error::Shape(format!("image batch must be [N,C,H,H], got {s:?}")));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn resolution(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn image_len(&self) -> usize {
        self.channels() * self.resolution() * self.resolution()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.values.data()[i * n..(i + 1) * n]
    }

    /// Concatenates batches of identical image geometry.
    pub fn concat(batches: &[ImageBatch]) -> Result<Self> {
        let first = batches
            .first()
            .ok_or_else(|| Error::Argument("no batches to concatenate".into()))?;
        let s = first.values.shape().to_vec();
        let mut data = Vec::new();
        let mut n = 0;
        for b in batches {
            if b.values.shape()[1..] != s[1..] {
                return Err(Error::Shape("concatenating batches of different geometry".into()));
            }
            n += b.len();
            data.extend_from_slice(b.values.data());
        }
        Self::new(Tensor::new(&[n, s[1], s[2], s[3]], data)?)
    }

    /// Nearest-neighbour resize to `resolution` (power-of-two ratios only).
    pub fn resized(&self, resolution: usize) -> Result<Self> {
        let r = self.resolution();
        if r == resolution {
            return Ok(self.clone());
        }
        let (n, c) = (self.len(), self.channels());
        let mut out = vec![0.0; n * c * resolution * resolution];
        if resolution > r {
            if resolution % r != 0 {
                return Err(Error::Shape(format!("cannot upsample {r} to {resolution}")));
            }
            let f = resolution / r;
            for (p, plane) in self.values.data().chunks(r * r).enumerate() {
                let dst = &mut out[p * resolution * resolution..(p + 1) * resolution * resolution];
                for i in 0..resolution {
                    for j in 0..resolution {
                        dst[i * resolution + j] = plane[(i / f) * r + j / f];
                    }
                }
            }
        } else {
            if r % resolution != 0 {
                return Err(Error::Shape(format!("cannot downsample {r} to {resolution}")));
            }
            let f = r / resolution;
            let inv = 1.0 / (f * f) as f64;
            for (p, plane) in self.values.data().chunks(r * r).enumerate() {
                let dst = &mut out[p * resolution * resolution..(p + 1) * resolution * resolution];
                for i in 0..resolution {
                    for j in 0..resolution {
                        let mut s = 0.0;
                        for a in 0..f {
                            for b in 0..f {
                                s += plane[(i * f + a) * r + j * f + b];
                            }
                        }
                        dst[i * resolution + j] = s * inv;
                    }
                }
            }
        }
        Self::new(Tensor::new(&[n, c, resolution, resolution], out)?)
    }
}

/// Position in the progressive schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    /// Resolution level, 0 = base resolution.
    pub level: usize,
    /// Weight of the newest level's path, in `[0, 1]`.
    pub alpha: f64,
    /// Real samples seen since the start of training.
    pub samples_seen: u64,
}

impl PhaseState {
    pub fn at_level(level: usize) -> Self {
        Self {
            level,
            alpha: 1.0,
            samples_seen: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub latent_dim: usize,
    pub base_resolution: usize,
    pub max_resolution: usize,
    /// Channel width per resolution level.
    pub channel_schedule: Vec<usize>,
    pub leaky_slope: f64,
    /// LeakyReLU on the latent head before normalization.
    pub final_layer_activation: bool,
    pub image_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::new(512, 256)
    }
}

impl NetworkConfig {
    /// Config with the default channel schedule.
    pub fn new(latent_dim: usize, max_resolution: usize) -> Self {
        let levels = levels_between(4, max_resolution).unwrap_or(1);
        Self {
            latent_dim,
            base_resolution: 4,
            max_resolution,
            channel_schedule: default_channels(latent_dim, levels),
            leaky_slope: 0.2,
            final_layer_activation: false,
            image_channels: 3,
        }
    }

    pub fn levels(&self) -> usize {
        levels_between(self.base_resolution, self.max_resolution).unwrap_or(0)
    }

    pub fn resolution(&self, level: usize) -> usize {
        self.base_resolution << level
    }

    pub fn level_of(&self, resolution: usize) -> Option<usize> {
        (0..self.levels()).find(|&l| self.resolution(l) == resolution)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("model.latent_dim", "must be > 0"));
        }
        if self.base_resolution != 4 {
            return Err(Error::config("model.base_resolution", "must be 4"));
        }
        let levels = levels_between(self.base_resolution, self.max_resolution).ok_or_else(|| {
            Error::config(
                "model.max_resolution",
                format!("{} is not a power of two >= 4", self.max_resolution),
            )
        })?;
        if self.channel_schedule.len() != levels {
            return Err(Error::config(
                "model.channel_schedule",
                format!("needs {levels} entries, got {}", self.channel_schedule.len()),
            ));
        }
        if self.channel_schedule.contains(&0) || self.image_channels == 0 {
            return Err(Error::config("model.channel_schedule", "channel counts must be > 0"));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::config("model.leaky_slope", "must be finite"));
        }
        Ok(())
    }
}

fn levels_between(base: usize, max: usize) -> Option<usize> {
    if base == 0 || max < base || !max.is_power_of_two() || !base.is_power_of_two() {
        return None;
    }
    Some((max / base).trailing_zeros() as usize + 1)
}

/// `latent_dim` channels on the three coarsest levels, halving per level above, at least 16.
pub fn default_channels(latent_dim: usize, levels: usize) -> Vec<usize> {
    (0..levels)
        .map(|l| {
            let c = if l < 3 { latent_dim } else { latent_dim >> (l - 2) };
            c.max(16.min(latent_dim))
        })
        .collect()
}

/// One convolution layer and its wrappers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Reshape applied to the `[N, out, 1, 1]` output (decoder head only).
    pub reshape_to: Option<[usize; 3]>,
    /// Layers producing images or latents never take pixel norm.
    pub pixelnorm_allowed: bool,
    pub wrap: LayerWrap,
}

impl LayerSpec {
    pub(crate) fn conv(name: String, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding: if kernel == 3 { 1 } else { 0 },
            reshape_to: None,
            pixelnorm_allowed: true,
            wrap: LayerWrap::default(),
        }
    }

    fn output_layer(mut self) -> Self {
        self.pixelnorm_allowed = false;
        self
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// Rows of the matrix the spectral norm is taken over. The decoder head is
    /// a 4x4 transposed convolution stored as a 1x1 one, so its rows are the
    /// output feature maps rather than every map position.
    pub fn spectral_rows(&self) -> usize {
        self.reshape_to.map_or(self.out_channels, |s| s[0])
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.fan_in() + self.out_channels
    }

    /// `EQLR scale -> spectral divide -> convolution -> (reshape) -> pixel norm`.
    pub fn apply(&self, g: &mut Graph, ctx: &mut Binder<'_>, x: Var) -> Result<Var> {
        let w = ctx.effective_weight(g, self)?;
        let b = ctx.var(g, &self.bias_name())?;
        let mut y = g.conv2d(x, w, Some(b), self.stride, self.padding)?;
        if let Some(shape) = self.reshape_to {
            let n = g.shape(y)[0];
            y = g.reshape(y, &[n, shape[0], shape[1], shape[2]])?;
        }
        if self.wrap.pixelnorm {
            y = g.pixel_norm(y, ctx.pixelnorm_epsilon)?;
        }
        Ok(y)
    }
}

/// How spectral states are used during a forward pass.
pub enum SpectralMode<'a> {
    /// Refresh the stored `u` with the given number of power iterations.
    Update(&'a mut SpectralSet, usize),
    /// Read the stored `u` without changing it.
    Frozen(&'a SpectralSet),
}

/// Binds a network's parameters into a graph for one forward pass.
pub struct Binder<'a> {
    params: &'a Params,
    spectral: SpectralMode<'a>,
    trainable: bool,
    pixelnorm_epsilon: f64,
    vars: BTreeMap<String, Var>,
    /// Wrapped weights, so each layer is power-iterated once per binder.
    effective: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a Params, spectral: SpectralMode<'a>, trainable: bool) -> Self {
        Self {
            params,
            spectral,
            trainable,
            pixelnorm_epsilon: 1e-8,
            vars: BTreeMap::new(),
            effective: BTreeMap::new(),
        }
    }

    pub fn with_pixelnorm_epsilon(mut self, eps: f64) -> Self {
        self.pixelnorm_epsilon = eps;
        self
    }

    /// The graph node holding parameter `name`, created on first use.
    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))?
            .clone();
        let v = g.leaf(t, self.trainable);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// The layer's weight after EQLR scaling and spectral division.
    pub fn effective_weight(&mut self, g: &mut Graph, layer: &LayerSpec) -> Result<Var> {
        if let Some(v) = self.effective.get(&layer.name) {
            return Ok(*v);
        }
        let mut w = self.var(g, &layer.weight_name())?;
        if layer.wrap.eqlr {
            w = g.scale(w, eqlr_scale(layer.fan_in())?);
        }
        if layer.wrap.spectral {
            let pi = self.power_iteration(&layer.name, layer.spectral_rows(), g.value(w))?;
            w = g.spectral_divide(w, pi.u, pi.v, pi.sigma.max(SIGMA_FLOOR));
        }
        self.effective.insert(layer.name.clone(), w);
        Ok(w)
    }

    fn power_iteration(&mut self, layer: &str, rows: usize, w: &Tensor) -> Result<crate::normalization::PowerIteration> {
        let cols = w.numel() / rows;
        let (state, iterations) = match &self.spectral {
            SpectralMode::Update(set, it) => (set.get(layer), *it),
            SpectralMode::Frozen(set) => (set.get(layer), 0),
        };
        let state = state.ok_or_else(|| Error::Norm(format!("no spectral state for `{layer}`")))?;
        if state.u.len() != rows {
            return Err(Error::Shape(format!("spectral state of `{layer}` has wrong length")));
        }
        let pi = power_iteration(w.data(), rows, cols, &state.u, iterations);
        if let SpectralMode::Update(set, _) = &mut self.spectral {
            set.insert(layer.to_string(), SpectralState { u: pi.u.clone() });
        }
        Ok(pi)
    }

    /// Parameter nodes created during the pass, by name.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }
}

/// Gradients of the bound parameters, keyed by parameter name.
pub fn named_grads(bound: &BTreeMap<String, Var>, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
    bound
        .iter()
        .filter_map(|(name, &v)| grads.take(v).map(|t| (name.clone(), t)))
        .collect()
}

fn init_params(layers: &[LayerSpec], rng: &mut impl Rng) -> Params {
    let mut params = Params::new();
    for layer in layers {
        let scale = if layer.wrap.eqlr {
            1.0
        } else {
            eqlr_scale(layer.fan_in()).expect("fan_in >= 1")
        };
        let shape = layer.weight_shape();
        let n: usize = shape.iter().product();
        let mut w: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
        if layer.wrap.spectral {
            w = orthogonalize(&w, layer.spectral_rows(), scale);
        }
        params.insert(layer.weight_name(), Tensor::new(&shape, w).unwrap());
        params.insert(layer.bias_name(), Tensor::zeros(&[layer.out_channels]));
    }
    params
}

/// Replaces a Gaussian draw by the nearest matrix with all singular values
/// equal, keeping entries at the Gaussian's scale. Spectral normalization
/// divides by the top singular value, so a flat spectrum keeps every
/// direction at unit gain instead of shrinking most of them.
fn orthogonalize(w: &[f64], rows: usize, scale: f64) -> Vec<f64> {
    let cols = w.len() / rows;
    let svd = nalgebra::DMatrix::from_row_slice(rows, cols, w).svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let q = (u * v_t) * (scale * (rows.max(cols) as f64).sqrt());
    (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).map(|(r, c)| q[(r, c)]).collect()
}

/// Power-iterated spectral states for every spectrally wrapped layer.
fn init_spectral(layers: &[LayerSpec], params: &Params, iterations: usize, rng: &mut impl Rng) -> SpectralSet {
    let mut set = SpectralSet::new();
    for layer in layers.iter().filter(|l| l.wrap.spectral) {
        let w = &params[&layer.weight_name()];
        let rows = layer.spectral_rows();
        let state = SpectralState::random(rows, rng);
        let pi = power_iteration(w.data(), rows, w.numel() / rows, &state.u, iterations);
        set.insert(layer.name.clone(), SpectralState { u: pi.u });
    }
    set
}

fn check_phase(config: &NetworkConfig, phase: &PhaseState) -> Result<()> {
    if phase.level >= config.levels() {
        return Err(Error::Shape(format!(
            "level {} outside 0..{}",
            phase.level,
            config.levels()
        )));
    }
    if !(0.0..=1.0).contains(&phase.alpha) {
        return Err(Error::Argument(format!("alpha {} outside [0, 1]", phase.alpha)));
    }
    Ok(())
}

/// `(1 - alpha) * coarse + alpha * fine` on plain tensors.
pub fn blend_fade(coarse: &Tensor, fine: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("alpha {alpha} outside [0, 1]")));
    }
    if coarse.shape() != fine.shape() {
        return Err(Error::Shape(format!(
            "blend_fade: {:?} vs {:?}",
            coarse.shape(),
            fine.shape()
        )));
    }
    Tensor::new(
        coarse.shape(),
        coarse
            .data()
            .iter()
            .zip(fine.data())
            .map(|(c, f)| (1.0 - alpha) * c + alpha * f)
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: NetworkConfig,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub config: NetworkConfig,
    pub layers: Vec<LayerSpec>,
}

/// Builds the unwrapped encoder/decoder pair.
pub fn build_networks(config: &NetworkConfig) -> Result<(Encoder, Decoder)> {
    config.validate()?;
    let ch = &config.channel_schedule;
    let img = config.image_channels;
    let d = config.latent_dim;

    let mut enc = Vec::new();
    for l in 0..config.levels() {
        enc.push(LayerSpec::conv(format!("enc.from_rgb{l}"), img, ch[l], 1, 1));
    }
    enc.push(LayerSpec::conv("enc.block0.conv1".into(), ch[0], ch[0], 3, 1));
    enc.push(LayerSpec::conv("enc.block0.conv2".into(), ch[0], ch[0], 3, 1));
    enc.push(LayerSpec::conv("enc.block0.skip".into(), ch[0], ch[0], 1, 1));
    for l in 1..config.levels() {
        enc.push(LayerSpec::conv(format!("enc.block{l}.conv1"), ch[l], ch[l], 3, 1));
        enc.push(LayerSpec::conv(format!("enc.block{l}.conv2"), ch[l], ch[l - 1], 3, 2));
        enc.push(LayerSpec::conv(format!("enc.block{l}.skip"), ch[l], ch[l - 1], 1, 2));
    }
    enc.push(LayerSpec::conv("enc.head".into(), ch[0], d, 4, 1).output_layer());

    let mut dec = Vec::new();
    let mut head = LayerSpec::conv("dec.head".into(), d, ch[0] * 16, 1, 1);
    head.reshape_to = Some([ch[0], 4, 4]);
    dec.push(head);
    dec.push(LayerSpec::conv("dec.block0.conv1".into(), ch[0], ch[0], 3, 1));
    dec.push(LayerSpec::conv("dec.block0.conv2".into(), ch[0], ch[0], 3, 1));
    dec.push(LayerSpec::conv("dec.block0.skip".into(), ch[0], ch[0], 1, 1));
    for l in 1..config.levels() {
        dec.push(LayerSpec::conv(format!("dec.block{l}.conv1"), ch[l - 1], ch[l], 3, 1));
        dec.push(LayerSpec::conv(format!("dec.block{l}.conv2"), ch[l], ch[l], 3, 1));
        dec.push(LayerSpec::conv(format!("dec.block{l}.skip"), ch[l - 1], ch[l], 1, 1));
    }
    for l in 0..config.levels() {
        dec.push(LayerSpec::conv(format!("dec.to_rgb{l}"), ch[l], img, 1, 1).output_layer());
    }

    Ok((
        Encoder {
            config: config.clone(),
            layers: enc,
        },
        Decoder {
            config: config.clone(),
            layers: dec,
        },
    ))
}

fn find<'a>(layers: &'a [LayerSpec], name: &str) -> Result<&'a LayerSpec> {
    layers
        .iter()
        .find(|l| l.name == name)
        .ok_or_else(|| Error::Shape(format!("no layer `{name}`")))
}

macro_rules! network_common {
    ($ty:ty, $site:expr) => {
        impl $ty {
            pub fn layer(&self, name: &str) -> Result<&LayerSpec> {
                find(&self.layers, name)
            }

            pub fn param_count(&self) -> usize {
                self.layers.iter().map(LayerSpec::param_count).sum()
            }

            /// Fresh parameters: He-scaled Gaussian weights (unit Gaussian under EQLR, orthogonalized under spectral normalization), zero biases.
            pub fn init_params(&self, rng: &mut impl Rng) -> Params {
                init_params(&self.layers, rng)
            }

            /// Spectral states for wrapped layers, pre-converged by `iterations` power steps.
            pub fn init_spectral(&self, params: &Params, iterations: usize, rng: &mut impl Rng) -> SpectralSet {
                init_spectral(&self.layers, params, iterations, rng)
            }

            /// Names of the parameters that take part in a forward pass at `level`.
            pub fn active_params(&self, level: usize) -> Vec<String> {
                self.layers
                    .iter()
                    .filter(|l| self.layer_level(&l.name).map_or(true, |ll| ll <= level))
                    .flat_map(|l| [l.weight_name(), l.bias_name()])
                    .collect()
            }

            fn layer_level(&self, name: &str) -> Option<usize> {
                let digits: String = name
                    .rsplit('.')
                    .flat_map(|part| {
                        ["from_rgb", "to_rgb", "block"]
                            .iter()
                            .find_map(|p| part.strip_prefix(p))
                            .map(|s| s.to_string())
                    })
                    .next()?;
                digits.parse().ok()
            }
        }

        impl Wrappable for $ty {
            fn site(&self) -> Site {
                $site
            }

            fn wrap_slots(&mut self) -> Vec<(&str, &mut LayerWrap, bool)> {
                self.layers
                    .iter_mut()
                    .map(|l| (l.name.as_str(), &mut l.wrap, l.pixelnorm_allowed))
                    .collect()
            }
        }
    };
}

network_common!(Encoder, Site::Encoder);
network_common!(Decoder, Site::Decoder);

impl Encoder {
    fn block(&self, g: &mut Graph, ctx: &mut Binder<'_>, level: usize, x: Var) -> Result<Var> {
        let slope = self.config.leaky_slope;
        let h = self.layer(&format!("enc.block{level}.conv1"))?.apply(g, ctx, x)?;
        let h = g.leaky_relu(h, slope);
        let h = self.layer(&format!("enc.block{level}.conv2"))?.apply(g, ctx, h)?;
        let s = self.layer(&format!("enc.block{level}.skip"))?.apply(g, ctx, x)?;
        let sum = g.add(h, s)?;
        Ok(g.leaky_relu(sum, slope))
    }

    fn from_rgb(&self, g: &mut Graph, ctx: &mut Binder<'_>, level: usize, x: Var) -> Result<Var> {
        let h = self.layer(&format!("enc.from_rgb{level}"))?.apply(g, ctx, x)?;
        Ok(g.leaky_relu(h, self.config.leaky_slope))
    }

    /// Encodes `[N, C, H, H]` images at the phase resolution to `[N, D]` unit codes.
    pub fn forward(&self, g: &mut Graph, ctx: &mut Binder<'_>, x: Var, phase: &PhaseState) -> Result<Var> {
        check_phase(&self.config, phase)?;
        let s = g.shape(x).to_vec();
        let res = self.config.resolution(phase.level);
        if s.len() != 4 || s[1] != self.config.image_channels || s[2] != res || s[3] != res {
            return Err(Error::Shape(format!(
                "encoder at level {} expects [N,{},{res},{res}], got {s:?}",
                phase.level, self.config.image_channels
            )));
        }
        let l = phase.level;
        let mut h = if l == 0 {
            self.from_rgb(g, ctx, 0, x)?
        } else if phase.alpha == 0.0 {
            let down = g.avg_pool2x(x)?;
            self.from_rgb(g, ctx, l - 1, down)?
        } else {
            let fine = self.from_rgb(g, ctx, l, x)?;
            let fine = self.block(g, ctx, l, fine)?;
            if phase.alpha < 1.0 {
                let down = g.avg_pool2x(x)?;
                let coarse = self.from_rgb(g, ctx, l - 1, down)?;
                g.blend(coarse, fine, phase.alpha)?
            } else {
                fine
            }
        };
        for level in (1..l).rev() {
            h = self.block(g, ctx, level, h)?;
        }
        h = self.block(g, ctx, 0, h)?;
        h = self.layer("enc.head")?.apply(g, ctx, h)?;
        if self.config.final_layer_activation {
            h = g.leaky_relu(h, self.config.leaky_slope);
        }
        let n = g.shape(h)[0];
        let flat = g.reshape(h, &[n, self.config.latent_dim])?;
        g.normalize_rows(flat)
    }
}

impl Decoder {
    fn block(&self, g: &mut Graph, ctx: &mut Binder<'_>, level: usize, x: Var) -> Result<Var> {
        let slope = self.config.leaky_slope;
        let x = if level > 0 { g.upsample2x(x)? } else { x };
        let h = self.layer(&format!("dec.block{level}.conv1"))?.apply(g, ctx, x)?;
        let h = g.leaky_relu(h, slope);
        let h = self.layer(&format!("dec.block{level}.conv2"))?.apply(g, ctx, h)?;
        let s = self.layer(&format!("dec.block{level}.skip"))?.apply(g, ctx, x)?;
        let sum = g.add(h, s)?;
        Ok(g.leaky_relu(sum, slope))
    }

    /// Decodes `[N, D]` unit codes to `[N, C, H, H]` images at the phase resolution.
    pub fn forward(&self, g: &mut Graph, ctx: &mut Binder<'_>, codes: Var, phase: &PhaseState) -> Result<Var> {
        check_phase(&self.config, phase)?;
        let s = g.shape(codes).to_vec();
        if s.len() != 2 || s[1] != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "decoder expects [N,{}] codes, got {s:?}",
                self.config.latent_dim
            )));
        }
        for row in g.value(codes).rows() {
            let n = norm(row);
            if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::Argument(format!("decoder input has norm {n}, expected 1")));
            }
        }
        let x = g.reshape(codes, &[s[0], s[1], 1, 1])?;
        let mut h = self.layer("dec.head")?.apply(g, ctx, x)?;
        h = g.leaky_relu(h, self.config.leaky_slope);
        h = self.block(g, ctx, 0, h)?;
        let l = phase.level;
        if l == 0 {
            return self.layer("dec.to_rgb0")?.apply(g, ctx, h);
        }
        for level in 1..l {
            h = self.block(g, ctx, level, h)?;
        }
        let to_rgb = |g: &mut Graph, ctx: &mut Binder<'_>, level: usize, h: Var| {
            self.layer(&format!("dec.to_rgb{level}"))?.apply(g, ctx, h)
        };
        if phase.alpha == 0.0 {
            let coarse = to_rgb(g, ctx, l - 1, h)?;
            return g.upsample2x(coarse);
        }
        let fine = self.block(g, ctx, l, h)?;
        let fine = to_rgb(g, ctx, l, fine)?;
        if phase.alpha < 1.0 {
            let coarse = to_rgb(g, ctx, l - 1, h)?;
            let coarse = g.upsample2x(coarse)?;
            g.blend(coarse, fine, phase.alpha)
        } else {
            Ok(fine)
        }
    }
}

/// `avg <- decay * avg + (1 - decay) * live` for every parameter.
pub fn ema_update(avg: &mut Params, live: &Params, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Argument(format!("ema decay {decay} outside [0, 1]")));
    }
    if avg.len() != live.len() {
        return Err(Error::Shape("ema parameter sets differ".into()));
    }
    for (name, a) in avg.iter_mut() {
        let w = live
            .get(name)
            .ok_or_else(|| Error::Shape(format!("ema: live set lacks `{name}`")))?;
        if w.shape() != a.shape() {
            return Err(Error::Shape(format!("ema: shape mismatch for `{name}`")));
        }
        for (v, &x) in a.data_mut().iter_mut().zip(w.data()) {
            *v = decay * *v + (1.0 - decay) * x;
        }
    }
    Ok(())
}

/// Immutable encoder/decoder snapshot used for evaluation and serving.
#[derive(Clone, Debug)]
pub struct FrozenModel {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub encoder_params: Params,
    pub decoder_params: Params,
    pub encoder_spectral: SpectralSet,
    pub decoder_spectral: SpectralSet,
    pub phase: PhaseState,
    pub pixelnorm_epsilon: f64,
}

/// Anything that maps unit codes to images.
pub trait CodeDecoder {
    fn latent_dim(&self) -> usize;
    fn decode(&self, codes: &[LatentCode]) -> Result<ImageBatch>;
}

/// Anything that maps images to unit codes.
pub trait ImageEncoder {
    fn encode(&self, batch: &ImageBatch) -> Result<Vec<LatentCode>>;
}

impl CodeDecoder for FrozenModel {
    fn latent_dim(&self) -> usize {
        self.encoder.config.latent_dim
    }

    fn decode(&self, codes: &[LatentCode]) -> Result<ImageBatch> {
        FrozenModel::decode(self, codes)
    }
}

impl ImageEncoder for FrozenModel {
    fn encode(&self, batch: &ImageBatch) -> Result<Vec<LatentCode>> {
        FrozenModel::encode(self, batch)
    }
}

/// Inference batch size for snapshot evaluation.
const INFERENCE_CHUNK: usize = 64;

impl FrozenModel {
    pub fn resolution(&self) -> usize {
        self.encoder.config.resolution(self.phase.level)
    }

    /// Encodes `batch`, resampling it first when its resolution differs from the model's.
    pub fn encode(&self, batch: &ImageBatch) -> Result<Vec<LatentCode>> {
        let res = self.resolution();
        if batch.resolution() != res {
            log::warn!("resampling {0}x{0} input to {res}x{res}", batch.resolution());
            return self.encode(&batch.resized(res)?);
        }
        let mut out = Vec::with_capacity(batch.len());
        let per = batch.image_len();
        let s = batch.values.shape();
        for start in (0..batch.len()).step_by(INFERENCE_CHUNK) {
            let n = INFERENCE_CHUNK.min(batch.len() - start);
            let chunk = Tensor::new(
                &[n, s[1], s[2], s[3]],
                batch.values.data()[start * per..(start + n) * per].to_vec(),
            )?;
            let mut g = Graph::new();
            let x = g.constant(chunk);
            let mut ctx = Binder::new(&self.encoder_params, SpectralMode::Frozen(&self.encoder_spectral), false)
                .with_pixelnorm_epsilon(self.pixelnorm_epsilon);
            let z = self.encoder.forward(&mut g, &mut ctx, x, &self.phase)?;
            out.extend(tensor_to_codes(g.value(z)));
        }
        Ok(out)
    }

    pub fn decode(&self, codes: &[LatentCode]) -> Result<ImageBatch> {
        let mut parts = Vec::new();
        for chunk in codes.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::new();
            let z = g.constant(codes_to_tensor(chunk)?);
            let mut ctx = Binder::new(&self.decoder_params, SpectralMode::Frozen(&self.decoder_spectral), false)
                .with_pixelnorm_epsilon(self.pixelnorm_epsilon);
            let x = self.decoder.forward(&mut g, &mut ctx, z, &self.phase)?;
            parts.push(ImageBatch::new(g.value(x).clone())?);
        }
        if parts.is_empty() {
            return Err(Error::Argument("decode of an empty code list".into()));
        }
        ImageBatch::concat(&parts)
    }

    pub fn reconstruct(&self, batch: &ImageBatch) -> Result<ImageBatch> {
        self.decode(&self.encode(batch)?)
    }
}
