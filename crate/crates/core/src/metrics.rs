//! Evaluation metrics: Fréchet distance between feature statistics,
//! perceptual path length, and pluggable feature extractors.

use std::fs;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchCursor, Dataset, Partition};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::latent_ops::Interpolation;
use crate::model::{named_grads, Binder, CodeDecoder, ImageBatch, LatentCode, LayerSpec, Params, SpectralMode};
use crate::normalization::SpectralSet;
use crate::tensor::Tensor;
use crate::trainer::{Adam, AdamConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Published full-scale results, kept for reference only; desk-scale runs are
/// not expected to approach them.
pub mod reference {
    pub const FID_CELEBAHQ_BALANCED: f64 = 25.25;
    pub const FID_LSUN_BALANCED: f64 = 17.89;
    pub const PPL_CELEBAHQ_BALANCED: f64 = 146.2;
    pub const PPL_LSUN_BALANCED: f64 = 678.4;
    pub const IDENTITY_MEDIAN_BASELINE: f64 = 0.758;
    pub const IDENTITY_MEDIAN_BALANCED: f64 = 0.712;
    pub const IDENTITY_CONFIDENCE_THRESHOLD: f64 = 0.600;
    pub const LPIPS_BASELINE: f64 = 0.223;
    pub const LPIPS_BALANCED: f64 = 0.172;
    pub const PPL_EPSILON: f64 = 1e-4;
}

/// Maps images to feature vectors.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// `[N, F]` features.
    fn features(&self, batch: &ImageBatch) -> Result<Tensor>;
}

/// Flattened pixels after resizing to a fixed resolution.
#[derive(Clone, Debug)]
pub struct PixelFeatures {
    pub resolution: usize,
}

impl FeatureExtractor for PixelFeatures {
    fn name(&self) -> &str {
        "pixels"
    }

    fn dim(&self) -> usize {
        3 * self.resolution * self.resolution
    }

    fn features(&self, batch: &ImageBatch) -> Result<Tensor> {
        let b = batch.resized(self.resolution)?;
        let n = b.len();
        b.values.reshape(&[n, self.dim()])
    }
}

/// Gaussian sufficient statistics of a feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mu: Vec<f64>,
    /// Row-major `F x F` unbiased covariance.
    pub sigma: Vec<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn sigma_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.sigma)
    }
}

/// Column mean and unbiased covariance of `[N, F]` features.
pub fn fit_feature_stats(features: &Tensor) -> Result<FeatureStats> {
    let s = features.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("features must be [N, F], got {s:?}")));
    }
    let (n, f) = (s[0], s[1]);
    if n < 2 {
        return Err(Error::Argument("feature statistics need at least 2 samples".into()));
    }
    if n < f + 1 {
        warn!("fitting {f}-dimensional statistics from only {n} samples; covariance is singular");
    }
    let mut mu = vec![0.0; f];
    for row in features.rows() {
        for (m, v) in mu.iter_mut().zip(row) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = features.data().to_vec();
    for row in centered.chunks_mut(f) {
        for (v, m) in row.iter_mut().zip(&mu) {
            *v -= m;
        }
    }
    let x = DMatrix::from_row_slice(n, f, &centered);
    let cov = (x.transpose() * &x) / (n - 1) as f64;
    let mut sigma = vec![0.0; f * f];
    for i in 0..f {
        for j in 0..f {
            sigma[i * f + j] = 0.5 * (cov[(i, j)] + cov[(j, i)]);
        }
    }
    Ok(FeatureStats { mu, sigma, n })
}

/// Square root of a symmetric PSD matrix; negative eigenvalues are clamped to zero.
fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(0.5 * (m + m.transpose()));
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, floored at zero.
///
/// The trace of the cross term is taken from the eigenvalues of the symmetric
/// `S_a^(1/2) S_b S_a^(1/2)`, which shares its spectrum with `S_a S_b`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dimensions {} and {} differ", a.dim(), b.dim())));
    }
    let (sa, sb) = (a.sigma_matrix(), b.sigma_matrix());
    let root_a = sym_sqrt(&sa);
    let inner = &root_a * &sb * &root_a;
    let eig = SymmetricEigen::new(0.5 * (&inner + inner.transpose()));
    let tr_cross: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let dmu = DVector::from_column_slice(&a.mu) - DVector::from_column_slice(&b.mu);
    let d = dmu.norm_squared() + sa.trace() + sb.trace() - 2.0 * tr_cross;
    if !d.is_finite() {
        return Err(Error::Argument("Fréchet distance is not finite".into()));
    }
    Ok(d.max(0.0))
}

/// Distance between corresponding images of two batches.
pub trait PerceptualMetric: Sync {
    fn distances(&self, a: &ImageBatch, b: &ImageBatch) -> Result<Vec<f64>>;
}

/// Squared L2 distance in pixel space.
#[derive(Clone, Copy, Debug, Default)]
pub struct SquaredL2;

impl PerceptualMetric for SquaredL2 {
    fn distances(&self, a: &ImageBatch, b: &ImageBatch) -> Result<Vec<f64>> {
        if a.values.shape() != b.values.shape() {
            return Err(Error::Shape("perceptual metric on batches of different shape".into()));
        }
        Ok((0..a.len())
            .map(|i| a.image(i).iter().zip(b.image(i)).map(|(x, y)| (x - y).powi(2)).sum())
            .collect())
    }
}

/// Squared L2 distance between extracted features.
pub struct FeatureDistance<'a> {
    pub extractor: &'a dyn FeatureExtractor,
}

impl PerceptualMetric for FeatureDistance<'_> {
    fn distances(&self, a: &ImageBatch, b: &ImageBatch) -> Result<Vec<f64>> {
        let (fa, fb) = (self.extractor.features(a)?, self.extractor.features(b)?);
        Ok(fa
            .rows()
            .zip(fb.rows())
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum())
            .collect())
    }
}

/// Region of decoded images a path-length metric compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Crop {
    Full,
    /// Centered square of half the side.
    #[default]
    CenterHalf,
    Region {
        top: usize,
        left: usize,
        size: usize,
    },
}

impl Crop {
    pub fn apply(&self, batch: &ImageBatch) -> Result<ImageBatch> {
        let r = batch.resolution();
        let (top, left, size) = match *self {
            Crop::Full => return Ok(batch.clone()),
            Crop::CenterHalf => (r / 4, r / 4, (r / 2).max(1)),
            Crop::Region { top, left, size } => (top, left, size),
        };
        if size == 0 || top + size > r || left + size > r {
            return Err(Error::Argument(format!("crop {size}@({top},{left}) outside {r}x{r}")));
        }
        let (n, c) = (batch.len(), batch.channels());
        let mut out = Vec::with_capacity(n * c * size * size);
        for plane in batch.values.data().chunks(r * r) {
            for i in top..top + size {
                out.extend_from_slice(&plane[i * r + left..i * r + left + size]);
            }
        }
        ImageBatch::new(Tensor::new(&[n, c, size, size], out)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PplConfig {
    pub pairs: usize,
    pub epsilon: f64,
    pub crop: Crop,
    pub interpolation: Interpolation,
    pub seed: u64,
    /// Pairs decoded per batch.
    pub batch: usize,
}

impl Default for PplConfig {
    fn default() -> Self {
        Self {
            pairs: 1000,
            epsilon: reference::PPL_EPSILON,
            crop: Crop::CenterHalf,
            interpolation: Interpolation::Slerp,
            seed: 0,
            batch: 64,
        }
    }
}

fn check_ppl(cfg: &PplConfig) -> Result<()> {
    if !(cfg.epsilon > 0.0 && cfg.epsilon < 1.0) {
        return Err(Error::Argument(format!("epsilon {} outside (0, 1)", cfg.epsilon)));
    }
    if cfg.batch == 0 {
        return Err(Error::Argument("path length batch must be positive".into()));
    }
    Ok(())
}

/// Mean of `d(G(z(t)), G(z(t + eps))) / eps^2` over random endpoint pairs.
pub fn perceptual_path_length<D: CodeDecoder + ?Sized>(
    decoder: &D,
    metric: &dyn PerceptualMetric,
    cfg: &PplConfig,
) -> Result<f64> {
    check_ppl(cfg)?;
    if cfg.pairs == 0 {
        return Err(Error::Argument("path length needs at least one pair".into()));
    }
    let d = decoder.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs = Vec::with_capacity(cfg.pairs);
    for _ in 0..cfg.pairs {
        let (z1, z2) = (LatentCode::sample(d, &mut rng), LatentCode::sample(d, &mut rng));
        let t = loop {
            let t: f64 = rng.random();
            if t + cfg.epsilon <= 1.0 {
                break t;
            }
        };
        pairs.push((z1, z2, t));
    }
    path_length_over(decoder, metric, cfg, &pairs)
}

/// The path-length average over explicit `(z1, z2, t)` samples; `cfg.pairs`
/// and `cfg.seed` are unused.
pub fn path_length_over<D: CodeDecoder + ?Sized>(
    decoder: &D,
    metric: &dyn PerceptualMetric,
    cfg: &PplConfig,
    pairs: &[(LatentCode, LatentCode, f64)],
) -> Result<f64> {
    check_ppl(cfg)?;
    if pairs.is_empty() {
        return Err(Error::Argument("path length needs at least one pair".into()));
    }
    let mut starts = Vec::with_capacity(pairs.len());
    let mut ends = Vec::with_capacity(pairs.len());
    for (z1, z2, t) in pairs {
        if !(0.0..=1.0 - cfg.epsilon).contains(t) {
            return Err(Error::Argument(format!("t = {t} leaves no room for epsilon")));
        }
        starts.push(cfg.interpolation.apply(z1, z2, *t)?);
        ends.push(cfg.interpolation.apply(z1, z2, t + cfg.epsilon)?);
    }
    let mut total = 0.0;
    for (a, b) in starts.chunks(cfg.batch).zip(ends.chunks(cfg.batch)) {
        let ia = cfg.crop.apply(&decoder.decode(a)?)?;
        let ib = cfg.crop.apply(&decoder.decode(b)?)?;
        for dist in metric.distances(&ia, &ib)? {
            total += dist / (cfg.epsilon * cfg.epsilon);
        }
    }
    let ppl = total / pairs.len() as f64;
    if !ppl.is_finite() {
        return Err(Error::Argument("path length is not finite".into()));
    }
    Ok(ppl)
}

/// Euclidean distance between the embeddings of two single images.
pub fn identity_distance(embedder: Option<&dyn FeatureExtractor>, a: &ImageBatch, b: &ImageBatch) -> Result<f64> {
    let embedder =
        embedder.ok_or_else(|| Error::Capability("identity distance needs an embedding model".into()))?;
    if a.len() != 1 || b.len() != 1 {
        return Err(Error::Argument("identity distance compares single images".into()));
    }
    let (fa, fb) = (embedder.features(a)?, embedder.features(b)?);
    Ok(fa
        .data()
        .iter()
        .zip(fb.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Features of `n` decodes of seeded random codes.
pub fn generated_features<D: CodeDecoder + ?Sized>(
    decoder: &D,
    extractor: &dyn FeatureExtractor,
    n: usize,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes: Vec<LatentCode> = (0..n)
        .map(|_| LatentCode::sample(decoder.latent_dim(), &mut rng))
        .collect();
    let mut rows = Vec::new();
    for chunk in codes.chunks(64) {
        rows.extend(extractor.features(&decoder.decode(chunk)?)?.into_data());
    }
    Tensor::new(&[n, extractor.dim()], rows)
}

/// Features of up to `n` dataset images of a partition at `level`.
pub fn dataset_features(
    dataset: &Dataset,
    partition: Partition,
    level: usize,
    extractor: &dyn FeatureExtractor,
    n: usize,
) -> Result<Tensor> {
    let idx = dataset.indices(partition);
    let take = &idx[..n.min(idx.len())];
    let mut rows = Vec::new();
    for chunk in take.chunks(64) {
        rows.extend(extractor.features(&dataset.gather(chunk, level)?)?.into_data());
    }
    Tensor::new(&[take.len(), extractor.dim()], rows)
}

/// Fréchet distance between `n` generated samples and reference statistics.
pub fn fid<D: CodeDecoder + ?Sized>(
    decoder: &D,
    extractor: &dyn FeatureExtractor,
    reference: &FeatureStats,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let stats = fit_feature_stats(&generated_features(decoder, extractor, n, seed)?)?;
    frechet_distance(&stats, reference)
}

/// One serialized metric result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub metric: String,
    pub value: f64,
    pub num_samples: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricReport {
    pub fn new(metric: &str, value: f64, num_samples: usize, seed: u64, config_hash: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            metric: metric.to_string(),
            value,
            num_samples,
            seed,
            config_hash: config_hash.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 32,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

/// Small convolutional regressor of the synthetic generative factors; its
/// penultimate activations serve as FID / perceptual features.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeskExtractor {
    layers: Vec<LayerSpec>,
    params: Params,
    targets: Vec<String>,
    /// Per-target `(mean, std)` used to standardize regression targets.
    scales: Vec<(f64, f64)>,
    /// Final training-batch loss.
    pub training_loss: f64,
}

const EXTRACTOR_INPUT: usize = 16;
const EXTRACTOR_FEATURES: usize = 64;
const EXTRACTOR_SLOPE: f64 = 0.2;

fn extractor_layers(outputs: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv("x.conv1".into(), 3, 16, 3, 1),
        LayerSpec::conv("x.conv2".into(), 16, 32, 3, 2),
        LayerSpec::conv("x.conv3".into(), 32, 32, 3, 2),
        LayerSpec::conv("x.conv4".into(), 32, EXTRACTOR_FEATURES, 4, 1),
        LayerSpec::conv("x.head".into(), EXTRACTOR_FEATURES, outputs, 1, 1),
    ]
}

/// Regression targets: hue as `(cos, sin)`, everything else as-is.
fn target_columns(names: &[String], row: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for (n, &v) in names.iter().zip(row) {
        if n == "hue" {
            let a = std::f64::consts::TAU * v;
            out.extend([a.cos(), a.sin()]);
        } else {
            out.push(v);
        }
    }
    out
}

impl DeskExtractor {
    fn forward(&self, g: &mut Graph, ctx: &mut Binder<'_>, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for layer in &self.layers[..4] {
            h = layer.apply(g, ctx, h)?;
            h = g.leaky_relu(h, EXTRACTOR_SLOPE);
        }
        let n = g.shape(h)[0];
        let feats = g.reshape(h, &[n, EXTRACTOR_FEATURES])?;
        let out = self.layers[4].apply(g, ctx, h)?;
        let out = g.reshape(out, &[n, self.scales.len()])?;
        Ok((feats, out))
    }

    /// Trains on the dataset's train partition to regress its factor labels.
    pub fn train(dataset: &Dataset, cfg: &ExtractorConfig) -> Result<Self> {
        let table = dataset
            .factors()
            .ok_or_else(|| Error::Capability("the desk extractor needs factor labels".into()))?;
        let targets: Vec<Vec<f64>> = table.rows.iter().map(|r| target_columns(&table.names, r)).collect();
        let t = targets[0].len();
        let train = dataset.indices(Partition::Train);
        let mut scales = Vec::with_capacity(t);
        for j in 0..t {
            let col: Vec<f64> = train.iter().map(|&i| targets[i][j]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            scales.push((mean, var.sqrt().max(1e-6)));
        }
        let layers = extractor_layers(t);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = Params::new();
        for l in &layers {
            let scale = (2.0 / l.fan_in() as f64).sqrt();
            let n = l.weight_shape().iter().product::<usize>();
            let w = (0..n)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * scale)
                .collect();
            params.insert(l.weight_name(), Tensor::new(&l.weight_shape(), w)?);
            params.insert(l.bias_name(), Tensor::zeros(&[l.out_channels]));
        }
        let mut model = Self {
            layers,
            params,
            targets: table.names.clone(),
            scales,
            training_loss: f64::NAN,
        };
        let level = input_level(dataset);
        let batch = cfg.batch.min(train.len());
        let mut adam = Adam::new(AdamConfig {
            alpha: cfg.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        });
        let mut cursor = BatchCursor::default();
        for _ in 0..cfg.steps {
            let (picked, next) = dataset.next_indices(Partition::Train, batch, cursor);
            cursor = next;
            let images = dataset.gather(&picked, level)?;
            let y: Vec<f64> = picked
                .iter()
                .flat_map(|&i| targets[i].iter().zip(&model.scales).map(|(v, (m, s))| (v - m) / s))
                .collect();
            let mut g = Graph::new();
            let x = g.constant(images.resized(EXTRACTOR_INPUT)?.values);
            let y = g.constant(Tensor::new(&[batch, t], y)?);
            let grads = {
                let empty = SpectralSet::new();
                let mut ctx = Binder::new(&model.params, SpectralMode::Frozen(&empty), true);
                let (_, out) = model.forward(&mut g, &mut ctx, x)?;
                let loss = g.mean_squared_error(out, y)?;
                model.training_loss = g.value(loss).item();
                named_grads(ctx.bound(), &mut g.backward(loss)?)
            };
            adam.step(&mut model.params, &grads)?;
        }
        Ok(model)
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    /// Standardized factor predictions, `[N, T]`.
    pub fn predict(&self, batch: &ImageBatch) -> Result<Tensor> {
        self.run(batch).map(|(_, p)| p)
    }

    fn run(&self, batch: &ImageBatch) -> Result<(Tensor, Tensor)> {
        let mut feats = Vec::new();
        let mut preds = Vec::new();
        let n = batch.len();
        let resized = batch.resized(EXTRACTOR_INPUT)?;
        let per = resized.image_len();
        for start in (0..n).step_by(64) {
            let m = 64.min(n - start);
            let chunk = Tensor::new(
                &[m, 3, EXTRACTOR_INPUT, EXTRACTOR_INPUT],
                resized.values.data()[start * per..(start + m) * per].to_vec(),
            )?;
            let mut g = Graph::new();
            let x = g.constant(chunk);
            let empty = SpectralSet::new();
            let mut ctx = Binder::new(&self.params, SpectralMode::Frozen(&empty), false);
            let (f, p) = self.forward(&mut g, &mut ctx, x)?;
            feats.extend_from_slice(g.value(f).data());
            preds.extend_from_slice(g.value(p).data());
        }
        Ok((
            Tensor::new(&[n, EXTRACTOR_FEATURES], feats)?,
            Tensor::new(&[n, self.scales.len()], preds)?,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

fn input_level(dataset: &Dataset) -> usize {
    (0..=dataset.max_level())
        .find(|&l| dataset.resolution(l) >= EXTRACTOR_INPUT)
        .unwrap_or(dataset.max_level())
}

impl FeatureExtractor for DeskExtractor {
    fn name(&self) -> &str {
        "desk-extractor"
    }

    fn dim(&self) -> usize {
        EXTRACTOR_FEATURES
    }

    fn features(&self, batch: &ImageBatch) -> Result<Tensor> {
        self.run(batch).map(|(f, _)| f)
    }
}
