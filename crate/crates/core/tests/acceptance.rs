//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::DMatrix;
use progae_core::checkpoint;
use progae_core::config::Preset;
use progae_core::data::{estimate_background, ingest, Partition};
use progae_core::graph::Graph;
use progae_core::latent_ops::{extract_attribute, lambda_sweep};
use progae_core::losses::{encoder_loss, encoder_objective, recon_x, recon_z, kl_unit_gaussian};
use progae_core::metrics::{
    dataset_features, fid, fit_feature_stats, frechet_distance, path_length_over, perceptual_path_length, Crop,
    DeskExtractor, FeatureStats, PplConfig, SquaredL2,
};
use progae_core::model::{named_grads, Binder, CodeDecoder, FrozenModel, Params, SpectralMode};
use progae_core::normalization::{eqlr_scale, pixel_norm, spectral_normalize, SpectralState};
use progae_core::trainer::ablation::{is_declared_factor, run_ablation, AblationSpec};
use progae_core::trainer::{run_schedule, run_steps, MemoryLog, Observer, PhaseRecord, RunOutcome, StepRecord, TrainState, WindowRecord};
use progae_core::{
    Config, ImageBatch, Interpolation, LatentCode, LossWeights, Margin, NetworkConfig, NormScheme, PhaseState, Result,
    Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn report(n: u32, name: &str, ok: bool, detail: String, started: Instant) {
    println!(
        "criterion {n} {name}: {} ({detail}; {:.1}s)",
        if ok { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
}

fn gaussian(rng: &mut impl Rng, n: usize, scale: f64, shift: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale + shift).collect()
}

// --- 1. loss formulas -------------------------------------------------------

/// `KL(N(mu, var) || N(0, 1))` by composite Simpson integration of `p ln(p / q)`.
fn kl_quadrature(mu: f64, var: f64) -> f64 {
    let sd = var.sqrt();
    let (lo, hi) = (mu - 14.0 * sd, mu + 14.0 * sd);
    let n = 20_000;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| {
        let lp = -0.5 * ((x - mu) / sd).powi(2) - sd.ln() - 0.5 * (std::f64::consts::TAU).ln();
        let lq = -0.5 * x * x - 0.5 * (std::f64::consts::TAU).ln();
        lp.exp() * (lp - lq)
    };
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn criterion_1_loss_oracles() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut kl_err: f64 = 0.0;
    for b in 0..50 {
        let (m, d) = (8 + b % 5, 1 + b % 6);
        let (sd, shift) = (rng.random_range(0.2..2.0), rng.random_range(-1.0..1.0));
        let raw = gaussian(&mut rng, m * d, sd, shift);
        let codes: Vec<LatentCode> = raw.chunks(d).map(|r| LatentCode::new(r.to_vec())).collect();
        let got = kl_unit_gaussian(&codes).unwrap().kl;
        let mut want = 0.0;
        for j in 0..d {
            let col: Vec<f64> = raw.iter().skip(j).step_by(d).copied().collect();
            let mu = col.iter().sum::<f64>() / m as f64;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m as f64;
            want += kl_quadrature(mu, var);
        }
        kl_err = kl_err.max((got - want).abs());
    }

    let mut rx_err: f64 = 0.0;
    let mut rz_err: f64 = 0.0;
    let mut eq1_err: f64 = 0.0;
    for _ in 0..20 {
        let n = 3;
        let shape = [n, 3, 4, 4];
        let a = gaussian(&mut rng, 48 * n, 0.5, 0.0);
        let b = gaussian(&mut rng, 48 * n, 0.5, 0.0);
        let xa = ImageBatch::new(Tensor::new(&shape, a.clone()).unwrap()).unwrap();
        let xb = ImageBatch::new(Tensor::new(&shape, b.clone()).unwrap()).unwrap();
        let mut direct = 0.0;
        for i in 0..a.len() {
            direct += (a[i] - b[i]).abs();
        }
        rx_err = rx_err.max((recon_x(&xa, &xb).unwrap() - direct / a.len() as f64).abs());

        let d = 6;
        let za: Vec<LatentCode> = (0..n).map(|_| LatentCode::sample(d, &mut rng)).collect();
        let zb: Vec<LatentCode> = (0..n).map(|_| LatentCode::sample(d, &mut rng)).collect();
        let mut cos = 0.0;
        for (p, q) in za.iter().zip(&zb) {
            let dot: f64 = p.values().iter().zip(q.values()).map(|(x, y)| x * y).sum();
            let np = p.values().iter().map(|x| x * x).sum::<f64>().sqrt();
            let nq = q.values().iter().map(|x| x * x).sum::<f64>().sqrt();
            cos += 1.0 - dot / (np * nq);
        }
        rz_err = rz_err.max((recon_z(&za, &zb).unwrap() - cos / n as f64).abs());

        let (kr, kf, rx) = (rng.random_range(0.0..50.0), rng.random_range(0.0..50.0), rng.random_range(0.0..1.0));
        let w = LossWeights {
            lambda_x: rng.random_range(0.0..10.0),
            lambda_z: 10.0,
        };
        eq1_err = eq1_err.max((encoder_loss(kr, kf, rx, &w, Margin::DISABLED) - (kr - kf + w.lambda_x * rx)).abs());
    }
    let ok = kl_err < 1e-6 && rx_err < 1e-7 && rz_err < 1e-7 && eq1_err == 0.0 && t0.elapsed().as_secs() < 60;
    report(
        1,
        "loss-formula oracles",
        ok,
        format!("kl {kl_err:.2e}, recon_x {rx_err:.2e}, recon_z {rz_err:.2e}, unhinged {eq1_err:.1e}"),
        t0,
    );
    assert!(ok);
}

// --- shared tiny model ------------------------------------------------------

fn tiny_config(max_resolution: usize) -> Config {
    let mut c = Preset::DeskSynthetic.config();
    let mut model = NetworkConfig::new(4, max_resolution);
    model.channel_schedule = vec![3; model.levels()];
    c.model = model;
    c.norm = NormScheme::balanced();
    c
}

struct Tiny {
    state: TrainState,
    x: ImageBatch,
    z_hat: Tensor,
    phase: PhaseState,
}

fn tiny(max_resolution: usize, phase: PhaseState, seed: u64) -> Tiny {
    let cfg = tiny_config(max_resolution);
    let state = TrainState::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = cfg.model.resolution(phase.level);
    let n = 4;
    let x = ImageBatch::new(Tensor::new(&[n, 3, res, res], gaussian(&mut rng, n * 3 * res * res, 0.5, 0.0)).unwrap()).unwrap();
    let codes: Vec<LatentCode> = (0..n).map(|_| LatentCode::sample(4, &mut rng)).collect();
    let z_hat = progae_core::model::codes_to_tensor(&codes).unwrap();
    Tiny { state, x, z_hat, phase }
}

/// Encoder objective and its gradients with respect to the encoder parameters.
fn encoder_pass(t: &Tiny, enc_params: &Params, weights: &LossWeights, margin: Margin) -> (f64, f64, BTreeMap<String, Tensor>) {
    let s = &t.state;
    let mut g = Graph::new();
    let mut dec = Binder::new(&s.decoder_params, SpectralMode::Frozen(&s.decoder_spectral), false);
    let mut enc = Binder::new(enc_params, SpectralMode::Frozen(&s.encoder_spectral), true);
    let zh = g.constant(t.z_hat.clone());
    let x_fake = s.decoder.forward(&mut g, &mut dec, zh, &t.phase).unwrap();
    let x = g.constant(t.x.values.clone());
    let z_real = s.encoder.forward(&mut g, &mut enc, x, &t.phase).unwrap();
    let z_fake = s.encoder.forward(&mut g, &mut enc, x_fake, &t.phase).unwrap();
    let x_rec = s.decoder.forward(&mut g, &mut dec, z_real, &t.phase).unwrap();
    let terms = encoder_objective(&mut g, z_real, z_fake, x, x_rec, weights, margin).unwrap();
    let gap = g.value(terms.kl_real).item() - g.value(terms.kl_fake).item();
    let loss = g.value(terms.loss).item();
    let grads = named_grads(enc.bound(), &mut g.backward(terms.loss).unwrap());
    (loss, gap, grads)
}

/// `lambda_x * recon_x` alone, same graph otherwise.
fn recon_only_grads(t: &Tiny, weights: &LossWeights) -> BTreeMap<String, Tensor> {
    let s = &t.state;
    let mut g = Graph::new();
    let mut dec = Binder::new(&s.decoder_params, SpectralMode::Frozen(&s.decoder_spectral), false);
    let mut enc = Binder::new(&s.encoder_params, SpectralMode::Frozen(&s.encoder_spectral), true);
    let x = g.constant(t.x.values.clone());
    let z_real = s.encoder.forward(&mut g, &mut enc, x, &t.phase).unwrap();
    let x_rec = s.decoder.forward(&mut g, &mut dec, z_real, &t.phase).unwrap();
    let r = g.mean_abs_diff(x, x_rec).unwrap();
    let loss = g.scale(r, weights.lambda_x);
    named_grads(enc.bound(), &mut g.backward(loss).unwrap())
}

fn max_grad_diff(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, ta) in a {
        match b.get(k) {
            Some(tb) => worst = worst.max(ta.max_abs_diff(tb)),
            None => worst = worst.max(ta.data().iter().fold(0.0, |m, v| m.max(v.abs()))),
        }
    }
    worst
}

// --- 2. hinge gating --------------------------------------------------------

#[test]
fn criterion_2_hinge_gating() {
    let t0 = Instant::now();
    let weights = LossWeights {
        lambda_x: 1.5,
        lambda_z: 10.0,
    };
    let mut gated = None;
    let mut open = None;
    for seed in 0..40 {
        let t = tiny(4, PhaseState::at_level(0), seed);
        let (_, gap, _) = encoder_pass(&t, &t.state.encoder_params, &weights, Margin::DISABLED);
        let recon = recon_only_grads(&t, &weights);
        if gap < 0.0 && gated.is_none() {
            let (_, _, g) = encoder_pass(&t, &t.state.encoder_params, &weights, Margin(-gap / 2.0));
            gated = Some(max_grad_diff(&g, &recon));
        }
        if open.is_none() {
            let (_, _, g) = encoder_pass(&t, &t.state.encoder_params, &weights, Margin(gap.abs() * 2.0 + 1.0));
            open = Some(max_grad_diff(&g, &recon));
        }
        if gated.is_some() && open.is_some() {
            break;
        }
    }
    let (gated, open) = (gated.expect("no seed with a negative gap"), open.unwrap());
    let ok = gated == 0.0 && open > 1e-9;
    report(
        2,
        "hinge gating",
        ok,
        format!("below bound |dL - d(lx*rx)| = {gated:.1e}, above bound {open:.2e}"),
        t0,
    );
    assert!(ok);
}

// --- 3. normalization -------------------------------------------------------

#[test]
fn criterion_3_normalization_oracles() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_sv: f64 = 0.0;
    for _ in 0..100 {
        let (r, c) = (rng.random_range(2..24), rng.random_range(2..40));
        let sd = rng.random_range(0.1..5.0);
        let w = Tensor::new(&[r, c], gaussian(&mut rng, r * c, sd, 0.0)).unwrap();
        // The estimate is carried across calls exactly as during training.
        let mut state = SpectralState::random(r, &mut rng);
        let mut out = w.clone();
        for _ in 0..200 {
            let (o, s) = spectral_normalize(&w, &state, 1).unwrap();
            out = o;
            state = s;
        }
        let sv = DMatrix::from_row_slice(r, c, out.data()).singular_values().max();
        worst_sv = worst_sv.max((sv - 1.0).abs());
    }

    let f = Tensor::new(&[3, 7, 5, 4], gaussian(&mut rng, 3 * 7 * 20, 3.0, 0.5)).unwrap();
    let y = pixel_norm(&f, 1e-8).unwrap();
    let mut worst_rms: f64 = 0.0;
    for n in 0..3 {
        for p in 0..20 {
            let ms: f64 = (0..7).map(|c| y.data()[n * 140 + c * 20 + p].powi(2)).sum::<f64>() / 7.0;
            worst_rms = worst_rms.max((ms.sqrt() - 1.0).abs());
        }
    }
    let eqlr_exact = [2usize, 8, 18, 64]
        .iter()
        .all(|&n| eqlr_scale(n).unwrap() == (2.0 / n as f64).sqrt());
    let ok = worst_sv <= 1e-3 && worst_rms <= 1e-4 && eqlr_exact;
    report(
        3,
        "normalization oracles",
        ok,
        format!("max |sv - 1| {worst_sv:.2e}, max |rms - 1| {worst_rms:.2e}, eqlr exact {eqlr_exact}"),
        t0,
    );
    assert!(ok);
}

// --- 4. gradient checks -----------------------------------------------------

/// Worst relative error between central differences and autodiff over a
/// spread of coordinates of every tensor.
fn grad_check(params: &Params, grads: &BTreeMap<String, Tensor>, f: impl Fn(&Params) -> f64) -> (f64, usize) {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, t) in params {
        let analytic = grads.get(name).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
        let n = t.numel();
        let stride = (n / 5).max(1);
        for i in (0..n).step_by(stride) {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            let a = analytic[i];
            let err = (numeric - a).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}

#[test]
fn criterion_4_gradient_checks() {
    let t0 = Instant::now();
    let weights = LossWeights::default();
    let phase = PhaseState { level: 1, alpha: 0.5, samples_seen: 0 };
    let t = tiny(8, phase, 11);
    let s = &t.state;

    let (_, _, enc_grads) = encoder_pass(&t, &s.encoder_params, &weights, Margin::DISABLED);
    let (enc_err, enc_n) = grad_check(&s.encoder_params, &enc_grads, |p| {
        encoder_pass(&t, p, &weights, Margin::DISABLED).0
    });

    let decoder_loss = |p: &Params, grads: bool| {
        let mut g = Graph::new();
        let mut dec = Binder::new(p, SpectralMode::Frozen(&s.decoder_spectral), true);
        let mut enc = Binder::new(&s.encoder_params, SpectralMode::Frozen(&s.encoder_spectral), false);
        let z = g.constant(t.z_hat.clone());
        let x = s.decoder.forward(&mut g, &mut dec, z, &phase).unwrap();
        let zr = s.encoder.forward(&mut g, &mut enc, x, &phase).unwrap();
        let terms = progae_core::losses::decoder_objective(&mut g, z, zr, &weights).unwrap();
        let v = g.value(terms.loss).item();
        let gr = if grads {
            named_grads(dec.bound(), &mut g.backward(terms.loss).unwrap())
        } else {
            BTreeMap::new()
        };
        (v, gr)
    };
    let (_, dec_grads) = decoder_loss(&s.decoder_params, true);
    let (dec_err, dec_n) = grad_check(&s.decoder_params, &dec_grads, |p| decoder_loss(p, false).0);

    let ok = enc_err < 1e-3 && dec_err < 1e-3;
    report(
        4,
        "gradient checks",
        ok,
        format!("encoder {enc_err:.2e} over {enc_n} coords, decoder {dec_err:.2e} over {dec_n} coords"),
        t0,
    );
    assert!(ok);
}

// --- 5. FID and PPL ---------------------------------------------------------

struct Constant;

impl CodeDecoder for Constant {
    fn latent_dim(&self) -> usize {
        3
    }

    fn decode(&self, codes: &[LatentCode]) -> Result<ImageBatch> {
        ImageBatch::new(Tensor::full(&[codes.len(), 3, 2, 2], 0.25))
    }
}

/// `G(z) = [z0, z1, z0 + z1]` as a 1x1 RGB image.
struct Linear;

impl CodeDecoder for Linear {
    fn latent_dim(&self) -> usize {
        2
    }

    fn decode(&self, codes: &[LatentCode]) -> Result<ImageBatch> {
        let mut v = Vec::new();
        for c in codes {
            let z = c.values();
            v.extend([z[0], z[1], z[0] + z[1]]);
        }
        ImageBatch::new(Tensor::new(&[codes.len(), 3, 1, 1], v)?)
    }
}

fn spd(rng: &mut impl Rng, f: usize) -> Vec<f64> {
    let a = DMatrix::from_iterator(f, f, gaussian(rng, f * f, 1.0, 0.0));
    let m = &a * a.transpose() + DMatrix::identity(f, f) * 0.1;
    let mut out = vec![0.0; f * f];
    for i in 0..f {
        for j in 0..f {
            out[i * f + j] = m[(i, j)];
        }
    }
    out
}

#[test]
fn criterion_5_metric_oracles() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let feats = Tensor::new(&[40, 4], gaussian(&mut rng, 160, 1.0, 0.3)).unwrap();
    let stats = fit_feature_stats(&feats).unwrap();
    let same = frechet_distance(&stats, &stats).unwrap();

    let eye = |mu: Vec<f64>| {
        let mut sigma = vec![0.0; 16];
        (0..4).for_each(|i| sigma[i * 5] = 1.0);
        FeatureStats { mu, sigma, n: 100 }
    };
    let shift = frechet_distance(&eye(vec![0.0; 4]), &eye(vec![1.0, -2.0, 0.5, 3.0])).unwrap();
    let shift_err = (shift - (1.0 + 4.0 + 0.25 + 9.0)).abs();

    // Oracle: the cross term's trace is the sum of square roots of the
    // (real, positive) eigenvalues of the non-symmetric product S_a S_b.
    let mut spd_err: f64 = 0.0;
    for _ in 0..10 {
        let (sa, sb) = (spd(&mut rng, 4), spd(&mut rng, 4));
        let (ma, mb) = (gaussian(&mut rng, 4, 1.0, 0.0), gaussian(&mut rng, 4, 1.0, 0.0));
        let (a, b) = (DMatrix::from_row_slice(4, 4, &sa), DMatrix::from_row_slice(4, 4, &sb));
        let tr_cross: f64 = (&a * &b).complex_eigenvalues().iter().map(|l| l.re.max(0.0).sqrt()).sum();
        let dmu: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
        let want = dmu + a.trace() + b.trace() - 2.0 * tr_cross;
        let got = frechet_distance(
            &FeatureStats { mu: ma, sigma: sa, n: 10 },
            &FeatureStats { mu: mb, sigma: sb, n: 10 },
        )
        .unwrap();
        spd_err = spd_err.max((got - want).abs());
    }

    let cfg = PplConfig {
        pairs: 64,
        crop: Crop::Full,
        ..PplConfig::default()
    };
    let constant = perceptual_path_length(&Constant, &SquaredL2, &cfg).unwrap();

    let eps = 1e-4;
    let t = 0.25;
    let lin_cfg = PplConfig {
        epsilon: eps,
        crop: Crop::Full,
        interpolation: Interpolation::Slerp,
        ..PplConfig::default()
    };
    let pairs = [(LatentCode::new(vec![1.0, 0.0]), LatentCode::new(vec![0.0, 1.0]), t)];
    let lin = path_length_over(&Linear, &SquaredL2, &lin_cfg, &pairs).unwrap();
    // slerp between orthogonal unit vectors walks the arc at angle pi t / 2.
    let (a0, a1) = (std::f64::consts::FRAC_PI_2 * t, std::f64::consts::FRAC_PI_2 * (t + eps));
    let (dc, ds) = (a1.cos() - a0.cos(), a1.sin() - a0.sin());
    let hand = (dc * dc + ds * ds + (dc + ds).powi(2)) / (eps * eps);
    let lin_err = (lin - hand).abs();

    let seeded = PplConfig {
        pairs: 32,
        seed: 9,
        ..PplConfig::default()
    };
    let model = TrainState::new(tiny_config(8)).unwrap().snapshot();
    let p1 = perceptual_path_length(&model, &SquaredL2, &seeded).unwrap();
    let p2 = perceptual_path_length(&model, &SquaredL2, &seeded).unwrap();

    let ok = same.abs() <= 1e-8
        && shift_err <= 1e-8
        && spd_err <= 1e-6
        && constant == 0.0
        && lin_err <= 1e-6
        && p1.to_bits() == p2.to_bits();
    report(
        5,
        "FID and PPL oracles",
        ok,
        format!(
            "identical {same:.1e}, shift err {shift_err:.1e}, spd err {spd_err:.1e}, constant ppl {constant}, linear err {lin_err:.1e}, seeded repeat equal {}",
            p1.to_bits() == p2.to_bits()
        ),
        t0,
    );
    assert!(ok);
}

// --- 6. desk training -------------------------------------------------------

const GAP_SLACK: f64 = 0.5;

struct DeskObserver {
    early_step: u64,
    early: Option<FrozenModel>,
    first_phase: Option<FrozenModel>,
    windows: Vec<WindowRecord>,
}

impl Observer for DeskObserver {
    fn on_step(&mut self, state: &TrainState, record: &StepRecord) -> Result<()> {
        if record.step == self.early_step {
            self.early = Some(state.snapshot());
        }
        Ok(())
    }

    fn on_metric_window(&mut self, _state: &TrainState, record: &WindowRecord) -> Result<()> {
        self.windows.push(record.clone());
        Ok(())
    }

    fn on_phase_end(&mut self, state: &TrainState, record: &PhaseRecord) -> Result<()> {
        if record.level == 0 {
            self.first_phase = Some(state.snapshot());
        }
        Ok(())
    }
}

struct DeskRun {
    config: Config,
    outcome: RunOutcome,
    state: TrainState,
    dataset: progae_core::Dataset,
    extractor: DeskExtractor,
    reference: FeatureStats,
    observer: DeskObserver,
    total_steps: u64,
    seconds: f64,
}

fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let t0 = Instant::now();
        let config = Preset::DeskSynthetic.config();
        let top = config.model.levels() - 1;
        let total_steps: u64 = (0..=top)
            .map(|l| config.train.phase_budget(l).div_ceil(config.train.batch_schedule[l] as u64))
            .sum();
        let dataset = ingest(&config.data, config.model.max_resolution, config.seed).unwrap();
        let extractor = DeskExtractor::train(&dataset, &config.metrics.extractor).unwrap();
        let feats = dataset_features(&dataset, Partition::Train, top, &extractor, config.metrics.fid_samples).unwrap();
        let reference = fit_feature_stats(&feats).unwrap();
        let mut observer = DeskObserver {
            early_step: (total_steps / 64).max(1),
            early: None,
            first_phase: None,
            windows: Vec::new(),
        };
        let mut state = TrainState::new(config.clone()).unwrap();
        let outcome = run_schedule(&mut state, &dataset, &mut [&mut observer]).unwrap();
        DeskRun {
            config,
            outcome,
            state,
            dataset,
            extractor,
            reference,
            observer,
            total_steps,
            seconds: t0.elapsed().as_secs_f64(),
        }
    })
}

fn mean_l1(a: &ImageBatch, b: &ImageBatch) -> f64 {
    let (x, y) = (a.values.data(), b.values.data());
    x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64
}

/// Longest run of consecutive post-activation windows whose mean gap lies
/// below `-m_gap - slack`.
fn longest_low_gap_run(windows: &[WindowRecord]) -> usize {
    let (mut run, mut longest) = (0, 0);
    for w in windows.iter().filter(|w| w.margin.is_enabled()) {
        if w.means.gap < -w.margin.value() - GAP_SLACK {
            run += 1;
            longest = longest.max(run);
        } else {
            run = 0;
        }
    }
    longest
}

#[test]
fn criterion_6_desk_training() {
    let t0 = Instant::now();
    let run = desk_run();
    let cfg = &run.config;
    let top = cfg.model.levels() - 1;
    let test = run.dataset.indices(Partition::Test).to_vec();
    let held_out = run.dataset.gather(&test, top).unwrap();

    // Both models reconstruct the same full-resolution held-out images; the
    // first-phase model sees them downsampled and its output is upsampled.
    let first = run.observer.first_phase.as_ref().expect("first phase never ended");
    let first_rec = first.reconstruct(&held_out).unwrap().resized(cfg.model.max_resolution).unwrap();
    let first_l1 = mean_l1(&first_rec, &held_out);
    let fin = run.state.snapshot();
    let final_l1 = mean_l1(&fin.reconstruct(&held_out).unwrap(), &held_out);
    let drop = 1.0 - final_l1 / first_l1;

    let n = cfg.metrics.fid_samples;
    let early = run.observer.early.as_ref().expect("early snapshot missing");
    let fid_early = fid(early, &run.extractor, &run.reference, n, cfg.seed).unwrap();
    let fid_final = fid(&fin, &run.extractor, &run.reference, n, cfg.seed).unwrap();

    let activated = run.observer.windows.iter().filter(|w| w.margin.is_enabled()).count();
    let low_run = longest_low_gap_run(&run.observer.windows);

    let ok = run.outcome == RunOutcome::Completed && drop >= 0.5 && fid_final < fid_early && activated > 0 && low_run <= 1;
    report(
        6,
        "desk-scale training",
        ok,
        format!(
            "outcome {:?} after {} steps in {:.0}s; held-out recon_x {first_l1:.4} -> {final_l1:.4} ({:.0}% drop); \
             desk-FID {fid_early:.3} at step {} -> {fid_final:.3}; {activated} margin windows, longest low-gap run {low_run}",
            run.outcome,
            run.total_steps,
            run.seconds,
            100.0 * drop,
            run.observer.early_step,
        ),
        t0,
    );
    assert!(ok);
}

// --- 7. ablation harness ----------------------------------------------------

#[test]
fn criterion_7_ablation_harness() {
    let t0 = Instant::now();
    let base = Preset::DeskSynthetic.config();
    let top = base.model.levels() - 1;
    let spec = AblationSpec::standard();
    let dataset = ingest(&base.data, base.model.max_resolution, base.seed).unwrap();
    let extractor = DeskExtractor::train(&dataset, &base.metrics.extractor).unwrap();
    let reference =
        fit_feature_stats(&dataset_features(&dataset, Partition::Train, top, &extractor, base.metrics.fid_samples).unwrap())
            .unwrap();
    let report_ = run_ablation(&spec, &base, &dataset, &extractor, &reference, |c| {
        println!(
            "  cell {:<16} diverged {:<5} final {:?} best {:?}",
            c.name, c.diverged, c.final_fid, c.best_fid
        )
    })
    .unwrap();
    print!("{}", report_.table());

    let shared = spec.shared_config(&base);
    let structural = spec
        .cells
        .iter()
        .all(|c| shared.diff(&spec.cell_config(&base, c)).iter().all(|k| is_declared_factor(k)));
    let complete = report_.cells.len() == 9
        && report_.cells.iter().all(|c| !c.windows.is_empty())
        && report_.cells.iter().all(|c| c.diverged || (c.final_fid.is_some() && c.best_fid.is_some()));
    let labeled = report_.cells.iter().filter(|c| c.diverged).all(|c| c.final_fid.is_none())
        && report_.table().lines().count() == 10;
    let traces = report_.kl_traces().lines().count() > 9;
    let diverged: Vec<_> = report_.cells.iter().filter(|c| c.diverged).map(|c| c.name.as_str()).collect();
    let ok = structural && complete && labeled && traces;
    report(
        7,
        "ablation harness",
        ok,
        format!("9 cells, structural diff {structural}, complete {complete}, diverged {diverged:?}"),
        t0,
    );
    assert!(ok);
}

// --- 8. attribute editing ---------------------------------------------------

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn criterion_8_attribute_editing() {
    let run = desk_run();
    let t0 = Instant::now();
    let cfg = &run.config;
    let top = cfg.model.levels() - 1;
    let res = cfg.model.max_resolution;
    let model = run.state.snapshot();
    let (high, low) = run.dataset.split_at_median(Partition::Train, "background").unwrap();
    let take = 64;
    let set_a = run.dataset.gather(&high[..take.min(high.len())], top).unwrap();
    let set_b = run.dataset.gather(&low[..take.min(low.len())], top).unwrap();
    let attr = extract_attribute(&model, "background", &set_a, &set_b).unwrap();

    let lambdas = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let test = run.dataset.indices(Partition::Test);
    let probes = 16.min(test.len());
    let mut measured = vec![0.0; lambdas.len()];
    let mut zero_matches = true;
    for &i in &test[..probes] {
        let image = run.dataset.gather(&[i], top).unwrap();
        let frames = lambda_sweep(&model, &image, &attr, &lambdas).unwrap();
        for (k, m) in measured.iter_mut().enumerate() {
            *m += estimate_background(frames.image(k), res) / probes as f64;
        }
        let rec = model.reconstruct(&image).unwrap();
        let zero = frames.image(2);
        zero_matches &= zero.iter().zip(rec.image(0)).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let rho = spearman(&lambdas, &measured);
    let ok = rho >= 0.9 && zero_matches;
    report(
        8,
        "attribute editing",
        ok,
        format!("mean measured background per lambda {measured:.3?}, spearman {rho:.3}, lambda 0 equals reconstruction {zero_matches}"),
        t0,
    );
    assert!(ok);
}

// --- 9. determinism and persistence -----------------------------------------

fn strip_clock(log: &MemoryLog) -> Vec<String> {
    log.records
        .iter()
        .map(|r| {
            let mut v = serde_json::to_value(r).unwrap();
            v.as_object_mut().unwrap().remove("wall_clock");
            v.to_string()
        })
        .collect()
}

#[test]
fn criterion_9_determinism_and_persistence() {
    let t0 = Instant::now();
    let mut cfg = Preset::DeskSynthetic.config();
    cfg.model.max_resolution = 8;
    cfg.model.channel_schedule = vec![8, 8];
    cfg.train.phase_samples = vec![200_000, 200_000];
    cfg.train.metric_every = 50;
    cfg.train.margin_schedule.entries[0].threshold = 0;
    cfg.train.margin_schedule.entries[0].min_level = 0;
    let dataset = ingest(&cfg.data, cfg.model.max_resolution, cfg.seed).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let mut full_log = MemoryLog::default();
    let mut full = TrainState::new(cfg.clone()).unwrap();
    run_schedule(&mut full, &dataset, &mut [&mut full_log]).unwrap();

    let mut part_log = MemoryLog::default();
    let mut part = TrainState::new(cfg.clone()).unwrap();
    let total = full.progress.steps;
    let pause = total / 2 + 1;
    assert_eq!(run_steps(&mut part, &dataset, &mut [&mut part_log], pause).unwrap(), RunOutcome::Paused);
    let path = dir.path().join("mid.ckpt");
    checkpoint::save(&part, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let mut resumed = checkpoint::load(&path).unwrap();
    let roundtrip = checkpoint::to_bytes(&resumed).unwrap() == bytes;
    drop(part);
    run_schedule(&mut resumed, &dataset, &mut [&mut part_log]).unwrap();

    let (a, b) = (strip_clock(&full_log), strip_clock(&part_log));
    let logs_equal = a == b;
    let weights_equal = checkpoint::to_bytes(&full).unwrap() == checkpoint::to_bytes(&resumed).unwrap();
    let ok = roundtrip && logs_equal && weights_equal && total > pause;
    report(
        9,
        "determinism and persistence",
        ok,
        format!(
            "checkpoint round-trip identical {roundtrip}; {} log records, resumed log identical {logs_equal}; final state identical {weights_equal}",
            a.len()
        ),
        t0,
    );
    assert!(ok);
}
