use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rvsb_core::pipeline::{synthesize_dataset, DatasetConfig, SegmentSettings};
use rvsb_core::seed::rng_from_seed;
use rvsb_core::vaenet::train::{read_metrics, sample_loss_grad};
use rvsb_core::vaenet::{
    infer, kld, loss, reparameterize, Architecture, Checkpoint, InferMode, NetworkConfig, TrainConfig,
};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn total_loss(arch: &Architecture, p: &[f64], x: &[f64], t: &[f64], eps: &[f64], beta: f64) -> f64 {
    sample_loss_grad(arch, p, x, t, eps, beta, 1.0).unwrap().0.total
}

fn normal_vec(n: usize, rng: &mut impl Rng, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v * scale
        })
        .collect()
}

#[test]
fn tiny_net_gradients_match_central_differences() {
    let cfg = NetworkConfig::tiny();
    let arch = Architecture::new(&cfg).unwrap();
    let h = 1e-5;
    let mut checked = 0;
    for (seed, beta) in [(11u64, 1e-6), (12, 0.5)] {
        let mut rng = rng_from_seed(seed);
        let params: Vec<f64> = arch.init_params(&mut rng);
        let x = normal_vec(cfg.input_len(), &mut rng, 1.0);
        let t = normal_vec(cfg.input_len(), &mut rng, 1.0);
        let eps = normal_vec(cfg.latent_dim, &mut rng, 1.0);
        let (_, grad) = sample_loss_grad(&arch, &params, &x, &t, &eps, beta, 1.0).unwrap();
        for i in 0..arch.n_params() {
            let mut p = params.clone();
            p[i] += h;
            let up = total_loss(&arch, &p, &x, &t, &eps, beta);
            p[i] -= 2.0 * h;
            let down = total_loss(&arch, &p, &x, &t, &eps, beta);
            let numeric = (up - down) / (2.0 * h);
            let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: analytic {} numeric {numeric} rel {rel}", grad[i]);
            checked += 1;
        }
    }
    assert!(checked >= 500);
}

/// Stratified Monte-Carlo estimate of KL(N(mu, s^2) || N(0, 1)).
fn kl_monte_carlo(mu: f64, logvar: f64, n: usize, rng: &mut impl Rng) -> f64 {
    let sd = (0.5 * logvar).exp();
    let q = Normal::new(mu, sd).unwrap();
    let p = Normal::new(0.0, 1.0).unwrap();
    let std = Normal::new(0.0, 1.0).unwrap();
    let mut acc = 0.0;
    for i in 0..n {
        let u = (i as f64 + rng.random::<f64>()) / n as f64;
        let z = mu + sd * std.inverse_cdf(u.clamp(1e-300, 1.0 - 1e-16));
        acc += q.ln_pdf(z) - p.ln_pdf(z);
    }
    acc / n as f64
}

#[test]
fn kld_matches_monte_carlo() {
    let mut rng = rng_from_seed(21);
    for _ in 0..20 {
        let mu: f64 = rng.random_range(-2.0..2.0);
        let lv: f64 = rng.random_range(-2.0..2.0);
        let closed = kld(&[mu], &[lv]);
        let mc = kl_monte_carlo(mu, lv, 100_000, &mut rng);
        assert!((closed - mc).abs() <= 0.02 * closed, "mu {mu} lv {lv}: {closed} vs {mc}");
    }
}

#[test]
fn reparameterized_moments() {
    let mut rng = rng_from_seed(22);
    let n = 100_000;
    for _ in 0..5 {
        let mu: f64 = rng.random_range(-2.0..2.0);
        let lv: f64 = rng.random_range(-2.0..2.0);
        let sd = (0.5 * lv).exp();
        let draws: Vec<f64> = (0..n).map(|_| reparameterize(&[mu], &[lv], &mut rng).unwrap()[0]).collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let s = (draws.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((m - mu).abs() < 0.02 * sd, "mean {m} vs {mu}");
        assert!((s / sd - 1.0).abs() < 0.02, "std {s} vs {sd}");
    }
}

#[test]
fn loss_is_non_negative() {
    let mut rng = rng_from_seed(23);
    for _ in 0..200 {
        let x = normal_vec(16, &mut rng, 1.0);
        let t = normal_vec(16, &mut rng, 1.0);
        let mu = normal_vec(4, &mut rng, 2.0);
        let lv = normal_vec(4, &mut rng, 2.0);
        let beta: f64 = rng.random_range(0.0..2.0);
        let l = loss(&x, &t, &mu, &lv, beta).unwrap();
        assert!(l.kld >= -1e-9);
        assert!(l.total >= -1e-9);
    }
}

fn small_dataset(n: usize, seed: u64) -> rvsb_core::pipeline::Dataset {
    let cfg = DatasetConfig { n_pairs: n, segment: SegmentSettings::desk(), ..DatasetConfig::default() };
    synthesize_dataset(&cfg, seed).unwrap()
}

#[test]
fn zero_epochs_returns_initialization() {
    let ds = small_dataset(8, 1);
    let net = NetworkConfig::desk();
    let cfg = TrainConfig { epochs: 0, seed: 3, ..TrainConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let out = rvsb_core::vaenet::train(&ds, &net, &cfg, Some(dir.path())).unwrap();
    assert!(out.metrics.is_empty());
    assert_eq!(out.best, Checkpoint::initial(&net, &cfg).unwrap());
    assert_eq!(out.best.epoch, 0);
    assert!(read_metrics(&dir.path().join("metrics.csv")).unwrap().is_empty());
    assert_eq!(Checkpoint::load(&dir.path().join("best")).unwrap(), out.best);
}

#[test]
fn short_training_run_bookkeeping() {
    let ds = small_dataset(16, 2);
    let net = NetworkConfig::desk();
    let cfg = TrainConfig { epochs: 4, seed: 5, ..TrainConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let out = rvsb_core::vaenet::train(&ds, &net, &cfg, Some(dir.path())).unwrap();
    assert_eq!(out.metrics.len(), 4);
    let min_val = out.metrics.iter().map(|m| m.val_total).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best.best_val_loss, Some(min_val));
    let best_epoch = out.metrics.iter().find(|m| m.val_total == min_val).unwrap().epoch;
    assert_eq!(out.best.epoch, best_epoch);
    assert_eq!(out.last.epoch, 4);

    let logged = read_metrics(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(logged.len(), 4);
    for (a, b) in logged.iter().zip(&out.metrics) {
        assert_eq!(a.epoch, b.epoch);
        assert_eq!(a.val_total, b.val_total);
    }
    assert_eq!(Checkpoint::load(&dir.path().join("best")).unwrap(), out.best);
    assert_eq!(Checkpoint::load(&dir.path().join("last")).unwrap(), out.last);

    let again = rvsb_core::vaenet::train(&ds, &net, &cfg, None).unwrap();
    assert_eq!(again.last, out.last);
}

#[test]
fn inference_modes() {
    let ds = small_dataset(8, 4);
    let ckpt = Checkpoint::initial(&NetworkConfig::desk(), &TrainConfig::default()).unwrap();
    let pair = ds.pair(0).unwrap();
    let a = infer(&ckpt, &pair.mixture, InferMode::Mean, None, &mut rng_from_seed(1)).unwrap();
    let b = infer(&ckpt, &pair.mixture, InferMode::Mean, None, &mut rng_from_seed(2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), (32, 32));
    let s1 = infer(&ckpt, &pair.mixture, InferMode::Sample, None, &mut rng_from_seed(1)).unwrap();
    let s2 = infer(&ckpt, &pair.mixture, InferMode::Sample, None, &mut rng_from_seed(2)).unwrap();
    assert_ne!(s1, s2);
    let scaled = infer(&ckpt, &pair.mixture, InferMode::Mean, Some(pair.norm_scale), &mut rng_from_seed(1)).unwrap();
    for (u, v) in scaled.values().iter().zip(a.values()) {
        assert!((u - v * pair.norm_scale).norm() <= 1e-9 * (1.0 + u.norm()));
    }
    let wrong = rvsb_core::dsp::StftSegment::zeros(16, 32);
    assert!(infer(&ckpt, &wrong, InferMode::Mean, None, &mut rng_from_seed(1)).is_err());
}

#[test]
fn full_profile_output_shape() {
    let ckpt = Checkpoint::initial(&NetworkConfig::full(), &TrainConfig::default()).unwrap();
    let seg = rvsb_core::dsp::StftSegment::zeros(128, 128);
    let out = infer(&ckpt, &seg, InferMode::Mean, None, &mut rng_from_seed(0)).unwrap();
    assert_eq!(out.shape(), (128, 128));
    let (mu, _) = ckpt.architecture().unwrap().encode(&ckpt.params, &vec![0.0f32; 2 * 128 * 128]).unwrap();
    assert_eq!(mu.len(), 128);
}

#[test]
fn checkpoint_rejects_mismatched_tables() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = Checkpoint::initial(&NetworkConfig::tiny(), &TrainConfig::default()).unwrap();
    ckpt.save(dir.path()).unwrap();
    let path = dir.path().join("checkpoint.json");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("\"latent_dim\": 4", "\"latent_dim\": 5")).unwrap();
    assert!(Checkpoint::load(dir.path()).is_err());
    ckpt.save(dir.path()).unwrap();
    std::fs::write(dir.path().join("weights.f32"), [0u8; 12]).unwrap();
    assert!(Checkpoint::load(dir.path()).is_err());
    let (entry, values) = ckpt.tensor("encoder.mu.weight").unwrap();
    assert_eq!(entry.shape, vec![4, 8]);
    assert_eq!(values.len(), 32);
}
