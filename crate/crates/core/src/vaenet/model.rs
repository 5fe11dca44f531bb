//! The convolutional variational encoder-decoder.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layers::{self, Activation, ConvGeom, Scalar};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// `(channels, height, width)`; channels are the real and imaginary planes.
    pub input_size: (usize, usize, usize),
    pub encoder_depths: Vec<usize>,
    pub latent_dim: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub encoder_activation: Activation,
    pub decoder_activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl NetworkConfig {
    /// 2 x 128 x 128 input, depths 32..512, 128-wide latent.
    pub fn full() -> Self {
        Self {
            input_size: (2, 128, 128),
            encoder_depths: vec![32, 64, 128, 256, 512],
            latent_dim: 128,
            kernel: 4,
            stride: 2,
            padding: 1,
            encoder_activation: Activation::leaky(),
            decoder_activation: Activation::Rectifier,
        }
    }

    /// 2 x 32 x 32 input, depths 8..128, 32-wide latent.
    pub fn desk() -> Self {
        Self {
            input_size: (2, 32, 32),
            encoder_depths: vec![8, 16, 32, 64, 128],
            latent_dim: 32,
            ..Self::full()
        }
    }

    /// 2 x 8 x 8 input, depths [2, 2], latent 4; for gradient checks.
    pub fn tiny() -> Self {
        Self {
            input_size: (2, 8, 8),
            encoder_depths: vec![2, 2],
            latent_dim: 4,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_size;
        if c == 0 || h == 0 || w == 0 {
            return Err(invalid("input size must be non-zero"));
        }
        if self.encoder_depths.is_empty() || self.encoder_depths.contains(&0) {
            return Err(invalid("encoder depths must be non-empty and positive"));
        }
        if self.latent_dim == 0 {
            return Err(invalid("latent_dim must be >= 1"));
        }
        if self.stride == 0 || self.kernel == 0 {
            return Err(invalid("kernel and stride must be positive"));
        }
        let div = self.stride.pow(self.encoder_depths.len() as u32);
        if !h.is_multiple_of(div) || !w.is_multiple_of(div) {
            return Err(invalid(format!(
                "input {h}x{w} not divisible by stride^layers = {div}"
            )));
        }
        let (mut ch, mut cw) = (h, w);
        for _ in &self.encoder_depths {
            if ch + 2 * self.padding < self.kernel {
                return Err(invalid("kernel larger than padded feature map"));
            }
            let g = ConvGeom { in_ch: 1, out_ch: 1, kernel: self.kernel, stride: self.stride, pad: self.padding, in_h: ch, in_w: cw };
            (ch, cw) = g.conv_out();
            if ch * self.stride != g.in_h || cw * self.stride != g.in_w {
                return Err(invalid("kernel/stride/padding must halve the feature map exactly"));
            }
        }
        Ok(())
    }

    /// Spatial size of the deepest feature map.
    pub fn bottleneck_hw(&self) -> (usize, usize) {
        let div = self.stride.pow(self.encoder_depths.len() as u32);
        (self.input_size.1 / div, self.input_size.2 / div)
    }

    pub fn flat_features(&self) -> usize {
        let (h, w) = self.bottleneck_hw();
        self.encoder_depths.last().unwrap() * h * w
    }

    pub fn input_len(&self) -> usize {
        let (c, h, w) = self.input_size;
        c * h * w
    }
}

/// Name, shape and location of one parameter tensor in the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    geom: ConvGeom,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct DenseLayer {
    n_in: usize,
    weight: usize,
    bias: usize,
}

/// Layer layout derived from a [`NetworkConfig`]; parameters live in a
/// separate flat buffer so gradients and optimizer moments share offsets.
/// Encoder layer inputs, pre-activations, flat features, mu, logvar.
type EncoderTrace<T> = (Vec<Vec<T>>, Vec<Vec<T>>, Vec<T>, Vec<T>, Vec<T>);
/// Expand pre-activation, decoder layer inputs, pre-activations, output.
type DecoderTrace<T> = (Vec<T>, Vec<Vec<T>>, Vec<Vec<T>>, Vec<T>);

#[derive(Debug, Clone)]
pub struct Architecture {
    pub config: NetworkConfig,
    entries: Vec<ParamEntry>,
    encoder: Vec<ConvLayer>,
    mu_head: DenseLayer,
    logvar_head: DenseLayer,
    expand: DenseLayer,
    decoder: Vec<ConvLayer>,
    n_params: usize,
}

fn push(entries: &mut Vec<ParamEntry>, next: &mut usize, name: String, shape: Vec<usize>) -> usize {
    let e = ParamEntry { name, shape, offset: *next };
    *next += e.len();
    entries.push(e);
    entries.len() - 1
}

impl Architecture {
    pub fn new(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut entries = Vec::new();
        let mut next = 0;
        let k = config.kernel;
        let (c0, mut h, mut w) = config.input_size;
        let mut ch = c0;
        let mut encoder = Vec::new();
        for (l, &d) in config.encoder_depths.iter().enumerate() {
            let geom = ConvGeom { in_ch: ch, out_ch: d, kernel: k, stride: config.stride, pad: config.padding, in_h: h, in_w: w };
            let weight = push(&mut entries, &mut next, format!("encoder.conv{l}.weight"), vec![d, ch, k, k]);
            let bias = push(&mut entries, &mut next, format!("encoder.conv{l}.bias"), vec![d]);
            encoder.push(ConvLayer { geom, weight, bias });
            (h, w) = geom.conv_out();
            ch = d;
        }
        let flat = config.flat_features();
        let lat = config.latent_dim;
        let mut dense = |name: &str, n_in: usize, n_out: usize| {
            let weight = push(&mut entries, &mut next, format!("{name}.weight"), vec![n_out, n_in]);
            let bias = push(&mut entries, &mut next, format!("{name}.bias"), vec![n_out]);
            DenseLayer { n_in, weight, bias }
        };
        let mu_head = dense("encoder.mu", flat, lat);
        let logvar_head = dense("encoder.logvar", flat, lat);
        let expand = dense("decoder.expand", lat, flat);

        let depths = &config.encoder_depths;
        let n = depths.len();
        let mut decoder = Vec::new();
        for j in 0..n {
            let out = if j + 1 < n { depths[n - 2 - j] } else { c0 };
            let geom = ConvGeom { in_ch: ch, out_ch: out, kernel: k, stride: config.stride, pad: config.padding, in_h: h, in_w: w };
            let weight = push(&mut entries, &mut next, format!("decoder.deconv{j}.weight"), vec![ch, out, k, k]);
            let bias = push(&mut entries, &mut next, format!("decoder.deconv{j}.bias"), vec![out]);
            decoder.push(ConvLayer { geom, weight, bias });
            (h, w) = geom.deconv_out();
            ch = out;
        }
        if (ch, h, w) != config.input_size {
            return Err(invalid(format!(
                "decoder produces {ch}x{h}x{w}, expected {:?}",
                config.input_size
            )));
        }
        Ok(Self { config: config.clone(), entries, encoder, mu_head, logvar_head, expand, decoder, n_params: next })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    fn slice<'a, T>(&self, params: &'a [T], idx: usize) -> &'a [T] {
        &params[self.entries[idx].range()]
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` for every weight and bias.
    ///
    /// Transposed convolutions count `in * k^2 / stride^2` inputs per output.
    pub fn init_params<T: Scalar>(&self, rng: &mut impl Rng) -> Vec<T> {
        let mut params = vec![T::zero(); self.n_params];
        let k2 = self.config.kernel * self.config.kernel;
        let s2 = self.config.stride * self.config.stride;
        let mut fill = |w: usize, b: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for idx in [w, b] {
                for v in &mut params[self.entries[idx].range()] {
                    *v = T::of(rng.random_range(-bound..bound));
                }
            }
        };
        for l in &self.encoder {
            fill(l.weight, l.bias, l.geom.in_ch * k2);
        }
        for d in [&self.mu_head, &self.logvar_head, &self.expand] {
            fill(d.weight, d.bias, d.n_in);
        }
        for l in &self.decoder {
            fill(l.weight, l.bias, (l.geom.in_ch * k2 / s2).max(1));
        }
        params
    }
}

/// Standard-normal draws for one latent sample.
pub fn standard_normal<T: Scalar>(n: usize, rng: &mut impl Rng) -> Vec<T> {
    (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            T::of(e)
        })
        .collect()
}

/// `z = mu + exp(logvar / 2) * eps`.
pub fn reparameterize_with<T: Scalar>(mu: &[T], logvar: &[T], eps: &[T]) -> Result<Vec<T>> {
    if mu.len() != logvar.len() || mu.len() != eps.len() {
        return Err(Error::LengthMismatch(format!(
            "mu {}, logvar {}, eps {}",
            mu.len(),
            logvar.len(),
            eps.len()
        )));
    }
    let half = T::of(0.5);
    Ok(mu
        .iter()
        .zip(logvar)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + (lv * half).exp() * e)
        .collect())
}

pub fn reparameterize<T: Scalar>(mu: &[T], logvar: &[T], rng: &mut impl Rng) -> Result<Vec<T>> {
    let eps = standard_normal(mu.len(), rng);
    reparameterize_with(mu, logvar, &eps)
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    enc_in: Vec<Vec<T>>,
    enc_pre: Vec<Vec<T>>,
    flat: Vec<T>,
    pub mu: Vec<T>,
    pub logvar: Vec<T>,
    eps: Vec<T>,
    z: Vec<T>,
    expand_pre: Vec<T>,
    dec_in: Vec<Vec<T>>,
    dec_pre: Vec<Vec<T>>,
    pub output: Vec<T>,
}

impl Architecture {
    fn check_input<T>(&self, x: &[T]) -> Result<()> {
        if x.len() != self.config.input_len() {
            let (c, h, w) = self.config.input_size;
            return Err(Error::ShapeMismatch { expected: vec![c, h, w], got: vec![x.len()] });
        }
        Ok(())
    }

    fn check_params<T>(&self, params: &[T]) -> Result<()> {
        if params.len() != self.n_params {
            return Err(Error::ShapeMismatch { expected: vec![self.n_params], got: vec![params.len()] });
        }
        Ok(())
    }

    fn encode_cached<T: Scalar>(&self, params: &[T], x: &[T]) -> EncoderTrace<T> {
        let act = self.config.encoder_activation;
        let mut enc_in = Vec::with_capacity(self.encoder.len());
        let mut enc_pre = Vec::with_capacity(self.encoder.len());
        let mut h = x.to_vec();
        for l in &self.encoder {
            let pre = layers::conv2d_forward(&l.geom, &h, self.slice(params, l.weight), self.slice(params, l.bias));
            let mut post = pre.clone();
            act.apply(&mut post);
            enc_in.push(std::mem::replace(&mut h, post));
            enc_pre.push(pre);
        }
        let mu = layers::linear_forward(&h, self.slice(params, self.mu_head.weight), self.slice(params, self.mu_head.bias));
        let logvar = layers::linear_forward(&h, self.slice(params, self.logvar_head.weight), self.slice(params, self.logvar_head.bias));
        (enc_in, enc_pre, h, mu, logvar)
    }

    /// `(mu, logvar)` of the approximate posterior.
    pub fn encode<T: Scalar>(&self, params: &[T], x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        self.check_params(params)?;
        self.check_input(x)?;
        let (_, _, _, mu, logvar) = self.encode_cached(params, x);
        Ok((mu, logvar))
    }

    fn decode_cached<T: Scalar>(&self, params: &[T], z: &[T]) -> DecoderTrace<T> {
        let act = self.config.decoder_activation;
        let expand_pre = layers::linear_forward(z, self.slice(params, self.expand.weight), self.slice(params, self.expand.bias));
        let mut h = expand_pre.clone();
        act.apply(&mut h);
        let mut dec_in = Vec::with_capacity(self.decoder.len());
        let mut dec_pre = Vec::with_capacity(self.decoder.len());
        let last = self.decoder.len() - 1;
        for (j, l) in self.decoder.iter().enumerate() {
            let pre = layers::deconv2d_forward(&l.geom, &h, self.slice(params, l.weight), self.slice(params, l.bias));
            let mut post = pre.clone();
            if j < last {
                act.apply(&mut post);
            }
            dec_in.push(std::mem::replace(&mut h, post));
            dec_pre.push(pre);
        }
        (expand_pre, dec_in, dec_pre, h)
    }

    pub fn decode<T: Scalar>(&self, params: &[T], z: &[T]) -> Result<Vec<T>> {
        self.check_params(params)?;
        if z.len() != self.config.latent_dim {
            return Err(Error::ShapeMismatch { expected: vec![self.config.latent_dim], got: vec![z.len()] });
        }
        Ok(self.decode_cached(params, z).3)
    }

    /// Encode, reparameterize with the given noise, decode.
    pub fn forward<T: Scalar>(&self, params: &[T], x: &[T], eps: &[T]) -> Result<ForwardCache<T>> {
        self.check_params(params)?;
        self.check_input(x)?;
        let (enc_in, enc_pre, flat, mu, logvar) = self.encode_cached(params, x);
        let z = reparameterize_with(&mu, &logvar, eps)?;
        let (expand_pre, dec_in, dec_pre, output) = self.decode_cached(params, &z);
        Ok(ForwardCache { enc_in, enc_pre, flat, mu, logvar, eps: eps.to_vec(), z, expand_pre, dec_in, dec_pre, output })
    }

    /// Accumulates parameter gradients into `grads` given the loss gradient
    /// w.r.t. the output and the direct (divergence) gradients w.r.t. `mu`
    /// and `logvar`.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &ForwardCache<T>,
        d_output: &[T],
        d_mu_direct: &[T],
        d_logvar_direct: &[T],
        grads: &mut [T],
    ) {
        let dact = self.config.decoder_activation;
        let eact = self.config.encoder_activation;
        let entries = &self.entries;
        let last = self.decoder.len() - 1;

        let mut g = d_output.to_vec();
        for (j, l) in self.decoder.iter().enumerate().rev() {
            if j < last {
                dact.backward(&cache.dec_pre[j], &mut g);
            }
            let (dw, db) = split_pair(grads, &entries[l.weight], &entries[l.bias]);
            g = layers::deconv2d_backward(&l.geom, &cache.dec_in[j], self.slice(params, l.weight), &g, dw, db);
        }
        dact.backward(&cache.expand_pre, &mut g);
        let (dw, db) = split_pair(grads, &entries[self.expand.weight], &entries[self.expand.bias]);
        let dz = layers::linear_backward(&cache.z, self.slice(params, self.expand.weight), &g, dw, db);

        let half = T::of(0.5);
        let mut dmu = d_mu_direct.to_vec();
        let mut dlv = d_logvar_direct.to_vec();
        for d in 0..dz.len() {
            dmu[d] += dz[d];
            dlv[d] += dz[d] * half * (cache.logvar[d] * half).exp() * cache.eps[d];
        }

        let (dw, db) = split_pair(grads, &entries[self.mu_head.weight], &entries[self.mu_head.bias]);
        let mut g = layers::linear_backward(&cache.flat, self.slice(params, self.mu_head.weight), &dmu, dw, db);
        let (dw, db) = split_pair(grads, &entries[self.logvar_head.weight], &entries[self.logvar_head.bias]);
        let g2 = layers::linear_backward(&cache.flat, self.slice(params, self.logvar_head.weight), &dlv, dw, db);
        g.iter_mut().zip(&g2).for_each(|(a, &b)| *a += b);

        for (l_idx, l) in self.encoder.iter().enumerate().rev() {
            eact.backward(&cache.enc_pre[l_idx], &mut g);
            let (dw, db) = split_pair(grads, &entries[l.weight], &entries[l.bias]);
            g = layers::conv2d_backward(&l.geom, &cache.enc_in[l_idx], self.slice(params, l.weight), &g, dw, db);
        }
    }
}

/// Disjoint mutable views of a weight and its bias (bias follows weight).
fn split_pair<'a, T>(grads: &'a mut [T], w: &ParamEntry, b: &ParamEntry) -> (&'a mut [T], &'a mut [T]) {
    debug_assert_eq!(w.offset + w.len(), b.offset);
    let (head, tail) = grads[w.offset..b.offset + b.len()].split_at_mut(w.len());
    (head, tail)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    #[test]
    fn full_shape_arithmetic() {
        let cfg = NetworkConfig::full();
        assert_eq!(cfg.bottleneck_hw(), (4, 4));
        assert_eq!(cfg.flat_features(), 8192);
        let arch = Architecture::new(&cfg).unwrap();
        let names: Vec<_> = arch.entries().iter().map(|e| e.name.as_str()).collect();
        assert!(names.contains(&"encoder.mu.weight"));
        let mu = arch.entries().iter().find(|e| e.name == "encoder.mu.weight").unwrap();
        assert_eq!(mu.shape, vec![128, 8192]);
        let last = arch.entries().last().unwrap();
        assert_eq!(last.name, "decoder.deconv4.bias");
        assert_eq!(last.shape, vec![2]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = NetworkConfig::desk();
        cfg.input_size = (2, 48, 32);
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::desk();
        cfg.latent_dim = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::desk();
        cfg.kernel = 3;
        assert!(Architecture::new(&cfg).is_err());
    }

    #[test]
    fn zero_weights_give_zero_latent_and_output() {
        let cfg = NetworkConfig::desk();
        let arch = Architecture::new(&cfg).unwrap();
        let params = vec![0.0f64; arch.n_params()];
        let x: Vec<f64> = (0..cfg.input_len()).map(|k| (k as f64).sin()).collect();
        let (mu, lv) = arch.encode(&params, &x).unwrap();
        assert_eq!(mu.len(), 32);
        assert!(mu.iter().chain(&lv).all(|&v| v == 0.0));
        let out = arch.decode(&params, &vec![1.0; 32]).unwrap();
        assert_eq!(out.len(), cfg.input_len());
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_round_trip_and_errors() {
        let cfg = NetworkConfig::desk();
        let arch = Architecture::new(&cfg).unwrap();
        let params: Vec<f32> = arch.init_params(&mut rng_from_seed(0));
        let x = vec![0.1f32; cfg.input_len()];
        let (mu, lv) = arch.encode(&params, &x).unwrap();
        let z = reparameterize(&mu, &lv, &mut rng_from_seed(1)).unwrap();
        let out = arch.decode(&params, &z).unwrap();
        assert_eq!(out.len(), 2 * 32 * 32);
        assert!(arch.encode(&params, &x[1..]).is_err());
        assert!(arch.decode(&params, &z[1..]).is_err());
        assert!(reparameterize(&mu, &lv[1..], &mut rng_from_seed(1)).is_err());
    }

    #[test]
    fn reparameterize_limits() {
        let mu = vec![0.3f64, -1.0, 2.0];
        let z = reparameterize(&mu, &[-60.0; 3], &mut rng_from_seed(4)).unwrap();
        for (a, b) in z.iter().zip(&mu) {
            assert!((a - b).abs() < 1e-12);
        }
        let a = reparameterize(&mu, &[0.0; 3], &mut rng_from_seed(5)).unwrap();
        let b = reparameterize(&mu, &[0.0; 3], &mut rng_from_seed(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reparameterize_moments() {
        let n = 100_000;
        let mut rng = rng_from_seed(6);
        let draws: Vec<f64> = (0..n)
            .map(|_| reparameterize(&[0.0f64], &[0.0], &mut rng).unwrap()[0])
            .collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!(m.abs() < 0.02);
        assert!((sd - 1.0).abs() < 0.02);
    }
}
