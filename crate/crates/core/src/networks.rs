//! The feature network F_ψ, task network T_θ and the disentanglement
//! networks (style encoder E_S, domain encoder E_D, AdaIN decoder DE, domain
//! classifier T_C).
//!
//! Networks are stateless descriptions; parameters are passed in explicitly
//! as slices of [`Var`] so that the same forward code runs on leaf
//! parameters and on the differentiable inner-loop clones (ψ′, θ′).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::ImageSize;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added to every standard deviation used as a denominator, and to the
/// softplus of predicted AdaIN scales.
pub const STD_EPS: f64 = 1e-5;
pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: ImageSize,
    /// Segmentation classes `m`, background included.
    pub num_classes: usize,
    /// Domain-classifier outputs `K` (number of source domains).
    pub num_domains: usize,
    pub z_channels: usize,
    pub code_dim: usize,
    pub unet_depth: usize,
    pub unet_width: usize,
    pub unet_convs: usize,
    pub encoder_width: usize,
    pub decoder_width: usize,
    pub adain_sites: usize,
    pub task_width: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: ImageSize::square(64),
            num_classes: 4,
            num_domains: 3,
            z_channels: 8,
            code_dim: 8,
            unet_depth: 3,
            unet_width: 16,
            unet_convs: 2,
            encoder_width: 16,
            decoder_width: 16,
            adain_sites: 2,
            task_width: 16,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.unet_depth;
        let ImageSize { height, width } = self.image_size;
        if height % div != 0 || width % div != 0 {
            return Err(Error::Shape(format!(
                "image size {height}x{width} is not divisible by 2^{} required by the feature network",
                self.unet_depth
            )));
        }
        if height % 4 != 0 || width % 4 != 0 {
            return Err(Error::Shape(format!("image size {height}x{width} is not divisible by 4 (encoders)")));
        }
        let positive = [
            ("num_classes", self.num_classes),
            ("num_domains", self.num_domains),
            ("z_channels", self.z_channels),
            ("code_dim", self.code_dim),
            ("unet_width", self.unet_width),
            ("unet_convs", self.unet_convs),
            ("encoder_width", self.encoder_width),
            ("decoder_width", self.decoder_width),
            ("adain_sites", self.adain_sites),
            ("task_width", self.task_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Zero for biases.
    pub fan_in: usize,
}

fn conv_spec(out: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize, k: usize) {
    out.push(ParamSpec { name: format!("{name}.weight"), shape: vec![cout, cin * k * k], fan_in: cin * k * k });
    out.push(ParamSpec { name: format!("{name}.bias"), shape: vec![cout], fan_in: 0 });
}

fn linear_spec(out: &mut Vec<ParamSpec>, name: &str, din: usize, dout: usize) {
    out.push(ParamSpec { name: format!("{name}.weight"), shape: vec![din, dout], fan_in: din });
    out.push(ParamSpec { name: format!("{name}.bias"), shape: vec![dout], fan_in: 0 });
}

/// Sequential reader over a parameter slice; layer order must match the
/// corresponding `specs()`.
struct Cursor<'a> {
    params: &'a [Var],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(params: &'a [Var]) -> Self {
        Self { params, pos: 0 }
    }

    fn next(&mut self) -> &'a Var {
        let p = &self.params[self.pos];
        self.pos += 1;
        p
    }

    fn conv(&mut self, x: &Var, k: usize, stride: usize) -> Var {
        let w = self.next();
        let b = self.next();
        x.conv2d(w, b, k, stride, k / 2)
    }

    fn linear(&mut self, x: &Var) -> Var {
        let w = self.next();
        let b = self.next();
        x.matmul(w).add(b)
    }

    fn finish(self) {
        debug_assert_eq!(self.pos, self.params.len(), "unused parameters");
    }
}

/// Feature network: a small 2D UNet producing `z_channels` maps at input
/// resolution, softmax-normalised across channels.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    depth: usize,
    width: usize,
    convs: usize,
    z_channels: usize,
    slope: f64,
}

impl FeatureNet {
    fn level_width(&self, level: usize) -> usize {
        self.width << level
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let mut cin = 1;
        for l in 0..self.depth {
            for c in 0..self.convs {
                conv_spec(&mut out, &format!("feature.down{l}.conv{c}"), cin, self.level_width(l), 3);
                cin = self.level_width(l);
            }
        }
        for c in 0..self.convs {
            conv_spec(&mut out, &format!("feature.bottom.conv{c}"), cin, self.level_width(self.depth), 3);
            cin = self.level_width(self.depth);
        }
        for l in (0..self.depth).rev() {
            cin += self.level_width(l);
            for c in 0..self.convs {
                conv_spec(&mut out, &format!("feature.up{l}.conv{c}"), cin, self.level_width(l), 3);
                cin = self.level_width(l);
            }
        }
        conv_spec(&mut out, "feature.out", cin, self.z_channels, 1);
        out
    }

    pub fn forward(&self, params: &[Var], images: &Var) -> Var {
        let mut cur = Cursor::new(params);
        let mut h = images.clone();
        let mut skips = Vec::with_capacity(self.depth);
        for _ in 0..self.depth {
            for _ in 0..self.convs {
                h = cur.conv(&h, 3, 1).leaky_relu(self.slope);
            }
            skips.push(h.clone());
            h = h.avg_pool(2);
        }
        for _ in 0..self.convs {
            h = cur.conv(&h, 3, 1).leaky_relu(self.slope);
        }
        for skip in skips.iter().rev() {
            h = Var::concat(&[h.upsample(2), skip.clone()], 1);
            for _ in 0..self.convs {
                h = cur.conv(&h, 3, 1).leaky_relu(self.slope);
            }
        }
        let z = cur.conv(&h, 1, 1).softmax(1);
        cur.finish();
        z
    }
}

/// Shared architecture of E_S and E_D: two stride-2 convolutions, global
/// average pooling, then affine heads for the mean and log-variance.
#[derive(Clone, Debug)]
pub struct CodeEncoder {
    prefix: &'static str,
    width: usize,
    code_dim: usize,
    slope: f64,
}

impl CodeEncoder {
    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let p = self.prefix;
        conv_spec(&mut out, &format!("{p}.conv0"), 1, self.width, 3);
        conv_spec(&mut out, &format!("{p}.conv1"), self.width, 2 * self.width, 3);
        linear_spec(&mut out, &format!("{p}.mu"), 2 * self.width, self.code_dim);
        linear_spec(&mut out, &format!("{p}.logvar"), 2 * self.width, self.code_dim);
        out
    }

    /// `(mu, logvar)`, each `[B, code_dim]`; logvar clamped to ±10.
    pub fn forward(&self, params: &[Var], images: &Var) -> (Var, Var) {
        let mut cur = Cursor::new(params);
        let h = cur.conv(images, 3, 2).leaky_relu(self.slope);
        let h = cur.conv(&h, 3, 2).leaky_relu(self.slope);
        let b = h.shape()[0];
        let pooled = h.mean_keepdim(&[2, 3]).reshape(&[b, 2 * self.width]);
        let mu = cur.linear(&pooled);
        let logvar = cur.linear(&pooled).clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
        cur.finish();
        (mu, logvar)
    }
}

/// Adaptive instance normalisation: each channel of `content` is normalised
/// over its spatial extent, then rescaled to `sigma` and shifted to `mu`
/// (both `[B, C]`).
pub fn adain(content: &Var, mu: &Var, sigma: &Var) -> Var {
    let [b, c, _, _] = content.value().dims4();
    let mean = content.mean_keepdim(&[2, 3]);
    let centered = content.sub(&mean);
    let std = channel_std(&centered);
    centered.div(&std).mul(&sigma.reshape(&[b, c, 1, 1])).add(&mu.reshape(&[b, c, 1, 1]))
}

/// Stabilised per-sample per-channel std of an already-centred `[B,C,H,W]`
/// tensor: `sqrt(var + eps²)`.
fn channel_std(centered: &Var) -> Var {
    centered.square().mean_keepdim(&[2, 3]).add_scalar(STD_EPS * STD_EPS).sqrt()
}

/// Per-sample per-channel `(mean, std)` of `[B,C,H,W]` as `[B,C]` tensors,
/// with the same stabilisation [`adain`] uses.
pub fn channel_moments(x: &Tensor) -> (Tensor, Tensor) {
    let [b, c, h, w] = x.dims4();
    let n = (h * w) as f64;
    let mut mean = vec![0.0; b * c];
    let mut std = vec![0.0; b * c];
    for (i, chunk) in x.data().chunks_exact(h * w).enumerate() {
        let m = chunk.iter().sum::<f64>() / n;
        let var = chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean[i] = m;
        std[i] = (var + STD_EPS * STD_EPS).sqrt();
    }
    (Tensor::new(vec![b, c], mean), Tensor::new(vec![b, c], std))
}

/// Decoder DE: convolutions over Z interleaved with AdaIN layers whose
/// statistics come from an affine head on `concat(s, d)`.
#[derive(Clone, Debug)]
pub struct Decoder {
    z_channels: usize,
    width: usize,
    sites: usize,
    code_dim: usize,
    slope: f64,
}

impl Decoder {
    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for i in 0..self.sites {
            let cin = if i == 0 { self.z_channels } else { self.width };
            conv_spec(&mut out, &format!("decoder.conv{i}"), cin, self.width, 3);
            linear_spec(&mut out, &format!("decoder.adain{i}"), 2 * self.code_dim, 2 * self.width);
        }
        conv_spec(&mut out, "decoder.out", self.width, 1, 3);
        out
    }

    pub fn forward(&self, params: &[Var], z: &Var, s: &Var, d: &Var) -> Var {
        let mut cur = Cursor::new(params);
        let code = Var::concat(&[s.clone(), d.clone()], 1);
        let mut h = z.clone();
        for _ in 0..self.sites {
            h = cur.conv(&h, 3, 1);
            let stats = cur.linear(&code);
            let mu = stats.narrow(1, 0, self.width);
            let sigma = stats.narrow(1, self.width, self.width).softplus().add_scalar(STD_EPS);
            h = adain(&h, &mu, &sigma).leaky_relu(self.slope);
        }
        let x_hat = cur.conv(&h, 3, 1).sigmoid();
        cur.finish();
        x_hat
    }
}

/// Task network T_θ: two convolutions and a per-pixel softmax over classes.
#[derive(Clone, Debug)]
pub struct TaskNet {
    z_channels: usize,
    width: usize,
    num_classes: usize,
    slope: f64,
}

impl TaskNet {
    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        conv_spec(&mut out, "task.conv0", self.z_channels, self.width, 3);
        conv_spec(&mut out, "task.conv1", self.width, self.num_classes, 3);
        out
    }

    pub fn forward(&self, params: &[Var], z: &Var) -> Var {
        let mut cur = Cursor::new(params);
        let h = cur.conv(z, 3, 1).leaky_relu(self.slope);
        let y = cur.conv(&h, 3, 1).softmax(1);
        cur.finish();
        y
    }
}

/// Domain classifier T_C: a single affine layer `[code_dim, K]`.
#[derive(Clone, Debug)]
pub struct DomainClassifier {
    code_dim: usize,
    num_domains: usize,
}

impl DomainClassifier {
    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        linear_spec(&mut out, "classifier", self.code_dim, self.num_domains);
        out
    }

    pub fn forward(&self, params: &[Var], d: &Var) -> Var {
        let mut cur = Cursor::new(params);
        let logits = cur.linear(d);
        cur.finish();
        logits
    }
}

/// Values grouped by network: ψ, θ and the disentanglement parameters φ
/// (style, domain, decoder, classifier).
#[derive(Clone, Debug, PartialEq)]
pub struct Groups<T> {
    pub psi: Vec<T>,
    pub theta: Vec<T>,
    pub style: Vec<T>,
    pub domain: Vec<T>,
    pub decoder: Vec<T>,
    pub classifier: Vec<T>,
}

pub type ParamSets = Groups<Var>;
pub type ParamValues = Groups<Tensor>;

impl<T> Groups<T> {
    pub const NAMES: [&'static str; 6] = ["psi", "theta", "style", "domain", "decoder", "classifier"];

    pub fn groups(&self) -> [&Vec<T>; 6] {
        [&self.psi, &self.theta, &self.style, &self.domain, &self.decoder, &self.classifier]
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.groups().into_iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.psi
            .iter_mut()
            .chain(self.theta.iter_mut())
            .chain(self.style.iter_mut())
            .chain(self.domain.iter_mut())
            .chain(self.decoder.iter_mut())
            .chain(self.classifier.iter_mut())
    }

    /// φ: everything outside (ψ, θ).
    pub fn phi(&self) -> impl Iterator<Item = &T> {
        self.style.iter().chain(&self.domain).chain(&self.decoder).chain(&self.classifier)
    }

    pub fn len(&self) -> usize {
        self.groups().iter().map(|g| g.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Groups<U> {
        Groups {
            psi: self.psi.iter().map(&mut f).collect(),
            theta: self.theta.iter().map(&mut f).collect(),
            style: self.style.iter().map(&mut f).collect(),
            domain: self.domain.iter().map(&mut f).collect(),
            decoder: self.decoder.iter().map(&mut f).collect(),
            classifier: self.classifier.iter().map(&mut f).collect(),
        }
    }

    /// Rebuilds the grouping from a flat sequence in [`Groups::iter`] order.
    pub fn regroup<U>(&self, flat: impl IntoIterator<Item = U>) -> Groups<U> {
        let mut it = flat.into_iter();
        let mut take = |n: usize| -> Vec<U> { it.by_ref().take(n).collect() };
        Groups {
            psi: take(self.psi.len()),
            theta: take(self.theta.len()),
            style: take(self.style.len()),
            domain: take(self.domain.len()),
            decoder: take(self.decoder.len()),
            classifier: take(self.classifier.len()),
        }
    }
}

impl ParamValues {
    /// Fresh leaf variables for one training step.
    pub fn to_vars(&self) -> ParamSets {
        self.map(|t| Var::param(t.clone()))
    }

    pub fn to_constants(&self) -> ParamSets {
        self.map(|t| Var::constant(t.clone()))
    }

    pub fn num_scalars(&self) -> usize {
        self.iter().map(Tensor::len).sum()
    }
}

/// Latent representation of a batch.
#[derive(Clone, Debug)]
pub struct Latents {
    pub z: Var,
    pub s_mu: Var,
    pub s_logvar: Var,
    pub d_mu: Var,
    pub d_logvar: Var,
    pub s: Var,
    pub d: Var,
}

#[derive(Clone, Debug)]
pub struct ModelOutputs {
    pub latents: Latents,
    pub x_hat: Var,
    pub y_hat: Var,
    pub logits: Var,
}

/// `mu + exp(logvar / 2) ⊙ eps`.
pub fn reparameterize(mu: &Var, logvar: &Var, eps: &Tensor) -> Var {
    mu.add(&logvar.scale(0.5).exp().mul(&Var::constant(eps.clone())))
}

pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// The full model. Owns only architecture; see [`ParamValues`] for weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub feature: FeatureNet,
    pub task: TaskNet,
    pub style: CodeEncoder,
    pub domain: CodeEncoder,
    pub decoder: Decoder,
    pub classifier: DomainClassifier,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let slope = config.leaky_slope;
        Ok(Self {
            feature: FeatureNet {
                depth: config.unet_depth,
                width: config.unet_width,
                convs: config.unet_convs,
                z_channels: config.z_channels,
                slope,
            },
            task: TaskNet { z_channels: config.z_channels, width: config.task_width, num_classes: config.num_classes, slope },
            style: CodeEncoder { prefix: "style", width: config.encoder_width, code_dim: config.code_dim, slope },
            domain: CodeEncoder { prefix: "domain", width: config.encoder_width, code_dim: config.code_dim, slope },
            decoder: Decoder {
                z_channels: config.z_channels,
                width: config.decoder_width,
                sites: config.adain_sites,
                code_dim: config.code_dim,
                slope,
            },
            classifier: DomainClassifier { code_dim: config.code_dim, num_domains: config.num_domains },
            config,
        })
    }

    pub fn specs(&self) -> Groups<ParamSpec> {
        Groups {
            psi: self.feature.specs(),
            theta: self.task.specs(),
            style: self.style.specs(),
            domain: self.domain.specs(),
            decoder: self.decoder.specs(),
            classifier: self.classifier.specs(),
        }
    }

    /// Fan-in scaled Gaussian weights, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamValues {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.specs().map(|spec| {
            if spec.fan_in == 0 {
                Tensor::zeros(&spec.shape)
            } else {
                let std = (2.0 / spec.fan_in as f64).sqrt();
                standard_normal(&spec.shape, &mut rng).map(|v| v * std)
            }
        })
    }

    fn check_images(&self, images: &Var) -> Result<()> {
        let s = images.shape();
        let ImageSize { height, width } = self.config.image_size;
        if s.len() != 4 || s[1] != 1 || s[2] != height || s[3] != width {
            return Err(Error::Shape(format!("expected images [B,1,{height},{width}], got {s:?}")));
        }
        Ok(())
    }

    pub fn feature_forward(&self, psi: &[Var], images: &Var) -> Var {
        self.feature.forward(psi, images)
    }

    pub fn task_forward(&self, theta: &[Var], z: &Var) -> Var {
        self.task.forward(theta, z)
    }

    pub fn encode_style(&self, params: &ParamSets, images: &Var) -> (Var, Var) {
        self.style.forward(&params.style, images)
    }

    pub fn encode_domain(&self, params: &ParamSets, images: &Var) -> (Var, Var) {
        self.domain.forward(&params.domain, images)
    }

    pub fn decode(&self, params: &ParamSets, z: &Var, s: &Var, d: &Var) -> Var {
        self.decoder.forward(&params.decoder, z, s, d)
    }

    pub fn classify_domain(&self, params: &ParamSets, d: &Var) -> Var {
        self.classifier.forward(&params.classifier, d)
    }

    /// Full forward pass. `noise` switches on reparameterised sampling of
    /// the codes; without it the codes are their means.
    pub fn forward(&self, params: &ParamSets, images: &Var, noise: Option<&mut ChaCha8Rng>) -> Result<ModelOutputs> {
        self.forward_with(&params.psi, &params.theta, params, images, noise)
    }

    /// Forward pass with explicit (ψ, θ) (for example the inner-loop clones) and
    /// φ taken from `params`.
    pub fn forward_with(
        &self,
        psi: &[Var],
        theta: &[Var],
        params: &ParamSets,
        images: &Var,
        noise: Option<&mut ChaCha8Rng>,
    ) -> Result<ModelOutputs> {
        self.check_images(images)?;
        let z = self.feature_forward(psi, images);
        let (s_mu, s_logvar) = self.encode_style(params, images);
        let (d_mu, d_logvar) = self.encode_domain(params, images);
        let (s, d) = match noise {
            Some(rng) => {
                let eps_s = standard_normal(s_mu.shape(), rng);
                let eps_d = standard_normal(d_mu.shape(), rng);
                (reparameterize(&s_mu, &s_logvar, &eps_s), reparameterize(&d_mu, &d_logvar, &eps_d))
            }
            None => (s_mu.clone(), d_mu.clone()),
        };
        let x_hat = self.decode(params, &z, &s, &d);
        let y_hat = self.task_forward(theta, &z);
        let logits = self.classify_domain(params, &d);
        Ok(ModelOutputs { latents: Latents { z, s_mu, s_logvar, d_mu, d_logvar, s, d }, x_hat, y_hat, logits })
    }

    /// Segmentation-only path `T_θ(F_ψ(X))`.
    pub fn segment(&self, psi: &[Var], theta: &[Var], images: &Var) -> Result<Var> {
        self.check_images(images)?;
        Ok(self.task_forward(theta, &self.feature_forward(psi, images)))
    }
}

/// Per-pixel argmax over the class axis of `[B,m,H,W]` probabilities.
pub fn argmax_masks(probs: &Tensor) -> Vec<Vec<u8>> {
    let [b, m, h, w] = probs.dims4();
    let plane = h * w;
    (0..b)
        .map(|i| {
            (0..plane)
                .map(|p| {
                    let mut best = 0;
                    let mut best_v = f64::NEG_INFINITY;
                    for c in 0..m {
                        let v = probs.data()[(i * m + c) * plane + p];
                        if v > best_v {
                            best_v = v;
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad;

    fn small_config() -> ModelConfig {
        ModelConfig {
            image_size: ImageSize::square(32),
            unet_depth: 2,
            unet_width: 4,
            unet_convs: 1,
            encoder_width: 4,
            decoder_width: 4,
            task_width: 4,
            ..ModelConfig::default()
        }
    }

    fn images(b: usize, n: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Var::constant(Tensor::from_fn(&[b, 1, n, n], |_| rng.random_range(0.0..1.0)))
    }

    #[test]
    fn feature_shapes_follow_input() {
        let model = Model::new(ModelConfig::default()).unwrap();
        let p = model.init_params(0).to_constants();
        let z = model.feature_forward(&p.psi, &images(4, 64, 1));
        assert_eq!(z.shape(), &[4, 8, 64, 64]);
        assert!(z.value().all_finite());
        let (mu, lv) = model.encode_style(&p, &images(4, 64, 1));
        assert_eq!(mu.shape(), &[4, 8]);
        assert_eq!(lv.shape(), &[4, 8]);
    }

    #[test]
    fn rejects_indivisible_sizes() {
        let cfg = ModelConfig { image_size: ImageSize::square(36), ..ModelConfig::default() };
        assert!(matches!(Model::new(cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn identical_rows_give_identical_features() {
        let model = Model::new(small_config()).unwrap();
        let p = model.init_params(3).to_constants();
        let one = images(1, 32, 9);
        let two = Var::concat(&[one.clone(), one.clone()], 0);
        let z = model.feature_forward(&p.psi, &two);
        let half = z.value().len() / 2;
        assert_eq!(&z.value().data()[..half], &z.value().data()[half..]);
    }

    #[test]
    fn logvar_is_clamped() {
        let model = Model::new(small_config()).unwrap();
        let mut params = model.init_params(0);
        // Blow up the logvar head bias.
        let idx = params.style.len() - 1;
        params.style[idx] = Tensor::full(params.style[idx].shape(), 1e3);
        let p = params.to_constants();
        let (_, lv) = model.encode_style(&p, &images(2, 32, 0));
        assert!(lv.value().data().iter().all(|v| v.abs() <= LOGVAR_CLAMP));
    }

    #[test]
    fn classifier_is_single_affine_layer() {
        let model = Model::new(small_config()).unwrap();
        let specs = model.specs().classifier;
        let count: usize = specs.iter().map(|s| s.shape.iter().product::<usize>()).sum();
        assert_eq!(count, 8 * 3 + 3);
        let zero = Groups { classifier: vec![Var::constant(Tensor::zeros(&[8, 3])), Var::constant(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]))], ..model.init_params(0).to_constants() };
        let logits = model.classify_domain(&zero, &Var::constant(Tensor::zeros(&[2, 8])));
        assert_eq!(logits.value().data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn adain_hand_example() {
        let content = Var::constant(Tensor::new(vec![1, 1, 2, 2], vec![0.0, 0.0, 2.0, 2.0]));
        let out = adain(&content, &Var::constant(Tensor::new(vec![1, 1], vec![5.0])), &Var::constant(Tensor::new(vec![1, 1], vec![3.0])));
        let expect = Tensor::new(vec![1, 1, 2, 2], vec![2.0, 2.0, 8.0, 8.0]);
        assert!(out.value().max_abs_diff(&expect) < 1e-8);
    }

    #[test]
    fn adain_constant_channel_is_finite() {
        let content = Var::param(Tensor::full(&[1, 2, 3, 3], 0.7));
        let out = adain(&content, &Var::constant(Tensor::zeros(&[1, 2])), &Var::constant(Tensor::ones(&[1, 2])));
        assert!(out.value().all_finite());
        let g = grad(&out.sum(), std::slice::from_ref(&content), false).remove(0);
        assert!(g.value().all_finite());
    }

    #[test]
    fn task_output_is_a_distribution() {
        let model = Model::new(small_config()).unwrap();
        let p = model.init_params(1).to_constants();
        let y = model.segment(&p.psi, &p.theta, &images(2, 32, 4)).unwrap();
        assert_eq!(y.shape(), &[2, 4, 32, 32]);
        let sums = y.sum_keepdim(&[1]);
        assert!(sums.value().data().iter().all(|s| (s - 1.0).abs() < 1e-6));
        let masks = argmax_masks(y.value());
        assert_eq!(masks.len(), 2);
        assert!(masks[0].iter().all(|&c| c < 4));
    }

    #[test]
    fn eval_codes_are_means_and_train_codes_sample() {
        let model = Model::new(small_config()).unwrap();
        let p = model.init_params(2).to_constants();
        let x = images(2, 32, 5);
        let eval = model.forward(&p, &x, None).unwrap();
        assert_eq!(eval.latents.s.value(), eval.latents.s_mu.value());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let train = model.forward(&p, &x, Some(&mut rng)).unwrap();
        assert_ne!(train.latents.s.value(), train.latents.s_mu.value());
        assert_eq!(eval.x_hat.shape(), &[2, 1, 32, 32]);
    }

    #[test]
    fn changing_codes_leaves_segmentation_untouched() {
        let model = Model::new(small_config()).unwrap();
        let p = model.init_params(2).to_constants();
        let x = images(2, 32, 6);
        let z = model.feature_forward(&p.psi, &x);
        let y = model.task_forward(&p.theta, &z);
        let s0 = Var::constant(Tensor::zeros(&[2, 8]));
        let s1 = Var::constant(Tensor::full(&[2, 8], 1.5));
        let a = model.decode(&p, &z, &s0, &s0);
        let b = model.decode(&p, &z, &s1, &s0);
        assert!(a.value().max_abs_diff(b.value()) > 1e-6);
        assert_eq!(model.task_forward(&p.theta, &z).value(), y.value());
    }
}
