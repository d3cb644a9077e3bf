//! Segmentation, disentanglement and meta-objective losses.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::networks::{standard_normal, ModelOutputs};
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-6;
pub const HSIC_MIN_BANDWIDTH: f64 = 1e-3;
pub const RANK_JITTER: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub rank: f64,
    pub kl: f64,
    pub rec: f64,
    pub cls: f64,
    pub hsic: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rank: 0.1, kl: 0.1, rec: 1.0, cls: 1.0, hsic: 1.0, dice: 5.0 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { rank: 0.0, kl: 0.0, rec: 0.0, cls: 0.0, hsic: 0.0, dice: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.rank, self.kl, self.rec, self.cls, self.hsic, self.dice];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Unweighted term values, their weights, and the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_sum(&self) -> f64 {
        self.terms.iter().map(|(k, v)| self.weights.get(k).copied().unwrap_or(0.0) * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.terms.values().all(|v| v.is_finite())
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }
}

/// A differentiable total together with its breakdown.
#[derive(Clone, Debug)]
pub struct Loss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Accumulates weighted terms; zero-weight terms are logged but kept out of
/// the graph.
#[derive(Default)]
struct Composer {
    total: Option<Var>,
    breakdown: LossBreakdown,
}

impl Composer {
    fn push(&mut self, name: &str, weight: f64, term: &Var) {
        let value = term.item();
        self.breakdown.terms.insert(name.to_owned(), value);
        self.breakdown.weights.insert(name.to_owned(), weight);
        if weight != 0.0 {
            let weighted = term.scale(weight);
            self.total = Some(match self.total.take() {
                Some(t) => t.add(&weighted),
                None => weighted,
            });
        }
    }

    fn extend(&mut self, other: Loss) {
        self.breakdown.terms.extend(other.breakdown.terms);
        self.breakdown.weights.extend(other.breakdown.weights);
        self.total = Some(match self.total.take() {
            Some(t) => t.add(&other.total),
            None => other.total,
        });
    }

    fn finish(mut self) -> Loss {
        let total = self.total.unwrap_or_else(|| Var::scalar(0.0));
        self.breakdown.total = total.item();
        Loss { total, breakdown: self.breakdown }
    }
}

// ---- individual terms ---------------------------------------------------------

/// Soft Dice loss over labeled samples and foreground classes. Masks of
/// unlabeled samples are never touched; with no labeled sample the loss is 0.
pub fn dice_loss(y_hat: &Var, masks: &[Option<Vec<u8>>], labeled: &[bool]) -> Result<Var> {
    let [b, m, h, w] = y_hat.value().dims4();
    if masks.len() != b || labeled.len() != b {
        return Err(Error::Shape(format!("dice: {b} predictions, {} masks, {} flags", masks.len(), labeled.len())));
    }
    if m < 2 {
        return Err(Error::Shape("dice needs at least one foreground class".into()));
    }
    let rows: Vec<usize> = (0..b).filter(|&i| labeled[i]).collect();
    if rows.is_empty() {
        return Ok(Var::scalar(0.0));
    }
    let plane = h * w;
    let mut onehot = vec![0.0; rows.len() * m * plane];
    for (r, &i) in rows.iter().enumerate() {
        let mask = masks[i].as_ref().ok_or_else(|| Error::Shape(format!("labeled sample {i} has no mask")))?;
        if mask.len() != plane {
            return Err(Error::Shape(format!("mask {i} has {} pixels, expected {plane}", mask.len())));
        }
        for (p, &c) in mask.iter().enumerate() {
            let c = c as usize;
            if c >= m {
                return Err(Error::Shape(format!("mask value {c} >= {m} classes")));
            }
            onehot[(r * m + c) * plane + p] = 1.0;
        }
    }
    let probs = if rows.len() == b {
        y_hat.clone()
    } else {
        Var::concat(&rows.iter().map(|&i| y_hat.narrow(0, i, 1)).collect::<Vec<_>>(), 0)
    };
    let target = Var::constant(Tensor::new(vec![rows.len(), m, h, w], onehot));
    let inter = probs.mul(&target).sum_keepdim(&[2, 3]);
    let denom = probs.sum_keepdim(&[2, 3]).add(&target.sum_keepdim(&[2, 3]));
    let dice = inter.scale(2.0).add_scalar(DICE_EPS).div(&denom.add_scalar(DICE_EPS));
    let fg = dice.narrow(1, 1, m - 1);
    Ok(fg.mean().neg().add_scalar(1.0))
}

/// KL(N(mu, exp(logvar)) || N(0, I)), summed over dimensions and averaged
/// over the batch.
pub fn kl_standard_normal(mu: &Var, logvar: &Var) -> Var {
    let b = mu.shape()[0] as f64;
    mu.square().add(&logvar.exp()).sub(logvar).add_scalar(-1.0).sum().scale(0.5 / b)
}

/// Pairwise squared Euclidean distances between the rows of `[n, p]`.
fn pairwise_sq_dists(x: &Var) -> Var {
    let (n, p) = (x.shape()[0], x.shape()[1]);
    let diff = x.reshape(&[n, 1, p]).sub(&x.reshape(&[1, n, p]));
    diff.square().sum_keepdim(&[2]).reshape(&[n, n])
}

/// Median of the off-diagonal pairwise distances as a differentiable `[1,1]`
/// expression of the pair(s) that realise it, or the floor constant when the
/// median falls below it.
fn median_bandwidth(sq: &Var) -> Var {
    let n = sq.shape()[0];
    let v = sq.value();
    let mut pairs: Vec<(f64, usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| (v.data()[i * n + j].max(0.0), i, j))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let floor = || Var::constant(Tensor::full(&[1, 1], HSIC_MIN_BANDWIDTH));
    if pairs.is_empty() {
        return floor();
    }
    let mid = pairs.len() / 2;
    let picks = if pairs.len().is_multiple_of(2) { &pairs[mid - 1..=mid] } else { &pairs[mid..=mid] };
    let dist = |&(_, i, j): &(f64, usize, usize)| sq.narrow(0, i, 1).narrow(1, j, 1).sqrt();
    let median = if picks.len() == 2 { dist(&picks[0]).add(&dist(&picks[1])).scale(0.5) } else { dist(&picks[0]) };
    if median.item() < HSIC_MIN_BANDWIDTH {
        floor()
    } else {
        median
    }
}

/// RBF Gram matrix with median-heuristic bandwidth.
pub fn rbf_gram(x: &Var) -> Var {
    let sq = pairwise_sq_dists(x);
    let sigma = median_bandwidth(&sq);
    sq.div(&sigma.square().scale(2.0)).neg().exp()
}

/// Biased empirical HSIC `trace(K H L H) / (n-1)^2` with RBF kernels.
pub fn hsic(a: &Var, b: &Var) -> Result<Var> {
    let n = a.shape()[0];
    if a.shape().len() != 2 || b.shape().len() != 2 || b.shape()[0] != n {
        return Err(Error::Shape(format!("hsic expects [n,p] and [n,q], got {:?} and {:?}", a.shape(), b.shape())));
    }
    if n < 4 {
        return Err(Error::Shape(format!("hsic needs at least 4 samples, got {n}")));
    }
    let k = rbf_gram(a);
    let l = rbf_gram(b);
    // H K H by double centering.
    let kc = k.sub(&k.mean_keepdim(&[0])).sub(&k.mean_keepdim(&[1])).add(&k.mean());
    let scale = 1.0 / ((n - 1) * (n - 1)) as f64;
    Ok(kc.mul(&l).sum().scale(scale))
}

/// Mean absolute error.
pub fn l1_reconstruction(x: &Var, x_hat: &Var) -> Var {
    x.sub(x_hat).abs().mean()
}

/// Mean softmax cross-entropy against one-hot targets.
pub fn classification_loss(logits: &Var, onehot: &Var) -> Var {
    let b = logits.shape()[0] as f64;
    logits.log_softmax(1).mul(onehot).sum().scale(-1.0 / b)
}

/// The `index`-th largest singular value (0-based) of a `[C, N]` matrix.
///
/// The derivative is `u vᵀ` for the corresponding singular pair, which is
/// exact where that singular value is simple. Singular vectors are treated
/// as constants when differentiating twice.
pub fn singular_value(mat: &Var, index: usize, jitter: Option<&mut dyn rand::RngCore>) -> Result<Var> {
    let shape = mat.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("singular_value expects a matrix, got {shape:?}")));
    }
    let (c, n) = (shape[0], shape[1]);
    if index >= c.min(n) {
        return Err(Error::Shape(format!("no singular value #{} for a {c}x{n} matrix", index + 1)));
    }
    let mut z = mat.value().clone();
    if let Some(rng) = jitter {
        let noise = standard_normal(&[c, n], &mut RngWrap(rng));
        z = z.zip_map(&noise, |a, e| a + RANK_JITTER * e);
    }
    let gram = Tensor::matmul(&z, &z, false, true);
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(c, c, gram.data()));
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let col = order[index];
    let u: Vec<f64> = (0..c).map(|r| eig.eigenvectors[(r, col)]).collect();
    // w = zᵀ u, sigma = |w|, v = w / sigma.
    let w = Tensor::matmul(&z, &Tensor::new(vec![c, 1], u.clone()), true, false);
    let sigma = w.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let jac = if sigma > 0.0 {
        Tensor::from_fn(&[c, n], |i| u[i / n] * w.data()[i % n] / sigma)
    } else {
        Tensor::zeros(&[c, n])
    };
    Ok(mat.custom_scalar(sigma, jac))
}

/// Adapts `&mut dyn RngCore` to a sized `Rng`.
struct RngWrap<'a>(&'a mut dyn rand::RngCore);

impl rand::RngCore for RngWrap<'_> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

/// Flattens per-domain features `[n_k, C, H, W]` into `[C, Σ n_k·H·W]`.
pub fn stack_features(z_list: &[Var]) -> Result<Var> {
    let c = z_list.first().map(|z| z.shape()[1]).ok_or_else(|| Error::Shape("empty feature list".into()))?;
    let flat = z_list
        .iter()
        .map(|z| {
            let s = z.shape();
            if s.len() != 4 || s[1] != c {
                return Err(Error::Shape(format!("feature {s:?} does not have {c} channels")));
            }
            Ok(z.permute(&[1, 0, 2, 3]).reshape(&[c, s[0] * s[2] * s[3]]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(if flat.len() == 1 { flat[0].clone() } else { Var::concat(&flat, 1) })
}

/// σ_{m+1} of the stacked features of at least two domains.
pub fn rank_loss(z_list: &[Var], m: usize, jitter: Option<&mut dyn rand::RngCore>) -> Result<Var> {
    if z_list.len() < 2 {
        return Err(Error::Shape(format!("rank loss needs features from >= 2 domains, got {}", z_list.len())));
    }
    let mat = stack_features(z_list)?;
    let c = mat.shape()[0];
    if c <= m {
        return Err(Error::Shape(format!("rank loss: {c} channels leave no singular value #{}", m + 1)));
    }
    singular_value(&mat, m, jitter)
}

/// Splits a batch of features by domain, preserving first-seen order.
pub fn features_by_domain(z: &Var, domain_ids: &[usize]) -> Vec<Var> {
    let mut order: Vec<usize> = Vec::new();
    for &d in domain_ids {
        if !order.contains(&d) {
            order.push(d);
        }
    }
    order
        .iter()
        .map(|&d| {
            let rows: Vec<Var> =
                domain_ids.iter().enumerate().filter(|(_, &x)| x == d).map(|(i, _)| z.narrow(0, i, 1)).collect();
            if rows.len() == 1 { rows[0].clone() } else { Var::concat(&rows, 0) }
        })
        .collect()
}

// ---- composites ----------------------------------------------------------------

/// The disentanglement objective: rank, KL (s and d), reconstruction, HSIC
/// and domain classification. Never reads masks.
pub fn l_dt(
    out: &ModelOutputs,
    batch: &Batch,
    weights: &LossWeights,
    num_classes: usize,
    jitter: Option<&mut dyn rand::RngCore>,
) -> Result<Loss> {
    if batch.distinct_domains() < 2 {
        return Err(Error::Episode("the disentanglement loss needs a batch spanning >= 2 domains".into()));
    }
    let lat = &out.latents;
    let images = Var::constant(batch.images.clone());
    let onehot = Var::constant(batch.domain_onehot.clone());
    let mut c = Composer::default();
    let rank = rank_loss(&features_by_domain(&lat.z, &batch.domain_ids), num_classes, jitter)?;
    c.push("rank", weights.rank, &rank);
    c.push("kl_s", weights.kl, &kl_standard_normal(&lat.s_mu, &lat.s_logvar));
    c.push("kl_d", weights.kl, &kl_standard_normal(&lat.d_mu, &lat.d_logvar));
    c.push("rec", weights.rec, &l1_reconstruction(&images, &out.x_hat));
    c.push("hsic", weights.hsic, &hsic(&lat.s, &lat.d)?);
    c.push("cls", weights.cls, &classification_loss(&out.logits, &onehot));
    Ok(c.finish())
}

/// `λ_Dice·L_Dice + L_DT` on a meta-train batch.
pub fn meta_train_loss(
    out: &ModelOutputs,
    batch: &Batch,
    weights: &LossWeights,
    num_classes: usize,
    jitter: Option<&mut dyn rand::RngCore>,
) -> Result<Loss> {
    let mut c = Composer::default();
    c.push("dice", weights.dice, &dice_loss(&out.y_hat, &batch.masks, &batch.labeled)?);
    c.extend(l_dt(out, batch, weights, num_classes, jitter)?);
    Ok(c.finish())
}

/// `λ_Dice·L_Dice + λ_rec·L_rec + λ_cls·L_cls` on a meta-test batch.
pub fn meta_test_loss(out: &ModelOutputs, batch: &Batch, weights: &LossWeights) -> Result<Loss> {
    let images = Var::constant(batch.images.clone());
    let onehot = Var::constant(batch.domain_onehot.clone());
    let mut c = Composer::default();
    c.push("dice", weights.dice, &dice_loss(&out.y_hat, &batch.masks, &batch.labeled)?);
    c.push("rec", weights.rec, &l1_reconstruction(&images, &out.x_hat));
    c.push("cls", weights.cls, &classification_loss(&out.logits, &onehot));
    Ok(c.finish())
}

/// Supervised segmentation objective of the baseline.
pub fn supervised_loss(y_hat: &Var, batch: &Batch, weights: &LossWeights) -> Result<Loss> {
    let mut c = Composer::default();
    c.push("dice", weights.dice, &dice_loss(y_hat, &batch.masks, &batch.labeled)?);
    Ok(c.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(shape: &[usize], data: Vec<f64>) -> Var {
        Var::constant(Tensor::new(shape.to_vec(), data))
    }

    #[test]
    fn dice_hand_example() {
        // 2x2, one foreground class, p = 0.5 everywhere, GT all foreground.
        let probs = c(&[1, 2, 2, 2], vec![0.5; 8]);
        let loss = dice_loss(&probs, &[Some(vec![1; 4])], &[true]).unwrap();
        let expect = 1.0 - (4.0 + DICE_EPS) / (6.0 + DICE_EPS);
        assert!((loss.item() - expect).abs() < 1e-12);
        assert!((loss.item() - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn dice_perfect_and_unlabeled() {
        let mask = vec![0u8, 1, 1, 0];
        let probs = c(&[1, 2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        assert!(dice_loss(&probs, &[Some(mask)], &[true]).unwrap().item().abs() < 1e-6);
        assert_eq!(dice_loss(&probs, &[None], &[false]).unwrap().item(), 0.0);
    }

    #[test]
    fn kl_hand_values() {
        let zero = c(&[1, 8], vec![0.0; 8]);
        assert_eq!(kl_standard_normal(&zero, &zero).item(), 0.0);
        let one = c(&[1, 8], vec![1.0; 8]);
        assert!((kl_standard_normal(&one, &zero).item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn hsic_of_constant_is_zero() {
        let a = c(&[6, 3], vec![0.25; 18]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Var::constant(standard_normal(&[6, 2], &mut rng));
        assert!(hsic(&a, &b).unwrap().item().abs() < 1e-9);
        assert!(hsic(&a.narrow(0, 0, 3), &b.narrow(0, 0, 3)).is_err());
    }

    #[test]
    fn l1_and_ce_hand_values() {
        let x = c(&[1, 1, 2, 2], vec![0.0; 4]);
        let y = c(&[1, 1, 2, 2], vec![0.5; 4]);
        assert_eq!(l1_reconstruction(&x, &y).item(), 0.5);
        let logits = c(&[2, 3], vec![0.3; 6]);
        let onehot = c(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!((classification_loss(&logits, &onehot).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rank_loss_rejects_too_few_channels() {
        let z = c(&[1, 2, 2, 2], vec![1.0; 8]);
        assert!(rank_loss(&[z.clone(), z.clone()], 2, None).is_err());
        assert!(rank_loss(&[z], 1, None).is_err());
    }

    #[test]
    fn features_split_by_domain() {
        let z = Var::constant(Tensor::from_fn(&[3, 1, 1, 1], |i| i as f64));
        let parts = features_by_domain(&z, &[5, 2, 5]);
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].value().data(), &[0.0, 2.0]);
        assert_eq!(parts[1].value().data(), &[1.0]);
    }
}
