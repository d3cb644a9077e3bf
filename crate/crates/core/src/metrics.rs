//! Segmentation quality (Dice %, Hausdorff distance) and disentanglement
//! (distance correlation) metrics.

use serde::{Deserialize, Serialize};

use crate::data::ImageSize;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dice overlap of one class in percent. Both sets empty counts as perfect
/// agreement; exactly one empty set scores 0.
pub fn dice_score(pred: &[u8], gt: &[u8], class_id: u8) -> f64 {
    assert_eq!(pred.len(), gt.len(), "dice_score: masks differ in size");
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (ia, ib) = (a == class_id, b == class_id);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return 100.0;
    }
    100.0 * 2.0 * both as f64 / (p + g) as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HausdorffVariant {
    /// Max of the two directed mean nearest-neighbour distances.
    #[default]
    Modified,
    /// Max of the two directed max nearest-neighbour distances.
    Classical,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HausdorffResult {
    pub distance: f64,
    /// Exactly one of the sets was empty; `distance` is the image diagonal.
    pub empty_penalty: bool,
}

fn directed(from: &[(f64, f64)], to: &[(f64, f64)], variant: HausdorffVariant) -> f64 {
    let nearest = from.iter().map(|&(ay, ax)| {
        to.iter().map(|&(by, bx)| (ay - by).powi(2) + (ax - bx).powi(2)).fold(f64::INFINITY, f64::min).sqrt()
    });
    match variant {
        HausdorffVariant::Modified => nearest.sum::<f64>() / from.len() as f64,
        HausdorffVariant::Classical => nearest.fold(0.0, f64::max),
    }
}

/// Hausdorff-type distance between two nonempty point sets.
pub fn point_set_distance(a: &[(f64, f64)], b: &[(f64, f64)], variant: HausdorffVariant) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "point sets must be nonempty");
    directed(a, b, variant).max(directed(b, a, variant))
}

fn class_points(mask: &[u8], size: ImageSize, class_id: u8) -> Vec<(f64, f64)> {
    mask.iter()
        .enumerate()
        .filter(|(_, &c)| c == class_id)
        .map(|(i, _)| ((i / size.width) as f64, (i % size.width) as f64))
        .collect()
}

/// Distance in pixels between the `class_id` pixels of two masks.
pub fn hausdorff(pred: &[u8], gt: &[u8], size: ImageSize, class_id: u8, variant: HausdorffVariant) -> HausdorffResult {
    let p = class_points(pred, size, class_id);
    let g = class_points(gt, size, class_id);
    match (p.is_empty(), g.is_empty()) {
        (true, true) => HausdorffResult { distance: 0.0, empty_penalty: false },
        (true, false) | (false, true) => HausdorffResult {
            distance: ((size.height as f64).powi(2) + (size.width as f64).powi(2)).sqrt(),
            empty_penalty: true,
        },
        (false, false) => HausdorffResult { distance: point_set_distance(&p, &g, variant), empty_penalty: false },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcResult {
    pub value: f64,
    /// One input had zero distance variance; `value` is 0 by convention.
    pub degenerate: bool,
}

fn centered_distances(x: &[f64], n: usize, dim: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        let xi = &x[i * dim..(i + 1) * dim];
        for j in i + 1..n {
            let xj = &x[j * dim..(j + 1) * dim];
            let v = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    let row: Vec<f64> = (0..n).map(|i| d[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let grand = row.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] += grand - row[i] - row[j];
        }
    }
    d
}

/// Sample distance correlation between the rows of `a [n,p]` and `b [n,q]`.
pub fn distance_correlation(a: &Tensor, b: &Tensor) -> Result<DcResult> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(Error::Shape(format!("distance correlation needs [n,p] and [n,q], got {:?} and {:?}", a.shape(), b.shape())));
    }
    let n = a.shape()[0];
    if n < 4 {
        return Err(Error::Shape(format!("distance correlation needs n >= 4, got {n}")));
    }
    let da = centered_distances(a.data(), n, a.shape()[1]);
    let db = centered_distances(b.data(), n, b.shape()[1]);
    let nn = (n * n) as f64;
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / nn;
    let dcov2 = dot(&da, &db).max(0.0);
    let (va, vb) = (dot(&da, &da), dot(&db, &db));
    // Below this the variance is rounding noise from a constant input.
    let tiny = 1e-24;
    if va <= tiny || vb <= tiny {
        return Ok(DcResult { value: 0.0, degenerate: true });
    }
    let value = (dcov2 / (va * vb).sqrt()).sqrt().clamp(0.0, 1.0);
    Ok(DcResult { value, degenerate: false })
}

/// Spatial side length Z is average-pooled to before flattening for DC.
pub const DC_POOLED_SIDE: usize = 8;

/// Average-pools `z [n,C,H,W]` to 8x8 and flattens it to `[n, C*64]`.
pub fn pool_features(z: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = z.dims4();
    if h % DC_POOLED_SIDE != 0 || w % DC_POOLED_SIDE != 0 || h / DC_POOLED_SIDE != w / DC_POOLED_SIDE {
        return Err(Error::Shape(format!("cannot pool {h}x{w} features to {DC_POOLED_SIDE}x{DC_POOLED_SIDE}")));
    }
    let f = h / DC_POOLED_SIDE;
    let pooled = z.sum_pool(f).map(|v| v / (f * f) as f64);
    Ok(pooled.reshape(&[n, c * DC_POOLED_SIDE * DC_POOLED_SIDE]))
}

/// DC between pooled features `z [n,C,H,W]` and the concatenated codes `[s, d]`.
pub fn dc_between_latents(z: &Tensor, s: &Tensor, d: &Tensor) -> Result<DcResult> {
    distance_correlation(&pool_features(z)?, &Tensor::concat(&[s, d], 1))
}

/// Order-independent mean: sorting first fixes the summation order.
pub fn stable_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    /// Foreground classes `1..m`, each averaged over samples.
    pub per_class_dice: Vec<f64>,
    pub mean_dice: f64,
    pub per_class_hausdorff: Vec<f64>,
    pub mean_hausdorff: f64,
    /// (sample, class) pairs scored with the empty-set penalty.
    pub hausdorff_penalties: usize,
}

pub fn segmentation_metrics(
    preds: &[Vec<u8>],
    gts: &[Vec<u8>],
    size: ImageSize,
    num_classes: usize,
    variant: HausdorffVariant,
) -> Result<SegmentationMetrics> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Shape(format!("{} predictions vs {} ground truths", preds.len(), gts.len())));
    }
    let mut per_class_dice = Vec::new();
    let mut per_class_hausdorff = Vec::new();
    let mut penalties = 0;
    for class in 1..num_classes as u8 {
        let mut dice = Vec::with_capacity(preds.len());
        let mut hd = Vec::with_capacity(preds.len());
        for (p, g) in preds.iter().zip(gts) {
            if p.len() != size.pixels() || g.len() != size.pixels() {
                return Err(Error::Shape("mask size does not match image size".into()));
            }
            dice.push(dice_score(p, g, class));
            let h = hausdorff(p, g, size, class, variant);
            penalties += h.empty_penalty as usize;
            hd.push(h.distance);
        }
        per_class_dice.push(stable_mean(&dice));
        per_class_hausdorff.push(stable_mean(&hd));
    }
    Ok(SegmentationMetrics {
        mean_dice: stable_mean(&per_class_dice),
        mean_hausdorff: stable_mean(&per_class_hausdorff),
        per_class_dice,
        per_class_hausdorff,
        hausdorff_penalties: penalties,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub domain_id: usize,
    pub sample_count: usize,
    #[serde(flatten)]
    pub segmentation: SegmentationMetrics,
    pub dc: f64,
    pub dc_degenerate: bool,
}

impl MetricsReport {
    pub fn mean_dice(&self) -> f64 {
        self.segmentation.mean_dice
    }

    pub fn mean_hausdorff(&self) -> f64 {
        self.segmentation.mean_hausdorff
    }
}
