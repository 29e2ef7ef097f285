//! Cascade-of-regressors landmark alignment.
//!
//! Each stage regresses a shape update from pixel intensities sampled around
//! the current estimate and adds a shrunken copy of it. Stages are ridge
//! regressors by default; other regressor families plug in through
//! [`StageFitter`].

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde_json::{Map, Value};

use crate::container::{self, RawContainer};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;

/// Landmark coordinates `(x1, y1, …, xp, yp)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeVector(Vec<f64>);

impl ShapeVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() || !coords.len().is_multiple_of(2) {
            return Err(Error::Validation(format!(
                "a shape vector needs a positive even length, got {}",
                coords.len()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("shape vector has non-finite entries".into()));
        }
        Ok(ShapeVector(coords))
    }

    pub fn landmarks(&self) -> usize {
        self.0.len() / 2
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn point(&self, l: usize) -> (f64, f64) {
        (self.0[2 * l], self.0[2 * l + 1])
    }

    pub fn sub(&self, other: &ShapeVector) -> ShapeVector {
        ShapeVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn add_scaled(&mut self, update: &[f64], nu: f64) {
        for (v, u) in self.0.iter_mut().zip(update) {
            *v += nu * u;
        }
    }
}

/// Single-channel image, row-major, intensities in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::dim(
                "GrayImage::new",
                format!("{width}×{height} image needs {} values, got {}", width * height, data.len()),
            ));
        }
        Ok(GrayImage { width, height, data })
    }

    fn pixel(&self, x: isize, y: isize) -> f64 {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            0.0
        } else {
            self.data[y as usize * self.width + x as usize]
        }
    }

    /// Bilinear interpolation; pixels outside the image read as 0.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        if !(x.is_finite() && y.is_finite()) {
            return 0.0;
        }
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (xi, yi) = (x0 as isize, y0 as isize);
        self.pixel(xi, yi) * (1.0 - fx) * (1.0 - fy)
            + self.pixel(xi + 1, yi) * fx * (1.0 - fy)
            + self.pixel(xi, yi + 1) * (1.0 - fx) * fy
            + self.pixel(xi + 1, yi + 1) * fx * fy
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub image: GrayImage,
    pub shape: ShapeVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTriplet {
    /// Index of the image (and its ground truth) this triplet refines.
    pub image: usize,
    pub estimate: ShapeVector,
    /// Ground truth minus the current estimate.
    pub delta: ShapeVector,
}

/// `M` initial shapes per image, drawn without replacement from the other
/// images' ground truths, giving `n·M` triplets.
pub fn make_triplets(images: &[AnnotatedImage], m: usize, seed: u64) -> Result<Vec<TrainingTriplet>> {
    let n = images.len();
    if n < 2 {
        return Err(Error::Contract(format!("triplets need at least 2 images, got {n}")));
    }
    if m == 0 || m > n - 1 {
        return Err(Error::Contract(format!(
            "cannot draw {m} initial shapes without replacement from {} other images",
            n - 1
        )));
    }
    let p = images[0].shape.landmarks();
    if let Some(i) = images.iter().position(|a| a.shape.landmarks() != p) {
        return Err(Error::Validation(format!(
            "image {i} has {} landmarks, image 0 has {p}",
            images[i].shape.landmarks()
        )));
    }
    let mut rng = substream(seed, "cascade/triplets");
    let mut out = Vec::with_capacity(n * m);
    for (i, img) in images.iter().enumerate() {
        for j in sample(&mut rng, n - 1, m).into_iter() {
            let src = if j >= i { j + 1 } else { j };
            let estimate = images[src].shape.clone();
            out.push(TrainingTriplet {
                image: i,
                delta: img.shape.sub(&estimate),
                estimate,
            });
        }
    }
    Ok(out)
}

/// Ring of `count` offsets at `radius` pixels around every landmark.
pub fn ring_offsets(count: usize, radius: f64) -> Vec<(f64, f64)> {
    (0..count)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / count as f64;
            (radius * a.cos(), radius * a.sin())
        })
        .collect()
}

/// Intensities at every landmark-relative offset, landmark-major.
pub fn shape_features(image: &GrayImage, shape: &ShapeVector, offsets: &[(f64, f64)]) -> Vec<f64> {
    let mut out = Vec::with_capacity(shape.landmarks() * offsets.len());
    for l in 0..shape.landmarks() {
        let (x, y) = shape.point(l);
        for (dx, dy) in offsets {
            out.push(image.sample(x + dx, y + dy));
        }
    }
    out
}

/// One stage's map from sampled features to a shape update.
pub trait StageRegressor {
    fn predict(&self, features: &[f64]) -> Vec<f64>;
}

pub trait StageFitter {
    type Regressor: StageRegressor;
    fn fit(&self, features: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Self::Regressor>;
}

/// Affine map `y = b + xᵀW`.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeStage {
    /// features × outputs
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl StageRegressor for RidgeStage {
    fn predict(&self, features: &[f64]) -> Vec<f64> {
        let x = DVector::from_column_slice(features);
        (self.weight.tr_mul(&x) + &self.bias).as_slice().to_vec()
    }
}

/// Ridge regression on centred data, so the intercept is not penalized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RidgeFitter {
    pub lambda: f64,
}

impl Default for RidgeFitter {
    fn default() -> Self {
        RidgeFitter { lambda: 1e-3 }
    }
}

impl StageFitter for RidgeFitter {
    type Regressor = RidgeStage;

    fn fit(&self, features: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<RidgeStage> {
        let n = features.len();
        if n == 0 || n != targets.len() {
            return Err(Error::dim(
                "ridge fit",
                format!("{n} feature rows vs {} target rows", targets.len()),
            ));
        }
        let (d, k) = (features[0].len(), targets[0].len());
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let y = DMatrix::from_fn(n, k, |i, j| targets[i][j]);
        let mx = x.row_mean();
        let my = y.row_mean();
        let xc = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mx[j]);
        let yc = DMatrix::from_fn(n, k, |i, j| y[(i, j)] - my[j]);
        let mut gram = xc.tr_mul(&xc);
        for j in 0..d {
            gram[(j, j)] += self.lambda;
        }
        let rhs = xc.tr_mul(&yc);
        let weight = gram
            .cholesky()
            .map(|c| c.solve(&rhs))
            .ok_or_else(|| Error::Numerical(format!("ridge normal equations are singular (λ = {})", self.lambda)))?;
        let bias = DVector::from_fn(k, |j, _| my[j] - (0..d).map(|i| mx[i] * weight[(i, j)]).sum::<f64>());
        Ok(RidgeStage { weight, bias })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeModel<R = RidgeStage> {
    pub stages: Vec<R>,
    pub offsets: Vec<(f64, f64)>,
    pub nu: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CascadeConfig {
    pub stages: usize,
    pub nu: f64,
    pub offsets: usize,
    pub radius: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            stages: 40,
            nu: 0.1,
            offsets: 8,
            radius: 5.0,
        }
    }
}

/// A fitted cascade plus the mean triplet residual before the first stage
/// and after every stage.
#[derive(Clone, Debug)]
pub struct CascadeFit<R = RidgeStage> {
    pub model: CascadeModel<R>,
    pub residuals: Vec<f64>,
    pub triplets: Vec<TrainingTriplet>,
}

pub fn mean_residual(triplets: &[TrainingTriplet]) -> f64 {
    triplets.iter().map(|t| t.delta.norm()).sum::<f64>() / triplets.len().max(1) as f64
}

pub fn fit_cascade(
    triplets: Vec<TrainingTriplet>,
    images: &[AnnotatedImage],
    config: &CascadeConfig,
    lambda: f64,
) -> Result<CascadeFit> {
    fit_cascade_with(triplets, images, config, &RidgeFitter { lambda })
}

pub fn fit_cascade_with<F: StageFitter>(
    mut triplets: Vec<TrainingTriplet>,
    images: &[AnnotatedImage],
    config: &CascadeConfig,
    fitter: &F,
) -> Result<CascadeFit<F::Regressor>> {
    if config.stages == 0 {
        return Err(Error::Config("a cascade needs at least one stage".into()));
    }
    if triplets.is_empty() {
        return Err(Error::Contract("no training triplets".into()));
    }
    if !(config.nu > 0.0 && config.nu <= 1.0) {
        return Err(Error::Config(format!("shrinkage must lie in (0, 1], got {}", config.nu)));
    }
    if let Some(t) = triplets.iter().find(|t| t.image >= images.len()) {
        return Err(Error::Validation(format!("triplet refers to missing image {}", t.image)));
    }
    let offsets = ring_offsets(config.offsets, config.radius);
    let mut residuals = vec![mean_residual(&triplets)];
    let mut stages = Vec::with_capacity(config.stages);
    for _ in 0..config.stages {
        let features: Vec<Vec<f64>> = triplets
            .iter()
            .map(|t| shape_features(&images[t.image].image, &t.estimate, &offsets))
            .collect();
        let targets: Vec<Vec<f64>> = triplets.iter().map(|t| t.delta.0.clone()).collect();
        let stage = fitter.fit(&features, &targets)?;
        for (t, f) in triplets.iter_mut().zip(&features) {
            t.estimate.add_scaled(&stage.predict(f), config.nu);
            t.delta = images[t.image].shape.sub(&t.estimate);
        }
        residuals.push(mean_residual(&triplets));
        stages.push(stage);
    }
    Ok(CascadeFit {
        model: CascadeModel {
            stages,
            offsets,
            nu: config.nu,
        },
        residuals,
        triplets,
    })
}

impl<R: StageRegressor> CascadeModel<R> {
    /// Runs stages `range` starting from `shape`.
    pub fn apply_stages(&self, image: &GrayImage, mut shape: ShapeVector, range: std::ops::Range<usize>) -> ShapeVector {
        for stage in &self.stages[range] {
            let f = shape_features(image, &shape, &self.offsets);
            shape.add_scaled(&stage.predict(&f), self.nu);
        }
        shape
    }

    /// The initial shape is clamped into the image before the first stage.
    pub fn predict(&self, image: &GrayImage, initial: &ShapeVector) -> ShapeVector {
        let mut shape = initial.clone();
        for l in 0..shape.landmarks() {
            shape.0[2 * l] = shape.0[2 * l].clamp(0.0, (image.width - 1) as f64);
            shape.0[2 * l + 1] = shape.0[2 * l + 1].clamp(0.0, (image.height - 1) as f64);
        }
        self.apply_stages(image, shape, 0..self.stages.len())
    }
}

pub fn cascade_predict<R: StageRegressor>(model: &CascadeModel<R>, image: &GrayImage, initial: &ShapeVector) -> ShapeVector {
    model.predict(image, initial)
}

const KIND: &str = "cascade";

impl CascadeModel<RidgeStage> {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut meta = Map::new();
        meta.insert("kind".into(), Value::from(KIND));
        meta.insert("stages".into(), Value::from(self.stages.len()));
        meta.insert("nu".into(), Value::from(self.nu));
        let offsets = Tensor::new(
            &[self.offsets.len(), 2],
            self.offsets.iter().flat_map(|&(x, y)| [x, y]).collect(),
        )?;
        let mut tensors = vec![("offsets".to_string(), offsets)];
        for (t, s) in self.stages.iter().enumerate() {
            let (d, k) = s.weight.shape();
            // nalgebra is column-major; store row-major like every other tensor.
            let w = Tensor::from_fn(&[d, k], |i| s.weight[(i / k, i % k)]);
            tensors.push((format!("stage{t}.weight"), w));
            tensors.push((format!("stage{t}.bias"), Tensor::vector(s.bias.as_slice().to_vec())));
        }
        container::encode(meta, tensors.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_atomic(path, &self.encode()?)
    }

    pub fn decode(bytes: Vec<u8>) -> Result<Self> {
        let raw = RawContainer::parse(bytes)?;
        if raw.meta.get("kind").and_then(Value::as_str) != Some(KIND) {
            return Err(Error::Format("not a cascade container".into()));
        }
        let count = raw
            .meta
            .get("stages")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Format("cascade has no stage count".into()))? as usize;
        let nu = raw
            .meta
            .get("nu")
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::Format("cascade has no shrinkage".into()))?;
        let (_, mut ts) = raw.into_tensors()?;
        let take = |ts: &mut indexmap::IndexMap<String, Tensor>, name: &str| {
            ts.shift_remove(name)
                .ok_or_else(|| Error::Format(format!("cascade is missing tensor {name}")))
        };
        let off = take(&mut ts, "offsets")?;
        if off.rank() != 2 || off.shape()[1] != 2 {
            return Err(Error::Format(format!("offsets have shape {:?}", off.shape())));
        }
        let offsets = off.data().chunks_exact(2).map(|c| (c[0], c[1])).collect::<Vec<_>>();
        let mut stages = Vec::with_capacity(count);
        for t in 0..count {
            let w = take(&mut ts, &format!("stage{t}.weight"))?;
            let b = take(&mut ts, &format!("stage{t}.bias"))?;
            if w.rank() != 2 || w.shape()[0] != offsets.len() * (w.shape()[1] / 2) || b.shape() != [w.shape()[1]] {
                return Err(Error::Format(format!(
                    "stage {t} weight {:?} and bias {:?} do not fit {} offsets",
                    w.shape(),
                    b.shape(),
                    offsets.len()
                )));
            }
            let (d, k) = (w.shape()[0], w.shape()[1]);
            stages.push(RidgeStage {
                weight: DMatrix::from_row_slice(d, k, w.data()),
                bias: DVector::from_column_slice(b.data()),
            });
        }
        Ok(CascadeModel { stages, offsets, nu })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(bytes)
    }
}

/// Procedural "faces": a fixed template of `landmarks` points under a random
/// similarity transform, each landmark marked by a Gaussian intensity blob of
/// its own brightness, plus pixel noise.
pub fn synth_shape_corpus(count: usize, landmarks: usize, size: usize, seed: u64) -> Result<Vec<AnnotatedImage>> {
    if !(6..=10).contains(&landmarks) {
        return Err(Error::Config(format!("synthetic faces use 6 to 10 landmarks, got {landmarks}")));
    }
    if size < 32 {
        return Err(Error::Config(format!("synthetic face images need at least 32 pixels, got {size}")));
    }
    let mut rng = substream(seed, "cascade/corpus");
    let half = size as f64 / 2.0;
    let template: Vec<(f64, f64)> = (0..landmarks)
        .map(|l| {
            let a = 2.0 * PI * l as f64 / landmarks as f64;
            let r = if l % 2 == 0 { 0.45 } else { 0.3 } * half;
            (r * a.cos(), r * a.sin())
        })
        .collect();
    let brightness: Vec<f64> = (0..landmarks).map(|l| 0.5 + 0.5 * l as f64 / landmarks as f64).collect();
    let sigma = size as f64 / 16.0;
    let noise = Normal::new(0.0, 0.02).expect("valid noise");
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let angle: f64 = rng.gen_range(-0.15..0.15);
        let scale: f64 = rng.gen_range(0.9..1.1);
        let tx: f64 = rng.gen_range(-0.08..0.08) * size as f64;
        let ty: f64 = rng.gen_range(-0.08..0.08) * size as f64;
        let (c, s) = (angle.cos() * scale, angle.sin() * scale);
        let pts: Vec<(f64, f64)> = template
            .iter()
            .map(|&(x, y)| (half + tx + c * x - s * y, half + ty + s * x + c * y))
            .collect();
        let mut data = vec![0.0; size * size];
        for (py, row) in data.chunks_exact_mut(size).enumerate() {
            for (px, v) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (&(x, y), b) in pts.iter().zip(&brightness) {
                    let d2 = (px as f64 - x).powi(2) + (py as f64 - y).powi(2);
                    acc += b * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                *v = (acc + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        out.push(AnnotatedImage {
            image: GrayImage::new(size, size, data)?,
            shape: ShapeVector::new(pts.iter().flat_map(|&(x, y)| [x, y]).collect())?,
        });
    }
    Ok(out)
}

/// Coordinate-wise mean of the ground-truth shapes.
pub fn mean_shape(images: &[AnnotatedImage]) -> Result<ShapeVector> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("mean shape of no images".into()))?;
    let mut acc = vec![0.0; first.shape.0.len()];
    for a in images {
        for (s, v) in acc.iter_mut().zip(&a.shape.0) {
            *s += v;
        }
    }
    let n = images.len() as f64;
    ShapeVector::new(acc.into_iter().map(|v| v / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Vec<AnnotatedImage> {
        synth_shape_corpus(12, 6, 48, 3).unwrap()
    }

    #[test]
    fn triplet_count_and_exclusion() {
        let imgs = corpus();
        let trip = make_triplets(&imgs[..3], 2, 1).unwrap();
        assert_eq!(trip.len(), 6);
        for t in &trip {
            assert_ne!(t.estimate, imgs[t.image].shape);
            let sum: Vec<f64> = t.estimate.0.iter().zip(&t.delta.0).map(|(a, b)| a + b).collect();
            assert_eq!(sum, imgs[t.image].shape.0);
        }
        assert!(matches!(make_triplets(&imgs[..3], 3, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_targets_stay_zero() {
        let imgs = corpus();
        let trip: Vec<TrainingTriplet> = (0..imgs.len())
            .map(|i| TrainingTriplet {
                image: i,
                estimate: imgs[i].shape.clone(),
                delta: ShapeVector(vec![0.0; 12]),
            })
            .collect();
        let fit = fit_cascade(trip, &imgs, &CascadeConfig { stages: 3, ..Default::default() }, 1e-3).unwrap();
        assert!(fit.residuals.iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn zero_stages_rejected_and_identity() {
        let imgs = corpus();
        let trip = make_triplets(&imgs, 2, 1).unwrap();
        let cfg = CascadeConfig { stages: 0, ..Default::default() };
        assert!(matches!(fit_cascade(trip, &imgs, &cfg, 1e-3), Err(Error::Config(_))));
        let empty = CascadeModel::<RidgeStage> {
            stages: vec![],
            offsets: ring_offsets(8, 5.0),
            nu: 0.1,
        };
        let init = imgs[0].shape.clone();
        assert_eq!(cascade_predict(&empty, &imgs[1].image, &init), init);
    }

    #[test]
    fn out_of_bounds_reads_zero() {
        let img = GrayImage::new(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(img.sample(-5.0, 0.0), 0.0);
        assert_eq!(img.sample(0.5, 0.5), 1.0);
        assert_eq!(img.sample(1.5, 0.0), 0.5);
    }

    #[test]
    fn save_load_roundtrip() {
        let imgs = corpus();
        let trip = make_triplets(&imgs, 3, 2).unwrap();
        let fit = fit_cascade(trip, &imgs, &CascadeConfig { stages: 4, ..Default::default() }, 1e-3).unwrap();
        let back = CascadeModel::decode(fit.model.encode().unwrap()).unwrap();
        assert_eq!(back, fit.model);
    }
}
