//! Fréchet feature distance over a fixed random 3D conv net, reconstruction
//! MSE and a small sign-class classifier for label accuracy.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Conv3d, Linear, ParamStore};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::tensor::{Conv3dGeometry, Float, Tensor};
use crate::vqgan::to_channels_first;

pub const FEATURE_SEED: u64 = 0xf7d0_5eed;

/// Gaussian fit of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `[d, d]`, unbiased.
    pub cov: Vec<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Two-pass mean and unbiased covariance of `n` rows of width `d`.
    pub fn from_rows(rows: &[f64], d: usize) -> Result<Self> {
        if d == 0 || !rows.len().is_multiple_of(d) {
            return Err(Error::contract(format!("{} values do not form rows of width {d}", rows.len())));
        }
        let n = rows.len() / d;
        if n < 2 {
            return Err(Error::contract(format!("feature statistics need at least 2 samples, got {n}")));
        }
        // shifted by the first row so identical rows give an exact mean
        let origin = &rows[..d];
        let mut shift = vec![0.0; d];
        for row in rows.chunks(d) {
            for ((m, v), o) in shift.iter_mut().zip(row).zip(origin) {
                *m += v - o;
            }
        }
        let mean: Vec<f64> = shift.iter().zip(origin).map(|(m, o)| o + m / n as f64).collect();
        let mut cov = vec![0.0; d * d];
        for row in rows.chunks(d) {
            for i in 0..d {
                let di = row[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (row[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(Self { mean, cov, n })
    }

    fn check(&self) -> Result<()> {
        if self.mean.iter().chain(&self.cov).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "feature statistics" });
        }
        Ok(())
    }
}

fn sym_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2 (Σb^½ Σa Σb^½)^½)`, clamped at 0.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dim {
            op: "frechet_distance",
            axis: 0,
            expected: a.dim(),
            got: b.dim(),
        });
    }
    a.check()?;
    b.check()?;
    let d = a.dim();
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = DMatrix::from_row_slice(d, d, &a.cov);
    let sb = DMatrix::from_row_slice(d, d, &b.cov);
    let root_b = sym_sqrt(sb.clone());
    let inner = &root_b * &sa * &root_b;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let value = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "frechet_distance" });
    }
    Ok(if value < 0.0 { 0.0 } else { value })
}

/// Mean squared error over all elements.
pub fn recon_mse<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "recon_mse",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let n = a.numel().max(1) as f64;
    Ok(a.data().iter().zip(b.data().iter()).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum::<f64>() / n)
}

/// Fixed random 3D conv net whose globally averaged top activations serve
/// as video features. Evaluated in 64-bit.
pub struct FeatureNet {
    convs: Vec<Conv3d>,
    store: ParamStore<f64>,
}

impl FeatureNet {
    pub fn new(channels: usize) -> Self {
        Self::with_seed(channels, FEATURE_SEED)
    }

    pub fn with_seed(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let strides = [[1, 2, 2], [2, 2, 2], [2, 2, 2]];
        let mut c = channels;
        let convs = [16, 32, 64]
            .iter()
            .zip(strides)
            .enumerate()
            .map(|(i, (&out, stride))| {
                let geom = Conv3dGeometry::new(stride, [1, 1, 1]);
                let conv = Conv3d::new(&mut store, &mut rng, &format!("fvd/conv{i}"), c, out, [3, 3, 3], geom, 2f64.sqrt());
                c = out;
                conv
            })
            .collect();
        store.freeze();
        Self { convs, store }
    }

    pub fn dim(&self) -> usize {
        64
    }

    /// `[B, T, H, W, C]` videos to `[B, 64]` features (row-major).
    pub fn features<F: Float>(&self, videos: &Tensor<F>) -> Result<Vec<f64>> {
        let x64 = Tensor::<f64>::new(videos.data().iter().map(|v| v.f64()).collect(), videos.shape())?;
        let mut x = to_channels_first(&x64)?;
        for conv in &self.convs {
            x = conv.forward(&self.store, &x)?.relu()?;
        }
        let b = x.dim(0);
        let c = x.dim(1);
        let pooled = x.reshape(&[b, c, x.numel() / (b * c)])?.mean_axis(2, false)?;
        Ok(pooled.to_vec())
    }
}

/// Feature statistics of a set of videos (processed in chunks of `chunk`).
pub fn feature_stats<F: Float>(videos: &[Tensor<F>], net: &FeatureNet) -> Result<FeatureStats> {
    if videos.len() < 2 {
        return Err(Error::contract(format!("feature statistics need at least 2 videos, got {}", videos.len())));
    }
    let mut rows = Vec::with_capacity(videos.len() * net.dim());
    for v in videos {
        rows.extend(net.features(v)?);
    }
    FeatureStats::from_rows(&rows, net.dim())
}

/// Fréchet distance between the feature statistics of two video sets.
pub fn fvd_proxy<F: Float>(a: &[Tensor<F>], b: &[Tensor<F>], net: &FeatureNet) -> Result<f64> {
    frechet_distance(&feature_stats(a, net)?, &feature_stats(b, net)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Test accuracy below which the classifier refuses to score.
    pub min_accuracy: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 3e-3,
            min_accuracy: 0.95,
        }
    }
}

/// Small 3D conv classifier used to score whether generated videos show
/// the gesture of their conditioning label.
pub struct SlrClassifier {
    convs: Vec<Conv3d>,
    head: Linear,
    store: ParamStore<f32>,
    n_classes: usize,
    test_accuracy: f64,
    min_accuracy: f64,
}

impl SlrClassifier {
    fn build(resolution: [usize; 3], channels: usize, n_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let strides = [[1, 2, 2], [2, 2, 2], [2, 2, 2]];
        let mut c = channels;
        let mut dims = resolution;
        let convs = [8, 16, 16]
            .iter()
            .zip(strides)
            .enumerate()
            .map(|(i, (&out, stride))| {
                let geom = Conv3dGeometry::new(stride, [1, 1, 1]);
                let conv = Conv3d::new(&mut store, rng, &format!("slr/conv{i}"), c, out, [3, 3, 3], geom, 2f64.sqrt());
                for (d, s) in dims.iter_mut().zip(stride) {
                    *d = (*d + 2 - 3) / s + 1;
                }
                c = out;
                conv
            })
            .collect();
        let flat = c * dims.iter().product::<usize>();
        let head = Linear::new(&mut store, rng, "slr/head", flat, n_classes, true);
        Self {
            convs,
            head,
            store,
            n_classes,
            test_accuracy: 0.0,
            min_accuracy: 1.0,
        }
    }

    fn logits(&self, store: &ParamStore<f32>, videos: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut x = to_channels_first(videos)?;
        for conv in &self.convs {
            x = conv.forward(store, &x)?.relu()?;
        }
        let b = x.dim(0);
        let flat = x.reshape(&[b, x.numel() / b])?;
        self.head.forward(store, &flat)
    }

    /// Trains on `train` and records the accuracy on `test`.
    pub fn train(train: &Dataset, test: &Dataset, cfg: &ClassifierConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::build(train.spec.resolution, train.spec.channels, train.spec.n_classes, &mut rng);
        let names: Vec<String> = model.store.names().map(String::from).collect();
        let mut opt = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            ..AdamWConfig::default()
        });
        let per_epoch = train.len().div_ceil(cfg.batch_size.max(1));
        let total = (cfg.epochs * per_epoch) as u64;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut step = 0u64;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let x = train.batch::<f32>(chunk)?;
                model.store.zero_grad();
                let loss = model.logits(&model.store, &x)?.cross_entropy(&train.labels(chunk))?;
                loss.backward()?;
                opt.step(&mut model.store, &names, cosine_lr(step, total, cfg.lr, cfg.lr * 0.01, 0))?;
                step += 1;
            }
        }
        model.store.freeze();
        model.min_accuracy = cfg.min_accuracy;
        model.test_accuracy = model.raw_accuracy(test)?;
        Ok(model)
    }

    pub fn test_accuracy(&self) -> f64 {
        self.test_accuracy
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn predict(&self, videos: &Tensor<f32>) -> Result<Vec<usize>> {
        Ok(self.logits(&self.store, videos)?.argmax_last())
    }

    fn raw_accuracy(&self, data: &Dataset) -> Result<f64> {
        let mut hits = 0;
        let all: Vec<usize> = (0..data.len()).collect();
        for chunk in all.chunks(32) {
            let pred = self.predict(&data.batch::<f32>(chunk)?)?;
            hits += pred.iter().zip(data.labels(chunk)).filter(|(p, l)| **p == *l).count();
        }
        Ok(hits as f64 / data.len().max(1) as f64)
    }

    /// Top-1 accuracy of `videos` (`[B, T, H, W, C]`) against `labels`.
    /// Refuses when the classifier failed its own test bar.
    pub fn accuracy<F: Float>(&self, videos: &Tensor<F>, labels: &[usize]) -> Result<f64> {
        if self.test_accuracy < self.min_accuracy {
            return Err(Error::Unavailable(format!(
                "classifier test accuracy {:.3} below {:.3}",
                self.test_accuracy, self.min_accuracy
            )));
        }
        if videos.dim(0) != labels.len() {
            return Err(Error::Dim {
                op: "slr_accuracy",
                axis: 0,
                expected: labels.len(),
                got: videos.dim(0),
            });
        }
        let x = Tensor::<f32>::new(videos.data().iter().map(|v| v.f64() as f32).collect(), videos.shape())?;
        let pred = self.predict(&x)?;
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64)
    }
}

/// Generated-video label accuracy under a trained classifier.
pub fn slr_accuracy<F: Float>(videos: &Tensor<F>, labels: &[usize], classifier: &SlrClassifier) -> Result<f64> {
    classifier.accuracy(videos, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(v: &[f64]) -> Vec<f64> {
        let d = v.len();
        let mut m = vec![0.0; d * d];
        for (i, x) in v.iter().enumerate() {
            m[i * d + i] = *x;
        }
        m
    }

    #[test]
    fn commuting_diagonal_case() {
        let a = FeatureStats {
            mean: vec![0.0, 0.0],
            cov: diag(&[1.0, 4.0]),
            n: 10,
        };
        let b = FeatureStats {
            cov: diag(&[4.0, 1.0]),
            ..a.clone()
        };
        assert!((frechet_distance(&a, &b).unwrap() - 2.0).abs() < 1e-9);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
    }

    #[test]
    fn mean_shift_closed_form() {
        let a = FeatureStats {
            mean: vec![1.0, 2.0, 3.0],
            cov: vec![2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 3.0],
            n: 5,
        };
        let b = FeatureStats {
            mean: vec![1.5, 0.0, 3.25],
            ..a.clone()
        };
        let want = 0.25 + 4.0 + 0.0625;
        assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn stats_match_two_pass_oracle_and_ignore_order() {
        let rows = [1.0, 2.0, 3.0, 5.0, -1.0, 0.0, 4.0, 4.0];
        let s = FeatureStats::from_rows(&rows, 2).unwrap();
        assert_eq!(s.mean, vec![1.75, 2.75]);
        // direct: var x = ((−.75)²+(1.25)²+(−2.75)²+(2.25)²)/3
        let vx = (0.5625 + 1.5625 + 7.5625 + 5.0625) / 3.0;
        assert!((s.cov[0] - vx).abs() < 1e-12);
        assert_eq!(s.cov[1], s.cov[2]);
        let shuffled = [4.0, 4.0, 1.0, 2.0, -1.0, 0.0, 3.0, 5.0];
        let t = FeatureStats::from_rows(&shuffled, 2).unwrap();
        for (a, b) in s.cov.iter().zip(&t.cov) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(FeatureStats::from_rows(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn repeated_video_has_zero_covariance() {
        let net = FeatureNet::new(3);
        let v = Tensor::<f32>::full(&[1, 4, 8, 8, 3], 0.25);
        let s = feature_stats(&[v.clone(), v.clone(), v], &net).unwrap();
        assert!(s.cov.iter().all(|&c| c == 0.0));
        assert_eq!(s.dim(), 64);
    }

    #[test]
    fn mse_is_symmetric_and_zero_on_equal() {
        let a = Tensor::<f64>::from_f64(&[0.0, 1.0, 2.0], &[3]).unwrap();
        let b = Tensor::<f64>::from_f64(&[1.0, 1.0, 0.0], &[3]).unwrap();
        assert_eq!(recon_mse(&a, &a).unwrap(), 0.0);
        assert_eq!(recon_mse(&a, &b).unwrap(), recon_mse(&b, &a).unwrap());
        assert!((recon_mse(&a, &b).unwrap() - 5.0 / 3.0).abs() < 1e-15);
    }
}
