use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamVector};
use crate::rng::{Purpose, RandomStream, SERVER};

/// Row-major examples with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetShard {
    features: Vec<f64>,
    labels: Vec<f64>,
    input_dim: usize,
}

impl DatasetShard {
    pub fn new(features: Vec<f64>, labels: Vec<f64>, input_dim: usize) -> Result<Self, NumericsError> {
        if input_dim == 0 {
            return Err(NumericsError::InvalidShard("input_dim must be positive".into()));
        }
        if features.len() != labels.len() * input_dim {
            return Err(NumericsError::InvalidShard(format!(
                "{} feature values do not form {} rows of width {}",
                features.len(),
                labels.len(),
                input_dim
            )));
        }
        if !features.iter().chain(&labels).all(|v| v.is_finite()) {
            return Err(NumericsError::InvalidShard("non-finite feature or label".into()));
        }
        Ok(Self {
            features,
            labels,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.features[r * self.input_dim..(r + 1) * self.input_dim]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> DatasetShard {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        DatasetShard {
            features,
            labels,
            input_dim: self.input_dim,
        }
    }

    /// First `n` rows and the rest.
    pub fn split_at(&self, n: usize) -> (DatasetShard, DatasetShard) {
        let n = n.min(self.len());
        let (fa, fb) = self.features.split_at(n * self.input_dim);
        let (la, lb) = self.labels.split_at(n);
        (
            DatasetShard {
                features: fa.to_vec(),
                labels: la.to_vec(),
                input_dim: self.input_dim,
            },
            DatasetShard {
                features: fb.to_vec(),
                labels: lb.to_vec(),
                input_dim: self.input_dim,
            },
        )
    }

    /// All shards stacked in order. `None` when `parts` is empty or widths differ.
    pub fn concat(parts: &[&DatasetShard]) -> Option<DatasetShard> {
        let dim = parts.first()?.input_dim;
        if parts.iter().any(|p| p.input_dim != dim) {
            return None;
        }
        Some(DatasetShard {
            features: parts.iter().flat_map(|p| p.features.iter().copied()).collect(),
            labels: parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
            input_dim: dim,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SyntheticTask {
    /// Gaussian features, hidden affine truth, Gaussian label noise.
    Linreg,
    /// Two Gaussian clusters at distance `separation`, each with per-axis
    /// standard deviation `noise_sigma`. Labels alternate 0, 1, 0, ...
    LogregBlobs { separation: f64 },
    /// Centres drawn around a hidden point with spread `noise_sigma`, unit
    /// curvature weights. Pairs with [`ModelKind::Quadratic`](super::ModelKind::Quadratic).
    Quadratic,
}

/// A generated dataset and, when one exists, the parameters that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub shard: DatasetShard,
    pub truth: Option<ParamVector>,
}

fn normal(rng: &mut RandomStream) -> f64 {
    StandardNormal.sample(rng)
}

/// Deterministic synthetic data for a fixed `seed`.
pub fn make_synthetic(
    task: SyntheticTask,
    input_dim: usize,
    n_examples: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Synthetic, NumericsError> {
    if n_examples == 0 || input_dim == 0 {
        return Err(NumericsError::InvalidShard("need at least one example and one feature".into()));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(NumericsError::InvalidShard(format!("noise_sigma must be finite and >= 0, got {noise_sigma}")));
    }
    let mut rng = RandomStream::keyed(seed, 0, SERVER, Purpose::Data);
    let mut features = Vec::with_capacity(n_examples * input_dim);
    let mut labels = Vec::with_capacity(n_examples);
    let truth = match task {
        SyntheticTask::Linreg => {
            let truth: Vec<f64> = (0..=input_dim).map(|_| normal(&mut rng)).collect();
            for _ in 0..n_examples {
                let x: Vec<f64> = (0..input_dim).map(|_| normal(&mut rng)).collect();
                let y = x.iter().zip(&truth).map(|(a, w)| a * w).sum::<f64>() + truth[input_dim] + noise_sigma * normal(&mut rng);
                features.extend(x);
                labels.push(y);
            }
            Some(ParamVector::new(truth))
        }
        SyntheticTask::LogregBlobs { separation } => {
            if !(separation >= 0.0 && separation.is_finite()) {
                return Err(NumericsError::InvalidShard(format!("separation must be finite and >= 0, got {separation}")));
            }
            let mut dir: Vec<f64> = (0..input_dim).map(|_| normal(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|v| *v *= 0.5 * separation / norm);
            for k in 0..n_examples {
                let label = (k % 2) as f64;
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                features.extend(dir.iter().map(|c| sign * c + noise_sigma * normal(&mut rng)));
                labels.push(label);
            }
            None
        }
        SyntheticTask::Quadratic => {
            let centre: Vec<f64> = (0..input_dim).map(|_| normal(&mut rng)).collect();
            for _ in 0..n_examples {
                features.extend(centre.iter().map(|c| c + noise_sigma * normal(&mut rng)));
                labels.push(1.0);
            }
            Some(ParamVector::new(centre))
        }
    };
    Ok(Synthetic {
        shard: DatasetShard::new(features, labels, input_dim)?,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{full_gradient, loss, sgd_step, ModelSpec};

    fn bits(s: &DatasetShard) -> Vec<u64> {
        s.features().iter().chain(s.labels()).map(|v| v.to_bits()).collect()
    }

    #[test]
    fn same_seed_same_bytes() {
        for task in [SyntheticTask::Linreg, SyntheticTask::LogregBlobs { separation: 4.0 }, SyntheticTask::Quadratic] {
            let a = make_synthetic(task, 5, 40, 0.3, 11).unwrap();
            let b = make_synthetic(task, 5, 40, 0.3, 11).unwrap();
            assert_eq!(bits(&a.shard), bits(&b.shard));
            let c = make_synthetic(task, 5, 40, 0.3, 12).unwrap();
            assert_ne!(bits(&a.shard), bits(&c.shard));
        }
    }

    #[test]
    fn noiseless_linreg_is_realizable() {
        let data = make_synthetic(SyntheticTask::Linreg, 6, 50, 0.0, 3).unwrap();
        let truth = data.truth.unwrap();
        let l = loss(&ModelSpec::linear_regression(6), &truth, &data.shard).unwrap();
        assert!(l < 1e-25, "{l}");
    }

    #[test]
    fn separated_blobs_are_learnable() {
        let sigma = 1.0;
        let data = make_synthetic(SyntheticTask::LogregBlobs { separation: 10.0 * sigma }, 8, 400, sigma, 0).unwrap();
        let spec = ModelSpec::logistic_regression(8);
        let mut p = ParamVector::zeros(9);
        for _ in 0..500 {
            let g = full_gradient(&spec, &p, &data.shard).unwrap();
            p = sgd_step(&p, &g, 0.5).unwrap();
        }
        let acc = crate::numerics::accuracy(&spec, &p, &data.shard).unwrap().unwrap();
        assert!(acc >= 0.99, "accuracy {acc}");
    }

    #[test]
    fn blobs_are_balanced() {
        let data = make_synthetic(SyntheticTask::LogregBlobs { separation: 2.0 }, 3, 101, 1.0, 0).unwrap();
        let ones = data.shard.labels().iter().filter(|&&l| l == 1.0).count();
        assert_eq!(ones, 50);
    }

    #[test]
    fn shard_shape_checks() {
        assert!(DatasetShard::new(vec![1.0, 2.0, 3.0], vec![0.0, 1.0], 2).is_err());
        assert!(DatasetShard::new(vec![f64::NAN], vec![0.0], 1).is_err());
        let s = DatasetShard::new(vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 1.0], 2).unwrap();
        assert_eq!(s.select(&[1]).row(0), &[3.0, 4.0]);
        let (a, b) = s.split_at(1);
        assert_eq!(DatasetShard::concat(&[&a, &b]).unwrap(), s);
    }
}
