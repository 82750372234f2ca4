use serde::{Deserialize, Serialize};

use super::{check_len, DatasetShard, NumericsError, ParamVector};
use crate::rng::{Purpose, RandomStream, SERVER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Affine predictor, loss `½ (w·x + b − y)²`.
    LinearRegression,
    /// Affine logits with a sigmoid (one output) or softmax (several) head.
    LogisticRegression,
    /// One tanh hidden layer followed by the same head as logistic regression.
    Mlp,
    /// Per-example loss `½ y ‖X − x‖²`: the feature row is a centre and the
    /// label a nonnegative curvature weight. Smoothness constant is the mean
    /// label, exactly.
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dim: usize,
    #[serde(default = "one")]
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

fn one() -> usize {
    1
}

impl ModelSpec {
    pub fn linear_regression(input_dim: usize) -> Self {
        Self::new(ModelKind::LinearRegression, input_dim, 0, 1)
    }

    pub fn logistic_regression(input_dim: usize) -> Self {
        Self::new(ModelKind::LogisticRegression, input_dim, 0, 1)
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self::new(ModelKind::Mlp, input_dim, hidden_dim, output_dim)
    }

    pub fn quadratic(dim: usize) -> Self {
        Self::new(ModelKind::Quadratic, dim, 0, 1)
    }

    fn new(kind: ModelKind, input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self {
            kind,
            input_dim,
            hidden_dim,
            output_dim,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        let bad = |m: &str| Err(NumericsError::InvalidSpec(m.to_string()));
        if self.input_dim == 0 {
            return bad("input_dim must be positive");
        }
        if self.output_dim == 0 {
            return bad("output_dim must be positive");
        }
        match self.kind {
            ModelKind::Mlp if self.hidden_dim == 0 => bad("mlp needs hidden_dim > 0"),
            ModelKind::Mlp => Ok(()),
            _ if self.hidden_dim != 0 => bad("hidden_dim must be 0 unless kind is mlp"),
            ModelKind::LinearRegression | ModelKind::Quadratic if self.output_dim != 1 => {
                bad("output_dim must be 1 for this model kind")
            }
            _ => Ok(()),
        }
    }

    /// Number of coordinates `d` of a parameter vector for this model.
    pub fn param_count(&self) -> usize {
        let (i, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        match self.kind {
            ModelKind::LinearRegression => i + 1,
            ModelKind::LogisticRegression => o * i + o,
            ModelKind::Mlp => h * i + h + o * h + o,
            ModelKind::Quadratic => i,
        }
    }

    pub fn is_classifier(&self) -> bool {
        matches!(self.kind, ModelKind::LogisticRegression | ModelKind::Mlp)
    }

    /// Starting point of a run. Linear models start at zero; the MLP gets
    /// Glorot-uniform weights and zero biases so hidden units are not tied.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut p = ParamVector::zeros(self.param_count());
        if self.kind == ModelKind::Mlp {
            let (i, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
            let mut rng = RandomStream::keyed(seed, 0, SERVER, Purpose::Init);
            let a1 = (6.0 / (i + h) as f64).sqrt();
            for w in &mut p[..h * i] {
                *w = a1 * (2.0 * rng.next_unit() - 1.0);
            }
            let a2 = (6.0 / (h + o) as f64).sqrt();
            let off = h * i + h;
            for w in &mut p[off..off + o * h] {
                *w = a2 * (2.0 * rng.next_unit() - 1.0);
            }
        }
        p
    }

    fn check(&self, params: &ParamVector, shard: &DatasetShard) -> Result<(), NumericsError> {
        self.validate()?;
        check_len(self.param_count(), params.len())?;
        if shard.input_dim() != self.input_dim {
            return Err(NumericsError::InvalidShard(format!(
                "shard has {} features, model expects {}",
                shard.input_dim(),
                self.input_dim
            )));
        }
        if shard.is_empty() {
            return Err(NumericsError::InvalidShard("empty shard".into()));
        }
        for (row, &label) in shard.labels().iter().enumerate() {
            let ok = match self.kind {
                ModelKind::LinearRegression => label.is_finite(),
                ModelKind::Quadratic => label.is_finite() && label >= 0.0,
                _ if self.output_dim == 1 => (0.0..=1.0).contains(&label),
                _ => label >= 0.0 && label.fract() == 0.0 && (label as usize) < self.output_dim,
            };
            if !ok {
                return Err(NumericsError::InvalidLabel { row, label });
            }
        }
        Ok(())
    }
}

/// Local SGD settings: step size, local steps per round and batch size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub eta: f64,
    pub tau: usize,
    pub batch_size: BatchSize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), NumericsError> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(NumericsError::InvalidStep(self.eta));
        }
        if self.tau == 0 {
            return Err(NumericsError::InvalidSpec("tau must be at least 1".into()));
        }
        if self.batch_size == BatchSize::Examples(0) {
            return Err(NumericsError::InvalidSpec("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Mini-batch size for local SGD. Serialized as a positive integer or `"full"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BatchRepr", into = "BatchRepr")]
pub enum BatchSize {
    Examples(usize),
    Full,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BatchRepr {
    Count(usize),
    Word(String),
}

impl TryFrom<BatchRepr> for BatchSize {
    type Error = String;

    fn try_from(r: BatchRepr) -> Result<Self, String> {
        match r {
            BatchRepr::Count(0) => Err("batch_size must be positive".into()),
            BatchRepr::Count(n) => Ok(BatchSize::Examples(n)),
            BatchRepr::Word(w) if w == "full" => Ok(BatchSize::Full),
            BatchRepr::Word(w) => Err(format!("batch_size must be a positive integer or \"full\", got {w:?}")),
        }
    }
}

impl From<BatchSize> for BatchRepr {
    fn from(b: BatchSize) -> Self {
        match b {
            BatchSize::Examples(n) => BatchRepr::Count(n),
            BatchSize::Full => BatchRepr::Word("full".into()),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Classification head: writes `dL/dz` into `dz` and returns the loss.
fn head(z: &[f64], label: f64, dz: &mut [f64]) -> f64 {
    if z.len() == 1 {
        dz[0] = sigmoid(z[0]) - label;
        softplus(z[0]) - label * z[0]
    } else {
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &v) in dz.iter_mut().zip(z) {
            *d = (v - zmax).exp();
            sum += *d;
        }
        let class = label as usize;
        for d in dz.iter_mut() {
            *d /= sum;
        }
        dz[class] -= 1.0;
        sum.ln() + zmax - z[class]
    }
}

/// Loss of one example; when `grad` is given, adds the example's gradient to it.
fn example(spec: &ModelSpec, p: &[f64], x: &[f64], y: f64, grad: Option<&mut [f64]>) -> f64 {
    let i = spec.input_dim;
    match spec.kind {
        ModelKind::LinearRegression => {
            let r = dot(&p[..i], x) + p[i] - y;
            if let Some(g) = grad {
                for (gj, xj) in g[..i].iter_mut().zip(x) {
                    *gj += r * xj;
                }
                g[i] += r;
            }
            0.5 * r * r
        }
        ModelKind::Quadratic => {
            let mut l = 0.0;
            match grad {
                Some(g) => {
                    for j in 0..i {
                        let diff = p[j] - x[j];
                        l += diff * diff;
                        g[j] += y * diff;
                    }
                }
                None => {
                    for j in 0..i {
                        let diff = p[j] - x[j];
                        l += diff * diff;
                    }
                }
            }
            0.5 * y * l
        }
        ModelKind::LogisticRegression => {
            let o = spec.output_dim;
            let (w, b) = p.split_at(o * i);
            let z: Vec<f64> = (0..o).map(|k| dot(&w[k * i..(k + 1) * i], x) + b[k]).collect();
            let mut dz = vec![0.0; o];
            let l = head(&z, y, &mut dz);
            if let Some(g) = grad {
                let (gw, gb) = g.split_at_mut(o * i);
                for k in 0..o {
                    for (gj, xj) in gw[k * i..(k + 1) * i].iter_mut().zip(x) {
                        *gj += dz[k] * xj;
                    }
                    gb[k] += dz[k];
                }
            }
            l
        }
        ModelKind::Mlp => {
            let (h, o) = (spec.hidden_dim, spec.output_dim);
            let (w1, rest) = p.split_at(h * i);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(o * h);
            let act: Vec<f64> = (0..h).map(|u| (dot(&w1[u * i..(u + 1) * i], x) + b1[u]).tanh()).collect();
            let z: Vec<f64> = (0..o).map(|k| dot(&w2[k * h..(k + 1) * h], &act) + b2[k]).collect();
            let mut dz = vec![0.0; o];
            let l = head(&z, y, &mut dz);
            if let Some(g) = grad {
                let (gw1, rest) = g.split_at_mut(h * i);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(o * h);
                let mut dact = vec![0.0; h];
                for k in 0..o {
                    for u in 0..h {
                        gw2[k * h + u] += dz[k] * act[u];
                        dact[u] += dz[k] * w2[k * h + u];
                    }
                    gb2[k] += dz[k];
                }
                for u in 0..h {
                    let dpre = dact[u] * (1.0 - act[u] * act[u]);
                    for (gj, xj) in gw1[u * i..(u + 1) * i].iter_mut().zip(x) {
                        *gj += dpre * xj;
                    }
                    gb1[u] += dpre;
                }
            }
            l
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean loss over the shard.
pub fn loss(spec: &ModelSpec, params: &ParamVector, shard: &DatasetShard) -> Result<f64, NumericsError> {
    spec.check(params, shard)?;
    let total: f64 = (0..shard.len())
        .map(|r| example(spec, params, shard.row(r), shard.labels()[r], None))
        .sum();
    let l = total / shard.len() as f64;
    if l.is_finite() {
        Ok(l)
    } else {
        Err(NumericsError::NonFinite("loss"))
    }
}

fn mean_gradient<I>(spec: &ModelSpec, params: &ParamVector, shard: &DatasetShard, rows: I, count: usize) -> Result<ParamVector, NumericsError>
where
    I: Iterator<Item = usize>,
{
    let mut g = vec![0.0; params.len()];
    for r in rows {
        example(spec, params, shard.row(r), shard.labels()[r], Some(&mut g));
    }
    let inv = 1.0 / count as f64;
    g.iter_mut().for_each(|v| *v *= inv);
    let g = ParamVector::new(g);
    if g.is_finite() {
        Ok(g)
    } else {
        Err(NumericsError::NonFinite("gradient"))
    }
}

/// Exact mean gradient over the whole shard.
pub fn full_gradient(spec: &ModelSpec, params: &ParamVector, shard: &DatasetShard) -> Result<ParamVector, NumericsError> {
    spec.check(params, shard)?;
    mean_gradient(spec, params, shard, 0..shard.len(), shard.len())
}

/// Stochastic gradient: mean over a batch drawn without replacement.
///
/// `rng` is consumed only when the batch is smaller than the shard.
pub fn gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    shard: &DatasetShard,
    batch: BatchSize,
    rng: &mut RandomStream,
) -> Result<ParamVector, NumericsError> {
    spec.check(params, shard)?;
    let n = shard.len();
    match batch {
        BatchSize::Examples(b) if b < n => {
            if b == 0 {
                return Err(NumericsError::InvalidSpec("batch_size must be positive".into()));
            }
            let mut idx = rng.sample_indices(n, b);
            idx.sort_unstable();
            mean_gradient(spec, params, shard, idx.into_iter(), b)
        }
        _ => mean_gradient(spec, params, shard, 0..n, n),
    }
}

/// Fraction of correctly classified rows. `None` for non-classifiers.
pub fn accuracy(spec: &ModelSpec, params: &ParamVector, shard: &DatasetShard) -> Result<Option<f64>, NumericsError> {
    if !spec.is_classifier() {
        return Ok(None);
    }
    spec.check(params, shard)?;
    let (i, o) = (spec.input_dim, spec.output_dim);
    let mut correct = 0usize;
    for r in 0..shard.len() {
        let x = shard.row(r);
        let z: Vec<f64> = match spec.kind {
            ModelKind::LogisticRegression => {
                let (w, b) = params.split_at(o * i);
                (0..o).map(|k| dot(&w[k * i..(k + 1) * i], x) + b[k]).collect()
            }
            _ => {
                let h = spec.hidden_dim;
                let (w1, rest) = params.split_at(h * i);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(o * h);
                let act: Vec<f64> = (0..h).map(|u| (dot(&w1[u * i..(u + 1) * i], x) + b1[u]).tanh()).collect();
                (0..o).map(|k| dot(&w2[k * h..(k + 1) * h], &act) + b2[k]).collect()
            }
        };
        let predicted = if o == 1 {
            if z[0] > 0.0 { 1.0 } else { 0.0 }
        } else {
            z.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best }).0 as f64
        };
        let truth = if o == 1 { shard.labels()[r].round() } else { shard.labels()[r] };
        if predicted == truth {
            correct += 1;
        }
    }
    Ok(Some(correct as f64 / shard.len() as f64))
}
