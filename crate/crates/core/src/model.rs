//! One-hidden-layer networks with sigmoid activation and their datasets.
//!
//! Parameters are stored in two layers. Layer 0 holds the hidden weight matrix
//! (`hidden × input`, row-major) followed by the hidden biases; layer 1 holds the
//! output weight matrix (`output × hidden`, row-major) followed by the output biases.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FdaError, Result};
use crate::linalg::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Mean squared error over all output coordinates.
    MlpRegression,
    /// Softmax cross-entropy over `output_dim` classes.
    MlpClassifier,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Row-major `n × output_dim`.
    Regression(Vec<f64>),
    Classification(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    input_dim: usize,
    output_dim: usize,
    inputs: Vec<f64>,
    targets: Targets,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        input_dim: usize,
        output_dim: usize,
        inputs: Vec<f64>,
        targets: Targets,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(FdaError::config("input_dim/output_dim", "must be positive"));
        }
        if inputs.is_empty() || !inputs.len().is_multiple_of(input_dim) {
            return Err(FdaError::shape(format!(
                "{} input values do not form rows of width {input_dim}",
                inputs.len()
            )));
        }
        let n = inputs.len() / input_dim;
        match &targets {
            Targets::Regression(t) if t.len() != n * output_dim => {
                return Err(FdaError::shape(format!(
                    "expected {} regression targets, found {}",
                    n * output_dim,
                    t.len()
                )))
            }
            Targets::Classification(t) if t.len() != n => {
                return Err(FdaError::shape(format!("expected {n} labels, found {}", t.len())))
            }
            Targets::Classification(t) if t.iter().any(|&y| y >= output_dim) => {
                return Err(FdaError::shape(format!("label outside [0, {output_dim})")))
            }
            _ => {}
        }
        Ok(Dataset {
            name: name.into(),
            input_dim,
            output_dim,
            inputs,
            targets,
        })
    }

    pub fn n(&self) -> usize {
        self.inputs.len() / self.input_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.targets, Targets::Classification(_))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        match &self.targets {
            Targets::Classification(t) => Some(t[i]),
            Targets::Regression(_) => None,
        }
    }

    pub fn target_row(&self, i: usize) -> Option<&[f64]> {
        match &self.targets {
            Targets::Regression(t) => Some(&t[i * self.output_dim..(i + 1) * self.output_dim]),
            Targets::Classification(_) => None,
        }
    }

    /// New dataset made of the given rows, in the given order (repeats allowed).
    pub fn select(&self, rows: &[usize]) -> Result<Dataset> {
        let n = self.n();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(FdaError::shape(format!("row {bad} out of range for {n} rows")));
        }
        let mut inputs = Vec::with_capacity(rows.len() * self.input_dim);
        for &r in rows {
            inputs.extend_from_slice(self.row(r));
        }
        let targets = match &self.targets {
            Targets::Regression(t) => {
                let k = self.output_dim;
                let mut out = Vec::with_capacity(rows.len() * k);
                for &r in rows {
                    out.extend_from_slice(&t[r * k..(r + 1) * k]);
                }
                Targets::Regression(out)
            }
            Targets::Classification(t) => Targets::Classification(rows.iter().map(|&r| t[r]).collect()),
        };
        Dataset::new(self.name.clone(), self.input_dim, self.output_dim, inputs, targets)
    }

    /// Replace the inputs, keeping targets and dimensions.
    pub fn with_inputs(&self, inputs: Vec<f64>) -> Result<Dataset> {
        if inputs.len() != self.inputs.len() {
            return Err(FdaError::shape("replacement inputs have a different size"));
        }
        Dataset::new(
            self.name.clone(),
            self.input_dim,
            self.output_dim,
            inputs,
            self.targets.clone(),
        )
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Dataset {
        self.name = name.into();
        self
    }

    /// Stack several datasets with identical dimensions and target kind.
    pub fn concat(name: impl Into<String>, parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| FdaError::shape("nothing to concatenate"))?;
        let mut inputs = Vec::new();
        let mut reg = Vec::new();
        let mut cls = Vec::new();
        for p in parts {
            if p.input_dim != first.input_dim
                || p.output_dim != first.output_dim
                || p.is_classification() != first.is_classification()
            {
                return Err(FdaError::shape("datasets to concatenate differ in shape or kind"));
            }
            inputs.extend_from_slice(&p.inputs);
            match &p.targets {
                Targets::Regression(t) => reg.extend_from_slice(t),
                Targets::Classification(t) => cls.extend_from_slice(t),
            }
        }
        let targets = if first.is_classification() {
            Targets::Classification(cls)
        } else {
            Targets::Regression(reg)
        };
        Dataset::new(name, first.input_dim, first.output_dim, inputs, targets)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    /// Fraction of argmax-correct predictions; absent for regression.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Arch,
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    params: ParamVector,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-thread scratch for one forward/backward pass.
struct Scratch {
    hidden: Vec<f64>,
    out: Vec<f64>,
    d_out: Vec<f64>,
    d_hidden: Vec<f64>,
}

impl Model {
    pub fn layout(input_dim: usize, hidden_dim: usize, output_dim: usize) -> [usize; 2] {
        [(input_dim + 1) * hidden_dim, (hidden_dim + 1) * output_dim]
    }

    pub fn new(
        arch: Arch,
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        params: ParamVector,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || output_dim == 0 {
            return Err(FdaError::config("model", "dimensions must be positive"));
        }
        let expected = Self::layout(input_dim, hidden_dim, output_dim);
        if params.layout() != expected {
            return Err(FdaError::shape(format!(
                "parameter layout {:?} does not match model layout {:?}",
                params.layout(),
                expected
            )));
        }
        Ok(Model {
            arch,
            input_dim,
            hidden_dim,
            output_dim,
            params,
        })
    }

    /// Weights from `U(−1/√fan_in, 1/√fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(
        arch: Arch,
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = ParamVector::zeros(&Self::layout(input_dim.max(1), hidden_dim.max(1), output_dim.max(1)));
        let b1 = 1.0 / (input_dim as f64).sqrt();
        for w in &mut params.layer_mut(0)[..hidden_dim * input_dim] {
            *w = rng.random_range(-b1..b1);
        }
        let b2 = 1.0 / (hidden_dim as f64).sqrt();
        for w in &mut params.layer_mut(1)[..output_dim * hidden_dim] {
            *w = rng.random_range(-b2..b2);
        }
        Self::new(arch, input_dim, hidden_dim, output_dim, params)
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Model> {
        Model::new(self.arch, self.input_dim, self.hidden_dim, self.output_dim, params)
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn check_data(&self, data: &Dataset) -> Result<()> {
        let kind_ok = match self.arch {
            Arch::MlpRegression => !data.is_classification(),
            Arch::MlpClassifier => data.is_classification(),
        };
        if data.input_dim() != self.input_dim || data.output_dim() != self.output_dim || !kind_ok {
            return Err(FdaError::shape(format!(
                "dataset '{}' ({}→{}, {}) does not fit model ({}→{}, {:?})",
                data.name,
                data.input_dim(),
                data.output_dim(),
                if data.is_classification() {
                    "classification"
                } else {
                    "regression"
                },
                self.input_dim,
                self.output_dim,
                self.arch
            )));
        }
        Ok(())
    }

    fn scratch(&self) -> Scratch {
        Scratch {
            hidden: vec![0.0; self.hidden_dim],
            out: vec![0.0; self.output_dim],
            d_out: vec![0.0; self.output_dim],
            d_hidden: vec![0.0; self.hidden_dim],
        }
    }

    fn forward_into(&self, x: &[f64], s: &mut Scratch) {
        let (d, h, k) = (self.input_dim, self.hidden_dim, self.output_dim);
        let l0 = &self.params.layers()[0];
        let l1 = &self.params.layers()[1];
        let (w1, b1) = l0.split_at(h * d);
        let (w2, b2) = l1.split_at(k * h);
        for j in 0..h {
            let row = &w1[j * d..(j + 1) * d];
            let mut z = b1[j];
            for (w, xi) in row.iter().zip(x) {
                z += w * xi;
            }
            s.hidden[j] = sigmoid(z);
        }
        for c in 0..k {
            let row = &w2[c * h..(c + 1) * h];
            let mut z = b2[c];
            for (w, a) in row.iter().zip(&s.hidden) {
                z += w * a;
            }
            s.out[c] = z;
        }
    }

    /// Network output for a single input row (logits for classifiers).
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut s = self.scratch();
        self.forward_into(x, &mut s);
        s.out
    }

    /// Loss of row `i` after `forward_into`; fills `s.d_out` with ∂loss/∂output.
    fn sample_loss(&self, data: &Dataset, i: usize, s: &mut Scratch) -> f64 {
        match self.arch {
            Arch::MlpRegression => {
                let y = data.target_row(i).expect("regression data");
                let k = self.output_dim as f64;
                let mut loss = 0.0;
                for ((o, t), d) in s.out.iter().zip(y).zip(s.d_out.iter_mut()) {
                    let r = o - t;
                    loss += r * r;
                    *d = 2.0 * r / k;
                }
                loss / k
            }
            Arch::MlpClassifier => {
                let y = data.label(i).expect("classification data");
                let max = s.out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for c in 0..self.output_dim {
                    let e = (s.out[c] - max).exp();
                    s.d_out[c] = e;
                    sum += e;
                }
                let lse = max + sum.ln();
                for c in 0..self.output_dim {
                    s.d_out[c] /= sum;
                }
                s.d_out[y] -= 1.0;
                lse - s.out[y]
            }
        }
    }

    /// Add `weight · ∇ℓ(θ, z_i)` into `grad` (flat, layer 0 then layer 1).
    fn backward_into(&self, x: &[f64], s: &mut Scratch, weight: f64, g0: &mut [f64], g1: &mut [f64]) {
        let (d, h, k) = (self.input_dim, self.hidden_dim, self.output_dim);
        let w2 = &self.params.layers()[1][..k * h];
        let (gw2, gb2) = g1.split_at_mut(k * h);
        s.d_hidden.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..k {
            let dc = weight * s.d_out[c];
            gb2[c] += dc;
            let row = &mut gw2[c * h..(c + 1) * h];
            let wrow = &w2[c * h..(c + 1) * h];
            for j in 0..h {
                row[j] += dc * s.hidden[j];
                s.d_hidden[j] += dc * wrow[j];
            }
        }
        let (gw1, gb1) = g0.split_at_mut(h * d);
        for j in 0..h {
            let a = s.hidden[j];
            let dz = s.d_hidden[j] * a * (1.0 - a);
            gb1[j] += dz;
            let row = &mut gw1[j * d..(j + 1) * d];
            for (g, xi) in row.iter_mut().zip(x) {
                *g += dz * xi;
            }
        }
    }

    /// Mean loss and gradient over the given rows.
    pub(crate) fn loss_and_gradient_rows(&self, data: &Dataset, rows: &[usize]) -> (f64, ParamVector) {
        let mut grad = self.params.zeros_like();
        if rows.is_empty() {
            return (0.0, grad);
        }
        let w = 1.0 / rows.len() as f64;
        let mut s = self.scratch();
        let mut loss = 0.0;
        let (l0, rest) = grad.first_two_layers_mut();
        for &i in rows {
            self.forward_into(data.row(i), &mut s);
            loss += self.sample_loss(data, i, &mut s);
            self.backward_into(data.row(i), &mut s, w, l0, rest);
        }
        (loss * w, grad)
    }

    fn loss_rows(&self, data: &Dataset, rows: impl Iterator<Item = usize>) -> (f64, usize) {
        let mut s = self.scratch();
        let mut loss = 0.0;
        let mut count = 0;
        for i in rows {
            self.forward_into(data.row(i), &mut s);
            loss += self.sample_loss(data, i, &mut s);
            count += 1;
        }
        (loss, count)
    }

    /// Gradient of the mean loss over `rows` (a mini-batch), without copying data.
    pub fn gradient_rows(&self, data: &Dataset, rows: &[usize]) -> Result<ParamVector> {
        self.check_data(data)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= data.n()) {
            return Err(FdaError::shape(format!("row {bad} out of range")));
        }
        Ok(self.loss_and_gradient_rows(data, rows).1)
    }

    /// Per-sample gradients `∇ℓ(θ, z_i)` as a row-major `n × total_dim` matrix.
    pub fn per_sample_gradients(&self, data: &Dataset) -> Result<Vec<f64>> {
        self.check_data(data)?;
        let layout = self.params.layout();
        let m = self.params.total_dim();
        let mut out = vec![0.0; data.n() * m];
        let mut s = self.scratch();
        for (i, row) in out.chunks_mut(m).enumerate() {
            self.forward_into(data.row(i), &mut s);
            self.sample_loss(data, i, &mut s);
            let (g0, g1) = row.split_at_mut(layout[0]);
            self.backward_into(data.row(i), &mut s, 1.0, g0, g1);
        }
        Ok(out)
    }
}

/// Empirical loss `(1/n) Σ ℓ(θ, z)`.
pub fn loss(model: &Model, data: &Dataset) -> Result<f64> {
    model.check_data(data)?;
    let (total, n) = model.loss_rows(data, 0..data.n());
    Ok(total / n as f64)
}

/// Exact gradient of [`loss`] with respect to the parameters.
pub fn gradient(model: &Model, data: &Dataset) -> Result<ParamVector> {
    model.check_data(data)?;
    let rows: Vec<usize> = (0..data.n()).collect();
    Ok(model.loss_and_gradient_rows(data, &rows).1)
}

/// One full-batch gradient step; the input model is left untouched.
pub fn sgd_step(model: &Model, data: &Dataset, lr: f64) -> Result<Model> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(FdaError::config(
            "lr",
            format!("must be a positive finite number, got {lr}"),
        ));
    }
    let g = gradient(model, data)?;
    let mut next = model.clone();
    next.params.axpy(-lr, &g)?;
    if !next.params.is_finite() {
        return Err(FdaError::Numeric("parameters diverged after SGD step".into()));
    }
    Ok(next)
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<Metrics> {
    model.check_data(data)?;
    let mut s = model.scratch();
    let mut total = 0.0;
    let mut correct = 0usize;
    for i in 0..data.n() {
        model.forward_into(data.row(i), &mut s);
        total += model.sample_loss(data, i, &mut s);
        if let Some(y) = data.label(i) {
            // first maximal logit wins ties
            let mut best = 0;
            for c in 1..model.output_dim {
                if s.out[c] > s.out[best] {
                    best = c;
                }
            }
            if best == y {
                correct += 1;
            }
        }
    }
    let n = data.n() as f64;
    Ok(Metrics {
        loss: total / n,
        accuracy: data.is_classification().then(|| correct as f64 / n),
    })
}
