//! Dense layers with analytic backward passes, Glorot initialization and Adam.
//!
//! Activations are row-batched: an input is `batch x fan_in` and a layer
//! computes `act(X W + 1 b')` with `W` stored as `fan_in x fan_out`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
        }
    }
}

/// Uniform draws on `[-limit, limit]` with `limit = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> DMatrix<f64> {
    let limit = glorot_limit(fan_in, fan_out);
    DMatrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..=limit))
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }
}

/// A chain of dense layers. Mutation through [`DenseStack::layers_mut`] or
/// [`Parameterized::tensors_mut`] invalidates outstanding tapes.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseStack {
    layers: Vec<Dense>,
    generation: u64,
}

/// Per-layer inputs and pre-activations recorded by a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    generation: u64,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackGrad {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl StackGrad {
    /// Flattens into the tensor order of [`Parameterized::tensors`].
    pub fn flatten(self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.into_iter().zip(self.biases) {
            out.push(w.as_slice().to_vec());
            out.push(b.as_slice().to_vec());
        }
        out
    }
}

impl DenseStack {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::shape(
                    "layer chaining",
                    pair[0].fan_out(),
                    pair[1].fan_in(),
                ));
            }
        }
        for l in &layers {
            if l.bias.len() != l.fan_out() {
                return Err(Error::shape("layer bias", l.fan_out(), l.bias.len()));
            }
        }
        Ok(DenseStack {
            layers,
            generation: 0,
        })
    }

    /// Glorot-initialized stack through `widths` (input first). Every layer
    /// but the last uses `hidden`; the last uses `output`. Biases start at zero.
    pub fn glorot<R: Rng>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(
            widths.len() >= 2,
            "a stack needs an input and an output width"
        );
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|k| Dense {
                weight: glorot_uniform(widths[k], widths[k + 1], rng),
                bias: DVector::zeros(widths[k + 1]),
                activation: if k + 1 == n { output } else { hidden },
            })
            .collect();
        DenseStack {
            layers,
            generation: 0,
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, Dense::fan_in)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Dense::fan_out)
    }

    pub fn zero_grad(&self) -> StackGrad {
        StackGrad {
            weights: self
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.fan_in(), l.fan_out()))
                .collect(),
            biases: self
                .layers
                .iter()
                .map(|l| DVector::zeros(l.fan_out()))
                .collect(),
        }
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_width() {
            return Err(Error::shape("dense stack input", self.input_width(), cols));
        }
        Ok(())
    }

    fn affine(layer: &Dense, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x * &layer.weight;
        for mut row in z.row_iter_mut() {
            row += layer.bias.transpose();
        }
        z
    }

    /// Forward pass recording what [`DenseStack::backward`] needs on `tape`.
    pub fn forward(&self, x: &DMatrix<f64>, tape: &mut Tape) -> Result<DMatrix<f64>> {
        self.check_input(x.ncols())?;
        tape.inputs.clear();
        tape.pre.clear();
        tape.generation = self.generation;
        let mut a = x.clone();
        for layer in &self.layers {
            let z = Self::affine(layer, &a);
            let next = z.map(|v| layer.activation.apply(v));
            tape.inputs.push(a);
            tape.pre.push(z);
            a = next;
        }
        Ok(a)
    }

    /// Forward pass without a tape.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x.ncols())?;
        let mut a = x.clone();
        for layer in &self.layers {
            let act = layer.activation;
            a = Self::affine(layer, &a).map(|v| act.apply(v));
        }
        Ok(a)
    }

    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let out = self.predict(&DMatrix::from_row_slice(1, x.len(), x))?;
        Ok(out.iter().copied().collect())
    }

    /// Back-propagates `upstream` (`batch x fan_out`, the loss gradient at the
    /// output) and returns parameter gradients summed over the batch together
    /// with the gradient at the input.
    pub fn backward(
        &self,
        tape: &Tape,
        upstream: &DMatrix<f64>,
    ) -> Result<(StackGrad, DMatrix<f64>)> {
        if tape.is_empty() {
            return Err(Error::Contract(
                "backward called without a recorded forward pass".into(),
            ));
        }
        if tape.generation != self.generation || tape.inputs.len() != self.layers.len() {
            return Err(Error::Contract(
                "tape is stale: parameters changed since the forward pass".into(),
            ));
        }
        let batch = tape.inputs[0].nrows();
        if upstream.nrows() != batch {
            return Err(Error::shape(
                "upstream gradient rows",
                batch,
                upstream.nrows(),
            ));
        }
        if upstream.ncols() != self.output_width() {
            return Err(Error::shape(
                "upstream gradient width",
                self.output_width(),
                upstream.ncols(),
            ));
        }
        let mut grad = self.zero_grad();
        let mut delta = upstream.clone();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let act = layer.activation;
            delta.zip_apply(&tape.pre[k], |d, z| *d *= act.derivative(z));
            grad.weights[k] = tape.inputs[k].transpose() * &delta;
            grad.biases[k] = delta.row_sum().transpose();
            delta = &delta * layer.weight.transpose();
        }
        Ok((grad, delta))
    }
}

/// A named, column-major view of one parameter tensor.
pub struct TensorView<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a mut [f64],
}

/// Anything exposing an ordered list of trainable tensors.
pub trait Parameterized {
    fn tensors(&self) -> Vec<TensorView<'_>>;
    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>>;
}

impl DenseStack {
    pub(crate) fn named_tensors<'a>(&'a self, prefix: &str) -> Vec<TensorView<'a>> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (k, l) in self.layers.iter().enumerate() {
            out.push(TensorView {
                name: format!("{prefix}.{k}.weight"),
                rows: l.fan_in(),
                cols: l.fan_out(),
                data: l.weight.as_slice(),
            });
            out.push(TensorView {
                name: format!("{prefix}.{k}.bias"),
                rows: l.fan_out(),
                cols: 1,
                data: l.bias.as_slice(),
            });
        }
        out
    }

    pub(crate) fn named_tensors_mut<'a>(&'a mut self, prefix: &str) -> Vec<TensorMut<'a>> {
        self.generation += 1;
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (k, l) in self.layers.iter_mut().enumerate() {
            let (r, c) = l.weight.shape();
            out.push(TensorMut {
                name: format!("{prefix}.{k}.weight"),
                rows: r,
                cols: c,
                data: l.weight.as_mut_slice(),
            });
            out.push(TensorMut {
                name: format!("{prefix}.{k}.bias"),
                rows: c,
                cols: 1,
                data: l.bias.as_mut_slice(),
            });
        }
        out
    }
}

impl Parameterized for DenseStack {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        self.named_tensors("layer")
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        self.named_tensors_mut("layer")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: Parameterized + ?Sized>(config: AdamConfig, params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.data.len()])
            .collect();
        AdamState {
            step: 0,
            config,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort the update
/// before any parameter is touched.
pub fn adam_step<P: Parameterized + ?Sized>(
    params: &mut P,
    grads: &[Vec<f64>],
    state: &mut AdamState,
) -> Result<()> {
    {
        let views = params.tensors();
        if views.len() != grads.len() || views.len() != state.first.len() {
            return Err(Error::shape("adam tensor count", views.len(), grads.len()));
        }
        for (v, g) in views.iter().zip(grads) {
            if v.data.len() != g.len() {
                return Err(Error::shape(
                    format!("adam gradient `{}`", v.name),
                    v.data.len(),
                    g.len(),
                ));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(v.name.clone()));
            }
        }
    }
    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (k, tensor) in params.tensors_mut().into_iter().enumerate() {
        let (m, v) = (&mut state.first[k], &mut state.second[k]);
        for (i, p) in tensor.data.iter_mut().enumerate() {
            let g = grads[k][i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

pub const TENSOR_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    /// Row-major values.
    pub data: Vec<f64>,
}

/// Version-tagged JSON document of named tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorDoc {
    pub version: u32,
    pub tensors: Vec<NamedTensor>,
}

impl TensorDoc {
    pub fn export<P: Parameterized + ?Sized>(params: &P) -> Self {
        let tensors = params
            .tensors()
            .into_iter()
            .map(|t| {
                let mut data = Vec::with_capacity(t.data.len());
                for r in 0..t.rows {
                    for c in 0..t.cols {
                        data.push(t.data[c * t.rows + r]);
                    }
                }
                NamedTensor {
                    name: t.name,
                    shape: [t.rows, t.cols],
                    data,
                }
            })
            .collect();
        TensorDoc {
            version: TENSOR_FORMAT_VERSION,
            tensors,
        }
    }

    /// Copies every tensor into `params`, matching by name and shape.
    pub fn import_into<P: Parameterized + ?Sized>(&self, params: &mut P) -> Result<()> {
        if self.version != TENSOR_FORMAT_VERSION {
            return Err(Error::Contract(format!(
                "unsupported tensor format version {}",
                self.version
            )));
        }
        let targets = params.tensors_mut();
        if targets.len() != self.tensors.len() {
            return Err(Error::shape(
                "tensor count",
                targets.len(),
                self.tensors.len(),
            ));
        }
        for t in targets {
            let src = self
                .tensors
                .iter()
                .find(|s| s.name == t.name)
                .ok_or_else(|| {
                    Error::Contract(format!("tensor `{}` missing from document", t.name))
                })?;
            if src.shape != [t.rows, t.cols] || src.data.len() != t.rows * t.cols {
                return Err(Error::shape(
                    format!("tensor `{}`", t.name),
                    t.rows * t.cols,
                    src.data.len(),
                ));
            }
            for r in 0..t.rows {
                for c in 0..t.cols {
                    t.data[c * t.rows + r] = src.data[r * t.cols + c];
                }
            }
        }
        Ok(())
    }
}

/// Central finite differences of `loss` with respect to every parameter.
/// Used as an oracle for analytic gradients.
pub fn finite_difference<P, F>(params: &P, h: f64, loss: F) -> Vec<Vec<f64>>
where
    P: Parameterized + Clone,
    F: Fn(&P) -> f64,
{
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
    let mut out = Vec::with_capacity(sizes.len());
    let mut work = params.clone();
    for (k, &size) in sizes.iter().enumerate() {
        let mut g = vec![0.0; size];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work.tensors()[k].data[i];
            work.tensors_mut()[k].data[i] = orig + h;
            let up = loss(&work);
            work.tensors_mut()[k].data[i] = orig - h;
            let down = loss(&work);
            work.tensors_mut()[k].data[i] = orig;
            *gi = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Largest `|analytic - numeric| / max(1, |numeric|)` for each tensor.
pub fn gradient_errors<P: Parameterized + ?Sized>(
    params: &P,
    analytic: &[Vec<f64>],
    numeric: &[Vec<f64>],
) -> Vec<(String, f64)> {
    params
        .tensors()
        .iter()
        .zip(analytic.iter().zip(numeric))
        .map(|(t, (a, n))| {
            let err = a
                .iter()
                .zip(n)
                .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
                .fold(0.0, f64::max);
            (t.name.clone(), err)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_layer(n: usize, act: Activation) -> DenseStack {
        DenseStack::from_layers(vec![Dense {
            weight: DMatrix::identity(n, n),
            bias: DVector::zeros(n),
            activation: act,
        }])
        .unwrap()
    }

    #[test]
    fn identity_and_relu_forward() {
        assert_eq!(
            identity_layer(2, Activation::Linear)
                .forward_vec(&[2.0, -1.0])
                .unwrap(),
            vec![2.0, -1.0]
        );
        assert_eq!(
            identity_layer(2, Activation::Relu)
                .forward_vec(&[-3.0, 4.0])
                .unwrap(),
            vec![0.0, 4.0]
        );
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let s = identity_layer(3, Activation::Linear);
        assert!(matches!(
            s.forward_vec(&[1.0, 2.0]),
            Err(Error::Shape {
                expected: 3,
                actual: 2,
                ..
            })
        ));
    }

    // Plain nested-loop evaluation, independent of the matrix code path.
    fn oracle_forward(stack: &DenseStack, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for l in stack.layers() {
            let mut next = vec![0.0; l.fan_out()];
            for (o, n) in next.iter_mut().enumerate() {
                let mut s = l.bias[o];
                for (i, ai) in a.iter().enumerate() {
                    s += ai * l.weight[(i, o)];
                }
                *n = match l.activation {
                    Activation::Linear => s,
                    Activation::Relu => {
                        if s > 0.0 {
                            s
                        } else {
                            0.0
                        }
                    }
                    Activation::Tanh => s.tanh(),
                };
            }
            a = next;
        }
        a
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for act in [Activation::Relu, Activation::Tanh] {
            let stack = DenseStack::glorot(&[5, 7, 3], act, Activation::Linear, &mut rng);
            for _ in 0..20 {
                let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
                let got = stack.forward_vec(&x).unwrap();
                let want = oracle_forward(&stack, &x);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-12);
                }
            }
        }
    }

    fn scalarized_loss(stack: &DenseStack, x: &DMatrix<f64>, probe: &DMatrix<f64>) -> f64 {
        stack.predict(x).unwrap().component_mul(probe).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for act in [Activation::Linear, Activation::Relu, Activation::Tanh] {
            for _ in 0..10 {
                let mut stack = DenseStack::glorot(&[4, 6, 5, 3], act, Activation::Tanh, &mut rng);
                for l in stack.layers_mut() {
                    l.bias = DVector::from_fn(l.fan_out(), |_, _| rng.random_range(-0.5..0.5));
                }
                let x = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.5..1.5));
                let probe = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
                let mut tape = Tape::new();
                stack.forward(&x, &mut tape).unwrap();
                let (grad, dx) = stack.backward(&tape, &probe).unwrap();
                let analytic = grad.flatten();
                let numeric = finite_difference(&stack, 1e-5, |s| scalarized_loss(s, &x, &probe));
                for (name, err) in gradient_errors(&stack, &analytic, &numeric) {
                    assert!(err < 1e-4, "{act:?} {name}: {err}");
                }
                // input gradient
                for i in 0..3 {
                    for j in 0..4 {
                        let mut xp = x.clone();
                        xp[(i, j)] += 1e-5;
                        let mut xm = x.clone();
                        xm[(i, j)] -= 1e-5;
                        let fd = (scalarized_loss(&stack, &xp, &probe)
                            - scalarized_loss(&stack, &xm, &probe))
                            / 2e-5;
                        assert!((fd - dx[(i, j)]).abs() / fd.abs().max(1.0) < 1e-4);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stack = DenseStack::glorot(&[3, 4, 2], Activation::Relu, Activation::Linear, &mut rng);
        let mut tape = Tape::new();
        stack
            .forward(&DMatrix::from_element(2, 3, 0.7), &mut tape)
            .unwrap();
        let (g, dx) = stack.backward(&tape, &DMatrix::zeros(2, 2)).unwrap();
        assert!(g.flatten().iter().flatten().all(|v| *v == 0.0));
        assert!(dx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_layer_weight_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let stack = DenseStack::glorot(&[3, 2], Activation::Linear, Activation::Linear, &mut rng);
        let x = DMatrix::from_row_slice(1, 3, &[1.0, -2.0, 0.5]);
        let up = DMatrix::from_row_slice(1, 2, &[0.3, -1.1]);
        let mut tape = Tape::new();
        stack.forward(&x, &mut tape).unwrap();
        let (g, _) = stack.backward(&tape, &up).unwrap();
        for i in 0..3 {
            for o in 0..2 {
                assert_eq!(g.weights[0][(i, o)], x[(0, i)] * up[(0, o)]);
            }
        }
    }

    #[test]
    fn backward_requires_fresh_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut stack = DenseStack::glorot(&[2, 2], Activation::Relu, Activation::Linear, &mut rng);
        let up = DMatrix::zeros(1, 2);
        assert!(matches!(
            stack.backward(&Tape::new(), &up),
            Err(Error::Contract(_))
        ));
        let mut tape = Tape::new();
        stack.forward(&DMatrix::zeros(1, 2), &mut tape).unwrap();
        stack.layers_mut()[0].bias[0] = 1.0;
        assert!(matches!(
            stack.backward(&tape, &up),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn glorot_bounds_and_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w = glorot_uniform(100, 150, &mut rng);
        let limit = glorot_limit(100, 150);
        assert!(w.iter().all(|v| v.abs() <= limit));
        let n = w.len() as f64;
        let m = w.sum() / n;
        let var = w.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        let expected = limit * limit / 3.0;
        assert!((var - expected).abs() / expected < 0.05);
    }

    #[derive(Clone)]
    struct Scalar(Vec<f64>);

    impl Parameterized for Scalar {
        fn tensors(&self) -> Vec<TensorView<'_>> {
            vec![TensorView {
                name: "w".into(),
                rows: self.0.len(),
                cols: 1,
                data: &self.0,
            }]
        }
        fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
            let rows = self.0.len();
            vec![TensorMut {
                name: "w".into(),
                rows,
                cols: 1,
                data: &mut self.0,
            }]
        }
    }

    #[test]
    fn adam_first_step() {
        let mut p = Scalar(vec![1.0]);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut st = AdamState::new(cfg, &p);
        adam_step(&mut p, &[vec![1.0]], &mut st).unwrap();
        // m_hat = 1, v_hat = 1 -> step = 0.1 / (1 + 1e-8)
        assert!((p.0[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = Scalar(vec![0.3, -2.0]);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        for _ in 0..5 {
            adam_step(&mut p, &[vec![0.0, 0.0]], &mut st).unwrap();
        }
        assert_eq!(p.0, vec![0.3, -2.0]);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = Scalar(vec![0.3]);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        assert!(
            matches!(adam_step(&mut p, &[vec![f64::NAN]], &mut st), Err(Error::NonFinite(n)) if n == "w")
        );
        assert_eq!(p.0, vec![0.3]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn adam_runs_are_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut stack =
                DenseStack::glorot(&[3, 4, 1], Activation::Relu, Activation::Linear, &mut rng);
            let mut st = AdamState::new(AdamConfig::default(), &stack);
            let x = DMatrix::from_fn(8, 3, |i, j| ((i * 3 + j) as f64).sin());
            for _ in 0..100 {
                let mut tape = Tape::new();
                let out = stack.forward(&x, &mut tape).unwrap();
                let (g, _) = stack.backward(&tape, &out).unwrap();
                adam_step(&mut stack, &g.flatten(), &mut st).unwrap();
            }
            stack
        };
        let (a, b) = (run(), run());
        for (ta, tb) in a.tensors().iter().zip(b.tensors().iter()) {
            assert!(ta
                .data
                .iter()
                .zip(tb.data)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn tensor_doc_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DenseStack::glorot(&[3, 2, 2], Activation::Relu, Activation::Linear, &mut rng);
        let doc = TensorDoc::export(&a);
        assert_eq!(doc.tensors[0].shape, [3, 2]);
        assert_eq!(doc.tensors[0].data[1], a.layers()[0].weight[(0, 1)]);
        let json = serde_json::to_string(&doc).unwrap();
        let mut b = DenseStack::glorot(&[3, 2, 2], Activation::Relu, Activation::Linear, &mut rng);
        serde_json::from_str::<TensorDoc>(&json)
            .unwrap()
            .import_into(&mut b)
            .unwrap();
        assert_eq!(a.layers(), b.layers());
    }
}
