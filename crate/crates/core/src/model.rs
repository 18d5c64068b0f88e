//! Differentiable models and the local training procedure run by each client.
//!
//! Two model families are supported: a single-slope regressor `y = w·x`
//! (no bias) and a multilayer perceptron with ReLU hidden layers and a
//! softmax output. Parameters travel as one flat [`ParamVector`]; the
//! flattening order is layers in forward order, each layer's weight
//! matrix (`fan_in × fan_out`, row-major) followed by its bias.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlicError, Result};
use crate::params::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearRegression1d,
    MlpClassifier,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    kind: ModelKind,
    input_dim: usize,
    hidden_dims: Vec<usize>,
    num_classes: usize,
}

impl ModelSpec {
    pub fn linear_regression_1d() -> Self {
        Self { kind: ModelKind::LinearRegression1d, input_dim: 1, hidden_dims: Vec::new(), num_classes: 1 }
    }

    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 || hidden_dims.contains(&0) {
            return Err(FlicError::config("mlp dimensions (input, hidden, classes) must all be positive"));
        }
        Ok(Self { kind: ModelKind::MlpClassifier, input_dim, hidden_dims, num_classes })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.hidden_dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_classifier(&self) -> bool {
        self.kind == ModelKind::MlpClassifier
    }

    /// `(fan_in, fan_out)` per layer, in forward order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        match self.kind {
            ModelKind::LinearRegression1d => vec![(1, 1)],
            ModelKind::MlpClassifier => {
                let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
                dims.push(self.input_dim);
                dims.extend_from_slice(&self.hidden_dims);
                dims.push(self.num_classes);
                dims.windows(2).map(|w| (w[0], w[1])).collect()
            }
        }
    }

    fn has_bias(&self) -> bool {
        self.kind == ModelKind::MlpClassifier
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|&(i, o)| i * o + if self.has_bias() { o } else { 0 }).sum()
    }

    /// FNV-1a over the architecture; stamped on every vector of this model.
    pub fn digest(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        let mut feed = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        feed(self.kind as u64);
        feed(self.input_dim as u64);
        feed(self.hidden_dims.len() as u64);
        for &d in &self.hidden_dims {
            feed(d as u64);
        }
        feed(self.num_classes as u64);
        h
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector::zeros(self.param_count(), self.digest())
    }

    pub fn wrap(&self, values: Vec<f64>) -> Result<ParamVector> {
        if values.len() != self.param_count() {
            return Err(FlicError::Shape {
                what: "parameter vector",
                expected: self.param_count(),
                actual: values.len(),
            });
        }
        Ok(ParamVector::new(values, self.digest()))
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count());
        for (fan_in, fan_out) in self.layer_shapes() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)));
            if self.has_bias() {
                values.extend(std::iter::repeat_n(0.0, fan_out));
            }
        }
        ParamVector::new(values, self.digest())
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(FlicError::Shape {
                what: "parameter vector",
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        if params.digest() != self.digest() {
            return Err(FlicError::Precondition("parameter vector was produced by a different model".into()));
        }
        Ok(())
    }

    fn check_inputs(&self, inputs: &ArrayView2<'_, f64>) -> Result<()> {
        if inputs.ncols() != self.input_dim {
            return Err(FlicError::Shape { what: "input columns", expected: self.input_dim, actual: inputs.ncols() });
        }
        Ok(())
    }

    /// Splits a flat vector into per-layer `(weights, bias)` views.
    fn layer_views<'a>(&self, params: &'a ParamVector) -> Vec<LayerView<'a>> {
        let data = params.as_slice();
        let mut offset = 0;
        self.layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let w = ArrayView2::from_shape((fan_in, fan_out), &data[offset..offset + fan_in * fan_out])
                    .expect("layer shape matches parameter count");
                offset += fan_in * fan_out;
                let b = if self.has_bias() {
                    let b = ArrayView1::from(&data[offset..offset + fan_out]);
                    offset += fan_out;
                    Some(b)
                } else {
                    None
                };
                LayerView { weights: w, bias: b }
            })
            .collect()
    }

    pub fn unflatten(&self, params: &ParamVector) -> Result<Vec<Layer>> {
        self.check_params(params)?;
        Ok(self
            .layer_views(params)
            .into_iter()
            .map(|v| Layer { weights: v.weights.to_owned(), bias: v.bias.map(|b| b.to_owned()) })
            .collect())
    }

    pub fn flatten(&self, layers: &[Layer]) -> Result<ParamVector> {
        let shapes = self.layer_shapes();
        if layers.len() != shapes.len() {
            return Err(FlicError::Shape { what: "layer count", expected: shapes.len(), actual: layers.len() });
        }
        let mut values = Vec::with_capacity(self.param_count());
        for (layer, (fan_in, fan_out)) in layers.iter().zip(shapes) {
            if layer.weights.dim() != (fan_in, fan_out) {
                return Err(FlicError::Shape {
                    what: "layer weights",
                    expected: fan_in * fan_out,
                    actual: layer.weights.len(),
                });
            }
            values.extend(layer.weights.iter().copied());
            match (&layer.bias, self.has_bias()) {
                (Some(b), true) if b.len() == fan_out => values.extend(b.iter().copied()),
                (None, false) => {}
                _ => {
                    return Err(FlicError::Shape {
                        what: "layer bias",
                        expected: if self.has_bias() { fan_out } else { 0 },
                        actual: layer.bias.as_ref().map_or(0, |b| b.len()),
                    })
                }
            }
        }
        self.wrap(values)
    }
}

/// One dense layer: `out = in · weights + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

struct LayerView<'a> {
    weights: ArrayView2<'a, f64>,
    bias: Option<ArrayView1<'a, f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Labels(v) => Targets::Labels(idx.iter().map(|&i| v[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Input rows paired with their targets. Minibatches are row subsets.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    inputs: Array2<f64>,
    targets: Targets,
}

impl Samples {
    pub fn new(inputs: Array2<f64>, targets: Targets) -> Result<Self> {
        if inputs.nrows() != targets.len() {
            return Err(FlicError::Shape { what: "target count", expected: inputs.nrows(), actual: targets.len() });
        }
        Ok(Self { inputs, targets })
    }

    pub fn empty(input_dim: usize, classifier: bool) -> Self {
        let targets = if classifier { Targets::Labels(Vec::new()) } else { Targets::Values(Vec::new()) };
        Self { inputs: Array2::zeros((0, input_dim)), targets }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Labels(l) => Some(l),
            Targets::Values(_) => None,
        }
    }

    pub fn select(&self, idx: &[usize]) -> Samples {
        Samples { inputs: self.inputs.select(Axis(0), idx), targets: self.targets.select(idx) }
    }
}

/// Per-row outputs: logits for a classifier, `w·x` (one column) for the regressor.
pub fn forward(spec: &ModelSpec, params: &ParamVector, inputs: &Array2<f64>) -> Result<Array2<f64>> {
    spec.check_params(params)?;
    let inputs = inputs.view();
    spec.check_inputs(&inputs)?;
    let layers = spec.layer_views(params);
    let mut act = inputs.to_owned();
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        let mut z = act.dot(&layer.weights);
        if let Some(b) = &layer.bias {
            z += b;
        }
        if l != last {
            z.mapv_inplace(|v| v.max(0.0));
        }
        act = z;
    }
    Ok(act)
}

/// Mean loss over the batch and its gradient with respect to the flat parameters.
///
/// Regression uses mean squared error; the classifier uses mean softmax
/// cross-entropy.
pub fn loss_and_grad(spec: &ModelSpec, params: &ParamVector, batch: &Samples) -> Result<(f64, ParamVector)> {
    spec.check_params(params)?;
    spec.check_inputs(&batch.inputs.view())?;
    if batch.is_empty() {
        return Err(FlicError::Precondition("loss over an empty batch".into()));
    }
    let (loss, grad) = match (&batch.targets, spec.kind) {
        (Targets::Values(y), ModelKind::LinearRegression1d) => regression_loss_and_grad(params, &batch.inputs, y),
        (Targets::Labels(y), ModelKind::MlpClassifier) => mlp_loss_and_grad(spec, params, &batch.inputs, y)?,
        _ => return Err(FlicError::Precondition("target kind does not match the model kind".into())),
    };
    if !loss.is_finite() {
        return Err(FlicError::Numerical { quantity: "loss", site: Default::default() });
    }
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(FlicError::Numerical { quantity: "gradient", site: Default::default() });
    }
    Ok((loss, ParamVector::new(grad, spec.digest())))
}

fn regression_loss_and_grad(params: &ParamVector, x: &Array2<f64>, y: &[f64]) -> (f64, Vec<f64>) {
    let w = params[0];
    let n = y.len() as f64;
    let (mut loss, mut grad) = (0.0, 0.0);
    for (xi, &yi) in x.column(0).iter().zip(y) {
        let r = w * xi - yi;
        loss += r * r;
        grad += 2.0 * r * xi;
    }
    (loss / n, vec![grad / n])
}

fn mlp_loss_and_grad(spec: &ModelSpec, params: &ParamVector, x: &Array2<f64>, y: &[usize]) -> Result<(f64, Vec<f64>)> {
    if let Some(&bad) = y.iter().find(|&&c| c >= spec.num_classes) {
        return Err(FlicError::Precondition(format!("label {bad} outside {} classes", spec.num_classes)));
    }
    let layers = spec.layer_views(params);
    let n = y.len() as f64;

    // activations[l] is the input to layer l
    let mut activations: Vec<Array2<f64>> = Vec::with_capacity(layers.len());
    activations.push(x.to_owned());
    let last = layers.len() - 1;
    let mut logits = Array2::zeros((0, 0));
    for (l, layer) in layers.iter().enumerate() {
        let mut z = activations[l].dot(&layer.weights);
        if let Some(b) = &layer.bias {
            z += b;
        }
        if l == last {
            logits = z;
        } else {
            z.mapv_inplace(|v| v.max(0.0));
            activations.push(z);
        }
    }

    // softmax cross-entropy; dz = (p - onehot) / n
    let mut loss = 0.0;
    let mut dz = logits;
    for (mut row, &label) in dz.outer_iter_mut().zip(y) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let label_shifted = row[label] - max;
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        loss += sum.ln() - label_shifted;
        row.mapv_inplace(|v| v / sum);
        row[label] -= 1.0;
        row.mapv_inplace(|v| v / n);
    }

    let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(layers.len());
    for l in (0..layers.len()).rev() {
        let dw = activations[l].t().dot(&dz);
        let db = dz.sum_axis(Axis(0));
        if l > 0 {
            let mut da = dz.dot(&layers[l].weights.t());
            da.zip_mut_with(&activations[l], |g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
            dz = da;
        }
        grads.push((dw, db));
    }
    grads.reverse();

    let mut flat = Vec::with_capacity(spec.param_count());
    for (dw, db) in grads {
        flat.extend(dw.iter().copied());
        flat.extend(db.iter().copied());
    }
    Ok((loss / n, flat))
}

/// Local SGD hyperparameters: epochs `E`, batch size `B`, learning rate `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl LocalTraining {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(FlicError::config("local epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(FlicError::config("batch size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(FlicError::config("learning rate must be a non-negative finite number"));
        }
        Ok(())
    }
}

/// What a client sends back after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    /// `w - w_final`
    pub delta: ParamVector,
    pub num_samples: usize,
    /// SGD steps taken.
    pub steps: usize,
    /// Mean minibatch loss over the final epoch.
    pub train_loss: f64,
}

/// Runs `E` epochs of minibatch SGD from `w` on `data` and returns the update.
pub fn client_update<R: Rng + ?Sized>(
    spec: &ModelSpec,
    w: &ParamVector,
    data: &Samples,
    training: &LocalTraining,
    rng: &mut R,
) -> Result<ClientUpdate> {
    client_update_observed(spec, w, data, training, rng, |_, _| {})
}

/// [`client_update`] with a callback invoked after every SGD step with the
/// step index and that minibatch's loss.
pub fn client_update_observed<R, F>(
    spec: &ModelSpec,
    w: &ParamVector,
    data: &Samples,
    training: &LocalTraining,
    rng: &mut R,
    mut on_step: F,
) -> Result<ClientUpdate>
where
    R: Rng + ?Sized,
    F: FnMut(usize, f64),
{
    training.validate()?;
    if data.is_empty() {
        return Err(FlicError::config("client has no training samples"));
    }
    spec.check_params(w)?;

    let n = data.len();
    let mut local = w.clone();
    let mut order: Vec<usize> = (0..n).collect();
    let mut steps = 0;
    let mut epoch_loss = 0.0;
    for _ in 0..training.epochs {
        order.shuffle(rng);
        epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(training.batch_size) {
            let batch = data.select(chunk);
            let (loss, grad) = loss_and_grad(spec, &local, &batch)?;
            local.axpy(-training.learning_rate, &grad)?;
            on_step(steps, loss);
            steps += 1;
            batches += 1;
            epoch_loss += loss;
        }
        epoch_loss /= batches as f64;
    }
    if !local.is_finite() {
        return Err(FlicError::Numerical { quantity: "local parameters", site: Default::default() });
    }
    Ok(ClientUpdate { delta: w.sub(&local)?, num_samples: n, steps, train_loss: epoch_loss })
}

/// Index of the largest logit per row; ties go to the lowest class.
pub fn predict_classes(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Fraction of correct argmax predictions (classifier) or negative mean
/// squared error (regressor).
pub fn evaluate(spec: &ModelSpec, params: &ParamVector, samples: &Samples) -> Result<f64> {
    if samples.is_empty() {
        return Err(FlicError::config("evaluation set is empty"));
    }
    let out = forward(spec, params, &samples.inputs)?;
    match &samples.targets {
        Targets::Labels(y) => {
            let pred = predict_classes(&out);
            let correct = pred.iter().zip(y).filter(|(p, t)| p == t).count();
            Ok(correct as f64 / y.len() as f64)
        }
        Targets::Values(y) => {
            let mse = out.slice(s![.., 0]).iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y.len() as f64;
            Ok(-mse)
        }
    }
}
