//! Small differentiable models with hand-written forward and backward passes.
//!
//! Network weights are one flat vector. Layers are stored in order; each
//! layer is its `fan_out × fan_in` weight matrix in row-major order followed
//! by its `fan_out` biases. Aggregation and serialization rely on this layout
//! and never reinterpret it.
//!
//! The pixel segmenter is a per-pixel MLP: an example row holds `pixels`
//! consecutive feature blocks of `input_dim` values, and the model emits one
//! sigmoid foreground probability per pixel. The selector and the classifier
//! are softmax MLPs. The quadratic kind is the test objective
//! `½‖w − c‖²` whose centers `c` arrive as batch targets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{example_loss, LossKind, OutputActivation};
use crate::math::{Differentiable, Matrix, ParamVector, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    MlpClassifier,
    PixelSegmenter,
    SelectorNet,
    Quadratic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Network kinds: input width, hidden widths, output width. Quadratic
    /// kind: a single entry, the parameter dimension.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Pixels per example for the segmenter; 1 for every other kind.
    #[serde(default = "one")]
    pub pixels: usize,
    /// Quadratic kind only: the center used by [`forward`].
    #[serde(default)]
    pub centers: Vec<ParamVector>,
}

fn one() -> usize {
    1
}

impl ModelSpec {
    pub fn mlp_classifier(widths: &[usize], activation: Activation) -> Self {
        Self::network(ModelKind::MlpClassifier, widths, activation, 1)
    }

    pub fn selector(widths: &[usize], activation: Activation) -> Self {
        Self::network(ModelKind::SelectorNet, widths, activation, 1)
    }

    /// Per-pixel segmenter with `widths[0]` features per pixel and a single
    /// output unit.
    pub fn pixel_segmenter(widths: &[usize], activation: Activation, pixels: usize) -> Self {
        Self::network(ModelKind::PixelSegmenter, widths, activation, pixels)
    }

    pub fn quadratic(dim: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Quadratic,
            layer_widths: vec![dim],
            activation: Activation::Tanh,
            input_dim: 1,
            output_dim: 1,
            pixels: 1,
            centers: Vec::new(),
        }
    }

    fn network(kind: ModelKind, widths: &[usize], activation: Activation, pixels: usize) -> Self {
        ModelSpec {
            kind,
            layer_widths: widths.to_vec(),
            activation,
            input_dim: widths.first().copied().unwrap_or(0),
            output_dim: widths.last().copied().unwrap_or(0),
            pixels,
            centers: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.contains(&0) || self.layer_widths.is_empty() {
            return Err(Error::invalid("layer widths must be positive and non-empty"));
        }
        if self.pixels == 0 {
            return Err(Error::invalid("pixels must be positive"));
        }
        match self.kind {
            ModelKind::Quadratic => {
                if self.layer_widths.len() != 1 {
                    return Err(Error::invalid("quadratic spec takes a single width (its dimension)"));
                }
                if let Some(c) = self.centers.iter().find(|c| c.dim() != self.layer_widths[0]) {
                    return Err(Error::DimensionMismatch {
                        left: self.layer_widths[0],
                        right: c.dim(),
                    });
                }
            }
            _ => {
                if self.layer_widths.len() < 2 {
                    return Err(Error::invalid("network needs at least input and output widths"));
                }
                if self.layer_widths[0] != self.input_dim
                    || *self.layer_widths.last().unwrap() != self.output_dim
                {
                    return Err(Error::invalid(format!(
                        "layer widths {:?} disagree with input_dim {} / output_dim {}",
                        self.layer_widths, self.input_dim, self.output_dim
                    )));
                }
                if self.kind == ModelKind::PixelSegmenter && self.output_dim != 1 {
                    return Err(Error::invalid("pixel segmenter has exactly one output unit"));
                }
                if self.kind != ModelKind::PixelSegmenter && self.pixels != 1 {
                    return Err(Error::invalid("only the pixel segmenter takes pixels > 1"));
                }
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::Quadratic => self.layer_widths[0],
            _ => self
                .layer_widths
                .windows(2)
                .map(|w| w[0] * w[1] + w[1])
                .sum(),
        }
    }

    /// Width of one example's input row.
    pub fn input_row_width(&self) -> usize {
        self.input_dim * self.pixels
    }

    /// Width of one example's target row.
    pub fn target_row_width(&self) -> usize {
        match self.kind {
            ModelKind::Quadratic => self.layer_widths[0],
            _ => self.output_dim * self.pixels,
        }
    }

    pub fn output_activation(&self) -> OutputActivation {
        match self.kind {
            ModelKind::PixelSegmenter => OutputActivation::Sigmoid,
            _ => OutputActivation::Softmax,
        }
    }
}

/// A set of examples. For every kind the target row width follows
/// [`ModelSpec::target_row_width`]; class targets are one-hot rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::DimensionMismatch {
                left: inputs.rows(),
                right: targets.rows(),
            });
        }
        Ok(Batch { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(idx),
            targets: self.targets.select_rows(idx),
        }
    }

    pub fn concat(parts: &[&Batch]) -> Result<Batch> {
        let inputs: Vec<&Matrix> = parts.iter().map(|b| &b.inputs).collect();
        let targets: Vec<&Matrix> = parts.iter().map(|b| &b.targets).collect();
        Batch::new(Matrix::vstack(&inputs)?, Matrix::vstack(&targets)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub weights: ParamVector,
}

impl Model {
    pub fn new(spec: ModelSpec, weights: ParamVector) -> Result<Self> {
        spec.validate()?;
        if weights.dim() != spec.param_count() {
            return Err(Error::DimensionMismatch {
                left: spec.param_count(),
                right: weights.dim(),
            });
        }
        Ok(Model { spec, weights })
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        forward(&self.spec, &self.weights, inputs)
    }

    pub fn backward(&self, batch: &Batch, loss: LossKind) -> Result<(f64, ParamVector)> {
        backward(&self.spec, &self.weights, batch, loss)
    }
}

/// Glorot-uniform weights, zero biases. Quadratic parameters are drawn from
/// `uniform(−1, 1)`.
pub fn init_weights(spec: &ModelSpec, rng: &RngStream) -> ParamVector {
    let mut r = rng.rng();
    if spec.kind == ModelKind::Quadratic {
        return ParamVector::from_vec((0..spec.param_count()).map(|_| r.random_range(-1.0..=1.0)).collect());
    }
    let mut w = Vec::with_capacity(spec.param_count());
    for pair in spec.layer_widths.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            w.push(r.random_range(-bound..=bound));
        }
        w.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector::from_vec(w)
}

fn check_weights(spec: &ModelSpec, w: &ParamVector) -> Result<()> {
    if w.dim() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            left: spec.param_count(),
            right: w.dim(),
        });
    }
    Ok(())
}

fn check_inputs(spec: &ModelSpec, inputs: &Matrix) -> Result<()> {
    if spec.kind != ModelKind::Quadratic && inputs.cols() != spec.input_row_width() {
        return Err(Error::DimensionMismatch {
            left: spec.input_row_width(),
            right: inputs.cols(),
        });
    }
    Ok(())
}

/// Layer activations from a forward pass. `acts[0]` is the input; the last
/// entry holds output probabilities.
struct Trace {
    acts: Vec<Vec<f64>>,
    rows: usize,
}

fn hidden(act: Activation, z: f64) -> f64 {
    match act {
        Activation::Relu => z.max(0.0),
        Activation::Tanh => z.tanh(),
    }
}

/// Derivative of the hidden activation, expressed through its output `a`.
fn hidden_grad(act: Activation, a: f64) -> f64 {
    match act {
        Activation::Relu => {
            if a > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Tanh => 1.0 - a * a,
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

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// `rows × fan_in` input times the transposed `fan_out × fan_in` weight block,
/// plus bias.
fn affine(x: &[f64], rows: usize, fan_in: usize, fan_out: usize, wb: &[f64]) -> Vec<f64> {
    let (w, b) = wb.split_at(fan_in * fan_out);
    let mut z = vec![0.0; rows * fan_out];
    for i in 0..rows {
        let xi = &x[i * fan_in..(i + 1) * fan_in];
        let zi = &mut z[i * fan_out..(i + 1) * fan_out];
        for o in 0..fan_out {
            let wo = &w[o * fan_in..(o + 1) * fan_in];
            let mut acc = b[o];
            for j in 0..fan_in {
                acc += xi[j] * wo[j];
            }
            zi[o] = acc;
        }
    }
    z
}

fn network_trace(spec: &ModelSpec, w: &[f64], inputs: &Matrix) -> Trace {
    let rows = inputs.rows() * spec.pixels;
    let widths = &spec.layer_widths;
    let n_layers = widths.len() - 1;
    let mut acts = Vec::with_capacity(widths.len());
    acts.push(inputs.as_slice().to_vec());
    let mut offset = 0;
    for l in 0..n_layers {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let size = fan_in * fan_out + fan_out;
        let mut z = affine(&acts[l], rows, fan_in, fan_out, &w[offset..offset + size]);
        offset += size;
        if l + 1 < n_layers {
            z.iter_mut().for_each(|v| *v = hidden(spec.activation, *v));
        } else {
            match spec.output_activation() {
                OutputActivation::Sigmoid => z.iter_mut().for_each(|v| *v = sigmoid(*v)),
                OutputActivation::Softmax => z.chunks_mut(fan_out).for_each(softmax_in_place),
            }
        }
        acts.push(z);
    }
    Trace { acts, rows }
}

/// Per-example outputs: class probabilities (classifier, selector), one
/// foreground probability per pixel (segmenter), or `½‖w − c‖²` with the
/// spec's single center (quadratic).
pub fn forward(spec: &ModelSpec, w: &ParamVector, inputs: &Matrix) -> Result<Matrix> {
    spec.validate()?;
    check_weights(spec, w)?;
    check_inputs(spec, inputs)?;
    if spec.kind == ModelKind::Quadratic {
        let c = match spec.centers.as_slice() {
            [c] => c,
            _ => {
                return Err(Error::invalid(
                    "quadratic forward needs exactly one center in the spec",
                ))
            }
        };
        let v = 0.5 * w.dist_sq(c)?;
        return Matrix::from_vec(inputs.rows(), 1, vec![v; inputs.rows()]);
    }
    let trace = network_trace(spec, w.as_slice(), inputs);
    let out = trace.acts.last().unwrap().clone();
    Matrix::from_vec(inputs.rows(), spec.output_dim * spec.pixels, out)
}

/// Activations of the last hidden layer, one row per input row (per pixel for
/// the segmenter). Networks without a hidden layer return their inputs.
pub fn hidden_features(spec: &ModelSpec, w: &ParamVector, inputs: &Matrix) -> Result<Matrix> {
    spec.validate()?;
    check_weights(spec, w)?;
    check_inputs(spec, inputs)?;
    if spec.kind == ModelKind::Quadratic {
        return Err(Error::invalid("quadratic model has no hidden features"));
    }
    let trace = network_trace(spec, w.as_slice(), inputs);
    let idx = trace.acts.len() - 2;
    let width = spec.layer_widths[idx];
    Matrix::from_vec(trace.rows, width, trace.acts[idx].clone())
}

fn check_batch(spec: &ModelSpec, w: &ParamVector, batch: &Batch) -> Result<()> {
    spec.validate()?;
    check_weights(spec, w)?;
    check_inputs(spec, &batch.inputs)?;
    if batch.is_empty() {
        return Err(Error::Empty("batch has no examples"));
    }
    if batch.targets.cols() != spec.target_row_width() {
        return Err(Error::DimensionMismatch {
            left: spec.target_row_width(),
            right: batch.targets.cols(),
        });
    }
    Ok(())
}

fn quadratic_loss(w: &ParamVector, batch: &Batch, grad: Option<&mut [f64]>) -> f64 {
    let n = batch.len() as f64;
    let wv = w.as_slice();
    let mut acc = 0.0;
    for i in 0..batch.len() {
        let c = batch.targets.row(i);
        acc += wv.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    if let Some(g) = grad {
        g.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..batch.len() {
            for (gj, (wj, cj)) in g.iter_mut().zip(wv.iter().zip(batch.targets.row(i))) {
                *gj += wj - cj;
            }
        }
        g.iter_mut().for_each(|v| *v /= n);
    }
    0.5 * acc / n
}

/// Mean per-example loss over the batch, without gradients.
pub fn loss_value(spec: &ModelSpec, w: &ParamVector, batch: &Batch, loss: LossKind) -> Result<f64> {
    if spec.kind == ModelKind::Quadratic {
        check_batch(spec, w, batch)?;
        return finite(quadratic_loss(w, batch, None), "quadratic loss");
    }
    let per = example_losses(spec, w, batch, loss)?;
    finite(per.iter().sum::<f64>() / batch.len() as f64, "loss")
}

/// Loss of every example separately.
pub fn example_losses(spec: &ModelSpec, w: &ParamVector, batch: &Batch, loss: LossKind) -> Result<Vec<f64>> {
    check_batch(spec, w, batch)?;
    if spec.kind == ModelKind::Quadratic {
        return Ok((0..batch.len())
            .map(|i| 0.5 * w.iter().zip(batch.targets.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect());
    }
    let trace = network_trace(spec, w.as_slice(), &batch.inputs);
    let probs = trace.acts.last().unwrap();
    let width = spec.target_row_width();
    let mut scratch = vec![0.0; width];
    Ok((0..batch.len())
        .map(|i| {
            example_loss(
                loss,
                spec.output_activation(),
                &probs[i * width..(i + 1) * width],
                batch.targets.row(i),
                &mut scratch,
            )
        })
        .collect())
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Mean per-example loss and its exact gradient with respect to the flat
/// weights. The quadratic kind ignores `loss` and uses `½‖w − c‖²`.
pub fn backward(spec: &ModelSpec, w: &ParamVector, batch: &Batch, loss: LossKind) -> Result<(f64, ParamVector)> {
    check_batch(spec, w, batch)?;
    loss.validate()?;
    if spec.kind == ModelKind::Quadratic {
        let mut g = vec![0.0; w.dim()];
        let v = finite(quadratic_loss(w, batch, Some(&mut g)), "quadratic loss")?;
        return Ok((v, ParamVector::from_vec(g)));
    }
    let wv = w.as_slice();
    let trace = network_trace(spec, wv, &batch.inputs);
    let rows = trace.rows;
    let n = batch.len() as f64;
    let widths = &spec.layer_widths;
    let n_layers = widths.len() - 1;
    let act_out = spec.output_activation();
    let probs = trace.acts.last().unwrap();
    let width = spec.target_row_width();

    // dL/dp, then through the output nonlinearity to dL/dz.
    let mut delta = vec![0.0; probs.len()];
    let mut total = 0.0;
    for i in 0..batch.len() {
        let r = i * width..(i + 1) * width;
        total += example_loss(loss, act_out, &probs[r.clone()], batch.targets.row(i), &mut delta[r]);
    }
    let value = finite(total / n, "loss")?;
    match act_out {
        OutputActivation::Sigmoid => {
            for (d, p) in delta.iter_mut().zip(probs) {
                *d *= p * (1.0 - p) / n;
            }
        }
        OutputActivation::Softmax => {
            let k = spec.output_dim;
            for (d, p) in delta.chunks_mut(k).zip(probs.chunks(k)) {
                let dot: f64 = d.iter().zip(p).map(|(a, b)| a * b).sum();
                for (dj, pj) in d.iter_mut().zip(p) {
                    *dj = pj * (*dj - dot) / n;
                }
            }
        }
    }

    let mut grad = vec![0.0; wv.len()];
    let mut offsets = Vec::with_capacity(n_layers);
    let mut off = 0;
    for l in 0..n_layers {
        offsets.push(off);
        off += widths[l] * widths[l + 1] + widths[l + 1];
    }
    for l in (0..n_layers).rev() {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let base = offsets[l];
        let x = &trace.acts[l];
        {
            let (gw, gb) = grad[base..base + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for i in 0..rows {
                let xi = &x[i * fan_in..(i + 1) * fan_in];
                let di = &delta[i * fan_out..(i + 1) * fan_out];
                for o in 0..fan_out {
                    let d = di[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                    for j in 0..fan_in {
                        row[j] += d * xi[j];
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        let wl = &wv[base..base + fan_in * fan_out];
        let mut prev = vec![0.0; rows * fan_in];
        for i in 0..rows {
            let di = &delta[i * fan_out..(i + 1) * fan_out];
            let pi = &mut prev[i * fan_in..(i + 1) * fan_in];
            for o in 0..fan_out {
                let d = di[o];
                if d == 0.0 {
                    continue;
                }
                let row = &wl[o * fan_in..(o + 1) * fan_in];
                for j in 0..fan_in {
                    pi[j] += d * row[j];
                }
            }
            for (pj, a) in pi.iter_mut().zip(&x[i * fan_in..(i + 1) * fan_in]) {
                *pj *= hidden_grad(spec.activation, *a);
            }
        }
        delta = prev;
    }
    let grad = ParamVector::from_vec(grad);
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok((value, grad))
}

/// A model, a fixed batch and a loss viewed as a function of the weights.
pub struct ModelObjective<'a> {
    pub spec: &'a ModelSpec,
    pub batch: &'a Batch,
    pub loss: LossKind,
}

impl Differentiable for ModelObjective<'_> {
    fn dim(&self) -> usize {
        self.spec.param_count()
    }

    fn value(&self, w: &ParamVector) -> Result<f64> {
        loss_value(self.spec, w, self.batch, self.loss)
    }

    fn value_and_grad(&self, w: &ParamVector) -> Result<(f64, ParamVector)> {
        backward(self.spec, w, self.batch, self.loss)
    }
}
