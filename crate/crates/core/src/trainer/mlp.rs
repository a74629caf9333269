use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{accuracy, dot, softmax_row_in_place, Matrix, Rng};
use crate::proxy::LinearClassifier;

/// Rectified MLP feature extractor followed by a linear head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Hidden widths before the feature layer; may be empty.
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub classes: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input_dim: 16,
            hidden_dims: vec![512],
            feature_dim: 32,
            classes: 10,
        }
    }
}

impl ModelSpec {
    /// Default layout with a different first hidden width.
    pub fn with_width(width: usize) -> Self {
        ModelSpec {
            hidden_dims: vec![width],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.classes < 2 {
            return Err(Error::invalid(format!("degenerate model spec {self:?}")));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        Ok(())
    }

    /// `(out, in)` of every dense layer, the head last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.feature_dim);
        dims.push(self.classes);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// Parameters of a [`ModelSpec`]. Every dense layer but the last is followed
/// by a ReLU; the output of the last rectified layer is the feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer activations kept for the backward pass.
pub struct ForwardCache {
    /// `acts[0]` is the input batch; `acts[i]` the output of layer `i - 1`.
    pub acts: Vec<Matrix>,
    pub probs: Matrix,
}

impl ForwardCache {
    pub fn features(&self) -> &Matrix {
        &self.acts[self.acts.len() - 1]
    }
}

impl Mlp {
    /// He-style init: weights ~ N(0, 2 / fan_in), zero biases.
    pub fn init(spec: &ModelSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(out, inp)| {
                let std = (2.0 / inp as f64).sqrt();
                Dense {
                    weight: Matrix::from_fn(out, inp, |_, _| (std * rng.normal()) as f32),
                    bias: Matrix::zeros(1, out),
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn from_params(spec: &ModelSpec, params: Vec<Matrix>) -> Result<Self> {
        let shapes = spec.layer_shapes();
        if params.len() != 2 * shapes.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                2 * shapes.len(),
                params.len()
            )));
        }
        let mut it = params.into_iter();
        let mut layers = Vec::with_capacity(shapes.len());
        for (out, inp) in shapes {
            let weight = it.next().unwrap();
            let bias = it.next().unwrap();
            weight.ensure_shape(out, inp, "layer weight")?;
            bias.ensure_shape(1, out, "layer bias")?;
            layers.push(Dense { weight, bias });
        }
        Ok(Mlp { layers })
    }

    /// Flattened `[w0, b0, w1, b1, ...]`.
    pub fn params(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn head(&self) -> LinearClassifier {
        let last = self.layers.last().expect("model has a head");
        LinearClassifier {
            weight: last.weight.clone(),
            bias: last.bias.clone(),
        }
    }

    /// Feature extractor output for every row of `x`.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        let mut a = x.clone();
        for layer in &self.layers[..self.layers.len() - 1] {
            a = dense_relu(&a, layer)?;
        }
        Ok(a)
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardCache> {
        let mut acts = Vec::with_capacity(self.layers.len());
        acts.push(x.clone());
        for layer in &self.layers[..self.layers.len() - 1] {
            let next = dense_relu(acts.last().unwrap(), layer)?;
            acts.push(next);
        }
        let head = self.layers.last().unwrap();
        let mut probs = acts.last().unwrap().matmul_t(&head.weight)?;
        probs.add_row(head.bias.data())?;
        for r in 0..probs.rows() {
            softmax_row_in_place(probs.row_mut(r));
        }
        Ok(ForwardCache { acts, probs })
    }

    /// Mean cross-entropy of the batch and the gradients of every parameter,
    /// in [`Mlp::params`] order.
    pub fn backward(&self, cache: &ForwardCache, labels: &[u32]) -> Result<(f64, Vec<Matrix>)> {
        let n = labels.len();
        if cache.probs.rows() != n {
            return Err(Error::invalid("label count does not match batch"));
        }
        let scale = 1.0 / n as f32;
        let mut loss = 0f64;
        let mut delta = cache.probs.clone();
        for (i, &y) in labels.iter().enumerate() {
            let row = delta.row_mut(i);
            loss -= (row[y as usize] as f64).max(1e-12).ln();
            row[y as usize] -= 1.0;
            row.iter_mut().for_each(|v| *v *= scale);
        }
        loss /= n as f64;

        let mut grads = vec![Matrix::zeros(0, 0); 2 * self.layers.len()];
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.acts[li];
            grads[2 * li] = delta.t_matmul(input)?;
            grads[2 * li + 1] = Matrix::new(
                1,
                delta.cols(),
                delta.col_sums().into_iter().map(|v| v as f32).collect(),
            )?;
            if li > 0 {
                let mut back = delta.matmul(&layer.weight)?;
                for (g, &a) in back.data_mut().iter_mut().zip(input.data()) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
                delta = back;
            }
        }
        Ok((loss, grads))
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, x: &Matrix, labels: &[u32]) -> Result<f64> {
        let cache = self.forward(x)?;
        crate::numkit::cross_entropy(&cache.probs, labels)
    }

    /// Top-1 accuracy of the full model.
    pub fn evaluate(&self, x: &Matrix, labels: &[u32]) -> Result<f64> {
        accuracy(&self.forward(x)?.probs, labels)
    }
}

fn dense_relu(x: &Matrix, layer: &Dense) -> Result<Matrix> {
    let (n, inp) = x.shape();
    let (out, w_in) = layer.weight.shape();
    if inp != w_in {
        return Err(Error::invalid(format!(
            "layer expects {w_in} inputs, got {inp}"
        )));
    }
    let mut y = Matrix::zeros(n, out);
    let b = layer.bias.data();
    for i in 0..n {
        let xi = x.row(i);
        for (j, dst) in y.row_mut(i).iter_mut().enumerate() {
            let v = (b[j] as f64 + dot(layer.weight.row(j), xi)) as f32;
            *dst = v.max(0.0);
        }
    }
    Ok(y)
}
