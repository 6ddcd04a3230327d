use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::models::images::ImageBatch;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture of a fully-connected classifier with an embedding layer.
///
/// Layers run `input → hidden… → embedding → classes`; hidden layers use
/// ReLU, the embedding and classifier layers are linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `(height, width, channels)` of the input images.
    pub input_dims: (usize, usize, usize),
    pub hidden_layers: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn input_size(&self) -> usize {
        let (h, w, c) = self.input_dims;
        h * w * c
    }

    /// Widths of every layer boundary, input first.
    pub fn layer_widths(&self) -> Vec<usize> {
        let mut widths = vec![self.input_size()];
        widths.extend_from_slice(&self.hidden_layers);
        widths.push(self.embedding_dim);
        widths.push(self.num_classes);
        widths
    }

    /// Shapes of the parameters in storage order: weight then bias per layer.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layer_widths()
            .windows(2)
            .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers.is_empty() {
            return Err(invalid("model_spec", "at least one hidden layer is required"));
        }
        if self.layer_widths().contains(&0) {
            return Err(invalid(
                "model_spec",
                format!("zero-width layer in {:?}", self.layer_widths()),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    params: Vec<Tensor<T>>,
    frozen: bool,
}

/// Nodes produced by one forward pass.
pub struct ModelOutput {
    pub embeddings: Var,
    pub logits: Var,
    /// Parameter leaves in storage order.
    pub params: Vec<Var>,
}

impl<T: Scalar> Model<T> {
    /// Weights uniform in `±sqrt(6 / fan_in)` from a generator seeded with
    /// `spec.seed`; biases zero.
    pub fn build(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(shape);
                }
                let bound = (6.0 / shape[0] as f64).sqrt();
                let n = shape[0] * shape[1];
                let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
                Tensor::new(shape, data).expect("shape matches generated values")
            })
            .collect();
        Ok(Self {
            spec,
            params,
            frozen: false,
        })
    }

    /// All parameters zero.
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let params = spec.param_shapes().into_iter().map(Tensor::zeros).collect();
        Ok(Self {
            spec,
            params,
            frozen: false,
        })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<Tensor<T>>, frozen: bool) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(invalid(
                "model",
                format!("expected {} parameter tensors, got {}", shapes.len(), params.len()),
            ));
        }
        for (shape, p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "model parameters",
                    left: shape.clone(),
                    right: p.shape().to_vec(),
                });
            }
        }
        Ok(Self { spec, params, frozen })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// A frozen copy, for use as a teacher.
    pub fn frozen(&self) -> Self {
        Self {
            frozen: true,
            ..self.clone()
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Forward pass of an `m×(h·w·c)` input node.
    ///
    /// Parameters enter the graph as leaves that require gradients unless the
    /// model is frozen.
    pub fn forward(&self, g: &mut Graph<T>, input: Var) -> Result<ModelOutput> {
        let (_, width) = g.value(input).dims2()?;
        if width != self.spec.input_size() {
            return Err(invalid(
                "forward",
                format!(
                    "input has {width} features, model expects {} ({:?})",
                    self.spec.input_size(),
                    self.spec.input_dims
                ),
            ));
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.leaf(p.clone(), !self.frozen))
            .collect();
        let layers = params.len() / 2;
        let mut h = input;
        let mut embeddings = input;
        for layer in 0..layers {
            let z = g.matmul(h, params[2 * layer])?;
            let z = g.add_bias(z, params[2 * layer + 1])?;
            h = if layer + 2 < layers {
                g.relu(z)
            } else {
                z
            };
            if layer + 2 == layers {
                embeddings = h;
            }
        }
        Ok(ModelOutput {
            embeddings,
            logits: h,
            params,
        })
    }

    pub fn forward_batch(&self, g: &mut Graph<T>, batch: &ImageBatch<T>) -> Result<ModelOutput> {
        if batch.dims() != self.spec.input_dims {
            return Err(invalid(
                "forward",
                format!(
                    "images are {:?}, model expects {:?}",
                    batch.dims(),
                    self.spec.input_dims
                ),
            ));
        }
        let x = g.constant(batch.flatten());
        self.forward(g, x)
    }

    /// Embeddings and logits as plain tensors.
    pub fn infer(&self, batch: &ImageBatch<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let frozen = self.frozen();
        let out = frozen.forward_batch(&mut g, batch)?;
        Ok((g.value(out.embeddings).clone(), g.value(out.logits).clone()))
    }

    /// In-place `param -= lr · grad` for every parameter node of `out`.
    pub fn sgd_step(&mut self, g: &Graph<T>, out: &ModelOutput, lr: T) -> Result<()> {
        if self.frozen {
            return Err(invalid("sgd_step", "model is frozen"));
        }
        for (p, &v) in self.params.iter_mut().zip(&out.params) {
            let grad = g
                .grad(v)
                .ok_or_else(|| invalid("sgd_step", "parameter has no gradient; run backward first"))?;
            for (w, &dw) in p.data_mut().iter_mut().zip(grad.data()) {
                *w -= lr * dw;
            }
        }
        Ok(())
    }
}
