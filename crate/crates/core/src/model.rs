//! Differentiable classifiers and the layer-list model used throughout.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{cross_entropy_per_example, Graph, NodeId, Reduction};
use crate::error::{invalid, shape_err, Error, Result};
use crate::range::ValueRange;
use crate::tensor::Tensor;

/// Loss nodes pushed by [`Differentiable::build_loss`].
#[derive(Debug)]
pub struct LossOutput {
    /// Scalar node holding the sum of per-example losses.
    pub total: NodeId,
    pub per_example: Vec<f64>,
    /// Predicted class per example, for objectives that classify.
    pub predictions: Option<Vec<usize>>,
}

/// Anything an attack can differentiate: a batch of inputs in, a summed
/// per-example loss out.
///
/// Attacks take gradients of the *summed* loss so that each example's
/// gradient is its own, independent of how examples are batched.
pub trait Differentiable: Sync {
    /// Shape of one example, without the batch axis.
    fn sample_shape(&self) -> &[usize];

    fn build_loss(&self, graph: &mut Graph, input: NodeId, labels: &[usize]) -> Result<LossOutput>;
}

/// Losses, correctness and optionally the input gradient of one batch.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub losses: Vec<f64>,
    /// Empty when the objective does not classify.
    pub correct: Vec<bool>,
    pub input_grad: Option<Tensor>,
}

impl Evaluation {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }

    pub fn n_correct(&self) -> usize {
        self.correct.iter().filter(|&&c| c).count()
    }
}

fn check_batch(model: &dyn Differentiable, x: &Tensor, labels: &[usize]) -> Result<()> {
    if x.sample_shape() != model.sample_shape() || x.batch_len() != labels.len() {
        return Err(shape_err(
            "model input",
            format!(
                "expected [{}, {:?}], got {:?}",
                labels.len(),
                model.sample_shape(),
                x.shape()
            ),
        ));
    }
    Ok(())
}

pub fn evaluate_batch(
    model: &dyn Differentiable,
    x: &Tensor,
    labels: &[usize],
    with_grad: bool,
) -> Result<Evaluation> {
    check_batch(model, x, labels)?;
    let mut g = Graph::new();
    let input = if with_grad {
        g.input(x.clone())?
    } else {
        g.constant(x.clone())?
    };
    let out = model.build_loss(&mut g, input, labels)?;
    let input_grad = if with_grad {
        Some(g.backward(out.total)?.take(input))
    } else {
        None
    };
    let correct = out
        .predictions
        .map(|p| p.iter().zip(labels).map(|(p, y)| p == y).collect())
        .unwrap_or_default();
    Ok(Evaluation {
        losses: out.per_example,
        correct,
        input_grad,
    })
}

/// `∇_x Σᵢ J(xᵢ, yᵢ)`.
pub fn input_gradient(model: &dyn Differentiable, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    evaluate_batch(model, x, labels, true)?
        .input_grad
        .ok_or_else(|| invalid("gradient missing"))
}

/// The linear objective `J(x) = w·x`, ignoring the label.
#[derive(Clone, Debug)]
pub struct LinearScore {
    weights: Tensor,
}

impl LinearScore {
    /// `weights` has the shape of one example.
    pub fn new(weights: Tensor) -> Self {
        Self { weights }
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }
}

impl Differentiable for LinearScore {
    fn sample_shape(&self) -> &[usize] {
        self.weights.shape()
    }

    fn build_loss(&self, graph: &mut Graph, input: NodeId, _labels: &[usize]) -> Result<LossOutput> {
        let x = graph.value(input);
        let n = x.batch_len();
        let per_example: Vec<f64> = x
            .data()
            .chunks(self.weights.len())
            .map(|xi| xi.iter().zip(self.weights.data()).map(|(a, b)| a * b).sum())
            .collect();
        let tiled: Vec<f64> = (0..n).flat_map(|_| self.weights.data().iter().copied()).collect();
        let w = graph.constant(Tensor::new(x.shape().to_vec(), tiled)?)?;
        let prod = graph.mul(w, input)?;
        let total = graph.sum(prod)?;
        Ok(LossOutput {
            total,
            per_example,
            predictions: None,
        })
    }
}

/// One entry of a sequential architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv2d { filters: usize, kernel: usize, padding: usize },
    MaxPool2,
    Relu,
    Flatten,
    Dense { units: usize },
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Conv2d {
                filters,
                kernel,
                padding,
            } => write!(f, "conv{filters}k{kernel}p{padding}"),
            Layer::MaxPool2 => f.write_str("pool2"),
            Layer::Relu => f.write_str("relu"),
            Layer::Flatten => f.write_str("flatten"),
            Layer::Dense { units } => write!(f, "fc{units}"),
        }
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let num = |t: &str| t.parse::<usize>().map_err(|_| invalid(format!("bad layer token {s:?}")));
        match s {
            "pool2" => Ok(Layer::MaxPool2),
            "relu" => Ok(Layer::Relu),
            "flatten" => Ok(Layer::Flatten),
            _ if s.starts_with("fc") => Ok(Layer::Dense { units: num(&s[2..])? }),
            _ if s.starts_with("conv") => {
                let rest = &s[4..];
                let (filters, rest) = rest.split_once('k').ok_or_else(|| invalid(format!("bad layer token {s:?}")))?;
                let (kernel, padding) = rest.split_once('p').unwrap_or((rest, "0"));
                Ok(Layer::Conv2d {
                    filters: num(filters)?,
                    kernel: num(kernel)?,
                    padding: num(padding)?,
                })
            }
            _ => Err(invalid(format!("unknown layer {s:?}"))),
        }
    }
}

/// Input shape plus an ordered layer list ending in a class-score layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
}

impl Architecture {
    /// Two 5×5 convolutions (16 and 32 filters), each followed by ReLU and
    /// 2×2 max-pooling, then dense layers of 128 and 10 units.
    pub fn mnist_cnn() -> Self {
        Self::small_cnn([1, 28, 28], 16, 32, 5, 128, 10)
    }

    pub fn small_cnn(input: [usize; 3], c1: usize, c2: usize, kernel: usize, hidden: usize, classes: usize) -> Self {
        Self {
            input,
            layers: vec![
                Layer::Conv2d { filters: c1, kernel, padding: 0 },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Conv2d { filters: c2, kernel, padding: 0 },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Flatten,
                Layer::Dense { units: hidden },
                Layer::Relu,
                Layer::Dense { units: classes },
            ],
        }
    }

    /// Fully connected network over flattened input.
    pub fn mlp(input: [usize; 3], hidden: &[usize], classes: usize) -> Self {
        let mut layers = vec![Layer::Flatten];
        for &h in hidden {
            layers.push(Layer::Dense { units: h });
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Dense { units: classes });
        Self { input, layers }
    }

    pub fn classes(&self) -> Result<usize> {
        match self.layers.last() {
            Some(Layer::Dense { units }) => Ok(*units),
            _ => Err(invalid("architecture must end with a dense layer")),
        }
    }

    /// Named parameter shapes in layer order, validating the layer chain.
    pub fn parameter_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut shape: Vec<usize> = self.input.to_vec();
        let mut out = Vec::new();
        let (mut convs, mut denses) = (0, 0);
        for layer in &self.layers {
            match *layer {
                Layer::Conv2d {
                    filters,
                    kernel,
                    padding,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(invalid(format!("{layer} needs a [C,H,W] input, got {shape:?}")));
                    };
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(invalid(format!("{layer} kernel larger than input {shape:?}")));
                    }
                    convs += 1;
                    out.push((format!("conv{convs}.weight"), vec![filters, c, kernel, kernel]));
                    out.push((format!("conv{convs}.bias"), vec![filters]));
                    shape = vec![filters, h + 2 * padding - kernel + 1, w + 2 * padding - kernel + 1];
                }
                Layer::MaxPool2 => {
                    let [c, h, w] = shape[..] else {
                        return Err(invalid(format!("pool2 needs a [C,H,W] input, got {shape:?}")));
                    };
                    if h < 2 || w < 2 {
                        return Err(invalid(format!("pool2 on too small input {shape:?}")));
                    }
                    shape = vec![c, h / 2, w / 2];
                }
                Layer::Relu => {}
                Layer::Flatten => shape = vec![shape.iter().product()],
                Layer::Dense { units } => {
                    let [fan_in] = shape[..] else {
                        return Err(invalid(format!("{layer} needs a flat input, got {shape:?}")));
                    };
                    denses += 1;
                    out.push((format!("fc{denses}.weight"), vec![fan_in, units]));
                    out.push((format!("fc{denses}.bias"), vec![units]));
                    shape = vec![units];
                }
            }
        }
        if shape.len() != 1 {
            return Err(invalid("architecture must end with a dense layer"));
        }
        self.classes()?;
        Ok(out)
    }

    /// Compact text form, e.g. `in=1x28x28;range=0:1;conv16k5p0;relu;...;fc10`.
    pub fn descriptor(&self, range: ValueRange) -> String {
        let mut s = format!(
            "in={}x{}x{};range={}:{}",
            self.input[0],
            self.input[1],
            self.input[2],
            range.lo(),
            range.hi()
        );
        for l in &self.layers {
            s.push(';');
            s.push_str(&l.to_string());
        }
        s
    }

    pub fn parse_descriptor(s: &str) -> Result<(Self, ValueRange)> {
        let mut parts = s.split(';');
        let bad = || invalid(format!("bad architecture descriptor {s:?}"));
        let input = parts.next().and_then(|p| p.strip_prefix("in=")).ok_or_else(bad)?;
        let dims: Vec<usize> = input
            .split('x')
            .map(|d| d.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [c, h, w] = dims[..] else { return Err(bad()) };
        let range = parts.next().and_then(|p| p.strip_prefix("range=")).ok_or_else(bad)?;
        let (lo, hi) = range.split_once(':').ok_or_else(bad)?;
        let range = ValueRange::new(lo.parse().map_err(|_| bad())?, hi.parse().map_err(|_| bad())?)?;
        let layers = parts.map(str::parse).collect::<Result<Vec<Layer>>>()?;
        let arch = Self {
            input: [c, h, w],
            layers,
        };
        arch.parameter_shapes()?;
        Ok((arch, range))
    }
}

/// A sequential classifier with named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Architecture,
    value_range: ValueRange,
    sample_shape: Vec<usize>,
    params: Vec<(String, Tensor)>,
}

impl Model {
    /// Parameters drawn uniformly from `±1/√fan_in`.
    pub fn new(arch: Architecture, value_range: ValueRange, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = arch.parameter_shapes()?;
        let mut params = Vec::with_capacity(shapes.len());
        let mut bound = 1.0;
        for (name, shape) in shapes {
            if name.ends_with(".weight") {
                let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
                bound = 1.0 / (fan_in as f64).sqrt();
            }
            let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
            params.push((name, t));
        }
        Self::from_parts(arch, value_range, params)
    }

    pub fn from_parts(arch: Architecture, value_range: ValueRange, params: Vec<(String, Tensor)>) -> Result<Self> {
        let shapes = arch.parameter_shapes()?;
        if shapes.len() != params.len() {
            return Err(invalid(format!(
                "architecture has {} parameters, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), (pname, t)) in shapes.iter().zip(&params) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(invalid(format!(
                    "parameter {pname} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            sample_shape: arch.input.to_vec(),
            arch,
            value_range,
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn value_range(&self) -> ValueRange {
        self.value_range
    }

    pub fn classes(&self) -> usize {
        self.arch.classes().expect("validated at construction")
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn descriptor(&self) -> String {
        self.arch.descriptor(self.value_range)
    }

    /// Pushes the forward pass; returns the logits node and one node per
    /// parameter (differentiable only when `trainable`).
    pub fn build_logits(&self, g: &mut Graph, input: NodeId, trainable: bool) -> Result<(NodeId, Vec<NodeId>)> {
        let mut nodes = Vec::with_capacity(self.params.len());
        for (_, t) in &self.params {
            nodes.push(if trainable { g.input(t.clone())? } else { g.constant(t.clone())? });
        }
        let n = g.value(input).batch_len();
        let mut h = input;
        let mut p = 0;
        for layer in &self.arch.layers {
            h = match *layer {
                Layer::Conv2d { padding, .. } => {
                    let y = g.conv2d(h, nodes[p], padding)?;
                    p += 2;
                    g.bias_add(y, nodes[p - 1])?
                }
                Layer::MaxPool2 => g.max_pool2(h)?,
                Layer::Relu => g.relu(h)?,
                Layer::Flatten => {
                    let per = g.value(h).len() / n;
                    g.reshape(h, vec![n, per])?
                }
                Layer::Dense { .. } => {
                    let y = g.matmul(h, nodes[p])?;
                    p += 2;
                    g.bias_add(y, nodes[p - 1])?
                }
            };
        }
        Ok((h, nodes))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let input = g.constant(x.clone())?;
        let (z, _) = self.build_logits(&mut g, input, false)?;
        Ok(g.value(z).clone())
    }

    /// Mean cross-entropy over the batch and its gradient for every parameter.
    pub fn loss_and_param_grads(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<usize>, Vec<Tensor>)> {
        check_batch(self, x, labels)?;
        let mut g = Graph::new();
        let input = g.constant(x.clone())?;
        let (z, nodes) = self.build_logits(&mut g, input, true)?;
        let loss = g.cross_entropy(z, labels, Reduction::Mean)?;
        let (_, preds) = cross_entropy_per_example(g.value(z), labels)?;
        let mut grads = g.backward(loss)?;
        let value = g.value(loss).data()[0];
        Ok((value, preds, nodes.into_iter().map(|id| grads.take(id)).collect()))
    }
}

impl Differentiable for Model {
    fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    fn build_loss(&self, graph: &mut Graph, input: NodeId, labels: &[usize]) -> Result<LossOutput> {
        let (z, _) = self.build_logits(graph, input, false)?;
        let (per_example, preds) = cross_entropy_per_example(graph.value(z), labels)?;
        let total = graph.cross_entropy(z, labels, Reduction::Sum)?;
        Ok(LossOutput {
            total,
            per_example,
            predictions: Some(preds),
        })
    }
}
