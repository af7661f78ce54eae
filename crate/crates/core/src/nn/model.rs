use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{affine_traced, dropout, Activation, AffineParams, Mode};
use crate::datasets::Normalization;
use crate::error::{Error, Result};
use crate::sca::{sca_forward_traced, ScaHyper, ScaParams, ScaVars};
use crate::tensor::{Graph, Tensor, Var};

/// Rows per graph when evaluating without gradients.
pub const EVAL_BATCH: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Affine {
        input: usize,
        output: usize,
        activation: Activation,
    },
    Sca {
        input: usize,
        output: usize,
        hyper: ScaHyper,
    },
}

impl LayerSpec {
    pub fn input(&self) -> usize {
        match *self {
            LayerSpec::Affine { input, .. } | LayerSpec::Sca { input, .. } => input,
        }
    }

    pub fn output(&self) -> usize {
        match *self {
            LayerSpec::Affine { output, .. } | LayerSpec::Sca { output, .. } => output,
        }
    }
}

/// Architecture description. The output of layer `penultimate` is the
/// activation captured for correlation analysis; the last layer is the head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_dim: usize,
    pub normalization: Option<Normalization>,
    pub layers: Vec<LayerSpec>,
    pub penultimate: usize,
}

impl ModelSpec {
    /// `in → hidden → σ → 384-wide → σ → classes` with `σ = dropout ∘ ReLU`.
    pub fn mlp(input_dim: usize, hidden: usize, width: usize, classes: usize) -> Self {
        Self {
            name: "mlp".into(),
            input_dim,
            normalization: Some(Normalization::IMAGE),
            layers: vec![
                LayerSpec::Affine {
                    input: input_dim,
                    output: hidden,
                    activation: Activation::ReluDropout,
                },
                LayerSpec::Affine {
                    input: hidden,
                    output: width,
                    activation: Activation::ReluDropout,
                },
                LayerSpec::Affine {
                    input: width,
                    output: classes,
                    activation: Activation::Identity,
                },
            ],
            penultimate: 1,
        }
    }

    /// The MLP with its second block replaced by a self-consistent layer.
    pub fn sca(input_dim: usize, hidden: usize, width: usize, classes: usize, hyper: ScaHyper) -> Self {
        let mut spec = Self::mlp(input_dim, hidden, width, classes);
        spec.name = "sca".into();
        spec.layers[1] = LayerSpec::Sca {
            input: hidden,
            output: width,
            hyper,
        };
        spec
    }

    /// Five affine layers `in → 512 → 256 → 128 → 64 → classes`.
    pub fn mlp5(input_dim: usize, classes: usize) -> Self {
        let widths = [input_dim, 512, 256, 128, 64];
        let mut layers: Vec<LayerSpec> = widths
            .windows(2)
            .map(|w| LayerSpec::Affine {
                input: w[0],
                output: w[1],
                activation: Activation::ReluDropout,
            })
            .collect();
        layers.push(LayerSpec::Affine {
            input: 64,
            output: classes,
            activation: Activation::Identity,
        });
        Self {
            name: "mlp5".into(),
            input_dim,
            normalization: Some(Normalization::IMAGE),
            layers,
            penultimate: 3,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, LayerSpec::output)
    }

    pub fn penultimate_width(&self) -> usize {
        self.layers[self.penultimate].output()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::InvalidArgument(m));
        if self.layers.len() < 2 {
            return invalid("a model needs at least a hidden layer and a head".into());
        }
        let mut prev = self.input_dim;
        for (i, l) in self.layers.iter().enumerate() {
            if l.input() != prev {
                return invalid(format!("layer {i} expects {} inputs but receives {prev}", l.input()));
            }
            if l.output() == 0 {
                return invalid(format!("layer {i} has zero width"));
            }
            if let LayerSpec::Sca { hyper, .. } = l {
                hyper.validate()?;
            }
            prev = l.output();
        }
        if self.penultimate + 1 >= self.layers.len() {
            return invalid(format!("penultimate tag {} must precede the head", self.penultimate));
        }
        match self.layers.last() {
            Some(LayerSpec::Affine {
                activation: Activation::Identity,
                ..
            }) => Ok(()),
            _ => invalid("the head must be an affine layer without activation".into()),
        }
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Affine { input, output, .. } => output * input + output,
                LayerSpec::Sca { input, output, .. } => {
                    (output * input + output) + (output * output + output) + (input * output + input)
                }
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Affine(AffineParams),
    Sca(ScaParams),
}

/// Parameter handles of one model recorded on a graph, per layer.
#[derive(Clone, Debug)]
pub enum LayerVars {
    Affine { weight: Var, bias: Var },
    Sca(ScaVars),
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    pub layers: Vec<LayerVars>,
}

impl BoundModel {
    /// Handles in the model's declared parameter order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerVars::Affine { weight, bias } => out.extend([*weight, *bias]),
                LayerVars::Sca(v) => out.extend([v.w_f, v.b_f, v.w_g, v.b_g, v.w_h, v.b_h]),
            }
        }
        out
    }
}

/// Outputs of one recorded forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub penultimate: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
}

pub fn build_mlp(spec: ModelSpec, seed: u64) -> Result<Model> {
    if spec.layers.iter().any(|l| matches!(l, LayerSpec::Sca { .. })) {
        return Err(Error::InvalidArgument(
            "MLP spec contains a self-consistent layer".into(),
        ));
    }
    Model::new(spec, seed)
}

pub fn build_sca_model(spec: ModelSpec, seed: u64) -> Result<Model> {
    let n = spec.layers.len();
    match spec.layers.get(spec.penultimate) {
        Some(LayerSpec::Sca { .. }) if spec.penultimate + 2 == n => Model::new(spec, seed),
        _ => Err(Error::InvalidArgument(
            "SCA model needs its self-consistent layer directly before the head".into(),
        )),
    }
}

impl Model {
    /// Initialises every layer from a seeded generator.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Affine { input, output, .. } => {
                    Ok(Layer::Affine(AffineParams::init(output, input, &mut rng)))
                }
                LayerSpec::Sca { input, output, hyper } => {
                    Ok(Layer::Sca(ScaParams::init(input, output, hyper, &mut rng)?))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, layers })
    }

    /// Rebuilds a model from tensors in declared order.
    pub fn from_params(spec: ModelSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let mut it = params.into_iter();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, l) in spec.layers.iter().enumerate() {
            match *l {
                LayerSpec::Affine { input, output, .. } => {
                    let w = take_matrix(&mut it)?;
                    let b = take_vector(&mut it)?;
                    check_dims(i, &w, (output, input))?;
                    layers.push(Layer::Affine(AffineParams::new(w, b)?));
                }
                LayerSpec::Sca { input, output, hyper } => {
                    let w_f = take_matrix(&mut it)?;
                    let b_f = take_vector(&mut it)?;
                    let w_g = take_matrix(&mut it)?;
                    let b_g = take_vector(&mut it)?;
                    let w_h = take_matrix(&mut it)?;
                    let b_h = take_vector(&mut it)?;
                    check_dims(i, &w_f, (output, input))?;
                    layers.push(Layer::Sca(ScaParams::new(w_f, b_f, w_g, b_g, w_h, b_h, hyper)?));
                }
            }
        }
        if it.next().is_some() {
            return Err(Error::Format("more parameter tensors than the spec declares".into()));
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Named parameter tensors in declared order.
    pub fn param_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Affine(p) => {
                    out.push((format!("layers.{i}.weight"), Tensor::from_matrix(p.weight.clone())));
                    out.push((format!("layers.{i}.bias"), Tensor::from(p.bias.clone())));
                }
                Layer::Sca(p) => {
                    for (name, t) in [
                        ("w_f", Tensor::from_matrix(p.w_f.clone())),
                        ("b_f", Tensor::from(p.b_f.clone())),
                        ("w_g", Tensor::from_matrix(p.w_g.clone())),
                        ("b_g", Tensor::from(p.b_g.clone())),
                        ("w_h", Tensor::from_matrix(p.w_h.clone())),
                        ("b_h", Tensor::from(p.b_h.clone())),
                    ] {
                        out.push((format!("layers.{i}.{name}"), t));
                    }
                }
            }
        }
        out
    }

    /// Mutable flat views of every parameter, in declared order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Affine(p) => {
                    out.push(p.weight.as_slice_mut().expect("standard layout"));
                    out.push(p.bias.as_slice_mut().expect("standard layout"));
                }
                Layer::Sca(p) => {
                    out.push(p.w_f.as_slice_mut().expect("standard layout"));
                    out.push(p.b_f.as_slice_mut().expect("standard layout"));
                    out.push(p.w_g.as_slice_mut().expect("standard layout"));
                    out.push(p.b_g.as_slice_mut().expect("standard layout"));
                    out.push(p.w_h.as_slice_mut().expect("standard layout"));
                    out.push(p.b_h.as_slice_mut().expect("standard layout"));
                }
            }
        }
        out
    }

    /// Restores structural constraints after an optimizer update.
    pub fn project_constraints(&mut self) {
        for l in &mut self.layers {
            if let Layer::Sca(p) = l {
                p.project();
            }
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Affine(p) => {
                    let (weight, bias) = p.bind(g, trainable);
                    LayerVars::Affine { weight, bias }
                }
                Layer::Sca(p) => LayerVars::Sca(p.bind(g, trainable)),
            })
            .collect();
        BoundModel { layers }
    }

    /// Records the forward pass, starting from inputs in original units.
    pub fn forward(&self, g: &mut Graph, bound: &BoundModel, x: Var, mode: &mut Mode<'_>) -> Result<ForwardOutput> {
        let width = g.shape(x).get(1).copied().unwrap_or(0);
        if g.shape(x).len() != 2 || width != self.spec.input_dim {
            return Err(Error::Shape {
                op: "model input",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.spec.input_dim],
            });
        }
        let mut h = x;
        if let Some(norm) = self.spec.normalization {
            let centred = g.offset(h, -norm.shift)?;
            h = g.scale(centred, 1.0 / norm.scale)?;
        }
        let mut penultimate = h;
        for (i, (spec, vars)) in self.spec.layers.iter().zip(&bound.layers).enumerate() {
            h = match (spec, vars) {
                (LayerSpec::Affine { activation, .. }, LayerVars::Affine { weight, bias }) => {
                    let z = affine_traced(g, h, *weight, *bias)?;
                    match activation {
                        Activation::Identity => z,
                        Activation::Relu => g.relu(z)?,
                        Activation::ReluDropout => {
                            let r = g.relu(z)?;
                            dropout(g, r, mode)?
                        }
                    }
                }
                (LayerSpec::Sca { hyper, .. }, LayerVars::Sca(v)) => sca_forward_traced(g, h, v, hyper)?,
                _ => return Err(Error::Graph("bound variables do not match the model".into())),
            };
            if i == self.spec.penultimate {
                penultimate = h;
            }
        }
        Ok(ForwardOutput { logits: h, penultimate })
    }

    fn eval_batched(&self, x: &Array2<f64>, penultimate: bool) -> Result<Array2<f64>> {
        let width = if penultimate {
            self.spec.penultimate_width()
        } else {
            self.num_classes()
        };
        let mut out = Array2::zeros((x.nrows(), width));
        let mut start = 0;
        while start < x.nrows() {
            let end = (start + EVAL_BATCH).min(x.nrows());
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let xv = g.constant(Tensor::from_matrix(x.slice(s![start..end, ..]).to_owned()));
            let fo = self.forward(&mut g, &bound, xv, &mut Mode::Eval)?;
            let v = if penultimate { fo.penultimate } else { fo.logits };
            let m = g.tensor(v).into_matrix()?;
            out.slice_mut(s![start..end, ..]).assign(&m);
            start = end;
        }
        Ok(out)
    }

    /// Logits in evaluation mode.
    pub fn logits(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.eval_batched(x, false)
    }

    /// Activations of the penultimate-tagged layer in evaluation mode.
    pub fn penultimate(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.eval_batched(x, true)
    }

    pub fn predict(&self, x: &Array2<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }
}

fn take_matrix(it: &mut std::vec::IntoIter<Tensor>) -> Result<Array2<f64>> {
    let t = it
        .next()
        .ok_or_else(|| Error::Format("missing parameter tensor".into()))?;
    t.into_matrix()
}

fn take_vector(it: &mut std::vec::IntoIter<Tensor>) -> Result<Array1<f64>> {
    let t = it
        .next()
        .ok_or_else(|| Error::Format("missing parameter tensor".into()))?;
    let shape = t.shape().to_vec();
    t.into_array().into_dimensionality().map_err(|_| Error::Shape {
        op: "bias vector",
        lhs: shape,
        rhs: vec![0],
    })
}

fn check_dims(layer: usize, w: &Array2<f64>, want: (usize, usize)) -> Result<()> {
    if w.dim() != want {
        return Err(Error::Format(format!(
            "layer {layer}: weight shape {:?} does not match spec {:?}",
            w.dim(),
            want
        )));
    }
    Ok(())
}

/// Index of the largest entry in every row (first on ties).
pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
