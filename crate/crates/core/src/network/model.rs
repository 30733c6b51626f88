//! Layer specification, parameters, and tapped forward passes.

use std::collections::HashSet;
use std::ops::Range;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::rng_from;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

/// How the two spatial reductions of the default network are realized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Downsample {
    /// 2x2 max pooling after blocks 2 and 4.
    MaxPool,
    /// Blocks 2 and 4 convolve with stride 2 instead of pooling.
    StridedConv,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    layers: Vec<LayerSpec>,
    /// `(channels, height, width)` of one input image.
    input_shape: (usize, usize, usize),
    classes: usize,
}

pub const DEFAULT_CHANNELS: [usize; 4] = [8, 8, 16, 16];
pub const DEFAULT_INPUT: (usize, usize, usize) = (1, 64, 64);

/// Four conv-relu blocks with max pooling after blocks 2 and 4, then a dense
/// classifier and softmax, for 64x64 single-channel input.
pub fn build_default_model(classes: usize) -> Result<ModelSpec> {
    ModelSpec::conv_net(classes, DEFAULT_INPUT, DEFAULT_CHANNELS, Downsample::MaxPool)
}

/// A layer position where a feature map can be read or replaced: the output
/// of a conv block (after its ReLU).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapPoint {
    pub name: String,
    /// Index of the layer whose output is the tapped map.
    pub layer_index: usize,
    /// `(c, h, w)` of the map for one image.
    pub shape: (usize, usize, usize),
}

impl TapPoint {
    /// Element count `c * h * w`.
    pub fn numel(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }
}

impl ModelSpec {
    pub fn conv_net(
        classes: usize,
        input_shape: (usize, usize, usize),
        channels: [usize; 4],
        downsample: Downsample,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
        }
        let (c0, h, w) = input_shape;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "input size {h}x{w} must be divisible by 4"
            )));
        }
        let mut layers = Vec::new();
        let mut cin = c0;
        for (i, &cout) in channels.iter().enumerate() {
            let reduce = i == 1 || i == 3;
            let stride = if reduce && downsample == Downsample::StridedConv { 2 } else { 1 };
            layers.push(LayerSpec {
                name: format!("conv{}", i + 1),
                kind: LayerKind::Conv {
                    in_channels: cin,
                    out_channels: cout,
                    kernel: 3,
                    stride,
                    pad: 1,
                },
            });
            layers.push(LayerSpec {
                name: format!("relu{}", i + 1),
                kind: LayerKind::Relu,
            });
            if reduce && downsample == Downsample::MaxPool {
                layers.push(LayerSpec {
                    name: format!("pool{}", i / 2 + 1),
                    kind: LayerKind::MaxPool { size: 2 },
                });
            }
            cin = cout;
        }
        layers.push(LayerSpec {
            name: "flatten".into(),
            kind: LayerKind::Flatten,
        });
        layers.push(LayerSpec {
            name: "fc".into(),
            kind: LayerKind::Dense {
                in_features: cin * (h / 4) * (w / 4),
                out_features: classes,
            },
        });
        layers.push(LayerSpec {
            name: "softmax".into(),
            kind: LayerKind::Softmax,
        });
        Self::new(layers, input_shape, classes)
    }

    /// Validate names and shape flow through `layers`.
    pub fn new(layers: Vec<LayerSpec>, input_shape: (usize, usize, usize), classes: usize) -> Result<Self> {
        let mut seen = HashSet::new();
        for l in &layers {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate layer name `{}`", l.name)));
            }
        }
        let spec = Self {
            layers,
            input_shape,
            classes,
        };
        let shapes = spec.output_shapes()?;
        match shapes.last() {
            Some(s) if s == &vec![classes] => Ok(spec),
            other => Err(Error::InvalidArgument(format!(
                "network ends in {other:?}, expected {classes} classes"
            ))),
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Per-image output shape after every layer.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let (c, h, w) = self.input_shape;
        let mut cur = vec![c, h, w];
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            cur = match (&l.kind, cur.as_slice()) {
                (
                    LayerKind::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        pad,
                    },
                    &[c, h, w],
                ) if c == *in_channels && *kernel <= h + 2 * pad && *kernel <= w + 2 * pad => vec![
                    *out_channels,
                    (h + 2 * pad - kernel) / stride + 1,
                    (w + 2 * pad - kernel) / stride + 1,
                ],
                (LayerKind::Relu | LayerKind::Softmax, s) => s.to_vec(),
                (LayerKind::MaxPool { size }, &[c, h, w]) if *size <= h && *size <= w => {
                    vec![c, h / size, w / size]
                }
                (LayerKind::Flatten, s) => vec![s.iter().product()],
                (
                    LayerKind::Dense {
                        in_features,
                        out_features,
                    },
                    &[f],
                ) if f == *in_features => vec![*out_features],
                (kind, s) => {
                    return Err(Error::shape(
                        "model",
                        format!("layer `{}` ({kind:?}) cannot take input {s:?}", l.name),
                    ))
                }
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Names of all conv layers, in order; each is a legal tap.
    pub fn tap_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv { .. }))
            .map(|l| l.name.clone())
            .collect()
    }

    pub fn tap(&self, name: &str) -> Result<TapPoint> {
        let idx = self.layer_index(name)?;
        if !matches!(self.layers[idx].kind, LayerKind::Conv { .. }) {
            return Err(Error::InvalidArgument(format!("`{name}` is not a conv layer")));
        }
        // The block output is the conv's ReLU when one follows directly.
        let layer_index = match self.layers.get(idx + 1) {
            Some(LayerSpec {
                kind: LayerKind::Relu, ..
            }) => idx + 1,
            _ => idx,
        };
        let shapes = self.output_shapes()?;
        match shapes[layer_index].as_slice() {
            &[c, h, w] => Ok(TapPoint {
                name: name.to_string(),
                layer_index,
                shape: (c, h, w),
            }),
            s => Err(Error::shape("tap", format!("tap `{name}` has non-spatial shape {s:?}"))),
        }
    }

    /// Layers executed to produce logits (everything before the softmax).
    fn logit_range(&self) -> Range<usize> {
        let end = match self.layers.last() {
            Some(LayerSpec {
                kind: LayerKind::Softmax, ..
            }) => self.layers.len() - 1,
            _ => self.layers.len(),
        };
        0..end
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// A [`ModelSpec`] with concrete weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    spec: ModelSpec,
    params: Vec<Option<LayerParams<T>>>,
}

/// Parameter leaves of a model placed on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    params: Vec<Option<(Var, Var)>>,
}

impl Bound {
    /// All `(weight, bias)` leaves in layer order.
    pub fn vars(&self) -> impl Iterator<Item = (usize, Var, Var)> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.map(|(w, b)| (i, w, b)))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Use the guided-backprop ReLU rule in the backward pass.
    pub guided_relu: bool,
}

/// Kaiming-style uniform draw: weights in `±sqrt(6 / fan_in)`, biases in
/// `±1 / sqrt(fan_in)`.
fn init_layer(kind: &LayerKind, seed: u64, layer: usize) -> Option<LayerParams<f64>> {
    let (wshape, fan_in) = match *kind {
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            ..
        } => (
            vec![out_channels, in_channels, kernel, kernel],
            in_channels * kernel * kernel,
        ),
        LayerKind::Dense {
            in_features,
            out_features,
        } => (vec![out_features, in_features], in_features),
        _ => return None,
    };
    let mut rng = rng_from(seed, &[0x1A1E, layer as u64]);
    let wb = (6.0 / fan_in as f64).sqrt();
    let bb = 1.0 / (fan_in as f64).sqrt();
    let n: usize = wshape.iter().product();
    let weight: Vec<f64> = (0..n).map(|_| rng.random_range(-wb..wb)).collect();
    let cout = wshape[0];
    let bias: Vec<f64> = (0..cout).map(|_| rng.random_range(-bb..bb)).collect();
    Some(LayerParams {
        weight: Tensor::from_vec(wshape, weight).ok()?,
        bias: Tensor::from_vec(vec![cout], bias).ok()?,
    })
}

impl<T: Real> Model<T> {
    pub fn init(spec: ModelSpec, seed: u64) -> Self {
        let params = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                init_layer(&l.kind, seed, i).map(|p| LayerParams {
                    weight: p.weight.cast(),
                    bias: p.bias.cast(),
                })
            })
            .collect();
        Self { spec, params }
    }

    /// Assemble from explicit parameters (one slot per layer).
    pub fn from_params(spec: ModelSpec, params: Vec<Option<LayerParams<T>>>) -> Result<Self> {
        if params.len() != spec.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter slots for {} layers",
                params.len(),
                spec.layers.len()
            )));
        }
        for (l, p) in spec.layers.iter().zip(&params) {
            let expected = match init_layer(&l.kind, 0, 0) {
                Some(e) => Some((e.weight.shape().to_vec(), e.bias.shape().to_vec())),
                None => None,
            };
            let got = p.as_ref().map(|p| (p.weight.shape().to_vec(), p.bias.shape().to_vec()));
            if expected != got {
                return Err(Error::shape(
                    "model",
                    format!("layer `{}` expects params {expected:?}, got {got:?}", l.name),
                ));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Option<LayerParams<T>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams<T>>] {
        &mut self.params
    }

    pub fn layer_params(&self, name: &str) -> Result<Option<&LayerParams<T>>> {
        Ok(self.params[self.spec.layer_index(name)?].as_ref())
    }

    pub fn tap(&self, name: &str) -> Result<TapPoint> {
        self.spec.tap(name)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| LayerParams {
                        weight: p.weight.cast(),
                        bias: p.bias.cast(),
                    })
                })
                .collect(),
        }
    }

    /// Copy of the model with `layer` and every later parameterized layer
    /// re-drawn from the initialization distribution.
    pub fn randomize_from(&self, layer: &str, seed: u64) -> Result<Self> {
        let start = self.spec.layer_index(layer)?;
        let mut out = self.clone();
        for (i, l) in self.spec.layers.iter().enumerate().skip(start) {
            if let Some(p) = init_layer(&l.kind, seed, i) {
                out.params[i] = Some(LayerParams {
                    weight: p.weight.cast(),
                    bias: p.bias.cast(),
                });
            }
        }
        Ok(out)
    }

    /// Place all parameters on `tape`, as gradient-receiving leaves when
    /// `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            params: self
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| {
                        (
                            tape.leaf(p.weight.clone(), trainable),
                            tape.leaf(p.bias.clone(), trainable),
                        )
                    })
                })
                .collect(),
        }
    }

    /// Run `layers` (by index) on `x`.
    pub fn run_layers(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        mut x: Var,
        layers: Range<usize>,
        opts: ForwardOptions,
    ) -> Result<Var> {
        for i in layers {
            let l = &self.spec.layers[i];
            x = match l.kind {
                LayerKind::Conv { stride, pad, .. } => {
                    let (w, b) = bound.params[i].expect("conv layer has params");
                    tape.conv2d(x, w, b, stride, pad)?
                }
                LayerKind::Relu => tape.relu_with(x, opts.guided_relu),
                LayerKind::MaxPool { size } => tape.maxpool2d(x, size)?,
                LayerKind::Flatten => {
                    let s = tape.shape(x).to_vec();
                    let inner: usize = s[1..].iter().product();
                    tape.reshape(x, &[s[0], inner])?
                }
                LayerKind::Dense { .. } => {
                    let (w, b) = bound.params[i].expect("dense layer has params");
                    tape.linear(x, w, b)?
                }
                LayerKind::Softmax => tape.softmax(x),
            };
        }
        Ok(x)
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let s = tape.shape(x);
        let (c, h, w) = self.spec.input_shape;
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::shape(
                "model",
                format!("input {s:?} does not match [N,{c},{h},{w}]"),
            ));
        }
        Ok(())
    }

    /// Logits for a batch `x [N,C,H,W]` already on the tape.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, opts: ForwardOptions) -> Result<Var> {
        self.check_input(tape, x)?;
        self.run_layers(tape, bound, x, self.spec.logit_range(), opts)
    }

    /// Forward pass that exposes the feature map at `tap` and optionally
    /// replaces it with `splice(map)` before continuing. Returns
    /// `(logits, tapped map)`; the map is the value before splicing.
    pub fn forward_with_tap<F>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        tap: &TapPoint,
        splice: Option<F>,
        opts: ForwardOptions,
    ) -> Result<(Var, Var)>
    where
        F: FnOnce(&mut Tape<T>, Var) -> Result<Var>,
    {
        self.check_input(tape, x)?;
        let end = self.spec.logit_range().end;
        if tap.layer_index >= end || self.spec.tap(&tap.name)? != *tap {
            return Err(Error::InvalidArgument(format!("tap `{}` is not valid for this model", tap.name)));
        }
        let features = self.run_layers(tape, bound, x, 0..tap.layer_index + 1, opts)?;
        let spliced = match splice {
            Some(f) => {
                let z = f(tape, features)?;
                if tape.shape(z) != tape.shape(features) {
                    return Err(Error::shape(
                        "splice",
                        format!(
                            "splice changed the tap shape {:?} -> {:?}",
                            tape.shape(features),
                            tape.shape(z)
                        ),
                    ));
                }
                z
            }
            None => features,
        };
        let logits = self.run_layers(tape, bound, spliced, tap.layer_index + 1..end, opts)?;
        Ok((logits, features))
    }

    /// Continue a forward pass from a (possibly modified) map at `tap`.
    pub fn forward_from_tap(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        features: Var,
        tap: &TapPoint,
        opts: ForwardOptions,
    ) -> Result<Var> {
        let end = self.spec.logit_range().end;
        self.run_layers(tape, bound, features, tap.layer_index + 1..end, opts)
    }

    /// Largest batch pushed through one tape by the convenience helpers.
    const CHUNK: usize = 64;

    fn batched<F>(&self, x: &Tensor<T>, mut f: F) -> Result<Tensor<T>>
    where
        F: FnMut(&mut Tape<T>, &Bound, Var) -> Result<Var>,
    {
        let n = x.shape()[0];
        let per: usize = x.numel() / n;
        let mut out: Vec<T> = Vec::new();
        let mut tail_shape: Option<Vec<usize>> = None;
        for start in (0..n).step_by(Self::CHUNK) {
            let end = (start + Self::CHUNK).min(n);
            let mut shape = x.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::from_vec(shape, x.data()[start * per..end * per].to_vec())?;
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let xv = tape.constant(chunk);
            let y = f(&mut tape, &bound, xv)?;
            tail_shape.get_or_insert_with(|| tape.shape(y)[1..].to_vec());
            out.extend_from_slice(tape.value(y).data());
        }
        let mut shape = vec![n];
        shape.extend(tail_shape.unwrap_or_default());
        Tensor::from_vec(shape, out)
    }

    /// Logits `[N, K]` for a batch `[N,C,H,W]`.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.batched(x, |tape, bound, xv| self.forward(tape, bound, xv, ForwardOptions::default()))
    }

    /// Softmax probabilities `[N, K]`.
    pub fn probabilities(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.batched(x, |tape, bound, xv| {
            let logits = self.forward(tape, bound, xv, ForwardOptions::default())?;
            Ok(tape.softmax(logits))
        })
    }

    /// Feature maps `[N, c, h, w]` at `tap`.
    pub fn features(&self, x: &Tensor<T>, tap: &TapPoint) -> Result<Tensor<T>> {
        self.batched(x, |tape, bound, xv| {
            self.check_input(tape, xv)?;
            self.run_layers(tape, bound, xv, 0..tap.layer_index + 1, ForwardOptions::default())
        })
    }

    /// Feature maps at several taps from one pass per chunk, in `taps` order.
    pub fn features_multi(&self, x: &Tensor<T>, taps: &[TapPoint]) -> Result<Vec<Tensor<T>>> {
        let n = x.shape()[0];
        let per = x.numel() / n;
        let mut outs: Vec<Vec<T>> = vec![Vec::new(); taps.len()];
        let last = taps.iter().map(|t| t.layer_index).max().unwrap_or(0);
        for start in (0..n).step_by(Self::CHUNK) {
            let end = (start + Self::CHUNK).min(n);
            let mut shape = x.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::from_vec(shape, x.data()[start * per..end * per].to_vec())?;
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let mut v = tape.constant(chunk);
            self.check_input(&tape, v)?;
            for i in 0..=last {
                v = self.run_layers(&mut tape, &bound, v, i..i + 1, ForwardOptions::default())?;
                for (t, out) in taps.iter().zip(outs.iter_mut()) {
                    if t.layer_index == i {
                        out.extend_from_slice(tape.value(v).data());
                    }
                }
            }
        }
        taps.iter()
            .zip(outs)
            .map(|(t, data)| Tensor::from_vec(vec![n, t.shape.0, t.shape.1, t.shape.2], data))
            .collect()
    }

    /// Logits computed from maps at `tap` (`[N, c, h, w]`).
    pub fn logits_from_tap(&self, features: &Tensor<T>, tap: &TapPoint) -> Result<Tensor<T>> {
        self.batched(features, |tape, bound, fv| {
            self.forward_from_tap(tape, bound, fv, tap, ForwardOptions::default())
        })
    }
}
