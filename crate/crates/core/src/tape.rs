//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value; node ids only
//! ever refer to earlier nodes, so iterating the tape backwards is a valid
//! reverse topological order. A node requires a gradient iff any of its
//! inputs does; leaves decide for themselves.

use crate::error::{Error, Result};
use crate::kernels::{blur, conv, pool, resize};
use crate::real::Real;
use crate::tensor::{dims4, Tensor};

/// Clamp applied before every logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Upper clamp on the mixing coefficient inside the Gaussian KL term; the
/// `-ln(1 - lambda)` term is singular at 1.
pub const KL_LAMBDA_MAX: f64 = 1.0 - 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu {
        input: Var,
        guided: bool,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Sigmoid(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Mean(Var),
    Sum(Var),
    SumAxis {
        input: Var,
        axis: usize,
    },
    Log(Var),
    Exp(Var),
    Blur {
        input: Var,
        kernel: Vec<T>,
    },
    Resize(Var),
    Reshape(Var),
    RepeatBatch(Var),
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    GaussianKl {
        lambda: Var,
        r_norm: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` was
    /// reachable and requires a gradient.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let g = conv::ConvGeom::new(self.shape(input), self.shape(weight), self.shape(bias), stride, pad)?;
        let out = conv::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &g,
        );
        let value = Tensor::from_vec(g.out_shape(), out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            &[input, weight, bias],
        ))
    }

    /// Fully connected layer: `x [N, in]`, `weight [out, in]`, `bias [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        let (n, fin, fout) = match (xs, ws) {
            ([n, fin], [fout, win]) if fin == win && bs == [*fout] => (*n, *fin, *fout),
            _ => {
                return Err(Error::shape(
                    "linear",
                    format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
                ))
            }
        };
        let mut out = Vec::with_capacity(n * fout);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias).data());
        }
        T::gemm(
            n,
            fin,
            fout,
            T::one(),
            self.value(input).data(),
            (fin as isize, 1),
            self.value(weight).data(),
            (1, fin as isize),
            T::one(),
            &mut out,
            (fout as isize, 1),
        );
        let value = Tensor::from_vec(vec![n, fout], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }, &[input, weight, bias]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.relu_with(input, false)
    }

    /// ReLU whose backward pass also zeroes negative upstream gradients when
    /// `guided` is set (guided backpropagation).
    pub fn relu_with(&mut self, input: Var, guided: bool) -> Var {
        let value = self.value(input).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu { input, guided }, &[input])
    }

    pub fn maxpool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let (shape, out, argmax) = pool::maxpool2d_forward(self.value(input).data(), self.shape(input), size)?;
        let value = Tensor::from_vec(shape, out)?;
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, &[input]))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(value, Op::Sigmoid(input), &[input])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let k = *x.shape().last().unwrap_or(&1);
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        let value = Tensor::from_vec(x.shape().to_vec(), out).expect("shape preserved");
        self.push(value, Op::Softmax(input), &[input])
    }

    /// Mean negative log-likelihood of `targets` under softmax(`logits`),
    /// with probabilities clamped to at least [`LOG_EPS`] before the log.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (n, k) = match *x.shape() {
            [n, k] => (n, k),
            _ => return Err(Error::shape("cross_entropy", format!("logits must be [N,K], got {:?}", x.shape()))),
        };
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidArgument(format!("target class {bad} out of range for {k} classes")));
        }
        let mut probs = x.data().to_vec();
        let mut total = T::zero();
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            softmax_in_place(row);
            total -= row[t].max(T::lit(LOG_EPS)).ln();
        }
        let value = Tensor::scalar(total / T::lit(n as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, input: Var, c: T) -> Var {
        let value = self.value(input).map(|v| v * c);
        self.push(value, Op::Scale(input, c), &[input])
    }

    pub fn add_scalar(&mut self, input: Var, c: T) -> Var {
        let value = self.value(input).map(|v| v + c);
        self.push(value, Op::AddScalar(input), &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).mean());
        self.push(value, Op::Mean(input), &[input])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        self.push(value, Op::Sum(input), &[input])
    }

    /// Sum over `axis`, dropping it (a rank-1 input yields a `[1]` scalar).
    pub fn sum_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let x = self.value(input);
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut new_shape: Vec<usize> = shape.to_vec();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let value = Tensor::from_vec(new_shape, out)?;
        Ok(self.push(value, Op::SumAxis { input, axis }, &[input]))
    }

    /// Natural log with the input clamped to at least [`LOG_EPS`].
    pub fn log(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(T::lit(LOG_EPS)).ln());
        self.push(value, Op::Log(input), &[input])
    }

    pub fn exp(&mut self, input: Var) -> Var {
        let value = self.value(input).map(T::exp);
        self.push(value, Op::Exp(input), &[input])
    }

    /// Separable Gaussian blur of every spatial plane of an `[N,C,H,W]`
    /// tensor; kernel radius `ceil(3 sigma)`, reflect padding, `sigma == 0`
    /// is the identity.
    pub fn gaussian_blur(&mut self, input: Var, sigma: f64) -> Result<Var> {
        if !(sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("blur sigma must be >= 0, got {sigma}")));
        }
        let (n, c, h, w) = dims4(self.shape(input), "gaussian_blur")?;
        let kernel = blur::gaussian_kernel::<T>(sigma);
        let out = blur::blur_forward(self.value(input).data(), n * c, h, w, &kernel);
        let value = Tensor::from_vec(vec![n, c, h, w], out)?;
        Ok(self.push(value, Op::Blur { input, kernel }, &[input]))
    }

    /// Bilinear resize of every spatial plane (half-pixel centers).
    pub fn resize_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(input), "resize_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument("resize target must be at least 1x1".into()));
        }
        let out = resize::resize_forward(self.value(input).data(), n * c, (h, w), (out_h, out_w));
        let value = Tensor::from_vec(vec![n, c, out_h, out_w], out)?;
        Ok(self.push(value, Op::Resize(input), &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(input), &[input]))
    }

    /// Repeat a tensor with leading dim 1 `copies` times along that dim.
    pub fn repeat_batch(&mut self, input: Var, copies: usize) -> Result<Var> {
        let x = self.value(input);
        if x.shape()[0] != 1 || copies == 0 {
            return Err(Error::shape(
                "repeat_batch",
                format!("need leading dim 1 and copies >= 1, got {:?} x {copies}", x.shape()),
            ));
        }
        let mut shape = x.shape().to_vec();
        shape[0] = copies;
        let data = x.data().repeat(copies);
        let value = Tensor::from_vec(shape, data)?;
        Ok(self.push(value, Op::RepeatBatch(input), &[input]))
    }

    /// Row-wise pick: `out[i] = x[i, index[i]]` for `x [N, K]`.
    pub fn gather(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let (n, k) = match *x.shape() {
            [n, k] => (n, k),
            _ => return Err(Error::shape("gather", format!("need [N,K], got {:?}", x.shape()))),
        };
        if index.len() != n || index.iter().any(|&i| i >= k) {
            return Err(Error::shape("gather", format!("index {index:?} for shape [{n},{k}]")));
        }
        let out: Vec<T> = index.iter().enumerate().map(|(r, &i)| x.data()[r * k + i]).collect();
        let value = Tensor::from_vec(vec![n], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                input,
                index: index.to_vec(),
            },
            &[input],
        ))
    }

    /// Per-element `KL(N(l r + (1-l) mu, (1-l)^2 sigma^2) || N(mu, sigma^2))`
    /// in nats, written in standardized form with `r_norm = (r - mu) / sigma`:
    /// `-ln(1-l) + ((1-l)^2 + l^2 r_norm^2)/2 - 1/2`, with `l` clamped to
    /// [`KL_LAMBDA_MAX`].
    pub fn gaussian_kl(&mut self, lambda: Var, r_norm: Var) -> Result<Var> {
        let value = self
            .value(lambda)
            .zip_map(self.value(r_norm), |l, r| gaussian_kl_value(l, r))?;
        Ok(self.push(value, Op::GaussianKl { lambda, r_norm }, &[lambda, r_norm]))
    }

    /// Populate gradients of the scalar `loss` with respect to every node
    /// that requires one. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(T::one()));
        }
        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backprop_node(id, &dy, &mut grads)?;
            grads[id] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let y = &node.value;
        let g = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let geom = conv::ConvGeom::new(
                    self.shape(*input),
                    self.shape(*weight),
                    self.shape(*bias),
                    *stride,
                    *pad,
                )?;
                let want = (
                    self.requires_grad(*input),
                    self.requires_grad(*weight),
                    self.requires_grad(*bias),
                );
                let r = conv::conv2d_backward(self.value(*input).data(), self.value(*weight).data(), g, &geom, want);
                if let Some(d) = r.input {
                    self.accumulate(grads, *input, d);
                }
                if let Some(d) = r.weight {
                    self.accumulate(grads, *weight, d);
                }
                if let Some(d) = r.bias {
                    self.accumulate(grads, *bias, d);
                }
            }
            Op::Linear { input, weight, bias } => {
                let (n, fin) = (self.shape(*input)[0], self.shape(*input)[1]);
                let fout = self.shape(*weight)[0];
                if self.requires_grad(*input) {
                    let mut dx = vec![T::zero(); n * fin];
                    T::gemm(
                        n,
                        fout,
                        fin,
                        T::one(),
                        g,
                        (fout as isize, 1),
                        self.value(*weight).data(),
                        (fin as isize, 1),
                        T::zero(),
                        &mut dx,
                        (fin as isize, 1),
                    );
                    self.accumulate(grads, *input, dx);
                }
                if self.requires_grad(*weight) {
                    let mut dw = vec![T::zero(); fout * fin];
                    T::gemm(
                        fout,
                        n,
                        fin,
                        T::one(),
                        g,
                        (1, fout as isize),
                        self.value(*input).data(),
                        (fin as isize, 1),
                        T::zero(),
                        &mut dw,
                        (fin as isize, 1),
                    );
                    self.accumulate(grads, *weight, dw);
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![T::zero(); fout];
                    for row in g.chunks(fout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Relu { input, guided } => {
                let x = self.value(*input).data();
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| {
                        if xv > T::zero() && (!guided || gv > T::zero()) {
                            gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *input, dx);
            }
            Op::MaxPool2d { input, argmax } => {
                let dx = pool::maxpool2d_backward(g, argmax, self.value(*input).numel());
                self.accumulate(grads, *input, dx);
            }
            Op::Sigmoid(input) => {
                let dx = y.data().iter().zip(g).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
                self.accumulate(grads, *input, dx);
            }
            Op::Softmax(input) => {
                let k = *y.shape().last().unwrap_or(&1);
                let mut dx = Vec::with_capacity(y.numel());
                for (row, grow) in y.data().chunks(k).zip(g.chunks(k)) {
                    let dot: T = row.iter().zip(grow).map(|(&p, &gv)| p * gv).sum();
                    dx.extend(row.iter().zip(grow).map(|(&p, &gv)| p * (gv - dot)));
                }
                self.accumulate(grads, *input, dx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = self.shape(*logits)[1];
                let n = targets.len();
                let scale = g[0] / T::lit(n as f64);
                let mut dx = vec![T::zero(); n * k];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &probs[r * k..(r + 1) * k];
                    if row[t] < T::lit(LOG_EPS) {
                        continue;
                    }
                    for j in 0..k {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        dx[r * k + j] = (row[j] - onehot) * scale;
                    }
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let bv = self.value(*b).data();
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(&gv, &x)| gv * x).collect());
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data();
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(&gv, &x)| gv * x).collect());
                }
            }
            Op::Scale(input, c) => {
                self.accumulate(grads, *input, g.iter().map(|&v| v * *c).collect());
            }
            Op::AddScalar(input) | Op::Reshape(input) => {
                self.accumulate(grads, *input, g.to_vec());
            }
            Op::Mean(input) => {
                let n = self.value(*input).numel();
                let v = g[0] / T::lit(n as f64);
                self.accumulate(grads, *input, vec![v; n]);
            }
            Op::Sum(input) => {
                let n = self.value(*input).numel();
                self.accumulate(grads, *input, vec![g[0]; n]);
            }
            Op::SumAxis { input, axis } => {
                let shape = self.shape(*input);
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut dx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        dx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Log(input) => {
                let eps = T::lit(LOG_EPS);
                let x = self.value(*input).data();
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > eps { gv / xv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *input, dx);
            }
            Op::Exp(input) => {
                let dx = y.data().iter().zip(g).map(|(&e, &gv)| e * gv).collect();
                self.accumulate(grads, *input, dx);
            }
            Op::Blur { input, kernel } => {
                let (n, c, h, w) = dims4(y.shape(), "gaussian_blur")?;
                let dx = blur::blur_backward(g, n * c, h, w, kernel);
                self.accumulate(grads, *input, dx);
            }
            Op::Resize(input) => {
                let (n, c, h, w) = dims4(self.shape(*input), "resize_bilinear")?;
                let (_, _, oh, ow) = dims4(y.shape(), "resize_bilinear")?;
                let dx = resize::resize_backward(g, n * c, (h, w), (oh, ow));
                self.accumulate(grads, *input, dx);
            }
            Op::RepeatBatch(input) => {
                let inner = self.value(*input).numel();
                let mut dx = vec![T::zero(); inner];
                for chunk in g.chunks(inner) {
                    for (d, &v) in dx.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Gather { input, index } => {
                let k = self.shape(*input)[1];
                let mut dx = vec![T::zero(); self.value(*input).numel()];
                for (r, &i) in index.iter().enumerate() {
                    dx[r * k + i] += g[r];
                }
                self.accumulate(grads, *input, dx);
            }
            Op::GaussianKl { lambda, r_norm } => {
                let lv = self.value(*lambda).data();
                let rv = self.value(*r_norm).data();
                if self.requires_grad(*lambda) {
                    let dl = lv
                        .iter()
                        .zip(rv)
                        .zip(g)
                        .map(|((&l, &r), &gv)| gv * gaussian_kl_dlambda(l, r))
                        .collect();
                    self.accumulate(grads, *lambda, dl);
                }
                if self.requires_grad(*r_norm) {
                    let max = T::lit(KL_LAMBDA_MAX);
                    let dr = lv
                        .iter()
                        .zip(rv)
                        .zip(g)
                        .map(|((&l, &r), &gv)| {
                            let l = l.min(max);
                            gv * l * l * r
                        })
                        .collect();
                    self.accumulate(grads, *r_norm, dr);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], target: Var, delta: Vec<T>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => {
                let shape = self.nodes[target.0].value.shape().to_vec();
                *slot = Some(Tensor::from_vec(shape, delta).expect("gradient matches value shape"));
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Closed-form per-element information term, see [`Tape::gaussian_kl`].
pub fn gaussian_kl_value<T: Real>(lambda: T, r_norm: T) -> T {
    let l = lambda.min(T::lit(KL_LAMBDA_MAX));
    let half = T::lit(0.5);
    // -ln(1-l) - l + l^2/2 == -ln(1-l) + ((1-l)^2 - 1)/2, arranged to keep
    // precision for small l.
    (-(-l).ln_1p() - l) + half * l * l + half * l * l * r_norm * r_norm
}

fn gaussian_kl_dlambda<T: Real>(lambda: T, r_norm: T) -> T {
    if lambda >= T::lit(KL_LAMBDA_MAX) {
        return T::zero();
    }
    let one = T::one();
    one / (one - lambda) - (one - lambda) + lambda * r_norm * r_norm
}
