//! Reverse-mode automatic differentiation over dense `f32`/`f64` arrays.
//!
//! A [`Tape`] records every operation applied to its [`Tensor`] handles.
//! [`Tape::backward`] walks the record in reverse and returns a
//! [`Gradients`] table with one entry per leaf that requires a gradient.
//!
//! Spatial tensors use the `T×X×Y×Z×C` layout with channels fastest.

mod array;
mod gradcheck;
pub mod kernels;
mod params;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

pub use array::{broadcast_shape, expand, sum_to_shape, zip_broadcast, NdArray};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use kernels::Padding;
pub use params::ParamSet;

use crate::real::Real;
use kernels::{ConvGeometry, InstanceNormCache};

/// Lower clamp applied to the argument of [`Tensor::log`].
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported kernel {kernel:?} with stride {stride}")]
    UnsupportedKernel { kernel: Vec<usize>, stride: usize },
    #[error("log argument outside domain")]
    DomainError,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("instance norm needs at least two spatial voxels")]
    DegenerateSpatial,
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
}

#[derive(Clone, Copy, Debug)]
enum Unary<T> {
    Neg,
    Scale(T),
    AddScalar(T),
    Exp,
    Log,
    MaxConst(T),
    Elu(T),
    Sigmoid,
    LogCosh,
    Sqrt,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Unary(Unary<T>, usize),
    Binary(Binary, usize, usize),
    SumTo(usize),
    Expand(usize),
    Reshape(usize),
    Concat(usize, usize),
    Conv3d {
        input: usize,
        kernel: usize,
        geometry: ConvGeometry,
    },
    ConvTranspose3d {
        input: usize,
        kernel: usize,
    },
    InstanceNorm {
        input: usize,
        inv_std: Vec<T>,
    },
    Softmax(usize),
    Resize {
        input: usize,
        source: [usize; 3],
    },
}

struct Node<T> {
    value: Rc<NdArray<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<Vec<(String, usize)>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Tensor<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: NdArray<T>, op: Op<T>, requires_grad: bool) -> Tensor<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Tensor {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<NdArray<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// A constant input: no gradient is tracked for it.
    pub fn constant(&self, value: NdArray<T>) -> Tensor<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn variable(&self, value: NdArray<T>) -> Tensor<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A named trainable leaf; its gradient appears in
    /// [`Gradients::params`] (zero if the loss never touches it).
    pub fn param(&self, name: &str, value: NdArray<T>) -> Tensor<'_, T> {
        let t = self.variable(value);
        self.params.borrow_mut().push((name.to_string(), t.id));
        t
    }

    /// Register every entry of `params` and return the handles by name.
    pub fn bind<'t>(&'t self, params: &ParamSet<T>) -> Bound<'t, T> {
        let map = params
            .iter()
            .map(|(name, value)| (name.to_string(), self.param(name, value.clone())))
            .collect();
        Bound { map }
    }

    /// Bind parameters as constants, for inference.
    pub fn bind_frozen<'t>(&'t self, params: &ParamSet<T>) -> Bound<'t, T> {
        let map = params
            .iter()
            .map(|(name, value)| (name.to_string(), self.constant(value.clone())))
            .collect();
        Bound { map }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Tensor<'_, T>) -> Result<Gradients<T>, TensorError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<NdArray<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(NdArray::full(root.value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut send = |target: usize, contribution: NdArray<T>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Unary(u, a) => {
                    let x = val(*a);
                    let y = &node.value;
                    let d = unary_backward(*u, x, y, &g);
                    send(*a, d);
                }
                Op::Binary(b, lhs, rhs) => {
                    let (x, y) = (val(*lhs), val(*rhs));
                    let out_shape = node.value.shape();
                    let reduce = |full: NdArray<T>, shape: &[usize]| {
                        sum_to_shape(&full, shape).expect("shapes validated in forward")
                    };
                    let needs_l = nodes[*lhs].requires_grad;
                    let needs_r = nodes[*rhs].requires_grad;
                    match b {
                        Binary::Add => {
                            if needs_l {
                                send(*lhs, reduce(g.clone(), x.shape()));
                            }
                            if needs_r {
                                send(*rhs, reduce(g.clone(), y.shape()));
                            }
                        }
                        Binary::Sub => {
                            if needs_l {
                                send(*lhs, reduce(g.clone(), x.shape()));
                            }
                            if needs_r {
                                send(*rhs, reduce(g.map(|v| -v), y.shape()));
                            }
                        }
                        Binary::Mul => {
                            if needs_l {
                                let yb = expand(y, out_shape).expect("validated");
                                let d = zip_broadcast(&g, &yb, |a, b| a * b).expect("validated");
                                send(*lhs, reduce(d, x.shape()));
                            }
                            if needs_r {
                                let xb = expand(x, out_shape).expect("validated");
                                let d = zip_broadcast(&g, &xb, |a, b| a * b).expect("validated");
                                send(*rhs, reduce(d, y.shape()));
                            }
                        }
                        Binary::Div => {
                            let yb = expand(y, out_shape).expect("validated");
                            if needs_l {
                                let d = zip_broadcast(&g, &yb, |a, b| a / b).expect("validated");
                                send(*lhs, reduce(d, x.shape()));
                            }
                            if needs_r {
                                // d(x/y)/dy = -out / y
                                let q = zip_broadcast(&node.value, &yb, |o, b| -o / b)
                                    .expect("validated");
                                let d = zip_broadcast(&g, &q, |a, b| a * b).expect("validated");
                                send(*rhs, reduce(d, y.shape()));
                            }
                        }
                    }
                }
                Op::SumTo(a) => {
                    send(*a, expand(&g, val(*a).shape()).expect("validated"));
                }
                Op::Expand(a) => {
                    send(*a, sum_to_shape(&g, val(*a).shape()).expect("validated"));
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    send(*a, g.reshaped(shape).expect("validated"));
                }
                Op::Concat(a, b) => {
                    let ca = *val(*a).shape().last().expect("rank 5");
                    let cb = *val(*b).shape().last().expect("rank 5");
                    let c = ca + cb;
                    let mut ga = Vec::with_capacity(val(*a).len());
                    let mut gb = Vec::with_capacity(val(*b).len());
                    for v in g.data().chunks_exact(c) {
                        ga.extend_from_slice(&v[..ca]);
                        gb.extend_from_slice(&v[ca..]);
                    }
                    send(
                        *a,
                        NdArray::new(val(*a).shape().to_vec(), ga).expect("validated"),
                    );
                    send(
                        *b,
                        NdArray::new(val(*b).shape().to_vec(), gb).expect("validated"),
                    );
                }
                Op::Conv3d {
                    input,
                    kernel,
                    geometry,
                } => {
                    let (dx, dw) = kernels::conv3d_backward(
                        val(*input),
                        val(*kernel),
                        &g,
                        geometry,
                        nodes[*input].requires_grad,
                        nodes[*kernel].requires_grad,
                    );
                    if let Some(dx) = dx {
                        send(*input, dx);
                    }
                    if let Some(dw) = dw {
                        send(*kernel, dw);
                    }
                }
                Op::ConvTranspose3d { input, kernel } => {
                    let (dx, dw) = kernels::conv_transpose3d_backward(
                        val(*input),
                        val(*kernel),
                        &g,
                        nodes[*input].requires_grad,
                        nodes[*kernel].requires_grad,
                    );
                    if let Some(dx) = dx {
                        send(*input, dx);
                    }
                    if let Some(dw) = dw {
                        send(*kernel, dw);
                    }
                }
                Op::InstanceNorm { input, inv_std } => {
                    let cache = InstanceNormCache {
                        normalized: (*node.value).clone(),
                        inv_std: inv_std.clone(),
                    };
                    send(*input, kernels::instance_norm_backward(&cache, &g));
                }
                Op::Softmax(a) => {
                    send(*a, kernels::softmax_last_axis_backward(&node.value, &g));
                }
                Op::Resize { input, source } => {
                    send(*input, kernels::resize_trilinear_adjoint(&g, *source));
                }
            }
        }

        let params = self
            .params
            .borrow()
            .iter()
            .map(|(name, id)| {
                let grad = grads[*id]
                    .clone()
                    .unwrap_or_else(|| NdArray::zeros(nodes[*id].value.shape()));
                (name.clone(), grad)
            })
            .collect();
        Ok(Gradients {
            by_id: grads,
            params,
        })
    }
}

fn unary_backward<T: Real>(
    u: Unary<T>,
    x: &NdArray<T>,
    y: &NdArray<T>,
    g: &NdArray<T>,
) -> NdArray<T> {
    let one = T::one();
    let eps = T::from_f64(LOG_EPS);
    let data: Vec<T> = match u {
        Unary::Neg => g.data().iter().map(|&d| -d).collect(),
        Unary::Scale(c) => g.data().iter().map(|&d| d * c).collect(),
        Unary::AddScalar(_) => g.data().to_vec(),
        Unary::Exp => g
            .data()
            .iter()
            .zip(y.data())
            .map(|(&d, &v)| d * v)
            .collect(),
        Unary::Log => g
            .data()
            .iter()
            .zip(x.data())
            .map(|(&d, &v)| if v > eps { d / v } else { T::zero() })
            .collect(),
        Unary::MaxConst(c) => g
            .data()
            .iter()
            .zip(x.data())
            .map(|(&d, &v)| if v > c { d } else { T::zero() })
            .collect(),
        Unary::Elu(alpha) => g
            .data()
            .iter()
            .zip(x.data().iter().zip(y.data()))
            .map(|(&d, (&v, &o))| if v >= T::zero() { d } else { d * (o + alpha) })
            .collect(),
        Unary::Sigmoid => g
            .data()
            .iter()
            .zip(y.data())
            .map(|(&d, &o)| d * o * (one - o))
            .collect(),
        Unary::LogCosh => g
            .data()
            .iter()
            .zip(x.data())
            .map(|(&d, &v)| d * v.tanh())
            .collect(),
        Unary::Sqrt => g
            .data()
            .iter()
            .zip(y.data())
            .map(|(&d, &o)| d / (o + o))
            .collect(),
    };
    NdArray::new(x.shape().to_vec(), data).expect("same shape")
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `ln cosh v` without overflow.
#[inline]
pub fn log_cosh_scalar<T: Real>(v: T) -> T {
    let a = v.abs();
    a + (-(a + a)).exp().ln_1p() - T::from_f64(std::f64::consts::LN_2)
}

impl<'t, T: Real> Tensor<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<NdArray<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        self.value().item()
    }

    fn unary(&self, u: Unary<T>, f: impl Fn(T) -> T) -> Tensor<'t, T> {
        let out = self.value().map(f);
        self.tape
            .push(out, Op::Unary(u, self.id), self.tape.requires(self.id))
    }

    fn binary(
        &self,
        other: &Tensor<'t, T>,
        b: Binary,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<'t, T>, TensorError> {
        let out = zip_broadcast(&self.value(), &other.value(), f)?;
        let rg = self.tape.requires(self.id) || self.tape.requires(other.id);
        Ok(self.tape.push(out, Op::Binary(b, self.id, other.id), rg))
    }

    pub fn add(&self, other: &Tensor<'t, T>) -> Result<Tensor<'t, T>, TensorError> {
        self.binary(other, Binary::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<'t, T>) -> Result<Tensor<'t, T>, TensorError> {
        self.binary(other, Binary::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<'t, T>) -> Result<Tensor<'t, T>, TensorError> {
        self.binary(other, Binary::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor<'t, T>) -> Result<Tensor<'t, T>, TensorError> {
        self.binary(other, Binary::Div, |a, b| a / b)
    }

    pub fn neg(&self) -> Tensor<'t, T> {
        self.unary(Unary::Neg, |v| -v)
    }

    pub fn scale(&self, c: T) -> Tensor<'t, T> {
        self.unary(Unary::Scale(c), move |v| v * c)
    }

    pub fn add_scalar(&self, c: T) -> Tensor<'t, T> {
        self.unary(Unary::AddScalar(c), move |v| v + c)
    }

    pub fn exp(&self) -> Tensor<'t, T> {
        self.unary(Unary::Exp, |v| v.exp())
    }

    /// Natural log with the argument clamped below at [`LOG_EPS`].
    pub fn log(&self) -> Result<Tensor<'t, T>, TensorError> {
        if self.value().data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::DomainError);
        }
        let eps = T::from_f64(LOG_EPS);
        Ok(self.unary(Unary::Log, move |v| v.max(eps).ln()))
    }

    pub fn sqrt(&self) -> Tensor<'t, T> {
        self.unary(Unary::Sqrt, |v| v.sqrt())
    }

    /// `max(x, c)` elementwise.
    pub fn max_const(&self, c: T) -> Tensor<'t, T> {
        self.unary(Unary::MaxConst(c), move |v| v.max(c))
    }

    pub fn relu(&self) -> Tensor<'t, T> {
        self.max_const(T::zero())
    }

    pub fn elu(&self, alpha: T) -> Tensor<'t, T> {
        self.unary(Unary::Elu(alpha), move |v| {
            if v >= T::zero() {
                v
            } else {
                alpha * v.exp_m1()
            }
        })
    }

    pub fn sigmoid(&self) -> Tensor<'t, T> {
        self.unary(Unary::Sigmoid, sigmoid_scalar)
    }

    pub fn log_cosh(&self) -> Tensor<'t, T> {
        self.unary(Unary::LogCosh, log_cosh_scalar)
    }

    /// Sum over `axes`, keeping them as extent-1 axes.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor<'t, T>, TensorError> {
        let mut shape = self.shape();
        for &a in axes {
            let len = shape.len();
            *shape.get_mut(a).ok_or_else(|| {
                TensorError::ShapeMismatch(format!("axis {a} out of range for rank {len}"))
            })? = 1;
        }
        let out = sum_to_shape(&self.value(), &shape)?;
        Ok(self
            .tape
            .push(out, Op::SumTo(self.id), self.tape.requires(self.id)))
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor<'t, T>, TensorError> {
        let shape = self.shape();
        let count: usize = axes
            .iter()
            .map(|&a| shape.get(a).copied().unwrap_or(1))
            .product();
        Ok(self
            .sum_axes(axes)?
            .scale(T::one() / T::from_f64(count as f64)))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<'t, T> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum_axes(&axes)
            .expect("all axes valid")
            .reshape(vec![])
            .expect("one element")
    }

    pub fn mean(&self) -> Tensor<'t, T> {
        let n = self.value().len();
        self.sum().scale(T::one() / T::from_f64(n as f64))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<'t, T>, TensorError> {
        let out = (*self.value()).clone().reshaped(shape)?;
        Ok(self
            .tape
            .push(out, Op::Reshape(self.id), self.tape.requires(self.id)))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<'t, T>, TensorError> {
        let out = expand(&self.value(), shape)?;
        Ok(self
            .tape
            .push(out, Op::Expand(self.id), self.tape.requires(self.id)))
    }

    /// Broadcast a length-`C` vector across every voxel of `like`.
    pub fn broadcast_channels(&self, like: &Tensor<'t, T>) -> Result<Tensor<'t, T>, TensorError> {
        let target = like.shape();
        let c = *target.last().unwrap_or(&0);
        if self.value().len() != c {
            return Err(TensorError::ShapeMismatch(format!(
                "channel vector of length {} vs {c} channels",
                self.value().len()
            )));
        }
        let mut vshape = vec![1; target.len()];
        *vshape.last_mut().expect("non-empty") = c;
        self.reshape(vshape)?.broadcast_to(&target)
    }

    /// Concatenate along the channel (last) axis; all other extents must match.
    pub fn concat_channels(&self, other: &Tensor<'t, T>) -> Result<Tensor<'t, T>, TensorError> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot concatenate {sa:?} and {sb:?} along channels"
            )));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut data = Vec::with_capacity(a.len() + b.len());
        for (va, vb) in a
            .data()
            .chunks_exact(ca.max(1))
            .zip(b.data().chunks_exact(cb.max(1)))
        {
            data.extend_from_slice(va);
            data.extend_from_slice(vb);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("non-empty") = ca + cb;
        let out = NdArray::new(shape, data)?;
        let rg = self.tape.requires(self.id) || self.tape.requires(other.id);
        Ok(self.tape.push(out, Op::Concat(self.id, other.id), rg))
    }

    pub fn conv3d(
        &self,
        kernel: &Tensor<'t, T>,
        stride: usize,
        padding: Padding,
    ) -> Result<Tensor<'t, T>, TensorError> {
        let (x, w) = (self.value(), kernel.value());
        let geometry = ConvGeometry::new(x.shape(), w.shape(), stride, padding)?;
        let out = kernels::conv3d_forward(&x, &w, &geometry);
        let rg = self.tape.requires(self.id) || self.tape.requires(kernel.id);
        Ok(self.tape.push(
            out,
            Op::Conv3d {
                input: self.id,
                kernel: kernel.id,
                geometry,
            },
            rg,
        ))
    }

    /// Stride-2 transposed convolution with a `2×2×2×Cin×Cout` kernel.
    pub fn conv_transpose3d(&self, kernel: &Tensor<'t, T>) -> Result<Tensor<'t, T>, TensorError> {
        let (x, w) = (self.value(), kernel.value());
        kernels::conv_transpose_shape(x.shape(), w.shape())?;
        let out = kernels::conv_transpose3d_forward(&x, &w);
        let rg = self.tape.requires(self.id) || self.tape.requires(kernel.id);
        Ok(self.tape.push(
            out,
            Op::ConvTranspose3d {
                input: self.id,
                kernel: kernel.id,
            },
            rg,
        ))
    }

    pub fn instance_norm(&self, eps: T) -> Result<Tensor<'t, T>, TensorError> {
        let cache = kernels::instance_norm_forward(&self.value(), eps)?;
        Ok(self.tape.push(
            cache.normalized,
            Op::InstanceNorm {
                input: self.id,
                inv_std: cache.inv_std,
            },
            self.tape.requires(self.id),
        ))
    }

    /// Softmax across the channel axis.
    pub fn softmax_channels(&self) -> Tensor<'t, T> {
        let out = kernels::softmax_last_axis(&self.value());
        self.tape
            .push(out, Op::Softmax(self.id), self.tape.requires(self.id))
    }

    /// Trilinear resize of the spatial axes to `target`.
    pub fn resize(&self, target: [usize; 3]) -> Result<Tensor<'t, T>, TensorError> {
        let x = self.value();
        let [_, nx, ny, nz, _] = x.dims5()?;
        let out = kernels::resize_trilinear(&x, target)?;
        Ok(self.tape.push(
            out,
            Op::Resize {
                input: self.id,
                source: [nx, ny, nz],
            },
            self.tape.requires(self.id),
        ))
    }
}

/// Parameter handles produced by [`Tape::bind`].
pub struct Bound<'t, T: Real> {
    map: HashMap<String, Tensor<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn get(&self, name: &str) -> Result<Tensor<'t, T>, TensorError> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }
}

/// Result of a reverse pass.
pub struct Gradients<T> {
    by_id: Vec<Option<NdArray<T>>>,
    params: Vec<(String, NdArray<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf created with [`Tape::variable`] or [`Tape::param`].
    pub fn wrt(&self, t: &Tensor<'_, T>) -> Option<&NdArray<T>> {
        self.by_id.get(t.id).and_then(|g| g.as_ref())
    }

    /// Gradients of every named parameter, in registration order.
    pub fn params(&self) -> &[(String, NdArray<T>)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&NdArray<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    /// Parameter gradients flattened in the order of `set`.
    pub fn flatten_like(&self, set: &ParamSet<T>) -> Result<Vec<T>, TensorError> {
        let mut out = Vec::with_capacity(set.numel());
        for (name, value) in set.iter() {
            match self.param(name) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(T::zero(), value.len())),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> NdArray<f64> {
        NdArray::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn mean_over_all_axes() {
        let tape = Tape::new();
        let x = tape.constant(arr(&[2, 2], &[1.0, 2.0, 3.0, 6.0]));
        assert_eq!(x.mean().item(), Some(3.0));
    }

    #[test]
    fn sum_loss_gives_ones() {
        let tape = Tape::new();
        let p = tape.param("p", arr(&[3], &[0.3, -1.0, 2.0]));
        let g = tape.backward(p.sum()).unwrap();
        assert_eq!(g.param("p").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_loss_gradient() {
        let tape = Tape::new();
        let p = tape.param("p", arr(&[2], &[1.0, -2.0]));
        let loss = p.mul(&p).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param("p").unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        let tape = Tape::new();
        let p = tape.param("p", arr(&[2], &[1.0, 2.0]));
        let _q = tape.param("q", arr(&[3], &[1.0, 2.0, 3.0]));
        let g = tape.backward(p.sum()).unwrap();
        assert_eq!(g.param("q").unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let p = tape.param("p", arr(&[2], &[1.0, 2.0]));
        assert!(matches!(
            tape.backward(p),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn shared_subexpression_matches_unrolled_tree() {
        // f = (p*p) + (p*p) through one shared node vs. two separate nodes
        let t1 = Tape::new();
        let p = t1.param("p", arr(&[3], &[0.5, -1.5, 2.0]));
        let s = p.mul(&p).unwrap().exp();
        let f = s.add(&s).unwrap().sum();
        let g1 = t1.backward(f).unwrap();

        let t2 = Tape::new();
        let p = t2.param("p", arr(&[3], &[0.5, -1.5, 2.0]));
        let a = p.mul(&p).unwrap().exp();
        let b = p.mul(&p).unwrap().exp();
        let f = a.add(&b).unwrap().sum();
        let g2 = t2.backward(f).unwrap();
        assert_eq!(g1.param("p").unwrap().data(), g2.param("p").unwrap().data());
    }

    #[test]
    fn concat_preserves_order() {
        let tape = Tape::new();
        let a = tape.constant(NdArray::from_fn(&[1, 1, 1, 2, 2], |i| i as f64));
        let b = tape.constant(NdArray::from_fn(&[1, 1, 1, 2, 3], |i| 10.0 + i as f64));
        let c = a.concat_channels(&b).unwrap();
        assert_eq!(c.shape(), vec![1, 1, 1, 2, 5]);
        assert_eq!(
            c.value().data(),
            &[0.0, 1.0, 10.0, 11.0, 12.0, 2.0, 3.0, 13.0, 14.0, 15.0]
        );
        let d = tape.constant(NdArray::zeros(&[1, 1, 2, 2, 3]));
        assert!(a.concat_channels(&d).is_err());
    }

    #[test]
    fn log_is_clamped() {
        let tape = Tape::new();
        let x = tape.constant(arr(&[2], &[0.0, 1.0]));
        let y = x.log().unwrap().value();
        assert!((y.data()[0] - LOG_EPS.ln()).abs() < 1e-9);
        let nan = tape.constant(arr(&[1], &[f64::NAN]));
        assert_eq!(nan.log().unwrap_err(), TensorError::DomainError);
    }

    #[test]
    fn conv_identity_and_counting() {
        let tape = Tape::new();
        let x = tape.constant(NdArray::from_fn(&[1, 3, 3, 3, 1], |i| i as f64));
        let w = tape.constant(NdArray::full(&[1, 1, 1, 1, 1], 1.0));
        let y = x.conv3d(&w, 1, Padding::Same).unwrap();
        assert_eq!(y.value().data(), x.value().data());

        let c = tape.constant(NdArray::full(&[1, 4, 4, 4, 1], 2.0));
        let ones = tape.constant(NdArray::full(&[3, 3, 3, 1, 1], 1.0));
        let y = c.conv3d(&ones, 1, Padding::Same).unwrap().value();
        // interior voxel (1,1,1)
        assert_eq!(y.data()[(4 + 1) * 4 + 1], 54.0);
    }

    #[test]
    fn transpose_conv_of_single_voxel() {
        let tape = Tape::new();
        let x = tape.constant(NdArray::full(&[1, 1, 1, 1, 1], 3.5));
        let w = tape.constant(NdArray::full(&[2, 2, 2, 1, 1], 1.0));
        let y = x.conv_transpose3d(&w).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 2, 2, 1]);
        assert!(y.value().data().iter().all(|&v| v == 3.5));
    }
}
