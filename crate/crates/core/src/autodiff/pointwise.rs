use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::tape::{GradSink, Node, Op, ScalarOp, Tape, Var};
use super::Activation;

/// `ln(1 + e^x)` without overflow for large `|x|`.
pub fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl Activation {
    pub fn apply<T: Element>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

impl<T: Element> Tape<T> {
    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let x = self.value(input);
        let out: Vec<T> = x.data().iter().map(|&v| kind.apply(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.requires_grad(input);
        self.push("activation", value, Op::Activation { input, kind }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn softplus(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Softplus)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, input: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, b) = (T::from_f64_lossy(scale), T::from_f64_lossy(shift));
        let x = self.value(input);
        let out = x.data().iter().map(|&v| s * v + b).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.requires_grad(input);
        self.push("affine", value, Op::Affine { input, scale: s }, rg)
    }

    fn scalar_binary(&mut self, input: Var, scalar: Var, kind: ScalarOp) -> Result<Var> {
        if !self.value(scalar).is_scalar() {
            return Err(Error::shape(
                "scalar_binary",
                format!("expected a one-element tensor, got {:?}", self.value(scalar).shape()),
            ));
        }
        let s = self.value(scalar).data()[0];
        let x = self.value(input);
        let out = x
            .data()
            .iter()
            .map(|&v| match kind {
                ScalarOp::Add => v + s,
                ScalarOp::Mul => v * s,
                ScalarOp::Div => v / s,
            })
            .collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.any_requires_grad(&[input, scalar]);
        self.push("scalar_binary", value, Op::ScalarBinary { input, scalar, kind }, rg)
    }

    /// Adds a (possibly trainable) one-element tensor to every element.
    pub fn add_scalar(&mut self, input: Var, scalar: Var) -> Result<Var> {
        self.scalar_binary(input, scalar, ScalarOp::Add)
    }

    pub fn mul_scalar(&mut self, input: Var, scalar: Var) -> Result<Var> {
        self.scalar_binary(input, scalar, ScalarOp::Mul)
    }

    pub fn div_scalar(&mut self, input: Var, scalar: Var) -> Result<Var> {
        self.scalar_binary(input, scalar, ScalarOp::Div)
    }

    /// Elementwise product of two equally shaped tensors.
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(a.shape().to_vec(), out)?;
        let rg = self.any_requires_grad(&[lhs, rhs]);
        self.push("mul", value, Op::Mul { lhs, rhs }, rg)
    }

    /// Elementwise square root. The gradient at exactly zero is taken as 0.
    pub fn sqrt(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if let Some(i) = x.data().iter().position(|&v| v < T::zero()) {
            return Err(Error::Contract(format!("sqrt of negative value at element {i}")));
        }
        let out = x.data().iter().map(|v| v.sqrt()).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.requires_grad(input);
        self.push("sqrt", value, Op::Sqrt { input }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().copied().sum();
        let rg = self.requires_grad(input);
        self.push("sum", Tensor::scalar(total), Op::SumAll { input }, rg)
    }
}

pub(crate) fn activation_backward<T: Element>(
    tape: &Tape<T>,
    node: &Node<T>,
    input: Var,
    kind: Activation,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let x = tape.value(input).data();
    let y = node.value.data();
    sink.add(input, |dx| {
        for i in 0..g.len() {
            let local = match kind {
                Activation::Relu => {
                    if x[i] > T::zero() {
                        T::one()
                    } else {
                        T::zero()
                    }
                }
                Activation::Softplus => sigmoid(x[i]),
                Activation::Sigmoid => y[i] * (T::one() - y[i]),
            };
            dx[i] = dx[i] + g[i] * local;
        }
    });
}

pub(crate) fn affine_backward<T: Element>(input: Var, scale: T, g: &[T], sink: &mut GradSink<'_, T>) {
    sink.add(input, |dx| {
        for (d, &v) in dx.iter_mut().zip(g) {
            *d = *d + scale * v;
        }
    });
}

pub(crate) fn scalar_binary_backward<T: Element>(
    tape: &Tape<T>,
    input: Var,
    scalar: Var,
    kind: ScalarOp,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let s = tape.value(scalar).data()[0];
    let x = tape.value(input).data();
    sink.add(input, |dx| {
        for (d, &v) in dx.iter_mut().zip(g) {
            *d = *d
                + match kind {
                    ScalarOp::Add => v,
                    ScalarOp::Mul => v * s,
                    ScalarOp::Div => v / s,
                };
        }
    });
    sink.add(scalar, |ds| {
        let total: T = match kind {
            ScalarOp::Add => g.iter().copied().sum(),
            ScalarOp::Mul => g.iter().zip(x).map(|(&a, &b)| a * b).sum(),
            ScalarOp::Div => g.iter().zip(x).map(|(&a, &b)| -a * b / (s * s)).sum(),
        };
        ds[0] = ds[0] + total;
    });
}

pub(crate) fn mul_backward<T: Element>(
    tape: &Tape<T>,
    lhs: Var,
    rhs: Var,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let a = tape.value(lhs).data();
    let b = tape.value(rhs).data();
    sink.add(lhs, |d| {
        for i in 0..g.len() {
            d[i] = d[i] + g[i] * b[i];
        }
    });
    sink.add(rhs, |d| {
        for i in 0..g.len() {
            d[i] = d[i] + g[i] * a[i];
        }
    });
}

pub(crate) fn sqrt_backward<T: Element>(node: &Node<T>, input: Var, g: &[T], sink: &mut GradSink<'_, T>) {
    let y = node.value.data();
    let two = T::one() + T::one();
    sink.add(input, |dx| {
        for i in 0..g.len() {
            if y[i] > T::zero() {
                dx[i] = dx[i] + g[i] / (two * y[i]);
            }
        }
    });
}

pub(crate) fn sum_backward<T: Element>(input: Var, g: &[T], sink: &mut GradSink<'_, T>) {
    sink.add(input, |dx| dx.iter_mut().for_each(|d| *d = *d + g[0]));
}
