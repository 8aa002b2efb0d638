//! Convolution, pooling and batch normalization on NHWC tensors.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::tape::{GradSink, Node, Op, Tape, Var};

/// Per-channel statistics of the batch a [`Tape::batchnorm_train`] call
/// normalized with.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn nhwc(op: &'static str, t: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *t {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::shape(op, format!("expected a B x H x W x C tensor, got {t:?}"))),
    }
}

/// Unfolds 3x3 neighbourhoods (zero padded by one pixel) into rows of
/// length `9 * c`, ordered (ky, kx, channel) to match the kernel layout.
fn im2col<T: Element>(x: &[T], b: usize, h: usize, w: usize, c: usize, cols: &mut [T]) {
    let row_len = 9 * c;
    for n in 0..b {
        let img = &x[n * h * w * c..(n + 1) * h * w * c];
        for y in 0..h {
            for xx in 0..w {
                let row = &mut cols[((n * h + y) * w + xx) * row_len..][..row_len];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    for kx in 0..3 {
                        let dst = &mut row[(ky * 3 + kx) * c..][..c];
                        let sx = xx as isize + kx as isize - 1;
                        if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                        } else {
                            let src = (sy as usize * w + sx as usize) * c;
                            dst.copy_from_slice(&img[src..src + c]);
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(cols: &[T], b: usize, h: usize, w: usize, c: usize, dx: &mut [T]) {
    let row_len = 9 * c;
    for n in 0..b {
        let img = &mut dx[n * h * w * c..(n + 1) * h * w * c];
        for y in 0..h {
            for xx in 0..w {
                let row = &cols[((n * h + y) * w + xx) * row_len..][..row_len];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = &row[(ky * 3 + kx) * c..][..c];
                        let dst = (sy as usize * w + sx as usize) * c;
                        for (d, &s) in img[dst..dst + c].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

/// Returns `(xhat, gamma * xhat + beta)` with `xhat = (x - mean) * inv_std`
/// per channel.
fn normalize<T: Element>(x: &[T], mean: &[T], inv_std: &[T], gamma: &[T], beta: &[T]) -> (Vec<T>, Vec<T>) {
    let c = mean.len();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for ((orow, hrow), xrow) in out.chunks_exact_mut(c).zip(xhat.chunks_exact_mut(c)).zip(x.chunks_exact(c)) {
        for (((((o, h), &xv), &mu), &is), (&g, &b)) in orow
            .iter_mut()
            .zip(hrow.iter_mut())
            .zip(xrow)
            .zip(mean)
            .zip(inv_std)
            .zip(gamma.iter().zip(beta))
        {
            let xh = (xv - mu) * is;
            *h = xh;
            *o = g * xh + b;
        }
    }
    (xhat, out)
}

impl<T: Element> Tape<T> {
    /// 3x3 convolution, stride 1, one pixel of zero padding on each side.
    pub fn conv2d_same(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (b, h, w, cin) = nhwc("conv2d_same", self.value(input).shape())?;
        let kshape = self.value(kernel).shape().to_vec();
        let [kh, kw, kin, cout] = kshape[..] else {
            return Err(Error::shape("conv2d_same", format!("kernel must be 3x3xCinxCout, got {kshape:?}")));
        };
        if kh != 3 || kw != 3 {
            return Err(Error::shape("conv2d_same", format!("kernel extent must be 3x3, got {kh}x{kw}")));
        }
        if kin != cin {
            return Err(Error::shape(
                "conv2d_same",
                format!("input has {cin} channels but kernel expects {kin}"),
            ));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::shape(
                "conv2d_same",
                format!("bias shape {:?} does not match {cout} output channels", self.value(bias).shape()),
            ));
        }
        let m = b * h * w;
        let kk = 9 * cin;
        let mut cols = vec![T::zero(); m * kk];
        im2col(self.value(input).data(), b, h, w, cin, &mut cols);

        let mut out = Vec::with_capacity(m * cout);
        let bias_data = self.value(bias).data();
        for _ in 0..m {
            out.extend_from_slice(bias_data);
        }
        T::gemm(m, kk, cout, T::one(), &cols, false, self.value(kernel).data(), false, T::one(), &mut out);

        let requires_grad = self.any_requires_grad(&[input, kernel, bias]);
        let cols = if self.requires_grad(kernel) { cols } else { Vec::new() };
        let value = Tensor::new([b, h, w, cout], out)?;
        self.push("conv2d_same", value, Op::Conv2d { input, kernel, bias, cols }, requires_grad)
    }

    /// 2x2 max pooling at stride 2. Odd trailing rows/columns are dropped.
    pub fn maxpool_2x2(&mut self, input: Var) -> Result<Var> {
        let (b, h, w, c) = nhwc("maxpool_2x2", self.value(input).shape())?;
        if h < 2 || w < 2 {
            return Err(Error::shape("maxpool_2x2", format!("spatial extent {h}x{w} is below 2x2")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * oh * ow * c);
        let mut argmax = Vec::with_capacity(b * oh * ow * c);
        for n in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best_idx = ((n * h + 2 * oy) * w + 2 * ox) * c + ch;
                        let mut best = x[best_idx];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = ((n * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let requires_grad = self.requires_grad(input);
        let value = Tensor::new([b, oh, ow, c], out)?;
        self.push("maxpool_2x2", value, Op::MaxPool { input, argmax }, requires_grad)
    }

    /// Batch normalization with statistics over batch and spatial axes.
    pub fn batchnorm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let shape = self.value(input).shape().to_vec();
        let c = *shape.last().ok_or_else(|| Error::shape("batchnorm_train", "empty shape"))?;
        let x = self.value(input).data();
        let m = x.len() / c.max(1);
        if m < 2 {
            return Err(Error::DegenerateBatch {
                op: "batchnorm_train",
                msg: format!("{m} element(s) per channel, need at least 2"),
            });
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(
                    "batchnorm_train",
                    format!("{name} shape {:?} does not match {c} channels", self.value(v).shape()),
                ));
            }
        }
        let eps = T::from_f64_lossy(eps);
        let mf = T::from_usize(m).unwrap();
        let mut mean = vec![T::zero(); c];
        for row in x.chunks_exact(c) {
            for (acc, &v) in mean.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
        mean.iter_mut().for_each(|v| *v = *v / mf);
        let mut var = vec![T::zero(); c];
        for row in x.chunks_exact(c) {
            for ((acc, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - mu;
                *acc = *acc + d * d;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / mf);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let (xhat, out) =
            normalize(x, &mean, &inv_std, self.value(gamma).data(), self.value(beta).data());
        let requires_grad = self.any_requires_grad(&[input, gamma, beta]);
        let value = Tensor::new(shape, out)?;
        let var_out = self.push(
            "batchnorm_train",
            value,
            Op::BatchNorm { input, gamma, beta, xhat, inv_std },
            requires_grad,
        )?;
        Ok((var_out, BatchStats { mean, var }))
    }

    /// Normalizes with externally supplied statistics (running averages).
    /// Gradients flow to the input, gamma and beta; the statistics are
    /// treated as constants.
    pub fn batchnorm_frozen(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &BatchStats<T>,
        eps: f64,
    ) -> Result<Var> {
        let c = stats.mean.len();
        let shape = self.value(input).shape().to_vec();
        if shape.last() != Some(&c) || stats.var.len() != c {
            return Err(Error::shape("batchnorm_frozen", "statistics do not match channel count"));
        }
        let inv_std: Vec<T> =
            stats.var.iter().map(|&v| T::one() / (v + T::from_f64_lossy(eps)).sqrt()).collect();
        let (xhat, out) = normalize(
            self.value(input).data(),
            &stats.mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let requires_grad = self.any_requires_grad(&[input, gamma, beta]);
        let value = Tensor::new(shape, out)?;
        self.push(
            "batchnorm_frozen",
            value,
            Op::BatchNormFrozen { input, gamma, beta, xhat, inv_std },
            requires_grad,
        )
    }
}

pub(crate) fn conv2d_backward<T: Element>(
    tape: &Tape<T>,
    node: &Node<T>,
    input: Var,
    kernel: Var,
    bias: Var,
    cols: &[T],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (b, h, w, cin) = nhwc("conv2d_same", tape.value(input).shape()).expect("checked forward");
    let cout = *node.value.shape().last().unwrap();
    let m = b * h * w;
    let kk = 9 * cin;
    sink.add(bias, |db| {
        for row in g.chunks_exact(cout) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d = *d + v;
            }
        }
    });
    sink.add(kernel, |dk| {
        T::gemm(kk, m, cout, T::one(), cols, true, g, false, T::one(), dk);
    });
    if sink.wants(input) {
        let mut dcols = vec![T::zero(); m * kk];
        T::gemm(m, cout, kk, T::one(), g, false, tape.value(kernel).data(), true, T::zero(), &mut dcols);
        sink.add(input, |dx| col2im_add(&dcols, b, h, w, cin, dx));
    }
}

pub(crate) fn maxpool_backward<T: Element>(
    input: Var,
    argmax: &[usize],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    sink.add(input, |dx| {
        for (&idx, &gv) in argmax.iter().zip(g) {
            dx[idx] = dx[idx] + gv;
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<T: Element>(
    tape: &Tape<T>,
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let c = inv_std.len();
    let m = g.len() / c;
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for (grow, xrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            sum_g[ch] = sum_g[ch] + grow[ch];
            sum_gx[ch] = sum_gx[ch] + grow[ch] * xrow[ch];
        }
    }
    sink.add(beta, |db| super::tape::add_into(db, &sum_g));
    sink.add(gamma, |dg| super::tape::add_into(dg, &sum_gx));
    if sink.wants(input) {
        let gm = tape.value(gamma).data();
        let mf = T::from_usize(m).unwrap();
        let coef: Vec<T> = (0..c).map(|ch| gm[ch] * inv_std[ch] / mf).collect();
        sink.add(input, |dx| {
            for ((drow, grow), xrow) in
                dx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xhat.chunks_exact(c))
            {
                for ch in 0..c {
                    let v = mf * grow[ch] - sum_g[ch] - xrow[ch] * sum_gx[ch];
                    drow[ch] = drow[ch] + coef[ch] * v;
                }
            }
        });
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_frozen_backward<T: Element>(
    tape: &Tape<T>,
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let c = inv_std.len();
    sink.add(beta, |db| {
        for row in g.chunks_exact(c) {
            super::tape::add_into(db, row);
        }
    });
    sink.add(gamma, |dg| {
        for (grow, xrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
            for ch in 0..c {
                dg[ch] = dg[ch] + grow[ch] * xrow[ch];
            }
        }
    });
    let gm = tape.value(gamma).data();
    sink.add(input, |dx| {
        for (drow, grow) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
            for ch in 0..c {
                drow[ch] = drow[ch] + grow[ch] * gm[ch] * inv_std[ch];
            }
        }
    });
}
