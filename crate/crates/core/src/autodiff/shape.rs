use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::tape::{GradSink, Node, Op, Tape, Var};

fn matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(op, format!("expected a 2-d tensor, got {shape:?}"))),
    }
}

impl<T: Element> Tape<T> {
    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(input);
        if shape.iter().product::<usize>() != x.len() {
            return Err(Error::shape("reshape", format!("cannot view {:?} as {shape:?}", x.shape())));
        }
        let value = Tensor::new(shape.to_vec(), x.data().to_vec())?;
        let rg = self.requires_grad(input);
        self.push("reshape", value, Op::Reshape { input }, rg)
    }

    /// Columns `start..start + len` of a 2-d tensor. `len` may be zero.
    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = matrix("slice_cols", self.value(input).shape())?;
        if start + len > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} out of range for width {cols}", start + len),
            ));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
        }
        let value = if len == 0 {
            Tensor::new([rows, 0], out)?
        } else {
            Tensor::new([rows, len], out)?
        };
        let rg = self.requires_grad(input);
        self.push("slice_cols", value, Op::SliceCols { input, start }, rg)
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let n = x.shape()[0];
        let width = x.len() / n.max(1);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index(format!("row {bad} out of range for {n} rows")));
        }
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&x.data()[r * width..(r + 1) * width]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::new(shape, out)?;
        let rg = self.requires_grad(input);
        self.push("gather_rows", value, Op::GatherRows { input, rows: rows.to_vec() }, rg)
    }

    /// Repeats the single column of an `R x 1` tensor `width` times.
    pub fn broadcast_cols(&mut self, input: Var, width: usize) -> Result<Var> {
        let (rows, cols) = matrix("broadcast_cols", self.value(input).shape())?;
        if cols != 1 {
            return Err(Error::shape("broadcast_cols", format!("expected one column, got {cols}")));
        }
        let x = self.value(input).data();
        let out = x.iter().flat_map(|&v| std::iter::repeat_n(v, width)).collect();
        let value = Tensor::new([rows, width], out)?;
        let rg = self.requires_grad(input);
        self.push("broadcast_cols", value, Op::BroadcastCols { input }, rg)
    }
}

pub(crate) fn slice_cols_backward<T: Element>(
    tape: &Tape<T>,
    node: &Node<T>,
    input: Var,
    start: usize,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let cols = tape.value(input).shape()[1];
    let len = node.value.shape()[1];
    if len == 0 {
        return;
    }
    sink.add(input, |dx| {
        for (r, grow) in g.chunks_exact(len).enumerate() {
            let dst = &mut dx[r * cols + start..r * cols + start + len];
            super::tape::add_into(dst, grow);
        }
    });
}

pub(crate) fn gather_rows_backward<T: Element>(
    tape: &Tape<T>,
    input: Var,
    rows: &[usize],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let x = tape.value(input);
    let width = x.len() / x.shape()[0].max(1);
    if width == 0 {
        return;
    }
    sink.add(input, |dx| {
        for (&r, grow) in rows.iter().zip(g.chunks_exact(width)) {
            super::tape::add_into(&mut dx[r * width..(r + 1) * width], grow);
        }
    });
}

pub(crate) fn broadcast_cols_backward<T: Element>(
    node: &Node<T>,
    input: Var,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let width = node.value.shape()[1];
    sink.add(input, |dx| {
        for (d, grow) in dx.iter_mut().zip(g.chunks_exact(width)) {
            *d = *d + grow.iter().copied().sum();
        }
    });
}
