use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::tape::{GradSink, Op, Tape, Var};

impl<T: Element> Tape<T> {
    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, n) = match *self.value(logits).shape() {
            [b, n] => (b, n),
            ref s => {
                return Err(Error::shape("softmax_cross_entropy", format!("expected B x N logits, got {s:?}")))
            }
        };
        if labels.len() != b {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for a batch of {b}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Index(format!("label {bad} out of range for {n} classes")));
        }
        let x = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * n);
        let mut total = T::zero();
        for (row, &label) in x.chunks_exact(n).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: T = exps.iter().copied().sum();
            total = total + z.ln() - (row[label] - max);
            probs.extend(exps.iter().map(|&e| e / z));
        }
        let loss = total / T::from_usize(b).unwrap();
        let rg = self.requires_grad(logits);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        )
    }
}

pub(crate) fn softmax_cross_entropy_backward<T: Element>(
    logits: Var,
    labels: &[usize],
    probs: &[T],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let b = labels.len();
    let n = probs.len() / b;
    let scale = g[0] / T::from_usize(b).unwrap();
    sink.add(logits, |dx| {
        for (i, &label) in labels.iter().enumerate() {
            for c in 0..n {
                let target = if c == label { T::one() } else { T::zero() };
                dx[i * n + c] = dx[i * n + c] + scale * (probs[i * n + c] - target);
            }
        }
    });
}
