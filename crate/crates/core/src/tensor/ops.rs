//! Elementwise, reduction and reshaping operations on the tape.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Neg,
    Exp,
    Log,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

impl UnaryOp {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Square => x * x,
        }
    }

    /// d out / d x, given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Neg => -1.0,
            UnaryOp::Exp => y,
            UnaryOp::Log => 1.0 / x,
            UnaryOp::Square => 2.0 * x,
        }
    }
}

/// For every input element, the flat index of the output element it reduces
/// into, plus the output shape (reduced axes removed).
fn reduction_map(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut reduced = vec![false; rank];
    for &a in axes {
        if a >= rank || reduced[a] {
            return Err(Error::InvalidAxes {
                axes: axes.to_vec(),
                rank,
            });
        }
        reduced[a] = true;
    }
    let out_shape: Vec<usize> = (0..rank).filter(|&i| !reduced[i]).map(|i| shape[i]).collect();
    let out_strides = super::strides_of(&out_shape);
    // Stride in the output for each input axis (0 if reduced).
    let mut axis_stride = vec![0usize; rank];
    let mut k = 0;
    for i in 0..rank {
        if !reduced[i] {
            axis_stride[i] = out_strides[k];
            k += 1;
        }
    }
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut out = 0usize;
    for _ in 0..n {
        map.push(out);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            out += axis_stride[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            out -= axis_stride[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    Ok((map, out_shape))
}

impl Tape {
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "elementwise",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div => x / y,
            })
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(
            "elementwise",
            value,
            &[a, b],
            Box::new(move |g, inputs, _out, needs| {
                let (x, y) = (inputs[0], inputs[1]);
                let grad_for = |which: usize| -> Option<Tensor> {
                    if !needs[which] {
                        return None;
                    }
                    let d = g
                        .data()
                        .iter()
                        .zip(x.data().iter().zip(y.data()))
                        .map(|(&g, (&x, &y))| match (op, which) {
                            (BinaryOp::Add, _) => g,
                            (BinaryOp::Sub, 0) => g,
                            (BinaryOp::Sub, _) => -g,
                            (BinaryOp::Mul, 0) => g * y,
                            (BinaryOp::Mul, _) => g * x,
                            (BinaryOp::Div, 0) => g / y,
                            (BinaryOp::Div, _) => -g * x / (y * y),
                        })
                        .collect();
                    Some(Tensor::from_parts(g.shape().to_vec(), d))
                };
                vec![grad_for(0), grad_for(1)]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| op.apply(x));
        self.push(
            "elementwise",
            value,
            &[a],
            Box::new(move |g, inputs, out, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(inputs[0].data().iter().zip(out.data()))
                    .map(|(&g, (&x, &y))| g * op.derivative(x, y))
                    .collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.push(
            "scale",
            value,
            &[a],
            Box::new(move |g, _, _, _| vec![Some(g.map(|v| v * factor))]),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(a).to_vec();
        let value = self.value(a).reshape(shape)?;
        self.push(
            "reshape",
            value,
            &[a],
            Box::new(move |g, _, _, _| vec![Some(Tensor::from_parts(from.clone(), g.data().to_vec()))]),
        )
    }

    /// Reduces `a` over `axes` (removed from the output shape). `Max`
    /// routes its gradient to the first maximal element of each group.
    pub fn reduce(&mut self, op: ReduceOp, a: Var, axes: &[usize]) -> Result<Var> {
        let input = self.value(a);
        if input.numel() == 0 || axes.iter().any(|&ax| input.shape().get(ax) == Some(&0)) {
            return Err(Error::EmptyReduction { op: "reduce" });
        }
        let (map, out_shape) = reduction_map(input.shape(), axes)?;
        let out_len: usize = out_shape.iter().product();
        let count = input.numel() / out_len;
        let in_shape = input.shape().to_vec();
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                let mut acc = vec![0.0; out_len];
                for (&o, &v) in map.iter().zip(input.data()) {
                    acc[o] += v;
                }
                let factor = if op == ReduceOp::Mean { 1.0 / count as f64 } else { 1.0 };
                if op == ReduceOp::Mean {
                    acc.iter_mut().for_each(|v| *v *= factor);
                }
                let value = Tensor::from_parts(out_shape, acc);
                self.push(
                    "reduce",
                    value,
                    &[a],
                    Box::new(move |g, _, _, _| {
                        let d = map.iter().map(|&o| g.data()[o] * factor).collect();
                        vec![Some(Tensor::from_parts(in_shape.clone(), d))]
                    }),
                )
            }
            ReduceOp::Max => {
                let mut best = vec![f64::NEG_INFINITY; out_len];
                let mut arg = vec![usize::MAX; out_len];
                for (i, (&o, &v)) in map.iter().zip(input.data()).enumerate() {
                    if arg[o] == usize::MAX || v > best[o] {
                        best[o] = v;
                        arg[o] = i;
                    }
                }
                let value = Tensor::from_parts(out_shape, best);
                let n = input.numel();
                self.push(
                    "reduce",
                    value,
                    &[a],
                    Box::new(move |g, _, _, _| {
                        let mut d = vec![0.0; n];
                        for (o, &i) in arg.iter().enumerate() {
                            d[i] += g.data()[o];
                        }
                        vec![Some(Tensor::from_parts(in_shape.clone(), d))]
                    }),
                )
            }
        }
    }

    /// Sum over every axis, yielding a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(ReduceOp::Sum, a, &axes)
    }

    /// Mean softmax cross-entropy of `logits` (batch, classes) against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let [batch, classes] = z.shape() else {
            return Err(Error::shape(
                "cross_entropy",
                format!("expected (batch, classes), got {:?}", z.shape()),
            ));
        };
        let (batch, classes) = (*batch, *classes);
        if labels.len() != batch {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for batch of {batch}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::shape(
                "cross_entropy",
                format!("label {bad} outside [0, {classes})"),
            ));
        }
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for b in 0..batch {
            let row = &z.data()[b * classes..(b + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + s.ln();
            loss += lse - row[labels[b]];
            for c in 0..classes {
                probs[b * classes + c] = (row[c] - lse).exp();
            }
        }
        let labels = labels.to_vec();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss / batch as f64),
            &[logits],
            Box::new(move |g, _, _, _| {
                let scale = g.item() / batch as f64;
                let mut d = probs.clone();
                for (b, &l) in labels.iter().enumerate() {
                    d[b * classes + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                vec![Some(Tensor::from_parts(vec![batch, classes], d))]
            }),
        )
    }
}
