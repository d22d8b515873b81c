//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs are earlier nodes, so the
//! node order is already a topological order and [`Tape::backward`] simply
//! walks it in reverse, visiting each node once.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MirrorPad { input: Var, pad_h: usize, pad_w: usize },
    Conv2d { input: Var, kernel: Var, bias: Var },
    AvgPool2 { input: Var },
    Relu { input: Var },
    Dense { input: Var, weights: Var, bias: Var },
    SubChannels { input: Var },
    Channel { input: Var, index: usize },
    Select { input: Var, index: usize },
    SumSquares { input: Var },
    WeightedSquaredDiff { input: Var, target: Vec<f32>, weight: Vec<f32> },
    Scale { input: Var, factor: f32 },
    Add { lhs: Var, rhs: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    /// Unrounded value of scalar reductions.
    exact: Option<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are collected for it iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Value of a scalar node; reductions keep their `f64` accumulator
    /// instead of the rounded `f32`.
    pub fn scalar(&self, var: Var) -> Result<f64> {
        let node = &self.nodes[var.0];
        match node.exact {
            Some(v) => Ok(v),
            None => Ok(node.value.item()? as f64),
        }
    }

    /// Gradient accumulated into a leaf by the last [`Tape::backward`].
    pub fn grad(&self, var: Var) -> Option<&[f32]> {
        self.nodes[var.0].value.grad()
    }

    /// Moves a value (and its gradient, if any) out of the tape.
    pub fn take(&mut self, var: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[var.0].value, Tensor::scalar(0.0))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            exact: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, value: f64, op: Op, needs_grad: bool) -> Var {
        let var = self.push(Tensor::scalar(value as f32), op, needs_grad);
        self.nodes[var.0].exact = Some(value);
        var
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn mirror_pad(&mut self, input: Var, pad_h: usize, pad_w: usize) -> Result<Var> {
        let out = ops::mirror_pad(self.value(input), pad_h, pad_w)?;
        let ng = self.needs(&[input]);
        Ok(self.push(out, Op::MirrorPad { input, pad_h, pad_w }, ng))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(kernel), self.value(bias))?;
        let ng = self.needs(&[input, kernel, bias]);
        Ok(self.push(out, Op::Conv2d { input, kernel, bias }, ng))
    }

    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let out = ops::avg_pool2(self.value(input))?;
        let ng = self.needs(&[input]);
        Ok(self.push(out, Op::AvgPool2 { input }, ng))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let ng = self.needs(&[input]);
        self.push(out, Op::Relu { input }, ng)
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let out = ops::dense(self.value(input), self.value(weights), self.value(bias))?;
        let ng = self.needs(&[input, weights, bias]);
        Ok(self.push(out, Op::Dense { input, weights, bias }, ng))
    }

    /// Subtracts a constant per-channel value from an `H x W x C` tensor.
    pub fn sub_channels(&mut self, input: Var, values: &[f32]) -> Result<Var> {
        let x = self.value(input);
        let (_, _, c) = x.dims3()?;
        if values.len() != c {
            return Err(Error::Shape(format!(
                "sub_channels: {} values for {c} channels",
                values.len()
            )));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v - values[i % c])
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.needs(&[input]);
        Ok(self.push(out, Op::SubChannels { input }, ng))
    }

    /// Extracts channel `index` of an `H x W x C` tensor as an `H x W` map.
    pub fn channel(&mut self, input: Var, index: usize) -> Result<Var> {
        let x = self.value(input);
        let (h, w, c) = x.dims3()?;
        if index >= c {
            return Err(Error::Index(format!(
                "feature map {index} out of range for {c} channels"
            )));
        }
        let data = x.data().iter().skip(index).step_by(c).copied().collect();
        let out = Tensor::new(vec![h, w], data)?;
        let ng = self.needs(&[input]);
        Ok(self.push(out, Op::Channel { input, index }, ng))
    }

    /// Selects one element (flat index) as a scalar.
    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let x = self.value(input);
        let v = *x.data().get(index).ok_or_else(|| {
            Error::Index(format!("element {index} out of range for {} elements", x.len()))
        })?;
        let ng = self.needs(&[input]);
        Ok(self.push(Tensor::scalar(v), Op::Select { input, index }, ng))
    }

    pub fn sum_squares(&mut self, input: Var) -> Var {
        let s: f64 = self
            .value(input)
            .data()
            .iter()
            .map(|&v| v as f64 * v as f64)
            .sum();
        let ng = self.needs(&[input]);
        self.push_scalar(s, Op::SumSquares { input }, ng)
    }

    /// `sum_k weight[k] * (input[k] - target[k])^2` with constant `target`
    /// and `weight`.
    pub fn weighted_squared_diff(
        &mut self,
        input: Var,
        target: Vec<f32>,
        weight: Vec<f32>,
    ) -> Result<Var> {
        let x = self.value(input);
        if target.len() != x.len() || weight.len() != x.len() {
            return Err(Error::Shape(format!(
                "weighted_squared_diff: input {}, target {}, weight {}",
                x.len(),
                target.len(),
                weight.len()
            )));
        }
        let s: f64 = x
            .data()
            .iter()
            .zip(&target)
            .zip(&weight)
            .map(|((&a, &t), &w)| {
                let d = a as f64 - t as f64;
                w as f64 * d * d
            })
            .sum();
        let ng = self.needs(&[input]);
        Ok(self.push_scalar(s, Op::WeightedSquaredDiff { input, target, weight }, ng))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let ng = self.needs(&[input]);
        if let Some(e) = self.nodes[input.0].exact {
            return self.push_scalar(e * factor as f64, Op::Scale { input, factor }, ng);
        }
        let out = self.value(input).map(|v| v * factor);
        self.push(out, Op::Scale { input, factor }, ng)
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let ng = self.needs(&[lhs, rhs]);
        if let (Some(x), Some(y)) = (self.nodes[lhs.0].exact, self.nodes[rhs.0].exact) {
            return Ok(self.push_scalar(x + y, Op::Add { lhs, rhs }, ng));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add { lhs, rhs }, ng))
    }

    /// Back-propagates from a scalar `root`, leaving `d root / d leaf` in
    /// every leaf that requires a gradient (zeros when the root does not
    /// depend on it). Previous gradients are overwritten.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract("backward: root is not on this tape".into()));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: root must be scalar, found shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MirrorPad { input, pad_h, pad_w } => {
                    let shape = self.nodes[input.0].value.shape();
                    let gi = ops::mirror_pad_backward(&g, shape, *pad_h, *pad_w);
                    accumulate(&mut grads, *input, gi);
                }
                Op::Conv2d { input, kernel, bias } => {
                    let want_kernel =
                        self.nodes[kernel.0].needs_grad || self.nodes[bias.0].needs_grad;
                    let cg = ops::conv2d_backward(
                        &g,
                        &self.nodes[input.0].value,
                        &self.nodes[kernel.0].value,
                        want_kernel,
                    );
                    if self.nodes[input.0].needs_grad {
                        accumulate(&mut grads, *input, cg.input);
                    }
                    if self.nodes[kernel.0].needs_grad {
                        accumulate(&mut grads, *kernel, cg.kernel);
                    }
                    if self.nodes[bias.0].needs_grad {
                        accumulate(&mut grads, *bias, cg.bias);
                    }
                }
                Op::AvgPool2 { input } => {
                    let shape = self.nodes[input.0].value.shape();
                    accumulate(&mut grads, *input, ops::avg_pool2_backward(&g, shape));
                }
                Op::Relu { input } => {
                    let gi = ops::relu_backward(&g, &self.nodes[input.0].value);
                    accumulate(&mut grads, *input, gi);
                }
                Op::Dense { input, weights, bias } => {
                    let dg = ops::dense_backward(
                        &g,
                        &self.nodes[input.0].value,
                        &self.nodes[weights.0].value,
                        self.nodes[weights.0].needs_grad,
                    );
                    if self.nodes[input.0].needs_grad {
                        accumulate(&mut grads, *input, dg.input);
                    }
                    if self.nodes[weights.0].needs_grad {
                        accumulate(&mut grads, *weights, dg.weights);
                    }
                    if self.nodes[bias.0].needs_grad {
                        accumulate(&mut grads, *bias, dg.bias);
                    }
                }
                Op::SubChannels { input } => {
                    accumulate(&mut grads, *input, g);
                }
                Op::Channel { input, index } => {
                    let c = self.nodes[input.0].value.shape()[2];
                    let mut gi = vec![0.0; self.nodes[input.0].value.len()];
                    for (p, &gv) in g.iter().enumerate() {
                        gi[p * c + index] = gv;
                    }
                    accumulate(&mut grads, *input, gi);
                }
                Op::Select { input, index } => {
                    let mut gi = vec![0.0; self.nodes[input.0].value.len()];
                    gi[*index] = g[0];
                    accumulate(&mut grads, *input, gi);
                }
                Op::SumSquares { input } => {
                    let gi = self.nodes[input.0]
                        .value
                        .data()
                        .iter()
                        .map(|&x| 2.0 * x * g[0])
                        .collect();
                    accumulate(&mut grads, *input, gi);
                }
                Op::WeightedSquaredDiff { input, target, weight } => {
                    let gi = self.nodes[input.0]
                        .value
                        .data()
                        .iter()
                        .zip(target)
                        .zip(weight)
                        .map(|((&x, &t), &w)| 2.0 * w * (x - t) * g[0])
                        .collect();
                    accumulate(&mut grads, *input, gi);
                }
                Op::Scale { input, factor } => {
                    let gi = g.iter().map(|&v| v * factor).collect();
                    accumulate(&mut grads, *input, gi);
                }
                Op::Add { lhs, rhs } => {
                    if self.nodes[lhs.0].needs_grad {
                        accumulate(&mut grads, *lhs, g.clone());
                    }
                    if self.nodes[rhs.0].needs_grad {
                        accumulate(&mut grads, *rhs, g);
                    }
                }
            }
        }

        for idx in 0..self.nodes.len() {
            let node = &mut self.nodes[idx];
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], var: Var, g: Vec<f32>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_differences, max_relative_error};
    use rand::{RngExt, SeedableRng};
    use rand_pcg::Pcg32;

    #[test]
    fn scalar_reductions_keep_f64_precision() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[3001], |i| 1.0 + (i % 7) as f32 * 1e-4));
        let exact: f64 = tape.value(x).data().iter().map(|&v| v as f64 * v as f64).sum();
        let s = tape.sum_squares(x);
        let half = tape.scale(s, 0.5);
        let both = tape.add(half, half).unwrap();
        assert_eq!(tape.scalar(s).unwrap(), exact);
        assert_eq!(tape.scalar(both).unwrap(), exact);
        assert_eq!(tape.value(both).item().unwrap(), exact as f32);
        let v = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(tape.scalar(v).is_err());
    }

    fn uniform(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Pcg32::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0f32..1.0))
    }

    fn symmetric(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Pcg32::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
    }

    /// Runs `f` on a fresh tape and returns `(loss, analytic grad)`.
    fn analytic(x: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Var) -> (f32, Vec<f32>) {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().with_requires_grad(true));
        let loss = f(&mut tape, xv);
        tape.backward(loss).unwrap();
        (
            tape.value(loss).item().unwrap(),
            tape.grad(xv).unwrap().to_vec(),
        )
    }

    fn check(x: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Var) -> f64 {
        let (_, grad) = analytic(x, f);
        let numeric = central_differences(x, 1e-3, |probe| {
            let mut tape = Tape::new();
            let xv = tape.constant(probe.clone());
            let loss = f(&mut tape, xv);
            tape.scalar(loss).unwrap()
        });
        max_relative_error(&grad, &numeric)
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let (loss, g) = analytic(&x, &|t, v| t.sum_squares(v));
        assert_eq!(loss, 5.0);
        assert_eq!(g, vec![2.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[3], 1.0).with_requires_grad(true));
        let c = tape.constant(Tensor::scalar(4.0));
        let loss = tape.scale(c, 2.0);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn reused_values_accumulate() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 3.0]).unwrap().with_requires_grad(true));
        let a = tape.sum_squares(x);
        let b = tape.sum_squares(x);
        let s = tape.add(a, b).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 12.0]);
    }

    #[test]
    fn relu_gradient_convention() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![3.0, -3.0, 0.0]).unwrap().with_requires_grad(true));
        let y = tape.relu(x);
        let w = tape.constant(Tensor::new(vec![3, 1], vec![1.0, 1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let s = tape.dense(y, w, b).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn mirror_pad_gradient() {
        let x = uniform(&[4, 5, 2], 11);
        let w = symmetric(&[8, 9, 2], 12).into_data();
        let err = check(&x, &|t, v| {
            let p = t.mirror_pad(v, 2, 2).unwrap();
            t.weighted_squared_diff(p, vec![0.2; 144], w.clone()).unwrap()
        });
        assert!(err <= 1e-3, "relative error {err}");
    }

    #[test]
    fn conv_gradient_wrt_input_kernel_and_bias() {
        let x = uniform(&[5, 5, 2], 21);
        let k = symmetric(&[3, 3, 2, 3], 22);
        let b = symmetric(&[3], 23);
        let err = check(&x, &|t, v| {
            let kv = t.constant(k.clone());
            let bv = t.constant(b.clone());
            let p = t.mirror_pad(v, 1, 1).unwrap();
            let y = t.conv2d(p, kv, bv).unwrap();
            t.sum_squares(y)
        });
        assert!(err <= 1e-3, "input relative error {err}");

        let err = check(&k, &|t, kv| {
            let xv = t.constant(x.clone());
            let bv = t.constant(b.clone());
            let p = t.mirror_pad(xv, 1, 1).unwrap();
            let y = t.conv2d(p, kv, bv).unwrap();
            t.sum_squares(y)
        });
        assert!(err <= 1e-3, "kernel relative error {err}");

        let err = check(&b, &|t, bv| {
            let xv = t.constant(x.clone());
            let kv = t.constant(k.clone());
            let p = t.mirror_pad(xv, 1, 1).unwrap();
            let y = t.conv2d(p, kv, bv).unwrap();
            t.sum_squares(y)
        });
        assert!(err <= 1e-3, "bias relative error {err}");
    }

    #[test]
    fn pool_channel_and_select_gradients() {
        let x = uniform(&[4, 6, 3], 31);
        let err = check(&x, &|t, v| {
            let p = t.avg_pool2(v).unwrap();
            let m = t.sub_channels(p, &[0.1, 0.2, 0.3]).unwrap();
            let c = t.channel(m, 1).unwrap();
            t.sum_squares(c)
        });
        assert!(err <= 1e-3, "relative error {err}");

        let err = check(&x, &|t, v| {
            let s = t.select(v, 7).unwrap();
            let q = t.sum_squares(s);
            t.scale(q, -3.0)
        });
        assert!(err <= 1e-3, "relative error {err}");
    }

    #[test]
    fn dense_gradient_wrt_input_and_weights() {
        let x = uniform(&[8], 41);
        let w = symmetric(&[8, 4], 42);
        let b = symmetric(&[4], 43);
        let err = check(&x, &|t, v| {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            let y = t.dense(v, wv, bv).unwrap();
            t.sum_squares(y)
        });
        assert!(err <= 1e-3, "input relative error {err}");
        let err = check(&w, &|t, wv| {
            let xv = t.constant(x.clone());
            let bv = t.constant(b.clone());
            let y = t.dense(xv, wv, bv).unwrap();
            t.sum_squares(y)
        });
        assert!(err <= 1e-3, "weight relative error {err}");
    }

    #[test]
    fn backward_is_linear_in_the_root() {
        let x = uniform(&[3, 3, 1], 51);
        let target = vec![0.5; 9];
        let f1 = |t: &mut Tape, v: Var| t.sum_squares(v);
        let f2 = |t: &mut Tape, v: Var| {
            t.weighted_squared_diff(v, target.clone(), vec![2.0; 9]).unwrap()
        };
        let (_, g1) = analytic(&x, &f1);
        let (_, g2) = analytic(&x, &f2);
        let (_, g12) = analytic(&x, &|t, v| {
            let a = f1(t, v);
            let b = f2(t, v);
            t.add(a, b).unwrap()
        });
        for i in 0..9 {
            assert!((g12[i] - (g1[i] + g2[i])).abs() < 1e-6);
        }
    }
}
