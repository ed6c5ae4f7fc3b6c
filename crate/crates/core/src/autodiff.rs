//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! A [`Graph`] owns every value produced during a forward pass. Nodes are
//! appended in evaluation order, so the node list is already topologically
//! sorted and [`Graph::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    AddScalars {
        inputs: Vec<Var>,
    },
    /// `factor * sum((input - target)^2)` against a constant target.
    SquaredError {
        input: Var,
        target: Tensor<T>,
        factor: T,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded forward computation plus, after [`Graph::backward`], the gradients.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Graph<T> {
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::invalid(format!("variable {} is not part of this graph", v.0)));
        }
        Ok(())
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        for v in [input, weight, bias] {
            self.check(v)?;
        }
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let geom = kernels::conv2d_geom(x, w, b, stride, pad)?;
        let out = kernels::conv2d_forward(x, w, b, &geom);
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn conv2d_transpose(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        for v in [input, weight, bias] {
            self.check(v)?;
        }
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let geom = kernels::conv_transpose_geom(x, w, b, stride, pad)?;
        let out = kernels::conv_transpose_forward(x, w, b, &geom);
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        self.check(input)?;
        let (out, argmax) = kernels::maxpool_forward(self.value(input), k, stride)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        // NaN passes through so a poisoned input is not silently zeroed.
        let out = self.value(input).map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() });
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::Relu { input }, rg))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat_forward(&values)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        self.check(input)?;
        let out = kernels::upsample_forward(self.value(input), factor)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::Upsample { input, factor }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: operand shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        self.check(input)?;
        let out = self.value(input).map(|v| v * factor);
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::Scale { input, factor }, rg))
    }

    /// Sum of all elements as a scalar node.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::Sum { input }, rg))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).numel();
        let s = self.sum(input)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Sum of scalar nodes, accumulated in the given order.
    pub fn add_scalars(&mut self, inputs: &[Var]) -> Result<Var> {
        let mut total = T::zero();
        for &v in inputs {
            self.check(v)?;
            total += self.value(v).item()?;
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::scalar(total),
            Op::AddScalars {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// `factor * sum((input - target)^2)` as a scalar node.
    pub fn squared_error(&mut self, input: Var, target: &Tensor<T>, factor: T) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        if x.shape() != target.shape() {
            return Err(Error::shape(format!(
                "squared_error: prediction {:?} vs target {:?}",
                x.shape(),
                target.shape()
            )));
        }
        let s: T = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &g)| (p - g) * (p - g))
            .sum();
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            Tensor::scalar(s * factor),
            Op::SquaredError {
                input,
                target: target.clone(),
                factor,
            },
            rg,
        ))
    }

    /// Populates gradients of the scalar `loss` for every node that requires one.
    ///
    /// Earlier gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need_x = self.nodes[input.0].requires_grad;
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(*input), self.value(*weight), g, geom, need_x);
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *weight, dw);
                self.accumulate(grads, *bias, db);
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need_x = self.nodes[input.0].requires_grad;
                let (dx, dw, db) = kernels::conv_transpose_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    geom,
                    need_x,
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *weight, dw);
                self.accumulate(grads, *bias, db);
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = Tensor::zeros(self.value(*input).shape());
                let d = dx.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Relu { input } => {
                let x = self.value(*input);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *input, Tensor::from_vec(x.shape(), data).expect("shape"));
            }
            Op::Concat { inputs } => {
                let mut start = 0;
                for v in inputs {
                    let c = self.value(*v).shape()[1];
                    let part = g.slice_channels(start, c).expect("concat grad slice");
                    start += c;
                    self.accumulate(grads, *v, part);
                }
            }
            Op::Upsample { input, factor } => {
                self.accumulate(grads, *input, kernels::upsample_backward(g, *factor));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = ta.data().iter().zip(tb.data()).zip(g.data()).map(|((_, &y), &gv)| y * gv);
                let da = Tensor::from_vec(ta.shape(), da.collect()).expect("shape");
                let db = ta.data().iter().zip(g.data()).map(|(&x, &gv)| x * gv);
                let db = Tensor::from_vec(tb.shape(), db.collect()).expect("shape");
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale { input, factor } => {
                let f = *factor;
                self.accumulate(grads, *input, g.map(|v| v * f));
            }
            Op::Sum { input } => {
                let gv = g.data()[0];
                self.accumulate(grads, *input, Tensor::full(self.value(*input).shape(), gv));
            }
            Op::AddScalars { inputs } => {
                for v in inputs {
                    self.accumulate(grads, *v, g.clone());
                }
            }
            Op::SquaredError {
                input,
                target,
                factor,
            } => {
                let x = self.value(*input);
                let k = T::lit(2.0) * *factor * g.data()[0];
                let data = x
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| k * (p - t))
                    .collect();
                self.accumulate(grads, *input, Tensor::from_vec(x.shape(), data).expect("shape"));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let data: Vec<f64> = (0..25).map(|v| (v as f64).sin()).collect();
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 5, 5], &data));
        let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv2d_shape_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[1, 2, 3, 3]));
        let w = g.constant(Tensor::ones(&[1, 3, 2, 2]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(g.conv2d(x, w, b, 1, 0), Err(Error::Shape(_))));
        let w = g.constant(Tensor::ones(&[1, 2, 5, 5]));
        assert!(g.conv2d(x, w, b, 1, 0).is_err());
        let w = g.constant(Tensor::ones(&[1, 2, 2, 2]));
        assert!(g.conv2d(x, w, b, 0, 0).is_err());
    }

    #[test]
    fn conv_transpose_ones_stride2() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let w = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d_transpose(x, w, b, 2, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 4, 4]);
        assert!(g.value(y).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv_transpose_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 1, 1], &[3.25]));
        let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d_transpose(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[3.25]);
    }

    #[test]
    fn conv_then_transpose_restores_extent() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 8, 8]));
        let w = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let b = g.constant(Tensor::zeros(&[1]));
        let down = g.conv2d(x, w, b, 2, 0).unwrap();
        assert_eq!(g.value(down).shape(), &[1, 1, 4, 4]);
        let up = g.conv2d_transpose(down, w, b, 2, 0).unwrap();
        assert_eq!(g.value(up).shape(), &[1, 1, 8, 8]);
    }

    #[test]
    fn maxpool_basic_and_errors() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        assert!(g.maxpool2d(x, 3, 1).is_err());
    }

    #[test]
    fn maxpool_constant_ties_to_first_index() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[1, 1, 4, 4], 2.0));
        let y = g.maxpool2d(x, 2, 2).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(x).unwrap().data();
        let expect = [
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(grad, &expect);
    }

    #[test]
    fn relu_values_and_gate() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[1], &[-0.5]));
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn concat_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let b = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 2, 2, 2]);
        let single = g.concat_channels(&[a]).unwrap();
        assert_eq!(g.value(single), g.value(a));
        let odd = g.constant(Tensor::ones(&[1, 1, 3, 2]));
        assert!(g.concat_channels(&[a, odd]).is_err());
    }

    #[test]
    fn upsample_values_and_grad() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.upsample_nearest(x, 2).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 4.0));
        let same = g.upsample_nearest(x, 1).unwrap();
        assert_eq!(g.value(same), g.value(x));
        assert!(g.upsample_nearest(x, 0).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[2, 3, 4], 0.7));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mean_squared_difference_gradient() {
        let xs = [0.5, -1.0, 2.0, 3.5];
        let ys = [1.0, 1.0, -1.0, 0.0];
        let mut g = Graph::new();
        let x = g.param(t(&[4], &xs));
        let y = g.constant(t(&[4], &ys));
        let d = g.sub(x, y).unwrap();
        let sq = g.mul(d, d).unwrap();
        let m = g.mean(sq).unwrap();
        g.backward(m).unwrap();
        let grad = g.grad(x).unwrap().data();
        for i in 0..4 {
            assert!((grad[i] - 2.0 * (xs[i] - ys[i]) / 4.0).abs() < 1e-15);
        }
        assert!(g.grad(y).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }
}
