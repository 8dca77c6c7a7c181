use super::tensor::{matmul, matmul_nt, matmul_tn};
use super::{Param, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleSlot { x: Var, w: Var, slot: usize },
    Concat(Vec<Var>),
    WeightedAverage { items: Vec<Var>, w: Var },
    Square(Var),
    MulConst { x: Var, c: Vec<T> },
    Scale(Var, T),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in execution order, so the node list
/// is already topologically sorted and `backward` is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
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

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records the current value of `p` as a differentiable leaf. After
    /// `backward`, feed `grad(var)` to [`Param::accumulate`].
    pub fn param(&mut self, p: &Param<T>) -> Var {
        self.leaf(p.value.clone())
    }

    /// Records `p` as a constant; used when a network's output is needed but
    /// its parameters are held fixed.
    pub fn frozen(&mut self, p: &Param<T>) -> Var {
        self.constant(p.value.clone())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// `activation(x * w + b)` for `x[B x d_in]`, `w[d_in x d_out]`, `b[d_out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var, activation: Activation) -> Result<Var> {
        let lin = self.linear(x, w, b)?;
        Ok(match activation {
            Activation::Relu => self.relu(lin),
            Activation::Tanh => self.tanh(lin),
            Activation::Identity => lin,
        })
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.shape().len() != 2 {
            return Err(Error::Shape(format!("weights must be 2-D, got {:?}", wv.shape())));
        }
        let (d_in, d_out) = (wv.shape()[0], wv.shape()[1]);
        if xv.cols() != d_in || bv.len() != d_out {
            return Err(Error::Shape(format!(
                "dense: input {:?}, weights {:?}, bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let batch = xv.rows();
        let mut out = matmul(xv.data(), wv.data(), batch, d_in, d_out);
        for row in out.chunks_mut(d_out) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let value = Tensor::from_vec(vec![batch, d_out], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    fn same_shape(&self, x: Var, y: Var, what: &str) -> Result<()> {
        let (a, b) = (self.value(x), self.value(y));
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, x: Var, y: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (a, b) = (self.value(x), self.value(y));
        let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(a.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        self.same_shape(x, y, "add")?;
        let value = self.zip_with(x, y, |a, b| a + b);
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(value, Op::Add(x, y), rg))
    }

    pub fn sub(&mut self, x: Var, y: Var) -> Result<Var> {
        self.same_shape(x, y, "sub")?;
        let value = self.zip_with(x, y, |a, b| a - b);
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(value, Op::Sub(x, y), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        self.same_shape(x, y, "elementwise product")?;
        let value = self.zip_with(x, y, |a, b| a * b);
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(value, Op::Mul(x, y), rg))
    }

    /// `w[slot] * x` where `w` is a weight vector.
    pub fn scale_slot(&mut self, x: Var, w: Var, slot: usize) -> Result<Var> {
        let wv = self.value(w);
        if slot >= wv.len() {
            return Err(Error::Shape(format!("slot {slot} outside weights of length {}", wv.len())));
        }
        let c = wv.data()[slot];
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::ScaleSlot { x, w, slot }, rg))
    }

    /// Concatenation along the trailing axis. All parts must share the
    /// leading (batch) dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat of zero parts"))?;
        let rows = self.value(*first).rows();
        let all_vectors = parts.iter().all(|p| self.value(*p).shape().len() == 1);
        let mut width = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(Error::Shape(format!(
                    "concat: batch {} vs {rows}",
                    v.rows()
                )));
            }
            width += v.cols();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let shape = if all_vectors {
            vec![width]
        } else {
            vec![rows, width]
        };
        let value = Tensor::from_vec(shape, data)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// `(1/n) * sum_a w[a] * items[a]`.
    pub fn weighted_average(&mut self, items: &[Var], w: Var) -> Result<Var> {
        let n = items.len();
        if n == 0 {
            return Err(Error::Empty("weighted average over zero items"));
        }
        let wv = self.value(w).data().to_vec();
        if wv.len() != n {
            return Err(Error::Shape(format!(
                "weighted average: {n} items, {} weights",
                wv.len()
            )));
        }
        let shape = self.value(items[0]).shape().to_vec();
        let inv_n = T::one() / T::of(n as f64);
        let mut acc = Tensor::zeros(&shape);
        for (a, item) in items.iter().enumerate() {
            let iv = self.value(*item);
            if iv.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "weighted average: {:?} vs {shape:?}",
                    iv.shape()
                )));
            }
            let c = wv[a] * inv_n;
            for (o, &v) in acc.data_mut().iter_mut().zip(iv.data()) {
                *o += c * v;
            }
        }
        let rg = self.rg(w) || items.iter().any(|i| self.rg(*i));
        Ok(self.push(
            acc,
            Op::WeightedAverage {
                items: items.to_vec(),
                w,
            },
            rg,
        ))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(value, Op::Square(x), rg)
    }

    /// Element-wise product with constant coefficients.
    pub fn mul_const(&mut self, x: Var, c: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != c.len() {
            return Err(Error::Shape(format!(
                "mul_const: {} values, {} coefficients",
                xv.len(),
                c.len()
            )));
        }
        let data = xv.data().iter().zip(&c).map(|(&a, &b)| a * b).collect();
        let value = Tensor::from_vec(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MulConst { x, c }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Mean of all entries, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::Empty("mean of an empty tensor"));
        }
        let value = Tensor::scalar(xv.sum() / T::of(xv.len() as f64));
        let rg = self.rg(x);
        Ok(self.push(value, Op::Mean(x), rg))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of earlier sweeps are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "loss must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (d_in, d_out) = (wv.shape()[0], wv.shape()[1]);
                let batch = xv.rows();
                if self.rg(*x) {
                    let dx = matmul_nt(g.data(), wv.data(), batch, d_in, d_out);
                    send(*x, Tensor::from_vec(xv.shape().to_vec(), dx).expect("shape"));
                }
                if self.rg(*w) {
                    let dw = matmul_tn(xv.data(), g.data(), batch, d_in, d_out);
                    send(*w, Tensor::from_vec(wv.shape().to_vec(), dw).expect("shape"));
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); d_out];
                    for row in g.data().chunks(d_out) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    send(*b, Tensor::from_vec(shape, db).expect("shape"));
                }
            }
            Op::Relu(x) => {
                let out = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &o)| if o > T::zero() { gv } else { T::zero() })
                    .collect();
                send(*x, Tensor::from_vec(g.shape().to_vec(), data).expect("shape"));
            }
            Op::Tanh(x) => {
                let out = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &o)| gv * (T::one() - o * o))
                    .collect();
                send(*x, Tensor::from_vec(g.shape().to_vec(), data).expect("shape"));
            }
            Op::Add(x, y) => {
                send(*x, g.clone());
                send(*y, g.clone());
            }
            Op::Sub(x, y) => {
                send(*x, g.clone());
                send(*y, g.map(|v| -v));
            }
            Op::Mul(x, y) => {
                let (xv, yv) = (self.value(*x), self.value(*y));
                if self.rg(*x) {
                    let d = g.data().iter().zip(yv.data()).map(|(&a, &b)| a * b).collect();
                    send(*x, Tensor::from_vec(g.shape().to_vec(), d).expect("shape"));
                }
                if self.rg(*y) {
                    let d = g.data().iter().zip(xv.data()).map(|(&a, &b)| a * b).collect();
                    send(*y, Tensor::from_vec(g.shape().to_vec(), d).expect("shape"));
                }
            }
            Op::ScaleSlot { x, w, slot } => {
                let wv = self.value(*w);
                let c = wv.data()[*slot];
                if self.rg(*x) {
                    send(*x, g.map(|v| v * c));
                }
                if self.rg(*w) {
                    let dot: T = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&a, &b)| a * b)
                        .sum();
                    let mut dw = Tensor::zeros(wv.shape());
                    dw.data_mut()[*slot] = dot;
                    send(*w, dw);
                }
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let width = g.cols();
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let pc = pv.cols();
                    if self.rg(*p) {
                        let mut data = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            data.extend_from_slice(
                                &g.data()[r * width + offset..r * width + offset + pc],
                            );
                        }
                        send(*p, Tensor::from_vec(pv.shape().to_vec(), data).expect("shape"));
                    }
                    offset += pc;
                }
            }
            Op::WeightedAverage { items, w } => {
                let wv = self.value(*w);
                let inv_n = T::one() / T::of(items.len() as f64);
                let mut dw = Tensor::zeros(wv.shape());
                for (a, item) in items.iter().enumerate() {
                    let iv = self.value(*item);
                    if self.rg(*item) {
                        let c = wv.data()[a] * inv_n;
                        send(*item, g.map(|v| v * c));
                    }
                    dw.data_mut()[a] = g
                        .data()
                        .iter()
                        .zip(iv.data())
                        .map(|(&p, &q)| p * q)
                        .sum::<T>()
                        * inv_n;
                }
                if self.rg(*w) {
                    send(*w, dw);
                }
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                let two = T::of(2.0);
                let d = g.data().iter().zip(xv.data()).map(|(&a, &b)| two * a * b).collect();
                send(*x, Tensor::from_vec(g.shape().to_vec(), d).expect("shape"));
            }
            Op::MulConst { x, c } => {
                let d = g.data().iter().zip(c).map(|(&a, &b)| a * b).collect();
                send(*x, Tensor::from_vec(g.shape().to_vec(), d).expect("shape"));
            }
            Op::Scale(x, c) => {
                let c = *c;
                send(*x, g.map(|v| v * c));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let share = g.data()[0] / T::of(xv.len() as f64);
                send(*x, Tensor::filled(xv.shape(), share));
            }
        }
    }
}
