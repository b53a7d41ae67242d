use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// How a batch-norm node normalizes its input.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Batch statistics; the caller receives them to update running averages.
    Train,
    /// Stored running statistics.
    Eval {
        mean: &'a Tensor<T>,
        var: &'a Tensor<T>,
    },
}

/// Per-channel statistics of one training-mode batch-norm evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (biased when only one value per channel).
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    GlobalAvgPool {
        x: Var,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Bce {
        pred: Var,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of executed primitives.
///
/// Nodes are appended in execution order, which is a topological order of the
/// computation; [`Graph::backward`] walks them once in reverse. Gradients of
/// leaves accumulate across `backward` calls until [`Graph::zero_grad`].
pub struct Graph<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
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
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, present after a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if stride == 0 {
            return Err(Error::param("conv2d stride must be positive"));
        }
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin {
            return Err(Error::shape("conv2d", xs, ws));
        }
        if bs != [cout] {
            return Err(Error::shape("conv2d bias", ws, bs));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::shape("conv2d kernel", xs, ws));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (wd + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::new([n, cout, geom.ho, geom.wo], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::param(format!(
                "max_pool2x2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let (out, argmax) = kernels::max_pool2x2(self.value(x).data(), n * c, h, w);
        let value = Tensor::new([n, c, h / 2, w / 2], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let out = kernels::upsample2x(self.value(x).data(), n * c, h, w);
        let value = Tensor::new([n, c, 2 * h, 2 * w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Upsample { x }, rg))
    }

    /// Per-channel batch normalization of an `N×C` or `N×C×H×W` input.
    ///
    /// In training mode the batch statistics are returned so the caller can
    /// fold them into its running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        if eps <= 0.0 {
            return Err(Error::param("batch_norm eps must be positive"));
        }
        let (n, c, hw) = channel_layout(self.value(x).shape())?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).shape() != [c] {
                return Err(Error::Param(format!(
                    "batch_norm {name} has shape {:?}, expected [{c}]",
                    self.value(p).shape()
                )));
            }
        }
        let count = n * hw;
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let eps_t = T::from_f64_lossy(eps);
        let (mean, var_biased, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let inv_count = T::one() / T::from_usize(count).unwrap();
                for ch in 0..c {
                    let mut s = T::zero();
                    for i in 0..n {
                        let base = (i * c + ch) * hw;
                        s = s + xs[base..base + hw].iter().copied().sum::<T>();
                    }
                    let m = s * inv_count;
                    let mut ss = T::zero();
                    for i in 0..n {
                        let base = (i * c + ch) * hw;
                        for &v in &xs[base..base + hw] {
                            ss = ss + (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = ss * inv_count;
                }
                let unbiased = if count > 1 {
                    let f = T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap();
                    var.iter().map(|&v| v * f).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.shape() != [c] || var.shape() != [c] {
                    return Err(Error::param(format!(
                        "batch_norm running stats must have shape [{c}]"
                    )));
                }
                (mean.data().to_vec(), var.data().to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var_biased
            .iter()
            .map(|&v| T::one() / (v + eps_t).sqrt())
            .collect();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    let v = (xs[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = v;
                    out[j] = g[ch] * v + bt[ch];
                }
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let train = matches!(mode, BnMode::Train);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new([n, c, 1, 1], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool { x }, rg))
    }

    /// Affine map `x·wᵀ + b` for `x: N×Cin`, `w: Cout×Cin`, `b: Cout`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        let (n, cin, cout) = match (xs, ws) {
            ([n, cin], [cout, wcin]) if cin == wcin => (*n, *cin, *cout),
            _ => return Err(Error::shape("dense", xs, ws)),
        };
        if bs != [cout] {
            return Err(Error::shape("dense bias", ws, bs));
        }
        let bias = self.value(b).data();
        let mut out: Vec<T> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        T::gemm(
            n,
            cin,
            cout,
            T::one(),
            self.value(x).data(),
            cin as isize,
            1,
            self.value(w).data(),
            1,
            cin as isize,
            T::one(),
            &mut out,
            cout as isize,
            1,
        );
        let value = Tensor::new([n, cout], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::Dense { x, w, b }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let value = match kind {
            Activation::Relu => self.value(x).map(|v| if v > T::zero() { v } else { T::zero() }),
            Activation::Sigmoid => self.value(x).map(sigmoid),
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Act { x, kind }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Channels of `a` followed by channels of `b`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let hw = ha * wa;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(na * (ca + cb) * hw);
        for i in 0..na {
            out.extend_from_slice(&ad[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&bd[i * cb * hw..(i + 1) * cb * hw]);
        }
        let value = Tensor::new([na, ca + cb, ha, wa], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let ok = sa.len() == sb.len() && sa.iter().zip(sb).all(|(&x, &y)| x == y || y == 1);
        if ok {
            Ok(())
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            kernels::broadcast_indices(ta.shape(), tb.shape())
                .into_iter()
                .zip(ta.data())
                .map(|(j, &x)| f(x, tb.data()[j]))
                .collect()
        };
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    /// `a + b`, where each dim of `b` equals `a`'s or is 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let value = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// `a ⊙ b`, where each dim of `b` equals `a`'s or is 1.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let value = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Sum { x }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::param("mean of an empty tensor"));
        }
        let value = Tensor::scalar(t.sum() / T::from_usize(t.len()).unwrap());
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Mean { x }, rg))
    }

    /// Mean binary cross-entropy with predictions clamped to `[eps, 1-eps]`.
    pub fn bce(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape("bce", p.shape(), target.shape()));
        }
        if p.is_empty() {
            return Err(Error::param("bce of an empty tensor"));
        }
        let (lo, hi) = bce_clamp::<T>();
        let total: T = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&pv, &t)| {
                let pc = pv.max(lo).min(hi);
                -(t * pc.ln() + (T::one() - t) * (T::one() - pc).ln())
            })
            .sum();
        let value = Tensor::scalar(total / T::from_usize(p.len()).unwrap());
        let rg = self.rg(&[pred]);
        Ok(self.push(
            value,
            Op::Bce {
                pred,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// Fingerprint of every piecewise choice made in the forward pass (relu
    /// signs, pooling winners, loss clamping). Two evaluations with equal
    /// fingerprints lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = Fnv::new();
        for node in &self.nodes {
            match &node.op {
                Op::Act {
                    x,
                    kind: Activation::Relu,
                } => {
                    for &v in self.nodes[x.0].value.data() {
                        h.byte((v > T::zero()) as u8);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.iter().for_each(|&a| h.word(a as u64)),
                Op::Bce { pred, .. } => {
                    let (lo, hi) = bce_clamp::<T>();
                    for &v in self.nodes[pred.0].value.data() {
                        h.byte(((v < lo) as u8) | (((v > hi) as u8) << 1));
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse-mode sweep from a scalar `loss`; accumulates into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::param(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, gy, &mut grads)?;
        }
        Ok(())
    }

    fn backward_node(
        &mut self,
        i: usize,
        gy: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let nodes = &self.nodes;
        let needs = |v: &Var| nodes[v.0].requires_grad;
        let val = |v: &Var| &nodes[v.0].value;
        let mut send = |v: &Var, data: Vec<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = &mut grads[v.0];
            match slot {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(data)
                    .for_each(|(a, d)| *a = *a + d),
                None => {
                    *slot = Some(
                        Tensor::new(nodes[v.0].value.shape().to_vec(), data)
                            .expect("gradient matches value shape"),
                    )
                }
            }
        };
        let dy = gy.data();
        match &nodes[i].op {
            Op::Leaf => {
                let slot = &mut self.leaf_grads[i];
                match slot {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(dy)
                        .for_each(|(a, &d)| *a = *a + d),
                    None => *slot = Some(gy),
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let g = kernels::conv2d_backward(
                    geom,
                    val(x).data(),
                    val(w).data(),
                    dy,
                    (needs(x), needs(w), needs(b)),
                );
                if let Some(d) = g.dx {
                    send(x, d);
                }
                if let Some(d) = g.dw {
                    send(w, d);
                }
                if let Some(d) = g.db {
                    send(b, d);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); val(x).len()];
                for (&a, &d) in argmax.iter().zip(dy) {
                    dx[a as usize] = dx[a as usize] + d;
                }
                send(x, dx);
            }
            Op::Upsample { x } => {
                let (n, c, h, w) = val(x).dims4()?;
                send(x, kernels::upsample2x_backward(dy, n * c, h, w));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, hw) = channel_layout(val(x).shape())?;
                let g = val(gamma).data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for j in base..base + hw {
                            sum_dy[ch] = sum_dy[ch] + dy[j];
                            sum_dy_xhat[ch] = sum_dy_xhat[ch] + dy[j] * xhat[j];
                        }
                    }
                }
                if needs(x) {
                    let mut dx = vec![T::zero(); dy.len()];
                    let m = T::from_usize(n * hw).unwrap();
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            let scale = g[ch] * inv_std[ch];
                            for j in base..base + hw {
                                dx[j] = if *train {
                                    scale / m * (m * dy[j] - sum_dy[ch] - xhat[j] * sum_dy_xhat[ch])
                                } else {
                                    scale * dy[j]
                                };
                            }
                        }
                    }
                    send(x, dx);
                }
                send(gamma, sum_dy_xhat);
                send(beta, sum_dy);
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, h, w) = val(x).dims4()?;
                let hw = h * w;
                let inv = T::one() / T::from_usize(hw).unwrap();
                let dx = dy
                    .iter()
                    .flat_map(|&d| std::iter::repeat_n(d * inv, hw))
                    .collect();
                send(x, dx);
            }
            Op::Dense { x, w, b } => {
                let (n, cin) = (val(x).shape()[0], val(x).shape()[1]);
                let cout = val(w).shape()[0];
                if needs(x) {
                    let mut dx = vec![T::zero(); n * cin];
                    T::gemm(
                        n,
                        cout,
                        cin,
                        T::one(),
                        dy,
                        cout as isize,
                        1,
                        val(w).data(),
                        cin as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        cin as isize,
                        1,
                    );
                    send(x, dx);
                }
                if needs(w) {
                    let mut dw = vec![T::zero(); cout * cin];
                    T::gemm(
                        cout,
                        n,
                        cin,
                        T::one(),
                        dy,
                        1,
                        cout as isize,
                        val(x).data(),
                        cin as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        cin as isize,
                        1,
                    );
                    send(w, dw);
                }
                if needs(b) {
                    let mut db = vec![T::zero(); cout];
                    for row in dy.chunks(cout) {
                        db.iter_mut().zip(row).for_each(|(a, &d)| *a = *a + d);
                    }
                    send(b, db);
                }
            }
            Op::Act { x, kind } => {
                let dx = match kind {
                    Activation::Relu => val(x)
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                        .collect(),
                    Activation::Sigmoid => nodes[i]
                        .value
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(&y, &d)| d * y * (T::one() - y))
                        .collect(),
                };
                send(x, dx);
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = val(a).dims4()?;
                let cb = val(b).shape()[1];
                let hw = h * w;
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut db = Vec::with_capacity(n * cb * hw);
                for s in 0..n {
                    let base = s * (ca + cb) * hw;
                    da.extend_from_slice(&dy[base..base + ca * hw]);
                    db.extend_from_slice(&dy[base + ca * hw..base + (ca + cb) * hw]);
                }
                send(a, da);
                send(b, db);
            }
            Op::Add { a, b } => {
                send(a, dy.to_vec());
                if needs(b) {
                    send(b, reduce_to(val(a).shape(), val(b).shape(), dy.to_vec()));
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (val(a), val(b));
                let bidx = (ta.shape() != tb.shape())
                    .then(|| kernels::broadcast_indices(ta.shape(), tb.shape()));
                let b_at = |k: usize| match &bidx {
                    Some(ix) => tb.data()[ix[k]],
                    None => tb.data()[k],
                };
                if needs(a) {
                    send(a, (0..dy.len()).map(|k| dy[k] * b_at(k)).collect());
                }
                if needs(b) {
                    match &bidx {
                        None => send(b, dy.iter().zip(ta.data()).map(|(&d, &x)| d * x).collect()),
                        Some(ix) => {
                            let mut db = vec![T::zero(); tb.len()];
                            for k in 0..dy.len() {
                                db[ix[k]] = db[ix[k]] + dy[k] * ta.data()[k];
                            }
                            send(b, db);
                        }
                    }
                }
            }
            Op::Reshape { x } => send(x, dy.to_vec()),
            Op::Sum { x } => send(x, vec![dy[0]; val(x).len()]),
            Op::Mean { x } => {
                let len = val(x).len();
                send(x, vec![dy[0] / T::from_usize(len).unwrap(); len]);
            }
            Op::Bce { pred, target } => {
                let (lo, hi) = bce_clamp::<T>();
                let p = val(pred).data();
                let scale = dy[0] / T::from_usize(p.len()).unwrap();
                let dx = p
                    .iter()
                    .zip(target)
                    .map(|(&pv, &t)| {
                        if pv < lo || pv > hi {
                            T::zero()
                        } else {
                            scale * (pv - t) / (pv * (T::one() - pv))
                        }
                    })
                    .collect();
                send(pred, dx);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn bce_clamp<T: Scalar>() -> (T, T) {
    let eps = T::from_f64_lossy(1e-7);
    (eps, T::one() - eps)
}

/// `(N, C, H·W)` for rank-2 or rank-4 inputs.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::param(format!(
            "expected an N×C or N×C×H×W tensor, got {shape:?}"
        ))),
    }
}

fn reduce_to<T: Scalar>(a: &[usize], b: &[usize], dy: Vec<T>) -> Vec<T> {
    if a == b {
        return dy;
    }
    let mut out = vec![T::zero(); b.iter().product()];
    for (k, j) in kernels::broadcast_indices(a, b).into_iter().enumerate() {
        out[j] = out[j] + dy[k];
    }
    out
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn byte(&mut self, b: u8) {
        self.0 = (self.0 ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }

    fn word(&mut self, w: u64) {
        w.to_le_bytes().into_iter().for_each(|b| self.byte(b));
    }

    fn finish(&self) -> u64 {
        self.0
    }
}
