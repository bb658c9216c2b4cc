use std::fmt::Debug;
use std::rc::Rc;

use crate::kernels::{
    col2im, conv_out_size, conv_transpose_out_size, gemm, im2col, instance_norm_stats,
};
use crate::{Real, TensorData};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Domain-specific differentiable operation plugged into the tape.
///
/// `backward` returns one gradient per input, aligned with the input order;
/// entries whose `needs[i]` flag is false may be `None`.
pub trait CustomOp<T: Real>: Debug {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&TensorData<T>]) -> TensorData<T>;
    fn backward(
        &self,
        inputs: &[&TensorData<T>],
        output: &TensorData<T>,
        grad: &TensorData<T>,
        needs: &[bool],
    ) -> Vec<Option<TensorData<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(T, Var),
    AddScalar(T, Var),
    Neg(Var),
    Abs(Var),
    Relu(Var),
    LeakyRelu(T, Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Matmul(Var, Var),
    AddBiasRow(Var, Var),
    AddBiasChan(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    InstanceNorm {
        x: Var,
        eps: T,
    },
    Reshape(Var),
    ConcatChan(Var, Var),
    ConcatCols(Var, Var),
    Custom {
        op: Rc<dyn CustomOp<T>>,
        inputs: Vec<Var>,
    },
}

struct Node<T: Real> {
    value: TensorData<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Eager tape: operations execute on creation and record enough to run the
/// reverse sweep. One graph per forward/backward pass; cheap to rebuild.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<TensorData<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: TensorData<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &TensorData<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v` (zeros if untouched).
    pub fn grad(&self, v: Var) -> TensorData<T> {
        match &self.grads.get(v.0) {
            Some(Some(g)) => (*g).clone(),
            _ => TensorData::zeros(self.nodes[v.0].value.shape().to_vec()),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that participates in differentiation.
    pub fn var(&mut self, value: TensorData<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant; no gradient is propagated into it.
    pub fn constant(&mut self, value: TensorData<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        self.constant(TensorData::zeros(shape))
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(data, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(data, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(data, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let data = map(self.value(a), |x| x * s);
        let ng = self.needs(a);
        self.push(data, Op::Scale(s, a), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let data = map(self.value(a), |x| x + s);
        let ng = self.needs(a);
        self.push(data, Op::AddScalar(s, a), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data = map(self.value(a), |x| -x);
        let ng = self.needs(a);
        self.push(data, Op::Neg(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let data = map(self.value(a), |x| x.abs());
        let ng = self.needs(a);
        self.push(data, Op::Abs(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = map(self.value(a), |x| if x > T::zero() { x } else { T::zero() });
        let ng = self.needs(a);
        self.push(data, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let data = map(self.value(a), |x| if x > T::zero() { x } else { x * slope });
        let ng = self.needs(a);
        self.push(data, Op::LeakyRelu(slope, a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = map(self.value(a), |x| x.exp());
        let ng = self.needs(a);
        self.push(data, Op::Exp(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let data = map(self.value(a), |x| x * x);
        let ng = self.needs(a);
        self.push(data, Op::Square(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.needs(a);
        self.push(TensorData::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.value(a).numel() as f64);
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.needs(a);
        self.push(TensorData::scalar(s / n), Op::Mean(a), ng)
    }

    /// `mean(|a - b|)` over every element.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean(d)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 2, "matmul lhs must be 2-d, got {:?}", sa);
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-d, got {:?}", sb);
        assert_eq!(sa[1], sb[0], "matmul inner dims {:?} x {:?}", sa, sb);
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        let ng = self.needs(a) || self.needs(b);
        self.push(TensorData::new(vec![m, n], out), Op::Matmul(a, b), ng)
    }

    /// `x [r, m] + bias [m]`, broadcast over rows.
    pub fn add_bias_row(&mut self, x: Var, b: Var) -> Var {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 2, "add_bias_row expects a matrix, got {:?}", sx);
        assert_eq!(self.shape(b), &[sx[1]], "bias shape mismatch");
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for r in 0..sx[0] {
            for c in 0..sx[1] {
                out[r * sx[1] + c] += bd[c];
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(TensorData::new(sx, out), Op::AddBiasRow(x, b), ng)
    }

    /// `x [h, w, c] + bias [c]`, broadcast over the spatial extent.
    pub fn add_bias_chan(&mut self, x: Var, b: Var) -> Var {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 3, "add_bias_chan expects a map, got {:?}", sx);
        let c = sx[2];
        assert_eq!(self.shape(b), &[c], "bias shape mismatch");
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bd[i % c];
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(TensorData::new(sx, out), Op::AddBiasChan(x, b), ng)
    }

    /// Fully connected layer `x [r, k] @ w [k, n] + b [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias_row(y, b)
    }

    /// 2-d convolution over an `[h, w, c_in]` map with weights
    /// `[k, k, c_in, c_out]` and bias `[c_out]`. Padding is in texels.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sx.len(), 3, "conv2d input must be [h,w,c], got {:?}", sx);
        assert_eq!(sw.len(), 4, "conv2d weight must be [k,k,ci,co], got {:?}", sw);
        assert_eq!(sw[0], sw[1], "square kernels only");
        assert_eq!(
            sx[2], sw[2],
            "conv2d channel mismatch: input {:?} weight {:?}",
            sx, sw
        );
        let (h, wd, ci, co, k) = (sx[0], sx[1], sx[2], sw[3], sw[0]);
        let ho = conv_out_size(h, k, stride, pad);
        let wo = conv_out_size(wd, k, stride, pad);
        let cols = im2col(self.value(x).data(), h, wd, ci, k, stride, pad, ho, wo);
        let mut out = vec![T::zero(); ho * wo * co];
        gemm(
            ho * wo,
            k * k * ci,
            co,
            T::one(),
            &cols,
            false,
            self.value(w).data(),
            false,
            T::zero(),
            &mut out,
        );
        let ng = self.needs(x) || self.needs(w);
        let y = self.push(
            TensorData::new(vec![ho, wo, co], out),
            Op::Conv2d { x, w, stride, pad },
            ng,
        );
        self.add_bias_chan(y, b)
    }

    /// Transposed 2-d convolution (adjoint of a strided conv). Weights are
    /// `[k, k, c_out, c_in]`; `out_pad` grows the output on the far edge.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sx.len(), 3, "conv2d_transpose input must be [h,w,c]");
        assert_eq!(sw.len(), 4, "conv2d_transpose weight must be [k,k,co,ci]");
        assert_eq!(sw[0], sw[1], "square kernels only");
        assert_eq!(
            sx[2], sw[3],
            "conv2d_transpose channel mismatch: input {:?} weight {:?}",
            sx, sw
        );
        let (h, wd, ci, co, k) = (sx[0], sx[1], sx[2], sw[2], sw[0]);
        let ho = conv_transpose_out_size(h, k, stride, pad, out_pad);
        let wo = conv_transpose_out_size(wd, k, stride, pad, out_pad);
        // cols[(h*w) x (k*k*co)] = x @ w2^T with w2 = [(k*k*co) x ci]
        let mut cols = vec![T::zero(); h * wd * k * k * co];
        gemm(
            h * wd,
            ci,
            k * k * co,
            T::one(),
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::zero(),
            &mut cols,
        );
        let out = col2im(&cols, ho, wo, co, k, stride, pad, h, wd);
        let ng = self.needs(x) || self.needs(w);
        let y = self.push(
            TensorData::new(vec![ho, wo, co], out),
            Op::ConvT2d {
                x,
                w,
                stride,
                pad,
            },
            ng,
        );
        self.add_bias_chan(y, b)
    }

    /// Per-channel normalization over the spatial extent, no learned affine.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Var {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 3, "instance_norm expects [h,w,c], got {:?}", sx);
        let (hw, c) = (sx[0] * sx[1], sx[2]);
        let (mean, inv_std) = instance_norm_stats(self.value(x).data(), hw, c, eps);
        let mut out = vec![T::zero(); hw * c];
        let xd = self.value(x).data();
        for p in 0..hw {
            for ch in 0..c {
                out[p * c + ch] = (xd[p * c + ch] - mean[ch]) * inv_std[ch];
            }
        }
        let ng = self.needs(x);
        self.push(TensorData::new(sx, out), Op::InstanceNorm { x, eps }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let data = self.value(a).clone().reshaped(shape);
        let ng = self.needs(a);
        self.push(data, Op::Reshape(a), ng)
    }

    /// Concatenate `[h, w, c1]` and `[h, w, c2]` along channels.
    pub fn concat_chan(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[..2], sb[..2], "spatial mismatch {:?} vs {:?}", sa, sb);
        let (hw, c1, c2) = (sa[0] * sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); hw * (c1 + c2)];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for p in 0..hw {
            out[p * (c1 + c2)..p * (c1 + c2) + c1].copy_from_slice(&da[p * c1..(p + 1) * c1]);
            out[p * (c1 + c2) + c1..(p + 1) * (c1 + c2)].copy_from_slice(&db[p * c2..(p + 1) * c2]);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(
            TensorData::new(vec![sa[0], sa[1], c1 + c2], out),
            Op::ConcatChan(a, b),
            ng,
        )
    }

    /// Concatenate `[r, c1]` and `[r, c2]` along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 2);
        assert_eq!(sb.len(), 2);
        assert_eq!(sa[0], sb[0], "row mismatch {:?} vs {:?}", sa, sb);
        let (r, c1, c2) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); r * (c1 + c2)];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..r {
            out[i * (c1 + c2)..i * (c1 + c2) + c1].copy_from_slice(&da[i * c1..(i + 1) * c1]);
            out[i * (c1 + c2) + c1..(i + 1) * (c1 + c2)].copy_from_slice(&db[i * c2..(i + 1) * c2]);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(
            TensorData::new(vec![r, c1 + c2], out),
            Op::ConcatCols(a, b),
            ng,
        )
    }

    /// Apply a domain-specific differentiable operation.
    pub fn custom(&mut self, op: Rc<dyn CustomOp<T>>, inputs: &[Var]) -> Var {
        let vals: Vec<&TensorData<T>> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = op.forward(&vals);
        let ng = inputs.iter().any(|v| self.needs(*v));
        self.push(
            out,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate per node and are
    /// readable through [`Graph::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.value(loss).numel(),
            1,
            "backward target must be scalar, got {:?}",
            self.shape(loss)
        );
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(TensorData::scalar(T::one()));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn accum(&mut self, v: Var, delta: TensorData<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&mut self, i: usize, g: &TensorData<T>) {
        // Ops are matched by value-free borrows first, then accumulate.
        enum Deltas<T: Real> {
            None,
            One(Var, TensorData<T>),
            Two(Var, TensorData<T>, Var, TensorData<T>),
            Many(Vec<(Var, TensorData<T>)>),
        }
        let deltas = match &self.nodes[i].op {
            Op::Leaf => Deltas::None,
            Op::Add(a, b) => Deltas::Two(*a, g.clone(), *b, g.clone()),
            Op::Sub(a, b) => Deltas::Two(*a, g.clone(), *b, map(g, |x| -x)),
            Op::Mul(a, b) => {
                let da = zip_map(g, self.value(*b), |x, y| x * y);
                let db = zip_map(g, self.value(*a), |x, y| x * y);
                Deltas::Two(*a, da, *b, db)
            }
            Op::Scale(s, a) => {
                let s = *s;
                Deltas::One(*a, map(g, |x| x * s))
            }
            Op::AddScalar(_, a) => Deltas::One(*a, g.clone()),
            Op::Neg(a) => Deltas::One(*a, map(g, |x| -x)),
            Op::Abs(a) => {
                let da = zip_map(g, self.value(*a), |gx, x| {
                    if x > T::zero() {
                        gx
                    } else if x < T::zero() {
                        -gx
                    } else {
                        T::zero()
                    }
                });
                Deltas::One(*a, da)
            }
            Op::Relu(a) => {
                let da = zip_map(g, self.value(*a), |gx, x| {
                    if x > T::zero() {
                        gx
                    } else {
                        T::zero()
                    }
                });
                Deltas::One(*a, da)
            }
            Op::LeakyRelu(slope, a) => {
                let s = *slope;
                let da = zip_map(g, self.value(*a), |gx, x| {
                    if x > T::zero() {
                        gx
                    } else {
                        gx * s
                    }
                });
                Deltas::One(*a, da)
            }
            Op::Exp(a) => {
                let da = zip_map(g, &self.nodes[i].value, |gx, y| gx * y);
                Deltas::One(*a, da)
            }
            Op::Square(a) => {
                let two = T::from_f64(2.0);
                let da = zip_map(g, self.value(*a), |gx, x| gx * x * two);
                Deltas::One(*a, da)
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                Deltas::One(*a, TensorData::full(shape, g.item()))
            }
            Op::Mean(a) => {
                let shape = self.shape(*a).to_vec();
                let n = T::from_f64(self.value(*a).numel() as f64);
                Deltas::One(*a, TensorData::full(shape, g.item() / n))
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut pairs = Vec::new();
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        false,
                        self.value(*b).data(),
                        true,
                        T::zero(),
                        &mut da,
                    );
                    pairs.push((*a, TensorData::new(vec![m, k], da)));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(*a).data(),
                        true,
                        g.data(),
                        false,
                        T::zero(),
                        &mut db,
                    );
                    pairs.push((*b, TensorData::new(vec![k, n], db)));
                }
                Deltas::Many(pairs)
            }
            Op::AddBiasRow(x, b) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut db = vec![T::zero(); c];
                for row in 0..r {
                    for col in 0..c {
                        db[col] += g.data()[row * c + col];
                    }
                }
                Deltas::Two(*x, g.clone(), *b, TensorData::new(vec![c], db))
            }
            Op::AddBiasChan(x, b) => {
                let c = *self.shape(*x).last().unwrap();
                let mut db = vec![T::zero(); c];
                for (idx, v) in g.data().iter().enumerate() {
                    db[idx % c] += *v;
                }
                Deltas::Two(*x, g.clone(), *b, TensorData::new(vec![c], db))
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let sx = self.shape(*x).to_vec();
                let sw = self.shape(*w).to_vec();
                let (h, wd, ci, co, k) = (sx[0], sx[1], sx[2], sw[3], sw[0]);
                let so = self.nodes[i].value.shape().to_vec();
                let (ho, wo) = (so[0], so[1]);
                let mut pairs = Vec::new();
                if self.needs(*x) {
                    // d_cols = g @ w^T, then scatter back.
                    let mut dcols = vec![T::zero(); ho * wo * k * k * ci];
                    gemm(
                        ho * wo,
                        co,
                        k * k * ci,
                        T::one(),
                        g.data(),
                        false,
                        self.value(*w).data(),
                        true,
                        T::zero(),
                        &mut dcols,
                    );
                    let dx = col2im(&dcols, h, wd, ci, k, stride, pad, ho, wo);
                    pairs.push((*x, TensorData::new(vec![h, wd, ci], dx)));
                }
                if self.needs(*w) {
                    let cols = im2col(self.value(*x).data(), h, wd, ci, k, stride, pad, ho, wo);
                    let mut dw = vec![T::zero(); k * k * ci * co];
                    gemm(
                        k * k * ci,
                        ho * wo,
                        co,
                        T::one(),
                        &cols,
                        true,
                        g.data(),
                        false,
                        T::zero(),
                        &mut dw,
                    );
                    pairs.push((*w, TensorData::new(sw, dw)));
                }
                Deltas::Many(pairs)
            }
            Op::ConvT2d { x, w, stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let sx = self.shape(*x).to_vec();
                let sw = self.shape(*w).to_vec();
                let (h, wd, ci, co, k) = (sx[0], sx[1], sx[2], sw[2], sw[0]);
                let so = self.nodes[i].value.shape().to_vec();
                let (ho, wo) = (so[0], so[1]);
                // Adjoint of col2im is im2col over the output geometry.
                let dcols = im2col(g.data(), ho, wo, co, k, stride, pad, h, wd);
                let mut pairs = Vec::new();
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); h * wd * ci];
                    gemm(
                        h * wd,
                        k * k * co,
                        ci,
                        T::one(),
                        &dcols,
                        false,
                        self.value(*w).data(),
                        false,
                        T::zero(),
                        &mut dx,
                    );
                    pairs.push((*x, TensorData::new(vec![h, wd, ci], dx)));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); k * k * co * ci];
                    gemm(
                        k * k * co,
                        h * wd,
                        ci,
                        T::one(),
                        &dcols,
                        true,
                        self.value(*x).data(),
                        false,
                        T::zero(),
                        &mut dw,
                    );
                    pairs.push((*w, TensorData::new(sw, dw)));
                }
                Deltas::Many(pairs)
            }
            Op::InstanceNorm { x, eps } => {
                let sx = self.shape(*x).to_vec();
                let (hw, c) = (sx[0] * sx[1], sx[2]);
                let (_, inv_std) = instance_norm_stats(self.value(*x).data(), hw, c, *eps);
                let y = self.nodes[i].value.data();
                let gd = g.data();
                let n = T::from_f64(hw as f64);
                let mut mean_g = vec![T::zero(); c];
                let mut mean_gy = vec![T::zero(); c];
                for p in 0..hw {
                    for ch in 0..c {
                        mean_g[ch] += gd[p * c + ch];
                        mean_gy[ch] += gd[p * c + ch] * y[p * c + ch];
                    }
                }
                for ch in 0..c {
                    mean_g[ch] /= n;
                    mean_gy[ch] /= n;
                }
                let mut dx = vec![T::zero(); hw * c];
                for p in 0..hw {
                    for ch in 0..c {
                        let idx = p * c + ch;
                        dx[idx] = inv_std[ch] * (gd[idx] - mean_g[ch] - y[idx] * mean_gy[ch]);
                    }
                }
                Deltas::One(*x, TensorData::new(sx, dx))
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                Deltas::One(*a, g.clone().reshaped(shape))
            }
            Op::ConcatChan(a, b) => {
                let (c1, c2) = (self.shape(*a)[2], self.shape(*b)[2]);
                let hw = self.shape(*a)[0] * self.shape(*a)[1];
                let mut da = vec![T::zero(); hw * c1];
                let mut db = vec![T::zero(); hw * c2];
                let gd = g.data();
                for p in 0..hw {
                    da[p * c1..(p + 1) * c1]
                        .copy_from_slice(&gd[p * (c1 + c2)..p * (c1 + c2) + c1]);
                    db[p * c2..(p + 1) * c2]
                        .copy_from_slice(&gd[p * (c1 + c2) + c1..(p + 1) * (c1 + c2)]);
                }
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                Deltas::Two(
                    *a,
                    TensorData::new(sa, da),
                    *b,
                    TensorData::new(sb, db),
                )
            }
            Op::ConcatCols(a, b) => {
                let (r, c1, c2) = (self.shape(*a)[0], self.shape(*a)[1], self.shape(*b)[1]);
                let mut da = vec![T::zero(); r * c1];
                let mut db = vec![T::zero(); r * c2];
                let gd = g.data();
                for row in 0..r {
                    da[row * c1..(row + 1) * c1]
                        .copy_from_slice(&gd[row * (c1 + c2)..row * (c1 + c2) + c1]);
                    db[row * c2..(row + 1) * c2]
                        .copy_from_slice(&gd[row * (c1 + c2) + c1..(row + 1) * (c1 + c2)]);
                }
                Deltas::Two(
                    *a,
                    TensorData::new(vec![r, c1], da),
                    *b,
                    TensorData::new(vec![r, c2], db),
                )
            }
            Op::Custom { op, inputs } => {
                let op = op.clone();
                let inputs = inputs.clone();
                let needs: Vec<bool> = inputs.iter().map(|v| self.needs(*v)).collect();
                let vals: Vec<&TensorData<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = op.backward(&vals, &self.nodes[i].value, g, &needs);
                assert_eq!(
                    grads.len(),
                    inputs.len(),
                    "{}: backward returned {} grads for {} inputs",
                    op.name(),
                    grads.len(),
                    inputs.len()
                );
                let pairs = inputs
                    .iter()
                    .zip(grads)
                    .filter_map(|(v, d)| d.map(|d| (*v, d)))
                    .collect();
                Deltas::Many(pairs)
            }
        };
        match deltas {
            Deltas::None => {}
            Deltas::One(a, d) => self.accum(a, d),
            Deltas::Two(a, da, b, db) => {
                self.accum(a, da);
                self.accum(b, db);
            }
            Deltas::Many(pairs) => {
                for (v, d) in pairs {
                    self.accum(v, d);
                }
            }
        }
    }
}

fn map<T: Real>(t: &TensorData<T>, f: impl Fn(T) -> T) -> TensorData<T> {
    TensorData::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
}

fn zip_map<T: Real>(a: &TensorData<T>, b: &TensorData<T>, f: impl Fn(T, T) -> T) -> TensorData<T> {
    TensorData::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}
