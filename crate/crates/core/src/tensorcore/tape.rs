use super::{check_matmul, gemm, gemm_into, Mat, Tensor, TensorError, NORM_EPS};
use crate::fpquant::{counter_hash, fake_quant, QuantConfig, Rounding};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Quantization applied by [`Tape::linear`].
///
/// Forward operands are always rounded to nearest. When `backward` is set,
/// both gradient GEMMs quantize their operands along their own contraction
/// axis: gradients with that config's rounding mode and a per-tensor scale
/// (raw gradient magnitudes sit far below the E4M3 scale range), the saved
/// weight/activation with nearest rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct GemmQuant {
    pub forward: QuantConfig,
    pub backward: Option<QuantConfig>,
}

impl GemmQuant {
    pub fn new(cfg: &QuantConfig, quantize_backward: bool) -> Self {
        Self {
            forward: cfg.clone().with_rounding(Rounding::NearestEven),
            backward: quantize_backward.then(|| cfg.clone()),
        }
    }

    /// Same configuration with every seed replaced by a hash of `key`.
    pub fn reseeded(&self, key: u64) -> Self {
        let s = counter_hash(self.forward.seed, key, 0);
        Self {
            forward: self.forward.clone().with_seed(s),
            backward: self
                .backward
                .as_ref()
                .map(|b| b.clone().with_seed(counter_hash(b.seed, key, 1))),
        }
    }
}

/// Full- and low-precision operands of a quantized GEMM.
#[derive(Debug, Clone)]
pub struct QuantOperands<'a> {
    pub x: &'a Tensor,
    pub x_hat: &'a Tensor,
    pub w: &'a Tensor,
    pub w_hat: &'a Tensor,
}

#[derive(Debug)]
struct LinearQuant {
    x_hat: Tensor,
    w_hat: Tensor,
    backward: Option<QuantConfig>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        quant: Option<Box<LinearQuant>>,
    },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulRow(Var, Var),
    Abs(Var),
    Silu(Var),
    Gelu(Var),
    Softmax(Var),
    RmsNorm(Var, f64),
    Normalize(Var, usize),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        scale: f64,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when nothing flowed into `v`.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn accumulate(slot: &mut Option<Vec<f64>>, add: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&add).for_each(|(a, b)| *a += b),
        None => *slot = Some(add),
    }
}

fn accumulate_with(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn softmax_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var, TensorError> {
        if let Some(index) = value.first_non_finite() {
            return Err(TensorError::NonFinite {
                op: op_name(&op),
                index,
            });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Operands of a quantized [`Tape::linear`] node.
    pub fn quant_operands(&self, y: Var) -> Option<QuantOperands<'_>> {
        match &self.nodes[y.0].op {
            Op::Linear {
                x,
                w,
                quant: Some(q),
            } => Some(QuantOperands {
                x: self.value(*x),
                x_hat: &q.x_hat,
                w: self.value(*w),
                w_hat: &q.w_hat,
            }),
            _ => None,
        }
    }

    /// `a @ b` for 2-D `a (m,k)` and `b (k,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_matmul(ta, tb, "matmul")?;
        let out = super::matmul(ta, tb)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `x @ w^T` for `x (m,k)`, `w (n,k)`, optionally through simulated
    /// quantization of both operands along `k` with a straight-through
    /// backward.
    pub fn linear(
        &mut self,
        x: Var,
        w: Var,
        quant: Option<&GemmQuant>,
    ) -> Result<Var, TensorError> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.shape().len() != 2 || tw.shape().len() != 2 || tx.shape()[1] != tw.shape()[1] {
            return Err(TensorError::Shape {
                op: "linear",
                left: tx.shape().to_vec(),
                right: tw.shape().to_vec(),
            });
        }
        let (m, k, n) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
        let (out, lq) = match quant {
            None => (
                gemm(Mat::new(tx.data(), m, k), Mat::new(tw.data(), n, k).t()),
                None,
            ),
            Some(q) => {
                let x_hat = fake_quant(tx, &q.forward)?;
                let w_hat = fake_quant(tw, &q.forward.clone().with_seed(q.forward.seed ^ 0x57))?;
                let out = gemm(
                    Mat::new(x_hat.data(), m, k),
                    Mat::new(w_hat.data(), n, k).t(),
                );
                (
                    out,
                    Some(Box::new(LinearQuant {
                        x_hat,
                        w_hat,
                        backward: q.backward.clone(),
                    })),
                )
            }
        };
        let ng = self.ng(x) || self.ng(w);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::Linear { x, w, quant: lq },
            ng,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a).transpose()?;
        let ng = self.ng(a);
        self.push(t, Op::Transpose(a), ng)
    }

    /// Matmul whose operands are fake-quantized along the contraction axis,
    /// with straight-through gradients.
    pub fn quant_matmul(
        &mut self,
        a: Var,
        b: Var,
        quant: Option<&GemmQuant>,
    ) -> Result<Var, TensorError> {
        check_matmul(self.value(a), self.value(b), "quant_matmul")?;
        let bt = self.transpose(b)?;
        self.linear(a, bt, quant)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, mk(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let t = self.value(a).map(|v| v * c);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// Multiply every row of `a` (last axis `d`) by the vector `v` of length `d`.
    pub fn mul_row(&mut self, a: Var, v: Var) -> Result<Var, TensorError> {
        let (ta, tv) = (self.value(a), self.value(v));
        if tv.len() != ta.cols() {
            return Err(TensorError::Shape {
                op: "mul_row",
                left: ta.shape().to_vec(),
                right: tv.shape().to_vec(),
            });
        }
        let d = ta.cols();
        let vd = tv.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vd[i % d])
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(v);
        self.push(t, Op::MulRow(a, v), ng)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(t, Op::Abs(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(t, Op::Silu(a), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut data = ta.data().to_vec();
        softmax_rows(&mut data, cols);
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a);
        self.push(t, Op::Softmax(a), ng)
    }

    /// `x / sqrt(mean(x^2) + eps)` over the last axis.
    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let d = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + eps).sqrt();
            row.iter_mut().for_each(|v| *v *= r);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a);
        self.push(t, Op::RmsNorm(a, eps), ng)
    }

    /// Unit-L2-normalize each contiguous group of `group` elements along the
    /// last axis. `group == cols` normalizes whole rows.
    pub fn normalize(&mut self, a: Var, group: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if group == 0 || ta.cols() % group != 0 {
            return Err(TensorError::Shape {
                op: "normalize",
                left: ta.shape().to_vec(),
                right: vec![group],
            });
        }
        let mut data = ta.data().to_vec();
        for (i, g) in data.chunks_mut(group).enumerate() {
            let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < NORM_EPS {
                return Err(TensorError::ZeroNorm { slice: i, norm: n });
            }
            g.iter_mut().for_each(|v| *v /= n);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a);
        self.push(t, Op::Normalize(a, group), ng)
    }

    /// Normalize whole rows.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var, TensorError> {
        let c = self.value(a).cols();
        self.normalize(a, c)
    }

    /// Gather rows of `table (V, d)`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tt = self.value(table);
        let (v, d) = (tt.shape()[0], tt.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: i,
                    size: v,
                });
            }
            data.extend_from_slice(tt.row(i));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let ng = self.ng(table);
        self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Causal multi-head attention over `batch = rows / seq` sequences.
    /// `q`, `k`, `v` are `(batch*seq, heads*head_dim)`; `scale` multiplies
    /// the logits before the softmax.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        scale: f64,
    ) -> Result<Var, TensorError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        same_shape("attention", tq, tk)?;
        same_shape("attention", tq, tv)?;
        let (rows, d) = (tq.rows(), tq.cols());
        if seq == 0 || rows % seq != 0 || heads == 0 || d % heads != 0 {
            return Err(TensorError::Shape {
                op: "attention",
                left: tq.shape().to_vec(),
                right: vec![seq, heads],
            });
        }
        let (batch, dh) = (rows / seq, d / heads);
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;

                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                gemm_into(
                    scale,
                    head_view(tq.data(), off, seq, dh, d),
                    head_view(tk.data(), off, seq, dh, d).t(),
                    0.0,
                    p,
                    seq,
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    row[i + 1..].iter_mut().for_each(|x| *x = f64::NEG_INFINITY);
                }
                softmax_rows(p, seq);
                gemm_into(
                    1.0,
                    Mat::new(p, seq, seq),
                    head_view(tv.data(), off, seq, dh, d),
                    0.0,
                    &mut out[off..],
                    d,
                );
            }
        }
        let t = Tensor::new(tq.shape().to_vec(), out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                scale,
                probs,
            },
            ng,
        )
    }

    /// Mean cross-entropy (nats) of `logits (N, V)` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let tl = self.value(logits);
        let (n, v) = (tl.rows(), tl.cols());
        if targets.len() != n {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(v).enumerate() {
            let t = targets[i];
            if t >= v {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    size: v,
                });
            }
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Reverse pass from the scalar `out`. Every node is visited once, in
    /// reverse creation order (a valid reverse topological order).
    pub fn backward(&self, out: Var) -> Result<Gradients, TensorError> {
        let ov = self.value(out);
        if ov.len() != 1 {
            return Err(TensorError::NotScalar(ov.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        // only leaves keep gradients
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<(), TensorError> {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let gm = Mat::new(g, m, n);
                if want(*a) {
                    let d = gemm(gm, Mat::new(tb.data(), k, n).t());
                    accumulate(&mut grads[a.0], d);
                }
                if want(*b) {
                    let d = gemm(Mat::new(ta.data(), m, k).t(), gm);
                    accumulate(&mut grads[b.0], d);
                }
            }
            Op::Linear { x, w, quant } => {
                let (tx, tw) = (val(*x), val(*w));
                let (m, k, n) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
                let (dx, dw) =
                    linear_backward(g, tx, tw, quant.as_deref(), m, k, n, want(*x), want(*w))?;
                if let Some(dx) = dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if let Some(dw) = dw {
                    accumulate(&mut grads[w.0], dw);
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let gt = Tensor::new(s.to_vec(), g.to_vec())?.transpose()?;
                accumulate(&mut grads[a.0], gt.into_data());
            }
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if want(*b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if want(*b) {
                    accumulate(&mut grads[b.0], g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if want(*a) {
                    accumulate(
                        &mut grads[a.0],
                        g.iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
                    );
                }
                if want(*b) {
                    accumulate(
                        &mut grads[b.0],
                        g.iter().zip(ta.data()).map(|(x, y)| x * y).collect(),
                    );
                }
            }
            Op::Scale(a, c) => accumulate(&mut grads[a.0], g.iter().map(|x| x * c).collect()),
            Op::MulRow(a, v) => {
                let (ta, tv) = (val(*a), val(*v));
                let d = tv.len();
                if want(*a) {
                    let vd = tv.data();
                    accumulate(
                        &mut grads[a.0],
                        g.iter().enumerate().map(|(i, x)| x * vd[i % d]).collect(),
                    );
                }
                if want(*v) {
                    accumulate_with(&mut grads[v.0], d, |acc| {
                        for (gr, xr) in g.chunks(d).zip(ta.data().chunks(d)) {
                            for j in 0..d {
                                acc[j] += gr[j] * xr[j];
                            }
                        }
                    });
                }
            }
            Op::Abs(a) => {
                let ta = val(*a);
                accumulate(
                    &mut grads[a.0],
                    g.iter()
                        .zip(ta.data())
                        .map(|(x, &y)| {
                            if y > 0.0 {
                                *x
                            } else if y < 0.0 {
                                -x
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                );
            }
            Op::Silu(a) => {
                let ta = val(*a);
                accumulate(
                    &mut grads[a.0],
                    g.iter()
                        .zip(ta.data())
                        .map(|(gy, &x)| {
                            let s = sigmoid(x);
                            gy * s * (1.0 + x * (1.0 - s))
                        })
                        .collect(),
                );
            }
            Op::Gelu(a) => {
                let ta = val(*a);
                accumulate(
                    &mut grads[a.0],
                    g.iter()
                        .zip(ta.data())
                        .map(|(gy, &x)| {
                            let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                            gy * (0.5 * (1.0 + t) + 0.5 * x * dt)
                        })
                        .collect(),
                );
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::RmsNorm(a, eps) => {
                let x = val(*a).data();
                let c = node.value.cols();
                let mut d = vec![0.0; x.len()];
                for ((dr, xr), gr) in d.chunks_mut(c).zip(x.chunks(c)).zip(g.chunks(c)) {
                    let ms = xr.iter().map(|v| v * v).sum::<f64>() / c as f64;
                    let r = 1.0 / (ms + eps).sqrt();
                    let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let k = r * r * r * dot / c as f64;
                    for j in 0..c {
                        dr[j] = r * gr[j] - k * xr[j];
                    }
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::Normalize(a, group) => {
                let x = val(*a).data();
                let y = node.value.data();
                let mut d = vec![0.0; x.len()];
                for (((dr, xr), yr), gr) in d
                    .chunks_mut(*group)
                    .zip(x.chunks(*group))
                    .zip(y.chunks(*group))
                    .zip(g.chunks(*group))
                {
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..*group {
                        dr[j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::Embedding { table, ids } => {
                let tt = val(*table);
                let d = tt.cols();
                accumulate_with(&mut grads[table.0], tt.len(), |acc| {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut acc[id * d..(id + 1) * d];
                        dst.iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                scale,
                probs,
            } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let (seq, heads, scale) = (*seq, *heads, *scale);
                let (rows, d) = (tq.rows(), tq.cols());
                let (batch, dh) = (rows / seq, d / heads);
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dp = vec![0.0; seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = b * seq * d + h * dh;

                        let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                        let pm = Mat::new(p, seq, seq);
                        // dV = P^T dO
                        gemm_into(
                            1.0,
                            pm.t(),
                            head_view(g, off, seq, dh, d),
                            0.0,
                            &mut dv[off..],
                            d,
                        );
                        // dP = dO V^T
                        gemm_into(
                            1.0,
                            head_view(g, off, seq, dh, d),
                            head_view(tv.data(), off, seq, dh, d).t(),
                            0.0,
                            &mut dp,
                            seq,
                        );
                        for i in 0..seq {
                            let pr = &p[i * seq..(i + 1) * seq];
                            let dr = &mut dp[i * seq..(i + 1) * seq];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for j in 0..seq {
                                dr[j] = pr[j] * (dr[j] - dot);
                            }
                        }
                        let ds = Mat::new(&dp, seq, seq);
                        gemm_into(
                            scale,
                            ds,
                            head_view(tk.data(), off, seq, dh, d),
                            0.0,
                            &mut dq[off..],
                            d,
                        );
                        gemm_into(
                            scale,
                            ds.t(),
                            head_view(tq.data(), off, seq, dh, d),
                            0.0,
                            &mut dk[off..],
                            d,
                        );
                    }
                }
                if want(*q) {
                    accumulate(&mut grads[q.0], dq);
                }
                if want(*k) {
                    accumulate(&mut grads[k.0], dk);
                }
                if want(*v) {
                    accumulate(&mut grads[v.0], dv);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = val(*logits).cols();
                let n = targets.len() as f64;
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * v + t] -= 1.0;
                }
                let s = g[0] / n;
                d.iter_mut().for_each(|x| *x *= s);
                accumulate(&mut grads[logits.0], d);
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                accumulate(&mut grads[a.0], vec![g[0]; n]);
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn linear_backward(
    g: &[f64],
    tx: &Tensor,
    tw: &Tensor,
    quant: Option<&LinearQuant>,
    m: usize,
    k: usize,
    n: usize,
    want_x: bool,
    want_w: bool,
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>), TensorError> {
    let gm = Mat::new(g, m, n);
    match quant {
        None => Ok((
            want_x.then(|| gemm(gm, Mat::new(tw.data(), n, k))),
            want_w.then(|| gemm(gm.t(), Mat::new(tx.data(), m, k))),
        )),
        Some(LinearQuant {
            x_hat,
            w_hat,
            backward: None,
        }) => Ok((
            want_x.then(|| gemm(gm, Mat::new(w_hat.data(), n, k))),
            want_w.then(|| gemm(gm.t(), Mat::new(x_hat.data(), m, k))),
        )),
        Some(LinearQuant {
            backward: Some(cfg),
            ..
        }) => {
            let grad_cfg = QuantConfig {
                per_tensor_scale: true,
                ..cfg.clone()
            };
            let op_cfg = cfg.clone().with_rounding(Rounding::NearestEven);
            let gt = Tensor::new(vec![m, n], g.to_vec())?;
            let dx = if want_x {
                // contraction over n: dY rows and W^T rows
                let gq = fake_quant(
                    &gt,
                    &grad_cfg.clone().with_seed(counter_hash(cfg.seed, 1, 0)),
                )?;
                let wt = fake_quant(
                    &tw.transpose()?,
                    &op_cfg.clone().with_seed(counter_hash(cfg.seed, 2, 0)),
                )?;
                Some(gemm(
                    Mat::new(gq.data(), m, n),
                    Mat::new(wt.data(), k, n).t(),
                ))
            } else {
                None
            };
            let dw = if want_w {
                // contraction over m: dY^T rows and X^T rows
                let gq = fake_quant(
                    &gt.transpose()?,
                    &grad_cfg.with_seed(counter_hash(cfg.seed, 3, 0)),
                )?;
                let xt = fake_quant(
                    &tx.transpose()?,
                    &op_cfg.with_seed(counter_hash(cfg.seed, 4, 0)),
                )?;
                Some(gemm(
                    Mat::new(gq.data(), n, m),
                    Mat::new(xt.data(), k, m).t(),
                ))
            } else {
                None
            };
            Ok((dx, dw))
        }
    }
}

/// Columns of one head inside a `(batch*seq, heads*dh)` buffer.
fn head_view(data: &[f64], off: usize, seq: usize, dh: usize, d: usize) -> Mat<'_> {
    Mat {
        data: &data[off..],
        rows: seq,
        cols: dh,
        rs: d as isize,
        cs: 1,
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Linear { .. } => "linear",
        Op::Transpose(_) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::MulRow(..) => "mul_row",
        Op::Abs(_) => "abs",
        Op::Silu(_) => "silu",
        Op::Gelu(_) => "gelu",
        Op::Softmax(_) => "softmax",
        Op::RmsNorm(..) => "rms_norm",
        Op::Normalize(..) => "normalize",
        Op::Embedding { .. } => "embedding",
        Op::Attention { .. } => "attention",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum(_) => "sum",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fpquant::{QuantConfig, E2M1_MAGNITUDES};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_softmax_is_uniform() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::full(&[2, 5], 3.7));
        let s = t.softmax(a).unwrap();
        assert!(t.value(s).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        // y = sum(a*b + a) with a used twice
        let mut t = Tape::new();
        let a = t.param(Tensor::from_vec(vec![1.0, 2.0]));
        let b = t.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let p = t.mul(a, b).unwrap();
        let s = t.add(p, a).unwrap();
        let y = t.sum(s).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(a).unwrap(), &[4.0, 5.0]);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut t = Tape::new();
        let a = t.param(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(a), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut t = Tape::new();
        let a = t.param(Tensor::from_vec(vec![1e308, 1.0]));
        let r = t.scale(a, 10.0);
        assert_eq!(
            r,
            Err(TensorError::NonFinite {
                op: "scale",
                index: 0
            })
        );
    }

    #[test]
    fn embedding_out_of_range() {
        let mut t = Tape::new();
        let e = t.param(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            t.embedding(e, &[1, 4]),
            Err(TensorError::Index {
                index: 4,
                size: 4,
                ..
            })
        ));
    }

    #[test]
    fn linear_off_matches_matmul_of_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[6, 32], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 32], 1.0, &mut rng);
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
        let y = t.linear(xv, wv, None).unwrap();
        let r = super::super::matmul(&x, &w.transpose().unwrap()).unwrap();
        assert_eq!(t.value(y), &r);
    }

    #[test]
    fn quantized_linear_is_matmul_of_fake_quantized_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let a = Tensor::randn(&[64, 64], 1.0, &mut rng);
        let b = Tensor::randn(&[64, 64], 1.0, &mut rng);
        let cfg = QuantConfig::nvfp4();
        let q = GemmQuant {
            forward: cfg.clone(),
            backward: None,
        };
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
        let y = t.quant_matmul(av, bv, Some(&q)).unwrap();
        let oracle = crate::tensorcore::quant_matmul(&a, &b, Some(&cfg)).unwrap();
        assert_eq!(t.value(y), &oracle);
        let ops = t.quant_operands(y).unwrap();
        assert_eq!(ops.x, &a);
        assert_eq!(ops.x_hat, &crate::fpquant::fake_quant(&a, &cfg).unwrap());
    }

    /// Straight-through consistency: operands already on the codebook grid at
    /// unit scale give exactly the unquantized loss and gradients, including
    /// through the quantized gradient GEMMs.
    #[test]
    fn straight_through_on_grid_is_exact() {
        let grid = |n: usize, r: usize, c: usize| {
            let mut v = Tensor::zeros(&[r, c]);
            for (i, x) in v.data_mut().iter_mut().enumerate() {
                let s = if (i + n) % 3 == 0 { -1.0 } else { 1.0 };
                *x = if i % c % 16 == 0 {
                    6.0
                } else {
                    s * E2M1_MAGNITUDES[(i * 7 + n) % 8]
                };
            }
            v
        };
        // x (16,32), w (16,32): every forward block holds a 6; for the
        // gradient GEMMs choose dY = const 6 via sum(6 * y) so every
        // transposed block also has scale 1 after per-tensor scaling
        let cfg = QuantConfig {
            per_tensor_scale: false,
            ..QuantConfig::nvfp4()
        };
        let run = |q: Option<&GemmQuant>| {
            let mut t = Tape::new();
            let x = t.param(grid(1, 16, 32));
            let w = t.param(grid(2, 16, 32));
            let y = t.linear(x, w, q).unwrap();
            let s = t.scale(y, 6.0).unwrap();
            let l = t.sum(s).unwrap();
            let g = t.backward(l).unwrap();
            (t.value(l).clone(), g.tensor(x), g.tensor(w))
        };
        let plain = run(None);
        let fwd_only = run(Some(&GemmQuant {
            forward: cfg.clone(),
            backward: None,
        }));
        assert_eq!(plain, fwd_only);
    }
}
