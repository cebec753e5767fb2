//! Reverse-mode differentiation over the small operator set the encoder,
//! projection head, MLP heads and the contrastive loss need.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and whatever the backward pass needs. [`Graph::backward`] walks the tape
//! in reverse once.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Param(usize),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<F>,
        inv_std: Vec<F>,
    },
    Relu(Var),
    Add(Var, Var),
    MeanTime(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    InfoNce {
        z: Var,
        u: Vec<F>,
        norms: Vec<F>,
        /// d loss / d similarity-logit, row-major `[M x M]`.
        dlogits: Vec<F>,
        tau: F,
    },
    Mse {
        pred: Var,
        target: Vec<F>,
    },
    BceLogits {
        logits: Var,
        labels: Vec<F>,
    },
    Square(Var),
    Sum(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Batch statistics produced by a training-mode normalization.
#[derive(Debug, Clone)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every node that influences it.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }
}

fn conv_out_len(t: usize, k: usize, stride: usize, pad: usize) -> usize {
    (t + 2 * pad - k) / stride + 1
}

/// Column matrix `[c_in*k x (b*t_out)]` for a batched 1-D convolution.
fn im2col<F: Scalar>(
    x: &[F],
    (b, c_in, t): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
) -> Vec<F> {
    let cols = b * t_out;
    let mut col = vec![F::zero(); c_in * k * cols];
    for ci in 0..c_in {
        for kk in 0..k {
            let row = &mut col[(ci * k + kk) * cols..(ci * k + kk + 1) * cols];
            for bi in 0..b {
                let src = &x[(bi * c_in + ci) * t..(bi * c_in + ci + 1) * t];
                let dst = &mut row[bi * t_out..(bi + 1) * t_out];
                for (o, d) in dst.iter_mut().enumerate() {
                    let pos = (o * stride + kk) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < t {
                        *d = src[pos as usize];
                    }
                }
            }
        }
    }
    col
}

fn col2im<F: Scalar>(
    dcol: &[F],
    dx: &mut [F],
    (b, c_in, t): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
) {
    let cols = b * t_out;
    for ci in 0..c_in {
        for kk in 0..k {
            let row = &dcol[(ci * k + kk) * cols..(ci * k + kk + 1) * cols];
            for bi in 0..b {
                let dst = &mut dx[(bi * c_in + ci) * t..(bi * c_in + ci + 1) * t];
                for (o, &g) in row[bi * t_out..(bi + 1) * t_out].iter().enumerate() {
                    let pos = (o * stride + kk) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < t {
                        dst[pos as usize] = dst[pos as usize] + g;
                    }
                }
            }
        }
    }
}

fn dims3(t: &Tensor<impl Scalar>) -> (usize, usize, usize) {
    assert_eq!(t.shape.len(), 3, "expected [batch, channels, time]");
    (t.shape[0], t.shape[1], t.shape[2])
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A trainable parameter; `index` identifies it in [`Graph::param_grads`].
    pub fn param(&mut self, index: usize, value: Tensor<F>) -> Var {
        self.push(value, Op::Param(index))
    }

    /// 1-D convolution: `x [B, C_in, T]`, `w [C_out, C_in, K]`, optional `b [C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (bn, c_in, t) = dims3(self.value(x));
        let wt = self.value(w);
        assert_eq!(wt.shape.len(), 3);
        let (c_out, wc_in, k) = (wt.shape[0], wt.shape[1], wt.shape[2]);
        assert_eq!(c_in, wc_in, "conv input channels");
        assert!(t + 2 * pad >= k, "sequence shorter than kernel");
        let t_out = conv_out_len(t, k, stride, pad);
        let col = im2col(&self.value(x).data, (bn, c_in, t), k, stride, pad, t_out);
        let cols = bn * t_out;
        let mut y = vec![F::zero(); c_out * cols];
        F::gemm(c_out, c_in * k, cols, &wt.data, false, &col, false, F::zero(), &mut y);
        // [C_out, B*T_out] -> [B, C_out, T_out]
        let mut out = vec![F::zero(); bn * c_out * t_out];
        for co in 0..c_out {
            let bias = b.map_or(F::zero(), |bv| self.value(bv).data[co]);
            for bi in 0..bn {
                let src = &y[co * cols + bi * t_out..co * cols + (bi + 1) * t_out];
                let dst = &mut out[(bi * c_out + co) * t_out..(bi * c_out + co + 1) * t_out];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *s + bias;
                }
            }
        }
        self.push(
            Tensor::new(vec![bn, c_out, t_out], out),
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    /// Training-mode batch normalization over batch and time, per channel.
    /// Returns the (biased) batch statistics for running-average updates.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> (Var, BatchStats<F>) {
        let (bn, c, t) = dims3(self.value(x));
        let xv = &self.value(x).data;
        let count = F::of((bn * t) as f64);
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for bi in 0..bn {
                s += xv[(bi * c + ch) * t..(bi * c + ch + 1) * t]
                    .iter()
                    .map(|v| v.f64())
                    .sum::<f64>();
            }
            let m = s / (bn * t) as f64;
            let mut ss = 0.0f64;
            for bi in 0..bn {
                ss += xv[(bi * c + ch) * t..(bi * c + ch + 1) * t]
                    .iter()
                    .map(|v| (v.f64() - m).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = F::of(m);
            var[ch] = F::of(ss) / count;
        }
        let inv_std: Vec<F> = var.iter().map(|v| F::one() / (*v + eps).sqrt()).collect();
        let g = &self.value(gamma).data;
        let be = &self.value(beta).data;
        let mut xhat = vec![F::zero(); xv.len()];
        let mut out = vec![F::zero(); xv.len()];
        for bi in 0..bn {
            for ch in 0..c {
                let off = (bi * c + ch) * t;
                for i in off..off + t {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + be[ch];
                }
            }
        }
        let v = self.push(
            Tensor::new(vec![bn, c, t], out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        (v, BatchStats { mean, var })
    }

    /// Evaluation-mode normalization with fixed statistics.
    pub fn channel_affine(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[F],
        var: &[F],
        eps: F,
    ) -> Var {
        let (bn, c, t) = dims3(self.value(x));
        let inv_std: Vec<F> = var.iter().map(|v| F::one() / (*v + eps).sqrt()).collect();
        let xv = &self.value(x).data;
        let g = &self.value(gamma).data;
        let be = &self.value(beta).data;
        let mut out = vec![F::zero(); xv.len()];
        for bi in 0..bn {
            for ch in 0..c {
                let off = (bi * c + ch) * t;
                for i in off..off + t {
                    out[i] = g[ch] * (xv[i] - mean[ch]) * inv_std[ch] + be[ch];
                }
            }
        }
        self.push(
            Tensor::new(vec![bn, c, t], out),
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape.clone(),
            xv.data.iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect(),
        );
        self.push(out, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "add shapes");
        let out = Tensor::new(
            av.shape.clone(),
            av.data.iter().zip(&bv.data).map(|(x, y)| *x + *y).collect(),
        );
        self.push(out, Op::Add(a, b))
    }

    /// `[B, C, T] -> [B, C]` average over time.
    pub fn mean_time(&mut self, x: Var) -> Var {
        let (bn, c, t) = dims3(self.value(x));
        let xv = &self.value(x).data;
        let inv = F::one() / F::of(t as f64);
        let out: Vec<F> = (0..bn * c)
            .map(|r| xv[r * t..(r + 1) * t].iter().copied().sum::<F>() * inv)
            .collect();
        self.push(Tensor::new(vec![bn, c], out), Op::MeanTime(x))
    }

    /// `x [B, in] · wᵀ + b` with `w [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.shape.len(), 2);
        let (bn, d_in) = (xv.shape[0], xv.shape[1]);
        let d_out = wv.shape[0];
        assert_eq!(wv.shape, vec![d_out, d_in], "linear weight shape");
        let mut out = vec![F::zero(); bn * d_out];
        for row in out.chunks_exact_mut(d_out) {
            row.copy_from_slice(&bv.data);
        }
        F::gemm(bn, d_in, d_out, &xv.data, false, &wv.data, true, F::one(), &mut out);
        self.push(Tensor::new(vec![bn, d_out], out), Op::Linear { x, w, b })
    }

    /// Mean InfoNCE over all rows of `z [M x d]`: row `i` is pulled toward
    /// row `partner[i]` against every other row `k != i`, using cosine
    /// similarity divided by `tau`.
    pub fn info_nce(&mut self, z: Var, partner: &[usize], tau: F) -> Result<Var> {
        let zv = self.value(z);
        if zv.shape.len() != 2 {
            return Err(Error::Shape(format!("projections must be 2-D, got {:?}", zv.shape)));
        }
        let (m, d) = (zv.shape[0], zv.shape[1]);
        if m < 2 || partner.len() != m {
            return Err(Error::Shape(format!("{m} rows with {} partners", partner.len())));
        }
        if tau <= F::zero() {
            return Err(Error::Config("temperature must be positive".into()));
        }
        for (i, &j) in partner.iter().enumerate() {
            if j >= m || j == i {
                return Err(Error::Shape(format!("row {i} has invalid partner {j}")));
            }
        }
        let mut u = zv.data.clone();
        let mut norms = vec![F::zero(); m];
        for i in 0..m {
            let row = &mut u[i * d..(i + 1) * d];
            let n = row.iter().map(|v| *v * *v).sum::<F>().sqrt();
            if !(n > F::zero()) || !n.is_finite() {
                return Err(Error::ZeroNorm(i));
            }
            norms[i] = n;
            row.iter_mut().for_each(|v| *v = *v / n);
        }
        let mut logits = vec![F::zero(); m * m];
        F::gemm(m, d, m, &u, false, &u, true, F::zero(), &mut logits);
        let inv_tau = F::one() / tau;
        logits.iter_mut().for_each(|v| *v = *v * inv_tau);
        let mut dlogits = vec![F::zero(); m * m];
        let mut total = 0.0f64;
        let inv_m = F::one() / F::of(m as f64);
        for i in 0..m {
            let row = &logits[i * m..(i + 1) * m];
            let max = row
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != i)
                .map(|(_, v)| *v)
                .fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for (k, &s) in row.iter().enumerate() {
                if k != i {
                    denom = denom + (s - max).exp();
                }
            }
            let lse = max + denom.ln();
            total += (lse - row[partner[i]]).f64();
            let drow = &mut dlogits[i * m..(i + 1) * m];
            for (k, &s) in row.iter().enumerate() {
                if k != i {
                    drow[k] = (s - lse).exp() * inv_m;
                }
            }
            drow[partner[i]] = drow[partner[i]] - inv_m;
        }
        let loss = F::of(total / m as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::InfoNce {
                z,
                u,
                norms,
                dlogits,
                tau,
            },
        ))
    }

    /// Mean squared error of `pred [B, 1]` (or `[B]`) against `target`.
    pub fn mse(&mut self, pred: Var, target: &[F]) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.len(), target.len(), "mse length");
        let n = F::of(target.len() as f64);
        let loss = pv
            .data
            .iter()
            .zip(target)
            .map(|(p, t)| (*p - *t) * (*p - *t))
            .sum::<F>()
            / n;
        self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
        )
    }

    /// Mean binary cross-entropy on logits, labels in {0, 1}.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[F]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), labels.len(), "bce length");
        let n = F::of(labels.len() as f64);
        let loss = lv
            .data
            .iter()
            .zip(labels)
            .map(|(&x, &y)| x.max(F::zero()) - x * y + (F::one() + (-x.abs()).exp()).ln())
            .sum::<F>()
            / n;
        self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                labels: labels.to_vec(),
            },
        )
    }

    pub fn square(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape.clone(), xv.data.iter().map(|v| *v * *v).collect());
        self.push(out, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum::<F>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Sign pattern of every rectifier input, in tape order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).data.iter().map(|v| *v > F::zero()))
            .collect()
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(&self.value(loss).shape, F::one()));

        fn acc<F: Scalar>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Conv1d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (bn, c_in, t) = dims3(xv);
                    let (c_out, k) = (wv.shape[0], wv.shape[2]);
                    let t_out = node.value.shape[2];
                    let cols = bn * t_out;
                    // dY as [C_out, B*T_out]
                    let mut dy = vec![F::zero(); c_out * cols];
                    for bi in 0..bn {
                        for co in 0..c_out {
                            dy[co * cols + bi * t_out..co * cols + (bi + 1) * t_out].copy_from_slice(
                                &gout.data[(bi * c_out + co) * t_out..(bi * c_out + co + 1) * t_out],
                            );
                        }
                    }
                    if let Some(bv) = b {
                        let db: Vec<F> = (0..c_out)
                            .map(|co| dy[co * cols..(co + 1) * cols].iter().copied().sum())
                            .collect();
                        acc(&mut grads, *bv, Tensor::new(vec![c_out], db));
                    }
                    let col = im2col(&xv.data, (bn, c_in, t), k, *stride, *pad, t_out);
                    let mut dw = vec![F::zero(); c_out * c_in * k];
                    F::gemm(c_out, cols, c_in * k, &dy, false, &col, true, F::zero(), &mut dw);
                    acc(&mut grads, *w, Tensor::new(wv.shape.clone(), dw));
                    if self.needs_grad(*x) {
                        let mut dcol = col;
                        F::gemm(c_in * k, c_out, cols, &wv.data, true, &dy, false, F::zero(), &mut dcol);
                        let mut dx = vec![F::zero(); xv.len()];
                        col2im(&dcol, &mut dx, (bn, c_in, t), k, *stride, *pad, t_out);
                        acc(&mut grads, *x, Tensor::new(xv.shape.clone(), dx));
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (bn, c, t) = dims3(&node.value);
                    let g = &self.value(*gamma).data;
                    let count = F::of((bn * t) as f64);
                    let mut dgamma = vec![F::zero(); c];
                    let mut dbeta = vec![F::zero(); c];
                    for bi in 0..bn {
                        for ch in 0..c {
                            let off = (bi * c + ch) * t;
                            for i in off..off + t {
                                dgamma[ch] = dgamma[ch] + gout.data[i] * xhat[i];
                                dbeta[ch] = dbeta[ch] + gout.data[i];
                            }
                        }
                    }
                    let mut dx = vec![F::zero(); gout.len()];
                    for bi in 0..bn {
                        for ch in 0..c {
                            let off = (bi * c + ch) * t;
                            // dxhat = dy * gamma; sums reuse dgamma/dbeta.
                            let sum_dxhat = dbeta[ch] * g[ch];
                            let sum_dxhat_xhat = dgamma[ch] * g[ch];
                            for i in off..off + t {
                                let dxhat = gout.data[i] * g[ch];
                                dx[i] = inv_std[ch] / count
                                    * (count * dxhat - sum_dxhat - xhat[i] * sum_dxhat_xhat);
                            }
                        }
                    }
                    acc(&mut grads, *gamma, Tensor::new(vec![c], dgamma));
                    acc(&mut grads, *beta, Tensor::new(vec![c], dbeta));
                    acc(&mut grads, *x, Tensor::new(node.value.shape.clone(), dx));
                }
                Op::ChannelAffine {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let (bn, c, t) = dims3(&node.value);
                    let xv = &self.value(*x).data;
                    let g = &self.value(*gamma).data;
                    let mut dgamma = vec![F::zero(); c];
                    let mut dbeta = vec![F::zero(); c];
                    let mut dx = vec![F::zero(); gout.len()];
                    for bi in 0..bn {
                        for ch in 0..c {
                            let off = (bi * c + ch) * t;
                            for i in off..off + t {
                                let h = (xv[i] - mean[ch]) * inv_std[ch];
                                dgamma[ch] = dgamma[ch] + gout.data[i] * h;
                                dbeta[ch] = dbeta[ch] + gout.data[i];
                                dx[i] = gout.data[i] * g[ch] * inv_std[ch];
                            }
                        }
                    }
                    acc(&mut grads, *gamma, Tensor::new(vec![c], dgamma));
                    acc(&mut grads, *beta, Tensor::new(vec![c], dbeta));
                    acc(&mut grads, *x, Tensor::new(node.value.shape.clone(), dx));
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let dx = xv
                        .data
                        .iter()
                        .zip(&gout.data)
                        .map(|(v, g)| if *v > F::zero() { *g } else { F::zero() })
                        .collect();
                    acc(&mut grads, *x, Tensor::new(xv.shape.clone(), dx));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *b, gout.clone());
                }
                Op::MeanTime(x) => {
                    let xv = self.value(*x);
                    let (bn, c, t) = dims3(xv);
                    let inv = F::one() / F::of(t as f64);
                    let mut dx = vec![F::zero(); bn * c * t];
                    for r in 0..bn * c {
                        dx[r * t..(r + 1) * t].fill(gout.data[r] * inv);
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape.clone(), dx));
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (bn, d_in) = (xv.shape[0], xv.shape[1]);
                    let d_out = wv.shape[0];
                    let mut db = vec![F::zero(); d_out];
                    for row in gout.data.chunks_exact(d_out) {
                        for (a, g) in db.iter_mut().zip(row) {
                            *a = *a + *g;
                        }
                    }
                    let mut dw = vec![F::zero(); d_out * d_in];
                    F::gemm(d_out, bn, d_in, &gout.data, true, &xv.data, false, F::zero(), &mut dw);
                    acc(&mut grads, *b, Tensor::new(vec![d_out], db));
                    acc(&mut grads, *w, Tensor::new(wv.shape.clone(), dw));
                    if self.needs_grad(*x) {
                        let mut dx = vec![F::zero(); bn * d_in];
                        F::gemm(bn, d_out, d_in, &gout.data, false, &wv.data, false, F::zero(), &mut dx);
                        acc(&mut grads, *x, Tensor::new(xv.shape.clone(), dx));
                    }
                }
                Op::InfoNce {
                    z,
                    u,
                    norms,
                    dlogits,
                    tau,
                } => {
                    let zv = self.value(*z);
                    let (m, d) = (zv.shape[0], zv.shape[1]);
                    let scale = gout.data[0] / *tau;
                    // dU = (G + Gᵀ) U / tau
                    let mut sym = vec![F::zero(); m * m];
                    for i in 0..m {
                        for k in 0..m {
                            sym[i * m + k] = (dlogits[i * m + k] + dlogits[k * m + i]) * scale;
                        }
                    }
                    let mut du = vec![F::zero(); m * d];
                    F::gemm(m, m, d, &sym, false, u, false, F::zero(), &mut du);
                    let mut dz = vec![F::zero(); m * d];
                    for i in 0..m {
                        let ui = &u[i * d..(i + 1) * d];
                        let dui = &du[i * d..(i + 1) * d];
                        let proj = ui.iter().zip(dui).map(|(a, b)| *a * *b).sum::<F>();
                        for j in 0..d {
                            dz[i * d + j] = (dui[j] - ui[j] * proj) / norms[i];
                        }
                    }
                    acc(&mut grads, *z, Tensor::new(zv.shape.clone(), dz));
                }
                Op::Mse { pred, target } => {
                    let pv = self.value(*pred);
                    let k = F::of(2.0) * gout.data[0] / F::of(target.len() as f64);
                    let dp = pv.data.iter().zip(target).map(|(p, t)| (*p - *t) * k).collect();
                    acc(&mut grads, *pred, Tensor::new(pv.shape.clone(), dp));
                }
                Op::BceLogits { logits, labels } => {
                    let lv = self.value(*logits);
                    let k = gout.data[0] / F::of(labels.len() as f64);
                    let dl = lv
                        .data
                        .iter()
                        .zip(labels)
                        .map(|(&x, &y)| (F::one() / (F::one() + (-x).exp()) - y) * k)
                        .collect();
                    acc(&mut grads, *logits, Tensor::new(lv.shape.clone(), dl));
                }
                Op::Square(x) => {
                    let xv = self.value(*x);
                    let two = F::of(2.0);
                    let dx = xv.data.iter().zip(&gout.data).map(|(v, g)| two * *v * *g).collect();
                    acc(&mut grads, *x, Tensor::new(xv.shape.clone(), dx));
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    acc(&mut grads, *x, Tensor::filled(&xv.shape, gout.data[0]));
                }
            }
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    /// Inputs to the network need no gradient; skipping them saves a GEMM.
    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Gradients for parameters `0..n_params`, zero-filled (with a warning)
    /// for parameters the loss does not depend on.
    pub fn param_grads(&self, grads: &Gradients<F>, names: &[String]) -> Vec<Tensor<F>> {
        let mut out: Vec<Option<Tensor<F>>> = (0..names.len()).map(|_| None).collect();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(p) = node.op {
                if let Some(g) = &grads.grads[idx] {
                    match &mut out[p] {
                        Some(e) => e.add_assign(g),
                        slot => *slot = Some(g.clone()),
                    }
                }
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(p, g)| {
                g.unwrap_or_else(|| {
                    log::warn!("parameter {} is disconnected from the loss", names[p]);
                    let shape = self
                        .nodes
                        .iter()
                        .find_map(|n| match n.op {
                            Op::Param(q) if q == p => Some(n.value.shape.clone()),
                            _ => None,
                        })
                        .unwrap_or_default();
                    Tensor::zeros(&shape)
                })
            })
            .collect()
    }
}
