use std::rc::Rc;

use rand::Rng;

use super::{ParamBank, ParamId, Tensor};
use crate::error::{Error, Result};

/// Forward-pass mode; dropout and batch-norm behave differently per mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Symmetric adjacency in neighbor-list form, the operand of
/// [`Tape::neighbor_sum`]. `weights`, when present, aligns with `nbrs`.
#[derive(Debug, Clone)]
pub struct AdjList {
    pub offsets: Vec<u32>,
    pub nbrs: Vec<u32>,
    pub weights: Option<Vec<f64>>,
}

impl AdjList {
    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.nbrs[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    MulElem { a: usize, b: usize },
    MulRows { a: usize, v: usize },
    ScaleBy { s: usize, a: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Softplus { a: usize },
    SoftmaxRows { a: usize },
    Outer { p: usize, x: usize },
    RowwiseMax { a: usize, argmax: Vec<usize> },
    Sum { a: usize },
    Reshape { a: usize },
    ConcatCols { a: usize, b: usize },
    ConcatVec { a: usize, b: usize },
    NeighborSum { adj: Rc<AdjList>, b: usize },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ColAffine { x: usize, scale: Vec<f64> },
    Conv2d { x: usize, k: usize },
    Conv1d { x: usize, k: usize },
    CrossEntropy { logits: usize, probs: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    param: Option<ParamId>,
    op: Op,
}

/// Batch statistics computed by a train-mode batch-norm, handed back to the
/// layer so it can fold them into its running estimates.
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub rows: usize,
}

/// Records a forward computation; replaying it in reverse populates
/// gradients for every tensor that requires them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by a forward operation"
        );
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad: false,
            param: None,
            op,
        });
        TensorId(id)
    }

    /// Records a copy of `t` as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        let id = self.push(t.shape.clone(), t.data.clone(), Op::Leaf);
        self.nodes[id.0].requires_grad = t.requires_grad;
        id
    }

    /// Records a bank parameter as a leaf; its gradient is routed back to the
    /// bank by [`Tape::accumulate_into`].
    pub fn param(&mut self, bank: &ParamBank, pid: ParamId) -> TensorId {
        let id = self.leaf(bank.get(pid));
        self.nodes[id.0].param = Some(pid);
        id
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        self.push(shape, data, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, value: f64) -> TensorId {
        self.constant(vec![1], vec![value])
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[id.0].shape[..] {
            [n, d] => Ok((n, d)),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[id.0].shape.clone(),
                rhs: vec![],
            }),
        }
    }

    // ---- arithmetic ----------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, k) = self.dims2(a, "matmul")?;
        let (k2, m) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, n, k, m);
        Ok(self.push(vec![n, m], data, Op::Matmul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (n, m) = self.dims2(a, "transpose")?;
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        Ok(self.push(vec![m, n], out, Op::Transpose { a: a.0 }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn mul_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: "mul_elem",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, Op::MulElem { a: a.0, b: b.0 }))
    }

    /// Scales row `i` of `a` by `v[i]`, i.e. `diag(v) · a`.
    pub fn mul_rows(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (n, d) = self.dims2(a, "mul_rows")?;
        if self.nodes[v.0].shape != [n] {
            return Err(Error::ShapeMismatch {
                op: "mul_rows",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[v.0].shape.clone(),
            });
        }
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..n {
            let s = self.nodes[v.0].data[i];
            for x in &mut data[i * d..(i + 1) * d] {
                *x *= s;
            }
        }
        Ok(self.push(vec![n, d], data, Op::MulRows { a: a.0, v: v.0 }))
    }

    /// Multiplies every entry of `a` by the scalar tensor `s`.
    pub fn scale_by(&mut self, s: TensorId, a: TensorId) -> Result<TensorId> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(Error::NonScalar {
                op: "scale_by",
                shape: self.nodes[s.0].shape.clone(),
            });
        }
        let sv = self.nodes[s.0].data[0];
        let data = self.nodes[a.0].data.iter().map(|x| x * sv).collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, Op::ScaleBy { s: s.0, a: a.0 }))
    }

    // ---- nonlinearities ------------------------------------------------

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Relu { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|&x| sigmoid(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Sigmoid { a: a.0 })
    }

    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|&x| softplus(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Softplus { a: a.0 })
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (n, d) = self.dims2(a, "softmax_rows")?;
        let mut data = self.nodes[a.0].data.clone();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        Ok(self.push(vec![n, d], data, Op::SoftmaxRows { a: a.0 }))
    }

    // ---- structure -----------------------------------------------------

    /// Outer product of two vectors: `out[k][j] = p[k] * x[j]`.
    pub fn outer(&mut self, p: TensorId, x: TensorId) -> Result<TensorId> {
        let (m, d) = match (&self.nodes[p.0].shape[..], &self.nodes[x.0].shape[..]) {
            (&[m], &[d]) => (m, d),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "outer",
                    lhs: self.nodes[p.0].shape.clone(),
                    rhs: self.nodes[x.0].shape.clone(),
                })
            }
        };
        let mut data = vec![0.0; m * d];
        for k in 0..m {
            let pk = self.nodes[p.0].data[k];
            for j in 0..d {
                data[k * d + j] = pk * self.nodes[x.0].data[j];
            }
        }
        Ok(self.push(vec![m, d], data, Op::Outer { p: p.0, x: x.0 }))
    }

    /// Column-wise maximum over rows. Backward routes gradient to the
    /// lowest-index argmax row per column.
    pub fn rowwise_max(&mut self, a: TensorId) -> Result<TensorId> {
        let (n, d) = self.dims2(a, "rowwise_max")?;
        if n == 0 {
            return Err(Error::EmptyInput { op: "rowwise_max" });
        }
        let src = &self.nodes[a.0].data;
        let mut out = src[..d].to_vec();
        let mut argmax = vec![0usize; d];
        for i in 1..n {
            for j in 0..d {
                if src[i * d + j] > out[j] {
                    out[j] = src[i * d + j];
                    argmax[j] = i;
                }
            }
        }
        Ok(self.push(vec![d], out, Op::RowwiseMax { a: a.0, argmax }))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.nodes[a.0].data.iter().sum();
        self.push(vec![1], vec![total], Op::Sum { a: a.0 })
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if shape.iter().product::<usize>() != self.nodes[a.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        Ok(self.push(shape, data, Op::Reshape { a: a.0 }))
    }

    /// `[n×p] ++ [n×q] -> [n×(p+q)]`.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, p) = self.dims2(a, "concat_cols")?;
        let (n2, q) = self.dims2(b, "concat_cols")?;
        if n != n2 {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut data = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            data.extend_from_slice(&self.nodes[a.0].data[i * p..(i + 1) * p]);
            data.extend_from_slice(&self.nodes[b.0].data[i * q..(i + 1) * q]);
        }
        Ok(self.push(vec![n, p + q], data, Op::ConcatCols { a: a.0, b: b.0 }))
    }

    pub fn concat_vec(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        match (&self.nodes[a.0].shape[..], &self.nodes[b.0].shape[..]) {
            (&[_], &[_]) => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "concat_vec",
                    lhs: self.nodes[a.0].shape.clone(),
                    rhs: self.nodes[b.0].shape.clone(),
                })
            }
        }
        let mut data = self.nodes[a.0].data.clone();
        data.extend_from_slice(&self.nodes[b.0].data);
        let len = data.len();
        Ok(self.push(vec![len], data, Op::ConcatVec { a: a.0, b: b.0 }))
    }

    /// `out[i] = sum_{j in N(i)} w_ij * b[j]` — multiplication by a symmetric
    /// adjacency without materializing it densely.
    pub fn neighbor_sum(&mut self, adj: &Rc<AdjList>, b: TensorId) -> Result<TensorId> {
        let (n, d) = self.dims2(b, "neighbor_sum")?;
        if adj.num_nodes() != n {
            return Err(Error::ShapeMismatch {
                op: "neighbor_sum",
                lhs: vec![adj.num_nodes()],
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data = neighbor_sum_raw(adj, &self.nodes[b.0].data, n, d);
        Ok(self.push(
            vec![n, d],
            data,
            Op::NeighborSum {
                adj: Rc::clone(adj),
                b: b.0,
            },
        ))
    }

    // ---- normalization, dropout, loss -----------------------------------

    /// Train-mode batch norm over the rows of `x` (epsilon 1e-5). Returns the
    /// output together with the batch statistics for running-state updates.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<(TensorId, BatchStats)> {
        let (n, d) = self.dims2(x, "batch_norm")?;
        if n == 0 {
            return Err(Error::EmptyInput { op: "batch_norm" });
        }
        if self.nodes[gamma.0].shape != [d] || self.nodes[beta.0].shape != [d] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let src = &self.nodes[x.0].data;
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += src[i * d + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for i in 0..n {
            for j in 0..d {
                let c = src[i * d + j] - mean[j];
                var[j] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        for i in 0..n {
            for j in 0..d {
                let h = (src[i * d + j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let id = self.push(
            vec![n, d],
            out,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        );
        Ok((id, BatchStats { mean, var, rows: n }))
    }

    /// Per-column affine `x[:,j]*scale[j] + shift[j]` with constant
    /// coefficients — the eval-mode form of batch norm.
    pub fn col_affine(&mut self, x: TensorId, scale: &[f64], shift: &[f64]) -> Result<TensorId> {
        let (n, d) = self.dims2(x, "col_affine")?;
        if scale.len() != d || shift.len() != d {
            return Err(Error::ShapeMismatch {
                op: "col_affine",
                lhs: vec![n, d],
                rhs: vec![scale.len()],
            });
        }
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = src[i * d + j] * scale[j] + shift[j];
            }
        }
        Ok(self.push(
            vec![n, d],
            out,
            Op::ColAffine {
                x: x.0,
                scale: scale.to_vec(),
            },
        ))
    }

    /// Inverted dropout on individual entries; identity in eval mode.
    pub fn dropout(
        &mut self,
        a: TensorId,
        p: f64,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0,1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return self.reshape(a, self.nodes[a.0].shape.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.nodes[a.0].data.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let m = self.constant(shape, mask);
        self.mul_elem(a, m)
    }

    /// Inverted dropout on whole rows of an `[n×d]` matrix.
    pub fn row_dropout(
        &mut self,
        a: TensorId,
        p: f64,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0,1)")));
        }
        let (n, d) = self.dims2(a, "row_dropout")?;
        if mode == Mode::Eval || p == 0.0 {
            return self.reshape(a, vec![n, d]);
        }
        let keep = 1.0 / (1.0 - p);
        let mut mask = vec![0.0; n * d];
        for i in 0..n {
            let v = if rng.gen::<f64>() < p { 0.0 } else { keep };
            mask[i * d..(i + 1) * d].iter_mut().for_each(|x| *x = v);
        }
        let m = self.constant(vec![n, d], mask);
        self.mul_elem(a, m)
    }

    /// `-log softmax(logits)[label]` via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: TensorId, label: usize) -> Result<TensorId> {
        let c = match self.nodes[logits.0].shape[..] {
            [c] => c,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: self.nodes[logits.0].shape.clone(),
                    rhs: vec![],
                })
            }
        };
        if label >= c {
            return Err(Error::invalid(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let z = &self.nodes[logits.0].data;
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = z.iter().map(|&v| (v - max).exp()).sum();
        let loss = max + sum_exp.ln() - z[label];
        let mut probs: Vec<f64> = z.iter().map(|&v| (v - max).exp() / sum_exp).collect();
        probs[label] -= 1.0; // store softmax - onehot directly
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                probs,
            },
        ))
    }

    pub fn conv2d(&mut self, x: TensorId, k: TensorId) -> Result<TensorId> {
        let (h, w, cin) = match self.nodes[x.0].shape[..] {
            [h, w, c] => (h, w, c),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: self.nodes[x.0].shape.clone(),
                    rhs: self.nodes[k.0].shape.clone(),
                })
            }
        };
        let cout = match self.nodes[k.0].shape[..] {
            [3, 3, kc, co] if kc == cin => co,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: self.nodes[x.0].shape.clone(),
                    rhs: self.nodes[k.0].shape.clone(),
                })
            }
        };
        let data = conv2d_raw(
            &self.nodes[x.0].data,
            &self.nodes[k.0].data,
            h,
            w,
            cin,
            cout,
        );
        Ok(self.push(vec![h, w, cout], data, Op::Conv2d { x: x.0, k: k.0 }))
    }

    pub fn conv1d(&mut self, x: TensorId, k: TensorId) -> Result<TensorId> {
        let (m, cin) = self.dims2(x, "conv1d")?;
        let cout = match self.nodes[k.0].shape[..] {
            [3, kc, co] if kc == cin => co,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv1d",
                    lhs: self.nodes[x.0].shape.clone(),
                    rhs: self.nodes[k.0].shape.clone(),
                })
            }
        };
        let data = conv1d_raw(
            &self.nodes[x.0].data,
            &self.nodes[k.0].data,
            m,
            cin,
            cout,
        );
        Ok(self.push(vec![m, cout], data, Op::Conv1d { x: x.0, k: k.0 }))
    }

    // ---- backward --------------------------------------------------------

    /// Propagates `d loss / d node` to every node on the tape. Repeated calls
    /// accumulate into existing gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalar {
                op: "backward",
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|node| vec![0.0; node.data.len()])
            .collect();
        grads[loss.0][0] = 1.0;

        for i in (0..n).rev() {
            if grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            // Split off the outgoing gradient so inputs can be written freely.
            let g = std::mem::take(&mut grads[i]);
            self.backprop_node(i, &g, &mut grads);
            grads[i] = g;
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            match node.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    /// Adds the gradients of bound parameter leaves into the bank.
    pub fn accumulate_into(&self, bank: &mut ParamBank) {
        for node in &self.nodes {
            if let (Some(pid), Some(g)) = (node.param, node.grad.as_deref()) {
                bank.get_mut(pid).accumulate_grad(g);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (n, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let m = self.nodes[*b].shape[1];
                // dA = G · Bᵀ
                let bd = &self.nodes[*b].data;
                let da = &mut grads[*a];
                for r in 0..n {
                    for c in 0..m {
                        let gv = g[r * m + c];
                        if gv != 0.0 {
                            for p in 0..k {
                                da[r * k + p] += gv * bd[p * m + c];
                            }
                        }
                    }
                }
                // dB = Aᵀ · G
                let ad = &self.nodes[*a].data;
                let db = &mut grads[*b];
                for r in 0..n {
                    for p in 0..k {
                        let av = ad[r * k + p];
                        if av != 0.0 {
                            for c in 0..m {
                                db[p * m + c] += av * g[r * m + c];
                            }
                        }
                    }
                }
            }
            Op::Transpose { a } => {
                let (n, m) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let da = &mut grads[*a];
                for i2 in 0..n {
                    for j in 0..m {
                        da[i2 * m + j] += g[j * n + i2];
                    }
                }
            }
            Op::Add { a, b } => {
                grads[*a].iter_mut().zip(g).for_each(|(x, y)| *x += y);
                grads[*b].iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::MulElem { a, b } => {
                let bd = self.nodes[*b].data.clone();
                grads[*a]
                    .iter_mut()
                    .zip(g.iter().zip(&bd))
                    .for_each(|(x, (gv, bv))| *x += gv * bv);
                let ad = &self.nodes[*a].data;
                grads[*b]
                    .iter_mut()
                    .zip(g.iter().zip(ad))
                    .for_each(|(x, (gv, av))| *x += gv * av);
            }
            Op::MulRows { a, v } => {
                let (n, d) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let vd = &self.nodes[*v].data;
                let ad = &self.nodes[*a].data;
                for r in 0..n {
                    let mut dv = 0.0;
                    for j in 0..d {
                        grads[*a][r * d + j] += g[r * d + j] * vd[r];
                        dv += g[r * d + j] * ad[r * d + j];
                    }
                    grads[*v][r] += dv;
                }
            }
            Op::ScaleBy { s, a } => {
                let sv = self.nodes[*s].data[0];
                let ad = &self.nodes[*a].data;
                let mut ds = 0.0;
                for (j, gv) in g.iter().enumerate() {
                    grads[*a][j] += gv * sv;
                    ds += gv * ad[j];
                }
                grads[*s][0] += ds;
            }
            Op::Relu { a } => {
                let ad = &self.nodes[*a].data;
                grads[*a]
                    .iter_mut()
                    .zip(g.iter().zip(ad))
                    .for_each(|(x, (gv, &av))| {
                        if av > 0.0 {
                            *x += gv;
                        }
                    });
            }
            Op::Sigmoid { a } => {
                let yd = &self.nodes[i].data;
                grads[*a]
                    .iter_mut()
                    .zip(g.iter().zip(yd))
                    .for_each(|(x, (gv, &y))| *x += gv * y * (1.0 - y));
            }
            Op::Softplus { a } => {
                let ad = &self.nodes[*a].data;
                grads[*a]
                    .iter_mut()
                    .zip(g.iter().zip(ad))
                    .for_each(|(x, (gv, &av))| *x += gv * sigmoid(av));
            }
            Op::SoftmaxRows { a } => {
                let (n, d) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let y = &self.nodes[i].data;
                for r in 0..n {
                    let row = &y[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let dot: f64 = row.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..d {
                        grads[*a][r * d + j] += row[j] * (grow[j] - dot);
                    }
                }
            }
            Op::Outer { p, x } => {
                let m = self.nodes[*p].shape[0];
                let d = self.nodes[*x].shape[0];
                let pd = &self.nodes[*p].data;
                let xd = &self.nodes[*x].data;
                for k in 0..m {
                    let mut dp = 0.0;
                    for j in 0..d {
                        dp += g[k * d + j] * xd[j];
                        grads[*x][j] += g[k * d + j] * pd[k];
                    }
                    grads[*p][k] += dp;
                }
            }
            Op::RowwiseMax { a, argmax } => {
                let d = self.nodes[i].shape[0];
                for j in 0..d {
                    grads[*a][argmax[j] * d + j] += g[j];
                }
            }
            Op::Sum { a } => {
                let gv = g[0];
                grads[*a].iter_mut().for_each(|x| *x += gv);
            }
            Op::Reshape { a } => {
                grads[*a].iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::ConcatCols { a, b } => {
                let (n, p) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let q = self.nodes[*b].shape[1];
                for r in 0..n {
                    for j in 0..p {
                        grads[*a][r * p + j] += g[r * (p + q) + j];
                    }
                    for j in 0..q {
                        grads[*b][r * q + j] += g[r * (p + q) + p + j];
                    }
                }
            }
            Op::ConcatVec { a, b } => {
                let p = self.nodes[*a].shape[0];
                grads[*a].iter_mut().zip(&g[..p]).for_each(|(x, y)| *x += y);
                grads[*b].iter_mut().zip(&g[p..]).for_each(|(x, y)| *x += y);
            }
            Op::NeighborSum { adj, b } => {
                let (n, d) = (self.nodes[*b].shape[0], self.nodes[*b].shape[1]);
                // A is symmetric, so dB = A · G with the same weights.
                let db = neighbor_sum_raw(adj, g, n, d);
                grads[*b].iter_mut().zip(&db).for_each(|(x, y)| *x += y);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                let gam = &self.nodes[*gamma].data;
                let nf = n as f64;
                for j in 0..d {
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    let mut dgamma = 0.0;
                    let mut dbeta = 0.0;
                    for r in 0..n {
                        let gv = g[r * d + j];
                        let h = xhat[r * d + j];
                        dgamma += gv * h;
                        dbeta += gv;
                        let dxh = gv * gam[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * h;
                    }
                    grads[*gamma][j] += dgamma;
                    grads[*beta][j] += dbeta;
                    let coeff = inv_std[j] / nf;
                    for r in 0..n {
                        let dxh = g[r * d + j] * gam[j];
                        grads[*x][r * d + j] +=
                            coeff * (nf * dxh - sum_dxhat - xhat[r * d + j] * sum_dxhat_xhat);
                    }
                }
            }
            Op::ColAffine { x, scale } => {
                let (n, d) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                for r in 0..n {
                    for j in 0..d {
                        grads[*x][r * d + j] += g[r * d + j] * scale[j];
                    }
                }
            }
            Op::Conv2d { x, k } => {
                let (h, w, cin) = (
                    self.nodes[*x].shape[0],
                    self.nodes[*x].shape[1],
                    self.nodes[*x].shape[2],
                );
                let cout = self.nodes[*k].shape[3];
                let xd = &self.nodes[*x].data;
                let kd = &self.nodes[*k].data;
                for oy in 0..h {
                    for ox in 0..w {
                        for dy in 0..3usize {
                            let iy = oy as isize + dy as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for dx in 0..3usize {
                                let ix = ox as isize + dx as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xoff = (iy as usize * w + ix as usize) * cin;
                                let goff = (oy * w + ox) * cout;
                                let koff = (dy * 3 + dx) * cin * cout;
                                for ci in 0..cin {
                                    let xv = xd[xoff + ci];
                                    let mut dxv = 0.0;
                                    for co in 0..cout {
                                        let gv = g[goff + co];
                                        dxv += gv * kd[koff + ci * cout + co];
                                        grads[*k][koff + ci * cout + co] += gv * xv;
                                    }
                                    grads[*x][xoff + ci] += dxv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Conv1d { x, k } => {
                let (m, cin) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                let cout = self.nodes[*k].shape[2];
                let xd = &self.nodes[*x].data;
                let kd = &self.nodes[*k].data;
                for o in 0..m {
                    for dt in 0..3usize {
                        let it = o as isize + dt as isize - 1;
                        if it < 0 || it >= m as isize {
                            continue;
                        }
                        let xoff = it as usize * cin;
                        let goff = o * cout;
                        let koff = dt * cin * cout;
                        for ci in 0..cin {
                            let xv = xd[xoff + ci];
                            let mut dxv = 0.0;
                            for co in 0..cout {
                                let gv = g[goff + co];
                                dxv += gv * kd[koff + ci * cout + co];
                                grads[*k][koff + ci * cout + co] += gv * xv;
                            }
                            grads[*x][xoff + ci] += dxv;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, probs } => {
                let gv = g[0];
                grads[*logits]
                    .iter_mut()
                    .zip(probs)
                    .for_each(|(x, p)| *x += gv * p);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                let brow = &b[p * m..(p + 1) * m];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
    c
}

fn neighbor_sum_raw(adj: &AdjList, b: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row = &mut out[i * d..(i + 1) * d];
        let (lo, hi) = (adj.offsets[i] as usize, adj.offsets[i + 1] as usize);
        for e in lo..hi {
            let j = adj.nbrs[e] as usize;
            let w = adj.weights.as_ref().map_or(1.0, |ws| ws[e]);
            let src = &b[j * d..(j + 1) * d];
            for (o, s) in row.iter_mut().zip(src) {
                *o += w * s;
            }
        }
    }
    out
}

fn conv2d_raw(x: &[f64], k: &[f64], h: usize, w: usize, cin: usize, cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * cout];
    for oy in 0..h {
        for ox in 0..w {
            let obase = (oy * w + ox) * cout;
            for dy in 0..3usize {
                let iy = oy as isize + dy as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dx in 0..3usize {
                    let ix = ox as isize + dx as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xoff = (iy as usize * w + ix as usize) * cin;
                    let koff = (dy * 3 + dx) * cin * cout;
                    for ci in 0..cin {
                        let xv = x[xoff + ci];
                        if xv != 0.0 {
                            let krow = &k[koff + ci * cout..koff + (ci + 1) * cout];
                            let orow = &mut out[obase..obase + cout];
                            for (o, kv) in orow.iter_mut().zip(krow) {
                                *o += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv1d_raw(x: &[f64], k: &[f64], m: usize, cin: usize, cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * cout];
    for o in 0..m {
        for dt in 0..3usize {
            let it = o as isize + dt as isize - 1;
            if it < 0 || it >= m as isize {
                continue;
            }
            let xoff = it as usize * cin;
            let koff = dt * cin * cout;
            for ci in 0..cin {
                let xv = x[xoff + ci];
                if xv != 0.0 {
                    for co in 0..cout {
                        out[o * cout + co] += xv * k[koff + ci * cout + co];
                    }
                }
            }
        }
    }
    out
}
