use rand::Rng;

use super::tensor::Tensor;
use super::{NnError, NnResult};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Whether dropout (and anything else that behaves differently during
/// training) is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Infer,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `row` (length c) added to every row of `mat` (r×c).
    AddRowBroadcast {
        mat: Var,
        row: Var,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    CausalConv1d {
        x: Var,
        kernels: Var,
        bias: Var,
    },
    /// `argmax[c*m + t]` holds the source column chosen for output (c, t).
    MaxPoolSame {
        x: Var,
        argmax: Vec<usize>,
    },
    DenseWeightNorm {
        x: Var,
        v: Var,
        g: Var,
        bias: Var,
    },
    Dense {
        x: Var,
        w: Var,
        bias: Var,
    },
    /// Mask entries are 0 or 1/(1-rate); forward is an elementwise product.
    Dropout {
        x: Var,
        mask: Tensor,
    },
    Flatten(Var),
    ConcatVec(Vec<Var>),
    ConcatCols(Vec<Var>),
    MseAgainst {
        pred: Var,
        truth: Tensor,
    },
    MeanScalars(Vec<Var>),
    SumAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode gradient tape.
///
/// Values are appended in evaluation order, so every op's inputs precede it
/// and a single reverse sweep visits each recorded op exactly once. A tape
/// belongs to one training step; create a fresh one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every tape value.
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a leaf value (input data or a parameter).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, name: &'static str) -> NnResult<Var> {
        value.ensure_finite(name)?;
        Ok(self.push(value, op))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> NnResult<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_checked(out, Op::Add(a, b), "add")
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> NnResult<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_checked(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> NnResult<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push_checked(out, Op::Scale(x, factor), "scale")
    }

    /// Adds a length-c vector to every row of an r×c matrix.
    pub fn add_row_broadcast(&mut self, mat: Var, row: Var) -> NnResult<Var> {
        let (tm, tr) = (self.value(mat), self.value(row));
        if tm.rank() != 2 || tr.rank() != 1 || tr.len() != tm.cols() {
            return Err(shape_err(
                "add_row_broadcast",
                format!("matrix {:?} with row {:?}", tm.shape(), tr.shape()),
            ));
        }
        let cols = tm.cols();
        let data = tm
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tr.data()[i % cols])
            .collect();
        let out = Tensor::new(tm.shape().to_vec(), data)?;
        self.push_checked(out, Op::AddRowBroadcast { mat, row }, "add_row_broadcast")
    }

    /// Standard 2-D matrix product (r×s)·(s×c) → r×c.
    pub fn matmul(&mut self, a: Var, b: Var) -> NnResult<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", format!("{:?} · {:?}", ta.shape(), tb.shape())));
        }
        let (r, s, c) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for k in 0..s {
                let aik = ta.at(i, k);
                if aik == 0.0 {
                    continue;
                }
                let brow = &tb.data()[k * c..(k + 1) * c];
                let drow = &mut data[i * c..(i + 1) * c];
                for (d, bv) in drow.iter_mut().zip(brow) {
                    *d += aik * bv;
                }
            }
        }
        let out = Tensor::matrix(r, c, data)?;
        self.push_checked(out, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> NnResult<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(shape_err("transpose", format!("expected rank 2, got {:?}", tx.shape())));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = tx.at(i, j);
            }
        }
        let out = Tensor::matrix(c, r, data)?;
        self.push_checked(out, Op::Transpose(x), "transpose")
    }

    pub fn relu(&mut self, x: Var) -> NnResult<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push_checked(out, Op::Relu(x), "relu")
    }

    pub fn tanh(&mut self, x: Var) -> NnResult<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v.tanh()).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push_checked(out, Op::Tanh(x), "tanh")
    }

    /// Row-wise softmax of an a×b matrix, max-subtracted for stability.
    /// Every output row sums to 1.
    pub fn softmax_rows(&mut self, x: Var) -> NnResult<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(shape_err("softmax_rows", format!("expected rank 2, got {:?}", tx.shape())));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = (v - max).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for v in &mut data[i * c..(i + 1) * c] {
                *v /= sum;
            }
        }
        let out = Tensor::matrix(r, c, data)?;
        self.push_checked(out, Op::SoftmaxRows(x), "softmax_rows")
    }

    /// Causal 1-D convolution with left zero-padding of ks−1 steps, preserving
    /// the temporal length: output (c, t) depends only on inputs at times ≤ t.
    ///
    /// Shapes: `x` C_in×m, `kernels` C_out×C_in×ks, `bias` C_out → C_out×m.
    pub fn causal_conv1d(&mut self, x: Var, kernels: Var, bias: Var) -> NnResult<Var> {
        let (tx, tk, tb) = (self.value(x), self.value(kernels), self.value(bias));
        if tx.rank() != 2 || tk.rank() != 3 || tb.rank() != 1 {
            return Err(shape_err(
                "causal_conv1d",
                format!("x {:?}, kernels {:?}, bias {:?}", tx.shape(), tk.shape(), tb.shape()),
            ));
        }
        let (c_in, m) = (tx.rows(), tx.cols());
        let (c_out, k_in, ks) = (tk.shape()[0], tk.shape()[1], tk.shape()[2]);
        if k_in != c_in || tb.len() != c_out || ks == 0 {
            return Err(shape_err(
                "causal_conv1d",
                format!("x {:?} does not match kernels {:?} / bias {:?}", tx.shape(), tk.shape(), tb.shape()),
            ));
        }
        let mut data = vec![0.0; c_out * m];
        for c in 0..c_out {
            let b = tb.data()[c];
            for t in 0..m {
                let mut acc = b;
                for i in 0..c_in {
                    let krow = &tk.data()[(c * c_in + i) * ks..(c * c_in + i + 1) * ks];
                    // tap ks-1 is aligned with the current time step
                    for (tap, kv) in krow.iter().enumerate() {
                        let src = t as isize + tap as isize - (ks as isize - 1);
                        if src >= 0 {
                            acc += kv * tx.at(i, src as usize);
                        }
                    }
                }
                data[c * m + t] = acc;
            }
        }
        let out = Tensor::matrix(c_out, m, data)?;
        self.push_checked(out, Op::CausalConv1d { x, kernels, bias }, "causal_conv1d")
    }

    /// Stride-1 causal window max over the last `pool` steps, length preserving:
    /// y(c, t) = max of x(c, t−pool+1 ..= t), window clipped at the series start.
    pub fn maxpool1d_same(&mut self, x: Var, pool: usize) -> NnResult<Var> {
        if pool == 0 {
            return Err(NnError::InvalidArgument {
                op: "maxpool1d_same",
                detail: "pool size must be >= 1".into(),
            });
        }
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(shape_err("maxpool1d_same", format!("expected rank 2, got {:?}", tx.shape())));
        }
        let (ch, m) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; ch * m];
        let mut argmax = vec![0usize; ch * m];
        for c in 0..ch {
            for t in 0..m {
                let lo = t.saturating_sub(pool - 1);
                let mut best = f64::NEG_INFINITY;
                let mut best_s = lo;
                for s in lo..=t {
                    let v = tx.at(c, s);
                    if v > best {
                        best = v;
                        best_s = s;
                    }
                }
                data[c * m + t] = best;
                argmax[c * m + t] = best_s;
            }
        }
        let out = Tensor::matrix(ch, m, data)?;
        self.push_checked(out, Op::MaxPoolSame { x, argmax }, "maxpool1d_same")
    }

    /// Dense layer with weight-normalized rows: w_j = (g_j/‖v_j‖)·v_j,
    /// y = w·x + bias. Gradients flow to v, g and bias.
    pub fn dense_weightnorm(&mut self, x: Var, v: Var, g: Var, bias: Var) -> NnResult<Var> {
        let (tx, tv, tg, tb) = (self.value(x), self.value(v), self.value(g), self.value(bias));
        if tx.rank() != 1 || tv.rank() != 2 || tv.cols() != tx.len() || tg.len() != tv.rows() || tb.len() != tv.rows() {
            return Err(shape_err(
                "dense_weightnorm",
                format!("x {:?}, v {:?}, g {:?}, bias {:?}", tx.shape(), tv.shape(), tg.shape(), tb.shape()),
            ));
        }
        let (d_out, d_in) = (tv.rows(), tv.cols());
        let mut data = vec![0.0; d_out];
        for (j, out_j) in data.iter_mut().enumerate() {
            let row = &tv.data()[j * d_in..(j + 1) * d_in];
            let norm = l2_norm(row);
            if norm == 0.0 {
                return Err(NnError::InvalidArgument {
                    op: "dense_weightnorm",
                    detail: format!("row {j} of v has zero norm"),
                });
            }
            let dot: f64 = row.iter().zip(tx.data()).map(|(a, b)| a * b).sum();
            *out_j = tg.data()[j] / norm * dot + tb.data()[j];
        }
        let out = Tensor::vector(data)?;
        self.push_checked(out, Op::DenseWeightNorm { x, v, g, bias }, "dense_weightnorm")
    }

    /// Plain dense layer y = w·x + bias.
    pub fn dense(&mut self, x: Var, w: Var, bias: Var) -> NnResult<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(bias));
        if tx.rank() != 1 || tw.rank() != 2 || tw.cols() != tx.len() || tb.len() != tw.rows() {
            return Err(shape_err(
                "dense",
                format!("x {:?}, w {:?}, bias {:?}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let (d_out, d_in) = (tw.rows(), tw.cols());
        let mut data = vec![0.0; d_out];
        for (j, out_j) in data.iter_mut().enumerate() {
            let row = &tw.data()[j * d_in..(j + 1) * d_in];
            let dot: f64 = row.iter().zip(tx.data()).map(|(a, b)| a * b).sum();
            *out_j = dot + tb.data()[j];
        }
        let out = Tensor::vector(data)?;
        self.push_checked(out, Op::Dense { x, w, bias }, "dense")
    }

    /// Inverted dropout: in train mode each element is zeroed with probability
    /// `rate` and survivors are scaled by 1/(1−rate); in infer mode (or at
    /// rate 0) the input passes through untouched.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, mode: DropoutMode, rng: &mut R) -> NnResult<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::InvalidArgument {
                op: "dropout",
                detail: format!("rate must be in [0, 1), got {rate}"),
            });
        }
        if mode == DropoutMode::Infer || rate == 0.0 {
            return Ok(x);
        }
        let tx = self.value(x);
        let keep_scale = 1.0 / (1.0 - rate);
        let mask_data: Vec<f64> = (0..tx.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        let mask = Tensor::new(tx.shape().to_vec(), mask_data)?;
        let data = tx.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push_checked(out, Op::Dropout { x, mask }, "dropout")
    }

    /// Reshapes to a 1-D vector in row-major order.
    pub fn flatten(&mut self, x: Var) -> NnResult<Var> {
        let tx = self.value(x);
        let out = Tensor::vector(tx.data().to_vec())?;
        self.push_checked(out, Op::Flatten(x), "flatten")
    }

    /// Concatenates 1-D vectors end to end.
    pub fn concat_vec(&mut self, parts: &[Var]) -> NnResult<Var> {
        if parts.is_empty() {
            return Err(NnError::InvalidArgument {
                op: "concat_vec",
                detail: "nothing to concatenate".into(),
            });
        }
        let mut data = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            if tp.rank() != 1 {
                return Err(shape_err("concat_vec", format!("expected rank 1, got {:?}", tp.shape())));
            }
            data.extend_from_slice(tp.data());
        }
        let out = Tensor::vector(data)?;
        self.push_checked(out, Op::ConcatVec(parts.to_vec()), "concat_vec")
    }

    /// Concatenates 2-D matrices with equal row counts along the column axis:
    /// a×b ++ a×c → a×(b+c).
    pub fn concat_cols(&mut self, parts: &[Var]) -> NnResult<Var> {
        if parts.is_empty() {
            return Err(NnError::InvalidArgument {
                op: "concat_cols",
                detail: "nothing to concatenate".into(),
            });
        }
        let rows = self.value(parts[0]).rows();
        let mut total_cols = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.rank() != 2 || tp.rows() != rows {
                return Err(shape_err(
                    "concat_cols",
                    format!("expected rank 2 with {rows} rows, got {:?}", tp.shape()),
                ));
            }
            total_cols += tp.cols();
        }
        let mut data = vec![0.0; rows * total_cols];
        let mut col_off = 0;
        for &p in parts {
            let tp = self.value(p);
            let c = tp.cols();
            for i in 0..rows {
                data[i * total_cols + col_off..i * total_cols + col_off + c]
                    .copy_from_slice(&tp.data()[i * c..(i + 1) * c]);
            }
            col_off += c;
        }
        let out = Tensor::matrix(rows, total_cols, data)?;
        self.push_checked(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Mean squared error between a recorded prediction and a constant target,
    /// averaged over all elements.
    pub fn mse_against(&mut self, pred: Var, truth: &Tensor) -> NnResult<Var> {
        let tp = self.value(pred);
        if tp.shape() != truth.shape() {
            return Err(shape_err(
                "mse_against",
                format!("pred {:?} vs truth {:?}", tp.shape(), truth.shape()),
            ));
        }
        let n = tp.len() as f64;
        let sum: f64 = tp
            .data()
            .iter()
            .zip(truth.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let out = Tensor::scalar(sum / n)?;
        self.push_checked(out, Op::MseAgainst { pred, truth: truth.clone() }, "mse_against")
    }

    /// Mean of scalar values, used to combine per-sample losses into a batch loss.
    pub fn mean_scalars(&mut self, items: &[Var]) -> NnResult<Var> {
        if items.is_empty() {
            return Err(NnError::InvalidArgument {
                op: "mean_scalars",
                detail: "empty input".into(),
            });
        }
        let mut sum = 0.0;
        for &it in items {
            sum += self.value(it).item()?;
        }
        let out = Tensor::scalar(sum / items.len() as f64)?;
        self.push_checked(out, Op::MeanScalars(items.to_vec()), "mean_scalars")
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> NnResult<Var> {
        let sum: f64 = self.value(x).data().iter().sum();
        let out = Tensor::scalar(sum)?;
        self.push_checked(out, Op::SumAll(x), "sum_all")
    }

    /// Runs the reverse sweep from a scalar loss, returning one gradient per
    /// recorded value. Each op is visited exactly once, in reverse order.
    pub fn backward(&self, loss: Var) -> NnResult<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        grads[loss.0].data_mut()[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            // Inputs always precede their op, so splitting at idx gives
            // exclusive access to upstream gradient slots.
            let (upstream, rest) = grads.split_at_mut(idx);
            let g = &rest[0];
            self.accumulate(idx, g, upstream)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, idx: usize, g: &Tensor, upstream: &mut [Tensor]) -> NnResult<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                upstream[a.0].add_assign(g);
                upstream[b.0].add_assign(g);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                for (i, gv) in g.data().iter().enumerate() {
                    upstream[a.0].data_mut()[i] += gv * tb.data()[i];
                    upstream[b.0].data_mut()[i] += gv * ta.data()[i];
                }
            }
            Op::Scale(x, factor) => {
                for (i, gv) in g.data().iter().enumerate() {
                    upstream[x.0].data_mut()[i] += gv * factor;
                }
            }
            Op::AddRowBroadcast { mat, row } => {
                let cols = self.nodes[mat.0].value.cols();
                upstream[mat.0].add_assign(g);
                for (i, gv) in g.data().iter().enumerate() {
                    upstream[row.0].data_mut()[i % cols] += gv;
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (r, s, c) = (ta.rows(), ta.cols(), tb.cols());
                for i in 0..r {
                    for k in 0..s {
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += g.data()[i * c + j] * tb.at(k, j);
                        }
                        upstream[a.0].data_mut()[i * s + k] += acc;
                    }
                }
                for k in 0..s {
                    for j in 0..c {
                        let mut acc = 0.0;
                        for i in 0..r {
                            acc += ta.at(i, k) * g.data()[i * c + j];
                        }
                        upstream[b.0].data_mut()[k * c + j] += acc;
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = {
                    let tx = &self.nodes[x.0].value;
                    (tx.rows(), tx.cols())
                };
                for i in 0..r {
                    for j in 0..c {
                        upstream[x.0].data_mut()[i * c + j] += g.data()[j * r + i];
                    }
                }
            }
            Op::Relu(x) => {
                let tx = &self.nodes[x.0].value;
                for (i, gv) in g.data().iter().enumerate() {
                    if tx.data()[i] > 0.0 {
                        upstream[x.0].data_mut()[i] += gv;
                    }
                }
            }
            Op::Tanh(x) => {
                let y = &node.value;
                for (i, gv) in g.data().iter().enumerate() {
                    let yv = y.data()[i];
                    upstream[x.0].data_mut()[i] += gv * (1.0 - yv * yv);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                for i in 0..r {
                    let yrow = &y.data()[i * c..(i + 1) * c];
                    let grow = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = yrow.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..c {
                        upstream[x.0].data_mut()[i * c + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::CausalConv1d { x, kernels, bias } => {
                let (tx, tk) = (&self.nodes[x.0].value, &self.nodes[kernels.0].value);
                let (c_in, m) = (tx.rows(), tx.cols());
                let (c_out, _, ks) = (tk.shape()[0], tk.shape()[1], tk.shape()[2]);
                for c in 0..c_out {
                    for t in 0..m {
                        let gv = g.data()[c * m + t];
                        if gv == 0.0 {
                            continue;
                        }
                        upstream[bias.0].data_mut()[c] += gv;
                        for i in 0..c_in {
                            for tap in 0..ks {
                                let src = t as isize + tap as isize - (ks as isize - 1);
                                if src >= 0 {
                                    let src = src as usize;
                                    let kidx = (c * c_in + i) * ks + tap;
                                    upstream[kernels.0].data_mut()[kidx] += gv * tx.at(i, src);
                                    upstream[x.0].data_mut()[i * m + src] += gv * tk.data()[kidx];
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPoolSame { x, argmax } => {
                let m = node.value.cols();
                for (flat, gv) in g.data().iter().enumerate() {
                    let c = flat / m;
                    upstream[x.0].data_mut()[c * m + argmax[flat]] += gv;
                }
            }
            Op::DenseWeightNorm { x, v, g: gain, bias } => {
                let (tx, tv, tgain) = (
                    &self.nodes[x.0].value,
                    &self.nodes[v.0].value,
                    &self.nodes[gain.0].value,
                );
                let (d_out, d_in) = (tv.rows(), tv.cols());
                for j in 0..d_out {
                    let gy = g.data()[j];
                    if gy == 0.0 {
                        continue;
                    }
                    let row = &tv.data()[j * d_in..(j + 1) * d_in];
                    let norm = l2_norm(row);
                    let dot: f64 = row.iter().zip(tx.data()).map(|(a, b)| a * b).sum();
                    let gj = tgain.data()[j];
                    upstream[bias.0].data_mut()[j] += gy;
                    upstream[gain.0].data_mut()[j] += gy * dot / norm;
                    let scale = gj / norm;
                    let proj = gj * dot / (norm * norm * norm);
                    for (i, (&vi, &xi)) in row.iter().zip(tx.data()).enumerate() {
                        upstream[x.0].data_mut()[i] += gy * scale * vi;
                        upstream[v.0].data_mut()[j * d_in + i] += gy * (scale * xi - proj * vi);
                    }
                }
            }
            Op::Dense { x, w, bias } => {
                let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (d_out, d_in) = (tw.rows(), tw.cols());
                for j in 0..d_out {
                    let gy = g.data()[j];
                    if gy == 0.0 {
                        continue;
                    }
                    upstream[bias.0].data_mut()[j] += gy;
                    for i in 0..d_in {
                        upstream[w.0].data_mut()[j * d_in + i] += gy * tx.data()[i];
                        upstream[x.0].data_mut()[i] += gy * tw.at(j, i);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                for (i, gv) in g.data().iter().enumerate() {
                    upstream[x.0].data_mut()[i] += gv * mask.data()[i];
                }
            }
            Op::Flatten(x) => {
                upstream[x.0].data_mut().iter_mut().zip(g.data()).for_each(|(u, gv)| *u += gv);
            }
            Op::ConcatVec(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    for i in 0..len {
                        upstream[p.0].data_mut()[i] += g.data()[off + i];
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total_cols = node.value.cols();
                let mut col_off = 0;
                for p in parts {
                    let c = self.nodes[p.0].value.cols();
                    for i in 0..rows {
                        for j in 0..c {
                            upstream[p.0].data_mut()[i * c + j] += g.data()[i * total_cols + col_off + j];
                        }
                    }
                    col_off += c;
                }
            }
            Op::MseAgainst { pred, truth } => {
                let tp = &self.nodes[pred.0].value;
                let n = tp.len() as f64;
                let gs = g.data()[0];
                for (i, (p, t)) in tp.data().iter().zip(truth.data()).enumerate() {
                    upstream[pred.0].data_mut()[i] += gs * 2.0 * (p - t) / n;
                }
            }
            Op::MeanScalars(items) => {
                let share = g.data()[0] / items.len() as f64;
                for it in items {
                    upstream[it.0].data_mut()[0] += share;
                }
            }
            Op::SumAll(x) => {
                let gs = g.data()[0];
                for u in upstream[x.0].data_mut() {
                    *u += gs;
                }
            }
        }
        Ok(())
    }
}

fn l2_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn shape_err(op: &'static str, detail: String) -> NnError {
    NnError::ShapeMismatch { op, detail }
}
