//! Reverse-mode autodiff over 2-D `f64` matrices.
//!
//! All model math in this crate goes through [`Tape`]: forward values are
//! computed eagerly, the op graph is recorded, and [`Tape::backward`]
//! produces gradients for every leaf created with `requires_grad = true`.
//! Frozen components are bound as non-grad leaves, so their recorded
//! gradient is exactly zero by construction.
//!
//! The op set is the minimum needed for the models here: matmul, broadcast
//! add, masked row softmax, layer norm, GELU, row/column splits and concats,
//! embedding lookup, L2 row normalization, and the scalar reductions used by
//! the losses.

use ndarray::{concatenate, Array2, Axis};
use rand_chacha::rand_core::Rng as _;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Snap every entry to the nearest `f32`-representable value.
///
/// Parameters live on this grid so the 32-bit checkpoint format round-trips
/// bit-exactly and a resumed run continues bit-identically.
pub fn round_f32(m: &mut Mat) {
    m.mapv_inplace(|v| v as f32 as f64);
}

/// Standard normal draw via Box-Muller, on the f32 grid.
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    // Uniforms in (0, 1]; next_u64 >> 11 gives 53 random bits.
    let u1 = ((rng.next_u64() >> 11) as f64 + 1.0) / 9007199254740993.0;
    let u2 = ((rng.next_u64() >> 11) as f64 + 1.0) / 9007199254740993.0;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Matrix with i.i.d. N(0, scale^2) entries, snapped to the f32 grid.
pub fn randn_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    let mut m = Mat::zeros((rows, cols));
    for v in m.iter_mut() {
        *v = (randn(rng) * scale) as f32 as f64;
    }
    m
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Sinusoidal position encoding table, `rows x dims`, on the f32 grid.
pub fn sinusoidal_pos(rows: usize, dims: usize) -> Mat {
    let mut pe = Mat::zeros((rows, dims));
    for p in 0..rows {
        for i in 0..dims {
            let exponent = (2 * (i / 2)) as f64 / dims as f64;
            let angle = p as f64 / 10000f64.powf(exponent);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            pe[[p, i]] = v as f32 as f64;
        }
    }
    pe
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    MulElem(usize, usize),
    Scale(usize, f64),
    /// Adds a constant matrix (e.g. an additive attention mask); gradient
    /// passes through unchanged.
    AddConst(usize),
    MatMul(usize, usize),
    Transpose(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
    },
    Gelu(usize),
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Embed {
        table: usize,
        ids: Vec<usize>,
    },
    SumAll(usize),
    MeanAll(usize),
    MaxAll {
        x: usize,
        arg: (usize, usize),
    },
    L2NormalizeRows(usize),
    Recip(usize),
    /// Broadcast-multiplies `x` by the 1x1 scalar node `s`.
    MulScalar {
        x: usize,
        s: usize,
    },
    /// Adds a 1xN row to every row of `x`.
    AddRow {
        x: usize,
        row: usize,
    },
    /// Builds a rows x cols matrix out of 1x1 scalar nodes, row-major.
    AssembleScalars {
        parts: Vec<usize>,
    },
    /// `-sum_t logp[t, targets[t]]` as a 1x1 value.
    NllSum {
        logp: usize,
        targets: Vec<usize>,
    },
    /// Mean over rows of the stable binary cross-entropy with logits.
    BceWithLogitsMean {
        logits: usize,
        labels: Vec<f64>,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by `Var`.
pub struct Grads {
    by_node: Vec<Option<Mat>>,
}

impl Grads {
    /// Gradient for `v`, or `None` if nothing flowed there (frozen leaf or
    /// unused node).
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.by_node[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.by_node[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.dim(), (1, 1));
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Trainable leaf: gradients are tracked.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Frozen leaf: participates in the forward pass, receives no gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(Mat::from_elem((1, 1), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::MulElem(a.0, b.0), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let ng = self.needs(a.0);
        self.push(v, Op::Scale(a.0, c), ng)
    }

    pub fn add_mat(&mut self, a: Var, c: &Mat) -> Var {
        let v = &self.nodes[a.0].value + c;
        let ng = self.needs(a.0);
        self.push(v, Op::AddConst(a.0), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::MatMul(a.0, b.0), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        let ng = self.needs(a.0);
        self.push(v, Op::Transpose(a.0), ng)
    }

    /// Row-wise softmax. Masked entries should carry `-inf` (via `add_mat`);
    /// they come out exactly zero.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows_val(&self.nodes[a.0].value);
        let ng = self.needs(a.0);
        self.push(v, Op::SoftmaxRows(a.0), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let ng = self.needs(a.0);
        self.push(v, Op::LogSoftmaxRows(a.0), ng)
    }

    /// Row-wise layer norm with learned gain and bias (both 1 x cols).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = (var + LN_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) / sd * g[[0, j]] + b[[0, j]];
            }
        }
        let ng = self.needs(x.0) || self.needs(gain.0) || self.needs(bias.0);
        self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
            ng,
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(gelu_val);
        let ng = self.needs(a.0);
        self.push(v, Op::Gelu(a.0), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice(ndarray::s![start..end, ..])
            .to_owned();
        let ng = self.needs(a.0);
        self.push(v, Op::SliceRows { x: a.0, start }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice(ndarray::s![.., start..end])
            .to_owned();
        let ng = self.needs(a.0);
        self.push(v, Op::SliceCols { x: a.0, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column counts must match");
        let ng = parts.iter().any(|p| self.needs(p.0));
        self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts must match");
        let ng = parts.iter().any(|p| self.needs(p.0));
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), ng)
    }

    /// Gathers `table` rows by id: output row t is `table[ids[t], :]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = &self.nodes[table.0].value;
        let mut v = Mat::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).assign(&t.row(id));
        }
        let ng = self.needs(table.0);
        self.push(
            v,
            Op::Embed {
                table: table.0,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.nodes[a.0].value.sum());
        let ng = self.needs(a.0);
        self.push(v, Op::SumAll(a.0), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let v = Mat::from_elem((1, 1), self.nodes[a.0].value.sum() / n);
        let ng = self.needs(a.0);
        self.push(v, Op::MeanAll(a.0), ng)
    }

    /// Maximum entry as a 1x1 value; ties resolve to the first entry in
    /// row-major order.
    pub fn max_all(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut best = f64::NEG_INFINITY;
        let mut arg = (0, 0);
        for (idx, &v) in x.indexed_iter() {
            if v > best {
                best = v;
                arg = idx;
            }
        }
        let ng = self.needs(a.0);
        self.push(
            Mat::from_elem((1, 1), best),
            Op::MaxAll { x: a.0, arg },
            ng,
        )
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let n = (row.iter().map(|&x| x * x).sum::<f64>() + NORM_EPS).sqrt();
            row.mapv_inplace(|x| x / n);
        }
        let ng = self.needs(a.0);
        self.push(v, Op::L2NormalizeRows(a.0), ng)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        let ng = self.needs(a.0);
        self.push(v, Op::Recip(a.0), ng)
    }

    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        debug_assert_eq!(self.nodes[s.0].value.dim(), (1, 1));
        let sv = self.nodes[s.0].value[[0, 0]];
        let v = self.nodes[x.0].value.mapv(|e| e * sv);
        let ng = self.needs(x.0) || self.needs(s.0);
        self.push(v, Op::MulScalar { x: x.0, s: s.0 }, ng)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = &self.nodes[row.0].value;
        debug_assert_eq!(r.nrows(), 1);
        let v = &self.nodes[x.0].value + r;
        let ng = self.needs(x.0) || self.needs(row.0);
        self.push(v, Op::AddRow { x: x.0, row: row.0 }, ng)
    }

    pub fn assemble_scalars(&mut self, parts: &[Var], rows: usize, cols: usize) -> Var {
        debug_assert_eq!(parts.len(), rows * cols);
        let mut v = Mat::zeros((rows, cols));
        for (k, p) in parts.iter().enumerate() {
            debug_assert_eq!(self.nodes[p.0].value.dim(), (1, 1));
            v[[k / cols, k % cols]] = self.nodes[p.0].value[[0, 0]];
        }
        let ng = parts.iter().any(|p| self.needs(p.0));
        self.push(
            v,
            Op::AssembleScalars {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            ng,
        )
    }

    /// Negative log-likelihood sum: `-sum_t logp[t, targets[t]]`.
    pub fn nll_sum(&mut self, logp: Var, targets: &[usize]) -> Var {
        let lp = &self.nodes[logp.0].value;
        debug_assert_eq!(lp.nrows(), targets.len());
        let s: f64 = targets.iter().enumerate().map(|(t, &y)| -lp[[t, y]]).sum();
        let ng = self.needs(logp.0);
        self.push(
            Mat::from_elem((1, 1), s),
            Op::NllSum {
                logp: logp.0,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    /// Mean binary cross-entropy with logits over an n x 1 column.
    pub fn bce_with_logits_mean(&mut self, logits: Var, labels: &[f64]) -> Var {
        let z = &self.nodes[logits.0].value;
        debug_assert_eq!(z.dim(), (labels.len(), 1));
        let n = labels.len() as f64;
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let zi = z[[i, 0]];
                zi.max(0.0) - zi * y + (-zi.abs()).exp().ln_1p()
            })
            .sum();
        let ng = self.needs(logits.0);
        self.push(
            Mat::from_elem((1, 1), total / n),
            Op::BceWithLogitsMean {
                logits: logits.0,
                labels: labels.to_vec(),
            },
            ng,
        )
    }

    /// Backpropagate from a 1x1 loss node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = &self.nodes[loss.0].value;
        if lv.dim() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward expects a 1x1 loss, got {}x{}",
                lv.nrows(),
                lv.ncols()
            )));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { by_node: grads })
    }

    fn add_grad(&self, grads: &mut [Option<Mat>], idx: usize, delta: Mat) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut grads[idx] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn accumulate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.mapv(|v| -v));
            }
            Op::MulElem(a, b) => {
                self.add_grad(grads, *a, g * &self.nodes[*b].value);
                self.add_grad(grads, *b, g * &self.nodes[*a].value);
            }
            Op::Scale(a, c) => {
                self.add_grad(grads, *a, g.mapv(|v| v * c));
            }
            Op::AddConst(a) => {
                self.add_grad(grads, *a, g.clone());
            }
            Op::MatMul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                self.add_grad(grads, *a, g.dot(&bv.t()));
                self.add_grad(grads, *b, av.t().dot(g));
            }
            Op::Transpose(a) => {
                self.add_grad(grads, *a, g.t().to_owned());
            }
            Op::SoftmaxRows(a) => {
                let p = &self.nodes[i].value;
                let mut dx = Mat::zeros(p.raw_dim());
                for r in 0..p.nrows() {
                    let dot: f64 = (0..p.ncols()).map(|c| g[[r, c]] * p[[r, c]]).sum();
                    for c in 0..p.ncols() {
                        dx[[r, c]] = p[[r, c]] * (g[[r, c]] - dot);
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut dx = Mat::zeros(y.raw_dim());
                for r in 0..y.nrows() {
                    let gsum: f64 = (0..y.ncols()).map(|c| g[[r, c]]).sum();
                    for c in 0..y.ncols() {
                        dx[[r, c]] = g[[r, c]] - y[[r, c]].exp() * gsum;
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gain].value;
                let n = xv.ncols() as f64;
                let mut dx = Mat::zeros(xv.raw_dim());
                let mut dgain = Mat::zeros((1, xv.ncols()));
                let mut dbias = Mat::zeros((1, xv.ncols()));
                for r in 0..xv.nrows() {
                    let row = xv.row(r);
                    let mean = row.sum() / n;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let sd = (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) / sd).collect();
                    let gg: Vec<f64> = (0..xv.ncols()).map(|c| g[[r, c]] * gv[[0, c]]).collect();
                    let mean_gg = gg.iter().sum::<f64>() / n;
                    let mean_gg_xhat =
                        gg.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..xv.ncols() {
                        dx[[r, c]] = (gg[c] - mean_gg - xhat[c] * mean_gg_xhat) / sd;
                        dgain[[0, c]] += g[[r, c]] * xhat[c];
                        dbias[[0, c]] += g[[r, c]];
                    }
                }
                self.add_grad(grads, *x, dx);
                self.add_grad(grads, *gain, dgain);
                self.add_grad(grads, *bias, dbias);
            }
            Op::Gelu(a) => {
                let xv = &self.nodes[*a].value;
                self.add_grad(grads, *a, g * &xv.mapv(gelu_grad));
            }
            Op::SliceRows { x, start } => {
                let xv = &self.nodes[*x].value;
                let mut dx = Mat::zeros(xv.raw_dim());
                dx.slice_mut(ndarray::s![*start..*start + g.nrows(), ..])
                    .assign(g);
                self.add_grad(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let xv = &self.nodes[*x].value;
                let mut dx = Mat::zeros(xv.raw_dim());
                dx.slice_mut(ndarray::s![.., *start..*start + g.ncols()])
                    .assign(g);
                self.add_grad(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.nrows();
                    self.add_grad(grads, p, g.slice(ndarray::s![r0..r0 + rows, ..]).to_owned());
                    r0 += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let cols = self.nodes[p].value.ncols();
                    self.add_grad(grads, p, g.slice(ndarray::s![.., c0..c0 + cols]).to_owned());
                    c0 += cols;
                }
            }
            Op::Embed { table, ids } => {
                let tv = &self.nodes[*table].value;
                let mut dt = Mat::zeros(tv.raw_dim());
                for (r, &id) in ids.iter().enumerate() {
                    let mut dest = dt.row_mut(id);
                    dest += &g.row(r);
                }
                self.add_grad(grads, *table, dt);
            }
            Op::SumAll(a) => {
                let g0 = g[[0, 0]];
                let shape = self.nodes[*a].value.raw_dim();
                self.add_grad(grads, *a, Mat::from_elem(shape, g0));
            }
            Op::MeanAll(a) => {
                let shape = self.nodes[*a].value.raw_dim();
                let n = self.nodes[*a].value.len() as f64;
                self.add_grad(grads, *a, Mat::from_elem(shape, g[[0, 0]] / n));
            }
            Op::MaxAll { x, arg } => {
                let shape = self.nodes[*x].value.raw_dim();
                let mut dx = Mat::zeros(shape);
                dx[[arg.0, arg.1]] = g[[0, 0]];
                self.add_grad(grads, *x, dx);
            }
            Op::L2NormalizeRows(a) => {
                let xv = &self.nodes[*a].value;
                let yv = &self.nodes[i].value;
                let mut dx = Mat::zeros(xv.raw_dim());
                for r in 0..xv.nrows() {
                    let n = (xv.row(r).iter().map(|&v| v * v).sum::<f64>() + NORM_EPS).sqrt();
                    let ydotg: f64 = (0..xv.ncols()).map(|c| yv[[r, c]] * g[[r, c]]).sum();
                    for c in 0..xv.ncols() {
                        dx[[r, c]] = (g[[r, c]] - yv[[r, c]] * ydotg) / n;
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::Recip(a) => {
                let yv = &self.nodes[i].value;
                self.add_grad(grads, *a, -(g * yv * yv));
            }
            Op::MulScalar { x, s } => {
                let sv = self.nodes[*s].value[[0, 0]];
                self.add_grad(grads, *x, g.mapv(|v| v * sv));
                let ds = (g * &self.nodes[*x].value).sum();
                self.add_grad(grads, *s, Mat::from_elem((1, 1), ds));
            }
            Op::AddRow { x, row } => {
                self.add_grad(grads, *x, g.clone());
                let mut dr = Mat::zeros((1, g.ncols()));
                for r in 0..g.nrows() {
                    let mut dest = dr.row_mut(0);
                    dest += &g.row(r);
                }
                self.add_grad(grads, *row, dr);
            }
            Op::AssembleScalars { parts } => {
                let cols = g.ncols();
                for (k, &p) in parts.iter().enumerate() {
                    self.add_grad(
                        grads,
                        p,
                        Mat::from_elem((1, 1), g[[k / cols, k % cols]]),
                    );
                }
            }
            Op::NllSum { logp, targets } => {
                let g0 = g[[0, 0]];
                let shape = self.nodes[*logp].value.raw_dim();
                let mut dl = Mat::zeros(shape);
                for (t, &y) in targets.iter().enumerate() {
                    dl[[t, y]] = -g0;
                }
                self.add_grad(grads, *logp, dl);
            }
            Op::BceWithLogitsMean { logits, labels } => {
                let z = &self.nodes[*logits].value;
                let n = labels.len() as f64;
                let g0 = g[[0, 0]];
                let mut dz = Mat::zeros(z.raw_dim());
                for (r, &y) in labels.iter().enumerate() {
                    let s = 1.0 / (1.0 + (-z[[r, 0]]).exp());
                    dz[[r, 0]] = g0 * (s - y) / n;
                }
                self.add_grad(grads, *logits, dz);
            }
        }
    }
}

fn softmax_rows_val(x: &Mat) -> Mat {
    let mut v = x.clone();
    for mut row in v.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for e in row.iter_mut() {
            *e = (*e - m).exp();
            sum += *e;
        }
        for e in row.iter_mut() {
            *e /= sum;
        }
    }
    v
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, grads_close};
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// FD-checks one op: `build` maps leaf vars to a scalar loss.
    fn check_op(
        params: Vec<Mat>,
        build: impl Fn(&mut Tape, &[Var]) -> Var,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<Mat> = vars
            .iter()
            .zip(&params)
            .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Mat::zeros(p.raw_dim())))
            .collect();
        let numeric = finite_diff_grad(
            |ps| {
                let mut t = Tape::new();
                let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
                let loss = build(&mut t, &vs);
                t.scalar(loss)
            },
            &params,
            1e-5,
        );
        let (ok, worst) = grads_close(&analytic, &numeric, 1e-5, 1e-9);
        assert!(ok, "gradient mismatch, worst rel err {worst}");
    }

    #[test]
    fn matmul_add_chain() {
        let mut r = rng(1);
        check_op(
            vec![randn_mat(&mut r, 3, 4, 0.5), randn_mat(&mut r, 4, 2, 0.5)],
            |t, v| {
                let m = t.matmul(v[0], v[1]);
                t.sum_all(m)
            },
        );
    }

    #[test]
    fn softmax_masked_rows() {
        let mut r = rng(2);
        let mut mask = Mat::zeros((3, 3));
        mask[[0, 2]] = f64::NEG_INFINITY;
        mask[[1, 0]] = f64::NEG_INFINITY;
        check_op(vec![randn_mat(&mut r, 3, 3, 1.0)], move |t, v| {
            let masked = t.add_mat(v[0], &mask);
            let p = t.softmax_rows(masked);
            let w = t.mul_elem(p, p);
            t.sum_all(w)
        });
    }

    #[test]
    fn masked_softmax_prob_is_exactly_zero() {
        let mut tape = Tape::new();
        let mut mask = Mat::zeros((2, 3));
        mask[[0, 1]] = f64::NEG_INFINITY;
        let x = tape.leaf(Mat::from_shape_vec((2, 3), vec![5.0, 9.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
        let m = tape.add_mat(x, &mask);
        let p = tape.softmax_rows(m);
        assert_eq!(tape.value(p)[[0, 1]], 0.0);
        let row0: f64 = (0..3).map(|c| tape.value(p)[[0, c]]).sum();
        assert!((row0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_grads() {
        let mut r = rng(3);
        check_op(
            vec![
                randn_mat(&mut r, 4, 6, 1.0),
                randn_mat(&mut r, 1, 6, 0.5),
                randn_mat(&mut r, 1, 6, 0.5),
            ],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2]);
                let sq = t.mul_elem(y, y);
                t.mean_all(sq)
            },
        );
    }

    #[test]
    fn gelu_slice_concat_grads() {
        let mut r = rng(4);
        check_op(
            vec![randn_mat(&mut r, 5, 4, 1.0), randn_mat(&mut r, 3, 4, 1.0)],
            |t, v| {
                let g = t.gelu(v[0]);
                let top = t.slice_rows(g, 0, 2);
                let joined = t.concat_rows(&[top, v[1]]);
                let left = t.slice_cols(joined, 0, 2);
                t.sum_all(left)
            },
        );
    }

    #[test]
    fn embed_and_nll_grads() {
        let mut r = rng(5);
        check_op(vec![randn_mat(&mut r, 6, 4, 1.0)], |t, v| {
            let e = t.embed(v[0], &[1, 3, 1]);
            let lp = t.log_softmax_rows(e);
            t.nll_sum(lp, &[0, 2, 3])
        });
    }

    #[test]
    fn l2norm_max_scalar_grads() {
        let mut r = rng(6);
        check_op(
            vec![randn_mat(&mut r, 3, 4, 1.0), Mat::from_elem((1, 1), 0.37)],
            |t, v| {
                let n = t.l2_normalize_rows(v[0]);
                let inv = t.recip(v[1]);
                let scaled = t.mul_scalar(n, inv);
                t.max_all(scaled)
            },
        );
    }

    #[test]
    fn bce_assemble_addrow_grads() {
        let mut r = rng(7);
        check_op(
            vec![
                randn_mat(&mut r, 2, 3, 1.0),
                randn_mat(&mut r, 1, 3, 1.0),
                Mat::from_elem((1, 1), 0.3),
                Mat::from_elem((1, 1), -0.8),
            ],
            |t, v| {
                let x = t.add_row(v[0], v[1]);
                let s0 = t.mean_all(x);
                let asm = t.assemble_scalars(&[s0, v[2], v[3], s0], 4, 1);
                t.bce_with_logits_mean(asm, &[1.0, 0.0, 0.0, 1.0])
            },
        );
    }

    #[test]
    fn frozen_leaf_gets_no_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(Mat::from_elem((2, 2), 2.0));
        let b = tape.constant(Mat::from_elem((2, 2), 3.0));
        let m = tape.mul_elem(a, b);
        let loss = tape.sum_all(m);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get(a).unwrap()[[0, 0]], 3.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(Mat::zeros((2, 2)));
        assert!(tape.backward(a).is_err());
    }
}
