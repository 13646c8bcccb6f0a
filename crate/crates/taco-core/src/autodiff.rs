//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every tensor lives on a [`Tape`] and is addressed by a [`TensorRef`]. Ops
//! record themselves as they run; [`Tape::backward`] replays the record in
//! reverse, accumulating vector-Jacobian products into per-node gradient
//! buffers. All tensors are rank-2; scalars are `[1, 1]`.
//!
//! The tape is built fresh for every training step. Accumulation order is
//! fixed by construction order, so identical programs produce bit-identical
//! gradients.

use crate::error::{Error, Result};

/// Row norms below this are rejected before any cosine division.
pub const NORM_MIN: f64 = 1e-12;

/// Plain dense row-major matrix for off-tape (detached) numerics.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat data length");
        Mat { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat::new(rows, cols, vec![0.0; rows * cols])
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Cosine distance between every row of `a` and every row of `b`:
/// `d = 1 - <u, v> / (|u| |v|)`, clamped into `[0, 2]` against rounding.
/// Rows with norm below [`NORM_MIN`] are an error, not a NaN.
pub fn cosine_distance_values(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch(format!(
            "cosine distance: feature dims {} vs {}",
            a.cols, b.cols
        )));
    }
    let na = row_norms(a)?;
    let nb = row_norms(b)?;
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let u = a.row(i);
        for j in 0..b.rows {
            let v = b.row(j);
            let mut dot = 0.0;
            for f in 0..a.cols {
                dot += u[f] * v[f];
            }
            out.set(i, j, (1.0 - dot / (na[i] * nb[j])).clamp(0.0, 2.0));
        }
    }
    Ok(out)
}

fn row_norms(m: &Mat) -> Result<Vec<f64>> {
    (0..m.rows)
        .map(|r| {
            let n = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < NORM_MIN {
                Err(Error::DegenerateNorm {
                    row: r,
                    norm: n,
                    min: NORM_MIN,
                })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

enum Op {
    Leaf,
    Detach,
    Matmul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    Tanh(usize),
    Hinge(usize),
    Mean(usize),
    Sum(usize),
    Mse(usize, usize),
    CosineDistanceMatrix(usize, usize),
    CosinePairDistances(usize, Vec<(usize, usize)>),
    Gather2d(usize, Vec<(usize, usize)>),
    AppendRowMean(usize),
}

struct Node {
    shape: [usize; 2],
    values: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Wengert list: nodes in construction order plus parallel gradient buffers.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            done: false,
        }
    }

    // Intermediate values may overflow to inf/NaN; callers decide whether a
    // non-finite result is an error. Only leaf inputs are validated.
    fn push(&mut self, shape: [usize; 2], values: Vec<f64>, requires_grad: bool, op: Op) -> TensorRef {
        self.nodes.push(Node {
            shape,
            values,
            requires_grad,
            op,
        });
        self.grads.push(None);
        TensorRef(self.nodes.len() - 1)
    }

    fn needs(&self, a: TensorRef) -> bool {
        self.nodes[a.0].requires_grad
    }

    pub fn shape(&self, t: TensorRef) -> [usize; 2] {
        self.nodes[t.0].shape
    }

    pub fn values(&self, t: TensorRef) -> &[f64] {
        &self.nodes[t.0].values
    }

    pub fn value_scalar(&self, t: TensorRef) -> f64 {
        debug_assert_eq!(self.nodes[t.0].shape, [1, 1]);
        self.nodes[t.0].values[0]
    }

    pub fn values_mat(&self, t: TensorRef) -> Mat {
        let n = &self.nodes[t.0];
        Mat::new(n.shape[0], n.shape[1], n.values.clone())
    }

    /// Gradient accumulated by the last `backward`, if any reached `t`.
    pub fn grad(&self, t: TensorRef) -> Option<&[f64]> {
        self.grads[t.0].as_deref()
    }

    pub fn leaf(&mut self, values: Vec<f64>, shape: [usize; 2], requires_grad: bool) -> Result<TensorRef> {
        if values.len() != shape[0] * shape[1] {
            return Err(Error::ShapeMismatch(format!(
                "leaf: {} values for shape {:?}",
                values.len(),
                shape
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("leaf".into()));
        }
        Ok(self.push(shape, values, requires_grad, Op::Leaf))
    }

    pub fn scalar(&mut self, v: f64) -> TensorRef {
        self.push([1, 1], vec![v], false, Op::Leaf)
    }

    /// Same values, cut out of the gradient flow.
    pub fn detach(&mut self, a: TensorRef) -> TensorRef {
        let vals = self.nodes[a.0].values.clone();
        let shape = self.nodes[a.0].shape;
        self.push(shape, vals, false, Op::Detach)
    }

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let [m, ka] = self.shape(a);
        let [kb, n] = self.shape(b);
        if ka != kb {
            return Err(Error::ShapeMismatch(format!(
                "matmul: [{m}x{ka}] . [{kb}x{n}]"
            )));
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * ka..(i + 1) * ka];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in arow.iter().enumerate() {
                let brow = &bv[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push([m, n], out, rg, Op::Matmul(a.0, b.0)))
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    fn zip(
        &mut self,
        a: TensorRef,
        b: TensorRef,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorRef> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, rg, op))
    }

    /// Adds a `[1, n]` bias row to every row of `a`.
    pub fn add_row(&mut self, a: TensorRef, bias: TensorRef) -> Result<TensorRef> {
        let [m, n] = self.shape(a);
        if self.shape(bias) != [1, n] {
            return Err(Error::ShapeMismatch(format!(
                "add_row: bias {:?} against [{m}x{n}]",
                self.shape(bias)
            )));
        }
        let bv = self.nodes[bias.0].values.clone();
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .chunks(n)
            .flat_map(|row| row.iter().zip(&bv).map(|(&x, &b)| x + b))
            .collect();
        let rg = self.needs(a) || self.needs(bias);
        Ok(self.push([m, n], out, rg, Op::AddRow(a.0, bias.0)))
    }

    pub fn add_scalar(&mut self, a: TensorRef, c: f64) -> TensorRef {
        self.map(a, |x| x + c, Op::AddScalar(a.0))
    }

    pub fn scale(&mut self, a: TensorRef, c: f64) -> TensorRef {
        self.map(a, |x| x * c, Op::Scale(a.0, c))
    }

    pub fn tanh(&mut self, a: TensorRef) -> TensorRef {
        self.map(a, f64::tanh, Op::Tanh(a.0))
    }

    /// Elementwise `max(0, x)`. Subgradient at 0 is 0.
    pub fn hinge(&mut self, a: TensorRef) -> TensorRef {
        self.map(a, |x| x.max(0.0), Op::Hinge(a.0))
    }

    fn map(&mut self, a: TensorRef, f: impl Fn(f64) -> f64, op: Op) -> TensorRef {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| f(x)).collect();
        let shape = self.shape(a);
        let rg = self.needs(a);
        self.push(shape, out, rg, op)
    }

    pub fn mean(&mut self, a: TensorRef) -> TensorRef {
        let n = self.nodes[a.0].values.len() as f64;
        let s = self.nodes[a.0].values.iter().sum::<f64>() / n;
        let rg = self.needs(a);
        self.push([1, 1], vec![s], rg, Op::Mean(a.0))
    }

    pub fn sum(&mut self, a: TensorRef) -> TensorRef {
        let s = self.nodes[a.0].values.iter().sum::<f64>();
        let rg = self.needs(a);
        self.push([1, 1], vec![s], rg, Op::Sum(a.0))
    }

    /// Mean over elements of the squared difference.
    pub fn mse(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "mse: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let n = self.nodes[a.0].values.len() as f64;
        let s = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push([1, 1], vec![s], rg, Op::Mse(a.0, b.0)))
    }

    /// Full pairwise cosine distance matrix, differentiable through both
    /// feature matrices.
    pub fn cosine_distance_matrix(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let am = self.values_mat(a);
        let bm = self.values_mat(b);
        let d = cosine_distance_values(&am, &bm)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push([d.rows, d.cols], d.data, rg, Op::CosineDistanceMatrix(a.0, b.0)))
    }

    /// Cosine distances for selected row pairs `(r, c)` of one feature
    /// matrix, as a `[1, pairs.len()]` row. Equivalent to gathering those
    /// entries out of the full self-distance matrix, without materializing
    /// it.
    pub fn cosine_pair_distances(&mut self, z: TensorRef, pairs: &[(usize, usize)]) -> Result<TensorRef> {
        let [k, _f] = self.shape(z);
        for &(r, c) in pairs {
            if r >= k || c >= k {
                return Err(Error::ShapeMismatch(format!(
                    "cosine pair ({r}, {c}) out of range for {k} rows"
                )));
            }
        }
        let zm = self.values_mat(z);
        let norms = row_norms(&zm)?;
        let out: Vec<f64> = pairs
            .iter()
            .map(|&(r, c)| {
                let dot: f64 = zm.row(r).iter().zip(zm.row(c)).map(|(&x, &y)| x * y).sum();
                (1.0 - dot / (norms[r] * norms[c])).clamp(0.0, 2.0)
            })
            .collect();
        let rg = self.needs(z);
        Ok(self.push([1, pairs.len()], out, rg, Op::CosinePairDistances(z.0, pairs.to_vec())))
    }

    /// Picks entries `(r, c)` out of a matrix as a `[1, n]` row.
    pub fn gather2d(&mut self, a: TensorRef, idx: &[(usize, usize)]) -> Result<TensorRef> {
        let [m, n] = self.shape(a);
        for &(r, c) in idx {
            if r >= m || c >= n {
                return Err(Error::ShapeMismatch(format!(
                    "gather ({r}, {c}) out of range for [{m}x{n}]"
                )));
            }
        }
        let out: Vec<f64> = idx.iter().map(|&(r, c)| self.nodes[a.0].values[r * n + c]).collect();
        let rg = self.needs(a);
        Ok(self.push([1, idx.len()], out, rg, Op::Gather2d(a.0, idx.to_vec())))
    }

    /// Appends the column-wise mean row to every row: `[k, f] -> [k, 2f]`.
    /// Gives each token a view of the whole volume.
    pub fn append_row_mean(&mut self, a: TensorRef) -> TensorRef {
        let [k, f] = self.shape(a);
        let av = &self.nodes[a.0].values;
        let mut mean = vec![0.0; f];
        for row in av.chunks(f) {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= k as f64;
        }
        let mut out = Vec::with_capacity(k * 2 * f);
        for row in av.chunks(f) {
            out.extend_from_slice(row);
            out.extend_from_slice(&mean);
        }
        let rg = self.needs(a);
        self.push([k, 2 * f], out, rg, Op::AppendRowMean(a.0))
    }

    /// Reverse sweep from a scalar root. Consumes the tape's one backward
    /// pass; a second call is an error.
    pub fn backward(&mut self, root: TensorRef) -> Result<()> {
        if self.done {
            return Err(Error::Backward("backward already ran on this tape".into()));
        }
        if self.shape(root) != [1, 1] {
            return Err(Error::Backward(format!(
                "root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        if !self.needs(root) {
            return Err(Error::Backward("root is detached from all gradients".into()));
        }
        self.done = true;
        self.grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let g = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf | Op::Detach => {}
                &Op::Matmul(a, b) => {
                    let [m, k] = self.nodes[a].shape;
                    let n = self.nodes[b].shape[1];
                    if self.nodes[a].requires_grad {
                        // dA = G . B^T
                        let bv = &self.nodes[b].values;
                        let mut da = vec![0.0; m * k];
                        for i2 in 0..m {
                            let grow = &g[i2 * n..(i2 + 1) * n];
                            let darow = &mut da[i2 * k..(i2 + 1) * k];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += grow[j] * brow[j];
                                }
                                darow[p] += acc;
                            }
                        }
                        self.accum(a, &da);
                    }
                    if self.nodes[b].requires_grad {
                        // dB = A^T . G
                        let av = &self.nodes[a].values;
                        let mut db = vec![0.0; k * n];
                        for i2 in 0..m {
                            let arow = &av[i2 * k..(i2 + 1) * k];
                            let grow = &g[i2 * n..(i2 + 1) * n];
                            for (p, &aip) in arow.iter().enumerate() {
                                let dbrow = &mut db[p * n..(p + 1) * n];
                                for j in 0..n {
                                    dbrow[j] += aip * grow[j];
                                }
                            }
                        }
                        self.accum(b, &db);
                    }
                }
                &Op::Add(a, b) => {
                    if self.nodes[a].requires_grad {
                        self.accum(a, &g);
                    }
                    if self.nodes[b].requires_grad {
                        self.accum(b, &g);
                    }
                }
                &Op::Sub(a, b) => {
                    if self.nodes[a].requires_grad {
                        self.accum(a, &g);
                    }
                    if self.nodes[b].requires_grad {
                        let neg: Vec<f64> = g.iter().map(|&x| -x).collect();
                        self.accum(b, &neg);
                    }
                }
                &Op::AddRow(a, bias) => {
                    let n = self.nodes[bias].shape[1];
                    if self.nodes[a].requires_grad {
                        self.accum(a, &g);
                    }
                    if self.nodes[bias].requires_grad {
                        let mut db = vec![0.0; n];
                        for row in g.chunks(n) {
                            for (d, &x) in db.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                        self.accum(bias, &db);
                    }
                }
                &Op::AddScalar(a) => {
                    if self.nodes[a].requires_grad {
                        self.accum(a, &g);
                    }
                }
                &Op::Scale(a, c) => {
                    if self.nodes[a].requires_grad {
                        let da: Vec<f64> = g.iter().map(|&x| x * c).collect();
                        self.accum(a, &da);
                    }
                }
                &Op::Tanh(a) => {
                    if self.nodes[a].requires_grad {
                        let y = &self.nodes[i].values;
                        let da: Vec<f64> = g.iter().zip(y).map(|(&gx, &yx)| gx * (1.0 - yx * yx)).collect();
                        self.accum(a, &da);
                    }
                }
                &Op::Hinge(a) => {
                    if self.nodes[a].requires_grad {
                        let x = &self.nodes[a].values;
                        let da: Vec<f64> = g.iter().zip(x).map(|(&gx, &xx)| if xx > 0.0 { gx } else { 0.0 }).collect();
                        self.accum(a, &da);
                    }
                }
                &Op::Mean(a) => {
                    if self.nodes[a].requires_grad {
                        let n = self.nodes[a].values.len() as f64;
                        let da = vec![g[0] / n; self.nodes[a].values.len()];
                        self.accum(a, &da);
                    }
                }
                &Op::Sum(a) => {
                    if self.nodes[a].requires_grad {
                        let da = vec![g[0]; self.nodes[a].values.len()];
                        self.accum(a, &da);
                    }
                }
                &Op::Mse(a, b) => {
                    let n = self.nodes[a].values.len() as f64;
                    let scale = 2.0 * g[0] / n;
                    if self.nodes[a].requires_grad {
                        let da: Vec<f64> = self.nodes[a]
                            .values
                            .iter()
                            .zip(&self.nodes[b].values)
                            .map(|(&x, &y)| scale * (x - y))
                            .collect();
                        self.accum(a, &da);
                    }
                    if self.nodes[b].requires_grad {
                        let db: Vec<f64> = self.nodes[a]
                            .values
                            .iter()
                            .zip(&self.nodes[b].values)
                            .map(|(&x, &y)| -scale * (x - y))
                            .collect();
                        self.accum(b, &db);
                    }
                }
                &Op::CosineDistanceMatrix(a, b) => {
                    let am = Mat::new(self.nodes[a].shape[0], self.nodes[a].shape[1], self.nodes[a].values.clone());
                    let bm = Mat::new(self.nodes[b].shape[0], self.nodes[b].shape[1], self.nodes[b].values.clone());
                    let d = &self.nodes[i].values;
                    let na = row_norms(&am).expect("norms were checked in forward");
                    let nb = row_norms(&bm).expect("norms were checked in forward");
                    let (ka, kb, f) = (am.rows, bm.rows, am.cols);
                    let mut da = vec![0.0; ka * f];
                    let mut db = vec![0.0; kb * f];
                    for r in 0..ka {
                        let u = am.row(r);
                        for c in 0..kb {
                            let gx = g[r * kb + c];
                            if gx == 0.0 {
                                continue;
                            }
                            let v = bm.row(c);
                            let s = 1.0 - d[r * kb + c];
                            let inv = 1.0 / (na[r] * nb[c]);
                            for q in 0..f {
                                da[r * f + q] += gx * (s * u[q] / (na[r] * na[r]) - v[q] * inv);
                                db[c * f + q] += gx * (s * v[q] / (nb[c] * nb[c]) - u[q] * inv);
                            }
                        }
                    }
                    if self.nodes[a].requires_grad {
                        self.accum(a, &da);
                    }
                    if self.nodes[b].requires_grad {
                        self.accum(b, &db);
                    }
                }
                Op::CosinePairDistances(z, pairs) => {
                    let (z, pairs) = (*z, pairs.clone());
                    if self.nodes[z].requires_grad {
                        let zm = Mat::new(self.nodes[z].shape[0], self.nodes[z].shape[1], self.nodes[z].values.clone());
                        let norms = row_norms(&zm).expect("norms were checked in forward");
                        let d = self.nodes[i].values.clone();
                        let f = zm.cols;
                        let mut dz = vec![0.0; zm.rows * f];
                        for (t, &(r, c)) in pairs.iter().enumerate() {
                            let gx = g[t];
                            if gx == 0.0 {
                                continue;
                            }
                            let s = 1.0 - d[t];
                            let inv = 1.0 / (norms[r] * norms[c]);
                            let (u, v) = (zm.row(r), zm.row(c));
                            for q in 0..f {
                                dz[r * f + q] += gx * (s * u[q] / (norms[r] * norms[r]) - v[q] * inv);
                                dz[c * f + q] += gx * (s * v[q] / (norms[c] * norms[c]) - u[q] * inv);
                            }
                        }
                        self.accum(z, &dz);
                    }
                }
                Op::Gather2d(a, idx) => {
                    let (a, idx) = (*a, idx.clone());
                    if self.nodes[a].requires_grad {
                        let n = self.nodes[a].shape[1];
                        let mut da = vec![0.0; self.nodes[a].values.len()];
                        for (t, &(r, c)) in idx.iter().enumerate() {
                            da[r * n + c] += g[t];
                        }
                        self.accum(a, &da);
                    }
                }
                &Op::AppendRowMean(a) => {
                    if self.nodes[a].requires_grad {
                        let [k, f] = self.nodes[a].shape;
                        let mut da = vec![0.0; k * f];
                        let mut mean_g = vec![0.0; f];
                        for (r, grow) in g.chunks(2 * f).enumerate() {
                            for q in 0..f {
                                da[r * f + q] += grow[q];
                                mean_g[q] += grow[f + q];
                            }
                        }
                        for r in 0..k {
                            for q in 0..f {
                                da[r * f + q] += mean_g[q] / k as f64;
                            }
                        }
                        self.accum(a, &da);
                    }
                }
            }
        }
        Ok(())
    }

    fn accum(&mut self, idx: usize, contrib: &[f64]) {
        let slot = &mut self.grads[idx];
        match slot {
            Some(g) => {
                for (gx, &c) in g.iter_mut().zip(contrib) {
                    *gx += c;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }
}
