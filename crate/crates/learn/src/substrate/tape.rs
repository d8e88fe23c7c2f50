use graphrl_core::Real;

use super::params::{ParamId, ParamStore};
use super::{SubstrateError, Tensor2D};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SegmentSum(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Scatter(Var, Vec<(usize, usize)>),
    PickCols(Var, Vec<usize>),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, T, T),
    Minimum(Var, Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
}

struct Entry<T> {
    value: Tensor2D<T>,
    op: Op<T>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor2D<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor2D<T>> {
        self.grads[v.0].as_ref()
    }
}

/// Record of forward operations, replayed in reverse by [`Tape::backward`].
pub struct Tape<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Tape { entries: Vec::new() }
    }
}

fn mismatch(op: &str, a: (usize, usize), b: (usize, usize)) -> SubstrateError {
    SubstrateError::ShapeMismatch(format!("{op}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

type Res = Result<Var, SubstrateError>;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, value: Tensor2D<T>, op: Op<T>) -> Var {
        self.entries.push(Entry { value, op });
        Var(self.entries.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor2D<T> {
        &self.entries[v.0].value
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.entries[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor2D<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Res {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(mismatch("matmul", sa, sb));
        }
        let v = self.value(a).matmul(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<(), SubstrateError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Res {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds the `1 x c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Res {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb != (1, sa.1) {
            return Err(mismatch("add_row", sa, sb));
        }
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        for r in 0..sa.0 {
            v.row_mut(r).iter_mut().zip(&bias).for_each(|(x, &b)| *x = *x + b);
        }
        Ok(self.push(v, Op::AddRow(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Res {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Multiplies row `r` of `a` by `col[r]`, where `col` is `r x 1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Res {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc != (sa.0, 1) {
            return Err(mismatch("mul_col", sa, sc));
        }
        let c = self.value(col).data().to_vec();
        let mut v = self.value(a).clone();
        for (r, &s) in c.iter().enumerate() {
            v.row_mut(r).iter_mut().for_each(|x| *x = *x * s);
        }
        Ok(self.push(v, Op::MulCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Res {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sb.0 {
            return Err(mismatch("concat_cols", sa, sb));
        }
        let mut data = Vec::with_capacity(sa.0 * (sa.1 + sb.1));
        for r in 0..sa.0 {
            data.extend_from_slice(self.value(a).row(r));
            data.extend_from_slice(self.value(b).row(r));
        }
        let v = Tensor2D::from_vec(sa.0, sa.1 + sb.1, data)?;
        Ok(self.push(v, Op::ConcatCols(a, b)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Res {
        let Some(&first) = parts.first() else {
            return Err(SubstrateError::ShapeMismatch("concat_rows of nothing".into()));
        };
        let cols = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.1 != cols {
                return Err(mismatch("concat_rows", self.shape(first), s));
            }
            rows += s.0;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor2D::from_vec(rows, cols, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    fn check_segments(&self, op: &str, a: Var, segs: &[usize]) -> Result<(), SubstrateError> {
        if segs.len() != self.shape(a).0 {
            return Err(SubstrateError::ShapeMismatch(format!(
                "{op}: {} segment ids for {} rows",
                segs.len(),
                self.shape(a).0
            )));
        }
        Ok(())
    }

    /// Row `s` of the result is the sum of the rows of `a` whose segment id is `s`.
    pub fn segment_sum(&mut self, a: Var, segs: &[usize], num_segments: usize) -> Res {
        self.check_segments("segment_sum", a, segs)?;
        if segs.iter().any(|&s| s >= num_segments) {
            return Err(SubstrateError::ShapeMismatch("segment id out of range".into()));
        }
        let cols = self.shape(a).1;
        let src = self.value(a);
        let mut v = Tensor2D::zeros(num_segments, cols);
        for (r, &s) in segs.iter().enumerate() {
            v.row_mut(s).iter_mut().zip(src.row(r)).for_each(|(x, &y)| *x = *x + y);
        }
        Ok(self.push(v, Op::SegmentSum(a, segs.to_vec())))
    }

    /// Softmax of a column vector within each segment.
    pub fn segment_softmax(&mut self, a: Var, segs: &[usize], num_segments: usize) -> Res {
        self.check_segments("segment_softmax", a, segs)?;
        if self.shape(a).1 != 1 {
            return Err(mismatch("segment_softmax", self.shape(a), (segs.len(), 1)));
        }
        let x = self.value(a).data();
        let mut max = vec![T::neg_infinity(); num_segments];
        for (i, &s) in segs.iter().enumerate() {
            max[s] = max[s].max(x[i]);
        }
        let e: Vec<T> = segs.iter().enumerate().map(|(i, &s)| (x[i] - max[s]).exp()).collect();
        let mut total = vec![T::zero(); num_segments];
        for (i, &s) in segs.iter().enumerate() {
            total[s] = total[s] + e[i];
        }
        let y = segs.iter().enumerate().map(|(i, &s)| e[i] / total[s]).collect();
        Ok(self.push(Tensor2D::column(y), Op::SegmentSoftmax(a, segs.to_vec())))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Res {
        let (rows, cols) = self.shape(a);
        if idx.iter().any(|&i| i >= rows) {
            return Err(SubstrateError::ShapeMismatch("gather_rows index out of range".into()));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        let v = Tensor2D::from_vec(idx.len(), cols, data)?;
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec())))
    }

    /// Places entry `k` of column vector `a` at `positions[k]` in a
    /// `rows x cols` matrix filled with `fill`. Fill entries carry no gradient.
    pub fn scatter(&mut self, a: Var, positions: &[(usize, usize)], rows: usize, cols: usize, fill: T) -> Res {
        let s = self.shape(a);
        if s != (positions.len(), 1) || positions.iter().any(|&(r, c)| r >= rows || c >= cols) {
            return Err(mismatch("scatter", s, (rows, cols)));
        }
        let mut v = Tensor2D::filled(rows, cols, fill);
        for (k, &(r, c)) in positions.iter().enumerate() {
            v.set(r, c, self.value(a).data()[k]);
        }
        Ok(self.push(v, Op::Scatter(a, positions.to_vec())))
    }

    /// Column vector holding `a[r, cols[r]]` for each row `r`.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Res {
        let s = self.shape(a);
        if cols.len() != s.0 || cols.iter().any(|&c| c >= s.1) {
            return Err(mismatch("pick_cols", s, (cols.len(), 1)));
        }
        let v = cols.iter().enumerate().map(|(r, &c)| self.value(a).get(r, c)).collect();
        Ok(self.push(Tensor2D::column(v), Op::PickCols(a, cols.to_vec())))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(a).map(f);
        self.push(v, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, move |x| if x > T::zero() { x } else { x * slope }, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, move |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Res {
        self.same_shape("minimum", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x.min(y));
        Ok(self.push(v, Op::Minimum(a, b)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|x| *x = *x - lse);
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor2D::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = T::lit((x.rows() * x.cols()) as f64);
        let v = Tensor2D::scalar(x.sum() / n);
        self.push(v, Op::Mean(a))
    }

    /// Reverse-mode pass from a `1 x 1` loss; entries are visited in exact
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, SubstrateError> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(SubstrateError::NotScalarLoss { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Tensor2D<T>>> = vec![None; self.entries.len()];
        grads[loss.0] = Some(Tensor2D::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor2D<T>, grads: &mut [Option<Tensor2D<T>>]) {
        let val = |v: Var| &self.entries[v.0].value;
        let out = &self.entries[i].value;
        let mut acc = |v: Var, d: Tensor2D<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        match &self.entries[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_t(val(*b)));
                acc(*b, val(*a).t_matmul(g));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                let mut db = Tensor2D::zeros(1, g.cols());
                for r in 0..g.rows() {
                    db.row_mut(0).iter_mut().zip(g.row(r)).for_each(|(x, &y)| *x = *x + y);
                }
                acc(*b, db);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::MulCol(a, c) => {
                let col = val(*c);
                let mut da = g.clone();
                let mut dc = Tensor2D::zeros(col.rows(), 1);
                for r in 0..g.rows() {
                    let s = col.data()[r];
                    let dot: T = g.row(r).iter().zip(val(*a).row(r)).map(|(&x, &y)| x * y).sum();
                    dc.data_mut()[r] = dot;
                    da.row_mut(r).iter_mut().for_each(|x| *x = *x * s);
                }
                acc(*a, da);
                acc(*c, dc);
            }
            Op::Scale(a, k) => acc(*a, g.map(|x| x * *k)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                let cb = val(*b).cols();
                let mut da = Vec::with_capacity(g.rows() * ca);
                let mut db = Vec::with_capacity(g.rows() * cb);
                for r in 0..g.rows() {
                    da.extend_from_slice(&g.row(r)[..ca]);
                    db.extend_from_slice(&g.row(r)[ca..]);
                }
                acc(*a, Tensor2D::from_vec(g.rows(), ca, da).expect("shape"));
                acc(*b, Tensor2D::from_vec(g.rows(), cb, db).expect("shape"));
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut start = 0;
                for p in parts {
                    let rows = val(*p).rows();
                    let d = g.data()[start * cols..(start + rows) * cols].to_vec();
                    acc(*p, Tensor2D::from_vec(rows, cols, d).expect("shape"));
                    start += rows;
                }
            }
            Op::SegmentSum(a, segs) => {
                let mut da = Tensor2D::zeros(segs.len(), g.cols());
                for (r, &s) in segs.iter().enumerate() {
                    da.row_mut(r).copy_from_slice(g.row(s));
                }
                acc(*a, da);
            }
            Op::SegmentSoftmax(a, segs) => {
                let y = out.data();
                let gd = g.data();
                let nseg = segs.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![T::zero(); nseg];
                for (k, &s) in segs.iter().enumerate() {
                    dot[s] = dot[s] + y[k] * gd[k];
                }
                let d = segs.iter().enumerate().map(|(k, &s)| y[k] * (gd[k] - dot[s])).collect();
                acc(*a, Tensor2D::column(d));
            }
            Op::GatherRows(a, idx) => {
                let (rows, cols) = val(*a).shape();
                let mut da = Tensor2D::zeros(rows, cols);
                for (k, &r) in idx.iter().enumerate() {
                    da.row_mut(r).iter_mut().zip(g.row(k)).for_each(|(x, &y)| *x = *x + y);
                }
                acc(*a, da);
            }
            Op::Scatter(a, pos) => {
                let d = pos.iter().map(|&(r, c)| g.get(r, c)).collect();
                acc(*a, Tensor2D::column(d));
            }
            Op::PickCols(a, cols) => {
                let (rows, n) = val(*a).shape();
                let mut da = Tensor2D::zeros(rows, n);
                for (r, &c) in cols.iter().enumerate() {
                    da.set(r, c, g.data()[r]);
                }
                acc(*a, da);
            }
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |d, x| if x > T::zero() { d } else { T::zero() })),
            Op::LeakyRelu(a, s) => acc(*a, g.zip_map(val(*a), |d, x| if x > T::zero() { d } else { d * *s })),
            Op::Sigmoid(a) => acc(*a, g.zip_map(out, |d, y| d * y * (T::one() - y))),
            Op::Exp(a) => acc(*a, g.zip_map(out, |d, y| d * y)),
            Op::Log(a) => acc(*a, g.zip_map(val(*a), |d, x| d / x)),
            Op::Square(a) => acc(*a, g.zip_map(val(*a), |d, x| d * (x + x))),
            Op::Clamp(a, lo, hi) => acc(
                *a,
                g.zip_map(val(*a), |d, x| if x > *lo && x < *hi { d } else { T::zero() }),
            ),
            Op::Minimum(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut da = g.clone();
                let mut db = g.clone();
                for k in 0..g.data().len() {
                    if va.data()[k] <= vb.data()[k] {
                        db.data_mut()[k] = T::zero();
                    } else {
                        da.data_mut()[k] = T::zero();
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::LogSoftmaxRows(a) => {
                let mut da = g.clone();
                for r in 0..g.rows() {
                    let total: T = g.row(r).iter().copied().sum();
                    let y = out.row(r);
                    da.row_mut(r)
                        .iter_mut()
                        .zip(y)
                        .for_each(|(d, &ly)| *d = *d - ly.exp() * total);
                }
                acc(*a, da);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Tensor2D::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                let n = T::lit((r * c) as f64);
                acc(*a, Tensor2D::filled(r, c, g.item() / n));
            }
        }
    }

    /// Parameter leaves recorded on this tape and their gradients.
    pub fn param_grads<'g>(&self, grads: &'g Gradients<T>) -> Vec<(ParamId, &'g Tensor2D<T>)> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| match e.op {
                Op::Param(id) => grads.grads[i].as_ref().map(|g| (id, g)),
                _ => None,
            })
            .collect()
    }
}
