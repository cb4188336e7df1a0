//! Reverse-mode automatic differentiation over 2-D f64 arrays.
//!
//! A `Tape` records each operation together with its pullback; `backward`
//! replays the records once in reverse topological order (which is simply
//! reverse insertion order). Node values are reference counted so pullbacks
//! capture them without copying the data.
//!
//! The second operand of the elementwise ops may broadcast from shapes
//! `(1, c)`, `(r, 1)`, or `(1, 1)` against a full `(r, c)` first operand;
//! gradients are reduced back to the operand's shape by summation.

use ndarray::{s, Array2, Axis};
use std::rc::Rc;

pub type M = Array2<f64>;

/// Handle to a node on a specific tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

type Pullback = Box<dyn Fn(&M) -> Vec<(usize, M)>>;

/// How a node routes gradient to its parents. Slices and gathers get
/// dedicated records so `backward` can accumulate into the parent buffer in
/// place instead of materializing a parent-sized temporary per use.
enum Record {
    Dense(Pullback),
    RowSlice { parent: usize, r0: usize },
    ColSlice { parent: usize, c0: usize },
    RowGather { parent: usize, idx: Vec<usize> },
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Rc<M>>,
    pullbacks: Vec<Option<Record>>,
}

/// Per-node gradients produced by one backward sweep.
///
/// Only leaves retain their gradients; interior-node gradients are consumed
/// as the sweep passes them.
pub struct Grads(Vec<Option<M>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&M> {
        self.0[v.0].as_ref()
    }
}

fn broadcast_to(src: &M, shape: (usize, usize)) -> M {
    let (r, c) = src.dim();
    if (r, c) == shape {
        return src.clone();
    }
    assert!(
        (r == shape.0 || r == 1) && (c == shape.1 || c == 1),
        "cannot broadcast {:?} to {:?}",
        (r, c),
        shape
    );
    Array2::from_shape_fn(shape, |(i, j)| src[[if r == 1 { 0 } else { i }, if c == 1 { 0 } else { j }]])
}

fn reduce_to(grad: &M, shape: (usize, usize)) -> M {
    let mut g = grad.clone();
    if shape.0 == 1 && g.dim().0 > 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.dim().1 > 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    assert_eq!(g.dim(), shape);
    g
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &M {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar node");
        m[[0, 0]]
    }

    fn push(&mut self, value: M, pullback: Option<Pullback>) -> Var {
        self.values.push(Rc::new(value));
        self.pullbacks.push(pullback.map(Record::Dense));
        Var(self.values.len() - 1)
    }

    fn push_record(&mut self, value: M, rec: Record) -> Var {
        self.values.push(Rc::new(value));
        self.pullbacks.push(Some(rec));
        Var(self.values.len() - 1)
    }

    /// For ops whose pullback captures the output value.
    fn push_shared(&mut self, value: Rc<M>, pullback: Pullback) -> Var {
        self.values.push(value);
        self.pullbacks.push(Some(Record::Dense(pullback)));
        Var(self.values.len() - 1)
    }

    /// Insert a node with no pullback. Gradients accumulate here and can be
    /// read after `backward`; constants are leaves whose gradient is ignored.
    pub fn leaf(&mut self, value: M) -> Var {
        self.push(value, None)
    }

    /// Leaf that shares an existing allocation (no copy of the data).
    pub fn leaf_rc(&mut self, value: Rc<M>) -> Var {
        self.values.push(value);
        self.pullbacks.push(None);
        Var(self.values.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.values[a.0].clone(), self.values[b.0].clone());
        let out = &*va + &broadcast_to(&vb, va.dim());
        let (sa, sb) = (va.dim(), vb.dim());
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a.0, reduce_to(g, sa)), (b.0, reduce_to(g, sb))]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.values[a.0].clone(), self.values[b.0].clone());
        let out = &*va - &broadcast_to(&vb, va.dim());
        let (sa, sb) = (va.dim(), vb.dim());
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a.0, reduce_to(g, sa)), (b.0, reduce_to(&(-g), sb))]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.values[a.0].clone(), self.values[b.0].clone());
        let bb = broadcast_to(&vb, va.dim());
        let out = &*va * &bb;
        let sb = vb.dim();
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a.0, g * &bb), (b.0, reduce_to(&(g * &*va), sb))]
            })),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.values[a.0].clone(), self.values[b.0].clone());
        let bb = broadcast_to(&vb, va.dim());
        let out = &*va / &bb;
        let sb = vb.dim();
        self.push(
            out,
            Some(Box::new(move |g| {
                let da = g / &bb;
                let db = -(g * &*va) / (&bb * &bb);
                vec![(a.0, da), (b.0, reduce_to(&db, sb))]
            })),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.values[a.0].clone(), self.values[b.0].clone());
        assert_eq!(va.dim().1, vb.dim().0, "matmul inner dims");
        let out = va.dot(&*vb);
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a.0, g.dot(&vb.t())), (b.0, va.t().dot(g))]
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let va = self.values[a.0].clone();
        let out = va.t().to_owned();
        self.push(out, Some(Box::new(move |g| vec![(a.0, g.t().to_owned())])))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.values[a.0].clone();
        self.push(&*va * c, Some(Box::new(move |g| vec![(a.0, g * c)])))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let va = self.values[a.0].clone();
        self.push(&*va + c, Some(Box::new(move |g| vec![(a.0, g.clone())])))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let va = self.values[a.0].clone();
        let out = Rc::new(va.mapv(f64::exp));
        let cap = out.clone();
        self.push_shared(out, Box::new(move |g| vec![(a.0, g * &*cap)]))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let va = self.values[a.0].clone();
        let out = va.mapv(f64::ln);
        self.push(out, Some(Box::new(move |g| vec![(a.0, g / &*va)])))
    }

    /// Square root with a zero-guarded pullback: the subgradient at 0 is 0,
    /// so masked-out entries cannot inject NaN through `0 * inf`.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let va = self.values[a.0].clone();
        let out = Rc::new(va.mapv(f64::sqrt));
        let cap = out.clone();
        self.push_shared(
            out,
            Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&cap, |d, &y| *d = if y > 0.0 { *d * 0.5 / y } else { 0.0 });
                vec![(a.0, dx)]
            }),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        let va = self.values[a.0].clone();
        let out = va.mapv(|x| x * x);
        self.push(
            out,
            Some(Box::new(move |g| vec![(a.0, g * &(&*va * 2.0))])),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let va = self.values[a.0].clone();
        let out = Rc::new(va.mapv(f64::tanh));
        let cap = out.clone();
        self.push_shared(
            out,
            Box::new(move |g| vec![(a.0, g * &cap.mapv(|y| 1.0 - y * y))]),
        )
    }

    /// Fused tanh-approximation GELU (one node instead of a seven-op chain).
    pub fn gelu(&mut self, a: Var) -> Var {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const K: f64 = 0.044715;
        let va = self.values[a.0].clone();
        let out = va.mapv(|x| 0.5 * x * (1.0 + (C * (x + K * x * x * x)).tanh()));
        self.push(
            out,
            Some(Box::new(move |g| {
                let dx = va.mapv(|x| {
                    let t = (C * (x + K * x * x * x)).tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x)
                });
                vec![(a.0, g * &dx)]
            })),
        )
    }

    /// Fused per-row layer normalization with affine parameters gamma/beta
    /// of shape (1, C): y = (x - mean) / sqrt(var + eps) * gamma + beta.
    pub fn layernorm_rows(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let va = self.values[a.0].clone();
        let vg = self.values[gamma.0].clone();
        let vb = self.values[beta.0].clone();
        let (r, c) = va.dim();
        assert_eq!(vg.dim(), (1, c), "gamma must be (1, C)");
        assert_eq!(vb.dim(), (1, c), "beta must be (1, C)");
        let mut xn = Array2::zeros((r, c));
        let mut inv_sigma = vec![0.0; r];
        let mut out = Array2::zeros((r, c));
        for i in 0..r {
            let row = va.row(i);
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_sigma[i] = is;
            for j in 0..c {
                let n = (va[[i, j]] - mean) * is;
                xn[[i, j]] = n;
                out[[i, j]] = n * vg[[0, j]] + vb[[0, j]];
            }
        }
        let xn = Rc::new(xn);
        self.push(
            out,
            Some(Box::new(move |g| {
                let (r, c) = g.dim();
                let mut dx = Array2::zeros((r, c));
                let mut dgamma = Array2::zeros((1, c));
                let mut dbeta = Array2::zeros((1, c));
                for i in 0..r {
                    let mut mean_dxn = 0.0;
                    let mut mean_dxn_xn = 0.0;
                    for j in 0..c {
                        let dxn = g[[i, j]] * vg[[0, j]];
                        mean_dxn += dxn;
                        mean_dxn_xn += dxn * xn[[i, j]];
                        dgamma[[0, j]] += g[[i, j]] * xn[[i, j]];
                        dbeta[[0, j]] += g[[i, j]];
                    }
                    mean_dxn /= c as f64;
                    mean_dxn_xn /= c as f64;
                    for j in 0..c {
                        let dxn = g[[i, j]] * vg[[0, j]];
                        dx[[i, j]] =
                            inv_sigma[i] * (dxn - mean_dxn - xn[[i, j]] * mean_dxn_xn);
                    }
                }
                vec![(a.0, dx), (gamma.0, dgamma), (beta.0, dbeta)]
            })),
        )
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let va = self.values[a.0].clone();
        let out = va.mapv(f64::cos);
        self.push(
            out,
            Some(Box::new(move |g| vec![(a.0, -(g * &va.mapv(f64::sin)))])),
        )
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let va = self.values[a.0].clone();
        let out = va.mapv(f64::sin);
        self.push(
            out,
            Some(Box::new(move |g| vec![(a.0, g * &va.mapv(f64::cos))])),
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.values[a.0].clone();
        let mut out = va.as_ref().clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let out = Rc::new(out);
        let cap = out.clone();
        self.push_shared(
            out,
            Box::new(move |g| {
                let mut dx = g * &*cap;
                for (mut drow, prow) in dx.axis_iter_mut(Axis(0)).zip(cap.axis_iter(Axis(0))) {
                    let dot: f64 = drow.sum();
                    drow.zip_mut_with(&prow, |d, &p| *d -= dot * p);
                }
                vec![(a.0, dx)]
            }),
        )
    }

    /// Row-wise log-sum-exp, shape `(r, 1)`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let va = self.values[a.0].clone();
        let (r, _) = va.dim();
        let mut out = Array2::zeros((r, 1));
        for (i, row) in va.axis_iter(Axis(0)).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out[[i, 0]] = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        }
        let cap = Rc::new(out.clone());
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut dx = va.as_ref().clone();
                for (i, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
                    let lse = cap[[i, 0]];
                    let gi = g[[i, 0]];
                    row.mapv_inplace(|x| gi * (x - lse).exp());
                }
                vec![(a.0, dx)]
            })),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let va = self.values[a.0].clone();
        let shape = va.dim();
        let out = Array2::from_elem((1, 1), va.sum());
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a.0, Array2::from_elem(shape, g[[0, 0]]))]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over columns, shape `(r, 1)`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let va = self.values[a.0].clone();
        let shape = va.dim();
        let out = va.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(
            out,
            Some(Box::new(move |g| vec![(a.0, broadcast_to(g, shape))])),
        )
    }

    /// Sum over rows, shape `(1, c)`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let va = self.values[a.0].clone();
        let shape = va.dim();
        let out = va.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(
            out,
            Some(Box::new(move |g| vec![(a.0, broadcast_to(g, shape))])),
        )
    }

    /// Gather rows by index; the same row may be selected repeatedly.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let va = self.values[a.0].clone();
        let (r, c) = va.dim();
        assert!(idx.iter().all(|&i| i < r), "select_rows index out of range");
        let mut out = Array2::zeros((idx.len(), c));
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).assign(&va.row(i));
        }
        self.push_record(out, Record::RowGather { parent: a.0, idx: idx.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<Rc<M>> = parts.iter().map(|v| self.values[v.0].clone()).collect();
        let c = vals[0].dim().1;
        assert!(vals.iter().all(|v| v.dim().1 == c), "concat_rows widths");
        let total: usize = vals.iter().map(|v| v.dim().0).sum();
        let mut out = Array2::zeros((total, c));
        let mut r0 = 0;
        let mut offsets = Vec::with_capacity(vals.len());
        for v in &vals {
            let r = v.dim().0;
            out.slice_mut(s![r0..r0 + r, ..]).assign(v);
            offsets.push((r0, r));
            r0 += r;
        }
        let parents: Vec<usize> = parts.iter().map(|v| v.0).collect();
        self.push(
            out,
            Some(Box::new(move |g| {
                parents
                    .iter()
                    .zip(&offsets)
                    .map(|(&p, &(r0, r))| (p, g.slice(s![r0..r0 + r, ..]).to_owned()))
                    .collect()
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<Rc<M>> = parts.iter().map(|v| self.values[v.0].clone()).collect();
        let r = vals[0].dim().0;
        assert!(vals.iter().all(|v| v.dim().0 == r), "concat_cols heights");
        let total: usize = vals.iter().map(|v| v.dim().1).sum();
        let mut out = Array2::zeros((r, total));
        let mut c0 = 0;
        let mut offsets = Vec::with_capacity(vals.len());
        for v in &vals {
            let c = v.dim().1;
            out.slice_mut(s![.., c0..c0 + c]).assign(v);
            offsets.push((c0, c));
            c0 += c;
        }
        let parents: Vec<usize> = parts.iter().map(|v| v.0).collect();
        self.push(
            out,
            Some(Box::new(move |g| {
                parents
                    .iter()
                    .zip(&offsets)
                    .map(|(&p, &(c0, c))| (p, g.slice(s![.., c0..c0 + c]).to_owned()))
                    .collect()
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let va = self.values[a.0].clone();
        let shape = va.dim();
        assert!(r0 < r1 && r1 <= shape.0);
        let out = va.slice(s![r0..r1, ..]).to_owned();
        self.push_record(out, Record::RowSlice { parent: a.0, r0 })
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let va = self.values[a.0].clone();
        let shape = va.dim();
        assert!(c0 < c1 && c1 <= shape.1);
        let out = va.slice(s![.., c0..c1]).to_owned();
        self.push_record(out, Record::ColSlice { parent: a.0, c0 })
    }

    /// Elementwise `max(a, c)`; the subgradient at the kink goes to zero.
    pub fn max_with_scalar(&mut self, a: Var, c: f64) -> Var {
        let va = self.values[a.0].clone();
        let out = va.mapv(|x| x.max(c));
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&va, |d, &x| {
                    if x <= c {
                        *d = 0.0;
                    }
                });
                vec![(a.0, dx)]
            })),
        )
    }

    /// Per-row minimum over columns, shape `(r, 1)`. The pullback routes each
    /// row's gradient to the first attaining column only.
    pub fn row_min(&mut self, a: Var) -> Var {
        let va = self.values[a.0].clone();
        let (r, c) = va.dim();
        let mut out = Array2::zeros((r, 1));
        let mut arg = vec![0usize; r];
        for i in 0..r {
            let mut best = f64::INFINITY;
            for j in 0..c {
                if va[[i, j]] < best {
                    best = va[[i, j]];
                    arg[i] = j;
                }
            }
            out[[i, 0]] = best;
        }
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut dx = Array2::zeros((r, c));
                for i in 0..r {
                    dx[[i, arg[i]]] = g[[i, 0]];
                }
                vec![(a.0, dx)]
            })),
        )
    }

    /// Single reverse sweep accumulating gradients from all seeds at once.
    pub fn backward(&self, seeds: &[(Var, M)]) -> Grads {
        let mut grads: Vec<Option<M>> = vec![None; self.values.len()];
        for (v, g) in seeds {
            assert_eq!(self.values[v.0].dim(), g.dim(), "seed shape");
            match &mut grads[v.0] {
                Some(acc) => *acc += g,
                slot => *slot = Some(g.clone()),
            }
        }
        for i in (0..self.values.len()).rev() {
            let Some(rec) = &self.pullbacks[i] else { continue }; // leaf: keep grad
            let Some(g) = grads[i].take() else { continue };
            match rec {
                Record::Dense(pb) => {
                    for (p, pg) in pb(&g) {
                        debug_assert!(p < i, "pullback must point to earlier nodes");
                        match &mut grads[p] {
                            Some(acc) => *acc += &pg,
                            slot => *slot = Some(pg),
                        }
                    }
                }
                Record::RowSlice { parent, r0 } => {
                    let shape = self.values[*parent].dim();
                    let acc = grads[*parent].get_or_insert_with(|| Array2::zeros(shape));
                    let mut region = acc.slice_mut(s![*r0..*r0 + g.dim().0, ..]);
                    region += &g;
                }
                Record::ColSlice { parent, c0 } => {
                    let shape = self.values[*parent].dim();
                    let acc = grads[*parent].get_or_insert_with(|| Array2::zeros(shape));
                    let mut region = acc.slice_mut(s![.., *c0..*c0 + g.dim().1]);
                    region += &g;
                }
                Record::RowGather { parent, idx } => {
                    let shape = self.values[*parent].dim();
                    let acc = grads[*parent].get_or_insert_with(|| Array2::zeros(shape));
                    for (k, &r) in idx.iter().enumerate() {
                        let mut row = acc.row_mut(r);
                        row += &g.row(k);
                    }
                }
            }
        }
        Grads(grads)
    }
}

/// Maximum relative error between analytic and central-difference gradients
/// of a scalar-valued tape program over the given parameters.
///
/// Relative error is `|a - n| / max(0.01, |a|, |n|)`, which degrades to an
/// absolute tolerance for near-zero gradients.
pub fn fd_max_rel_err<F>(params: &[M], eval: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let run = |ps: &[M]| -> (f64, Vec<Option<M>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = eval(&mut tape, &vars);
        assert_eq!(tape.value(out).dim(), (1, 1), "fd check needs scalar output");
        let val = tape.scalar(out);
        let grads = tape.backward(&[(out, Array2::from_elem((1, 1), 1.0))]);
        let by_param = vars.iter().map(|&v| grads.get(v).cloned()).collect();
        (val, by_param)
    };
    let (_, analytic) = run(params);
    let mut work: Vec<M> = params.to_vec();
    let mut max_rel = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let ga = analytic[pi]
            .clone()
            .unwrap_or_else(|| Array2::zeros(p.dim()));
        for i in 0..p.dim().0 {
            for j in 0..p.dim().1 {
                let orig = p[[i, j]];
                let h = 1e-5 * orig.abs().max(1.0);
                work[pi][[i, j]] = orig + h;
                let (fp, _) = {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = work.iter().map(|m| tape.leaf(m.clone())).collect();
                    let out = eval(&mut tape, &vars);
                    (tape.scalar(out), ())
                };
                work[pi][[i, j]] = orig - h;
                let fm = {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = work.iter().map(|m| tape.leaf(m.clone())).collect();
                    let out = eval(&mut tape, &vars);
                    tape.scalar(out)
                };
                work[pi][[i, j]] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let a = ga[[i, j]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(0.01);
                max_rel = max_rel.max(rel);
            }
        }
    }
    max_rel
}
