//! Reverse-mode automatic differentiation over dynamically shaped `f64` arrays.
//!
//! A [`Tape`] records every operation as a node holding its value and a
//! backward closure. [`Tape::backward`] walks the nodes in reverse creation
//! order and accumulates gradients into every reachable node, so gradients
//! with respect to leaves (parameters, inputs) fall out of a single pass.
//!
//! Only the operations the model family needs are implemented; all of them
//! are f64 and single-threaded, which keeps training runs bit-reproducible.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &mut GradSink)>;

struct Node {
    value: Rc<ArrayD<f64>>,
    back: Option<BackwardFn>,
}

/// Accumulates parent gradients during the backward sweep.
pub struct GradSink<'a> {
    grads: &'a mut [Option<ArrayD<f64>>],
}

impl GradSink<'_> {
    fn add(&mut self, id: usize, g: ArrayD<f64>) {
        match &mut self.grads[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Sum `grad` down to `shape`, undoing numpy-style broadcasting.
fn reduce_to_shape(grad: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut g = grad;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, (&gd, &sd)) in g.shape().to_vec().iter().zip(shape).enumerate() {
        if sd == 1 && gd != 1 {
            let summed = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
            g = summed;
        }
    }
    if g.shape() != shape {
        g = g.into_shape_with_order(IxDyn(shape)).expect("reduce_to_shape");
    }
    g
}

fn broadcast_binary(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&out_shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&out_shape)).expect("broadcast rhs");
    let mut out = ArrayD::zeros(IxDyn(&out_shape));
    ndarray::Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let ad = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let bd = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            ad == bd || ad == 1 || bd == 1,
            "incompatible broadcast shapes {:?} vs {:?}",
            a,
            b
        );
        out[i] = ad.max(bd);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: ArrayD<f64>, back: Option<BackwardFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), back });
        Var { id: nodes.len() - 1 }
    }

    /// Insert a leaf (input or parameter). Gradients accumulate here.
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    /// Leaf holding a single scalar.
    pub fn scalar(&self, value: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[1]), value))
    }

    pub fn value(&self, v: Var) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes.borrow()[v.id].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar_value on non-scalar");
        *val.iter().next().unwrap()
    }

    /// Run the backward sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(ArrayD::from_elem(nodes[root.id].value.raw_dim(), 1.0));
        for id in (0..=root.id).rev() {
            let g = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            if let Some(back) = &nodes[id].back {
                let mut sink = GradSink { grads: &mut grads };
                back(&g, &mut sink);
            }
        }
        Gradients { grads }
    }

    // ---- elementwise binary ops (numpy-style broadcasting) ----

    fn binary(
        &self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        dfa: impl Fn(f64, f64) -> f64 + 'static,
        dfb: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = broadcast_binary(&av, &bv, f);
        let (ash, bsh) = (av.shape().to_vec(), bv.shape().to_vec());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let ga = broadcast_binary(&av, &bv, &dfa) * g;
                let gb = broadcast_binary(&av, &bv, &dfb) * g;
                sink.add(a.id, reduce_to_shape(ga, &ash));
                sink.add(b.id, reduce_to_shape(gb, &bsh));
            })),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
    }

    /// Four-quadrant arctangent with gradient clamped to zero at the origin.
    pub fn atan2(&self, s: Var, r: Var) -> Var {
        self.binary(
            s,
            r,
            |sv, rv| if sv == 0.0 && rv == 0.0 { 0.0 } else { sv.atan2(rv) },
            |sv, rv| {
                let d = sv * sv + rv * rv;
                if d == 0.0 {
                    0.0
                } else {
                    rv / d
                }
            },
            |sv, rv| {
                let d = sv * sv + rv * rv;
                if d == 0.0 {
                    0.0
                } else {
                    -sv / d
                }
            },
        )
    }

    /// `sqrt(r^2 + s^2)` with gradient clamped to zero at the origin.
    pub fn amplitude(&self, r: Var, s: Var) -> Var {
        self.binary(
            r,
            s,
            |rv, sv| rv.hypot(sv),
            |rv, sv| {
                let a = rv.hypot(sv);
                if a == 0.0 {
                    0.0
                } else {
                    rv / a
                }
            },
            |rv, sv| {
                let a = rv.hypot(sv);
                if a == 0.0 {
                    0.0
                } else {
                    sv / a
                }
            },
        )
    }

    // ---- elementwise unary ops ----

    fn unary(
        &self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Var {
        let av = self.value(a);
        let out = av.mapv(f);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a.id, av.mapv(&df) * g);
            })),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, |x| -x, |_| -1.0)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, move |x| x * c, move |_| c)
    }

    pub fn add_const(&self, a: Var, c: f64) -> Var {
        self.unary(a, move |x| x + c, |_| 1.0)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, f64::exp)
    }

    pub fn cos(&self, a: Var) -> Var {
        self.unary(a, f64::cos, |x| -x.sin())
    }

    pub fn sin(&self, a: Var) -> Var {
        self.unary(a, f64::sin, f64::cos)
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f64::abs, |x| x.signum())
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x| 2.0 * x)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, f64::sqrt, |x| if x == 0.0 { 0.0 } else { 0.5 / x.sqrt() })
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    // ---- reductions ----

    pub fn sum_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let s = av.sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Some(Box::new(move |g, sink| {
                let gv = g[[0]];
                sink.add(a.id, ArrayD::from_elem(IxDyn(&shape), gv));
            })),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping the axis with length 1.
    pub fn sum_axis_keep(&self, a: Var, axis: usize) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let out = av.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gb = g
                    .broadcast(IxDyn(&shape))
                    .expect("sum_axis_keep backward broadcast")
                    .to_owned();
                sink.add(a.id, gb);
            })),
        )
    }

    // ---- shape ops ----

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        let old = av.shape().to_vec();
        let out = av
            .as_ref()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(
                    a.id,
                    g.clone().into_shape_with_order(IxDyn(&old)).expect("reshape back"),
                );
            })),
        )
    }

    /// Permute axes; backward applies the inverse permutation.
    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let av = self.value(a);
        let out = av.as_ref().clone().permuted_axes(IxDyn(axes)).as_standard_layout().to_owned();
        let mut inv = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inv[ax] = i;
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(
                    a.id,
                    g.clone().permuted_axes(IxDyn(&inv)).as_standard_layout().to_owned(),
                );
            })),
        )
    }

    /// Swap the last two axes (2-D or 3-D).
    pub fn transpose_last2(&self, a: Var) -> Var {
        let nd = self.shape(a).len();
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(a, &axes)
    }

    /// Concatenate along `axis`.
    pub fn concat(&self, axis: usize, parts: &[Var]) -> Var {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat");
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut start = 0;
                for (&id, &len) in ids.iter().zip(&lens) {
                    let sl = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                        .to_owned();
                    sink.add(id, sl);
                    start += len;
                }
            })),
        )
    }

    /// Contiguous slice `[start, start+len)` along the last axis.
    pub fn slice_last(&self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let nd = av.ndim();
        let shape = av.shape().to_vec();
        let out = av
            .slice_axis(Axis(nd - 1), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut ga = ArrayD::zeros(IxDyn(&shape));
                let mut sl =
                    ga.slice_axis_mut(Axis(nd - 1), ndarray::Slice::from(start..start + len));
                sl += g;
                sink.add(a.id, ga);
            })),
        )
    }

    /// Strided slice along the last axis: indices `start, start+step, ...`.
    pub fn stride_slice_last(&self, a: Var, start: usize, step: usize) -> Var {
        let av = self.value(a);
        let nd = av.ndim();
        let shape = av.shape().to_vec();
        let out = av
            .slice_axis(
                Axis(nd - 1),
                ndarray::Slice::new(start as isize, None, step as isize),
            )
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut ga = ArrayD::zeros(IxDyn(&shape));
                let mut sl = ga.slice_axis_mut(
                    Axis(nd - 1),
                    ndarray::Slice::new(start as isize, None, step as isize),
                );
                sl += g;
                sink.add(a.id, ga);
            })),
        )
    }

    /// Gather rows of a 2-D array; backward scatter-adds.
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(av.ndim(), 2, "gather_rows expects 2-D");
        let d = av.shape()[1];
        let n = av.shape()[0];
        let mut out = ArrayD::zeros(IxDyn(&[indices.len(), d]));
        for (row, &i) in indices.iter().enumerate() {
            for c in 0..d {
                out[[row, c]] = av[[i, c]];
            }
        }
        let idx = indices.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut ga = ArrayD::zeros(IxDyn(&[n, d]));
                for (row, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        ga[[i, c]] += g[[row, c]];
                    }
                }
                sink.add(a.id, ga);
            })),
        )
    }

    // ---- matmul ----

    /// Matrix product: 2-D×2-D, 3-D×3-D (batched), or 3-D×2-D (shared rhs).
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = matmul_values(&av, &bv);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                // dL/dA = g · Bᵀ, dL/dB = Aᵀ · g, batched as appropriate.
                let ga = matmul_values(g, &transpose_last2_value(&bv));
                let gb = matmul_values(&transpose_last2_value(&av), g);
                sink.add(a.id, reduce_to_shape(ga, av.shape()));
                sink.add(b.id, reduce_to_shape(gb, bv.shape()));
            })),
        )
    }

    // ---- fused neural-net ops ----

    /// Softmax over the last axis.
    pub fn softmax_last(&self, a: Var) -> Var {
        let av = self.value(a);
        let nd = av.ndim();
        let mut out = av.as_ref().clone();
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let y = Rc::new(out.clone());
        let _ = nd;
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                // dx = y ⊙ (g − Σ_last(g ⊙ y))
                let mut gx = g * y.as_ref();
                let dot = gx.sum_axis(Axis(y.ndim() - 1)).insert_axis(Axis(y.ndim() - 1));
                let gb = g - &dot.broadcast(y.raw_dim()).unwrap();
                gx = &gb * y.as_ref();
                sink.add(a.id, gx);
            })),
        )
    }

    /// Mean cross-entropy over rows of `logits` (n×C). Targets outside
    /// `0..C` are ignored. Returns zero if nothing is valid.
    pub fn cross_entropy(&self, logits: Var, targets: &[i64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.ndim(), 2, "cross_entropy expects 2-D logits");
        let (n, c) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(targets.len(), n, "target count mismatch");
        let mut probs = lv.as_ref().clone();
        for mut row in probs.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let mut loss = 0.0;
        let mut valid = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if t >= 0 && (t as usize) < c {
                let p = probs[[i, t as usize]];
                // preserve NaN: f64::max would silently discard it
                loss -= if p.is_nan() { f64::NAN } else { p.max(1e-300) }.ln();
                valid += 1;
            }
        }
        let mean = if valid > 0 { loss / valid as f64 } else { 0.0 };
        let tgt = targets.to_vec();
        let probs = Rc::new(probs);
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), mean),
            Some(Box::new(move |g, sink| {
                let gv = g[[0]];
                let mut gx = ArrayD::zeros(IxDyn(&[n, c]));
                if valid > 0 {
                    let w = gv / valid as f64;
                    for (i, &t) in tgt.iter().enumerate() {
                        if t >= 0 && (t as usize) < c {
                            for j in 0..c {
                                gx[[i, j]] = w * probs[[i, j]];
                            }
                            gx[[i, t as usize]] -= w;
                        }
                    }
                }
                sink.add(logits.id, gx);
            })),
        )
    }

    /// Fused differentiable-sorting kernel: for each row `v` of an `(m, n)`
    /// input, emits the row-stochastic matrix
    /// `P[i, :] = softmax(((n-1-2i)·v - Σ_k |v_j - v_k|) / tau)`
    /// approximating the descending-sort permutation. Output is `(m, n, n)`.
    pub fn neural_sort(&self, v: Var, tau: f64) -> Var {
        let vv = self.value(v);
        assert_eq!(vv.ndim(), 2, "neural_sort expects (m, n) input");
        let (m, n) = (vv.shape()[0], vv.shape()[1]);
        let coeff: Vec<f64> = (0..n).map(|i| (n as f64) - 1.0 - 2.0 * i as f64).collect();
        // flat-slice kernels: dynamic-dimension indexing is far too slow
        // in these inner loops
        let vv_c: ArrayD<f64> = vv.as_standard_layout().to_owned();
        let mut out = ArrayD::zeros(IxDyn(&[m, n, n]));
        {
            let vs = vv_c.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            let mut a = vec![0.0; n];
            for r in 0..m {
                let row = &vs[r * n..(r + 1) * n];
                // a_j = sum_k |v_j - v_k|
                for j in 0..n {
                    a[j] = row.iter().map(|&vk| (row[j] - vk).abs()).sum();
                }
                for i in 0..n {
                    let orow = &mut os[(r * n + i) * n..(r * n + i + 1) * n];
                    let ci = coeff[i];
                    let mut maxv = f64::NEG_INFINITY;
                    for j in 0..n {
                        let z = (ci * row[j] - a[j]) / tau;
                        orow[j] = z;
                        maxv = maxv.max(z);
                    }
                    let mut denom = 0.0;
                    for e in orow.iter_mut() {
                        *e = (*e - maxv).exp();
                        denom += *e;
                    }
                    for e in orow.iter_mut() {
                        *e /= denom;
                    }
                }
            }
        }
        let p = Rc::new(out.clone());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let g_c: ArrayD<f64> = g.as_standard_layout().to_owned();
                let gs = g_c.as_slice().unwrap();
                let ps = p.as_slice().unwrap();
                let vs = vv_c.as_slice().unwrap();
                let mut gv = ArrayD::zeros(IxDyn(&[m, n]));
                let gvs = gv.as_slice_mut().unwrap();
                let mut t = vec![0.0; n]; // Σ_i dZ[i,j]
                let mut u = vec![0.0; n]; // Σ_i c_i dZ[i,j]
                for r in 0..m {
                    let row = &vs[r * n..(r + 1) * n];
                    t.fill(0.0);
                    u.fill(0.0);
                    // softmax backward per rank row: dZ = P ⊙ (G - Σ_j G⊙P) / τ
                    for i in 0..n {
                        let base = (r * n + i) * n;
                        let grow = &gs[base..base + n];
                        let prow = &ps[base..base + n];
                        let dot: f64 = (0..n).map(|j| grow[j] * prow[j]).sum();
                        let ci = coeff[i];
                        for j in 0..n {
                            let dz = prow[j] * (grow[j] - dot) / tau;
                            t[j] += dz;
                            u[j] += ci * dz;
                        }
                    }
                    // Z[i,j] = c_i v_j - Σ_k |v_j - v_k|, so with
                    // S_jk = sign(v_j - v_k):
                    // ∂L/∂v_p = u_p - t_p Σ_k S_pk + Σ_j t_j S_jp
                    let grow_out = &mut gvs[r * n..(r + 1) * n];
                    for pj in 0..n {
                        let vp = row[pj];
                        let s_row: f64 = row.iter().map(|&vk| (vp - vk).signum()).sum();
                        let cross: f64 = (0..n)
                            .map(|j| t[j] * (row[j] - vp).signum())
                            .sum();
                        grow_out[pj] = u[pj] - t[pj] * s_row + cross;
                    }
                }
                sink.add(v.id, gv);
            })),
        )
    }

    /// Nearest-neighbor 2× upsampling of a B×C×H×W tensor.
    pub fn upsample2x(&self, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(av.ndim(), 4, "upsample2x expects B×C×H×W");
        let (b, c, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2], av.shape()[3]);
        let mut out = ArrayD::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        out[[bi, ci, y, x]] = av[[bi, ci, y / 2, x / 2]];
                    }
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut ga = ArrayD::zeros(IxDyn(&[b, c, h, w]));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                ga[[bi, ci, y / 2, x / 2]] += g[[bi, ci, y, x]];
                            }
                        }
                    }
                }
                sink.add(a.id, ga);
            })),
        )
    }

    /// 2-D convolution, kernel k×k, zero padding `pad`, stride `stride`.
    /// Input B×Cin×H×W, weight Cout×Cin×k×k, bias Cout.
    pub fn conv2d(&self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(input);
        let wv = self.value(weight);
        let bv = self.value(bias);
        let (b, cin, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (cout, k) = (wv.shape()[0], wv.shape()[2]);
        assert_eq!(wv.shape()[1], cin, "conv2d channel mismatch");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        // flat-slice kernels: dynamic-dimension indexing is far too slow
        // in these inner loops
        let xv_c: ArrayD<f64> = xv.as_standard_layout().to_owned();
        let wv_c: ArrayD<f64> = wv.as_standard_layout().to_owned();
        let mut out = ArrayD::zeros(IxDyn(&[b, cout, ho, wo]));
        {
            let xs = xv_c.as_slice().unwrap();
            let ws = wv_c.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for bi in 0..b {
                for co in 0..cout {
                    let bias_v = bv[[co]];
                    let o_base = (bi * cout + co) * ho * wo;
                    os[o_base..o_base + ho * wo].fill(bias_v);
                    for ci in 0..cin {
                        let x_base = (bi * cin + ci) * h * w;
                        let w_base = (co * cin + ci) * k * k;
                        for ky in 0..k {
                            for kx in 0..k {
                                let wt = ws[w_base + ky * k + kx];
                                for oy in 0..ho {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let x_row = x_base + iy as usize * w;
                                    let o_row = o_base + oy * wo;
                                    for ox in 0..wo {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        os[o_row + ox] += wt * xs[x_row + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let g_c: ArrayD<f64> = g.as_standard_layout().to_owned();
                let gs = g_c.as_slice().unwrap();
                let xs = xv_c.as_slice().unwrap();
                let ws = wv_c.as_slice().unwrap();
                let mut gx = vec![0.0; b * cin * h * w];
                let mut gw = vec![0.0; cout * cin * k * k];
                let mut gb = vec![0.0; cout];
                for bi in 0..b {
                    for co in 0..cout {
                        let o_base = (bi * cout + co) * ho * wo;
                        for v in &gs[o_base..o_base + ho * wo] {
                            gb[co] += v;
                        }
                        for ci in 0..cin {
                            let x_base = (bi * cin + ci) * h * w;
                            let w_base = (co * cin + ci) * k * k;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let wt = ws[w_base + ky * k + kx];
                                    let mut acc_w = 0.0;
                                    for oy in 0..ho {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let x_row = x_base + iy as usize * w;
                                        let o_row = o_base + oy * wo;
                                        for ox in 0..wo {
                                            let ix =
                                                (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let go = gs[o_row + ox];
                                            gx[x_row + ix as usize] += go * wt;
                                            acc_w += go * xs[x_row + ix as usize];
                                        }
                                    }
                                    gw[w_base + ky * k + kx] += acc_w;
                                }
                            }
                        }
                    }
                }
                sink.add(
                    input.id,
                    ArrayD::from_shape_vec(IxDyn(&[b, cin, h, w]), gx).unwrap(),
                );
                sink.add(
                    weight.id,
                    ArrayD::from_shape_vec(IxDyn(&[cout, cin, k, k]), gw).unwrap(),
                );
                sink.add(bias.id, ArrayD::from_shape_vec(IxDyn(&[cout]), gb).unwrap());
            })),
        )
    }
}

fn transpose_last2_value(a: &ArrayD<f64>) -> ArrayD<f64> {
    let nd = a.ndim();
    let mut axes: Vec<usize> = (0..nd).collect();
    axes.swap(nd - 1, nd - 2);
    a.clone().permuted_axes(IxDyn(&axes)).as_standard_layout().to_owned()
}

/// Plain (non-recorded) matmul used by forward and backward paths.
pub fn matmul_values(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    use ndarray::{Ix2, Ix3};
    match (a.ndim(), b.ndim()) {
        (2, 2) => {
            let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
            let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
            a2.dot(&b2).into_dyn()
        }
        (3, 2) => {
            let a3 = a.view().into_dimensionality::<Ix3>().unwrap();
            let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
            let (bs, m, _k) = a3.dim();
            let n = b2.shape()[1];
            let mut out = ndarray::Array3::<f64>::zeros((bs, m, n));
            for i in 0..bs {
                out.index_axis_mut(Axis(0), i)
                    .assign(&a3.index_axis(Axis(0), i).dot(&b2));
            }
            out.into_dyn()
        }
        (3, 3) => {
            let a3 = a.view().into_dimensionality::<Ix3>().unwrap();
            let b3 = b.view().into_dimensionality::<Ix3>().unwrap();
            let (bs, m, _k) = a3.dim();
            assert_eq!(bs, b3.dim().0, "batched matmul batch mismatch");
            let n = b3.dim().2;
            let mut out = ndarray::Array3::<f64>::zeros((bs, m, n));
            for i in 0..bs {
                out.index_axis_mut(Axis(0), i)
                    .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i)));
            }
            out.into_dyn()
        }
        (2, 3) => {
            // broadcast lhs over the batch axis of rhs
            let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
            let b3 = b.view().into_dimensionality::<Ix3>().unwrap();
            let (bs, _k, n) = b3.dim();
            let m = a2.shape()[0];
            let mut out = ndarray::Array3::<f64>::zeros((bs, m, n));
            for i in 0..bs {
                out.index_axis_mut(Axis(0), i)
                    .assign(&a2.dot(&b3.index_axis(Axis(0), i)));
            }
            out.into_dyn()
        }
        other => panic!("unsupported matmul ranks {:?}", other),
    }
}
