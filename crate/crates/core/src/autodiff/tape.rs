//! The recording tape.
//!
//! Operations execute eagerly and push a node describing how to route
//! gradients to their parents. `backward` walks the nodes in reverse
//! creation order (which is already a topological order) and accumulates
//! gradients for every node that transitively depends on a
//! `requires_grad` leaf.

use super::raw;
use super::Elem;
use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

pub struct Tape<T: Elem> {
    nodes: Vec<Node<T>>,
}

struct Node<T: Elem> {
    value: ArrayD<T>,
    needs_grad: bool,
    op: Op<T>,
}

enum Op<T: Elem> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        kernel: usize,
        stride: usize,
        pad: usize,
        cols: Array2<T>,
        in_shape: (usize, usize, usize),
    },
    Relu {
        x: Var,
    },
    Gap {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    /// Per-pixel dot product of one classifier weight row with the
    /// feature block: the raw activation map of a class.
    CamProject {
        f: Var,
        w: Var,
        class: usize,
    },
    MaxNormalize {
        x: Var,
    },
    /// Broadcast a spatial soft mask over every channel of a feature block.
    MaskMul {
        f: Var,
        m: Var,
    },
    BilinearUp {
        x: Var,
        factor: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Abs {
        x: Var,
    },
    MulConstArr {
        x: Var,
        c: ArrayD<T>,
    },
    SumAll {
        x: Var,
    },
    PickIndex {
        x: Var,
        index: usize,
    },
    /// Mean binary cross-entropy on logits; backward is `(sigmoid(z)-y)/K`.
    BceWithLogits {
        z: Var,
        y: Array1<T>,
    },
    /// Cross-entropy between `softmax(z)` and a fixed soft target
    /// distribution; backward is `softmax(z)-t`.
    SceSoftTarget {
        z: Var,
        t: Array1<T>,
    },
    /// Mean per-pixel cross-entropy over `(K+1, H, W)` logits against a
    /// class-index grid; pixels labelled 255 are excluded.
    SegCrossEntropy {
        z: Var,
        classes: Array2<u8>,
        n_valid: usize,
    },
}

pub struct Gradients<T: Elem> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Elem> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads[v.0].as_ref()
    }
    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.grads[v.0].take()
    }
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(64) }
    }

    pub fn leaf(&mut self, value: ArrayD<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    /// Extract a 0-d scalar node's value.
    pub fn scalar(&self, v: Var) -> T {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.ndim(), 0, "scalar() on non-scalar node");
        *val.first().expect("0-d array has one element")
    }

    fn push(&mut self, value: ArrayD<T>, needs_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().expect("conv input 3-d");
        let wv = self.value(w).view().into_dimensionality::<Ix2>().expect("conv weight 2-d");
        let bv = b.map(|b| {
            self.value(b).view().into_dimensionality::<Ix1>().expect("conv bias 1-d")
        });
        let in_shape = xv.dim();
        let (out, cols) = raw::conv2d(xv, wv, bv, kernel, stride, pad);
        let needs =
            self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        self.push(
            out.into_dyn(),
            needs,
            Op::Conv2d { x, w, b, kernel, stride, pad, cols, in_shape },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(T::zero()));
        let needs = self.needs(x);
        self.push(out, needs, Op::Relu { x })
    }

    pub fn gap(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().expect("gap input 3-d");
        let out = raw::gap(xv);
        let needs = self.needs(x);
        self.push(out.into_dyn(), needs, Op::Gap { x })
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix1>().expect("linear input 1-d");
        let wv = self.value(w).view().into_dimensionality::<Ix2>().expect("linear weight 2-d");
        assert_eq!(wv.ncols(), xv.len(), "linear: weight/input dims");
        let mut out = wv.dot(&xv);
        if let Some(b) = b {
            let bv = self.value(b).view().into_dimensionality::<Ix1>().expect("bias 1-d");
            out = out + bv;
        }
        let needs =
            self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        self.push(out.into_dyn(), needs, Op::Linear { x, w, b })
    }

    pub fn cam_project(&mut self, f: Var, w: Var, class: usize) -> Var {
        let fv = self.value(f).view().into_dimensionality::<Ix3>().expect("features 3-d");
        let wv = self.value(w).view().into_dimensionality::<Ix2>().expect("weights 2-d");
        assert!(class < wv.nrows(), "class index out of range");
        assert_eq!(wv.ncols(), fv.dim().0, "channel mismatch");
        let (c, h, wd) = fv.dim();
        let mut out = Array2::<T>::zeros((h, wd));
        for ci in 0..c {
            let wk = wv[(class, ci)];
            out.zip_mut_with(&fv.index_axis(Axis(0), ci), |o, &x| *o = *o + wk * x);
        }
        let needs = self.needs(f) || self.needs(w);
        self.push(out.into_dyn(), needs, Op::CamProject { f, w, class })
    }

    pub fn max_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().expect("map 2-d");
        let out = raw::max_normalize(xv);
        let needs = self.needs(x);
        self.push(out.into_dyn(), needs, Op::MaxNormalize { x })
    }

    pub fn mask_mul(&mut self, f: Var, m: Var) -> Var {
        let fv = self.value(f).view().into_dimensionality::<Ix3>().expect("features 3-d");
        let mv = self.value(m).view().into_dimensionality::<Ix2>().expect("mask 2-d");
        assert_eq!((fv.dim().1, fv.dim().2), mv.dim(), "mask/feature spatial dims");
        let mut out = fv.to_owned();
        for mut plane in out.axis_iter_mut(Axis(0)) {
            plane.zip_mut_with(&mv, |p, &m| *p = *p * m);
        }
        let needs = self.needs(f) || self.needs(m);
        self.push(out.into_dyn(), needs, Op::MaskMul { f, m })
    }

    pub fn bilinear_up(&mut self, x: Var, factor: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().expect("upsample input 3-d");
        let out = raw::bilinear_upsample(xv, factor);
        let needs = self.needs(x);
        self.push(out.into_dyn(), needs, Op::BilinearUp { x, factor })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let out = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, needs, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let out = self.value(a) - self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, needs, Op::Sub { a, b })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).mapv(|v| v * c);
        let needs = self.needs(x);
        self.push(out, needs, Op::Scale { x, c })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.abs());
        let needs = self.needs(x);
        self.push(out, needs, Op::Abs { x })
    }

    pub fn mul_const_arr(&mut self, x: Var, c: ArrayD<T>) -> Var {
        assert_eq!(self.value(x).shape(), c.shape(), "mul_const_arr shapes");
        let out = self.value(x) * &c;
        let needs = self.needs(x);
        self.push(out, needs, Op::MulConstArr { x, c })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), needs, Op::SumAll { x })
    }

    pub fn pick_index(&mut self, x: Var, index: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix1>().expect("pick on 1-d");
        assert!(index < xv.len(), "pick index range");
        let v = xv[index];
        let needs = self.needs(x);
        self.push(ArrayD::from_elem(IxDyn(&[]), v), needs, Op::PickIndex { x, index })
    }

    pub fn bce_with_logits(&mut self, z: Var, y: Array1<T>) -> Var {
        let zv = self.value(z).view().into_dimensionality::<Ix1>().expect("logits 1-d");
        assert_eq!(zv.len(), y.len(), "bce dims");
        let k_inv = T::from_f64(1.0 / y.len() as f64);
        let mut loss = T::zero();
        for (&zi, &yi) in zv.iter().zip(y.iter()) {
            loss = loss + yi * softplus(-zi) + (T::one() - yi) * softplus(zi);
        }
        loss = loss * k_inv;
        let needs = self.needs(z);
        self.push(ArrayD::from_elem(IxDyn(&[]), loss), needs, Op::BceWithLogits { z, y })
    }

    pub fn sce_soft_target(&mut self, z: Var, t: Array1<T>) -> Var {
        let zv = self.value(z).view().into_dimensionality::<Ix1>().expect("logits 1-d");
        assert_eq!(zv.len(), t.len(), "sce dims");
        let ls = raw::log_softmax(zv);
        let mut loss = T::zero();
        for (&li, &ti) in ls.iter().zip(t.iter()) {
            loss = loss - ti * li;
        }
        let needs = self.needs(z);
        self.push(ArrayD::from_elem(IxDyn(&[]), loss), needs, Op::SceSoftTarget { z, t })
    }

    pub fn seg_cross_entropy(&mut self, z: Var, classes: Array2<u8>) -> Var {
        let zv = self.value(z).view().into_dimensionality::<Ix3>().expect("seg logits 3-d");
        let (k1, h, w) = zv.dim();
        assert_eq!((h, w), classes.dim(), "seg logits/labels spatial dims");
        let mut loss = T::zero();
        let mut n_valid = 0usize;
        for i in 0..h {
            for j in 0..w {
                let cls = classes[(i, j)];
                if cls == 255 {
                    continue;
                }
                assert!((cls as usize) < k1, "class id exceeds K");
                n_valid += 1;
                let col: Array1<T> = (0..k1).map(|k| zv[(k, i, j)]).collect();
                let ls = raw::log_softmax(col.view());
                loss = loss - ls[cls as usize];
            }
        }
        assert!(n_valid > 0, "all pixels ignored");
        loss = loss * T::from_f64(1.0 / n_valid as f64);
        let needs = self.needs(z);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            needs,
            Op::SegCrossEntropy { z, classes, n_valid },
        )
    }

    /// Reverse pass from a scalar node. Returns gradients for every node
    /// that required them (leaves and intermediates alike).
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(self.nodes[out.0].value.ndim(), 0, "backward from non-scalar");
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(ArrayD::from_elem(IxDyn(&[]), T::one()));

        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, kernel, stride, pad, cols, in_shape } => {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("conv grad 3-d");
                let wv =
                    self.value(*w).view().into_dimensionality::<Ix2>().expect("conv weight");
                let (dx, dw, db) = raw::conv2d_backward(
                    g3,
                    cols,
                    wv,
                    *in_shape,
                    *kernel,
                    *stride,
                    *pad,
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    acc(grads, *x, dx.into_dyn());
                }
                if self.needs(*w) {
                    acc(grads, *w, dw.into_dyn());
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        acc(grads, *b, db.into_dyn());
                    }
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let mut dx = g.clone();
                    dx.zip_mut_with(self.value(*x), |d, &v| {
                        if v <= T::zero() {
                            *d = T::zero();
                        }
                    });
                    acc(grads, *x, dx);
                }
            }
            Op::Gap { x } => {
                if self.needs(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let inv = T::from_f64(1.0 / (h * w) as f64);
                    let g1 = g.view().into_dimensionality::<Ix1>().expect("gap grad 1-d");
                    let mut dx = ArrayD::<T>::zeros(IxDyn(&shape));
                    for ci in 0..c {
                        let gv = g1[ci] * inv;
                        dx.index_axis_mut(Axis(0), ci).fill(gv);
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Linear { x, w, b } => {
                let g1 = g.view().into_dimensionality::<Ix1>().expect("linear grad 1-d");
                let wv = self.value(*w).view().into_dimensionality::<Ix2>().expect("weight");
                let xv = self.value(*x).view().into_dimensionality::<Ix1>().expect("input");
                if self.needs(*x) {
                    acc(grads, *x, wv.t().dot(&g1).into_dyn());
                }
                if self.needs(*w) {
                    let mut dw = Array2::<T>::zeros(wv.dim());
                    for (mut row, &gi) in dw.rows_mut().into_iter().zip(g1.iter()) {
                        row.zip_mut_with(&xv, |r, &x| *r = gi * x);
                    }
                    acc(grads, *w, dw.into_dyn());
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        acc(grads, *b, g1.to_owned().into_dyn());
                    }
                }
            }
            Op::CamProject { f, w, class } => {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("map grad 2-d");
                let fv = self.value(*f).view().into_dimensionality::<Ix3>().expect("features");
                let wv = self.value(*w).view().into_dimensionality::<Ix2>().expect("weights");
                let (c, _, _) = fv.dim();
                if self.needs(*f) {
                    let mut df = ndarray::Array3::<T>::zeros(fv.dim());
                    for ci in 0..c {
                        let wk = wv[(*class, ci)];
                        df.index_axis_mut(Axis(0), ci)
                            .zip_mut_with(&g2, |d, &gv| *d = wk * gv);
                    }
                    acc(grads, *f, df.into_dyn());
                }
                if self.needs(*w) {
                    let mut dw = Array2::<T>::zeros(wv.dim());
                    for ci in 0..c {
                        let plane = fv.index_axis(Axis(0), ci);
                        let mut s = T::zero();
                        for (&gv, &xv) in g2.iter().zip(plane.iter()) {
                            s = s + gv * xv;
                        }
                        dw[(*class, ci)] = s;
                    }
                    acc(grads, *w, dw.into_dyn());
                }
            }
            Op::MaxNormalize { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x).view().into_dimensionality::<Ix2>().expect("map");
                    let g2 = g.view().into_dimensionality::<Ix2>().expect("map grad");
                    let relu = xv.mapv(|v| v.max(T::zero()));
                    let m = relu.fold(T::zero(), |a, &b| a.max(b));
                    let mut dx = Array2::<T>::zeros(xv.dim());
                    if m > T::zero() {
                        // out = relu/m with m = relu[argmax];
                        // d relu[j] = g[j]/m - [j == argmax] * <g, relu>/m^2
                        let argmax = relu
                            .indexed_iter()
                            .fold(((0, 0), T::neg_infinity()), |acc, (idx, &v)| {
                                if v > acc.1 {
                                    (idx, v)
                                } else {
                                    acc
                                }
                            })
                            .0;
                        let inner = g2
                            .iter()
                            .zip(relu.iter())
                            .fold(T::zero(), |a, (&gi, &ri)| a + gi * ri);
                        ndarray::Zip::from(&mut dx).and(&g2).and(&xv).for_each(|d, &gi, &xi| {
                            if xi > T::zero() {
                                *d = gi / m;
                            }
                        });
                        if xv[argmax] > T::zero() {
                            dx[argmax] = dx[argmax] - inner / (m * m);
                        }
                    }
                    acc(grads, *x, dx.into_dyn());
                }
            }
            Op::MaskMul { f, m } => {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("grad 3-d");
                let fv = self.value(*f).view().into_dimensionality::<Ix3>().expect("features");
                let mv = self.value(*m).view().into_dimensionality::<Ix2>().expect("mask");
                if self.needs(*f) {
                    let mut df = fv.to_owned();
                    for (mut plane, gplane) in
                        df.axis_iter_mut(Axis(0)).zip(g3.axis_iter(Axis(0)))
                    {
                        plane.assign(&gplane);
                        plane.zip_mut_with(&mv, |p, &m| *p = *p * m);
                    }
                    acc(grads, *f, df.into_dyn());
                }
                if self.needs(*m) {
                    let mut dm = Array2::<T>::zeros(mv.dim());
                    for (gplane, fplane) in g3.axis_iter(Axis(0)).zip(fv.axis_iter(Axis(0))) {
                        ndarray::Zip::from(&mut dm).and(&gplane).and(&fplane).for_each(
                            |d, &gv, &xv| {
                                *d = *d + gv * xv;
                            },
                        );
                    }
                    acc(grads, *m, dm.into_dyn());
                }
            }
            Op::BilinearUp { x, factor } => {
                if self.needs(*x) {
                    let g3 = g.view().into_dimensionality::<Ix3>().expect("grad 3-d");
                    let shape = self.value(*x).shape().to_vec();
                    let dx = raw::bilinear_upsample_backward(
                        g3,
                        (shape[0], shape[1], shape[2]),
                        *factor,
                    );
                    acc(grads, *x, dx.into_dyn());
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    acc(grads, *b, g.mapv(|v| -v));
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    acc(grads, *x, g.mapv(|v| v * *c));
                }
            }
            Op::Abs { x } => {
                if self.needs(*x) {
                    let mut dx = g.clone();
                    dx.zip_mut_with(self.value(*x), |d, &v| {
                        if v < T::zero() {
                            *d = -*d;
                        } else if v == T::zero() {
                            *d = T::zero();
                        }
                    });
                    acc(grads, *x, dx);
                }
            }
            Op::MulConstArr { x, c } => {
                if self.needs(*x) {
                    acc(grads, *x, g * c);
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let gv = *g.first().expect("scalar grad");
                    acc(grads, *x, ArrayD::from_elem(self.value(*x).raw_dim(), gv));
                }
            }
            Op::PickIndex { x, index } => {
                if self.needs(*x) {
                    let gv = *g.first().expect("scalar grad");
                    let mut dx = ArrayD::<T>::zeros(self.value(*x).raw_dim());
                    dx[*index] = gv;
                    acc(grads, *x, dx);
                }
            }
            Op::BceWithLogits { z, y } => {
                if self.needs(*z) {
                    let gv = *g.first().expect("scalar grad");
                    let zv = self.value(*z).view().into_dimensionality::<Ix1>().expect("logits");
                    let k_inv = T::from_f64(1.0 / y.len() as f64);
                    let dz: Array1<T> = zv
                        .iter()
                        .zip(y.iter())
                        .map(|(&zi, &yi)| gv * (raw::sigmoid(zi) - yi) * k_inv)
                        .collect();
                    acc(grads, *z, dz.into_dyn());
                }
            }
            Op::SceSoftTarget { z, t } => {
                if self.needs(*z) {
                    let gv = *g.first().expect("scalar grad");
                    let zv = self.value(*z).view().into_dimensionality::<Ix1>().expect("logits");
                    let sm = raw::softmax(zv);
                    let dz: Array1<T> =
                        sm.iter().zip(t.iter()).map(|(&si, &ti)| gv * (si - ti)).collect();
                    acc(grads, *z, dz.into_dyn());
                }
            }
            Op::SegCrossEntropy { z, classes, n_valid } => {
                if self.needs(*z) {
                    let gv = *g.first().expect("scalar grad");
                    let zv = self.value(*z).view().into_dimensionality::<Ix3>().expect("logits");
                    let (k1, h, w) = zv.dim();
                    let scale = gv * T::from_f64(1.0 / *n_valid as f64);
                    let mut dz = ndarray::Array3::<T>::zeros((k1, h, w));
                    for i in 0..h {
                        for j in 0..w {
                            let cls = classes[(i, j)];
                            if cls == 255 {
                                continue;
                            }
                            let col: Array1<T> = (0..k1).map(|k| zv[(k, i, j)]).collect();
                            let sm = raw::softmax(col.view());
                            for k in 0..k1 {
                                let one = if k == cls as usize { T::one() } else { T::zero() };
                                dz[(k, i, j)] = (sm[k] - one) * scale;
                            }
                        }
                    }
                    acc(grads, *z, dz.into_dyn());
                }
            }
        }
    }
}

fn softplus<T: Elem>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn acc<T: Elem>(grads: &mut [Option<ArrayD<T>>], v: Var, delta: ArrayD<T>) {
    match &mut grads[v.0] {
        Some(a) => *a += &delta,
        slot @ None => *slot = Some(delta),
    }
}
