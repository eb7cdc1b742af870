use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::Tensor;

type Backward = Box<dyn Fn(&Tensor) -> Vec<(usize, Tensor)>>;

struct Node {
    value: Rc<Tensor>,
    backward: Option<Backward>,
    requires_grad: bool,
}

/// Reverse-mode tape. One graph per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert(Rc::new(value), None, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(Rc::new(value), None, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn insert(&self, value: Rc<Tensor>, backward: Option<Backward>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, backward, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    pub(crate) fn push<'g>(
        &'g self,
        value: Rc<Tensor>,
        parents: &[Var<'g>],
        backward: impl Fn(&Tensor) -> Vec<(usize, Tensor)> + 'static,
    ) -> Var<'g> {
        if parents.iter().any(|p| p.requires_grad()) {
            self.insert(value, Some(Box::new(backward)), true)
        } else {
            self.insert(value, None, false)
        }
    }

    /// Backpropagate from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(bw) = &nodes[id].backward {
                for (pid, contrib) in bw(&g) {
                    if !nodes[pid].requires_grad {
                        continue;
                    }
                    match &mut grads[pid] {
                        Some(acc) => acc.add_assign(&contrib),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Gradients { grads, shapes }
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Cut the graph: same value, no gradient.
    pub fn detach(self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn map(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let (xid, yc) = (self.id, y.clone());
        self.graph.push(y, &[self], move |g| {
            let dx: Vec<f64> = g
                .data()
                .iter()
                .zip(x.data())
                .zip(yc.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![(xid, Tensor::new(x.shape(), dx))]
        })
    }

    fn binary(
        self,
        other: Var<'g>,
        f: impl Fn(f64, f64) -> f64,
        dfa: impl Fn(f64, f64) -> f64 + 'static,
        dfb: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "binary op shape mismatch");
        let y = Rc::new(a.zip_map(&b, f));
        let (aid, bid) = (self.id, other.id);
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        self.graph.push(y, &[self, other], move |g| {
            let mut out = Vec::with_capacity(2);
            if ra {
                let d = g.data().iter().zip(a.data()).zip(b.data()).map(|((&g, &x), &y)| g * dfa(x, y));
                out.push((aid, Tensor::new(a.shape(), d.collect())));
            }
            if rb {
                let d = g.data().iter().zip(a.data()).zip(b.data()).map(|((&g, &x), &y)| g * dfb(x, y));
                out.push((bid, Tensor::new(b.shape(), d.collect())));
            }
            out
        })
    }

    pub fn add(self, o: Var<'g>) -> Var<'g> {
        self.binary(o, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(self, o: Var<'g>) -> Var<'g> {
        self.binary(o, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(self, o: Var<'g>) -> Var<'g> {
        self.binary(o, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(self, o: Var<'g>) -> Var<'g> {
        self.binary(o, |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.map(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.map(move |x| x + c, |_, _| 1.0)
    }

    pub fn square(self) -> Var<'g> {
        self.map(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.map(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn abs(self) -> Var<'g> {
        self.map(f64::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn exp(self) -> Var<'g> {
        self.map(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'g> {
        self.map(f64::ln, |x, _| 1.0 / x)
    }

    pub fn recip(self) -> Var<'g> {
        self.map(|x| 1.0 / x, |_, y| -y * y)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.map(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(self) -> Var<'g> {
        self.map(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        self.map(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(self) -> Var<'g> {
        self.map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p(), |x, _| sigmoid(x))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.map(move |x| x.clamp(lo, hi), move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 })
    }

    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let y = Rc::new(Tensor::scalar(x.sum()));
        let (xid, shape) = (self.id, x.shape().to_vec());
        self.graph.push(y, &[self], move |g| vec![(xid, Tensor::full(&shape, g.item()))])
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = Rc::new((*x).clone().reshaped(shape));
        let xid = self.id;
        self.graph.push(y, &[self], move |g| vec![(xid, g.clone().reshaped(&old))])
    }

    /// `out[i] = self[index[i]]`; gradient scatters back.
    pub fn gather(self, index: Rc<Vec<usize>>, out_shape: &[usize]) -> Var<'g> {
        let x = self.value();
        assert_eq!(index.len(), out_shape.iter().product::<usize>(), "gather index length");
        let data = index.iter().map(|&i| x.data()[i]).collect();
        let y = Rc::new(Tensor::new(out_shape, data));
        let (xid, in_shape) = (self.id, x.shape().to_vec());
        self.graph.push(y, &[self], move |g| {
            let mut dx = Tensor::zeros(&in_shape);
            let d = dx.data_mut();
            for (&i, &gv) in index.iter().zip(g.data()) {
                d[i] += gv;
            }
            vec![(xid, dx)]
        })
    }

    /// `out[index[i]] += self[i]`; adjoint of [`Var::gather`].
    pub fn scatter_add(self, index: Rc<Vec<usize>>, out_shape: &[usize]) -> Var<'g> {
        let x = self.value();
        assert_eq!(index.len(), x.len(), "scatter index length");
        let mut out = Tensor::zeros(out_shape);
        {
            let d = out.data_mut();
            for (&i, &v) in index.iter().zip(x.data()) {
                d[i] += v;
            }
        }
        let (xid, in_shape) = (self.id, x.shape().to_vec());
        self.graph.push(Rc::new(out), &[self], move |g| {
            let data = index.iter().map(|&i| g.data()[i]).collect();
            vec![(xid, Tensor::new(&in_shape, data))]
        })
    }

    /// `out[i] = scale * sum_k self[index[i * k + j]]` for `j < k`.
    pub fn gather_sum(self, index: Rc<Vec<usize>>, k: usize, scale: f64, out_shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let n: usize = out_shape.iter().product();
        assert_eq!(index.len(), n * k, "gather_sum index length");
        let data = index
            .chunks_exact(k)
            .map(|c| scale * c.iter().map(|&i| x.data()[i]).sum::<f64>())
            .collect();
        let (xid, in_shape) = (self.id, x.shape().to_vec());
        self.graph.push(Rc::new(Tensor::new(out_shape, data)), &[self], move |g| {
            let mut dx = Tensor::zeros(&in_shape);
            let d = dx.data_mut();
            for (c, &gv) in index.chunks_exact(k).zip(g.data()) {
                for &i in c {
                    d[i] += scale * gv;
                }
            }
            vec![(xid, dx)]
        })
    }

    /// Broadcast size-1 axes up to `shape` (same rank).
    pub fn expand(self, shape: &[usize]) -> Var<'g> {
        let src = self.shape();
        if src == shape {
            return self;
        }
        if src.iter().product::<usize>() == 1 {
            let n: usize = shape.iter().product();
            return self.gather(Rc::new(vec![0; n]), shape);
        }
        assert_eq!(src.len(), shape.len(), "expand rank mismatch {src:?} -> {shape:?}");
        let in_strides = strides_of(&src);
        let out_strides = strides_of(shape);
        let n: usize = shape.iter().product();
        let mut index = Vec::with_capacity(n);
        for flat in 0..n {
            let mut rem = flat;
            let mut src_flat = 0;
            for ax in 0..shape.len() {
                let coord = rem / out_strides[ax];
                rem %= out_strides[ax];
                if src[ax] != 1 {
                    assert_eq!(src[ax], shape[ax], "cannot expand {src:?} to {shape:?}");
                    src_flat += coord * in_strides[ax];
                }
            }
            index.push(src_flat);
        }
        self.gather(Rc::new(index), shape)
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(self, axis: usize) -> Var<'g> {
        let shape = self.shape();
        let strides = strides_of(&shape);
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let out_strides = strides_of(&out_shape);
        let n: usize = shape.iter().product();
        let index = (0..n)
            .map(|flat| {
                let mut rem = flat;
                let mut o = 0;
                for ax in 0..shape.len() {
                    let c = rem / strides[ax];
                    rem %= strides[ax];
                    if ax != axis {
                        o += c * out_strides[ax];
                    }
                }
                o
            })
            .collect();
        self.scatter_add(Rc::new(index), &out_shape)
    }

    pub fn mean_axis(self, axis: usize) -> Var<'g> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let shape = self.shape();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * shape[axis] + a) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(Rc::new(index), &out_shape)
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims");
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut c, 0.0);
        let (aid, bid) = (self.id, other.id);
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        self.graph.push(Rc::new(Tensor::new(&[m, n], c)), &[self, other], move |g| {
            let mut out = Vec::new();
            if ra {
                // dA = G B^T
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g.data(), (n, 1), b.data(), (1, n), &mut da, 0.0);
                out.push((aid, Tensor::new(&[m, k], da)));
            }
            if rb {
                // dB = A^T G
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, a.data(), (1, k), g.data(), (n, 1), &mut db, 0.0);
                out.push((bid, Tensor::new(&[k, n], db)));
            }
            out
        })
    }

    /// Concatenate along `axis`.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of nothing");
        let graph = parts[0].graph;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &s) in values.iter().zip(&sizes) {
                let chunk = s * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids: Vec<(usize, bool, Vec<usize>)> =
            parts.iter().zip(&values).map(|(p, v)| (p.id, p.requires_grad(), v.shape().to_vec())).collect();
        graph.push(Rc::new(Tensor::new(&out_shape, data)), parts, move |g| {
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|s| Vec::with_capacity(outer * s * inner)).collect();
            let gd = g.data();
            let mut pos = 0;
            for _ in 0..outer {
                for (gi, &s) in grads.iter_mut().zip(&sizes) {
                    gi.extend_from_slice(&gd[pos..pos + s * inner]);
                    pos += s * inner;
                }
            }
            ids.iter()
                .zip(grads)
                .filter(|((_, rg, _), _)| *rg)
                .map(|((id, _, shape), d)| (*id, Tensor::new(shape, d)))
                .collect()
        })
    }

    /// 2-D convolution. `self`: `[N, Ci, H, W]`, `weight`: `[Co, Ci, kh, kw]`, `bias`: `[Co]`.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize, pad: usize) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let (n, ci, h, wd) = x.dims4();
        let (co, ci2, kh, kw) = w.dims4();
        assert_eq!(ci, ci2, "conv2d channel mismatch: input {ci}, weight {ci2}");
        let geom = ConvGeom { ci, h, w: wd, kh, kw, stride, pad };
        let (ho, wo) = geom.output_size();
        let (k, p) = (ci * kh * kw, ho * wo);
        let b = bias.map(|b| b.value());
        let mut out = vec![0.0; n * co * p];
        let mut cols = vec![0.0; k * p];
        for s in 0..n {
            geom.im2col(&x.data()[s * ci * h * wd..(s + 1) * ci * h * wd], &mut cols);
            let o = &mut out[s * co * p..(s + 1) * co * p];
            if let Some(b) = &b {
                for (c, row) in o.chunks_exact_mut(p).enumerate() {
                    row.fill(b.data()[c]);
                }
            }
            gemm(co, k, p, w.data(), (k, 1), &cols, (p, 1), o, if b.is_some() { 1.0 } else { 0.0 });
        }
        let y = Rc::new(Tensor::new(&[n, co, ho, wo], out));
        let (xid, wid) = (self.id, weight.id);
        let bid = bias.map(|b| (b.id, b.requires_grad()));
        let (rx, rw) = (self.requires_grad(), weight.requires_grad());
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.push(y, &parents, move |g| {
            let mut res = Vec::new();
            let mut dw = vec![0.0; co * k];
            let mut dx = if rx { vec![0.0; n * ci * h * wd] } else { Vec::new() };
            let mut cols = vec![0.0; k * p];
            let mut dcols = vec![0.0; k * p];
            for s in 0..n {
                let gs = &g.data()[s * co * p..(s + 1) * co * p];
                if rw {
                    geom.im2col(&x.data()[s * ci * h * wd..(s + 1) * ci * h * wd], &mut cols);
                    // dW += G cols^T
                    gemm(co, p, k, gs, (p, 1), &cols, (1, p), &mut dw, 1.0);
                }
                if rx {
                    // dcols = W^T G
                    gemm(k, co, p, w.data(), (1, k), gs, (p, 1), &mut dcols, 0.0);
                    geom.col2im(&dcols, &mut dx[s * ci * h * wd..(s + 1) * ci * h * wd]);
                }
            }
            if rw {
                res.push((wid, Tensor::new(&[co, ci, kh, kw], dw)));
            }
            if rx {
                res.push((xid, Tensor::new(&[n, ci, h, wd], dx)));
            }
            if let Some((bid, true)) = bid {
                let mut db = vec![0.0; co];
                for s in 0..n {
                    for (c, row) in g.data()[s * co * p..(s + 1) * co * p].chunks_exact(p).enumerate() {
                        db[c] += row.iter().sum::<f64>();
                    }
                }
                res.push((bid, Tensor::new(&[co], db)));
            }
            res
        })
    }

    /// Bilinear sampling of a `[C, H, W]` image at pixel coordinates `xs`, `ys` (`[P]` each),
    /// zero outside the image. Output `[C, P]`.
    pub fn bilinear_sample(self, xs: Var<'g>, ys: Var<'g>) -> Var<'g> {
        let img = self.value();
        let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        let xv = xs.value();
        let yv = ys.value();
        let p = xv.len();
        assert_eq!(p, yv.len(), "coordinate length mismatch");
        let cells: Vec<BilinearCell> = xv.data().iter().zip(yv.data()).map(|(&x, &y)| BilinearCell::new(x, y, w, h)).collect();
        let mut out = vec![0.0; c * p];
        for ch in 0..c {
            let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
            for (i, cell) in cells.iter().enumerate() {
                out[ch * p + i] = cell.sample(plane);
            }
        }
        let (iid, xid, yid) = (self.id, xs.id, ys.id);
        let (ri, rx, ry) = (self.requires_grad(), xs.requires_grad(), ys.requires_grad());
        let cells = Rc::new(cells);
        self.graph.push(Rc::new(Tensor::new(&[c, p], out)), &[self, xs, ys], move |g| {
            let mut res = Vec::new();
            if ri {
                let mut di = vec![0.0; c * h * w];
                for ch in 0..c {
                    let plane = &mut di[ch * h * w..(ch + 1) * h * w];
                    for (i, cell) in cells.iter().enumerate() {
                        cell.scatter(plane, g.data()[ch * p + i]);
                    }
                }
                res.push((iid, Tensor::new(&[c, h, w], di)));
            }
            if rx || ry {
                let mut dx = vec![0.0; p];
                let mut dy = vec![0.0; p];
                for ch in 0..c {
                    let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
                    for (i, cell) in cells.iter().enumerate() {
                        let (gx, gy) = cell.coord_grad(plane);
                        let gv = g.data()[ch * p + i];
                        dx[i] += gv * gx;
                        dy[i] += gv * gy;
                    }
                }
                if rx {
                    res.push((xid, Tensor::new(&[p], dx)));
                }
                if ry {
                    res.push((yid, Tensor::new(&[p], dy)));
                }
            }
            res
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Coordinates this close to an integer are snapped onto it, so sampling on the pixel grid
/// reproduces pixel values exactly.
const SNAP: f64 = 1e-9;

#[derive(Clone, Copy)]
struct BilinearCell {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
    w: usize,
    h: usize,
}

impl BilinearCell {
    fn new(x: f64, y: f64, w: usize, h: usize) -> Self {
        let snap = |v: f64| if (v - v.round()).abs() < SNAP { v.round() } else { v };
        let (x, y) = (snap(x), snap(y));
        let (x0, y0) = (x.floor(), y.floor());
        let (x0, y0, fx, fy) = if x.is_finite() && y.is_finite() {
            (x0 as isize, y0 as isize, x - x0, y - y0)
        } else {
            (-10, -10, 0.0, 0.0)
        };
        Self { x0, y0, fx, fy, w, h }
    }

    #[inline]
    fn idx(&self, dx: isize, dy: isize) -> Option<usize> {
        let (x, y) = (self.x0 + dx, self.y0 + dy);
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            Some(y as usize * self.w + x as usize)
        } else {
            None
        }
    }

    #[inline]
    fn corners(&self, plane: &[f64]) -> [f64; 4] {
        let v = |dx, dy| self.idx(dx, dy).map_or(0.0, |i| plane[i]);
        [v(0, 0), v(1, 0), v(0, 1), v(1, 1)]
    }

    #[inline]
    fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy]
    }

    fn sample(&self, plane: &[f64]) -> f64 {
        let v = self.corners(plane);
        let wt = self.weights();
        let mut acc = 0.0;
        for k in 0..4 {
            if wt[k] != 0.0 {
                acc += wt[k] * v[k];
            }
        }
        acc
    }

    fn scatter(&self, plane: &mut [f64], g: f64) {
        let wt = self.weights();
        for (k, (dx, dy)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
            if let Some(i) = self.idx(dx, dy) {
                plane[i] += wt[k] * g;
            }
        }
    }

    fn coord_grad(&self, plane: &[f64]) -> (f64, f64) {
        let [v00, v10, v01, v11] = self.corners(plane);
        let (fx, fy) = (self.fx, self.fy);
        let gx = (v10 - v00) * (1.0 - fy) + (v11 - v01) * fy;
        let gy = (v01 - v00) * (1.0 - fx) + (v11 - v10) * fx;
        (gx, gy)
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn output_size(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    fn for_each(&self, mut f: impl FnMut(usize, Option<usize>)) {
        let (ho, wo) = self.output_size();
        let p = ho * wo;
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            let src = if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                                Some((c * self.h + iy as usize) * self.w + ix as usize)
                            } else {
                                None
                            };
                            f(row * p + oy * wo + ox, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        self.for_each(|dst, src| cols[dst] = src.map_or(0.0, |s| x[s]));
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        self.for_each(|dst, src| {
            if let Some(s) = src {
                dx[s] += cols[dst];
            }
        });
    }
}

/// `C = A (m×k) · B (k×n) + beta·C`, with `(row, col)` strides for A and B; C is row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slice lengths cover every index reachable through the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
