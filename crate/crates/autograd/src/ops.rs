//! Differentiable operations on [`Graph`] nodes.

use crate::array::{broadcast_shapes, gemm, numel, Array};
use crate::graph::{Graph, Var};

#[derive(Clone, Copy, Debug)]
struct MatView {
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl MatView {
    fn stored(rows: usize, cols: usize, transposed: bool) -> Self {
        let v = MatView {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        };
        if transposed {
            v.t()
        } else {
            v
        }
    }

    fn t(self) -> Self {
        MatView {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

fn mm(av: MatView, a: &[f64], bv: MatView, b: &[f64], c: &mut [f64], beta: f64) {
    assert_eq!(av.cols, bv.rows, "inner dimension mismatch");
    debug_assert_eq!(c.len(), av.rows * bv.cols);
    gemm(av.rows, av.cols, bv.cols, a, av.rs, av.cs, b, bv.rs, bv.cs, c, beta);
}

fn unary_op(
    g: &mut Graph,
    x: Var,
    f: impl Fn(f64) -> f64,
    df: fn(f64, f64) -> f64,
) -> Var {
    let value = g.value(x).map(f);
    g.push(
        value,
        &[x],
        Box::new(move |grad, parents, out| {
            let x = parents[0];
            let data = grad
                .data()
                .iter()
                .zip(x.data())
                .zip(out.data())
                .map(|((&gr, &xv), &yv)| gr * df(xv, yv))
                .collect();
            vec![Some(Array::new(x.shape(), data))]
        }),
    )
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

impl Graph {
    // ---- elementwise binary (broadcasting) ----

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        grads: fn(f64, f64, f64) -> (f64, f64),
    ) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shapes(&sa, &sb)
            .unwrap_or_else(|| panic!("incompatible shapes {sa:?} and {sb:?}"));
        let av = self.value(a).broadcast_to(&out_shape);
        let bv = self.value(b).broadcast_to(&out_shape);
        let value = av.zip_map(&bv, f);
        self.push(
            value,
            &[a, b],
            Box::new(move |grad, parents, _| {
                let av = parents[0].broadcast_to(grad.shape());
                let bv = parents[1].broadcast_to(grad.shape());
                let n = grad.len();
                let mut ga = Vec::with_capacity(n);
                let mut gb = Vec::with_capacity(n);
                for i in 0..n {
                    let (da, db) = grads(av.data()[i], bv.data()[i], grad.data()[i]);
                    ga.push(da);
                    gb.push(db);
                }
                let ga = Array::new(grad.shape(), ga).sum_to(parents[0].shape());
                let gb = Array::new(grad.shape(), gb).sum_to(parents[1].shape());
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, |x, y, g| (g / y, -g * x / (y * y)))
    }

    // ---- elementwise unary ----

    pub fn neg(&mut self, x: Var) -> Var {
        unary_op(self, x, |v| -v, |_, _| -1.0)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scaled(c);
        self.push(
            value,
            &[x],
            Box::new(move |grad, _, _| vec![Some(grad.scaled(c))]),
        )
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, &[x], Box::new(|grad, _, _| vec![Some(grad.clone())]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        unary_op(self, x, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        unary_op(self, x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        unary_op(self, x, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let value = self.value(x).map(|v| v.powf(p));
        self.push(
            value,
            &[x],
            Box::new(move |grad, parents, _| {
                let d = parents[0].map(|v| p * v.powf(p - 1.0));
                vec![Some(grad.zip_map(&d, |g, d| g * d))]
            }),
        )
    }

    pub fn square(&mut self, x: Var) -> Var {
        unary_op(self, x, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        unary_op(self, x, f64::sin, |x, _| x.cos())
    }

    pub fn cos(&mut self, x: Var) -> Var {
        unary_op(self, x, f64::cos, |x, _| -x.sin())
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        unary_op(self, x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        unary_op(self, x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        unary_op(self, x, softplus, |x, _| sigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        unary_op(self, x, |v| v * sigmoid(v), |x, _| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        unary_op(self, x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Array::scalar(self.value(x).sum());
        self.push(
            value,
            &[x],
            Box::new(|grad, parents, _| {
                vec![Some(Array::full(parents[0].shape(), grad.item()))]
            }),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let value = self.value(x).sum_axis(axis);
        self.push(
            value,
            &[x],
            Box::new(|grad, parents, _| vec![Some(grad.broadcast_to(parents[0].shape()))]),
        )
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let n = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis);
        self.scale(s, 1.0 / n)
    }

    // ---- shape ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape);
        self.push(
            value,
            &[x],
            Box::new(|grad, parents, _| {
                vec![Some(grad.clone().reshape(parents[0].shape()))]
            }),
        )
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let value = self.value(x).permute(axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.push(
            value,
            &[x],
            Box::new(move |grad, _, _| vec![Some(grad.permute(&inverse))]),
        )
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).broadcast_to(shape);
        self.push(
            value,
            &[x],
            Box::new(|grad, parents, _| vec![Some(grad.sum_to(parents[0].shape()))]),
        )
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self.value(x).narrow(axis, start, len);
        self.push(
            value,
            &[x],
            Box::new(move |grad, parents, _| {
                let src = parents[0];
                let (outer, dim, inner) = src.split_at_axis(axis);
                let mut out = vec![0.0; src.len()];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let from = o * len * inner;
                    out[dst..dst + len * inner]
                        .copy_from_slice(&grad.data()[from..from + len * inner]);
                }
                vec![Some(Array::new(src.shape(), out))]
            }),
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let values: Vec<&Array> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Array::concat(&values, axis);
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        self.push(
            value,
            parts,
            Box::new(move |grad, _, _| {
                let mut start = 0;
                sizes
                    .iter()
                    .map(|&len| {
                        let g = grad.narrow(axis, start, len);
                        start += len;
                        Some(g)
                    })
                    .collect()
            }),
        )
    }

    /// Rows `idx` of `x [N, D]`, giving `[idx.len(), D]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2, "gather_rows expects [N, D]");
        let d = s[1];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let idx = idx.to_vec();
        self.push(
            Array::new(&[idx.len(), d], out),
            &[x],
            Box::new(move |grad, parents, _| {
                let mut gx = vec![0.0; parents[0].len()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        gx[i * d + c] += grad.data()[r * d + c];
                    }
                }
                vec![Some(Array::new(parents[0].shape(), gx))]
            }),
        )
    }

    /// Places the rows of `x [M, D]` at `idx` in a zero `[n, D]` array.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], n: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2, "scatter_rows expects [M, D]");
        assert_eq!(s[0], idx.len(), "one index per row");
        let d = s[1];
        let src = self.value(x).data();
        let mut out = vec![0.0; n * d];
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..d {
                out[i * d + c] += src[r * d + c];
            }
        }
        let idx = idx.to_vec();
        self.push(
            Array::new(&[n, d], out),
            &[x],
            Box::new(move |grad, parents, _| {
                let mut gx = Vec::with_capacity(parents[0].len());
                for &i in &idx {
                    gx.extend_from_slice(&grad.data()[i * d..(i + 1) * d]);
                }
                vec![Some(Array::new(parents[0].shape(), gx))]
            }),
        )
    }

    // ---- linear algebra ----

    /// `[..., k] x [k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-D, got {sb:?}");
        let k = *sa.last().expect("matmul lhs must have rank >= 1");
        assert_eq!(k, sb[0], "matmul inner mismatch {sa:?} x {sb:?}");
        let n = sb[1];
        let m = numel(&sa) / k.max(1);
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        mm(
            MatView::stored(m, k, false),
            self.value(a).data(),
            MatView::stored(k, n, false),
            self.value(b).data(),
            &mut out,
            0.0,
        );
        self.push(
            Array::new(&out_shape, out),
            &[a, b],
            Box::new(move |grad, parents, _| {
                let (av, bv) = (parents[0], parents[1]);
                let mut ga = vec![0.0; m * k];
                mm(
                    MatView::stored(m, n, false),
                    grad.data(),
                    MatView::stored(k, n, true),
                    bv.data(),
                    &mut ga,
                    0.0,
                );
                let mut gb = vec![0.0; k * n];
                mm(
                    MatView::stored(m, k, true),
                    av.data(),
                    MatView::stored(m, n, false),
                    grad.data(),
                    &mut gb,
                    0.0,
                );
                vec![
                    Some(Array::new(av.shape(), ga)),
                    Some(Array::new(bv.shape(), gb)),
                ]
            }),
        )
    }

    /// Batched `op(a) x op(b)` over `[B, r, c]` operands, where `op` transposes
    /// the trailing two axes when the matching flag is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() == 3 && sb.len() == 3, "bmm expects rank-3 operands");
        assert_eq!(sa[0], sb[0], "bmm batch mismatch");
        let batch = sa[0];
        let va = MatView::stored(sa[1], sa[2], trans_a);
        let vb = MatView::stored(sb[1], sb[2], trans_b);
        assert_eq!(va.cols, vb.rows, "bmm inner mismatch {sa:?} x {sb:?}");
        let (m, n) = (va.rows, vb.cols);
        let (la, lb, lc) = (sa[1] * sa[2], sb[1] * sb[2], m * n);
        let mut out = vec![0.0; batch * lc];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..batch {
                mm(
                    va,
                    &ad[i * la..(i + 1) * la],
                    vb,
                    &bd[i * lb..(i + 1) * lb],
                    &mut out[i * lc..(i + 1) * lc],
                    0.0,
                );
            }
        }
        self.push(
            Array::new(&[batch, m, n], out),
            &[a, b],
            Box::new(move |grad, parents, _| {
                let (ad, bd, gd) = (parents[0].data(), parents[1].data(), grad.data());
                let vg = MatView::stored(m, n, false);
                let mut ga = vec![0.0; batch * la];
                let mut gb = vec![0.0; batch * lb];
                for i in 0..batch {
                    let a_i = &ad[i * la..(i + 1) * la];
                    let b_i = &bd[i * lb..(i + 1) * lb];
                    let g_i = &gd[i * lc..(i + 1) * lc];
                    let ga_i = &mut ga[i * la..(i + 1) * la];
                    if trans_a {
                        mm(vb, b_i, vg.t(), g_i, ga_i, 0.0);
                    } else {
                        mm(vg, g_i, vb.t(), b_i, ga_i, 0.0);
                    }
                    let gb_i = &mut gb[i * lb..(i + 1) * lb];
                    if trans_b {
                        mm(vg.t(), g_i, va, a_i, gb_i, 0.0);
                    } else {
                        mm(va.t(), a_i, vg, g_i, gb_i, 0.0);
                    }
                }
                vec![
                    Some(Array::new(parents[0].shape(), ga)),
                    Some(Array::new(parents[1].shape(), gb)),
                ]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().expect("softmax on scalar");
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Array::new(xv.shape(), out);
        self.push(
            value,
            &[x],
            Box::new(move |grad, _, y| {
                let mut gx = vec![0.0; y.len()];
                for ((gx_row, g_row), y_row) in gx
                    .chunks_mut(d)
                    .zip(grad.data().chunks(d))
                    .zip(y.data().chunks(d))
                {
                    let dot: f64 = g_row.iter().zip(y_row).map(|(g, y)| g * y).sum();
                    for ((o, g), y) in gx_row.iter_mut().zip(g_row).zip(y_row) {
                        *o = y * (g - dot);
                    }
                }
                vec![Some(Array::new(y.shape(), gx))]
            }),
        )
    }

    // ---- image ops, NCHW ----

    /// 2-D convolution without bias: `x [N,C,H,W]`, `w [O,C,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert!(sx.len() == 4 && sw.len() == 4, "conv2d expects NCHW input and OCkk weight");
        assert_eq!(sx[1], sw[1], "conv2d channel mismatch {sx:?} vs {sw:?}");
        assert_eq!(sw[2], sw[3], "conv2d expects square kernels");
        let geom = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], stride, pad);
        let (n, o) = (sx[0], sw[0]);
        let (ckk, l) = (geom.ckk(), geom.out_len());
        let mut out = vec![0.0; n * o * l];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let mut cols = vec![0.0; ckk * l];
            let chw = sx[1] * sx[2] * sx[3];
            for i in 0..n {
                geom.im2col(&xd[i * chw..(i + 1) * chw], &mut cols);
                mm(
                    MatView::stored(o, ckk, false),
                    wd,
                    MatView::stored(ckk, l, false),
                    &cols,
                    &mut out[i * o * l..(i + 1) * o * l],
                    0.0,
                );
            }
        }
        let out_shape = [n, o, geom.out_h, geom.out_w];
        self.push(
            Array::new(&out_shape, out),
            &[x, w],
            Box::new(move |grad, parents, _| {
                let (xv, wv) = (parents[0], parents[1]);
                let chw = xv.len() / n;
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut cols = vec![0.0; ckk * l];
                let mut dcols = vec![0.0; ckk * l];
                for i in 0..n {
                    let g_i = &grad.data()[i * o * l..(i + 1) * o * l];
                    geom.im2col(&xv.data()[i * chw..(i + 1) * chw], &mut cols);
                    mm(
                        MatView::stored(o, l, false),
                        g_i,
                        MatView::stored(ckk, l, true),
                        &cols,
                        &mut gw,
                        1.0,
                    );
                    mm(
                        MatView::stored(o, ckk, true),
                        wv.data(),
                        MatView::stored(o, l, false),
                        g_i,
                        &mut dcols,
                        0.0,
                    );
                    geom.col2im(&dcols, &mut gx[i * chw..(i + 1) * chw]);
                }
                vec![
                    Some(Array::new(xv.shape(), gx)),
                    Some(Array::new(wv.shape(), gw)),
                ]
            }),
        )
    }

    /// Nearest-neighbour upsampling of `[N,C,H,W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "upsample expects NCHW");
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let xd = self.value(x).data();
        let mut out = vec![0.0; nc * oh * ow];
        for p in 0..nc {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(p * oh + y) * ow + xx] = xd[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        self.push(
            Array::new(&[s[0], s[1], oh, ow], out),
            &[x],
            Box::new(move |grad, parents, _| {
                let mut gx = vec![0.0; nc * h * w];
                let gd = grad.data();
                for p in 0..nc {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx[(p * h + y / factor) * w + xx / factor] += gd[(p * oh + y) * ow + xx];
                        }
                    }
                }
                vec![Some(Array::new(parents[0].shape(), gx))]
            }),
        )
    }

    /// Average pooling of `[N,C,H,W]` over non-overlapping `factor x factor` blocks.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "avg_pool expects NCHW");
        assert!(
            s[2].is_multiple_of(factor) && s[3].is_multiple_of(factor),
            "avg_pool factor {factor} does not divide {s:?}"
        );
        let value = avg_pool_array(self.value(x), factor);
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / factor, w / factor);
        let inv = 1.0 / (factor * factor) as f64;
        self.push(
            value,
            &[x],
            Box::new(move |grad, parents, _| {
                let mut gx = vec![0.0; nc * h * w];
                let gd = grad.data();
                for p in 0..nc {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[(p * h + y) * w + xx] = gd[(p * oh + y / factor) * ow + xx / factor] * inv;
                        }
                    }
                }
                vec![Some(Array::new(parents[0].shape(), gx))]
            }),
        )
    }

    // ---- composites ----

    /// Group normalization over `[N, C, ...]` with per-channel affine `[C]`.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c) = (s[0], s[1]);
        assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
        let rest = numel(&s[2..]);
        let xg = self.reshape(x, &[n, groups, (c / groups) * rest]);
        let mean = self.mean_axis(xg, 2);
        let centered = self.sub(xg, mean);
        let sq = self.square(centered);
        let var = self.mean_axis(sq, 2);
        let var_eps = self.add_scalar(var, eps);
        let inv_std = self.powf(var_eps, -0.5);
        let normed = self.mul(centered, inv_std);
        let normed = self.reshape(normed, &s);
        let mut affine_shape = vec![1, c];
        affine_shape.extend(std::iter::repeat_n(1, s.len() - 2));
        let gamma = self.reshape(gamma, &affine_shape);
        let beta = self.reshape(beta, &affine_shape);
        let scaled = self.mul(normed, gamma);
        self.add(scaled, beta)
    }

    /// Layer normalization over the last axis with affine `[D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let last = self.shape(x).len() - 1;
        let mean = self.mean_axis(x, last);
        let centered = self.sub(x, mean);
        let sq = self.square(centered);
        let var = self.mean_axis(sq, last);
        let var_eps = self.add_scalar(var, eps);
        let inv_std = self.powf(var_eps, -0.5);
        let normed = self.mul(centered, inv_std);
        let scaled = self.mul(normed, gamma);
        self.add(scaled, beta)
    }

    /// `x W + b` for `x [..., in]`, `W [in, out]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add(y, b)
    }

    /// Mean squared error between two same-shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean_all(sq)
    }
}

/// Non-differentiable average pooling used by both the graph op and plain callers.
pub fn avg_pool_array(x: &Array, factor: usize) -> Array {
    let s = x.shape();
    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let xd = x.data();
    let mut out = vec![0.0; nc * oh * ow];
    for p in 0..nc {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += xd[(p * h + y * factor + dy) * w + xx * factor + dx];
                    }
                }
                out[(p * oh + y) * ow + xx] = acc * inv;
            }
        }
    }
    Array::new(&[s[0], s[1], oh, ow], out)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        let out_h = (h + 2 * pad - k) / stride + 1;
        let out_w = (w + 2 * pad - k) / stride + 1;
        Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let l = self.out_len();
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            dst[oy * self.out_w + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w
                            {
                                x[(c * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let l = self.out_len();
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * l..(row + 1) * l];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            x[(c * self.h + iy as usize) * self.w + ix as usize] +=
                                src[oy * self.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}
