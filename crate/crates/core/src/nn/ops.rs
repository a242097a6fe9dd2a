//! Differentiable array operations recorded on the tape.
//!
//! Convolution uses im2col + matmul; backward passes recompute the column
//! matrices from parent values rather than caching them.

use super::tape::{Arr, Tape, Var};
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis, Ix2, Ix4};

pub fn as2(a: &Arr) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 array")
}

pub fn as4(a: &Arr) -> ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("rank-4 array")
}

pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

fn im2col(x: ArrayView3<'_, f64>, k: usize, s: usize, p: usize, oh: usize, ow: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let mut cols_row = cols.row_mut(row);
                for oi in 0..oh {
                    let ii = (oi * s + ki) as isize - p as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * s + kj) as isize - p as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols_row[oi * ow + oj] = x[(ci, ii as usize, jj as usize)];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dcols_row = dcols.row(row);
                for oi in 0..oh {
                    let ii = (oi * s + ki) as isize - p as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * s + kj) as isize - p as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dx[(ci, ii as usize, jj as usize)] += dcols_row[oi * ow + oj];
                    }
                }
            }
        }
    }
    dx
}

impl Var {
    fn unary(&self, value: Arr, backward: super::tape::BackwardFn) -> Var {
        self.tape.push(value, vec![self.id], Some(backward))
    }

    pub fn relu(&self) -> Var {
        let value = self.value().mapv(|v| v.max(0.0));
        self.unary(
            value,
            Box::new(|args| {
                let x = args.parent_values[0];
                let mut g = args.out_grad.clone();
                g.zip_mut_with(x, |gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                vec![g]
            }),
        )
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.value().mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.unary(
            value,
            Box::new(|args| {
                let y = args.out_value;
                let mut g = args.out_grad.clone();
                g.zip_mut_with(y, |gv, &yv| *gv *= yv * (1.0 - yv));
                vec![g]
            }),
        )
    }

    pub fn scale(&self, c: f64) -> Var {
        let value = self.value().mapv(|v| v * c);
        self.unary(
            value,
            Box::new(move |args| vec![args.out_grad.mapv(|g| g * c)]),
        )
    }

    pub fn add(&self, other: &Var) -> Var {
        debug_assert!(self.tape.same_tape(&other.tape));
        let value = &*self.value() + &*other.value();
        self.tape.push(
            value,
            vec![self.id, other.id],
            Some(Box::new(|args| {
                vec![args.out_grad.clone(), args.out_grad.clone()]
            })),
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        debug_assert!(self.tape.same_tape(&other.tape));
        let value = &*self.value() * &*other.value();
        self.tape.push(
            value,
            vec![self.id, other.id],
            Some(Box::new(|args| {
                vec![
                    args.out_grad * args.parent_values[1],
                    args.out_grad * args.parent_values[0],
                ]
            })),
        )
    }

    /// (M,N) x (N,P) -> (M,P)
    pub fn matmul(&self, w: &Var) -> Var {
        let value = as2(&self.value()).dot(&as2(&w.value())).into_dyn();
        self.tape.push(
            value,
            vec![self.id, w.id],
            Some(Box::new(|args| {
                let g = as2(args.out_grad);
                let a = as2(args.parent_values[0]);
                let b = as2(args.parent_values[1]);
                vec![g.dot(&b.t()).into_dyn(), a.t().dot(&g).into_dyn()]
            })),
        )
    }

    /// Adds a length-P bias vector to every row of an (M,P) matrix.
    pub fn add_rowvec(&self, bias: &Var) -> Var {
        let mut value = self.value().clone();
        {
            let b = bias.value();
            let bv = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let mut v2 = value.view_mut().into_dimensionality::<Ix2>().unwrap();
            for mut row in v2.rows_mut() {
                row += &bv;
            }
        }
        self.tape.push(
            value,
            vec![self.id, bias.id],
            Some(Box::new(|args| {
                let g = as2(args.out_grad);
                vec![args.out_grad.clone(), g.sum_axis(Axis(0)).into_dyn()]
            })),
        )
    }

    /// x: (B,C,H,W), w: (O,C,K,K), b: (O). Square kernel, uniform stride/pad.
    pub fn conv2d(&self, w: &Var, b: &Var, stride: usize, pad: usize) -> Var {
        let (value, parents);
        {
            let xv = self.value();
            let wv = w.value();
            let bv = b.value();
            let x = as4(&xv);
            let wt = as4(&wv);
            let (bs, c, h, wd) = x.dim();
            let (o, ci, k, _) = wt.dim();
            assert_eq!(c, ci, "conv2d channel mismatch");
            let oh = conv_out_dim(h, k, stride, pad);
            let ow = conv_out_dim(wd, k, stride, pad);
            let wmat = wt.into_shape_with_order((o, ci * k * k)).unwrap();
            let bias = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let mut y = Array4::<f64>::zeros((bs, o, oh, ow));
            for bi in 0..bs {
                let cols = im2col(x.index_axis(Axis(0), bi), k, stride, pad, oh, ow);
                let out = wmat.dot(&cols); // (O, L)
                let mut yb = y.index_axis_mut(Axis(0), bi);
                for oi in 0..o {
                    let dst = out.row(oi);
                    let mut plane = yb.index_axis_mut(Axis(0), oi);
                    let bias_o = bias[oi];
                    for (idx, v) in dst.iter().enumerate() {
                        plane[(idx / ow, idx % ow)] = v + bias_o;
                    }
                }
            }
            value = y.into_dyn();
            parents = vec![self.id, w.id, b.id];
        }
        self.tape.push(
            value,
            parents,
            Some(Box::new(move |args| {
                let x = as4(args.parent_values[0]);
                let wt = as4(args.parent_values[1]);
                let g = as4(args.out_grad);
                let (bs, c, h, wd) = x.dim();
                let (o, _, k, _) = wt.dim();
                let (_, _, oh, ow) = g.dim();
                let l = oh * ow;
                let wmat = wt.into_shape_with_order((o, c * k * k)).unwrap();
                let mut dx = Array4::<f64>::zeros((bs, c, h, wd));
                let mut dwmat = Array2::<f64>::zeros((o, c * k * k));
                let mut db = Array1::<f64>::zeros(o);
                for bi in 0..bs {
                    let gb = g
                        .index_axis(Axis(0), bi)
                        .into_shape_with_order((o, l))
                        .unwrap()
                        .to_owned();
                    let cols = im2col(x.index_axis(Axis(0), bi), k, stride, pad, oh, ow);
                    dwmat += &gb.dot(&cols.t());
                    db += &gb.sum_axis(Axis(1));
                    let dcols = wmat.t().dot(&gb);
                    dx.index_axis_mut(Axis(0), bi)
                        .assign(&col2im(&dcols, c, h, wd, k, stride, pad, oh, ow));
                }
                let dw = dwmat.into_shape_with_order((o, c, k, k)).unwrap();
                vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
            })),
        )
    }

    pub fn maxpool2d(&self, k: usize, stride: usize, pad: usize) -> Var {
        let (value, argmax, in_shape);
        {
            let xv = self.value();
            let x = as4(&xv);
            let (bs, c, h, w) = x.dim();
            in_shape = (bs, c, h, w);
            let oh = conv_out_dim(h, k, stride, pad);
            let ow = conv_out_dim(w, k, stride, pad);
            let mut y = Array4::<f64>::zeros((bs, c, oh, ow));
            let mut am = vec![0usize; bs * c * oh * ow];
            let mut flat = 0usize;
            for bi in 0..bs {
                for ci in 0..c {
                    let plane = x.slice(s![bi, ci, .., ..]);
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0usize;
                            for ki in 0..k {
                                let ii = (oi * stride + ki) as isize - pad as isize;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let jj = (oj * stride + kj) as isize - pad as isize;
                                    if jj < 0 || jj >= w as isize {
                                        continue;
                                    }
                                    let v = plane[(ii as usize, jj as usize)];
                                    if v > best {
                                        best = v;
                                        best_idx = ii as usize * w + jj as usize;
                                    }
                                }
                            }
                            y[(bi, ci, oi, oj)] = best;
                            am[flat] = best_idx;
                            flat += 1;
                        }
                    }
                }
            }
            value = y.into_dyn();
            argmax = am;
        }
        self.unary(
            value,
            Box::new(move |args| {
                let g = as4(args.out_grad);
                let (bs, c, h, w) = in_shape;
                let (_, _, oh, ow) = g.dim();
                let mut dx = Array4::<f64>::zeros((bs, c, h, w));
                let mut flat = 0usize;
                for bi in 0..bs {
                    for ci in 0..c {
                        for oi in 0..oh {
                            for oj in 0..ow {
                                let idx = argmax[flat];
                                dx[(bi, ci, idx / w, idx % w)] += g[(bi, ci, oi, oj)];
                                flat += 1;
                            }
                        }
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// (B,C,H,W) -> (B,C) spatial mean.
    pub fn global_avg_pool(&self) -> Var {
        let xv = self.value();
        let x = as4(&xv);
        let (_, _, h, w) = x.dim();
        let value = x.mean_axis(Axis(3)).unwrap().mean_axis(Axis(2)).unwrap();
        drop(xv);
        self.unary(
            value.into_dyn(),
            Box::new(move |args| {
                let g = as2(args.out_grad);
                let x = as4(args.parent_values[0]);
                let (bs, c, _, _) = x.dim();
                let mut dx = Array4::<f64>::zeros(x.raw_dim());
                let inv = 1.0 / (h * w) as f64;
                for bi in 0..bs {
                    for ci in 0..c {
                        dx.slice_mut(s![bi, ci, .., ..]).fill(g[(bi, ci)] * inv);
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// (B,C,H,W) -> (B,C) spatial max.
    pub fn global_max_pool(&self) -> Var {
        let xv = self.value();
        let x = as4(&xv);
        let (bs, c, _, _) = x.dim();
        let mut value = Array2::<f64>::zeros((bs, c));
        for bi in 0..bs {
            for ci in 0..c {
                value[(bi, ci)] = x
                    .slice(s![bi, ci, .., ..])
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
            }
        }
        drop(xv);
        self.unary(
            value.into_dyn(),
            Box::new(|args| {
                let g = as2(args.out_grad);
                let x = as4(args.parent_values[0]);
                let (bs, c, h, w) = x.dim();
                let mut dx = Array4::<f64>::zeros(x.raw_dim());
                for bi in 0..bs {
                    for ci in 0..c {
                        let plane = x.slice(s![bi, ci, .., ..]);
                        let mut best = f64::NEG_INFINITY;
                        let mut at = (0, 0);
                        for i in 0..h {
                            for j in 0..w {
                                if plane[(i, j)] > best {
                                    best = plane[(i, j)];
                                    at = (i, j);
                                }
                            }
                        }
                        dx[(bi, ci, at.0, at.1)] = g[(bi, ci)];
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// (B,C,H,W) -> (B,1,H,W) mean over channels.
    pub fn channel_mean(&self) -> Var {
        let xv = self.value();
        let x = as4(&xv);
        let c = x.dim().1;
        let value = x.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
        drop(xv);
        self.unary(
            value.into_dyn(),
            Box::new(move |args| {
                let g = as4(args.out_grad);
                let x = as4(args.parent_values[0]);
                let mut dx = Array4::<f64>::zeros(x.raw_dim());
                let inv = 1.0 / c as f64;
                for ci in 0..c {
                    dx.slice_mut(s![.., ci, .., ..])
                        .assign(&g.index_axis(Axis(1), 0).mapv(|v| v * inv));
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// (B,C,H,W) -> (B,1,H,W) max over channels.
    pub fn channel_max(&self) -> Var {
        let xv = self.value();
        let x = as4(&xv);
        let (bs, c, h, w) = x.dim();
        let mut value = Array4::<f64>::zeros((bs, 1, h, w));
        for bi in 0..bs {
            for i in 0..h {
                for j in 0..w {
                    let mut best = f64::NEG_INFINITY;
                    for ci in 0..c {
                        best = best.max(x[(bi, ci, i, j)]);
                    }
                    value[(bi, 0, i, j)] = best;
                }
            }
        }
        drop(xv);
        self.unary(
            value.into_dyn(),
            Box::new(|args| {
                let g = as4(args.out_grad);
                let x = as4(args.parent_values[0]);
                let (bs, c, h, w) = x.dim();
                let mut dx = Array4::<f64>::zeros(x.raw_dim());
                for bi in 0..bs {
                    for i in 0..h {
                        for j in 0..w {
                            let mut best = f64::NEG_INFINITY;
                            let mut at = 0usize;
                            for ci in 0..c {
                                if x[(bi, ci, i, j)] > best {
                                    best = x[(bi, ci, i, j)];
                                    at = ci;
                                }
                            }
                            dx[(bi, at, i, j)] = g[(bi, 0, i, j)];
                        }
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// x: (B,C,H,W) scaled per channel by s: (B,C).
    pub fn scale_channels(&self, scale: &Var) -> Var {
        debug_assert!(self.tape.same_tape(&scale.tape));
        let value;
        {
            let xv = self.value();
            let sv = scale.value();
            let x = as4(&xv);
            let sc = as2(&sv);
            let mut y = x.to_owned();
            let (bs, c, _, _) = x.dim();
            for bi in 0..bs {
                for ci in 0..c {
                    y.slice_mut(s![bi, ci, .., ..])
                        .mapv_inplace(|v| v * sc[(bi, ci)]);
                }
            }
            value = y.into_dyn();
        }
        self.tape.push(
            value,
            vec![self.id, scale.id],
            Some(Box::new(|args| {
                let g = as4(args.out_grad);
                let x = as4(args.parent_values[0]);
                let sc = as2(args.parent_values[1]);
                let (bs, c, _, _) = x.dim();
                let mut dx = Array4::<f64>::zeros(x.raw_dim());
                let mut ds = Array2::<f64>::zeros(sc.raw_dim());
                for bi in 0..bs {
                    for ci in 0..c {
                        let gp = g.slice(s![bi, ci, .., ..]);
                        let xp = x.slice(s![bi, ci, .., ..]);
                        dx.slice_mut(s![bi, ci, .., ..])
                            .assign(&gp.mapv(|v| v * sc[(bi, ci)]));
                        ds[(bi, ci)] = (&gp * &xp).sum();
                    }
                }
                vec![dx.into_dyn(), ds.into_dyn()]
            })),
        )
    }

    /// x: (B,C,H,W) scaled per spatial site by s: (B,1,H,W).
    pub fn scale_spatial(&self, scale: &Var) -> Var {
        debug_assert!(self.tape.same_tape(&scale.tape));
        let value;
        {
            let xv = self.value();
            let sv = scale.value();
            let x = as4(&xv);
            let sc = as4(&sv);
            let mut y = x.to_owned();
            let (_, c, _, _) = x.dim();
            for ci in 0..c {
                let mut plane = y.slice_mut(s![.., ci, .., ..]);
                plane *= &sc.index_axis(Axis(1), 0);
            }
            value = y.into_dyn();
        }
        self.tape.push(
            value,
            vec![self.id, scale.id],
            Some(Box::new(|args| {
                let g = as4(args.out_grad);
                let x = as4(args.parent_values[0]);
                let sc = as4(args.parent_values[1]);
                let (_, c, _, _) = x.dim();
                let mut dx = Array4::<f64>::zeros(x.raw_dim());
                let mut ds = Array4::<f64>::zeros(sc.raw_dim());
                let sp = sc.index_axis(Axis(1), 0);
                for ci in 0..c {
                    let gp = g.index_axis(Axis(1), ci);
                    let xp = x.index_axis(Axis(1), ci);
                    dx.slice_mut(s![.., ci, .., ..]).assign(&(&gp * &sp));
                    let mut dsp = ds.index_axis_mut(Axis(1), 0);
                    dsp += &(&gp * &xp);
                }
                vec![dx.into_dyn(), ds.into_dyn()]
            })),
        )
    }

    /// Concatenate along axis 1 (channels or feature columns).
    pub fn concat_axis1(&self, other: &Var) -> Var {
        debug_assert!(self.tape.same_tape(&other.tape));
        let value = ndarray::concatenate(Axis(1), &[self.value().view(), other.value().view()])
            .expect("concat shape mismatch");
        self.tape.push(
            value,
            vec![self.id, other.id],
            Some(Box::new(|args| {
                let c0 = args.parent_values[0].shape()[1];
                let ga = args.out_grad.slice_axis(Axis(1), ndarray::Slice::from(0..c0));
                let gb = args
                    .out_grad
                    .slice_axis(Axis(1), ndarray::Slice::from(c0..));
                vec![ga.to_owned(), gb.to_owned()]
            })),
        )
    }

    /// Rows [start, start+len) along the batch axis.
    pub fn slice_batch(&self, start: usize, len: usize) -> Var {
        let value = self
            .value()
            .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.unary(
            value,
            Box::new(move |args| {
                let mut dx = Arr::zeros(args.parent_values[0].raw_dim());
                dx.slice_axis_mut(Axis(0), ndarray::Slice::from(start..start + len))
                    .assign(args.out_grad);
                vec![dx]
            }),
        )
    }

    /// Group normalization over (B,C,H,W) with per-channel affine params.
    pub fn group_norm(&self, gamma: &Var, beta: &Var, groups: usize, eps: f64) -> Var {
        debug_assert!(self.tape.same_tape(&gamma.tape));
        let value;
        {
            let xv = self.value();
            let gv = gamma.value();
            let bv = beta.value();
            let x = as4(&xv);
            let (bs, c, h, w) = x.dim();
            assert_eq!(c % groups, 0, "channels not divisible by groups");
            let gsize = c / groups;
            let gamma1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let beta1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let mut y = Array4::<f64>::zeros((bs, c, h, w));
            for bi in 0..bs {
                for gi in 0..groups {
                    let sl = x.slice(s![bi, gi * gsize..(gi + 1) * gsize, .., ..]);
                    let n = sl.len() as f64;
                    let mean = sl.sum() / n;
                    let var = sl.mapv(|v| (v - mean).powi(2)).sum() / n;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    for ci in 0..gsize {
                        let cc = gi * gsize + ci;
                        let xp = x.slice(s![bi, cc, .., ..]);
                        let mut yp = y.slice_mut(s![bi, cc, .., ..]);
                        yp.assign(&xp.mapv(|v| (v - mean) * inv_std * gamma1[cc] + beta1[cc]));
                    }
                }
            }
            value = y.into_dyn();
        }
        self.tape.push(
            value,
            vec![self.id, gamma.id, beta.id],
            Some(Box::new(move |args| {
                let g = as4(args.out_grad);
                let x = as4(args.parent_values[0]);
                let gamma1 = args.parent_values[1]
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                let (bs, c, h, w) = x.dim();
                let gsize = c / groups;
                let mut dx = Array4::<f64>::zeros(x.raw_dim());
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                for bi in 0..bs {
                    for gi in 0..groups {
                        let range = gi * gsize..(gi + 1) * gsize;
                        let sl = x.slice(s![bi, range.clone(), .., ..]);
                        let n = sl.len() as f64;
                        let mean = sl.sum() / n;
                        let var = sl.mapv(|v| (v - mean).powi(2)).sum() / n;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        // xhat and dxhat for the whole group
                        let xhat = sl.mapv(|v| (v - mean) * inv_std);
                        let mut dxhat = Array3::<f64>::zeros((gsize, h, w));
                        for ci in 0..gsize {
                            let cc = gi * gsize + ci;
                            let gp = g.slice(s![bi, cc, .., ..]);
                            dxhat
                                .slice_mut(s![ci, .., ..])
                                .assign(&gp.mapv(|v| v * gamma1[cc]));
                            dgamma[cc] += (&gp * &xhat.slice(s![ci, .., ..])).sum();
                            dbeta[cc] += gp.sum();
                        }
                        let mean_dxhat = dxhat.sum() / n;
                        let mean_dxhat_xhat = (&dxhat * &xhat).sum() / n;
                        for ci in 0..gsize {
                            let cc = gi * gsize + ci;
                            let mut dxp = dx.slice_mut(s![bi, cc, .., ..]);
                            let dh = dxhat.slice(s![ci, .., ..]);
                            let xh = xhat.slice(s![ci, .., ..]);
                            dxp.assign(
                                &(&dh.mapv(|v| v - mean_dxhat)
                                    - &xh.mapv(|v| v * mean_dxhat_xhat))
                                    .mapv(|v| v * inv_std),
                            );
                        }
                    }
                }
                vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
            })),
        )
    }

    /// Mean cross-entropy between row-wise softmax(logits) and integer labels.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Var {
        let labels = labels.to_vec();
        let value;
        {
            let lv = self.value();
            let logits = as2(&lv);
            let p = softmax_rows(&logits.to_owned());
            let mut loss = 0.0;
            for (bi, &lab) in labels.iter().enumerate() {
                loss -= p[(bi, lab)].max(1e-300).ln();
            }
            value = ndarray::arr0(loss / labels.len() as f64).into_dyn();
        }
        self.unary(
            value,
            Box::new(move |args| {
                let logits = as2(args.parent_values[0]);
                let gscale = args.out_grad.iter().next().unwrap() / labels.len() as f64;
                let mut dl = softmax_rows(&logits.to_owned());
                for (bi, &lab) in labels.iter().enumerate() {
                    dl[(bi, lab)] -= 1.0;
                }
                vec![dl.mapv(|v| v * gscale).into_dyn()]
            }),
        )
    }

    /// Sum of one logit column over the batch; scalar target for saliency.
    pub fn select_logit_sum(&self, class: usize) -> Var {
        let value;
        {
            let lv = self.value();
            let logits = as2(&lv);
            value = ndarray::arr0(logits.column(class).sum()).into_dyn();
        }
        self.unary(
            value,
            Box::new(move |args| {
                let gscale = *args.out_grad.iter().next().unwrap();
                let mut dl = Arr::zeros(args.parent_values[0].raw_dim());
                dl.slice_axis_mut(Axis(1), ndarray::Slice::from(class..class + 1))
                    .fill(gscale);
                vec![dl]
            }),
        )
    }

    /// Fixed-weight contraction to a scalar; used by gradient tests.
    pub fn weighted_sum(&self, weights: Arr) -> Var {
        let value = ndarray::arr0((&*self.value() * &weights).sum()).into_dyn();
        self.unary(
            value,
            Box::new(move |args| {
                let gscale = *args.out_grad.iter().next().unwrap();
                vec![weights.mapv(|w| w * gscale)]
            }),
        )
    }
}

/// Sum a non-empty list of same-shaped vars in order.
pub fn sum_vars(vars: &[Var]) -> Var {
    assert!(!vars.is_empty());
    let mut acc = vars[0].clone();
    for v in &vars[1..] {
        acc = acc.add(v);
    }
    acc
}

/// Concatenate along the batch axis (axis 0).
pub fn concat_batch(vars: &[Var]) -> Var {
    assert!(!vars.is_empty());
    let tape = vars[0].tape.clone();
    let views: Vec<_> = vars.iter().map(|v| v.value().clone()).collect();
    let value = ndarray::concatenate(
        Axis(0),
        &views.iter().map(|a| a.view()).collect::<Vec<_>>(),
    )
    .expect("concat_batch shape mismatch");
    let parents = vars.iter().map(|v| v.id).collect();
    tape.push(
        value,
        parents,
        Some(Box::new(|args| {
            let mut out = Vec::with_capacity(args.parent_values.len());
            let mut offset = 0;
            for pv in &args.parent_values {
                let n = pv.shape()[0];
                out.push(
                    args.out_grad
                        .slice_axis(Axis(0), ndarray::Slice::from(offset..offset + n))
                        .to_owned(),
                );
                offset += n;
            }
            out
        })),
    )
}

/// Row-wise softmax with max-shift stabilization (pure helper, not taped).
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

pub fn tape_leaf2(tape: &Tape, a: Array2<f64>) -> Var {
    tape.leaf(a.into_dyn())
}

pub fn tape_leaf4(tape: &Tape, a: Array4<f64>) -> Var {
    tape.leaf(a.into_dyn())
}
