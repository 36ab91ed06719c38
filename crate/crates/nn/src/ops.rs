//! Differentiable operations on [`Var`]. Image tensors use `[batch, channels, height, width]`.

use std::rc::Rc;

use crate::conv::{col2im, im2col, ConvGeom};
use crate::scalar::{gemm, Layout};
use crate::{Error, Result, Scalar, Tensor, Var};

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

fn same_graph<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.is_tracked() && b.is_tracked() && !a.graph.same_tape(&b.graph) {
        return Err(Error::Graph("operands live on different graphs".into()));
    }
    Ok(())
}

fn rank4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match shape {
        &[b, c, h, w] => Ok([b, c, h, w]),
        _ => shape_err(format!("{what} expects a rank-4 tensor, got {shape:?}")),
    }
}

impl<T: Scalar> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        same_graph(self, other)?;
        let out = self.value.add(&other.value)?;
        Ok(self.graph.record(out, &[self, other], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        }))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        same_graph(self, other)?;
        let out = self.value.sub(&other.value)?;
        Ok(self.graph.record(out, &[self, other], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.scale(-T::one()))]
        }))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        same_graph(self, other)?;
        let out = self.value.zip_map(&other.value, |a, b| a * b)?;
        let (a, b) = (Rc::clone(&self.value), Rc::clone(&other.value));
        Ok(self.graph.record(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |x, y| x * y).unwrap()),
                needs[1].then(|| g.zip_map(&a, |x, y| x * y).unwrap()),
            ]
        }))
    }

    pub fn scale(&self, factor: T) -> Var<T> {
        let out = self.value.scale(factor);
        self.graph.record(out, &[self], move |g, _| vec![Some(g.scale(factor))])
    }

    /// Multiplies sample `i` of the batch by `factors[i]` (factors are constants).
    pub fn scale_per_sample(&self, factors: &[T]) -> Result<Var<T>> {
        let b = self.value.dim(0);
        if factors.len() != b {
            return shape_err(format!("{} factors for batch of {b}", factors.len()));
        }
        let apply = {
            let factors = factors.to_vec();
            move |t: &Tensor<T>| {
                let mut out = t.clone();
                let row = t.numel() / b.max(1);
                for (i, chunk) in out.data_mut().chunks_mut(row.max(1)).enumerate() {
                    for v in chunk {
                        *v *= factors[i];
                    }
                }
                out
            }
        };
        let out = apply(&self.value);
        Ok(self.graph.record(out, &[self], move |g, _| vec![Some(apply(g))]))
    }

    pub fn silu(&self) -> Var<T> {
        let x = Rc::clone(&self.value);
        let out = self.value.map(|v| v / (T::one() + (-v).exp()));
        self.graph.record(out, &[self], move |g, _| {
            let dx = g
                .zip_map(&x, |gy, v| {
                    let s = T::one() / (T::one() + (-v).exp());
                    gy * s * (T::one() + v * (T::one() - s))
                })
                .unwrap();
            vec![Some(dx)]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let old = self.value.shape().to_vec();
        let out = self.value.as_ref().clone().reshape(shape)?;
        Ok(self
            .graph
            .record(out, &[self], move |g, _| vec![Some(g.clone().reshape(&old).unwrap())]))
    }

    pub fn sum_all(&self) -> Var<T> {
        let shape = self.value.shape().to_vec();
        let out = Tensor::scalar(self.value.sum());
        self.graph
            .record(out, &[self], move |g, _| vec![Some(Tensor::full(&shape, g.data()[0]))])
    }

    pub fn mean_all(&self) -> Var<T> {
        let n = T::from_usize(self.value.numel().max(1)).unwrap();
        self.sum_all().scale(T::one() / n)
    }

    /// Mean squared error against `target`; gradients flow into both sides.
    pub fn mse(&self, target: &Var<T>) -> Result<Var<T>> {
        same_graph(self, target)?;
        let diff = self.value.sub(&target.value)?;
        let n = T::from_usize(diff.numel().max(1)).unwrap();
        let out = Tensor::scalar(diff.sq_norm() / n);
        Ok(self.graph.record(out, &[self, target], move |g, needs| {
            let k = g.data()[0] * (T::one() + T::one()) / n;
            let d = diff.scale(k);
            let neg = needs[1].then(|| d.scale(-T::one()));
            vec![needs[0].then_some(d), neg]
        }))
    }

    /// `x @ w^T + b` with `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&self, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let (bsz, inp) = match self.shape() {
            &[b, i] => (b, i),
            s => return shape_err(format!("linear input must be [B, in], got {s:?}")),
        };
        let (outp, inp_w) = match weight.shape() {
            &[o, i] => (o, i),
            s => return shape_err(format!("linear weight must be [out, in], got {s:?}")),
        };
        if inp != inp_w {
            return shape_err(format!("linear: input width {inp} vs weight {inp_w}"));
        }
        let mut out = Tensor::zeros(&[bsz, outp]);
        gemm(
            bsz,
            inp,
            outp,
            self.value.data(),
            Layout::Normal,
            weight.value.data(),
            Layout::Transposed,
            T::zero(),
            out.data_mut(),
        );
        if let Some(b) = bias {
            if b.shape() != [outp] {
                return shape_err(format!("linear bias {:?} for width {outp}", b.shape()));
            }
            for row in out.data_mut().chunks_mut(outp) {
                for (v, &bb) in row.iter_mut().zip(b.value.data()) {
                    *v += bb;
                }
            }
        }
        let (x, w) = (Rc::clone(&self.value), Rc::clone(&weight.value));
        let backward = move |g: &Tensor<T>, needs: &[bool]| {
            let dx = needs[0].then(|| {
                let mut dx = Tensor::zeros(&[bsz, inp]);
                gemm(
                    bsz,
                    outp,
                    inp,
                    g.data(),
                    Layout::Normal,
                    w.data(),
                    Layout::Normal,
                    T::zero(),
                    dx.data_mut(),
                );
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = Tensor::zeros(&[outp, inp]);
                gemm(
                    outp,
                    bsz,
                    inp,
                    g.data(),
                    Layout::Transposed,
                    x.data(),
                    Layout::Normal,
                    T::zero(),
                    dw.data_mut(),
                );
                dw
            });
            let mut grads = vec![dx, dw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut db = Tensor::zeros(&[outp]);
                    for row in g.data().chunks(outp) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    db
                }));
            }
            grads
        };
        Ok(match bias {
            Some(b) => self.graph.record(out, &[self, weight, b], backward),
            None => self.graph.record(out, &[self, weight], backward),
        })
    }

    /// Square-kernel convolution, `w: [out, in, k, k]`, symmetric zero padding.
    pub fn conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>, stride: usize, pad: usize) -> Result<Var<T>> {
        let [bsz, cin, h, w] = rank4(self.shape(), "conv2d input")?;
        let [cout, cin_w, kh, kw] = rank4(weight.shape(), "conv2d weight")?;
        if cin != cin_w || kh != kw {
            return shape_err(format!(
                "conv2d: input {:?} incompatible with weight {:?}",
                self.shape(),
                weight.shape()
            ));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return shape_err(format!("conv2d: degenerate geometry for input {:?}", self.shape()));
        }
        let geom = ConvGeom {
            channels: cin,
            height: h,
            width: w,
            kernel: kh,
            stride,
            pad,
        };
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let p = geom.col_cols();
        let krows = geom.col_rows();
        let in_plane = cin * h * w;
        let keep = self.graph.is_recording()
            && (self.is_tracked() || weight.is_tracked() || bias.is_some_and(|b| b.is_tracked()));

        let mut out = Tensor::zeros(&[bsz, cout, ho, wo]);
        let pointwise = geom.is_pointwise();
        let mut cols: Vec<T> = if pointwise {
            Vec::new()
        } else if keep {
            vec![T::zero(); bsz * krows * p]
        } else {
            vec![T::zero(); krows * p]
        };
        let xd = self.value.data();
        let wd = weight.value.data();
        for n in 0..bsz {
            let x_n = &xd[n * in_plane..(n + 1) * in_plane];
            let col: &[T] = if pointwise {
                x_n
            } else {
                let off = if keep { n * krows * p } else { 0 };
                let buf = &mut cols[off..off + krows * p];
                im2col(x_n, &geom, buf);
                buf
            };
            let dst = &mut out.data_mut()[n * cout * p..(n + 1) * cout * p];
            gemm(cout, krows, p, wd, Layout::Normal, col, Layout::Normal, T::zero(), dst);
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return shape_err(format!("conv2d bias {:?} for {cout} channels", b.shape()));
            }
            let bd = b.value.data();
            for (i, plane) in out.data_mut().chunks_mut(p).enumerate() {
                let c = i % cout;
                for v in plane {
                    *v += bd[c];
                }
            }
        }
        if !keep {
            return Ok(self.graph.constant(out));
        }

        let x = Rc::clone(&self.value);
        let wv = Rc::clone(&weight.value);
        let backward = move |g: &Tensor<T>, needs: &[bool]| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let mut dx = Tensor::zeros(&[bsz, cin, h, w]);
                let mut dcol = vec![T::zero(); krows * p];
                for n in 0..bsz {
                    let g_n = &gd[n * cout * p..(n + 1) * cout * p];
                    let dx_n = &mut dx.data_mut()[n * in_plane..(n + 1) * in_plane];
                    if pointwise {
                        gemm(
                            krows,
                            cout,
                            p,
                            wv.data(),
                            Layout::Transposed,
                            g_n,
                            Layout::Normal,
                            T::zero(),
                            dx_n,
                        );
                    } else {
                        gemm(
                            krows,
                            cout,
                            p,
                            wv.data(),
                            Layout::Transposed,
                            g_n,
                            Layout::Normal,
                            T::zero(),
                            &mut dcol,
                        );
                        col2im(&dcol, &geom, dx_n);
                    }
                }
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = Tensor::zeros(&[cout, cin, kh, kw]);
                for n in 0..bsz {
                    let g_n = &gd[n * cout * p..(n + 1) * cout * p];
                    let col = if pointwise {
                        &x.data()[n * in_plane..(n + 1) * in_plane]
                    } else {
                        &cols[n * krows * p..(n + 1) * krows * p]
                    };
                    gemm(
                        cout,
                        p,
                        krows,
                        g_n,
                        Layout::Normal,
                        col,
                        Layout::Transposed,
                        T::one(),
                        dw.data_mut(),
                    );
                }
                dw
            });
            let mut grads = vec![dx, dw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut db = Tensor::zeros(&[cout]);
                    for (i, plane) in gd.chunks(p).enumerate() {
                        db.data_mut()[i % cout] += plane.iter().copied().sum();
                    }
                    db
                }));
            }
            grads
        };
        Ok(match bias {
            Some(b) => self.graph.record(out, &[self, weight, b], backward),
            None => self.graph.record(out, &[self, weight], backward),
        })
    }

    /// Group normalization over `[B, C, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&self, groups: usize, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if shape.len() < 2 {
            return shape_err(format!("group_norm needs [B, C, ...], got {shape:?}"));
        }
        let (bsz, c) = (shape[0], shape[1]);
        if groups == 0 || c % groups != 0 {
            return shape_err(format!("{c} channels not divisible into {groups} groups"));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return shape_err(format!("group_norm affine params must be [{c}]"));
        }
        let spatial: usize = shape[2..].iter().product();
        let per_group = (c / groups) * spatial;
        let nf = T::from_usize(per_group).unwrap();
        let eps = T::from_f64_lossy(eps);

        let xd = self.value.data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); bsz * groups];
        for (gi, (src, dst)) in xd.chunks(per_group).zip(xhat.chunks_mut(per_group)).enumerate() {
            let mean = src.iter().copied().sum::<T>() / nf;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[gi] = inv;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv;
            }
        }
        let gd = gamma.value.data();
        let bd = beta.value.data();
        let mut out = vec![T::zero(); xd.len()];
        for (i, (o, xh)) in out.chunks_mut(spatial).zip(xhat.chunks(spatial)).enumerate() {
            let ch = i % c;
            for (ov, &xv) in o.iter_mut().zip(xh) {
                *ov = xv * gd[ch] + bd[ch];
            }
        }
        let out = Tensor::new(&shape, out)?;
        let gamma_v = Rc::clone(&gamma.value);
        Ok(self.graph.record(out, &[self, gamma, beta], move |g, needs| {
            let gy = g.data();
            let gam = gamma_v.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for (i, (gchunk, xh)) in gy.chunks(spatial).zip(xhat.chunks(spatial)).enumerate() {
                let ch = i % c;
                for (&gv, &xv) in gchunk.iter().zip(xh) {
                    dgamma[ch] += gv * xv;
                    dbeta[ch] += gv;
                }
            }
            let dx = needs[0].then(|| {
                let mut dxhat = vec![T::zero(); gy.len()];
                for (i, (d, gchunk)) in dxhat.chunks_mut(spatial).zip(gy.chunks(spatial)).enumerate() {
                    let gm = gam[i % c];
                    for (dv, &gv) in d.iter_mut().zip(gchunk) {
                        *dv = gv * gm;
                    }
                }
                let mut dx = vec![T::zero(); gy.len()];
                for (gi, ((dxg, dh), xh)) in dx
                    .chunks_mut(per_group)
                    .zip(dxhat.chunks(per_group))
                    .zip(xhat.chunks(per_group))
                    .enumerate()
                {
                    let s1: T = dh.iter().copied().sum();
                    let s2: T = dh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    let k = inv_std[gi] / nf;
                    for ((o, &d), &x) in dxg.iter_mut().zip(dh).zip(xh) {
                        *o = k * (nf * d - s1 - x * s2);
                    }
                }
                Tensor::new(&shape, dx).unwrap()
            });
            vec![
                dx,
                needs[1].then(|| Tensor::new(&[c], dgamma).unwrap()),
                needs[2].then(|| Tensor::new(&[c], dbeta).unwrap()),
            ]
        }))
    }

    /// Adds a per-sample, per-channel vector `e: [B, C]` to every spatial site of `[B, C, ...]`.
    pub fn add_channel_embedding(&self, e: &Var<T>) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if shape.len() < 2 || e.shape() != [shape[0], shape[1]] {
            return shape_err(format!("embedding {:?} does not match {shape:?}", e.shape()));
        }
        let spatial: usize = shape[2..].iter().product();
        let mut out = self.to_tensor();
        let ed = e.value.data();
        for (i, plane) in out.data_mut().chunks_mut(spatial).enumerate() {
            for v in plane {
                *v += ed[i];
            }
        }
        let (b, c) = (shape[0], shape[1]);
        Ok(self.graph.record(out, &[self, e], move |g, needs| {
            let de = needs[1].then(|| {
                let sums = g.data().chunks(spatial).map(|p| p.iter().copied().sum()).collect();
                Tensor::new(&[b, c], sums).unwrap()
            });
            vec![needs[0].then(|| g.clone()), de]
        }))
    }

    /// Concatenates along axis 1; all other axes must match.
    pub fn concat_channels(&self, other: &Var<T>) -> Result<Var<T>> {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return shape_err(format!("cannot concat {sa:?} with {sb:?}"));
        }
        let bsz = sa[0];
        let ra = self.value.numel() / bsz.max(1);
        let rb = other.value.numel() / bsz.max(1);
        let mut data = Vec::with_capacity(self.value.numel() + other.value.numel());
        for n in 0..bsz {
            data.extend_from_slice(&self.value.data()[n * ra..(n + 1) * ra]);
            data.extend_from_slice(&other.value.data()[n * rb..(n + 1) * rb]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let out = Tensor::new(&shape, data)?;
        Ok(self.graph.record(out, &[self, other], move |g, needs| {
            let gd = g.data();
            let mut da = Vec::with_capacity(bsz * ra);
            let mut db = Vec::with_capacity(bsz * rb);
            for n in 0..bsz {
                let row = &gd[n * (ra + rb)..(n + 1) * (ra + rb)];
                da.extend_from_slice(&row[..ra]);
                db.extend_from_slice(&row[ra..]);
            }
            vec![
                needs[0].then(|| Tensor::new(&sa, da).unwrap()),
                needs[1].then(|| Tensor::new(&sb, db).unwrap()),
            ]
        }))
    }

    pub fn upsample_nearest2x(&self) -> Result<Var<T>> {
        let [b, c, h, w] = rank4(self.shape(), "upsample")?;
        let mut out = Tensor::zeros(&[b, c, 2 * h, 2 * w]);
        let xd = self.value.data();
        for (plane, src) in out.data_mut().chunks_mut(4 * h * w).zip(xd.chunks(h * w)) {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    plane[y * 2 * w + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        Ok(self.graph.record(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&[b, c, h, w]);
            for (plane, src) in dx.data_mut().chunks_mut(h * w).zip(g.data().chunks(4 * h * w)) {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        plane[(y / 2) * w + x / 2] += src[y * 2 * w + x];
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Var<T>> {
        let [b, c, h, w] = rank4(self.shape(), "global_avg_pool")?;
        let s = h * w;
        let sf = T::from_usize(s).unwrap();
        let data = self
            .value
            .data()
            .chunks(s)
            .map(|p| p.iter().copied().sum::<T>() / sf)
            .collect();
        let out = Tensor::new(&[b, c], data)?;
        Ok(self.graph.record(out, &[self], move |g, _| {
            let mut dx = Vec::with_capacity(b * c * s);
            for &gv in g.data() {
                dx.extend(std::iter::repeat_n(gv / sf, s));
            }
            vec![Some(Tensor::new(&[b, c, h, w], dx).unwrap())]
        }))
    }

    /// `[B, M, N] -> [B, N, M]`.
    pub fn transpose_last2(&self) -> Result<Var<T>> {
        let (b, m, n) = match self.shape() {
            &[b, m, n] => (b, m, n),
            s => return shape_err(format!("transpose_last2 expects rank 3, got {s:?}")),
        };
        let tr = move |src: &[T], rows: usize, cols: usize| {
            let mut out = vec![T::zero(); src.len()];
            for k in 0..b {
                let s = &src[k * rows * cols..(k + 1) * rows * cols];
                let d = &mut out[k * rows * cols..(k + 1) * rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        d[j * rows + i] = s[i * cols + j];
                    }
                }
            }
            out
        };
        let out = Tensor::new(&[b, n, m], tr(self.value.data(), m, n))?;
        Ok(self.graph.record(out, &[self], move |g, _| {
            vec![Some(Tensor::new(&[b, m, n], tr(g.data(), n, m)).unwrap())]
        }))
    }

    /// Batched matrix product `[B, M, K] @ [B, K, N]`.
    pub fn bmm(&self, other: &Var<T>) -> Result<Var<T>> {
        same_graph(self, other)?;
        let (b, m, k, n) = match (self.shape(), other.shape()) {
            (&[b, m, k], &[b2, k2, n]) if b == b2 && k == k2 => (b, m, k, n),
            (sa, sb) => return shape_err(format!("bmm: {sa:?} @ {sb:?}")),
        };
        let mut out = Tensor::zeros(&[b, m, n]);
        let (ad, bd) = (self.value.data(), other.value.data());
        for i in 0..b {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                Layout::Normal,
                &bd[i * k * n..],
                Layout::Normal,
                T::zero(),
                &mut out.data_mut()[i * m * n..],
            );
        }
        let (av, bv) = (Rc::clone(&self.value), Rc::clone(&other.value));
        Ok(self.graph.record(out, &[self, other], move |g, needs| {
            let gd = g.data();
            let da = needs[0].then(|| {
                let mut da = Tensor::zeros(&[b, m, k]);
                for i in 0..b {
                    gemm(
                        m,
                        n,
                        k,
                        &gd[i * m * n..],
                        Layout::Normal,
                        &bv.data()[i * k * n..],
                        Layout::Transposed,
                        T::zero(),
                        &mut da.data_mut()[i * m * k..],
                    );
                }
                da
            });
            let db = needs[1].then(|| {
                let mut db = Tensor::zeros(&[b, k, n]);
                for i in 0..b {
                    gemm(
                        k,
                        m,
                        n,
                        &av.data()[i * m * k..],
                        Layout::Transposed,
                        &gd[i * m * n..],
                        Layout::Normal,
                        T::zero(),
                        &mut db.data_mut()[i * k * n..],
                    );
                }
                db
            });
            vec![da, db]
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        let last = *shape.last().ok_or_else(|| Error::Shape("softmax of rank 0".into()))?;
        let mut out = self.to_tensor();
        for row in out.data_mut().chunks_mut(last) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let y = out.clone();
        Ok(self.graph.record(out, &[self], move |g, _| {
            let mut dx = g.clone();
            for (d, yr) in dx.data_mut().chunks_mut(last).zip(y.data().chunks(last)) {
                let dot: T = d.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for (dv, &yv) in d.iter_mut().zip(yr) {
                    *dv = yv * (*dv - dot);
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`self`), `self: [B, K]`.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<T>> {
        let (b, k) = match self.shape() {
            &[b, k] => (b, k),
            s => return shape_err(format!("cross_entropy expects [B, K], got {s:?}")),
        };
        if labels.len() != b || labels.iter().any(|&l| l >= k) {
            return shape_err(format!("{} labels for batch {b} with {k} classes", labels.len()));
        }
        let mut probs = self.to_tensor();
        let mut loss = T::zero();
        for (row, &l) in probs.data_mut().chunks_mut(k).zip(labels) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            loss += lse - row[l];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let bf = T::from_usize(b).unwrap();
        let labels = labels.to_vec();
        Ok(self.graph.record(Tensor::scalar(loss / bf), &[self], move |g, _| {
            let scale = g.data()[0] / bf;
            let mut d = probs;
            for (row, &l) in d.data_mut().chunks_mut(k).zip(&labels) {
                row[l] -= T::one();
                for v in row.iter_mut() {
                    *v *= scale;
                }
            }
            vec![Some(d)]
        }))
    }

    /// Row lookup into an embedding table `[V, D]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<T>> {
        let (v, d) = match self.shape() {
            &[v, d] => (v, d),
            s => return shape_err(format!("gather_rows expects [V, D], got {s:?}")),
        };
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return shape_err(format!("row {bad} out of table with {v} rows"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&self.value.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[ids.len(), d], data)?;
        let ids = ids.to_vec();
        Ok(self.graph.record(out, &[self], move |g, _| {
            let mut dt = Tensor::zeros(&[v, d]);
            for (row, &i) in g.data().chunks(d).zip(&ids) {
                for (t, &gv) in dt.data_mut()[i * d..(i + 1) * d].iter_mut().zip(row) {
                    *t += gv;
                }
            }
            vec![Some(dt)]
        }))
    }
}
