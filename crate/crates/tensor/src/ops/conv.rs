//! 2-D convolution, transposed convolution and max pooling over
//! `[C, H, W]` or `[N, C, H, W]` inputs with square kernels.

use crate::array::{gemm, Array, MatView};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(c: usize, h: usize, w: usize, k: usize, s: usize, p: usize) -> Option<Self> {
        if s == 0 || k == 0 || h + 2 * p < k || w + 2 * p < k {
            return None;
        }
        Some(Self {
            c,
            h,
            w,
            k,
            s,
            p,
            ho: (h + 2 * p - k) / s + 1,
            wo: (w + 2 * p - k) / s + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.s == 1 && self.p == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox*s + kx - p` is in range.
    fn valid_range(&self, kx: usize, extent: usize, out: usize) -> (usize, usize) {
        let lo = if self.p > kx { (self.p - kx).div_ceil(self.s) } else { 0 };
        let hi = if extent + self.p > kx {
            ((extent - 1 + self.p - kx) / self.s + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let n = g.cols();
    for ci in 0..g.c {
        for ky in 0..g.k {
            let (ylo, yhi) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * n;
                let dst_plane = &mut cols[row..row + n];
                let (xlo, xhi) = g.valid_range(kx, g.w, g.wo);
                for oy in 0..g.ho {
                    let dst = &mut dst_plane[oy * g.wo..(oy + 1) * g.wo];
                    if oy < ylo || oy >= yhi || xlo >= xhi {
                        dst.fill(0.0);
                        continue;
                    }
                    let iy = oy * g.s + ky - g.p;
                    let src = &x[(ci * g.h + iy) * g.w..(ci * g.h + iy + 1) * g.w];
                    dst[..xlo].fill(0.0);
                    dst[xhi..].fill(0.0);
                    if g.s == 1 {
                        let start = xlo + kx - g.p;
                        dst[xlo..xhi].copy_from_slice(&src[start..start + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            dst[ox] = src[ox * g.s + kx - g.p];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geometry, x: &mut [f64]) {
    let n = g.cols();
    for ci in 0..g.c {
        for ky in 0..g.k {
            let (ylo, yhi) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * n;
                let (xlo, xhi) = g.valid_range(kx, g.w, g.wo);
                for oy in ylo..yhi {
                    let iy = oy * g.s + ky - g.p;
                    let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut x[(ci * g.h + iy) * g.w..(ci * g.h + iy + 1) * g.w];
                    for ox in xlo..xhi {
                        dst[ox * g.s + kx - g.p] += src[ox];
                    }
                }
            }
        }
    }
}

/// Returns (batch, channels, h, w, batched?) for a 3-D or 4-D input.
fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [n, c, h, w] => Ok((n, c, h, w, true)),
        _ => shape_err(op, format!("expected [C,H,W] or [N,C,H,W], got {shape:?}")),
    }
}

fn out_shape(batched: bool, n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if batched {
        vec![n, c, h, w]
    } else {
        vec![c, h, w]
    }
}

impl Tensor {
    /// Cross-correlation with weight `[O, C, k, k]`, optional bias `[O]`,
    /// uniform stride and zero padding.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let (n, c, h, w, batched) = image_dims("conv2d", self.shape())?;
        let &[o, wc, k, k2] = weight.shape() else {
            return shape_err("conv2d", format!("weight shape {:?}", weight.shape()));
        };
        if wc != c || k != k2 {
            return shape_err(
                "conv2d",
                format!("input {:?} vs weight {:?}", self.shape(), weight.shape()),
            );
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return shape_err("conv2d", format!("bias shape {:?}", b.shape()));
            }
        }
        let Some(geo) = Geometry::new(c, h, w, k, stride, padding) else {
            return shape_err("conv2d", format!("kernel {k} does not fit {h}x{w} (pad {padding})"));
        };
        let (rows, ncols) = (geo.rows(), geo.cols());
        let x = self.value().data();
        let wv = MatView::new(weight.value().data(), o, rows);
        let mut out = vec![0.0; n * o * ncols];
        let keep_cols = weight.requires_grad() && !geo.is_pointwise();
        let mut saved = Vec::new();
        let mut cols = vec![0.0; if geo.is_pointwise() { 0 } else { rows * ncols }];
        for b in 0..n {
            let xb = &x[b * c * h * w..(b + 1) * c * h * w];
            let colview = if geo.is_pointwise() {
                MatView::new(xb, rows, ncols)
            } else {
                im2col(xb, &geo, &mut cols);
                MatView::new(&cols, rows, ncols)
            };
            gemm(wv, colview, &mut out[b * o * ncols..(b + 1) * o * ncols], 0.0);
            if keep_cols {
                saved.push(cols.clone());
            }
        }
        if let Some(bt) = bias {
            let bd = bt.value().data();
            for (chunk, i) in out.chunks_mut(ncols).zip((0..o).cycle()) {
                for v in chunk {
                    *v += bd[i];
                }
            }
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        inputs.extend(bias.cloned());
        Tensor::from_op(
            "conv2d",
            Array::new(out_shape(batched, n, o, geo.ho, geo.wo), out)?,
            inputs,
            Box::new(move |inputs, _, g| {
                let gd = g.data();
                let xin = inputs[0].value().data();
                let wd = inputs[1].value().data();
                let mut grads = vec![None, None, None];
                if inputs[0].requires_grad() {
                    let mut gx = vec![0.0; n * c * h * w];
                    let mut gcols = vec![0.0; rows * ncols];
                    for b in 0..n {
                        let gb = MatView::new(&gd[b * o * ncols..(b + 1) * o * ncols], o, ncols);
                        let gxb = &mut gx[b * c * h * w..(b + 1) * c * h * w];
                        if geo.is_pointwise() {
                            gemm(MatView::new(wd, o, rows).t(), gb, gxb, 0.0);
                        } else {
                            gemm(MatView::new(wd, o, rows).t(), gb, &mut gcols, 0.0);
                            col2im(&gcols, &geo, gxb);
                        }
                    }
                    grads[0] = Some(Array::new(inputs[0].shape().to_vec(), gx)?);
                }
                if inputs[1].requires_grad() {
                    let mut gw = vec![0.0; o * rows];
                    let mut scratch = Vec::new();
                    for b in 0..n {
                        let gb = MatView::new(&gd[b * o * ncols..(b + 1) * o * ncols], o, ncols);
                        let colview = if geo.is_pointwise() {
                            MatView::new(&xin[b * c * h * w..(b + 1) * c * h * w], rows, ncols)
                        } else if let Some(cached) = saved.get(b) {
                            MatView::new(cached, rows, ncols)
                        } else {
                            scratch.resize(rows * ncols, 0.0);
                            im2col(&xin[b * c * h * w..(b + 1) * c * h * w], &geo, &mut scratch);
                            MatView::new(&scratch, rows, ncols)
                        };
                        gemm(gb, colview.t(), &mut gw, 1.0);
                    }
                    grads[1] = Some(Array::new(inputs[1].shape().to_vec(), gw)?);
                }
                if inputs.len() > 2 && inputs[2].requires_grad() {
                    let mut gbias = vec![0.0; o];
                    for (chunk, i) in gd.chunks(ncols).zip((0..o).cycle()) {
                        gbias[i] += chunk.iter().sum::<f64>();
                    }
                    grads[2] = Some(Array::from_vec(gbias));
                }
                grads.truncate(inputs.len());
                Ok(grads)
            }),
        )
    }

    /// Transposed convolution with weight `[C_in, C_out, k, k]`.
    /// Output extent is `(H - 1) * stride - 2 * padding + k`.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let (n, cin, h, w, batched) = image_dims("conv_transpose2d", self.shape())?;
        let &[wc, cout, k, k2] = weight.shape() else {
            return shape_err("conv_transpose2d", format!("weight shape {:?}", weight.shape()));
        };
        if wc != cin || k != k2 || stride == 0 || h == 0 || w == 0 {
            return shape_err(
                "conv_transpose2d",
                format!("input {:?} vs weight {:?}", self.shape(), weight.shape()),
            );
        }
        if (h - 1) * stride + k < 2 * padding + 1 || (w - 1) * stride + k < 2 * padding + 1 {
            return shape_err("conv_transpose2d", "padding larger than output");
        }
        let (ho, wo) = ((h - 1) * stride + k - 2 * padding, (w - 1) * stride + k - 2 * padding);
        // Geometry of the equivalent forward convolution from the output grid.
        let geo = Geometry::new(cout, ho, wo, k, stride, padding).expect("valid transposed geometry");
        debug_assert_eq!((geo.ho, geo.wo), (h, w));
        let (rows, ncols) = (geo.rows(), geo.cols());
        let x = self.value().data();
        let wr = MatView::new(weight.value().data(), cin, rows);
        let mut out = vec![0.0; n * cout * ho * wo];
        let mut cols = vec![0.0; rows * ncols];
        for b in 0..n {
            let xb = MatView::new(&x[b * cin * ncols..(b + 1) * cin * ncols], cin, ncols);
            gemm(wr.t(), xb, &mut cols, 0.0);
            col2im(&cols, &geo, &mut out[b * cout * ho * wo..(b + 1) * cout * ho * wo]);
        }
        let plane = ho * wo;
        if let Some(bt) = bias {
            if bt.shape() != [cout] {
                return shape_err("conv_transpose2d", format!("bias shape {:?}", bt.shape()));
            }
            let bd = bt.value().data();
            for (chunk, i) in out.chunks_mut(plane).zip((0..cout).cycle()) {
                for v in chunk {
                    *v += bd[i];
                }
            }
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        inputs.extend(bias.cloned());
        Tensor::from_op(
            "conv_transpose2d",
            Array::new(out_shape(batched, n, cout, ho, wo), out)?,
            inputs,
            Box::new(move |inputs, _, g| {
                let gd = g.data();
                let xin = inputs[0].value().data();
                let wd = inputs[1].value().data();
                let mut gcols = vec![0.0; rows * ncols];
                let mut gx = inputs[0].requires_grad().then(|| vec![0.0; n * cin * ncols]);
                let mut gw = inputs[1].requires_grad().then(|| vec![0.0; cin * rows]);
                if gx.is_some() || gw.is_some() {
                    for b in 0..n {
                        im2col(&gd[b * cout * plane..(b + 1) * cout * plane], &geo, &mut gcols);
                        let gc = MatView::new(&gcols, rows, ncols);
                        if let Some(gx) = gx.as_mut() {
                            gemm(
                                MatView::new(wd, cin, rows),
                                gc,
                                &mut gx[b * cin * ncols..(b + 1) * cin * ncols],
                                0.0,
                            );
                        }
                        if let Some(gw) = gw.as_mut() {
                            let xb = MatView::new(&xin[b * cin * ncols..(b + 1) * cin * ncols], cin, ncols);
                            gemm(xb, gc.t(), gw, 1.0);
                        }
                    }
                }
                let mut grads = vec![
                    gx.map(|d| Array::new(inputs[0].shape().to_vec(), d)).transpose()?,
                    gw.map(|d| Array::new(inputs[1].shape().to_vec(), d)).transpose()?,
                ];
                if inputs.len() > 2 {
                    let gbias = inputs[2].requires_grad().then(|| {
                        let mut gb = vec![0.0; cout];
                        for (chunk, i) in gd.chunks(plane).zip((0..cout).cycle()) {
                            gb[i] += chunk.iter().sum::<f64>();
                        }
                        Array::from_vec(gb)
                    });
                    grads.push(gbias);
                }
                Ok(grads)
            }),
        )
    }

    /// Max pooling with a square window; padded cells never win.
    pub fn max_pool2d(&self, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
        let (n, c, h, w, batched) = image_dims("max_pool2d", self.shape())?;
        if padding * 2 > kernel {
            return shape_err("max_pool2d", "padding exceeds half the window");
        }
        let Some(geo) = Geometry::new(c, h, w, kernel, stride, padding) else {
            return shape_err("max_pool2d", format!("window {kernel} does not fit {h}x{w}"));
        };
        let (ho, wo) = (geo.ho, geo.wo);
        let x = self.value().data();
        let mut out = vec![f64::NEG_INFINITY; n * c * ho * wo];
        let mut arg = vec![0usize; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let slot = (plane * ho + oy) * wo + ox;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if x[idx] > out[slot] {
                                out[slot] = x[idx];
                                arg[slot] = idx;
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_op(
            "max_pool2d",
            Array::new(out_shape(batched, n, c, ho, wo), out)?,
            vec![self.clone()],
            Box::new(move |inputs, _, g| {
                let mut gx = Array::zeros(inputs[0].shape().to_vec());
                let gd = gx.data_mut();
                for (slot, &src) in arg.iter().enumerate() {
                    gd[src] += g.data()[slot];
                }
                Ok(vec![Some(gx)])
            }),
        )
    }
}
