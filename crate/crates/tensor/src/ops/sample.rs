//! Interpolation-based resampling: point sampling, resizing and ROI Align.
//!
//! Pixel `(i, j)` of a map has its center at continuous coordinate
//! `(x = j, y = i)`. Samples outside `[0, W-1] x [0, H-1]` clamp to the border.

use crate::array::Array;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Clamped 1-D linear stencil: `value = (1 - w) * v[i0] + w * v[i1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub i0: usize,
    pub i1: usize,
    pub w: f64,
}

impl Stencil {
    pub fn new(coord: f64, size: usize) -> Self {
        debug_assert!(size > 0);
        let c = coord.clamp(0.0, (size - 1) as f64);
        let i0 = (c.floor() as usize).min(size - 1);
        let i1 = (i0 + 1).min(size - 1);
        Self {
            i0,
            i1,
            w: c - i0 as f64,
        }
    }
}

/// Bilinear interpolation of every channel of a `[C, H, W]` map at `(x, y)`.
pub fn bilinear_sample(feature: &Array, x: f64, y: f64) -> Result<Vec<f64>> {
    let &[c, h, w] = feature.shape() else {
        return Err(Error::InvalidInput(format!(
            "bilinear_sample expects [C,H,W], got {:?}",
            feature.shape()
        )));
    };
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidInput("bilinear_sample on an empty feature map".into()));
    }
    let (sx, sy) = (Stencil::new(x, w), Stencil::new(y, h));
    let d = feature.data();
    Ok((0..c)
        .map(|ch| {
            let at = |yy: usize, xx: usize| d[(ch * h + yy) * w + xx];
            (1.0 - sy.w) * ((1.0 - sx.w) * at(sy.i0, sx.i0) + sx.w * at(sy.i0, sx.i1))
                + sy.w * ((1.0 - sx.w) * at(sy.i1, sx.i0) + sx.w * at(sy.i1, sx.i1))
        })
        .collect())
}

fn planes(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        [n, c, h, w] => Ok((n * c, h, w)),
        _ => shape_err(op, format!("expected [C,H,W] or [N,C,H,W], got {shape:?}")),
    }
}

fn with_spatial(shape: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let n = s.len();
    s[n - 2] = h;
    s[n - 1] = w;
    s
}

/// Applies separable per-axis stencils to every plane.
fn apply_stencils(x: &[f64], planes: usize, h: usize, w: usize, ys: &[Stencil], xs: &[Stencil]) -> Vec<f64> {
    let (oh, ow) = (ys.len(), xs.len());
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (i, sy) in ys.iter().enumerate() {
            let r0 = &src[sy.i0 * w..(sy.i0 + 1) * w];
            let r1 = &src[sy.i1 * w..(sy.i1 + 1) * w];
            for (j, sx) in xs.iter().enumerate() {
                let top = (1.0 - sx.w) * r0[sx.i0] + sx.w * r0[sx.i1];
                let bot = (1.0 - sx.w) * r1[sx.i0] + sx.w * r1[sx.i1];
                dst[i * ow + j] = (1.0 - sy.w) * top + sy.w * bot;
            }
        }
    }
    out
}

fn scatter_stencils(g: &[f64], planes: usize, h: usize, w: usize, ys: &[Stencil], xs: &[Stencil]) -> Vec<f64> {
    let (oh, ow) = (ys.len(), xs.len());
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for (i, sy) in ys.iter().enumerate() {
            for (j, sx) in xs.iter().enumerate() {
                let v = src[i * ow + j];
                dst[sy.i0 * w + sx.i0] += v * (1.0 - sy.w) * (1.0 - sx.w);
                dst[sy.i0 * w + sx.i1] += v * (1.0 - sy.w) * sx.w;
                dst[sy.i1 * w + sx.i0] += v * sy.w * (1.0 - sx.w);
                dst[sy.i1 * w + sx.i1] += v * sy.w * sx.w;
            }
        }
    }
    gx
}

/// Source coordinate of output pixel `dst` when resizing `src_len -> dst_len`
/// with aligned pixel centers.
pub fn resize_source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5
}

impl Tensor {
    /// Bilinear resize of the two trailing axes.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (np, h, w) = planes("resize_bilinear", self.shape())?;
        if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
            return shape_err("resize_bilinear", "empty spatial extent");
        }
        if (h, w) == (out_h, out_w) {
            return Ok(self.clone());
        }
        let ys: Vec<Stencil> = (0..out_h).map(|i| Stencil::new(resize_source_coord(i, h, out_h), h)).collect();
        let xs: Vec<Stencil> = (0..out_w).map(|j| Stencil::new(resize_source_coord(j, w, out_w), w)).collect();
        let out = apply_stencils(self.value().data(), np, h, w, &ys, &xs);
        Tensor::from_op(
            "resize_bilinear",
            Array::new(with_spatial(self.shape(), out_h, out_w), out)?,
            vec![self.clone()],
            Box::new(move |inputs, _, g| {
                let gx = scatter_stencils(g.data(), np, h, w, &ys, &xs);
                Ok(vec![Some(Array::new(inputs[0].shape().to_vec(), gx)?)])
            }),
        )
    }

    /// Nearest-neighbour upsampling by an integer `factor`, cropped or
    /// border-extended to `out_h x out_w`.
    pub fn upsample_nearest(&self, factor: usize, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (np, h, w) = planes("upsample_nearest", self.shape())?;
        if factor == 0 || h == 0 || w == 0 {
            return shape_err("upsample_nearest", "zero factor or empty input");
        }
        let ys: Vec<usize> = (0..out_h).map(|i| (i / factor).min(h - 1)).collect();
        let xs: Vec<usize> = (0..out_w).map(|j| (j / factor).min(w - 1)).collect();
        let x = self.value().data();
        let mut out = Vec::with_capacity(np * out_h * out_w);
        for p in 0..np {
            for &sy in &ys {
                let row = &x[(p * h + sy) * w..(p * h + sy + 1) * w];
                out.extend(xs.iter().map(|&sx| row[sx]));
            }
        }
        Tensor::from_op(
            "upsample_nearest",
            Array::new(with_spatial(self.shape(), out_h, out_w), out)?,
            vec![self.clone()],
            Box::new(move |inputs, _, g| {
                let mut gx = Array::zeros(inputs[0].shape().to_vec());
                let gd = gx.data_mut();
                let mut k = 0;
                for p in 0..np {
                    for &sy in &ys {
                        for &sx in &xs {
                            gd[(p * h + sy) * w + sx] += g.data()[k];
                            k += 1;
                        }
                    }
                }
                Ok(vec![Some(gx)])
            }),
        )
    }

    /// ROI Align over a `[C, H, W]` map for boxes given as `[x1, y1, x2, y2]`
    /// in image pixels. Box corners map to map coordinates by
    /// `v * spatial_scale - 0.5`; every output bin averages
    /// `sampling_ratio²` bilinear samples placed on a regular sub-grid.
    /// Boxes thinner than `1e-6` map units take one sample per bin.
    /// Output shape is `[R, C, out_h, out_w]`.
    pub fn roi_align(
        &self,
        boxes: &[[f64; 4]],
        spatial_scale: f64,
        out_h: usize,
        out_w: usize,
        sampling_ratio: usize,
    ) -> Result<Tensor> {
        let &[c, h, w] = self.shape() else {
            return shape_err("roi_align", format!("expected [C,H,W], got {:?}", self.shape()));
        };
        if c == 0 || h == 0 || w == 0 || out_h == 0 || out_w == 0 || sampling_ratio == 0 {
            return shape_err("roi_align", "empty map, output or sampling ratio");
        }
        let plan: Vec<RoiPlan> = boxes
            .iter()
            .map(|b| RoiPlan::new(b, spatial_scale, h, w, out_h, out_w, sampling_ratio))
            .collect::<Result<_>>()?;
        let x = self.value().data();
        let bins = out_h * out_w;
        let mut out = vec![0.0; boxes.len() * c * bins];
        for (r, p) in plan.iter().enumerate() {
            for ch in 0..c {
                let src = &x[ch * h * w..(ch + 1) * h * w];
                let dst = &mut out[(r * c + ch) * bins..(r * c + ch + 1) * bins];
                p.forward(src, w, out_w, dst);
            }
        }
        Tensor::from_op(
            "roi_align",
            Array::new([boxes.len(), c, out_h, out_w], out)?,
            vec![self.clone()],
            Box::new(move |inputs, _, g| {
                let mut gx = vec![0.0; c * h * w];
                for (r, p) in plan.iter().enumerate() {
                    for ch in 0..c {
                        let gsrc = &g.data()[(r * c + ch) * bins..(r * c + ch + 1) * bins];
                        p.backward(gsrc, w, out_w, &mut gx[ch * h * w..(ch + 1) * h * w]);
                    }
                }
                Ok(vec![Some(Array::new(inputs[0].shape().to_vec(), gx)?)])
            }),
        )
    }
}

/// Precomputed sample stencils for one box.
struct RoiPlan {
    /// Per output row: its sample stencils along y.
    ys: Vec<Vec<Stencil>>,
    /// Per output column: its sample stencils along x.
    xs: Vec<Vec<Stencil>>,
    norm: f64,
}

impl RoiPlan {
    fn new(
        b: &[f64; 4],
        scale: f64,
        h: usize,
        w: usize,
        out_h: usize,
        out_w: usize,
        ratio: usize,
    ) -> Result<Self> {
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite box {b:?}")));
        }
        let x1 = b[0] * scale - 0.5;
        let y1 = b[1] * scale - 0.5;
        let bw = b[2] * scale - 0.5 - x1;
        let bh = b[3] * scale - 0.5 - y1;
        let degenerate = bw < 1e-6 || bh < 1e-6;
        let n = if degenerate { 1 } else { ratio };
        let axis = |start: f64, extent: f64, bins: usize, size: usize| -> Vec<Vec<Stencil>> {
            let extent = extent.max(0.0);
            let bin = extent / bins as f64;
            (0..bins)
                .map(|i| {
                    (0..n)
                        .map(|s| Stencil::new(start + bin * (i as f64 + (s as f64 + 0.5) / n as f64), size))
                        .collect()
                })
                .collect()
        };
        Ok(Self {
            ys: axis(y1, bh, out_h, h),
            xs: axis(x1, bw, out_w, w),
            norm: 1.0 / (n * n) as f64,
        })
    }

    fn forward(&self, src: &[f64], w: usize, out_w: usize, dst: &mut [f64]) {
        for (i, ys) in self.ys.iter().enumerate() {
            for (j, xs) in self.xs.iter().enumerate() {
                let mut acc = 0.0;
                for sy in ys {
                    let r0 = &src[sy.i0 * w..(sy.i0 + 1) * w];
                    let r1 = &src[sy.i1 * w..(sy.i1 + 1) * w];
                    for sx in xs {
                        let top = (1.0 - sx.w) * r0[sx.i0] + sx.w * r0[sx.i1];
                        let bot = (1.0 - sx.w) * r1[sx.i0] + sx.w * r1[sx.i1];
                        acc += (1.0 - sy.w) * top + sy.w * bot;
                    }
                }
                dst[i * out_w + j] = acc * self.norm;
            }
        }
    }

    fn backward(&self, g: &[f64], w: usize, out_w: usize, gx: &mut [f64]) {
        for (i, ys) in self.ys.iter().enumerate() {
            for (j, xs) in self.xs.iter().enumerate() {
                let v = g[i * out_w + j] * self.norm;
                for sy in ys {
                    for sx in xs {
                        gx[sy.i0 * w + sx.i0] += v * (1.0 - sy.w) * (1.0 - sx.w);
                        gx[sy.i0 * w + sx.i1] += v * (1.0 - sy.w) * sx.w;
                        gx[sy.i1 * w + sx.i0] += v * sy.w * (1.0 - sx.w);
                        gx[sy.i1 * w + sx.i1] += v * sy.w * sx.w;
                    }
                }
            }
        }
    }
}
