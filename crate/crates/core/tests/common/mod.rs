//! Straightforward reference implementations used as oracles.
#![allow(dead_code)]

use cbhvt::region::BBox;
use cbhvt_tensor::Array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Array {
    Array::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn relu(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}

/// Sum of tent weights over every pixel; coordinates clamp to the map.
pub fn bilinear(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let mut s = 0.0;
    for i in 0..h {
        let wy = (1.0 - (y - i as f64).abs()).max(0.0);
        if wy == 0.0 {
            continue;
        }
        for j in 0..w {
            let wx = (1.0 - (x - j as f64).abs()).max(0.0);
            s += wy * wx * plane[i * w + j];
        }
    }
    s
}

/// `[C,H,W]` by `[O,C,k,k]` with zero padding.
pub fn conv2d(x: &Array, w: &Array, bias: Option<&Array>, stride: usize, pad: usize) -> Array {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    assert_eq!(w.shape()[1], c);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Array::zeros([o, ho, wo]);
    for oc in 0..o {
        for i in 0..ho {
            for j in 0..wo {
                let mut s = bias.map_or(0.0, |b| b.data()[oc]);
                for ic in 0..c {
                    for di in 0..k {
                        for dj in 0..k {
                            let (yi, xj) = ((i * stride + di) as isize - pad as isize, (j * stride + dj) as isize - pad as isize);
                            if yi < 0 || xj < 0 || yi >= h as isize || xj >= wd as isize {
                                continue;
                            }
                            s += w.get(&[oc, ic, di, dj]) * x.get(&[ic, yi as usize, xj as usize]);
                        }
                    }
                }
                out.set(&[oc, i, j], s);
            }
        }
    }
    out
}

/// Per-channel affine normalization with fixed statistics.
pub fn batch_norm_fixed(x: &Array, gamma: &Array, beta: &Array, mean: &Array, var: &Array, eps: f64) -> Array {
    let (c, hw) = (x.shape()[0], x.len() / x.shape()[0]);
    let mut out = x.clone();
    for ch in 0..c {
        let scale = gamma.data()[ch] / (var.data()[ch] + eps).sqrt();
        for v in &mut out.data_mut()[ch * hw..(ch + 1) * hw] {
            *v = (*v - mean.data()[ch]) * scale + beta.data()[ch];
        }
    }
    out
}

/// 3x3 stride-1 max pool ignoring out-of-map cells.
pub fn max_pool3(x: &Array) -> Array {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Array::zeros([c, h, w]);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut m = f64::NEG_INFINITY;
                for yi in i.saturating_sub(1)..(i + 2).min(h) {
                    for xj in j.saturating_sub(1)..(j + 2).min(w) {
                        m = m.max(x.get(&[ch, yi, xj]));
                    }
                }
                out.set(&[ch, i, j], m);
            }
        }
    }
    out
}

/// Row-major `[n, din] x [din, dout] + b`.
pub fn linear(x: &[f64], n: usize, w: &Array, b: &Array) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; n * dout];
    for r in 0..n {
        for o in 0..dout {
            out[r * dout + o] = b.data()[o] + (0..din).map(|i| x[r * din + i] * w.get(&[i, o])).sum::<f64>();
        }
    }
    out
}

pub fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for v in row {
            *v = (*v - m).exp() / z;
        }
    }
}

/// Multi-head scaled dot-product attention over `[n, d]` tokens, all keys
/// visible, followed by the output projection.
#[allow(clippy::too_many_arguments)]
pub fn dense_attention(
    x: &[f64],
    n: usize,
    heads: usize,
    (wq, bq): (&Array, &Array),
    (wk, bk): (&Array, &Array),
    (wv, bv): (&Array, &Array),
    (wo, bo): (&Array, &Array),
) -> Vec<f64> {
    let d = wq.shape()[0];
    let q = linear(x, n, wq, bq);
    let k = linear(x, n, wk, bk);
    let v = linear(x, n, wv, bv);
    let dh = d / heads;
    let mut joined = vec![0.0; n * d];
    for h in 0..heads {
        let mut scores = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                scores[i * n + j] =
                    (0..dh).map(|t| q[i * d + h * dh + t] * k[j * d + h * dh + t]).sum::<f64>() / (dh as f64).sqrt();
            }
        }
        softmax_rows(&mut scores, n);
        for i in 0..n {
            for t in 0..dh {
                joined[i * d + h * dh + t] = (0..n).map(|j| scores[i * n + j] * v[j * d + h * dh + t]).sum();
            }
        }
    }
    linear(&joined, n, wo, bo)
}

/// Channel gate then spatial gate, element by element.
pub fn attention_refine(f: &Array, mlp: [(&Array, &Array); 2], spatial: (&Array, &Array)) -> Array {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let hw = h * w;
    let avg: Vec<f64> = (0..c).map(|ch| f.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
    let max: Vec<f64> = (0..c)
        .map(|ch| f.data()[ch * hw..(ch + 1) * hw].iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shared = |v: &[f64]| {
        let mut hdn = linear(v, 1, mlp[0].0, mlp[0].1);
        relu(&mut hdn);
        linear(&hdn, 1, mlp[1].0, mlp[1].1)
    };
    let (a, m) = (shared(&avg), shared(&max));
    let mut refined = f.clone();
    for ch in 0..c {
        let g = sigmoid(a[ch] + m[ch]);
        for v in &mut refined.data_mut()[ch * hw..(ch + 1) * hw] {
            *v *= g;
        }
    }
    let mut desc = Array::zeros([2, h, w]);
    for p in 0..hw {
        let vals: Vec<f64> = (0..c).map(|ch| refined.data()[ch * hw + p]).collect();
        desc.data_mut()[p] = vals.iter().sum::<f64>() / c as f64;
        desc.data_mut()[hw + p] = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    let gate = conv2d(&desc, spatial.0, Some(spatial.1), 1, 3);
    for ch in 0..c {
        for p in 0..hw {
            refined.data_mut()[ch * hw + p] *= sigmoid(gate.data()[p]);
        }
    }
    refined
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64, min_side: f64, max_side: f64) -> BBox {
    let w = rng.random_range(min_side..max_side);
    let h = rng.random_range(min_side..max_side);
    let x1 = rng.random_range(0.0..extent - w);
    let y1 = rng.random_range(0.0..extent - h);
    BBox {
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
    }
}

/// Sort by score (stable on index), then keep each box unless a kept box
/// overlaps it beyond the threshold.
pub fn nms(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    for a in 0..order.len() {
        for b in a + 1..order.len() {
            let (i, j) = (order[a], order[b]);
            if scores[j] > scores[i] || (scores[j] == scores[i] && j < i) {
                order.swap(a, b);
            }
        }
    }
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= thr) {
            kept.push(i);
        }
    }
    kept
}

/// Per bin, the mean of `ratio x ratio` tent samples placed at sub-cell
/// centres; box corners map by `v * scale - 0.5`.
pub fn roi_align(map: &Array, b: &BBox, scale: f64, out: usize, ratio: usize) -> Vec<f64> {
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let (x0, y0) = (b.x1 * scale - 0.5, b.y1 * scale - 0.5);
    let bw = (b.x2 - b.x1) * scale / out as f64;
    let bh = (b.y2 - b.y1) * scale / out as f64;
    let mut res = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        let plane = &map.data()[ch * h * w..(ch + 1) * h * w];
        for i in 0..out {
            for j in 0..out {
                let mut s = 0.0;
                for sy in 0..ratio {
                    for sx in 0..ratio {
                        let y = y0 + bh * i as f64 + bh * (sy as f64 + 0.5) / ratio as f64;
                        let x = x0 + bw * j as f64 + bw * (sx as f64 + 0.5) / ratio as f64;
                        s += bilinear(plane, h, w, x, y);
                    }
                }
                res.push(s / (ratio * ratio) as f64);
            }
        }
    }
    res
}

pub fn decode(anchor: &BBox, d: [f64; 4]) -> BBox {
    let (aw, ah) = (anchor.x2 - anchor.x1, anchor.y2 - anchor.y1);
    let cx = (anchor.x1 + anchor.x2) / 2.0 + d[0] * aw;
    let cy = (anchor.y1 + anchor.y2) / 2.0 + d[1] * ah;
    let (w, h) = (aw * d[2].exp(), ah * d[3].exp());
    BBox {
        x1: cx - w / 2.0,
        y1: cy - h / 2.0,
        x2: cx + w / 2.0,
        y2: cy + h / 2.0,
    }
}
