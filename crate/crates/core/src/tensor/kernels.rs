//! Raw forward/backward loops over row-major slices.

use crate::error::{Error, Result};
use crate::par;

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
}

pub fn transpose(a: &[f64], out: &mut [f64], m: usize, n: usize) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

pub fn softmax_rows(a: &[f64], out: &mut [f64], n: usize) {
    for (row, orow) in a.chunks(n).zip(out.chunks_mut(n)) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mx).exp();
            total += *o;
        }
        orow.iter_mut().for_each(|o| *o /= total);
    }
}

/// Vector-Jacobian product of row softmax given its output `y`.
pub fn softmax_rows_backward(y: &[f64], gy: &[f64], gx: &mut [f64], n: usize) {
    for ((yr, gr), xr) in y.chunks(n).zip(gy.chunks(n)).zip(gx.chunks_mut(n)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((x, &yv), &gv) in xr.iter_mut().zip(yr).zip(gr) {
            *x += yv * (gv - dot);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (ci, h, w) = match *x {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::dim("conv2d", format!("input must be C×H×W, got {x:?}"))),
        };
        let (co, kci, kh, kw) = match *k {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(Error::dim("conv2d", format!("kernel must be rank 4, got {k:?}"))),
        };
        if kci != ci {
            return Err(Error::shape("conv2d", x, k));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(ConvGeom {
            ci,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn out_len(&self) -> usize {
        self.co * self.oh * self.ow
    }

    /// Output index range along one axis for which `o*stride + k - pad` is inside `[0, len)`.
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // o*s + off >= 0  and  o*s + off <= len-1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_num = len as isize - 1 - off;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(out_len as isize);
        (lo as usize, hi.max(lo) as usize)
    }
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], k: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let plane = g.oh * g.ow;
    par::for_each_chunk(out, plane, |co, o| {
        o.iter_mut().for_each(|v| *v = bias.map_or(0.0, |b| b[co]));
        for ci in 0..g.ci {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.valid(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let wv = k[((co * g.ci + ci) * g.kh + ky) * g.kw + kx];
                    let (ox0, ox1) = g.valid(kx, g.w, g.ow);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let xrow = &xin[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut o[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            let xs = &xrow[ix0..ix0 + (ox1 - ox0)];
                            orow[ox0..ox1].iter_mut().zip(xs).for_each(|(ov, &xv)| *ov += wv * xv);
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += wv * xrow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    });
}

pub fn conv2d_backward_input(g: &ConvGeom, gout: &[f64], k: &[f64], gx: &mut [f64]) {
    let plane = g.h * g.w;
    par::for_each_chunk(gx, plane, |ci, gxc| {
        for co in 0..g.co {
            let go = &gout[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.valid(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let wv = k[((co * g.ci + ci) * g.kh + ky) * g.kw + kx];
                    let (ox0, ox1) = g.valid(kx, g.w, g.ow);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &go[oy * g.ow..(oy + 1) * g.ow];
                        let xrow = &mut gxc[iy * g.w..(iy + 1) * g.w];
                        for ox in ox0..ox1 {
                            xrow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    });
}

pub fn conv2d_backward_kernel(g: &ConvGeom, gout: &[f64], x: &[f64], gk: &mut [f64]) {
    let per_co = g.ci * g.kh * g.kw;
    par::for_each_chunk(gk, per_co, |co, gkc| {
        let go = &gout[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        for ci in 0..g.ci {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.valid(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let (ox0, ox1) = g.valid(kx, g.w, g.ow);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &go[oy * g.ow..(oy + 1) * g.ow];
                        let xrow = &xin[iy * g.w..(iy + 1) * g.w];
                        for ox in ox0..ox1 {
                            acc += grow[ox] * xrow[ox * g.stride + kx - g.pad];
                        }
                    }
                    gkc[(ci * g.kh + ky) * g.kw + kx] += acc;
                }
            }
        }
    });
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct XcorrGeom {
    pub c: usize,
    pub hz: usize,
    pub wz: usize,
    pub hx: usize,
    pub wx: usize,
    pub oh: usize,
    pub ow: usize,
}

impl XcorrGeom {
    pub fn new(z: &[usize], x: &[usize]) -> Result<Self> {
        let (c, hz, wz, hx, wx) = match (z, x) {
            ([c, hz, wz], [c2, hx, wx]) if c == c2 => (*c, *hz, *wz, *hx, *wx),
            _ => return Err(Error::shape("cross_correlate", z, x)),
        };
        if hz > hx || wz > wx || hz == 0 || wz == 0 {
            return Err(Error::dim(
                "cross_correlate",
                format!("template {hz}x{wz} larger than search {hx}x{wx}"),
            ));
        }
        Ok(XcorrGeom {
            c,
            hz,
            wz,
            hx,
            wx,
            oh: hx - hz + 1,
            ow: wx - wz + 1,
        })
    }

    pub fn out_len(&self) -> usize {
        self.c * self.oh * self.ow
    }
}

pub fn xcorr_forward(g: &XcorrGeom, z: &[f64], x: &[f64], out: &mut [f64]) {
    for c in 0..g.c {
        let zc = &z[c * g.hz * g.wz..(c + 1) * g.hz * g.wz];
        let xc = &x[c * g.hx * g.wx..(c + 1) * g.hx * g.wx];
        let oc = &mut out[c * g.oh * g.ow..(c + 1) * g.oh * g.ow];
        oc.iter_mut().for_each(|v| *v = 0.0);
        for u in 0..g.hz {
            for v in 0..g.wz {
                let zv = zc[u * g.wz + v];
                for i in 0..g.oh {
                    let xrow = &xc[(i + u) * g.wx + v..(i + u) * g.wx + v + g.ow];
                    let orow = &mut oc[i * g.ow..(i + 1) * g.ow];
                    orow.iter_mut().zip(xrow).for_each(|(o, &xv)| *o += zv * xv);
                }
            }
        }
    }
}

pub fn xcorr_backward(g: &XcorrGeom, gout: &[f64], z: &[f64], x: &[f64], gz: Option<&mut [f64]>, gx: Option<&mut [f64]>) {
    if let Some(gz) = gz {
        for c in 0..g.c {
            let xc = &x[c * g.hx * g.wx..(c + 1) * g.hx * g.wx];
            let go = &gout[c * g.oh * g.ow..(c + 1) * g.oh * g.ow];
            for u in 0..g.hz {
                for v in 0..g.wz {
                    let mut acc = 0.0;
                    for i in 0..g.oh {
                        let xrow = &xc[(i + u) * g.wx + v..(i + u) * g.wx + v + g.ow];
                        let grow = &go[i * g.ow..(i + 1) * g.ow];
                        acc += xrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    gz[(c * g.hz + u) * g.wz + v] += acc;
                }
            }
        }
    }
    if let Some(gx) = gx {
        for c in 0..g.c {
            let zc = &z[c * g.hz * g.wz..(c + 1) * g.hz * g.wz];
            let go = &gout[c * g.oh * g.ow..(c + 1) * g.oh * g.ow];
            let gxc = &mut gx[c * g.hx * g.wx..(c + 1) * g.hx * g.wx];
            for u in 0..g.hz {
                for v in 0..g.wz {
                    let zv = zc[u * g.wz + v];
                    for i in 0..g.oh {
                        let grow = &go[i * g.ow..(i + 1) * g.ow];
                        let xrow = &mut gxc[(i + u) * g.wx + v..(i + u) * g.wx + v + g.ow];
                        xrow.iter_mut().zip(grow).for_each(|(xv, &gv)| *xv += zv * gv);
                    }
                }
            }
        }
    }
}

/// Non-overlapping `size×size` max pooling; returns the flat argmax of every output cell.
pub fn maxpool_forward(x: &[f64], c: usize, h: usize, w: usize, size: usize, out: &mut [f64]) -> Vec<usize> {
    let (oh, ow) = (h / size, w / size);
    let mut arg = vec![0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = (ch * h + oy * size + dy) * w + ox * size + dx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    arg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for stride in 1..4 {
            for pad in 0..3 {
                for len in 3..9 {
                    for k in 0..3 {
                        let g = ConvGeom::new(&[1, len, len], &[1, 1, 3, 3], stride, pad).unwrap();
                        let (lo, hi) = g.valid(k, len, g.ow);
                        let brute: Vec<usize> = (0..g.ow)
                            .filter(|&o| {
                                let i = (o * stride + k) as isize - pad as isize;
                                i >= 0 && (i as usize) < len
                            })
                            .collect();
                        assert_eq!((lo..hi).collect::<Vec<_>>(), brute, "s{stride} p{pad} l{len} k{k}");
                    }
                }
            }
        }
    }
}
