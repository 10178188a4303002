//! Dense kernels behind the graph ops. Layout is channel-major, x-fastest within a channel.

use crate::warp::{sample_with_gradient, trilinear_corners};

#[inline]
fn spatial_len(d: [usize; 3]) -> usize {
    d[0] * d[1] * d[2]
}

/// Zero-padded (one voxel on each side) copy and the geometry of the padded grid.
pub(crate) struct PadGeometry {
    pub px: usize,
    pub pxy: usize,
    pub np: usize,
    /// Padded index of interior voxel (0,0,0).
    pub p0: usize,
    /// Number of padded positions spanned from (0,0,0) to the last interior voxel.
    pub span: usize,
}

impl PadGeometry {
    pub fn new(d: [usize; 3]) -> Self {
        let px = d[0] + 2;
        let pxy = px * (d[1] + 2);
        let np = pxy * (d[2] + 2);
        let p0 = 1 + px + pxy;
        let pend = d[0] + px * d[1] + pxy * d[2];
        PadGeometry { px, pxy, np, p0, span: pend - p0 + 1 }
    }

    #[inline]
    pub fn offset(&self, kk: usize) -> isize {
        let dx = (kk % 3) as isize - 1;
        let dy = ((kk / 3) % 3) as isize - 1;
        let dz = (kk / 9) as isize - 1;
        dx + dy * self.px as isize + dz * self.pxy as isize
    }
}

fn pad_into(x: &[f64], channels: usize, d: [usize; 3], g: &PadGeometry, out: &mut Vec<f64>) {
    out.clear();
    out.resize(channels * g.np, 0.0);
    let n = spatial_len(d);
    for c in 0..channels {
        let src = &x[c * n..(c + 1) * n];
        let dst = &mut out[c * g.np..(c + 1) * g.np];
        for k in 0..d[2] {
            for j in 0..d[1] {
                let s = d[0] * (j + d[1] * k);
                let t = 1 + g.px * (j + 1) + g.pxy * (k + 1);
                dst[t..t + d[0]].copy_from_slice(&src[s..s + d[0]]);
            }
        }
    }
}

/// Reusable buffers for convolution.
#[derive(Default)]
pub(crate) struct ConvScratch {
    padded: Vec<f64>,
    span_buf: Vec<f64>,
    grad_pad: Vec<f64>,
    cols: Vec<f64>,
}

/// Positions per im2col tile, keeping the column buffer around 2 MB.
fn tile_len(k: usize, span: usize) -> usize {
    (262_144 / k).max(64).min(span.max(1))
}

/// Column matrix `cols[r, t] = padded[ci, p + t + off_kk]` for `r = ci * 27 + kk`.
fn im2col(padded: &[f64], cin: usize, g: &PadGeometry, p: usize, len: usize, cols: &mut [f64]) {
    for ci in 0..cin {
        let plane = &padded[ci * g.np..(ci + 1) * g.np];
        for kk in 0..27 {
            let s = (p as isize + g.offset(kk)) as usize;
            let r = ci * 27 + kk;
            cols[r * len..(r + 1) * len].copy_from_slice(&plane[s..s + len]);
        }
    }
}

/// `out[co] = sum_ci sum_k w[co, ci, k] * x_pad[ci, p + off_k]`; 3x3x3 kernel, stride 1,
/// zero padding 1. Weight layout `[cout, cin, kz, ky, kx]`.
pub(crate) fn conv3d_forward(
    x: &[f64],
    w: &[f64],
    cin: usize,
    cout: usize,
    d: [usize; 3],
    out: &mut [f64],
    scratch: &mut ConvScratch,
) {
    let g = PadGeometry::new(d);
    pad_into(x, cin, d, &g, &mut scratch.padded);
    scratch.span_buf.clear();
    scratch.span_buf.resize(cout * g.span, 0.0);
    let k = cin * 27;
    let tile = tile_len(k, g.span);
    scratch.cols.resize(k * tile, 0.0);
    let mut t0 = 0;
    while t0 < g.span {
        let len = tile.min(g.span - t0);
        im2col(&scratch.padded, cin, &g, g.p0 + t0, len, &mut scratch.cols);
        // Computed transposed so the long position axis fills the kernel rows.
        // SAFETY: A = cols transposed (len x k: row stride 1, col stride len), B = w
        // transposed (k x cout: row stride 1, col stride k), C = span_buf columns
        // t0..t0+len viewed as len x cout (row stride 1, col stride span). All in bounds.
        unsafe {
            matrixmultiply::dgemm(
                len,
                k,
                cout,
                1.0,
                scratch.cols.as_ptr(),
                1,
                len as isize,
                w.as_ptr(),
                1,
                k as isize,
                0.0,
                scratch.span_buf.as_mut_ptr().add(t0),
                1,
                g.span as isize,
            );
        }
        t0 += len;
    }
    let n = spatial_len(d);
    for co in 0..cout {
        let src = &scratch.span_buf[co * g.span..(co + 1) * g.span];
        let dst = &mut out[co * n..(co + 1) * n];
        for k in 0..d[2] {
            for j in 0..d[1] {
                let s = g.px * j + g.pxy * k;
                let t = d[0] * (j + d[1] * k);
                dst[t..t + d[0]].copy_from_slice(&src[s..s + d[0]]);
            }
        }
    }
}

/// Accumulates input and weight gradients of [`conv3d_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    cin: usize,
    cout: usize,
    d: [usize; 3],
    gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    scratch: &mut ConvScratch,
) {
    let g = PadGeometry::new(d);
    let n = spatial_len(d);
    // gradient on the span layout; positions that are padding stay zero
    scratch.span_buf.clear();
    scratch.span_buf.resize(cout * g.span, 0.0);
    for co in 0..cout {
        let src = &gout[co * n..(co + 1) * n];
        let dst = &mut scratch.span_buf[co * g.span..(co + 1) * g.span];
        for k in 0..d[2] {
            for j in 0..d[1] {
                let s = d[0] * (j + d[1] * k);
                let t = g.px * j + g.pxy * k;
                dst[t..t + d[0]].copy_from_slice(&src[s..s + d[0]]);
            }
        }
    }
    let k = cin * 27;
    let tile = tile_len(k, g.span);
    scratch.cols.resize(k * tile, 0.0);
    if gw.is_some() {
        pad_into(x, cin, d, &g, &mut scratch.padded);
    }
    if gx.is_some() {
        scratch.grad_pad.clear();
        scratch.grad_pad.resize(cin * g.np, 0.0);
    }
    let mut t0 = 0;
    while t0 < g.span {
        let len = tile.min(g.span - t0);
        if let Some(gw) = gw.as_deref_mut() {
            im2col(&scratch.padded, cin, &g, g.p0 + t0, len, &mut scratch.cols);
            // SAFETY: A = span_buf tile (cout x len, row stride span), B = cols transposed
            // (len x k: row stride 1, col stride len), C = gw (cout x k, row-major).
            unsafe {
                matrixmultiply::dgemm(
                    cout,
                    len,
                    k,
                    1.0,
                    scratch.span_buf.as_ptr().add(t0),
                    g.span as isize,
                    1,
                    scratch.cols.as_ptr(),
                    1,
                    len as isize,
                    1.0,
                    gw.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
        }
        if gx.is_some() {
            // SAFETY: A = w transposed (k x cout: row stride 1, col stride k), B = span_buf
            // tile (cout x len), C = cols (k x len).
            unsafe {
                matrixmultiply::dgemm(
                    k,
                    cout,
                    len,
                    1.0,
                    w.as_ptr(),
                    1,
                    k as isize,
                    scratch.span_buf.as_ptr().add(t0),
                    g.span as isize,
                    1,
                    0.0,
                    scratch.cols.as_mut_ptr(),
                    len as isize,
                    1,
                );
            }
            let p = g.p0 + t0;
            for ci in 0..cin {
                let plane = &mut scratch.grad_pad[ci * g.np..(ci + 1) * g.np];
                for kk in 0..27 {
                    let s = (p as isize + g.offset(kk)) as usize;
                    let r = ci * 27 + kk;
                    let src = &scratch.cols[r * len..(r + 1) * len];
                    for (a, b) in plane[s..s + len].iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
        }
        t0 += len;
    }
    if let Some(gx) = gx {
        for c in 0..cin {
            let src = &scratch.grad_pad[c * g.np..(c + 1) * g.np];
            let dst = &mut gx[c * n..(c + 1) * n];
            for k in 0..d[2] {
                for j in 0..d[1] {
                    let s = 1 + g.px * (j + 1) + g.pxy * (k + 1);
                    let t = d[0] * (j + d[1] * k);
                    for i in 0..d[0] {
                        dst[t + i] += src[s + i];
                    }
                }
            }
        }
    }
}

/// 2x2x2 max-pool; records the flat input index of each winner (first maximum wins).
pub(crate) fn maxpool2_forward(x: &[f64], channels: usize, d: [usize; 3], out: &mut [f64], argmax: &mut [usize]) {
    let o = [d[0] / 2, d[1] / 2, d[2] / 2];
    let n = spatial_len(d);
    let no = spatial_len(o);
    for c in 0..channels {
        for k in 0..o[2] {
            for j in 0..o[1] {
                for i in 0..o[0] {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = c * n + (2 * i + dx) + d[0] * ((2 * j + dy) + d[1] * (2 * k + dz));
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let oi = c * no + i + o[0] * (j + o[1] * k);
                    out[oi] = best;
                    argmax[oi] = best_idx;
                }
            }
        }
    }
}

/// Doubles one axis with half-pixel trilinear weights (replicate at the ends).
fn upsample_axis(src: &[f64], shape: [usize; 4], axis: usize, dst: &mut [f64]) {
    let [c, nx, ny, nz] = shape;
    let dims = [nx, ny, nz];
    let mut od = dims;
    od[axis] *= 2;
    let n = dims[axis];
    let sstride = [1, nx, nx * ny][axis];
    let dstride = [1, od[0], od[0] * od[1]][axis];
    let src_len = nx * ny * nz;
    let dst_len = od[0] * od[1] * od[2];
    for ch in 0..c {
        let s = &src[ch * src_len..(ch + 1) * src_len];
        let t = &mut dst[ch * dst_len..(ch + 1) * dst_len];
        for idx in 0..src_len {
            let coords = [idx % nx, (idx / nx) % ny, idx / (nx * ny)];
            let m = coords[axis];
            let base_src = idx - m * sstride;
            let mut oc = coords;
            oc[axis] = 0;
            let base_dst = oc[0] + od[0] * (oc[1] + od[1] * oc[2]);
            let here = s[idx];
            let prev = s[base_src + m.saturating_sub(1) * sstride];
            let next = s[base_src + (m + 1).min(n - 1) * sstride];
            t[base_dst + 2 * m * dstride] = 0.75 * here + 0.25 * prev;
            t[base_dst + (2 * m + 1) * dstride] = 0.75 * here + 0.25 * next;
        }
    }
}

/// Transpose of [`upsample_axis`]: accumulates into `gsrc`.
fn upsample_axis_t(gdst: &[f64], shape: [usize; 4], axis: usize, gsrc: &mut [f64]) {
    let [c, nx, ny, nz] = shape;
    let dims = [nx, ny, nz];
    let mut od = dims;
    od[axis] *= 2;
    let n = dims[axis];
    let sstride = [1, nx, nx * ny][axis];
    let dstride = [1, od[0], od[0] * od[1]][axis];
    let src_len = nx * ny * nz;
    let dst_len = od[0] * od[1] * od[2];
    for ch in 0..c {
        let g = &gdst[ch * dst_len..(ch + 1) * dst_len];
        let s = &mut gsrc[ch * src_len..(ch + 1) * src_len];
        for idx in 0..src_len {
            let coords = [idx % nx, (idx / nx) % ny, idx / (nx * ny)];
            let m = coords[axis];
            let base_src = idx - m * sstride;
            let mut oc = coords;
            oc[axis] = 0;
            let base_dst = oc[0] + od[0] * (oc[1] + od[1] * oc[2]);
            let ge = g[base_dst + 2 * m * dstride];
            let go = g[base_dst + (2 * m + 1) * dstride];
            s[idx] += 0.75 * (ge + go);
            s[base_src + m.saturating_sub(1) * sstride] += 0.25 * ge;
            s[base_src + (m + 1).min(n - 1) * sstride] += 0.25 * go;
        }
    }
}

pub(crate) fn upsample2_forward(x: &[f64], channels: usize, d: [usize; 3], out: &mut [f64]) {
    let s1 = [channels, d[0], d[1], d[2]];
    let mut a = vec![0.0; channels * 2 * spatial_len(d)];
    upsample_axis(x, s1, 0, &mut a);
    let s2 = [channels, 2 * d[0], d[1], d[2]];
    let mut b = vec![0.0; channels * 4 * spatial_len(d)];
    upsample_axis(&a, s2, 1, &mut b);
    let s3 = [channels, 2 * d[0], 2 * d[1], d[2]];
    upsample_axis(&b, s3, 2, out);
}

pub(crate) fn upsample2_backward(gout: &[f64], channels: usize, d: [usize; 3], gx: &mut [f64]) {
    let n = spatial_len(d);
    let s3 = [channels, 2 * d[0], 2 * d[1], d[2]];
    let mut b = vec![0.0; channels * 4 * n];
    upsample_axis_t(gout, s3, 2, &mut b);
    let s2 = [channels, 2 * d[0], d[1], d[2]];
    let mut a = vec![0.0; channels * 2 * n];
    upsample_axis_t(&b, s2, 1, &mut a);
    let s1 = [channels, d[0], d[1], d[2]];
    upsample_axis_t(&a, s1, 0, gx);
}

/// `out[x] = image(x + u(x))` for a single-channel image on the same grid as `u`.
pub(crate) fn grid_sample_forward(image: &[f64], disp: &[f64], d: [usize; 3], out: &mut [f64]) {
    let n = spatial_len(d);
    for (idx, o) in out.iter_mut().enumerate().take(n) {
        let p = sample_point(idx, disp, d, n);
        *o = trilinear_corners(&d, p).iter().map(|&(i, w)| w * image[i]).sum();
    }
}

#[inline]
fn sample_point(idx: usize, disp: &[f64], d: [usize; 3], n: usize) -> [f64; 3] {
    let i = idx % d[0];
    let j = (idx / d[0]) % d[1];
    let k = idx / (d[0] * d[1]);
    [i as f64 + disp[idx], j as f64 + disp[n + idx], k as f64 + disp[2 * n + idx]]
}

pub(crate) fn grid_sample_backward(
    image: &[f64],
    disp: &[f64],
    d: [usize; 3],
    gout: &[f64],
    gimage: Option<&mut [f64]>,
    gdisp: Option<&mut [f64]>,
) {
    let n = spatial_len(d);
    if let Some(gd) = gdisp {
        for idx in 0..n {
            let g = gout[idx];
            if g == 0.0 {
                continue;
            }
            let p = sample_point(idx, disp, d, n);
            let (_, grad) = sample_with_gradient(image, &d, p);
            gd[idx] += g * grad[0];
            gd[n + idx] += g * grad[1];
            gd[2 * n + idx] += g * grad[2];
        }
    }
    if let Some(gi) = gimage {
        for idx in 0..n {
            let g = gout[idx];
            let p = sample_point(idx, disp, d, n);
            for (i, w) in trilinear_corners(&d, p) {
                gi[i] += g * w;
            }
        }
    }
}

/// Forward differences of every channel along x, y, z; output channel `3c + a`.
pub(crate) fn field_gradient_forward(u: &[f64], channels: usize, d: [usize; 3], out: &mut [f64]) {
    let n = spatial_len(d);
    let strides = [1, d[0], d[0] * d[1]];
    for c in 0..channels {
        let src = &u[c * n..(c + 1) * n];
        for a in 0..3 {
            let dst = &mut out[(3 * c + a) * n..(3 * c + a + 1) * n];
            for (idx, o) in dst.iter_mut().enumerate() {
                let coord = [idx % d[0], (idx / d[0]) % d[1], idx / (d[0] * d[1])][a];
                *o = if coord + 1 < d[a] { src[idx + strides[a]] - src[idx] } else { 0.0 };
            }
        }
    }
}

pub(crate) fn field_gradient_backward(gout: &[f64], channels: usize, d: [usize; 3], gu: &mut [f64]) {
    let n = spatial_len(d);
    let strides = [1, d[0], d[0] * d[1]];
    for c in 0..channels {
        let dst = &mut gu[c * n..(c + 1) * n];
        for a in 0..3 {
            let g = &gout[(3 * c + a) * n..(3 * c + a + 1) * n];
            for (idx, &gv) in g.iter().enumerate() {
                let coord = [idx % d[0], (idx / d[0]) % d[1], idx / (d[0] * d[1])][a];
                if coord + 1 < d[a] {
                    dst[idx + strides[a]] += gv;
                    dst[idx] -= gv;
                }
            }
        }
    }
}
