//! Raw forward/backward kernels over [`Tensor`] storage.
//!
//! Feature maps are `C x H x W`. Continuous sample coordinates are in grid
//! cells: `(x, y) = (j, i)` lands exactly on cell `(i, j)`.

use super::{shape_err, Tensor, TensorError};

fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(shape_err(op, format!("expected C x H x W, got {s:?}"))),
    }
}

/// Output range `[lo, hi)` along one axis whose source index
/// `o * stride + k_off - pad` lands inside `[0, in_len)`.
fn valid_range(
    out_len: usize,
    in_len: usize,
    stride: usize,
    pad: usize,
    k_off: usize,
) -> (usize, usize) {
    let shift = k_off as isize - pad as isize;
    let s = stride as isize;
    // o * s + shift >= 0
    let lo = if shift >= 0 {
        0
    } else {
        ((-shift) + s - 1) / s
    };
    // o * s + shift <= in_len - 1
    let top = in_len as isize - 1 - shift;
    let hi = if top < 0 { 0 } else { top / s + 1 };
    let lo = lo.max(0) as usize;
    let hi = (hi.max(0) as usize).min(out_len);
    (lo.min(hi), hi)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub(crate) fn conv_geometry(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry, TensorError> {
    let (c_in, h, w) = dims3(input, "conv2d")?;
    let (c_out, wc_in, kh, kw) = match *weight.shape() {
        [a, b, c, d] => (a, b, c, d),
        ref s => {
            return Err(shape_err(
                "conv2d",
                format!("weight must be rank 4, got {s:?}"),
            ))
        }
    };
    if wc_in != c_in {
        return Err(shape_err(
            "conv2d",
            format!("input has {c_in} channels, weight expects {wc_in}"),
        ));
    }
    if kh != kw || kh == 0 {
        return Err(shape_err(
            "conv2d",
            format!("kernel must be square, got {kh}x{kw}"),
        ));
    }
    if bias.shape() != [c_out] {
        return Err(shape_err(
            "conv2d",
            format!("bias shape {:?} != [{c_out}]", bias.shape()),
        ));
    }
    if stride == 0 {
        return Err(shape_err("conv2d", "stride must be positive"));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(shape_err("conv2d", "kernel larger than padded input"));
    }
    Ok(ConvGeometry {
        c_in,
        h,
        w,
        c_out,
        k: kh,
        stride,
        pad,
        h_out: (h + 2 * pad - kh) / stride + 1,
        w_out: (w + 2 * pad - kw) / stride + 1,
    })
}

/// Cross-correlation with zero padding.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor, TensorError> {
    let g = conv_geometry(input, weight, bias, stride, pad)?;
    let x = input.data();
    let wt = weight.data();
    let plane_out = g.h_out * g.w_out;
    let mut out = vec![0.0; g.c_out * plane_out];
    for co in 0..g.c_out {
        let out_plane = &mut out[co * plane_out..(co + 1) * plane_out];
        out_plane.fill(bias.data()[co]);
        for ci in 0..g.c_in {
            let in_plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = valid_range(g.h_out, g.h, g.stride, g.pad, ky);
                for kx in 0..g.k {
                    let wv = wt[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = valid_range(g.w_out, g.w, g.stride, g.pad, kx);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let row_in = &in_plane[iy * g.w..(iy + 1) * g.w];
                        let row_out = &mut out_plane[oy * g.w_out..(oy + 1) * g.w_out];
                        if g.stride == 1 {
                            let shift = kx as isize - g.pad as isize;
                            for ox in ox_lo..ox_hi {
                                row_out[ox] += wv * row_in[(ox as isize + shift) as usize];
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                row_out[ox] += wv * row_in[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.c_out, g.h_out, g.w_out], out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    g: ConvGeometry,
    grad_out: &[f64],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let x = input.data();
    let wt = weight.data();
    let plane_out = g.h_out * g.w_out;
    let mut gin = need_input.then(|| vec![0.0; x.len()]);
    let mut gw = need_weight.then(|| vec![0.0; wt.len()]);
    let gb: Vec<f64> = (0..g.c_out)
        .map(|co| grad_out[co * plane_out..(co + 1) * plane_out].iter().sum())
        .collect();
    for co in 0..g.c_out {
        let go_plane = &grad_out[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.c_in {
            let in_off = ci * g.h * g.w;
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = valid_range(g.h_out, g.h, g.stride, g.pad, ky);
                for kx in 0..g.k {
                    let widx = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
                    let wv = wt[widx];
                    let (ox_lo, ox_hi) = valid_range(g.w_out, g.w, g.stride, g.pad, kx);
                    let mut acc_w = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = in_off + iy * g.w;
                        let go_row = &go_plane[oy * g.w_out..(oy + 1) * g.w_out];
                        for ox in ox_lo..ox_hi {
                            let ix = ox * g.stride + kx - g.pad;
                            let go = go_row[ox];
                            acc_w += x[row + ix] * go;
                            if let Some(gi) = gin.as_mut() {
                                gi[row + ix] += wv * go;
                            }
                        }
                    }
                    if let Some(gwv) = gw.as_mut() {
                        gwv[widx] += acc_w;
                    }
                }
            }
        }
    }
    (gin, gw, gb)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor, TensorError> {
    let (c, h, w) = dims3(input, "upsample_nearest")?;
    if factor == 0 {
        return Err(shape_err("upsample_nearest", "factor must be positive"));
    }
    let (ho, wo) = (h * factor, w * factor);
    let x = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        for y in 0..ho {
            let row = &x[(ci * h + y / factor) * w..(ci * h + y / factor + 1) * w];
            out.extend((0..wo).map(|xo| row[xo / factor]));
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

pub(crate) fn upsample_nearest_backward(
    shape_in: &[usize],
    factor: usize,
    grad_out: &[f64],
) -> Vec<f64> {
    let (c, h, w) = (shape_in[0], shape_in[1], shape_in[2]);
    let (ho, wo) = (h * factor, w * factor);
    let mut g = vec![0.0; c * h * w];
    for ci in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                g[(ci * h + y / factor) * w + x / factor] += grad_out[(ci * ho + y) * wo + x];
            }
        }
    }
    g
}

/// Four-neighbour interpolation stencil for one continuous point.
///
/// Coordinates are clamped to `[0, W-1] x [0, H-1]`; derivatives along a
/// clamped axis are zero.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTap {
    /// Plane offsets of `(y0,x0), (y0,x1), (y1,x0), (y1,x1)`.
    pub idx: [usize; 4],
    pub weight: [f64; 4],
    pub d_dx: [f64; 4],
    pub d_dy: [f64; 4],
    /// Cell and clamp state; changes exactly where the sampler is not smooth.
    pub signature: u64,
}

fn axis(v: f64, len: usize) -> (usize, usize, f64, bool) {
    let hi = (len - 1) as f64;
    let clamped = !(v >= 0.0 && v <= hi);
    let vc = if v.is_nan() { 0.0 } else { v.clamp(0.0, hi) };
    if len == 1 {
        return (0, 0, 0.0, true);
    }
    let i0 = (vc.floor() as usize).min(len - 2);
    (i0, i0 + 1, vc - i0 as f64, clamped)
}

pub(crate) fn bilinear_tap(x: f64, y: f64, h: usize, w: usize) -> BilinearTap {
    let (x0, x1, fx, cx) = axis(x, w);
    let (y0, y1, fy, cy) = axis(y, h);
    let idx = [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1];
    let weight = [
        (1.0 - fy) * (1.0 - fx),
        (1.0 - fy) * fx,
        fy * (1.0 - fx),
        fy * fx,
    ];
    let d_dx = if cx {
        [0.0; 4]
    } else {
        [-(1.0 - fy), 1.0 - fy, -fy, fy]
    };
    let d_dy = if cy {
        [0.0; 4]
    } else {
        [-(1.0 - fx), -fx, 1.0 - fx, fx]
    };
    let signature = ((x0 as u64) << 40) ^ ((y0 as u64) << 16) ^ ((cx as u64) << 1) ^ (cy as u64);
    BilinearTap {
        idx,
        weight,
        d_dx,
        d_dy,
        signature,
    }
}

/// Samples every channel of `feature` at continuous point `(x, y)`.
pub fn bilinear_sample(feature: &Tensor, x: f64, y: f64) -> Result<Vec<f64>, TensorError> {
    let (c, h, w) = dims3(feature, "bilinear_sample")?;
    if h == 0 || w == 0 {
        return Err(shape_err("bilinear_sample", "empty feature map"));
    }
    let tap = bilinear_tap(x, y, h, w);
    let f = feature.data();
    Ok((0..c)
        .map(|ci| {
            let plane = &f[ci * h * w..(ci + 1) * h * w];
            (0..4).map(|t| tap.weight[t] * plane[tap.idx[t]]).sum()
        })
        .collect())
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DeformGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
}

pub(crate) fn deform_geometry(
    feature: &Tensor,
    offsets: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<DeformGeometry, TensorError> {
    let (c_in, h, w) = dims3(feature, "deformable_pose_conv")?;
    let (c_out, wc, k) = match *weight.shape() {
        [a, b, c] => (a, b, c),
        ref s => {
            return Err(shape_err(
                "deformable_pose_conv",
                format!("weight must be C_out x C_in x K, got {s:?}"),
            ))
        }
    };
    if wc != c_in {
        return Err(shape_err(
            "deformable_pose_conv",
            format!("feature has {c_in} channels, weight expects {wc}"),
        ));
    }
    if offsets.shape() != [2 * k, h, w] {
        return Err(shape_err(
            "deformable_pose_conv",
            format!(
                "offsets shape {:?} != [{}, {h}, {w}]",
                offsets.shape(),
                2 * k
            ),
        ));
    }
    if bias.shape() != [c_out] {
        return Err(shape_err(
            "deformable_pose_conv",
            format!("bias shape {:?} != [{c_out}]", bias.shape()),
        ));
    }
    if h == 0 || w == 0 || k == 0 {
        return Err(shape_err("deformable_pose_conv", "empty input"));
    }
    Ok(DeformGeometry {
        c_in,
        h,
        w,
        c_out,
        k,
    })
}

/// Location `(y, x)` samples joint `i` at `(x + off[2i], y + off[2i+1])`.
fn sample_point(offsets: &[f64], g: DeformGeometry, i: usize, y: usize, x: usize) -> (f64, f64) {
    let plane = g.h * g.w;
    let p = y * g.w + x;
    (
        x as f64 + offsets[2 * i * plane + p],
        y as f64 + offsets[(2 * i + 1) * plane + p],
    )
}

/// Gathers the feature vector at each of the K offset points of every
/// location and mixes them: `out(p) = b + sum_i W[:, :, i] psi_i(p)`.
pub fn deformable_pose_conv_forward(
    feature: &Tensor,
    offsets: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<Tensor, TensorError> {
    let g = deform_geometry(feature, offsets, weight, bias)?;
    let plane = g.h * g.w;
    let f = feature.data();
    let off = offsets.data();
    let wt = weight.data();
    let mut out = vec![0.0; g.c_out * plane];
    for (co, b) in bias.data().iter().enumerate() {
        out[co * plane..(co + 1) * plane].fill(*b);
    }
    let mut psi = vec![0.0; g.c_in];
    for y in 0..g.h {
        for x in 0..g.w {
            let p = y * g.w + x;
            for i in 0..g.k {
                let (sx, sy) = sample_point(off, g, i, y, x);
                let tap = bilinear_tap(sx, sy, g.h, g.w);
                for (ci, v) in psi.iter_mut().enumerate() {
                    let base = ci * plane;
                    *v = (0..4).map(|t| tap.weight[t] * f[base + tap.idx[t]]).sum();
                }
                // Accumulated term by term in conv2d's order, so K = 1 with
                // zero offsets reproduces a 1x1 convolution bit for bit.
                for co in 0..g.c_out {
                    let wrow = &wt[co * g.c_in * g.k..(co + 1) * g.c_in * g.k];
                    for ci in 0..g.c_in {
                        out[co * plane + p] += wrow[ci * g.k + i] * psi[ci];
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.c_out, g.h, g.w], out)
}

pub(crate) struct DeformGrads {
    pub feature: Option<Vec<f64>>,
    pub offsets: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Vec<f64>,
}

pub(crate) fn deformable_pose_conv_backward(
    feature: &Tensor,
    offsets: &Tensor,
    weight: &Tensor,
    g: DeformGeometry,
    grad_out: &[f64],
    need: [bool; 3],
) -> DeformGrads {
    let [need_feature, need_offsets, need_weight] = need;
    let plane = g.h * g.w;
    let f = feature.data();
    let off = offsets.data();
    let wt = weight.data();
    let mut gf = need_feature.then(|| vec![0.0; f.len()]);
    let mut goff = need_offsets.then(|| vec![0.0; off.len()]);
    let mut gw = need_weight.then(|| vec![0.0; wt.len()]);
    let gb: Vec<f64> = (0..g.c_out)
        .map(|co| grad_out[co * plane..(co + 1) * plane].iter().sum())
        .collect();
    let mut gpsi = vec![0.0; g.c_in];
    for y in 0..g.h {
        for x in 0..g.w {
            let p = y * g.w + x;
            for i in 0..g.k {
                let (sx, sy) = sample_point(off, g, i, y, x);
                let tap = bilinear_tap(sx, sy, g.h, g.w);
                // dL/dpsi = W[:, :, i]^T g_out(p)
                gpsi.fill(0.0);
                for co in 0..g.c_out {
                    let go = grad_out[co * plane + p];
                    if go == 0.0 {
                        continue;
                    }
                    let base = co * g.c_in * g.k;
                    for (ci, gp) in gpsi.iter_mut().enumerate() {
                        *gp += wt[base + ci * g.k + i] * go;
                    }
                }
                let (mut gx, mut gy) = (0.0, 0.0);
                for ci in 0..g.c_in {
                    let base = ci * plane;
                    let gp = gpsi[ci];
                    let mut psi = 0.0;
                    for t in 0..4 {
                        let v = f[base + tap.idx[t]];
                        psi += tap.weight[t] * v;
                        gx += gp * tap.d_dx[t] * v;
                        gy += gp * tap.d_dy[t] * v;
                    }
                    if let Some(gf) = gf.as_mut() {
                        for t in 0..4 {
                            gf[base + tap.idx[t]] += gp * tap.weight[t];
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        for co in 0..g.c_out {
                            gw[(co * g.c_in + ci) * g.k + i] += grad_out[co * plane + p] * psi;
                        }
                    }
                }
                if let Some(goff) = goff.as_mut() {
                    goff[2 * i * plane + p] += gx;
                    goff[(2 * i + 1) * plane + p] += gy;
                }
            }
        }
    }
    DeformGrads {
        feature: gf,
        offsets: goff,
        weight: gw,
        bias: gb,
    }
}

/// Hash of the sampling cells used by a deformable convolution.
pub(crate) fn deform_signature(offsets: &Tensor, g: DeformGeometry) -> u64 {
    let off = offsets.data();
    let mut sig = 0xcbf2_9ce4_8422_2325u64;
    for y in 0..g.h {
        for x in 0..g.w {
            for i in 0..g.k {
                let (sx, sy) = sample_point(off, g, i, y, x);
                sig = mix(sig, bilinear_tap(sx, sy, g.h, g.w).signature);
            }
        }
    }
    sig
}

pub(crate) fn mix(state: u64, value: u64) -> u64 {
    (state ^ value)
        .wrapping_mul(0x0100_0000_01b3)
        .rotate_left(5)
}
