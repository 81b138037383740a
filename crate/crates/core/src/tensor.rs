//! Dense row-major f64 tensors and the numeric kernels the autodiff graph is
//! built on (im2col convolution, bilinear resampling).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for callers that already guarantee the element count.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(n, c, h, w)` of a rank-4 tensor. Panics on any other rank.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(
            self.shape.len(),
            4,
            "expected rank-4 tensor, got {:?}",
            self.shape
        );
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Element `i` of the leading axis, keeping a leading axis of length 1.
    pub fn batch_item(&self, i: usize) -> Self {
        let n = self.shape[0];
        assert!(i < n, "batch index {i} out of range {n}");
        let step = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self {
            shape,
            data: self.data[i * step..(i + 1) * step].to_vec(),
        }
    }

    /// Element `i` of the leading axis with that axis dropped.
    pub fn index_first(&self, i: usize) -> Self {
        let item = self.batch_item(i);
        let shape = item.shape[1..].to_vec();
        Self {
            shape,
            data: item.data,
        }
    }

    /// Concatenate along the leading axis. All trailing dims must agree.
    pub fn cat_first(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("cannot concatenate zero tensors"))?;
        let tail = &first.shape[1..];
        let mut n = 0;
        let mut data = Vec::with_capacity(parts.iter().map(Tensor::numel).sum());
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape(format!(
                    "trailing dims differ: {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Self { shape, data })
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shape(format!(
                    "stack shape mismatch: {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Little-endian byte image of the data, used for hashing and checkpoints.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// `c = a · b + beta · c` for strided row/column-major operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
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
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a 2-D convolution over square kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            groups: 1,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold `x` (`[c, h, w]`) into `[c * k * k, ho * wo]`.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, spec: &ConvSpec, cols: &mut [f64]) {
    let k = spec.kernel;
    let (ho, wo) = spec.out_size(h, w);
    let howo = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * howo..(row + 1) * howo];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate `cols` back into `dx`.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, spec: &ConvSpec, dx: &mut [f64]) {
    let k = spec.kernel;
    let (ho, wo) = spec.out_size(h, w);
    let howo = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * howo..(row + 1) * howo];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-D convolution. `weight` is `[c_out, c_in / groups, k, k]`.
pub(crate) fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Tensor {
    let (n, c_in, h, w) = x.dims4();
    let (c_out, cg_in, k, _) = weight.dims4();
    let g = spec.groups;
    assert_eq!(
        cg_in * g,
        c_in,
        "conv input channels {c_in} vs weight {cg_in}x{g}"
    );
    assert_eq!(k, spec.kernel);
    assert_eq!(c_out % g, 0);
    let cg_out = c_out / g;
    let (ho, wo) = spec.out_size(h, w);
    let howo = ho * wo;
    let kk = cg_in * k * k;
    let mut out = vec![0.0; n * c_out * howo];
    let mut cols = if spec.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kk * howo]
    };
    for b in 0..n {
        let xb = &x.data[b * c_in * h * w..(b + 1) * c_in * h * w];
        for gi in 0..g {
            let xg = &xb[gi * cg_in * h * w..(gi + 1) * cg_in * h * w];
            let colref: &[f64] = if spec.is_pointwise() {
                xg
            } else {
                im2col(xg, cg_in, h, w, spec, &mut cols);
                &cols
            };
            let wg = &weight.data[gi * cg_out * kk..(gi + 1) * cg_out * kk];
            let og =
                &mut out[(b * c_out + gi * cg_out) * howo..(b * c_out + (gi + 1) * cg_out) * howo];
            if let Some(bias) = bias {
                for (co, row) in og.chunks_mut(howo).enumerate() {
                    row.fill(bias.data[gi * cg_out + co]);
                }
            }
            gemm(
                cg_out,
                kk,
                howo,
                wg,
                (kk, 1),
                colref,
                (howo, 1),
                if bias.is_some() { 1.0 } else { 0.0 },
                og,
                (howo, 1),
            );
        }
    }
    Tensor::from_parts(vec![n, c_out, ho, wo], out)
}

/// Gradients of [`conv2d_forward`] with respect to whichever inputs are requested.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    spec: &ConvSpec,
    want_x: bool,
    want_w: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let (n, c_in, h, w) = x.dims4();
    let (c_out, cg_in, k, _) = weight.dims4();
    let g = spec.groups;
    let cg_out = c_out / g;
    let (ho, wo) = spec.out_size(h, w);
    let howo = ho * wo;
    let kk = cg_in * k * k;

    let mut db = vec![0.0; c_out];
    for b in 0..n {
        for (co, acc) in db.iter_mut().enumerate() {
            let off = (b * c_out + co) * howo;
            *acc += grad_out.data[off..off + howo].iter().sum::<f64>();
        }
    }

    let mut dx = want_x.then(|| vec![0.0; n * c_in * h * w]);
    let mut dw = want_w.then(|| vec![0.0; weight.numel()]);
    let mut cols = vec![0.0; kk * howo];
    let mut dcols = vec![0.0; kk * howo];
    for b in 0..n {
        let xb = &x.data[b * c_in * h * w..(b + 1) * c_in * h * w];
        for gi in 0..g {
            let go = &grad_out.data
                [(b * c_out + gi * cg_out) * howo..(b * c_out + (gi + 1) * cg_out) * howo];
            let wg = &weight.data[gi * cg_out * kk..(gi + 1) * cg_out * kk];
            if let Some(dw) = dw.as_mut() {
                let xg = &xb[gi * cg_in * h * w..(gi + 1) * cg_in * h * w];
                let colref: &[f64] = if spec.is_pointwise() {
                    xg
                } else {
                    im2col(xg, cg_in, h, w, spec, &mut cols);
                    &cols
                };
                // dW_g += dOut_g · colsᵀ
                gemm(
                    cg_out,
                    howo,
                    kk,
                    go,
                    (howo, 1),
                    colref,
                    (1, howo),
                    1.0,
                    &mut dw[gi * cg_out * kk..(gi + 1) * cg_out * kk],
                    (kk, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dxg = &mut dx[b * c_in * h * w + gi * cg_in * h * w
                    ..b * c_in * h * w + (gi + 1) * cg_in * h * w];
                if spec.is_pointwise() {
                    gemm(
                        kk,
                        cg_out,
                        howo,
                        wg,
                        (1, kk),
                        go,
                        (howo, 1),
                        1.0,
                        dxg,
                        (howo, 1),
                    );
                } else {
                    gemm(
                        kk,
                        cg_out,
                        howo,
                        wg,
                        (1, kk),
                        go,
                        (howo, 1),
                        0.0,
                        &mut dcols,
                        (howo, 1),
                    );
                    col2im(&dcols, cg_in, h, w, spec, dxg);
                }
            }
        }
    }
    (
        dx.map(|d| Tensor::from_parts(x.shape.clone(), d)),
        dw.map(|d| Tensor::from_parts(weight.shape.clone(), d)),
        Tensor::from_parts(vec![c_out], db),
    )
}

/// Per-axis interpolation taps for half-pixel-centred bilinear resampling.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTaps {
    pub(crate) fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut lo = Vec::with_capacity(out_len);
        let mut hi = Vec::with_capacity(out_len);
        let mut frac = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(src - i0 as f64);
        }
        Self { lo, hi, frac }
    }
}

pub(crate) fn bilinear_forward(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let ty = AxisTaps::new(h, out_h);
    let tx = AxisTaps::new(w, out_w);
    let mut out = vec![0.0; n * c * out_h * out_w];
    for p in 0..n * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for oy in 0..out_h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::from_parts(vec![n, c, out_h, out_w], out)
}

pub(crate) fn bilinear_backward(grad_out: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let (n, c, out_h, out_w) = grad_out.dims4();
    let ty = AxisTaps::new(in_h, out_h);
    let tx = AxisTaps::new(in_w, out_w);
    let mut dx = vec![0.0; n * c * in_h * in_w];
    for p in 0..n * c {
        let go = &grad_out.data[p * out_h * out_w..(p + 1) * out_h * out_w];
        let dst = &mut dx[p * in_h * in_w..(p + 1) * in_h * in_w];
        for oy in 0..out_h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let g = go[oy * out_w + ox];
                dst[y0 * in_w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * in_w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * in_w + x0] += g * fy * (1.0 - fx);
                dst[y1 * in_w + x1] += g * fy * fx;
            }
        }
    }
    Tensor::from_parts(vec![n, c, in_h, in_w], dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, wt: &Tensor, spec: &ConvSpec) -> Tensor {
        let (n, c_in, h, w) = x.dims4();
        let (c_out, cg_in, k, _) = wt.dims4();
        let cg_out = c_out / spec.groups;
        let (ho, wo) = spec.out_size(h, w);
        Tensor::from_fn(&[n, c_out, ho, wo], |idx| {
            let ox = idx % wo;
            let oy = (idx / wo) % ho;
            let co = (idx / (wo * ho)) % c_out;
            let b = idx / (wo * ho * c_out);
            let g = co / cg_out;
            let mut acc = 0.0;
            for ci in 0..cg_in {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let xi = ((b * c_in + g * cg_in + ci) * h + iy as usize) * w + ix as usize;
                        let wi = ((co * cg_in + ci) * k + ky) * k + kx;
                        acc += x.data[xi] * wt.data[wi];
                    }
                }
            }
            acc
        })
    }

    fn pseudo_random(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn conv_matches_direct_summation() {
        let cases = [
            (ConvSpec::new(3, 1, 1), 4, 6),
            (ConvSpec::new(3, 2, 1), 4, 6),
            (ConvSpec::new(1, 1, 0), 4, 6),
            (
                ConvSpec {
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                    groups: 4,
                },
                4,
                4,
            ),
        ];
        for (i, (spec, c_in, c_out)) in cases.into_iter().enumerate() {
            let x = pseudo_random(&[2, c_in, 8, 6], i as u64);
            let wt = pseudo_random(
                &[c_out, c_in / spec.groups, spec.kernel, spec.kernel],
                99 + i as u64,
            );
            let got = conv2d_forward(&x, &wt, None, &spec);
            let want = naive_conv(&x, &wt, &spec);
            assert!(got.max_abs_diff(&want) < 1e-12, "case {i}");
        }
    }

    #[test]
    fn bilinear_identity_when_sizes_match() {
        let x = pseudo_random(&[1, 2, 5, 7], 3);
        let y = bilinear_forward(&x, 5, 7);
        assert!(x.max_abs_diff(&y) < 1e-15);
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        // <up(x), g> == <x, up^T(g)>
        let x = pseudo_random(&[1, 2, 4, 3], 5);
        let g = pseudo_random(&[1, 2, 16, 12], 6);
        let up = bilinear_forward(&x, 16, 12);
        let back = bilinear_backward(&g, 4, 3);
        let lhs: f64 = up.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn stack_and_index_round_trip() {
        let a = Tensor::full(&[2, 3], 1.0);
        let b = Tensor::full(&[2, 3], 2.0);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 3]);
        assert_eq!(s.index_first(1), b);
        assert!(Tensor::stack(&[a, Tensor::zeros(&[3, 2])]).is_err());
    }
}
