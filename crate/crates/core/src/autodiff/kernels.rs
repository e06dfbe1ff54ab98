//! Forward and adjoint kernels on raw arrays. All spatial arrays are
//! `T×X×Y×Z×C`, channels fastest.

use crate::autodiff::{NdArray, TensorError};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output extent `ceil(in / stride)`, zero padding split low/high
    /// with the odd voxel on the high side.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_lo: [usize; 3],
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self, TensorError> {
        let [t, x, y, z, cin] = <[usize; 5]>::try_from(input_shape).map_err(|_| {
            TensorError::ShapeMismatch(format!("conv input must be rank 5, got {input_shape:?}"))
        })?;
        let [k0, k1, k2, kcin, cout] = <[usize; 5]>::try_from(kernel_shape).map_err(|_| {
            TensorError::ShapeMismatch(format!("conv kernel must be rank 5, got {kernel_shape:?}"))
        })?;
        if k0 != k1 || k1 != k2 || !(1..=3).contains(&k0) || !(1..=2).contains(&stride) {
            return Err(TensorError::UnsupportedKernel {
                kernel: kernel_shape[..3].to_vec(),
                stride,
            });
        }
        if kcin != cin {
            return Err(TensorError::ShapeMismatch(format!(
                "kernel expects {kcin} input channels, input has {cin}"
            )));
        }
        let k = k0;
        let mut output = [0; 3];
        let mut pad_lo = [0; 3];
        for (axis, &n) in [x, y, z].iter().enumerate() {
            match padding {
                Padding::Same => {
                    let out = n.div_ceil(stride);
                    let total = ((out - 1) * stride + k).saturating_sub(n);
                    output[axis] = out;
                    pad_lo[axis] = total / 2;
                }
                Padding::Valid => {
                    if n < k {
                        return Err(TensorError::ShapeMismatch(format!(
                            "valid conv needs extent >= {k}, got {n}"
                        )));
                    }
                    output[axis] = (n - k) / stride + 1;
                }
            }
        }
        Ok(Self {
            batch: t,
            input: [x, y, z],
            output,
            cin,
            cout,
            kernel: k,
            stride,
            pad_lo,
        })
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn patch_len(&self) -> usize {
        self.kernel.pow(3) * self.cin
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.output[0],
            self.output[1],
            self.output[2],
            self.cout,
        ]
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// Source coordinate along `axis` for output index `o` and tap `tap`.
    #[inline]
    fn source(&self, axis: usize, o: usize, tap: usize) -> Option<usize> {
        let pos = (o * self.stride + tap) as isize - self.pad_lo[axis] as isize;
        (pos >= 0 && (pos as usize) < self.input[axis]).then_some(pos as usize)
    }

    /// Unfold one batch item into `[out_voxels, k³·cin]`.
    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        self.im2col_rows(x, col, 0, self.out_voxels());
    }

    /// Unfold output voxels `r0..r1` into `col` (row `r` lands at `r − r0`).
    fn im2col_rows<T: Real>(&self, x: &[T], col: &mut [T], r0: usize, r1: usize) {
        let (k, cin) = (self.kernel, self.cin);
        let [nx, ny, nz] = self.input;
        let [_, oy, oz] = self.output;
        let plen = self.patch_len();
        for r in r0..r1 {
            let (i, j, l) = (r / (oy * oz), (r / oz) % oy, r % oz);
            let dst = &mut col[(r - r0) * plen..(r - r0 + 1) * plen];
            let mut p = 0;
            for a in 0..k {
                let sx = self.source(0, i, a);
                for b in 0..k {
                    let sy = self.source(1, j, b);
                    for c in 0..k {
                        let sz = self.source(2, l, c);
                        let seg = &mut dst[p..p + cin];
                        match (sx, sy, sz) {
                            (Some(u), Some(v), Some(w)) => {
                                let src = ((u * ny + v) * nz + w) * cin;
                                seg.copy_from_slice(&x[src..src + cin]);
                            }
                            _ => seg.fill(T::zero()),
                        }
                        p += cin;
                    }
                }
            }
        }
        debug_assert_eq!(nx * ny * nz * cin, x.len());
    }

    /// Adjoint of [`Self::im2col`]: accumulate columns back into `dx`.
    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let (k, cin) = (self.kernel, self.cin);
        let [_, ny, nz] = self.input;
        let [ox, oy, oz] = self.output;
        let plen = self.patch_len();
        let mut row = 0;
        for i in 0..ox {
            for j in 0..oy {
                for l in 0..oz {
                    let src = &col[row * plen..(row + 1) * plen];
                    let mut p = 0;
                    for a in 0..k {
                        let sx = self.source(0, i, a);
                        for b in 0..k {
                            let sy = self.source(1, j, b);
                            for c in 0..k {
                                let sz = self.source(2, l, c);
                                if let (Some(u), Some(v), Some(w)) = (sx, sy, sz) {
                                    let dst = ((u * ny + v) * nz + w) * cin;
                                    for (d, &s) in
                                        dx[dst..dst + cin].iter_mut().zip(&src[p..p + cin])
                                    {
                                        *d += s;
                                    }
                                }
                                p += cin;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Upper bound on im2col scratch entries held at once during a forward
/// convolution.
const IM2COL_BUDGET: usize = 1 << 22;

/// Cross-correlation of a `T×X×Y×Z×Cin` input with a `k×k×k×Cin×Cout` kernel.
pub fn conv3d_forward<T: Real>(x: &NdArray<T>, w: &NdArray<T>, g: &ConvGeometry) -> NdArray<T> {
    let (nin, nout, plen) = (g.in_voxels(), g.out_voxels(), g.patch_len());
    let mut out = NdArray::zeros(&g.output_shape());
    let chunk = (IM2COL_BUDGET / plen.max(1)).clamp(1, nout.max(1));
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); chunk * plen]
    };
    for t in 0..g.batch {
        let xs = &x.data()[t * nin * g.cin..(t + 1) * nin * g.cin];
        let ys = &mut out.data_mut()[t * nout * g.cout..(t + 1) * nout * g.cout];
        let mut r0 = 0;
        while r0 < nout {
            let r1 = if g.is_pointwise() {
                nout
            } else {
                (r0 + chunk).min(nout)
            };
            let a: &[T] = if g.is_pointwise() {
                xs
            } else {
                g.im2col_rows(xs, &mut col, r0, r1);
                &col
            };
            T::gemm(
                r1 - r0,
                plen,
                g.cout,
                T::one(),
                a,
                plen as isize,
                1,
                w.data(),
                g.cout as isize,
                1,
                T::zero(),
                &mut ys[r0 * g.cout..r1 * g.cout],
                g.cout as isize,
                1,
            );
            r0 = r1;
        }
    }
    out
}

/// Gradients of [`conv3d_forward`] with respect to the input (if requested)
/// and the kernel.
pub fn conv3d_backward<T: Real>(
    x: &NdArray<T>,
    w: &NdArray<T>,
    dy: &NdArray<T>,
    g: &ConvGeometry,
    need_dx: bool,
    need_dw: bool,
) -> (Option<NdArray<T>>, Option<NdArray<T>>) {
    let (nin, nout, plen) = (g.in_voxels(), g.out_voxels(), g.patch_len());
    let mut dx = need_dx.then(|| NdArray::zeros(x.shape()));
    let mut dw = need_dw.then(|| NdArray::zeros(w.shape()));
    let pointwise = g.is_pointwise();
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); nout * plen]
    };
    for t in 0..g.batch {
        let xs = &x.data()[t * nin * g.cin..(t + 1) * nin * g.cin];
        let dys = &dy.data()[t * nout * g.cout..(t + 1) * nout * g.cout];
        if let Some(dw) = dw.as_mut() {
            let a: &[T] = if pointwise {
                xs
            } else {
                g.im2col(xs, &mut col);
                &col
            };
            // dW += colᵀ · dY
            T::gemm(
                plen,
                nout,
                g.cout,
                T::one(),
                a,
                1,
                plen as isize,
                dys,
                g.cout as isize,
                1,
                T::one(),
                dw.data_mut(),
                g.cout as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[t * nin * g.cin..(t + 1) * nin * g.cin];
            // dcol = dY · Wᵀ
            let target: &mut [T] = if pointwise { dxs } else { &mut col };
            T::gemm(
                nout,
                g.cout,
                plen,
                T::one(),
                dys,
                g.cout as isize,
                1,
                w.data(),
                1,
                g.cout as isize,
                T::zero(),
                target,
                plen as isize,
                1,
            );
            if !pointwise {
                let dxs = &mut dx.data_mut()[t * nin * g.cin..(t + 1) * nin * g.cin];
                g.col2im(&col, dxs);
            }
        }
    }
    (dx, dw)
}

/// Shapes of a stride-2, `2×2×2` transposed convolution.
pub fn conv_transpose_shape(
    input_shape: &[usize],
    kernel_shape: &[usize],
) -> Result<Vec<usize>, TensorError> {
    let [t, x, y, z, cin] = <[usize; 5]>::try_from(input_shape).map_err(|_| {
        TensorError::ShapeMismatch(format!("input must be rank 5, got {input_shape:?}"))
    })?;
    match kernel_shape {
        [2, 2, 2, kc, cout] if *kc == cin => Ok(vec![t, 2 * x, 2 * y, 2 * z, *cout]),
        [2, 2, 2, kc, _] => Err(TensorError::ShapeMismatch(format!(
            "kernel expects {kc} input channels, input has {cin}"
        ))),
        _ => Err(TensorError::UnsupportedKernel {
            kernel: kernel_shape.iter().take(3).copied().collect(),
            stride: 2,
        }),
    }
}

/// Output row of tap `o = (a,b,c)` applied to input voxel `(i,j,l)`.
#[inline]
fn upsampled_index(dims: [usize; 3], i: usize, j: usize, l: usize, o: usize) -> usize {
    let (a, b, c) = (o >> 2, (o >> 1) & 1, o & 1);
    ((2 * i + a) * 2 * dims[1] + 2 * j + b) * 2 * dims[2] + 2 * l + c
}

pub fn conv_transpose3d_forward<T: Real>(x: &NdArray<T>, w: &NdArray<T>) -> NdArray<T> {
    let [t, nx, ny, nz, cin] = x.dims5().expect("checked by caller");
    let cout = w.shape()[4];
    let out_shape = [t, 2 * nx, 2 * ny, 2 * nz, cout];
    let mut out = NdArray::zeros(&out_shape);
    let n = nx * ny * nz;
    let mut tmp = vec![T::zero(); n * cout];
    for bt in 0..t {
        let xs = &x.data()[bt * n * cin..(bt + 1) * n * cin];
        for o in 0..8 {
            let ko = &w.data()[o * cin * cout..(o + 1) * cin * cout];
            T::gemm(
                n,
                cin,
                cout,
                T::one(),
                xs,
                cin as isize,
                1,
                ko,
                cout as isize,
                1,
                T::zero(),
                &mut tmp,
                cout as isize,
                1,
            );
            let ys = &mut out.data_mut()[bt * 8 * n * cout..(bt + 1) * 8 * n * cout];
            let mut row = 0;
            for i in 0..nx {
                for j in 0..ny {
                    for l in 0..nz {
                        let dst = upsampled_index([nx, ny, nz], i, j, l, o) * cout;
                        ys[dst..dst + cout].copy_from_slice(&tmp[row * cout..(row + 1) * cout]);
                        row += 1;
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose3d_backward<T: Real>(
    x: &NdArray<T>,
    w: &NdArray<T>,
    dy: &NdArray<T>,
    need_dx: bool,
    need_dw: bool,
) -> (Option<NdArray<T>>, Option<NdArray<T>>) {
    let [t, nx, ny, nz, cin] = x.dims5().expect("checked by caller");
    let cout = w.shape()[4];
    let n = nx * ny * nz;
    let mut dx = need_dx.then(|| NdArray::zeros(x.shape()));
    let mut dw = need_dw.then(|| NdArray::zeros(w.shape()));
    let mut tmp = vec![T::zero(); n * cout];
    for bt in 0..t {
        let xs = &x.data()[bt * n * cin..(bt + 1) * n * cin];
        let dys = &dy.data()[bt * 8 * n * cout..(bt + 1) * 8 * n * cout];
        for o in 0..8 {
            let mut row = 0;
            for i in 0..nx {
                for j in 0..ny {
                    for l in 0..nz {
                        let src = upsampled_index([nx, ny, nz], i, j, l, o) * cout;
                        tmp[row * cout..(row + 1) * cout].copy_from_slice(&dys[src..src + cout]);
                        row += 1;
                    }
                }
            }
            let ko = o * cin * cout..(o + 1) * cin * cout;
            if let Some(dw) = dw.as_mut() {
                // dK_o += Xᵀ · dY_o
                T::gemm(
                    cin,
                    n,
                    cout,
                    T::one(),
                    xs,
                    1,
                    cin as isize,
                    &tmp,
                    cout as isize,
                    1,
                    T::one(),
                    &mut dw.data_mut()[ko.clone()],
                    cout as isize,
                    1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                // dX += dY_o · K_oᵀ
                T::gemm(
                    n,
                    cout,
                    cin,
                    T::one(),
                    &tmp,
                    cout as isize,
                    1,
                    &w.data()[ko],
                    1,
                    cout as isize,
                    T::one(),
                    &mut dx.data_mut()[bt * n * cin..(bt + 1) * n * cin],
                    cin as isize,
                    1,
                );
            }
        }
    }
    (dx, dw)
}

/// Per-(instance, channel) statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct InstanceNormCache<T> {
    pub normalized: NdArray<T>,
    pub inv_std: Vec<T>,
}

pub fn instance_norm_forward<T: Real>(
    x: &NdArray<T>,
    eps: T,
) -> Result<InstanceNormCache<T>, TensorError> {
    let [t, nx, ny, nz, c] = x.dims5()?;
    let n = nx * ny * nz;
    if n < 2 {
        return Err(TensorError::DegenerateSpatial);
    }
    let nt = T::from_f64(n as f64);
    let mut out = NdArray::zeros(x.shape());
    let mut inv_std = vec![T::zero(); t * c];
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for bt in 0..t {
        let xs = &x.data()[bt * n * c..(bt + 1) * n * c];
        mean.fill(T::zero());
        var.fill(T::zero());
        for v in xs.chunks_exact(c) {
            for (m, &e) in mean.iter_mut().zip(v) {
                *m += e;
            }
        }
        for m in mean.iter_mut() {
            *m /= nt;
        }
        for v in xs.chunks_exact(c) {
            for ((s, &e), &m) in var.iter_mut().zip(v).zip(&mean) {
                let d = e - m;
                *s += d * d;
            }
        }
        let inv = &mut inv_std[bt * c..(bt + 1) * c];
        for (iv, &s) in inv.iter_mut().zip(&var) {
            *iv = T::one() / (s / nt + eps).sqrt();
        }
        let ys = &mut out.data_mut()[bt * n * c..(bt + 1) * n * c];
        for (yv, xv) in ys.chunks_exact_mut(c).zip(xs.chunks_exact(c)) {
            for ch in 0..c {
                yv[ch] = (xv[ch] - mean[ch]) * inv[ch];
            }
        }
    }
    Ok(InstanceNormCache {
        normalized: out,
        inv_std,
    })
}

pub fn instance_norm_backward<T: Real>(
    cache: &InstanceNormCache<T>,
    dy: &NdArray<T>,
) -> NdArray<T> {
    let [t, nx, ny, nz, c] = dy.dims5().expect("shape checked in forward");
    let n = nx * ny * nz;
    let nt = T::from_f64(n as f64);
    let mut dx = NdArray::zeros(dy.shape());
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for bt in 0..t {
        let range = bt * n * c..(bt + 1) * n * c;
        let xh = &cache.normalized.data()[range.clone()];
        let g = &dy.data()[range.clone()];
        sum_dy.fill(T::zero());
        sum_dy_xhat.fill(T::zero());
        for (gv, hv) in g.chunks_exact(c).zip(xh.chunks_exact(c)) {
            for ch in 0..c {
                sum_dy[ch] += gv[ch];
                sum_dy_xhat[ch] += gv[ch] * hv[ch];
            }
        }
        let inv = &cache.inv_std[bt * c..(bt + 1) * c];
        let out = &mut dx.data_mut()[range];
        for ((ov, gv), hv) in out
            .chunks_exact_mut(c)
            .zip(g.chunks_exact(c))
            .zip(xh.chunks_exact(c))
        {
            for ch in 0..c {
                ov[ch] = inv[ch] * (gv[ch] - sum_dy[ch] / nt - hv[ch] * sum_dy_xhat[ch] / nt);
            }
        }
    }
    dx
}

/// Softmax over the last axis, max-subtracted.
pub fn softmax_last_axis<T: Real>(x: &NdArray<T>) -> NdArray<T> {
    let c = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    for v in out.data_mut().chunks_exact_mut(c) {
        let m = v.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for e in v.iter_mut() {
            *e = (*e - m).exp();
            s += *e;
        }
        for e in v.iter_mut() {
            *e /= s;
        }
    }
    out
}

pub fn softmax_last_axis_backward<T: Real>(y: &NdArray<T>, dy: &NdArray<T>) -> NdArray<T> {
    let c = *y.shape().last().unwrap_or(&1);
    let mut dx = NdArray::zeros(y.shape());
    for ((d, yv), gv) in dx
        .data_mut()
        .chunks_exact_mut(c)
        .zip(y.data().chunks_exact(c))
        .zip(dy.data().chunks_exact(c))
    {
        let dot: T = yv.iter().zip(gv).map(|(&a, &b)| a * b).sum();
        for ch in 0..c {
            d[ch] = yv[ch] * (gv[ch] - dot);
        }
    }
    dx
}

/// Linear-interpolation taps for resampling `n_in` samples onto `n_out`
/// with half-voxel-centred coordinates and edge clamping.
#[derive(Clone, Debug)]
pub struct LinearTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl LinearTaps {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let mut taps = Self {
            lo: Vec::with_capacity(n_out),
            hi: Vec::with_capacity(n_out),
            frac: Vec::with_capacity(n_out),
        };
        for j in 0..n_out {
            let src = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            taps.lo.push(lo);
            taps.hi.push((lo + 1).min(n_in - 1));
            taps.frac.push(src - lo as f64);
        }
        taps
    }
}

/// Resample one axis of a row-major array viewed as `[outer, n, inner]`.
pub fn resample_axis<T: Real>(
    data: &[T],
    outer: usize,
    n_in: usize,
    inner: usize,
    taps: &LinearTaps,
) -> Vec<T> {
    let n_out = taps.lo.len();
    let mut out = vec![T::zero(); outer * n_out * inner];
    for o in 0..outer {
        let src = &data[o * n_in * inner..(o + 1) * n_in * inner];
        let dst = &mut out[o * n_out * inner..(o + 1) * n_out * inner];
        for j in 0..n_out {
            let w = T::from_f64(taps.frac[j]);
            let (a, b) = (taps.lo[j] * inner, taps.hi[j] * inner);
            let row = &mut dst[j * inner..(j + 1) * inner];
            for i in 0..inner {
                row[i] = src[a + i] * (T::one() - w) + src[b + i] * w;
            }
        }
    }
    out
}

/// Adjoint of [`resample_axis`].
pub fn resample_axis_adjoint<T: Real>(
    grad: &[T],
    outer: usize,
    n_in: usize,
    inner: usize,
    taps: &LinearTaps,
) -> Vec<T> {
    let n_out = taps.lo.len();
    let mut out = vec![T::zero(); outer * n_in * inner];
    for o in 0..outer {
        let src = &grad[o * n_out * inner..(o + 1) * n_out * inner];
        let dst = &mut out[o * n_in * inner..(o + 1) * n_in * inner];
        for j in 0..n_out {
            let w = T::from_f64(taps.frac[j]);
            let (a, b) = (taps.lo[j] * inner, taps.hi[j] * inner);
            for i in 0..inner {
                let g = src[j * inner + i];
                dst[a + i] += g * (T::one() - w);
                dst[b + i] += g * w;
            }
        }
    }
    out
}

/// Trilinear resize of the three spatial axes of a `T×X×Y×Z×C` array.
pub fn resize_trilinear<T: Real>(
    x: &NdArray<T>,
    target: [usize; 3],
) -> Result<NdArray<T>, TensorError> {
    let [t, nx, ny, nz, c] = x.dims5()?;
    let mut dims = [nx, ny, nz];
    let mut data = x.data().to_vec();
    for axis in 0..3 {
        if dims[axis] == target[axis] {
            continue;
        }
        let taps = LinearTaps::new(dims[axis], target[axis]);
        let outer = t * dims[..axis].iter().product::<usize>();
        let inner = c * dims[axis + 1..].iter().product::<usize>();
        data = resample_axis(&data, outer, dims[axis], inner, &taps);
        dims[axis] = target[axis];
    }
    NdArray::new(vec![t, dims[0], dims[1], dims[2], c], data)
}

pub fn resize_trilinear_adjoint<T: Real>(grad: &NdArray<T>, source: [usize; 3]) -> NdArray<T> {
    let [t, mx, my, mz, c] = grad.dims5().expect("checked in forward");
    let mut dims = [mx, my, mz];
    let mut data = grad.data().to_vec();
    for axis in (0..3).rev() {
        if dims[axis] == source[axis] {
            continue;
        }
        let taps = LinearTaps::new(source[axis], dims[axis]);
        let outer = t * dims[..axis].iter().product::<usize>();
        let inner = c * dims[axis + 1..].iter().product::<usize>();
        data = resample_axis_adjoint(&data, outer, source[axis], inner, &taps);
        dims[axis] = source[axis];
    }
    NdArray::new(vec![t, dims[0], dims[1], dims[2], c], data).expect("sizes consistent")
}
