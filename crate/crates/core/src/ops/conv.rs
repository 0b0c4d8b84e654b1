//! 3D convolution, its adjoint (transposed convolution), and the phase
//! decomposition that rewrites a strided transposed convolution as stride-1
//! convolutions followed by periodic shuffling.
//!
//! Kernels use the `(out_C, in_C, k1, k2, k3)` layout. Internally the
//! convolutions run as im2col + GEMM over chunks of output voxels; the
//! column index is `tap * in_C + channel` with taps in row-major order.

use super::shuffle::{pixel_shuffle, ShuffleFactors};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{Shape3, Spacing, Volume4};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub out_channels: usize,
    pub in_channels: usize,
    pub size: Shape3,
    pub stride: Shape3,
    pub padding: Shape3,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(
        weights: Vec<T>,
        bias: Vec<T>,
        out_channels: usize,
        in_channels: usize,
        size: Shape3,
        stride: Shape3,
        padding: Shape3,
    ) -> Result<Self> {
        let k = ConvKernel {
            weights,
            bias,
            out_channels,
            in_channels,
            size,
            stride,
            padding,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn zeros(out_channels: usize, in_channels: usize, size: Shape3) -> Self {
        ConvKernel {
            weights: vec![T::zero(); out_channels * in_channels * size.iter().product::<usize>()],
            bias: vec![T::zero(); out_channels],
            out_channels,
            in_channels,
            size,
            stride: [1; 3],
            padding: [0; 3],
        }
    }

    /// Stride-1 kernel padded so that odd sizes preserve the spatial shape.
    pub fn same(weights: Vec<T>, bias: Vec<T>, out_channels: usize, in_channels: usize, size: Shape3) -> Result<Self> {
        if size.iter().any(|s| s % 2 == 0) {
            return Err(Error::arg(format!("same padding needs odd kernel sizes, got {size:?}")));
        }
        Self::new(weights, bias, out_channels, in_channels, size, [1; 3], size.map(|s| s / 2))
    }

    pub fn with_stride(mut self, stride: Shape3) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: Shape3) -> Self {
        self.padding = padding;
        self
    }

    pub fn taps(&self) -> usize {
        self.size.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.in_channels == 0 || self.size.contains(&0) {
            return Err(Error::dim("kernel has a zero extent"));
        }
        if self.stride.contains(&0) {
            return Err(Error::arg(format!("stride {:?} must be >= 1", self.stride)));
        }
        let expected = self.out_channels * self.in_channels * self.taps();
        if self.weights.len() != expected {
            return Err(Error::dim(format!(
                "kernel holds {} weights, ({}, {}, {:?}) needs {expected}",
                self.weights.len(),
                self.out_channels,
                self.in_channels,
                self.size
            )));
        }
        if self.bias.len() != self.out_channels {
            return Err(Error::dim(format!(
                "bias has {} entries for {} output channels",
                self.bias.len(),
                self.out_channels
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn weight(&self, o: usize, c: usize, a: usize, b: usize, e: usize) -> T {
        let [_, k2, k3] = self.size;
        self.weights[(((o * self.in_channels + c) * self.size[0] + a) * k2 + b) * k3 + e]
    }

    /// Weights as a `(taps * in_C) x out_C` row-major matrix.
    pub(crate) fn packed(&self) -> Vec<T> {
        pack_weights(&self.weights, self.out_channels, self.in_channels, self.taps())
    }
}

pub(crate) fn pack_weights<T: Scalar>(w: &[T], cout: usize, cin: usize, taps: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for o in 0..cout {
        for c in 0..cin {
            for t in 0..taps {
                out[(t * cin + c) * cout + o] = w[(o * cin + c) * taps + t];
            }
        }
    }
    out
}

pub(crate) fn unpack_weights<T: Scalar>(p: &[T], cout: usize, cin: usize, taps: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p.len()];
    for o in 0..cout {
        for c in 0..cin {
            for t in 0..taps {
                out[(o * cin + c) * taps + t] = p[(t * cin + c) * cout + o];
            }
        }
    }
    out
}

fn out_extent(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (n + 2 * p).checked_sub(k).map(|v| v / s + 1)
}

/// Shapes of one forward convolution `input -> output`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub input: Shape3,
    pub output: Shape3,
    pub ksize: Shape3,
    pub stride: Shape3,
    pub pad: Shape3,
    pub cin: usize,
    pub cout: usize,
}

impl ConvGeom {
    pub fn forward(input: Shape3, k: &ConvKernel<impl Scalar>) -> Result<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = out_extent(input[a], k.size[a], k.stride[a], k.padding[a]).ok_or_else(|| {
                Error::dim(format!(
                    "kernel {:?} with padding {:?} does not fit input {input:?}",
                    k.size, k.padding
                ))
            })?;
        }
        Ok(ConvGeom {
            input,
            output,
            ksize: k.size,
            stride: k.stride,
            pad: k.padding,
            cin: k.in_channels,
            cout: k.out_channels,
        })
    }

    /// Geometry of the convolution whose adjoint maps `x` (spatial `input`)
    /// to the transposed-convolution output.
    pub fn transposed(input: Shape3, k: &ConvKernel<impl Scalar>) -> Result<Self> {
        let mut full = [0; 3];
        for a in 0..3 {
            full[a] = ((input[a] - 1) * k.stride[a] + k.size[a])
                .checked_sub(2 * k.padding[a])
                .filter(|&n| n > 0)
                .ok_or_else(|| {
                    Error::dim(format!(
                        "padding {:?} consumes the whole transposed output",
                        k.padding
                    ))
                })?;
        }
        let g = ConvGeom::forward(full, k)?;
        debug_assert_eq!(g.output, input);
        Ok(g)
    }

    pub fn taps(&self) -> usize {
        self.ksize.iter().product()
    }

    pub fn k_len(&self) -> usize {
        self.taps() * self.cin
    }

    pub fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    pub fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.ksize == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    /// Output rows per GEMM chunk; keeps the column buffer near 1 MiB of f32.
    fn chunk_rows(&self) -> usize {
        (262_144 / self.k_len().max(1)).clamp(16, 4096).min(self.out_voxels())
    }

    /// Visits the contiguous `(k3 * cin)` runs of one output voxel's
    /// receptive field as `f(col_offset, Some(input_offset), len)`, or with
    /// `None` for runs that fall into the zero padding.
    #[inline]
    fn for_each_run(&self, p: usize, mut f: impl FnMut(usize, Option<usize>, usize)) {
        let [_, ow, od] = self.output;
        let [ih, iw, id] = self.input;
        let [k1, k2, k3] = self.ksize;
        let cin = self.cin;
        let pos = [p / (ow * od), (p / od) % ow, p % od];
        let base: [isize; 3] =
            std::array::from_fn(|a| (pos[a] * self.stride[a]) as isize - self.pad[a] as isize);
        let run = k3 * cin;
        let k_lo = (-base[2]).clamp(0, k3 as isize) as usize;
        let k_hi = (id as isize - base[2]).clamp(0, k3 as isize) as usize;
        for a in 0..k1 {
            let ii = base[0] + a as isize;
            for b in 0..k2 {
                let col = (a * k2 + b) * run;
                let jj = base[1] + b as isize;
                if ii < 0 || ii >= ih as isize || jj < 0 || jj >= iw as isize || k_lo >= k_hi {
                    f(col, None, run);
                    continue;
                }
                if k_lo > 0 {
                    f(col, None, k_lo * cin);
                }
                let kk = base[2] + k_lo as isize;
                let src = ((ii as usize * iw + jj as usize) * id + kk as usize) * cin;
                f(col + k_lo * cin, Some(src), (k_hi - k_lo) * cin);
                if k_hi < k3 {
                    f(col + k_hi * cin, None, (k3 - k_hi) * cin);
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T], p0: usize, rows: usize, cols: &mut [T]) {
        let kl = self.k_len();
        for r in 0..rows {
            let row = &mut cols[r * kl..(r + 1) * kl];
            self.for_each_run(p0 + r, |c, src, n| match src {
                Some(s) => row[c..c + n].copy_from_slice(&x[s..s + n]),
                None => row[c..c + n].fill(T::zero()),
            });
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], p0: usize, rows: usize, dx: &mut [T]) {
        let kl = self.k_len();
        for r in 0..rows {
            let row = &cols[r * kl..(r + 1) * kl];
            self.for_each_run(p0 + r, |c, src, n| {
                if let Some(s) = src {
                    for (d, &v) in dx[s..s + n].iter_mut().zip(&row[c..c + n]) {
                        *d += v;
                    }
                }
            });
        }
    }
}

/// `y = conv(x, w) + bias`, with `w` packed as `(taps * cin) x cout`.
pub(crate) fn conv_forward_raw<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (kl, cout) = (g.k_len(), g.cout);
    let n = g.out_voxels();
    let mut y = vec![T::zero(); n * cout];
    if g.is_pointwise() {
        T::gemm(n, kl, cout, T::one(), x, (kl as isize, 1), w, (cout as isize, 1), T::zero(), &mut y, (cout as isize, 1));
    } else {
        let chunk = g.chunk_rows();
        let mut cols = vec![T::zero(); chunk * kl];
        for p0 in (0..n).step_by(chunk) {
            let rows = chunk.min(n - p0);
            g.im2col(x, p0, rows, &mut cols);
            T::gemm(
                rows,
                kl,
                cout,
                T::one(),
                &cols,
                (kl as isize, 1),
                w,
                (cout as isize, 1),
                T::zero(),
                &mut y[p0 * cout..(p0 + rows) * cout],
                (cout as isize, 1),
            );
        }
    }
    if let Some(b) = bias {
        for voxel in y.chunks_exact_mut(cout) {
            for (v, &bb) in voxel.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    y
}

/// Adjoint of [`conv_forward_raw`] with respect to `x`.
pub(crate) fn conv_backward_input_raw<T: Scalar>(g: &ConvGeom, dy: &[T], w: &[T]) -> Vec<T> {
    let (kl, cout) = (g.k_len(), g.cout);
    let n = g.out_voxels();
    let mut dx = vec![T::zero(); g.in_voxels() * g.cin];
    if g.is_pointwise() {
        T::gemm(n, cout, kl, T::one(), dy, (cout as isize, 1), w, (1, cout as isize), T::zero(), &mut dx, (kl as isize, 1));
        return dx;
    }
    let chunk = g.chunk_rows();
    let mut cols = vec![T::zero(); chunk * kl];
    for p0 in (0..n).step_by(chunk) {
        let rows = chunk.min(n - p0);
        T::gemm(
            rows,
            cout,
            kl,
            T::one(),
            &dy[p0 * cout..(p0 + rows) * cout],
            (cout as isize, 1),
            w,
            (1, cout as isize),
            T::zero(),
            &mut cols[..rows * kl],
            (kl as isize, 1),
        );
        g.col2im(&cols, p0, rows, &mut dx);
    }
    dx
}

/// Gradient of [`conv_forward_raw`] with respect to the packed weights.
pub(crate) fn conv_backward_weight_raw<T: Scalar>(g: &ConvGeom, x: &[T], dy: &[T]) -> Vec<T> {
    let (kl, cout) = (g.k_len(), g.cout);
    let n = g.out_voxels();
    let mut dw = vec![T::zero(); kl * cout];
    if g.is_pointwise() {
        T::gemm(kl, n, cout, T::one(), x, (1, kl as isize), dy, (cout as isize, 1), T::zero(), &mut dw, (cout as isize, 1));
        return dw;
    }
    let chunk = g.chunk_rows();
    let mut cols = vec![T::zero(); chunk * kl];
    for p0 in (0..n).step_by(chunk) {
        let rows = chunk.min(n - p0);
        g.im2col(x, p0, rows, &mut cols);
        T::gemm(
            kl,
            rows,
            cout,
            T::one(),
            &cols,
            (1, kl as isize),
            &dy[p0 * cout..(p0 + rows) * cout],
            (cout as isize, 1),
            T::one(),
            &mut dw,
            (cout as isize, 1),
        );
    }
    dw
}

pub(crate) fn bias_grad<T: Scalar>(dy: &[T], cout: usize) -> Vec<T> {
    let mut db = vec![T::zero(); cout];
    for voxel in dy.chunks_exact(cout) {
        for (d, &v) in db.iter_mut().zip(voxel) {
            *d += v;
        }
    }
    db
}

/// Cross-correlation with zero padding:
/// `out = floor((in + 2 pad - k) / stride) + 1` per axis.
/// Voxel spacing after a strided (or, with `upsampling`, transposed)
/// convolution.
pub(crate) fn output_spacing(spacing: Spacing, stride: Shape3, upsampling: bool) -> Spacing {
    std::array::from_fn(|a| {
        if upsampling {
            spacing[a] / stride[a] as f64
        } else {
            spacing[a] * stride[a] as f64
        }
    })
}

pub fn conv3d<T: Scalar>(x: &Volume4<T>, k: &ConvKernel<T>) -> Result<Volume4<T>> {
    k.validate()?;
    if x.channels() != k.in_channels {
        return Err(Error::dim(format!(
            "input has {} channels, kernel expects {}",
            x.channels(),
            k.in_channels
        )));
    }
    let g = ConvGeom::forward(x.spatial(), k)?;
    let y = conv_forward_raw(&g, x.data(), &k.packed(), Some(&k.bias));
    let o = g.output;
    Volume4::new(y, [o[0], o[1], o[2], k.out_channels], output_spacing(x.spacing(), k.stride, false))
}

/// Transposed convolution: the adjoint of [`conv3d`]'s linear part.
///
/// The kernel is read in the forward orientation, so `x` carries
/// `k.out_channels` channels and the result `k.in_channels`; the bias is not
/// applied. Output extent per axis is `(in - 1) * stride + k - 2 * pad`.
pub fn transposed_conv3d<T: Scalar>(x: &Volume4<T>, k: &ConvKernel<T>) -> Result<Volume4<T>> {
    k.validate()?;
    if x.channels() != k.out_channels {
        return Err(Error::dim(format!(
            "input has {} channels, transposed kernel expects {}",
            x.channels(),
            k.out_channels
        )));
    }
    let g = ConvGeom::transposed(x.spatial(), k)?;
    let y = conv_backward_input_raw(&g, x.data(), &k.packed());
    let s = g.input;
    Volume4::new(y, [s[0], s[1], s[2], k.in_channels], output_spacing(x.spacing(), k.stride, true))
}

/// Phase sub-kernels of a strided transposed convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct TransposedDecomposition<T> {
    /// One stride-1 kernel per phase, phase index `a * r2 * r3 + b * r3 + c`.
    pub sub_kernels: Vec<ConvKernel<T>>,
    pub shuffle: ShuffleFactors,
    /// Leading voxels of the shuffled result that the original padding removes.
    pub crop: Shape3,
}

/// Splits `k` (used as a transposed convolution with its stride) into
/// `r = s1 * s2 * s3` stride-1 kernels of `ceil(k / s)` taps per axis.
///
/// Output phase `a` along an axis only receives taps `a, a + s, a + 2s, ...`
/// of the original kernel; each sub-kernel holds those taps in reverse order
/// so a full-padding stride-1 convolution of the input produces that phase.
pub fn decompose_transposed<T: Scalar>(k: &ConvKernel<T>) -> Result<TransposedDecomposition<T>> {
    k.validate()?;
    for a in 0..3 {
        if k.stride[a] > k.size[a] {
            return Err(Error::arg(format!(
                "stride {:?} exceeds kernel size {:?}",
                k.stride, k.size
            )));
        }
    }
    let s = k.stride;
    let taps: Shape3 = std::array::from_fn(|a| k.size[a].div_ceil(s[a]));
    let full_pad = taps.map(|t| t - 1);
    // transposed orientation: sub-kernel maps k.out_channels -> k.in_channels
    let (cin, cout) = (k.out_channels, k.in_channels);
    let mut sub_kernels = Vec::with_capacity(s.iter().product());
    for pa in 0..s[0] {
        for pb in 0..s[1] {
            for pc in 0..s[2] {
                let phase = [pa, pb, pc];
                let mut sub = ConvKernel::zeros(cout, cin, taps).with_padding(full_pad);
                let source_tap = |axis: usize, v: usize| phase[axis] + s[axis] * (taps[axis] - 1 - v);
                for o in 0..cout {
                    for c in 0..cin {
                        for va in 0..taps[0] {
                            for vb in 0..taps[1] {
                                for vc in 0..taps[2] {
                                    let (ta, tb, tc) = (source_tap(0, va), source_tap(1, vb), source_tap(2, vc));
                                    if ta >= k.size[0] || tb >= k.size[1] || tc >= k.size[2] {
                                        continue;
                                    }
                                    let idx = (((o * cin + c) * taps[0] + va) * taps[1] + vb) * taps[2] + vc;
                                    sub.weights[idx] = k.weight(c, o, ta, tb, tc);
                                }
                            }
                        }
                    }
                }
                sub_kernels.push(sub);
            }
        }
    }
    Ok(TransposedDecomposition {
        sub_kernels,
        shuffle: ShuffleFactors::new(s)?,
        crop: k.padding,
    })
}

impl<T: Scalar> TransposedDecomposition<T> {
    /// All phase kernels fused into one convolution whose output channel
    /// `ch * r + phase` feeds [`pixel_shuffle`] directly.
    pub fn fused_kernel(&self) -> ConvKernel<T> {
        let first = &self.sub_kernels[0];
        let r = self.sub_kernels.len();
        let per_out = first.in_channels * first.taps();
        let mut fused = ConvKernel::zeros(first.out_channels * r, first.in_channels, first.size)
            .with_padding(first.padding);
        for (phase, sub) in self.sub_kernels.iter().enumerate() {
            for o in 0..first.out_channels {
                let dst = (o * r + phase) * per_out;
                fused.weights[dst..dst + per_out]
                    .copy_from_slice(&sub.weights[o * per_out..(o + 1) * per_out]);
            }
        }
        fused
    }

    /// Runs the decomposed path: phase convolutions, periodic shuffle, crop.
    pub fn apply(&self, x: &Volume4<T>, output: Shape3) -> Result<Volume4<T>> {
        let stacked = conv3d(x, &self.fused_kernel())?;
        let shuffled = pixel_shuffle(&stacked, self.shuffle)?;
        shuffled.crop(self.crop, output)
    }
}

/// Spatial output extent of [`transposed_conv3d`].
pub fn transposed_extent(input: Shape3, k: &ConvKernel<impl Scalar>) -> Result<Shape3> {
    Ok(ConvGeom::transposed(input, k)?.input)
}
