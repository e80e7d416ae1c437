//! Dense `(channels, height, width)` grids and the direct-sum kernels used to
//! execute architecture graphs at desk scale.
//!
//! Every kernel is a plain loop nest in a fixed summation order, so identical
//! inputs give bit-identical outputs regardless of thread count.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Rank-3 grid stored row-major in `(c, y, x)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    shape: Shape,
    values: Vec<T>,
}

impl<T: Scalar> Grid<T> {
    pub fn new(shape: Shape, values: Vec<T>) -> Result<Self> {
        check_nonempty("grid", shape)?;
        if values.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                op: "grid",
                dim: "values",
                expected: shape.len(),
                found: values.len(),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn filled(shape: Shape, value: T) -> Result<Self> {
        check_nonempty("grid", shape)?;
        Ok(Self {
            shape,
            values: vec![value; shape.len()],
        })
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::filled(shape, T::zero())
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        check_nonempty("grid", shape)?;
        let mut values = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    values.push(f(c, y, x));
                }
            }
        }
        Ok(Self { shape, values })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.values[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(c, y, x);
        self.values[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.shape.plane();
        &self.values[c * p..(c + 1) * p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> T {
        self.values.iter().copied().sum::<T>() / T::of_usize(self.values.len())
    }

    pub fn variance(&self) -> T {
        let m = self.mean();
        self.values.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / T::of_usize(self.values.len())
    }
}

fn check_nonempty(op: &'static str, shape: Shape) -> Result<()> {
    if shape.channels == 0 || shape.height == 0 || shape.width == 0 {
        return Err(Error::invalid(op, format!("degenerate shape {shape}")));
    }
    Ok(())
}

/// Kernel placement shared by convolutions, pooling and shape inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(kernel: usize, stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            dilation,
            padding,
        }
    }

    /// `(k - 1) * r + 1`
    pub fn extent(&self) -> usize {
        (self.kernel - 1) * self.dilation + 1
    }

    /// `floor((n + 2p - (k-1)r - 1) / s) + 1`, or `None` when the window does
    /// not fit.
    pub fn output_size(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < self.extent() {
            return None;
        }
        Some((padded - self.extent()) / self.stride + 1)
    }

    /// Left crop of the full transposed-convolution output that makes the
    /// result exactly `stride * input` wide. Negative values mean padding.
    pub fn transpose_crop(&self) -> i64 {
        let total = self.extent() as i64 - self.stride as i64;
        total.div_euclid(2) + total.rem_euclid(2)
    }

    pub fn validate(&self, op: &'static str) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::invalid(
                op,
                format!(
                    "kernel, stride and dilation must be >= 1 (got k={}, s={}, r={})",
                    self.kernel, self.stride, self.dilation
                ),
            ));
        }
        Ok(())
    }
}

/// Convolution parameters. Weights are laid out `out x in x k x k` for both
/// the forward and the transposed kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvSpec<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        weights: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        geometry.validate("conv_spec")?;
        let k = geometry.kernel;
        let expected = out_channels * in_channels * k * k;
        if weights.len() != expected {
            return Err(Error::ShapeMismatch {
                op: "conv_spec",
                dim: "weights",
                expected,
                found: weights.len(),
            });
        }
        if bias.len() != out_channels {
            return Err(Error::ShapeMismatch {
                op: "conv_spec",
                dim: "bias",
                expected: out_channels,
                found: bias.len(),
            });
        }
        Ok(Self {
            in_channels,
            out_channels,
            geometry,
            weights,
            bias,
        })
    }

    /// All-ones weights and zero bias, used for impulse probing.
    pub fn ones(in_channels: usize, out_channels: usize, geometry: ConvGeometry) -> Result<Self> {
        let k = geometry.kernel;
        Self::new(
            in_channels,
            out_channels,
            geometry,
            vec![T::one(); out_channels * in_channels * k * k],
            vec![T::zero(); out_channels],
        )
    }

    #[inline]
    fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> T {
        let k = self.geometry.kernel;
        self.weights[((o * self.in_channels + i) * k + ky) * k + kx]
    }
}

/// Output index range `[lo, hi)` along one axis for which `o*s + t - p` lands
/// inside `[0, n)`, where `t` is the tap offset `kx * r`.
fn valid_range(n: usize, out: usize, stride: usize, tap: usize, padding: usize) -> (usize, usize) {
    let shift = tap as i64 - padding as i64;
    let s = stride as i64;
    // o*s + shift >= 0  =>  o >= ceil(-shift / s)
    let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
    // o*s + shift <= n - 1
    let top = n as i64 - 1 - shift;
    let hi = if top < 0 { 0 } else { (top / s + 1).min(out as i64) };
    (lo.min(out as i64) as usize, hi.max(0) as usize)
}

/// Direct-sum 2-D convolution with zero padding.
pub fn conv2d<T: Scalar>(input: &Grid<T>, spec: &ConvSpec<T>) -> Result<Grid<T>> {
    let g = spec.geometry;
    g.validate("conv2d")?;
    if g.kernel % 2 == 0 {
        return Err(Error::invalid("conv2d", format!("kernel must be odd, got {}", g.kernel)));
    }
    if input.channels() != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            dim: "channels",
            expected: spec.in_channels,
            found: input.channels(),
        });
    }
    let oh = g.output_size(input.height()).ok_or(Error::ShapeMismatch {
        op: "conv2d",
        dim: "height",
        expected: g.extent().saturating_sub(2 * g.padding),
        found: input.height(),
    })?;
    let ow = g.output_size(input.width()).ok_or(Error::ShapeMismatch {
        op: "conv2d",
        dim: "width",
        expected: g.extent().saturating_sub(2 * g.padding),
        found: input.width(),
    })?;

    let out_shape = Shape::new(spec.out_channels, oh, ow);
    let (ih, iw) = (input.height(), input.width());
    let mut values = vec![T::zero(); out_shape.len()];
    values
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(co, plane)| {
            plane.iter_mut().for_each(|v| *v = spec.bias[co]);
            for ci in 0..spec.in_channels {
                let src = input.channel(ci);
                for ky in 0..g.kernel {
                    let ty = ky * g.dilation;
                    let (y0, y1) = valid_range(ih, oh, g.stride, ty, g.padding);
                    for kx in 0..g.kernel {
                        let w = spec.weight(co, ci, ky, kx);
                        let tx = kx * g.dilation;
                        let (x0, x1) = valid_range(iw, ow, g.stride, tx, g.padding);
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ty - g.padding;
                            let row = &src[iy * iw..(iy + 1) * iw];
                            let dst = &mut plane[oy * ow..(oy + 1) * ow];
                            for ox in x0..x1 {
                                let ix = ox * g.stride + tx - g.padding;
                                dst[ox] = dst[ox] + w * row[ix];
                            }
                        }
                    }
                }
            }
        });
    Grid::new(out_shape, values)
}

/// Transposed convolution whose output is exactly `stride` times the input.
///
/// The full scatter output `(n-1)s + (k-1)r + 1` is cropped by
/// [`ConvGeometry::transpose_crop`] on the leading edge and truncated on the
/// trailing edge. For `k=3, s=2` this matches the common `padding=1,
/// output_padding=1` configuration. The `padding` field is ignored.
pub fn conv_transpose2d<T: Scalar>(input: &Grid<T>, spec: &ConvSpec<T>) -> Result<Grid<T>> {
    let g = spec.geometry;
    g.validate("conv_transpose2d")?;
    if !(1..=2).contains(&g.stride) {
        return Err(Error::invalid(
            "conv_transpose2d",
            format!("stride must be 1 or 2, got {}", g.stride),
        ));
    }
    if input.channels() != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose2d",
            dim: "channels",
            expected: spec.in_channels,
            found: input.channels(),
        });
    }
    let (ih, iw) = (input.height(), input.width());
    let (oh, ow) = (ih * g.stride, iw * g.stride);
    let crop = g.transpose_crop();
    let out_shape = Shape::new(spec.out_channels, oh, ow);
    let mut values = vec![T::zero(); out_shape.len()];
    values
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(co, plane)| {
            plane.iter_mut().for_each(|v| *v = spec.bias[co]);
            for ci in 0..spec.in_channels {
                let src = input.channel(ci);
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let w = spec.weight(co, ci, ky, kx);
                        for iy in 0..ih {
                            let y = (iy * g.stride + ky * g.dilation) as i64 - crop;
                            if y < 0 || y >= oh as i64 {
                                continue;
                            }
                            let y = y as usize;
                            for ix in 0..iw {
                                let x = (ix * g.stride + kx * g.dilation) as i64 - crop;
                                if x < 0 || x >= ow as i64 {
                                    continue;
                                }
                                let x = x as usize;
                                plane[y * ow + x] = plane[y * ow + x] + w * src[iy * iw + ix];
                            }
                        }
                    }
                }
            }
        });
    Grid::new(out_shape, values)
}

/// Channel-to-space rearrangement:
/// `out[c, y*f + i, x*f + j] = in[c*f*f + i*f + j, y, x]`.
pub fn pixel_shuffle<T: Scalar>(input: &Grid<T>, factor: usize) -> Result<Grid<T>> {
    if factor == 0 {
        return Err(Error::invalid("pixel_shuffle", "factor must be >= 1"));
    }
    let f2 = factor * factor;
    if input.channels() % f2 != 0 {
        return Err(Error::invalid(
            "pixel_shuffle",
            format!("{} channels not divisible by {f2}", input.channels()),
        ));
    }
    let (c_out, h, w) = (input.channels() / f2, input.height(), input.width());
    Grid::from_fn(Shape::new(c_out, h * factor, w * factor), |c, y, x| {
        let (i, j) = (y % factor, x % factor);
        input.get(c * f2 + i * factor + j, y / factor, x / factor)
    })
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(input: &Grid<T>, factor: usize) -> Result<Grid<T>> {
    if factor == 0 || input.height() % factor != 0 || input.width() % factor != 0 {
        return Err(Error::invalid(
            "pixel_unshuffle",
            format!("spatial size {} not divisible by {factor}", input.shape()),
        ));
    }
    let f2 = factor * factor;
    let shape = Shape::new(
        input.channels() * f2,
        input.height() / factor,
        input.width() / factor,
    );
    Grid::from_fn(shape, |c, y, x| {
        let (base, sub) = (c / f2, c % f2);
        let (i, j) = (sub / factor, sub % factor);
        input.get(base, y * factor + i, x * factor + j)
    })
}

pub fn concat_channels<T: Scalar>(inputs: &[&Grid<T>]) -> Result<Grid<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
    let (h, w) = (first.height(), first.width());
    let mut values = Vec::new();
    let mut channels = 0;
    for g in inputs {
        if g.height() != h {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                dim: "height",
                expected: h,
                found: g.height(),
            });
        }
        if g.width() != w {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                dim: "width",
                expected: w,
                found: g.width(),
            });
        }
        channels += g.channels();
        values.extend_from_slice(g.values());
    }
    Grid::new(Shape::new(channels, h, w), values)
}

/// Channels `[start, start + len)`.
pub fn slice_channels<T: Scalar>(input: &Grid<T>, start: usize, len: usize) -> Result<Grid<T>> {
    if len == 0 || start + len > input.channels() {
        return Err(Error::invalid(
            "slice_channels",
            format!("range {start}..{} out of {} channels", start + len, input.channels()),
        ));
    }
    let p = input.shape().plane();
    Grid::new(
        Shape::new(len, input.height(), input.width()),
        input.values()[start * p..(start + len) * p].to_vec(),
    )
}

pub fn add_elementwise<T: Scalar>(a: &Grid<T>, b: &Grid<T>) -> Result<Grid<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    for (dim, x, y) in [
        ("channels", sa.channels, sb.channels),
        ("height", sa.height, sb.height),
        ("width", sa.width, sb.width),
    ] {
        if x != y {
            return Err(Error::ShapeMismatch {
                op: "add_elementwise",
                dim,
                expected: x,
                found: y,
            });
        }
    }
    Grid::new(
        sa,
        a.values().iter().zip(b.values()).map(|(&x, &y)| x + y).collect(),
    )
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::lit(20.0) {
        x
    } else if x < T::lit(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `x * tanh(softplus(x))`
pub fn mish_scalar<T: Scalar>(x: T) -> T {
    x * softplus(x).tanh()
}

pub fn mish<T: Scalar>(input: &Grid<T>) -> Grid<T> {
    input.map(mish_scalar)
}

pub fn relu<T: Scalar>(input: &Grid<T>) -> Grid<T> {
    input.map(|v| v.max(T::zero()))
}

/// Per-channel `scale * x + shift`; batch normalization in inference mode.
pub fn channel_affine<T: Scalar>(input: &Grid<T>, scale: &[T], shift: &[T]) -> Result<Grid<T>> {
    for (dim, n) in [("scale", scale.len()), ("shift", shift.len())] {
        if n != input.channels() {
            return Err(Error::ShapeMismatch {
                op: "channel_affine",
                dim,
                expected: input.channels(),
                found: n,
            });
        }
    }
    let p = input.shape().plane();
    let values = input
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| scale[i / p] * v + shift[i / p])
        .collect();
    Grid::new(input.shape(), values)
}

/// Max pooling; padded cells never win.
pub fn max_pool2d<T: Scalar>(input: &Grid<T>, geometry: ConvGeometry) -> Result<Grid<T>> {
    geometry.validate("max_pool2d")?;
    let oh = geometry
        .output_size(input.height())
        .ok_or_else(|| Error::invalid("max_pool2d", "window larger than padded input"))?;
    let ow = geometry
        .output_size(input.width())
        .ok_or_else(|| Error::invalid("max_pool2d", "window larger than padded input"))?;
    let g = geometry;
    Grid::from_fn(Shape::new(input.channels(), oh, ow), |c, oy, ox| {
        let mut best = T::neg_infinity();
        for ky in 0..g.kernel {
            let iy = (oy * g.stride + ky * g.dilation) as i64 - g.padding as i64;
            if iy < 0 || iy >= input.height() as i64 {
                continue;
            }
            for kx in 0..g.kernel {
                let ix = (ox * g.stride + kx * g.dilation) as i64 - g.padding as i64;
                if ix < 0 || ix >= input.width() as i64 {
                    continue;
                }
                best = best.max(input.get(c, iy as usize, ix as usize));
            }
        }
        best
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(c: usize, h: usize, w: usize, values: &[f64]) -> Grid<f64> {
        Grid::new(Shape::new(c, h, w), values.to_vec()).unwrap()
    }

    #[test]
    fn ones_conv_center_sums_neighbourhood() {
        let input = Grid::filled(Shape::new(1, 3, 3), 1.0).unwrap();
        let spec = ConvSpec::ones(1, 1, ConvGeometry::new(3, 1, 1, 1)).unwrap();
        let out = conv2d(&input, &spec).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 3, 3));
        assert_eq!(out.get(0, 1, 1), 9.0);
        assert_eq!(out.get(0, 0, 0), 4.0);
    }

    #[test]
    fn dilated_delta_hits_only_even_offsets() {
        let mut input = Grid::zeros(Shape::new(1, 7, 7)).unwrap();
        input.set(0, 3, 3, 1.0);
        let spec = ConvSpec::ones(1, 1, ConvGeometry::new(3, 1, 2, 2)).unwrap();
        let out = conv2d(&input, &spec).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 7, 7));
        for y in 0..7 {
            for x in 0..7 {
                let dy = y as i64 - 3;
                let dx = x as i64 - 3;
                let expected = dy.abs() <= 2 && dx.abs() <= 2 && dy % 2 == 0 && dx % 2 == 0;
                assert_eq!(out.get(0, y, x) != 0.0, expected, "({y},{x})");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Grid::<f64>::zeros(Shape::new(2, 4, 4)).unwrap();
        let spec = ConvSpec::ones(3, 1, ConvGeometry::new(3, 1, 1, 1)).unwrap();
        match conv2d(&input, &spec) {
            Err(Error::ShapeMismatch { dim, expected, found, .. }) => {
                assert_eq!((dim, expected, found), ("channels", 3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conv_rejects_window_larger_than_input() {
        let input = Grid::<f64>::zeros(Shape::new(1, 2, 2)).unwrap();
        let spec = ConvSpec::ones(1, 1, ConvGeometry::new(3, 1, 2, 0)).unwrap();
        assert!(matches!(
            conv2d(&input, &spec),
            Err(Error::ShapeMismatch { dim: "height", .. })
        ));
    }

    #[test]
    fn stride_four_chain_reaches_128() {
        // stem conv (s2) + pool (s2) as in the backbone
        let input = Grid::<f64>::zeros(Shape::new(1, 512, 512)).unwrap();
        let stem = ConvSpec::ones(1, 1, ConvGeometry::new(7, 2, 1, 3)).unwrap();
        let x = conv2d(&input, &stem).unwrap();
        let x = max_pool2d(&x, ConvGeometry::new(3, 2, 1, 1)).unwrap();
        assert_eq!((x.height(), x.width()), (128, 128));
    }

    #[test]
    fn transpose_doubles_and_scatters_blocks() {
        let input = Grid::<f64>::filled(Shape::new(1, 4, 4), 0.0).unwrap();
        let spec = ConvSpec::ones(1, 1, ConvGeometry::new(2, 2, 1, 0)).unwrap();
        let out = conv_transpose2d(&input, &spec).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 8, 8));
        assert!(out.values().iter().all(|&v| v == 0.0));

        let mut delta = input.clone();
        delta.set(0, 1, 2, 1.0);
        let out = conv_transpose2d(&delta, &spec).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let inside = (2..4).contains(&y) && (4..6).contains(&x);
                assert_eq!(out.get(0, y, x), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn transpose_k3_matches_padding_one_output_padding_one() {
        let mut delta = Grid::<f64>::zeros(Shape::new(1, 3, 3)).unwrap();
        delta.set(0, 1, 1, 1.0);
        let spec = ConvSpec::ones(1, 1, ConvGeometry::new(3, 2, 1, 0)).unwrap();
        let out = conv_transpose2d(&delta, &spec).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 6, 6));
        // full output index 2*1 + {0,1,2} shifted left by 1
        for y in 0..6 {
            for x in 0..6 {
                let inside = (1..=3).contains(&y) && (1..=3).contains(&x);
                assert_eq!(out.get(0, y, x) != 0.0, inside);
            }
        }
    }

    #[test]
    fn transpose_rejects_stride_three() {
        let input = Grid::<f64>::zeros(Shape::new(1, 2, 2)).unwrap();
        let spec = ConvSpec::ones(1, 1, ConvGeometry::new(3, 3, 1, 0)).unwrap();
        assert!(matches!(
            conv_transpose2d(&input, &spec),
            Err(Error::InvalidArgument { .. })
        ));
    }

    #[test]
    fn shuffle_4x2x2_to_1x4x4() {
        let input = grid(4, 2, 2, &(0..16).map(f64::from).collect::<Vec<_>>());
        let out = pixel_shuffle(&input, 2).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 4, 4));
        // row 0: c0(0,0) c1(0,0) c0(0,1) c1(0,1)
        assert_eq!(&out.values()[..4], &[0.0, 4.0, 1.0, 5.0]);
        let mut sorted = out.values().to_vec();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, input.values());
        assert_eq!(pixel_unshuffle(&out, 2).unwrap(), input);
    }

    #[test]
    fn shuffle_8x3x3_matches_index_map() {
        let input = Grid::from_fn(Shape::new(8, 3, 3), |c, y, x| (c * 100 + y * 10 + x) as f64).unwrap();
        let out = pixel_shuffle(&input, 2).unwrap();
        assert_eq!(out.shape(), Shape::new(2, 6, 6));
        // enumerate source cells and where they must land
        for c in 0..8 {
            for y in 0..3 {
                for x in 0..3 {
                    let (oc, sub) = (c / 4, c % 4);
                    let (oy, ox) = (y * 2 + sub / 2, x * 2 + sub % 2);
                    assert_eq!(out.get(oc, oy, ox), input.get(c, y, x));
                }
            }
        }
    }

    #[test]
    fn shuffle_rejects_indivisible_channels() {
        let input = Grid::<f64>::zeros(Shape::new(3, 2, 2)).unwrap();
        assert!(pixel_shuffle(&input, 2).is_err());
    }

    #[test]
    fn concat_and_slice() {
        let a = grid(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = grid(3, 2, 2, &[5.0; 12]);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(4, 2, 2));
        assert_eq!(slice_channels(&cat, 0, 1).unwrap(), a);
        assert_eq!(slice_channels(&cat, 1, 3).unwrap(), b);

        let c = grid(1, 3, 2, &[0.0; 6]);
        assert!(matches!(
            concat_channels(&[&a, &c]),
            Err(Error::ShapeMismatch { dim: "height", .. })
        ));
    }

    #[test]
    fn add_scalar_and_mismatch() {
        let a = grid(1, 1, 1, &[5.0]);
        let b = grid(1, 1, 1, &[7.0]);
        assert_eq!(add_elementwise(&a, &b).unwrap().values(), &[12.0]);
        let z = grid(1, 1, 2, &[0.0, 0.0]);
        assert!(add_elementwise(&a, &z).is_err());
    }

    #[test]
    fn mish_values() {
        assert_eq!(mish_scalar(0.0f64), 0.0);
        assert!((mish_scalar(20.0f64) - 20.0).abs() < 1e-6);
        let mut prev = mish_scalar(0.0f64);
        for i in 1..=400 {
            let v = mish_scalar(i as f64 * 0.05);
            assert!(v > prev);
            prev = v;
        }
        assert!(mish_scalar(-1000.0f64).abs() < 1e-12);
        assert!(mish_scalar(1000.0f32).is_finite());
    }

    #[test]
    fn affine_and_pool() {
        let a = grid(2, 1, 2, &[1.0, 2.0, 3.0, 4.0]);
        let out = channel_affine(&a, &[2.0, 0.5], &[1.0, 0.0]).unwrap();
        assert_eq!(out.values(), &[3.0, 5.0, 1.5, 2.0]);

        let p = grid(1, 2, 2, &[-1.0, -5.0, -3.0, -2.0]);
        let pooled = max_pool2d(&p, ConvGeometry::new(3, 2, 1, 1)).unwrap();
        assert_eq!(pooled.values(), &[-1.0]);
    }
}
