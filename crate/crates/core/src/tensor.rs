//! Dense single-frame tensors and the kernels the codec network is built from.
//!
//! Storage is row-major `(c, h, w)` with no batch dimension. The element type
//! selects the arithmetic mode: `f32` for the real-valued path and `i16` for
//! the integerized path (see [`crate::integer`]).

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Below this many multiply-accumulates a convolution runs on the calling
/// thread; rayon scheduling costs more than it saves on tiny latents.
const PAR_MIN_MACS: usize = 1 << 17;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Copy> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::invalid(format!(
                "tensor {shape} needs {} scalars, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.c {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.shape.h + y) * self.shape.w + x]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_with<U: Copy, V: Copy>(
        &self,
        other: &Tensor<U>,
        f: impl Fn(T, U) -> V,
    ) -> Result<Tensor<V>> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "shape mismatch: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Top-left `h x w` window of every channel.
    pub fn crop(&self, h: usize, w: usize) -> Result<Tensor<T>> {
        if h > self.shape.h || w > self.shape.w {
            return Err(Error::invalid(format!(
                "cannot crop {} to {h}x{w}",
                self.shape
            )));
        }
        if h == self.shape.h && w == self.shape.w {
            return Ok(self.clone());
        }
        Ok(Tensor::from_fn(Shape::new(self.shape.c, h, w), |c, y, x| {
            self.get(c, y, x)
        }))
    }
}

impl<T: Copy + Default> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor::filled(shape, T::default())
    }
}

/// Geometry of one convolution layer. `groups` is either 1 (dense) or equal
/// to `in_channels` (depth-wise, one filter per channel).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn dense(in_channels: usize, out_channels: usize, k: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: 1,
            padding: k / 2,
            groups: 1,
        }
    }

    pub const fn depthwise(channels: usize, k: usize) -> Self {
        ConvSpec {
            in_channels: channels,
            out_channels: channels,
            kernel: (k, k),
            stride: 1,
            padding: k / 2,
            groups: channels,
        }
    }

    pub const fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if self.in_channels == 0 || self.out_channels == 0 || kh == 0 || kw == 0 {
            return Err(Error::invalid(format!("degenerate conv spec {self:?}")));
        }
        if self.stride == 0 {
            return Err(Error::invalid("conv stride must be positive"));
        }
        let depthwise = self.groups == self.in_channels && self.groups > 1;
        if self.groups != 1 && !depthwise {
            return Err(Error::invalid(format!(
                "groups must be 1 or in_channels, got {}",
                self.groups
            )));
        }
        if depthwise && self.out_channels != self.in_channels {
            return Err(Error::invalid(
                "depth-wise conv requires out_channels == in_channels",
            ));
        }
        Ok(())
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_per_group() * self.kernel.0 * self.kernel.1
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < kh || pw < kw {
            return Err(Error::invalid(format!(
                "input {h}x{w} too small for kernel {kh}x{kw} with padding {}",
                self.padding
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels {
            return Err(Error::invalid(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, input.c
            )));
        }
        let (oh, ow) = self.output_dims(input.h, input.w)?;
        Ok(Shape::new(self.out_channels, oh, ow))
    }

    /// Multiply-accumulate count for one application to `input`.
    pub fn macs(&self, input: Shape) -> Result<usize> {
        let out = self.output_shape(input)?;
        Ok(out.len() * self.in_per_group() * self.kernel.0 * self.kernel.1)
    }
}

/// Scalar types the convolution loop can run on, with their accumulator.
pub(crate) trait MacScalar: Copy + Send + Sync {
    type Acc: Copy + Send + Sync;
    fn mac(acc: &mut Self::Acc, x: Self, w: Self);
}

impl MacScalar for f32 {
    type Acc = f32;
    #[inline(always)]
    fn mac(acc: &mut f32, x: f32, w: f32) {
        *acc += x * w;
    }
}

impl MacScalar for i16 {
    type Acc = i32;
    #[inline(always)]
    fn mac(acc: &mut i32, x: i16, w: i16) {
        // Overflow panics in debug builds; the int32 accumulator is assumed
        // wide enough for every layer of the codec.
        *acc += x as i32 * w as i32;
    }
}

/// Raw convolution accumulators. Each output element sums its taps in a fixed
/// order (input channel, then kernel row, then kernel column), so splitting
/// the work across threads by output channel cannot change the result.
pub(crate) fn conv_accumulate<T: MacScalar>(
    input: &Tensor<T>,
    weights: &[T],
    spec: &ConvSpec,
    init: impl Fn(usize) -> T::Acc + Sync,
) -> Result<(Shape, Vec<T::Acc>)> {
    spec.validate()?;
    let out_shape = spec.output_shape(input.shape())?;
    if weights.len() != spec.weight_len() {
        return Err(Error::invalid(format!(
            "conv weights: expected {}, got {}",
            spec.weight_len(),
            weights.len()
        )));
    }
    let in_shape = input.shape();
    let (kh, kw) = spec.kernel;
    let cin_pg = spec.in_per_group();
    let plane = out_shape.plane();
    let (oh, ow) = (out_shape.h, out_shape.w);
    let stride = spec.stride;
    let pad = spec.padding;
    let src = input.data();

    let fill_channel = |o: usize, acc: &mut [T::Acc]| {
        let a0 = init(o);
        acc.iter_mut().for_each(|a| *a = a0);
        let first_in = if spec.groups == 1 { 0 } else { o };
        for ii in 0..cin_pg {
            let ic = first_in + ii;
            let chan = &src[ic * in_shape.plane()..(ic + 1) * in_shape.plane()];
            if (kh, kw, stride, pad) == (1, 1, 1, 0) {
                let w = weights[o * cin_pg + ii];
                for (a, &x) in acc.iter_mut().zip(chan) {
                    T::mac(a, x, w);
                }
                continue;
            }
            for ky in 0..kh {
                for kx in 0..kw {
                    let w = weights[((o * cin_pg + ii) * kh + ky) * kw + kx];
                    // Output columns whose tap lands inside the input row.
                    let ox_lo = if pad > kx { (pad - kx).div_ceil(stride) } else { 0 };
                    let ox_hi = (in_shape.w + pad).checked_sub(kx + 1).map(|v| v / stride);
                    let Some(ox_hi) = ox_hi else { continue };
                    let ox_hi = ox_hi.min(ow - 1);
                    if ox_lo > ox_hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= in_shape.h {
                            continue;
                        }
                        let row = &chan[iy as usize * in_shape.w..(iy as usize + 1) * in_shape.w];
                        let out_row = &mut acc[oy * ow..(oy + 1) * ow];
                        let ix0 = ox_lo * stride + kx - pad;
                        if stride == 1 {
                            let n = ox_hi - ox_lo + 1;
                            for (a, &x) in out_row[ox_lo..=ox_hi].iter_mut().zip(&row[ix0..ix0 + n]) {
                                T::mac(a, x, w);
                            }
                        } else {
                            for (k, a) in out_row[ox_lo..=ox_hi].iter_mut().enumerate() {
                                T::mac(a, row[ix0 + k * stride], w);
                            }
                        }
                    }
                }
            }
        }
    };

    let mut out: Vec<T::Acc> = vec![init(0); out_shape.len()];
    let macs = out_shape.len() * cin_pg * kh * kw;
    if macs >= PAR_MIN_MACS && out_shape.c > 1 {
        out.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(o, acc)| fill_channel(o, acc));
    } else {
        out.chunks_mut(plane)
            .enumerate()
            .for_each(|(o, acc)| fill_channel(o, acc));
    }
    Ok((out_shape, out))
}

/// Real-valued cross-correlation with zero padding.
///
/// `weights` is laid out `[out][in / groups][kh][kw]`.
pub fn conv2d(input: &Tensor<f32>, weights: &[f32], bias: &[f32], spec: &ConvSpec) -> Result<Tensor<f32>> {
    if bias.len() != spec.out_channels {
        return Err(Error::invalid(format!(
            "conv bias: expected {}, got {}",
            spec.out_channels,
            bias.len()
        )));
    }
    let (shape, data) = conv_accumulate(input, weights, spec, |o| bias[o])?;
    Tensor::new(shape, data)
}

/// Folds each `r x r` spatial block into `r^2` channels (raster order within
/// the block), producing `(c * r^2, h / r, w / r)`.
pub fn space_to_depth<T: Copy>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if r == 0 || !s.h.is_multiple_of(r) || !s.w.is_multiple_of(r) {
        return Err(Error::invalid(format!(
            "space_to_depth: {s} not divisible by {r}; pad first"
        )));
    }
    let out = Shape::new(s.c * r * r, s.h / r, s.w / r);
    Ok(Tensor::from_fn(out, |oc, y, x| {
        let c = oc / (r * r);
        let dy = (oc / r) % r;
        let dx = oc % r;
        input.get(c, y * r + dy, x * r + dx)
    }))
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<T: Copy>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if r == 0 || !s.c.is_multiple_of(r * r) {
        return Err(Error::invalid(format!(
            "depth_to_space: {} channels not divisible by {}",
            s.c,
            r * r
        )));
    }
    let out = Shape::new(s.c / (r * r), s.h * r, s.w * r);
    Ok(Tensor::from_fn(out, |c, y, x| {
        input.get(c * r * r + (y % r) * r + x % r, y / r, x / r)
    }))
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Weighted SiLU, `x * sigmoid(alpha * x)`.
pub fn wsilu(input: &Tensor<f32>, alpha: f32) -> Tensor<f32> {
    input.map(|x| x * sigmoid(alpha * x))
}

/// Splits along channels into equal halves.
pub fn chunk2<T: Copy>(input: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = input.shape();
    if !s.c.is_multiple_of(2) {
        return Err(Error::invalid(format!("chunk2 needs even channels, got {}", s.c)));
    }
    let half = Shape::new(s.c / 2, s.h, s.w);
    let (a, b) = input.data().split_at(half.len());
    Ok((Tensor::new(half, a.to_vec())?, Tensor::new(half, b.to_vec())?))
}

pub fn concat_channels<T: Copy>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.h != sb.h || sa.w != sb.w {
        return Err(Error::invalid(format!("concat: spatial mismatch {sa} vs {sb}")));
    }
    let mut data = Vec::with_capacity(sa.len() + sb.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(Shape::new(sa.c + sb.c, sa.h, sa.w), data)
}

/// Multiplies every channel by its own factor.
pub fn channel_scale(input: &Tensor<f32>, scale: &[f32]) -> Result<Tensor<f32>> {
    let s = input.shape();
    if scale.len() != s.c {
        return Err(Error::invalid(format!(
            "channel_scale: {} factors for {} channels",
            scale.len(),
            s.c
        )));
    }
    let plane = s.plane();
    let data = input
        .data()
        .chunks(plane.max(1))
        .zip(scale)
        .flat_map(|(ch, &k)| ch.iter().map(move |&v| v * k))
        .collect();
    Tensor::new(s, data)
}
