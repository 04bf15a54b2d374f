//! Training-free int16 execution of the real-valued network.
//!
//! Features map to int16 with scale `K1` (1.0 becomes 512), weights and biases
//! with scale `K2` (8192). A convolution accumulates `x_i * w_i` in int32,
//! adds `b_i * K1`, and divides by `K2` with round-half-away-from-zero before
//! clipping to int16. Non-linearities go through 65536-entry lookup tables
//! indexed by the int16 input, so every operation is exact integer math and the
//! result is identical on every machine and for every thread count.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{conv_accumulate, ConvSpec, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantScheme {
    /// Feature scale.
    pub k1: i32,
    /// Weight scale.
    pub k2: i32,
}

impl Default for QuantScheme {
    fn default() -> Self {
        QuantScheme { k1: 512, k2: 8192 }
    }
}

impl QuantScheme {
    /// Real interval representable by an int16 feature, `[-32768/K1, 32767/K1]`.
    pub fn feature_range(&self) -> (f64, f64) {
        (
            i16::MIN as f64 / self.k1 as f64,
            i16::MAX as f64 / self.k1 as f64,
        )
    }

    pub fn dequantize(&self, v: i16) -> f64 {
        v as f64 / self.k1 as f64
    }
}

#[inline]
pub fn saturate_i16(v: i64) -> i16 {
    v.clamp(i16::MIN as i64, i16::MAX as i64) as i16
}

/// `round(a / d)` with ties away from zero, for `d > 0`.
#[inline]
pub fn round_div(a: i64, d: i64) -> i64 {
    debug_assert!(d > 0);
    if a >= 0 {
        (2 * a + d) / (2 * d)
    } else {
        -((-2 * a + d) / (2 * d))
    }
}

/// `round(scale * v)` clipped to int16. `f64::round` already rounds ties away
/// from zero.
pub fn quantize_scaled(v: f64, scale: i32) -> i16 {
    let r = (v * scale as f64).round();
    if r.is_nan() {
        return 0;
    }
    r.clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Feature quantization, `round(K1 * v)` saturated to int16.
pub fn quantize_value(v: f64, scheme: QuantScheme) -> i16 {
    quantize_scaled(v, scheme.k1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLayer {
    pub spec: ConvSpec,
    pub weight: Vec<i16>,
    pub bias: Vec<i16>,
    /// `max |w_i / K2 - w_f|` over weights and biases.
    pub max_error: f64,
    /// Number of weights or biases that hit the int16 limits.
    pub saturated: usize,
}

/// Converts real weights with `w_i = round(K2 * w_f)`.
///
/// Values with `|w_f| >= 32768 / K2` cannot be represented; they are clipped,
/// counted in `saturated`, and logged.
pub fn quantize_layer(
    weight: &[f32],
    bias: &[f32],
    spec: &ConvSpec,
    scheme: QuantScheme,
) -> Result<QuantizedLayer> {
    spec.validate()?;
    if weight.len() != spec.weight_len() || bias.len() != spec.out_channels {
        return Err(Error::invalid(format!(
            "layer {spec:?}: got {} weights / {} biases",
            weight.len(),
            bias.len()
        )));
    }
    if let Some(bad) = weight.iter().chain(bias).find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite weight {bad}")));
    }
    let k2 = scheme.k2 as f64;
    let mut max_error = 0.0f64;
    let mut saturated = 0;
    let mut convert = |vals: &[f32]| -> Vec<i16> {
        vals.iter()
            .map(|&v| {
                let q = quantize_scaled(v as f64, scheme.k2);
                let exact = (v as f64 * k2).round();
                if exact != q as f64 {
                    saturated += 1;
                }
                max_error = max_error.max((q as f64 / k2 - v as f64).abs());
                q
            })
            .collect()
    };
    let w = convert(weight);
    let b = convert(bias);
    if saturated > 0 {
        log::warn!(
            "{saturated} parameter(s) of a {}x{} layer exceed the int16 range at K2={} and were clipped",
            spec.in_channels,
            spec.out_channels,
            scheme.k2
        );
    }
    Ok(QuantizedLayer {
        spec: *spec,
        weight: w,
        bias: b,
        max_error,
        saturated,
    })
}

/// Clipped-output counter shared by the int16 kernels.
#[derive(Debug, Default)]
pub struct SaturationCounter(AtomicUsize);

impl SaturationCounter {
    pub fn add(&self, n: usize) {
        if n > 0 {
            self.0.fetch_add(n, Ordering::Relaxed);
        }
    }

    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }
}

fn rescale_clip(acc: &[i32], divisor: i64, counter: Option<&SaturationCounter>) -> Vec<i16> {
    let mut clipped = 0;
    let out = acc
        .iter()
        .map(|&a| {
            let v = round_div(a as i64, divisor);
            if v < i16::MIN as i64 || v > i16::MAX as i64 {
                clipped += 1;
            }
            saturate_i16(v)
        })
        .collect();
    if let Some(c) = counter {
        c.add(clipped);
    }
    out
}

/// Integer convolution: `clip(round((conv(x_i, w_i) + b_i * K1) / K2))`.
pub fn qconv(x: &Tensor<i16>, layer: &QuantizedLayer, scheme: QuantScheme) -> Result<Tensor<i16>> {
    qconv_counted(x, layer, scheme, None)
}

pub fn qconv_counted(
    x: &Tensor<i16>,
    layer: &QuantizedLayer,
    scheme: QuantScheme,
    counter: Option<&SaturationCounter>,
) -> Result<Tensor<i16>> {
    let k1 = scheme.k1;
    let (shape, acc) = conv_accumulate(x, &layer.weight, &layer.spec, |o| layer.bias[o] as i32 * k1)?;
    Tensor::new(shape, rescale_clip(&acc, scheme.k2 as i64, counter))
}

/// Lookup table over the whole int16 domain: `table[v] = round(K1 * f(v / K1))`.
#[derive(Clone)]
pub struct Lut16 {
    table: Box<[i16]>,
}

pub type SigmoidLut = Lut16;

impl std::fmt::Debug for Lut16 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Lut16").field("len", &self.table.len()).finish()
    }
}

impl Lut16 {
    pub fn build(scheme: QuantScheme, f: impl Fn(f64) -> f64) -> Self {
        let k1 = scheme.k1 as f64;
        let table = (i16::MIN as i32..=i16::MAX as i32)
            .map(|v| quantize_scaled(f(v as f64 / k1), scheme.k1))
            .collect::<Vec<_>>()
            .into_boxed_slice();
        Lut16 { table }
    }

    #[inline]
    pub fn get(&self, v: i16) -> i16 {
        self.table[(v as i32 - i16::MIN as i32) as usize]
    }

    pub fn entries(&self) -> impl Iterator<Item = (i16, i16)> + '_ {
        (i16::MIN..=i16::MAX).map(move |v| (v, self.get(v)))
    }
}

pub fn build_sigmoid_lut(scheme: QuantScheme) -> SigmoidLut {
    Lut16::build(scheme, |t| 1.0 / (1.0 + (-t).exp()))
}

/// `ln(1 + e^t)`, the positive mapping for predicted scales.
pub fn build_softplus_lut(scheme: QuantScheme) -> Lut16 {
    Lut16::build(scheme, |t| t.max(0.0) + (-t.abs()).exp().ln_1p())
}

/// Integer WSiLU: `t = sat16(alpha * x)`, `out = round(x * sigmoid_lut[t] / K1)`.
pub fn qwsilu(x: &Tensor<i16>, alpha: i32, lut: &SigmoidLut, scheme: QuantScheme) -> Tensor<i16> {
    let k1 = scheme.k1 as i64;
    x.map(|v| {
        let t = saturate_i16(alpha as i64 * v as i64);
        saturate_i16(round_div(v as i64 * lut.get(t) as i64, k1))
    })
}

/// Integer gate `a * sigmoid(b)`.
pub fn qgate(a: &Tensor<i16>, b: &Tensor<i16>, lut: &SigmoidLut, scheme: QuantScheme) -> Result<Tensor<i16>> {
    let k1 = scheme.k1 as i64;
    a.zip_with(b, |p, q| saturate_i16(round_div(p as i64 * lut.get(q) as i64, k1)))
}

pub fn qadd(a: &Tensor<i16>, b: &Tensor<i16>) -> Result<Tensor<i16>> {
    a.zip_with(b, |p, q| p.saturating_add(q))
}

/// Quantizes a per-channel scale vector with `K2`.
pub fn quantize_scale_vector(scale: &[f32], scheme: QuantScheme) -> Vec<i16> {
    scale.iter().map(|&v| quantize_scaled(v as f64, scheme.k2)).collect()
}

/// Channel scaling as a 1x1 depth-wise integer convolution without bias:
/// `clip(round(x_i * s_i / K2))`.
pub fn qchannel_scale(x: &Tensor<i16>, scale_q: &[i16], scheme: QuantScheme) -> Result<Tensor<i16>> {
    let s = x.shape();
    if scale_q.len() != s.c {
        return Err(Error::invalid(format!(
            "channel scale: {} factors for {} channels",
            scale_q.len(),
            s.c
        )));
    }
    let k2 = scheme.k2 as i64;
    let plane = s.plane().max(1);
    let data = x
        .data()
        .chunks(plane)
        .zip(scale_q)
        .flat_map(|(ch, &k)| ch.iter().map(move |&v| saturate_i16(round_div(v as i64 * k as i64, k2))))
        .collect();
    Tensor::new(s, data)
}

pub fn quantize_tensor(x: &Tensor<f32>, scheme: QuantScheme) -> Tensor<i16> {
    x.map(|v| quantize_value(v as f64, scheme))
}

pub fn dequantize_tensor(x: &Tensor<i16>, scheme: QuantScheme) -> Tensor<f32> {
    let k1 = scheme.k1 as f32;
    x.map(|v| v as f32 / k1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d, wsilu, Shape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const S: QuantScheme = QuantScheme { k1: 512, k2: 8192 };

    #[test]
    fn quantize_value_examples() {
        assert_eq!(quantize_value(1.0, S), 512);
        assert_eq!(quantize_value(0.0, S), 0);
        assert_eq!(quantize_value(100.0, S), 32767);
        assert_eq!(quantize_value(-100.0, S), -32768);
        assert_eq!(quantize_value(1.0 / 1024.0, S), 1);
        assert_eq!(quantize_value(-1.0 / 1024.0, S), -1);
        let (lo, hi) = S.feature_range();
        assert_eq!(lo, -64.0);
        assert!((hi - 63.998).abs() < 0.001);
    }

    #[test]
    fn round_div_ties_away() {
        assert_eq!(round_div(3, 2), 2);
        assert_eq!(round_div(-3, 2), -2);
        assert_eq!(round_div(5, 4), 1);
        assert_eq!(round_div(-5, 4), -1);
        assert_eq!(round_div(4096, 8192), 1);
        assert_eq!(round_div(4095, 8192), 0);
        assert_eq!(round_div(-4096, 8192), -1);
        assert_eq!(round_div(7, 3), 2);
        assert_eq!(round_div(-7, 3), -2);
    }

    #[test]
    fn quantize_layer_examples() {
        let spec = ConvSpec::dense(1, 3, 1);
        let q = quantize_layer(&[0.5, 0.0, 1.0 / 16384.0], &[0.0; 3], &spec, S).unwrap();
        assert_eq!(q.weight, vec![4096, 0, 1]);
        assert_eq!(q.saturated, 0);
        assert!(q.max_error <= 0.5 / 8192.0 + 1e-12);

        let q = quantize_layer(&[4.0, -5.0, 1.0], &[0.0; 3], &spec, S).unwrap();
        assert_eq!(q.weight, vec![32767, -32768, 8192]);
        assert_eq!(q.saturated, 2);

        assert!(quantize_layer(&[0.0; 2], &[0.0; 3], &spec, S).is_err());
        assert!(quantize_layer(&[f32::NAN, 0.0, 0.0], &[0.0; 3], &spec, S).is_err());
    }

    #[test]
    fn qconv_worked_examples() {
        let spec = ConvSpec::dense(1, 1, 1);
        let x = Tensor::new(Shape::new(1, 1, 1), vec![512i16]).unwrap();
        let layer = quantize_layer(&[0.5], &[0.0], &spec, S).unwrap();
        assert_eq!(qconv(&x, &layer, S).unwrap().data(), &[256]);

        let layer = quantize_layer(&[0.0], &[1.0], &spec, S).unwrap();
        assert_eq!(layer.bias, vec![8192]);
        assert_eq!(qconv(&x, &layer, S).unwrap().data(), &[512]);

        let zero = Tensor::new(Shape::new(1, 2, 2), vec![0i16; 4]).unwrap();
        let layer = quantize_layer(&[0.75], &[0.0], &spec, S).unwrap();
        assert_eq!(qconv(&zero, &layer, S).unwrap().data(), &[0; 4]);
    }

    #[test]
    fn qconv_saturates() {
        let spec = ConvSpec::dense(1, 1, 1);
        let x = Tensor::new(Shape::new(1, 1, 2), vec![32767i16, -32768]).unwrap();
        let layer = quantize_layer(&[3.0], &[0.0], &spec, S).unwrap();
        let counter = SaturationCounter::default();
        let y = qconv_counted(&x, &layer, S, Some(&counter)).unwrap();
        assert_eq!(y.data(), &[32767, -32768]);
        assert_eq!(counter.get(), 2);
    }

    #[test]
    fn qconv_tracks_real_conv() {
        // Error budget per output: each product carries weight rounding
        // |x| * 1/(2 K2); the final division adds 1/(2 K1). With |x| <= 1,
        // 3x3 taps and up to 32 inputs that is <= 288/16384 + 1/1024 ~ 0.0186
        // worst case; random signs make the observed error far smaller, and
        // 0.01 is asserted.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &(cin, cout) in &[(4usize, 4usize), (16, 8), (32, 32)] {
            let spec = ConvSpec::dense(cin, cout, 3);
            let w: Vec<f32> = (0..spec.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let layer = quantize_layer(&w, &b, &spec, S).unwrap();
            let x = Tensor::from_fn(Shape::new(cin, 6, 6), |_, _, _| rng.gen_range(-1.0f32..1.0));
            let xi = quantize_tensor(&x, S);
            // Real conv of the dequantized operands.
            let wf: Vec<f32> = layer.weight.iter().map(|&v| v as f32 / 8192.0).collect();
            let bf: Vec<f32> = layer.bias.iter().map(|&v| v as f32 / 8192.0).collect();
            let want = conv2d(&dequantize_tensor(&xi, S), &wf, &bf, &spec).unwrap();
            let got = dequantize_tensor(&qconv(&xi, &layer, S).unwrap(), S);
            for (g, e) in got.data().iter().zip(want.data()) {
                assert!((g - e).abs() <= 1.0 / 1024.0 + 1e-6, "{g} vs {e}");
            }
            // Against the original real weights on the dequantized input.
            let want = conv2d(&dequantize_tensor(&xi, S), &w, &b, &spec).unwrap();
            for (g, e) in got.data().iter().zip(want.data()) {
                assert!((g - e).abs() <= 0.01, "{cin}->{cout}: {g} vs {e}");
            }
        }
    }

    #[test]
    fn qconv_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = ConvSpec::dense(32, 64, 3);
        let w: Vec<f32> = (0..spec.weight_len()).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let b: Vec<f32> = (0..64).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let layer = quantize_layer(&w, &b, &spec, S).unwrap();
        let x = Tensor::from_fn(Shape::new(32, 16, 16), |_, _, _| rng.gen_range(-2000i16..2000));
        let lut = build_sigmoid_lut(S);
        let reference = qwsilu(&qconv(&x, &layer, S).unwrap(), 4, &lut, S);
        for threads in [1, 2, 4, 8] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            for _ in 0..25 {
                let y = pool.install(|| qwsilu(&qconv(&x, &layer, S).unwrap(), 4, &lut, S));
                assert_eq!(y, reference);
            }
        }
    }

    #[test]
    fn sigmoid_lut_examples() {
        let lut = build_sigmoid_lut(S);
        assert_eq!(lut.get(0), 256);
        assert_eq!(lut.get(32767), 512);
        assert_eq!(lut.get(-32768), 0);
        assert_eq!(lut.get(2048), 503);
        let mut prev = i16::MIN;
        for (_, v) in lut.entries() {
            assert!((0..=512).contains(&v));
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn qwsilu_examples() {
        let lut = build_sigmoid_lut(S);
        let x = Tensor::new(Shape::new(3, 1, 1), vec![0i16, 512, -32768]).unwrap();
        assert_eq!(qwsilu(&x, 4, &lut, S).data(), &[0, 503, 0]);
    }

    #[test]
    fn channel_scale_int() {
        let x = Tensor::new(Shape::new(2, 1, 1), vec![3 * 512i16, 4 * 512]).unwrap();
        let q = quantize_scale_vector(&[2.0, 0.5], S);
        assert_eq!(q, vec![16384, 4096]);
        assert_eq!(qchannel_scale(&x, &q, S).unwrap().data(), &[6 * 512, 2 * 512]);
        assert!(qchannel_scale(&x, &q[..1], S).is_err());
    }

    #[test]
    fn softplus_lut_is_positive_and_tracks() {
        let lut = build_softplus_lut(S);
        assert_eq!(lut.get(0), 355); // 512 * ln 2 = 354.89
        assert_eq!(lut.get(32767), 32767);
        assert_eq!(lut.get(-32768), 0);
    }

    proptest! {
        #[test]
        fn quantize_monotone_and_odd(a in -63.99f64..63.99, b in -63.99f64..63.99) {
            let (qa, qb) = (quantize_value(a, S), quantize_value(b, S));
            if a <= b { prop_assert!(qa <= qb); } else { prop_assert!(qa >= qb); }
            prop_assert_eq!(quantize_value(-a, S), -qa);
            prop_assert!((qa as f64 / 512.0 - a).abs() <= 1.0 / 1024.0 + 1e-12);
        }

        #[test]
        fn qwsilu_tracks_real(v in -8.0f64..8.0) {
            let lut = build_sigmoid_lut(S);
            let xi = quantize_value(v, S);
            let t = Tensor::new(Shape::new(1, 1, 1), vec![xi]).unwrap();
            let got = qwsilu(&t, 4, &lut, S).data()[0] as f64 / 512.0;
            let real = wsilu(&Tensor::new(Shape::new(1, 1, 1), vec![v as f32]).unwrap(), 4.0).data()[0] as f64;
            prop_assert!((got - real).abs() <= 3.0 / 512.0, "{} vs {}", got, real);
        }
    }
}
