//! The conditional coding network at 1/8 resolution, generic over the
//! arithmetic backend (f32 or int16).

use std::fmt;
use std::sync::Arc;

use crate::bytes::Reader;
use crate::entropy::{scale_level, LatentQuantizer, PriorParams};
use crate::error::{Error, Result};
use crate::integer::{
    build_sigmoid_lut, build_softplus_lut, qadd, qchannel_scale, qconv_counted, qgate, qwsilu,
    quantize_scale_vector, round_div, saturate_i16, Lut16, QuantScheme, QuantizedLayer, SaturationCounter,
};
use crate::rate::QStep;
use crate::tensor::{
    chunk2, concat_channels, conv2d, depth_to_space, sigmoid, space_to_depth, ConvSpec, Shape, Tensor,
};
use crate::weights::{LayerWeights, Weights};

pub const WSILU_ALPHA: i32 = 4;
pub const PATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ColorSpace {
    Rgb,
    Yuv420,
}

impl ColorSpace {
    pub fn tag(self) -> u8 {
        match self {
            ColorSpace::Rgb => 0,
            ColorSpace::Yuv420 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ColorSpace::Rgb),
            1 => Ok(ColorSpace::Yuv420),
            t => Err(Error::invalid(format!("unknown colorspace tag {t}"))),
        }
    }

    /// Channels of the packed network input.
    pub fn packed_channels(self) -> usize {
        match self {
            ColorSpace::Rgb => 3,
            ColorSpace::Yuv420 => 6,
        }
    }

    /// Resolution divisor already applied by packing.
    pub fn packing_factor(self) -> usize {
        match self {
            ColorSpace::Rgb => 1,
            ColorSpace::Yuv420 => 2,
        }
    }

    /// Frame dimensions must be padded to a multiple of this.
    pub fn pad_multiple(self) -> usize {
        PATCH * self.packing_factor()
    }
}

impl fmt::Display for ColorSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColorSpace::Rgb => "rgb",
            ColorSpace::Yuv420 => "yuv420",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Real,
    Int16,
}

impl Mode {
    pub fn tag(self) -> u8 {
        match self {
            Mode::Real => 0,
            Mode::Int16 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Mode::Real),
            1 => Ok(Mode::Int16),
            t => Err(Error::invalid(format!("unknown mode tag {t}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Real => "real",
            Mode::Int16 => "int16",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CodecConfig {
    /// Latent channels `C`.
    pub channels: usize,
    pub hyper_channels: usize,
    pub patch: usize,
    /// DC blocks per stage.
    pub dc_blocks: usize,
    /// Extractor blocks run before the prior context is taken.
    pub split: usize,
    pub colorspace: ColorSpace,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            channels: 32,
            hyper_channels: 16,
            patch: PATCH,
            dc_blocks: 2,
            split: 1,
            colorspace: ColorSpace::Yuv420,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch != PATCH {
            return bad(format!("patch size must be {PATCH}, got {}", self.patch));
        }
        if self.channels < 3 || !self.channels.is_multiple_of(2) {
            return bad(format!("latent channels must be even and >= 3, got {}", self.channels));
        }
        if self.hyper_channels == 0 {
            return bad("hyper channels must be positive".into());
        }
        if self.dc_blocks == 0 || self.split > self.dc_blocks {
            return bad(format!("split {} outside 0..={}", self.split, self.dc_blocks));
        }
        if self.channels > u16::MAX as usize / 4 || self.hyper_channels > u16::MAX as usize / 4 || self.dc_blocks > 255 {
            return bad("configuration too large".into());
        }
        Ok(())
    }

    /// Space-to-depth factor applied to the packed input.
    pub fn embed_factor(&self) -> usize {
        self.patch / self.colorspace.packing_factor()
    }

    pub fn embed_channels(&self) -> usize {
        self.colorspace.packed_channels() * self.embed_factor() * self.embed_factor()
    }

    /// Latent shape for a padded frame.
    pub fn latent_shape(&self, width: usize, height: usize) -> Shape {
        Shape::new(self.channels, height / self.patch, width / self.patch)
    }

    pub fn hyper_shape(&self, latent: Shape) -> Shape {
        Shape::new(self.hyper_channels, latent.h.div_ceil(2), latent.w.div_ceil(2))
    }

    pub const BYTES: usize = 8;

    pub fn to_bytes(&self) -> [u8; Self::BYTES] {
        let c = (self.channels as u16).to_le_bytes();
        let ch = (self.hyper_channels as u16).to_le_bytes();
        [
            self.colorspace.tag(),
            self.patch as u8,
            c[0],
            c[1],
            ch[0],
            ch[1],
            self.dc_blocks as u8,
            self.split as u8,
        ]
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let colorspace = ColorSpace::from_tag(r.u8()?)?;
        let cfg = CodecConfig {
            colorspace,
            patch: r.u8()? as usize,
            channels: r.u16()? as usize,
            hyper_channels: r.u16()? as usize,
            dc_blocks: r.u8()? as usize,
            split: r.u8()? as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Initialization role of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerRole {
    Plain,
    Expand,
    Depthwise,
    Project,
    Temporal,
    Head,
}

fn push_blocks(out: &mut Vec<(String, ConvSpec, LayerRole)>, prefix: &str, n: usize, c: usize) {
    for i in 0..n {
        out.push((format!("{prefix}.block{i}.expand"), ConvSpec::dense(c, 2 * c, 1), LayerRole::Expand));
        out.push((format!("{prefix}.block{i}.dw"), ConvSpec::depthwise(2 * c, 3), LayerRole::Depthwise));
        out.push((format!("{prefix}.block{i}.project"), ConvSpec::dense(c, c, 1), LayerRole::Project));
    }
}

/// Every layer of the network in canonical (file) order.
pub fn topology(cfg: &CodecConfig) -> Vec<(String, ConvSpec, LayerRole)> {
    let c = cfg.channels;
    let ch = cfg.hyper_channels;
    let n = cfg.dc_blocks;
    let mut t = Vec::new();
    let push = |t: &mut Vec<_>, name: &str, spec, role| t.push((name.to_string(), spec, role));
    push(&mut t, "embed", ConvSpec::dense(cfg.embed_channels(), c, 1), LayerRole::Plain);
    push_blocks(&mut t, "extract", n, c);
    push(&mut t, "extract.prior", ConvSpec::dense(c, c, 1), LayerRole::Temporal);
    push(&mut t, "extract.dec", ConvSpec::dense(c, c, 1), LayerRole::Temporal);
    push(&mut t, "extract.enc", ConvSpec::dense(c, c, 1), LayerRole::Temporal);
    push(&mut t, "enc.in", ConvSpec::dense(2 * c, c, 1), LayerRole::Plain);
    push_blocks(&mut t, "enc", n, c);
    push(&mut t, "enc.out", ConvSpec::dense(c, c, 1), LayerRole::Plain);
    push(&mut t, "hyper_enc.down", ConvSpec::dense(c, ch, 3).with_stride(2), LayerRole::Plain);
    push(&mut t, "hyper_enc.out", ConvSpec::dense(ch, ch, 1), LayerRole::Plain);
    push(&mut t, "hyper_dec.up", ConvSpec::dense(ch, 4 * ch, 1), LayerRole::Plain);
    push(&mut t, "hyper_dec.fuse", ConvSpec::dense(ch + c, c, 1), LayerRole::Plain);
    push_blocks(&mut t, "hyper_dec", 1, c);
    push(&mut t, "hyper_dec.head", ConvSpec::dense(c, c, 1), LayerRole::Head);
    push(&mut t, "step2.fuse", ConvSpec::dense(c / 2 + c, c, 1), LayerRole::Plain);
    push_blocks(&mut t, "step2", 1, c);
    push(&mut t, "step2.head", ConvSpec::dense(c, c, 1), LayerRole::Head);
    push(&mut t, "dec.in", ConvSpec::dense(2 * c, c, 1), LayerRole::Temporal);
    push_blocks(&mut t, "dec", n, c);
    push(&mut t, "dec.out", ConvSpec::dense(c, c, 1), LayerRole::Temporal);
    push_blocks(&mut t, "recon", n, c);
    push(&mut t, "recon.out", ConvSpec::dense(c, cfg.embed_channels(), 1), LayerRole::Plain);
    t
}

/// Arithmetic used to run the network.
pub trait Backend: LatentQuantizer + Send + Sync {
    type Layer: Send + Sync;

    fn mode(&self) -> Mode;
    fn prepare(&self, layer: &LayerWeights) -> Result<Self::Layer>;
    fn conv(&self, x: &Tensor<Self::Scalar>, layer: &Self::Layer) -> Result<Tensor<Self::Scalar>>;
    fn wsilu(&self, x: &Tensor<Self::Scalar>) -> Tensor<Self::Scalar>;
    /// `a * sigmoid(b)`.
    fn gate(&self, a: &Tensor<Self::Scalar>, b: &Tensor<Self::Scalar>) -> Result<Tensor<Self::Scalar>>;
    fn add(&self, a: &Tensor<Self::Scalar>, b: &Tensor<Self::Scalar>) -> Result<Tensor<Self::Scalar>>;
    /// Per-channel multiply by a bank vector.
    fn scale(&self, x: &Tensor<Self::Scalar>, factors: &[f32]) -> Result<Tensor<Self::Scalar>>;
    /// Softplus floored at the minimum prior scale.
    fn positive_scale(&self, raw: &Tensor<Self::Scalar>) -> Tensor<Self::Scalar>;
    fn from_real(&self, x: &Tensor<f32>) -> Tensor<Self::Scalar>;
    fn to_real(&self, x: &Tensor<Self::Scalar>) -> Tensor<f32>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RealBackend;

#[derive(Clone, Debug)]
pub struct RealLayer {
    spec: ConvSpec,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl LatentQuantizer for RealBackend {
    type Scalar = f32;

    fn latent_symbol(&self, y: f32, q: &QStep) -> i32 {
        (y as f64 / q.value).round().clamp(-1e9, 1e9) as i32
    }

    fn latent_value(&self, s: i32, q: &QStep) -> f32 {
        (s as f64 * q.value) as f32
    }

    fn prior_location(&self, mean: f32, scale: f32, q: &QStep) -> (i32, usize) {
        let off = self.latent_symbol(mean, q);
        let b = (scale as f64 / q.value * 65536.0).round().clamp(0.0, 1e15) as i64;
        (off, scale_level(b))
    }

    fn hyper_symbol(&self, z: f32) -> i32 {
        z.round().clamp(-1e9, 1e9) as i32
    }

    fn hyper_value(&self, s: i32) -> f32 {
        s as f32
    }
}

impl Backend for RealBackend {
    type Layer = RealLayer;

    fn mode(&self) -> Mode {
        Mode::Real
    }

    fn prepare(&self, l: &LayerWeights) -> Result<RealLayer> {
        Ok(RealLayer {
            spec: l.spec,
            weight: l.weight.clone(),
            bias: l.bias.clone(),
        })
    }

    fn conv(&self, x: &Tensor<f32>, l: &RealLayer) -> Result<Tensor<f32>> {
        conv2d(x, &l.weight, &l.bias, &l.spec)
    }

    fn wsilu(&self, x: &Tensor<f32>) -> Tensor<f32> {
        crate::tensor::wsilu(x, WSILU_ALPHA as f32)
    }

    fn gate(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
        a.zip_with(b, |p, q| p * sigmoid(q))
    }

    fn add(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
        a.zip_with(b, |p, q| p + q)
    }

    fn scale(&self, x: &Tensor<f32>, factors: &[f32]) -> Result<Tensor<f32>> {
        crate::tensor::channel_scale(x, factors)
    }

    fn positive_scale(&self, raw: &Tensor<f32>) -> Tensor<f32> {
        raw.map(|v| softplus(v).max(crate::entropy::SCALE_MIN as f32))
    }

    fn from_real(&self, x: &Tensor<f32>) -> Tensor<f32> {
        x.clone()
    }

    fn to_real(&self, x: &Tensor<f32>) -> Tensor<f32> {
        x.clone()
    }
}

/// int16 execution with lookup-table non-linearities.
#[derive(Clone, Debug)]
pub struct IntBackend {
    scheme: QuantScheme,
    sigmoid: Arc<Lut16>,
    softplus: Arc<Lut16>,
    scale_floor: i16,
    saturation: Arc<SaturationCounter>,
}

impl Default for IntBackend {
    fn default() -> Self {
        Self::new(QuantScheme::default())
    }
}

impl IntBackend {
    pub fn new(scheme: QuantScheme) -> Self {
        IntBackend {
            scheme,
            sigmoid: Arc::new(build_sigmoid_lut(scheme)),
            softplus: Arc::new(build_softplus_lut(scheme)),
            scale_floor: (crate::entropy::SCALE_MIN * scheme.k1 as f64).ceil() as i16,
            saturation: Arc::new(SaturationCounter::default()),
        }
    }

    pub fn scheme(&self) -> QuantScheme {
        self.scheme
    }

    /// Outputs clipped to the int16 range so far.
    pub fn saturated(&self) -> usize {
        self.saturation.get()
    }
}

impl LatentQuantizer for IntBackend {
    type Scalar = i16;

    fn latent_symbol(&self, y: i16, q: &QStep) -> i32 {
        round_div(y as i64 * 65536, self.scheme.k1 as i64 * q.q16).clamp(-(1 << 30), 1 << 30) as i32
    }

    fn latent_value(&self, s: i32, q: &QStep) -> i16 {
        saturate_i16(round_div(s as i64 * q.q16 * self.scheme.k1 as i64, 65536))
    }

    fn prior_location(&self, mean: i16, scale: i16, q: &QStep) -> (i32, usize) {
        let off = self.latent_symbol(mean, q);
        let b = round_div((scale.max(0) as i64) << 32, self.scheme.k1 as i64 * q.q16);
        (off, scale_level(b))
    }

    fn hyper_symbol(&self, z: i16) -> i32 {
        round_div(z as i64, self.scheme.k1 as i64) as i32
    }

    fn hyper_value(&self, s: i32) -> i16 {
        saturate_i16(s as i64 * self.scheme.k1 as i64)
    }
}

impl Backend for IntBackend {
    type Layer = QuantizedLayer;

    fn mode(&self) -> Mode {
        Mode::Int16
    }

    fn prepare(&self, l: &LayerWeights) -> Result<QuantizedLayer> {
        l.quantized(self.scheme)
    }

    fn conv(&self, x: &Tensor<i16>, l: &QuantizedLayer) -> Result<Tensor<i16>> {
        qconv_counted(x, l, self.scheme, Some(&self.saturation))
    }

    fn wsilu(&self, x: &Tensor<i16>) -> Tensor<i16> {
        qwsilu(x, WSILU_ALPHA, &self.sigmoid, self.scheme)
    }

    fn gate(&self, a: &Tensor<i16>, b: &Tensor<i16>) -> Result<Tensor<i16>> {
        qgate(a, b, &self.sigmoid, self.scheme)
    }

    fn add(&self, a: &Tensor<i16>, b: &Tensor<i16>) -> Result<Tensor<i16>> {
        qadd(a, b)
    }

    fn scale(&self, x: &Tensor<i16>, factors: &[f32]) -> Result<Tensor<i16>> {
        qchannel_scale(x, &quantize_scale_vector(factors, self.scheme), self.scheme)
    }

    fn positive_scale(&self, raw: &Tensor<i16>) -> Tensor<i16> {
        raw.map(|v| self.softplus.get(v).max(self.scale_floor))
    }

    fn from_real(&self, x: &Tensor<f32>) -> Tensor<i16> {
        crate::integer::quantize_tensor(x, self.scheme)
    }

    fn to_real(&self, x: &Tensor<i16>) -> Tensor<f32> {
        crate::integer::dequantize_tensor(x, self.scheme)
    }
}

/// Layers of one DC block.
pub struct DcBlock<L> {
    pub expand: L,
    pub dw: L,
    pub project: L,
}

/// Temporal contexts derived from the previous latent: `prior` feeds the
/// hyper decoder, `dec` the latent decoder, `enc` the latent encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Contexts<S> {
    pub prior: Tensor<S>,
    pub dec: Tensor<S>,
    pub enc: Tensor<S>,
}

/// The network, ready to run on backend `B`.
pub struct Model<B: Backend> {
    config: CodecConfig,
    backend: B,
    embed: B::Layer,
    extract: Vec<DcBlock<B::Layer>>,
    extract_prior: B::Layer,
    extract_dec: B::Layer,
    extract_enc: B::Layer,
    enc_in: B::Layer,
    enc: Vec<DcBlock<B::Layer>>,
    enc_out: B::Layer,
    hyper_down: B::Layer,
    hyper_out: B::Layer,
    hyper_up: B::Layer,
    hyper_fuse: B::Layer,
    hyper_block: DcBlock<B::Layer>,
    hyper_head: B::Layer,
    step2_fuse: B::Layer,
    step2_block: DcBlock<B::Layer>,
    step2_head: B::Layer,
    dec_in: B::Layer,
    dec: Vec<DcBlock<B::Layer>>,
    dec_out: B::Layer,
    recon: Vec<DcBlock<B::Layer>>,
    recon_out: B::Layer,
}

impl<B: Backend> fmt::Debug for Model<B> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("mode", &self.backend.mode())
            .finish()
    }
}

struct LayerIter<'w, 'b, B: Backend> {
    backend: &'b B,
    layers: std::slice::Iter<'w, LayerWeights>,
}

impl<B: Backend> LayerIter<'_, '_, B> {
    fn next(&mut self) -> Result<B::Layer> {
        let l = self
            .layers
            .next()
            .ok_or_else(|| Error::Config("weights end early".into()))?;
        self.backend.prepare(l)
    }

    fn block(&mut self) -> Result<DcBlock<B::Layer>> {
        Ok(DcBlock {
            expand: self.next()?,
            dw: self.next()?,
            project: self.next()?,
        })
    }

    fn blocks(&mut self, n: usize) -> Result<Vec<DcBlock<B::Layer>>> {
        (0..n).map(|_| self.block()).collect()
    }
}

impl<B: Backend> Model<B> {
    pub fn new(weights: &Weights, backend: B) -> Result<Self> {
        let cfg = weights.config;
        let w = Weights::new(cfg, weights.layers.clone())?;
        let n = cfg.dc_blocks;
        let mut it = LayerIter {
            backend: &backend,
            layers: w.layers.iter(),
        };
        let embed = it.next()?;
        let extract = it.blocks(n)?;
        let extract_prior = it.next()?;
        let extract_dec = it.next()?;
        let extract_enc = it.next()?;
        let enc_in = it.next()?;
        let enc = it.blocks(n)?;
        let enc_out = it.next()?;
        let hyper_down = it.next()?;
        let hyper_out = it.next()?;
        let hyper_up = it.next()?;
        let hyper_fuse = it.next()?;
        let hyper_block = it.block()?;
        let hyper_head = it.next()?;
        let step2_fuse = it.next()?;
        let step2_block = it.block()?;
        let step2_head = it.next()?;
        let dec_in = it.next()?;
        let dec = it.blocks(n)?;
        let dec_out = it.next()?;
        let recon = it.blocks(n)?;
        let recon_out = it.next()?;
        Ok(Model {
            config: cfg,
            backend,
            embed,
            extract,
            extract_prior,
            extract_dec,
            extract_enc,
            enc_in,
            enc,
            enc_out,
            hyper_down,
            hyper_out,
            hyper_up,
            hyper_fuse,
            hyper_block,
            hyper_head,
            step2_fuse,
            step2_block,
            step2_head,
            dec_in,
            dec,
            dec_out,
            recon,
            recon_out,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    fn check_latent(&self, x: &Tensor<B::Scalar>, what: &str) -> Result<()> {
        if x.shape().c != self.config.channels {
            return Err(Error::invalid(format!(
                "{what}: expected {} channels, got {}",
                self.config.channels,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Expand, WSiLU, depth-wise, gate one half by the other, project, and
    /// add the input back.
    pub fn dc_block(&self, x: &Tensor<B::Scalar>, blk: &DcBlock<B::Layer>) -> Result<Tensor<B::Scalar>> {
        let b = &self.backend;
        let h = b.conv(x, &blk.expand)?;
        let h = b.wsilu(&h);
        let h = b.conv(&h, &blk.dw)?;
        let (u, v) = chunk2(&h)?;
        let g = b.gate(&u, &v)?;
        let p = b.conv(&g, &blk.project)?;
        b.add(x, &p)
    }

    fn run_blocks(&self, mut x: Tensor<B::Scalar>, blocks: &[DcBlock<B::Layer>]) -> Result<Tensor<B::Scalar>> {
        for blk in blocks {
            x = self.dc_block(&x, blk)?;
        }
        Ok(x)
    }

    /// Packed frame (padded) to latent `(C, H/8, W/8)`.
    pub fn patch_embed(&self, frame: &Tensor<B::Scalar>) -> Result<Tensor<B::Scalar>> {
        let s = frame.shape();
        if s.c != self.config.colorspace.packed_channels() {
            return Err(Error::invalid(format!(
                "patch_embed: {} input for {}",
                s, self.config.colorspace
            )));
        }
        let x = space_to_depth(frame, self.config.embed_factor())?;
        self.backend.conv(&x, &self.embed)
    }

    /// First part of the extractor: the prior context plus the intermediate
    /// state the rest of the extractor continues from.
    pub fn extract_head(
        &self,
        f_prev: &Tensor<B::Scalar>,
        q_f: &[f32],
    ) -> Result<(Tensor<B::Scalar>, Tensor<B::Scalar>)> {
        self.check_latent(f_prev, "extractor")?;
        let x = self.backend.scale(f_prev, q_f)?;
        let mid = self.run_blocks(x, &self.extract[..self.config.split])?;
        let prior = self.backend.conv(&mid, &self.extract_prior)?;
        Ok((prior, mid))
    }

    /// Remaining extractor blocks; returns the decoder context, and the
    /// encoder context when `with_enc` is set.
    pub fn extract_tail(
        &self,
        mid: Tensor<B::Scalar>,
        with_enc: bool,
    ) -> Result<(Tensor<B::Scalar>, Option<Tensor<B::Scalar>>)> {
        let x = self.run_blocks(mid, &self.extract[self.config.split..])?;
        let dec = self.backend.conv(&x, &self.extract_dec)?;
        let enc = if with_enc {
            Some(self.backend.conv(&x, &self.extract_enc)?)
        } else {
            None
        };
        Ok((dec, enc))
    }

    pub fn extract_context(&self, f_prev: &Tensor<B::Scalar>, q_f: &[f32]) -> Result<Contexts<B::Scalar>> {
        let (prior, mid) = self.extract_head(f_prev, q_f)?;
        let (dec, enc) = self.extract_tail(mid, true)?;
        Ok(Contexts {
            prior,
            dec,
            enc: enc.expect("requested"),
        })
    }

    pub fn encode_latent(
        &self,
        x_lat: &Tensor<B::Scalar>,
        ctx_enc: &Tensor<B::Scalar>,
        q_e: &[f32],
    ) -> Result<Tensor<B::Scalar>> {
        self.check_latent(x_lat, "encode_latent")?;
        let x = self.backend.scale(x_lat, q_e)?;
        let x = self.backend.conv(&concat_channels(&x, ctx_enc)?, &self.enc_in)?;
        let x = self.run_blocks(x, &self.enc)?;
        self.backend.conv(&x, &self.enc_out)
    }

    pub fn hyper_encode(&self, y: &Tensor<B::Scalar>) -> Result<Tensor<B::Scalar>> {
        self.check_latent(y, "hyper_encode")?;
        let z = self.backend.conv(y, &self.hyper_down)?;
        let z = self.backend.wsilu(&z);
        self.backend.conv(&z, &self.hyper_out)
    }

    fn params_from_head(&self, head: &Tensor<B::Scalar>) -> Result<PriorParams<B::Scalar>> {
        let (mean, raw) = chunk2(head)?;
        let scale = self.backend.positive_scale(&raw);
        PriorParams::new(mean, scale)
    }

    /// Prior of the first channel half of `y`, plus the hidden features the
    /// second step conditions on.
    pub fn hyper_decode(
        &self,
        z_hat: &Tensor<B::Scalar>,
        ctx_prior: &Tensor<B::Scalar>,
    ) -> Result<(PriorParams<B::Scalar>, Tensor<B::Scalar>)> {
        let target = ctx_prior.shape();
        let expect = self.config.hyper_shape(target);
        if z_hat.shape() != expect {
            return Err(Error::invalid(format!("hyper_decode: z {} for context {}", z_hat.shape(), target)));
        }
        let u = self.backend.conv(z_hat, &self.hyper_up)?;
        let u = depth_to_space(&u, 2)?.crop(target.h, target.w)?;
        let h = self.backend.conv(&concat_channels(&u, ctx_prior)?, &self.hyper_fuse)?;
        let h = self.dc_block(&h, &self.hyper_block)?;
        let head = self.backend.conv(&h, &self.hyper_head)?;
        Ok((self.params_from_head(&head)?, h))
    }

    /// Prior of the second channel half given the decoded first half.
    pub fn step2_prior(
        &self,
        y1_hat: &Tensor<B::Scalar>,
        hidden: &Tensor<B::Scalar>,
    ) -> Result<PriorParams<B::Scalar>> {
        let x = self.backend.conv(&concat_channels(y1_hat, hidden)?, &self.step2_fuse)?;
        let x = self.dc_block(&x, &self.step2_block)?;
        let head = self.backend.conv(&x, &self.step2_head)?;
        self.params_from_head(&head)
    }

    pub fn decode_latent(
        &self,
        y_hat: &Tensor<B::Scalar>,
        ctx_dec: &Tensor<B::Scalar>,
        q_d: &[f32],
    ) -> Result<Tensor<B::Scalar>> {
        self.check_latent(y_hat, "decode_latent")?;
        let x = self.backend.scale(y_hat, q_d)?;
        let x = self.backend.conv(&concat_channels(&x, ctx_dec)?, &self.dec_in)?;
        let x = self.run_blocks(x, &self.dec)?;
        self.backend.conv(&x, &self.dec_out)
    }

    /// Latent to packed frame at padded resolution.
    pub fn reconstruct(&self, f_t: &Tensor<B::Scalar>, q_r: &[f32]) -> Result<Tensor<B::Scalar>> {
        self.check_latent(f_t, "reconstruct")?;
        let x = self.backend.scale(f_t, q_r)?;
        let x = self.run_blocks(x, &self.recon)?;
        let x = self.backend.conv(&x, &self.recon_out)?;
        depth_to_space(&x, self.config.embed_factor())
    }

    /// Multiply-accumulates of the encoder side and of the decoder side for
    /// one padded frame.
    pub fn macs_per_frame(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        let lat = self.config.latent_shape(width, height);
        let hyp = self.config.hyper_shape(lat);
        let mut enc = 0usize;
        let mut dec = 0usize;
        let cfg = self.config;
        for (name, spec, _) in topology(&cfg) {
            let input = match name.as_str() {
                "embed" => Shape::new(cfg.embed_channels(), lat.h, lat.w),
                "hyper_dec.up" | "hyper_enc.out" => Shape::new(spec.in_channels, hyp.h, hyp.w),
                _ => Shape::new(spec.in_channels, lat.h, lat.w),
            };
            let m = spec.macs(input)?;
            let stage = name.split('.').next().unwrap_or("");
            match stage {
                "embed" | "enc" | "hyper_enc" => enc += m,
                "recon" => dec += m,
                "extract" | "hyper_dec" | "step2" | "dec" => {
                    if name != "extract.enc" {
                        dec += m;
                    }
                    enc += m;
                }
                _ => {}
            }
        }
        Ok((enc, dec))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(c: usize) -> CodecConfig {
        CodecConfig {
            channels: c,
            hyper_channels: c / 2,
            ..CodecConfig::default()
        }
    }

    fn noise(shape: Shape, seed: u64, amp: f32) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _| rng.gen_range(-amp..amp))
    }

    fn models(c: usize) -> (Model<RealBackend>, Model<IntBackend>) {
        let w = Weights::seeded(cfg(c), 5).unwrap();
        (
            Model::new(&w, RealBackend).unwrap(),
            Model::new(&w, IntBackend::default()).unwrap(),
        )
    }

    fn max_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f32 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn config_validation() {
        assert!(CodecConfig::default().validate().is_ok());
        assert!(CodecConfig { patch: 4, ..CodecConfig::default() }.validate().is_err());
        assert!(CodecConfig { channels: 7, ..CodecConfig::default() }.validate().is_err());
        assert!(CodecConfig { split: 3, ..CodecConfig::default() }.validate().is_err());
        let c = CodecConfig::default();
        let bytes = c.to_bytes();
        let mut r = Reader::new(&bytes);
        assert_eq!(CodecConfig::read(&mut r).unwrap(), c);
    }

    #[test]
    fn dc_block_zero_weights_is_identity() {
        let c = cfg(8);
        let mut w = Weights::seeded(c, 0).unwrap();
        for l in &mut w.layers {
            l.weight.iter_mut().for_each(|v| *v = 0.0);
            l.bias.iter_mut().for_each(|v| *v = 0.0);
        }
        let m = Model::new(&w, RealBackend).unwrap();
        let x = noise(Shape::new(8, 4, 4), 1, 2.0);
        assert_eq!(m.dc_block(&x, &m.enc[0]).unwrap(), x);
    }

    #[test]
    fn dc_block_int16_tracks_real() {
        let (r, i) = models(8);
        let x = noise(Shape::new(8, 4, 4), 2, 1.0);
        let yr = r.dc_block(&x, &r.enc[0]).unwrap();
        assert_eq!(yr.shape(), x.shape());
        let xi = i.backend().from_real(&x);
        let xq = i.backend().to_real(&xi);
        let yr = r.dc_block(&xq, &r.enc[0]).unwrap();
        let yi = i.backend().to_real(&i.dc_block(&xi, &i.enc[0]).unwrap());
        assert!(max_diff(&yr, &yi) <= 0.02, "{}", max_diff(&yr, &yi));
    }

    #[test]
    fn shapes_through_the_network() {
        let (m, _) = models(8);
        let frame = noise(Shape::new(6, 16, 24), 3, 1.0);
        let x = m.patch_embed(&frame).unwrap();
        assert_eq!(x.shape(), Shape::new(8, 4, 6));
        let ctx = m.extract_context(&Tensor::zeros(x.shape()), &[1.0; 8]).unwrap();
        assert_eq!(ctx.prior.shape(), x.shape());
        assert_eq!(ctx.enc.shape(), x.shape());
        let y = m.encode_latent(&x, &ctx.enc, &[1.0; 8]).unwrap();
        assert_eq!(y.shape(), x.shape());
        let z = m.hyper_encode(&y).unwrap();
        assert_eq!(z.shape(), Shape::new(4, 2, 3));
        let (p1, h) = m.hyper_decode(&z, &ctx.prior).unwrap();
        assert_eq!(p1.shape(), Shape::new(4, 4, 6));
        assert!(p1.scale.data().iter().all(|&s| s >= 0.01));
        let p2 = m.step2_prior(&chunk2(&y).unwrap().0, &h).unwrap();
        assert_eq!(p2.shape(), Shape::new(4, 4, 6));
        let f = m.decode_latent(&y, &ctx.dec, &[1.0; 8]).unwrap();
        let rec = m.reconstruct(&f, &[1.0; 8]).unwrap();
        assert_eq!(rec.shape(), frame.shape());
        assert!(m.patch_embed(&noise(Shape::new(3, 16, 16), 0, 1.0)).is_err());
        assert!(m.patch_embed(&noise(Shape::new(6, 10, 16), 0, 1.0)).is_err());
    }

    #[test]
    fn odd_latent_sizes_crop_the_hyper_path() {
        let (m, _) = models(8);
        let y = noise(Shape::new(8, 3, 5), 4, 1.0);
        let z = m.hyper_encode(&y).unwrap();
        assert_eq!(z.shape(), Shape::new(4, 2, 3));
        let (p, _) = m.hyper_decode(&z, &Tensor::zeros(y.shape())).unwrap();
        assert_eq!(p.shape(), Shape::new(4, 3, 5));
    }

    #[test]
    fn rgb_patch_embed_shape() {
        let c = CodecConfig {
            colorspace: ColorSpace::Rgb,
            ..cfg(32)
        };
        let m = Model::new(&Weights::seeded(c, 0).unwrap(), RealBackend).unwrap();
        let x = m.patch_embed(&noise(Shape::new(3, 16, 16), 0, 1.0)).unwrap();
        assert_eq!(x.shape(), Shape::new(32, 2, 2));
        let zero = m.patch_embed(&Tensor::zeros(Shape::new(3, 16, 16))).unwrap();
        for ch in 0..32 {
            assert!(zero.channel(ch).iter().all(|&v| v == m.embed.bias[ch]));
        }
    }

    #[test]
    fn identity_embedding_keeps_patches() {
        let c = CodecConfig {
            channels: 192,
            hyper_channels: 8,
            colorspace: ColorSpace::Rgb,
            ..CodecConfig::default()
        };
        let mut w = Weights::seeded(c, 0).unwrap();
        let embed = &mut w.layers[0];
        embed.weight.iter_mut().for_each(|v| *v = 0.0);
        embed.bias.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..192 {
            embed.weight[i * 192 + i] = 1.0;
        }
        let m = Model::new(&w, RealBackend).unwrap();
        let frame = noise(Shape::new(3, 8, 16), 9, 1.0);
        let x = m.patch_embed(&frame).unwrap();
        assert_eq!(x, space_to_depth(&frame, 8).unwrap());
    }

    #[test]
    fn extractor_applies_q_f_first() {
        let (m, _) = models(8);
        let f = noise(Shape::new(8, 2, 2), 5, 1.0);
        let ones = m.extract_context(&f, &[1.0; 8]).unwrap();
        let half = m.extract_context(&f, &[0.5; 8]).unwrap();
        assert_ne!(ones, half);
        let manual = m
            .extract_context(&crate::tensor::channel_scale(&f, &[0.5; 8]).unwrap(), &[1.0; 8])
            .unwrap();
        assert_eq!(half, manual);
    }

    #[test]
    fn zero_context_is_bias_response() {
        let (m, _) = models(8);
        let zero = Tensor::zeros(Shape::new(8, 8, 8));
        let a = m.extract_context(&zero, &[1.0; 8]).unwrap();
        assert_eq!(a, m.extract_context(&zero, &[0.3; 8]).unwrap());
        // Away from the zero-padded border every position sees the same input.
        for t in [&a.prior, &a.dec, &a.enc] {
            for c in 0..8 {
                let v = t.get(c, 2, 2);
                for y in 2..6 {
                    for x in 2..6 {
                        assert_eq!(t.get(c, y, x), v);
                    }
                }
            }
        }
    }

    #[test]
    fn int16_network_stages_track_real() {
        let (r, i) = models(32);
        let ib = i.backend();
        let frame = noise(Shape::new(6, 16, 16), 6, 0.5).map(|v| v + 0.5);
        let fi = ib.from_real(&frame);
        let xr = r.patch_embed(&ib.to_real(&fi)).unwrap();
        let xi = i.patch_embed(&fi).unwrap();
        assert!(max_diff(&xr, &ib.to_real(&xi)) < 0.02);
        let q = [1.0f32; 32];
        let cr = r.extract_context(&xr, &q).unwrap();
        let ci = i.extract_context(&xi, &q).unwrap();
        assert!(max_diff(&cr.enc, &ib.to_real(&ci.enc)) < 0.05);
        let yr = r.encode_latent(&xr, &cr.enc, &q).unwrap();
        let yi = i.encode_latent(&xi, &ci.enc, &q).unwrap();
        assert!(max_diff(&yr, &ib.to_real(&yi)) < 0.05);
        let fr = r.decode_latent(&yr, &cr.dec, &q).unwrap();
        let fi2 = i.decode_latent(&yi, &ci.dec, &q).unwrap();
        assert!(max_diff(&fr, &ib.to_real(&fi2)) < 0.1);
        let rr = r.reconstruct(&fr, &q).unwrap();
        let ri = i.reconstruct(&fi2, &q).unwrap();
        assert!(max_diff(&rr, &ib.to_real(&ri)) < 0.1);
        assert_eq!(ib.saturated(), 0);
    }

    #[test]
    fn symbol_mapping_agrees_across_backends() {
        let ib = IntBackend::default();
        for qp in [0.0, 16.0, 32.0, 47.5, 63.0] {
            let q = QStep::new(crate::rate::qstep_of(qp)).unwrap();
            for v in [-3000i16, -700, -1, 0, 1, 255, 256, 511, 4000] {
                let real = v as f32 / 512.0;
                let (si, sr) = (ib.latent_symbol(v, &q), RealBackend.latent_symbol(real, &q));
                assert!((si - sr).abs() <= 1, "qp {qp} v {v}: {si} vs {sr}");
                let back = ib.latent_value(si, &q) as f64 / 512.0;
                assert!((back - si as f64 * q.value).abs() <= 1.0 / 1024.0 + 1e-9);
            }
        }
        assert_eq!(ib.hyper_symbol(768), 2);
        assert_eq!(ib.hyper_symbol(-768), -2);
        assert_eq!(ib.hyper_value(-3), -1536);
    }

    #[test]
    fn macs_accounting() {
        let (m, _) = models(32);
        let (enc, dec) = m.macs_per_frame(64, 64).unwrap();
        assert!(enc > 0 && dec > 0);
    }
}
