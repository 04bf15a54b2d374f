//! Frame and sequence orchestration: the encoder and decoder sessions, the
//! overlapped two-lane schedule, and the drift experiment.

use std::sync::Arc;
use std::time::Instant;

use rayon::{ThreadPool, ThreadPoolBuilder};

use crate::bitstream::{read_stream, write_stream, FrameChunk, StreamHeader, CHUNK_HEADER_BYTES, HEADER_BYTES};
use crate::entropy::{decode_hyper, decode_latent_symbols, plan_hyper, two_step_plan, PriorParams};
use crate::error::{Error, Result};
use crate::model::{Backend, IntBackend, Mode, Model, RealBackend};
use crate::rate::{Qp, QpSchedule, RateEntry, RateModuleBank, DEFAULT_GOP_OFFSETS};
use crate::tensor::{concat_channels, Shape, Tensor};
use crate::video::Frame;
use crate::weights::{model_hash, Weights};

/// How a session schedules one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Parallelism {
    #[default]
    Serial,
    /// Entropy coding runs in a second lane alongside network inference.
    Overlapped,
}

fn pool(threads: usize) -> Result<Option<Arc<ThreadPool>>> {
    if threads == 0 {
        return Ok(None);
    }
    ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(|p| Some(Arc::new(p)))
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// Output of one encoded frame.
#[derive(Clone, Debug)]
pub struct EncodedFrame<S> {
    pub chunk: FrameChunk,
    /// Reference latent the encoder committed.
    pub f_t: Tensor<S>,
    /// Packed reconstruction, when requested.
    pub recon: Option<Tensor<S>>,
}

#[derive(Clone, Debug)]
pub struct DecodedFrame<S> {
    pub f_t: Tensor<S>,
    pub recon: Tensor<S>,
}

/// Encoder or decoder state for one sequence: the network, the bank, the qp
/// schedule, and the previous reference latent.
pub struct Session<B: Backend> {
    model: Arc<Model<B>>,
    bank: Arc<RateModuleBank>,
    schedule: QpSchedule,
    parallelism: Parallelism,
    pool: Option<Arc<ThreadPool>>,
    latent: Shape,
    f_prev: Tensor<B::Scalar>,
    frame_index: usize,
}

impl<B: Backend> Session<B>
where
    B::Scalar: Default,
{
    /// A session for frames padded to `width x height`.
    pub fn new(
        model: Arc<Model<B>>,
        bank: Arc<RateModuleBank>,
        schedule: QpSchedule,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cfg = *model.config();
        if bank.channels() != cfg.channels || bank.hyper_channels() != cfg.hyper_channels {
            return Err(Error::Config(format!(
                "bank is for C={} / C_hyper={}, model has {} / {}",
                bank.channels(),
                bank.hyper_channels(),
                cfg.channels,
                cfg.hyper_channels
            )));
        }
        let m = cfg.colorspace.pad_multiple();
        if width == 0 || height == 0 || !width.is_multiple_of(m) || !height.is_multiple_of(m) {
            return Err(Error::invalid(format!("{width}x{height} is not padded to a multiple of {m}")));
        }
        let latent = cfg.latent_shape(width, height);
        Ok(Session {
            model,
            bank,
            schedule,
            parallelism: Parallelism::Serial,
            pool: None,
            latent,
            f_prev: Tensor::zeros(latent),
            frame_index: 0,
        })
    }

    pub fn with_parallelism(mut self, p: Parallelism) -> Self {
        self.parallelism = p;
        self
    }

    /// Runs kernels on a private pool of `threads` workers (0 = global pool).
    pub fn with_threads(mut self, threads: usize) -> Result<Self> {
        self.pool = pool(threads)?;
        Ok(self)
    }

    pub fn model(&self) -> &Model<B> {
        &self.model
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    pub fn reference(&self) -> &Tensor<B::Scalar> {
        &self.f_prev
    }

    fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.pool {
            Some(p) => p.install(f),
            None => f(),
        }
    }

    fn join<RA: Send, RB: Send>(
        &self,
        a: impl FnOnce() -> RA + Send,
        b: impl FnOnce() -> RB + Send,
    ) -> (RA, RB) {
        match self.parallelism {
            Parallelism::Serial => {
                let ra = a();
                (ra, b())
            }
            Parallelism::Overlapped => rayon::join(a, b),
        }
    }

    fn entry(&self, qp: Qp) -> RateEntry {
        self.bank.entry(qp).into_owned()
    }

    /// Encodes the next (packed, padded) frame and commits the encoder-side
    /// reference latent.
    pub fn encode_frame(&mut self, frame: &Tensor<f32>, reconstruct: bool) -> Result<EncodedFrame<B::Scalar>> {
        let qp = self.schedule.effective_qp(self.frame_index);
        let out = self.install(|| self.encode_inner(frame, qp, reconstruct))?;
        self.f_prev = out.f_t.clone();
        self.frame_index += 1;
        Ok(out)
    }

    fn encode_inner(&self, frame: &Tensor<f32>, qp: Qp, reconstruct: bool) -> Result<EncodedFrame<B::Scalar>> {
        let m = &*self.model;
        let b = m.backend();
        let e = self.entry(qp);
        let qstep = e.qstep()?;
        let x = b.from_real(frame);
        let x_lat = m.patch_embed(&x)?;
        if x_lat.shape() != self.latent {
            return Err(Error::invalid(format!("frame gives latent {}, session expects {}", x_lat.shape(), self.latent)));
        }
        let ctx = m.extract_context(&self.f_prev, &e.q_f)?;
        let y = m.encode_latent(&x_lat, &ctx.enc, &e.q_e)?;
        let z = m.hyper_encode(&y)?;
        let (z_plan, z_hat) = plan_hyper(b, &z, &e.z_tables)?;
        let (prior1, hidden) = m.hyper_decode(&z_hat, &ctx.prior)?;
        let plan = two_step_plan(b, &y, &prior1, &qstep, |y1| m.step2_prior(y1, &hidden))?;

        let code = || -> Result<(Vec<u8>, Vec<u8>, Vec<u8>)> {
            Ok((z_plan.encode()?, plan.step1.encode()?, plan.step2.encode()?))
        };
        let infer = || -> Result<(Tensor<B::Scalar>, Option<Tensor<B::Scalar>>)> {
            let f_t = m.decode_latent(&plan.y_hat, &ctx.dec, &e.q_d)?;
            let recon = if reconstruct { Some(m.reconstruct(&f_t, &e.q_r)?) } else { None };
            Ok((f_t, recon))
        };
        let (bytes, net) = self.join(code, infer);
        let (z, y1, y2) = bytes?;
        let (f_t, recon) = net?;
        Ok(EncodedFrame {
            chunk: FrameChunk { qp, z, y1, y2 },
            f_t,
            recon,
        })
    }

    /// Decodes the next chunk. The reference latent is committed only when
    /// the whole chunk decodes; `tweak` may alter the new reference first.
    pub fn decode_frame_with(
        &mut self,
        chunk: &FrameChunk,
        tweak: impl FnOnce(&mut Tensor<B::Scalar>) + Send,
    ) -> Result<DecodedFrame<B::Scalar>> {
        let mut out = self.install(|| self.decode_inner(chunk))?;
        tweak(&mut out.f_t);
        self.f_prev = out.f_t.clone();
        self.frame_index += 1;
        Ok(out)
    }

    pub fn decode_frame(&mut self, chunk: &FrameChunk) -> Result<DecodedFrame<B::Scalar>> {
        self.decode_frame_with(chunk, |_| {})
    }

    fn decode_inner(&self, chunk: &FrameChunk) -> Result<DecodedFrame<B::Scalar>> {
        let m = &*self.model;
        let b = m.backend();
        let e = self.entry(chunk.qp);
        let qstep = e.qstep()?;
        let z_shape = m.config().hyper_shape(self.latent);

        let (z_hat, head) = self.join(
            || decode_hyper(b, &chunk.z, &e.z_tables, z_shape),
            || m.extract_head(&self.f_prev, &e.q_f),
        );
        let (ctx_prior, mid) = head?;
        let (prior1, hidden) = m.hyper_decode(&z_hat?, &ctx_prior)?;
        let (y1, tail) = self.join(
            || decode_latent_symbols(b, &chunk.y1, &prior1, &qstep),
            || m.extract_tail(mid, false),
        );
        let y1 = y1?;
        let (ctx_dec, _) = tail?;
        let prior2: PriorParams<B::Scalar> = m.step2_prior(&y1, &hidden)?;
        let y2 = decode_latent_symbols(b, &chunk.y2, &prior2, &qstep)?;
        let y_hat = concat_channels(&y1, &y2)?;
        let f_t = m.decode_latent(&y_hat, &ctx_dec, &e.q_d)?;
        let recon = m.reconstruct(&f_t, &e.q_r)?;
        Ok(DecodedFrame { f_t, recon })
    }
}

/// Sequence-level encoder options.
#[derive(Clone, Debug)]
pub struct EncodeSettings {
    pub mode: Mode,
    pub base_qp: Qp,
    pub gop_offsets: [i8; 8],
    pub parallelism: Parallelism,
    pub threads: usize,
    /// Also run reconstruction on the encoder side.
    pub reconstruct: bool,
}

impl Default for EncodeSettings {
    fn default() -> Self {
        EncodeSettings {
            mode: Mode::Int16,
            base_qp: Qp::integer(32).expect("in range"),
            gop_offsets: DEFAULT_GOP_OFFSETS,
            parallelism: Parallelism::Serial,
            threads: 0,
            reconstruct: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FrameStats {
    pub qp: Qp,
    /// Chunk bits, chunk header included.
    pub bits: usize,
    pub z_bytes: usize,
    pub y1_bytes: usize,
    pub y2_bytes: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct EncodedVideo {
    pub header: StreamHeader,
    pub bytes: Vec<u8>,
    pub frames: Vec<FrameStats>,
    /// Encoder-side reconstructions (cropped), when requested.
    pub recon: Option<Vec<Frame>>,
    /// Encoder-side reference latents, dequantized.
    pub references: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug)]
pub struct DecodedVideo {
    pub header: StreamHeader,
    pub frames: Vec<Frame>,
    pub references: Vec<Tensor<f32>>,
    pub seconds: Vec<f64>,
}

fn check_frames(frames: &[Frame]) -> Result<(usize, usize)> {
    let first = frames.first().ok_or_else(|| Error::invalid("no frames to encode"))?;
    if frames
        .iter()
        .any(|f| (f.colorspace, f.width, f.height) != (first.colorspace, first.width, first.height))
    {
        return Err(Error::invalid("frames differ in size or colorspace"));
    }
    Ok((first.width, first.height))
}

fn padded_dims(w: usize, h: usize, m: usize) -> (usize, usize) {
    (w.next_multiple_of(m), h.next_multiple_of(m))
}

/// Pads, encodes every frame with the GOP qp schedule, and writes the
/// container.
pub fn encode_video(
    weights: &Weights,
    bank: &RateModuleBank,
    frames: &[Frame],
    settings: &EncodeSettings,
) -> Result<EncodedVideo> {
    match settings.mode {
        Mode::Real => encode_with(Model::new(weights, RealBackend)?, weights, bank, frames, settings),
        Mode::Int16 => encode_with(Model::new(weights, IntBackend::default())?, weights, bank, frames, settings),
    }
}

fn encode_with<B: Backend>(
    model: Model<B>,
    weights: &Weights,
    bank: &RateModuleBank,
    frames: &[Frame],
    settings: &EncodeSettings,
) -> Result<EncodedVideo>
where
    B::Scalar: Default,
{
    let cfg = *model.config();
    let (w, h) = check_frames(frames)?;
    if frames[0].colorspace != cfg.colorspace {
        return Err(Error::Config(format!(
            "model expects {} input, frames are {}",
            cfg.colorspace, frames[0].colorspace
        )));
    }
    let (pw, ph) = padded_dims(w, h, cfg.colorspace.pad_multiple());
    let schedule = QpSchedule::new(settings.base_qp, settings.gop_offsets);
    let mut session = Session::new(Arc::new(model), Arc::new(bank.clone()), schedule, pw, ph)?
        .with_parallelism(settings.parallelism)
        .with_threads(settings.threads)?;
    let mut chunks = Vec::with_capacity(frames.len());
    let mut stats = Vec::with_capacity(frames.len());
    let mut recon = settings.reconstruct.then(Vec::new);
    let mut references = Vec::with_capacity(frames.len());
    for f in frames {
        let start = Instant::now();
        let x = f.pad_to_multiple(cfg.colorspace.pad_multiple())?.to_tensor()?;
        let out = session.encode_frame(&x, settings.reconstruct)?;
        let seconds = start.elapsed().as_secs_f64();
        let b = session.model().backend();
        if let (Some(list), Some(r)) = (recon.as_mut(), out.recon.as_ref()) {
            list.push(Frame::from_tensor(&b.to_real(r), cfg.colorspace)?.crop(w, h)?);
        }
        references.push(b.to_real(&out.f_t));
        stats.push(FrameStats {
            qp: out.chunk.qp,
            bits: out.chunk.bits(),
            z_bytes: out.chunk.z.len(),
            y1_bytes: out.chunk.y1.len(),
            y2_bytes: out.chunk.y2.len(),
            seconds,
        });
        chunks.push(out.chunk);
    }
    let header = StreamHeader {
        mode: settings.mode,
        config: cfg,
        width: w as u32,
        height: h as u32,
        frame_count: frames.len() as u32,
        base_qp: settings.base_qp,
        gop_offsets: settings.gop_offsets,
        model_hash: model_hash(weights, bank),
    };
    let bytes = write_stream(&header, &chunks)?;
    Ok(EncodedVideo {
        header,
        bytes,
        frames: stats,
        recon,
        references,
    })
}

/// Parses and decodes a whole stream after checking it was produced by the
/// same weights and bank.
pub fn decode_video(
    weights: &Weights,
    bank: &RateModuleBank,
    bytes: &[u8],
    parallelism: Parallelism,
    threads: usize,
) -> Result<DecodedVideo> {
    let (header, chunks) = read_stream(bytes)?;
    if header.config != weights.config {
        return Err(Error::Config(format!(
            "stream configuration {:?} does not match the weights {:?}",
            header.config, weights.config
        )));
    }
    let hash = model_hash(weights, bank);
    if header.model_hash != hash {
        return Err(Error::Config(format!(
            "model hash mismatch: stream {:016x}, loaded weights and bank {hash:016x}",
            header.model_hash
        )));
    }
    match header.mode {
        Mode::Real => decode_with(Model::new(weights, RealBackend)?, bank, header, &chunks, parallelism, threads),
        Mode::Int16 => decode_with(Model::new(weights, IntBackend::default())?, bank, header, &chunks, parallelism, threads),
    }
}

fn decode_with<B: Backend>(
    model: Model<B>,
    bank: &RateModuleBank,
    header: StreamHeader,
    chunks: &[FrameChunk],
    parallelism: Parallelism,
    threads: usize,
) -> Result<DecodedVideo>
where
    B::Scalar: Default,
{
    let cfg = header.config;
    let (w, h) = (header.width as usize, header.height as usize);
    let (pw, ph) = padded_dims(w, h, cfg.colorspace.pad_multiple());
    let schedule = QpSchedule::new(header.base_qp, header.gop_offsets);
    let mut session = Session::new(Arc::new(model), Arc::new(bank.clone()), schedule, pw, ph)?
        .with_parallelism(parallelism)
        .with_threads(threads)?;
    let mut frames = Vec::with_capacity(chunks.len());
    let mut references = Vec::with_capacity(chunks.len());
    let mut seconds = Vec::with_capacity(chunks.len());
    let mut offset = HEADER_BYTES;
    for (i, c) in chunks.iter().enumerate() {
        let start = Instant::now();
        let out = session
            .decode_frame(c)
            .map_err(|e| Error::stream(offset + CHUNK_HEADER_BYTES, Some(i), e.to_string()))?;
        seconds.push(start.elapsed().as_secs_f64());
        let b = session.model().backend();
        frames.push(Frame::from_tensor(&b.to_real(&out.recon), cfg.colorspace)?.crop(w, h)?);
        references.push(b.to_real(&out.f_t));
        offset += c.bits() / 8;
    }
    Ok(DecodedVideo {
        header,
        frames,
        references,
        seconds,
    })
}

/// Per-frame encoder/decoder divergence of the reference latent.
#[derive(Clone, Debug)]
pub struct DriftReport {
    pub mode: Mode,
    /// `max |f_enc - f_dec|`; infinite once the decoder lost sync.
    pub divergence: Vec<f64>,
    /// Frame at which the decoder failed, if it did.
    pub desync_at: Option<usize>,
}

impl DriftReport {
    pub fn first_nonzero(&self) -> Option<usize> {
        self.divergence.iter().position(|&d| d != 0.0)
    }

    pub fn is_non_decreasing(&self) -> bool {
        self.divergence.windows(2).all(|w| w[1] >= w[0])
    }
}

/// Encodes `frames`, then decodes the stream in an independent session,
/// optionally nudging the largest-magnitude element of the decoder's
/// reference latent at `perturb_frame` by one unit in the last place.
pub fn drift_report(
    weights: &Weights,
    bank: &RateModuleBank,
    frames: &[Frame],
    settings: &EncodeSettings,
    perturb_frame: Option<usize>,
) -> Result<DriftReport> {
    match settings.mode {
        Mode::Real => drift_with(RealBackend, weights, bank, frames, settings, perturb_frame),
        Mode::Int16 => drift_with(IntBackend::default(), weights, bank, frames, settings, perturb_frame),
    }
}

fn drift_with<B: Backend + Clone>(
    backend: B,
    weights: &Weights,
    bank: &RateModuleBank,
    frames: &[Frame],
    settings: &EncodeSettings,
    perturb_frame: Option<usize>,
) -> Result<DriftReport>
where
    B::Scalar: Default,
{
    let cfg = weights.config;
    let (w, h) = check_frames(frames)?;
    let (pw, ph) = padded_dims(w, h, cfg.colorspace.pad_multiple());
    let schedule = QpSchedule::new(settings.base_qp, settings.gop_offsets);
    let bank = Arc::new(bank.clone());
    let mut enc = Session::new(Arc::new(Model::new(weights, backend.clone())?), bank.clone(), schedule.clone(), pw, ph)?
        .with_parallelism(settings.parallelism)
        .with_threads(settings.threads)?;
    let mut dec = Session::new(Arc::new(Model::new(weights, backend.clone())?), bank, schedule, pw, ph)?
        .with_parallelism(settings.parallelism)
        .with_threads(settings.threads)?;
    let mut divergence = Vec::with_capacity(frames.len());
    let mut desync_at = None;
    for (i, f) in frames.iter().enumerate() {
        let x = f.pad_to_multiple(cfg.colorspace.pad_multiple())?.to_tensor()?;
        let e = enc.encode_frame(&x, false)?;
        if desync_at.is_some() {
            divergence.push(f64::INFINITY);
            continue;
        }
        let nudge = |t: &mut Tensor<B::Scalar>| {
            if perturb_frame == Some(i) {
                let mut real = backend.to_real(t).into_data();
                let k = (0..real.len())
                    .max_by(|&a, &b| real[a].abs().total_cmp(&real[b].abs()))
                    .unwrap_or(0);
                real[k] = real[k].next_up();
                *t = backend.from_real(&Tensor::new(t.shape(), real).expect("same shape"));
            }
        };
        match dec.decode_frame_with(&e.chunk, nudge) {
            Ok(d) => {
                let a = backend.to_real(&e.f_t);
                let b = backend.to_real(&d.f_t);
                let m = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(p, q)| (*p as f64 - *q as f64).abs())
                    .fold(0.0, f64::max);
                divergence.push(m);
            }
            Err(_) => {
                desync_at = Some(i);
                divergence.push(f64::INFINITY);
            }
        }
    }
    Ok(DriftReport {
        mode: settings.mode,
        divergence,
        desync_at,
    })
}
