//! Raw 8-bit video frames: file I/O, edge padding, packing into network
//! tensors, and quality metrics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ColorSpace;
use crate::tensor::{concat_channels, depth_to_space, space_to_depth, Shape, Tensor};

/// One planar frame. YUV 4:2:0 holds a full-size Y plane and half-size U, V;
/// RGB holds three full-size planes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub colorspace: ColorSpace,
    pub width: usize,
    pub height: usize,
    pub planes: Vec<Vec<u8>>,
}

fn check_dims(cs: ColorSpace, width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!("frame size {width}x{height} must be positive")));
    }
    if cs == ColorSpace::Yuv420 && (!width.is_multiple_of(2) || !height.is_multiple_of(2)) {
        return Err(Error::invalid(format!("4:2:0 frames need even dimensions, got {width}x{height}")));
    }
    Ok(())
}

/// Width and height of each plane.
pub fn plane_dims(cs: ColorSpace, width: usize, height: usize) -> [(usize, usize); 3] {
    match cs {
        ColorSpace::Rgb => [(width, height); 3],
        ColorSpace::Yuv420 => [(width, height), (width / 2, height / 2), (width / 2, height / 2)],
    }
}

pub fn frame_bytes(cs: ColorSpace, width: usize, height: usize) -> usize {
    plane_dims(cs, width, height).iter().map(|(w, h)| w * h).sum()
}

pub fn plane_names(cs: ColorSpace) -> [&'static str; 3] {
    match cs {
        ColorSpace::Rgb => ["R", "G", "B"],
        ColorSpace::Yuv420 => ["Y", "U", "V"],
    }
}

impl Frame {
    pub fn new(cs: ColorSpace, width: usize, height: usize, planes: Vec<Vec<u8>>) -> Result<Self> {
        check_dims(cs, width, height)?;
        let dims = plane_dims(cs, width, height);
        if planes.len() != 3 || planes.iter().zip(&dims).any(|(p, (w, h))| p.len() != w * h) {
            return Err(Error::invalid(format!("plane sizes do not match {width}x{height} {cs}")));
        }
        Ok(Frame {
            colorspace: cs,
            width,
            height,
            planes,
        })
    }

    pub fn filled(cs: ColorSpace, width: usize, height: usize, value: u8) -> Result<Self> {
        check_dims(cs, width, height)?;
        let planes = plane_dims(cs, width, height)
            .iter()
            .map(|(w, h)| vec![value; w * h])
            .collect();
        Frame::new(cs, width, height, planes)
    }

    pub fn from_bytes(cs: ColorSpace, width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        check_dims(cs, width, height)?;
        if bytes.len() != frame_bytes(cs, width, height) {
            return Err(Error::invalid(format!(
                "{} bytes for a {width}x{height} {cs} frame",
                bytes.len()
            )));
        }
        let mut planes = Vec::with_capacity(3);
        let mut rest = bytes;
        for (w, h) in plane_dims(cs, width, height) {
            let (p, r) = rest.split_at(w * h);
            planes.push(p.to_vec());
            rest = r;
        }
        Frame::new(cs, width, height, planes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.planes.concat()
    }

    pub fn plane_dims(&self) -> [(usize, usize); 3] {
        plane_dims(self.colorspace, self.width, self.height)
    }

    /// Replicates the last row and column until both dimensions are
    /// multiples of `multiple`.
    pub fn pad_to_multiple(&self, multiple: usize) -> Result<Frame> {
        if multiple == 0 || (self.colorspace == ColorSpace::Yuv420 && !multiple.is_multiple_of(2)) {
            return Err(Error::invalid(format!("bad padding multiple {multiple}")));
        }
        let (w, h) = (self.width.next_multiple_of(multiple), self.height.next_multiple_of(multiple));
        if (w, h) == (self.width, self.height) {
            return Ok(self.clone());
        }
        let planes = self
            .planes
            .iter()
            .zip(self.plane_dims().iter().zip(plane_dims(self.colorspace, w, h)))
            .map(|(p, (&(sw, sh), (dw, dh)))| {
                let mut out = Vec::with_capacity(dw * dh);
                for y in 0..dh {
                    let row = &p[y.min(sh - 1) * sw..][..sw];
                    out.extend_from_slice(row);
                    out.extend(std::iter::repeat_n(row[sw - 1], dw - sw));
                }
                out
            })
            .collect();
        Frame::new(self.colorspace, w, h, planes)
    }

    /// Top-left `width x height` region.
    pub fn crop(&self, width: usize, height: usize) -> Result<Frame> {
        if width > self.width || height > self.height {
            return Err(Error::invalid(format!(
                "crop {width}x{height} exceeds {}x{}",
                self.width, self.height
            )));
        }
        check_dims(self.colorspace, width, height)?;
        let planes = self
            .planes
            .iter()
            .zip(self.plane_dims().iter().zip(plane_dims(self.colorspace, width, height)))
            .map(|(p, (&(sw, _), (dw, dh)))| (0..dh).flat_map(|y| p[y * sw..y * sw + dw].iter().copied()).collect())
            .collect();
        Frame::new(self.colorspace, width, height, planes)
    }

    /// Network input in `[0, 1]`: RGB as 3 channels, 4:2:0 as the four luma
    /// phases plus U and V at half resolution.
    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        let plane = |i: usize| -> Result<Tensor<f32>> {
            let (w, h) = self.plane_dims()[i];
            Tensor::new(Shape::new(1, h, w), self.planes[i].iter().map(|&v| v as f32 / 255.0).collect())
        };
        match self.colorspace {
            ColorSpace::Rgb => {
                let rg = concat_channels(&plane(0)?, &plane(1)?)?;
                concat_channels(&rg, &plane(2)?)
            }
            ColorSpace::Yuv420 => {
                let y = space_to_depth(&plane(0)?, 2)?;
                let yu = concat_channels(&y, &plane(1)?)?;
                concat_channels(&yu, &plane(2)?)
            }
        }
    }

    /// Inverse of [`Frame::to_tensor`], rounding and clamping to 8 bits.
    pub fn from_tensor(t: &Tensor<f32>, cs: ColorSpace) -> Result<Frame> {
        let s = t.shape();
        if s.c != cs.packed_channels() {
            return Err(Error::invalid(format!("{s} is not a packed {cs} frame")));
        }
        let to_u8 = |v: &[f32]| -> Vec<u8> { v.iter().map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8).collect() };
        match cs {
            ColorSpace::Rgb => Frame::new(cs, s.w, s.h, (0..3).map(|c| to_u8(t.channel(c))).collect()),
            ColorSpace::Yuv420 => {
                let luma = Tensor::new(Shape::new(4, s.h, s.w), t.data()[..4 * s.plane()].to_vec())?;
                let luma = depth_to_space(&luma, 2)?;
                Frame::new(
                    cs,
                    s.w * 2,
                    s.h * 2,
                    vec![to_u8(luma.data()), to_u8(t.channel(4)), to_u8(t.channel(5))],
                )
            }
        }
    }
}

/// Reads the first `frames` frames of a file holding whole frames.
pub fn load_video(path: impl AsRef<Path>, cs: ColorSpace, width: usize, height: usize, frames: usize) -> Result<Vec<Frame>> {
    check_dims(cs, width, height)?;
    let path = path.as_ref();
    let per = frame_bytes(cs, width, height);
    let len = std::fs::metadata(path)?.len() as usize;
    if !len.is_multiple_of(per) || len < per * frames {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!(
                "{}: {len} bytes is not a whole number of {per}-byte frames, or fewer than {frames}",
                path.display()
            ),
        )));
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut buf = vec![0u8; per];
    (0..frames)
        .map(|_| {
            r.read_exact(&mut buf)?;
            Frame::from_bytes(cs, width, height, &buf)
        })
        .collect()
}

pub fn save_video(path: impl AsRef<Path>, frames: &[Frame]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for f in frames {
        w.write_all(&f.to_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_yuv420(path: impl AsRef<Path>, width: usize, height: usize, frames: usize) -> Result<Vec<Frame>> {
    load_video(path, ColorSpace::Yuv420, width, height, frames)
}

pub fn save_yuv420(path: impl AsRef<Path>, frames: &[Frame]) -> Result<()> {
    if frames.iter().any(|f| f.colorspace != ColorSpace::Yuv420) {
        return Err(Error::invalid("save_yuv420 given a non-4:2:0 frame"));
    }
    save_video(path, frames)
}

/// `10 log10(255^2 / MSE)` per plane over the whole sequence; infinite when
/// the planes are identical.
pub fn psnr(a: &[Frame], b: &[Frame]) -> Result<[f64; 3]> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!("psnr over {} vs {} frames", a.len(), b.len())));
    }
    let mut sse = [0f64; 3];
    let mut count = [0usize; 3];
    for (fa, fb) in a.iter().zip(b) {
        if (fa.colorspace, fa.width, fa.height) != (fb.colorspace, fb.width, fb.height) {
            return Err(Error::invalid("psnr over frames of different formats"));
        }
        for p in 0..3 {
            sse[p] += fa.planes[p]
                .iter()
                .zip(&fb.planes[p])
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum::<f64>();
            count[p] += fa.planes[p].len();
        }
    }
    Ok(std::array::from_fn(|p| {
        let mse = sse[p] / count[p] as f64;
        if mse == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (255.0f64 * 255.0 / mse).log10()
        }
    }))
}

/// Bits per pixel of a whole stream over the original frame area.
pub fn bpp(stream_bytes: usize, width: usize, height: usize, frames: usize) -> f64 {
    stream_bytes as f64 * 8.0 / (width * height * frames.max(1)) as f64
}

/// Independent uniform noise in every sample, reproducible from `seed`.
pub fn noise_video(cs: ColorSpace, width: usize, height: usize, frames: usize, seed: u64) -> Result<Vec<Frame>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..frames)
        .map(|_| {
            let mut bytes = vec![0u8; frame_bytes(cs, width, height)];
            rng.fill(&mut bytes[..]);
            Frame::from_bytes(cs, width, height, &bytes)
        })
        .collect()
}

/// Smooth gradients and a moving square over light noise.
pub fn moving_pattern(cs: ColorSpace, width: usize, height: usize, frames: usize, seed: u64) -> Result<Vec<Frame>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = plane_dims(cs, width, height);
    (0..frames)
        .map(|t| {
            let planes = dims
                .iter()
                .enumerate()
                .map(|(p, &(pw, ph))| {
                    let sx = pw as f64 / width as f64;
                    let (ox, oy) = ((t * 2) as f64 * sx, t as f64 * sx);
                    (0..pw * ph)
                        .map(|i| {
                            let (x, y) = ((i % pw) as f64, (i / pw) as f64);
                            let mut v = 60.0 + 40.0 * p as f64 + 80.0 * (x / pw as f64) + 50.0 * ((y + oy) / 9.0).sin();
                            let (qx, qy) = (x - ox - pw as f64 / 4.0, y - oy - ph as f64 / 4.0);
                            if (0.0..pw as f64 / 3.0).contains(&qx.rem_euclid(pw as f64)) && (0.0..ph as f64 / 3.0).contains(&qy.rem_euclid(ph as f64)) {
                                v = 230.0 - 30.0 * p as f64;
                            }
                            (v + rng.gen_range(-4.0..4.0)).round().clamp(0.0, 255.0) as u8
                        })
                        .collect()
                })
                .collect();
            Frame::new(cs, width, height, planes)
        })
        .collect()
}
