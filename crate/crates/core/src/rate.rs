//! Rate control: the 64-entry module bank, qp interpolation, the qp to
//! quantization-step mapping, and hierarchical GOP offsets.

use std::borrow::Cow;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::entropy::{discretize_laplace, CdfTable};
use crate::error::{Error, Result};

pub const QP_COUNT: usize = 64;
pub const QP_MAX: u8 = 63;
/// Hierarchical offsets applied inside each group of 8 frames.
pub const DEFAULT_GOP_OFFSETS: [i8; 8] = [0, 8, 0, 4, 0, 4, 0, 4];

/// Alphabet of hyper latent symbols.
pub const Z_MIN: i32 = -32;
pub const Z_MAX: i32 = 31;

const BANK_MAGIC: &[u8; 4] = b"NVCB";
const BANK_VERSION: u8 = 1;

/// A quantization parameter in `[0, 63]` with 1/256 resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Qp(u16);

impl Qp {
    pub const FRAC_BITS: u32 = 8;
    const ONE: u16 = 1 << Self::FRAC_BITS;

    pub fn new(qp: f64) -> Result<Self> {
        if !(0.0..=QP_MAX as f64).contains(&qp) {
            return Err(Error::invalid(format!("qp {qp} outside [0, {QP_MAX}]")));
        }
        Ok(Qp((qp * Self::ONE as f64).round() as u16))
    }

    pub fn integer(qp: u8) -> Result<Self> {
        if qp > QP_MAX {
            return Err(Error::invalid(format!("qp {qp} outside [0, {QP_MAX}]")));
        }
        Ok(Qp(qp as u16 * Self::ONE))
    }

    pub fn from_raw(raw: u16) -> Result<Self> {
        if raw > QP_MAX as u16 * Self::ONE {
            return Err(Error::invalid(format!("raw qp {raw} outside [0, {QP_MAX}]")));
        }
        Ok(Qp(raw))
    }

    pub fn raw(self) -> u16 {
        self.0
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / Self::ONE as f64
    }

    pub fn floor(self) -> u8 {
        (self.0 >> Self::FRAC_BITS) as u8
    }

    pub fn frac_raw(self) -> u16 {
        self.0 & (Self::ONE - 1)
    }

    pub fn is_integral(self) -> bool {
        self.frac_raw() == 0
    }

    /// Index of the nearest integer qp, ties to the lower one.
    pub fn nearest(self) -> u8 {
        self.floor() + (self.frac_raw() > Self::ONE / 2) as u8
    }
}

impl fmt::Display for Qp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_integral() {
            write!(f, "{}", self.floor())
        } else {
            write!(f, "{}", self.value())
        }
    }
}

/// `2^((qp - 32) / 8)`.
pub fn qstep_of(qp: f64) -> f64 {
    ((qp - 32.0) / 8.0).exp2()
}

/// A latent quantization step in real form and in Q16.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QStep {
    pub value: f64,
    pub q16: i64,
}

impl QStep {
    pub fn new(value: f64) -> Result<Self> {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::invalid(format!("qstep {value} must be positive")));
        }
        let q16 = (value * 65536.0).round() as i64;
        if q16 < 1 {
            return Err(Error::invalid(format!("qstep {value} below Q16 resolution")));
        }
        Ok(QStep { value, q16 })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QpSchedule {
    pub base: Qp,
    pub gop_offsets: [i8; 8],
}

impl QpSchedule {
    pub fn new(base: Qp, gop_offsets: [i8; 8]) -> Self {
        QpSchedule { base, gop_offsets }
    }

    pub fn effective_qp(&self, frame_index: usize) -> Qp {
        let off = self.gop_offsets[frame_index % 8] as i32 * Qp::ONE as i32;
        let raw = (self.base.0 as i32 + off).clamp(0, QP_MAX as i32 * Qp::ONE as i32);
        Qp(raw as u16)
    }
}

/// One bank entry: the four channel scale vectors, the per-channel `z` tables
/// and the latent quantization step.
#[derive(Clone, Debug, PartialEq)]
pub struct RateEntry {
    pub q_e: Vec<f32>,
    pub q_d: Vec<f32>,
    pub q_f: Vec<f32>,
    pub q_r: Vec<f32>,
    pub z_tables: Vec<CdfTable>,
    pub qstep: f64,
}

impl RateEntry {
    pub fn qstep(&self) -> Result<QStep> {
        QStep::new(self.qstep)
    }

    fn check(&self, c: usize, ch: usize) -> Result<()> {
        for (name, v) in [("q_e", &self.q_e), ("q_d", &self.q_d), ("q_f", &self.q_f), ("q_r", &self.q_r)] {
            if v.len() != c {
                return Err(Error::Config(format!("{name} has {} entries, expected {c}", v.len())));
            }
            if let Some(x) = v.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
                return Err(Error::Config(format!("{name} contains non-positive scale {x}")));
            }
        }
        if self.z_tables.len() != ch {
            return Err(Error::Config(format!(
                "{} z tables, expected {ch}",
                self.z_tables.len()
            )));
        }
        if !(self.qstep.is_finite() && self.qstep > 0.0) {
            return Err(Error::Config(format!("qstep {} must be positive", self.qstep)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateModuleBank {
    channels: usize,
    hyper_channels: usize,
    entries: Vec<RateEntry>,
}

fn lerp(a: &[f32], b: &[f32], t: f64) -> Vec<f32> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 + (y as f64 - x as f64) * t) as f32)
        .collect()
}

/// Scale of the seeded hyper prior at `qp`.
fn seeded_z_scale(qp: f64) -> f64 {
    (3.0 * (-(qp - 32.0) / 20.0).exp2()).max(0.1)
}

impl RateModuleBank {
    pub fn new(channels: usize, hyper_channels: usize, entries: Vec<RateEntry>) -> Result<Self> {
        if entries.len() != QP_COUNT {
            return Err(Error::Config(format!("bank needs {QP_COUNT} entries, got {}", entries.len())));
        }
        for (i, e) in entries.iter().enumerate() {
            e.check(channels, hyper_channels)
                .map_err(|err| Error::Config(format!("entry {i}: {err}")))?;
            if e.z_tables.iter().any(|t| t.alphabet() != (Z_MIN, Z_MAX)) {
                return Err(Error::Config(format!("entry {i}: z table alphabet must be {Z_MIN}..={Z_MAX}")));
            }
        }
        if entries.windows(2).any(|w| w[1].qstep <= w[0].qstep) {
            return Err(Error::Config("qstep must increase strictly with qp".into()));
        }
        Ok(RateModuleBank {
            channels,
            hyper_channels,
            entries,
        })
    }

    /// Deterministic bank for untrained models: encoder scales shrink with qp,
    /// decoder scales invert them, and the `z` prior narrows as qp grows.
    pub fn seeded(channels: usize, hyper_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e76_6362);
        let jitter_e: Vec<f64> = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let jitter_f: Vec<f64> = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let jitter_r: Vec<f64> = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let jitter_z: Vec<f64> = (0..hyper_channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let entries = (0..QP_COUNT)
            .map(|qp| {
                let qp = qp as f64;
                let base = (-(qp - 32.0) / 24.0).exp2();
                let q_e: Vec<f32> = jitter_e.iter().map(|u| (base * (1.0 + 0.1 * u)) as f32).collect();
                let q_d = q_e.iter().map(|&v| 1.0 / v).collect();
                let wobble = |j: &[f64]| -> Vec<f32> {
                    j.iter().map(|u| (1.0 + 0.05 * u * (qp / 63.0 - 0.5)) as f32).collect()
                };
                let bz = seeded_z_scale(qp);
                RateEntry {
                    q_e,
                    q_d,
                    q_f: wobble(&jitter_f),
                    q_r: wobble(&jitter_r),
                    z_tables: jitter_z
                        .iter()
                        .map(|u| discretize_laplace(0.0, bz * (1.0 + 0.1 * u), Z_MIN, Z_MAX))
                        .collect(),
                    qstep: qstep_of(qp),
                }
            })
            .collect();
        RateModuleBank::new(channels, hyper_channels, entries).expect("seeded bank is valid")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn hyper_channels(&self) -> usize {
        self.hyper_channels
    }

    pub fn entries(&self) -> &[RateEntry] {
        &self.entries
    }

    pub fn select(&self, qp: u8) -> Result<&RateEntry> {
        self.entries
            .get(qp as usize)
            .ok_or_else(|| Error::invalid(format!("qp {qp} outside [0, {QP_MAX}]")))
    }

    /// Entry for a real-valued qp: scale vectors are linear between the two
    /// neighbours, `z` tables come from the nearest entry and qstep is
    /// geometric. Integral qp returns the stored entry unchanged.
    pub fn interpolate(&self, qp: f64) -> Result<RateEntry> {
        Ok(self.entry(Qp::new(qp)?).into_owned())
    }

    pub fn entry(&self, qp: Qp) -> Cow<'_, RateEntry> {
        let lo = qp.floor() as usize;
        if qp.is_integral() {
            return Cow::Borrowed(&self.entries[lo]);
        }
        let (a, b) = (&self.entries[lo], &self.entries[lo + 1]);
        let t = qp.frac_raw() as f64 / Qp::ONE as f64;
        Cow::Owned(RateEntry {
            q_e: lerp(&a.q_e, &b.q_e, t),
            q_d: lerp(&a.q_d, &b.q_d, t),
            q_f: lerp(&a.q_f, &b.q_f, t),
            q_r: lerp(&a.q_r, &b.q_r, t),
            z_tables: self.entries[qp.nearest() as usize].z_tables.clone(),
            qstep: a.qstep.powf(1.0 - t) * b.qstep.powf(t),
        })
    }

    /// Serialized bank, checksum included.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BANK_MAGIC);
        out.push(BANK_VERSION);
        out.extend_from_slice(&(self.channels as u16).to_le_bytes());
        out.extend_from_slice(&(self.hyper_channels as u16).to_le_bytes());
        out.extend_from_slice(&(Z_MIN as i16).to_le_bytes());
        out.extend_from_slice(&(Z_MAX as i16).to_le_bytes());
        out.extend_from_slice(&(QP_COUNT as u16).to_le_bytes());
        for e in &self.entries {
            for v in [&e.q_e, &e.q_d, &e.q_f, &e.q_r] {
                for x in v.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            for t in &e.z_tables {
                for f in t.frequencies() {
                    out.extend_from_slice(&(f as u16).to_le_bytes());
                }
            }
            out.extend_from_slice(&e.qstep.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(digest.as_slice());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 + 15 {
            return Err(Error::Config("bank file too short".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Config("bank checksum mismatch".into()));
        }
        let mut r = crate::bytes::Reader::new(body);
        let bad = |e: Error| Error::Config(format!("bank file: {e}"));
        if r.take(4).map_err(bad)? != BANK_MAGIC {
            return Err(Error::Config("bad bank magic".into()));
        }
        let version = r.u8().map_err(bad)?;
        if version != BANK_VERSION {
            return Err(Error::Config(format!("unsupported bank version {version}")));
        }
        let c = r.u16().map_err(bad)? as usize;
        let ch = r.u16().map_err(bad)? as usize;
        let zmin = r.i16().map_err(bad)? as i32;
        let zmax = r.i16().map_err(bad)? as i32;
        if (zmin, zmax) != (Z_MIN, Z_MAX) {
            return Err(Error::Config(format!("unsupported z alphabet {zmin}..={zmax}")));
        }
        let count = r.u16().map_err(bad)? as usize;
        if count != QP_COUNT {
            return Err(Error::Config(format!("bank has {count} entries, expected {QP_COUNT}")));
        }
        let n = (Z_MAX - Z_MIN + 1) as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let mut vecs = Vec::with_capacity(4);
            for _ in 0..4 {
                vecs.push((0..c).map(|_| r.f32()).collect::<Result<Vec<_>>>().map_err(bad)?);
            }
            let z_tables = (0..ch)
                .map(|_| {
                    let freqs = (0..n).map(|_| r.u16().map(u32::from)).collect::<Result<Vec<_>>>()?;
                    CdfTable::from_frequencies(Z_MIN, &freqs)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(bad)?;
            let qstep = r.f64().map_err(bad)?;
            let q_r = vecs.pop().unwrap_or_default();
            let q_f = vecs.pop().unwrap_or_default();
            let q_d = vecs.pop().unwrap_or_default();
            let q_e = vecs.pop().unwrap_or_default();
            entries.push(RateEntry {
                q_e,
                q_d,
                q_f,
                q_r,
                z_tables,
                qstep,
            });
        }
        if !r.is_empty() {
            return Err(Error::Config(format!("{} trailing bytes in bank file", r.remaining())));
        }
        RateModuleBank::new(c, ch, entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank() -> RateModuleBank {
        RateModuleBank::seeded(8, 4, 0)
    }

    #[test]
    fn qstep_closed_form() {
        assert_eq!(qstep_of(32.0), 1.0);
        assert_eq!(qstep_of(40.0), 2.0);
        assert_eq!(qstep_of(0.0), 0.0625);
        assert!((0..63).all(|q| qstep_of(q as f64 + 1.0) > qstep_of(q as f64)));
    }

    #[test]
    fn effective_qp_follows_offsets() {
        let s = QpSchedule::new(Qp::integer(20).unwrap(), DEFAULT_GOP_OFFSETS);
        assert_eq!(s.effective_qp(0), Qp::integer(20).unwrap());
        assert_eq!(s.effective_qp(1), Qp::integer(28).unwrap());
        assert_eq!(s.effective_qp(9), Qp::integer(28).unwrap());
        let s = QpSchedule::new(Qp::integer(60).unwrap(), DEFAULT_GOP_OFFSETS);
        assert_eq!(s.effective_qp(1), Qp::integer(63).unwrap());
        let s = QpSchedule::new(Qp::integer(2).unwrap(), [-5, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(s.effective_qp(0), Qp::integer(0).unwrap());
    }

    #[test]
    fn qp_bounds() {
        assert!(Qp::new(63.0).is_ok());
        assert!(Qp::new(63.01).is_err());
        assert!(Qp::new(-0.1).is_err());
        assert!(Qp::integer(64).is_err());
        assert_eq!(Qp::new(10.5).unwrap().nearest(), 10);
        assert_eq!(Qp::new(10.6).unwrap().nearest(), 11);
        assert_eq!(Qp::new(10.4).unwrap().nearest(), 10);
    }

    #[test]
    fn select_entry_bounds() {
        let b = bank();
        assert_eq!(b.select(0).unwrap(), &b.entries()[0]);
        assert_eq!(b.select(63).unwrap(), &b.entries()[63]);
        assert!(b.select(64).is_err());
    }

    #[test]
    fn integral_interpolation_is_exact() {
        let b = bank();
        for q in 0..=63u8 {
            assert_eq!(&b.interpolate(q as f64).unwrap(), b.select(q).unwrap());
        }
        assert!(b.interpolate(63.5).is_err());
    }

    #[test]
    fn midpoint_interpolation() {
        let mut b = bank();
        b.entries[10].q_e = vec![1.0; 8];
        b.entries[11].q_e = vec![3.0; 8];
        let e = b.interpolate(10.5).unwrap();
        assert_eq!(e.q_e, vec![2.0; 8]);
        assert_eq!(e.z_tables, b.entries[10].z_tables);
        let e = b.interpolate(10.4).unwrap();
        assert_eq!(e.z_tables, b.entries[10].z_tables);
        let e = b.interpolate(10.75).unwrap();
        assert_eq!(e.z_tables, b.entries[11].z_tables);
        let want = (b.entries[10].qstep * b.entries[11].qstep).sqrt();
        assert!((b.interpolate(10.5).unwrap().qstep - want).abs() < 1e-12);
    }

    #[test]
    fn seeded_bank_invariants() {
        let b = bank();
        assert_eq!(b.entries().len(), 64);
        assert!(b.entries().windows(2).all(|w| w[1].qstep > w[0].qstep));
        assert_ne!(b.entries()[0].z_tables, b.entries()[63].z_tables);
        for e in b.entries() {
            for v in [&e.q_e, &e.q_d, &e.q_f, &e.q_r] {
                assert!(v.iter().all(|&x| x > 0.0 && x < 4.0));
            }
        }
        assert_eq!(RateModuleBank::seeded(8, 4, 0), b);
        assert_ne!(RateModuleBank::seeded(8, 4, 1), b);
    }

    #[test]
    fn bank_file_round_trip() {
        let b = bank();
        let bytes = b.to_bytes();
        assert_eq!(&bytes[..4], b"NVCB");
        assert_eq!(RateModuleBank::from_bytes(&bytes).unwrap(), b);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(RateModuleBank::from_bytes(&bad).is_err());
        assert!(RateModuleBank::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bank.nvcb");
        b.save(&p).unwrap();
        assert_eq!(RateModuleBank::load(&p).unwrap(), b);
    }
}
