//! Network parameters: canonical layer list, seeded initialization, and the
//! `NVCW` weight file.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::bytes::Reader;
use crate::error::{Error, Result};
use crate::integer::{quantize_layer, QuantScheme, QuantizedLayer};
use crate::model::{topology, CodecConfig, LayerRole};
use crate::rate::RateModuleBank;
use crate::tensor::ConvSpec;

const WEIGHT_MAGIC: &[u8; 4] = b"NVCW";
const WEIGHT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub spec: ConvSpec,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    /// Precomputed int16 parameters; derived from the real ones when absent.
    pub int16: Option<QuantizedLayer>,
}

impl LayerWeights {
    pub fn new(spec: ConvSpec, weight: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        spec.validate()?;
        if weight.len() != spec.weight_len() || bias.len() != spec.out_channels {
            return Err(Error::invalid(format!(
                "layer {spec:?}: {} weights / {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(LayerWeights {
            spec,
            weight,
            bias,
            int16: None,
        })
    }

    pub fn quantized(&self, scheme: QuantScheme) -> Result<QuantizedLayer> {
        match &self.int16 {
            Some(q) => Ok(q.clone()),
            None => quantize_layer(&self.weight, &self.bias, &self.spec, scheme),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub config: CodecConfig,
    pub layers: Vec<LayerWeights>,
}

fn init_gain(role: LayerRole) -> f64 {
    match role {
        LayerRole::Plain => 1.0,
        LayerRole::Expand => 1.0,
        LayerRole::Depthwise => 0.8,
        LayerRole::Project => 0.5,
        LayerRole::Temporal => 0.9,
        LayerRole::Head => 0.5,
    }
}

impl Weights {
    pub fn new(config: CodecConfig, layers: Vec<LayerWeights>) -> Result<Self> {
        config.validate()?;
        let topo = topology(&config);
        if topo.len() != layers.len() {
            return Err(Error::Config(format!(
                "weights have {} layers, configuration needs {}",
                layers.len(),
                topo.len()
            )));
        }
        for ((name, spec, _), l) in topo.iter().zip(&layers) {
            if *spec != l.spec {
                return Err(Error::Config(format!("layer {name}: expected {spec:?}, found {:?}", l.spec)));
            }
        }
        Ok(Weights { config, layers })
    }

    /// Deterministic weights from `seed`: uniform with variance
    /// `gain^2 / fan_in`, small biases.
    pub fn seeded(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = topology(&config)
            .into_iter()
            .map(|(_, spec, role)| {
                let fan_in = (spec.in_per_group() * spec.kernel.0 * spec.kernel.1) as f64;
                let a = init_gain(role) * (3.0 / fan_in).sqrt();
                let weight = (0..spec.weight_len())
                    .map(|_| rng.gen_range(-a..a) as f32)
                    .collect();
                let bias = (0..spec.out_channels)
                    .map(|_| rng.gen_range(-0.02..0.02) as f32)
                    .collect();
                LayerWeights::new(spec, weight, bias)
            })
            .collect::<Result<Vec<_>>>()?;
        Weights::new(config, layers)
    }

    /// Fills in the int16 parameters of every layer.
    pub fn with_int16(mut self, scheme: QuantScheme) -> Result<Self> {
        for l in &mut self.layers {
            if l.int16.is_none() {
                l.int16 = Some(quantize_layer(&l.weight, &l.bias, &l.spec, scheme)?);
            }
        }
        Ok(self)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.push(WEIGHT_VERSION);
        out.extend_from_slice(&self.config.to_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            write_spec(&mut out, &l.spec);
            for v in l.weight.iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            match &l.int16 {
                None => out.push(0),
                Some(q) => {
                    out.push(1);
                    for v in q.weight.iter().chain(&q.bias) {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |e: Error| Error::Config(format!("weight file: {e}"));
        let mut r = Reader::new(bytes);
        if r.take(4).map_err(bad)? != WEIGHT_MAGIC {
            return Err(Error::Config("bad weight file magic".into()));
        }
        let version = r.u8().map_err(bad)?;
        if version != WEIGHT_VERSION {
            return Err(Error::Config(format!("unsupported weight file version {version}")));
        }
        let config = CodecConfig::read(&mut r).map_err(bad)?;
        let count = r.u32().map_err(bad)? as usize;
        if count > 4096 {
            return Err(Error::Config(format!("implausible layer count {count}")));
        }
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let spec = read_spec(&mut r).map_err(bad)?;
            spec.validate().map_err(bad)?;
            let weight = (0..spec.weight_len()).map(|_| r.f32()).collect::<Result<Vec<_>>>().map_err(bad)?;
            let bias = (0..spec.out_channels).map(|_| r.f32()).collect::<Result<Vec<_>>>().map_err(bad)?;
            let mut layer = LayerWeights::new(spec, weight, bias)?;
            match r.u8().map_err(bad)? {
                0 => {}
                1 => {
                    let w = (0..spec.weight_len()).map(|_| r.i16()).collect::<Result<Vec<_>>>().map_err(bad)?;
                    let b = (0..spec.out_channels).map(|_| r.i16()).collect::<Result<Vec<_>>>().map_err(bad)?;
                    layer.int16 = Some(QuantizedLayer {
                        spec,
                        weight: w,
                        bias: b,
                        max_error: 0.0,
                        saturated: 0,
                    });
                }
                flag => return Err(Error::Config(format!("bad int16 flag {flag}"))),
            }
            layers.push(layer);
        }
        if !r.is_empty() {
            return Err(Error::Config(format!("{} trailing bytes in weight file", r.remaining())));
        }
        Weights::new(config, layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// First 8 bytes (little-endian) of SHA-256 over the serialized weights
/// followed by the serialized bank.
pub fn model_hash(weights: &Weights, bank: &RateModuleBank) -> u64 {
    let mut h = Sha256::new();
    h.update(weights.to_bytes());
    h.update(bank.to_bytes());
    let d = h.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&d.as_slice()[..8]);
    u64::from_le_bytes(first)
}

fn write_spec(out: &mut Vec<u8>, s: &ConvSpec) {
    out.extend_from_slice(&(s.in_channels as u16).to_le_bytes());
    out.extend_from_slice(&(s.out_channels as u16).to_le_bytes());
    out.push(s.kernel.0 as u8);
    out.push(s.kernel.1 as u8);
    out.push(s.stride as u8);
    out.push(s.padding as u8);
    out.extend_from_slice(&(s.groups as u16).to_le_bytes());
}

fn read_spec(r: &mut Reader<'_>) -> Result<ConvSpec> {
    Ok(ConvSpec {
        in_channels: r.u16()? as usize,
        out_channels: r.u16()? as usize,
        kernel: (r.u8()? as usize, r.u8()? as usize),
        stride: r.u8()? as usize,
        padding: r.u8()? as usize,
        groups: r.u16()? as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CodecConfig {
        CodecConfig {
            channels: 8,
            hyper_channels: 4,
            ..CodecConfig::default()
        }
    }

    #[test]
    fn seeded_is_reproducible() {
        let a = Weights::seeded(small(), 0).unwrap();
        assert_eq!(a, Weights::seeded(small(), 0).unwrap());
        assert_ne!(a, Weights::seeded(small(), 1).unwrap());
        assert!(a.layers.iter().flat_map(|l| &l.weight).all(|w| w.abs() < 4.0));
    }

    #[test]
    fn file_round_trip() {
        let w = Weights::seeded(small(), 3).unwrap();
        let bytes = w.to_bytes();
        assert_eq!(&bytes[..4], b"NVCW");
        assert_eq!(Weights::from_bytes(&bytes).unwrap(), w);
        let wi = w.clone().with_int16(QuantScheme::default()).unwrap();
        let back = Weights::from_bytes(&wi.to_bytes()).unwrap();
        for (a, b) in back.layers.iter().zip(&wi.layers) {
            let (qa, qb) = (a.int16.as_ref().unwrap(), b.int16.as_ref().unwrap());
            assert_eq!((&qa.weight, &qa.bias), (&qb.weight, &qb.bias));
        }
        assert!(Weights::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Weights::from_bytes(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(Weights::from_bytes(&magic).is_err());
    }

    #[test]
    fn topology_mismatch_is_rejected() {
        let w = Weights::seeded(small(), 0).unwrap();
        let mut layers = w.layers.clone();
        layers.pop();
        assert!(matches!(Weights::new(small(), layers), Err(Error::Config(_))));
        let other = CodecConfig {
            channels: 16,
            hyper_channels: 8,
            ..CodecConfig::default()
        };
        assert!(Weights::new(other, w.layers).is_err());
    }

    #[test]
    fn hash_tracks_weights_and_bank() {
        let w = Weights::seeded(small(), 0).unwrap();
        let b = RateModuleBank::seeded(8, 4, 0);
        let h = model_hash(&w, &b);
        assert_eq!(h, model_hash(&w, &b));
        assert_ne!(h, model_hash(&Weights::seeded(small(), 1).unwrap(), &b));
        assert_ne!(h, model_hash(&w, &RateModuleBank::seeded(8, 4, 1)));
    }
}
