//! Entropy coding: the range coder, its frequency tables, and the probability
//! models for the hyper latent `z` (static per-channel tables from the rate
//! bank) and the main latent `y` (two-step mean/scale model).

mod laplace;
mod range;

pub use laplace::{
    discretize_laplace, discretize_laplace_q16, scale_level, scale_levels_q16, y_tables, SCALE_LEVELS, SCALE_MIN,
    Y_MAX, Y_MIN,
};
pub use range::{range_decode, range_encode, RangeDecoder, RangeEncoder, TOTAL, TOTAL_BITS};

use crate::error::{Error, Result};
use crate::rate::QStep;
use crate::tensor::{chunk2, concat_channels, Shape, Tensor};

/// Cumulative frequencies over a contiguous symbol alphabet. `cum[0] = 0`,
/// `cum[n] = 65536`, strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    min: i32,
    cum: Vec<u32>,
}

impl CdfTable {
    pub fn from_frequencies(min: i32, freqs: &[u32]) -> Result<Self> {
        if freqs.is_empty() {
            return Err(Error::invalid("empty frequency table"));
        }
        if freqs.contains(&0) {
            return Err(Error::invalid("every symbol needs frequency >= 1"));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u64;
        cum.push(0);
        for &f in freqs {
            acc += f as u64;
            if acc > TOTAL as u64 {
                break;
            }
            cum.push(acc as u32);
        }
        if acc != TOTAL as u64 {
            return Err(Error::invalid(format!("frequencies sum to {acc}, expected {TOTAL}")));
        }
        Ok(CdfTable { min, cum })
    }

    pub fn uniform(min: i32, max: i32) -> Result<Self> {
        let n = (max - min + 1) as u32;
        if max < min || n > TOTAL {
            return Err(Error::invalid(format!("bad alphabet {min}..={max}")));
        }
        let mut freqs = vec![TOTAL / n; n as usize];
        for f in freqs.iter_mut().take((TOTAL % n) as usize) {
            *f += 1;
        }
        Self::from_frequencies(min, &freqs)
    }

    pub fn min_symbol(&self) -> i32 {
        self.min
    }

    pub fn max_symbol(&self) -> i32 {
        self.min + self.len() as i32 - 1
    }

    pub fn alphabet(&self) -> (i32, i32) {
        (self.min_symbol(), self.max_symbol())
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cum(&self) -> &[u32] {
        &self.cum
    }

    pub fn frequencies(&self) -> Vec<u32> {
        self.cum.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub(crate) fn interval(&self, idx: usize) -> (u32, u32) {
        (self.cum[idx], self.cum[idx + 1] - self.cum[idx])
    }

    pub fn symbol_interval(&self, s: i32) -> Option<(u32, u32)> {
        let idx = s.checked_sub(self.min)?;
        if idx < 0 || idx as usize >= self.len() {
            return None;
        }
        Some(self.interval(idx as usize))
    }

    pub fn frequency(&self, s: i32) -> Option<u32> {
        self.symbol_interval(s).map(|(_, f)| f)
    }

    pub fn probability(&self, s: i32) -> Option<f64> {
        self.frequency(s).map(|f| f as f64 / TOTAL as f64)
    }

    /// Ideal code length of `s` in bits.
    pub fn cost_bits(&self, s: i32) -> Option<f64> {
        self.probability(s).map(|p| -p.log2())
    }

    /// Index of the symbol whose interval contains `target`.
    pub(crate) fn index_of(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }

    pub fn clamp(&self, s: i32) -> i32 {
        s.clamp(self.min_symbol(), self.max_symbol())
    }
}

/// Per-element `(mean, scale)` of the `y` prior, in the arithmetic mode `S`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorParams<S> {
    pub mean: Tensor<S>,
    pub scale: Tensor<S>,
}

impl<S: Copy> PriorParams<S> {
    pub fn new(mean: Tensor<S>, scale: Tensor<S>) -> Result<Self> {
        if mean.shape() != scale.shape() {
            return Err(Error::invalid(format!(
                "prior mean {} vs scale {}",
                mean.shape(),
                scale.shape()
            )));
        }
        Ok(PriorParams { mean, scale })
    }

    pub fn shape(&self) -> Shape {
        self.mean.shape()
    }
}

/// Conversion between latent values of one arithmetic mode and coded symbols.
pub trait LatentQuantizer {
    type Scalar: Copy + Send + Sync;

    /// `round(y / qstep)`.
    fn latent_symbol(&self, y: Self::Scalar, qstep: &QStep) -> i32;
    /// `s * qstep`, in the mode's representation.
    fn latent_value(&self, s: i32, qstep: &QStep) -> Self::Scalar;
    /// Integer mean offset `round(mean / qstep)` and table index of
    /// `scale / qstep` among the fixed scale levels.
    fn prior_location(&self, mean: Self::Scalar, scale: Self::Scalar, qstep: &QStep) -> (i32, usize);
    /// `round(z)`.
    fn hyper_symbol(&self, z: Self::Scalar) -> i32;
    fn hyper_value(&self, s: i32) -> Self::Scalar;
}

/// Symbols ready for the range coder, each paired with its table.
#[derive(Clone, Debug)]
pub struct SymbolPlan<'t> {
    pub symbols: Vec<i32>,
    pub tables: Vec<&'t CdfTable>,
}

impl SymbolPlan<'_> {
    pub fn encode(&self) -> Result<Vec<u8>> {
        range_encode(&self.symbols, &self.tables)
    }

    /// `sum -log2 p(s)` under the planned tables.
    pub fn ideal_bits(&self) -> f64 {
        self.symbols
            .iter()
            .zip(&self.tables)
            .map(|(&s, t)| t.cost_bits(s).unwrap_or(f64::INFINITY))
            .sum()
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

/// Quantizes one group of `y` channels against its prior. Residuals
/// `round(y / qstep) - round(mean / qstep)` saturate to the `y` alphabet; the
/// returned tensor is the reconstruction the decoder will see.
pub fn plan_latent<Q: LatentQuantizer>(
    q: &Q,
    y: &Tensor<Q::Scalar>,
    prior: &PriorParams<Q::Scalar>,
    qstep: &QStep,
) -> Result<(SymbolPlan<'static>, Tensor<Q::Scalar>)> {
    if y.shape() != prior.shape() {
        return Err(Error::invalid(format!(
            "latent {} vs prior {}",
            y.shape(),
            prior.shape()
        )));
    }
    let tables = y_tables();
    let n = y.shape().len();
    let mut plan = SymbolPlan {
        symbols: Vec::with_capacity(n),
        tables: Vec::with_capacity(n),
    };
    let mut recon = Vec::with_capacity(n);
    for ((&v, &m), &s) in y.data().iter().zip(prior.mean.data()).zip(prior.scale.data()) {
        let (offset, level) = q.prior_location(m, s, qstep);
        let residual = q.latent_symbol(v, qstep).saturating_sub(offset).clamp(Y_MIN, Y_MAX);
        plan.symbols.push(residual);
        plan.tables.push(&tables[level]);
        recon.push(q.latent_value(offset.saturating_add(residual), qstep));
    }
    Ok((plan, Tensor::new(y.shape(), recon)?))
}

/// Inverse of [`plan_latent`] followed by range coding.
pub fn decode_latent_symbols<Q: LatentQuantizer>(
    q: &Q,
    bytes: &[u8],
    prior: &PriorParams<Q::Scalar>,
    qstep: &QStep,
) -> Result<Tensor<Q::Scalar>> {
    let tables = y_tables();
    let mut dec = RangeDecoder::new(bytes)?;
    let mut recon = Vec::with_capacity(prior.shape().len());
    for (&m, &s) in prior.mean.data().iter().zip(prior.scale.data()) {
        let (offset, level) = q.prior_location(m, s, qstep);
        let residual = dec.decode(&tables[level])?;
        recon.push(q.latent_value(offset.saturating_add(residual), qstep));
    }
    dec.finish()?;
    Tensor::new(prior.shape(), recon)
}

/// Both steps of the `y` model, planned but not yet range coded.
#[derive(Clone, Debug)]
pub struct TwoStepPlan<S> {
    pub step1: SymbolPlan<'static>,
    pub step2: SymbolPlan<'static>,
    pub y_hat: Tensor<S>,
}

/// Two-step coding of `y`: the first channel half is coded with `prior1`;
/// `estimate_step2` then sees the reconstructed first half and predicts the
/// prior of the second half.
pub fn two_step_plan<Q, E>(
    q: &Q,
    y: &Tensor<Q::Scalar>,
    prior1: &PriorParams<Q::Scalar>,
    qstep: &QStep,
    estimate_step2: E,
) -> Result<TwoStepPlan<Q::Scalar>>
where
    Q: LatentQuantizer,
    E: FnOnce(&Tensor<Q::Scalar>) -> Result<PriorParams<Q::Scalar>>,
{
    let (y1, y2) = chunk2(y)?;
    let (step1, y1_hat) = plan_latent(q, &y1, prior1, qstep)?;
    let prior2 = estimate_step2(&y1_hat)?;
    let (step2, y2_hat) = plan_latent(q, &y2, &prior2, qstep)?;
    Ok(TwoStepPlan {
        step1,
        step2,
        y_hat: concat_channels(&y1_hat, &y2_hat)?,
    })
}

/// Codes `y` in two steps; returns the two byte streams and the reconstruction.
pub fn two_step_encode<Q, E>(
    q: &Q,
    y: &Tensor<Q::Scalar>,
    prior1: &PriorParams<Q::Scalar>,
    qstep: &QStep,
    estimate_step2: E,
) -> Result<(Vec<u8>, Vec<u8>, Tensor<Q::Scalar>)>
where
    Q: LatentQuantizer,
    E: FnOnce(&Tensor<Q::Scalar>) -> Result<PriorParams<Q::Scalar>>,
{
    let plan = two_step_plan(q, y, prior1, qstep, estimate_step2)?;
    Ok((plan.step1.encode()?, plan.step2.encode()?, plan.y_hat))
}

pub fn two_step_decode<Q, E>(
    q: &Q,
    step1: &[u8],
    step2: &[u8],
    prior1: &PriorParams<Q::Scalar>,
    qstep: &QStep,
    estimate_step2: E,
) -> Result<Tensor<Q::Scalar>>
where
    Q: LatentQuantizer,
    E: FnOnce(&Tensor<Q::Scalar>) -> Result<PriorParams<Q::Scalar>>,
{
    let y1 = decode_latent_symbols(q, step1, prior1, qstep)?;
    let prior2 = estimate_step2(&y1)?;
    let y2 = decode_latent_symbols(q, step2, &prior2, qstep)?;
    concat_channels(&y1, &y2)
}

/// Static per-channel tables for `z` of the given shape.
pub fn factorized_z_tables(channel_tables: &[CdfTable], z_shape: Shape) -> Result<Vec<&CdfTable>> {
    if channel_tables.len() != z_shape.c {
        return Err(Error::Config(format!(
            "bank has {} z tables, hyper latent has {} channels",
            channel_tables.len(),
            z_shape.c
        )));
    }
    Ok(channel_tables
        .iter()
        .flat_map(|t| std::iter::repeat_n(t, z_shape.plane()))
        .collect())
}

/// Rounds `z`, clamps to each channel's alphabet, and returns the plan plus
/// the reconstruction.
pub fn plan_hyper<'t, Q: LatentQuantizer>(
    q: &Q,
    z: &Tensor<Q::Scalar>,
    channel_tables: &'t [CdfTable],
) -> Result<(SymbolPlan<'t>, Tensor<Q::Scalar>)> {
    let tables = factorized_z_tables(channel_tables, z.shape())?;
    let symbols: Vec<i32> = z
        .data()
        .iter()
        .zip(&tables)
        .map(|(&v, t)| t.clamp(q.hyper_symbol(v)))
        .collect();
    let recon = symbols.iter().map(|&s| q.hyper_value(s)).collect();
    Ok((SymbolPlan { symbols, tables }, Tensor::new(z.shape(), recon)?))
}

pub fn decode_hyper<Q: LatentQuantizer>(
    q: &Q,
    bytes: &[u8],
    channel_tables: &[CdfTable],
    z_shape: Shape,
) -> Result<Tensor<Q::Scalar>> {
    let tables = factorized_z_tables(channel_tables, z_shape)?;
    let symbols = range_decode(bytes, &tables)?;
    Tensor::new(z_shape, symbols.into_iter().map(|s| q.hyper_value(s)).collect())
}
