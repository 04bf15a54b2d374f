//! Micro-benchmark for separating computational cost (MACs), latent size and
//! module count: closed-form metrics, an iso-control planner, a timing
//! harness, and report writers.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

pub use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPoolBuilder;

use crate::error::{Error, Result};
use crate::tensor::{conv2d, ConvSpec, Shape, Tensor};

pub const MIN_WARMUP: usize = 3;
pub const MIN_REPEATS: usize = 20;

/// A stack of `n` dense `k x k` convolutions on a `c x h x w` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchConfig {
    pub n: u64,
    pub c: u64,
    pub h: u64,
    pub w: u64,
    pub k: u64,
    pub warmup: usize,
    pub repeats: usize,
}

impl BenchConfig {
    pub fn new(n: u64, c: u64, h: u64, w: u64) -> Self {
        BenchConfig {
            n,
            c,
            h,
            w,
            k: 1,
            warmup: MIN_WARMUP,
            repeats: MIN_REPEATS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.n, self.c, self.h, self.w].contains(&0) || self.k.is_multiple_of(2) {
            return Err(Error::invalid(format!("bad bench configuration {self}")));
        }
        if self.warmup < MIN_WARMUP || self.repeats < MIN_REPEATS {
            return Err(Error::invalid(format!(
                "need at least {MIN_WARMUP} warmup and {MIN_REPEATS} timed runs, got {} / {}",
                self.warmup, self.repeats
            )));
        }
        Ok(())
    }
}

impl fmt::Display for BenchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N{}-C{}-{}x{}-k{}", self.n, self.c, self.h, self.w, self.k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ComplexityTriple {
    /// Multiply-accumulates for one pass.
    pub p_comp: u128,
    /// Elements in the latent tensor.
    pub p_size: u128,
    /// Module count.
    pub p_num: u128,
}

pub fn analytic_metrics(cfg: &BenchConfig) -> ComplexityTriple {
    let (n, c, hw, k) = (cfg.n as u128, cfg.c as u128, (cfg.h * cfg.w) as u128, cfg.k as u128);
    ComplexityTriple {
        p_comp: n * k * k * c * c * hw,
        p_size: c * hw,
        p_num: n,
    }
}

/// Which quantity [`plan_isocontrol`] scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Vary {
    Comp,
    Size,
    Num,
}

impl fmt::Display for Vary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Vary::Comp => "comp",
            Vary::Size => "size",
            Vary::Num => "num",
        })
    }
}

fn exact(r: Ratio<u128>, what: &str, factor: Ratio<u64>) -> Result<u128> {
    if r.is_integer() && *r.numer() > 0 {
        Ok(r.to_integer())
    } else {
        Err(Error::Plan(format!("factor {factor}: {what} would be {r}, not a positive integer")))
    }
}

/// Factors `area` into `(h, w)` with the aspect ratio closest to `h0 / w0`,
/// preferring the smaller `h` on ties.
fn split_area(area: u128, h0: u64, w0: u64) -> Option<(u64, u64)> {
    let distance = |h: u128, w: u128| {
        let (a, b) = (h * w0 as u128, w * h0 as u128);
        Ratio::new(a.max(b), a.min(b))
    };
    (1..=area)
        .filter(|h| area.is_multiple_of(*h))
        .map(|h| (h, area / h))
        .min_by_key(|&(h, w)| (distance(h, w), h))
        .and_then(|(h, w)| Some((u64::try_from(h).ok()?, u64::try_from(w).ok()?)))
}

/// Configurations in which the chosen quantity is multiplied by each factor
/// while the other two stay equal to the base.
///
/// With `P_comp = N C^2 HW` and `P_size = C HW`, the solutions are
/// comp: `C' = fC, HW' = HW/f`; size: `C' = C/f, HW' = f^2 HW`;
/// num: `N' = fN, C' = C/f, HW' = f HW`.
pub fn plan_isocontrol(base: &BenchConfig, vary: Vary, factors: &[Ratio<u64>]) -> Result<Vec<BenchConfig>> {
    base.validate()?;
    let held = analytic_metrics(base);
    factors
        .iter()
        .map(|&factor| {
            if *factor.numer() == 0 {
                return Err(Error::Plan(format!("factor {factor} must be positive")));
            }
            let f = Ratio::new(*factor.numer() as u128, *factor.denom() as u128);
            let (n, c, hw) = (Ratio::from(base.n as u128), Ratio::from(base.c as u128), Ratio::from((base.h * base.w) as u128));
            let (n2, c2, hw2) = match vary {
                Vary::Comp => (n, c * f, hw / f),
                Vary::Size => (n, c / f, hw * f * f),
                Vary::Num => (n * f, c / f, hw * f),
            };
            let n2 = exact(n2, "N", factor)?;
            let c2 = exact(c2, "C", factor)?;
            let hw2 = exact(hw2, "H*W", factor)?;
            let (h, w) = split_area(hw2, base.h, base.w)
                .ok_or_else(|| Error::Plan(format!("factor {factor}: H*W = {hw2} does not fit the dimensions")))?;
            let too_big = |v: u128, what: &str| Error::Plan(format!("factor {factor}: {what} = {v} is too large"));
            let cfg = BenchConfig {
                n: u64::try_from(n2).map_err(|_| too_big(n2, "N"))?,
                c: u64::try_from(c2).map_err(|_| too_big(c2, "C"))?,
                h,
                w,
                ..*base
            };
            let got = analytic_metrics(&cfg);
            let scaled = |v: u128| Ratio::from(v) * f;
            let ok = match vary {
                Vary::Comp => Ratio::from(got.p_comp) == scaled(held.p_comp) && (got.p_size, got.p_num) == (held.p_size, held.p_num),
                Vary::Size => Ratio::from(got.p_size) == scaled(held.p_size) && (got.p_comp, got.p_num) == (held.p_comp, held.p_num),
                Vary::Num => Ratio::from(got.p_num) == scaled(held.p_num) && (got.p_comp, got.p_size) == (held.p_comp, held.p_size),
            };
            if !ok {
                return Err(Error::Plan(format!("factor {factor}: {cfg} gives {got:?}, base {held:?}")));
            }
            Ok(cfg)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub config: BenchConfig,
    pub metrics: ComplexityTriple,
    /// Per-run wall times in milliseconds, in execution order.
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub threads: usize,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Median and interquartile range.
pub fn summarize(samples: &[f64]) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    (quantile(&s, 0.5), quantile(&s, 0.75) - quantile(&s, 0.25))
}

fn bench_one(cfg: &BenchConfig, seed: u64) -> Result<Vec<f64>> {
    let c = cfg.c as usize;
    let spec = ConvSpec::dense(c, c, cfg.k as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = (3.0 / (c * (cfg.k * cfg.k) as usize) as f32).sqrt();
    let layers: Vec<(Vec<f32>, Vec<f32>)> = (0..cfg.n)
        .map(|_| {
            let w = (0..spec.weight_len()).map(|_| rng.gen_range(-a..a)).collect();
            (w, vec![0.0; c])
        })
        .collect();
    let shape = Shape::new(c, cfg.h as usize, cfg.w as usize);
    let input = Tensor::new(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let pass = || -> Result<Tensor<f32>> {
        let mut x = input.clone();
        for (w, b) in &layers {
            x = conv2d(&x, w, b, &spec)?;
        }
        Ok(x)
    };
    for _ in 0..cfg.warmup {
        std::hint::black_box(pass()?);
    }
    (0..cfg.repeats)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(pass()?);
            Ok(t.elapsed().as_secs_f64() * 1e3)
        })
        .collect()
}

/// Times every configuration on a pool of `threads` workers.
pub fn run_bench(configs: &[BenchConfig], threads: usize, seed: u64) -> Result<Vec<BenchResult>> {
    configs.iter().try_for_each(BenchConfig::validate)?;
    let pool = ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    configs
        .iter()
        .map(|cfg| {
            let samples_ms = pool.install(|| bench_one(cfg, seed))?;
            let (median_ms, iqr_ms) = summarize(&samples_ms);
            log::info!("{cfg}: median {median_ms:.3} ms, IQR {iqr_ms:.3} ms");
            Ok(BenchResult {
                config: *cfg,
                metrics: analytic_metrics(cfg),
                samples_ms,
                median_ms,
                iqr_ms,
                threads: threads.max(1),
            })
        })
        .collect()
}

/// Median time of `base` over median time of `other`.
pub fn speedup(base: &BenchResult, other: &BenchResult) -> f64 {
    base.median_ms / other.median_ms
}

pub const REPORT_COLUMNS: [&str; 8] = ["config", "P_comp", "P_size", "P_num", "median_ms", "iqr_ms", "repeats", "threads"];

/// Comma-separated table, one row per result.
pub fn write_report(out: &mut impl Write, results: &[BenchResult]) -> Result<()> {
    writeln!(out, "{}", REPORT_COLUMNS.join(","))?;
    for r in results {
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{},{}",
            r.config, r.metrics.p_comp, r.metrics.p_size, r.metrics.p_num, r.median_ms, r.iqr_ms, r.config.repeats, r.threads
        )?;
    }
    Ok(())
}

/// Whitespace-separated plot data with a commented header.
pub fn write_plot_data(out: &mut impl Write, results: &[BenchResult]) -> Result<()> {
    writeln!(out, "# index P_comp P_size P_num median_ms iqr_ms")?;
    for (i, r) in results.iter().enumerate() {
        writeln!(
            out,
            "{i} {} {} {} {:.6} {:.6}",
            r.metrics.p_comp, r.metrics.p_size, r.metrics.p_num, r.median_ms, r.iqr_ms
        )?;
    }
    Ok(())
}

/// Writes `<stem>.csv` and `<stem>.dat` next to each other.
pub fn save_report(stem: impl AsRef<Path>, results: &[BenchResult]) -> Result<()> {
    let stem = stem.as_ref();
    let mut csv = Vec::new();
    write_report(&mut csv, results)?;
    std::fs::write(stem.with_extension("csv"), csv)?;
    let mut dat = Vec::new();
    write_plot_data(&mut dat, results)?;
    std::fs::write(stem.with_extension("dat"), dat)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> BenchConfig {
        BenchConfig::new(4, 64, 16, 16)
    }

    fn r(n: u64, d: u64) -> Ratio<u64> {
        Ratio::new(n, d)
    }

    #[test]
    fn metrics_follow_the_closed_form() {
        let m = analytic_metrics(&BenchConfig { k: 3, ..base() });
        assert_eq!(m.p_comp, 4 * 9 * 64 * 64 * 256);
        assert_eq!(m.p_size, 64 * 256);
        assert_eq!(m.p_num, 4);
    }

    #[test]
    fn channel_halving_is_quadratic_in_macs() {
        let a = analytic_metrics(&base());
        let b = analytic_metrics(&BenchConfig { c: 32, ..base() });
        assert_eq!(a.p_comp, 4 * b.p_comp);
        assert_eq!(a.p_size, 2 * b.p_size);
        assert_eq!(a.p_num, b.p_num);
    }

    #[test]
    fn trading_channels_for_resolution() {
        let a = analytic_metrics(&base());
        let b = analytic_metrics(&BenchConfig { c: 32, h: 32, ..base() });
        assert_eq!((b.p_size, 2 * b.p_comp), (a.p_size, a.p_comp));
        let down = analytic_metrics(&BenchConfig { c: 128, h: 8, w: 8, ..base() });
        assert_eq!((down.p_comp, 2 * down.p_size), (a.p_comp, a.p_size));
    }

    #[test]
    fn comp_plan_holds_size_and_count() {
        let plans = plan_isocontrol(&base(), Vary::Comp, &[r(1, 4), r(1, 2), r(1, 1)]).unwrap();
        assert_eq!((plans[0].c, plans[0].h * plans[0].w, plans[0].n), (16, 1024, 4));
        assert_eq!((plans[0].h, plans[0].w), (32, 32));
        assert_eq!((plans[1].c, plans[1].h * plans[1].w), (32, 512));
        assert_eq!(plans[2], base());
        let a = analytic_metrics(&base());
        for (p, f) in plans.iter().zip([4, 2, 1]) {
            let m = analytic_metrics(p);
            assert_eq!((m.p_comp * f, m.p_size, m.p_num), (a.p_comp, a.p_size, a.p_num));
        }
    }

    #[test]
    fn size_plan_is_a_downsampling_stage() {
        let p = plan_isocontrol(&base(), Vary::Size, &[r(1, 2)]).unwrap()[0];
        assert_eq!((p.n, p.c, p.h, p.w), (4, 128, 8, 8));
    }

    #[test]
    fn num_plan_holds_macs_and_size() {
        let p = plan_isocontrol(&base(), Vary::Num, &[r(1, 2), r(1, 4)]).unwrap();
        assert_eq!((p[0].n, p[0].c, p[0].h * p[0].w), (2, 128, 128));
        assert_eq!((p[1].n, p[1].c, p[1].h * p[1].w), (1, 256, 64));
        let a = analytic_metrics(&base());
        let m = analytic_metrics(&p[0]);
        assert_eq!((m.p_comp, m.p_size, 2 * m.p_num), (a.p_comp, a.p_size, a.p_num));
    }

    #[test]
    fn infeasible_factors_are_reported() {
        let e = plan_isocontrol(&base(), Vary::Num, &[r(1, 3)]).unwrap_err();
        assert!(matches!(e, Error::Plan(ref m) if m.contains("N")), "{e}");
        let e = plan_isocontrol(&BenchConfig::new(4, 64, 3, 5), Vary::Comp, &[r(2, 1)]).unwrap_err();
        assert!(matches!(e, Error::Plan(ref m) if m.contains("H*W")), "{e}");
        assert!(plan_isocontrol(&base(), Vary::Size, &[r(0, 1)]).is_err());
    }

    #[test]
    fn area_split_prefers_the_base_aspect() {
        assert_eq!(split_area(1024, 16, 16), Some((32, 32)));
        assert_eq!(split_area(128, 16, 16), Some((8, 16)));
        assert_eq!(split_area(200, 10, 20), Some((10, 20)));
        assert_eq!(split_area(7, 1, 1), Some((1, 7)));
    }

    #[test]
    fn summary_statistics() {
        let (m, iqr) = summarize(&[5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!((m, iqr), (3.0, 2.0));
        let (m, _) = summarize(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
    }

    #[test]
    fn bench_produces_one_row_per_config() {
        let cfgs = [BenchConfig::new(2, 8, 4, 4), BenchConfig::new(1, 4, 4, 8)];
        let res = run_bench(&cfgs, 1, 0).unwrap();
        assert_eq!(res.len(), 2);
        assert!(res.iter().all(|r| r.median_ms > 0.0 && r.samples_ms.len() == MIN_REPEATS));
        let mut csv = Vec::new();
        write_report(&mut csv, &res).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("config,P_comp,P_size,P_num,median_ms,iqr_ms"));
        let dir = tempfile::tempdir().unwrap();
        save_report(dir.path().join("bench"), &res).unwrap();
        let dat = std::fs::read_to_string(dir.path().join("bench.dat")).unwrap();
        assert_eq!(dat.lines().count(), 3);
        let too_few = BenchConfig { repeats: 5, ..cfgs[0] };
        assert!(run_bench(&[too_few], 1, 0).is_err());
    }
}
