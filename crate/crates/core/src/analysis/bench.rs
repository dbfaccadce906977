use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnalysisError, Result};
use crate::geometry::face_count;
use crate::model::{ModelConfig, SimModel, Variant};
use crate::ssm::{attention_block_forward, vim_block_forward, AttentionWeights, ScanMode};
use crate::tensor::{Eager, Tensor};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static INSTALLED: AtomicBool = AtomicBool::new(false);

/// System allocator that tracks live and peak heap bytes. Install it with
/// `#[global_allocator]` in the final binary to enable memory figures.
pub struct TrackingAllocator;

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            INSTALLED.store(true, Ordering::Relaxed);
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            INSTALLED.store(true, Ordering::Relaxed);
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size >= layout.size() {
                let now = CURRENT.fetch_add(new_size - layout.size(), Ordering::Relaxed) + new_size
                    - layout.size();
                PEAK.fetch_max(now, Ordering::Relaxed);
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

/// Runs `f` and returns the peak bytes allocated above the starting level,
/// or `None` when [`TrackingAllocator`] is not the global allocator.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, Option<usize>) {
    drop(std::hint::black_box(Box::new(0u64)));
    if !INSTALLED.load(Ordering::Relaxed) {
        return (f(), None);
    }
    let start = CURRENT.load(Ordering::SeqCst);
    PEAK.store(start, Ordering::SeqCst);
    let r = f();
    let peak = PEAK.load(Ordering::SeqCst);
    (r, Some(peak.saturating_sub(start)))
}

/// Smallest positive step observed between consecutive clock reads.
pub fn timer_tick() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..2000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min((b - a).as_secs_f64());
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostInfo {
    pub cpu_model: String,
    pub cores: usize,
    pub os: String,
    pub arch: String,
}

pub fn host_info() -> HostInfo {
    let cpu_model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown".into());
    HostInfo {
        cpu_model,
        cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
        os: std::env::consts::OS.into(),
        arch: std::env::consts::ARCH.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Scan,
    Attention,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Scan => "scan",
            BlockKind::Attention => "attention",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub orders: Vec<usize>,
    pub kinds: Vec<BlockKind>,
    pub repeats: usize,
    pub warmup: usize,
    pub d_model: usize,
    pub d_inner: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    /// Tiny widths: D = 192, E = 384, 3 heads, MLP ratio 4.
    fn default() -> Self {
        let (_, d, e) = Variant::Tiny.dims();
        BenchConfig {
            orders: vec![1, 2, 3, 4],
            kinds: vec![BlockKind::Scan, BlockKind::Attention],
            repeats: 5,
            warmup: 1,
            d_model: d,
            d_inner: e,
            heads: 3,
            mlp_ratio: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub block: BlockKind,
    pub patch_order: usize,
    pub tokens: usize,
    pub median_seconds: f64,
    pub times: Vec<f64>,
    /// Peak heap growth during one forward pass.
    pub peak_bytes: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerFit {
    /// `ln t = intercept + exponent · ln T`
    pub intercept: f64,
    pub exponent: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub host: HostInfo,
    pub config: BenchConfig,
    pub timer_tick_seconds: f64,
    pub rows: Vec<BenchRow>,
    pub fits: Vec<(BlockKind, PowerFit)>,
}

impl BenchReport {
    pub fn row(&self, block: BlockKind, tokens: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.block == block && r.tokens == tokens)
    }

    pub fn fit(&self, block: BlockKind) -> Option<PowerFit> {
        self.fits.iter().find(|f| f.0 == block).map(|f| f.1)
    }
}

/// Ordinary least squares of `ln y` on `ln x`.
pub fn fit_power_law(x: &[f64], y: &[f64]) -> Result<PowerFit> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(AnalysisError::Invalid("power-law fit needs at least 3 points".into()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(AnalysisError::Invalid("power-law fit needs positive values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = ly.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(AnalysisError::Invalid("power-law fit needs distinct lengths".into()));
    }
    let b = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(PowerFit {
        intercept: my - b * mx,
        exponent: b,
        r2,
    })
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

struct ScanBlock {
    model: SimModel,
}

impl ScanBlock {
    fn new(cfg: &BenchConfig) -> Result<Self> {
        let mut mc = ModelConfig::new(Variant::Tiny, 5);
        mc.layers = 1;
        mc.d_model = cfg.d_model;
        mc.d_inner = cfg.d_inner;
        Ok(ScanBlock {
            model: SimModel::new(mc, cfg.seed)?,
        })
    }

    fn run(&self, x: &Arc<Tensor>) -> Result<Arc<Tensor>> {
        let g = Eager;
        let nodes = self.model.bind(&g);
        let w = self.model.layer_weights(&nodes, 0);
        Ok(vim_block_forward(
            &g,
            x,
            &w,
            &self.model.config.vim_dims(),
            ScanMode::Bidirectional,
        )?)
    }
}

/// Time and measure forward passes of one scan block and one attention
/// block at the token counts `2·20·4^p + 1`, on a single thread.
pub fn bench_blocks(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repeats == 0 || cfg.orders.is_empty() || cfg.kinds.is_empty() {
        return Err(AnalysisError::Invalid("bench needs repeats >= 1, orders and kinds".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| AnalysisError::Invalid(e.to_string()))?;
    pool.install(|| bench_inner(cfg))
}

fn bench_inner(cfg: &BenchConfig) -> Result<BenchReport> {
    let tick = timer_tick();
    let scan = ScanBlock::new(cfg)?;
    let attn = AttentionWeights::seeded(cfg.d_model, cfg.heads, cfg.mlp_ratio, cfg.seed);
    let mut rows = Vec::new();
    for &p in &cfg.orders {
        let t = 2 * face_count(p) + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ t as u64);
        let x = Arc::new(Tensor::new(
            [t, cfg.d_model],
            (0..t * cfg.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?);
        for &kind in &cfg.kinds {
            let once = || -> Result<Tensor> {
                match kind {
                    BlockKind::Scan => Ok(scan.run(&x)?.as_ref().clone()),
                    BlockKind::Attention => Ok(attention_block_forward(&x, &attn)?),
                }
            };
            for _ in 0..cfg.warmup {
                std::hint::black_box(once()?);
            }
            let (r, peak) = measure_peak(|| once().map(drop));
            r?;
            let mut times = Vec::with_capacity(cfg.repeats);
            for _ in 0..cfg.repeats {
                let start = Instant::now();
                let y = once()?;
                times.push(start.elapsed().as_secs_f64());
                std::hint::black_box(y);
            }
            let med = median(&times);
            if med < 20.0 * tick {
                return Err(AnalysisError::TimerResolution { median: med, tick });
            }
            if times.len() >= 4 {
                let half = median(&times[..times.len() / 2]);
                if (half - med).abs() > 0.1 * med {
                    log::warn!(
                        "{} at T={t}: median moved {:.1}% between half and full repeats",
                        kind.name(),
                        100.0 * (half - med).abs() / med
                    );
                }
            }
            log::info!("{} T={t}: {med:.4e} s, peak {peak:?} B", kind.name());
            rows.push(BenchRow {
                block: kind,
                patch_order: p,
                tokens: t,
                median_seconds: med,
                times,
                peak_bytes: peak,
            });
        }
    }
    let mut fits = Vec::new();
    for &kind in &cfg.kinds {
        let pts: Vec<&BenchRow> = rows.iter().filter(|r| r.block == kind).collect();
        if pts.len() >= 3 {
            let xs: Vec<f64> = pts.iter().map(|r| r.tokens as f64).collect();
            let ys: Vec<f64> = pts.iter().map(|r| r.median_seconds).collect();
            fits.push((kind, fit_power_law(&xs, &ys)?));
        }
    }
    Ok(BenchReport {
        host: host_info(),
        config: cfg.clone(),
        timer_tick_seconds: tick,
        rows,
        fits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_timings_fit_exponent_two() {
        let t = [161.0, 641.0, 2561.0, 10241.0];
        let y: Vec<f64> = t.iter().map(|v| 3.7e-9 * v * v).collect();
        let f = fit_power_law(&t, &y).unwrap();
        assert!((f.exponent - 2.0).abs() < 1e-6, "{f:?}");
        assert!((f.intercept - 3.7e-9f64.ln()).abs() < 1e-6);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_needs_three_positive_points() {
        assert!(fit_power_law(&[1.0, 2.0], &[1.0, 4.0]).is_err());
        assert!(fit_power_law(&[1.0, 2.0, 3.0], &[1.0, 0.0, 2.0]).is_err());
        assert!(fit_power_law(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn tick_is_positive_and_small() {
        let t = timer_tick();
        assert!(t > 0.0 && t < 1e-3, "{t}");
    }

    #[test]
    fn tiny_orders_report_rows_and_fits() {
        let cfg = BenchConfig {
            orders: vec![1, 2, 3],
            repeats: 2,
            warmup: 0,
            ..BenchConfig::default()
        };
        let r = bench_blocks(&cfg).unwrap();
        assert_eq!(r.rows.len(), 6);
        assert!(r.rows.iter().all(|row| row.median_seconds > 0.0));
        assert_eq!(r.row(BlockKind::Attention, 641).unwrap().patch_order, 2);
        assert!(r.fit(BlockKind::Scan).is_some() && r.fit(BlockKind::Attention).is_some());
        // the library test binary keeps the system allocator
        assert!(r.rows.iter().all(|row| row.peak_bytes.is_none()));
    }
}
