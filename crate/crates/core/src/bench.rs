//! Throughput and memory benchmark for [`sharpen`].
//!
//! Peak memory comes from [`CountingAlloc`], which a binary opts into with
//! `#[global_allocator]`. Without it the memory column reads `NA`.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::pipeline::{sharpen, PanLutModel};
use crate::raster::MultiBandImage;
use crate::synth::random_image;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

/// System allocator that tracks live and peak heap bytes.
pub struct CountingAlloc;

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            record_alloc(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            record_alloc(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size >= layout.size() {
                record_alloc(new_size - layout.size());
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

fn record_alloc(size: usize) {
    let now = CURRENT.fetch_add(size, Ordering::Relaxed) + size;
    PEAK.fetch_max(now, Ordering::Relaxed);
    if !ACTIVE.load(Ordering::Relaxed) {
        ACTIVE.store(true, Ordering::Relaxed);
    }
}

/// Whether [`CountingAlloc`] is the global allocator of this process.
pub fn counting_active() -> bool {
    let probe = Box::new(0u8);
    drop(probe);
    ACTIVE.load(Ordering::Relaxed)
}

/// Runs `f` and returns its result with the peak heap growth above the starting level.
pub fn measure_peak<T>(f: impl FnOnce() -> T) -> (T, Option<usize>) {
    let active = counting_active();
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let out = f();
    let peak = PEAK.load(Ordering::Relaxed);
    (out, active.then(|| peak.saturating_sub(base)))
}

#[derive(Debug, Clone, PartialEq)]
pub enum BenchStatus {
    Ok { median_ms: f64, peak_bytes: Option<usize> },
    Oom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub status: BenchStatus,
}

impl BenchRow {
    pub const HEADER: &'static str = "size\tpixels\tmedian_ms\tpeak_mib";

    pub fn to_tsv(&self) -> String {
        let px = self.size * self.size;
        match &self.status {
            BenchStatus::Ok { median_ms, peak_bytes } => format!(
                "{}\t{px}\t{median_ms:.3}\t{}",
                self.size,
                peak_bytes.map_or_else(|| "NA".to_string(), |b| format!("{:.1}", b as f64 / 1048576.0))
            ),
            BenchStatus::Oom => format!("{}\t{px}\tOOM\tOOM", self.size),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchConfig {
    pub ratio: usize,
    pub runs: usize,
    pub warmups: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ratio: 4,
            runs: 5,
            warmups: 1,
            seed: 0,
        }
    }
}

pub const DEFAULT_SIZES: [usize; 4] = [256, 512, 1024, 2048];
pub const HUGE_SIZE: usize = 9216;

/// Random PAN and MS for a `size x size` benchmark; identical for a given seed.
pub fn bench_inputs(size: usize, ratio: usize, seed: u64) -> Result<(MultiBandImage, MultiBandImage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ size as u64);
    let pan = random_image(size, size, 1, &mut rng)?;
    let ms = random_image(size / ratio, size / ratio, 4, &mut rng)?;
    Ok((pan, ms))
}

/// Bytes needed for inputs plus the sharpen memory budget of `40 * H * W` samples.
fn estimated_bytes(size: usize) -> usize {
    size.saturating_mul(size).saturating_mul(42 * std::mem::size_of::<f64>())
}

pub fn bench_size(model: &PanLutModel, size: usize, cfg: &BenchConfig) -> Result<BenchRow> {
    let mut probe: Vec<u8> = Vec::new();
    if probe.try_reserve_exact(estimated_bytes(size)).is_err() {
        return Ok(BenchRow {
            size,
            status: BenchStatus::Oom,
        });
    }
    drop(probe);
    let (pan, ms) = bench_inputs(size, cfg.ratio, cfg.seed)?;
    let mut peak = None;
    for i in 0..cfg.warmups.max(1) {
        let (out, p) = measure_peak(|| sharpen(model, &pan, &ms));
        out?;
        if i == 0 {
            peak = p;
        }
    }
    let mut times = Vec::with_capacity(cfg.runs.max(1));
    for _ in 0..cfg.runs.max(1) {
        let t = Instant::now();
        let out = sharpen(model, &pan, &ms)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        drop(out);
    }
    times.sort_by(f64::total_cmp);
    Ok(BenchRow {
        size,
        status: BenchStatus::Ok {
            median_ms: times[times.len() / 2],
            peak_bytes: peak,
        },
    })
}

pub fn run_bench(model: &PanLutModel, sizes: &[usize], cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    sizes.iter().map(|&s| bench_size(model, s, cfg)).collect()
}
