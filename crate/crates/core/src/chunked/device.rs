use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::net::{ModelParams, NetConfig};
use crate::volume::VoxelGrid;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

/// System allocator that counts live heap bytes. Register it with
/// `#[global_allocator]` in a binary to enable the memory statistics below.
pub struct TrackingAllocator;

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            if new_size >= layout.size() {
                let now = CURRENT.fetch_add(new_size - layout.size(), Ordering::Relaxed) + new_size - layout.size();
                PEAK.fetch_max(now, Ordering::Relaxed);
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

/// Live heap bytes; zero unless [`TrackingAllocator`] is the global allocator.
pub fn current_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

/// High-water mark of live heap bytes since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

pub fn reset_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
}

pub fn tracking_enabled() -> bool {
    current_bytes() > 0
}

/// Rough upper estimate of the bytes held during one inference forward pass
/// on a `dims` grid: parameters plus every recorded activation.
pub fn estimate_forward_bytes(cfg: &NetConfig, dims: [usize; 3]) -> usize {
    let v0 = dims.iter().product::<usize>();
    let params: usize = crate::net::param_count(cfg);
    let res = |v: usize, cin: usize, cout: usize| v * (2 * cin + 7 * cout);
    let attn = |v: usize, c: usize| v * 7 * c + v * v;
    let inputs = cfg.in_channels();
    let mut floats = 2 * v0 * inputs + v0 * cfg.width(0);
    let mut im2col = 27 * dims[1] * dims[2] * inputs;
    let mut v = v0;
    for l in 0..cfg.depth {
        let w = cfg.width(l);
        floats += res(v, w, w);
        if cfg.attention_at.contains(&l) {
            floats += attn(v, w);
        }
        floats += (v / 8) * cfg.width(l + 1);
        im2col = im2col.max(27 * w * v / dims[0].max(1));
        v /= 8;
    }
    let wd = cfg.width(cfg.depth);
    floats += 2 * res(v, wd, wd);
    if cfg.attention_at.contains(&cfg.depth) {
        floats += attn(v, wd);
    }
    for l in (0..cfg.depth).rev() {
        v *= 8;
        let w = cfg.width(l);
        floats += v * cfg.width(l + 1) + v * w + 2 * v * w;
        floats += res(v, 2 * w, w);
        if cfg.attention_at.contains(&l) {
            floats += attn(v, w);
        }
        im2col = im2col.max(27 * 2 * w * v / dims[0].max(1));
    }
    floats += 2 * v0 * cfg.width(0) + 2 * v0 * cfg.out_channels();
    4 * (2 * params + floats + im2col)
}

/// Counters of a [`StagedDevice`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DeviceStats {
    pub forwards: usize,
    /// Largest input footprint staged for one forward.
    pub max_staged_bytes: usize,
    /// Largest allocator high-water growth during one forward; zero without tracking.
    pub max_forward_peak: usize,
}

/// Compute side of the host/device split: chunk tensors are copied in for a
/// single forward and released right after, so its footprint tracks the chunk
/// size rather than the world size.
#[derive(Debug, Default)]
pub struct StagedDevice {
    pub budget_bytes: Option<usize>,
    stats: Mutex<DeviceStats>,
}

impl StagedDevice {
    pub fn new(budget_bytes: Option<usize>) -> Self {
        StagedDevice {
            budget_bytes,
            stats: Mutex::new(DeviceStats::default()),
        }
    }

    pub fn stats(&self) -> DeviceStats {
        *self.stats.lock().unwrap()
    }

    pub fn reset_stats(&self) {
        *self.stats.lock().unwrap() = DeviceStats::default();
    }

    /// Fails with a config error if a `dims` forward cannot fit the budget.
    pub fn check_budget(&self, cfg: &NetConfig, dims: [usize; 3]) -> Result<()> {
        let Some(budget) = self.budget_bytes else {
            return Ok(());
        };
        let need = estimate_forward_bytes(cfg, dims);
        if need <= budget {
            return Ok(());
        }
        let m = cfg.dim_multiple();
        let scale = |s: usize| dims.map(|d| s.min(d));
        let mut fit = None;
        let mut s = m;
        while s <= *dims.iter().max().unwrap() {
            if estimate_forward_bytes(cfg, scale(s)) <= budget {
                fit = Some(s);
            }
            s += m;
        }
        Err(Error::Config(match fit {
            Some(s) => format!(
                "chunk {dims:?} needs about {need} bytes per forward, over the {budget} byte budget; use a chunk size of at most {s}"
            ),
            None => format!(
                "even the minimum chunk size {m} exceeds the {budget} byte budget ({} bytes needed)",
                estimate_forward_bytes(cfg, [m; 3])
            ),
        }))
    }

    /// Runs one chunk forward with staged copies of its inputs.
    pub fn forward(
        &self,
        params: &ModelParams,
        x: &VoxelGrid,
        layout: Option<&VoxelGrid>,
        attrs: &[f32],
        u: f32,
    ) -> Result<VoxelGrid> {
        self.check_budget(&params.config, x.dims())?;
        let base = current_bytes();
        reset_peak();
        let staged_x = x.clone();
        let staged_layout = layout.cloned();
        let staged = 4 * (staged_x.data.len() + staged_layout.as_ref().map_or(0, |l| l.data.len()) + attrs.len());
        let out = params.forward(&staged_x, u, staged_layout.as_ref(), attrs);
        drop(staged_x);
        drop(staged_layout);
        let grown = peak_bytes().saturating_sub(base);
        let mut s = self.stats.lock().unwrap();
        s.forwards += 1;
        s.max_staged_bytes = s.max_staged_bytes.max(staged);
        s.max_forward_peak = s.max_forward_peak.max(grown);
        out
    }
}
