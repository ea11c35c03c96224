//! Quality and cost measurement: latent PSNR/SSIM, mean L1, the analytic
//! FLOP model and run-to-run comparison reports.
//!
//! FLOPs count a multiply-accumulate as 2 operations. Softmax and
//! normalization costs are excluded.

use serde::{Deserialize, Serialize, Serializer};

use crate::dit::{Grid, LatentVideo, RunStats};
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 8;

/// Per-step costs of the toy model for `n` tokens, `c` channels, `l` blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopModel {
    pub tokens: u64,
    pub channels: u64,
    pub blocks: u64,
    /// One block: QKV and output projections `2*4NC^2`, scores and weighted
    /// values `2*2N^2C`, MLP `2*8NC^2`.
    pub block: u64,
    /// Embedding plus unembedding, `2*NC^2` each, paid on every step.
    pub io: u64,
}

impl FlopModel {
    pub fn new(tokens: u64, channels: u64, blocks: u64) -> Self {
        let (n, c) = (tokens, channels);
        Self {
            tokens,
            channels,
            blocks,
            block: 2 * (4 * n * c * c) + 2 * (2 * n * n * c) + 2 * (8 * n * c * c),
            io: 2 * (2 * n * c * c),
        }
    }

    /// Total for `steps` uncached steps.
    pub fn full_run(&self, steps: u64) -> u64 {
        steps * (self.blocks * self.block + self.io)
    }
}

fn check_shapes(op: &'static str, a: &LatentVideo, b: &LatentVideo) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::Dimension {
            op,
            left: a.tensor().shape().to_vec(),
            right: b.tensor().shape().to_vec(),
        });
    }
    Ok(())
}

pub fn mean_l1(a: &LatentVideo, b: &LatentVideo) -> Result<f64> {
    check_shapes("mean_l1", a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.data().len() as f64)
}

pub fn mse(a: &LatentVideo, b: &LatentVideo) -> Result<f64> {
    check_shapes("mse", a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

/// `10 log10(peak^2 / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &LatentVideo, b: &LatentVideo, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Contract(format!("PSNR peak must be positive, got {peak}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Mean SSIM over every 8x8 window (stride 1) of every channel plane in
/// every frame, with uniform window weights.
pub fn ssim(a: &LatentVideo, b: &LatentVideo, peak: f64) -> Result<f64> {
    check_shapes("ssim", a, b)?;
    if !(peak > 0.0) {
        return Err(Error::Contract(format!("SSIM peak must be positive, got {peak}")));
    }
    let g = a.grid();
    if g.height < SSIM_WINDOW || g.width < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "frame {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            g.height, g.width
        )));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels() {
        for f in 0..g.frames {
            let (pa, pb) = (a.plane(c, f), b.plane(c, f));
            for y in 0..=g.height - SSIM_WINDOW {
                for x in 0..=g.width - SSIM_WINDOW {
                    total += window_ssim(pa, pb, g, y, x, c1, c2);
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

fn window_ssim(pa: &[f64], pb: &[f64], g: Grid, y0: usize, x0: usize, c1: f64, c2: f64) -> f64 {
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let idx = |dy: usize, dx: usize| (y0 + dy) * g.width + x0 + dx;
    let (mut sa, mut sb) = (0.0, 0.0);
    for dy in 0..SSIM_WINDOW {
        for dx in 0..SSIM_WINDOW {
            sa += pa[idx(dy, dx)];
            sb += pb[idx(dy, dx)];
        }
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
    for dy in 0..SSIM_WINDOW {
        for dx in 0..SSIM_WINDOW {
            let da = pa[idx(dy, dx)] - ma;
            let db = pb[idx(dy, dx)] - mb;
            vaa += da * da;
            vbb += db * db;
            vab += da * db;
        }
    }
    let (vaa, vbb, vab) = (vaa / n, vbb / n, vab / n);
    ((2.0 * ma * mb + c1) * (2.0 * vab + c2)) / ((ma * ma + mb * mb + c1) * (vaa + vbb + c2))
}

/// Identity of a denoising run; comparisons require equal provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub blocks: usize,
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub provenance: Provenance,
    pub final_latent: LatentVideo,
    pub stats: RunStats,
    /// Analytic uncached total for this configuration.
    pub full_flops: u64,
}

fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

/// Comparison of a test run against a reference run. Field order is the
/// JSON key order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub metric_space: &'static str,
    /// `"inf"` in JSON when the latents are identical.
    #[serde(rename = "latent_psnr_db", serialize_with = "serialize_db")]
    pub psnr: f64,
    #[serde(rename = "latent_ssim")]
    pub ssim: f64,
    pub mean_l1: f64,
    pub peak: f64,
    pub blocks_executed: u64,
    pub blocks_skipped: u64,
    pub flops_full: u64,
    pub flops_executed: u64,
    pub flops_skipped: u64,
    pub speedup_flops: f64,
    /// Wall-clock fields are `None` unless timing was requested.
    pub wall_ms: Option<f64>,
    pub reference_wall_ms: Option<f64>,
    pub speedup_wall: Option<f64>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Drops the wall-clock fields so the report is reproducible byte for byte.
    pub fn without_timing(mut self) -> Self {
        self.wall_ms = None;
        self.reference_wall_ms = None;
        self.speedup_wall = None;
        self
    }
}

/// Quality of `test` against `reference` plus cost accounting from `test`.
/// Peak is the reference latent's range (1.0 if the reference is flat).
pub fn compare_runs(test: &RunArtifacts, reference: &RunArtifacts) -> Result<RunReport> {
    if test.provenance != reference.provenance {
        return Err(Error::Provenance(format!(
            "test {:?} vs reference {:?}",
            test.provenance, reference.provenance
        )));
    }
    let r = reference.final_latent.data();
    let (lo, hi) = r
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let peak = if hi > lo { hi - lo } else { 1.0 };
    let (a, b) = (&test.final_latent, &reference.final_latent);
    let g = a.grid();
    let ssim_value = if g.height >= SSIM_WINDOW && g.width >= SSIM_WINDOW {
        ssim(a, b, peak)?
    } else {
        f64::NAN
    };
    let wall = test.stats.wall_ms;
    let ref_wall = reference.stats.wall_ms;
    Ok(RunReport {
        metric_space: "latent",
        psnr: psnr(a, b, peak)?,
        ssim: ssim_value,
        mean_l1: mean_l1(a, b)?,
        peak,
        blocks_executed: test.stats.blocks_executed,
        blocks_skipped: test.stats.blocks_skipped,
        flops_full: test.full_flops,
        flops_executed: test.stats.flops_executed,
        flops_skipped: test.stats.flops_skipped,
        speedup_flops: test.full_flops as f64 / test.stats.flops_executed as f64,
        wall_ms: Some(wall),
        reference_wall_ms: Some(ref_wall),
        speedup_wall: (wall > 0.0).then(|| ref_wall / wall),
    })
}
