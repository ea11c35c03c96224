//! Attention profiling: per-token attention scores, foreground segmentation
//! of noise predictions, the foreground attention ratio per block and step,
//! and the threshold partition into foreground and background blocks.

use std::fmt::Write as _;
use std::ops::Range;

use crate::dit::{Grid, LatentVideo};
use crate::error::{Error, Result};
use crate::tensor::{matmul, top_eigvecs, Tensor};

const STOCHASTIC_TOL: f64 = 1e-9;

/// Which axis of the attention matrix is averaged into a per-token score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Orientation {
    /// `a_j = (1/N) sum_i A_ij`: attention received by token `j`.
    #[default]
    Column,
    /// `a_i = (1/N) sum_j A_ij`: constant `1/N` for row-stochastic input.
    Row,
}

/// Per-token aggregated attention score.
pub fn aggregate_attention(a: &Tensor, orientation: Orientation) -> Result<Vec<f64>> {
    if a.shape().len() != 2 || a.rows() != a.cols() {
        return Err(Error::Dimension {
            op: "aggregate_attention",
            left: a.shape().to_vec(),
            right: vec![a.rows(), a.rows()],
        });
    }
    let n = a.rows();
    for i in 0..n {
        let row = a.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|&v| v < -STOCHASTIC_TOL || !v.is_finite()) {
            return Err(Error::Contract(format!(
                "attention row {i} is not stochastic (sum {sum})"
            )));
        }
    }
    let inv = 1.0 / n as f64;
    Ok(match orientation {
        Orientation::Row => (0..n).map(|i| a.row(i).iter().sum::<f64>() * inv).collect(),
        Orientation::Column => {
            let mut acc = vec![0.0; n];
            for i in 0..n {
                for (s, v) in acc.iter_mut().zip(a.row(i)) {
                    *s += v;
                }
            }
            acc.into_iter().map(|s| s * inv).collect()
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    PcaThreshold,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    pub bits: Vec<bool>,
    pub source: MaskSource,
    /// Set when segmentation had no signal to work with; `bits` is all false.
    pub degenerate: bool,
}

impl ForegroundMask {
    pub fn external(bits: Vec<bool>) -> Self {
        Self {
            bits,
            source: MaskSource::External,
            degenerate: false,
        }
    }

    fn empty(n: usize) -> Self {
        Self {
            bits: vec![false; n],
            source: MaskSource::PcaThreshold,
            degenerate: true,
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &ForegroundMask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Threshold maximizing between-class variance, chosen among midpoints of
/// consecutive distinct sorted values. `None` when all values are equal.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let total: f64 = sorted.iter().sum();
    let mut best: Option<(f64, f64)> = None;
    let mut prefix = 0.0;
    for k in 1..n {
        prefix += sorted[k - 1];
        if sorted[k] == sorted[k - 1] {
            continue;
        }
        let w0 = k as f64 / n as f64;
        let w1 = 1.0 - w0;
        let m0 = prefix / k as f64;
        let m1 = (total - prefix) / (n - k) as f64;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if best.is_none_or(|(b, _)| between > b) {
            best = Some((between, 0.5 * (sorted[k - 1] + sorted[k])));
        }
    }
    best.map(|(_, t)| t)
}

/// Foreground estimate from a noise prediction: tokens are projected onto
/// their top principal components and split by Otsu's threshold on the
/// first component. The minority side is foreground.
pub fn segment_foreground(noise_pred: &LatentVideo) -> Result<ForegroundMask> {
    let tokens = noise_pred.to_tokens();
    let (n, c) = (tokens.rows(), tokens.cols());
    if n < 2 {
        return Err(Error::Contract(format!("segmentation needs at least 2 tokens, got {n}")));
    }
    let mut mean = vec![0.0; c];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(tokens.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = tokens.clone();
    for i in 0..n {
        for j in 0..c {
            centered.set(i, j, tokens.get(i, j) - mean[j]);
        }
    }
    let mut cov = matmul(&centered.transpose()?, &centered)?.scale(1.0 / n as f64);
    // Symmetrize exactly so the eigen-solver's symmetry check never trips on rounding.
    for i in 0..c {
        for j in i + 1..c {
            let v = 0.5 * (cov.get(i, j) + cov.get(j, i));
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    let spread: f64 = (0..c).map(|i| cov.get(i, i)).sum();
    let energy = tokens.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
    if !(spread > 1e-24 * energy) || spread == 0.0 {
        return Ok(ForegroundMask::empty(n));
    }

    let comps = top_eigvecs(&cov, c.min(3))?;
    let first: Vec<f64> = (0..c).map(|j| comps.get(j, 0)).collect();
    let scores: Vec<f64> = (0..n)
        .map(|i| centered.row(i).iter().zip(&first).map(|(a, b)| a * b).sum())
        .collect();
    let Some(threshold) = otsu_threshold(&scores) else {
        return Ok(ForegroundMask::empty(n));
    };
    let mut bits: Vec<bool> = scores.iter().map(|&s| s > threshold).collect();
    if 2 * bits.iter().filter(|&&b| b).count() > n {
        bits.iter_mut().for_each(|b| *b = !*b);
    }
    Ok(ForegroundMask {
        bits,
        source: MaskSource::PcaThreshold,
        degenerate: false,
    })
}

/// Linear-interpolation percentile (`p` in `[0, 100]`).
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&p) {
        return Err(Error::Contract(format!(
            "percentile {p} of {} values",
            values.len()
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

/// Fraction of foreground tokens whose score exceeds `high_threshold`,
/// computed per frame and averaged over frames that contain foreground.
/// `None` when the mask is empty.
pub fn compute_r_attn(a_bar: &[f64], mask: &ForegroundMask, high_threshold: f64, grid: Grid) -> Result<Option<f64>> {
    if a_bar.len() != mask.len() || a_bar.len() != grid.tokens() {
        return Err(Error::Dimension {
            op: "compute_r_attn",
            left: vec![a_bar.len()],
            right: vec![mask.len(), grid.tokens()],
        });
    }
    let per = grid.frame_tokens();
    let mut sum = 0.0;
    let mut frames = 0usize;
    for f in 0..grid.frames {
        let range = f * per..(f + 1) * per;
        let mut fg = 0usize;
        let mut high = 0usize;
        for (&a, &m) in a_bar[range.clone()].iter().zip(&mask.bits[range]) {
            if m {
                fg += 1;
                high += (a > high_threshold) as usize;
            }
        }
        if fg > 0 {
            sum += high as f64 / fg as f64;
            frames += 1;
        }
    }
    Ok((frames > 0).then(|| sum / frames as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileSettings {
    /// Percentile of the per-step scores above which a token is high-attention.
    pub percentile: f64,
    pub orientation: Orientation,
}

impl Default for ProfileSettings {
    fn default() -> Self {
        Self {
            percentile: 90.0,
            orientation: Orientation::Column,
        }
    }
}

/// Ratio for one attention matrix under `mask`.
pub fn r_attn_for(a: &Tensor, mask: &ForegroundMask, grid: Grid, settings: ProfileSettings) -> Result<Option<f64>> {
    let a_bar = aggregate_attention(a, settings.orientation)?;
    let threshold = percentile(&a_bar, settings.percentile)?;
    compute_r_attn(&a_bar, mask, threshold, grid)
}

/// `r_attn[block][step]`, `None` where undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockProfile {
    pub r_attn: Vec<Vec<Option<f64>>>,
    pub percentile: f64,
    pub tau: f64,
}

impl BlockProfile {
    pub fn new(blocks: usize, steps: usize, percentile: f64, tau: f64) -> Self {
        Self {
            r_attn: vec![vec![None; steps]; blocks],
            percentile,
            tau,
        }
    }

    pub fn blocks(&self) -> usize {
        self.r_attn.len()
    }

    pub fn steps(&self) -> usize {
        self.r_attn.first().map_or(0, Vec::len)
    }

    /// Mean of defined entries over `steps`, `None` if none are defined.
    pub fn block_mean(&self, block: usize, steps: Range<usize>) -> Option<f64> {
        let vals: Vec<f64> = self.r_attn[block][steps].iter().flatten().copied().collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BlockPartition {
    pub foreground: Vec<usize>,
    pub background: Vec<usize>,
}

impl BlockPartition {
    /// Validates that the two lists split `0..blocks` and sorts them.
    pub fn new(mut foreground: Vec<usize>, mut background: Vec<usize>, blocks: usize) -> Result<Self> {
        foreground.sort_unstable();
        background.sort_unstable();
        let mut seen = vec![false; blocks];
        for &i in foreground.iter().chain(&background) {
            if i >= blocks || seen[i] {
                return Err(Error::Config(format!(
                    "partition must split blocks 0..{blocks} exactly (bad index {i})"
                )));
            }
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|&s| !s) {
            return Err(Error::Config(format!("partition is missing block {i}")));
        }
        Ok(Self { foreground, background })
    }

    pub fn all_foreground(blocks: usize) -> Self {
        Self {
            foreground: (0..blocks).collect(),
            background: Vec::new(),
        }
    }

    pub fn with_background(background: &[usize], blocks: usize) -> Result<Self> {
        let fg = (0..blocks).filter(|i| !background.contains(i)).collect();
        Self::new(fg, background.to_vec(), blocks)
    }

    pub fn blocks(&self) -> usize {
        self.foreground.len() + self.background.len()
    }

    /// Two lines, `F: i,j,...` then `B: ...`.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!("F: {}\nB: {}\n", join(&self.foreground), join(&self.background))
    }

    pub fn parse(text: &str, blocks: usize) -> Result<Self> {
        let mut fg = None;
        let mut bg = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, rest) = line
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("partition line without ':': {line}")))?;
            let list = rest
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<usize>().map_err(|_| Error::Config(format!("bad block index {s:?}"))))
                .collect::<Result<Vec<_>>>()?;
            match key.trim() {
                "F" => fg = Some(list),
                "B" => bg = Some(list),
                other => return Err(Error::Config(format!("unknown partition key {other:?}"))),
            }
        }
        match (fg, bg) {
            (Some(f), Some(b)) => Self::new(f, b, blocks),
            _ => Err(Error::Config("partition needs both F and B lines".into())),
        }
    }
}

/// Blocks whose mean ratio over `steps` reaches `tau` are foreground; blocks
/// with no defined entries are foreground too.
pub fn partition_blocks(profile: &BlockProfile, tau: f64, steps: Range<usize>) -> Result<BlockPartition> {
    if steps.start >= steps.end || steps.end > profile.steps() {
        return Err(Error::Config(format!(
            "profiling step range {steps:?} not within 0..{}",
            profile.steps()
        )));
    }
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for b in 0..profile.blocks() {
        match profile.block_mean(b, steps.clone()) {
            Some(m) if m < tau => bg.push(b),
            _ => fg.push(b),
        }
    }
    Ok(BlockPartition {
        foreground: fg,
        background: bg,
    })
}

/// Mean absolute difference between consecutive predictions.
pub fn l1_step_distance(preds: &[LatentVideo]) -> Result<Vec<f64>> {
    if preds.len() < 2 {
        return Err(Error::Contract(format!(
            "step distance needs at least 2 predictions, got {}",
            preds.len()
        )));
    }
    preds
        .windows(2)
        .map(|w| crate::metrics::mean_l1(&w[0], &w[1]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatmapRow {
    pub block: usize,
    pub step: usize,
    pub r_attn: f64,
}

pub fn export_heatmap(profile: &BlockProfile) -> Vec<HeatmapRow> {
    let mut rows = Vec::new();
    for (block, steps) in profile.r_attn.iter().enumerate() {
        for (step, v) in steps.iter().enumerate() {
            if let Some(r_attn) = *v {
                rows.push(HeatmapRow { block, step, r_attn });
            }
        }
    }
    rows
}

/// CSV with header `block,step,r_attn`; floats use shortest round-trip form.
pub fn heatmap_csv(rows: &[HeatmapRow]) -> String {
    let mut out = String::from("block,step,r_attn\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.block, r.step, r.r_attn).unwrap();
    }
    out
}

pub fn parse_heatmap_csv(text: &str) -> Result<Vec<HeatmapRow>> {
    let bad = |line: &str| Error::Config(format!("bad heatmap row {line:?}"));
    let mut lines = text.lines();
    if lines.next() != Some("block,step,r_attn") {
        return Err(Error::Config("heatmap header must be block,step,r_attn".into()));
    }
    lines
        .map(|line| {
            let mut it = line.split(',');
            let (Some(b), Some(s), Some(r), None) = (it.next(), it.next(), it.next(), it.next()) else {
                return Err(bad(line));
            };
            Ok(HeatmapRow {
                block: b.parse().map_err(|_| bad(line))?,
                step: s.parse().map_err(|_| bad(line))?,
                r_attn: r.parse().map_err(|_| bad(line))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stochastic(seed: u64, n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for _ in 0..n {
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = r.iter().sum();
            rows.push(r.into_iter().map(|v| v / s).collect());
        }
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn aggregate_cases() {
        let u = Tensor::filled(&[4, 4], 0.25);
        for o in [Orientation::Column, Orientation::Row] {
            assert!(aggregate_attention(&u, o).unwrap().iter().all(|&v| v == 0.25));
            assert!(aggregate_attention(&Tensor::identity(5), o).unwrap().iter().all(|&v| v == 0.2));
        }
        let a = stochastic(3, 3);
        let col = aggregate_attention(&a, Orientation::Column).unwrap();
        let row = aggregate_attention(&a, Orientation::Row).unwrap();
        for k in 0..3 {
            let mut c = 0.0;
            let mut r = 0.0;
            for m in 0..3 {
                c += a.get(m, k);
                r += a.get(k, m);
            }
            assert!((col[k] - c / 3.0).abs() < 1e-12);
            assert!((row[k] - r / 3.0).abs() < 1e-12);
        }
        let bad = Tensor::filled(&[2, 2], 0.7);
        assert!(matches!(aggregate_attention(&bad, Orientation::Column), Err(Error::Contract(_))));
    }

    fn block_scene(magnitude: f64) -> (LatentVideo, Vec<bool>) {
        let g = Grid::new(1, 4, 4);
        let c = 3;
        let mut tokens = Tensor::zeros(&[16, c]);
        let mut truth = vec![false; 16];
        for y in 1..3 {
            for x in 0..2 {
                let t = g.index(0, y, x);
                truth[t] = true;
                for ch in 0..c {
                    tokens.set(t, ch, magnitude * (ch as f64 + 1.0));
                }
            }
        }
        (LatentVideo::from_tokens(&tokens, g).unwrap(), truth)
    }

    #[test]
    fn segmentation_cases() {
        let (x, truth) = block_scene(5.0);
        let m = segment_foreground(&x).unwrap();
        assert_eq!(m.bits, truth);
        assert!(!m.degenerate);

        // Swapping contrast leaves the minority region unchanged.
        let inv = LatentVideo::new(x.tensor().map(|v| 5.0 - v)).unwrap();
        assert_eq!(segment_foreground(&inv).unwrap().bits, truth);

        let flat = LatentVideo::new(Tensor::filled(&[3, 1, 4, 4], 0.3)).unwrap();
        let m = segment_foreground(&flat).unwrap();
        assert!(m.degenerate && m.count() == 0);
        let zero = LatentVideo::new(Tensor::zeros(&[3, 1, 4, 4])).unwrap();
        assert!(segment_foreground(&zero).unwrap().degenerate);
    }

    #[test]
    fn otsu_picks_gap() {
        assert_eq!(otsu_threshold(&[0.0, 0.1, 0.0, 5.0, 5.1]), Some(2.55));
        assert_eq!(otsu_threshold(&[1.0, 1.0]), None);
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 5.0);
        assert_eq!(percentile(&v, 90.0).unwrap(), 4.6);
        assert!(percentile(&[], 50.0).is_err());
    }

    #[test]
    fn r_attn_cases() {
        let g = Grid::new(1, 2, 4);
        let mut bits = vec![false; 8];
        bits[..4].iter_mut().for_each(|b| *b = true);
        let mask = ForegroundMask::external(bits);
        let a = [0.9, 0.9, 0.1, 0.1, 0.9, 0.1, 0.1, 0.1];
        assert_eq!(compute_r_attn(&a, &mask, 0.5, g).unwrap(), Some(0.5));
        assert_eq!(compute_r_attn(&a, &mask, 1.0, g).unwrap(), Some(0.0));
        assert_eq!(compute_r_attn(&[1.0; 8], &mask, 0.5, g).unwrap(), Some(1.0));
        let empty = ForegroundMask::external(vec![false; 8]);
        assert_eq!(compute_r_attn(&a, &empty, 0.5, g).unwrap(), None);
        assert!(compute_r_attn(&a[..4], &mask, 0.5, g).is_err());
    }

    #[test]
    fn r_attn_averages_frames_with_foreground() {
        let g = Grid::new(3, 1, 2);
        let mask = ForegroundMask::external(vec![true, true, false, false, true, false]);
        let a = [1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        // frame 0: 1/2, frame 1: no foreground, frame 2: 1/1
        assert_eq!(compute_r_attn(&a, &mask, 0.5, g).unwrap(), Some(0.75));
    }

    fn profile(rows: Vec<Vec<Option<f64>>>) -> BlockProfile {
        BlockProfile {
            r_attn: rows,
            percentile: 90.0,
            tau: 0.5,
        }
    }

    #[test]
    fn partition_cases() {
        let p = profile(vec![vec![Some(0.8)], vec![Some(0.2)]]);
        let part = partition_blocks(&p, 0.5, 0..1).unwrap();
        assert_eq!((part.foreground, part.background), (vec![0], vec![1]));
        let p = profile(vec![vec![Some(0.5)], vec![None]]);
        let part = partition_blocks(&p, 0.5, 0..1).unwrap();
        assert_eq!(part.foreground, vec![0, 1]);
        let p = profile(vec![vec![Some(0.1), Some(0.3)], vec![Some(0.2), None]]);
        let part = partition_blocks(&p, 0.5, 0..2).unwrap();
        assert!(part.foreground.is_empty());
        assert_eq!(part.background, vec![0, 1]);
        assert!(partition_blocks(&p, 0.5, 0..3).is_err());
        assert_eq!(p.block_mean(0, 0..2), Some(0.2));
    }

    #[test]
    fn partition_text_roundtrip() {
        let p = BlockPartition::new(vec![4, 1], vec![0, 2, 3], 5).unwrap();
        assert_eq!(p.to_text(), "F: 1,4\nB: 0,2,3\n");
        assert_eq!(BlockPartition::parse(&p.to_text(), 5).unwrap(), p);
        let all = BlockPartition::all_foreground(3);
        assert_eq!(all.to_text(), "F: 0,1,2\nB: \n");
        assert_eq!(BlockPartition::parse(&all.to_text(), 3).unwrap(), all);
        assert!(BlockPartition::parse("F: 0\nB: 0\n", 1).is_err());
        assert!(BlockPartition::parse("F: 0\n", 1).is_err());
        assert!(BlockPartition::new(vec![0], vec![], 2).is_err());
    }

    #[test]
    fn l1_cases() {
        let g = Grid::new(1, 2, 2);
        let a = LatentVideo::new(Tensor::filled(&[2, 1, 2, 2], 1.0)).unwrap();
        let b = LatentVideo::new(Tensor::filled(&[2, 1, 2, 2], 3.0)).unwrap();
        assert_eq!(l1_step_distance(&[a.clone(), a.clone()]).unwrap(), vec![0.0]);
        assert_eq!(l1_step_distance(&[a.clone(), b.clone(), b.clone()]).unwrap(), vec![2.0, 0.0]);
        assert!(l1_step_distance(std::slice::from_ref(&a)).is_err());
        assert!(l1_step_distance(&[a, LatentVideo::zeros(3, g)]).is_err());
    }

    #[test]
    fn heatmap_export_and_roundtrip() {
        let p = profile(vec![vec![Some(0.1), None], vec![Some(1.0 / 3.0), Some(0.7)]]);
        let rows = export_heatmap(&p);
        assert_eq!(rows.len(), 3);
        let csv = heatmap_csv(&rows);
        assert!(csv.starts_with("block,step,r_attn\n0,0,0.1\n"));
        assert_eq!(parse_heatmap_csv(&csv).unwrap(), rows);
    }

    fn brute_r_attn(a: &[f64], bits: &[bool], thr: f64, frames: usize) -> Option<f64> {
        let per = a.len() / frames;
        let mut vals = Vec::new();
        for f in 0..frames {
            let mut fg = 0;
            let mut both = 0;
            for i in f * per..(f + 1) * per {
                if bits[i] {
                    fg += 1;
                    if a[i] > thr {
                        both += 1;
                    }
                }
            }
            if fg > 0 {
                vals.push(both as f64 / fg as f64);
            }
        }
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    proptest! {
        #[test]
        fn aggregate_preserves_mass(n in 1usize..24, seed in any::<u64>()) {
            let a = stochastic(seed, n);
            let s: f64 = aggregate_attention(&a, Orientation::Column).unwrap().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }

        #[test]
        fn r_attn_matches_counting(a in proptest::collection::vec(0.0f64..1.0, 12), bits in proptest::collection::vec(any::<bool>(), 12), thr in 0.0f64..1.0) {
            let g = Grid::new(2, 2, 3);
            let mask = ForegroundMask::external(bits.clone());
            let got = compute_r_attn(&a, &mask, thr, g).unwrap();
            prop_assert_eq!(got, brute_r_attn(&a, &bits, thr, 2));
            if let Some(v) = got {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert_eq!(got.is_none(), !bits.iter().any(|&b| b));
        }

        #[test]
        fn partition_monotone_in_tau(vals in proptest::collection::vec(0.0f64..1.0, 1..10), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let p = profile(vals.iter().map(|&v| vec![Some(v)]).collect());
            let a = partition_blocks(&p, lo, 0..1).unwrap();
            let b = partition_blocks(&p, hi, 0..1).unwrap();
            for i in &a.background {
                prop_assert!(b.background.contains(i));
            }
        }

        #[test]
        fn segmentation_scale_invariant(seed in any::<u64>(), e in -10i32..10, k in 0.5f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Grid::new(1, 3, 4);
            prop_assert_eq!(g.tokens(), 12);
            let data: Vec<f64> = (0..4 * 12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = LatentVideo::new(Tensor::new(vec![4, 1, 3, 4], data).unwrap()).unwrap();
            let base = segment_foreground(&x).unwrap().bits;
            // Power-of-two scaling is exact, so the mask must match bit for bit.
            let y = LatentVideo::new(x.tensor().scale(2f64.powi(e))).unwrap();
            prop_assert_eq!(&base, &segment_foreground(&y).unwrap().bits);
            // General scaling only perturbs rounding; the random data has no near-ties.
            let z = LatentVideo::new(x.tensor().scale(k)).unwrap();
            prop_assert_eq!(&base, &segment_foreground(&z).unwrap().bits);
        }

        #[test]
        fn l1_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| LatentVideo::new(Tensor::new(vec![2, 1, 2, 2], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()).unwrap();
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let ab = l1_step_distance(&[a.clone(), b.clone()]).unwrap();
            let ba = l1_step_distance(&[b, a]).unwrap();
            prop_assert_eq!(ab, ba);
        }
    }
}
