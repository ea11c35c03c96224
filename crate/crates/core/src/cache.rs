//! Block-level delta caching with step-level compute/reuse scheduling.
//!
//! Consecutive cached blocks are merged into run entries so that a whole run
//! is skipped with one addition of `h_out(end) - h_in(start)`; isolated
//! blocks become single entries. Compute steps execute every block and
//! refresh the stored deltas; utilization steps add the stored delta in place
//! of executing the blocks selected by the reuse pattern.

use std::fmt;

use crate::dit::{BlockRunner, DiTBlock};
use crate::error::{Error, Result};
use crate::profiler::BlockPartition;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Single(usize),
    /// Inclusive block range, `start < end`.
    Run { start: usize, end: usize },
}

impl EntryKind {
    pub fn start(&self) -> usize {
        match *self {
            EntryKind::Single(i) => i,
            EntryKind::Run { start, .. } => start,
        }
    }

    pub fn end(&self) -> usize {
        match *self {
            EntryKind::Single(i) => i,
            EntryKind::Run { end, .. } => end,
        }
    }

    pub fn len(&self) -> usize {
        self.end() - self.start() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.start()..=self.end()
    }
}

impl fmt::Display for EntryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntryKind::Single(i) => write!(f, "single({i})"),
            EntryKind::Run { start, end } => write!(f, "run({start},{end})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaEntry {
    pub kind: EntryKind,
    /// Most recent `h_out(end) - h_in(start)`.
    pub delta: Option<Tensor>,
    /// Running sum of every delta computed so far.
    pub accumulated: Option<Tensor>,
    /// Step at which `delta` was last refreshed.
    pub computed_at: Option<usize>,
}

impl DeltaEntry {
    fn new(kind: EntryKind) -> Self {
        Self {
            kind,
            delta: None,
            accumulated: None,
            computed_at: None,
        }
    }

    fn clear(&mut self) {
        self.delta = None;
        self.accumulated = None;
        self.computed_at = None;
    }
}

/// Merges sorted block indices into maximal runs; isolated indices become
/// single entries.
pub fn delta_list_for(indices: &[usize]) -> Vec<DeltaEntry> {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = Vec::new();
    let mut iter = sorted.into_iter().peekable();
    while let Some(start) = iter.next() {
        let mut end = start;
        while iter.peek() == Some(&(end + 1)) {
            end = iter.next().unwrap();
        }
        let kind = if end > start {
            EntryKind::Run { start, end }
        } else {
            EntryKind::Single(start)
        };
        out.push(DeltaEntry::new(kind));
    }
    out
}

/// Delta list over the background blocks of `partition`.
pub fn build_delta_list(partition: &BlockPartition) -> Vec<DeltaEntry> {
    delta_list_for(&partition.background)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeltaMode {
    /// Reuse applies the most recent delta.
    #[default]
    Latest,
    /// Reuse applies the running sum of all computed deltas.
    Accumulated,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeltaCache {
    pub entries: Vec<DeltaEntry>,
    pub last_compute_step: Option<usize>,
}

impl DeltaCache {
    pub fn over(indices: &[usize]) -> Self {
        Self {
            entries: delta_list_for(indices),
            last_compute_step: None,
        }
    }

    fn entry_starting_at(&self, block: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.kind.start() == block)
    }

    pub fn covers(&self, block: usize) -> bool {
        self.entries.iter().any(|e| e.kind.indices().contains(&block))
    }

    fn clear(&mut self) {
        self.entries.iter_mut().for_each(DeltaEntry::clear);
        self.last_compute_step = None;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Non-increasing intervals, one per equal phase of `[s0, S)`.
    Stepwise(Vec<usize>),
    /// Non-decreasing intervals, one per equal phase of `[s0, S)`.
    StepInverse(Vec<usize>),
    StepAverage(usize),
    /// Linear from `t_max` at `s0` to `t_min` at `S`.
    Adaptive { t_max: usize, t_min: usize },
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Stepwise(_) => "stepwise",
            ScheduleKind::StepInverse(_) => "step_inverse",
            ScheduleKind::StepAverage(_) => "step_average",
            ScheduleKind::Adaptive { .. } => "adaptive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSchedule {
    kind: ScheduleKind,
    warmup: usize,
    total: usize,
}

impl StepSchedule {
    pub fn new(kind: ScheduleKind, warmup: usize, total: usize) -> Result<Self> {
        if warmup >= total {
            return Err(Error::Config(format!("warm-up {warmup} must be below total steps {total}")));
        }
        match &kind {
            ScheduleKind::Stepwise(list) | ScheduleKind::StepInverse(list) => {
                if list.is_empty() || list.contains(&0) {
                    return Err(Error::Config("interval list must be non-empty with entries >= 1".into()));
                }
                let ok = match kind {
                    ScheduleKind::Stepwise(_) => list.windows(2).all(|w| w[0] >= w[1]),
                    _ => list.windows(2).all(|w| w[0] <= w[1]),
                };
                if !ok {
                    return Err(Error::Config(format!(
                        "{} intervals {list:?} have the wrong monotonicity",
                        kind.name()
                    )));
                }
            }
            ScheduleKind::StepAverage(t) => {
                if *t == 0 {
                    return Err(Error::Config("interval must be >= 1".into()));
                }
            }
            ScheduleKind::Adaptive { t_max, t_min } => {
                if *t_max == 0 || *t_min == 0 {
                    return Err(Error::Config("adaptive interval bounds must be >= 1".into()));
                }
            }
        }
        Ok(Self { kind, warmup, total })
    }

    /// Every step computes.
    pub fn always(total: usize) -> Result<Self> {
        Self::new(ScheduleKind::StepAverage(1), 0, total)
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    pub fn warmup(&self) -> usize {
        self.warmup
    }

    pub fn total(&self) -> usize {
        self.total
    }

    fn check_range(&self, s: usize) -> Result<()> {
        if s < self.warmup || s > self.total {
            return Err(Error::StepOutOfRange {
                step: s,
                lo: self.warmup,
                hi: self.total,
            });
        }
        Ok(())
    }

    /// Unrounded adaptive interval `t_max - (t_max - t_min)(s - s0)/(S - s0)`.
    pub fn adaptive_raw(&self, s: usize, t_max: usize, t_min: usize) -> f64 {
        let frac = (s - self.warmup) as f64 / (self.total - self.warmup) as f64;
        t_max as f64 - (t_max as f64 - t_min as f64) * frac
    }

    /// Caching interval `T_s` for `s0 <= s <= S`.
    pub fn interval_at(&self, s: usize) -> Result<usize> {
        self.check_range(s)?;
        Ok(match &self.kind {
            ScheduleKind::Stepwise(list) | ScheduleKind::StepInverse(list) => {
                let span = self.total - self.warmup;
                let seg = (span / list.len()).max(1);
                let phase = ((s - self.warmup) / seg).min(list.len() - 1);
                list[phase]
            }
            ScheduleKind::StepAverage(t) => *t,
            ScheduleKind::Adaptive { t_max, t_min } => {
                let raw = self.adaptive_raw(s, *t_max, *t_min);
                ((raw + 0.5).floor() as usize).max(1)
            }
        })
    }

    /// Warm-up steps always compute; afterwards `s` computes iff
    /// `(s - s0) mod T_s == 0`, evaluated literally with the step's own `T_s`.
    pub fn is_compute_step(&self, s: usize) -> bool {
        if s <= self.warmup {
            return true;
        }
        let t = self
            .interval_at(s.min(self.total))
            .expect("step clamped into range");
        (s - self.warmup).is_multiple_of(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReusePattern {
    BackgroundOnly,
    ForegroundOnly,
    /// Foreground blocks are reused before `boundary`, background from it on.
    Split(usize),
    /// Reuse alternates B, F, B, ... every `segment` steps after warm-up.
    Alternate(usize),
}

impl ReusePattern {
    pub fn name(&self) -> &'static str {
        match self {
            ReusePattern::BackgroundOnly => "background_only",
            ReusePattern::ForegroundOnly => "foreground_only",
            ReusePattern::Split(_) => "split",
            ReusePattern::Alternate(_) => "alternate",
        }
    }

    fn uses(&self, role: BlockRole) -> bool {
        match self {
            ReusePattern::BackgroundOnly => role == BlockRole::Background,
            ReusePattern::ForegroundOnly => role == BlockRole::Foreground,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockRole {
    Foreground,
    Background,
}

/// Block-evaluation counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopLedger {
    pub executed: u64,
    pub skipped: u64,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct CacheEngine {
    partition: BlockPartition,
    schedule: StepSchedule,
    pattern: ReusePattern,
    mode: DeltaMode,
    background: DeltaCache,
    foreground: DeltaCache,
    ledger: FlopLedger,
}

impl CacheEngine {
    pub fn new(
        partition: BlockPartition,
        schedule: StepSchedule,
        pattern: ReusePattern,
        mode: DeltaMode,
    ) -> Result<Self> {
        match pattern {
            ReusePattern::Split(b) if b <= schedule.warmup() || b >= schedule.total() => {
                return Err(Error::Config(format!(
                    "split boundary {b} must lie in ({}, {})",
                    schedule.warmup(),
                    schedule.total()
                )));
            }
            ReusePattern::Alternate(0) => {
                return Err(Error::Config("alternate segment length must be >= 1".into()));
            }
            _ => {}
        }
        let background = if pattern.uses(BlockRole::Background) {
            DeltaCache::over(&partition.background)
        } else {
            DeltaCache::default()
        };
        let foreground = if pattern.uses(BlockRole::Foreground) {
            DeltaCache::over(&partition.foreground)
        } else {
            DeltaCache::default()
        };
        Ok(Self {
            partition,
            schedule,
            pattern,
            mode,
            background,
            foreground,
            ledger: FlopLedger::default(),
        })
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub fn schedule(&self) -> &StepSchedule {
        &self.schedule
    }

    pub fn pattern(&self) -> ReusePattern {
        self.pattern
    }

    pub fn ledger(&self) -> FlopLedger {
        self.ledger
    }

    pub fn cache(&self, role: BlockRole) -> &DeltaCache {
        match role {
            BlockRole::Background => &self.background,
            BlockRole::Foreground => &self.foreground,
        }
    }

    pub fn is_compute_step(&self, s: usize) -> bool {
        self.schedule.is_compute_step(s)
    }

    /// Which block list the pattern reuses at step `s` (meaningful for `s > s0`).
    pub fn reusable_role(&self, s: usize) -> BlockRole {
        match self.pattern {
            ReusePattern::BackgroundOnly => BlockRole::Background,
            ReusePattern::ForegroundOnly => BlockRole::Foreground,
            ReusePattern::Split(b) => {
                if s < b {
                    BlockRole::Foreground
                } else {
                    BlockRole::Background
                }
            }
            ReusePattern::Alternate(m) => {
                let seg = s.saturating_sub(self.schedule.warmup() + 1) / m;
                if seg.is_multiple_of(2) {
                    BlockRole::Background
                } else {
                    BlockRole::Foreground
                }
            }
        }
    }

    pub fn reusable_blocks(&self, s: usize) -> &[usize] {
        match self.reusable_role(s) {
            BlockRole::Background => &self.partition.background,
            BlockRole::Foreground => &self.partition.foreground,
        }
    }

    /// Runs all blocks for step `s`, executing or reusing per the schedule.
    pub fn apply_step(
        &mut self,
        blocks: &[DiTBlock],
        h: Tensor,
        s: usize,
        runner: &mut BlockRunner,
    ) -> Result<Tensor> {
        let before = runner.executed();
        let out = if self.is_compute_step(s) {
            self.compute(blocks, h, s, runner)?
        } else {
            self.reuse(blocks, h, s, runner)?
        };
        let executed = (runner.executed() - before) as u64;
        self.ledger.executed += executed;
        self.ledger.skipped += blocks.len() as u64 - executed;
        self.ledger.steps += 1;
        Ok(out)
    }

    fn compute(&mut self, blocks: &[DiTBlock], mut h: Tensor, s: usize, runner: &mut BlockRunner) -> Result<Tensor> {
        let mode = self.mode;
        // Snapshot of h_in for entries that are currently open.
        let mut open: Vec<(BlockRole, usize, Tensor)> = Vec::new();
        for (i, block) in blocks.iter().enumerate() {
            for role in [BlockRole::Background, BlockRole::Foreground] {
                if let Some(e) = self.cache(role).entry_starting_at(i) {
                    open.push((role, e, h.clone()));
                }
            }
            h = runner.run(block, &h)?;
            let mut still_open = Vec::with_capacity(open.len());
            for (role, e, h_in) in open.drain(..) {
                let cache = match role {
                    BlockRole::Background => &mut self.background,
                    BlockRole::Foreground => &mut self.foreground,
                };
                let entry = &mut cache.entries[e];
                if entry.kind.end() != i {
                    still_open.push((role, e, h_in));
                    continue;
                }
                let delta = h.sub(&h_in)?;
                if mode == DeltaMode::Accumulated {
                    entry.accumulated = Some(match entry.accumulated.take() {
                        Some(acc) => acc.add(&delta)?,
                        None => delta.clone(),
                    });
                }
                entry.delta = Some(delta);
                entry.computed_at = Some(s);
            }
            open = still_open;
        }
        self.background.last_compute_step = Some(s);
        self.foreground.last_compute_step = Some(s);
        Ok(h)
    }

    fn reuse(&mut self, blocks: &[DiTBlock], mut h: Tensor, s: usize, runner: &mut BlockRunner) -> Result<Tensor> {
        let cache = match self.reusable_role(s) {
            BlockRole::Background => &self.background,
            BlockRole::Foreground => &self.foreground,
        };
        let mut i = 0;
        while i < blocks.len() {
            if let Some(e) = cache.entry_starting_at(i) {
                let entry = &cache.entries[e];
                let stored = match self.mode {
                    DeltaMode::Latest => entry.delta.as_ref(),
                    DeltaMode::Accumulated => entry.accumulated.as_ref(),
                };
                let delta = stored.ok_or_else(|| Error::StaleCache {
                    entry: entry.kind.to_string(),
                    step: s,
                })?;
                h.add_assign(delta)?;
                i = entry.kind.end() + 1;
                continue;
            }
            h = runner.run(&blocks[i], &h)?;
            i += 1;
        }
        Ok(h)
    }

    /// Clears every stored delta and zeroes the ledger.
    pub fn reset(&mut self) {
        self.background.clear();
        self.foreground.clear();
        self.ledger = FlopLedger::default();
    }

    /// One line per entry: role, kind, indices and a 64-bit FNV-1a checksum of
    /// the stored delta's little-endian bytes.
    pub fn dump_state(&self) -> String {
        let mut out = String::new();
        for (role, cache) in [("B", &self.background), ("F", &self.foreground)] {
            for e in &cache.entries {
                let checksum = e
                    .delta
                    .as_ref()
                    .map_or_else(|| "-".to_string(), |d| format!("{:016x}", fnv1a_f64(d.data())));
                let step = e.computed_at.map_or_else(|| "-".to_string(), |s| s.to_string());
                out.push_str(&format!(
                    "{role} {} {} {} computed_at={step} fnv1a={checksum}\n",
                    match e.kind {
                        EntryKind::Single(_) => "single",
                        EntryKind::Run { .. } => "run",
                    },
                    e.kind.start(),
                    e.kind.end(),
                ));
            }
        }
        out
    }
}

pub fn fnv1a_f64(values: &[f64]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = OFFSET;
    for v in values {
        for byte in v.to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(PRIME);
        }
    }
    hash
}
