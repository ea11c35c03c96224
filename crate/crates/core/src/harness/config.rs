//! Line-oriented experiment configuration.
//!
//! ```text
//! # comment
//! seed = 42
//! schedule.kind = adaptive
//! schedule.t_max = 12
//! ```
//!
//! Every key has a default and unknown keys are rejected.

use std::path::{Path, PathBuf};

use crate::cache::{DeltaMode, ReusePattern, ScheduleKind, StepSchedule};
use crate::dit::{Grid, ModelConfig, Shaping};
use crate::error::{Error, Result};
use crate::formats::read_text;
use crate::profiler::{Orientation, ProfileSettings};

#[derive(Debug, Clone, PartialEq)]
pub enum MaskMode {
    /// Segment each step's noise prediction.
    Pca,
    /// Use the scene's ground-truth rectangles.
    Truth,
    /// Read a PGM mask (frames stacked vertically).
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub background: f64,
    pub magnitude: f64,
    pub texture: f64,
    /// Frame-0 rectangle `(x, y, w, h)` in tokens.
    pub rect: (usize, usize, usize, usize),
    /// Per-frame offset `(dx, dy)`.
    pub motion: (isize, isize),
    /// Seed for texture and start noise; defaults to the experiment seed.
    pub noise_seed: Option<u64>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            background: 1.0,
            magnitude: 6.0,
            texture: 0.1,
            rect: (2, 2, 3, 2),
            motion: (1, 0),
            noise_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub blocks: usize,
    pub channels: usize,
    pub grid: Grid,
    pub foreground_blocks: Option<Vec<usize>>,
    pub background_blocks: Option<Vec<usize>>,
    pub focus_strength: Option<f64>,
    pub foreground_gain: Option<f64>,
    pub steps: usize,
    pub final_alpha_bar: f64,
    pub schedule_kind: String,
    pub intervals: Vec<usize>,
    pub interval: Option<usize>,
    pub t_max: usize,
    pub t_min: usize,
    pub warmup: usize,
    pub pattern: String,
    pub split_step: Option<usize>,
    pub alternate_len: usize,
    pub delta_mode: DeltaMode,
    pub tau: f64,
    pub percentile: f64,
    pub profile_start: usize,
    pub profile_end: Option<usize>,
    pub mask: MaskMode,
    pub orientation: Orientation,
    pub scene: SceneSpec,
    pub ablate_patterns: Vec<String>,
    pub ablate_schedules: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            blocks: 8,
            channels: 16,
            grid: Grid::new(2, 8, 8),
            foreground_blocks: None,
            background_blocks: None,
            focus_strength: None,
            foreground_gain: None,
            steps: 50,
            final_alpha_bar: 0.5,
            schedule_kind: "stepwise".into(),
            intervals: vec![12, 9, 6, 3],
            interval: None,
            t_max: 12,
            t_min: 3,
            warmup: 5,
            pattern: "background_only".into(),
            split_step: None,
            alternate_len: 1,
            delta_mode: DeltaMode::Latest,
            tau: 0.5,
            percentile: 90.0,
            profile_start: 0,
            profile_end: None,
            mask: MaskMode::Pca,
            orientation: Orientation::Column,
            scene: SceneSpec::default(),
            ablate_patterns: vec![
                "background_only".into(),
                "foreground_only".into(),
                "split".into(),
                "alternate".into(),
            ],
            ablate_schedules: vec![
                "stepwise".into(),
                "step_inverse".into(),
                "step_average".into(),
                "adaptive".into(),
            ],
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_words(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn exact<const N: usize, T: std::str::FromStr + Copy>(key: &str, v: &str) -> Result<[T; N]> {
    let list: Vec<T> = parse_list(key, v)?;
    list.try_into()
        .map_err(|_| Error::Config(format!("{key}: expected {N} comma-separated values")))
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim(), base_dir)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn set(&mut self, key: &str, v: &str, base_dir: &Path) -> Result<()> {
        let k = key;
        match k {
            "seed" => self.seed = parse_num(k, v)?,
            "model.blocks" => self.blocks = parse_num(k, v)?,
            "model.channels" => self.channels = parse_num(k, v)?,
            "model.frames" => self.grid.frames = parse_num(k, v)?,
            "model.height" => self.grid.height = parse_num(k, v)?,
            "model.width" => self.grid.width = parse_num(k, v)?,
            "model.foreground_blocks" => self.foreground_blocks = Some(parse_list(k, v)?),
            "model.background_blocks" => self.background_blocks = Some(parse_list(k, v)?),
            "model.focus_strength" => self.focus_strength = Some(parse_num(k, v)?),
            "model.foreground_gain" => self.foreground_gain = Some(parse_num(k, v)?),
            "sampler.steps" => self.steps = parse_num(k, v)?,
            "sampler.final_alpha_bar" => self.final_alpha_bar = parse_num(k, v)?,
            "schedule.kind" => self.schedule_kind = v.to_string(),
            "schedule.intervals" => self.intervals = parse_list(k, v)?,
            "schedule.interval" => self.interval = Some(parse_num(k, v)?),
            "schedule.t_max" => self.t_max = parse_num(k, v)?,
            "schedule.t_min" => self.t_min = parse_num(k, v)?,
            "schedule.warmup" => self.warmup = parse_num(k, v)?,
            "cache.pattern" => self.pattern = v.to_string(),
            "cache.split_step" => self.split_step = Some(parse_num(k, v)?),
            "cache.alternate_len" => self.alternate_len = parse_num(k, v)?,
            "cache.delta_mode" => {
                self.delta_mode = match v {
                    "latest" => DeltaMode::Latest,
                    "accumulated" => DeltaMode::Accumulated,
                    _ => return Err(Error::Config(format!("{k}: expected latest or accumulated, got {v:?}"))),
                }
            }
            "profile.tau" => self.tau = parse_num(k, v)?,
            "profile.percentile" => self.percentile = parse_num(k, v)?,
            "profile.step_start" => self.profile_start = parse_num(k, v)?,
            "profile.step_end" => self.profile_end = Some(parse_num(k, v)?),
            "profile.mask" => {
                self.mask = match v {
                    "pca" => MaskMode::Pca,
                    "truth" => MaskMode::Truth,
                    path => MaskMode::File(base_dir.join(path)),
                }
            }
            "profile.orientation" => {
                self.orientation = match v {
                    "column" => Orientation::Column,
                    "row" => Orientation::Row,
                    _ => return Err(Error::Config(format!("{k}: expected column or row, got {v:?}"))),
                }
            }
            "scene.background" => self.scene.background = parse_num(k, v)?,
            "scene.magnitude" => self.scene.magnitude = parse_num(k, v)?,
            "scene.texture" => self.scene.texture = parse_num(k, v)?,
            "scene.rect" => {
                let [x, y, w, h] = exact::<4, usize>(k, v)?;
                self.scene.rect = (x, y, w, h);
            }
            "scene.motion" => {
                let [dx, dy] = exact::<2, isize>(k, v)?;
                self.scene.motion = (dx, dy);
            }
            "scene.noise_seed" => self.scene.noise_seed = Some(parse_num(k, v)?),
            "ablate.patterns" => self.ablate_patterns = parse_words(v),
            "ablate.schedules" => self.ablate_schedules = parse_words(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return fail("sampler.steps must be positive".into());
        }
        if !(self.final_alpha_bar > 0.0 && self.final_alpha_bar < 1.0) {
            return fail("sampler.final_alpha_bar must lie in (0, 1)".into());
        }
        if !(0.0..=100.0).contains(&self.percentile) {
            return fail("profile.percentile must lie in [0, 100]".into());
        }
        if self.profile_range().is_empty() || self.profile_range().end > self.steps {
            return fail(format!("profiling range {:?} not within 0..{}", self.profile_range(), self.steps));
        }
        if self.scene.magnitude.is_nan() || self.scene.background.is_nan() || self.scene.texture.is_nan() {
            return fail("scene levels must be numbers".into());
        }
        for name in self.ablate_patterns.iter().chain([&self.pattern]) {
            self.reuse_pattern(name)?;
        }
        for name in self.ablate_schedules.iter().chain([&self.schedule_kind]) {
            self.step_schedule(name)?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::new(self.seed, self.blocks, self.channels, self.grid);
        let default = Shaping::default_for(self.blocks);
        m.shaping = Shaping {
            foreground: self.foreground_blocks.clone().unwrap_or(default.foreground),
            background: self.background_blocks.clone().unwrap_or(default.background),
            focus_strength: self.focus_strength.unwrap_or(default.focus_strength),
            foreground_gain: self.foreground_gain.unwrap_or(default.foreground_gain),
        };
        m
    }

    pub fn profile_settings(&self) -> ProfileSettings {
        ProfileSettings {
            percentile: self.percentile,
            orientation: self.orientation,
        }
    }

    pub fn profile_range(&self) -> std::ops::Range<usize> {
        self.profile_start..self.profile_end.unwrap_or(self.steps)
    }

    /// Fixed interval for `step_average`: configured, else the rounded mean
    /// of the interval list.
    pub fn average_interval(&self) -> usize {
        self.interval.unwrap_or_else(|| {
            let sum: usize = self.intervals.iter().sum();
            let n = self.intervals.len().max(1);
            ((2 * sum + n) / (2 * n)).max(1)
        })
    }

    pub fn step_schedule(&self, name: &str) -> Result<StepSchedule> {
        let kind = match name {
            "stepwise" => {
                let mut v = self.intervals.clone();
                v.sort_unstable_by(|a, b| b.cmp(a));
                ScheduleKind::Stepwise(v)
            }
            "step_inverse" => {
                let mut v = self.intervals.clone();
                v.sort_unstable();
                ScheduleKind::StepInverse(v)
            }
            "step_average" => ScheduleKind::StepAverage(self.average_interval()),
            "adaptive" => ScheduleKind::Adaptive {
                t_max: self.t_max,
                t_min: self.t_min,
            },
            _ => return Err(Error::Config(format!("unknown schedule {name:?}"))),
        };
        StepSchedule::new(kind, self.warmup, self.steps)
    }

    pub fn reuse_pattern(&self, name: &str) -> Result<ReusePattern> {
        Ok(match name {
            "background_only" => ReusePattern::BackgroundOnly,
            "foreground_only" => ReusePattern::ForegroundOnly,
            "split" => ReusePattern::Split(self.split_step.unwrap_or(self.steps / 2)),
            "alternate" => ReusePattern::Alternate(self.alternate_len),
            _ => return Err(Error::Config(format!("unknown reuse pattern {name:?}"))),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new("/cfg"))
    }

    #[test]
    fn defaults_and_overrides() {
        let c = parse("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        let c = parse(
            "# comment\nseed = 7\nschedule.kind = adaptive # trailing\nschedule.t_max = 10\nscene.rect = 1,1,2,2\nprofile.mask = m.pgm\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.schedule_kind, "adaptive");
        assert_eq!(c.t_max, 10);
        assert_eq!(c.scene.rect, (1, 1, 2, 2));
        assert_eq!(c.mask, MaskMode::File(PathBuf::from("/cfg/m.pgm")));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(parse("nope = 1"), Err(Error::Config(_))));
        assert!(parse("seed").is_err());
        assert!(parse("seed = x").is_err());
        assert!(parse("scene.rect = 1,2,3").is_err());
        assert!(parse("cache.pattern = sideways").is_err());
        assert!(parse("schedule.intervals = 0,3").is_err());
        assert!(parse("schedule.warmup = 50").is_err());
        assert!(parse("profile.step_end = 60").is_err());
    }

    #[test]
    fn schedule_construction() {
        let c = parse("").unwrap();
        assert_eq!(c.average_interval(), 8);
        assert_eq!(
            c.step_schedule("step_inverse").unwrap().kind(),
            &ScheduleKind::StepInverse(vec![3, 6, 9, 12])
        );
        assert_eq!(c.reuse_pattern("split").unwrap(), ReusePattern::Split(25));
    }
}
