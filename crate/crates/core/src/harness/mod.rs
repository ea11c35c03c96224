//! Experiment driver: scene setup, profiling, reference and cached runs.

pub mod commands;
pub mod config;
pub mod scene;

use crate::cache::{CacheEngine, ReusePattern, StepSchedule};
use crate::dit::{denoise_loop, denoise_loop_observed, DenoiseOutput, DiTModel, LatentVideo, NoiseSchedule, TraceFlags};
use crate::error::Result;
use crate::formats::read_mask_pgm;
use crate::metrics::{Provenance, RunArtifacts};
use crate::profiler::{partition_blocks, r_attn_for, segment_foreground, BlockPartition, BlockProfile, ForegroundMask};

pub use config::{ExperimentConfig, MaskMode, SceneSpec};
pub use scene::{generate_scene, Scene};

/// Everything a run needs, derived deterministically from the config.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: DiTModel,
    pub noise: NoiseSchedule,
    pub scene: Scene,
    /// The scene diffused to the first denoising step.
    pub x_start: LatentVideo,
    file_mask: Option<ForegroundMask>,
}

#[derive(Debug, Clone)]
pub struct ProfileOutcome {
    pub profile: BlockProfile,
    pub partition: BlockPartition,
    pub noise_preds: Vec<LatentVideo>,
    /// Steps where segmentation found no foreground.
    pub degenerate_steps: Vec<usize>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model = DiTModel::new(config.model_config())?;
        let noise = NoiseSchedule::quadratic(config.steps, config.final_alpha_bar)?;
        let scene_seed = config.scene.noise_seed.unwrap_or(config.seed);
        let scene = generate_scene(&config.scene, config.grid, config.channels, scene_seed)?;
        let z = scene::start_noise(config.grid, config.channels, scene_seed);
        let x_start = noise.forward_diffuse(&scene.x0, config.steps, &z)?;
        let file_mask = match &config.mask {
            MaskMode::File(path) => Some(read_mask_pgm(path, config.grid)?),
            _ => None,
        };
        Ok(Self {
            config,
            model,
            noise,
            scene,
            x_start,
            file_mask,
        })
    }

    pub fn provenance(&self) -> Provenance {
        let g = self.config.grid;
        Provenance {
            seed: self.config.seed,
            blocks: self.config.blocks,
            channels: self.config.channels,
            frames: g.frames,
            height: g.height,
            width: g.width,
            steps: self.config.steps,
        }
    }

    pub fn artifacts(&self, out: &DenoiseOutput) -> RunArtifacts {
        RunArtifacts {
            provenance: self.provenance(),
            final_latent: out.x0.clone(),
            stats: out.stats.clone(),
            full_flops: self.model.flop_model().full_run(self.config.steps as u64),
        }
    }

    /// Uncached run; never touches a cache engine.
    pub fn reference(&self, flags: TraceFlags) -> Result<DenoiseOutput> {
        denoise_loop(&self.model, &self.x_start, &self.noise, None, flags)
    }

    /// Uncached attention-traced run scored block by block.
    pub fn profile(&self) -> Result<ProfileOutcome> {
        let cfg = &self.config;
        let settings = cfg.profile_settings();
        let mut profile = BlockProfile::new(cfg.blocks, cfg.steps, cfg.percentile, cfg.tau);
        let mut degenerate_steps = Vec::new();
        let flags = TraceFlags {
            attention: true,
            boundaries: false,
        };
        let out = denoise_loop_observed(&self.model, &self.x_start, &self.noise, None, flags, &mut |view| {
            let mask = match (&cfg.mask, &self.file_mask) {
                (_, Some(m)) => m.clone(),
                (MaskMode::Truth, _) => self.scene.truth.clone(),
                _ => segment_foreground(view.noise_pred)?,
            };
            if mask.count() == 0 {
                degenerate_steps.push(view.step);
            }
            for (b, trace) in view.trace.blocks.iter().enumerate() {
                if let Some(a) = trace.as_ref().and_then(|t| t.attention.as_ref()) {
                    profile.r_attn[b][view.step] = r_attn_for(a, &mask, cfg.grid, settings)?;
                }
            }
            Ok(())
        })?;
        let partition = partition_blocks(&profile, cfg.tau, cfg.profile_range())?;
        Ok(ProfileOutcome {
            profile,
            partition,
            noise_preds: out.trace.noise_preds,
            degenerate_steps,
        })
    }

    pub fn engine(&self, partition: &BlockPartition, pattern: ReusePattern, schedule: StepSchedule) -> Result<CacheEngine> {
        CacheEngine::new(partition.clone(), schedule, pattern, self.config.delta_mode)
    }

    pub fn cached(&self, engine: &mut CacheEngine, flags: TraceFlags) -> Result<DenoiseOutput> {
        denoise_loop(&self.model, &self.x_start, &self.noise, Some(engine), flags)
    }
}
