//! CLI subcommands. Each writes its outputs under one directory and is a
//! pure function of its inputs unless wall-clock timing is requested.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Experiment, ExperimentConfig};
use crate::dit::{denoise_loop_observed, LatentVideo, RunStats, TraceFlags};
use crate::error::{Error, Result};
use crate::formats::{read_pdit, read_text, render_frames, series_csv, write_bytes, write_pdit};
use crate::metrics::{compare_runs, mean_l1, Provenance, RunArtifacts, RunReport};
use crate::profiler::{export_heatmap, heatmap_csv, l1_step_distance, BlockPartition};

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub out: PathBuf,
    pub frames: bool,
    pub trace: bool,
    /// Include wall-clock measurements (outputs are then not reproducible).
    pub timing: bool,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

/// Config from `path` (defaults when absent) with an optional seed override.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Provenance and cost ledger stored next to a saved latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub provenance: Provenance,
    pub full_flops: u64,
    pub stats: RunStats,
}

fn save_run(dir: &Path, name: &str, art: &RunArtifacts, timing: bool) -> Result<()> {
    write_pdit(&dir.join(format!("{name}.pdit")), art.final_latent.tensor())?;
    let mut stats = art.stats.clone();
    if !timing {
        stats.wall_ms = 0.0;
    }
    let meta = RunMeta {
        provenance: art.provenance.clone(),
        full_flops: art.full_flops,
        stats,
    };
    let mut json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    json.push('\n');
    write_text(&dir.join(format!("{name}.json")), &json)
}

/// Loads a latent saved by `run` together with its `.json` sidecar.
pub fn load_run(pdit: &Path) -> Result<RunArtifacts> {
    let meta_path = pdit.with_extension("json");
    let text = read_text(&meta_path)?;
    let meta: RunMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    Ok(RunArtifacts {
        provenance: meta.provenance,
        final_latent: LatentVideo::new(read_pdit(pdit)?)?,
        stats: meta.stats,
        full_flops: meta.full_flops,
    })
}

fn finish_report(report: RunReport, timing: bool) -> RunReport {
    if timing {
        report
    } else {
        report.without_timing()
    }
}

fn resolve_partition(ex: &Experiment, file: Option<&Path>) -> Result<BlockPartition> {
    match file {
        Some(p) => BlockPartition::parse(&read_text(p)?, ex.config.blocks),
        None => Ok(ex.profile()?.partition),
    }
}

/// Traced uncached run: heatmap, per-block means and the partition.
pub fn cmd_profile(cfg: ExperimentConfig, opts: &Options) -> Result<BlockPartition> {
    let ex = Experiment::new(cfg)?;
    let outcome = ex.profile()?;
    write_text(&opts.out.join("heatmap.csv"), &heatmap_csv(&export_heatmap(&outcome.profile)))?;
    write_text(&opts.out.join("partition.txt"), &outcome.partition.to_text())?;
    let range = ex.config.profile_range();
    let means: Vec<String> = (0..ex.config.blocks)
        .map(|b| outcome.profile.block_mean(b, range.clone()).map_or_else(String::new, |m| m.to_string()))
        .collect();
    write_text(&opts.out.join("block_r_attn.csv"), &series_csv("block,value", &means))?;
    if opts.frames {
        for (s, pred) in outcome.noise_preds.iter().enumerate() {
            for (f, img) in render_frames(pred).into_iter().enumerate() {
                write_bytes(&opts.out.join(format!("frames/eps_step_{s:04}_frame_{f:03}.pgm")), &img)?;
            }
        }
    }
    Ok(outcome.partition)
}

/// Reference and cached runs with the same seed, compared.
pub fn cmd_run(cfg: ExperimentConfig, partition_file: Option<&Path>, opts: &Options) -> Result<RunReport> {
    let ex = Experiment::new(cfg)?;
    let partition = resolve_partition(&ex, partition_file)?;
    write_text(&opts.out.join("partition.txt"), &partition.to_text())?;

    let reference = ex.reference(TraceFlags::OFF)?;
    let schedule = ex.config.step_schedule(&ex.config.schedule_kind)?;
    let pattern = ex.config.reuse_pattern(&ex.config.pattern)?;
    let mut engine = ex.engine(&partition, pattern, schedule)?;
    let flags = if opts.trace { TraceFlags::ALL } else { TraceFlags::OFF };
    let mut executed_rows = String::from("step,block,executed\n");
    let cached = denoise_loop_observed(&ex.model, &ex.x_start, &ex.noise, Some(&mut engine), flags, &mut |v| {
        if opts.frames {
            for (f, img) in render_frames(v.latent).into_iter().enumerate() {
                write_bytes(&opts.out.join(format!("frames/step_{:04}_frame_{f:03}.pgm", v.step)), &img)?;
            }
        }
        for (b, t) in v.trace.blocks.iter().enumerate() {
            executed_rows.push_str(&format!("{},{b},{}\n", v.step, t.is_some() as u8));
        }
        Ok(())
    })?;

    let ref_art = ex.artifacts(&reference);
    let cached_art = ex.artifacts(&cached);
    let report = finish_report(compare_runs(&cached_art, &ref_art)?, opts.timing);
    write_text(&opts.out.join("report.json"), &report.to_json())?;
    write_text(
        &opts.out.join("executed.csv"),
        &series_csv("step,value", &cached.stats.per_step_executed),
    )?;
    let step_l1 = cached
        .trace
        .noise_preds
        .iter()
        .zip(&reference.trace.noise_preds)
        .map(|(a, b)| mean_l1(a, b))
        .collect::<Result<Vec<_>>>()?;
    write_text(&opts.out.join("step_l1.csv"), &series_csv("step,value", &step_l1))?;
    save_run(&opts.out, "reference", &ref_art, opts.timing)?;
    save_run(&opts.out, "cached", &cached_art, opts.timing)?;

    if opts.trace {
        write_text(&opts.out.join("cache_state.txt"), &engine.dump_state())?;
        write_text(&opts.out.join("trace.csv"), &executed_rows)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub pattern: String,
    pub schedule: String,
    pub report: std::result::Result<RunReport, String>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("pattern,schedule,latent_psnr_db,latent_ssim,mean_l1,speedup_flops,wall_ms,error\n");
    for r in rows {
        match &r.report {
            Ok(rep) => out.push_str(&format!(
                "{},{},{},{},{},{},{},\n",
                r.pattern,
                r.schedule,
                rep.psnr,
                rep.ssim,
                rep.mean_l1,
                rep.speedup_flops,
                fmt_opt(rep.wall_ms)
            )),
            Err(e) => out.push_str(&format!(
                "{},{},,,,,,{}\n",
                r.pattern,
                r.schedule,
                e.replace([',', '\n'], ";")
            )),
        }
    }
    out
}

/// Every pattern x schedule cell against one shared reference run. The
/// first row is the reference compared with itself.
pub fn cmd_ablate(cfg: ExperimentConfig, partition_file: Option<&Path>, opts: &Options) -> Result<Vec<AblationRow>> {
    let ex = Experiment::new(cfg)?;
    let partition = resolve_partition(&ex, partition_file)?;
    let reference = ex.reference(TraceFlags::OFF)?;
    let ref_art = ex.artifacts(&reference);

    let cells: Vec<(String, String)> = ex
        .config
        .ablate_patterns
        .iter()
        .flat_map(|p| ex.config.ablate_schedules.iter().map(move |s| (p.clone(), s.clone())))
        .collect();
    let results: Vec<AblationRow> = cells
        .par_iter()
        .map(|(p, s)| {
            let report = (|| {
                let mut engine = ex.engine(&partition, ex.config.reuse_pattern(p)?, ex.config.step_schedule(s)?)?;
                let run = ex.cached(&mut engine, TraceFlags::OFF)?;
                Ok::<_, Error>(finish_report(compare_runs(&ex.artifacts(&run), &ref_art)?, opts.timing))
            })();
            AblationRow {
                pattern: p.clone(),
                schedule: s.clone(),
                report: report.map_err(|e| e.to_string()),
            }
        })
        .collect();

    let mut rows = vec![AblationRow {
        pattern: "none".into(),
        schedule: "none".into(),
        report: Ok(finish_report(compare_runs(&ref_art, &ref_art)?, opts.timing)),
    }];
    rows.extend(results);
    write_text(&opts.out.join("partition.txt"), &partition.to_text())?;
    write_text(&opts.out.join("ablation.csv"), &ablation_csv(&rows))?;
    Ok(rows)
}

/// Mean L1 between consecutive noise predictions of an uncached run.
pub fn cmd_l1curve(cfg: ExperimentConfig, opts: &Options) -> Result<Vec<f64>> {
    let ex = Experiment::new(cfg)?;
    let run = ex.reference(TraceFlags::OFF)?;
    let curve = l1_step_distance(&run.trace.noise_preds)?;
    write_text(&opts.out.join("l1.csv"), &series_csv("step,l1", &curve))?;
    Ok(curve)
}

/// Compares two latents saved by `run`.
pub fn cmd_compare(test: &Path, reference: &Path, opts: &Options) -> Result<RunReport> {
    let report = finish_report(compare_runs(&load_run(test)?, &load_run(reference)?)?, opts.timing);
    write_text(&opts.out.join("report.json"), &report.to_json())?;
    Ok(report)
}
