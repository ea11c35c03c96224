use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "sampler.steps = 12\nschedule.warmup = 2\nschedule.intervals = 4, 2\n";

fn ditcache(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ditcache"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn run_writes_report_and_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.cfg", SMALL);
    let out = tmp.path().join("run");
    let o = ditcache(&["run", "--config", &cfg, "--trace"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "report.json",
        "partition.txt",
        "executed.csv",
        "step_l1.csv",
        "reference.pdit",
        "reference.json",
        "cached.pdit",
        "cached.json",
        "cache_state.txt",
        "trace.csv",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let r = report(&out);
    assert_eq!(r["metric_space"], "latent");
    assert!(r["speedup_flops"].as_f64().unwrap() > 1.0);
    assert_eq!(
        r["flops_executed"].as_u64().unwrap() + r["flops_skipped"].as_u64().unwrap(),
        r["flops_full"].as_u64().unwrap()
    );
    assert!(r["wall_ms"].is_null());
    assert_eq!(String::from_utf8(o.stdout).unwrap(), std::fs::read_to_string(out.join("report.json")).unwrap());
    let executed = std::fs::read_to_string(out.join("executed.csv")).unwrap();
    assert_eq!(executed.lines().count(), 13);
}

#[test]
fn timing_flag_adds_wall_clock() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.cfg", SMALL);
    let out = tmp.path().join("run");
    assert!(ditcache(&["run", "--config", &cfg, "--timing"], &out).status.success());
    let r = report(&out);
    assert!(r["wall_ms"].as_f64().unwrap() > 0.0);
    assert!(r["speedup_wall"].as_f64().is_some());
}

#[test]
fn compare_reproduces_run_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.cfg", SMALL);
    let run = tmp.path().join("run");
    assert!(ditcache(&["run", "--config", &cfg], &run).status.success());
    let cmp = tmp.path().join("cmp");
    let test = run.join("cached.pdit");
    let reference = run.join("reference.pdit");
    let o = ditcache(
        &["compare", "--test", test.to_str().unwrap(), "--reference", reference.to_str().unwrap()],
        &cmp,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(report(&run), report(&cmp));
}

#[test]
fn compare_rejects_mismatched_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.cfg", SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(ditcache(&["run", "--config", &cfg, "--seed", "1"], &a).status.success());
    assert!(ditcache(&["run", "--config", &cfg, "--seed", "2"], &b).status.success());
    let test = a.join("cached.pdit");
    let reference = b.join("reference.pdit");
    let o = ditcache(
        &["compare", "--test", test.to_str().unwrap(), "--reference", reference.to_str().unwrap()],
        &tmp.path().join("c"),
    );
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn explicit_partition_is_used() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.cfg", SMALL);
    let part = write_config(tmp.path(), "p.txt", "F: 0,1,2,3,4,5,6,7\nB:\n");
    let out = tmp.path().join("run");
    let o = ditcache(&["run", "--config", &cfg, "--partition", &part], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert_eq!(r["blocks_skipped"].as_u64(), Some(0));
    assert_eq!(r["latent_psnr_db"], "inf");
}

#[test]
fn profile_and_l1curve_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.cfg", SMALL);
    let out = tmp.path().join("p");
    let o = ditcache(&["profile", "--config", &cfg], &out);
    assert!(o.status.success());
    let heat = std::fs::read_to_string(out.join("heatmap.csv")).unwrap();
    assert_eq!(heat.lines().next(), Some("block,step,r_attn"));
    assert_eq!(heat.lines().count(), 1 + 8 * 12);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), std::fs::read_to_string(out.join("partition.txt")).unwrap());

    let out = tmp.path().join("l");
    assert!(ditcache(&["l1curve", "--config", &cfg], &out).status.success());
    let l1 = std::fs::read_to_string(out.join("l1.csv")).unwrap();
    assert_eq!(l1.lines().count(), 12);
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), "bad.cfg", "no_such_key = 1\n");
    let o = ditcache(&["run", "--config", &bad], &tmp.path().join("x"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));

    let o = ditcache(&["run", "--config", "/nonexistent/exp.cfg"], &tmp.path().join("x"));
    assert_eq!(o.status.code(), Some(4));

    let junk = write_config(tmp.path(), "junk.pdit", "not a latent");
    write_config(tmp.path(), "junk.json", "{}");
    let o = ditcache(&["compare", "--test", &junk, "--reference", &junk], &tmp.path().join("x"));
    assert_eq!(o.status.code(), Some(4));

    let cfg = write_config(tmp.path(), "a.cfg", SMALL);
    let part = write_config(tmp.path(), "p.txt", "F: 0,1\nB: 2\n");
    let o = ditcache(&["run", "--config", &cfg, "--partition", &part], &tmp.path().join("x"));
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn interval_one_run_is_lossless() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "a.cfg",
        "sampler.steps = 10\nschedule.kind = step_average\nschedule.interval = 1\nschedule.warmup = 0\n",
    );
    let out = tmp.path().join("run");
    assert!(ditcache(&["run", "--config", &cfg], &out).status.success());
    let r = report(&out);
    assert_eq!(r["latent_psnr_db"], "inf");
    assert_eq!(r["speedup_flops"].as_f64(), Some(1.0));
    assert_eq!(r["blocks_skipped"].as_u64(), Some(0));
}

#[test]
fn all_background_interval_two_skips_half_the_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let steps = 11u64;
    let cfg = write_config(
        tmp.path(),
        "a.cfg",
        &format!("sampler.steps = {steps}\nschedule.kind = step_average\nschedule.interval = 2\nschedule.warmup = 0\n"),
    );
    let part = write_config(tmp.path(), "p.txt", "F:\nB: 0,1,2,3,4,5,6,7\n");
    let out = tmp.path().join("run");
    let o = ditcache(&["run", "--config", &cfg, "--partition", &part], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert_eq!(r["blocks_skipped"].as_u64(), Some(8 * (steps / 2)));
    let (n, c) = (128u64, 16u64);
    let block = 24 * n * c * c + 4 * n * n * c;
    assert_eq!(r["flops_skipped"].as_u64(), Some(8 * (steps / 2) * block));
}

#[test]
fn ablation_rows_follow_the_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "a.cfg",
        &format!("{SMALL}ablate.patterns = background_only, split\nablate.schedules = stepwise, step_average, adaptive\n"),
    );
    let out = tmp.path().join("a");
    assert!(ditcache(&["ablate", "--config", &cfg], &out).status.success());
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let keys: Vec<String> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').take(2).collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(
        keys,
        [
            "none,none",
            "background_only,stepwise",
            "background_only,step_average",
            "background_only,adaptive",
            "split,stepwise",
            "split,step_average",
            "split,adaptive",
        ]
    );
    let reference = csv.lines().nth(1).unwrap();
    assert_eq!(reference.split(',').nth(5), Some("1"));
}
