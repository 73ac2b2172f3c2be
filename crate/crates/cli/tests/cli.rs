//! End-to-end checks of the `treepack` binary: artifact emission, exit
//! codes, and the headline numbers.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn treepack(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_treepack"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn tempdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("treepack-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn plan_dgx1v_allreduce_six_trees() {
    let dir = tempdir("plan");
    let out = treepack(
        &dir,
        &[
            "plan",
            "--preset",
            "dgx1v",
            "--gpus",
            "0,1,2,3,4,5,6,7",
            "--primitive",
            "allreduce",
            "--bytes",
            "500M",
            "--out",
            "run",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("packing: 6 trees"), "{stdout}");
    for artifact in ["run.packing.json", "run.schedule.json", "run.manifest.json"] {
        assert!(dir.join(artifact).exists(), "{artifact} missing");
    }
    // The manifest records every artifact it emitted.
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("run.manifest.json")).unwrap())
            .unwrap();
    let outputs = manifest["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 3);
}

#[test]
fn plan_fragmented_allocation_packs_nvlink_tree() {
    let dir = tempdir("frag");
    let out = treepack(
        &dir,
        &[
            "plan", "--preset", "dgx1p", "--gpus", "1,4,5,6", "--primitive", "broadcast",
            "--root", "1", "--bytes", "100M", "--out", "frag", "--emit-dot",
        ],
    );
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("packing: 1 trees"), "{stdout}");
    assert!(stdout.contains("18.000 GB/s"), "{stdout}");
    assert!(dir.join("frag.dot").exists());
}

#[test]
fn simulate_schedule_roundtrip_and_half_ratio() {
    let dir = tempdir("sim");
    for (prim, out) in [("broadcast", "bc"), ("allreduce", "ar")] {
        let mut args = vec![
            "plan", "--preset", "dgx1v", "--primitive", prim, "--bytes", "500M",
            "--chunk-bytes", "4M", "--out", out,
        ];
        if prim == "broadcast" {
            args.extend(["--root", "0"]);
        }
        let o = treepack(&dir, &args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut tput = Vec::new();
    for out in ["bc", "ar"] {
        let o = treepack(
            &dir,
            &[
                "simulate",
                "--schedule",
                &format!("{out}.schedule.json"),
                "--overhead-us",
                "0",
                "--reduce-factor",
                "1",
                "--out",
                &format!("{out}-sim"),
            ],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let report: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.join(format!("{out}-sim.report.json"))).unwrap(),
        )
        .unwrap();
        tput.push(report["throughput_gbps"].as_f64().unwrap());
    }
    let ratio = tput[1] / tput[0];
    assert!((0.45..=0.55).contains(&ratio), "allreduce/broadcast ratio {ratio}");
}

#[test]
fn compare_all_allocations_bins() {
    let dir = tempdir("cmp");
    let out = treepack(
        &dir,
        &["compare", "--preset", "dgx1v", "--all-allocations", "--primitive", "broadcast",
          "--out", "cmp"],
    );
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("46 allocations"), "{stdout}");
    let csv = std::fs::read_to_string(dir.join("cmp.compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 47); // header + 46 bins
    let speedups: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(speedups.iter().all(|&s| s >= 1.0 - 1e-9));
    assert!(speedups.iter().any(|&s| (s - 1.0).abs() < 1e-6), "ring-perfect bins exist");
    let max = speedups.iter().cloned().fold(0.0f64, f64::max);
    assert!((max - 6.0).abs() < 1e-6, "ceiling {max}");
}

#[test]
fn tune_chunks_prints_trajectory() {
    let dir = tempdir("tune");
    let out = treepack(
        &dir,
        &[
            "simulate", "--preset", "dgx1p", "--gpus", "0,1,2,3", "--primitive", "broadcast",
            "--root", "0", "--bytes", "64M", "--tune-chunks", "--overhead-us", "10",
            "--out", "tuned",
        ],
    );
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("MIAD trajectory"), "{stdout}");
    assert!(stdout.contains("selected chunk"), "{stdout}");
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempdir("err");
    std::fs::write(
        dir.join("bad.json"),
        r#"{"name":"bad","nodes":[{"id":0,"kind":"gpu"}],"links":[{"src":0,"dst":9,"gbps":1.0,"class":"pcie"}]}"#,
    )
    .unwrap();
    let out = treepack(&dir, &["plan", "--topology", "bad.json", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("links[0].dst"), "{stderr}");

    let out = treepack(&dir, &["plan", "--preset", "nope", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn presets_dump_round_trips() {
    let dir = tempdir("dump");
    let out = treepack(&dir, &["presets", "--dump", "dgx1v"]);
    assert!(out.status.success());
    std::fs::write(dir.join("dgx1v.json"), &out.stdout).unwrap();
    let replay = treepack(
        &dir,
        &[
            "plan", "--topology", "dgx1v.json", "--primitive", "broadcast", "--root", "0",
            "--bytes", "64M", "--out", "rt",
        ],
    );
    assert!(replay.status.success(), "{}", String::from_utf8_lossy(&replay.stderr));
    let stdout = String::from_utf8_lossy(&replay.stdout);
    assert!(stdout.contains("packing: 6 trees"), "{stdout}");
}
