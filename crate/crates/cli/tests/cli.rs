use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tpsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tpsim-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn unknown_experiment_exits_1_with_names() {
    let o = tpsim(&["run", "--experiment", "fig7", "--out", scratch("unknown").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    for n in ["fig3", "fig4a", "fig4b", "fig4c", "fig5a", "fig5b", "fig5c"] {
        assert!(err.contains(n), "{err}");
    }
}

#[test]
fn bad_override_exits_1() {
    let out = scratch("badkey");
    let o = tpsim(&["run", "--experiment", "fig5c", "--set", "reassembly.nope=1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("reassembly.nope"));
    let o = tpsim(&["run", "--experiment", "fig5c", "--set", "global.flow_count", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_file_is_applied() {
    let out = scratch("config");
    std::fs::create_dir_all(&out).unwrap();
    let file = out.join("run.toml");
    std::fs::write(&file, "[micro]\nreasm_cycles = 2000\n").unwrap();
    let o = tpsim(&["run", "--experiment", "fig5c", "--config", file.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("fig5c.csv")).unwrap();
    assert!(csv.starts_with("seg_size,bytes_per_cycle,gbps\n"));
    assert!(csv.contains("\n256,51.200,"), "{csv}");
}

#[test]
fn failed_invariant_exits_2_and_is_named() {
    let out = scratch("props");
    let o = tpsim(&[
        "run", "--experiment", "props", "--set", "props.cycle_budget=5000",
        "--set", "props.tcp_stream_bytes=100000", "--set", "props.roce_messages=50",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tcp_stream_exactly_once"));
}

#[test]
fn fig4a_plot_writes_csv_and_svg() {
    let out = scratch("fig4a");
    let o = tpsim(&["run", "--experiment", "fig4a", "--plot", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let summary = std::fs::read_to_string(out.join("fig4a_summary.csv")).unwrap();
    let depths: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(depths, ["3", "10", "100"]);
    let svg = std::fs::read_to_string(out.join("fig4a.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.matches("<polyline").count() == 3);
}

#[test]
fn fig3_single_queue() {
    let out = scratch("fig3");
    let o = tpsim(&["run", "--experiment", "fig3", "--queue-kb", "24", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("fig3.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("protocol,queue_kb,phase,avg_cycles,p90_cycles,samples"));
    assert!(lines.all(|l| l.split(',').nth(1) == Some("24")));
}

#[test]
fn all_is_deterministic() {
    let (a, b) = (scratch("det-a"), scratch("det-b"));
    for d in [&a, &b] {
        let o = tpsim(&["run", "--experiment", "all", "--seed", "7", "--out", d.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() >= 7);
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(tb[k] == *v, "{k} differs between runs");
    }
}
