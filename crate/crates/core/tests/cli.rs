//! End-to-end tests of the command-line binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mmsparse::masks::HeadPattern;
use mmsparse::search::{CalibrationTable, HeadConfig};
use mmsparse::synth::{Fixture, FIXTURE_FILE};

fn mmsparse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmsparse"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn gen(dir: &Path, extra: &[&str]) {
    let mut args = vec!["gen", "--tokens-per-frame", "8", "--d-h", "8", "--block-size", "16"];
    if !extra.contains(&"--frames") {
        args.extend_from_slice(&["--frames", "8"]);
    }
    let out = s(dir);
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out", &out]);
    let o = mmsparse(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn report_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn missing_fixture_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = s(&dir.path().join("nowhere"));
    for cmd in ["analyze", "search", "run"] {
        let o = mmsparse(&[cmd, "--fixture", &missing]);
        assert_eq!(o.status.code(), Some(2), "{cmd}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere"));
    }
}

#[test]
fn infeasible_budget_exits_3_naming_cheapest() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    gen(&fx, &[]);
    let o = mmsparse(&[
        "search",
        "--fixture",
        &s(&fx),
        "--budget",
        "1",
        "--block-size",
        "16",
        "--out",
        &s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cheapest is"));
}

#[test]
fn mismatched_config_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    gen(&a, &[]);
    gen(&b, &["--frames", "6"]);
    let se = dir.path().join("se");
    let o = mmsparse(&[
        "search",
        "--fixture",
        &s(&a),
        "--budget",
        "unbounded",
        "--block-size",
        "16",
        "--out",
        &s(&se),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let heads = s(&se.join("heads.json"));
    let o = mmsparse(&["run", "--fixture", &s(&b), "--heads", &heads, "--out", &s(dir.path())]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn malformed_inputs_fail_without_panicking() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    fs::create_dir_all(&fx).unwrap();
    fs::write(fx.join(FIXTURE_FILE), "{ not json").unwrap();
    let o = mmsparse(&["analyze", "--fixture", &s(&fx)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains(FIXTURE_FILE));

    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "block_sise = 3\n").unwrap();
    let o = mmsparse(&["--config", &s(&cfg), "gen"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("block_sise"));
}

#[test]
fn all_full_config_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    gen(&fx, &["--heads", "grid,noise"]);
    let fixture = Fixture::load(&fx).unwrap();
    let table = CalibrationTable {
        seq_len: fixture.seq_len(),
        block_size: 16,
        last_q: 16,
        budget: "unbounded".into(),
        budget_flops: u64::MAX,
        tags: fixture.map.tags().to_vec(),
        heads: fixture
            .heads
            .iter()
            .map(|h| HeadConfig::global(h.name.clone(), HeadPattern::Full))
            .collect(),
    };
    let heads = dir.path().join("full.json");
    table.save(&heads).unwrap();
    let out = dir.path().join("run");
    let o = mmsparse(&["run", "--fixture", &s(&fx), "--heads", &s(&heads), "--out", &s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = report_rows(&out.join("report.csv"));
    let searched: Vec<_> = rows.iter().filter(|r| r[1] == "searched").collect();
    assert_eq!(searched.len(), 2);
    for r in searched {
        assert_eq!(r[4], "1");
        assert!(r[5].parse::<f64>().unwrap() <= 1e-10);
    }
}

#[test]
fn config_file_drives_a_full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(
        &cfg,
        "fixture = \"fx\"\nheads = \"fx/heads.json\"\nout = \"fx\"\nblock_size = 16\nlast_q = 32\nbudget = \"a_shape:16,48\"\nseed = 3\n\n[gen]\nlayout = \"grid\"\nframes = 16\ntokens_per_frame = 16\nd_h = 16\nheads = [\"grid\"]\n",
    )
    .unwrap();
    let c = s(&cfg);
    for cmd in ["gen", "analyze", "search", "run"] {
        let o = mmsparse(&["--config", &c, cmd]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let fx = dir.path().join("fx");
    for f in [
        "coverage.csv",
        "reuse.csv",
        "heads.json",
        "report.csv",
        "heatmaps/h0_permuted.pgm",
    ] {
        assert!(fx.join(f).is_file(), "{f}");
    }
    let rows = report_rows(&fx.join("report.csv"));
    let get = |m: &str| rows.iter().find(|r| r[1] == m).unwrap().clone();
    let (searched, a_shape) = (get("searched"), get("a_shape"));
    assert!(searched[4].parse::<f64>().unwrap() <= 0.5);
    assert!(searched[6].parse::<f64>().unwrap() < a_shape[6].parse::<f64>().unwrap());
    let cov = fs::read_to_string(fx.join("coverage.csv")).unwrap();
    let at95: f64 = cov
        .lines()
        .find(|l| l.contains(",0.95,"))
        .unwrap()
        .split(',')
        .nth(3)
        .unwrap()
        .parse()
        .unwrap();
    assert!(at95 < 0.5, "planted grid coverage {at95}");
}
