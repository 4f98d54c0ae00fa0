use std::path::PathBuf;
use std::process::Command;

use gvdp_harness::data::clip_quantile;
use gvdp_harness::experiment::read_rows;
use proptest::prelude::*;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("gvdp-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn gvdp(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gvdp")).args(args).output().unwrap()
}

#[test]
fn demo_clipping_writes_csv_and_is_seed_deterministic() {
    let dir = scratch("demo");
    let run = |file: &str, seed: &str| {
        let out = dir.join(file);
        let o = gvdp(&["demo-clipping", "--n", "400", "--trials", "3", "--seed", seed, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("clip_1"));
        std::fs::read(out).unwrap()
    };
    let a = run("a.csv", "7");
    let b = run("b.csv", "7");
    let c = run("c.csv", "8");
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.starts_with(b"trial,dim,true,estimate,ci_lo,ci_hi,covered,method\n"));
    let rows = read_rows(a.as_slice()).unwrap();
    assert_eq!(rows.len(), 3 * 4);
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn run_reads_config_and_flags_override_it() {
    let dir = scratch("run");
    let cfg = dir.join("exp.toml");
    std::fs::write(&cfg, "kind = \"ols_coverage\"\nn = 3000\nk = 30\nr = 10\ntrials = 50\n").unwrap();
    let out = dir.join("rows.csv");
    let o = gvdp(&["run", cfg.to_str().unwrap(), "--trials", "1", "--d", "2", "--of", "10", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_rows(std::fs::File::open(&out).unwrap()).unwrap();
    assert!(rows.iter().all(|r| r.trial == 0 && r.dim < 2));
    assert!(rows.iter().any(|r| r.method == "gvdp"));
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn bad_input_exits_nonzero_with_stage() {
    let dir = scratch("bad");
    let cfg = dir.join("bad.toml");
    std::fs::write(&cfg, "kind = \"ols_coverage\"\nwidgets = 3\n").unwrap();
    let o = gvdp(&["run", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("configuration:"));

    let o = gvdp(&["run", dir.join("missing.toml").to_str().unwrap()]);
    assert!(!o.status.success());

    let o = gvdp(&["demo-clipping", "--trials", "0"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("trials"));
    std::fs::remove_dir_all(dir).ok();
}

proptest! {
    #[test]
    fn clipping_never_raises_values(values in prop::collection::vec(-1e6f64..1e6, 1..300), p in 0.0f64..99.0) {
        let c = clip_quantile(&values, p).unwrap();
        prop_assert_eq!(c.len(), values.len());
        prop_assert!(c.iter().zip(&values).all(|(a, b)| a <= b));
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        prop_assert!(mean(&c) <= mean(&values) + 1e-9);
        if p == 0.0 {
            prop_assert_eq!(&c, &values);
        }
    }
}
