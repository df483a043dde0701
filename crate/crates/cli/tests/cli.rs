use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_anda");

fn anda(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("ANDA_CONFIG_DIR")
        .output()
        .expect("spawn anda")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = anda(dir, args);
    assert!(
        out.status.success(),
        "anda {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_f16(path: &Path, rows: u32, cols: u32, bits: &[u16]) {
    let mut b = b"ANDT".to_vec();
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&0u16.to_le_bytes());
    b.extend_from_slice(&2u32.to_le_bytes());
    b.extend_from_slice(&rows.to_le_bytes());
    b.extend_from_slice(&cols.to_le_bytes());
    for x in bits {
        b.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, b).unwrap();
}

fn read_f16(path: &Path) -> Vec<u16> {
    let b = fs::read(path).unwrap();
    assert_eq!(&b[..4], b"ANDT");
    b[20..].chunks(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()
}

fn f16_to_f64(bits: u16) -> f64 {
    let sign = if bits >> 15 == 1 { -1.0 } else { 1.0 };
    let e = i32::from((bits >> 10) & 0x1F);
    let f = f64::from(bits & 0x3FF);
    if e == 0 {
        sign * f * 2f64.powi(-24)
    } else {
        sign * (1.0 + f / 1024.0) * 2f64.powi(e - 15)
    }
}

fn shape_file(dir: &Path, json: &str) -> PathBuf {
    let p = dir.join("shape.json");
    fs::write(&p, json).unwrap();
    p
}

const OPT_SHAPE: &str = r#"{"family":"opt","d_model":512,"d_ff":2048,"n_layers":2}"#;

#[test]
fn encode_decode_roundtrip_within_truncation_bound() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut s = 12345u32;
    let bits: Vec<u16> = (0..4 * 200)
        .map(|_| {
            s = s.wrapping_mul(1_103_515_245).wrapping_add(12345);
            let b = (s >> 8) as u16;
            if (b >> 10) & 0x1F == 0x1F {
                b & 0xBFFF
            } else {
                b
            }
        })
        .collect();
    write_f16(&d.join("x.andt"), 4, 200, &bits);
    let out = ok(d, &["encode", "--in", "x.andt", "--out", "x.anda", "--m", "16"]);
    assert!(out.contains("max_abs"));
    ok(d, &["decode", "--in", "x.anda", "--out", "y.andt"]);
    assert!(d.join("x.anda.manifest.json").exists());
    let back = read_f16(&d.join("y.andt"));
    for row in 0..4 {
        for g in 0..4 {
            let idx: Vec<usize> = (g * 64..((g + 1) * 64).min(200)).map(|c| row * 200 + c).collect();
            let e = idx
                .iter()
                .filter(|&&i| bits[i] & 0x7FFF != 0)
                .map(|&i| (i32::from((bits[i] >> 10) & 0x1F)).max(1) - 15)
                .max();
            for &i in &idx {
                let (x, y) = (f16_to_f64(bits[i]), f16_to_f64(back[i]));
                let bound = e.map_or(0.0, |e| 2f64.powi(e - 15));
                assert!((x - y).abs() < bound || x == y, "element {i}: {x} vs {y}");
                assert!(y.abs() <= x.abs());
            }
        }
    }
}

#[test]
fn encode_size_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_f16(&d.join("ones.andt"), 1, 64, &[0x3C00; 64]);
    ok(d, &["encode", "--in", "ones.andt", "--out", "ones.anda", "--gs", "64", "--m", "8"]);
    // header + one exponent byte + (8 planes + sign) words
    assert_eq!(fs::metadata(d.join("ones.anda")).unwrap().len(), 24 + 1 + 9 * 8);

    let out = anda(d, &["encode", "--in", "ones.andt", "--out", "z.anda", "--m", "0"]);
    assert_eq!(code(&out), 2);
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().next().map(|l| l.starts_with("error")), Some(true));

    fs::write(d.join("junk.andt"), b"JUNK").unwrap();
    let out = anda(d, &["encode", "--in", "junk.andt", "--out", "z.anda", "--m", "4"]);
    assert_eq!(code(&out), 2);
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);
}

#[test]
fn sweep_columns_refine() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--seed", "3", "--d-model", "64", "--tokens", "16", "--out", "wl"]);
    ok(
        d,
        &["sweep", "--workload", "wl/workload.json", "--gs-list", "1,16,64", "--m-list", "4..16", "--csv", "s.csv"],
    );
    let csv = fs::read_to_string(d.join("s.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("gs,m,nrmse,max_abs"));
    let rows: Vec<(usize, u8, f64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 39);
    for gs in [1, 16, 64] {
        let col: Vec<f64> = rows.iter().filter(|r| r.0 == gs).map(|r| r.2).collect();
        assert!(col.windows(2).all(|w| w[1] <= w[0]));
    }
    for m in 4..=16u8 {
        let at = |gs| rows.iter().find(|r| r.0 == gs && r.1 == m).unwrap().2;
        assert!(at(1) <= at(16) && at(1) <= at(64));
    }
    let out = anda(d, &["sweep", "--workload", "wl/workload.json", "--m-list", ""]);
    assert_eq!(code(&out), 2);
}

#[test]
fn search_threshold_fixture_and_infeasible_exit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    shape_file(d, OPT_SHAPE);
    let exec = format!("exec:{BIN} oracle-serve --synthetic threshold:6,6,6,6");
    let out = ok(d, &["search", "--shape", "shape.json", "--oracle", &exec, "--delta", "0.01"]);
    assert!(out.contains("best [6,6,6,6]"), "{out}");
    assert!(out.contains("reduction 2.667"), "{out}");

    let out = anda(
        d,
        &["search", "--shape", "shape.json", "--oracle", "synthetic:threshold:6,6,6,6", "--max-iters", "1"],
    );
    assert_eq!(code(&out), 3);

    let out = anda(d, &["search", "--shape", "shape.json", "--oracle", "proxy"]);
    assert_eq!(code(&out), 2);
    let out = anda(d, &["search", "--shape", "shape.json", "--oracle", "synthetic:min16", "--delta", "2"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn external_oracle_reproduces_in_process_trace() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    shape_file(d, OPT_SHAPE);
    let run = |oracle: &str, trace: &str| {
        ok(
            d,
            &[
                "search", "--shape", "shape.json", "--oracle", oracle, "--delta", "0.5", "--exhaustive", "--trace",
                trace,
            ],
        );
        fs::read_to_string(d.join(trace)).unwrap()
    };
    let local = run("synthetic:min16", "local.jsonl");
    let remote = run(&format!("exec:{BIN} oracle-serve --synthetic min16"), "remote.jsonl");
    assert_eq!(local, remote);
    assert!(local.lines().count() > 10);
    let first: Value = serde_json::from_str(local.lines().next().unwrap()).unwrap();
    for key in ["iter", "comb", "bops", "score", "accepted"] {
        assert!(first.get(key).is_some());
    }

    ok(d, &["gen", "--seed", "9", "--d-model", "64", "--tokens", "16", "--out", "wl"]);
    let proxy = |oracle: &str, trace: &str| {
        ok(d, &["search", "--workload", "wl/workload.json", "--oracle", oracle, "--trace", trace]);
        fs::read_to_string(d.join(trace)).unwrap()
    };
    let a = proxy("proxy", "p1.jsonl");
    let b = proxy(&format!("exec:{BIN} oracle-serve --proxy wl/workload.json"), "p2.jsonl");
    assert_eq!(a, b);
}

#[test]
fn oracle_serve_protocol() {
    use std::io::Write;
    use std::process::Stdio;
    let mut child = Command::new(BIN)
        .args(["oracle-serve", "--synthetic", "min16"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"{\"comb\":\"fp16\"}\n{\"comb\":[8,4,9,9]}\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "{\"score\":1.0}\n{\"score\":0.25}\n");
}

fn csv_value(csv: &str, platform: &str, metric: &str) -> f64 {
    csv.lines()
        .find_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0] == platform && f[1] == metric).then(|| f[2].parse().unwrap())
        })
        .unwrap_or_else(|| panic!("no {platform}/{metric} in {csv}"))
}

#[test]
fn compare_speedups_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    shape_file(d, OPT_SHAPE);
    ok(d, &["compare", "--shape", "shape.json", "--comb", "8,8,8,8", "--csv", "c8.csv", "--plot-data", "p.json"]);
    let csv = fs::read_to_string(d.join("c8.csv")).unwrap();
    assert!(csv.starts_with("platform,metric,value\n"));
    assert_eq!(csv_value(&csv, "Anda", "speedup_vs_fpfp"), 2.0);
    assert_eq!(csv_value(&csv, "FP-FP", "speedup_vs_fpfp"), 1.0);
    let plot: Value = serde_json::from_str(&fs::read_to_string(d.join("p.json")).unwrap()).unwrap();
    assert_eq!(plot["series"][0]["x"].as_array().unwrap().len(), 7);

    ok(d, &["compare", "--shape", "shape.json", "--comb", "16,16,16,16", "--csv", "c16.csv"]);
    let csv = fs::read_to_string(d.join("c16.csv")).unwrap();
    assert_eq!(csv_value(&csv, "Anda", "speedup_vs_fpfp"), 1.0);

    let out = ok(d, &["simulate", "--shape", "shape.json", "--comb", "8,8,8,8", "--json", "s.json"]);
    assert!(out.contains("speedup_vs_fpfp 2"));
    let sim: Value = serde_json::from_str(&fs::read_to_string(d.join("s.json")).unwrap()).unwrap();
    assert_eq!(sim["speedup_vs_fpfp"], 2.0);

    fs::write(d.join("bad.json"), "{\"mxu_rows\": ").unwrap();
    let out = anda(d, &["compare", "--shape", "shape.json", "--comb", "8,8,8,8", "--arch", "bad.json"]);
    assert_eq!(code(&out), 2);

    ok(d, &["config", "--out", "cfg"]);
    let mut arch: Value = serde_json::from_str(&fs::read_to_string(d.join("cfg/arch.json")).unwrap()).unwrap();
    arch["act_buffer_mantissa_bits"]["value"] = Value::from(1024);
    fs::write(d.join("tiny.json"), arch.to_string()).unwrap();
    let out = anda(d, &["simulate", "--shape", "shape.json", "--comb", "8,8,8,8", "--arch", "tiny.json"]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("K=512"));

    let out = anda(d, &["compare", "--shape", "shape.json", "--comb", "8,8,8"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn shipped_configs_and_config_dir_discovery() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["config", "--out", "cfg"]);
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/config");
    for name in ["arch.json", "energy.json"] {
        assert_eq!(
            fs::read_to_string(d.join("cfg").join(name)).unwrap(),
            fs::read_to_string(shipped.join(name)).unwrap()
        );
    }
    shape_file(d, OPT_SHAPE);
    let mut energy: Value = serde_json::from_str(&fs::read_to_string(d.join("cfg/energy.json")).unwrap()).unwrap();
    energy["dram_pj_per_bit"]["value"] = Value::from(100.0);
    fs::write(d.join("cfg/energy.json"), energy.to_string()).unwrap();

    let args = ["simulate", "--shape", "shape.json", "--comb", "8,8,8,8", "--json", "out.json"];
    ok(d, &args);
    let default_energy: Value = serde_json::from_str(&fs::read_to_string(d.join("out.json")).unwrap()).unwrap();
    let out = Command::new(BIN)
        .args(args)
        .current_dir(d)
        .env("ANDA_CONFIG_DIR", d.join("cfg"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let discovered: Value = serde_json::from_str(&fs::read_to_string(d.join("out.json")).unwrap()).unwrap();
    assert!(
        discovered["report"]["energy"]["dram"].as_f64().unwrap()
            > default_energy["report"]["energy"]["dram"].as_f64().unwrap()
    );
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(d.join("out.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 3);
}

fn pipeline(d: &Path, tag: &str) -> (String, String) {
    let wl = format!("wl_{tag}");
    ok(d, &["gen", "--seed", "42", "--d-model", "128", "--tokens", "64", "--out", &wl]);
    let result = format!("r_{tag}.json");
    let trace = format!("t_{tag}.jsonl");
    let out = ok(
        d,
        &[
            "search",
            "--workload",
            &format!("{wl}/workload.json"),
            "--delta",
            "0.01",
            "--max-iters",
            "32",
            "--trace",
            &trace,
            "--out",
            &result,
        ],
    );
    assert!(out.contains("best ["));
    shape_file(d, r#"{"family":"opt","d_model":128,"d_ff":512}"#);
    let csv = format!("c_{tag}.csv");
    ok(d, &["simulate", "--shape", "shape.json", "--comb", &result]);
    ok(d, &["compare", "--shape", "shape.json", "--comb", &result, "--csv", &csv]);
    (
        fs::read_to_string(d.join(&trace)).unwrap(),
        fs::read_to_string(d.join(&csv)).unwrap(),
    )
}

#[test]
fn pipeline_is_deterministic_and_composes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let a = pipeline(d, "a");
    let b = pipeline(d, "b");
    assert_eq!(a, b);
    for f in ["wl_a/qkv_act.andt", "wl_a/d_w.andt"] {
        assert_eq!(fs::read(d.join(f)).unwrap(), fs::read(d.join(f.replace("wl_a", "wl_b"))).unwrap());
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(d.join("c_a.csv.manifest.json")).unwrap()).unwrap();
    for key in ["command", "config", "version", "inputs", "timestamp"] {
        assert!(manifest.get(key).is_some(), "manifest lacks {key}");
    }
    let search_manifest: Value =
        serde_json::from_str(&fs::read_to_string(d.join("t_a.jsonl.manifest.json")).unwrap()).unwrap();
    let digests = search_manifest["inputs"].as_object().unwrap();
    assert_eq!(digests.len(), 1 + 4 * 3);
    assert!(digests.values().all(|v| v.as_str().unwrap().len() == 64));
    let gen_manifest: Value = serde_json::from_str(&fs::read_to_string(d.join("wl_a/manifest.json")).unwrap()).unwrap();
    assert_eq!(gen_manifest["seed"], 42);
}

#[test]
fn tradeoff_flags_infeasible_points() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    shape_file(d, OPT_SHAPE);
    let out = ok(
        d,
        &[
            "tradeoff",
            "--shape",
            "shape.json",
            "--oracle",
            "synthetic:min16",
            "--deltas",
            "0.1,0.5,0.7",
            "--csv",
            "t.csv",
            "--plot-data",
            "tp.json",
        ],
    );
    assert!(out.starts_with("delta,comb,speedup,energy_efficiency\n"));
    let lines: Vec<&str> = out.lines().collect();
    assert!(lines[1].starts_with("0.1,infeasible,,"));
    let speed = |l: &str| l.rsplit(',').nth(1).unwrap().parse::<f64>().unwrap();
    assert!(speed(lines[3]) >= speed(lines[2]));
    assert_eq!(fs::read_to_string(d.join("t.csv")).unwrap(), out);
}
