use std::path::Path;
use std::process::{Command, Output};

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drivebench"))
        .args(args)
        .env("DRIVEBENCH_OUT", out)
        .current_dir(out)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = run(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(out: &Path, args: &[&str]) -> i32 {
    run(out, args).status.code().unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn full_pipeline_and_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-town", "--seed", "101", "--blocks", "2", "--name", "town"]);
    let table = ok(d, &["gen-routes", "--town", "town/town.json", "--type", "tiny", "--count", "6", "--seed", "3", "--name", "tiny"]);
    assert!(table.contains("| tiny | 6 |"), "{table}");
    ok(d, &["gen-routes", "--town", "town/town.json", "--type", "short", "--count", "2", "--seed", "4", "--name", "short"]);
    ok(d, &["collect", "--town", "town/town.json", "--routes", "tiny/routes.json", "--frames", "150", "--name", "ds"]);
    ok(d, &["train", "--dataset", "ds", "--epochs", "2", "--save-every", "1", "--name", "tr"]);
    assert!(d.join("tr/checkpoints/e001.ckpt").exists());
    assert!(d.join("tr/checkpoints/e002.ckpt").exists());
    let losses: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(d.join("tr/losses.json")).unwrap()).unwrap();
    assert_eq!(losses.len(), 2);

    let row = ok(d, &["evaluate", "--town", "town/town.json", "--routes", "short/routes.json", "--run", "tr", "--seeds", "2", "--label", "short", "--name", "ev_short"]);
    assert!(row.contains("| model | DS |"), "{row}");
    ok(d, &["evaluate", "--town", "town/town.json", "--routes", "tiny/routes.json", "--run", "tr", "--label", "tiny", "--name", "ev_tiny"]);
    // two checkpoints, two seeds, two routes
    assert_eq!(std::fs::read_dir(d.join("ev_short/logs")).unwrap().count(), 8);
    let zero = ok(d, &["evaluate", "--town", "town/town.json", "--routes", "short/routes.json", "--zero", "--name", "ev_zero"]);
    assert!(zero.contains("| zero | 0.0 ± 0.0 |"), "{zero}");

    let sel = ok(d, &["analyze", "--runs", "ev_short", "ev_tiny", "--test", "short", "--name", "an"]);
    assert!(sel.contains("| short |"), "{sel}");
    for f in ["correlation.csv", "correlation.svg", "selection.md", "scores.svg"] {
        assert!(d.join("an").join(f).exists(), "{f}");
    }

    // every run directory carries a manifest that lists its outputs
    for run in ["town", "tiny", "ds", "tr", "ev_short", "ev_zero", "an"] {
        let m = manifest(&d.join(run));
        assert_eq!(m["tool"], "drivebench");
        assert!(!m["outputs"].as_array().unwrap().is_empty(), "{run}");
        assert!(m["seeds"]["seed"].is_u64());
    }
    let inputs = manifest(&d.join("ev_short"))["inputs"].as_array().unwrap().len();
    assert_eq!(inputs, 4, "town, routes and two checkpoints");
}

#[test]
fn same_seed_same_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for name in ["a", "b"] {
        ok(d, &["gen-town", "--seed", "7", "--blocks", "2", "--name", &format!("town_{name}")]);
        ok(d, &["gen-routes", "--town", &format!("town_{name}/town.json"), "--type", "short", "--count", "3", "--seed", "1", "--name", &format!("r_{name}")]);
    }
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("town_a/town.json"), read("town_b/town.json"));
    assert_eq!(read("r_a/routes.json"), read("r_b/routes.json"));
    assert_eq!(manifest(&d.join("r_a"))["outputs"], manifest(&d.join("r_b"))["outputs"]);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-town", "--seed", "3", "--blocks", "2", "--name", "town"]);
    assert_eq!(code(d, &["gen-town", "--seed", "3", "--blocks", "2", "--name", "town"]), 2, "existing dir");
    assert_eq!(code(d, &["gen-town", "--seed", "3", "--blocks", "2", "--name", "town", "--force"]), 0);
    assert_eq!(code(d, &["gen-routes", "--town", "town/town.json", "--type", "tiny", "--count", "0"]), 2);
    assert_eq!(code(d, &["gen-routes", "--town", "town/town.json", "--type", "medium", "--count", "2"]), 2);
    assert_eq!(code(d, &["gen-routes", "--town", "missing.json", "--type", "tiny", "--count", "2"]), 2);
    assert_eq!(code(d, &["train", "--dataset", "nowhere"]), 2);
    assert_eq!(code(d, &["report"]), 2);
    assert_eq!(code(d, &["report", "--config", "nope.toml"]), 2);
    assert_eq!(code(d, &["frobnicate"]), 2);

    std::fs::write(d.join("bad.toml"), "[towns]\ntrain = [1]\nval = [2]\ntest = 1\n").unwrap();
    assert_eq!(code(d, &["report", "--config", "bad.toml"]), 2);
}

#[test]
fn analyze_rejects_misaligned_series() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for (name, epochs) in [("a", "[5, 10, 15]"), ("b", "[5, 10, 20]")] {
        std::fs::create_dir(d.join(name)).unwrap();
        std::fs::write(d.join(name).join("series.json"), format!(r#"{{"label":"{name}","epochs":{epochs},"values":[0.1,0.2,0.3]}}"#)).unwrap();
    }
    assert_eq!(code(d, &["analyze", "--runs", "a", "b"]), 2);
    assert_eq!(code(d, &["analyze", "--runs", "a"]), 2, "one series is not enough");
    assert!(!d.join("analysis-s0").exists());
}

fn snapshot(dir: &Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.clone(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn commands_leave_their_inputs_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-town", "--seed", "12", "--blocks", "2", "--name", "town"]);
    let town = snapshot(&d.join("town"));
    ok(d, &["gen-routes", "--town", "town/town.json", "--type", "tiny", "--count", "4", "--name", "tiny"]);
    let routes = snapshot(&d.join("tiny"));
    ok(d, &["collect", "--town", "town/town.json", "--routes", "tiny/routes.json", "--frames", "60", "--name", "ds"]);
    let ds = snapshot(&d.join("ds"));
    ok(d, &["train", "--dataset", "ds", "--epochs", "1", "--save-every", "1", "--name", "tr"]);
    let tr = snapshot(&d.join("tr"));
    ok(d, &["evaluate", "--town", "town/town.json", "--routes", "tiny/routes.json", "--run", "tr", "--name", "ev"]);
    assert_eq!(snapshot(&d.join("town")), town);
    assert_eq!(snapshot(&d.join("tiny")), routes);
    assert_eq!(snapshot(&d.join("ds")), ds);
    assert_eq!(snapshot(&d.join("tr")), tr);
}
