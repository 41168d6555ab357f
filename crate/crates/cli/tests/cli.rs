use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use micl_core::rng::stream;
use micl_core::simulation::gen_well_specified;
use micl_core::{log_integrated_complete, Hyperparams, ModelSpec, Partition};
use serde_json::Value;
use tempfile::TempDir;

fn micl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_micl"))
        .args(args)
        .env_remove("MICL_THREADS")
        .output()
        .expect("binary runs")
}

fn sample(dir: &TempDir, n: usize, seed: u64) -> PathBuf {
    let (x, _) = gen_well_specified(n, 2.0, &mut stream(seed, &[])).unwrap();
    let path = dir.path().join("sample.csv");
    let mut buf = Vec::new();
    x.write_csv(&mut buf).unwrap();
    std::fs::write(&path, buf).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn single_component_bound_gives_all_irrelevant() {
    let dir = TempDir::new().unwrap();
    let input = sample(&dir, 40, 1);
    let out = dir.path().join("r.json");
    let o = micl(&["select", "--input", s(&input), "--gmax", "1", "--starts", "3", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&out);
    assert_eq!(r["selected"]["g"], 1);
    assert_eq!(r["selected"]["omega"], "0000");
}

#[test]
fn malformed_omega_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let input = sample(&dir, 20, 2);
    let o = micl(&["fit", "--input", s(&input), "--g", "2", "--omega", "10x0"]);
    assert_eq!(o.status.code(), Some(1));
    let o = micl(&["fit", "--input", s(&input), "--g", "2", "--omega", "101"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(micl(&["select", "--bogus"]).status.code(), Some(1));
    assert_eq!(micl(&["experiment", "--design", "table7"]).status.code(), Some(1));
}

#[test]
fn data_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "a,b\n1,2\n3,oops\n").unwrap();
    let o = micl(&["select", "--input", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 3"));
    let missing = dir.path().join("missing.csv");
    assert_eq!(micl(&["select", "--input", s(&missing)]).status.code(), Some(2));
}

#[test]
fn pooled_fit_matches_closed_form() {
    let dir = TempDir::new().unwrap();
    let input = sample(&dir, 30, 3);
    let out = dir.path().join("fit.json");
    let o = micl(&["fit", "--input", s(&input), "--g", "1", "--omega", "0000", "--out", s(&out)]);
    assert!(o.status.success());
    let r = read_json(&out);
    let x = micl_core::load_data(std::fs::File::open(&input).unwrap(), &Default::default()).unwrap();
    let direct: f64 = (0..4)
        .map(|j| {
            let var = x.column_variance(j);
            x.rows()
                .map(|row| -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (row[j] - x.column_means()[j]).powi(2) / var))
                .sum::<f64>()
        })
        .sum();
    assert!((r["criteria"]["loglik"].as_f64().unwrap() - direct).abs() < 1e-8);
    assert_eq!(r["fit"]["params"]["proportions"][0], 1.0);
}

#[test]
fn report_is_self_consistent_and_reproducible() {
    let dir = TempDir::new().unwrap();
    let input = sample(&dir, 80, 4);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let args = |out: &Path| {
        vec!["select".to_string(), "--input".into(), s(&input).into(), "--gmax".into(), "3".into(), "--starts".into(),
             "10".into(), "--seed".into(), "5".into(), "--out".into(), s(out).into()]
    };
    let run = |out: &Path| {
        let a = args(out);
        micl(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    assert!(run(&a).status.success());
    assert!(run(&b).status.success());
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());

    let r: Value = serde_json::from_str(&text).unwrap();
    let again: Value = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(again, r);

    let x = micl_core::load_data(std::fs::File::open(&input).unwrap(), &Default::default()).unwrap();
    let hp: Hyperparams = serde_json::from_value(r["config"]["hyperparameters"].clone()).unwrap();
    let g = r["selected"]["g"].as_u64().unwrap() as usize;
    let omega = ModelSpec::parse_omega(r["selected"]["omega"].as_str().unwrap(), 4).unwrap();
    let m = ModelSpec::new(g, omega).unwrap();
    let labels = |v: &Value| -> Partition {
        let l = v.as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as usize - 1).collect();
        Partition::from_labels(l, g).unwrap()
    };
    let micl_value = log_integrated_complete(&x, &labels(&r["micl_partition"]), &m, &hp).unwrap();
    assert!((micl_value - r["criteria"]["micl"].as_f64().unwrap()).abs() < 1e-8);
    let icl_value = log_integrated_complete(&x, &labels(&r["fit"]["labels"]), &m, &hp).unwrap();
    assert!((icl_value - r["criteria"]["icl"].as_f64().unwrap()).abs() < 1e-8);
    assert_eq!(r["search_violations"], 0);
    assert_eq!(r["em_violations"], 0);

    let refit = dir.path().join("refit.json");
    let omega_bits = r["selected"]["omega"].as_str().unwrap().to_string();
    let o = micl(&["fit", "--input", s(&input), "--g", &g.to_string(), "--omega", &omega_bits, "--seed", "5", "--out", s(&refit)]);
    assert!(o.status.success());
    let bic = read_json(&refit)["criteria"]["bic"].as_f64().unwrap();
    assert!((bic - r["criteria"]["bic"].as_f64().unwrap()).abs() < 1e-6);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = TempDir::new().unwrap();
    let input = sample(&dir, 50, 6);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let base = ["select", "--input", s(&input), "--gmax", "2", "--starts", "6"];
    let o = micl(&[&base[..], &["--threads", "1", "--out", s(&a)]].concat());
    assert!(o.status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_micl"))
        .args([&base[..], &["--out", s(&b)]].concat())
        .env("MICL_THREADS", "3")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn labels_column_gives_agreement() {
    let dir = TempDir::new().unwrap();
    let (x, labels) = gen_well_specified(60, 3.0, &mut stream(7, &[])).unwrap();
    let mut text = String::from("a,b,c,d,class\n");
    for (i, row) in x.rows().enumerate() {
        text += &format!("{},{},{},{},k{}\n", row[0], row[1], row[2], row[3], labels[i]);
    }
    let input = dir.path().join("labelled.csv");
    std::fs::write(&input, text).unwrap();
    let out = dir.path().join("r.json");
    let o = micl(&["select", "--input", s(&input), "--labels-column", "class", "--g", "2", "--starts", "10", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&out);
    assert_eq!(r["input"]["d"], 4);
    assert!(r["ari"].as_f64().unwrap() > 0.9);
    assert_eq!(r["selected"]["relevant_variables"], serde_json::json!(["a", "b"]));
}

#[test]
fn empty_experiment_succeeds() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("t.json");
    let tsv = dir.path().join("t.tsv");
    let o = micl(&["experiment", "--design", "table1", "--replicates", "0", "--out", s(&out), "--tsv", s(&tsv)]);
    assert!(o.status.success());
    assert_eq!(read_json(&out)["replicates"].as_array().unwrap().len(), 0);
    assert!(std::fs::read_to_string(&tsv).unwrap().starts_with("criterion\t"));
}
