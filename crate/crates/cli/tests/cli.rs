use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use anna_core::distill::SurrogateModel;
use tempfile::TempDir;

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anna-bench")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no {key:?} line in {text}"))
        .to_string()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// k-th iterate of the last-prior-occurrence successor, scanned directly.
fn khop_oracle(w: &[u64], k: usize, bottom: u64) -> Vec<u64> {
    let step = |i: usize| if i == 0 { 0 } else { (2..=i).rev().find(|&j| w[j - 2] == w[i - 1]).unwrap_or(0) };
    (1..=w.len())
        .map(|i| match (0..k).fold(i, |j, _| step(j)) {
            0 => bottom,
            j => w[j - 1],
        })
        .collect()
}

#[test]
fn khop_run_matches_oracle_and_reports_rounds() {
    let dir = TempDir::new().unwrap();
    let (out, input) = (dir.path().join("out.csv"), dir.path().join("input.txt"));
    let o = bench(&[
        "run-protocol", "k-hop", "--tokens", "256", "--hops", "3", "--seed", "7",
        "--out", path_str(&out), "--input-out", path_str(&input),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(field(&text, "oracle-equal"), "true");
    let rounds: usize = field(&text, "rounds").parse().unwrap();
    assert!(rounds > 0 && rounds <= field(&text, "round bound").parse().unwrap());

    let w: Vec<u64> = fs::read_to_string(&input).unwrap().lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(w.len(), 256);
    let got: Vec<u64> =
        fs::read_to_string(&out).unwrap().lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(got, khop_oracle(&w, 3, u64::MAX));
}

#[test]
fn compile_run_identity_is_equal() {
    let o = bench(&["compile-run", "identity"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("equal: true"));
    assert_eq!(field(&text, "layers"), "2");
}

#[test]
fn compile_run_induction_at_128() {
    let o = bench(&["compile-run", "induction-heads", "--tokens", "128", "--inputs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(field(&text, "equal"), "true");
    let rounds: usize = field(&text, "rounds").parse().unwrap();
    // a load layer, one routing layer per round and a gather layer
    assert_eq!(field(&text, "layers").parse::<usize>().unwrap(), rounds + 2);
}

#[test]
fn compile_run_hashed_mode() {
    let o = bench(&["compile-run", "shift", "--tokens", "32", "--encoding", "hashed", "--inputs", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(field(&stdout(&o), "equal"), "true");
}

/// Runs the command twice with the same flags into two files.
fn twice(args: &[&str], dir: &Path, name: &str) -> (Vec<u8>, Vec<u8>) {
    let run = |tag: &str| {
        let out = dir.join(format!("{name}-{tag}"));
        let mut all: Vec<&str> = args.to_vec();
        all.extend(["--out", path_str(&out)]);
        let o = bench(&all);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        fs::read(&out).unwrap()
    };
    (run("a"), run("b"))
}

#[test]
fn tables_are_bit_reproducible() {
    let dir = TempDir::new().unwrap();
    let cases: [&[&str]; 8] = [
        &["gen-data", "match2", "--size", "40", "--seed", "3"],
        &["gen-data", "khop", "--tokens", "50", "--size", "20", "--format", "tsv", "--seed", "3"],
        &["gen-data", "induction-heads", "--tokens", "30", "--size", "10", "--flag-token"],
        &["run-protocol", "sort", "--tokens", "100", "--seed", "9"],
        &["run-protocol", "low-rank", "--tokens", "40", "--format", "tsv"],
        &["compile-run", "shift", "--tokens", "32", "--inputs", "2", "--seed", "4"],
        &["distill-eval", "--task", "induction-heads", "--builtin", "random", "--ell", "2:1,3", "--z", "1-2", "--runs", "2", "--samples", "3"],
        &["verify-contract", "--tokens", "32", "--runs", "4", "--seed", "5"],
    ];
    for (i, args) in cases.iter().enumerate() {
        let (a, b) = twice(args, dir.path(), &i.to_string());
        assert!(!a.is_empty(), "{args:?} wrote nothing");
        assert_eq!(a, b, "{args:?} is not reproducible");
    }
    let (a, _) = twice(&["gen-data", "match2", "--size", "40", "--seed", "3"], dir.path(), "s3");
    let (c, _) = twice(&["gen-data", "match2", "--size", "40", "--seed", "4"], dir.path(), "s4");
    assert_ne!(a, c);
}

#[test]
fn gen_data_tsv_is_the_dataset_format() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("m2.tsv");
    let o = bench(&["gen-data", "match2", "--size", "8", "--tokens", "10", "--format", "tsv", "--out", path_str(&out)]);
    assert!(o.status.success());
    let data = anna_core::tasks::read_dataset(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(data.len(), 8);
    for inst in data {
        assert_eq!(inst.labels, anna_core::tasks::match2_oracle(&inst.tokens, 37, false).unwrap());
    }
}

#[test]
fn distill_eval_from_weights_file() {
    let dir = TempDir::new().unwrap();
    let weights = dir.path().join("m2.weights");
    let plot = dir.path().join("plot.dat");
    fs::write(&weights, SurrogateModel::analytic_match2(37, 32, 0.1).to_document().to_text()).unwrap();
    let o = bench(&[
        "distill-eval", "--task", "match2", "--weights", path_str(&weights),
        "--ell", "8", "--z", "1", "--runs", "10", "--plot", path_str(&plot),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(field(&text, "samples"), "256");
    let row = text.lines().find(|l| l.starts_with("8,1,")).unwrap();
    assert_eq!(row, "8,1,10,0.000000,0.000000");
    let plot = fs::read_to_string(&plot).unwrap();
    assert!(plot.starts_with("# x series value\n"));
    assert!(plot.contains("8 z=1 0.000000"));
}

#[test]
fn malformed_weights_name_the_line() {
    let dir = TempDir::new().unwrap();
    let weights = dir.path().join("bad.weights");
    let mut text = SurrogateModel::analytic_match2(5, 4, 1.0).to_document().to_text();
    text.push_str("tensor broken\n");
    let line = text.lines().count();
    fs::write(&weights, text).unwrap();
    let o = bench(&["distill-eval", "--task", "match2", "--weights", path_str(&weights)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(&format!("line {line}")), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        &["distill-eval", "--task", "match3", "--builtin", "random"][..],
        &["distill-eval", "--task", "match2", "--builtin", "random", "--ell", "0"],
        &["run-protocol", "teleport"],
        &["gen-data", "match2", "--size", "6"],
        &["bench-scaling", "--mechanism", "flash"],
        &["no-such-command"],
        &["gen-data", "match2", "--format", "json"],
    ] {
        let o = bench(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
    }
    assert!(stderr(&bench(&["distill-eval", "--task", "match3", "--builtin", "random"])).contains("unknown task"));
    assert_eq!(bench(&["--help"]).status.code(), Some(0));
}

#[test]
fn violations_exit_two() {
    // one single-hash table lets far keys collide freely
    let o = bench(&["verify-contract", "--tokens", "64", "--runs", "3", "--ell", "1", "--z", "1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    // a tree of fan 3 cannot aggregate 64 leaves in the declared rounds
    let o = bench(&["run-protocol", "aggregate", "--tokens", "64", "--memory", "3"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn verify_contract_passes_with_selected_parameters() {
    let dir = TempDir::new().unwrap();
    let dump = dir.path().join("w.txt");
    let o = bench(&["verify-contract", "--tokens", "64", "--runs", "10", "--weights-out", path_str(&dump)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<Vec<f64>> = fs::read_to_string(&dump)
        .unwrap()
        .lines()
        .map(|l| l.split(' ').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.len() == 3 && r[2] > 0.0 && r[2] <= 1.0));
}

#[test]
fn single_length_bench_has_no_slope() {
    let o = bench(&["bench-scaling", "--mechanism", "softmax", "--lengths", "128", "--reps", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("slope: undefined"));
    assert!(text.contains("softmax,128,"));
}
