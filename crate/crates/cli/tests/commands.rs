use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use blockic::mm::{load_matrix_market, write_matrix_market};
use blockic::ordering::{format_ordering, RangeList};
use blockic::sparse::{extract_upper, grid_laplacian, CsrMatrix, Permutation};
use serde_json::Value;
use tempfile::TempDir;

fn blockic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blockic")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &TempDir, name: &str, m: &CsrMatrix) -> PathBuf {
    let p = dir.path().join(name);
    write_matrix_market(m, &p).unwrap();
    p
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn diag(vals: &[f64]) -> CsrMatrix {
    let t: Vec<_> = vals.iter().enumerate().map(|(i, &v)| (i, i, v)).collect();
    CsrMatrix::from_triplets(vals.len(), vals.len(), &t).unwrap()
}

#[test]
fn info_prints_sizes() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "eye.mtx", &CsrMatrix::identity(5));
    let stats = dir.path().join("info.json");
    let o = blockic(&["info", "--matrix", s(&m), "--stats", s(&stats)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "n = 5\nnnz = 5\nnnz/n = 1.00\n");
    assert_eq!(json(&stats)["nnz"], 5);
}

#[test]
fn info_rounds_to_two_decimals() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "g.mtx", &grid_laplacian(3, 3));
    assert!(stdout(&blockic(&["info", "--matrix", s(&m)])).ends_with("nnz/n = 3.67\n"));
}

#[test]
fn symbolic_level_zero_is_upper_triangle_and_levels_nest() {
    let dir = TempDir::new().unwrap();
    let a = grid_laplacian(9, 7);
    let m = write(&dir, "g.mtx", &a);
    let mut last = 0;
    for k in ["0", "1", "2", "4"] {
        let stats = dir.path().join(format!("sym{k}.json"));
        let o = blockic(&["symbolic", "--matrix", s(&m), "--level", k, "--stats", s(&stats)]);
        assert!(o.status.success());
        let nnz_u = json(&stats)["nnz_u"].as_u64().unwrap() as usize;
        if k == "0" {
            assert_eq!(nnz_u, extract_upper(&a).unwrap().nnz());
        }
        assert!(nnz_u >= last);
        last = nnz_u;
    }
}

#[test]
fn symbolic_single_range_has_one_block() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "g.mtx", &grid_laplacian(3, 3));
    let stats = dir.path().join("sym.json");
    let o = blockic(&["symbolic", "--matrix", s(&m), "--treecut", "99", "--stats", s(&stats)]);
    assert!(o.status.success());
    let v = json(&stats);
    assert_eq!((v["ranges"].as_u64(), v["blocks"].as_u64()), (Some(1), Some(1)));
}

#[test]
fn factor_of_diagonal_is_its_square_root() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "d.mtx", &diag(&[4.0, 9.0]));
    let out = dir.path().join("u.mtx");
    let o = blockic(&["factor", "--matrix", s(&m), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let u = load_matrix_market(&out).unwrap();
    assert_eq!(u, diag(&[2.0, 3.0]));
}

#[test]
fn baseline_adds_relative_overhead() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "g.mtx", &grid_laplacian(12, 12));
    let stats = dir.path().join("f.json");
    let o = blockic(&[
        "factor", "--matrix", s(&m), "--backend", "pool", "--workers", "2", "--baseline", "--stats", s(&stats),
    ]);
    assert!(o.status.success());
    let v = json(&stats);
    assert!(v["relative_overhead"].as_f64().unwrap() > 0.0);
    assert_eq!(v["backend"], "pool(2)");

    let o = blockic(&["factor", "--matrix", s(&m), "--stats", s(&stats)]);
    assert!(o.status.success());
    assert!(json(&stats)["relative_overhead"].is_null());
}

#[test]
fn sequential_factor_files_are_identical() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "g.mtx", &grid_laplacian(30, 30));
    let (u1, u2) = (dir.path().join("u1.mtx"), dir.path().join("u2.mtx"));
    for u in [&u1, &u2] {
        let o = blockic(&["factor", "--matrix", s(&m), "--level", "2", "--treecut", "1", "--out", s(u)]);
        assert!(o.status.success());
    }
    assert_eq!(fs::read(&u1).unwrap(), fs::read(&u2).unwrap());
}

#[test]
fn breakdown_exits_with_one() {
    let dir = TempDir::new().unwrap();
    let indefinite = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]).unwrap();
    let m = write(&dir, "bad.mtx", &indefinite);
    let o = blockic(&["factor", "--matrix", s(&m)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_input_exits_with_two() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.mtx");
    assert_eq!(blockic(&["info", "--matrix", s(&missing)]).status.code(), Some(2));
    let m = write(&dir, "g.mtx", &grid_laplacian(2, 2));
    assert_eq!(blockic(&["factor", "--matrix", s(&m), "--backend", "gpu"]).status.code(), Some(2));
    assert_eq!(
        blockic(&["factor", "--matrix", s(&m), "--backend", "pool", "--workers", "0"]).status.code(),
        Some(2)
    );
}

#[test]
fn verify_single_range_is_exact() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "g.mtx", &grid_laplacian(10, 10));
    let o = blockic(&["verify", "--matrix", s(&m), "--level", "2", "--treecut", "99"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "max_relative_difference = 0e0\n");
}

#[test]
fn verify_pooled_grid_within_tolerance() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "g.mtx", &grid_laplacian(30, 30));
    let o = blockic(&[
        "verify", "--matrix", s(&m), "--level", "1", "--leaf-size", "8", "--backend", "pool", "--workers", "4",
    ]);
    assert!(o.status.success());
    let d: f64 = stdout(&o).trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(d <= 1e-12);
}

#[test]
fn verify_flags_a_corrupted_factor() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "g.mtx", &grid_laplacian(6, 6));
    let o = blockic(&["verify", "--matrix", s(&m), "--corrupt-for-test"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_csv_shape() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "g.mtx", &grid_laplacian(8, 8));
    let csv = dir.path().join("b.csv");
    let o = blockic(&["bench", "--matrix", s(&m), "--workers", "1", "--out", s(&csv)]);
    assert!(o.status.success());
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "workers,time_numeric_s,speedup,relative_overhead");
    assert!(lines[1].starts_with("serial,"));
    let row: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(row[0], "1");
    assert_eq!(row[2].parse::<f64>().unwrap(), 1.0);
    assert_eq!(lines.len(), 3);
}

/// Minimal reader for the DOT subset the exporter writes.
fn parse_dot(text: &str) -> (BTreeMap<String, String>, BTreeSet<(String, String)>) {
    let body = text
        .trim()
        .strip_prefix("digraph tasks {")
        .and_then(|b| b.strip_suffix('}'))
        .expect("digraph wrapper");
    let mut nodes = BTreeMap::new();
    let mut edges = BTreeSet::new();
    for stmt in body.split(';').map(str::trim).filter(|l| !l.is_empty()) {
        if let Some((a, b)) = stmt.split_once("->") {
            edges.insert((a.trim().to_string(), b.trim().to_string()));
        } else {
            let (id, attrs) = stmt.split_once('[').expect("node attributes");
            let label = attrs
                .trim_end_matches(']')
                .strip_prefix("label=\"")
                .and_then(|l| l.strip_suffix('"'))
                .expect("label");
            nodes.insert(id.trim().to_string(), label.to_string());
        }
    }
    for (a, b) in &edges {
        assert!(nodes.contains_key(a) && nodes.contains_key(b), "dangling edge {a} -> {b}");
    }
    (nodes, edges)
}

fn five_range_files(dir: &TempDir) -> (PathBuf, PathBuf) {
    let blocks = [(0, 0), (0, 4), (1, 1), (1, 3), (1, 4), (2, 2), (2, 3), (2, 4), (3, 3), (3, 4), (4, 4)];
    let mut t = Vec::new();
    for (i, j) in blocks {
        t.push((i, j, if i == j { 10.0 } else { -1.0 }));
        if i != j {
            t.push((j, i, -1.0));
        }
    }
    let a = CsrMatrix::from_triplets(5, 5, &t).unwrap();
    let m = write(dir, "five.mtx", &a);
    let ord = dir.path().join("five.ord");
    let text = format_ordering(&Permutation::identity(5), &RangeList::from_sizes(&[1; 5]).unwrap());
    fs::write(&ord, text).unwrap();
    (m, ord)
}

#[test]
fn taskdag_five_ranges() {
    let dir = TempDir::new().unwrap();
    let (m, ord) = five_range_files(&dir);
    let dot = dir.path().join("g.dot");
    let o = blockic(&["taskdag", "--matrix", s(&m), "--ordering", s(&ord), "--level", "3", "--out", s(&dot)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (nodes, edges) = parse_dot(&fs::read_to_string(&dot).unwrap());
    assert_eq!(nodes.len(), 19);
    assert_eq!(stdout(&o), format!("nodes = 19 edges = {}\n", edges.len()));
    let labels: BTreeSet<&str> = nodes.values().map(String::as_str).collect();
    for l in ["CHOL(0,0)", "TRSM(0,4)", "HERK(4,4)", "GEMM(3,4)", "CHOL(4,4)"] {
        assert!(labels.contains(l), "{l} missing");
    }
}

#[test]
fn taskdag_single_range_to_stdout() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "g.mtx", &grid_laplacian(4, 4));
    let o = blockic(&["taskdag", "--matrix", s(&m), "--treecut", "99"]);
    assert!(o.status.success());
    let (nodes, edges) = parse_dot(&stdout(&o));
    assert_eq!(nodes.len(), 1);
    assert!(edges.is_empty());
    assert_eq!(nodes.values().next().unwrap(), "CHOL(0,0)");
}

#[test]
fn grid_command_writes_laplacian() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("g.mtx");
    assert!(blockic(&["grid", "--nx", "4", "--ny", "3", "--out", s(&out)]).status.success());
    assert_eq!(load_matrix_market(&out).unwrap(), grid_laplacian(4, 3));
}
