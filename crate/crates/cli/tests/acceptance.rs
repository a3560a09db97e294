//! Acceptance suite: one line per criterion, exit status 1 if any fails.
//!
//! Criteria 1 to 9 run at the default (full-size) configuration. Criterion 10 runs the whole
//! suite twice on a reduced configuration, once per thread count, and compares every CSV.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use martinv::accept::{accept, run_criterion};
use martinv::config::{Config, SpecConfig};

fn reduced() -> Config {
    let mut c = Config { seed: 77, ..Config::default() };
    for case in &mut c.invert.cases {
        case.grid.nt = 21;
        case.grid.nx = 101;
        let s = &mut case.sim;
        s.n_paths = 10_000;
        s.dt = 1e-2;
        s.record_every = 25;
        s.n_outer = 50;
        s.n_inner = 64;
        s.inner_dt = 1e-2;
        s.n_plot_paths = 3;
    }
    c.consistency.pairs.retain(|p| !matches!(p.second, SpecConfig::QuantileCdf { .. }));
    c.consistency.n_steps = 50;
    c.consistency.gamma_knots = 65;
    for case in &mut c.couple.cases {
        case.dt = 1e-2;
        case.n_paths = if case.hitting.is_some() { 10_000 } else { 200 };
        case.record_every = 10;
    }
    c.surface.dt = 1e-2;
    c.surface.n_paths = 200;
    c.surface.record_every = 10;
    c.surface.plot_lambdas = vec![1.0, 2.0, 3.0];
    c.digital.dt = 1e-2;
    c.digital.record_every = 10;
    c.digital.n_outer = 20;
    c.digital.n_inner = 64;
    c.digital.inner_dt = 1e-2;
    c.accept.pde.nt = 33;
    c.accept.pde.nx = 65;
    c.accept.pde.pad = 16;
    c.accept.density.n_points = 5;
    c.accept.transitivity.n_probes = 10;
    c
}

fn csv_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism(root: &Path) -> (bool, String) {
    let cfg = reduced();
    let mut runs = Vec::new();
    for threads in [1, 2] {
        let dir = root.join(format!("run-{threads}"));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        if let Err(e) = pool.install(|| accept(&cfg, &dir)) {
            return (false, format!("reduced suite failed to run: {e}"));
        }
        runs.push(csv_files(&dir));
    }
    let (a, b) = (&runs[0], &runs[1]);
    let differing: Vec<String> =
        a.iter().filter(|(k, v)| b.get(*k) != Some(*v)).map(|(k, _)| k.display().to_string()).collect();
    let same_set = a.keys().eq(b.keys());
    let pass = same_set && differing.is_empty() && !a.is_empty();
    let detail = if pass {
        format!("{} CSV files byte-identical across 1 and 2 threads", a.len())
    } else {
        format!("file sets equal: {same_set}; differing: {differing:?}")
    };
    (pass, detail)
}

fn main() -> ExitCode {
    let root = tempfile::tempdir().unwrap();
    let cfg = Config::default();
    let mut all = true;
    for id in 1..=9 {
        let r = run_criterion(id, &cfg, &root.path().join("full"));
        for v in r.verdicts.iter().filter(|v| !v.pass) {
            eprintln!("  failed: {} = {} (limit {}) {}", v.name, v.value, v.threshold, v.detail);
        }
        all &= r.pass;
        println!("{}", r.summary());
    }
    let started = Instant::now();
    let (pass, detail) = determinism(&root.path().join("determinism"));
    all &= pass;
    println!(
        "criterion 10 {} determinism: accept twice with seed 77 in {:.1} s; {detail}",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
