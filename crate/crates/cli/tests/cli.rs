use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use survey_integrate::io::{ingest_survey, read_bias, read_estimates, SurveyLayout};
use survey_integrate::propensity::{fit_samples, PropensityOptions};
use survey_integrate::simulator::{clw_table, compose_tables, ps_table};
use survey_integrate::types::{Factor, Source, SubgroupKey};

fn svyint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svyint"))
        .args(args)
        .output()
        .expect("spawn svyint")
}

fn ok(args: &[&str]) {
    let out = svyint(args);
    assert!(
        out.status.success(),
        "svyint {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn simulated(root: &Path) -> PathBuf {
    let sim = root.join("sim");
    ok(&["simulate", "--out", p(&sim), "--seed", "11"]);
    sim
}

#[test]
fn simulate_rerun_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["simulate", "--out", p(&a), "--seed", "3", "--replicates", "4", "--groups", "age"]);
    let out = Command::new(env!("CARGO_BIN_EXE_svyint"))
        .args(["simulate", "--out", p(&b), "--seed", "3", "--replicates", "4", "--groups", "age", "--sequential"])
        .env("RAYON_NUM_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.contains_key("mc_estimators.csv") && fa.contains_key("metadata.json"));
    assert_eq!(fa, fb);

    let c = dir.path().join("c");
    ok(&["simulate", "--out", p(&c), "--seed", "4", "--replicates", "4", "--groups", "age"]);
    assert_ne!(fa["p1.csv"], files(&c)["p1.csv"]);
}

#[test]
fn metadata_records_seed_and_options() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulated(dir.path());
    let meta = fs::read_to_string(sim.join("metadata.json")).unwrap();
    assert!(meta.contains("\"seed\": 11"));
    assert!(meta.contains("\"command\": \"simulate\""));
    assert!(meta.contains("\"tol\": 1e-8"));
    assert!(meta.contains("\"benchmark.csv\""));
}

#[test]
fn estimate_matches_library_operations() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulated(dir.path());
    let out = dir.path().join("est");
    let layout_path = sim.join("layout.toml");
    ok(&[
        "estimate",
        "--out",
        p(&out),
        "--layout",
        p(&layout_path),
        "--ps",
        p(&sim.join("p1.csv")),
        "--nps",
        p(&sim.join("o1.csv")),
        "--bootstrap-B",
        "0",
        "--groups",
        "overall,age",
    ]);

    let layout = SurveyLayout::load(&layout_path).unwrap();
    let ps_path = sim.join("p1.csv");
    let ps = ingest_survey(&ps_path, &layout).unwrap().into_probability(&ps_path).unwrap();
    let nps = ingest_survey(&sim.join("o1.csv"), &layout).unwrap().into_nonprobability();
    let fit = fit_samples(&nps, &ps, &PropensityOptions::default()).unwrap();
    let mut groups = vec![SubgroupKey::OVERALL];
    groups.extend(layout.subgroups(Factor::Age).unwrap());

    let written = read_estimates(&out.join("estimates.csv"), &layout).unwrap();
    assert_eq!(written[&Source::Ps].cells, ps_table(&ps, &groups).unwrap().cells);
    assert_eq!(written[&Source::Clw].cells, clw_table(&nps, &fit, &groups).unwrap().cells);
}

#[test]
fn staged_pipeline_matches_library_compose() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let sim = simulated(root);
    let layout_path = sim.join("layout.toml");
    let l = p(&layout_path);
    for i in 1..=3 {
        ok(&[
            "estimate",
            "--out",
            p(&root.join(format!("e{i}"))),
            "--layout",
            l,
            "--ps",
            p(&sim.join(format!("p{i}.csv"))),
            "--nps",
            p(&sim.join(format!("o{i}.csv"))),
            "--bootstrap-B",
            "20",
        ]);
    }
    let est = |i: usize| root.join(format!("e{i}/estimates.csv"));
    ok(&["bias", "--out", p(&root.join("b")), "--layout", l, "--estimates", p(&est(1)), p(&est(2))]);
    let bias = root.join("b/bias.csv");
    ok(&["compose", "--out", p(&root.join("c")), "--layout", l, "--estimates", p(&est(3)), "--bias", p(&bias)]);
    let comp = root.join("c/composites.csv");
    ok(&[
        "evaluate",
        "--out",
        p(&root.join("v")),
        "--layout",
        l,
        "--estimates",
        p(&est(3)),
        p(&comp),
        "--benchmark",
        p(&sim.join("benchmark.csv")),
    ]);

    let layout = SurveyLayout::load(&layout_path).unwrap();
    let tables = read_estimates(&est(3), &layout).unwrap();
    let eps = read_bias(&bias, &layout).unwrap();
    let [bc, ev, comb] =
        compose_tables(&tables[&Source::Ps], &tables[&Source::Clw], &eps, 1e-12).unwrap();
    let written = read_estimates(&comp, &layout).unwrap();
    assert_eq!(written[&Source::BcClw].cells, bc.cells);
    assert_eq!(written[&Source::Ev].cells, ev.cells);
    assert_eq!(written[&Source::Comb].cells, comb.cells);

    let mae = fs::read_to_string(root.join("v/mae.csv")).unwrap();
    for tag in ["ps", "clw", "bc_clw", "ev", "comb"] {
        assert!(mae.contains(&format!("\n{tag},overall,")), "{tag} missing");
    }
}

#[test]
fn compose_without_variances_fails() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulated(dir.path());
    let est = dir.path().join("est.csv");
    fs::write(
        &est,
        "question_id,factor,level,source,value,variance,out_of_range\n\
         insurance,overall,1,ps,0.8,,false\n\
         insurance,overall,1,clw,0.7,,false\n",
    )
    .unwrap();
    let bias = dir.path().join("bias.csv");
    fs::write(&bias, "question_id,factor,level,eps\ninsurance,overall,1,0.1\n").unwrap();
    let out = svyint(&[
        "compose",
        "--out",
        p(&dir.path().join("c")),
        "--layout",
        p(&sim.join("layout.toml")),
        "--estimates",
        p(&est),
        "--bias",
        p(&bias),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing variance"));
}

#[test]
fn negative_weight_fails_naming_row() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulated(dir.path());
    let text = fs::read_to_string(sim.join("p1.csv")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let last = lines[3].rfind(',').unwrap();
    lines[3] = format!("{},-2", &lines[3][..last]);
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, lines.join("\n") + "\n").unwrap();
    let out = svyint(&[
        "fit-propensity",
        "--out",
        p(&dir.path().join("f")),
        "--layout",
        p(&sim.join("layout.toml")),
        "--ps",
        p(&bad),
        "--nps",
        p(&sim.join("o1.csv")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 3"));
}

#[test]
fn missing_input_file_fails_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o");
    let out = svyint(&["estimate", "--out", p(&out_dir), "--layout", "/nonexistent/layout.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
    assert!(!out_dir.exists());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 9\ngroups = [\"age\"]\n[simulation]\ncontaminate = false\n").unwrap();
    let a = dir.path().join("a");
    ok(&["simulate", "--config", p(&cfg), "--out", p(&a), "--seed", "10"]);
    let meta = fs::read_to_string(a.join("metadata.json")).unwrap();
    assert!(meta.contains("\"seed\": 10"));
    assert!(meta.contains("\"contaminate\": false"));
}

#[test]
fn run_evaluates_a_subset_of_benchmark_groups() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulated(dir.path());
    let out = dir.path().join("run");
    let s = |f: &str| sim.join(f);
    ok(&[
        "run",
        "--out",
        p(&out),
        "--layout",
        p(&s("layout.toml")),
        "--ps",
        p(&s("p3.csv")),
        "--nps",
        p(&s("o3.csv")),
        "--aux-ps",
        p(&s("p1.csv")),
        p(&s("p2.csv")),
        "--aux-nps",
        p(&s("o1.csv")),
        p(&s("o2.csv")),
        "--benchmark",
        p(&s("benchmark.csv")),
        "--groups",
        "age",
        "--bootstrap-B",
        "0",
    ]);
    let mae = fs::read_to_string(out.join("mae.csv")).unwrap();
    assert!(mae.contains("\ncomb,overall,"));
    assert!(!mae.contains(",race,"));
}
