mod common;

use std::collections::BTreeMap;
use std::path::Path;

use uavtrack::scenario::logs::{read_rows, ConstraintRow, TruthRow, CONSTRAINTS, REPORT, TRUTH};
use uavtrack::scenario::RunReport;

const SCENARIOS: [&str; 7] = [
    "regulation.toml",
    "scenario_a1.toml",
    "scenario_a2.toml",
    "scenario_b1.toml",
    "scenario_b2.toml",
    "scenario_c1.toml",
    "scenario_c2.toml",
];

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn shipped_configs_load() {
    for f in SCENARIOS {
        let cfg = common::load(f, &[]);
        cfg.validate().unwrap();
        assert!(!cfg.agents.is_empty(), "{f}");
    }
}

#[test]
fn identical_seeds_give_identical_logs() {
    let cfg = common::load("scenario_b1.toml", &[("duration", "4.0")]);
    let (_, a, _ga) = common::run_in_tempdir(&cfg);
    let (_, b, _gb) = common::run_in_tempdir(&cfg);
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.len() >= 10);
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (name, bytes) in &fa {
        assert!(bytes == &fb[name], "{name} differs");
    }

    let other = common::load("scenario_b1.toml", &[("duration", "4.0"), ("seed", "99")]);
    let (_, c, _gc) = common::run_in_tempdir(&other);
    assert_ne!(files(&c)["detections.csv"], fa["detections.csv"]);
}

#[test]
fn audits_agree_with_independent_recomputation() {
    let cfg = common::load("scenario_a1.toml", &[("duration", "12.0")]);
    let (report, dir, _guard) = common::run_in_tempdir(&cfg);
    let saved: RunReport = serde_json::from_str(&std::fs::read_to_string(dir.join(REPORT)).unwrap()).unwrap();
    assert_eq!(saved, report);

    // Pairwise distances straight from the true positions.
    let truth: Vec<TruthRow> = read_rows(&dir.join(TRUTH)).unwrap();
    let mut by_tick: BTreeMap<u64, Vec<&TruthRow>> = BTreeMap::new();
    for r in &truth {
        by_tick.entry(r.tick).or_default().push(r);
    }
    let mut min_pair = f64::INFINITY;
    for rows in by_tick.values() {
        for (k, a) in rows.iter().enumerate() {
            for b in &rows[k + 1..] {
                let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt();
                min_pair = min_pair.min(d);
            }
        }
    }
    let reported = report.min_pair_distance.unwrap();
    assert!((reported - min_pair).abs() < 1e-6, "{reported} vs {min_pair}");

    // The barrier values handed to the filter say the same thing.
    let rows: Vec<ConstraintRow> = read_rows(&dir.join(CONSTRAINTS)).unwrap();
    let from_barrier = rows
        .iter()
        .filter(|r| r.kind == "safety" && r.partner.starts_with("agent"))
        .map(|r| (r.h + cfg.cbf.r_s * cfg.cbf.r_s).sqrt())
        .fold(f64::INFINITY, f64::min);
    assert!((from_barrier - min_pair).abs() < 1e-6, "{from_barrier} vs {min_pair}");
    assert!(rows.iter().all(|r| r.slack >= -1e-9));
    assert_eq!(report.audits.collision, min_pair >= cfg.cbf.r_s - 0.05);
}
