use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::process::{Command, Output};

use mscs_core::attacks::AttackId;
use mscs_core::codec::{encode, Mscm, MscmType, ReasonCode};
use mscs_core::sim::{
    compute_metrics, reference_scenario, AttributionLog, EventKind, EventLog, RunMetrics,
};
use mscs_core::StationId;

fn mscs(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mscs"));
    cmd.args(args).env_remove("MSCS_SEED");
    if let Some(seed) = seed_env {
        cmd.env("MSCS_SEED", seed);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(
    dir: &Path,
    attack: Option<AttackId>,
    edit: impl FnOnce(&mut serde_json::Value),
) -> String {
    let mut c = reference_scenario(3, attack);
    c.duration_ms = 30_000;
    let mut v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
    edit(&mut v);
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn attacks_list_prints_sixteen_rows_in_both_forms() {
    let table = mscs(&["attacks", "list"], None);
    assert!(table.status.success());
    let text = stdout(&table);
    assert_eq!(text.lines().count(), 17);
    assert!(text.lines().nth(11).unwrap().starts_with("A11"));

    let records = mscs(&["attacks", "list", "--format", "records"], None);
    let rows: Vec<serde_json::Value> = stdout(&records)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 16);
    assert_eq!(rows[4]["id"], "A5");
    assert_eq!(rows[4]["published_label"], "High");
}

#[test]
fn risk_report_flags_the_single_discrepancy() {
    let table = mscs(&["risk", "report"], None);
    assert!(table.status.success());
    let text = stdout(&table);
    assert!(text.contains("discrepancies: A11"));
    assert!(text.contains("rule matches label: 15/16"));
    assert!(text.contains("High: 8, Medium: 1, Low: 7"));

    let records = mscs(&["risk", "report", "--format", "records"], None);
    let lines: Vec<serde_json::Value> = stdout(&records)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 17);
    let summary = &lines[16];
    assert_eq!(summary["record"], "summary");
    assert_eq!(summary["matching"], 15);
    assert_eq!(summary["discrepancies"], serde_json::json!(["A11"]));
}

fn response() -> Mscm {
    let mut m = Mscm::bare(MscmType::Response, StationId(42), 1_500, 9);
    m.destination_ids = vec![StationId(7)];
    m.reason_code = Some(ReasonCode::Disagree(3));
    m
}

#[test]
fn validate_accepts_hex_and_binary_and_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = encode(&response()).unwrap();

    let hex_path = dir.path().join("msg.hex");
    fs::write(&hex_path, format!("{}\n", hex::encode(&bytes))).unwrap();
    let ok = mscs(&["validate", hex_path.to_str().unwrap()], None);
    assert!(ok.status.success(), "{}", stderr(&ok));
    let decoded: Mscm = serde_json::from_str(&stdout(&ok)).unwrap();
    assert_eq!(decoded, response());

    let bin_path = dir.path().join("msg.bin");
    fs::write(&bin_path, &bytes).unwrap();
    assert!(mscs(&["validate", bin_path.to_str().unwrap()], None)
        .status
        .success());

    let mut broken = bytes.clone();
    broken.truncate(bytes.len() - 3);
    fs::write(&bin_path, &broken).unwrap();
    let bad = mscs(&["validate", bin_path.to_str().unwrap()], None);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("invalid message"));

    fs::write(&hex_path, "abc").unwrap();
    assert_eq!(
        mscs(&["validate", hex_path.to_str().unwrap()], None)
            .status
            .code(),
        Some(1)
    );

    let missing = dir.path().join("nope.bin");
    assert_eq!(
        mscs(&["validate", missing.to_str().unwrap()], None)
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn run_writes_a_replayable_log() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), Some(AttackId::A5), |_| {});
    let out_dir = dir.path().join("out");
    let o = mscs(
        &[
            "run",
            "--config",
            &config,
            "--out",
            out_dir.to_str().unwrap(),
            "--trace-kinematics",
        ],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("digest: "));

    let log = EventLog::read_jsonl(BufReader::new(
        fs::File::open(out_dir.join("events.jsonl")).unwrap(),
    ))
    .unwrap();
    assert!(log.of_kind(EventKind::Kinematics).count() > 0);
    let attribution: AttributionLog =
        serde_json::from_str(&fs::read_to_string(out_dir.join("attribution.json")).unwrap())
            .unwrap();
    let metrics: RunMetrics =
        serde_json::from_str(&fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(compute_metrics(&log, &attribution).unwrap(), metrics);
    assert!(metrics.attack(AttackId::A5).unwrap().detected);
}

#[test]
fn seed_flag_beats_environment_beats_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), None, |_| {});
    let seed_line = |o: &Output| stdout(o).lines().next().unwrap().to_string();
    let digest = |o: &Output| {
        stdout(o)
            .lines()
            .find(|l| l.starts_with("digest"))
            .unwrap()
            .to_string()
    };

    let from_config = mscs(&["run", "--config", &config], None);
    assert_eq!(seed_line(&from_config), "seed: 3");
    let from_env = mscs(&["run", "--config", &config], Some("8"));
    assert_eq!(seed_line(&from_env), "seed: 8");
    let from_flag = mscs(&["run", "--config", &config, "--seed", "5"], Some("8"));
    assert_eq!(seed_line(&from_flag), "seed: 5");

    assert_ne!(digest(&from_config), digest(&from_env));
    assert_eq!(
        digest(&from_env),
        digest(&mscs(&["run", "--config", &config, "--seed", "8"], None))
    );
}

#[test]
fn detector_selection_limits_the_active_set() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), Some(AttackId::A5), |_| {});
    let out_dir = dir.path().join("out");
    let o = mscs(
        &[
            "run",
            "--config",
            &config,
            "--out",
            out_dir.to_str().unwrap(),
            "--detectors",
            "D13,D14",
        ],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics: RunMetrics =
        serde_json::from_str(&fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.detections, 0);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), None, |v| {
        v["channel"]["loss_prob"] = serde_json::json!(1.5)
    });
    let o = mscs(&["run", "--config", &config], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("channel.loss_prob"));

    let config = write_config(dir.path(), None, |v| {
        v["surprise"] = serde_json::json!(true)
    });
    assert_eq!(
        mscs(&["run", "--config", &config], None).status.code(),
        Some(2)
    );

    let config = write_config(dir.path(), None, |_| {});
    assert_eq!(
        mscs(&["run", "--config", &config, "--detectors", "D99"], None)
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        mscs(&["run", "--config", &config], Some("soon"))
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        mscs(&["run", "--config", "/nonexistent.json"], None)
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn shipped_scenarios_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg =
            mscs_core::sim::ScenarioConfig::from_json(&fs::read_to_string(&path).unwrap()).unwrap();
        cfg.validate()
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 3);
}
