use std::path::{Path, PathBuf};

use clap::Parser;
use tempfile::TempDir;

use splitforge::cli::{main_with_args, run, Cli};
use splitforge::manifest::parse_manifest;
use splitforge::pipeline::{Partition, SplitAssignment};
use splitforge::report::{audit, SplitReport};
use splitforge::Error;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(extra_synth_args: &[&str]) -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        let data = ws.path("data");
        let mut args = vec!["splitforge", "synth", "--out", data.to_str().unwrap()];
        args.extend_from_slice(extra_synth_args);
        assert_eq!(main_with_args(args), 0);
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).to_str().unwrap().to_owned()
    }

    fn dataset_args(&self) -> Vec<String> {
        vec![
            "--manifest".into(),
            self.s("data/manifest.csv"),
            "--speakers".into(),
            self.s("data/speakers.csv"),
        ]
    }

    fn split(&self, out: &str, extra: &[&str]) -> i32 {
        let mut args: Vec<String> = vec!["splitforge".into(), "split".into()];
        args.extend(self.dataset_args());
        args.extend(["--out".into(), self.s(out)]);
        args.extend(extra.iter().map(|s| s.to_string()));
        main_with_args(args)
    }

    fn try_run(&self, args: Vec<String>) -> Result<(), Error> {
        run(&Cli::try_parse_from(args).unwrap())
    }

    fn dataset(&self) -> splitforge::manifest::Dataset {
        let read = |p: &str| std::fs::read_to_string(self.path(p)).unwrap();
        parse_manifest(&read("data/manifest.csv"), &read("data/speakers.csv")).unwrap()
    }
}

fn read_report(path: &Path) -> SplitReport {
    SplitReport::from_json(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn split_writes_the_output_layout() {
    let ws = Workspace::new(&[]);
    assert_eq!(ws.split("out", &["--preset", "unseen", "--seed", "3"]), 0);
    for p in Partition::ALL {
        let text = std::fs::read_to_string(ws.path(&format!("out/splits/{p}.csv"))).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("utterance_id,partition"));
        let ids: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        assert_eq!(ids, sorted, "{p} not sorted");
    }
    let report = read_report(&ws.path("out/report.json"));
    assert_eq!(report.provenance.as_ref().unwrap().seed, 3);
    let ts = report.set(Partition::TestSpeaker).unwrap();
    assert_eq!((ts.speaker_coverage, ts.utterance_coverage), (Some(0.0), Some(100.0)));
    let tu = report.set(Partition::TestUtterance).unwrap();
    assert_eq!((tu.speaker_coverage, tu.utterance_coverage), (Some(100.0), Some(0.0)));
    assert!(ws.path("out/report.txt").exists());
    assert!(ws.path("out/config.toml").exists());
}

#[test]
fn emitted_config_reproduces_the_run() {
    let ws = Workspace::new(&[]);
    assert_eq!(ws.split("a", &["--preset", "challenge", "--seed", "5", "--restarts", "3"]), 0);
    let config = ws.path("a/config.toml");
    let code = main_with_args(["splitforge", "split", "--config", config.to_str().unwrap()]);
    assert_eq!(code, 0);
    let first = std::fs::read(ws.path("a/report.json")).unwrap();
    assert_eq!(ws.split("b", &["--config", config.to_str().unwrap()]), 0);
    assert_eq!(std::fs::read(ws.path("b/report.json")).unwrap(), first);
}

#[test]
fn verbose_writes_a_json_lines_trace() {
    let ws = Workspace::new(&[]);
    assert_eq!(ws.split("out", &["--seed", "1", "--verbose", "--threads", "1"]), 0);
    let trace = std::fs::read_to_string(ws.path("out/trace.jsonl")).unwrap();
    let events: Vec<serde_json::Value> = trace.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!events.is_empty());
    assert!(events.iter().all(|e| e.get("score").is_some() && e.get("stage").is_some()));
}

#[test]
fn missing_metadata_is_a_validation_error_naming_the_path() {
    let ws = Workspace::new(&[]);
    let mut args: Vec<String> = vec!["splitforge".into(), "split".into(), "--manifest".into(), ws.s("data/manifest.csv")];
    args.extend(["--speakers".into(), ws.s("data/nope.csv"), "--out".into(), ws.s("out")]);
    let err = ws.try_run(args.clone()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("nope.csv"), "{err}");
    assert_eq!(main_with_args(args), 2);
}

#[test]
fn infeasible_run_exits_with_code_three() {
    let ws = Workspace::new(&[]);
    assert_eq!(ws.split("out", &["--ratios", "40:10:40:10"]), 3);
}

#[test]
fn audit_of_pipeline_output_matches_its_report() {
    let ws = Workspace::new(&[]);
    assert_eq!(ws.split("out", &["--seed", "9"]), 0);
    let mut args: Vec<String> = vec!["splitforge".into(), "audit".into()];
    args.extend(ws.dataset_args());
    args.extend(["--splits".into(), ws.s("out/splits"), "--out".into(), ws.s("audit")]);
    assert_eq!(main_with_args(args), 0);
    let mut embedded = read_report(&ws.path("out/report.json"));
    embedded.provenance = None;
    assert_eq!(read_report(&ws.path("audit/report.json")), embedded);
}

#[test]
fn audit_rejects_unknown_and_missing_ids() {
    let ws = Workspace::new(&[]);
    assert_eq!(ws.split("out", &["--preset", "random"]), 0);
    let train = ws.path("out/splits/train.csv");
    let mut text = std::fs::read_to_string(&train).unwrap();
    text.push_str("ghost-utterance,train\n");
    std::fs::write(&train, &text).unwrap();

    let mut args: Vec<String> = vec!["splitforge".into(), "audit".into()];
    args.extend(ws.dataset_args());
    args.extend(["--splits".into(), ws.s("out/splits")]);
    let err = ws.try_run(args.clone()).unwrap_err();
    assert!(err.to_string().contains("ghost-utterance"), "{err}");
    assert_eq!(err.exit_code(), 2);

    std::fs::remove_file(&train).unwrap();
    match ws.try_run(args) {
        Err(Error::Unassigned(ids)) => assert!(!ids.is_empty()),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn random_split_audits_to_full_coverage() {
    let ws = Workspace::new(&[]);
    assert_eq!(ws.split("out", &["--preset", "random", "--seed", "2"]), 0);
    let report = read_report(&ws.path("out/report.json"));
    for set in &report.sets {
        assert_eq!(set.utterance_coverage, Some(100.0));
    }
}

#[test]
fn compare_random_and_unseen() {
    let ws = Workspace::new(&[]);
    assert_eq!(ws.split("random", &["--preset", "random", "--ratios", "70:10:10:10"]), 0);
    assert_eq!(ws.split("unseen", &["--preset", "unseen"]), 0);
    let ds = ws.dataset();
    let load = |dir: &str| {
        let texts: Vec<String> = Partition::ALL
            .iter()
            .map(|p| std::fs::read_to_string(ws.path(&format!("{dir}/splits/{p}.csv"))).unwrap())
            .collect();
        let assignment = SplitAssignment::from_split_csvs(texts.iter().map(String::as_str)).unwrap();
        let report = read_report(&ws.path(&format!("{dir}/report.json")));
        assert_eq!(audit(&ds, &assignment).unwrap().sets, report.sets);
        report
    };
    let random = load("random");
    let unseen = load("unseen");
    let ts = |r: &SplitReport| r.set(Partition::TestSpeaker).unwrap().clone();
    assert_eq!(ts(&unseen).speaker_coverage, Some(0.0));
    assert_eq!(ts(&random).speaker_coverage, Some(100.0));
    assert!(ts(&unseen).speaker_kl.unwrap() <= 0.05);

    let mut args: Vec<String> = vec!["splitforge".into(), "compare".into()];
    args.extend(ws.dataset_args());
    for dir in ["random", "unseen", "random"] {
        args.extend(["--splits".into(), ws.s(dir)]);
    }
    assert_eq!(main_with_args(args.clone()), 0);

    args.truncate(args.len() - 4);
    let err = ws.try_run(args).unwrap_err();
    assert!(err.to_string().contains("at least two"), "{err}");
}

#[test]
fn comparison_columns_follow_input_order() {
    use splitforge::report::render_comparison;
    let ws = Workspace::new(&[]);
    assert_eq!(ws.split("u", &["--seed", "1"]), 0);
    assert_eq!(ws.split("r", &["--preset", "random"]), 0);
    let u = read_report(&ws.path("u/report.json"));
    let r = read_report(&ws.path("r/report.json"));
    let table = render_comparison(&[("first".into(), u.clone()), ("second".into(), r), ("third".into(), u)]);
    let header = table.lines().next().unwrap();
    let cols: Vec<&str> = header.split_whitespace().collect();
    assert_eq!(cols, ["first", "second", "third"]);
    for line in table.lines().skip(1) {
        let cells: Vec<&str> = line.split_whitespace().collect();
        let n = cells.len();
        assert_eq!(cells[n - 1], cells[n - 3], "{line}");
    }
}

#[test]
fn synth_is_deterministic_and_zero_corruption_has_zero_wer() {
    let a = Workspace::new(&["--seed", "4"]);
    let b = Workspace::new(&["--seed", "4"]);
    for f in ["data/manifest.csv", "data/speakers.csv"] {
        assert_eq!(std::fs::read(a.path(f)).unwrap(), std::fs::read(b.path(f)).unwrap());
    }
    let clean = Workspace::new(&["--no-corruption"]);
    assert_eq!(clean.split("out", &["--preset", "random"]), 0);
    let report = read_report(&clean.path("out/report.json"));
    assert_eq!(report.overall_wer.unwrap().wer, 0.0);
    for set in &report.sets {
        assert_eq!(set.wer.unwrap().wer, 0.0);
    }
}

#[test]
fn snips_preset_holds_out_speakers_in_one_test_set() {
    let ws = Workspace::new(&[]);
    assert_eq!(ws.split("out", &["--preset", "snips"]), 0);
    let report = read_report(&ws.path("out/report.json"));
    assert_eq!(report.partition_sizes[&Partition::TestUtterance], 0);
    assert_eq!(report.set(Partition::TestSpeaker).unwrap().speaker_coverage, Some(0.0));
}
