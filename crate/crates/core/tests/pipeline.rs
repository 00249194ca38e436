use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splitforge::exec::Execution;
use splitforge::manifest::{parse_manifest, Dataset};
use splitforge::pipeline::{
    check_assignment, run_pipeline, stratified_train_valid, Expectations, Partition,
    PipelineOptions, PresetName, Ratios, SplitPreset,
};
use splitforge::report::audit;
use splitforge::synth::{generate, SynthSpec};
use splitforge::Error;

fn synthetic(spec: &SynthSpec) -> Dataset {
    let (m, s) = generate(spec).unwrap();
    parse_manifest(&m, &s).unwrap()
}

fn default_dataset() -> Dataset {
    synthetic(&SynthSpec::default())
}

fn largest_block(ds: &Dataset) -> usize {
    let speaker = ds.speaker_index().values().map(BTreeSet::len).max().unwrap();
    let transcript = ds.transcript_index().values().map(BTreeSet::len).max().unwrap();
    speaker.max(transcript)
}

#[test]
fn every_preset_satisfies_its_invariants() {
    let ds = default_dataset();
    for name in [
        PresetName::Unseen,
        PresetName::Challenge,
        PresetName::SnipsUnseenCombined,
        PresetName::RandomStratified,
    ] {
        let preset = SplitPreset::named(name);
        let out = run_pipeline(&ds, &preset, &PipelineOptions::new(3)).unwrap();
        assert_eq!(out.assignment.partitions.len(), ds.len());
        let problems = check_assignment(&ds, &out.assignment, &Expectations::for_preset(&preset));
        assert!(problems.is_empty(), "{name:?}: {problems:?}");
        assert_eq!(out.report.partition_sizes.values().sum::<usize>(), ds.len());
        for set in &out.report.sets {
            for cov in [set.speaker_coverage, set.utterance_coverage].into_iter().flatten() {
                assert!((0.0..=100.0).contains(&cov));
            }
        }
    }
}

#[test]
fn partition_sizes_track_ratios() {
    let ds = default_dataset();
    let slack = largest_block(&ds);
    for (name, ratios) in [
        (PresetName::Unseen, None),
        (PresetName::Challenge, Some(Ratios::new(75.0, 10.0, 7.5, 7.5))),
        (PresetName::RandomStratified, None),
    ] {
        let mut preset = SplitPreset::named(name);
        if let Some(r) = ratios {
            preset.ratios = r;
        }
        let out = run_pipeline(&ds, &preset, &PipelineOptions::new(11)).unwrap();
        let sizes = out.assignment.sizes();
        for (p, share) in Partition::ALL.into_iter().zip(preset.ratios.as_array()) {
            let target = Ratios::count(share, ds.len());
            let bound = if p == Partition::Train { 2 * slack } else { slack };
            assert!(sizes[&p].abs_diff(target) <= bound, "{name:?} {p}: {} vs {target}", sizes[&p]);
        }
    }
}

#[test]
fn random_split_has_full_coverage_and_small_kl() {
    let ds = default_dataset();
    let out = run_pipeline(&ds, &SplitPreset::named(PresetName::RandomStratified), &PipelineOptions::new(0)).unwrap();
    for set in &out.report.sets {
        assert_eq!(set.speaker_coverage, Some(100.0), "{}", set.partition);
        assert_eq!(set.utterance_coverage, Some(100.0), "{}", set.partition);
        assert!(set.speaker_kl.unwrap() < 0.05, "{}: {:?}", set.partition, set.speaker_kl);
    }
}

#[test]
fn reproducible_and_execution_independent() {
    let ds = default_dataset();
    let preset = SplitPreset::named(PresetName::Challenge);
    let mut options = PipelineOptions::new(42);
    let a = run_pipeline(&ds, &preset, &options).unwrap();
    let b = run_pipeline(&ds, &preset, &options).unwrap();
    options.ascent.execution = Execution::Sequential;
    let c = run_pipeline(&ds, &preset, &options).unwrap();
    assert_eq!(a.assignment, b.assignment);
    assert_eq!(a.report, b.report);
    assert_eq!(a.assignment.partitions, c.assignment.partitions);
}

#[test]
fn held_out_transcripts_move_atomically() {
    let ds = default_dataset();
    let out = run_pipeline(&ds, &SplitPreset::named(PresetName::Unseen), &PipelineOptions::new(8)).unwrap();
    let mut partitions_of: BTreeMap<String, BTreeSet<Partition>> = BTreeMap::new();
    for r in ds.records() {
        partitions_of
            .entry(r.normalized())
            .or_default()
            .insert(out.assignment.get(&r.utterance_id).unwrap());
    }
    for (t, ps) in partitions_of {
        if ps.contains(&Partition::TestUtterance) {
            assert_eq!(ps.len(), 1, "`{t}` split across {ps:?}");
        }
    }
}

#[test]
fn shared_test_transcripts_only_when_allowed() {
    let ds = default_dataset();
    let mut preset = SplitPreset::named(PresetName::Unseen);
    preset.allow_shared_test_transcripts = true;
    let out = run_pipeline(&ds, &preset, &PipelineOptions::new(2)).unwrap();
    let expect = Expectations::for_preset(&preset);
    assert!(!expect.transcripts_exclusive);
    assert!(check_assignment(&ds, &out.assignment, &expect).is_empty());

    let strict = Expectations::for_preset(&SplitPreset::named(PresetName::Unseen));
    let default_out = run_pipeline(&ds, &SplitPreset::named(PresetName::Unseen), &PipelineOptions::new(2)).unwrap();
    assert!(check_assignment(&ds, &default_out.assignment, &strict).is_empty());
}

#[test]
fn uniquely_owned_transcripts_are_infeasible_at_stage_one() {
    let mut manifest = String::from("utterance_id,speaker_id,transcript,intent\n");
    for t in 0..10 {
        manifest.push_str(&format!("a{t},s0,command number {t},c{}\n", t % 2));
    }
    for s in 1..4 {
        manifest.push_str(&format!("b{s},s{s},private phrase {s},c0\n"));
    }
    let meta = "speaker_id,gender\ns0,f\ns1,m\ns2,f\ns3,m\n";
    let ds = parse_manifest(&manifest, meta).unwrap();
    let err = run_pipeline(&ds, &SplitPreset::named(PresetName::Unseen), &PipelineOptions::new(0)).unwrap_err();
    match &err {
        Error::Infeasible { stage, constraint } => {
            assert!(stage.contains("stage 1"), "{stage}");
            assert!(constraint.contains("transcript coverage"), "{constraint}");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn large_speaker_test_set_starves_stage_two() {
    // nine held-out speakers read nearly every transcript, leaving too few
    // transcript blocks that are absent from test_speaker
    let ds = default_dataset();
    let mut preset = SplitPreset::named(PresetName::Unseen);
    preset.ratios = Ratios::new(60.0, 10.0, 15.0, 15.0);
    match run_pipeline(&ds, &preset, &PipelineOptions::new(11)) {
        Err(Error::Infeasible { stage, .. }) => assert!(stage.contains("stage 2"), "{stage}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn audit_reproduces_pipeline_report() {
    let ds = default_dataset();
    let out = run_pipeline(&ds, &SplitPreset::named(PresetName::Challenge), &PipelineOptions::new(4)).unwrap();
    assert_eq!(audit(&ds, &out.assignment).unwrap(), out.report);
}

/// Train/valid L1 distance of intent distributions is at most
/// (K + 1/2)(1/T + 1/V) for K classes: each class count deviates from its
/// exact share by less than one seat and the totals by at most one half.
#[test]
fn stratified_split_respects_largest_remainder_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..1000u64 {
        let classes = rng.gen_range(1..=8);
        let mut labels = Vec::new();
        for c in 0..classes {
            let n = if rng.gen_bool(0.15) { 1 } else { rng.gen_range(2..40) };
            labels.extend(std::iter::repeat(c).take(n));
        }
        let pool: Vec<usize> = (0..labels.len()).collect();
        let train_share = rng.gen_range(50.0..95.0);
        let ratio = (train_share, 100.0 - train_share);
        let (train, valid) = stratified_train_valid(&pool, ratio, |u| labels[u], case);

        let mut all: Vec<usize> = train.iter().chain(&valid).copied().collect();
        all.sort_unstable();
        assert_eq!(all, pool, "case {case}: not a partition");
        if train.is_empty() || valid.is_empty() {
            continue;
        }
        let f = train_share / 100.0;
        let freq = |set: &[usize], c: usize| set.iter().filter(|&&u| labels[u] == c).count();
        let (t, v) = (train.len() as f64, valid.len() as f64);
        let mut l1 = 0.0;
        for c in 0..classes {
            let n = freq(&pool, c);
            let tc = freq(&train, c);
            if n == 1 {
                assert_eq!(tc, 1, "case {case}: singleton class left train");
            } else {
                let exact = n as f64 * f;
                assert!(tc as f64 >= exact.floor() && tc as f64 <= exact.ceil(), "case {case}: class {c} got {tc} of {n}");
            }
            l1 += (tc as f64 / t - freq(&valid, c) as f64 / v).abs();
        }
        let bound = (classes as f64 + 0.5) * (1.0 / t + 1.0 / v);
        assert!(l1 <= bound + 1e-12, "case {case}: {l1} > {bound}");
    }
}
