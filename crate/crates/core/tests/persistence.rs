use std::path::Path;
use std::process::Command;

use merc_core::config::Config;
use merc_core::data::{load_dataset, split_dataset, synth_generate, write_dataset, Dataset, ModalityDims, SynthSpec};
use merc_core::train::{evaluate, train, Checkpoint};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;

const SMALL: &str = "latent_dim=6\nbranch_dim=5\nproj_dim=3\nd_fusion=4\nn_layers=1\njacobi_order_R=2\n\
synth_dim_t=5\nsynth_dim_a=4\nsynth_dim_v=3\nsynth_conversations=4\nsynth_max_len=4\nsteps=6\n";

fn small() -> Config {
    Config::parse(SMALL).unwrap()
}

fn spec(conversations: usize, max_len: usize, classes: usize, speakers: usize) -> SynthSpec {
    SynthSpec {
        conversations,
        max_len,
        classes,
        speakers,
        dims: ModalityDims::new(3, 2, 2),
    }
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 32,
        rng_seed: RngSeed::Fixed(3),
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn dataset_text_round_trips(
        conversations in 1usize..5,
        max_len in 1usize..6,
        classes in 1usize..5,
        speakers in 1usize..4,
        seed in any::<u64>(),
    ) {
        let d = synth_generate(&spec(conversations, max_len, classes, speakers), seed).unwrap();
        prop_assert!(d.validate().is_ok());
        let back = Dataset::parse(&d.to_text().unwrap(), Path::new("mem")).unwrap();
        prop_assert_eq!(back, d);
    }

    #[test]
    fn split_partitions_conversations(n in 2usize..12, frac in 0.2f64..0.8, seed in any::<u64>()) {
        let d = synth_generate(&spec(n, 2, 2, 1), 1).unwrap();
        if let Ok((a, b)) = split_dataset(&d, frac, seed) {
            prop_assert_eq!(a.conversations.len() + b.conversations.len(), n);
            let mut ids: Vec<_> = a.conversations.iter().chain(&b.conversations).map(|c| c.id.clone()).collect();
            ids.sort();
            let mut all: Vec<_> = d.conversations.iter().map(|c| c.id.clone()).collect();
            all.sort();
            prop_assert_eq!(ids, all);
        }
    }
}

#[test]
fn synthetic_data_depends_only_on_the_seed() {
    let s = spec(5, 6, 4, 2);
    assert_eq!(synth_generate(&s, 9).unwrap(), synth_generate(&s, 9).unwrap());
    assert_ne!(synth_generate(&s, 9).unwrap(), synth_generate(&s, 10).unwrap());
}

#[test]
fn malformed_dataset_lines_are_reported_with_their_line() {
    let err = Dataset::parse("2 1 1 1 1\nc0 0 0 0.1 0.2 0.3\nc0 0 5 0.1 0.2 0.3\n", Path::new("x.txt")).unwrap_err();
    assert!(err.to_string().contains('3'), "{err}");
    assert!(Dataset::parse("2 1 1 1 1\nc0 0 0 0.1 0.2\n", Path::new("x.txt")).is_err());
    assert!(Dataset::parse("2 1 1 1 1\nc0 0 0 0.1 NaN 0.2\n", Path::new("x.txt")).is_err());
}

#[test]
fn checkpoint_file_round_trip_preserves_evaluation() {
    let cfg = small();
    let data = synth_generate(&SynthSpec::from_config(&cfg), 4).unwrap();
    let out = train(&cfg, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());
    let before = evaluate(&out.model().unwrap(), &data).unwrap();
    let after = evaluate(&loaded.into_model().unwrap(), &data).unwrap();
    assert_eq!(before, after);
}

fn merc(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_merc")).args(args).output().unwrap()
}

#[test]
fn command_line_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    std::fs::write(p("cfg.txt"), SMALL).unwrap();

    let o = merc(&["synth", "--out", &p("data.txt"), "--seed", "2", "--config", &p("cfg.txt")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let data = load_dataset(Path::new(&p("data.txt"))).unwrap();
    assert_eq!(data.conversations.len(), 4);

    let o = merc(&["train", "--config", &p("cfg.txt"), "--data", &p("data.txt"), "--out", &p("m.ckpt")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<serde_json::Value> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[5]["step"], 5);
    assert_eq!(lines[6]["split"], "train");

    let o = merc(&["eval", "--ckpt", &p("m.ckpt"), "--data", &p("data.txt")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eval: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(eval["accuracy"], lines[6]["accuracy"]);
    assert_eq!(eval["wf1"], lines[6]["wf1"]);

    let o = merc(&["eval", "--ckpt", &p("data.txt"), "--data", &p("data.txt")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));
}

#[test]
fn command_line_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.txt");
    std::fs::write(&cfg, "no_such_key=1\n").unwrap();
    let o = merc(&["synth", "--out", &dir.path().join("d.txt").to_string_lossy(), "--config", &cfg.to_string_lossy()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
}

#[test]
fn written_dataset_loads_back() {
    let d = synth_generate(&spec(3, 3, 2, 2), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.txt");
    write_dataset(&d, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), d);
}
