use aud_core::normalizer::{self, MedoidRecord};
use aud_core::pipeline::{Condition, Experiment, ExperimentConfig, RunOptions, StageStatus};

mod common;

fn experiment(dir: &std::path::Path, conditions: &str) -> Experiment {
    let en = common::write_speech_corpus(&dir.join("en"), "en", 6, 1);
    let fr = common::write_speech_corpus(&dir.join("fr"), "fr", 4, 2);
    let text = common::smoke_experiment_config(&dir.join("run"), &[&en, &fr], ("en", &en), conditions);
    let path = dir.join("experiment.conf");
    std::fs::write(&path, text).unwrap();
    Experiment::new(ExperimentConfig::load(&path).unwrap()).unwrap()
}

#[test]
fn clean_condition_trains_no_fvae() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(dir.path(), "clean");
    let summary = exp.run(&RunOptions::default()).unwrap();
    assert!(!exp.layout.fvae_checkpoint(1).exists());
    assert!(!summary.stages.iter().any(|s| s.stage == "train-vc"));
    let convert = summary.stages.iter().find(|s| s.stage == "convert").unwrap();
    assert_eq!(convert.status, StageStatus::PassThrough);
    assert_eq!(summary.metrics.len(), 1);
    let m = &summary.metrics[0];
    assert!(m.nmi.is_finite() && m.purity.is_finite() && m.boundary.fscore.is_finite());
    assert!(exp.layout.units(1, "en", Condition::Clean).exists());
    assert!(exp.layout.report_dir().join("report.csv").exists());
}

#[test]
fn rerun_is_served_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(dir.path(), "clean, rec, vc");
    let first = exp.run(&RunOptions::default()).unwrap();
    assert!(exp.layout.fvae_checkpoint(1).exists());
    let stage_medoid = MedoidRecord::load(&exp.layout.medoid(1, "en")).unwrap();
    let vc_dir = exp.layout.converted_dir(1, "en", Condition::Vc);
    let used = MedoidRecord::load(&vc_dir.join(normalizer::MEDOID_FILE)).unwrap();
    assert_eq!(stage_medoid.utterance_id, used.utterance_id);
    for c in [Condition::Rec, Condition::Vc] {
        assert!(exp.layout.converted_dir(1, "en", c).exists());
    }
    assert_eq!(first.metrics.len(), 3);
    assert!(first.metrics.iter().all(|m| m.nmi.is_finite()));

    let err = exp.run(&RunOptions::default()).unwrap_err().to_string();
    assert!(err.contains("--resume"), "{err}");

    let second = exp
        .run(&RunOptions {
            resume: true,
            ..RunOptions::default()
        })
        .unwrap();
    for s in &second.stages {
        assert!(
            matches!(s.status, StageStatus::Cached | StageStatus::PassThrough),
            "{} {:?} {:?} ran again",
            s.stage,
            s.target,
            s.condition
        );
    }
    assert_eq!(first.metrics, second.metrics);
}

#[test]
fn run_directory_rejects_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(dir.path(), "clean");
    exp.prepare().unwrap();
    let mut other = exp.config.clone();
    other.hmmvae.units += 1;
    let err = Experiment::new(other).unwrap().prepare().unwrap_err().to_string();
    assert!(err.contains("different configuration"), "{err}");
}

#[test]
fn failed_stage_leaves_earlier_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(dir.path(), "clean");
    std::fs::remove_file(&exp.config.targets[0].reference).unwrap();
    assert!(exp.run(&RunOptions::default()).is_err());
    assert!(exp.layout.config_file().exists());
}

#[test]
fn identical_config_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(dir.path(), "clean, vc");
    let mut twin = exp.config.clone();
    twin.output_dir = dir.path().join("twin");
    let a = exp.run(&RunOptions::default()).unwrap();
    let b = Experiment::new(twin).unwrap().run(&RunOptions::default()).unwrap();
    assert_eq!(a.metrics, b.metrics);
}
