mod common;

use std::fs;

use flowprompt::harness::pipeline::{run_pipeline, PipelineOptions, RunLayout, Stage};
use flowprompt::Error;

#[test]
fn stages_cache_refuse_stale_and_rerun_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = common::tiny_config();

    let first = run_pipeline(&cfg, root, PipelineOptions::default()).unwrap();
    assert_eq!(first.executed.len(), 6);
    let report = fs::read_to_string(RunLayout::new(root).report()).unwrap();

    let again = run_pipeline(&cfg, root, PipelineOptions::default()).unwrap();
    assert!(again.executed.is_empty());
    assert_eq!(again.manifest.metrics, first.manifest.metrics);
    assert_eq!(fs::read_to_string(RunLayout::new(root).report()).unwrap(), report);

    // A missing checkpoint re-runs that stage and everything after it.
    fs::remove_dir_all(RunLayout::new(root).discriminator()).unwrap();
    let healed = run_pipeline(&cfg, root, PipelineOptions::default()).unwrap();
    assert_eq!(healed.executed, vec![Stage::Discriminator, Stage::Samples, Stage::Eval]);
    assert_eq!(fs::read_to_string(RunLayout::new(root).report()).unwrap(), report);

    let mut changed = cfg.clone();
    changed.discriminator.train.epochs += 1;
    let err = run_pipeline(&changed, root, PipelineOptions::default()).unwrap_err();
    assert!(matches!(err, Error::StaleStage { ref stage, .. } if stage == "discriminator"), "{err}");
    assert_eq!(err.exit_code(), 2);

    let forced = run_pipeline(&changed, root, PipelineOptions { force: true, ..Default::default() }).unwrap();
    assert_eq!(forced.executed, vec![Stage::Discriminator, Stage::Samples, Stage::Eval]);

    let partial = run_pipeline(&cfg, root, PipelineOptions { until: Stage::Flows, force: false }).unwrap();
    assert!(partial.executed.is_empty());
    assert_eq!(partial.manifest.stages.len(), 3);
}

#[test]
fn sample_sets_share_keys_and_noise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config();
    run_pipeline(&cfg, dir.path(), PipelineOptions::default()).unwrap();
    let layout = RunLayout::new(dir.path());
    let text = fs::read_to_string(layout.report()).unwrap();
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(report["paired"].as_array().unwrap().len(), 2);
    assert!(report["unpaired"].as_array().unwrap().is_empty());
    assert_eq!(report["cosine"]["n_runs"], 2);
    for mode in ["baseline", "motionprompt", "dps"] {
        let set = layout.stage_dir(Stage::Samples).join(mode);
        let keys: Vec<String> = fs::read_dir(&set)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(keys.len(), 2, "{mode}");
    }
}
