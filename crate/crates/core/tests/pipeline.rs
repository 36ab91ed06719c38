use corredit::workbench::{read_metrics, report, Checkpoint, ModelKind, Pipeline, Preset, RunConfig};
use corredit::Error;

#[test]
fn smoke_run_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(RunConfig::preset(Preset::Smoke), dir.path()).unwrap();
    let summary = p.run_all().unwrap();
    for f in [
        p.dir.classifier(),
        p.dir.dpm(),
        p.dir.cm(),
        p.dir.tta(),
        p.dir.report(),
        p.dir.metrics(),
    ] {
        assert!(f.exists(), "{}", f.display());
    }
    assert_eq!(Checkpoint::load(&p.dir.cm()).unwrap().meta.kind, ModelKind::Cm);
    assert_eq!(summary.tta.results.len(), 3);
    let a = &summary.tta.agreement;
    assert_eq!(a.dpm_counted_nfe_per_edit, 3.0 * 3.0);
    assert!(a.cm_counted_nfe_per_edit <= 2.0);

    // Loaded models reproduce the in-memory evaluation.
    let again = p.tta_eval().unwrap();
    for (a, b) in again.results.iter().zip(&summary.tta.results) {
        assert_eq!(a.rows, b.rows);
    }

    let text = std::fs::read_to_string(p.dir.report()).unwrap();
    let recs = read_metrics(&p.dir.metrics()).unwrap();
    let row = recs.iter().find(|r| r.stage == "tta_eval").unwrap();
    assert!(text.contains(&format!("{:.4}", row.metrics["tta_accuracy"])));
}

#[test]
fn stages_require_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(RunConfig::preset(Preset::Smoke), dir.path()).unwrap();
    assert!(matches!(p.train_dpm(), Err(Error::MissingArtifact(_))));
    assert!(matches!(p.load_cm(), Err(Error::MissingArtifact(_))));
    let mut other = RunConfig::preset(Preset::Smoke);
    other.seed = 9;
    assert!(matches!(Pipeline::new(other, dir.path()), Err(Error::HashMismatch(_))));
    assert!(report::render(&p.dir, false).is_err());
}
