use negminer::fixtures::{planted_fixture, PlantedConfig};
use negminer::mining::{mine_dataset, MiningConfig, RunOptions};
use negminer::store::load_dataset;
use negminer::sweep::{dataset_file_name, expand_grid, run_sweep, Grid, MethodFamily, SweepSpec};

fn spec(out: &std::path::Path) -> SweepSpec {
    SweepSpec {
        method_family: MethodFamily::PercPos,
        grid: Grid::Range {
            start: 0.0,
            stop_inclusive: 1.0,
            step: 0.05,
        },
        shared: MiningConfig::default(),
        emit_datasets: true,
        out_dir: Some(out.to_path_buf()),
        loss_temperature: 0.05,
    }
}

#[test]
fn percent_sweep_matches_individual_runs() {
    let f = planted_fixture(&PlantedConfig {
        num_queries: 40,
        background: 300,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let spec = spec(dir.path());
    let opts = RunOptions::default();
    let summary = run_sweep(&spec, &f.pairs, &f.queries, &f.corpus_matrix, &f.corpus, &opts).unwrap();
    summary.write(dir.path()).unwrap();

    assert_eq!(summary.rows.len(), 21);
    assert_eq!(summary.failures(), 0);
    // a looser cap never removes fewer candidates
    for w in summary.rows.windows(2) {
        assert!(w[0].removed_as_false_negative >= w[1].removed_as_false_negative);
    }
    for point in expand_grid(&spec).unwrap().iter().step_by(5) {
        let direct = mine_dataset(&f.pairs, &f.queries, &f.corpus_matrix, &f.corpus, &point.config, &opts).unwrap();
        let path = dir.path().join(dataset_file_name(MethodFamily::PercPos, point.value));
        let loaded = load_dataset(&path).unwrap();
        for (a, b) in loaded.iter().zip(&direct.examples) {
            assert_eq!(a, b);
        }
        assert_eq!(loaded.len(), direct.examples.len());
    }
    let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 22);
    assert!(dir.path().join("summary.json").exists());
}

#[test]
fn failing_point_does_not_abort_the_sweep() {
    let f = planted_fixture(&PlantedConfig {
        num_queries: 5,
        background: 50,
        ..Default::default()
    })
    .unwrap();
    let spec = SweepSpec {
        method_family: MethodFamily::SampledTopk,
        grid: Grid::Values(vec![2.0, 10.0]),
        shared: MiningConfig::default(),
        emit_datasets: false,
        out_dir: None,
        loss_temperature: 0.05,
    };
    let summary = run_sweep(&spec, &f.pairs, &f.queries, &f.corpus_matrix, &f.corpus, &RunOptions::default()).unwrap();
    assert_eq!(summary.failures(), 1);
    assert!(summary.rows[0].error.as_deref().unwrap().contains("pool_k"));
    assert!(summary.rows[1].error.is_none());
    assert_eq!(summary.rows[1].examples, 5);
}
