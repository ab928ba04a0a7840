use bsptab::columnar::{canonical_diff_floor, concat};
use bsptab::comm::run_local;
use bsptab::distops::DistContext;
use bsptab::pipeline::{run_pipeline, PipelineConfig, PipelineOutput};
use bsptab::tensor::Batch;
use bsptab::Error;

fn small(epochs: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig { n_drugs: 60, n_response_rows: 500, n_rna_rows: 60, ..PipelineConfig::default() };
    cfg.train.epochs = epochs;
    cfg
}

fn run(cfg: &PipelineConfig, world: usize) -> Vec<PipelineOutput> {
    run_local(world, |c| run_pipeline(&DistContext::new(c), cfg).unwrap())
}

#[test]
fn assembled_dataset_and_training_do_not_depend_on_world_size() {
    let mut cfg = small(5);
    cfg.train.batch = Batch::Full;
    cfg.train.lr = 0.01;
    let base = run(&cfg, 1).remove(0);
    for world in [2, 3, 4] {
        let outs = run(&cfg, world);
        let parts: Vec<_> = outs.iter().map(|o| o.dataset.clone()).collect();
        let all = concat(base.dataset.schema(), &parts).unwrap();
        assert!(canonical_diff_floor(&all, &base.dataset, 1e-12, 1.0).is_none(), "world {world}");
        for o in &outs {
            assert_eq!((o.n_train, o.n_test), (base.n_train, base.n_test));
            assert_eq!(o.rna_duplicates, 0);
            assert_eq!(o.param_digest, outs[0].param_digest);
            for (a, b) in o.history.iter().zip(&base.history) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "world {world}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn training_reduces_loss_and_counts_reconcile() {
    let outs = run(&small(20), 2);
    let o = &outs[0];
    assert!(o.history.last().unwrap() < &(0.5 * o.history[0]), "{:?}", o.history);
    assert!(o.test_mse.is_finite());
    let rows: usize = outs.iter().map(|o| o.dataset.nrows()).sum();
    assert_eq!(o.n_train + o.n_test, rows);
    for o in &outs {
        let stages: Vec<&str> = o.metrics.iter().map(|m| m.stage.as_str()).collect();
        assert_eq!(stages.first(), Some(&"init"));
        assert_eq!(stages.last(), Some(&"train"));
        let bridge = o.metrics.iter().find(|m| m.stage == "bridge").unwrap();
        assert_eq!(bridge.rows_out, o.dataset.nrows());
    }
}

#[test]
fn invalid_config_fails_on_every_rank() {
    let mut cfg = small(1);
    cfg.train_fraction = 1.5;
    let errs = run_local(2, |c| run_pipeline(&DistContext::new(c), &cfg).unwrap_err());
    for (rank, e) in errs.iter().enumerate() {
        assert!(e.to_string().contains("train_fraction"), "{e}");
        assert!(e.to_string().contains(&rank.to_string()), "{e}");
    }
    let mut cfg = small(1);
    cfg.net.in_dim += 1;
    assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
}
