use std::fs;

use sokd_core::checkpoint::{load_backbone, read_manifest};
use sokd_core::config::{Mode, RunConfig};
use sokd_core::model::evaluate;
use sokd_core::report::build_report;
use sokd_core::trainer::{policy_oracle, read_metrics, run_experiment, train_teacher, write_run};

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.train_per_class = 6;
    cfg.data.test_per_class = 3;
    cfg.teacher_train.epochs = 2;
    cfg.schedule.epochs = 3;
    cfg.schedule.search_epochs = 2;
    cfg.schedule.batch_size = 16;
    cfg
}

#[test]
fn runs_report_and_reload() {
    let cfg = tiny();
    let (train, test) = cfg.data.generate(cfg.data_seed).unwrap();
    let (teacher, acc) = train_teacher(&cfg, &train, &test).unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let before = teacher.clone();

    let root = tempfile::tempdir().unwrap();
    for seed in [0, 1] {
        for mode in [Mode::Sokd, Mode::Baseline] {
            let mut c = cfg.clone();
            c.seed = seed;
            c.mode = mode;
            let out = run_experiment(&c, &teacher, &train, &test).unwrap();
            let dir = root.path().join(format!("{mode:?}-{seed}"));
            write_run(&dir, &c, &out).unwrap();

            let rows = read_metrics(dir.join("metrics.csv")).unwrap();
            assert_eq!(rows.iter().filter(|r| r.split == "test").count(), cfg.schedule.epochs + 1);
            let aug = rows.iter().filter(|r| r.aug_loss.is_some()).count();
            assert_eq!(aug, if mode == Mode::Sokd { cfg.schedule.search_epochs } else { 0 });

            let student = load_backbone(dir.join("checkpoint")).unwrap();
            assert_eq!(evaluate(&student, &test).unwrap(), out.final_top1);
            let info = read_manifest(dir.join("checkpoint")).unwrap().info;
            assert_eq!(info["test_top1"], out.final_top1 as f64);
        }
    }
    assert_eq!(teacher, before);

    let rep = build_report(root.path()).unwrap();
    assert_eq!(rep.runs.len(), 4);
    assert_eq!(rep.paired_delta.unwrap().pairs, 2);
    let cfg_text = fs::read_to_string(root.path().join("Sokd-0/config.json")).unwrap();
    assert_eq!(RunConfig::from_json(&cfg_text).unwrap().seed, 0);
}

#[test]
fn oracle_ranking_is_sorted_and_complete() {
    let cfg = tiny();
    let (train, test) = cfg.data.generate(cfg.data_seed).unwrap();
    let (teacher, _) = train_teacher(&cfg, &train, &test).unwrap();
    let ranked = policy_oracle(&cfg, &teacher, &train).unwrap();
    assert_eq!(ranked.len(), cfg.oracle.candidates.len());
    assert!(ranked.windows(2).all(|w| w[0].l_aug <= w[1].l_aug));
}
