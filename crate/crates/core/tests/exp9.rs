use hgnet::config::RunConfig;
use hgnet::scenegen::{simulate_scene, SceneSample};
use hgnet::train::train;

fn base_cfg() -> RunConfig {
    RunConfig {
        h: 32,
        w: 32,
        t_h: 2,
        t: 3,
        d: 16,
        c_cov: 8,
        batch: 8,
        epochs: 16,
        lr: 3e-4,
        lr_decay_every: 0,
        dropout: 0.0,
        n_agents: 8,
        ..RunConfig::default()
    }
}

fn scenes(cfg: &RunConfig, seeds: std::ops::Range<u64>) -> Vec<SceneSample> {
    seeds.map(|s| simulate_scene(s, &cfg.scene_config()).unwrap()).collect()
}

#[test]
#[ignore]
fn exp_ablation() {
    let cfg = base_cfg();
    let t0 = std::time::Instant::now();
    let train_set = scenes(&cfg, 10_000..12_000);
    let val_set = scenes(&cfg, 20_000..20_100);
    eprintln!("gen: {:?}", t0.elapsed());
    for (label, fgat, mem) in
        [("full", true, true), ("nomem", true, false), ("nofgatmem", false, false)]
    {
        let c = RunConfig { seed: 1, fgat_enabled: fgat, memory_enabled: mem, ..cfg.clone() };
        let t1 = std::time::Instant::now();
        let r = train(&c, &train_set, &val_set, |log| {
            eprintln!(
                "  {label} epoch {:2}: occ {:9.1} flow {:8.1} total {:7.4} | val auc_obs {:.5} iou {:.4} epe {:.3}",
                log.epoch,
                log.train.l_occ,
                log.train.l_flow,
                log.train.total,
                log.val.auc_observed,
                log.val.soft_iou_observed,
                log.val.epe
            );
        })
        .unwrap();
        let auc = r.logs.last().unwrap().val.auc_observed;
        eprintln!("{label:>10}: final auc_obs {auc:.5}  ({:?})", t1.elapsed());
    }
    eprintln!("total: {:?}", t0.elapsed());
}
