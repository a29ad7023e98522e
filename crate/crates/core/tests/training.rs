use lcreg::longtail_data::{DataSource, DatasetRecipe, ImbalanceProfile, ProfileKind, SampleShape};
use lcreg::trainer::{run, TrainConfig};

fn mixture(seed: u64) -> DatasetRecipe {
    DatasetRecipe {
        data: DataSource::Mixture {
            sample: SampleShape::Vector { dim: 32 },
            num_parts: 8,
            parts_per_class: 3,
            scale: 2.0,
            stdev: 1.0,
        },
        profile: ImbalanceProfile::new(10, 500, 100.0, ProfileKind::Exponential).unwrap(),
        val_per_class: 100,
        seed,
    }
}

#[test]
fn rebalancing_stage_lifts_tail_classes() {
    let mut improved = 0;
    for seed in 0..5 {
        let (train, val) = mixture(seed).build().unwrap();
        let config = TrainConfig {
            seed,
            log_every: 0,
            ..TrainConfig::default()
        };
        let record = run(&config, &train, &val, "full").unwrap().record;
        let before = record.stage1_metrics.top1_few.unwrap();
        let after = record.final_metrics.top1_few.unwrap();
        if after > before {
            improved += 1;
        }
    }
    assert!(improved >= 4, "few-split accuracy improved in {improved} of 5 seeds");
}

#[test]
fn loss_trace_falls_on_long_tailed_mixture() {
    let (train, val) = mixture(7).build().unwrap();
    let config = TrainConfig {
        stage1_iters: 600,
        stage2_iters: 0,
        lr_decay_points: vec![],
        log_every: 50,
        ..TrainConfig::default()
    };
    let record = run(&config, &train, &val, "full").unwrap().record;
    let stage1: Vec<f64> = record.loss_trace.iter().filter(|p| p.stage == 1).map(|p| p.loss.total).collect();
    assert!(stage1.len() > 2);
    assert!(stage1.last().unwrap() < stage1.first().unwrap());
}
