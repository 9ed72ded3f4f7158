#![allow(dead_code)]

use gct_core::config::{parse_override, ExperimentConfig};
use gct_core::data::compose_batches;
use gct_core::trainer::{materialize, BatchTensors, GctConfig, TrainData, TrainState};

/// 16 training images of 16x16, a quarter of them labeled.
pub fn tiny(extra: &[&str]) -> ExperimentConfig {
    let base = ["data.train_count=16", "data.val_count=4", "data.size=16", "ratio=\"1/4\""];
    let layers: Vec<_> = base
        .iter()
        .chain(extra)
        .map(|s| parse_override(s).unwrap())
        .collect();
    ExperimentConfig::resolve(None, &layers).unwrap()
}

/// Mixed batches of consecutive epochs, `count` in total.
pub fn batches(cfg: &GctConfig, data: &TrainData, count: usize) -> Vec<BatchTensors> {
    let mut out = Vec::new();
    let mut epoch = 0u64;
    while out.len() < count {
        for b in compose_batches(&data.manifest, cfg.labeled_batch, cfg.unlabeled_batch, 77 + epoch).unwrap() {
            let step = out.len() as u64;
            out.push(materialize(&data.train, &b.labeled, &b.unlabeled, &cfg.augment, cfg.seeds.augment, step).unwrap());
            if out.len() == count {
                break;
            }
        }
        epoch += 1;
    }
    out
}

/// Checksums of T1, T2 and the flaw detector.
pub fn sums(state: &TrainState) -> (u64, u64, u64) {
    (
        state.t1.params().checksum().unwrap(),
        state.t2.as_ref().unwrap().params().checksum().unwrap(),
        state.flaw.as_ref().unwrap().params().checksum().unwrap(),
    )
}
