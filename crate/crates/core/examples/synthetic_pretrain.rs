//! End to end on synthetic data: write a CIFAR-10 layout, pretrain a small
//! encoder for a few epochs, then linear-probe it against random weights.
//!
//! cargo run --release --example synthetic_pretrain

use spatial_reasoning::datasets::{synthetic, DatasetId, EvalTaskSpec};
use spatial_reasoning::evaluation::{linear_probe, ProbeConfig};
use spatial_reasoning::experiment::random_weights_checkpoint;
use spatial_reasoning::model::Checkpoint;
use spatial_reasoning::training::{pretrain, RunConfig};

fn main() -> spatial_reasoning::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let root = dir.path().join("data");
    synthetic::write_cifar10(&root, 40, 100, 0)?;

    let mut cfg = RunConfig::new(DatasetId::Cifar10, dir.path().join("run"));
    cfg.data_root = Some(root.clone());
    cfg.m = 16;
    cfg.epochs = 3;
    cfg.blocks_per_stage = Some(1);
    cfg.base_width = Some(8);
    let out = pretrain(&cfg, None)?;
    for rec in out.log.iter().step_by(4) {
        println!("epoch {} step {:>3}: l_total {:.4}", rec.epoch, rec.step, rec.l_total);
    }

    let probe = ProbeConfig { n_patches: 5, epochs: 30, ..ProbeConfig::default() };
    let task = EvalTaskSpec::same_domain(DatasetId::Cifar10);
    let trained = linear_probe(&Checkpoint::load(&out.final_checkpoint)?, &task, &root, &probe)?;
    let random = linear_probe(&random_weights_checkpoint(&cfg)?, &task, &root, &probe)?;
    println!("probe accuracy: pretrained {:.1}%, random weights {:.1}%", trained.test_accuracy, random.test_accuracy);
    Ok(())
}
