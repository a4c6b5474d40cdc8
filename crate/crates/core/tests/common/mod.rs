#![allow(dead_code)]

use modalprompt::backbone::{BackboneConfig, BackboneModel};
use modalprompt::experiments::Lab;
use modalprompt::training::RunConfig;

pub const D_MODEL: usize = 16;
pub const D_G: usize = 8;

/// Randomly initialized, frozen, narrow backbone: fast enough for plumbing tests.
pub fn tiny_lab() -> Lab {
    let mut model = BackboneModel::new(tiny_backbone_config(), 5).unwrap();
    model.frozen = true;
    Lab::new(model, D_G)
}

pub fn tiny_backbone_config() -> BackboneConfig {
    BackboneConfig {
        d_model: D_MODEL,
        n_heads: 2,
        d_ff: 32,
        ..BackboneConfig::default()
    }
}

pub fn tiny_run_config(n_tasks: usize) -> RunConfig {
    RunConfig {
        prompt_len: 3,
        k: 2,
        d_model: D_MODEL,
        d_g: D_G,
        n_tasks,
        epochs_per_task: 1,
        batch_size: 8,
        ..RunConfig::default()
    }
}
