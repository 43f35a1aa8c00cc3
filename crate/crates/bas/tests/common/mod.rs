#![allow(dead_code)]

use std::path::Path;

use bas::config::RunConfig;

/// A few seconds of training on a 20-image synthetic set.
pub fn tiny_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.root = dir.join("data");
    cfg.dataset.input_size = 32;
    cfg.dataset.synthetic.num_categories = 2;
    cfg.dataset.synthetic.image_size = 64;
    cfg.dataset.synthetic.train_per_category = 10;
    cfg.dataset.synthetic.test_per_category = 5;
    cfg.model.widths = vec![4, 8, 8, 8];
    cfg.model.convs_per_stage = 1;
    cfg.epochs = 1;
    cfg.batch_size = 4;
    cfg.seed = 3;
    cfg.output_dir = dir.join("run");
    cfg
}

pub fn write_config(cfg: &RunConfig, path: &Path) {
    std::fs::write(path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
}
