//! Image files, dataset directories, checkpoints, configuration, and the
//! training driver that ties them to the engine.

mod checkpoint;
mod config;
mod dataset;
mod image;

pub use checkpoint::{
    check_styles, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, ManifestEntry, FORMAT_VERSION,
    MAGIC,
};
pub use config::{
    resolve_style, set_train_key, train_config_from_pairs, train_config_pairs, RunConfig, ENV_PREFIX, KEYS,
};
pub use dataset::{index_dataset, list_images, DatasetIndex};
pub use image::{byte_to_unit, is_image_path, load_image, save_image, unit_to_byte, IMAGE_EXTENSIONS};

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::training::{LossRecord, TrainState, TrainingData};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_path(out_dir: &Path, iteration: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("iter_{iteration:08}.ckpt"))
}

/// Train `state` to `until` iterations, appending to the metrics log in
/// `out_dir` and writing periodic and final checkpoints.
pub fn run_training(state: &mut TrainState, data: &TrainingData, until: u64, out_dir: &Path) -> Result<Vec<LossRecord>> {
    std::fs::create_dir_all(out_dir.join("checkpoints")).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(METRICS_FILE);
    let file = if state.iteration == 0 && state.new_style.is_none() {
        File::create(&log_path)
    } else {
        OpenOptions::new().create(true).append(true).open(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let interval = state.config.checkpoint_interval;
    let records = state.run(data, until, |s, record| {
        if let Some(r) = record {
            let line = serde_json::to_string(r).expect("record serializes");
            writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| Error::io(&log_path, e))?;
            log::info!(
                "iter {} d {:.4} g_adv {:.4} g_cls {:.4} recon {:.4}",
                r.iteration,
                r.d_loss,
                r.g_adv,
                r.g_cls,
                r.recon
            );
        }
        if interval > 0 && s.iteration % interval == 0 {
            save_checkpoint(s, &checkpoint_path(out_dir, s.iteration))?;
        }
        Ok(())
    })?;
    save_checkpoint(state, &out_dir.join(FINAL_CHECKPOINT))?;
    Ok(records)
}
