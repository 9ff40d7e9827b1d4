//! Target checkpoints: the adapter framing plus `head.*`, `ids.user` and
//! `ids.item` tensors, with entity lists and config in `<path>.meta.json`.

use super::target::{TargetModel, ITEM_TABLE, PRED_HEAD, USER_TABLE};
use super::TrainConfig;
use crate::error::{LoidError, Result};
use crate::format::{write_atomic, TensorFile};
use crate::heads::{Fusion, IdEmbeddings, PredictHead, FUSION_PROJ_NAMES};
use crate::tensor::Scalar;
use crate::textenc::EncoderParams;
use crate::adapters::LoraAdapter;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub users: Vec<String>,
    pub items: Vec<String>,
    pub config: TrainConfig,
    /// Checksum of the frozen encoder the model was trained on.
    pub encoder_checksum: String,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn checkpoint_file<T: Scalar>(model: &TargetModel<T>) -> Result<TensorFile> {
    let mut f = model.adapter.to_file()?;
    for (name, m) in model.head.named_tensors(PRED_HEAD) {
        f.push(name, m);
    }
    if let Some(ps) = &model.fusion.projections {
        for (name, m) in FUSION_PROJ_NAMES.iter().zip(ps) {
            f.push(*name, m);
        }
    }
    f.push(USER_TABLE, &model.ids.users);
    f.push(ITEM_TABLE, &model.ids.items);
    Ok(f)
}

pub fn save_checkpoint<T: Scalar>(model: &TargetModel<T>, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        users: model.ids.user_ids().to_vec(),
        items: model.ids.item_ids().to_vec(),
        config: model.config.clone(),
        encoder_checksum: model.encoder.checksum(),
    };
    checkpoint_file(model)?.save(path)?;
    write_atomic(&meta_path(path), serde_json::to_string_pretty(&meta)?.as_bytes())
}

/// Rebuilds a model from a checkpoint and the encoder it was trained on.
pub fn load_checkpoint<T: Scalar>(path: &Path, encoder: EncoderParams<T>) -> Result<TargetModel<T>> {
    let f = TensorFile::load(path)?;
    let meta_file = meta_path(path);
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(&meta_file)?)
        .map_err(|e| LoidError::Format(format!("{}: {e}", meta_file.display())))?;
    let ctx = |e: LoidError| LoidError::Format(format!("{}: {}", path.display(), strip(e)));
    if encoder.checksum() != meta.encoder_checksum {
        return Err(LoidError::Format(format!(
            "{}: checkpoint was trained on a different encoder",
            path.display()
        )));
    }
    let adapter = LoraAdapter::from_file(&f).map_err(ctx)?;
    adapter.check_against(&encoder).map_err(ctx)?;
    let head = PredictHead::from_file(&f, PRED_HEAD).map_err(ctx)?;
    let projections = if meta.config.fusion.projections {
        let m = |i: usize| f.matrix::<T>(FUSION_PROJ_NAMES[i]);
        Some([m(0).map_err(ctx)?, m(1).map_err(ctx)?, m(2).map_err(ctx)?])
    } else {
        None
    };
    let ids = IdEmbeddings::from_tables(
        meta.users,
        meta.items,
        f.matrix(USER_TABLE).map_err(ctx)?,
        f.matrix(ITEM_TABLE).map_err(ctx)?,
    )
    .map_err(ctx)?;
    let d = encoder.d_model();
    if ids.dim() != d || head.input_width() != 2 * d {
        return Err(LoidError::Format(format!(
            "{}: head or ID width does not match encoder width {d}",
            path.display()
        )));
    }
    Ok(TargetModel {
        encoder,
        adapter,
        ids,
        fusion: Fusion {
            config: meta.config.fusion,
            projections,
        },
        head,
        config: meta.config,
    })
}

fn strip(e: LoidError) -> String {
    match e {
        LoidError::Format(m) => m,
        other => other.to_string(),
    }
}
