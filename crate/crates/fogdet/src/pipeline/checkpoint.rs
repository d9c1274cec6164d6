//! Binary checkpoint format.
//!
//! Layout: an 8-byte magic (`FDETCKPT`), a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header (config,
//! its hash, epoch counter, per-epoch history, and a manifest of every
//! tensor block), then all tensor payloads as little-endian `f64` in
//! manifest order, each tensor in row-major element order.
//!
//! Loading verifies magic, version, header well-formedness, payload length,
//! and — when a config is supplied — the config hash, each with its own
//! error so callers can tell "wrong file" from "wrong run".

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{ParamKind, ParamSet};
use crate::pseudo::TeacherState;

use super::config::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FDETCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Summary of one completed training epoch, stored in checkpoint history
/// and echoed to the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// `"burn_in"` or `"adaptation"`.
    pub phase: String,
    pub steps: usize,
    /// Mean composite loss over the epoch's steps.
    pub mean_total: f64,
    /// Mean supervised detection component (RPN + ROI head) alone.
    pub mean_detection: f64,
}

/// Complete training state: enough to resume or to evaluate.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochStats>,
    pub student_detector: ParamSet,
    pub student_adapt: Option<ParamSet>,
    pub teacher: TeacherState,
    pub velocity_detector: Vec<ArrayD<f64>>,
    pub velocity_adapt: Option<Vec<ArrayD<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    kind: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockMeta {
    role: String,
    tensors: Vec<TensorMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config_hash: String,
    config: TrainConfig,
    epoch: usize,
    history: Vec<EpochStats>,
    blocks: Vec<BlockMeta>,
}

fn kind_str(kind: ParamKind) -> &'static str {
    match kind {
        ParamKind::Weight => "weight",
        ParamKind::Bias => "bias",
    }
}

fn kind_from_str(s: &str) -> Result<ParamKind> {
    match s {
        "weight" => Ok(ParamKind::Weight),
        "bias" => Ok(ParamKind::Bias),
        other => Err(Error::CheckpointCorrupt(format!(
            "unknown parameter kind '{other}'"
        ))),
    }
}

fn param_block(role: &str, set: &ParamSet) -> BlockMeta {
    BlockMeta {
        role: role.to_string(),
        tensors: set
            .entries()
            .iter()
            .map(|e| TensorMeta {
                name: e.name.clone(),
                kind: kind_str(e.kind).to_string(),
                shape: e.value.shape().to_vec(),
            })
            .collect(),
    }
}

/// Velocity buffers reuse the parameter names of the set they shadow.
fn velocity_block(role: &str, set: &ParamSet, vel: &[ArrayD<f64>]) -> BlockMeta {
    BlockMeta {
        role: role.to_string(),
        tensors: set
            .entries()
            .iter()
            .zip(vel.iter())
            .map(|(e, v)| TensorMeta {
                name: e.name.clone(),
                kind: kind_str(e.kind).to_string(),
                shape: v.shape().to_vec(),
            })
            .collect(),
    }
}

fn push_values(payload: &mut Vec<u8>, arrays: &mut dyn Iterator<Item = &ArrayD<f64>>) {
    for a in arrays {
        for v in a.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serialize and atomically write `ckpt` to `path` (tmp file + rename).
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.student_adapt.is_some() != ckpt.velocity_adapt.is_some()
        || ckpt.student_adapt.is_some() != ckpt.teacher.adapt.is_some()
    {
        return Err(Error::invalid(
            "checkpoint adapt blocks must be all present or all absent",
        ));
    }

    let mut blocks = vec![param_block("student_detector", &ckpt.student_detector)];
    if let Some(sa) = &ckpt.student_adapt {
        blocks.push(param_block("student_adapt", sa));
    }
    blocks.push(param_block("teacher_detector", &ckpt.teacher.detector));
    if let Some(ta) = &ckpt.teacher.adapt {
        blocks.push(param_block("teacher_adapt", ta));
    }
    blocks.push(velocity_block(
        "velocity_detector",
        &ckpt.student_detector,
        &ckpt.velocity_detector,
    ));
    if let (Some(sa), Some(va)) = (&ckpt.student_adapt, &ckpt.velocity_adapt) {
        blocks.push(velocity_block("velocity_adapt", sa, va));
    }

    let header = Header {
        config_hash: ckpt.config.content_hash(),
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        history: ckpt.history.clone(),
        blocks,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let mut payload = Vec::new();
    push_values(
        &mut payload,
        &mut ckpt.student_detector.entries().iter().map(|e| &e.value),
    );
    if let Some(sa) = &ckpt.student_adapt {
        push_values(&mut payload, &mut sa.entries().iter().map(|e| &e.value));
    }
    push_values(
        &mut payload,
        &mut ckpt.teacher.detector.entries().iter().map(|e| &e.value),
    );
    if let Some(ta) = &ckpt.teacher.adapt {
        push_values(&mut payload, &mut ta.entries().iter().map(|e| &e.value));
    }
    push_values(&mut payload, &mut ckpt.velocity_detector.iter());
    if let Some(va) = &ckpt.velocity_adapt {
        push_values(&mut payload, &mut va.iter());
    }

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())?;
        f.write_all(&header_json)?;
        f.write_all(&payload)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn take_tensors(
    block: &BlockMeta,
    values: &mut std::iter::Copied<std::slice::Iter<'_, f64>>,
) -> Result<Vec<(String, ParamKind, ArrayD<f64>)>> {
    let mut out = Vec::with_capacity(block.tensors.len());
    for t in &block.tensors {
        let n: usize = t.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        if data.len() != n {
            return Err(Error::CheckpointCorrupt(format!(
                "payload ended inside block '{}', tensor '{}'",
                block.role, t.name
            )));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), data).map_err(|e| {
            Error::CheckpointCorrupt(format!("tensor '{}' has invalid shape: {e}", t.name))
        })?;
        out.push((t.name.clone(), kind_from_str(&t.kind)?, arr));
    }
    Ok(out)
}

fn to_param_set(tensors: Vec<(String, ParamKind, ArrayD<f64>)>) -> ParamSet {
    let mut set = ParamSet::new();
    for (name, kind, value) in tensors {
        set.add(name, kind, value);
    }
    set
}

/// Read a checkpoint. When `expected` is given, its content hash must match
/// the hash stored at save time, else [`Error::CheckpointConfigHash`].
pub fn load_checkpoint(path: &Path, expected: Option<&TrainConfig>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 {
        return Err(Error::CheckpointCorrupt("file shorter than header".into()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointCorrupt("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload_start = 20usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::CheckpointCorrupt("header length exceeds file size".into()))?;
    let header: Header = serde_json::from_slice(&bytes[20..payload_start])
        .map_err(|e| Error::CheckpointCorrupt(format!("header does not parse: {e}")))?;

    if let Some(cfg) = expected {
        if cfg.content_hash() != header.config_hash {
            return Err(Error::CheckpointConfigHash);
        }
    }

    let total_scalars: usize = header
        .blocks
        .iter()
        .flat_map(|b| b.tensors.iter())
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    let payload = &bytes[payload_start..];
    if payload.len() != total_scalars * 8 {
        return Err(Error::CheckpointCorrupt(format!(
            "payload holds {} bytes but manifest expects {}",
            payload.len(),
            total_scalars * 8
        )));
    }
    let floats: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut cursor = floats.iter().copied();

    let mut student_detector = None;
    let mut student_adapt = None;
    let mut teacher_detector = None;
    let mut teacher_adapt = None;
    let mut velocity_detector = None;
    let mut velocity_adapt = None;
    for block in &header.blocks {
        let tensors = take_tensors(block, &mut cursor)?;
        match block.role.as_str() {
            "student_detector" => student_detector = Some(to_param_set(tensors)),
            "student_adapt" => student_adapt = Some(to_param_set(tensors)),
            "teacher_detector" => teacher_detector = Some(to_param_set(tensors)),
            "teacher_adapt" => teacher_adapt = Some(to_param_set(tensors)),
            "velocity_detector" => {
                velocity_detector = Some(tensors.into_iter().map(|(_, _, v)| v).collect())
            }
            "velocity_adapt" => {
                velocity_adapt = Some(tensors.into_iter().map(|(_, _, v)| v).collect())
            }
            other => {
                return Err(Error::CheckpointCorrupt(format!(
                    "unknown block role '{other}'"
                )))
            }
        }
    }

    let student_detector = student_detector
        .ok_or_else(|| Error::CheckpointCorrupt("missing student_detector block".into()))?;
    let teacher_detector = teacher_detector
        .ok_or_else(|| Error::CheckpointCorrupt("missing teacher_detector block".into()))?;
    let velocity_detector = velocity_detector
        .ok_or_else(|| Error::CheckpointCorrupt("missing velocity_detector block".into()))?;
    if student_adapt.is_some() != teacher_adapt.is_some()
        || student_adapt.is_some() != velocity_adapt.is_some()
    {
        return Err(Error::CheckpointCorrupt(
            "adapt blocks must be all present or all absent".into(),
        ));
    }

    Ok(Checkpoint {
        config: header.config,
        epoch: header.epoch,
        history: header.history,
        student_detector,
        student_adapt,
        teacher: TeacherState {
            detector: teacher_detector,
            adapt: teacher_adapt,
        },
        velocity_detector,
        velocity_adapt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::AdaptHeads;
    use crate::detector::DetectorModel;
    use crate::rng::stream_rng;
    use tempfile::TempDir;

    fn desk_checkpoint() -> Checkpoint {
        let cfg = TrainConfig::desk();
        let mut rng = stream_rng(cfg.seed, "init/detector");
        let model = DetectorModel::new(cfg.effective_arch(), &mut rng).unwrap();
        let mut arng = stream_rng(cfg.seed, "init/adapt");
        let heads =
            AdaptHeads::new(cfg.adapt.clone(), cfg.arch.stage_channels[3], &mut arng).unwrap();
        let teacher = TeacherState::from_student(&model.params, Some(&heads.params));
        let vel_det: Vec<ArrayD<f64>> = model
            .params
            .entries()
            .iter()
            .map(|e| ArrayD::from_elem(e.value.raw_dim(), 0.5))
            .collect();
        let vel_adapt: Vec<ArrayD<f64>> = heads
            .params
            .entries()
            .iter()
            .map(|e| ArrayD::zeros(e.value.raw_dim()))
            .collect();
        Checkpoint {
            config: cfg,
            epoch: 2,
            history: vec![EpochStats {
                epoch: 1,
                phase: "burn_in".into(),
                steps: 3,
                mean_total: 4.5,
                mean_detection: 4.0,
            }],
            student_detector: model.params,
            student_adapt: Some(heads.params),
            teacher,
            velocity_detector: vel_det,
            velocity_adapt: Some(vel_adapt),
        }
    }

    fn sets_equal(a: &ParamSet, b: &ParamSet) -> bool {
        a.same_layout(b)
            && a.entries()
                .iter()
                .zip(b.entries())
                .all(|(x, y)| x.value == y.value)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("model.ckpt");
        let ckpt = desk_checkpoint();
        save_checkpoint(&p, &ckpt).unwrap();
        let back = load_checkpoint(&p, Some(&ckpt.config)).unwrap();

        assert_eq!(back.epoch, 2);
        assert_eq!(back.history, ckpt.history);
        assert_eq!(back.config, ckpt.config);
        assert!(sets_equal(&back.student_detector, &ckpt.student_detector));
        assert!(sets_equal(
            back.student_adapt.as_ref().unwrap(),
            ckpt.student_adapt.as_ref().unwrap()
        ));
        assert!(sets_equal(&back.teacher.detector, &ckpt.teacher.detector));
        assert_eq!(back.velocity_detector, ckpt.velocity_detector);
        assert_eq!(back.velocity_adapt, ckpt.velocity_adapt);
    }

    #[test]
    fn config_hash_mismatch_is_its_own_error() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("model.ckpt");
        let ckpt = desk_checkpoint();
        save_checkpoint(&p, &ckpt).unwrap();

        let mut other = ckpt.config.clone();
        other.learning_rate = 5e-4;
        match load_checkpoint(&p, Some(&other)) {
            Err(Error::CheckpointConfigHash) => {}
            other => panic!("expected CheckpointConfigHash, got {other:?}"),
        }
        // loading without an expectation still works
        assert!(load_checkpoint(&p, None).is_ok());
    }

    #[test]
    fn bad_magic_and_bad_version_are_distinguished() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("model.ckpt");
        let ckpt = desk_checkpoint();
        save_checkpoint(&p, &ckpt).unwrap();

        let pristine = std::fs::read(&p).unwrap();

        let mut bad_magic = pristine.clone();
        bad_magic[0] = b'X';
        std::fs::write(&p, &bad_magic).unwrap();
        match load_checkpoint(&p, None) {
            Err(Error::CheckpointCorrupt(_)) => {}
            other => panic!("expected CheckpointCorrupt, got {other:?}"),
        }

        let mut bad_version = pristine.clone();
        bad_version[8..12].copy_from_slice(&9u32.to_le_bytes());
        std::fs::write(&p, &bad_version).unwrap();
        match load_checkpoint(&p, None) {
            Err(Error::CheckpointVersion { found: 9, expected: 1 }) => {}
            other => panic!("expected CheckpointVersion, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("model.ckpt");
        let ckpt = desk_checkpoint();
        save_checkpoint(&p, &ckpt).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 16]).unwrap();
        match load_checkpoint(&p, None) {
            Err(Error::CheckpointCorrupt(msg)) => {
                assert!(msg.contains("payload"), "unexpected message: {msg}")
            }
            other => panic!("expected CheckpointCorrupt, got {other:?}"),
        }
    }

    #[test]
    fn loaded_params_rebuild_a_working_model() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("model.ckpt");
        let ckpt = desk_checkpoint();
        save_checkpoint(&p, &ckpt).unwrap();
        let back = load_checkpoint(&p, None).unwrap();
        // from_params revalidates layout against the architecture
        let model =
            DetectorModel::from_params(back.config.effective_arch(), back.student_detector)
                .unwrap();
        assert_eq!(model.params.num_scalars(), ckpt.student_detector.num_scalars());
    }
}
