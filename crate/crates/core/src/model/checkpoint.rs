//! Self-describing checkpoint container.
//!
//! Layout: magic `BEC1`, u32 format version, u32 metadata length, metadata as
//! JSON key-value text (configs plus progress counters — together with the
//! seed this pins the derived RNG streams), u32 tensor count, then each
//! tensor as `(u16 name length, name, u8 rank, u64 dims, raw little-endian
//! f32 data)`. Parameters come first in canonical order, then the Adam first
//! and second moments as `adam.m.*` / `adam.v.*`.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::model::train::{AdamState, TrainError, Trainer};
use crate::model::transformer::{init_params, TransformerModel};
use crate::model::{ModelSpec, TrainConfig};
use crate::num::linalg::Matrix;

const MAGIC: &[u8; 4] = b"BEC1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    spec: ModelSpec,
    train: TrainConfig,
    epochs_done: usize,
    adam_step: u64,
    zero_rows_seen: u64,
    version: String,
}

/// In-memory checkpoint contents.
pub struct Checkpoint {
    pub trainer: Trainer,
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Matrix<f32>) -> std::io::Result<()> {
    let name_bytes = name.as_bytes();
    w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&[2u8])?;
    w.write_all(&(t.rows() as u64).to_le_bytes())?;
    w.write_all(&(t.cols() as u64).to_le_bytes())?;
    for x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_vec<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Matrix<f32>), TrainError> {
    let mut len2 = [0u8; 2];
    r.read_exact(&mut len2)?;
    let name_len = u16::from_le_bytes(len2) as usize;
    let name = String::from_utf8(read_exact_vec(r, name_len)?)
        .map_err(|_| TrainError::Format("tensor name is not UTF-8".into()))?;
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    if rank[0] != 2 {
        return Err(TrainError::Format(format!(
            "tensor {name}: unsupported rank {}",
            rank[0]
        )));
    }
    let mut dim = [0u8; 8];
    r.read_exact(&mut dim)?;
    let rows = u64::from_le_bytes(dim) as usize;
    r.read_exact(&mut dim)?;
    let cols = u64::from_le_bytes(dim) as usize;
    let raw = read_exact_vec(r, rows * cols * 4)?;
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let m = Matrix::from_vec(rows, cols, data)
        .map_err(|e| TrainError::Format(format!("tensor {name}: {e}")))?;
    Ok((name, m))
}

/// Serialize the full training state.
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<(), TrainError> {
    let meta = CheckpointMeta {
        spec: trainer.spec.clone(),
        train: trainer.cfg.clone(),
        epochs_done: trainer.epochs_done,
        adam_step: trainer.adam.step,
        zero_rows_seen: trainer.zero_rows_seen,
        version: crate::VERSION.to_string(),
    };
    let meta_json = serde_json::to_vec(&meta).expect("meta serializes");

    let mut out: Vec<u8> = Vec::new();
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(meta_json.len() as u32).to_le_bytes())?;
    out.write_all(&meta_json)?;

    let named = trainer.model.params.named_tensors();
    let n_tensors = (named.len() * 3) as u32;
    out.write_all(&n_tensors.to_le_bytes())?;
    for (name, t) in &named {
        write_tensor(&mut out, name, t)?;
    }
    for ((name, _), m) in named.iter().zip(&trainer.adam.m) {
        write_tensor(&mut out, &format!("adam.m.{name}"), m)?;
    }
    for ((name, _), v) in named.iter().zip(&trainer.adam.v) {
        write_tensor(&mut out, &format!("adam.v.{name}"), v)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Restore a trainer; continuing from it is bit-identical to a run that was
/// never interrupted.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TrainError::Format("bad magic".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(TrainError::Format(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    r.read_exact(&mut word)?;
    let meta_len = u32::from_le_bytes(word) as usize;
    let meta: CheckpointMeta = serde_json::from_slice(&read_exact_vec(&mut r, meta_len)?)
        .map_err(|e| TrainError::Format(format!("metadata: {e}")))?;
    r.read_exact(&mut word)?;
    let n_tensors = u32::from_le_bytes(word) as usize;

    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        tensors.push(read_tensor(&mut r)?);
    }
    if tensors.len() % 3 != 0 {
        return Err(TrainError::Format("tensor count not divisible by 3".into()));
    }
    let n_params = tensors.len() / 3;

    // rebuild parameters by replacing a fresh skeleton in canonical order
    let mut params = init_params::<f32>(
        &meta.spec.model,
        &crate::num::rng::RngStream::new(0, 0),
    );
    if params.tensor_count() != n_params {
        return Err(TrainError::Format(format!(
            "{n_params} parameter tensors, model wants {}",
            params.tensor_count()
        )));
    }
    let mut names = Vec::new();
    params.visit(&mut |name, _| names.push(name));
    let mut idx = 0usize;
    let mut rebuild_err = None;
    params.visit_mut(&mut |slot| {
        let (name, tensor) = &tensors[idx];
        if name != &names[idx] {
            rebuild_err = Some(format!("tensor {idx}: {name}, expected {}", names[idx]));
        }
        if tensor.rows() != slot.rows() || tensor.cols() != slot.cols() {
            rebuild_err = Some(format!("tensor {name}: stored shape differs from config"));
        }
        *slot = Arc::new(tensor.clone());
        idx += 1;
    });
    if let Some(e) = rebuild_err {
        return Err(TrainError::Format(e));
    }

    let expect_moment = |offset: usize, prefix: &str| -> Result<Vec<Matrix<f32>>, TrainError> {
        let mut out = Vec::with_capacity(n_params);
        for i in 0..n_params {
            let (name, tensor) = &tensors[offset + i];
            let expected = format!("{prefix}.{}", names[i]);
            if name != &expected {
                return Err(TrainError::Format(format!(
                    "tensor {name}, expected {expected}"
                )));
            }
            out.push(tensor.clone());
        }
        Ok(out)
    };
    let m = expect_moment(n_params, "adam.m")?;
    let v = expect_moment(2 * n_params, "adam.v")?;

    let model = TransformerModel::new(meta.spec.model, params)
        .map_err(|e| TrainError::Format(e.to_string()))?;
    Ok(Checkpoint {
        trainer: Trainer {
            spec: meta.spec,
            cfg: meta.train,
            model,
            adam: AdamState {
                m,
                v,
                step: meta.adam_step,
            },
            epochs_done: meta.epochs_done,
            zero_rows_seen: meta.zero_rows_seen,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{AwgnConfig, ChannelConfig};
    use crate::corpus::{build_vocab, load_pairs_from_str, Direction, PairFilters};
    use crate::model::transformer::ModelConfig;

    fn param_bits(trainer: &Trainer) -> Vec<u32> {
        let mut out = Vec::new();
        trainer.model.params.visit(&mut |_, t| {
            out.extend(t.data().iter().map(|x| x.to_bits()));
        });
        out
    }

    #[test]
    fn save_load_resume_is_bitwise_identical_to_straight_through() {
        let text = "i am happy .\tje suis heureux .\nyou are sad .\ttu es triste .\n\
                    we are lost .\tnous sommes perdus .\n";
        let pairs = load_pairs_from_str(text, &PairFilters::default()).pairs;
        let (sv, tv) = build_vocab(&pairs, Direction::FrenchToEnglish, 100).unwrap();
        let spec = ModelSpec {
            model: ModelConfig {
                d_model: 16,
                n_heads: 2,
                n_layers: 1,
                d_ffn: 32,
                max_len: 12,
                src_vocab: sv.len(),
                tgt_vocab: tv.len(),
            },
            channel: Some(ChannelConfig::random_erasure(0.7, true).unwrap()),
            awgn: AwgnConfig::new(0.0, 0.1).unwrap(),
        };
        let cfg = TrainConfig {
            batch_size: 2,
            warmup_steps: 20,
            seed: 33,
            ..TrainConfig::default()
        };

        let mut straight = Trainer::new(spec.clone(), cfg.clone()).unwrap();
        straight
            .run_epoch(&pairs, Direction::FrenchToEnglish, &sv, &tv)
            .unwrap();
        straight
            .run_epoch(&pairs, Direction::FrenchToEnglish, &sv, &tv)
            .unwrap();

        let dir = std::env::temp_dir().join(format!("ckpt_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("mid.ckpt");

        let mut resumed = Trainer::new(spec, cfg).unwrap();
        resumed
            .run_epoch(&pairs, Direction::FrenchToEnglish, &sv, &tv)
            .unwrap();
        save_checkpoint(&resumed, &path).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap().trainer;
        resumed
            .run_epoch(&pairs, Direction::FrenchToEnglish, &sv, &tv)
            .unwrap();

        assert_eq!(param_bits(&straight), param_bits(&resumed));
        assert_eq!(straight.adam.step, resumed.adam.step);
        assert_eq!(straight.epochs_done, resumed.epochs_done);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let pairs = load_pairs_from_str(
            "i am happy .\tje suis heureux .\n",
            &PairFilters::default(),
        )
        .pairs;
        let (sv, tv) = build_vocab(&pairs, Direction::FrenchToEnglish, 100).unwrap();
        let spec = ModelSpec {
            model: ModelConfig {
                d_model: 8,
                n_heads: 2,
                n_layers: 1,
                d_ffn: 16,
                max_len: 10,
                src_vocab: sv.len(),
                tgt_vocab: tv.len(),
            },
            channel: None,
            awgn: AwgnConfig::off(),
        };
        let trainer = Trainer::new(spec, TrainConfig::default()).unwrap();
        let dir = std::env::temp_dir().join(format!("ckpt_rt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.ckpt");
        let p2 = dir.join("b.ckpt");
        save_checkpoint(&trainer, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap().trainer;
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = std::env::temp_dir().join(format!("ckpt_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TrainError::Format(_)) | Err(TrainError::Io(_))
        ));
        std::fs::remove_dir_all(&dir).ok();
    }
}
