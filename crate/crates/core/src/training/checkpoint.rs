//! Checkpointing: a versioned binary container of named f64 tensors with a
//! JSON sidecar holding the configuration. Round-trips are bit-exact.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::rng::seeded_rng;
use crate::numerics::Mat;
use crate::training::TrainConfig;

const MAGIC: &[u8; 4] = b"MGCN";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
}

fn sidecar_path(bin_path: &Path) -> PathBuf {
    bin_path.with_extension("json")
}

/// Write `<stem>.bin` (tensors) and `<stem>.json` (configs).
pub fn save_checkpoint(
    bin_path: &Path,
    params: &ModelParams,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Result<()> {
    let file = std::fs::File::create(bin_path).map_err(|e| Error::io(bin_path, e))?;
    let mut w = BufWriter::new(file);
    let mats = params.named_mats();
    let mut emit = || -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(mats.len() as u32).to_le_bytes())?;
        for (name, m) in &mats {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(m.rows() as u32).to_le_bytes())?;
            w.write_all(&(m.cols() as u32).to_le_bytes())?;
            for v in m.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(bin_path, e))?;

    let sidecar = Sidecar {
        version: VERSION,
        model: model.clone(),
        train: train.clone(),
    };
    let json_path = sidecar_path(bin_path);
    let text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::validation(format!("sidecar serialization: {e}")))?;
    std::fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(bin_path: &Path) -> Result<(ModelParams, ModelConfig, TrainConfig)> {
    let json_path = sidecar_path(bin_path);
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)
        .map_err(|e| Error::validation(format!("sidecar {}: {e}", json_path.display())))?;
    if sidecar.version != VERSION {
        return Err(Error::validation(format!(
            "unsupported checkpoint version {}",
            sidecar.version
        )));
    }

    let file = std::fs::File::open(bin_path).map_err(|e| Error::io(bin_path, e))?;
    let mut r = BufReader::new(file);
    let mut read_exact = |buf: &mut [u8]| -> Result<()> {
        r.read_exact(buf).map_err(|e| Error::io(bin_path, e))
    };

    let mut magic = [0u8; 4];
    read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::validation("not a checkpoint file (bad magic)"));
    }
    let mut u32_buf = [0u8; 4];
    read_exact(&mut u32_buf)?;
    if u32::from_le_bytes(u32_buf) != VERSION {
        return Err(Error::validation("checkpoint version mismatch"));
    }
    read_exact(&mut u32_buf)?;
    let count = u32::from_le_bytes(u32_buf) as usize;

    let mut tensors: Vec<(String, Mat)> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u16_buf = [0u8; 2];
        read_exact(&mut u16_buf)?;
        let name_len = u16::from_le_bytes(u16_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::validation("checkpoint tensor name is not UTF-8"))?;
        read_exact(&mut u32_buf)?;
        let rows = u32::from_le_bytes(u32_buf) as usize;
        read_exact(&mut u32_buf)?;
        let cols = u32::from_le_bytes(u32_buf) as usize;
        let mut data = vec![0.0f64; rows * cols];
        let mut f64_buf = [0u8; 8];
        for v in &mut data {
            read_exact(&mut f64_buf)?;
            *v = f64::from_le_bytes(f64_buf);
        }
        tensors.push((name, Mat::from_vec(rows, cols, data)?));
    }

    // build a skeleton with the right shapes, then fill by name
    let mut params = ModelParams::init(&sidecar.model, &mut seeded_rng(0))?;
    let mut by_name: std::collections::HashMap<String, Mat> = tensors.into_iter().collect();
    for (name, target) in params.named_mats_mut() {
        let mat = by_name.remove(&name).ok_or_else(|| {
            Error::validation(format!("checkpoint is missing tensor `{name}`"))
        })?;
        if (target.rows(), target.cols()) != (mat.rows(), mat.cols()) {
            return Err(Error::validation(format!(
                "checkpoint tensor `{name}` is {}x{}, model expects {}x{}",
                mat.rows(),
                mat.cols(),
                target.rows(),
                target.cols()
            )));
        }
        *target = mat;
    }
    if let Some(name) = by_name.keys().next() {
        return Err(Error::validation(format!(
            "checkpoint tensor `{name}` does not match any model parameter"
        )));
    }
    Ok((params, sidecar.model, sidecar.train))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::MatchKind;
    use crate::model::Activation;

    fn configs() -> (ModelConfig, TrainConfig) {
        let model = ModelConfig {
            n_roi: 5,
            feature_dim: 7,
            t: 3,
            d: 4,
            order: 2,
            hops: 2,
            h_head: 6,
            matching: MatchKind::Bilinear,
            activation: Activation::Relu,
            mask_padding: false,
            ablate_memory: false,
            tie_hop_maps: false,
            normalize_connectivity: false,
        };
        let mut train = TrainConfig::default();
        train.d = 4;
        train.f_out = 4;
        (model, train)
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (model, train) = configs();
        let params = ModelParams::init(&model, &mut seeded_rng(99)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("ckpt.bin");
        save_checkpoint(&bin, &params, &model, &train).unwrap();
        let (loaded, loaded_model, _) = load_checkpoint(&bin).unwrap();
        assert_eq!(loaded_model, model);
        let a = params.to_flat();
        let b = loaded.to_flat();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn missing_sidecar_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("ckpt.bin");
        std::fs::write(&bin, b"MGCN").unwrap();
        assert!(matches!(load_checkpoint(&bin), Err(Error::Io { .. })));
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let (model, train) = configs();
        let params = ModelParams::init(&model, &mut seeded_rng(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("ckpt.bin");
        save_checkpoint(&bin, &params, &model, &train).unwrap();
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[0] = b'X';
        std::fs::write(&bin, bytes).unwrap();
        assert!(load_checkpoint(&bin).is_err());
    }
}
