//! Self-describing binary model checkpoints.
//!
//! Layout (little-endian): magic `GAE1`, format version, training seed, the
//! encoder configuration, feature standardization statistics, every layer's
//! weight matrices and batch-norm state, then the decoder. Loading restores
//! inference bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::decoder::DecoderParams;
use crate::encoder::{EncoderConfig, GcnLayer};
use crate::numeric::{BatchNormState, Matrix};
use crate::trainer::{GaeModel, StandardizeStats};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GAE1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Upper bound on any serialized dimension; larger values mean corruption.
const MAX_DIM: u32 = 1 << 24;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {CHECKPOINT_VERSION}")]
    VersionMismatch { found: u32 },
    #[error("inconsistent checkpoint shapes: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint file ends prematurely")]
    TruncatedFile,
    #[error(transparent)]
    Io(std::io::Error),
}

impl From<std::io::Error> for CheckpointError {
    fn from(err: std::io::Error) -> Self {
        if err.kind() == ErrorKind::UnexpectedEof {
            CheckpointError::TruncatedFile
        } else {
            CheckpointError::Io(err)
        }
    }
}

struct Writer<W: Write> {
    sink: W,
}

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> Result<(), CheckpointError> {
        self.sink.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    fn u64(&mut self, v: u64) -> Result<(), CheckpointError> {
        self.sink.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    fn f64(&mut self, v: f64) -> Result<(), CheckpointError> {
        self.sink.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    fn f64_slice(&mut self, vs: &[f64]) -> Result<(), CheckpointError> {
        for v in vs {
            self.f64(*v)?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    source: R,
}

impl<R: Read> Reader<R> {
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let mut buf = [0u8; 4];
        self.source.read_exact(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let mut buf = [0u8; 8];
        self.source.read_exact(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        let mut buf = [0u8; 8];
        self.source.read_exact(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    }

    fn f64_vec(&mut self, len: usize) -> Result<Vec<f64>, CheckpointError> {
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    fn dim(&mut self, what: &str) -> Result<usize, CheckpointError> {
        let v = self.u32()?;
        if v == 0 || v > MAX_DIM {
            return Err(CheckpointError::ShapeMismatch(format!(
                "{what} dimension {v} out of range"
            )));
        }
        Ok(v as usize)
    }
}

/// Serializes a model.
pub fn save_checkpoint(model: &GaeModel, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let file = File::create(path)?;
    let mut w = Writer {
        sink: BufWriter::new(file),
    };
    w.sink.write_all(&CHECKPOINT_MAGIC)?;
    w.u32(CHECKPOINT_VERSION)?;
    w.u64(model.config.seed)?;
    w.u32(model.config.num_layers as u32)?;
    w.u32(crate::encoder::ADJACENCY_STEPS as u32)?;
    w.u32(model.config.input_dim as u32)?;
    w.u32(model.config.hidden_width as u32)?;
    w.f64(model.config.input_dropout)?;
    w.f64_slice(&model.stats.mean)?;
    w.f64_slice(&model.stats.std)?;
    for layer in &model.layers {
        w.u32(layer.input_width() as u32)?;
        w.u32(layer.output_width() as u32)?;
        w.f64_slice(layer.theta0.as_slice())?;
        w.f64_slice(layer.theta1.as_slice())?;
        w.f64_slice(&layer.bn.gamma)?;
        w.f64_slice(&layer.bn.beta)?;
        w.f64_slice(&layer.bn.running_mean)?;
        w.f64_slice(&layer.bn.running_var)?;
        w.f64(layer.bn.momentum)?;
        w.f64(layer.bn.eps)?;
    }
    w.u32(model.decoder.width() as u32)?;
    w.f64_slice(&model.decoder.omega)?;
    w.f64(model.decoder.bias)?;
    w.sink.flush()?;
    Ok(())
}

/// Restores a model saved by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<GaeModel, CheckpointError> {
    let file = File::open(path)?;
    let mut r = Reader {
        source: BufReader::new(file),
    };
    let mut magic = [0u8; 4];
    r.source.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let seed = r.u64()?;
    let num_layers = r.dim("layer count")?;
    let steps = r.u32()? as usize;
    if steps != crate::encoder::ADJACENCY_STEPS {
        return Err(CheckpointError::ShapeMismatch(format!(
            "adjacency steps {steps} unsupported"
        )));
    }
    let input_dim = r.dim("input")?;
    let hidden_width = r.dim("hidden")?;
    let input_dropout = r.f64()?;
    let mean = r.f64_vec(input_dim)?;
    let std = r.f64_vec(input_dim)?;

    let config = EncoderConfig {
        num_layers,
        hidden_width,
        input_dim,
        input_dropout,
        seed,
    };
    let mut layers = Vec::with_capacity(num_layers);
    for l in 0..num_layers {
        let in_dim = r.dim("layer input")?;
        let out_dim = r.dim("layer output")?;
        let (expect_in, expect_out) = config.layer_dims(l);
        if in_dim != expect_in || out_dim != expect_out {
            return Err(CheckpointError::ShapeMismatch(format!(
                "layer {l} is {in_dim}x{out_dim}, expected {expect_in}x{expect_out}"
            )));
        }
        let theta0 = Matrix::from_vec(in_dim, out_dim, r.f64_vec(in_dim * out_dim)?);
        let theta1 = Matrix::from_vec(in_dim, out_dim, r.f64_vec(in_dim * out_dim)?);
        let gamma = r.f64_vec(out_dim)?;
        let beta = r.f64_vec(out_dim)?;
        let running_mean = r.f64_vec(out_dim)?;
        let running_var = r.f64_vec(out_dim)?;
        let momentum = r.f64()?;
        let eps = r.f64()?;
        layers.push(GcnLayer {
            theta0,
            theta1,
            bn: BatchNormState {
                gamma,
                beta,
                running_mean,
                running_var,
                momentum,
                eps,
            },
            input_dropout_rate: input_dropout,
        });
    }
    let omega_len = r.dim("decoder width")?;
    if omega_len != hidden_width {
        return Err(CheckpointError::ShapeMismatch(format!(
            "decoder width {omega_len} does not match hidden width {hidden_width}"
        )));
    }
    let omega = r.f64_vec(omega_len)?;
    let bias = r.f64()?;

    let mut trailing = [0u8; 1];
    match r.source.read(&mut trailing)? {
        0 => {}
        _ => {
            return Err(CheckpointError::ShapeMismatch(
                "trailing bytes after decoder".to_string(),
            ))
        }
    }

    Ok(GaeModel {
        config,
        layers,
        decoder: DecoderParams { omega, bias },
        stats: StandardizeStats { mean, std },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::GaeModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::fs;
    use tempfile::tempdir;

    fn small_model(seed: u64) -> GaeModel {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let config = EncoderConfig {
            num_layers: 2,
            hidden_width: 5,
            input_dim: 3,
            input_dropout: 0.5,
            seed,
        };
        let stats = StandardizeStats {
            mean: vec![0.1, -0.4, 2.0],
            std: vec![1.0, 0.5, 3.0],
        };
        GaeModel::init(config, stats, &mut rng)
    }

    #[test]
    fn round_trip_restores_every_parameter() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = small_model(42);
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(model, loaded);
    }

    #[test]
    fn truncated_file_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&small_model(7), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&cut),
            Err(CheckpointError::TruncatedFile)
        ));
    }

    #[test]
    fn wrong_magic_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOPE00000000000000000000").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn wrong_version_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&small_model(7), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::VersionMismatch { found: 99 })
        ));
    }

    #[test]
    fn trailing_bytes_are_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&small_model(7), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.push(0);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::ShapeMismatch(_))
        ));
    }
}
