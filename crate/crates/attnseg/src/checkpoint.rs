//! Checkpoint persistence: a little-endian binary blob for the numeric state
//! (parameters, gate logits, optimizer moments) plus a JSON sidecar with the
//! run configuration and bookkeeping. The sidecar lives next to the blob with
//! the extension swapped to `.json`.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gating::{prune_heads, GateParams};
use crate::model::params::VitParams;
use crate::real::Real;
use crate::rng::stream_rng;
use crate::train::optimizer::AdamW;

const MAGIC: &[u8; 4] = b"ATSG";
const VERSION: u32 = 1;

/// Full mutable state of a training run.
#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub config: RunConfig,
    pub params: VitParams<F>,
    pub gates: GateParams<F>,
    pub opt: AdamW<F>,
    pub epochs_completed: usize,
    pub global_step: u64,
    /// Metrics from the most recent evaluation, if any.
    pub last_metrics: Option<serde_json::Value>,
}

/// Human-readable sidecar. Numeric state lives only in the blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    config: RunConfig,
    epochs_completed: usize,
    global_step: u64,
    /// Heads whose keep probability clears the prune threshold, per layer.
    kept_heads: Vec<Vec<bool>>,
    last_metrics: Option<serde_json::Value>,
}

fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

fn dtype_tag<F>() -> u8 {
    std::mem::size_of::<F>() as u8
}

fn push_scalar<F: Real>(buf: &mut Vec<u8>, v: F) {
    match dtype_tag::<F>() {
        4 => buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
        8 => buf.extend_from_slice(&v.as_f64().to_le_bytes()),
        other => unreachable!("unsupported scalar width {other}"),
    }
}

struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::checkpoint(self.path, "truncated checkpoint blob"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn scalars<F: Real>(&mut self, n: usize) -> Result<Vec<F>> {
        let width = dtype_tag::<F>() as usize;
        let bytes = self.take(n * width)?;
        Ok(bytes
            .chunks_exact(width)
            .map(|c| match width {
                4 => F::of(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                8 => F::of(f64::from_le_bytes(c.try_into().unwrap())),
                _ => unreachable!(),
            })
            .collect())
    }
}

impl<F: Real> Checkpoint<F> {
    /// Writes the blob at `path` and the sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let flat = self.params.flatten();
        let (rows, cols) = self.gates.log_alpha.dim();
        let mut buf = Vec::with_capacity(
            64 + (flat.len() + rows * cols + 2 * self.opt.m.len()) * dtype_tag::<F>() as usize,
        );
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(dtype_tag::<F>());
        buf.extend_from_slice(&(flat.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(rows as u64).to_le_bytes());
        buf.extend_from_slice(&(cols as u64).to_le_bytes());
        buf.extend_from_slice(&self.opt.step.to_le_bytes());
        buf.extend_from_slice(&self.global_step.to_le_bytes());
        buf.extend_from_slice(&(self.epochs_completed as u64).to_le_bytes());
        for &v in &flat {
            push_scalar(&mut buf, v);
        }
        for &v in self.gates.log_alpha.iter() {
            push_scalar(&mut buf, v);
        }
        for &v in &self.opt.m {
            push_scalar(&mut buf, v);
        }
        for &v in &self.opt.v {
            push_scalar(&mut buf, v);
        }
        std::fs::write(path, &buf).map_err(|e| Error::io(path, e))?;

        let kept = prune_heads(&self.gates, self.config.gates.prune_threshold);
        let sidecar = Sidecar {
            config: self.config.clone(),
            epochs_completed: self.epochs_completed,
            global_step: self.global_step,
            kept_heads: kept
                .outer_iter()
                .map(|row| row.iter().map(|&k| k == 1).collect())
                .collect(),
            last_metrics: self.last_metrics.clone(),
        };
        crate::data::write_json(&sidecar_path(path), &sidecar)
    }

    /// Loads a checkpoint written by `save` with the same scalar type.
    pub fn load(path: &Path) -> Result<Self> {
        let sidecar: Sidecar = crate::data::read_json(&sidecar_path(path))?;
        sidecar.config.validate()?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader { path, buf: &bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::checkpoint(path, "bad magic; not a checkpoint blob"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::checkpoint(path, format!("unsupported version {version}")));
        }
        let dtype = r.u8()?;
        if dtype != dtype_tag::<F>() {
            return Err(Error::checkpoint(
                path,
                format!(
                    "scalar width mismatch: blob has {dtype}-byte floats, expected {}",
                    dtype_tag::<F>()
                ),
            ));
        }
        let num_params = r.u64()? as usize;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let adam_step = r.u64()?;
        let global_step = r.u64()?;
        let epochs_completed = r.u64()? as usize;

        let cfg = &sidecar.config;
        // Shapes are implied by the config; an init-then-overwrite keeps the
        // shape logic in one place.
        let mut params = VitParams::<F>::init(&cfg.model, &mut stream_rng(0, "ckpt-load", 0));
        if num_params != params.num_params() {
            return Err(Error::checkpoint(
                path,
                format!(
                    "blob has {num_params} parameters but the config implies {}",
                    params.num_params()
                ),
            ));
        }
        if rows != cfg.model.num_layers || cols != cfg.model.num_heads {
            return Err(Error::checkpoint(
                path,
                format!(
                    "blob gate shape ({rows}, {cols}) does not match config ({}, {})",
                    cfg.model.num_layers, cfg.model.num_heads
                ),
            ));
        }
        let flat = r.scalars::<F>(num_params)?;
        params.assign_flat(&flat);
        let mut gates = GateParams::<F>::new(rows, cols, &cfg.gates);
        let alpha = r.scalars::<F>(rows * cols)?;
        gates.log_alpha = Array2::from_shape_vec((rows, cols), alpha).unwrap();
        let state_len = num_params + rows * cols;
        let mut opt = AdamW::<F>::new(state_len, cfg.train.weight_decay);
        opt.m = r.scalars::<F>(state_len)?;
        opt.v = r.scalars::<F>(state_len)?;
        opt.step = adam_step;
        if r.pos != bytes.len() {
            return Err(Error::checkpoint(path, "trailing bytes after checkpoint state"));
        }
        Ok(Checkpoint {
            config: sidecar.config,
            params,
            gates,
            opt,
            epochs_completed,
            global_step,
            last_metrics: sidecar.last_metrics,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use tempfile::tempdir;

    fn small_run_config() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                image_size: 16,
                patch_size: 8,
                num_classes: 2,
                embed_dim: 8,
                num_layers: 2,
                num_heads: 2,
                ..ModelConfig::default()
            },
            ..RunConfig::default()
        }
    }

    fn make_checkpoint(seed: u64) -> Checkpoint<f32> {
        let config = small_run_config();
        let params = VitParams::<f32>::init(&config.model, &mut stream_rng(seed, "init", 0));
        let mut gates =
            GateParams::<f32>::new(config.model.num_layers, config.model.num_heads, &config.gates);
        gates.log_alpha[(1, 0)] = -6.0;
        let state_len = params.num_params() + 4;
        let mut opt = AdamW::<f32>::new(state_len, config.train.weight_decay);
        opt.m[7] = 0.25;
        opt.v[7] = 0.125;
        opt.step = 42;
        Checkpoint {
            config,
            params,
            gates,
            opt,
            epochs_completed: 3,
            global_step: 99,
            last_metrics: Some(serde_json::json!({"f1": 0.5})),
        }
    }

    #[test]
    fn roundtrip_preserves_all_state_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let ckpt = make_checkpoint(7);
        ckpt.save(&path).unwrap();
        assert!(path.with_extension("json").exists());

        let loaded = Checkpoint::<f32>::load(&path).unwrap();
        assert_eq!(loaded.params.flatten(), ckpt.params.flatten());
        assert_eq!(loaded.gates.log_alpha, ckpt.gates.log_alpha);
        assert_eq!(loaded.opt.m, ckpt.opt.m);
        assert_eq!(loaded.opt.v, ckpt.opt.v);
        assert_eq!(loaded.opt.step, 42);
        assert_eq!(loaded.epochs_completed, 3);
        assert_eq!(loaded.global_step, 99);
        assert_eq!(loaded.last_metrics, ckpt.last_metrics);
        assert_eq!(loaded.config.model.embed_dim, 8);
    }

    #[test]
    fn f64_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let config = small_run_config();
        let params = VitParams::<f64>::init(&config.model, &mut stream_rng(11, "init", 0));
        let gates =
            GateParams::<f64>::new(config.model.num_layers, config.model.num_heads, &config.gates);
        let opt = AdamW::<f64>::new(params.num_params() + 4, 0.0);
        let ckpt = Checkpoint {
            config,
            params,
            gates,
            opt,
            epochs_completed: 0,
            global_step: 0,
            last_metrics: None,
        };
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::<f64>::load(&path).unwrap();
        assert_eq!(loaded.params.flatten(), ckpt.params.flatten());
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        make_checkpoint(7).save(&path).unwrap();
        let err = Checkpoint::<f64>::load(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }), "got {err:?}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn corrupted_magic_and_truncation_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        make_checkpoint(7).save(&path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(Checkpoint::<f32>::load(&path).is_err());

        bytes[0] = b'A';
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, &bytes).unwrap();
        assert!(Checkpoint::<f32>::load(&path).is_err());
    }

    #[test]
    fn sidecar_records_kept_heads_from_gate_logits() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let ckpt = make_checkpoint(7);
        // log_alpha[(1,0)] = -6 gives keep probability sigmoid(-4.4) < 0.05.
        ckpt.save(&path).unwrap();
        let sidecar: Sidecar = crate::data::read_json(&path.with_extension("json")).unwrap();
        assert_eq!(sidecar.kept_heads.len(), 2);
        assert!(sidecar.kept_heads[0].iter().all(|&k| k));
        assert!(!sidecar.kept_heads[1][0]);
        assert!(sidecar.kept_heads[1][1]);
    }
}
