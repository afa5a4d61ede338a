//! Versioned binary checkpoints and the accompanying model card.
//!
//! Layout (little-endian): magic `RDCK`, `u32` version, `u32` header length,
//! JSON header, `u32` block count, then per block `u16` name length, name,
//! `u32` rows, `u32` cols and column-major `f64` data. A SHA-256 of all
//! preceding bytes closes the file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::denoiser::{Denoiser, Normalizer};
use super::params::ParamSet;
use super::schedule::NoiseSchedule;
use super::train::{Policy, TrainConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RDCK";
pub const VERSION: u32 = 1;
const BETAS: &str = "schedule.betas";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainInfo {
    pub iterations: usize,
    pub final_loss: f64,
    pub dataset_hash: Option<String>,
    pub n_train: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    normalizer: Normalizer,
    info: TrainInfo,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub normalizer: Normalizer,
    pub info: TrainInfo,
    pub schedule: NoiseSchedule,
    /// Weights used for sampling.
    pub weights: ParamSet,
}

impl Checkpoint {
    pub fn from_policy(policy: &Policy, info: TrainInfo) -> Self {
        Self {
            config: policy.config.clone(),
            normalizer: policy.normalizer.clone(),
            info,
            schedule: policy.schedule.clone(),
            weights: policy.net.params.clone(),
        }
    }

    pub fn policy(&self) -> Result<Policy> {
        Ok(Policy {
            net: Denoiser::with_params(self.config.denoiser.clone(), &self.schedule, &self.weights)?,
            schedule: self.schedule.clone(),
            normalizer: self.normalizer.clone(),
            config: self.config.clone(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            normalizer: self.normalizer.clone(),
            info: self.info.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let betas = DMatrix::from_row_slice(1, self.schedule.betas.len(), &self.schedule.betas);
        let blocks = std::iter::once((BETAS, &betas)).chain(self.weights.iter());
        out.extend_from_slice(&(self.weights.len() as u32 + 1).to_le_bytes());
        for (name, m) in blocks {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
            for x in m.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |offset: usize, reason: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            reason,
        };
        if bytes.len() < 12 + 32 {
            return Err(fail(0, "file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(fail(body.len(), "checksum mismatch".into()));
        }
        let mut r = Cursor { bytes: body, pos: 0 };
        if r.take(4).ok_or_else(|| fail(0, "truncated".into()))? != MAGIC {
            return Err(fail(0, "bad magic".into()));
        }
        let version = r.u32().ok_or_else(|| fail(r.pos, "truncated".into()))?;
        if version != VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let header_len = r.u32().ok_or_else(|| fail(r.pos, "truncated".into()))? as usize;
        let at = r.pos;
        let header: Header = serde_json::from_slice(r.take(header_len).ok_or_else(|| fail(at, "truncated header".into()))?)
            .map_err(|e| fail(at, format!("header: {e}")))?;
        let n_blocks = r.u32().ok_or_else(|| fail(r.pos, "truncated".into()))?;
        let mut betas = None;
        let mut weights = ParamSet::new();
        for _ in 0..n_blocks {
            let at = r.pos;
            let block = r.block().ok_or_else(|| fail(at, "truncated block".into()))?;
            let (name, m) = block.map_err(|e| fail(at, e))?;
            if name == BETAS {
                betas = Some(m.iter().copied().collect::<Vec<_>>());
            } else {
                weights.push(name, m);
            }
        }
        if r.pos != body.len() {
            return Err(fail(r.pos, "trailing bytes".into()));
        }
        let betas = betas.ok_or_else(|| fail(r.pos, "missing schedule block".into()))?;
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(fail(0, "schedule betas outside (0, 1)".into()));
        }
        let schedule = NoiseSchedule::from_betas(betas);
        Ok(Self {
            config: header.config,
            normalizer: header.normalizer,
            info: header.info,
            schedule,
            weights,
        })
    }

    /// Writes the checkpoint and `<path>.card.txt`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        let card = card_path(path);
        fs::write(&card, self.model_card()).map_err(|e| Error::io(&card, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn model_card(&self) -> String {
        let c = &self.config;
        let d = &c.denoiser;
        let mut s = String::new();
        let _ = writeln!(s, "rodiff trajectory diffusion checkpoint (format {VERSION})");
        let _ = writeln!(s, "tokens: {} (stride {}, token dt {} s)", d.horizon, c.stride, c.token_dt());
        let _ = writeln!(s, "upsampling: linear interpolation between tokens");
        let _ = writeln!(
            s,
            "network: d_model {}, blocks {}, heads {}, goal tokens {}, ffn x{}",
            d.d_model, d.blocks, d.heads, d.goal_tokens, d.ffn_mult
        );
        let _ = writeln!(s, "parameters: {}", self.weights.n_scalars());
        let _ = writeln!(
            s,
            "schedule: {} steps, betas {} -> {}",
            self.schedule.steps(),
            c.beta_start,
            c.beta_end
        );
        let _ = writeln!(s, "loss weights: lambda_q {}, lambda_qd {}", c.lambda_q, c.lambda_qd);
        let _ = writeln!(
            s,
            "optimizer: Adam lr {}, batch {}, grad clip {}, EMA decay {}",
            c.lr, c.batch, c.grad_clip, c.ema_decay
        );
        let _ = writeln!(s, "iterations: {}", self.info.iterations);
        let _ = writeln!(s, "final loss: {:.6e}", self.info.final_loss);
        let _ = writeln!(s, "training examples: {}", self.info.n_train);
        let _ = writeln!(s, "seed: {}", c.seed);
        if let Some(h) = &self.info.dataset_hash {
            let _ = writeln!(s, "dataset: {h}");
        }
        s
    }
}

pub fn card_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".card.txt");
    path.with_file_name(name)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn block(&mut self) -> Option<std::result::Result<(String, DMatrix<f64>), String>> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().ok()?) as usize;
        let name = match std::str::from_utf8(self.take(len)?) {
            Ok(n) => n.to_string(),
            Err(e) => return Some(Err(format!("block name: {e}"))),
        };
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let data = self.take(rows.checked_mul(cols)?.checked_mul(8)?)?;
        let values: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Some(Ok((name, DMatrix::from_vec(rows, cols, values))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::denoiser::DenoiserConfig;
    use crate::diffusion::train::Trainer;

    fn sample_checkpoint() -> Checkpoint {
        let config = TrainConfig {
            diffusion_steps: 32,
            denoiser: DenoiserConfig {
                horizon: 6,
                d_model: 8,
                blocks: 1,
                heads: 2,
                goal_tokens: 2,
                ffn_mult: 2,
                skip: true,
            },
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(config).unwrap();
        let policy = trainer.policy(&Normalizer::identity()).unwrap();
        Checkpoint::from_policy(
            &policy,
            TrainInfo {
                iterations: 3,
                final_loss: 0.5,
                dataset_hash: Some("abc".into()),
                n_train: 2,
            },
        )
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.schedule.betas, ck.schedule.betas);
        assert_eq!(back.info, ck.info);
        for ((a, x), (b, y)) in back.weights.iter().zip(ck.weights.iter()) {
            assert_eq!(a, b);
            assert_eq!(x, y);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample_checkpoint().to_bytes();
        let n = bytes.len();
        bytes[n / 2] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes, Path::new("mem")), Err(Error::Format { .. })));
        assert!(Checkpoint::from_bytes(&bytes[..10], Path::new("mem")).is_err());
    }

    #[test]
    fn save_writes_card() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample_checkpoint();
        ck.save(&path).unwrap();
        let card = fs::read_to_string(card_path(&path)).unwrap();
        assert!(card.contains("stride 10"));
        assert!(card.contains("seed: 0"));
        let back = Checkpoint::load(&path).unwrap();
        let g = nalgebra::Vector3::new(0.1, 0.0, 0.2);
        let x = DMatrix::from_element(6, 20, 0.3);
        let a = ck.policy().unwrap().ddim_from(&g, 4, x.clone()).unwrap();
        let b = back.policy().unwrap().ddim_from(&g, 4, x).unwrap();
        assert_eq!(a, b);
    }
}
