//! Probe checkpoint files: one JSON header line followed by an LPF1 block of
//! shape `1 × (d+1)` holding the weights and then the bias, as f32.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LinearProbe, Standardizer, TrainConfig, TrainHistory};
use crate::error::{Error, Result};
use crate::features::lpf;
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "layerprobe-probe/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeHeader {
    pub format: String,
    pub toolkit_version: String,
    pub config_hash: String,
    pub global_seed: u64,
    pub layer: u16,
    pub task_tag: String,
    pub dim: usize,
    pub train_config: TrainConfig<f64>,
    pub standardizer: Option<Standardizer<f64>>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeCheckpoint {
    pub header: ProbeHeader,
    pub probe: LinearProbe<f32>,
}

impl ProbeCheckpoint {
    pub fn from_probe<T: Scalar>(
        probe: &LinearProbe<T>,
        cfg: &TrainConfig<T>,
        history: &TrainHistory,
        config_hash: &str,
        global_seed: u64,
    ) -> Self {
        let cast = |v: &[T]| v.iter().map(|x| x.to_f64_lossy()).collect::<Vec<f64>>();
        let standardizer = probe.standardizer.as_ref().map(|s| Standardizer {
            mean: cast(&s.mean),
            scale: cast(&s.scale),
        });
        let header = ProbeHeader {
            format: CHECKPOINT_FORMAT.into(),
            toolkit_version: crate::TOOLKIT_VERSION.into(),
            config_hash: config_hash.into(),
            global_seed,
            layer: probe.layer,
            task_tag: probe.task_tag.clone(),
            dim: probe.dim(),
            train_config: cfg.cast(),
            standardizer,
            history: history.clone(),
        };
        let probe = LinearProbe {
            weights: probe.weights.iter().map(|w| w.to_f64_lossy() as f32).collect(),
            bias: probe.bias.to_f64_lossy() as f32,
            layer: probe.layer,
            task_tag: probe.task_tag.clone(),
            standardizer: probe.standardizer.as_ref().map(|s| Standardizer {
                mean: s.mean.iter().map(|x| x.to_f64_lossy() as f32).collect(),
                scale: s.scale.iter().map(|x| x.to_f64_lossy() as f32).collect(),
            }),
        };
        Self { header, probe }
    }

    /// The stored probe in another precision; standardization statistics come
    /// from the full-precision header copy.
    pub fn probe_as<T: Scalar>(&self) -> LinearProbe<T> {
        let lit = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
        LinearProbe {
            weights: self.probe.weights.iter().map(|&w| T::lit(w as f64)).collect(),
            bias: T::lit(self.probe.bias as f64),
            layer: self.header.layer,
            task_tag: self.header.task_tag.clone(),
            standardizer: self.header.standardizer.as_ref().map(|s| Standardizer {
                mean: lit(&s.mean),
                scale: lit(&s.scale),
            }),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        let mut row = self.probe.weights.clone();
        row.push(self.probe.bias);
        let block = Matrix::new(1, row.len(), row)?;
        out.extend(lpf::encode(self.header.layer, &block)?);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("probe checkpoint has no header line".into()))?;
        let header: ProbeHeader = serde_json::from_slice(&bytes[..split])?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unsupported probe format {:?}", header.format)));
        }
        let block = lpf::decode(&bytes[split + 1..])?;
        if block.data.rows() != 1 || block.data.cols() != header.dim + 1 {
            return Err(Error::DimensionMismatch {
                expected: header.dim + 1,
                actual: block.data.cols(),
            });
        }
        if block.layer != header.layer {
            return Err(Error::Integrity(format!(
                "header layer {} but tensor layer {}",
                header.layer, block.layer
            )));
        }
        let row = block.data.row(0);
        let probe = LinearProbe {
            weights: row[..header.dim].to_vec(),
            bias: row[header.dim],
            layer: header.layer,
            task_tag: header.task_tag.clone(),
            standardizer: header.standardizer.as_ref().map(|s| Standardizer {
                mean: s.mean.iter().map(|&x| x as f32).collect(),
                scale: s.scale.iter().map(|&x| x as f32).collect(),
            }),
        };
        Ok(Self { header, probe })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
