//! Network and training settings.

use std::collections::BTreeMap;

use crate::attention::AttentionKind;
use crate::error::{Error, Result};

pub const DEFAULT_OFFSET_SCALE: f64 = 16.0;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Embedding width followed by the output width of every block.
    pub block_dims: Vec<usize>,
    /// Neighbours per point inside the blocks.
    pub k: usize,
    /// Points kept by farthest point sampling.
    pub downsample_to: usize,
    /// Neighbours used by the transfer layers (down and up).
    pub transfer_k: usize,
    /// Cloud neighbours aggregated for each query.
    pub indicator_k: usize,
    /// Width of the first occupancy-head layer.
    pub indicator_dim: usize,
    /// Remaining head widths; must end at 1.
    pub head_dims: Vec<usize>,
    pub attention: AttentionKind,
    /// Factor applied to neighbour offsets before they enter Ω, so that
    /// offsets a fraction of a cell wide reach Ω at unit scale.
    pub offset_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            block_dims: vec![8, 32, 32, 32, 32],
            k: 24,
            downsample_to: 512,
            transfer_k: 8,
            indicator_k: 8,
            indicator_dim: 128,
            head_dims: vec![32, 1],
            attention: AttentionKind::NormalizedMatrix,
            offset_scale: DEFAULT_OFFSET_SCALE,
        }
    }
}

impl NetworkConfig {
    /// Reduced widths and counts that train on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            block_dims: vec![8, 8, 8, 8, 8],
            k: 16,
            downsample_to: 256,
            transfer_k: 8,
            indicator_k: 8,
            indicator_dim: 64,
            head_dims: vec![32, 1],
            attention: AttentionKind::NormalizedMatrix,
            offset_scale: DEFAULT_OFFSET_SCALE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_dims.len() < 2 || self.block_dims.contains(&0) {
            return Err(Error::invalid(
                "block_dims needs an embedding width and at least one block",
            ));
        }
        if self.k == 0 || self.transfer_k == 0 || self.indicator_k == 0 {
            return Err(Error::invalid("neighbour counts must be >= 1"));
        }
        if self.k > self.downsample_to {
            return Err(Error::invalid(format!(
                "k = {} exceeds downsample_to = {}",
                self.k, self.downsample_to
            )));
        }
        if self.indicator_dim == 0 || self.head_dims.last() != Some(&1) || self.head_dims.contains(&0) {
            return Err(Error::invalid("head dims must be positive and end at 1"));
        }
        if !(self.offset_scale > 0.0 && self.offset_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "offset_scale must be positive, got {}",
                self.offset_scale
            )));
        }
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        *self.block_dims.last().expect("validated")
    }

    /// Flat key/value form stored in checkpoints.
    pub fn to_meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("block_dims".into(), join(&self.block_dims));
        m.insert("k".into(), self.k.to_string());
        m.insert("downsample_to".into(), self.downsample_to.to_string());
        m.insert("transfer_k".into(), self.transfer_k.to_string());
        m.insert("indicator_k".into(), self.indicator_k.to_string());
        m.insert("indicator_dim".into(), self.indicator_dim.to_string());
        m.insert("head_dims".into(), join(&self.head_dims));
        m.insert("attention".into(), self.attention.to_string());
        m.insert("offset_scale".into(), format!("{:e}", self.offset_scale));
        m
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |key: &str| {
            meta.get(key)
                .ok_or_else(|| Error::invalid(format!("checkpoint is missing `{key}`")))
        };
        let cfg = Self {
            block_dims: parse_list(get("block_dims")?)?,
            k: parse_count(get("k")?)?,
            downsample_to: parse_count(get("downsample_to")?)?,
            transfer_k: parse_count(get("transfer_k")?)?,
            indicator_k: parse_count(get("indicator_k")?)?,
            indicator_dim: parse_count(get("indicator_dim")?)?,
            head_dims: parse_list(get("head_dims")?)?,
            attention: get("attention")?.parse()?,
            offset_scale: get("offset_scale")?
                .parse()
                .map_err(|_| Error::invalid("offset_scale is not a number"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Shapes per optimizer step.
    pub batch_size: usize,
    pub iterations: usize,
    /// Surface points per training cloud.
    pub points: usize,
    /// Noise standard deviation as a fraction of the largest bounding-box side.
    pub noise_std_fraction: f64,
    /// Mirror each sample along a random axis.
    pub flip_augment: bool,
    pub fine_res: usize,
    pub coarse_res: usize,
    /// Queries per shape per step, drawn without replacement from the
    /// sampled set; 0 keeps them all.
    pub query_batch: usize,
    /// Draw a fresh cloud and query set every step. When off, each shape's
    /// first sample is reused throughout.
    pub resample: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 1,
            iterations: 2000,
            points: 3000,
            noise_std_fraction: 0.005,
            flip_augment: true,
            fine_res: 64,
            coarse_res: 16,
            query_batch: 1024,
            resample: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Published schedule: 4M iterations, batch 2, lr 1e-4. The number of
    /// queries per step is not published, so `query_batch` stays at the
    /// desk value.
    pub fn paper() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 2,
            iterations: 4_000_000,
            ..Self::default()
        }
    }

    pub fn validate(&self, net: &NetworkConfig) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and >= 0"));
        }
        if !(self.noise_std_fraction >= 0.0 && self.noise_std_fraction.is_finite()) {
            return Err(Error::invalid("noise_std_fraction must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if net.downsample_to >= self.points {
            return Err(Error::invalid(format!(
                "downsample_to = {} must be below the point count {}",
                net.downsample_to, self.points
            )));
        }
        if self.fine_res <= self.coarse_res || self.coarse_res < 2 {
            return Err(Error::invalid("fine_res must exceed coarse_res >= 2"));
        }
        if net.transfer_k > self.points || net.indicator_k > self.points {
            return Err(Error::invalid("neighbour counts exceed the point count"));
        }
        Ok(())
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub(crate) fn parse_count(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::invalid(format!("expected a non-negative integer, got `{s}`")))
}

pub(crate) fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',').map(parse_count).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let net = NetworkConfig::default();
        net.validate().unwrap();
        assert_eq!(net.block_dims, vec![8, 32, 32, 32, 32]);
        TrainConfig::default().validate(&net).unwrap();
        TrainConfig::paper().validate(&net).unwrap();
        NetworkConfig::desk().validate().unwrap();
    }

    #[test]
    fn meta_round_trip() {
        let mut net = NetworkConfig::desk();
        net.attention = AttentionKind::PointConv;
        assert_eq!(NetworkConfig::from_meta(&net.to_meta()).unwrap(), net);
        let mut meta = net.to_meta();
        meta.remove("k");
        assert!(NetworkConfig::from_meta(&meta).is_err());
    }

    #[test]
    fn invalid_settings() {
        let mut net = NetworkConfig::default();
        net.head_dims = vec![32, 2];
        assert!(net.validate().is_err());
        let net = NetworkConfig::default();
        let t = TrainConfig {
            points: 400,
            ..TrainConfig::default()
        };
        assert!(t.validate(&net).is_err());
        let t = TrainConfig {
            learning_rate: f64::NAN,
            ..TrainConfig::default()
        };
        assert!(t.validate(&net).is_err());
    }
}
