//! Model checkpoints: parameters plus their architecture config in one
//! container, tagged with a module kind.

use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::checkpoint::Container;
use crate::crf::{CrfConfig, CrfParams};
use crate::error::{Error, Result};
use crate::metrics::FeatureExtractor;
use crate::surrogate::{Dataset, DenoiserConfig, DenoiserParams};
use crate::train::{DiscriminatorConfig, DiscriminatorParams};

pub const CRF_KIND: &str = "crf";
pub const DENOISER_KIND: &str = "denoiser";
pub const DISCRIMINATOR_KIND: &str = "discriminator";

const CONFIG_KEY: &str = "config";
const CONFIG_HASH_KEY: &str = "config_hash";
const SEED_KEY: &str = "seed";

/// Something stored as a single checkpoint container.
pub trait Checkpoint: Sized {
    fn to_container(&self) -> Result<Container>;
    fn from_container(c: &Container) -> Result<Self>;

    /// Saves with the run seed recorded in the metadata.
    fn save_checkpoint(&self, path: &Path, seed: u64) -> Result<()> {
        self.to_container()?.with_meta(SEED_KEY, seed).save(path)
    }

    fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn with_config<C: Serialize>(kind: &str, config: &C) -> Result<Container> {
    let json = serde_json::to_string(config).map_err(|e| Error::invalid(format!("config encoding: {e}")))?;
    let hash = crc32fast::hash(json.as_bytes());
    Ok(Container::new(kind)
        .with_meta(CONFIG_HASH_KEY, format!("{hash:08x}"))
        .with_meta(CONFIG_KEY, json))
}

fn read_config<C: DeserializeOwned>(c: &Container, kind: &str) -> Result<C> {
    c.expect_kind(kind)?;
    let json = c
        .meta(CONFIG_KEY)
        .ok_or_else(|| Error::invalid(format!("{kind} checkpoint has no config")))?;
    serde_json::from_str(json).map_err(|e| Error::invalid(format!("{kind} checkpoint config: {e}")))
}

impl Checkpoint for CrfParams {
    fn to_container(&self) -> Result<Container> {
        let mut c = with_config(CRF_KIND, &self.config())?
            .with_meta("track_batch_stats", self.normalizer.track_batch_stats);
        c.extend(self.to_tensors());
        Ok(c)
    }

    fn from_container(c: &Container) -> Result<Self> {
        let cfg: CrfConfig = read_config(c, CRF_KIND)?;
        let track = c.meta("track_batch_stats").is_none_or(|v| v == "true");
        CrfParams::from_tensors(&cfg, track, &c.tensors)
    }
}

impl Checkpoint for DenoiserParams {
    fn to_container(&self) -> Result<Container> {
        let mut c = with_config(DENOISER_KIND, &self.config)?;
        c.extend(self.to_tensors());
        Ok(c)
    }

    fn from_container(c: &Container) -> Result<Self> {
        let cfg: DenoiserConfig = read_config(c, DENOISER_KIND)?;
        DenoiserParams::from_tensors(&cfg, &c.tensors)
    }
}

impl Checkpoint for DiscriminatorParams {
    fn to_container(&self) -> Result<Container> {
        let mut c = with_config(DISCRIMINATOR_KIND, &self.config)?;
        c.extend(self.to_tensors());
        Ok(c)
    }

    fn from_container(c: &Container) -> Result<Self> {
        let cfg: DiscriminatorConfig = read_config(c, DISCRIMINATOR_KIND)?;
        DiscriminatorParams::from_tensors(&cfg, &c.tensors)
    }
}

impl Checkpoint for Dataset {
    fn to_container(&self) -> Result<Container> {
        Ok(Dataset::to_container(self))
    }

    fn from_container(c: &Container) -> Result<Self> {
        Dataset::from_container(c)
    }
}

impl Checkpoint for FeatureExtractor {
    fn to_container(&self) -> Result<Container> {
        Ok(FeatureExtractor::to_container(self))
    }

    fn from_container(c: &Container) -> Result<Self> {
        FeatureExtractor::from_container(c)
    }
}
