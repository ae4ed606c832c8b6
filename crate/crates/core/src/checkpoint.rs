//! Checkpoints: translator parameters, the config that produced them,
//! and the round index, in the shared binary container.

use std::path::Path;

use crate::config::ExperimentConfig;
use crate::container::{self, Container};
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::translator::check_schema;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParameterSet,
    pub config: ExperimentConfig,
    pub round: u64,
}

pub fn encode_checkpoint(params: &ParameterSet, config: &ExperimentConfig, round: u64) -> Result<Vec<u8>> {
    check_schema(&config.translator, params)?;
    let c = Container {
        tensors: params.iter().map(|(n, p)| (n.clone(), p.value.clone())).collect(),
        text: config.to_text(),
        round,
    };
    container::encode(&c)
}

pub fn save_checkpoint(path: &Path, params: &ParameterSet, config: &ExperimentConfig, round: u64) -> Result<()> {
    let bytes = encode_checkpoint(params, config, round)?;
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let c = container::decode(bytes)?;
    let config = ExperimentConfig::parse(&c.text, &[])
        .map_err(|e| Error::format(bytes.len(), format!("config echo does not parse: {e}")))?;
    let mut params = ParameterSet::new();
    for (name, t) in c.tensors {
        if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Data {
                row: i,
                message: format!("non-finite value in tensor `{name}`"),
            });
        }
        params.insert(name, t)?;
    }
    check_schema(&config.translator, &params).map_err(|e| Error::format(0, e.to_string()))?;
    Ok(Checkpoint {
        params,
        config,
        round: c.round,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_checkpoint(&bytes)
}
