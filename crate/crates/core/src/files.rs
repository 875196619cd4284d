//! Versioned JSON envelopes for weight and model files.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    payload: T,
}

pub fn to_json<T: Serialize>(format: &str, payload: &T) -> Result<String> {
    let env = Envelope { format: format.to_string(), version: FORMAT_VERSION, payload };
    Ok(serde_json::to_string_pretty(&env)?)
}

pub fn from_json<T: DeserializeOwned>(format: &str, text: &str) -> Result<T> {
    let env: Envelope<T> = serde_json::from_str(text)?;
    if env.format != format {
        return Err(Error::Format(format!("expected a {format:?} file, found {:?}", env.format)));
    }
    if env.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported {format} version {}", env.version)));
    }
    Ok(env.payload)
}

pub fn write_json<T: Serialize>(path: &Path, format: &str, payload: &T) -> Result<()> {
    fs::write(path, to_json(format, payload)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path, format: &str) -> Result<T> {
    from_json(format, &fs::read_to_string(path)?)
}
