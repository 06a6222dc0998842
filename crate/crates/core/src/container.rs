//! Versioned JSON envelope for every artifact written to disk.
//!
//! Floats are written with shortest round-trip formatting, so loading a
//! saved artifact reproduces every weight bit for bit.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{SteeringMap, SweepResult};
use crate::featmap::FeatureMap;
use crate::sites::LossSiteSet;
use crate::subject::Subject;
use crate::train::TrainReport;

pub const FORMAT: &str = "featsteer";
pub const VERSION: u32 = 1;

/// A type that can be stored in a container, tagged with its kind.
pub trait Artifact: Serialize + DeserializeOwned {
    const KIND: &'static str;
}

impl Artifact for Subject {
    const KIND: &'static str = "subject";
}

impl Artifact for FeatureMap {
    const KIND: &'static str = "feature-map";
}

impl Artifact for SteeringMap {
    const KIND: &'static str = "steering-map";
}

impl Artifact for LossSiteSet {
    const KIND: &'static str = "loss-sites";
}

impl Artifact for TrainReport {
    const KIND: &'static str = "train-report";
}

impl Artifact for SweepResult {
    const KIND: &'static str = "sweep";
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    kind: String,
    payload: T,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
}

pub fn to_string<T: Artifact>(value: &T) -> Result<String> {
    let env = Envelope {
        format: FORMAT.to_string(),
        version: VERSION,
        kind: T::KIND.to_string(),
        payload: value,
    };
    Ok(serde_json::to_string_pretty(&env)?)
}

pub fn from_str<T: Artifact>(s: &str) -> Result<T> {
    let header: Header = serde_json::from_str(s)?;
    if header.format != FORMAT {
        return Err(Error::Format(format!("expected format {FORMAT:?}, found {:?}", header.format)));
    }
    if header.version != VERSION {
        return Err(Error::Format(format!("version {} is not supported (expected {VERSION})", header.version)));
    }
    if header.kind != T::KIND {
        return Err(Error::Format(format!("expected a {} artifact, found {:?}", T::KIND, header.kind)));
    }
    let env: Envelope<T> = serde_json::from_str(s)?;
    Ok(env.payload)
}

pub fn save<T: Artifact>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, to_string(value)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Artifact>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&s)
}
