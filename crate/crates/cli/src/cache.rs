//! One JSON envelope per stage: `<cache_dir>/<stage>.json`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use hisekt_core::{Error, Result, Stage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Serialize, Deserialize)]
struct Envelope {
    stage: String,
    fingerprint: String,
    payload: Value,
}

pub struct Cache {
    dir: PathBuf,
}

impl Cache {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir }
    }

    fn path(&self, stage: Stage) -> PathBuf {
        self.dir.join(format!("{}.json", stage.name()))
    }

    fn read(&self, stage: Stage) -> Result<Option<Envelope>> {
        let path = self.path(stage);
        if !path.exists() {
            return Ok(None);
        }
        let env: Envelope = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        Ok(Some(env))
    }

    /// The payload when it was produced under `fingerprint`.
    pub fn probe(&self, stage: Stage, fingerprint: &str) -> Result<Option<Value>> {
        Ok(self
            .read(stage)?
            .filter(|e| e.fingerprint == fingerprint)
            .map(|e| e.payload))
    }

    /// An upstream payload: missing and stale artifacts are errors.
    pub fn require(&self, stage: Stage, fingerprint: &str) -> Result<Value> {
        match self.read(stage)? {
            None => Err(Error::MissingStage {
                stage: stage.name().into(),
            }),
            Some(e) if e.fingerprint != fingerprint => Err(Error::StaleStage {
                stage: stage.name().into(),
                found: e.fingerprint,
                expected: fingerprint.into(),
            }),
            Some(e) => Ok(e.payload),
        }
    }

    pub fn require_as<T: DeserializeOwned>(&self, stage: Stage, fingerprint: &str) -> Result<T> {
        Ok(serde_json::from_value(self.require(stage, fingerprint)?)?)
    }

    pub fn store(&self, stage: Stage, fingerprint: &str, payload: Value) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        let env = Envelope {
            stage: stage.name().into(),
            fingerprint: fingerprint.into(),
            payload,
        };
        let tmp = self.dir.join(format!(".{}.json.tmp", stage.name()));
        let mut w = BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer(&mut w, &env)?;
        w.flush()?;
        drop(w);
        fs::rename(tmp, self.path(stage))?;
        Ok(())
    }
}
