use std::fs;
use std::path::{Path, PathBuf};

use gcnn_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
    /// Manifest found next to the input, if any: how the input was made.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Value>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name; `gcnn replay` re-runs them.
    pub argv: Vec<String>,
    pub config: Value,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<PathBuf>,
    pub threads: Option<usize>,
    pub tool_version: String,
    pub timestamp: String,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io_context(e, path))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn io_context(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn describe_input(path: &Path) -> Result<InputFile> {
    let sibling = path.parent().map(|d| d.join(MANIFEST));
    let provenance = match sibling {
        Some(p) if p.is_file() => fs::read(&p).ok().and_then(|b| serde_json::from_slice(&b).ok()),
        _ => None,
    };
    Ok(InputFile {
        path: path.to_path_buf(),
        sha256: file_sha256(path)?,
        provenance,
    })
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>, config: Value, threads: Option<usize>) -> Self {
        Self {
            command: command.to_string(),
            argv,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            threads,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(describe_input(path)?);
        Ok(())
    }

    pub fn write(mut self, out: &Path, outputs: &[&str]) -> Result<PathBuf> {
        self.outputs = outputs.iter().map(|o| out.join(o)).collect();
        let path = out.join(MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(&self)?).map_err(|e| io_context(e, &path))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| io_context(e, path))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: not a manifest: {e}", path.display())))
    }

    /// Fails if any recorded input no longer has its recorded hash.
    pub fn verify_inputs(&self) -> Result<()> {
        for input in &self.inputs {
            let now = file_sha256(&input.path)?;
            if now != input.sha256 {
                return Err(Error::Data(format!(
                    "{} changed since the manifest was written (sha256 {now}, recorded {})",
                    input.path.display(),
                    input.sha256
                )));
            }
        }
        Ok(())
    }
}
