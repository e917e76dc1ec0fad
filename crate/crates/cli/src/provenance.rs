//! Provenance records: every stage writes the hashes of what it read and
//! produced, and verifies its inputs against any provenance found next to
//! them before doing work. Records carry no timestamps so identical re-runs
//! produce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use driverid_core::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    /// File name (inputs keep their full path as given).
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)
        .map_err(|e| Error::validation(format!("cannot read {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Verify `input` against any provenance record in its directory that lists
/// it as an output; error before any computation if the hash moved. Returns
/// the record for the stage's own provenance.
pub fn verify_input(input: &Path) -> Result<FileRecord> {
    if !input.exists() {
        return Err(Error::validation(format!(
            "input {} does not exist",
            input.display()
        )));
    }
    let hash = sha256_file(input)?;
    let file_name = input
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_string();
    if let Some(dir) = input.parent() {
        for entry in fs::read_dir(dir)?.flatten() {
            let p = entry.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if !name.ends_with(".provenance.json") {
                continue;
            }
            let Ok(text) = fs::read_to_string(&p) else { continue };
            let Ok(prov) = serde_json::from_str::<Provenance>(&text) else { continue };
            for out in &prov.outputs {
                if out.path == file_name && out.sha256 != hash {
                    return Err(Error::validation(format!(
                        "input {} does not match the hash recorded by stage {} \
                         (expected {}, found {hash})",
                        input.display(),
                        prov.stage,
                        out.sha256
                    )));
                }
            }
        }
    }
    Ok(FileRecord {
        path: input.display().to_string(),
        sha256: hash,
    })
}

/// Write `<stage>.provenance.json` into the output directory, hashing every
/// listed output file.
pub fn write_provenance(
    out_dir: &Path,
    stage: &str,
    seed: u64,
    config: serde_json::Value,
    inputs: Vec<FileRecord>,
    output_files: &[PathBuf],
) -> Result<()> {
    let mut outputs = Vec::with_capacity(output_files.len());
    for f in output_files {
        outputs.push(FileRecord {
            path: f
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string(),
            sha256: sha256_file(f)?,
        });
    }
    let prov = Provenance {
        stage: stage.to_string(),
        seed,
        config,
        inputs,
        outputs,
    };
    let mut bytes = serde_json::to_vec_pretty(&prov)
        .map_err(|e| Error::validation(e.to_string()))?;
    bytes.push(b'\n');
    fs::write(out_dir.join(format!("{stage}.provenance.json")), bytes)?;
    Ok(())
}
