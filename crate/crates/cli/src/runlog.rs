//! `run.json`: the merged config, input hashes and versions of one invocation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use fiberseg::io::read_manifest;
use fiberseg::RunConfig;

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunRecord<'a> {
    pub command: &'a str,
    pub argv: &'a [String],
    pub config: &'a RunConfig,
    pub inputs: Vec<InputHash>,
    pub versions: BTreeMap<&'static str, String>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// A manifest and every raster it references.
pub fn dataset_files(manifest: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = vec![manifest.to_path_buf()];
    for e in read_manifest(manifest)? {
        out.push(base.join(&e.image));
        for p in [&e.charting, &e.tissue_mask, &e.wm_mask, &e.ventricle_mask].into_iter().flatten() {
            out.push(base.join(p));
        }
    }
    Ok(out)
}

/// Regular files under `dir`, sorted.
pub fn dir_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn write_run(out: &Path, command: &str, argv: &[String], config: &RunConfig, inputs: &[PathBuf]) -> anyhow::Result<()> {
    let inputs = inputs
        .iter()
        .map(|p| {
            Ok(InputHash {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut versions = BTreeMap::new();
    versions.insert("fiberseg", fiberseg::config::VERSION.to_string());
    versions.insert("fiberseg-cli", env!("CARGO_PKG_VERSION").to_string());
    versions.insert("target", format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS));
    let rec = RunRecord {
        command,
        argv,
        config,
        inputs,
        versions,
    };
    fiberseg::io::write_json(&out.join("run.json"), &rec)?;
    Ok(())
}
