//! Versioned checkpoints on disk: `ckpt-000001.cfck`, `ckpt-000002.cfck`, ...
//! Each file is written under a temporary name and renamed into place, so a
//! crash never leaves a half-written version behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clickforge_core::netcore::{encode_checkpoint, load_checkpoint, ParamSet};
use clickforge_core::protocol::CheckpointInfo;

pub struct CheckpointStore {
    dir: PathBuf,
}

fn file_name(version: u64) -> String {
    format!("ckpt-{version:06}.cfck")
}

fn parse_version(name: &str) -> Option<u64> {
    name.strip_prefix("ckpt-")?.strip_suffix(".cfck")?.parse().ok()
}

impl CheckpointStore {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Stored versions in ascending order.
    pub fn list(&self) -> std::io::Result<Vec<CheckpointInfo>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let entry = entry?;
            let name = entry.file_name();
            let Some(version) = name.to_str().and_then(parse_version) else {
                continue;
            };
            out.push(CheckpointInfo {
                version,
                file: entry.path().display().to_string(),
                bytes: entry.metadata()?.len(),
            });
        }
        out.sort_by_key(|c| c.version);
        Ok(out)
    }

    pub fn latest(&self) -> clickforge_core::Result<Option<(u64, ParamSet)>> {
        match self.list()?.last() {
            Some(info) => Ok(Some((info.version, load_checkpoint(Path::new(&info.file))?))),
            None => Ok(None),
        }
    }

    pub fn write(&self, version: u64, params: &ParamSet) -> clickforge_core::Result<CheckpointInfo> {
        let bytes = encode_checkpoint(params);
        let path = self.dir.join(file_name(version));
        let tmp = self.dir.join(format!(".{}.tmp", file_name(version)));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        if let Ok(d) = fs::File::open(&self.dir) {
            let _ = d.sync_all();
        }
        Ok(CheckpointInfo {
            version,
            file: path.display().to_string(),
            bytes: bytes.len() as u64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clickforge_core::netcore::{ModelConfig, Network, Scope};

    #[test]
    fn versions_sort_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::open(dir.path()).unwrap();
        assert!(store.latest().unwrap().is_none());
        let net = Network::new(ModelConfig::tiny()).unwrap();
        let (a, b) = (net.init_params(1), net.init_params(2));
        store.write(2, &b).unwrap();
        store.write(1, &a).unwrap();
        fs::write(dir.path().join("ckpt-junk.cfck"), b"x").unwrap();
        fs::write(dir.path().join(".ckpt-000003.cfck.tmp"), b"partial").unwrap();
        let versions: Vec<u64> = store.list().unwrap().iter().map(|c| c.version).collect();
        assert_eq!(versions, vec![1, 2]);
        let (v, p) = store.latest().unwrap().unwrap();
        assert_eq!(v, 2);
        assert!(p.bit_equal(&b, Scope::All));
    }
}
