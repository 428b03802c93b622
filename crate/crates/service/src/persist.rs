use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use pairsearch_core::embed::{write_triplets_jsonl, GaussianEmbedding, TripletObservation, TripletStore};
use serde::{Deserialize, Serialize};

/// On-disk state of a service: the triplet log, the current embedding
/// snapshot and a small metadata file.
#[derive(Debug, Clone)]
pub struct DataDir {
    root: PathBuf,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub(crate) struct Meta {
    pub version: u64,
    pub sigma_eps: f64,
    pub sessions_completed: u64,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(DataDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn triplets_path(&self) -> PathBuf {
        self.root.join("triplets.jsonl")
    }

    pub fn embedding_path(&self) -> PathBuf {
        self.root.join("embedding.txt")
    }

    fn meta_path(&self) -> PathBuf {
        self.root.join("meta.json")
    }

    pub(crate) fn load_store(&self, n: usize) -> pairsearch_core::Result<TripletStore> {
        let path = self.triplets_path();
        if path.exists() {
            TripletStore::load(n, path)
        } else {
            Ok(TripletStore::new(n))
        }
    }

    pub(crate) fn load_embedding(&self) -> pairsearch_core::Result<Option<GaussianEmbedding>> {
        let path = self.embedding_path();
        if path.exists() {
            GaussianEmbedding::load(path).map(Some)
        } else {
            Ok(None)
        }
    }

    pub(crate) fn load_meta(&self) -> pairsearch_core::Result<Option<Meta>> {
        let path = self.meta_path();
        if path.exists() {
            Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
        } else {
            Ok(None)
        }
    }

    pub(crate) fn append_triplets(&self, triplets: &[TripletObservation]) -> pairsearch_core::Result<()> {
        let file = OpenOptions::new().create(true).append(true).open(self.triplets_path())?;
        let mut w = BufWriter::new(file);
        write_triplets_jsonl(&mut w, triplets)?;
        w.flush()?;
        Ok(())
    }

    pub(crate) fn save_embedding(&self, emb: &GaussianEmbedding) -> pairsearch_core::Result<()> {
        replace_atomically(&self.embedding_path(), |p| emb.save(p))
    }

    pub(crate) fn save_meta(&self, meta: &Meta) -> pairsearch_core::Result<()> {
        replace_atomically(&self.meta_path(), |p| Ok(fs::write(p, serde_json::to_vec_pretty(meta)?)?))
    }
}

fn replace_atomically(
    path: &Path,
    write: impl FnOnce(&Path) -> pairsearch_core::Result<()>,
) -> pairsearch_core::Result<()> {
    let tmp = path.with_extension("tmp");
    write(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
