use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use super::Mfcc;
use crate::error::{Error, Result};
use crate::numerics::{read_tensors, write_tensors, NamedTensor};

/// Injective mapping of an utterance id to a flat file name: `_` doubles,
/// other characters outside `[A-Za-z0-9.-]` become `_<hex>`.
pub fn file_stem(id: &str) -> String {
    let mut key = String::with_capacity(id.len());
    for c in id.chars() {
        match c {
            '_' => key.push_str("__"),
            c if c.is_ascii_alphanumeric() || c == '-' || c == '.' => key.push(c),
            c => key.push_str(&format!("_{:x}", c as u32)),
        }
    }
    key
}

/// Directory of feature files keyed by utterance id (`a/b.wav` → `a_2fb.wav.feat`).
#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{}.feat", file_stem(id)))
    }

    pub fn get(&self, id: &str) -> Result<Option<Mfcc>> {
        let path = self.path_for(id);
        if !path.exists() {
            return Ok(None);
        }
        let mut tensors = read_tensors(BufReader::new(File::open(&path)?))?;
        match tensors.pop() {
            Some(t) if tensors.is_empty() && t.name == id => Ok(Some(Mfcc::new(t.tensor)?)),
            _ => Err(Error::Format(format!("{}: not a feature file for {id}", path.display()))),
        }
    }

    pub fn put(&self, id: &str, m: &Mfcc) -> Result<()> {
        let out = BufWriter::new(File::create(self.path_for(id))?);
        write_tensors(out, &[NamedTensor::new(id, m.coeffs.clone())])
    }

    pub fn get_or_insert_with(&self, id: &str, compute: impl FnOnce() -> Result<Mfcc>) -> Result<Mfcc> {
        if let Some(m) = self.get(id)? {
            return Ok(m);
        }
        let m = compute()?;
        self.put(id, &m)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn stores_and_reuses() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::open(dir.path().join("feats")).unwrap();
        let m = Mfcc::new(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        assert!(cache.get("spk1/utt 1").unwrap().is_none());
        cache.put("spk1/utt 1", &m).unwrap();
        let again = cache
            .get_or_insert_with("spk1/utt 1", || panic!("should hit the cache"))
            .unwrap();
        assert_eq!(again, m);
        assert_ne!(cache.path_for("a/b"), cache.path_for("a_b"));
    }
}
