//! Content-addressed response cache: one JSON file per response under
//! `<root>/<first two hex chars>/<sha256>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Decoding, GenerationRequest};
use crate::error::{Error, Result};
use crate::hashing::hash_json;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn new(model_tag: &str, request: &GenerationRequest) -> Self {
        #[derive(Serialize)]
        struct KeyFields<'a> {
            model_tag: &'a str,
            prompt: &'a str,
            max_new_tokens: u32,
            decoding: Decoding,
        }
        Self(hash_json(&KeyFields {
            model_tag,
            prompt: &request.prompt,
            max_new_tokens: request.max_new_tokens,
            decoding: request.decoding,
        }))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub key: String,
    pub model_tag: String,
    pub prompt: String,
    pub max_new_tokens: u32,
    pub decoding: Decoding,
    pub text: String,
    pub token_logprobs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.root
            .join(&key.as_str()[..2])
            .join(format!("{}.json", key.as_str()))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<CachedResponse>> {
        let path = self.path_for(key);
        match fs::read(&path) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn put(&self, response: &CachedResponse) -> Result<()> {
        let key = CacheKey(response.key.clone());
        crate::io::write_json(&self.path_for(&key), response)
    }

    pub fn len(&self) -> Result<usize> {
        let mut n = 0;
        let entries = fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))?;
        for shard in entries {
            let shard = shard.map_err(|e| Error::io(&self.root, e))?.path();
            if shard.is_dir() {
                n += fs::read_dir(&shard)
                    .map_err(|e| Error::io(&shard, e))?
                    .filter_map(|e| e.ok())
                    .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                    .count();
            }
        }
        Ok(n)
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn put_get_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let req = GenerationRequest::greedy("who?", 32);
        let key = CacheKey::new("m", &req);
        assert!(cache.get(&key).unwrap().is_none());
        let resp = CachedResponse {
            key: key.as_str().to_string(),
            model_tag: "m".into(),
            prompt: "who?".into(),
            max_new_tokens: 32,
            decoding: Decoding::Greedy,
            text: "me".into(),
            token_logprobs: vec![-0.25, -1e-7],
        };
        cache.put(&resp).unwrap();
        assert_eq!(cache.get(&key).unwrap(), Some(resp));
        assert_eq!(cache.len().unwrap(), 1);
    }

    proptest! {
        #[test]
        fn keys_differ_when_any_field_differs(
            p1 in ".{0,12}", p2 in ".{0,12}",
            m1 in "[a-z]{1,4}", m2 in "[a-z]{1,4}",
            n1 in 1u32..64, n2 in 1u32..64,
        ) {
            let k1 = CacheKey::new(&m1, &GenerationRequest::greedy(p1.clone(), n1));
            let k2 = CacheKey::new(&m2, &GenerationRequest::greedy(p2.clone(), n2));
            prop_assert_eq!(k1 == k2, p1 == p2 && m1 == m2 && n1 == n2);
        }
    }
}
