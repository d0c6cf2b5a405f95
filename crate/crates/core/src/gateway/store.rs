//! Record/replay store: one file per cache key, holding the completion text verbatim.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreMode {
    /// Read cached entries; on a miss call the backend and store the response.
    Record,
    /// Read-only. A miss is an error.
    Replay,
}

pub struct ReplayStore {
    dir: PathBuf,
    mode: StoreMode,
    write_lock: Mutex<()>,
}

impl ReplayStore {
    pub fn open(dir: impl Into<PathBuf>, mode: StoreMode) -> Result<Self, GatewayError> {
        let dir = dir.into();
        match mode {
            StoreMode::Record => {
                std::fs::create_dir_all(&dir).map_err(|e| GatewayError::Store {
                    path: dir.clone(),
                    message: e.to_string(),
                })?
            }
            StoreMode::Replay if !dir.is_dir() => {
                return Err(GatewayError::Store {
                    path: dir,
                    message: "replay directory does not exist".into(),
                })
            }
            StoreMode::Replay => {}
        }
        Ok(ReplayStore {
            dir,
            mode,
            write_lock: Mutex::new(()),
        })
    }

    pub fn mode(&self) -> StoreMode {
        self.mode
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.txt"))
    }

    pub fn get(&self, key: &str) -> Result<Option<String>, GatewayError> {
        match std::fs::read_to_string(self.path_for(key)) {
            Ok(text) => Ok(Some(text)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(GatewayError::Store {
                path: self.path_for(key),
                message: e.to_string(),
            }),
        }
    }

    pub fn put(&self, key: &str, value: &str) -> Result<(), GatewayError> {
        if self.mode == StoreMode::Replay {
            return Err(GatewayError::ReadOnlyStore);
        }
        let _guard = self.write_lock.lock().unwrap();
        let path = self.path_for(key);
        crate::kb::write_atomic(&path, value.as_bytes()).map_err(|e| GatewayError::Store {
            path,
            message: e.to_string(),
        })
    }
}
