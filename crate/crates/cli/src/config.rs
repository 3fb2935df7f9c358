//! Per-command settings: an optional `key=value` file overlaid by flags.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use echodepth_core::kv::{KvList, KvMap};
use echodepth_core::{Error, Result};

/// Resolved key/value settings for one command. Reads fall back to the
/// given default; [`Settings::finish`] rejects keys nobody asked for.
pub struct Settings {
    map: KvMap,
    resolved: KvList,
}

impl Settings {
    /// `overrides` are `(key, value)` pairs from flags that were given; they win over the file.
    pub fn load(file: Option<&Path>, overrides: Vec<(&str, Option<String>)>) -> Result<Self> {
        let mut list = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
                KvList::parse(&text)?
            }
            None => KvList::new(),
        };
        for (k, v) in overrides {
            if let Some(v) = v {
                list.push(k, v);
            }
        }
        Ok(Settings {
            map: list.into_map(),
            resolved: KvList::new(),
        })
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.map.get_or(key, default)?;
        self.resolved.push(key, &v);
        Ok(v)
    }

    pub fn get_optional<T: FromStr + Display>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let v: Option<T> = self.map.get(key)?;
        if let Some(v) = &v {
            self.resolved.push(key, v);
        }
        Ok(v)
    }

    /// Errors on unknown keys; returns every resolved setting in read order.
    pub fn finish(self) -> Result<KvList> {
        self.map.reject_unused()?;
        Ok(self.resolved)
    }
}

/// Renders an optional flag for [`Settings::load`].
pub fn flag<T: Display>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(|v| v.to_string())
}
