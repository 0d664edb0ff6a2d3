//! Custom tag keys and values attached to every sample of a job.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const CASE_NUMBER: &str = "case_number";
pub const PIPELINE_IDENTIFIER: &str = "pipeline_identifier";
pub const PIPELINE_NAME: &str = "pipeline_name";
pub const STEP_NAME: &str = "step_name";

pub const RESERVED_KEYS: [&str; 4] = [CASE_NUMBER, PIPELINE_IDENTIFIER, PIPELINE_NAME, STEP_NAME];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TagError {
    #[error("invalid tag key {raw:?}: {reason}")]
    InvalidKey { raw: String, reason: String },
    #[error("reserved tag {key:?} must have a non-empty value")]
    EmptyReservedValue { key: String },
}

/// Normalizes a raw tag key (often a CLI flag) into the shared attribute namespace.
///
/// `--case-number` and `CASE-NUMBER` both become `case_number`.
pub fn normalize_tag_key(raw: &str) -> Result<String, TagError> {
    let lowered = raw.to_lowercase();
    let key = lowered
        .strip_prefix("--")
        .unwrap_or(&lowered)
        .replace('-', "_");
    if key.is_empty() {
        return Err(TagError::InvalidKey {
            raw: raw.to_owned(),
            reason: "empty after normalization".into(),
        });
    }
    if let Some(ch) = key
        .chars()
        .find(|c| !matches!(c, 'a'..='z' | '0'..='9' | '_' | '.' | '-'))
    {
        return Err(TagError::InvalidKey {
            raw: raw.to_owned(),
            reason: format!("disallowed character {ch:?}"),
        });
    }
    Ok(key)
}

pub fn is_reserved(key: &str) -> bool {
    RESERVED_KEYS.contains(&key)
}

/// Ordered set of normalized tag keys and their string values.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TagSet(BTreeMap<String, String>);

impl TagSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts after normalizing `key`. Returns the normalized key.
    pub fn insert(&mut self, key: &str, value: impl Into<String>) -> Result<String, TagError> {
        let key = normalize_tag_key(key)?;
        let value = value.into();
        if is_reserved(&key) && value.is_empty() {
            return Err(TagError::EmptyReservedValue { key });
        }
        self.0.insert(key.clone(), value);
        Ok(key)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks that every key is already normalized and reserved values are non-empty.
    pub fn validate(&self) -> Result<(), TagError> {
        for (k, v) in &self.0 {
            if normalize_tag_key(k)? != *k {
                return Err(TagError::InvalidKey {
                    raw: k.clone(),
                    reason: "key is not normalized".into(),
                });
            }
            if is_reserved(k) && v.is_empty() {
                return Err(TagError::EmptyReservedValue { key: k.clone() });
            }
        }
        Ok(())
    }
}

impl<K: AsRef<str>, V: Into<String>> TryFrom<Vec<(K, V)>> for TagSet {
    type Error = TagError;

    fn try_from(pairs: Vec<(K, V)>) -> Result<Self, Self::Error> {
        let mut tags = TagSet::new();
        for (k, v) in pairs {
            tags.insert(k.as_ref(), v)?;
        }
        Ok(tags)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn flag_style_keys() {
        assert_eq!(normalize_tag_key("--case-number").unwrap(), "case_number");
        assert_eq!(normalize_tag_key("STEP-NAME").unwrap(), "step_name");
        assert_eq!(normalize_tag_key("host.name").unwrap(), "host.name");
    }

    #[test]
    fn empty_or_bad_keys() {
        assert!(matches!(normalize_tag_key("--"), Err(TagError::InvalidKey { .. })));
        assert!(matches!(normalize_tag_key(""), Err(TagError::InvalidKey { .. })));
        assert!(matches!(normalize_tag_key("a b"), Err(TagError::InvalidKey { .. })));
        assert!(matches!(normalize_tag_key("ключ"), Err(TagError::InvalidKey { .. })));
    }

    #[test]
    fn reserved_values_must_be_non_empty() {
        let mut tags = TagSet::new();
        assert_eq!(
            tags.insert("--step-name", ""),
            Err(TagError::EmptyReservedValue {
                key: "step_name".into()
            })
        );
        tags.insert("--custom", "").unwrap();
        assert_eq!(tags.get("custom"), Some(""));
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(raw in "[-A-Za-z0-9_.]{1,24}") {
            if let Ok(once) = normalize_tag_key(&raw) {
                prop_assert_eq!(normalize_tag_key(&once).unwrap(), once.clone());
                prop_assert!(once.chars().all(|c| matches!(c, 'a'..='z' | '0'..='9' | '_' | '.' | '-')));
            }
        }
    }
}
