use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNUSED_ID: u32 = 1;
pub const FIRST_ASSET_ID: u32 = 2;

/// Bijection between platform asset names and token ids `2..2+len`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Sorts and deduplicates `names`, then numbers them from 2.
    pub fn from_names<I, S>(names: I) -> Vocabulary
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut names: Vec<String> = names.into_iter().map(Into::into).collect();
        names.sort();
        names.dedup();
        let ids = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as u32 + FIRST_ASSET_ID))
            .collect();
        Vocabulary { names, ids }
    }

    /// Builds from explicit `(name, id)` pairs, rejecting duplicate names,
    /// duplicate ids and gaps.
    pub fn from_pairs(pairs: Vec<(String, u32)>) -> Result<Vocabulary> {
        let n = pairs.len();
        let mut slots: Vec<Option<String>> = vec![None; n];
        let mut ids = HashMap::with_capacity(n);
        for (name, id) in pairs {
            if ids.contains_key(&name) {
                return Err(Error::Vocabulary(format!("duplicate asset name `{name}`")));
            }
            let slot = id
                .checked_sub(FIRST_ASSET_ID)
                .map(|s| s as usize)
                .filter(|&s| s < n)
                .ok_or_else(|| {
                    Error::Vocabulary(format!(
                        "id {id} of `{name}` outside contiguous range {FIRST_ASSET_ID}..{}",
                        n as u32 + FIRST_ASSET_ID
                    ))
                })?;
            if let Some(other) = &slots[slot] {
                return Err(Error::Vocabulary(format!(
                    "id {id} assigned to both `{other}` and `{name}`"
                )));
            }
            slots[slot] = Some(name.clone());
            ids.insert(name, id);
        }
        let names = slots
            .into_iter()
            .map(|s| s.expect("all slots filled"))
            .collect();
        Ok(Vocabulary { names, ids })
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        id.checked_sub(FIRST_ASSET_ID)
            .and_then(|i| self.names.get(i as usize))
            .map(String::as_str)
    }

    /// Number of assets (reserved ids excluded).
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Rows needed in an embedding table indexed by token id.
    pub fn table_size(&self) -> usize {
        self.names.len() + FIRST_ASSET_ID as usize
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u32)> {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i as u32 + FIRST_ASSET_ID))
    }

    pub fn to_json(&self) -> String {
        let map: serde_json::Map<String, serde_json::Value> = self
            .iter()
            .map(|(n, id)| (n.to_string(), serde_json::Value::from(id)))
            .collect();
        serde_json::to_string_pretty(&serde_json::Value::Object(map))
            .expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Vocabulary> {
        let pairs: PairList = serde_json::from_str(text)
            .map_err(|e| Error::Vocabulary(format!("not a JSON object of name → id: {e}")))?;
        Vocabulary::from_pairs(pairs.0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_json(&text)
    }

    /// Reads a newline-separated asset list (blank lines and `//` comments skipped).
    pub fn from_asset_list(text: &str) -> Vocabulary {
        Vocabulary::from_names(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with("//")),
        )
    }

    pub fn as_map(&self) -> BTreeMap<&str, u32> {
        self.iter().collect()
    }
}

/// JSON object read entry by entry so that repeated keys stay visible.
struct PairList(Vec<(String, u32)>);

impl<'de> Deserialize<'de> for PairList {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = PairList;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping asset names to integer ids")
            }
            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<PairList, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, u32>()? {
                    out.push((k, v));
                }
                Ok(PairList(out))
            }
        }
        d.deserialize_map(V)
    }
}
