//! Per-class appearance descriptions and the caption templates built on them.

mod remote;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Manifest;
use crate::error::{Error, Result};

pub use remote::{DescriptionCache, RemoteClient, RemoteConfig, CachedDescription, DEFAULT_TOKEN_ENV};

/// Prompt sent once per category; `[category]` is substituted.
pub const PROMPT_TEMPLATE: &str = "Describe the appearance of [category] in less than 50 words.";

/// Descriptions longer than this are kept but logged.
pub const WORD_LIMIT: usize = 50;

pub fn prompt_for(category: &str) -> String {
    PROMPT_TEMPLATE.replace("[category]", category)
}

/// The bare template caption for a category.
pub fn standard_caption(category: &str) -> String {
    format!("A photo of {category}, a type of food.")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionMode {
    #[default]
    Standard,
    Augmented,
}

impl CaptionMode {
    pub fn name(self) -> &'static str {
        match self {
            CaptionMode::Standard => "standard",
            CaptionMode::Augmented => "augmented",
        }
    }
}

impl fmt::Display for CaptionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CaptionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(CaptionMode::Standard),
            "augmented" => Ok(CaptionMode::Augmented),
            other => Err(Error::config(format!(
                "unknown caption mode {other:?} (expected standard or augmented)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionSource {
    Fixture,
    Remote,
    Synthetic,
}

/// One description per class plus where the descriptions came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionBank {
    entries: BTreeMap<String, String>,
    pub source: DescriptionSource,
    pub prompt_used: String,
}

impl DescriptionBank {
    pub fn new(entries: BTreeMap<String, String>, source: DescriptionSource) -> Result<Self> {
        for (class, desc) in &entries {
            if desc.trim().is_empty() {
                return Err(Error::validation(format!("empty description for class {class:?}")));
            }
            let words = desc.split_whitespace().count();
            if words > WORD_LIMIT {
                log::warn!("description of {class:?} has {words} words (limit {WORD_LIMIT})");
            }
        }
        Ok(Self {
            entries,
            source,
            prompt_used: PROMPT_TEMPLATE.to_string(),
        })
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    pub fn get(&self, class: &str) -> Option<&str> {
        self.entries.get(class).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Errors unless the bank's classes equal `classes` exactly.
    pub fn check_covers(&self, classes: &[String]) -> Result<()> {
        let want: BTreeSet<&str> = classes.iter().map(String::as_str).collect();
        let have: BTreeSet<&str> = self.entries.keys().map(String::as_str).collect();
        if want == have {
            return Ok(());
        }
        let missing: Vec<_> = want.difference(&have).collect();
        let extra: Vec<_> = have.difference(&want).collect();
        Err(Error::validation(format!(
            "description bank does not match the dataset classes (missing {missing:?}, extra {extra:?})"
        )))
    }

    /// Keeps only the listed classes, failing on any that are absent.
    pub fn restricted_to(&self, classes: &[String]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for c in classes {
            let d = self
                .get(c)
                .ok_or_else(|| Error::validation(format!("no description for class {c:?}")))?;
            entries.insert(c.clone(), d.to_string());
        }
        Ok(Self {
            entries,
            source: self.source,
            prompt_used: self.prompt_used.clone(),
        })
    }

    pub fn compose(&self, class: &str, mode: CaptionMode) -> Result<String> {
        compose_caption(class, self, mode)
    }

    /// Captions for `classes` in order.
    pub fn captions(&self, classes: &[String], mode: CaptionMode) -> Result<Vec<String>> {
        classes.iter().map(|c| self.compose(c, mode)).collect()
    }

    /// Fixture-format JSON with metadata.
    pub fn to_fixture(&self, model: Option<String>) -> Fixture {
        Fixture::Annotated {
            prompt: Some(self.prompt_used.clone()),
            model,
            timestamp: None,
            descriptions: self.entries.clone(),
        }
    }
}

/// Standard mode ignores the bank; augmented mode appends the class's
/// description after a single space.
pub fn compose_caption(class: &str, bank: &DescriptionBank, mode: CaptionMode) -> Result<String> {
    let base = standard_caption(class);
    match mode {
        CaptionMode::Standard => Ok(base),
        CaptionMode::Augmented => {
            let desc = bank.get(class).ok_or_else(|| {
                Error::validation(format!("class {class:?} has no description for augmented captions"))
            })?;
            Ok(format!("{base} {desc}"))
        }
    }
}

/// On-disk description file: a bare map, or a map with metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Fixture {
    Annotated {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prompt: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        model: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timestamp: Option<String>,
        descriptions: BTreeMap<String, String>,
    },
    Plain(BTreeMap<String, String>),
}

impl Fixture {
    pub fn descriptions(&self) -> &BTreeMap<String, String> {
        match self {
            Fixture::Annotated { descriptions, .. } | Fixture::Plain(descriptions) => descriptions,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::validation(format!("malformed description fixture: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("fixture serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Where descriptions come from.
#[derive(Debug)]
pub enum Provider {
    Fixture(PathBuf),
    Synthetic(Manifest),
    Remote {
        client: RemoteClient,
        cache: Option<DescriptionCache>,
        fallback: Option<PathBuf>,
    },
}

/// One description per class from the configured provider.
pub fn fetch_descriptions(classes: &[String], provider: &Provider) -> Result<DescriptionBank> {
    match provider {
        Provider::Fixture(path) => {
            let fixture = Fixture::load(path)?;
            DescriptionBank::new(fixture.descriptions().clone(), DescriptionSource::Fixture)?
                .restricted_to(classes)
        }
        Provider::Synthetic(manifest) => {
            let mut entries = BTreeMap::new();
            for c in classes {
                let d = manifest.description(c).ok_or_else(|| {
                    Error::validation(format!("manifest has no ingredient list for class {c:?}"))
                })?;
                entries.insert(c.clone(), d);
            }
            DescriptionBank::new(entries, DescriptionSource::Synthetic)
        }
        Provider::Remote {
            client,
            cache,
            fallback,
        } => {
            let fallback = fallback.as_deref().map(Fixture::load).transpose()?;
            let mut entries = BTreeMap::new();
            for c in classes {
                let prompt = prompt_for(c);
                if let Some(hit) = cache.as_ref().and_then(|k| k.get(&prompt, c)) {
                    entries.insert(c.clone(), hit.description);
                    continue;
                }
                match client.describe(&prompt) {
                    Ok(desc) => {
                        if let Some(k) = cache {
                            k.put(&CachedDescription::new(c, &prompt, client.model(), &desc))?;
                        }
                        entries.insert(c.clone(), desc);
                    }
                    Err(err) => {
                        let backup = fallback.as_ref().and_then(|f| f.descriptions().get(c));
                        match backup {
                            Some(d) => {
                                log::warn!("remote description of {c:?} failed ({err}); using fixture");
                                entries.insert(c.clone(), d.clone());
                            }
                            None => {
                                return Err(Error::provider(format!(
                                    "could not describe class {c:?}: {err}"
                                )))
                            }
                        }
                    }
                }
            }
            DescriptionBank::new(entries, DescriptionSource::Remote)
        }
    }
}
