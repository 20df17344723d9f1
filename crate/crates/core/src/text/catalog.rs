//! Shared and modality-specific class descriptions.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fileio::read_text;

pub const CLASS_NAMES: [&str; 3] = ["trees", "roads", "buildings"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scope {
    Shared,
    M1,
    M2,
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Scope::Shared),
            "m1" => Ok(Scope::M1),
            "m2" => Ok(Scope::M2),
            other => Err(Error::Data(format!("unknown text scope {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TextMode {
    None,
    Shared,
    Specific,
    #[default]
    SharedSpecific,
}

impl FromStr for TextMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TextMode::None),
            "shared" => Ok(TextMode::Shared),
            "specific" => Ok(TextMode::Specific),
            "shared+specific" => Ok(TextMode::SharedSpecific),
            other => Err(Error::Config(format!("unknown text mode {other:?}"))),
        }
    }
}

impl fmt::Display for TextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TextMode::None => "none",
            TextMode::Shared => "shared",
            TextMode::Specific => "specific",
            TextMode::SharedSpecific => "shared+specific",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextCatalog {
    /// Indexed by class, then `[shared, m1, m2]`.
    pub entries: Vec<[String; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassText {
    pub class: usize,
    pub scope: Scope,
    pub text: String,
}

const DEFAULT_CATALOG: &str = include_str!("../../assets/catalog.tsv");

impl Default for TextCatalog {
    fn default() -> Self {
        TextCatalog::parse(DEFAULT_CATALOG).expect("bundled catalog is valid")
    }
}

impl TextCatalog {
    /// Parse `class<TAB>scope<TAB>text` lines. Every class in [`CLASS_NAMES`] needs
    /// exactly one non-empty text per scope.
    pub fn parse(src: &str) -> Result<Self> {
        let mut entries: Vec<[Option<String>; 3]> = vec![Default::default(); CLASS_NAMES.len()];
        for (ln, line) in src.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.splitn(3, '\t').collect();
            let [class, scope, text] = f[..] else {
                return Err(Error::Data(format!(
                    "catalog line {}: expected 3 tab-separated fields",
                    ln + 1
                )));
            };
            let k = CLASS_NAMES
                .iter()
                .position(|&c| c == class.trim().to_lowercase())
                .ok_or_else(|| Error::Data(format!("catalog line {}: unknown class {class:?}", ln + 1)))?;
            let slot = scope.trim().parse::<Scope>()? as usize;
            if text.trim().is_empty() {
                return Err(Error::Data(format!("catalog line {}: empty text", ln + 1)));
            }
            if entries[k][slot].replace(text.trim().to_string()).is_some() {
                return Err(Error::Data(format!(
                    "catalog line {}: duplicate {class}/{scope}",
                    ln + 1
                )));
            }
        }
        let entries = entries
            .into_iter()
            .enumerate()
            .map(|(k, e)| {
                let [a, b, c] = e;
                match (a, b, c) {
                    (Some(a), Some(b), Some(c)) => Ok([a, b, c]),
                    _ => Err(Error::Data(format!("catalog is missing texts for {}", CLASS_NAMES[k]))),
                }
            })
            .collect::<Result<_>>()?;
        Ok(TextCatalog { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn text(&self, class: usize, scope: Scope) -> &str {
        &self.entries[class][scope as usize]
    }
}

/// The texts fed to the text encoder under each mode, class-major.
pub fn build_class_texts(catalog: &TextCatalog, mode: TextMode) -> Vec<ClassText> {
    let scopes: &[Scope] = match mode {
        TextMode::None => &[],
        TextMode::Shared => &[Scope::Shared],
        TextMode::Specific => &[Scope::M1, Scope::M2],
        TextMode::SharedSpecific => &[Scope::Shared, Scope::M1, Scope::M2],
    };
    (0..catalog.entries.len())
        .flat_map(|class| {
            scopes.iter().map(move |&scope| ClassText {
                class,
                scope,
                text: catalog.text(class, scope).to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_catalog_has_nine_texts() {
        let c = TextCatalog::default();
        let all = build_class_texts(&c, TextMode::SharedSpecific);
        assert_eq!(all.len(), 9);
        assert!(all.iter().all(|t| !t.text.is_empty()));
        assert_eq!(build_class_texts(&c, TextMode::Shared).len(), 3);
        assert_eq!(build_class_texts(&c, TextMode::Specific).len(), 6);
        assert!(build_class_texts(&c, TextMode::None).is_empty());
    }

    #[test]
    fn parse_errors() {
        assert!(TextCatalog::parse("trees\tshared\tx\n").is_err());
        assert!(TextCatalog::parse("lakes\tshared\tx\n").is_err());
        assert!(TextCatalog::parse("trees\tm3\tx\n").is_err());
        assert!(TextCatalog::parse("trees shared x\n").is_err());
    }

    #[test]
    fn modes_parse() {
        for m in ["none", "shared", "specific", "shared+specific"] {
            assert_eq!(m.parse::<TextMode>().unwrap().to_string(), m);
        }
        assert!("all".parse::<TextMode>().is_err());
    }
}
