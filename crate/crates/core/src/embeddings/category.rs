use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One category: its id, canonical name and synonym set.
///
/// The canonical name is always `synonyms[0]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryEntry {
    pub id: usize,
    pub canonical: String,
    pub synonyms: Vec<String>,
}

impl CategoryEntry {
    pub fn new(id: usize, canonical: &str, synonyms: &[&str]) -> Result<Self> {
        let mut words = vec![canonical.to_string()];
        for s in synonyms {
            if *s != canonical {
                words.push((*s).to_string());
            }
        }
        let entry = Self {
            id,
            canonical: canonical.to_string(),
            synonyms: words,
        };
        entry.validate()?;
        Ok(entry)
    }

    fn validate(&self) -> Result<()> {
        if self.synonyms.first() != Some(&self.canonical) {
            return Err(Error::Format(format!(
                "category {}: canonical name must lead the synonym list",
                self.id
            )));
        }
        let mut seen = HashSet::new();
        for w in &self.synonyms {
            if w.is_empty() || w.contains(['\t', '\n', ',']) {
                return Err(Error::Format(format!(
                    "category {}: bad word {w:?}",
                    self.id
                )));
            }
            if !seen.insert(w.as_str()) {
                return Err(Error::Format(format!(
                    "category {}: duplicate synonym {w:?}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Ordered category list with contiguous ids starting at 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryTable {
    entries: Vec<CategoryEntry>,
}

impl CategoryTable {
    pub fn new(entries: Vec<CategoryEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if e.id != i {
                return Err(Error::Format(format!(
                    "category ids must be contiguous from 0; position {i} has id {}",
                    e.id
                )));
            }
            e.validate()?;
        }
        Ok(Self { entries })
    }

    /// Synthetic table: `count` categories named `c00`, `c01`, ... each with
    /// `synonyms` words (`c00`, `c00.1`, `c00.2`, ...).
    pub fn synthetic(count: usize, synonyms: usize) -> Self {
        let entries = (0..count)
            .map(|id| {
                let canonical = format!("c{id:02}");
                let mut words = vec![canonical.clone()];
                words.extend((1..synonyms.max(1)).map(|k| format!("{canonical}.{k}")));
                CategoryEntry {
                    id,
                    canonical,
                    synonyms: words,
                }
            })
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CategoryEntry] {
        &self.entries
    }

    pub fn get(&self, id: usize) -> Result<&CategoryEntry> {
        self.entries.get(id).ok_or(Error::UnknownCategory(id))
    }

    /// Every word of every category, in table order.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .flat_map(|e| e.synonyms.iter().map(String::as_str))
    }

    /// Parses `id<TAB>canonical<TAB>syn1,syn2,...` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let (id, canonical, syns) = match (fields.next(), fields.next(), fields.next()) {
                (Some(a), Some(b), c) if fields.next().is_none() => (a, b, c.unwrap_or("")),
                _ => {
                    return Err(Error::Format(format!(
                        "synonym table line {}: expected 3 tab-separated fields",
                        lineno + 1
                    )))
                }
            };
            let id: usize = id.trim().parse().map_err(|_| {
                Error::Format(format!("synonym table line {}: bad id {id:?}", lineno + 1))
            })?;
            let canonical = canonical.trim();
            let mut synonyms = vec![canonical.to_string()];
            for s in syns.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                if s != canonical {
                    synonyms.push(s.to_string());
                }
            }
            entries.push(CategoryEntry {
                id,
                canonical: canonical.to_string(),
                synonyms,
            });
        }
        Self::new(entries)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# id\tcanonical\tsynonyms\n");
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}\t{}", e.id, e.canonical, e.synonyms.join(","));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str =
        "# curated\n0\tboat\tboat,ship,vessel\n1\tperson\thuman,individual\n\n2\tsky\t\n";

    #[test]
    fn parses_and_prepends_canonical() {
        let t = CategoryTable::parse(SAMPLE).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.get(0).unwrap().synonyms, ["boat", "ship", "vessel"]);
        assert_eq!(
            t.get(1).unwrap().synonyms,
            ["person", "human", "individual"]
        );
        assert_eq!(t.get(2).unwrap().synonyms, ["sky"]);
        assert!(matches!(t.get(3), Err(Error::UnknownCategory(3))));
    }

    #[test]
    fn text_round_trip() {
        let t = CategoryTable::parse(SAMPLE).unwrap();
        assert_eq!(CategoryTable::parse(&t.to_text()).unwrap(), t);
    }

    #[test]
    fn rejects_gaps_and_duplicates() {
        assert!(CategoryTable::parse("0\ta\t\n2\tb\t\n").is_err());
        assert!(CategoryTable::parse("0\ta\tb,b\n").is_err());
        assert!(CategoryTable::parse("0\ta\n").is_ok());
        assert!(CategoryTable::parse("x\ta\tb\n").is_err());
    }

    #[test]
    fn synthetic_table_is_valid() {
        let t = CategoryTable::synthetic(12, 4);
        assert!(CategoryTable::new(t.entries().to_vec()).is_ok());
        assert_eq!(t.words().count(), 48);
    }
}
