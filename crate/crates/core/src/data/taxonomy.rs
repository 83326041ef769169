use std::collections::BTreeMap;
use std::fmt;

use super::DataError;

/// Top-level behavior bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TopBin {
    Aggression,
    Sib,
    Stereotypy,
}

impl TopBin {
    pub const ALL: [TopBin; 3] = [TopBin::Aggression, TopBin::Sib, TopBin::Stereotypy];

    pub fn as_str(self) -> &'static str {
        match self {
            TopBin::Aggression => "Aggression",
            TopBin::Sib => "SIB",
            TopBin::Stereotypy => "Stereotypy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "aggression" => Some(TopBin::Aggression),
            "sib" | "self-injurious behavior" | "self-injurious behaviour" => Some(TopBin::Sib),
            "stereotypy" => Some(TopBin::Stereotypy),
            _ => None,
        }
    }
}

impl fmt::Display for TopBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn norm(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Two-stage mapping raw annotation name → secondary bin → top bin.
/// Names are matched case-insensitively with collapsed whitespace.
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorTaxonomy {
    raw_to_secondary: BTreeMap<String, String>,
    secondary_to_top: BTreeMap<String, TopBin>,
}

impl BehaviorTaxonomy {
    /// Builds a taxonomy from `(raw, secondary, top)` rows. A raw name may
    /// appear only with one secondary bin, and a secondary bin only with
    /// one top bin.
    pub fn from_rows<'a>(
        rows: impl IntoIterator<Item = (&'a str, &'a str, TopBin)>,
    ) -> Result<Self, DataError> {
        let mut raw_to_secondary = BTreeMap::new();
        let mut secondary_to_top = BTreeMap::new();
        for (raw, sec, top) in rows {
            let (raw, sec) = (norm(raw), norm(sec));
            if raw.is_empty() || sec.is_empty() {
                return Err(DataError::InvalidTaxonomy("empty name".into()));
            }
            if let Some(prev) = raw_to_secondary.insert(raw.clone(), sec.clone()) {
                if prev != sec {
                    return Err(DataError::InvalidTaxonomy(format!(
                        "{raw:?} maps to both {prev:?} and {sec:?}"
                    )));
                }
            }
            if let Some(prev) = secondary_to_top.insert(sec.clone(), top) {
                if prev != top {
                    return Err(DataError::InvalidTaxonomy(format!(
                        "{sec:?} maps to both {prev} and {top}"
                    )));
                }
            }
        }
        Ok(Self {
            raw_to_secondary,
            secondary_to_top,
        })
    }

    /// The eight operationalized behaviors and their bins.
    pub fn standard() -> Self {
        Self::from_rows(STANDARD_ROWS.iter().map(|&(r, s, t)| (r, s, t)))
            .expect("standard taxonomy is consistent")
    }

    pub fn map_behavior(&self, raw: &str) -> Result<TopBin, DataError> {
        self.raw_to_secondary
            .get(&norm(raw))
            .and_then(|sec| self.secondary_to_top.get(sec))
            .copied()
            .ok_or_else(|| DataError::UnknownBehavior(raw.to_string()))
    }

    pub fn secondary(&self, raw: &str) -> Option<&str> {
        self.raw_to_secondary.get(&norm(raw)).map(String::as_str)
    }

    /// `(raw, secondary, top)` rows in raw-name order.
    pub fn rows(&self) -> Vec<(String, String, TopBin)> {
        self.raw_to_secondary
            .iter()
            .map(|(r, s)| (r.clone(), s.clone(), self.secondary_to_top[s]))
            .collect()
    }

    pub fn raw_names(&self) -> impl Iterator<Item = &str> {
        self.raw_to_secondary.keys().map(String::as_str)
    }
}

pub(crate) const STANDARD_ROWS: [(&str, &str, TopBin); 8] = [
    (
        "motor stereotypies",
        "stereotypy behavior",
        TopBin::Stereotypy,
    ),
    ("aggression", "aggression", TopBin::Aggression),
    (
        "self-injurious behavior",
        "self-injurious behaviors",
        TopBin::Sib,
    ),
    (
        "self-injurious jump",
        "self-injurious behaviors",
        TopBin::Sib,
    ),
    ("hand bite", "self-injurious behaviors", TopBin::Sib),
    ("dropping", "stereotypy behavior", TopBin::Stereotypy),
    ("jumping", "stereotypy behavior", TopBin::Stereotypy),
    ("disruptive behavior", "aggression", TopBin::Aggression),
];
