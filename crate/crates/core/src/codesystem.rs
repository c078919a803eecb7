//! Diagnosis-code universe.
//!
//! Codes use dotted WHO-style notation (`E66`, `E66.0`, `E66.01`). The
//! category (level 3) is the letter plus two digits; levels 4 and 5 add one
//! or two alphanumerics after the dot. Range checks always compare level-3
//! categories.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodeError {
    #[error("malformed diagnosis code {0:?}")]
    MalformedCode(String),
    #[error("cannot truncate {code} (level {code_level}) to level {requested}")]
    LevelAboveCode {
        code: String,
        code_level: u8,
        requested: u8,
    },
    #[error("invalid code range {lo}..{hi}")]
    InvalidRange { lo: String, hi: String },
}

#[derive(Debug, Error)]
pub enum CodeSystemError {
    #[error("i/o error reading code system: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Code { line: usize, source: CodeError },
    #[error("line {line}: expected CODE<TAB>description")]
    MissingTab { line: usize },
    #[error("line {line}: duplicate code {code}")]
    Duplicate { line: usize, code: String },
    #[error("code {code} has no level-3 parent {parent} in the system")]
    MissingParent { code: String, parent: String },
    #[error("code system is empty")]
    Empty,
}

/// A parsed diagnosis code in canonical uppercase form.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Code {
    text: String,
}

impl Code {
    pub fn parse(raw: &str) -> Result<Self, CodeError> {
        let upper = raw.trim().to_ascii_uppercase();
        let bytes = upper.as_bytes();
        let malformed = || CodeError::MalformedCode(raw.to_string());
        if bytes.len() < 3
            || !bytes[0].is_ascii_uppercase()
            || !bytes[1].is_ascii_digit()
            || !bytes[2].is_ascii_digit()
        {
            return Err(malformed());
        }
        match bytes.len() {
            3 => {}
            5 | 6 => {
                if bytes[3] != b'.' || !bytes[4..].iter().all(|b| b.is_ascii_alphanumeric()) {
                    return Err(malformed());
                }
            }
            _ => return Err(malformed()),
        }
        Ok(Code { text: upper })
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    /// Hierarchy level: 3 for a category, 4 or 5 for subdivisions.
    pub fn level(&self) -> u8 {
        match self.text.len() {
            3 => 3,
            5 => 4,
            _ => 5,
        }
    }

    /// The level-3 category of this code.
    pub fn category(&self) -> Code {
        Code {
            text: self.text[..3].to_string(),
        }
    }

    pub fn truncate_to_level(&self, level: u8) -> Result<Code, CodeError> {
        if level > self.level() || level < 3 {
            return Err(CodeError::LevelAboveCode {
                code: self.text.clone(),
                code_level: self.level(),
                requested: level,
            });
        }
        let len = match level {
            3 => 3,
            4 => 5,
            _ => 6,
        };
        Ok(Code {
            text: self.text[..len].to_string(),
        })
    }

    /// Z-chapter codes describe administrative encounters.
    pub fn is_administrative(&self) -> bool {
        self.text.starts_with('Z')
    }

    /// External causes (V00–Y99) are not reimbursed in the source system,
    /// which is why they tend to go uncoded.
    pub fn is_reimbursement_excluded(&self) -> bool {
        let cat = &self.text[..3];
        ("V00"..="Y99").contains(&cat)
    }

    pub fn in_range(&self, range: &CodeRange) -> bool {
        range.contains(self)
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl FromStr for Code {
    type Err = CodeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Code::parse(s)
    }
}

impl Serialize for Code {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for Code {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        Code::parse(&raw).map_err(serde::de::Error::custom)
    }
}

/// Inclusive range of level-3 categories, e.g. `X60-X85`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeRange {
    lo: Code,
    hi: Code,
}

impl CodeRange {
    pub fn new(lo: Code, hi: Code) -> Result<Self, CodeError> {
        if lo.level() != 3 || hi.level() != 3 || lo > hi {
            return Err(CodeError::InvalidRange {
                lo: lo.to_string(),
                hi: hi.to_string(),
            });
        }
        Ok(CodeRange { lo, hi })
    }

    pub fn single(code: &Code) -> Self {
        let cat = code.category();
        CodeRange {
            lo: cat.clone(),
            hi: cat,
        }
    }

    pub fn lo(&self) -> &Code {
        &self.lo
    }

    pub fn hi(&self) -> &Code {
        &self.hi
    }

    pub fn contains(&self, code: &Code) -> bool {
        let cat = &code.as_str()[..3];
        cat >= self.lo.as_str() && cat <= self.hi.as_str()
    }
}

impl FromStr for CodeRange {
    type Err = CodeError;
    /// Accepts `X60-X85`, `X60..X85` or a single category.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let parts: Vec<&str> = if s.contains("..") {
            s.splitn(2, "..").collect()
        } else {
            s.splitn(2, '-').collect()
        };
        match parts.as_slice() {
            [one] => Ok(CodeRange::single(&Code::parse(one)?)),
            [lo, hi] => CodeRange::new(Code::parse(lo)?.category(), Code::parse(hi)?.category()),
            _ => unreachable!(),
        }
    }
}

impl fmt::Display for CodeRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lo == self.hi {
            write!(f, "{}", self.lo)
        } else {
            write!(f, "{}-{}", self.lo, self.hi)
        }
    }
}

/// The set of valid codes with descriptions. Immutable after load.
#[derive(Debug, Clone)]
pub struct CodeSystem {
    descriptions: BTreeMap<Code, String>,
}

impl CodeSystem {
    pub fn new(entries: impl IntoIterator<Item = (Code, String)>) -> Result<Self, CodeSystemError> {
        let mut descriptions = BTreeMap::new();
        for (line, (code, desc)) in entries.into_iter().enumerate() {
            if descriptions.insert(code.clone(), desc).is_some() {
                return Err(CodeSystemError::Duplicate {
                    line: line + 1,
                    code: code.to_string(),
                });
            }
        }
        Self::validated(descriptions)
    }

    fn validated(descriptions: BTreeMap<Code, String>) -> Result<Self, CodeSystemError> {
        if descriptions.is_empty() {
            return Err(CodeSystemError::Empty);
        }
        for code in descriptions.keys() {
            let parent = code.category();
            if !descriptions.contains_key(&parent) {
                return Err(CodeSystemError::MissingParent {
                    code: code.to_string(),
                    parent: parent.to_string(),
                });
            }
        }
        Ok(CodeSystem { descriptions })
    }

    /// Parses `CODE<TAB>description` lines. Blank lines and `#` comments are skipped.
    pub fn parse_tsv(content: &str) -> Result<Self, CodeSystemError> {
        let mut descriptions = BTreeMap::new();
        for (idx, raw_line) in content.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw_line.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (code, desc) = trimmed
                .split_once('\t')
                .ok_or(CodeSystemError::MissingTab { line })?;
            let code = Code::parse(code).map_err(|source| CodeSystemError::Code { line, source })?;
            if descriptions.contains_key(&code) {
                return Err(CodeSystemError::Duplicate {
                    line,
                    code: code.to_string(),
                });
            }
            descriptions.insert(code, desc.trim().to_string());
        }
        Self::validated(descriptions)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CodeSystemError> {
        Self::parse_tsv(&fs::read_to_string(path)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (code, desc) in &self.descriptions {
            out.push_str(code.as_str());
            out.push('\t');
            out.push_str(desc);
            out.push('\n');
        }
        out
    }

    pub fn contains(&self, code: &Code) -> bool {
        self.descriptions.contains_key(code)
    }

    pub fn description(&self, code: &Code) -> Option<&str> {
        self.descriptions.get(code).map(String::as_str)
    }

    pub fn codes(&self) -> impl Iterator<Item = &Code> {
        self.descriptions.keys()
    }

    pub fn len(&self) -> usize {
        self.descriptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptions.is_empty()
    }

    /// SHA-256 of the canonical TSV rendering.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }

    /// Categories of the default condition profiles with their titles.
    pub fn builtin() -> Self {
        Self::parse_tsv(BUILTIN_TSV).expect("builtin code system parses")
    }
}

const BUILTIN_TSV: &str = include_str!("../data/codes.tsv");

/// Ordered code universe of a model: index `i` is output head `i`.
///
/// Codes are sorted lexicographically, so the code index used for ranking
/// ties is stable across runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "Vec<Code>", into = "Vec<Code>")]
pub struct LabelSpace {
    codes: Vec<Code>,
    index: HashMap<Code, usize>,
}

impl PartialEq for LabelSpace {
    fn eq(&self, other: &Self) -> bool {
        self.codes == other.codes
    }
}

impl Eq for LabelSpace {}

impl From<Vec<Code>> for LabelSpace {
    fn from(codes: Vec<Code>) -> Self {
        LabelSpace::new(codes)
    }
}

impl From<LabelSpace> for Vec<Code> {
    fn from(space: LabelSpace) -> Self {
        space.codes
    }
}

impl LabelSpace {
    pub fn new(codes: impl IntoIterator<Item = Code>) -> Self {
        let set: BTreeSet<Code> = codes.into_iter().collect();
        Self::from_sorted(set.into_iter().collect())
    }

    fn from_sorted(codes: Vec<Code>) -> Self {
        let index = codes.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect();
        LabelSpace { codes, index }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[Code] {
        &self.codes
    }

    pub fn code(&self, idx: usize) -> &Code {
        &self.codes[idx]
    }

    pub fn index_of(&self, code: &Code) -> Option<usize> {
        self.index.get(code).copied()
    }

    /// Indices of every label code whose category falls inside `range`.
    pub fn indices_in_range(&self, range: &CodeRange) -> Vec<usize> {
        self.codes
            .iter()
            .enumerate()
            .filter(|(_, c)| range.contains(c))
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn code(s: &str) -> Code {
        Code::parse(s).unwrap()
    }

    #[test]
    fn parses_levels_and_normalizes_case() {
        let c = code("E66");
        assert_eq!((c.as_str(), c.level()), ("E66", 3));
        let c = code("e66.0");
        assert_eq!((c.as_str(), c.level()), ("E66.0", 4));
        assert_eq!(code("E66.01").level(), 5);
        assert_eq!(code("s72.0a").as_str(), "S72.0A");
    }

    #[test]
    fn rejects_malformed() {
        for raw in ["66E", "", "E6", "E66.", "E660", "E66.012", "E66-0", "1E66"] {
            assert!(
                matches!(Code::parse(raw), Err(CodeError::MalformedCode(_))),
                "{raw} should fail"
            );
        }
    }

    #[test]
    fn truncation() {
        assert_eq!(code("E66.0").truncate_to_level(3).unwrap(), code("E66"));
        assert_eq!(code("E66").truncate_to_level(3).unwrap(), code("E66"));
        assert_eq!(code("E66.01").truncate_to_level(4).unwrap(), code("E66.0"));
        assert!(matches!(
            code("I10").truncate_to_level(5),
            Err(CodeError::LevelAboveCode { .. })
        ));
    }

    #[test]
    fn chapters() {
        assert!(code("Z03").is_administrative());
        assert!(!code("E66").is_administrative());
        assert!(code("Z99.9").is_administrative());
        assert!(code("X60").is_reimbursement_excluded());
        assert!(!code("I10").is_reimbursement_excluded());
        assert!(code("Y99").is_reimbursement_excluded());
        assert!(code("V00").is_reimbursement_excluded());
        assert!(code("Y99.9").is_reimbursement_excluded());
        assert!(!code("Z00").is_reimbursement_excluded());
        assert!(!code("U99").is_reimbursement_excluded());
    }

    #[test]
    fn ranges() {
        let hyp: CodeRange = "I10-I15".parse().unwrap();
        assert!(code("I12").in_range(&hyp));
        assert!(code("I15.9").in_range(&hyp));
        assert!(!code("I16").in_range(&hyp));
        let suicide: CodeRange = "X60..X85".parse().unwrap();
        assert!(code("X85").in_range(&suicide));
        assert!(code("X60").in_range(&suicide));
        assert!(!code("X86").in_range(&suicide));
        assert!("I15-I10".parse::<CodeRange>().is_err());
        assert_eq!("E66".parse::<CodeRange>().unwrap().to_string(), "E66");
    }

    #[test]
    fn code_system_loading() {
        let cs = CodeSystem::parse_tsv("E66\tObesity\nE66.0\tObesity due to excess calories\n\nI10\tHypertension\n")
            .unwrap();
        assert_eq!(cs.len(), 3);
        assert_eq!(cs.description(&code("E66.0")), Some("Obesity due to excess calories"));
        assert!(matches!(
            CodeSystem::parse_tsv("E66\ta\nE66\tb\n"),
            Err(CodeSystemError::Duplicate { line: 2, .. })
        ));
        assert!(matches!(
            CodeSystem::parse_tsv("E66.0\ta\n"),
            Err(CodeSystemError::MissingParent { .. })
        ));
        assert!(matches!(CodeSystem::parse_tsv("\n"), Err(CodeSystemError::Empty)));
        assert!(matches!(
            CodeSystem::parse_tsv("E66 obesity\n"),
            Err(CodeSystemError::MissingTab { line: 1 })
        ));
        let again = CodeSystem::parse_tsv(&cs.to_tsv()).unwrap();
        assert_eq!(again.content_hash(), cs.content_hash());
    }

    #[test]
    fn builtin_covers_default_profiles() {
        let cs = CodeSystem::builtin();
        for p in crate::corpusgen::default_profiles() {
            assert!(cs.description(&p.code).is_some(), "{}", p.code);
        }
    }

    #[test]
    fn label_space_is_sorted_and_indexed() {
        let ls = LabelSpace::new(["I10", "E66", "A01", "E66"].iter().map(|s| code(s)));
        assert_eq!(ls.len(), 3);
        assert_eq!(ls.code(0).as_str(), "A01");
        assert_eq!(ls.index_of(&code("I10")), Some(2));
        let json = serde_json::to_string(&ls).unwrap();
        let back: LabelSpace = serde_json::from_str::<LabelSpace>(&json).unwrap();
        assert_eq!(back, ls);
    }

    fn arb_code() -> impl Strategy<Value = String> {
        "[A-Z][0-9]{2}(\\.[0-9A-Z]{1,2})?"
    }

    proptest! {
        #[test]
        fn parse_render_roundtrip(raw in arb_code()) {
            let c = Code::parse(&raw).unwrap();
            prop_assert_eq!(Code::parse(&c.to_string()).unwrap(), c.clone());
            prop_assert_eq!(Code::parse(&raw.to_lowercase()).unwrap(), c);
        }

        #[test]
        fn truncation_is_idempotent(raw in arb_code()) {
            let c = Code::parse(&raw).unwrap();
            for level in 3..=c.level() {
                let t = c.truncate_to_level(level).unwrap();
                prop_assert_eq!(t.level(), level);
                prop_assert_eq!(t.truncate_to_level(level).unwrap(), t.clone());
                prop_assert_eq!(t.category(), c.category());
            }
        }

        #[test]
        fn singleton_range_contains_itself(raw in "[A-Z][0-9]{2}") {
            let c = Code::parse(&raw).unwrap();
            prop_assert!(c.in_range(&CodeRange::new(c.clone(), c.clone()).unwrap()));
        }
    }
}
