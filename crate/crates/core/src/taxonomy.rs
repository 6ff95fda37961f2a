//! Two-level tag hierarchy, output slot layouts and fine→coarse derivation.
//!
//! The hierarchy is data: a small text file where each unindented line opens
//! a coarse category and the indented lines under it are its fine children.
//! The bundled default has 8 coarse categories and 23 fine tags.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const N_COARSE: usize = 8;
pub const N_FINE: usize = 23;

const DEFAULT_TAXONOMY: &str = include_str!("../assets/taxonomy.txt");

/// Coarse/fine tag hierarchy.
///
/// Fine tags are numbered in declaration order across stanzas; a coarse
/// category gets an extra "other/unknown" fine class iff it has at least two
/// fine children.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    coarse: Vec<String>,
    fine: Vec<String>,
    parent: Vec<usize>,
    children: Vec<Vec<usize>>,
    other: Vec<usize>,
}

impl Taxonomy {
    /// The bundled 8/23 taxonomy.
    pub fn bundled() -> Self {
        Self::parse(DEFAULT_TAXONOMY).expect("bundled taxonomy is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses a taxonomy file and enforces the 8 coarse / 23 fine shape.
    pub fn parse(text: &str) -> Result<Self> {
        let tax = Self::parse_unchecked(text)?;
        if tax.coarse.len() != N_COARSE {
            return Err(Error::Taxonomy(format!(
                "coarse tag count is {}, expected {N_COARSE}",
                tax.coarse.len()
            )));
        }
        if tax.fine.len() != N_FINE {
            return Err(Error::Taxonomy(format!(
                "fine tag count is {}, expected {N_FINE}",
                tax.fine.len()
            )));
        }
        Ok(tax)
    }

    /// Parses a taxonomy of any size, checking only structure: unique
    /// names, one parent per fine tag and at least one child per category.
    pub fn parse_unchecked(text: &str) -> Result<Self> {
        let mut coarse: Vec<String> = Vec::new();
        let mut fine: Vec<String> = Vec::new();
        let mut parent = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("");
            let name = line.trim();
            if name.is_empty() {
                continue;
            }
            if name.contains(char::is_whitespace) || name.contains(',') {
                return Err(Error::Taxonomy(format!(
                    "line {}: tag name {name:?} contains whitespace or a comma",
                    lineno + 1
                )));
            }
            let indented = line.starts_with(|c: char| c.is_whitespace());
            if indented {
                if coarse.is_empty() {
                    return Err(Error::Taxonomy(format!(
                        "line {}: fine tag {name:?} has no coarse parent",
                        lineno + 1
                    )));
                }
                if fine.iter().any(|f| f == name) {
                    return Err(Error::Taxonomy(format!(
                        "line {}: duplicate fine tag {name:?} (a fine tag needs exactly one parent)",
                        lineno + 1
                    )));
                }
                fine.push(name.to_string());
                parent.push(coarse.len() - 1);
            } else {
                if coarse.iter().any(|c| c == name) {
                    return Err(Error::Taxonomy(format!(
                        "line {}: duplicate coarse tag {name:?}",
                        lineno + 1
                    )));
                }
                coarse.push(name.to_string());
            }
        }
        let mut children = vec![Vec::new(); coarse.len()];
        for (i, &p) in parent.iter().enumerate() {
            children[p].push(i);
        }
        if let Some(c) = children.iter().position(Vec::is_empty) {
            return Err(Error::Taxonomy(format!(
                "coarse tag {:?} has no fine children",
                coarse[c]
            )));
        }
        let other = (0..coarse.len()).filter(|&c| children[c].len() >= 2).collect();
        Ok(Self {
            coarse,
            fine,
            parent,
            children,
            other,
        })
    }

    pub fn coarse_tags(&self) -> &[String] {
        &self.coarse
    }

    pub fn fine_tags(&self) -> &[String] {
        &self.fine
    }

    pub fn n_coarse(&self) -> usize {
        self.coarse.len()
    }

    pub fn n_fine(&self) -> usize {
        self.fine.len()
    }

    /// Coarse index of fine tag `i`.
    pub fn parent(&self, fine: usize) -> usize {
        self.parent[fine]
    }

    pub fn children(&self, coarse: usize) -> &[usize] {
        &self.children[coarse]
    }

    /// Coarse categories that carry an other/unknown class, in coarse order.
    pub fn other_unknown(&self) -> &[usize] {
        &self.other
    }

    pub fn n_other(&self) -> usize {
        self.other.len()
    }

    /// Index into the other/unknown block for a coarse category, if any.
    pub fn other_slot_of(&self, coarse: usize) -> Option<usize> {
        self.other.iter().position(|&c| c == coarse)
    }

    pub fn coarse_index(&self, name: &str) -> Option<usize> {
        self.coarse.iter().position(|c| c == name)
    }

    pub fn fine_index(&self, name: &str) -> Option<usize> {
        self.fine.iter().position(|f| f == name)
    }

    /// Derives coarse scores as the maximum over each category's children.
    pub fn fine_to_coarse(&self, fine_scores: &[f32]) -> Vec<f32> {
        assert_eq!(fine_scores.len(), self.n_fine(), "fine score vector length");
        self.children
            .iter()
            .map(|kids| kids.iter().map(|&i| fine_scores[i]).fold(0.0f32, f32::max))
            .collect()
    }

    pub fn layout(&self, system: System) -> OutputLayout {
        OutputLayout::new(system, self)
    }

    /// Canonical text form; parsing it yields an equal taxonomy.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (c, name) in self.coarse.iter().enumerate() {
            out.push_str(name);
            out.push('\n');
            for &f in &self.children[c] {
                out.push_str("    ");
                out.push_str(&self.fine[f]);
                out.push('\n');
            }
        }
        out
    }

    /// Hex SHA-256 of [`to_text`](Self::to_text).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Model variant: which embeddings are fused and how many outputs exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum System {
    /// Specific + metadata embeddings, coarse+fine outputs.
    One,
    /// Specific + generic + metadata embeddings, coarse+fine outputs.
    Two,
    /// As `Two`, plus one other/unknown output per multi-child category.
    Three,
}

impl System {
    pub fn id(self) -> u32 {
        match self {
            System::One => 1,
            System::Two => 2,
            System::Three => 3,
        }
    }

    pub fn has_generic_branch(self) -> bool {
        !matches!(self, System::One)
    }

    pub fn has_other_slots(self) -> bool {
        matches!(self, System::Three)
    }
}

impl TryFrom<u32> for System {
    type Error = Error;

    fn try_from(id: u32) -> Result<Self> {
        match id {
            1 => Ok(System::One),
            2 => Ok(System::Two),
            3 => Ok(System::Three),
            other => Err(Error::UnknownSystem(other)),
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())
    }
}

/// Assignment of tag names to output slots.
///
/// Coarse tags occupy slots `0..8`, fine tags `8..31`, and for system 3
/// the other/unknown classes `31..37`. Slot names carry a `coarse:`,
/// `fine:` or `other:` prefix, since a coarse and a fine tag may share a name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutputLayout {
    system: System,
    n_coarse: usize,
    n_fine: usize,
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl OutputLayout {
    pub fn new(system: System, tax: &Taxonomy) -> Self {
        let mut names: Vec<String> = tax.coarse.iter().map(|c| format!("coarse:{c}")).collect();
        names.extend(tax.fine.iter().map(|f| format!("fine:{f}")));
        if system.has_other_slots() {
            names.extend(tax.other.iter().map(|&c| format!("other:{}", tax.coarse[c])));
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            system,
            n_coarse: tax.n_coarse(),
            n_fine: tax.n_fine(),
            names,
            index,
        }
    }

    pub fn system(&self) -> System {
        self.system
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn coarse_range(&self) -> std::ops::Range<usize> {
        0..self.n_coarse
    }

    pub fn fine_range(&self) -> std::ops::Range<usize> {
        self.n_coarse..self.n_coarse + self.n_fine
    }

    pub fn other_range(&self) -> std::ops::Range<usize> {
        self.n_coarse + self.n_fine..self.dim()
    }
}

/// Per-clip targets.
///
/// Values are usually 0/1 but may be soft (mixup, relabeling). A fine entry
/// whose `fine_mask` is 0 is unknown and must be ignored by consumers.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVector {
    pub coarse: Vec<f32>,
    pub fine: Vec<f32>,
    pub fine_mask: Vec<f32>,
    pub other: Option<Vec<f32>>,
}

impl LabelVector {
    pub fn zeros(tax: &Taxonomy) -> Self {
        Self {
            coarse: vec![0.0; tax.n_coarse()],
            fine: vec![0.0; tax.n_fine()],
            fine_mask: vec![1.0; tax.n_fine()],
            other: None,
        }
    }

    /// Builds a fully observed label from a set of positive fine tags,
    /// deriving the coarse level.
    pub fn from_fine(tax: &Taxonomy, positives: &[usize]) -> Self {
        let mut label = Self::zeros(tax);
        for &i in positives {
            label.fine[i] = 1.0;
        }
        label.coarse = tax.fine_to_coarse(&label.fine);
        label
    }

    /// `fine[i] = 1 ⇒ coarse[parent(i)] = 1` for every observed fine tag.
    pub fn is_hierarchy_consistent(&self, tax: &Taxonomy) -> bool {
        (0..tax.n_fine()).all(|i| {
            self.fine_mask[i] == 0.0 || self.fine[i] < 0.5 || self.coarse[tax.parent(i)] >= 0.5
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_has_expected_shape() {
        let tax = Taxonomy::bundled();
        assert_eq!(tax.n_coarse(), 8);
        assert_eq!(tax.n_fine(), 23);
        assert_eq!(tax.n_other(), 6);
        let singletons = (0..8).filter(|&c| tax.children(c).len() == 1).count();
        assert_eq!(8 - singletons, 6);
        for c in 0..8 {
            assert!(!tax.children(c).is_empty());
        }
    }

    #[test]
    fn fine_count_error() {
        let text = Taxonomy::bundled().to_text().replace("    dog-barking-whining\n", "");
        let text = text.replace("dog\n", "");
        let err = Taxonomy::parse(&text).unwrap_err().to_string();
        assert!(err.contains("coarse tag count"), "{err}");

        let text = Taxonomy::bundled().to_text().replace("    siren\n", "");
        let err = Taxonomy::parse(&text).unwrap_err().to_string();
        assert!(err.contains("fine tag count"), "{err}");
    }

    #[test]
    fn structural_errors() {
        assert!(Taxonomy::parse_unchecked("  orphan\n").is_err());
        assert!(Taxonomy::parse_unchecked("a\n  x\nb\n  x\n").is_err());
        assert!(Taxonomy::parse_unchecked("a\n  x\na\n  y\n").is_err());
        assert!(Taxonomy::parse_unchecked("a\n  x\nb\n").is_err());
        let ok = Taxonomy::parse_unchecked("# c\na\n  x # trailing\n  y\nb\n  z\n").unwrap();
        assert_eq!(ok.n_fine(), 3);
        assert_eq!(ok.other_unknown(), &[0]);
    }

    #[test]
    fn layout_dims() {
        let tax = Taxonomy::bundled();
        assert_eq!(tax.layout(System::One).dim(), 31);
        assert_eq!(tax.layout(System::Two).dim(), 31);
        assert_eq!(tax.layout(System::Three).dim(), 37);
        assert!(System::try_from(4).is_err());
        let l = tax.layout(System::Three);
        assert_eq!(l.coarse_range(), 0..8);
        assert_eq!(l.fine_range(), 8..31);
        assert_eq!(l.other_range(), 31..37);
        for slot in 0..l.dim() {
            assert_eq!(l.slot(l.name(slot)), Some(slot));
        }
    }

    #[test]
    fn coarsening_takes_the_max() {
        let tax = Taxonomy::bundled();
        assert_eq!(tax.fine_to_coarse(&[0.0; 23]), vec![0.0; 8]);
        let mut fine = [0.0; 23];
        for (&i, v) in tax.children(0).iter().zip([0.2, 0.7, 0.1]) {
            fine[i] = v;
        }
        let coarse = tax.fine_to_coarse(&fine);
        assert_eq!(coarse[0], 0.7);
        assert!(coarse[1..].iter().all(|&c| c == 0.0));
    }

    #[test]
    fn text_round_trip() {
        let tax = Taxonomy::bundled();
        assert_eq!(Taxonomy::parse(&tax.to_text()).unwrap(), tax);
    }
}
