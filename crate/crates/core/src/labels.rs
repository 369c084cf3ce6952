//! Moral Foundations label algebra.
//!
//! A [`MoralLabelVector`] assigns one ternary [`Polarity`] to each of the five
//! foundations. Its canonical text form is a 5-character string over
//! `{v, x, n}` (virtue, vice, neither) in the fixed order
//! Care, Fairness, InGroup, Authority, Purity.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// The five moral foundations, in canonical serialization order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Foundation {
    Care,
    Fairness,
    #[serde(rename = "ingroup")]
    InGroup,
    Authority,
    Purity,
}

impl Foundation {
    pub const ALL: [Foundation; 5] = [
        Foundation::Care,
        Foundation::Fairness,
        Foundation::InGroup,
        Foundation::Authority,
        Foundation::Purity,
    ];

    pub const fn index(self) -> usize {
        self as usize
    }

    /// Lowercase identifier used in CSV headers and JSON keys.
    pub const fn key(self) -> &'static str {
        match self {
            Foundation::Care => "care",
            Foundation::Fairness => "fairness",
            Foundation::InGroup => "ingroup",
            Foundation::Authority => "authority",
            Foundation::Purity => "purity",
        }
    }

    /// Virtue/vice pair names, e.g. `Care/Harm`.
    pub const fn display_name(self) -> &'static str {
        match self {
            Foundation::Care => "Care/Harm",
            Foundation::Fairness => "Fairness/Cheating",
            Foundation::InGroup => "Loyalty/Betrayal",
            Foundation::Authority => "Authority/Subversion",
            Foundation::Purity => "Sanctity/Degradation",
        }
    }
}

impl fmt::Display for Foundation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Ternary state of one foundation for one sample.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Virtue,
    Vice,
    #[default]
    Neither,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Virtue, Polarity::Vice, Polarity::Neither];

    /// Class index used by the compass heads: virtue 0, vice 1, neither 2.
    pub const fn class_index(self) -> usize {
        match self {
            Polarity::Virtue => 0,
            Polarity::Vice => 1,
            Polarity::Neither => 2,
        }
    }

    pub const fn from_class_index(i: usize) -> Option<Polarity> {
        match i {
            0 => Some(Polarity::Virtue),
            1 => Some(Polarity::Vice),
            2 => Some(Polarity::Neither),
            _ => None,
        }
    }

    pub const fn code(self) -> char {
        match self {
            Polarity::Virtue => 'v',
            Polarity::Vice => 'x',
            Polarity::Neither => 'n',
        }
    }

    pub const fn from_code(c: char) -> Option<Polarity> {
        match c {
            'v' => Some(Polarity::Virtue),
            'x' => Some(Polarity::Vice),
            'n' => Some(Polarity::Neither),
            _ => None,
        }
    }
}

/// Per-foundation polarity for all five foundations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MoralLabelVector([Polarity; 5]);

impl MoralLabelVector {
    pub const NEUTRAL: MoralLabelVector = MoralLabelVector([Polarity::Neither; 5]);

    pub const fn new(polarities: [Polarity; 5]) -> Self {
        MoralLabelVector(polarities)
    }

    pub fn get(&self, foundation: Foundation) -> Polarity {
        self.0[foundation.index()]
    }

    pub fn set(&mut self, foundation: Foundation, polarity: Polarity) {
        self.0[foundation.index()] = polarity;
    }

    pub fn with(mut self, foundation: Foundation, polarity: Polarity) -> Self {
        self.set(foundation, polarity);
        self
    }

    pub fn polarities(&self) -> &[Polarity; 5] {
        &self.0
    }

    pub fn active_set(&self) -> ActiveSet {
        active_set(self)
    }

    /// Index in `0..243`, base-3 digits in foundation order.
    pub fn ordinal(&self) -> usize {
        self.0.iter().fold(0, |acc, p| acc * 3 + p.class_index())
    }

    pub fn from_ordinal(mut ordinal: usize) -> Option<Self> {
        if ordinal >= 243 {
            return None;
        }
        let mut out = [Polarity::Neither; 5];
        for slot in out.iter_mut().rev() {
            *slot = Polarity::from_class_index(ordinal % 3)?;
            ordinal /= 3;
        }
        Some(MoralLabelVector(out))
    }

    /// Every one of the 243 label vectors, in ordinal order.
    pub fn all() -> impl Iterator<Item = MoralLabelVector> {
        (0..243).filter_map(MoralLabelVector::from_ordinal)
    }

    pub fn encode(&self) -> String {
        self.0.iter().map(|p| p.code()).collect()
    }
}

impl fmt::Display for MoralLabelVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.0 {
            write!(f, "{}", p.code())?;
        }
        Ok(())
    }
}

impl FromStr for MoralLabelVector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_label(s)
    }
}

impl Serialize for MoralLabelVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.encode())
    }
}

impl<'de> Deserialize<'de> for MoralLabelVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_label(&s).map_err(serde::de::Error::custom)
    }
}

/// Parses the canonical 5-character encoding.
pub fn parse_label(encoded: &str) -> Result<MoralLabelVector> {
    let chars: Vec<char> = encoded.chars().collect();
    if chars.len() != 5 {
        return Err(Error::LabelFormat {
            position: chars.len().min(5),
            message: format!("expected 5 characters, got {}", chars.len()),
        });
    }
    let mut out = [Polarity::Neither; 5];
    for (i, c) in chars.into_iter().enumerate() {
        out[i] = Polarity::from_code(c).ok_or_else(|| Error::LabelFormat {
            position: i,
            message: format!("invalid character {c:?} (expected one of v, x, n)"),
        })?;
    }
    Ok(MoralLabelVector(out))
}

/// Set of non-neutral (foundation, polarity) pairs, stored as a 10-bit mask.
///
/// Bit `2f` marks virtue on foundation `f`, bit `2f + 1` marks vice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ActiveSet(u16);

impl ActiveSet {
    fn bit(foundation: Foundation, polarity: Polarity) -> Option<u16> {
        let offset = match polarity {
            Polarity::Virtue => 0,
            Polarity::Vice => 1,
            Polarity::Neither => return None,
        };
        Some(1 << (2 * foundation.index() + offset))
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn contains(&self, foundation: Foundation, polarity: Polarity) -> bool {
        Self::bit(foundation, polarity).is_some_and(|b| self.0 & b != 0)
    }

    pub fn intersection_len(&self, other: &ActiveSet) -> usize {
        (self.0 & other.0).count_ones() as usize
    }

    pub fn union_len(&self, other: &ActiveSet) -> usize {
        (self.0 | other.0).count_ones() as usize
    }

    pub fn iter(&self) -> impl Iterator<Item = (Foundation, Polarity)> + '_ {
        Foundation::ALL.into_iter().flat_map(move |f| {
            [Polarity::Virtue, Polarity::Vice]
                .into_iter()
                .filter(move |&p| self.contains(f, p))
                .map(move |p| (f, p))
        })
    }

    fn has_virtue(&self) -> bool {
        self.0 & 0b01_0101_0101 != 0
    }

    fn has_vice(&self) -> bool {
        self.0 & 0b10_1010_1010 != 0
    }
}

pub fn active_set(label: &MoralLabelVector) -> ActiveSet {
    let mask = Foundation::ALL
        .into_iter()
        .filter_map(|f| ActiveSet::bit(f, label.get(f)))
        .fold(0u16, |acc, b| acc | b);
    ActiveSet(mask)
}

/// Scaled Jaccard index `2|A∩B|/|A∪B| - 1` over active sets.
///
/// Two empty active sets compare as identical (+1).
pub fn moral_similarity(a: &MoralLabelVector, b: &MoralLabelVector) -> f64 {
    let (sa, sb) = (a.active_set(), b.active_set());
    let union = sa.union_len(&sb);
    if union == 0 {
        return 1.0;
    }
    2.0 * sa.intersection_len(&sb) as f64 / union as f64 - 1.0
}

/// True iff the active sets intersect, or both are empty (shared neutral pseudo-label).
pub fn shares_label(a: &MoralLabelVector, b: &MoralLabelVector) -> bool {
    let (sa, sb) = (a.active_set(), b.active_set());
    if sa.is_empty() && sb.is_empty() {
        return true;
    }
    sa.intersection_len(&sb) > 0
}

/// Coarse polarity category of a label vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolarityClass {
    Virtue,
    Vice,
    Neutral,
    Mixed,
}

impl PolarityClass {
    pub const ALL: [PolarityClass; 4] = [
        PolarityClass::Virtue,
        PolarityClass::Vice,
        PolarityClass::Neutral,
        PolarityClass::Mixed,
    ];

    pub const fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for PolarityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PolarityClass::Virtue => "virtue",
            PolarityClass::Vice => "vice",
            PolarityClass::Neutral => "neutral",
            PolarityClass::Mixed => "mixed",
        };
        f.write_str(s)
    }
}

impl FromStr for PolarityClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "virtue" => Ok(PolarityClass::Virtue),
            "vice" => Ok(PolarityClass::Vice),
            "neutral" => Ok(PolarityClass::Neutral),
            "mixed" => Ok(PolarityClass::Mixed),
            other => Err(Error::invalid(format!("unknown polarity class {other:?}"))),
        }
    }
}

pub fn collapse_polarity(label: &MoralLabelVector) -> PolarityClass {
    let set = label.active_set();
    match (set.has_virtue(), set.has_vice()) {
        (false, false) => PolarityClass::Neutral,
        (true, false) => PolarityClass::Virtue,
        (false, true) => PolarityClass::Vice,
        (true, true) => PolarityClass::Mixed,
    }
}
