use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "t")]
    Text,
    #[serde(rename = "a")]
    Audio,
    #[serde(rename = "v")]
    Visual,
}

pub const ALL_MODALITIES: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Visual];

impl Modality {
    pub fn index(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Audio => 1,
            Modality::Visual => 2,
        }
    }

    pub fn tag(self) -> char {
        match self {
            Modality::Text => 't',
            Modality::Audio => 'a',
            Modality::Visual => 'v',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "Text",
            Modality::Audio => "Audio",
            Modality::Visual => "Visual",
        }
    }

    pub fn from_tag(c: char) -> Option<Self> {
        match c.to_ascii_lowercase() {
            't' => Some(Modality::Text),
            'a' => Some(Modality::Audio),
            'v' => Some(Modality::Visual),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag())
    }
}

/// Non-empty subset of the three modalities, kept in canonical t, a, v order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModalitySet([bool; 3]);

impl ModalitySet {
    pub fn all() -> Self {
        Self([true; 3])
    }

    pub fn new(members: &[Modality]) -> Result<Self, Error> {
        let mut flags = [false; 3];
        for m in members {
            flags[m.index()] = true;
        }
        if !flags.iter().any(|&f| f) {
            return Err(Error::Config("modality subset must not be empty".into()));
        }
        Ok(Self(flags))
    }

    pub fn contains(&self, m: Modality) -> bool {
        self.0[m.index()]
    }

    pub fn members(&self) -> Vec<Modality> {
        ALL_MODALITIES.into_iter().filter(|m| self.contains(*m)).collect()
    }

    pub fn len(&self) -> usize {
        self.0.iter().filter(|&&f| f).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Present modalities other than `central`, in canonical order.
    pub fn auxiliaries(&self, central: Modality) -> Vec<Modality> {
        self.members().into_iter().filter(|&m| m != central).collect()
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in self.members() {
            write!(f, "{}", m.tag())?;
        }
        Ok(())
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let mut members = Vec::new();
        for c in s.chars() {
            let m = Modality::from_tag(c)
                .ok_or_else(|| Error::Config(format!("unknown modality '{c}' in \"{s}\"")))?;
            if members.contains(&m) {
                return Err(Error::Config(format!("modality '{c}' repeated in \"{s}\"")));
            }
            members.push(m);
        }
        Self::new(&members)
    }
}

impl Serialize for ModalitySet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ModalitySet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
