use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Visual,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Visual, Modality::Text];

    pub fn letter(self) -> char {
        match self {
            Modality::Audio => 'a',
            Modality::Visual => 'v',
            Modality::Text => 't',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
            Modality::Text => "text",
        }
    }

    fn bit(self) -> u8 {
        match self {
            Modality::Audio => 1,
            Modality::Visual => 2,
            Modality::Text => 4,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Non-empty subset of {audio, visual, text}, written as e.g. `"avt"` or `"at"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModalityMask(u8);

impl ModalityMask {
    pub const ALL: ModalityMask = ModalityMask(7);

    pub fn new(modalities: &[Modality]) -> Result<Self, Error> {
        let bits = modalities.iter().fold(0, |acc, m| acc | m.bit());
        if bits == 0 {
            return Err(Error::InvalidArgument("modality mask must not be empty".into()));
        }
        Ok(Self(bits))
    }

    pub fn only(m: Modality) -> Self {
        Self(m.bit())
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & m.bit() != 0
    }

    /// Active modalities in canonical a, v, t order.
    pub fn modalities(self) -> Vec<Modality> {
        Modality::ALL.into_iter().filter(|&m| self.contains(m)).collect()
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    /// All seven non-empty masks.
    pub fn all_nonempty() -> Vec<ModalityMask> {
        (1..8).map(ModalityMask).collect()
    }
}

impl Default for ModalityMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in self.modalities() {
            write!(f, "{}", m.letter())?;
        }
        Ok(())
    }
}

impl FromStr for ModalityMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let mut mods = Vec::new();
        for c in s.chars() {
            let m = match c {
                'a' => Modality::Audio,
                'v' => Modality::Visual,
                't' | 'l' => Modality::Text,
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown modality '{c}' in \"{s}\" (expected letters from a, v, t)"
                    )))
                }
            };
            if mods.contains(&m) {
                return Err(Error::InvalidArgument(format!(
                    "modality '{c}' repeated in \"{s}\""
                )));
            }
            mods.push(m);
        }
        ModalityMask::new(&mods)
    }
}

impl Serialize for ModalityMask {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ModalityMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display() {
        let m: ModalityMask = "ta".parse().unwrap();
        assert_eq!(m.to_string(), "at");
        assert_eq!(m.modalities(), vec![Modality::Audio, Modality::Text]);
        assert!("".parse::<ModalityMask>().is_err());
        assert!("ax".parse::<ModalityMask>().is_err());
        assert!("aa".parse::<ModalityMask>().is_err());
        assert_eq!(ModalityMask::all_nonempty().len(), 7);
    }
}
