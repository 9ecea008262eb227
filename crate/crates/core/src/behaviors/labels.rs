// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::vocab::ToyVocab;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn flip(self) -> Self {
        match self {
            Polarity::Negative => Polarity::Positive,
            Polarity::Positive => Polarity::Negative,
        }
    }
}

/// The five toy datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DatasetTag {
    S,
    E,
    L,
    M,
    #[serde(rename = "LIE")]
    Lie,
}

impl DatasetTag {
    /// Datasets the meta-model may be trained on.
    pub const TRAINABLE: [DatasetTag; 4] = [DatasetTag::S, DatasetTag::E, DatasetTag::L, DatasetTag::M];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetTag::S => "S",
            DatasetTag::E => "E",
            DatasetTag::L => "L",
            DatasetTag::M => "M",
            DatasetTag::Lie => "LIE",
        }
    }
}

impl fmt::Display for DatasetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "S" => Ok(DatasetTag::S),
            "E" => Ok(DatasetTag::E),
            "L" => Ok(DatasetTag::L),
            "M" => Ok(DatasetTag::M),
            "LIE" => Ok(DatasetTag::Lie),
            other => Err(Error::Config(format!("unknown dataset tag {other:?}"))),
        }
    }
}

/// What the input-model is conditioned to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "tag")]
pub enum BehaviorLabel {
    #[serde(rename = "S")]
    Sentiment { polarity: Polarity },
    #[serde(rename = "E")]
    Emotion { emotion: usize },
    #[serde(rename = "L")]
    Language { language: usize },
    #[serde(rename = "M")]
    Multilingual { language: usize, polarity: Polarity },
    #[serde(rename = "LIE")]
    Lying { lying: bool },
}

impl BehaviorLabel {
    pub fn tag(&self) -> DatasetTag {
        match self {
            BehaviorLabel::Sentiment { .. } => DatasetTag::S,
            BehaviorLabel::Emotion { .. } => DatasetTag::E,
            BehaviorLabel::Language { .. } => DatasetTag::L,
            BehaviorLabel::Multilingual { .. } => DatasetTag::M,
            BehaviorLabel::Lying { .. } => DatasetTag::Lie,
        }
    }

    pub fn validate(&self, vocab: &ToyVocab) -> Result<()> {
        let ok = match *self {
            BehaviorLabel::Emotion { emotion } => emotion < vocab.emotions(),
            BehaviorLabel::Language { language } | BehaviorLabel::Multilingual { language, .. } => {
                language < vocab.languages()
            }
            BehaviorLabel::Sentiment { .. } | BehaviorLabel::Lying { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("{self:?} is out of range for this vocabulary")))
        }
    }
}
