//! Caption templating as discrete condition tokens.
//!
//! A caption has four slots: template, style, setting and camera. Detailed
//! captions fill every slot; the base caption keeps only the base template
//! and leaves the other slots empty. The null sequence (all slots `NULL`)
//! is reserved for the unconditional branch of guided sampling.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::numerics::Rng;
use crate::{invalid, Result};

pub const NULL: u16 = 0;
pub const EMPTY: u16 = 1;
pub const TEMPLATE_BASE: u16 = 2;
pub const TEMPLATE_DETAILED: u16 = 3;
const STYLE_BASE: u16 = 4;
pub const MAX_STYLES: usize = 6;
const SETTING_BASE: u16 = STYLE_BASE + MAX_STYLES as u16;
pub const SETTINGS: [&str; 4] = ["studio", "street", "stage", "park"];
const CAMERA_BASE: u16 = SETTING_BASE + SETTINGS.len() as u16;
pub const CAMERAS: [&str; 3] = ["fixed", "handheld", "orbit"];
pub const VOCAB_SIZE: usize = CAMERA_BASE as usize + CAMERAS.len();
pub const SLOTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DetailFlag {
    Detailed,
    Base,
}

impl DetailFlag {
    pub fn code(self) -> u8 {
        match self {
            DetailFlag::Detailed => 0,
            DetailFlag::Base => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DetailFlag::Detailed),
            1 => Some(DetailFlag::Base),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionTokens {
    ids: [u16; SLOTS],
}

impl ConditionTokens {
    pub fn null() -> Self {
        ConditionTokens { ids: [NULL; SLOTS] }
    }

    /// "A person is dancing."
    pub fn base() -> Self {
        ConditionTokens { ids: [TEMPLATE_BASE, EMPTY, EMPTY, EMPTY] }
    }

    pub fn detailed(style: usize, setting: usize, camera: usize) -> Result<Self> {
        if style >= MAX_STYLES || setting >= SETTINGS.len() || camera >= CAMERAS.len() {
            return Err(invalid(format!(
                "caption slots out of range: style {style}, setting {setting}, camera {camera}"
            )));
        }
        Ok(ConditionTokens {
            ids: [
                TEMPLATE_DETAILED,
                STYLE_BASE + style as u16,
                SETTING_BASE + setting as u16,
                CAMERA_BASE + camera as u16,
            ],
        })
    }

    pub fn from_ids(ids: [u16; SLOTS]) -> Result<Self> {
        if ids.iter().any(|&i| i as usize >= VOCAB_SIZE) {
            return Err(invalid(format!("token ids {ids:?} exceed vocabulary {VOCAB_SIZE}")));
        }
        Ok(ConditionTokens { ids })
    }

    pub fn ids(&self) -> [u16; SLOTS] {
        self.ids
    }

    pub fn is_null(&self) -> bool {
        self.ids == [NULL; SLOTS]
    }

    pub fn detail_flag(&self) -> DetailFlag {
        if self.ids[0] == TEMPLATE_DETAILED {
            DetailFlag::Detailed
        } else {
            DetailFlag::Base
        }
    }

    pub fn style(&self) -> Option<usize> {
        let s = self.ids[1];
        (STYLE_BASE..SETTING_BASE).contains(&s).then(|| (s - STYLE_BASE) as usize)
    }

    /// Token counts over the vocabulary, the input of the condition embedding.
    pub fn histogram(&self) -> [u8; VOCAB_SIZE] {
        let mut h = [0u8; VOCAB_SIZE];
        for &i in &self.ids {
            h[i as usize] += 1;
        }
        h
    }
}

impl fmt::Display for ConditionTokens {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_null() {
            return f.write_str("<null>");
        }
        match self.detail_flag() {
            DetailFlag::Base => f.write_str("a person is dancing"),
            DetailFlag::Detailed => {
                let setting = (self.ids[2] - SETTING_BASE) as usize;
                let camera = (self.ids[3] - CAMERA_BASE) as usize;
                write!(
                    f,
                    "a dancer performs style {} in a {} setting, {} camera",
                    self.style().unwrap_or(0),
                    SETTINGS.get(setting).unwrap_or(&"?"),
                    CAMERAS.get(camera).unwrap_or(&"?")
                )
            }
        }
    }
}

/// With probability `p_base` replace the caption by the base caption.
pub fn diversify_caption(c: ConditionTokens, p_base: f64, rng: &mut Rng) -> ConditionTokens {
    if rng.bernoulli(p_base) {
        ConditionTokens::base()
    } else {
        c
    }
}
