use std::fmt;
use std::str::FromStr;

use crate::error::Error;

pub const EMA_DIM: usize = 12;
pub const MFCC_DIM: usize = 13;

/// The twelve EMA channels (x and y of six articulators) in canonical
/// column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArticulatorChannel {
    UlX,
    UlY,
    LlX,
    LlY,
    JawX,
    JawY,
    TtX,
    TtY,
    TbX,
    TbY,
    TdX,
    TdY,
}

use ArticulatorChannel::*;

impl ArticulatorChannel {
    pub const ALL: [ArticulatorChannel; EMA_DIM] =
        [UlX, UlY, LlX, LlY, JawX, JawY, TtX, TtY, TbX, TbY, TdX, TdY];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            UlX => "UL_x",
            UlY => "UL_y",
            LlX => "LL_x",
            LlY => "LL_y",
            JawX => "Jaw_x",
            JawY => "Jaw_y",
            TtX => "TT_x",
            TtY => "TT_y",
            TbX => "TB_x",
            TbY => "TB_y",
            TdX => "TD_x",
            TdY => "TD_y",
        }
    }
}

impl fmt::Display for ArticulatorChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArticulatorChannel {
    type Err = Error;

    /// Accepts the display names case-insensitively (`Jaw_y`, `JAW_y`, `jaw_y`).
    fn from_str(s: &str) -> Result<Self, Error> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown articulator channel `{s}`")))
    }
}

/// Space-separated channel names, e.g. `LL_y Jaw_y UL_x`.
pub fn format_channels(channels: &[ArticulatorChannel]) -> String {
    channels
        .iter()
        .map(|c| c.name())
        .collect::<Vec<_>>()
        .join(" ")
}
