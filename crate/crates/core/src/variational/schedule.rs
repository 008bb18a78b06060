use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four decaying spreads used for online learning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpreadKind {
    BxCnnB,
    BpCnnB,
    BxCnnC,
    BpCnnC,
}

/// Spread at `t` assimilation windows after the switch to joint estimation.
pub fn schedule_spread(kind: SpreadKind, t: f64) -> f64 {
    match kind {
        SpreadKind::BxCnnB => 0.28 + 0.15 * (-t / 256.0).exp(),
        SpreadKind::BpCnnB => (0.001 + 0.1 * (-t / 1024.0).exp()).min(0.05),
        SpreadKind::BxCnnC => 0.26 + 0.20 * (-t / 256.0).exp(),
        SpreadKind::BpCnnC => (0.01 + 0.05 * (-t / 3072.0).exp()).min(0.05),
    }
}

/// State and parameter background spreads as functions of the window count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Schedule {
    Fixed { bx: f64, bp: f64 },
    CnnB,
    CnnC,
}

impl Schedule {
    pub fn bx(&self, t: usize) -> f64 {
        match self {
            Self::Fixed { bx, .. } => *bx,
            Self::CnnB => schedule_spread(SpreadKind::BxCnnB, t as f64),
            Self::CnnC => schedule_spread(SpreadKind::BxCnnC, t as f64),
        }
    }

    pub fn bp(&self, t: usize) -> f64 {
        match self {
            Self::Fixed { bp, .. } => *bp,
            Self::CnnB => schedule_spread(SpreadKind::BpCnnB, t as f64),
            Self::CnnC => schedule_spread(SpreadKind::BpCnnC, t as f64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Self::Fixed { bx, bp } = self {
            if !(*bx > 0.0 && *bp > 0.0) {
                return Err(Error::Config(format!("spreads must be positive, got bx={bx}, bp={bp}")));
            }
        }
        Ok(())
    }
}
