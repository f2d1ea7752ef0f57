//! Synthetic token tasks with programmatic rewards, and exact tabular MDPs.

mod tabular;
mod task;

pub use tabular::{
    bellman_residual, enumerate_episodes, solve_q, value_iteration, Backup, MdpEpisode, QTable,
    TabularMdp, TabularPolicy,
};
pub use task::{enumerate_responses, Episode, LenRange, TaskKind, TokenTask};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub type Token = u32;

/// Token id space: four reserved ids followed by payload ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    pub size: usize,
    pub bos: Token,
    pub eos: Token,
    pub pad: Token,
    pub sep: Token,
}

impl Vocabulary {
    pub const RESERVED: usize = 4;

    /// Reserved ids 0..4 (bos, eos, pad, sep) then `payload` payload ids.
    pub fn with_payload(payload: usize) -> Self {
        Self {
            size: Self::RESERVED + payload,
            bos: 0,
            eos: 1,
            pad: 2,
            sep: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ids = [self.bos, self.eos, self.pad, self.sep];
        for (i, a) in ids.iter().enumerate() {
            if *a as usize >= self.size {
                return Err(LabError::Config(format!(
                    "reserved id {a} >= vocabulary size {}",
                    self.size
                )));
            }
            if ids[i + 1..].contains(a) {
                return Err(LabError::Config(format!("reserved id {a} used twice")));
            }
        }
        if self.payload_tokens().is_empty() {
            return Err(LabError::Config("vocabulary has no payload tokens".into()));
        }
        Ok(())
    }

    pub fn is_reserved(&self, t: Token) -> bool {
        t == self.bos || t == self.eos || t == self.pad || t == self.sep
    }

    /// Payload ids in increasing order.
    pub fn payload_tokens(&self) -> Vec<Token> {
        (0..self.size as Token)
            .filter(|t| !self.is_reserved(*t))
            .collect()
    }

    pub fn check(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|t| **t as usize >= self.size) {
            Some(t) => Err(LabError::TokenOutOfVocab {
                token: *t,
                size: self.size,
            }),
            None => Ok(()),
        }
    }

    /// Short stable hash identifying the id layout, stored in checkpoints.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in [
            self.size as u64,
            self.bos as u64,
            self.eos as u64,
            self.pad as u64,
            self.sep as u64,
        ] {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_must_be_distinct_and_in_range() {
        assert!(Vocabulary::with_payload(3).validate().is_ok());
        let mut v = Vocabulary::with_payload(3);
        v.sep = v.bos;
        assert!(v.validate().is_err());
        let mut v = Vocabulary::with_payload(3);
        v.pad = 50;
        assert!(v.validate().is_err());
        assert!(Vocabulary::with_payload(0).validate().is_err());
    }

    #[test]
    fn payload_excludes_reserved() {
        let v = Vocabulary::with_payload(3);
        assert_eq!(v.payload_tokens(), vec![4, 5, 6]);
        assert!(v.check(&[4, 6]).is_ok());
        assert!(matches!(
            v.check(&[7]),
            Err(LabError::TokenOutOfVocab { token: 7, .. })
        ));
    }
}
