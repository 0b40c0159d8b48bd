use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest number of players a coalition can address.
pub const MAX_PLAYERS: usize = 63;

/// A subset of player indices `0..k`, stored as a bit set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "Vec<usize>", try_from = "Vec<usize>")]
pub struct Coalition(u64);

impl Coalition {
    pub const EMPTY: Coalition = Coalition(0);

    pub fn full(k: usize) -> Self {
        assert!(k <= MAX_PLAYERS, "arity {k} exceeds {MAX_PLAYERS}");
        Coalition(if k == 0 { 0 } else { u64::MAX >> (64 - k) })
    }

    pub fn from_mask(mask: u64) -> Self {
        Coalition(mask)
    }

    /// Builds a coalition from player indices, rejecting duplicates and
    /// indices outside `0..k`.
    pub fn from_members(members: &[usize], k: usize) -> Result<Self> {
        let mut mask = 0u64;
        for &i in members {
            if i >= k || i >= MAX_PLAYERS {
                return Err(Error::InvalidConfig(format!(
                    "player {i} outside 0..{k}"
                )));
            }
            if mask & (1 << i) != 0 {
                return Err(Error::InvalidConfig(format!("duplicate player {i}")));
            }
            mask |= 1 << i;
        }
        Ok(Coalition(mask))
    }

    pub fn mask(self) -> u64 {
        self.0
    }

    pub fn contains(self, player: usize) -> bool {
        player < 64 && self.0 & (1 << player) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn with(self, player: usize) -> Self {
        Coalition(self.0 | (1 << player))
    }

    pub fn complement(self, k: usize) -> Self {
        Coalition(Coalition::full(k).0 & !self.0)
    }

    /// Sorted member indices.
    pub fn members(self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut rest = self.0;
        while rest != 0 {
            let i = rest.trailing_zeros() as usize;
            out.push(i);
            rest &= rest - 1;
        }
        out
    }
}

impl From<Coalition> for Vec<usize> {
    fn from(c: Coalition) -> Self {
        c.members()
    }
}

impl TryFrom<Vec<usize>> for Coalition {
    type Error = Error;

    fn try_from(members: Vec<usize>) -> Result<Self> {
        Coalition::from_members(&members, MAX_PLAYERS)
    }
}

/// A coalition together with the oracle's value vector for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedCoalition {
    pub coalition: Coalition,
    pub value: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn members_roundtrip() {
        let c = Coalition::from_members(&[4, 0, 2], 5).unwrap();
        assert_eq!(c.members(), vec![0, 2, 4]);
        assert_eq!(c.len(), 3);
        assert_eq!(c.complement(5).members(), vec![1, 3]);
    }

    #[test]
    fn rejects_duplicates_and_out_of_range() {
        assert!(Coalition::from_members(&[1, 1], 3).is_err());
        assert!(Coalition::from_members(&[3], 3).is_err());
    }

    #[test]
    fn full_set() {
        assert_eq!(Coalition::full(3).members(), vec![0, 1, 2]);
        assert_eq!(Coalition::full(0), Coalition::EMPTY);
        assert_eq!(Coalition::full(63).len(), 63);
    }
}
