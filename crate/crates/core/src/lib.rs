//! Two-party secure social recommendation.
//!
//! Party `P0` holds a rating matrix, party `P1` holds a social graph. The
//! social-regularization term of the gradient is computed jointly with
//! additive secret sharing over `Z_{2^64}`, Paillier encryption and private
//! information retrieval; everything else stays local to `P0`.

pub mod ahe;
pub mod dataio;
pub mod error;
pub mod mpcshare;
pub mod pir;
pub mod recommender;
pub mod ring;
pub mod securemm;
pub mod sparsela;
pub mod transport;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};

/// Protocol role. `P0` is the rating platform, `P1` the social platform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PartyId {
    P0,
    P1,
}

impl PartyId {
    pub fn from_index(index: usize) -> Result<Self> {
        match index {
            0 => Ok(PartyId::P0),
            1 => Ok(PartyId::P1),
            other => Err(Error::Usage(format!("party id must be 0 or 1, got {other}"))),
        }
    }

    pub fn index(self) -> usize {
        match self {
            PartyId::P0 => 0,
            PartyId::P1 => 1,
        }
    }

    pub fn peer(self) -> PartyId {
        match self {
            PartyId::P0 => PartyId::P1,
            PartyId::P1 => PartyId::P0,
        }
    }
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.index())
    }
}
