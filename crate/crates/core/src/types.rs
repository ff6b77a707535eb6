//! Opaque identifier newtypes and the raw interaction record.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Opaque non-negative user identifier, as found in the input log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UserId(pub u32);

/// Opaque non-negative item identifier, as found in the input log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemId(pub u32);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// One implicit-feedback event: user `user` interacted with item `item` at
/// `timestamp` (seconds). Presence of a record is a positive signal; absence
/// of a (user, item) pair carries an implicit negative label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub timestamp: i64,
}

impl Interaction {
    /// Total order used everywhere: chronological, with (user, item) breaking
    /// timestamp ties so cuts at fixed positions are deterministic.
    pub fn sort_key(&self) -> (i64, UserId, ItemId) {
        (self.timestamp, self.user, self.item)
    }
}
