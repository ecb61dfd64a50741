// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeSet, HashMap};
use std::sync::Mutex;

use crate::model::{EviId, MplsLabel, ModelError};

#[derive(Debug, Default)]
struct Pool {
    by_evi: HashMap<EviId, MplsLabel>,
    in_use: BTreeSet<u32>,
}

/// Per-EVI MPLS label allocator over `[base, base + size)`.
///
/// Always hands out the lowest free label. Calls are serialized internally,
/// so one allocator can be shared between tasks.
#[derive(Debug)]
pub struct LabelAllocator {
    base: u32,
    size: u32,
    pool: Mutex<Pool>,
}

impl LabelAllocator {
    pub fn new(base: u32, size: u32) -> Result<Self, ModelError> {
        let end = u64::from(base) + u64::from(size);
        if size == 0 || end > u64::from(MplsLabel::MAX) + 1 {
            return Err(ModelError::InvalidArgument(format!(
                "label pool [{base}, {end}) outside the 20-bit label space"
            )));
        }
        Ok(Self { base, size, pool: Mutex::default() })
    }

    /// Allocates a fresh label. A second call for an EVI that already holds
    /// one fails with `AlreadyAllocated`, which carries the held label.
    pub fn allocate(&self, evi_id: EviId) -> Result<MplsLabel, ModelError> {
        let mut pool = self.pool.lock().unwrap();
        if let Some(label) = pool.by_evi.get(&evi_id) {
            return Err(ModelError::AlreadyAllocated { evi_id, label: *label });
        }
        let value = lowest_free(&pool.in_use, self.base, self.size)
            .ok_or(ModelError::ResourceExhausted)?;
        let label = MplsLabel::new(value)?;
        pool.in_use.insert(value);
        pool.by_evi.insert(evi_id, label);
        Ok(label)
    }

    /// Idempotent form: returns the label already held by `evi_id`, if any.
    pub fn get_or_allocate(&self, evi_id: EviId) -> Result<MplsLabel, ModelError> {
        match self.allocate(evi_id) {
            Err(ModelError::AlreadyAllocated { label, .. }) => Ok(label),
            other => other,
        }
    }

    pub fn release(&self, evi_id: EviId) -> Option<MplsLabel> {
        let mut pool = self.pool.lock().unwrap();
        let label = pool.by_evi.remove(&evi_id)?;
        pool.in_use.remove(&label.value());
        Some(label)
    }

    pub fn label_of(&self, evi_id: EviId) -> Option<MplsLabel> {
        self.pool.lock().unwrap().by_evi.get(&evi_id).copied()
    }

    pub fn live(&self) -> Vec<(EviId, MplsLabel)> {
        let pool = self.pool.lock().unwrap();
        pool.by_evi.iter().map(|(e, l)| (*e, *l)).collect()
    }
}

fn lowest_free(in_use: &BTreeSet<u32>, base: u32, size: u32) -> Option<u32> {
    let mut candidate = base;
    for used in in_use.range(base..) {
        if *used != candidate {
            break;
        }
        candidate += 1;
    }
    (candidate - base < size).then_some(candidate)
}
