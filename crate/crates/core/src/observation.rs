use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Location;

/// One sampling event: a location plus counts over `W` observation categories.
///
/// Counts are kept sparse (sorted category index, nonzero count) since
/// high-dimensional feature vocabularies are mostly empty at any one place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    location: Location,
    num_categories: usize,
    counts: Vec<(u32, u64)>,
}

impl ObservationRecord {
    pub fn new(location: Location, dense_counts: &[u64]) -> Result<Self> {
        if dense_counts.len() < 2 {
            return Err(Error::InvalidArgument(
                "observations need at least two categories".into(),
            ));
        }
        let counts = dense_counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(w, &c)| (w as u32, c))
            .collect();
        Ok(ObservationRecord {
            location,
            num_categories: dense_counts.len(),
            counts,
        })
    }

    /// Builds a record from `(category, count)` pairs; duplicates are summed.
    pub fn from_sparse(
        location: Location,
        num_categories: usize,
        entries: impl IntoIterator<Item = (usize, u64)>,
    ) -> Result<Self> {
        let mut counts: Vec<(u32, u64)> = Vec::new();
        for (w, c) in entries {
            if w >= num_categories {
                return Err(Error::InvalidArgument(format!(
                    "category {w} out of range for W = {num_categories}"
                )));
            }
            if c > 0 {
                counts.push((w as u32, c));
            }
        }
        counts.sort_unstable_by_key(|e| e.0);
        counts.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 += b.1;
                true
            } else {
                false
            }
        });
        Ok(ObservationRecord {
            location,
            num_categories,
            counts,
        })
    }

    pub fn location(&self) -> &Location {
        &self.location
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    /// Nonzero `(category, count)` pairs in increasing category order.
    pub fn nonzero(&self) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.counts.iter().map(|&(w, c)| (w as usize, c))
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|e| e.1).sum()
    }

    pub fn dense(&self) -> Vec<u64> {
        let mut out = vec![0; self.num_categories];
        for (w, c) in self.nonzero() {
            out[w] = c;
        }
        out
    }

    /// Counts divided by the total; `None` for an empty record.
    pub fn relative_abundance(&self) -> Option<Vec<f64>> {
        let total = self.total();
        if total == 0 {
            return None;
        }
        let mut out = vec![0.0; self.num_categories];
        for (w, c) in self.nonzero() {
            out[w] = c as f64 / total as f64;
        }
        Some(out)
    }

    pub(crate) fn heap_bytes(&self) -> usize {
        self.counts.capacity() * std::mem::size_of::<(u32, u64)>()
            + self.location.coords().len() * std::mem::size_of::<f64>()
    }
}
