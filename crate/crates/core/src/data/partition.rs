use serde::{Deserialize, Serialize};

use super::AnnotationRecord;

/// Index sets of a record collection split by label presence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPartition {
    /// Expression label only.
    pub expr_only: Vec<usize>,
    /// AU labels only.
    pub au_only: Vec<usize>,
    /// Both label kinds.
    pub both: Vec<usize>,
    /// Records with no label at all; never trained on.
    pub excluded: Vec<usize>,
}

impl DatasetPartition {
    pub fn admitted(&self) -> usize {
        self.expr_only.len() + self.au_only.len() + self.both.len()
    }
}

pub fn partition(records: &[AnnotationRecord]) -> DatasetPartition {
    let mut p = DatasetPartition::default();
    for (i, r) in records.iter().enumerate() {
        match (r.expr.is_some(), r.aus.is_some()) {
            (true, false) => p.expr_only.push(i),
            (false, true) => p.au_only.push(i),
            (true, true) => p.both.push(i),
            (false, false) => p.excluded.push(i),
        }
    }
    p
}
