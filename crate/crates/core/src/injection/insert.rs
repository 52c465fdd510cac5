//! Placing augmentation rows into a word-embedding sequence.

use crate::autodiff::Var;
use crate::error::{Result, VawiError};

use super::config::InsertionPosition;

/// Where every row ends up after insertion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMap {
    /// New index of each original row.
    pub original: Vec<usize>,
    /// New index of each inserted row.
    pub inserted: Vec<usize>,
}

impl IndexMap {
    pub fn len(&self) -> usize {
        self.original.len() + self.inserted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// For each new slot, the row of `[originals; inserted]` it holds.
    pub fn gather_order(&self) -> Vec<usize> {
        let m = self.original.len();
        let mut order = vec![0; self.len()];
        for (i, &slot) in self.original.iter().enumerate() {
            order[slot] = i;
        }
        for (j, &slot) in self.inserted.iter().enumerate() {
            order[slot] = m + j;
        }
        order
    }
}

/// Layout of `m` original rows plus one inserted row per source position.
pub fn injection_layout(m: usize, source_positions: &[usize], mode: InsertionPosition) -> Result<IndexMap> {
    if let Some(&bad) = source_positions.iter().find(|&&p| p >= m) {
        return Err(VawiError::Contract(format!(
            "augmentation source position {bad} outside a {m}-token sentence"
        )));
    }
    let l = source_positions.len();
    Ok(match mode {
        InsertionPosition::None => IndexMap {
            original: (0..m).collect(),
            inserted: Vec::new(),
        },
        InsertionPosition::BeforeText => IndexMap {
            original: (l..l + m).collect(),
            inserted: (0..l).collect(),
        },
        InsertionPosition::AfterText => IndexMap {
            original: (0..m).collect(),
            inserted: (m..m + l).collect(),
        },
        InsertionPosition::AfterVh => {
            let mut original = Vec::with_capacity(m);
            let mut inserted = vec![0; l];
            let mut slot = 0;
            for i in 0..m {
                original.push(slot);
                slot += 1;
                for (j, _) in source_positions.iter().enumerate().filter(|(_, &p)| p == i) {
                    inserted[j] = slot;
                    slot += 1;
                }
            }
            IndexMap { original, inserted }
        }
    })
}

/// Inserts `rows` (`l × d`) into `words` (`m × d`). Mode `none` returns
/// `words` itself.
pub fn inject_embeddings<'t>(
    words: &Var<'t>,
    rows: &Var<'t>,
    source_positions: &[usize],
    mode: InsertionPosition,
) -> Result<(Var<'t>, IndexMap)> {
    let m = words.value().rows();
    let map = injection_layout(m, source_positions, mode)?;
    if mode == InsertionPosition::None {
        return Ok((*words, map));
    }
    if rows.value().rows() != source_positions.len() {
        return Err(VawiError::dim(
            "inject_embeddings",
            rows.value().shape(),
            &[source_positions.len(), words.value().cols()],
        ));
    }
    let stacked = words.tape().concat_rows(&[*words, *rows])?;
    Ok((stacked.gather_rows(&map.gather_order())?, map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    fn rows(tape: &Tape, n: usize, base: f64) -> Var<'_> {
        tape.constant(Tensor::new(vec![n, 2], (0..2 * n).map(|i| base + i as f64).collect()).unwrap())
    }

    #[test]
    fn none_is_identity() {
        let tape = Tape::new();
        let w = rows(&tape, 3, 0.0);
        let (out, map) = inject_embeddings(&w, &rows(&tape, 1, 100.0), &[1], InsertionPosition::None).unwrap();
        assert_eq!(out.id(), w.id());
        assert_eq!(map.original, [0, 1, 2]);
    }

    #[test]
    fn after_vh_single() {
        let tape = Tape::new();
        let w = rows(&tape, 3, 0.0);
        let r = rows(&tape, 1, 100.0);
        let (out, map) = inject_embeddings(&w, &r, &[1], InsertionPosition::AfterVh).unwrap();
        assert_eq!(out.value().rows(), 4);
        assert_eq!(map.inserted, [2]);
        assert_eq!(out.value().row(2), r.value().row(0));
    }

    #[test]
    fn blocks_and_errors() {
        let layout = injection_layout(3, &[0, 2], InsertionPosition::BeforeText).unwrap();
        assert_eq!(layout.inserted, [0, 1]);
        assert_eq!(layout.original, [2, 3, 4]);
        let layout = injection_layout(3, &[0, 2], InsertionPosition::AfterText).unwrap();
        assert_eq!(layout.inserted, [3, 4]);
        assert!(matches!(
            injection_layout(3, &[3], InsertionPosition::AfterVh),
            Err(VawiError::Contract(_))
        ));
    }
}
