//! Logit records and the class-slot layout they are indexed by.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the slots of a logit vector map onto classes.
///
/// Classification layouts have one slot per class. Detection layouts add a
/// background slot at `bg_index`; the foreground classes fill the remaining
/// slots in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLayout {
    num_slots: usize,
    bg_index: Option<usize>,
}

impl ClassLayout {
    pub fn classification(num_classes: usize) -> Self {
        Self {
            num_slots: num_classes,
            bg_index: None,
        }
    }

    pub fn detection(num_foreground: usize, bg_index: usize) -> Result<Self> {
        Self::new(num_foreground + 1, Some(bg_index))
    }

    pub fn new(num_slots: usize, bg_index: Option<usize>) -> Result<Self> {
        if num_slots == 0 {
            return Err(Error::InvalidParameter("layout needs at least one slot".into()));
        }
        if let Some(bg) = bg_index {
            if bg >= num_slots {
                return Err(Error::InvalidParameter(format!(
                    "background index {bg} outside {num_slots} slots"
                )));
            }
        }
        Ok(Self { num_slots, bg_index })
    }

    pub fn num_slots(&self) -> usize {
        self.num_slots
    }

    pub fn bg_index(&self) -> Option<usize> {
        self.bg_index
    }

    pub fn num_foreground(&self) -> usize {
        self.num_slots - usize::from(self.bg_index.is_some())
    }

    pub fn is_background(&self, slot: usize) -> bool {
        self.bg_index == Some(slot)
    }

    pub fn foreground_slots(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_slots).filter(move |&s| !self.is_background(s))
    }

    /// Slot holding foreground class `class` (0-based over foreground classes).
    pub fn slot_of(&self, class: usize) -> usize {
        match self.bg_index {
            Some(bg) if class >= bg => class + 1,
            _ => class,
        }
    }

    /// Foreground class stored in `slot`, or `None` for the background slot.
    pub fn class_of(&self, slot: usize) -> Option<usize> {
        match self.bg_index {
            Some(bg) if slot == bg => None,
            Some(bg) if slot > bg => Some(slot - 1),
            _ => Some(slot),
        }
    }
}

/// One sample's full logit vector and its ground-truth slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitRecord {
    pub label: usize,
    pub logits: Vec<f64>,
}

impl LogitRecord {
    pub fn new(label: usize, logits: Vec<f64>) -> Self {
        Self { label, logits }
    }

    /// Checks this record against a slot count; `index` is reported in errors.
    pub fn validate(&self, num_slots: usize, index: usize) -> Result<()> {
        if self.logits.len() != num_slots {
            return Err(Error::DimensionMismatch {
                expected: num_slots,
                found: self.logits.len(),
                record: Some(index),
            });
        }
        if self.label >= num_slots {
            return Err(Error::LabelOutOfRange {
                record: index,
                label: self.label,
                num_classes: num_slots,
            });
        }
        if self.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { record: index });
        }
        Ok(())
    }
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
                record: None,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    found: r.len(),
                    record: Some(i),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + Clone {
        // chunks_exact panics on zero; an empty-column matrix has no rows to yield anyway
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Pairs each row with a label.
    pub fn to_records(&self, labels: &[usize]) -> Result<Vec<LogitRecord>> {
        if labels.len() != self.rows {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                found: labels.len(),
                record: None,
            });
        }
        Ok(self
            .iter_rows()
            .zip(labels)
            .map(|(r, &l)| LogitRecord::new(l, r.to_vec()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_mapping_round_trips() {
        for bg in [0, 2, 4] {
            let layout = ClassLayout::detection(4, bg).unwrap();
            assert_eq!(layout.num_foreground(), 4);
            for c in 0..4 {
                let s = layout.slot_of(c);
                assert_ne!(s, bg);
                assert_eq!(layout.class_of(s), Some(c));
            }
            assert_eq!(layout.class_of(bg), None);
            assert_eq!(layout.foreground_slots().count(), 4);
        }
        let cls = ClassLayout::classification(3);
        assert_eq!(cls.foreground_slots().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(ClassLayout::new(3, Some(3)).is_err());
    }

    #[test]
    fn record_validation_reports_index() {
        let r = LogitRecord::new(0, vec![1.0, f64::NAN]);
        assert!(matches!(r.validate(2, 7), Err(Error::NonFinite { record: 7 })));
        let r = LogitRecord::new(2, vec![1.0, 0.0]);
        assert!(matches!(r.validate(2, 1), Err(Error::LabelOutOfRange { .. })));
        let r = LogitRecord::new(0, vec![1.0]);
        assert!(matches!(
            r.validate(2, 3),
            Err(Error::DimensionMismatch { record: Some(3), .. })
        ));
    }
}
