//! Packed (jagged) batches: sequences of different lengths sit back to back
//! in flat row-major buffers, with offsets marking the boundaries. No
//! padding rows exist anywhere — masking falls out of the layout.

use ndarray::Array2;

/// Input sentinel: this row's vector comes from the prefix table, not the
/// symbol embedding.
pub const PREFIX_INPUT: u32 = u32::MAX;

/// Target sentinel: this row contributes nothing to the loss.
pub const NO_TARGET: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct PackedBatch {
    /// Sequence boundaries; `offsets.len() = B + 1`, total rows = last entry.
    pub offsets: Vec<usize>,
    /// Per-row input symbol id, or PREFIX_INPUT.
    pub inputs: Vec<u32>,
    /// Per-row next-symbol target, or NO_TARGET.
    pub targets: Vec<u32>,
    /// One row per PREFIX_INPUT row, in order of appearance (B×d_emb for
    /// the probe; empty 0×0 for the MLM, which has no prefix rows).
    pub prefix: Array2<f64>,
    /// Token id behind each prefix row (instrumentation + tunable-mode
    /// gradient scatter).
    pub prefix_token_ids: Vec<u32>,
}

impl PackedBatch {
    pub fn n_seqs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_rows(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn seq_range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    pub fn n_targets(&self) -> usize {
        self.targets.iter().filter(|&&t| t != NO_TARGET).count()
    }

    /// Row position within its own sequence (= position embedding index).
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = Vec::with_capacity(self.n_rows());
        for s in 0..self.n_seqs() {
            pos.extend(0..self.seq_range(s).len());
        }
        pos
    }

    pub fn validate(&self) {
        assert!(self.offsets.len() >= 2, "batch must contain a sequence");
        assert!(self.offsets.windows(2).all(|w| w[0] < w[1]), "empty sequence");
        assert_eq!(self.inputs.len(), self.n_rows());
        assert_eq!(self.targets.len(), self.n_rows());
        let n_prefix = self.inputs.iter().filter(|&&i| i == PREFIX_INPUT).count();
        assert_eq!(self.prefix_token_ids.len(), n_prefix);
        // prefix rows are either materialized (frozen source) or absent
        // (tunable mode gathers them from the parameter store by token id)
        assert!(
            self.prefix.nrows() == n_prefix || self.prefix.nrows() == 0,
            "prefix rows {} do not match {} PREFIX_INPUT markers",
            self.prefix.nrows(),
            n_prefix
        );
    }
}
