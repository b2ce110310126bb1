use super::{
    apply_normalization, fit_normalization, split_indices, Dataset, Encoder, NormStats, RawTable, SchemaHint,
    SplitFractions,
};
use crate::error::Result;

/// Encoded and normalized train/validation/test parts of one table, with the
/// fitted transforms needed to encode more rows the same way.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub encoder: Encoder,
    pub norm: NormStats,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Splits `raw` by `seed`, then fits the encoder and normalization on the
/// training rows only and applies them to all three parts.
pub fn prepare(raw: &RawTable, hint: &SchemaHint, fractions: SplitFractions, seed: u64) -> Result<Prepared> {
    let [train_rows, val_rows, test_rows] = split_indices(raw.len(), fractions, seed)?;
    let encoder = Encoder::fit(raw, hint, &train_rows)?;
    let train = encoder.encode(raw, &train_rows)?;
    let norm = fit_normalization(&train)?;
    let encode = |rows: &[usize]| apply_normalization(&encoder.encode(raw, rows)?, &norm);
    Ok(Prepared {
        train: apply_normalization(&train, &norm)?,
        val: encode(&val_rows)?,
        test: encode(&test_rows)?,
        norm,
        encoder,
    })
}
