#![allow(dead_code)]

pub mod directional;
pub mod oracle;

use tabdeco_core::data::synthetic::{generate, LabelRule, LABEL};
use tabdeco_core::data::{prepare, Prepared, SchemaHint, SplitFractions};

/// Synthetic table split and normalized with the default fractions.
pub fn synthetic(rows: usize, seed: u64, rule: LabelRule) -> Prepared {
    let raw = generate(rows, seed, rule).unwrap();
    prepare(&raw, &SchemaHint::with_label(LABEL), SplitFractions::default(), seed).unwrap()
}
