//! Shared fixtures for the benchmarks.

use tabdeco_core::data::synthetic::{generate, LabelRule, LABEL};
use tabdeco_core::data::{prepare, Prepared, SchemaHint, SplitFractions};
use tabdeco_core::{InputLayout, ModelConfig, TabDeco, Variant};

pub fn synthetic(rows: usize) -> Prepared {
    let raw = generate(rows, 0, LabelRule::default()).expect("synthetic table");
    prepare(&raw, &SchemaHint::with_label(LABEL), SplitFractions::default(), 0).expect("prepare")
}

/// The d=16, two-layer, four-head model used by the end-to-end runs.
pub fn small_model(variant: Variant, data: &Prepared) -> TabDeco {
    let cfg = ModelConfig {
        d: 16,
        layers: 2,
        heads: 4,
        variant,
        ..ModelConfig::default()
    };
    TabDeco::new(cfg, InputLayout::for_dataset(&data.train)).expect("model")
}
