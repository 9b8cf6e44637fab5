//! Check-in ingestion, filtering, splitting and synthetic corpora.

mod checkin;
mod prep;
mod synth;

pub use checkin::{parse_checkin_line, write_records, CheckIn, Format, Parser};
pub use prep::{
    apply_filters, collapse_duplicates, group_by_user, split_dataset, split_dataset_with,
    DatasetSplit, FilterConfig, SplitManifest, SplitMode, UserTrajectory,
};
pub use synth::{
    synth_generate, synth_generate_with_manifest, venue_name, SynthConfig, SynthManifest,
    SYNTH_EPOCH,
};
