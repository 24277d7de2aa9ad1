//! Synthetic wideband fading channels and datasets.

pub mod dataset;
pub mod fading;
pub mod profile;

pub use dataset::{
    generate_dataset, generate_split, ChannelDataset, ChannelRecord, DatasetHeader, DatasetSplits,
    SplitCounts, SPLIT_NAMES,
};
pub use fading::{add_awgn, generate_channel, noise_variance, SINUSOIDS_PER_TAP};
pub use profile::ChannelProfile;
