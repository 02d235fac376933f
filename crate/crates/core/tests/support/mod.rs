#![allow(dead_code)]

pub mod gradients;

use clove::evalkit::corpus::{generate_corpus, Split, SyntheticImage};
use clove::TrainConfig;

/// A model small enough to train a handful of steps in milliseconds.
pub fn tiny_config() -> TrainConfig {
    TrainConfig::from_text(
        "steps=12\nbatch_size=3\nenc.channels=4,8\nenc.hidden=8\nenc.dim=8\nattn.heads=2\n\
         data.resolution=16\ndata.train_size=8\nlog_wallclock=false",
    )
    .unwrap()
}

pub fn corpus(c: &TrainConfig) -> Vec<SyntheticImage> {
    generate_corpus(c.train_size, c.data_seed, Split::Train, &c.corpus_profile()).unwrap()
}
