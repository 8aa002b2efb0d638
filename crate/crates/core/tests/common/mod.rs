#![allow(dead_code)]

use gpn::data::synthetic::{write_fixture, FixtureSpec};
use gpn::data::{ingest, prepare_split, Dataset, IngestMode, Split};

/// Augmented train and test sets of a synthetic fixture with at most
/// `max_chars` characters per alphabet.
pub fn fixture(max_chars: usize) -> (Dataset, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), &FixtureSpec::truncated(7, max_chars)).unwrap();
    let raw = ingest(dir.path(), IngestMode::Lenient).unwrap();
    let train = prepare_split(&raw.train, Split::Train).unwrap().augment_rotations().unwrap();
    let test = prepare_split(&raw.test, Split::Test).unwrap().augment_rotations().unwrap();
    (train, test)
}

pub fn fixture_train(max_chars: usize) -> Dataset {
    fixture(max_chars).0
}
