use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::fpquant::counter_hash;
use crate::models::Batch;

/// Byte-level corpus with a fixed validation tail.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    bytes: Vec<u8>,
    split: usize,
    checksum: String,
}

/// Fraction of the corpus held out at the end for validation.
pub const VAL_FRACTION: f64 = 0.05;

const BATCH_STREAM: u64 = 0x42_4154_4348;

impl Corpus {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, ExperimentError> {
        if bytes.len() < 64 {
            return Err(ExperimentError::Data(format!(
                "corpus of {} bytes is too small",
                bytes.len()
            )));
        }
        let split = bytes.len() - ((bytes.len() as f64 * VAL_FRACTION).ceil() as usize);
        let checksum = format!("{:x}", Sha256::digest(&bytes));
        Ok(Self {
            bytes,
            split,
            checksum,
        })
    }

    /// Read a UTF-8 text file.
    pub fn from_path(path: &Path) -> Result<Self, ExperimentError> {
        let bytes = std::fs::read(path).map_err(|e| ExperimentError::io(path, e))?;
        if let Err(e) = std::str::from_utf8(&bytes) {
            return Err(ExperimentError::Data(format!(
                "{} is not UTF-8: {e}",
                path.display()
            )));
        }
        Self::from_bytes(bytes)
    }

    /// `len` bytes of text from a small random grammar.
    pub fn synthetic(len: usize, seed: u64) -> Result<Self, ExperimentError> {
        Self::from_bytes(synthetic_text(len, seed).into_bytes())
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// SHA-256 of the raw bytes, hex encoded.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn train(&self) -> &[u8] {
        &self.bytes[..self.split]
    }

    pub fn val(&self) -> &[u8] {
        &self.bytes[self.split..]
    }

    /// Byte tokens, so one token per byte.
    pub fn tokens_per_byte(&self) -> f64 {
        1.0
    }

    /// Training batch for `step`: `batch` windows of `seq + 1` bytes at
    /// positions drawn from the training part. The same `(seed, step)`
    /// always yields the same batch.
    pub fn train_batch(
        &self,
        step: u64,
        batch: usize,
        seq: usize,
        seed: u64,
    ) -> Result<Batch, ExperimentError> {
        let train = self.train();
        if train.len() <= seq + 1 {
            return Err(ExperimentError::Data(format!(
                "training split of {} bytes is shorter than a window of {}",
                train.len(),
                seq + 1
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(counter_hash(seed, BATCH_STREAM, step));
        let windows: Vec<Vec<usize>> = (0..batch)
            .map(|_| {
                let at = rng.random_range(0..train.len() - seq);
                train[at..at + seq + 1]
                    .iter()
                    .map(|&b| b as usize)
                    .collect()
            })
            .collect();
        Ok(Batch::from_windows(&windows))
    }

    /// Consecutive non-overlapping validation windows grouped into batches
    /// of `batch` sequences, at most `max_batches` of them.
    pub fn val_batches(
        &self,
        batch: usize,
        seq: usize,
        max_batches: usize,
    ) -> Result<Vec<Batch>, ExperimentError> {
        let windows: Vec<Vec<usize>> = self
            .val()
            .windows(seq + 1)
            .step_by(seq)
            .take(batch * max_batches)
            .map(|w| w.iter().map(|&b| b as usize).collect())
            .collect();
        if windows.len() < batch {
            return Err(ExperimentError::Data(format!(
                "validation split of {} bytes holds fewer than {batch} windows of {}",
                self.val().len(),
                seq + 1
            )));
        }
        Ok(windows
            .chunks_exact(batch)
            .map(Batch::from_windows)
            .collect())
    }
}

const DET: &[&str] = &["the", "a", "every", "no", "some", "this", "that"];
const ADJ: &[&str] = &[
    "small", "quiet", "green", "heavy", "bright", "old", "round", "quick", "cold", "narrow",
];
const NOUN: &[&str] = &[
    "river", "stone", "window", "garden", "engine", "letter", "forest", "signal", "bridge",
    "market", "lamp", "teacher", "valley", "clock", "harbor", "field",
];
const VERB: &[&str] = &[
    "holds", "follows", "finds", "moves", "watches", "carries", "builds", "crosses", "keeps",
    "opens",
];
const PREP: &[&str] = &["near", "under", "beside", "across", "behind", "over"];
const ADV: &[&str] = &["slowly", "again", "often", "never", "quietly"];

fn pick<'a>(rng: &mut ChaCha8Rng, list: &[&'a str]) -> &'a str {
    // Zipf-like preference for early entries
    let u: f64 = rng.random();
    list[((u * u) * list.len() as f64) as usize]
}

fn noun_phrase(rng: &mut ChaCha8Rng, out: &mut String) {
    out.push_str(pick(rng, DET));
    out.push(' ');
    if rng.random_bool(0.5) {
        out.push_str(pick(rng, ADJ));
        out.push(' ');
    }
    out.push_str(pick(rng, NOUN));
    if rng.random_bool(0.25) {
        out.push(' ');
        out.push_str(pick(rng, PREP));
        out.push(' ');
        out.push_str(pick(rng, DET));
        out.push(' ');
        out.push_str(pick(rng, NOUN));
    }
}

fn sentence(rng: &mut ChaCha8Rng, out: &mut String) {
    let start = out.len();
    noun_phrase(rng, out);
    out.push(' ');
    if rng.random_bool(0.2) {
        out.push_str(pick(rng, ADV));
        out.push(' ');
    }
    out.push_str(pick(rng, VERB));
    out.push(' ');
    noun_phrase(rng, out);
    if rng.random_bool(0.3) {
        out.push_str(" and ");
        out.push_str(pick(rng, VERB));
        out.push(' ');
        noun_phrase(rng, out);
    }
    if let Some(c) = out[start..].chars().next() {
        let up = c.to_ascii_uppercase().to_string();
        out.replace_range(start..start + 1, &up);
    }
    out.push_str(if rng.random_bool(0.1) { "?" } else { "." });
}

/// Deterministic English-like text of exactly `len` bytes.
pub fn synthetic_text(len: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(len + 256);
    while out.len() < len {
        sentence(&mut rng, &mut out);
        out.push(if rng.random_bool(0.15) { '\n' } else { ' ' });
    }
    out.truncate(len);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let c = Corpus::synthetic(10_000, 1).unwrap();
        assert_eq!(c.len(), 10_000);
        assert_eq!(c.val().len(), 500);
        assert_eq!(c.train().len() + c.val().len(), c.len());
        assert_eq!(Corpus::synthetic(10_000, 1).unwrap(), c);
        assert_ne!(
            Corpus::synthetic(10_000, 2).unwrap().checksum(),
            c.checksum()
        );
    }

    #[test]
    fn training_batches_never_touch_validation() {
        let c = Corpus::synthetic(4000, 3).unwrap();
        let split = c.train().len();
        for step in 0..50 {
            let b = c.train_batch(step, 8, 16, 7).unwrap();
            assert_eq!(b.inputs.len(), 128);
            assert_eq!(b, c.train_batch(step, 8, 16, 7).unwrap());
            // every window is a substring of the training split
            for w in 0..8 {
                let win: Vec<u8> = b.inputs[w * 16..(w + 1) * 16]
                    .iter()
                    .map(|&t| t as u8)
                    .collect();
                let hay = c.train();
                assert!(hay.windows(16).any(|h| h == win.as_slice()));
            }
        }
        assert!(split < c.len());
    }

    #[test]
    fn validation_batches_tile_the_tail() {
        let c = Corpus::synthetic(20_000, 4).unwrap();
        let v = c.val_batches(4, 32, 100).unwrap();
        assert!(!v.is_empty());
        assert_eq!(v[0].inputs[0], c.val()[0] as usize);
        assert_eq!(v[0].inputs[32], c.val()[32] as usize);
        assert!(c.val_batches(1000, 32, 1).is_err());
    }

    #[test]
    fn rejects_non_utf8() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        std::fs::write(&p, [0xff_u8; 100]).unwrap();
        assert!(matches!(
            Corpus::from_path(&p),
            Err(ExperimentError::Data(_))
        ));
    }
}
