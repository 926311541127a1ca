use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{BubbleImage, Label};
use crate::error::{Error, Result};

fn by_class(images: &[BubbleImage]) -> (Vec<usize>, Vec<usize>) {
    let mut marks = Vec::new();
    let mut nonmarks = Vec::new();
    for (i, img) in images.iter().enumerate() {
        match img.label {
            Label::Mark => marks.push(i),
            Label::NonMark => nonmarks.push(i),
        }
    }
    (marks, nonmarks)
}

/// One epoch of class-balanced batches (dataset indices).
///
/// The majority class is shuffled and visited once; each batch pairs it with
/// an equal number of minority samples drawn uniformly with replacement.
/// With an odd batch size the majority side gets the extra slot.
pub fn balanced_batches(
    images: &[BubbleImage],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Validation("balanced batches need batch_size >= 2".into()));
    }
    let (marks, nonmarks) = by_class(images);
    if marks.is_empty() || nonmarks.is_empty() {
        return Err(Error::Validation(
            "balanced batching needs both Mark and NonMark samples".into(),
        ));
    }
    let (mut major, minor) = if marks.len() >= nonmarks.len() {
        (marks, nonmarks)
    } else {
        (nonmarks, marks)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    major.shuffle(&mut rng);
    let per_major = batch_size.div_ceil(2);
    let mut batches = Vec::with_capacity(major.len().div_ceil(per_major));
    for chunk in major.chunks(per_major) {
        let n_minor = if chunk.len() == per_major {
            batch_size - per_major
        } else {
            chunk.len()
        };
        let mut batch: Vec<usize> = chunk.to_vec();
        batch.extend((0..n_minor).map(|_| minor[rng.random_range(0..minor.len())]));
        batch.shuffle(&mut rng);
        batches.push(batch);
    }
    Ok(batches)
}

/// Stratified split: within each class, `round(fraction * n)` samples go to
/// training. Both index lists are sorted.
pub fn train_val_split(
    images: &[BubbleImage],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if images.is_empty() {
        return Err(Error::Validation("cannot split an empty dataset".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Validation(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut marks, mut nonmarks) = by_class(images);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [&mut marks, &mut nonmarks] {
        class.shuffle(&mut rng);
        let k = (fraction * class.len() as f64).round() as usize;
        train.extend_from_slice(&class[..k]);
        val.extend_from_slice(&class[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

pub fn select(images: &[BubbleImage], indices: &[usize]) -> Vec<BubbleImage> {
    indices.iter().map(|&i| images[i].clone()).collect()
}
