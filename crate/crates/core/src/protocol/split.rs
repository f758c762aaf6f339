use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Labeled, ProtocolError};

/// Default train : validation : test proportions.
pub const DEFAULT_RATIOS: [u32; 3] = [8, 1, 1];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitResult<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
    pub seed: u64,
}

/// Per-subset counts for a class of `n` samples.
///
/// Each subset gets `floor(n * r / R)`; the leftover goes one at a time to
/// the subsets with the largest fractional part, ties resolved in
/// train, validation, test order.
pub fn allocate(n: usize, ratios: [u32; 3]) -> [usize; 3] {
    let total: u64 = ratios.iter().map(|&r| u64::from(r)).sum();
    let mut counts = [0usize; 3];
    let mut remainders = [0u64; 3];
    for i in 0..3 {
        let scaled = n as u64 * u64::from(ratios[i]);
        counts[i] = (scaled / total) as usize;
        remainders[i] = scaled % total;
    }
    let mut order = [0usize, 1, 2];
    // stable sort keeps subset order among equal remainders
    order.sort_by(|&a, &b| remainders[b].cmp(&remainders[a]));
    let leftover = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(leftover) {
        counts[i] += 1;
    }
    counts
}

/// Stratified three-way split.
///
/// Each class is shuffled with a generator seeded by `seed` and cut
/// according to [`allocate`]. Subsets list their members in input order.
pub fn stratified_split<T: Labeled + Clone>(
    samples: &[T],
    ratios: [u32; 3],
    seed: u64,
) -> Result<SplitResult<T>, ProtocolError> {
    if ratios.contains(&0) {
        return Err(ProtocolError::InvalidRatios(ratios));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0u8; samples.len()];
    for class in [true, false] {
        let mut members: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].label() == class)
            .collect();
        if members.is_empty() {
            return Err(ProtocolError::EmptyClass(class));
        }
        members.shuffle(&mut rng);
        let [train, val, _] = allocate(members.len(), ratios);
        for (rank, &i) in members.iter().enumerate() {
            assignment[i] = if rank < train {
                0
            } else if rank < train + val {
                1
            } else {
                2
            };
        }
    }
    let mut out = SplitResult {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for (sample, &subset) in samples.iter().zip(&assignment) {
        match subset {
            0 => out.train.push(sample.clone()),
            1 => out.validation.push(sample.clone()),
            _ => out.test.push(sample.clone()),
        }
    }
    Ok(out)
}
