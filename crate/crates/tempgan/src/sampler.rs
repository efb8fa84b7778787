//! Training-batch sampling: ordered and mis-ordered real triplets plus the
//! sorted alpha triples paired with generated sequences.
//!
//! All samplers draw from a single patient's sequence, so triplets never
//! mix patients. Indices are positions within the sequence (0-based).

use thiserror::Error;

use crate::latent::{sample_alpha, ShiftMagnitudes};
use crate::rng::Rng;
use crate::volume_io::Volume;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplerError {
    #[error("sequence too short: triplet sampling needs T >= 3, got {0}")]
    SequenceTooShort(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripletLabel {
    TrueOrdered,
    FalseOrdered,
}

/// Three volumes of one sequence with their positions and ordering label.
/// The label is `TrueOrdered` exactly when the positions are strictly
/// increasing.
#[derive(Debug)]
pub struct OrderedTriplet<'a> {
    pub volumes: [&'a Volume; 3],
    pub indices: [usize; 3],
    pub label: TripletLabel,
}

fn label_for(indices: [usize; 3]) -> TripletLabel {
    if indices[0] < indices[1] && indices[1] < indices[2] {
        TripletLabel::TrueOrdered
    } else {
        TripletLabel::FalseOrdered
    }
}

/// Three distinct positions in random order, uniform over all ordered
/// arrangements of distinct triples.
fn sample_distinct_ordered(rng: &mut Rng, t: usize) -> [usize; 3] {
    let a = rng.below(t);
    let b = loop {
        let x = rng.below(t);
        if x != a {
            break x;
        }
    };
    let c = loop {
        let x = rng.below(t);
        if x != a && x != b {
            break x;
        }
    };
    [a, b, c]
}

/// Uniform draw over all strictly increasing triples of positions.
pub fn sample_true_triplet<'a>(
    rng: &mut Rng,
    sequence: &'a [Volume],
) -> Result<OrderedTriplet<'a>, SamplerError> {
    let t = sequence.len();
    if t < 3 {
        return Err(SamplerError::SequenceTooShort(t));
    }
    let mut idx = sample_distinct_ordered(rng, t);
    idx.sort_unstable();
    Ok(OrderedTriplet {
        volumes: [&sequence[idx[0]], &sequence[idx[1]], &sequence[idx[2]]],
        indices: idx,
        label: TripletLabel::TrueOrdered,
    })
}

/// Uniform draw over all arrangements of three distinct positions that are
/// NOT strictly increasing (time reversal included).
pub fn sample_false_triplet<'a>(
    rng: &mut Rng,
    sequence: &'a [Volume],
) -> Result<OrderedTriplet<'a>, SamplerError> {
    let t = sequence.len();
    if t < 3 {
        return Err(SamplerError::SequenceTooShort(t));
    }
    let idx = loop {
        let idx = sample_distinct_ordered(rng, t);
        if label_for(idx) == TripletLabel::FalseOrdered {
            break idx;
        }
    };
    Ok(OrderedTriplet {
        volumes: [&sequence[idx[0]], &sequence[idx[1]], &sequence[idx[2]]],
        indices: idx,
        label: TripletLabel::FalseOrdered,
    })
}

/// Three sorted draws from U[-6, 6] for one generated triplet.
pub fn sample_fake_alphas(rng: &mut Rng) -> ShiftMagnitudes {
    sample_alpha(rng, 3)
}
