//! Deterministic equally-spaced pilot lattices.

use crate::error::{Error, Result};
use crate::selection::PilotPattern;

/// Centred positions of `count` evenly spaced items over `0..len`.
fn centred(len: usize, count: usize) -> impl Iterator<Item = usize> {
    (0..count).map(move |i| (2 * i * len + len - count) / (2 * count))
}

/// Equally spaced lattice with `np` pilots on an `nf x nn` frame.
///
/// Pilots occupy two columns (slots 3 and 10 of a 14-slot frame) with `np / 2`
/// subcarriers each at a uniform stride. Once a column cannot hold `np / 2` pilots,
/// the smallest column count that divides `np` evenly is used instead.
pub fn equally_spaced_pattern(nf: usize, nn: usize, np: usize) -> Result<PilotPattern> {
    if np == 0 || np % 2 == 1 {
        return Err(Error::Pattern(format!(
            "equally spaced lattice needs an even, positive pilot count, got {np}"
        )));
    }
    if np > nf * nn {
        return Err(Error::Pattern(format!(
            "{np} pilots exceed the {nf}x{nn} frame"
        )));
    }
    let columns = (2..=nn)
        .find(|&c| np.is_multiple_of(c) && np / c <= nf)
        .ok_or_else(|| {
            Error::Pattern(format!(
                "no even lattice of {np} pilots fits a {nf}x{nn} frame"
            ))
        })?;
    let per_column = np / columns;
    let mut indices = Vec::with_capacity(np);
    for slot in centred(nn, columns) {
        indices.extend(centred(nf, per_column).map(|f| (f, slot)));
    }
    PilotPattern::new(nf, nn, indices)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_pilots_on_default_frame() {
        let p = equally_spaced_pattern(72, 14, 8).unwrap();
        assert_eq!(
            p.indices(),
            &[
                (8, 3),
                (26, 3),
                (44, 3),
                (62, 3),
                (8, 10),
                (26, 10),
                (44, 10),
                (62, 10)
            ]
        );
    }

    #[test]
    fn full_frame_uses_every_location() {
        let p = equally_spaced_pattern(72, 14, 72 * 14).unwrap();
        assert_eq!(p.k(), 1008);
    }

    #[test]
    fn odd_and_oversized_counts_are_rejected() {
        assert!(equally_spaced_pattern(72, 14, 7).is_err());
        assert!(equally_spaced_pattern(72, 14, 0).is_err());
        assert!(equally_spaced_pattern(4, 2, 10).is_err());
        assert!(equally_spaced_pattern(4, 1, 2).is_err());
    }

    #[test]
    fn wide_counts_spill_into_more_columns() {
        let p = equally_spaced_pattern(72, 14, 200).unwrap();
        assert_eq!(p.distinct_slots(), 4);
        assert_eq!(p.distinct_subcarriers(), 50);
    }
}
