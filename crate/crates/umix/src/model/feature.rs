//! Stage-tagged feature maps and the piecewise key/value source selection.
//!
//! The decoder walks stages i = 1..N. Stage i queries the lateral encoder
//! feature at stage N-i+1 and draws its keys/values from a feature set that
//! starts as the full encoder ladder and progressively swaps in the decoder
//! outputs computed so far:
//!
//! - i = 1: `{E_1 .. E_N}`
//! - i >= 2: `{E_1 .. E_{N-i+1}}` followed by `{D_{N-i+2} .. D_N}`
//!
//! always ordered by stage index j = 1..N. [`select_feature_set`] is that
//! rule, written once and shared by the real decoder and the conformance
//! tests.

use crate::{Error, Result};

/// Provenance of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureOrigin {
    Encoder,
    Decoder,
    /// Captured inside encoder stage 3, halfway through its blocks.
    EncoderMidpoint,
}

/// A tensor (or tape variable) tagged with its ladder position.
#[derive(Debug, Clone)]
pub struct FeatureMap<T> {
    pub data: T,
    /// Stage index j in 1..=N; resolution is H/2^(j+1) x W/2^(j+1).
    pub stage: usize,
    pub origin: FeatureOrigin,
}

impl<T> FeatureMap<T> {
    pub fn encoder(data: T, stage: usize) -> FeatureMap<T> {
        FeatureMap { data, stage, origin: FeatureOrigin::Encoder }
    }

    pub fn decoder(data: T, stage: usize) -> FeatureMap<T> {
        FeatureMap { data, stage, origin: FeatureOrigin::Decoder }
    }
}

/// The feature set feeding decoder stage `stage_i`'s keys and values, in
/// stage order. `decoder_so_far` holds the outputs of stages 1..i-1 in any
/// order; they are looked up by stage index.
pub fn select_feature_set<'a, T>(
    encoder: &'a [FeatureMap<T>],
    decoder_so_far: &'a [FeatureMap<T>],
    stage_i: usize,
) -> Result<Vec<&'a FeatureMap<T>>> {
    let n = encoder.len();
    if stage_i == 0 || stage_i > n {
        return Err(Error::Usage(format!(
            "decoder stage {stage_i} out of range for {n} stages"
        )));
    }
    for (idx, f) in encoder.iter().enumerate() {
        if f.stage != idx + 1 || f.origin != FeatureOrigin::Encoder {
            return Err(Error::Usage(format!(
                "encoder ladder entry {idx} is mislabeled (stage {}, origin {:?})",
                f.stage, f.origin
            )));
        }
    }
    let mut set = Vec::with_capacity(n);
    for j in 1..=n {
        if j <= n - stage_i + 1 {
            set.push(&encoder[j - 1]);
        } else {
            // Stage i needs D_j for j > N-i+1, produced by earlier stages.
            let d = decoder_so_far
                .iter()
                .find(|f| f.stage == j && f.origin == FeatureOrigin::Decoder)
                .ok_or_else(|| {
                    Error::Usage(format!(
                        "decoder stage {stage_i} needs D_{j}, which has not been produced yet"
                    ))
                })?;
            set.push(d);
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ladder(n: usize) -> Vec<FeatureMap<()>> {
        (1..=n).map(|j| FeatureMap::encoder((), j)).collect()
    }

    fn decoded(stages: &[usize]) -> Vec<FeatureMap<()>> {
        stages.iter().map(|&j| FeatureMap::decoder((), j)).collect()
    }

    #[test]
    fn matches_piecewise_rule_exhaustively() {
        // Every N in 2..=5, every stage i: entry j must be encoder-origin
        // for j <= N-i+1 and decoder-origin for j > N-i+1.
        for n in 2..=5 {
            let enc = ladder(n);
            for i in 1..=n {
                // Stages 1..i-1 produced D_N, D_{N-1}, .., D_{N-i+2}.
                let dec = decoded(&(n - i + 2..=n).collect::<Vec<_>>());
                let set = select_feature_set(&enc, &dec, i).unwrap();
                assert_eq!(set.len(), n, "N={n} i={i}: set must cover all stages");
                for (idx, f) in set.iter().enumerate() {
                    let j = idx + 1;
                    assert_eq!(f.stage, j, "N={n} i={i}: position {idx} holds stage {}", f.stage);
                    let want = if j <= n - i + 1 {
                        FeatureOrigin::Encoder
                    } else {
                        FeatureOrigin::Decoder
                    };
                    assert_eq!(f.origin, want, "N={n} i={i} j={j}");
                }
            }
        }
    }

    #[test]
    fn first_stage_takes_the_whole_encoder_ladder() {
        let enc = ladder(4);
        let set = select_feature_set(&enc, &[], 1).unwrap();
        assert!(set.iter().all(|f| f.origin == FeatureOrigin::Encoder));
    }

    #[test]
    fn known_n4_examples() {
        let enc = ladder(4);
        // i=3 -> (E_1, E_2, D_3, D_4)
        let dec = decoded(&[4, 3]);
        let set = select_feature_set(&enc, &dec, 3).unwrap();
        let origins: Vec<_> = set.iter().map(|f| f.origin).collect();
        assert_eq!(
            origins,
            vec![
                FeatureOrigin::Encoder,
                FeatureOrigin::Encoder,
                FeatureOrigin::Decoder,
                FeatureOrigin::Decoder
            ]
        );
        // i=4 -> (E_1, D_2, D_3, D_4)
        let dec = decoded(&[4, 3, 2]);
        let set = select_feature_set(&enc, &dec, 4).unwrap();
        assert_eq!(set.iter().filter(|f| f.origin == FeatureOrigin::Decoder).count(), 3);
    }

    #[test]
    fn missing_prior_decoder_output_is_a_sequencing_error() {
        let enc = ladder(4);
        let err = select_feature_set(&enc, &[], 3).unwrap_err();
        assert!(err.to_string().contains("D_3"), "got {err}");
        // D_4 present but D_3 still missing.
        assert!(select_feature_set(&enc, &decoded(&[4]), 3).is_err());
    }

    #[test]
    fn rejects_out_of_range_stage_and_bad_ladder() {
        let enc = ladder(3);
        assert!(select_feature_set(&enc, &[], 0).is_err());
        assert!(select_feature_set(&enc, &[], 4).is_err());
        let bad = vec![FeatureMap::encoder((), 2)];
        assert!(select_feature_set(&bad, &[], 1).is_err());
    }
}
