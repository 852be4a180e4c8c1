mod common;

use bidecoder::schedule::{
    build_attention_mask, build_permutation, positions_for, prepare_target, recover_output, recover_truncated,
    PositionIndex, ScheduleSpec,
};
use bidecoder::vocab::{Token, BOS, EOS, PAD};
use bidecoder::Error;
use common::{reference_allows, reference_forward, supported_schedules};
use proptest::prelude::*;

fn one_based(forward: &[Option<usize>]) -> Vec<usize> {
    forward.iter().map(|s| s.map_or(0, |i| i + 1)).collect()
}

#[test]
fn worked_permutations() {
    let bd = ScheduleSpec::bidirectional();
    assert_eq!(one_based(&build_permutation(6, &bd).unwrap().forward), [1, 6, 2, 5, 3, 4]);
    assert_eq!(one_based(&build_permutation(5, &bd).unwrap().forward), [1, 5, 2, 4, 3]);
    assert_eq!(one_based(&build_permutation(1, &bd).unwrap().forward), [1]);
    let md = ScheduleSpec::multi_directional(4);
    assert_eq!(one_based(&build_permutation(6, &md).unwrap().forward), [1, 3, 4, 6, 2, 0, 5, 0]);
    let l2r = ScheduleSpec::autoregressive();
    assert_eq!(one_based(&build_permutation(4, &l2r).unwrap().forward), [1, 2, 3, 4]);
}

#[test]
fn degenerate_inputs_are_rejected() {
    assert!(matches!(build_permutation(0, &ScheduleSpec::bidirectional()), Err(Error::EmptySequence)));
    assert!(matches!(
        build_permutation(3, &ScheduleSpec::multi_directional(8)),
        Err(Error::DegenerateSplit { n: 3, segments: 4 })
    ));
    assert!(prepare_target(&[5, EOS, 6], &ScheduleSpec::bidirectional()).is_err());
}

#[test]
fn signed_positions_alternate() {
    let pos = positions_for(7, &ScheduleSpec::bidirectional()).unwrap();
    let want: Vec<PositionIndex> = [1, -1, 2, -2, 3, -3, 4].into_iter().map(PositionIndex::Scalar).collect();
    assert_eq!(pos, want);
    let md = positions_for(5, &ScheduleSpec::multi_directional(4)).unwrap();
    assert_eq!(md[4], PositionIndex::StepDirection { step: 1, direction: 0 });
    assert_eq!(md[3], PositionIndex::StepDirection { step: 0, direction: 3 });
}

#[test]
fn three_token_bidirectional_target() {
    // [a, b, c]: streams "a b EOS" and "c EOS EOS", shifted by the step width
    let t = prepare_target(&[10, 11, 12], &ScheduleSpec::bidirectional()).unwrap();
    assert_eq!(t.target, [10, 12, 11, EOS, EOS, EOS]);
    assert_eq!(t.decoder_input, [BOS, BOS, 10, 12, 11, EOS]);
    assert_eq!(t.loss_mask, [1; 6]);
    assert_eq!(recover_output(&t.target, &ScheduleSpec::bidirectional()).unwrap(), [10, 11, 12]);
}

#[test]
fn multi_directional_targets_pad_exhausted_streams() {
    let spec = ScheduleSpec::multi_directional(4);
    let t = prepare_target(&[10, 11, 12, 13, 14, 15], &spec).unwrap();
    assert_eq!(t.target, [10, 12, 13, 15, 11, EOS, 14, EOS, EOS, PAD, EOS, PAD]);
    assert_eq!(t.loss_mask, [1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 1, 0]);
}

fn spec_strategy() -> impl Strategy<Value = ScheduleSpec> {
    proptest::sample::select(supported_schedules())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn permutation_matches_reference_and_inverts(spec in spec_strategy(), n in 1usize..80) {
        let perm = match build_permutation(n, &spec) {
            Ok(p) => p,
            Err(Error::DegenerateSplit { .. }) => {
                prop_assert!(spec.h > 2 * n);
                return Ok(());
            }
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert_eq!(&perm.forward, &reference_forward(n, &spec));
        prop_assert_eq!(perm.len(), n);
        for (slot, idx) in perm.forward.iter().enumerate() {
            if let Some(i) = idx {
                prop_assert_eq!(perm.inverse[*i], slot);
            }
        }
        let mut seen: Vec<usize> = perm.forward.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn scheduled_targets_round_trip(spec in spec_strategy(), y in prop::collection::vec(4u32..40, 1..70)) {
        if spec.h > 2 * y.len() {
            return Ok(());
        }
        let t = prepare_target(&y, &spec).unwrap();
        let z = spec.step_width();
        prop_assert_eq!(t.len() % z, 0);
        prop_assert_eq!(t.decoder_input.len(), t.target.len());
        prop_assert!(t.decoder_input[..z].iter().all(|&b| b == BOS));
        prop_assert_eq!(&t.decoder_input[z..], &t.target[..t.len() - z]);
        for (m, tok) in t.loss_mask.iter().zip(&t.target) {
            prop_assert_eq!(*m == 0, *tok == PAD);
        }
        prop_assert_eq!(recover_output(&t.target, &spec).unwrap(), y.clone());
        prop_assert_eq!(recover_truncated(&t.target, &spec), y);
    }

    #[test]
    fn mask_matches_predicate(spec in spec_strategy(), blocks in 1usize..12) {
        let n = blocks * spec.step_width();
        let mask = build_attention_mask(n, &spec).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(mask.is_allowed(i, j), reference_allows(&spec, i + 1, j + 1));
            }
            prop_assert!(mask.is_allowed(i, i));
        }
    }

    #[test]
    fn recovery_ignores_everything_after_the_finishing_block(
        y in prop::collection::vec(4u32..40, 2..30),
        junk in prop::collection::vec(0u32..40, 0..8),
    ) {
        for spec in [ScheduleSpec::bidirectional(), ScheduleSpec::bidirectional_sa(2), ScheduleSpec::autoregressive()] {
            let t = prepare_target(&y, &spec).unwrap();
            let group = spec.group();
            // keep blocks up to and including the first one holding EOS
            let first = t.target.iter().position(|&x| x == EOS).unwrap() / group;
            let mut cut: Vec<Token> = t.target[..(first + 1) * group].to_vec();
            let extra = junk.len() / group * group;
            cut.extend_from_slice(&junk[..extra]);
            prop_assert_eq!(recover_output(&cut, &spec).unwrap(), y.clone());
        }
    }
}
