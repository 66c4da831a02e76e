mod common;

use cehr_core::event_store::{parse_date, Domain, Event, EventStore, Gender, Person, Visit, DEFAULT_VISIT_TYPES};
use cehr_core::sequence::*;
use cehr_core::synth::{generate_synthetic, SynthConfig};
use chrono::Duration;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// (days since the previous visit ended, visit length, events, type index)
type VisitSpec = (i64, i64, usize, usize);

fn store_from(specs: &[VisitSpec]) -> EventStore {
    let birth = parse_date("1960-03-01").unwrap();
    let mut end = parse_date("2001-01-01").unwrap();
    let (mut visits, mut events) = (Vec::new(), Vec::new());
    for (k, &(gap, len, n, ty)) in specs.iter().enumerate() {
        let start = end + Duration::days(gap);
        end = start + Duration::days(len);
        let vid = format!("v{k}");
        visits.push(Visit {
            visit_id: vid.clone(),
            person_id: "p".into(),
            visit_type: DEFAULT_VISIT_TYPES[ty].into(),
            start_date: start,
            end_date: end,
            discharge_to: None,
        });
        for j in 0..n {
            events.push(Event {
                person_id: "p".into(),
                visit_id: vid.clone(),
                domain: Domain::Condition,
                concept_id: format!("c{}", (k * 7 + j) % 11),
                event_date: start + Duration::days(j as i64 % (len + 1)),
            });
        }
    }
    let person = Person {
        person_id: "p".into(),
        birth_date: birth,
        gender: Gender::Female,
    };
    EventStore::from_records(vec![person], visits, events).unwrap()
}

fn visit_spec() -> impl Strategy<Value = VisitSpec> {
    (0i64..800, 0i64..5, 0usize..4, 0usize..DEFAULT_VISIT_TYPES.len())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn every_variant_keeps_its_structure(specs in prop::collection::vec(visit_spec(), 1..12), seed in 0u64..1000) {
        prop_assume!(specs.iter().any(|s| s.2 > 0));
        let store = store_from(&specs);
        let (violations, checked) = common::store_violations(&store, seed);
        prop_assert_eq!(checked, 4);
        prop_assert!(violations.is_empty(), "{:?}", violations);
    }

    #[test]
    fn att_tokens_follow_start_to_start_gaps(specs in prop::collection::vec(visit_spec(), 1..12)) {
        prop_assume!(specs.iter().any(|s| s.2 > 0));
        let store = store_from(&specs);
        let p = &store.patients()[0];
        let starts: Vec<_> = p.visits.iter().filter(|v| !v.events.is_empty()).map(|v| v.visit.start_date).collect();
        let want: Vec<u32> = starts.windows(2).map(|w| att_token((w[1] - w[0]).num_days()).unwrap()).collect();
        let vocab = Vocabulary::from_store(&store).unwrap();
        for variant in [Variant::Cehr, Variant::NoVsVe] {
            let seq = build_sequence(&store, "p", variant, &vocab, &VisitTypes::default()).unwrap();
            let got: Vec<u32> = seq.token_ids.iter().copied().filter(|t| (W0..=LT).contains(t)).collect();
            prop_assert_eq!(&got, &want);
        }
    }

    #[test]
    fn windows_keep_their_invariants(n in 1usize..700, context in 1usize..400, seed in 0u64..100) {
        let mut seq = TokenSequence::default();
        for i in 0..n {
            seq.token_ids.push(FIRST_CONCEPT + i as u32);
            seq.time_years.push(i as f64);
            seq.age_years.push(i as f64);
            seq.visit_segment.push(1 + (i / 3 % 2) as u8);
            seq.visit_type_ids.push(2);
            seq.attention_mask.push(true);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for mode in [WindowMode::PretrainRandomSlice, WindowMode::FinetunePreTruncate] {
            let w = seq.window(context, mode, &mut rng);
            let v = common::window_violations(&seq, &w, context);
            prop_assert!(v.is_empty(), "{:?}", v);
        }
    }
}

#[test]
fn att_tokens_match_the_hand_table() {
    let bad = common::att_mismatches();
    assert!(bad.is_empty(), "{bad:?}");
    assert!(att_token(-1).is_err());
    assert_eq!(att_token(10_000).unwrap(), LT);
}

#[test]
fn synthetic_cohort_sequences_are_well_formed() {
    let store = generate_synthetic(
        &SynthConfig {
            n_patients: 300,
            ..Default::default()
        },
        3,
    )
    .unwrap();
    let (v, checked) = common::store_violations(&store, 3);
    assert_eq!(checked, 4 * store.len());
    assert!(v.is_empty(), "{:?}", &v[..v.len().min(10)]);
}

#[test]
fn masking_rates_and_split() {
    let st = common::masking_stats(10_000, false, 11);
    assert!(st.maskable >= 10_000);
    assert!((st.mlm_rate() - 0.15).abs() <= 0.01, "{}", st.mlm_rate());
    let [m, r, u] = st.fractions();
    assert!((m - 0.8).abs() <= 0.02, "{m}");
    assert!((r - 0.1).abs() <= 0.02, "{r}");
    assert!((u - 0.1).abs() <= 0.02, "{u}");
    assert_eq!(st.pad_selected, 0);
    assert_eq!(st.special_selected, 0);
    assert!((st.vtp_rate() - 0.5).abs() <= 0.02, "{}", st.vtp_rate());
    assert_eq!(st.untyped_selected, 0);
}

#[test]
fn masking_specials_when_asked() {
    let st = common::masking_stats(10_000, true, 12);
    assert!((st.mlm_rate() - 0.15).abs() <= 0.01, "{}", st.mlm_rate());
    assert_eq!(st.pad_selected, 0);
}
