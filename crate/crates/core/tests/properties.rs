use chrono::{DateTime, Datelike, Timelike};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fedmob_core::client::{compute_outer_products, ClientUpdate};
use fedmob_core::data::{apply_filters, group_by_user, split_dataset, CheckIn, FilterConfig};
use fedmob_core::encoding::{embed, make_windows, time_bucket, EmbeddingTables};
use fedmob_core::eval::{ExperimentConfig, MetricsReport, RankedPrediction};
use fedmob_core::llm::rank_top_k;
use fedmob_core::numeric::{ParamStore, Tensor};
use fedmob_core::server::aggregate;

fn checkin() -> impl Strategy<Value = CheckIn> {
    (
        "[a-z0-9]{1,8}",
        1i64..2_000_000_000,
        -90.0f64..=90.0,
        -180.0f64..=180.0,
        "[A-Za-z0-9_]{1,10}",
        proptest::option::of("[A-Za-z ]{1,12}"),
    )
        .prop_map(|(user_id, timestamp, lat, lon, venue_id, category)| CheckIn {
            user_id,
            timestamp,
            lat,
            lon,
            venue_id,
            category,
        })
}

/// Small corpora over few users and venues so the thresholds bite.
fn corpus() -> impl Strategy<Value = Vec<CheckIn>> {
    prop::collection::vec((0usize..12, 0usize..8, 0i64..200), 0..300).prop_map(|v| {
        v.into_iter()
            .map(|(u, venue, day)| CheckIn {
                user_id: format!("u{u}"),
                timestamp: 1_300_000_000 + day * 86_400 + (u as i64) * 60,
                lat: 0.0,
                lon: 0.0,
                venue_id: format!("v{venue}"),
                category: None,
            })
            .collect()
    })
}

fn update(id: &str, payload: Vec<f64>, d: u16) -> ClientUpdate {
    ClientUpdate {
        client_id: id.into(),
        round: 3,
        window_count: 1,
        d,
        sigma: 0.0,
        clip: 0.0,
        payload,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn checkin_record_round_trip(c in checkin()) {
        prop_assert_eq!(CheckIn::from_record(&c.to_record()).unwrap(), c);
    }

    #[test]
    fn filters_are_idempotent(raw in corpus(), min_u in 1usize..8, min_v in 1usize..8, days in 1i64..150) {
        let cfg = FilterConfig { min_user_checkins: min_u, min_venue_visits: min_v, max_window_days: days };
        let once = apply_filters(group_by_user(raw), &cfg);
        prop_assert_eq!(apply_filters(once.clone(), &cfg), once.clone());
        for t in &once {
            prop_assert!(t.len() >= min_u);
            let last = t.events.last().unwrap().timestamp;
            prop_assert!(t.events.iter().all(|c| last - c.timestamp <= days * 86_400));
        }
    }

    #[test]
    fn split_is_a_partition(n in 5usize..80, seed in any::<u64>()) {
        let raw: Vec<CheckIn> = (0..n)
            .map(|u| CheckIn {
                user_id: format!("user{u:03}"),
                timestamp: 1_300_000_000,
                lat: 0.0,
                lon: 0.0,
                venue_id: "v".into(),
                category: None,
            })
            .collect();
        let users = group_by_user(raw);
        let s = split_dataset(users.clone(), seed).unwrap();
        prop_assert_eq!(s.valid.len(), n / 5);
        prop_assert_eq!(s.test.len(), n / 5);
        let mut ids: Vec<String> = s.train.iter().chain(&s.valid).chain(&s.test).map(|t| t.user_id.clone()).collect();
        ids.sort();
        let want: Vec<String> = users.iter().map(|t| t.user_id.clone()).collect();
        prop_assert_eq!(ids, want);
        prop_assert_eq!(split_dataset(users, seed).unwrap(), s);
    }

    #[test]
    fn time_bucket_matches_calendar(ts in -1_000_000_000i64..4_000_000_000) {
        let dt = DateTime::from_timestamp(ts, 0).unwrap();
        let want = dt.weekday().num_days_from_monday() as usize * 8 + dt.hour() as usize / 3;
        prop_assert_eq!(time_bucket(ts), want);
    }

    #[test]
    fn embedding_is_the_sum_of_its_tables(token in 0usize..9, bucket in 0usize..56, seed in any::<u64>()) {
        let mut store = ParamStore::new();
        let tables = EmbeddingTables::new(&mut store, 9, 56, 5, &mut ChaCha8Rng::seed_from_u64(seed));
        let e = embed(token, bucket, &tables, &store).unwrap();
        let loc = store.value(tables.phi_loc).row(token);
        let time = store.value(tables.phi_time).row(bucket);
        let want: Vec<f64> = loc.iter().zip(time).map(|(a, b)| a + b).collect();
        prop_assert_eq!(e.data(), &want[..]);
    }

    #[test]
    fn windows_are_full_and_maximal(len in 2usize..200, window in 2usize..40, stride in 1usize..40) {
        let ws = make_windows(len, window, stride).unwrap();
        if len < window {
            prop_assert_eq!(ws, vec![0..len]);
        } else {
            for (i, w) in ws.iter().enumerate() {
                prop_assert_eq!(w.start, i * stride);
                prop_assert_eq!(w.len(), window);
                prop_assert!(w.end <= len);
            }
            prop_assert!(ws.last().unwrap().start + stride + window > len);
        }
    }

    #[test]
    fn aggregation_ignores_arrival_order(
        payloads in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 9), 1..12),
        seed in any::<u64>(),
    ) {
        let updates: Vec<ClientUpdate> = payloads
            .iter()
            .enumerate()
            .map(|(i, p)| update(&format!("c{i:03}"), p.clone(), 3))
            .collect();
        let mut shuffled = updates.clone();
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let a = aggregate(&updates).unwrap();
        let b = aggregate(&shuffled).unwrap();
        prop_assert_eq!(a.signal, b.signal);
        prop_assert_eq!(a.contributing_clients, b.contributing_clients);
    }

    #[test]
    fn aggregation_is_linear(payloads in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..10)) {
        let make = |scale: f64| -> Vec<ClientUpdate> {
            payloads
                .iter()
                .enumerate()
                .map(|(i, p)| update(&format!("c{i}"), p.iter().map(|x| x * scale).collect(), 2))
                .collect()
        };
        let once = aggregate(&make(1.0)).unwrap().signal;
        let twice = aggregate(&make(2.0)).unwrap().signal;
        // Doubling is exact in binary, so the sums double exactly too.
        let doubled: Vec<f64> = once.iter().map(|x| 2.0 * x).collect();
        prop_assert_eq!(twice, doubled);
    }

    #[test]
    fn wire_round_trip(
        id in "[a-z0-9-]{0,20}",
        round in any::<u32>(),
        count in any::<u32>(),
        payload in prop::collection::vec(-1e3f64..1e3, 16),
    ) {
        let mut u = update(&id, payload, 4);
        u.round = round;
        u.window_count = count;
        let back = ClientUpdate::from_bytes(&u.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back, u.quantized());
    }

    #[test]
    fn vec_round_trip_and_rank_one(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 2..6)) {
        let e = Tensor::from_rows(&rows).unwrap();
        for r in compute_outer_products(&e).unwrap() {
            let v = r.o.vec();
            let back = v.clone().reshape(&[4, 4]).unwrap();
            prop_assert_eq!(&back, &r.o);
            for (i, k) in [(0, 1), (1, 3), (0, 2), (2, 3)] {
                for (j, l) in [(0, 1), (2, 3), (1, 2)] {
                    let minor = back.row(i)[j] * back.row(k)[l] - back.row(i)[l] * back.row(k)[j];
                    prop_assert!(minor.abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn ranking_matches_a_full_sort(row in prop::collection::vec(-3i32..3, 1..40), k in 1usize..45) {
        let row: Vec<f64> = row.into_iter().map(f64::from).collect();
        let mut ids: Vec<usize> = (0..row.len()).collect();
        ids.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        ids.truncate(k);
        prop_assert_eq!(rank_top_k(&row, k), ids);
    }

    #[test]
    fn metric_ordering(ranks in prop::collection::vec(prop::option::of(1usize..=20), 1..60)) {
        let preds: Vec<RankedPrediction> = ranks
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let truth = 1000;
                let mut ranked: Vec<usize> = (0..20).collect();
                if let Some(r) = r {
                    ranked[r - 1] = truth;
                }
                RankedPrediction { query: i + 1, ranked, truth }
            })
            .collect();
        let m = MetricsReport::from_predictions(&preds).unwrap();
        prop_assert!(m.is_consistent());
        prop_assert!(m.acc20 <= 1.0 && m.acc1 >= 0.0);
    }

    #[test]
    fn config_text_round_trip(seed in any::<u64>(), rounds in 1u32..50, sigma in 0.0f64..2.0, lk in 0usize..4) {
        let mut cfg = ExperimentConfig::reference(seed);
        cfg.fed.rounds = rounds;
        cfg.privacy.sigma = sigma;
        cfg.llm.lk = lk;
        let back = ExperimentConfig::from_text(&cfg.to_text().unwrap()).unwrap();
        prop_assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        prop_assert_eq!(back, cfg);
    }
}
