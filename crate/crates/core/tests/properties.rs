//! Randomized invariant checks over the public API.

use demand_matching::assignment::{
    auction_assign, complementary_slackness_violation, delta_from_prices, propagate_lower_bounds,
    propagate_upper_bounds,
};
use demand_matching::lp::{brute_force_oracle, export_bounds_lp, export_dual_lp, parse_lp, BoundDirection};
use demand_matching::market::{check_stability, discretize_shares, draw_sample};
use demand_matching::model::{
    assignment_shocks, logit_closed_form_invert, LogitModel, MultiSegmentModel, VerticalModel,
};
use demand_matching::msa::{msa_lower, msa_upper};
use demand_matching::{
    DeltaVector, DiscreteMarket, EpsilonSchedule, MarketShares, Model, MsaParams,
};
use proptest::prelude::*;

const EPS_FINAL: f64 = 1e-4;

fn shares_strategy(max_brands: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, 2..=max_brands)
}

fn market_strategy() -> impl Strategy<Value = (Vec<f64>, usize, u64)> {
    (shares_strategy(4), 20usize..=60, any::<u64>())
}

fn build_market(model: &Model, raw: &[f64], n: usize, seed: u64) -> DiscreteMarket {
    let shares = MarketShares::normalized(raw.to_vec()).unwrap();
    let counts = discretize_shares(&shares, n).unwrap();
    let sample = draw_sample(model, n, seed).unwrap();
    DiscreteMarket::new(counts, sample).unwrap()
}

fn two_segment_model(brands: usize, seed: u64) -> Model {
    let mut prices = vec![Vec::new(), Vec::new()];
    for j in 0..brands {
        // deterministic pseudo-random positive prices, distinct across segments
        let x = ((seed >> (j % 8)) & 0xff) as f64 / 256.0;
        prices[0].push(0.5 + x);
        prices[1].push(1.5 - x * 0.5);
    }
    Model::MultiSegment(MultiSegmentModel::new(prices, vec![0.4, 0.6]).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn msa_bounds_are_ordered_and_bracket_the_auction_point(
        (raw, n, seed) in market_strategy(),
    ) {
        let model = Model::Logit(LogitModel::new(raw.len()).unwrap());
        let market = build_market(&model, &raw, n, seed);
        let params = MsaParams::default();
        let upper = msa_upper(&model, &market, &params).unwrap();
        let lower = msa_lower(&model, &market, &upper, &params).unwrap();

        let shocks = assignment_shocks(&model, market.sample()).unwrap();
        let schedule = EpsilonSchedule::for_shocks(&shocks, EPS_FINAL).unwrap();
        let (alloc, prices) = auction_assign(&shocks, market.counts(), &schedule).unwrap();
        let point = delta_from_prices(&prices, alloc.brands_of_jars()).unwrap();

        let slack = 1e-2;
        for j in 0..raw.len() {
            prop_assert!(lower.get(j) <= upper.get(j) + 1e-12);
            prop_assert!(point.get(j) >= lower.get(j) - slack);
            prop_assert!(point.get(j) <= upper.get(j) + slack);
        }
        prop_assert_eq!(point.get(0), 0.0);
        prop_assert_eq!(upper.get(0), 0.0);
        prop_assert_eq!(lower.get(0), 0.0);
    }

    #[test]
    fn auction_satisfies_capacities_and_eps_slackness(
        (raw, n, seed) in market_strategy(),
    ) {
        let model = Model::Logit(LogitModel::new(raw.len()).unwrap());
        let market = build_market(&model, &raw, n, seed);
        let shocks = assignment_shocks(&model, market.sample()).unwrap();
        let schedule = EpsilonSchedule::for_shocks(&shocks, EPS_FINAL).unwrap();
        let (alloc, prices) = auction_assign(&shocks, market.counts(), &schedule).unwrap();

        let usage = alloc.brand_usage(market.brands()).unwrap();
        prop_assert_eq!(usage.as_slice(), market.counts());
        let violation = complementary_slackness_violation(&shocks, &alloc, &prices);
        prop_assert!(violation <= schedule.terminal * 1.0001);
    }

    #[test]
    fn auction_is_stable_across_model_families(
        (raw, n, seed) in market_strategy(),
        family in 0usize..3,
    ) {
        let brands = raw.len();
        let model = match family {
            0 => Model::Logit(LogitModel::new(brands).unwrap()),
            1 => {
                let prices = (0..brands).map(|j| 0.5 + j as f64 * 0.7).collect();
                Model::Vertical(VerticalModel::new(prices).unwrap())
            }
            _ => two_segment_model(brands, seed),
        };
        let market = build_market(&model, &raw, n, seed);
        let shocks = assignment_shocks(&model, market.sample()).unwrap();
        let schedule = EpsilonSchedule::for_shocks(&shocks, EPS_FINAL).unwrap();
        let (alloc, prices) = auction_assign(&shocks, market.counts(), &schedule).unwrap();
        let point = delta_from_prices(&prices, alloc.brands_of_jars()).unwrap();

        let report =
            check_stability(&model, &market, &point, &alloc, 2.0 * schedule.terminal).unwrap();
        prop_assert_eq!(report.blocking_pairs, 0);
    }

    #[test]
    fn propagated_bounds_enclose_the_optimal_assignment_point(
        (raw, n, seed) in (shares_strategy(3), 4usize..=7, any::<u64>()),
    ) {
        let model = Model::Logit(LogitModel::new(raw.len()).unwrap());
        let market = build_market(&model, &raw, n, seed);
        let shocks = assignment_shocks(&model, market.sample()).unwrap();
        let schedule = EpsilonSchedule::for_shocks(&shocks, 1e-7).unwrap();
        let (alloc, prices) = auction_assign(&shocks, market.counts(), &schedule).unwrap();
        let point = delta_from_prices(&prices, alloc.brands_of_jars()).unwrap();

        let (best, _) = brute_force_oracle(&shocks, market.counts()).unwrap();
        prop_assert!((best - alloc.surplus(&shocks)).abs() <= n as f64 * schedule.terminal);

        let lower = propagate_lower_bounds(&shocks, &alloc).unwrap();
        let upper = propagate_upper_bounds(&shocks, &alloc).unwrap();
        let slack = 2.0 * n as f64 * schedule.terminal;
        for j in 0..raw.len() {
            prop_assert!(point.get(j) >= lower.get(j) - slack);
            prop_assert!(point.get(j) <= upper.get(j) + slack);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn discretized_shares_apportion_within_one_unit(
        raw in shares_strategy(6),
        n in 1usize..=5000,
    ) {
        let shares = MarketShares::normalized(raw).unwrap();
        let counts = discretize_shares(&shares, n).unwrap();
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        for (c, s) in counts.iter().zip(shares.as_slice()) {
            prop_assert!((*c as f64 - s * n as f64).abs() < 1.0);
        }
    }

    #[test]
    fn segment_blocks_are_exact_and_contiguous(
        weights in prop::collection::vec(0.05f64..1.0, 2..=5),
        n in 1usize..=500,
    ) {
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let segments = weights.len();
        let prices = vec![vec![1.0; 2]; segments];
        let model = MultiSegmentModel::new(prices, weights.clone()).unwrap();

        let mut counts = vec![0usize; segments];
        let mut last = 0usize;
        for i in 0..n {
            let s = model.segment_of(i, n);
            prop_assert!(s >= last, "segment blocks must be contiguous");
            last = s;
            counts[s] += 1;
        }
        for (c, w) in counts.iter().zip(&weights) {
            prop_assert!((*c as f64 - w * n as f64).abs() < 1.0);
        }
    }

    #[test]
    fn normalized_shares_sum_to_one_and_keep_proportions(
        raw in shares_strategy(6),
    ) {
        let shares = MarketShares::normalized(raw.clone()).unwrap();
        let total: f64 = shares.as_slice().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let raw_total: f64 = raw.iter().sum();
        for (s, r) in shares.as_slice().iter().zip(&raw) {
            prop_assert!((s - r / raw_total).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_inversion_is_log_odds(raw in shares_strategy(5)) {
        let shares = MarketShares::normalized(raw).unwrap();
        let delta = logit_closed_form_invert(&shares).unwrap();
        let s = shares.as_slice();
        prop_assert_eq!(delta.get(0), 0.0);
        for j in 1..s.len() {
            prop_assert!((delta.get(j) - (s[j] / s[0]).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_lattice_operations_are_componentwise(
        a in prop::collection::vec(-5.0f64..5.0, 2..=5),
        b_tail in prop::collection::vec(-5.0f64..5.0, 2..=5),
    ) {
        let len = a.len().min(b_tail.len());
        let mut a = a[..len].to_vec();
        let mut b = b_tail[..len].to_vec();
        a[0] = 0.0;
        b[0] = 0.0;
        let a = DeltaVector::new(a).unwrap();
        let b = DeltaVector::new(b).unwrap();
        let meet = a.meet(&b).unwrap();
        let join = a.join(&b).unwrap();
        for j in 0..len {
            prop_assert_eq!(meet.get(j), a.get(j).min(b.get(j)));
            prop_assert_eq!(join.get(j), a.get(j).max(b.get(j)));
        }
        let meet_ba = b.meet(&a).unwrap();
        prop_assert_eq!(meet.as_slice(), meet_ba.as_slice());
        let idem = a.meet(&a).unwrap();
        prop_assert_eq!(idem.as_slice(), a.as_slice());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn lp_render_parse_round_trips_byte_identically(
        (raw, n, seed) in (shares_strategy(3), 3usize..=10, any::<u64>()),
    ) {
        let model = Model::Logit(LogitModel::new(raw.len()).unwrap());
        let market = build_market(&model, &raw, n, seed);
        let shocks = assignment_shocks(&model, market.sample()).unwrap();
        for doc in [
            export_dual_lp(&market, &shocks).unwrap(),
            export_bounds_lp(&market, &shocks, BoundDirection::Max).unwrap(),
            export_bounds_lp(&market, &shocks, BoundDirection::Min).unwrap(),
        ] {
            let text = doc.render();
            let reparsed = parse_lp(&text).unwrap();
            prop_assert_eq!(reparsed.render(), text);
        }
    }
}
