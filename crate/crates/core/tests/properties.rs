use proptest::prelude::*;

use tempo_meta::backbone::{objective, objective_grad, Component};
use tempo_meta::eval::{bucket_by_history, bucket_by_period, rank_from_scores, RankEntry};
use tempo_meta::meta::{gate_gradient, init_support_params, sigmoid};
use tempo_meta::*;

fn quad_strategy(ne: usize, nr: usize, nt: u64) -> impl Strategy<Value = Quadruple> {
    (0..ne, 0..nr, 0..ne, 0..nt).prop_map(|(s, r, o, t)| Quadruple::new(s, r, o, t))
}

fn param_strategy(ne: usize, nr: usize, d: usize) -> impl Strategy<Value = ParamSet> {
    let n = ne * d + 2 * nr * d + d;
    prop::collection::vec(-1.0f64..1.0, n).prop_map(move |v| {
        let mut p = ParamSet::zeros(ne, nr, d);
        for (dst, src) in p.iter_mut().zip(v) {
            *dst = src;
        }
        p
    })
}

fn snap_of(facts: &[(usize, usize, usize)]) -> Snapshot {
    Snapshot {
        t: 1,
        facts: facts
            .iter()
            .map(|&(s, r, o)| Quadruple::new(s, r, o, 1))
            .collect(),
    }
}

// Independent oracles, written against the raw parameter layout.

fn oracle_score(p: &ParamSet, a: usize, r_dir: usize, c: usize) -> f64 {
    let d = p.dim();
    let mut s = 0.0;
    for k in 0..d {
        s += p.other[k] * p.entity[a * d + k] * p.relation[r_dir * d + k] * p.entity[c * d + k];
    }
    s
}

fn oracle_loss(p: &ParamSet, facts: &[(usize, usize, usize)]) -> f64 {
    let ne = p.num_entities();
    let nr = p.num_relations();
    let mut total = 0.0;
    let mut n = 0;
    for &(s, r, o) in facts {
        for (a, rd, gold) in [(s, r, o), (o, r + nr, s)] {
            let z: f64 = (0..ne).map(|c| oracle_score(p, a, rd, c).exp()).sum();
            total -= (oracle_score(p, a, rd, gold).exp() / z).ln();
            n += 1;
        }
    }
    total / n as f64
}

fn numeric_grad(p: &ParamSet, snap: &Snapshot, l2: f64, h: f64) -> ParamSet {
    let mut g = p.zeros_like();
    let mut probe = p.clone();
    for c in Component::ALL {
        for i in 0..p.component(c).len() {
            let v = p.component(c)[i];
            probe.component_mut(c)[i] = v + h;
            let up = objective(&Trilinear, &probe, snap, l2).unwrap();
            probe.component_mut(c)[i] = v - h;
            let down = objective(&Trilinear, &probe, snap, l2).unwrap();
            probe.component_mut(c)[i] = v;
            g.component_mut(c)[i] = (up - down) / (2.0 * h);
        }
    }
    g
}

fn oracle_rank(scores: &[f64], gold: usize) -> usize {
    // Sort descending; among ties the gold entity goes last.
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| (a == gold).cmp(&(b == gold)))
    });
    idx.iter().position(|&e| e == gold).unwrap() + 1
}

fn entry(t: usize, gold: usize, rank: usize) -> RankEntry {
    RankEntry {
        t,
        anchor: 0,
        relation: 0,
        direction: backbone::Direction::Object,
        gold,
        rank,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parse_write_round_trip(quads in prop::collection::vec(quad_strategy(30, 5, 20), 1..80)) {
        let text: String = quads
            .iter()
            .map(|q| format!("{}\t{}\t{}\t{}\n", q.subject, q.relation, q.object, q.time))
            .collect();
        let parsed = parse_quadruples(text.as_bytes(), 1).unwrap();
        prop_assert_eq!(&parsed.quadruples, &quads);
        let kg = build_temporal_kg(&parsed.quadruples).unwrap();
        let mut out = Vec::new();
        kg.write_quadruples(&mut out).unwrap();
        let reparsed = parse_quadruples(out.as_slice(), 1).unwrap();
        let kg2 = build_temporal_kg(&reparsed.quadruples).unwrap();
        prop_assert_eq!(kg, kg2);
    }

    #[test]
    fn snapshots_partition_facts(quads in prop::collection::vec(quad_strategy(30, 5, 1000), 1..120)) {
        let kg = build_temporal_kg(&quads).unwrap();
        let mut raw_times: Vec<u64> = quads.iter().map(|q| q.time).collect();
        raw_times.sort_unstable();
        raw_times.dedup();
        prop_assert_eq!(kg.num_timestamps(), raw_times.len());
        prop_assert_eq!(kg.num_facts(), quads.len());
        // Every fact lands in the snapshot whose rank matches its raw time.
        let mut seen = 0;
        for (i, snap) in kg.snapshots().iter().enumerate() {
            prop_assert_eq!(snap.t, i + 1);
            let expect: Vec<(usize, usize, usize)> = quads
                .iter()
                .filter(|q| q.time == raw_times[i])
                .map(|q| (q.subject, q.relation, q.object))
                .collect();
            let got: Vec<(usize, usize, usize)> =
                snap.facts.iter().map(|q| (q.subject, q.relation, q.object)).collect();
            prop_assert_eq!(got, expect);
            seen += snap.len();
        }
        prop_assert_eq!(seen, quads.len());
    }

    #[test]
    fn split_is_chronological(n in 4usize..300, p0 in 0.5f64..0.75, p1 in 0.02f64..0.2) {
        let quads: Vec<Quadruple> = (0..n as u64).map(|t| Quadruple::new(0, 0, 1, t)).collect();
        let kg = split_by_time(build_temporal_kg(&quads).unwrap(), [p0, p1, 1.0 - p0 - p1]).unwrap();
        let s = kg.split().unwrap();
        prop_assert!(2 <= s.train_end);
        prop_assert!(s.train_end < s.valid_end);
        prop_assert!(s.valid_end < s.test_end);
        prop_assert_eq!(s.test_end, n);
        prop_assert_eq!(s.train().count() + s.valid().count() + s.test().count(), n);
    }

    #[test]
    fn history_matches_brute_force(quads in prop::collection::vec(quad_strategy(12, 3, 15), 4..100)) {
        let kg = build_temporal_kg(&quads).unwrap();
        let idx = build_history_index(&kg, HistoryMode::AllPreceding);
        for t in 1..=kg.num_timestamps() + 1 {
            for e in 0..kg.num_entities {
                let brute: usize = kg
                    .snapshots()
                    .iter()
                    .filter(|s| s.t < t)
                    .flat_map(|s| &s.facts)
                    .map(|q| usize::from(q.subject == e) + usize::from(q.object == e))
                    .sum();
                prop_assert_eq!(idx.count(e, t) as usize, brute);
                if t > 1 {
                    prop_assert!(idx.count(e, t) >= idx.count(e, t - 1));
                }
            }
        }
    }

    #[test]
    fn score_matches_triple_loop(p in param_strategy(6, 2, 5), a in 0usize..6, rd in 0usize..4) {
        let cands: Vec<usize> = (0..6).collect();
        let got = Trilinear.score(&p, a, rd, &cands).unwrap();
        for c in 0..6 {
            prop_assert!((got[c] - oracle_score(&p, a, rd, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_matches_direct_softmax(
        p in param_strategy(7, 3, 4),
        facts in prop::collection::vec((0usize..7, 0usize..3, 0usize..7), 1..10),
    ) {
        let got = Trilinear.loss(&p, &snap_of(&facts)).unwrap();
        prop_assert!((got - oracle_loss(&p, &facts)).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences(
        p in param_strategy(6, 2, 3),
        facts in prop::collection::vec((0usize..6, 0usize..2, 0usize..6), 1..6),
        l2 in prop_oneof![Just(0.0), Just(0.05)],
    ) {
        let snap = snap_of(&facts);
        let (_, g) = objective_grad(&Trilinear, &p, &snap, l2).unwrap();
        let fd = numeric_grad(&p, &snap, l2, 1e-5);
        for c in Component::ALL {
            for (a, n) in g.component(c).iter().zip(fd.component(c)) {
                prop_assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
            }
        }
    }

    #[test]
    fn gated_init_is_convex(
        prev in param_strategy(4, 2, 3),
        pp in param_strategy(4, 2, 3),
        g in prop::collection::vec(-30.0f64..30.0, 9),
    ) {
        let hist = ParamHistory { theta_prev: prev.clone(), theta_prevprev: pp.clone() };
        let gates = GateSet { ent: g[0..3].to_vec(), rel: g[3..6].to_vec(), other: g[6..9].to_vec() };
        let s = init_support_params(&hist, &gates).unwrap();
        for c in Component::ALL {
            for ((v, a), b) in s.component(c).iter().zip(prev.component(c)).zip(pp.component(c)) {
                prop_assert!(*v >= a.min(*b) && *v <= a.max(*b));
            }
        }
    }

    #[test]
    fn rank_matches_sort_oracle(scores in prop::collection::vec(prop_oneof![(-3i32..3).prop_map(f64::from), -3.0f64..3.0], 1..40), g in any::<prop::sample::Index>()) {
        let gold = g.index(scores.len());
        prop_assert_eq!(rank_from_scores(&scores, gold), oracle_rank(&scores, gold));
        // Strictly increasing transforms leave ranks alone.
        let warped: Vec<f64> = scores.iter().map(|s| (0.7 * s).exp() * 3.0 + 1.0).collect();
        prop_assert_eq!(rank_from_scores(&warped, gold), rank_from_scores(&scores, gold));
    }

    #[test]
    fn metrics_match_definitions(ranks in prop::collection::vec(1usize..60, 1..200)) {
        let log = RankLog { entries: ranks.iter().map(|&r| entry(1, 0, r)).collect() };
        let m = compute_metrics(&log).unwrap();
        let n = ranks.len() as f64;
        let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
        let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        prop_assert!((m.mrr - mrr).abs() < 1e-12);
        prop_assert!((m.hits1 - hits(1)).abs() < 1e-12);
        prop_assert!((m.hits3 - hits(3)).abs() < 1e-12);
        prop_assert!((m.hits10 - hits(10)).abs() < 1e-12);
        prop_assert!(m.hits1 <= m.hits3 && m.hits3 <= m.hits10);
    }

    #[test]
    fn buckets_partition_and_recombine(
        quads in prop::collection::vec(quad_strategy(10, 2, 12), 8..80),
        ranks in prop::collection::vec((1usize..30, 0usize..10, 1usize..14), 1..150),
        periods in 1usize..6,
    ) {
        let kg = build_temporal_kg(&quads).unwrap();
        let hist = build_history_index(&kg, HistoryMode::AllPreceding);
        let log = RankLog { entries: ranks.iter().map(|&(r, g, t)| entry(t, g, r)).collect() };
        let overall = compute_metrics(&log).unwrap();

        let hb = bucket_by_history(&log, &hist, &[2, 5, 9], eval::HistoryKey::Gold).unwrap();
        prop_assert_eq!(hb.iter().map(|b| b.count).sum::<usize>(), log.len());
        let mrr: f64 = hb.iter().filter_map(|b| b.report.map(|r| r.mrr * b.count as f64)).sum();
        prop_assert!((mrr / log.len() as f64 - overall.mrr).abs() < 1e-12);

        let distinct = ranks.iter().map(|r| r.2).collect::<std::collections::BTreeSet<_>>().len();
        prop_assert!(bucket_by_period(&log, distinct + 1).is_err());
        let pb = bucket_by_period(&log, periods.min(distinct)).unwrap();
        prop_assert_eq!(pb.iter().map(|b| b.report.count).sum::<usize>(), log.len());
        for w in pb.windows(2) {
            prop_assert!(w[0].last_t < w[1].first_t);
        }
    }
}

#[test]
fn hand_derived_two_entity_gradient() {
    // |E| = 2, |R| = 1, d = 1, one fact (0, 0, 1).
    let (a, b, r, ri, w) = (0.3, -0.8, 1.2, 0.5, 0.9);
    let mut p = ParamSet::zeros(2, 1, 1);
    p.entity = vec![a, b];
    p.relation = vec![r, ri];
    p.other = vec![w];
    let snap = snap_of(&[(0, 0, 1)]);

    // Object query: anchor a, candidates (a, b), gold b.
    let so = [w * a * r * a, w * a * r * b];
    let zo = so[0].exp() + so[1].exp();
    let po = [so[0].exp() / zo, so[1].exp() / zo];
    // Subject query: anchor b, inverse row, gold a.
    let ss = [w * b * ri * a, w * b * ri * b];
    let zs = ss[0].exp() + ss[1].exp();
    let ps = [ss[0].exp() / zs, ss[1].exp() / zs];
    let loss = 0.5 * (-(po[1].ln()) - ps[0].ln());

    // d score / d param, summed against (p - y) per query, averaged over 2.
    let (yo, ys) = ([0.0, 1.0], [1.0, 0.0]);
    let do0 = po[0] - yo[0];
    let do1 = po[1] - yo[1];
    let ds0 = ps[0] - ys[0];
    let ds1 = ps[1] - ys[1];
    let grad_a = 0.5 * (do0 * 2.0 * w * r * a + do1 * w * r * b + ds0 * w * b * ri);
    let grad_b = 0.5 * (do1 * w * a * r + ds0 * w * ri * a + ds1 * 2.0 * w * ri * b);
    let grad_r = 0.5 * (do0 * w * a * a + do1 * w * a * b);
    let grad_ri = 0.5 * (ds0 * w * b * a + ds1 * w * b * b);
    let grad_w = 0.5 * (do0 * a * r * a + do1 * a * r * b + ds0 * b * ri * a + ds1 * b * ri * b);

    let (l, g) = Trilinear.grad(&p, &snap).unwrap();
    assert!((l - loss).abs() < 1e-14);
    for (got, want) in [
        (g.entity[0], grad_a),
        (g.entity[1], grad_b),
        (g.relation[0], grad_r),
        (g.relation[1], grad_ri),
        (g.other[0], grad_w),
    ] {
        assert!((got - want).abs() < 1e-14, "{got} vs {want}");
    }
}

#[test]
fn gate_gradient_is_zero_for_equal_history() {
    let p = init_params(5, 2, 4, 3).unwrap();
    let hist = ParamHistory::bootstrap(p.clone());
    let mut gates = GateSet::zeros(4);
    gates.ent = vec![0.3, -1.0, 2.0, 0.0];
    let snap = snap_of(&[(0, 1, 2), (3, 0, 4)]);
    let (_, sg) = objective_grad(&Trilinear, &p, &snap, 0.0).unwrap();
    let gg = gate_gradient(&gates, &hist, &sg).unwrap();
    for c in Component::ALL {
        assert!(gg.get(c).iter().all(|&v| v == 0.0));
    }
    assert_eq!(sigmoid(0.0), 0.5);
}
