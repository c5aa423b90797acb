use predictive_exit::backbone::{reference_network, WeightStore};
use predictive_exit::energy::{DvfsTable, PowerState};
use predictive_exit::exit_head::{HeadConfig, HeadSet};
use predictive_exit::harness::{
    default_hierarchical_positions, expected_exit, export_exit_scatter, fine_grained_positions, record_traces, replay,
    run_live, search_placement, trace, EnergyContext, RunContext, ScatterMetric, Strategy, TraceRecord,
};
use predictive_exit::predictor::PredictorConfig;
use predictive_exit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn record(id: u64, label: usize, outputs: &[&[f64]], cumulative: &[u64]) -> TraceRecord<f64> {
    TraceRecord {
        sample_id: id,
        true_label: label,
        head_outputs: outputs.iter().map(|g| g.to_vec()).collect(),
        cumulative_ops: cumulative.to_vec(),
    }
}

fn ctx(strategy: Strategy<f64>, beta: f64, n_c: usize, mu: f64, head_ops: &[u64], classic_ops: u64) -> RunContext<f64> {
    let energy = EnergyContext::calibrated(DvfsTable::gv100(), 1.0, classic_ops).unwrap();
    RunContext::new(strategy, beta, n_c, vec![mu; head_ops.len()], head_ops.to_vec(), energy).unwrap()
}

fn predictive(l0: usize, beta: f64, l_total: usize) -> Strategy<f64> {
    Strategy::Predictive(PredictorConfig::with_defaults(l0, beta, l_total).unwrap())
}

const CUM6: [u64; 6] = [100, 200, 300, 400, 500, 600];
const HEADS6: [u64; 6] = [10, 20, 30, 40, 50, 0];

/// Six positions, four classes, mu = 0.25, beta = 3 (exit needs max > 0.75).
fn six_layer(p5: &[f64]) -> TraceRecord<f64> {
    record(
        0,
        1,
        &[
            &[1.0, 0.0, 0.0, 0.0],
            &[0.25, 0.25, 0.25, 0.25],
            &[0.875, 0.125, 0.0, 0.0],
            &[0.5, 0.25, 0.125, 0.125],
            p5,
            &[0.125, 0.625, 0.125, 0.125],
        ],
        &CUM6,
    )
}

#[test]
fn hand_walk_of_six_layer_trace() {
    // From 2: uniform output gives G1 max 0.75 (not > 0.75), G2 max 2.0, so zeta = 2 -> 4.
    // At 4 (tau clamped to 2): G1 max 0.875 -> zeta = 1 -> 5. At 5 (tau 1): zeta = 1 -> 6.
    let c = ctx(predictive(2, 3.0, 6), 3.0, 4, 0.25, &HEADS6, 600);
    let run = replay(&c, &[six_layer(&[0.625, 0.125, 0.125, 0.125])]).unwrap();
    let s = &run.samples[0];
    let positions: Vec<usize> = s.visits.iter().map(|v| v.position).collect();
    assert_eq!(positions, [2, 4, 5, 6]);
    assert_eq!(s.exit_layer, 6);
    assert_eq!(s.predicted_class, 1);
    assert!(s.correct);
    assert_eq!(s.predictions_made, 3);
    assert_eq!(s.first_predicted, Some(4));
    assert!(!s.prediction_hit);
    assert_eq!(s.heads_executed, 3);
    assert_eq!(s.predictor_ops, 2 * 4 * 3 + 4 * 3 + 4 * 3);
    assert_eq!(s.head_ops, 20 + 40 + 50);
    assert_eq!(s.ops_executed, 600 + 110 + 48);
    assert!(s.visits.last().unwrap().forced);

    let early = replay(&c, &[six_layer(&[0.875, 0.125, 0.0, 0.0])]).unwrap();
    let s = &early.samples[0];
    assert_eq!((s.exit_layer, s.predicted_class, s.correct), (5, 0, false));
    assert_eq!(s.ops_executed, 500 + 110 + 36);
}

#[test]
fn first_trial_exit_and_infinite_beta() {
    let confident = record(
        0,
        0,
        &[&[0.1, 0.9], &[0.95, 0.05], &[0.9, 0.1], &[0.2, 0.8]],
        &[10, 20, 30, 40],
    );
    let heads = [5, 5, 5, 0];
    let c = ctx(predictive(2, 1.5, 4), 1.5, 2, 0.5, &heads, 40);
    let s = &replay(&c, std::slice::from_ref(&confident)).unwrap().samples[0];
    assert_eq!((s.exit_layer, s.heads_executed, s.predictions_made), (2, 1, 0));
    assert_eq!(s.predicted_class, 0);
    // The exit-then-idle profile applies when no prediction was made.
    assert!(s.energy.segments.iter().any(|seg| seg.state == PowerState::Idle));

    let big = 1e30;
    let classic = replay(
        &ctx(Strategy::Classic, big, 2, 0.5, &heads, 40),
        std::slice::from_ref(&confident),
    )
    .unwrap();
    for strategy in [predictive(1, big, 4), Strategy::Hierarchical(vec![1, 2, 3])] {
        let run = replay(
            &ctx(strategy, big, 2, 0.5, &heads, 40),
            std::slice::from_ref(&confident),
        )
        .unwrap();
        assert_eq!(run.samples[0].exit_layer, 4);
        assert_eq!(run.samples[0].predicted_class, classic.samples[0].predicted_class);
        assert_eq!(run.metrics.accuracy, classic.metrics.accuracy);
    }
}

#[test]
fn hierarchical_cases() {
    let c = ctx(
        Strategy::Hierarchical(fine_grained_positions(6)),
        3.0,
        4,
        0.25,
        &HEADS6,
        600,
    );
    let s = &replay(&c, &[six_layer(&[0.625, 0.125, 0.125, 0.125])]).unwrap().samples[0];
    assert_eq!((s.exit_layer, s.heads_executed, s.ops_executed), (1, 1, 110));

    let flat = record(
        0,
        2,
        &[&[0.25; 4], &[0.25; 4], &[0.25; 4], &[0.25, 0.25, 0.3, 0.2]],
        &[1, 2, 3, 4],
    );
    let c = ctx(Strategy::Hierarchical(vec![1, 3]), 2.0, 4, 0.25, &[1, 1, 1, 0], 4);
    let s = &replay(&c, &[flat]).unwrap().samples[0];
    assert_eq!((s.exit_layer, s.predicted_class, s.heads_executed), (4, 2, 2));

    assert_eq!(default_hierarchical_positions(8), [2, 4, 6]);
    assert_eq!(default_hierarchical_positions(19), [5, 10, 14]);
    assert!(Strategy::<f64>::Hierarchical(vec![3, 2]).validate(8).is_err());
    assert!(Strategy::<f64>::Hierarchical(vec![8]).validate(8).is_err());
}

#[test]
fn matches_predictive_when_first_trial_succeeds() {
    let r = record(
        0,
        0,
        &[&[0.25; 4], &[0.9, 0.1, 0.0, 0.0], &[0.25; 4], &[0.25; 4]],
        &[10, 20, 30, 40],
    );
    let heads = [3, 3, 3, 0];
    let h = replay(
        &ctx(Strategy::Hierarchical(vec![2, 3]), 2.0, 4, 0.25, &heads, 40),
        std::slice::from_ref(&r),
    )
    .unwrap();
    let p = replay(&ctx(predictive(2, 2.0, 4), 2.0, 4, 0.25, &heads, 40), &[r]).unwrap();
    assert_eq!(h.samples[0].exit_layer, p.samples[0].exit_layer);
    assert_eq!(h.samples[0].ops_executed, p.samples[0].ops_executed);
    assert_eq!(h.samples[0].energy, p.samples[0].energy);
}

fn placement_traces() -> Vec<TraceRecord<f64>> {
    let cum = [100, 200, 300, 400];
    vec![
        record(0, 0, &[&[0.9, 0.1], &[0.9, 0.1], &[0.9, 0.1], &[0.9, 0.1]], &cum),
        record(1, 1, &[&[0.8, 0.2], &[0.5, 0.5], &[0.2, 0.8], &[0.1, 0.9]], &cum),
        record(2, 0, &[&[0.5, 0.5], &[0.875, 0.125], &[0.9, 0.1], &[0.9, 0.1]], &cum),
        record(3, 1, &[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5], &[0.25, 0.75]], &cum),
    ]
}

#[test]
fn placement_matches_hand_enumeration() {
    // Threshold 0.75. Hand totals with budget 0: {} 1600, {2} 1320, {3} 1420, {2,3} 1280;
    // any set with 1 misclassifies sample 1. With one error allowed: {1} 1120, {1,2} 980.
    let traces = placement_traces();
    let c = ctx(Strategy::Classic, 1.5, 2, 0.5, &[30, 30, 30, 0], 400);
    let strict = search_placement(&traces, &c, &[1, 2, 3], 3, 0.0).unwrap();
    assert_eq!(strict.positions, [2, 3]);
    assert_eq!(strict.mean_ops, 320.0);
    assert_eq!(strict.classic_accuracy, 1.0);
    assert_eq!(strict.subsets_evaluated, 8);

    let loose = search_placement(&traces, &c, &[1, 2, 3], 3, 0.25).unwrap();
    assert_eq!(loose.positions, [1, 2]);
    assert_eq!(loose.mean_ops, 245.0);
    assert_eq!(loose.accuracy, 0.75);

    let single = search_placement(&traces, &c, &[1, 2, 3], 1, 0.25).unwrap();
    assert_eq!(single.positions, [1]);
    let everywhere = search_placement(&traces, &c, &[1, 2, 3], 4, 1.0).unwrap();
    assert!(everywhere.mean_ops <= single.mean_ops);
}

#[test]
fn placement_degenerate_cases() {
    // Heads never right: any early exit loses accuracy, so budget 0 leaves the empty set.
    let cum = [1, 2, 3];
    let wrong = vec![
        record(0, 0, &[&[0.1, 0.9], &[0.1, 0.9], &[0.9, 0.1]], &cum),
        record(1, 1, &[&[0.9, 0.1], &[0.9, 0.1], &[0.1, 0.9]], &cum),
    ];
    let c = ctx(Strategy::Classic, 1.5, 2, 0.5, &[1, 1, 0], 3);
    assert!(search_placement(&wrong, &c, &[1, 2], 2, 0.0)
        .unwrap()
        .positions
        .is_empty());
    // Nothing ever exits and heads are free: every subset ties, fewest exits wins.
    let flat = vec![record(0, 0, &[&[0.5, 0.5], &[0.5, 0.5], &[0.6, 0.4]], &cum)];
    let free = ctx(Strategy::Classic, 1.5, 2, 0.5, &[0, 0, 0], 3);
    assert!(search_placement(&flat, &free, &[1, 2], 2, 0.0)
        .unwrap()
        .positions
        .is_empty());
    assert!(search_placement::<f64>(&[], &free, &[1], 1, 0.0).is_err());
}

fn random_traces(rng: &mut ChaCha8Rng, n: usize, l_total: usize, n_c: usize) -> Vec<TraceRecord<f64>> {
    let cumulative: Vec<u64> = (1..=l_total as u64).map(|i| i * 1000).collect();
    (0..n)
        .map(|i| {
            let outputs = (0..l_total)
                .map(|p| {
                    let sharp = 1.0 + 6.0 * p as f64 / l_total as f64 * rng.random::<f64>();
                    let z: Vec<f64> = (0..n_c).map(|_| rng.random::<f64>() * sharp).collect();
                    let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.into_iter().map(|v| v / s).collect()
                })
                .collect();
            TraceRecord {
                sample_id: i as u64,
                true_label: rng.random_range(0..n_c),
                head_outputs: outputs,
                cumulative_ops: cumulative.clone(),
            }
        })
        .collect()
}

#[test]
fn invariants_over_random_traces() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (l_total, n_c) = (10, 4);
    let traces = random_traces(&mut rng, 300, l_total, n_c);
    let heads: Vec<u64> = (0..l_total).map(|p| if p + 1 < l_total { 150 } else { 0 }).collect();
    let classic_ops = traces[0].cumulative_ops[l_total - 1];
    for beta in [1.2, 1.6, 2.5] {
        let classic = replay(&ctx(Strategy::Classic, beta, n_c, 0.25, &heads, classic_ops), &traces).unwrap();
        assert!((classic.metrics.normalized_ops - 1.0).abs() < 1e-12);
        assert!((classic.metrics.normalized_energy - 1.0).abs() < 1e-9);
        let correct = traces
            .iter()
            .filter(|r| predictive_exit::tensor::argmax(&r.head_outputs[l_total - 1]) == r.true_label)
            .count();
        assert_eq!(classic.metrics.accuracy, correct as f64 / traces.len() as f64);

        for l0 in [1, 3, 5] {
            let pred = replay(
                &ctx(predictive(l0, beta, l_total), beta, n_c, 0.25, &heads, classic_ops),
                &traces,
            )
            .unwrap();
            for (p, c) in pred.samples.iter().zip(&classic.samples) {
                // A failed check never forces an exit.
                let last = p.visits.last().unwrap();
                assert!(last.forced || last.alpha > 1.0);
                assert!(p.visits[..p.visits.len() - 1]
                    .iter()
                    .all(|v| !v.exited && v.alpha <= 1.0));
                // Independent op counter.
                let heads_run: u64 = p
                    .visits
                    .iter()
                    .filter(|v| !v.forced)
                    .map(|v| heads[v.position - 1])
                    .sum();
                let pred_ops: u64 = p.visits[..p.visits.len() - 1]
                    .iter()
                    .map(|v| (l_total - v.position).min(l_total - l0) as u64)
                    .zip(p.visits.windows(2).map(|w| (w[1].position - w[0].position) as u64))
                    .map(|(_, zeta)| zeta * n_c as u64 * 3)
                    .sum();
                assert_eq!(p.ops_executed, p.exit_layer as u64 * 1000 + heads_run + pred_ops);
                if p.exit_layer < l_total {
                    assert!(p.energy.total_joules <= c.energy.total_joules + 1e-9);
                }
                let joules: f64 = p.energy.segments.iter().map(|s| s.joules).sum();
                assert!((joules - p.energy.total_joules).abs() < 1e-6);
            }
            let m = &pred.metrics;
            assert!(m.failure_rates.iter().all(|r| (0.0..=1.0).contains(r)));
            if let Some(a) = m.prediction_accuracy {
                assert!((0.0..=1.0).contains(&a));
            }
            let e = expected_exit(&pred).unwrap();
            assert!((e.start - l0 as f64).abs() < 1e-12);
            assert!((e.empirical - e.decomposition).abs() < 1e-9);
            assert!((e.empirical - m.expected_exit).abs() < 1e-12);
        }
    }
}

#[test]
fn expected_exit_examples() {
    let cum = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
    let mut a = vec![vec![0.5, 0.5]; 10];
    a[5] = vec![1.0, 0.0];
    let mut b = vec![vec![0.5, 0.5]; 10];
    b[9] = vec![1.0, 0.0];
    let to_rec = |id, outs: &Vec<Vec<f64>>| TraceRecord {
        sample_id: id,
        true_label: 0,
        head_outputs: outs.clone(),
        cumulative_ops: cum.to_vec(),
    };
    let traces = [to_rec(0, &a), to_rec(1, &b)];
    let run = replay(
        &ctx(Strategy::Hierarchical(vec![6]), 1.5, 2, 0.5, &[1; 10], 10),
        &traces,
    )
    .unwrap();
    let exits: Vec<usize> = run.samples.iter().map(|s| s.exit_layer).collect();
    assert_eq!(exits, [6, 10]);
    assert_eq!(expected_exit(&run).unwrap().empirical, 8.0);
    let all_first = replay(
        &ctx(Strategy::Hierarchical(vec![6]), 1.5, 2, 0.5, &[1; 10], 10),
        &traces[..1],
    )
    .unwrap();
    assert_eq!(expected_exit(&all_first).unwrap().empirical, 6.0);
}

#[test]
fn scatter_rows() {
    let r = record(0, 0, &[&[0.25; 4], &[0.7, 0.1, 0.1, 0.1], &[0.25; 4]], &[1, 2, 3]);
    let mut c = ctx(predictive(1, 1.0, 3), 1.0, 4, 0.25, &[1, 1, 0], 3);
    let run = replay(&c, std::slice::from_ref(&r)).unwrap();
    assert!(export_exit_scatter(&run, ScatterMetric::CrossEntropy).is_err());
    c.log_outputs = true;
    let run = replay(&c, &[r]).unwrap();
    let wr = export_exit_scatter(&run, ScatterMetric::WeightRatio).unwrap();
    assert_eq!(wr.len(), 1);
    assert_eq!(wr[0].value, 1.0);
    let ce = export_exit_scatter(&run, ScatterMetric::CrossEntropy).unwrap();
    assert!((ce[0].value - 4f64.ln()).abs() < 1e-12);
    assert_eq!(ce[0].exit_layer, run.samples[0].exit_layer);

    // Exits at L0 with alpha = 1.4.
    let r = record(0, 0, &[&[0.35, 0.25, 0.2, 0.2], &[0.25; 4]], &[1, 2]);
    let run = replay(&ctx(predictive(1, 1.0, 2), 1.0, 4, 0.25, &[1, 0], 2), &[r]).unwrap();
    let row = &export_exit_scatter(&run, ScatterMetric::WeightRatio).unwrap()[0];
    assert!((row.value - 1.4).abs() < 1e-12);
    assert_eq!(row.exit_layer, 1);
}

#[test]
fn replay_rejects_mismatched_traces() {
    let r = record(0, 0, &[&[0.5, 0.5], &[0.5, 0.5]], &[1, 2]);
    let c = ctx(Strategy::Classic, 1.0, 2, 0.5, &[1, 1, 0], 3);
    assert!(replay(&c, &[r]).is_err());
}

#[test]
fn live_matches_replay_on_random_model() {
    let net = reference_network();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let weights = WeightStore::<f32>::init(&net, &mut rng);
    let mut heads = HeadSet::init(&net, HeadConfig::default(), &mut rng).unwrap();
    let inputs: Vec<Tensor<f32>> = (0..12)
        .map(|_| {
            let data = (0..3 * 32 * 32).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            Tensor::new(vec![3, 32, 32], data).unwrap()
        })
        .collect();
    let labels: Vec<usize> = (0..12).map(|i| i % 4).collect();
    heads.calibrate(&net, &weights, &inputs).unwrap();
    let traces = record_traces(&net, &weights, &heads, &inputs, &labels).unwrap();
    let mut text = Vec::new();
    trace::write_ndjson(&mut text, &traces).unwrap();
    let loaded: Vec<TraceRecord<f32>> = trace::read_ndjson(&text[..]).unwrap();
    assert_eq!(loaded, traces);
    let energy = EnergyContext::calibrated(DvfsTable::gv100(), 0.02, net.total_ops()).unwrap();
    for (strategy, beta) in [
        (Strategy::Classic, 1.0f32),
        (Strategy::Hierarchical(fine_grained_positions(net.l_total())), 1.0),
        (
            Strategy::Predictive(PredictorConfig::with_defaults(2, 1.0, net.l_total()).unwrap()),
            1.0,
        ),
        (
            Strategy::Predictive(PredictorConfig::with_defaults(1, 0.9, net.l_total()).unwrap()),
            0.9,
        ),
    ] {
        let c = RunContext::for_heads(strategy, beta, &net, &heads, energy.clone()).unwrap();
        let live = run_live(&c, &net, &weights, &heads, &inputs, &labels).unwrap();
        let replayed = replay(&c, &loaded).unwrap();
        assert_eq!(live, replayed);
    }
}

#[test]
fn shipped_ndjson_trace_replays_under_every_strategy() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/traces/sample.ndjson");
    let traces: Vec<TraceRecord<f64>> = trace::load_traces(&path).unwrap();
    assert_eq!(trace::validate_traces(&traces).unwrap(), (4, 3));
    let narrow: Vec<TraceRecord<f32>> = trace::load_traces(&path).unwrap();
    assert_eq!(narrow.len(), 4);

    let mu = 1.0 / 3.0;
    let heads = [10, 10, 10, 0];
    let fine = replay(
        &ctx(
            Strategy::Hierarchical(fine_grained_positions(4)),
            2.0,
            3,
            mu,
            &heads,
            400,
        ),
        &traces,
    )
    .unwrap();
    let exits: Vec<usize> = fine.samples.iter().map(|s| s.exit_layer).collect();
    let ops: Vec<u64> = fine.samples.iter().map(|s| s.ops_executed).collect();
    assert_eq!(exits, [1, 2, 4, 3]);
    assert_eq!(ops, [110, 220, 430, 330]);
    assert_eq!(fine.metrics.accuracy, 1.0);

    for s in [
        Strategy::Classic,
        Strategy::Hierarchical(vec![2]),
        Strategy::Placement(vec![1, 3]),
        predictive(1, 2.0, 4),
    ] {
        let run = replay(&ctx(s, 2.0, 3, mu, &heads, 400), &traces).unwrap();
        assert_eq!(run.samples.len(), 4);
    }
}
