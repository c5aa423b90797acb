//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs as a plain binary so the lines are always printed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use predictive_exit::backbone::load_model;
use predictive_exit::dataset::{load_split, Split, SyntheticSpec};
use predictive_exit::energy::{
    energy_classic, energy_exit_then_idle, energy_predictive, f_middle, select_level, DvfsTable,
};
use predictive_exit::exit_head::{load_heads, ExitHead};
use predictive_exit::harness::trace::{load_traces, save_traces};
use predictive_exit::harness::{
    fine_grained_positions, record_traces, ExperimentConfig, RunContext, SampleResult, Strategy, StrategyConfig,
};
use predictive_exit::pipeline::{self, CalibrationReport, HeadMetrics, RunReport, SweepReport};
use predictive_exit::predictor::{predict, PredictorConfig};
use predictive_exit::tensor::{affine, affine_backward, Tensor};
use predictive_exit::trainer::{cross_entropy_logits, grad_check, head_gradients};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = std::result::Result<String, String>;
type FixtureCheck = (&'static str, fn(&Fixture) -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// Predictor

/// Recompute-from-scratch oracle: step `zeta` re-applies the padded window
/// sum `zeta` times starting from `g`.
fn oracle_step(g: &[f64], h: &[f64], zeta: usize, normalize: bool) -> Vec<f64> {
    let half = (h.len() - 1) / 2;
    let mut cur = g.to_vec();
    for _ in 0..zeta {
        let mut padded = vec![0.0; half];
        padded.extend(&cur);
        padded.extend(vec![0.0; half]);
        let mut next: Vec<f64> = (0..cur.len())
            .map(|i| {
                let mut acc = 0.0;
                for k in 0..h.len() {
                    acc += h[k] * padded[i + k];
                }
                acc
            })
            .collect();
        if normalize {
            let total: f64 = next.iter().sum();
            if total > 0.0 {
                next.iter_mut().for_each(|v| *v /= total);
            }
        }
        cur = next;
    }
    cur
}

struct OracleOutcome {
    zeta: usize,
    confident: bool,
    steps: Vec<(Vec<f64>, f64)>,
}

fn oracle_predict(
    g: &[f64],
    h: &[f64],
    l0: usize,
    tau: usize,
    beta: f64,
    mu: &[f64],
    normalize: bool,
) -> OracleOutcome {
    let mut steps = Vec::new();
    for zeta in 1..=tau {
        let big_g = oracle_step(g, h, zeta, normalize);
        let max = big_g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let conf = max / (beta * mu[l0 + zeta - 1]);
        steps.push((big_g, conf));
        if conf > 1.0 {
            return OracleOutcome {
                zeta,
                confident: true,
                steps,
            };
        }
    }
    OracleOutcome {
        zeta: tau,
        confident: false,
        steps,
    }
}

fn predictor_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut confident, mut fallback) = (0, 0);
    for case in 0..1000 {
        let n_c = rng.random_range(2..=16);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let tau = rng.random_range(1..=12);
        let l0 = rng.random_range(1..=4);
        let raw: Vec<f64> = (0..n_c).map(|_| rng.random::<f64>().powi(3)).collect();
        let s: f64 = raw.iter().sum();
        let g: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let h: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.5)).collect();
        let mu: Vec<f64> = (0..l0 + tau).map(|_| rng.random_range(0.5..2.0) / n_c as f64).collect();
        let beta = rng.random_range(0.5..(2.0 * n_c as f64));
        let normalize = rng.random_bool(0.25);
        let cfg = PredictorConfig {
            l0,
            beta,
            tau,
            filter: h.clone(),
            normalize_steps: normalize,
        };
        let got = predict(&Tensor::vector(g.clone()).map_err(err)?, &cfg, &mu).map_err(err)?;
        let want = oracle_predict(&g, &h, l0, tau, beta, &mu, normalize);
        ensure(
            got.zeta == want.zeta && got.confident == want.confident,
            format!("case {case}: zeta {} vs oracle {}", got.zeta, want.zeta),
        )?;
        ensure(got.trace.len() == want.steps.len(), format!("case {case}: step count"))?;
        for (st, (big_g, conf)) in got.trace.iter().zip(&want.steps) {
            ensure(
                st.predicted.data() == big_g.as_slice(),
                format!("case {case}: G differs at step {}", st.zeta),
            )?;
            ensure(
                st.confidence.to_bits() == conf.to_bits(),
                format!("case {case}: confidence differs at step {}", st.zeta),
            )?;
        }
        ensure(
            got.ops == (want.steps.len() * n_c * k) as u64,
            format!("case {case}: ops {}", got.ops),
        )?;
        if want.confident {
            confident += 1;
        } else {
            fallback += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), format!("took {elapsed:?}"))?;
    Ok(format!(
        "1000 instances identical ({confident} confident, {fallback} fallback) in {elapsed:.2?}"
    ))
}

fn predictor_hand_trace() -> Check {
    let g = Tensor::vector(vec![0.4, 0.3, 0.2, 0.1]).map_err(err)?;
    let cfg = PredictorConfig::with_defaults(1, 2.0, 8).map_err(err)?;
    let p = predict(&g, &cfg, &[0.25; 8]).map_err(err)?;
    let expected = [0.0 + 0.4 + 0.3, 0.4 + 0.3 + 0.2, 0.3 + 0.2 + 0.1, 0.2 + 0.1 + 0.0];
    let big_g = p.trace[0].predicted.data();
    ensure(p.zeta == 1 && p.confident, format!("zeta {}", p.zeta))?;
    ensure(big_g == expected, format!("G = {big_g:?}"))?;
    for (a, b) in big_g.iter().zip([0.7f64, 0.9, 0.6, 0.3]) {
        ensure((a - b).abs() < 1e-15, format!("G = {big_g:?}"))?;
    }
    Ok(format!(
        "zeta = 1, G = {big_g:?}, confidence {:.3}",
        p.trace[0].confidence
    ))
}

// ---------------------------------------------------------------------------
// Energy

fn energy_closed_forms() -> Check {
    let t = DvfsTable::gv100();
    let (hi, lo) = (t.highest(), t.lowest());
    let classic = energy_classic(1.0, hi).map_err(err)?.total_joules;
    let idle = energy_exit_then_idle(0.4, 1.0, hi, lo).map_err(err)?.total_joules;
    let pred = energy_predictive(0.2, 1.0, hi, lo).map_err(err)?.total_joules;
    // 1.45 GHz active 218.5 W; 0.60 GHz active 59.2 W, idle 35.1 W.
    let want = [218.5, 0.4 * 218.5 + 0.6 * 35.1, 0.2 * 218.5 + 0.8 * 59.2];
    for (name, got, w) in [
        ("classic", classic, want[0]),
        ("exit+idle", idle, want[1]),
        ("predictive", pred, want[2]),
    ] {
        ensure((got - w).abs() <= 1e-6, format!("{name}: {got} J, expected {w}"))?;
    }
    ensure(
        (want[1] - 108.46).abs() < 1e-9 && (want[2] - 91.06).abs() < 1e-9,
        "oracle arithmetic",
    )?;
    ensure(pred < idle && idle < classic, "ordering")?;
    Ok(format!("{classic} J > {idle:.2} J > {pred:.2} J"))
}

fn frequency_selection() -> Check {
    let t = DvfsTable::gv100();
    let f = f_middle(4, 6, 19, 1.45).map_err(err)?;
    ensure(
        (f - 4.0 / 13.0 * 1.45).abs() < 1e-12 && (f - 0.446).abs() < 5e-4,
        format!("f_middle {f}"),
    )?;
    let chosen = select_level(f, &t).map_err(err)?.frequency;
    ensure(
        chosen == 0.60 && chosen == t.lowest().frequency,
        format!("picked {chosen}"),
    )?;
    let freqs: Vec<f64> = t.levels().iter().map(|l| l.frequency).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut targets: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..=1.45)).collect();
    targets.sort_by(f64::total_cmp);
    let mut last = 0.0;
    for x in targets {
        let got = select_level(x, &t).map_err(err)?.frequency;
        let oracle = freqs.iter().cloned().filter(|&q| q >= x).fold(f64::INFINITY, f64::min);
        ensure(got == oracle, format!("target {x}: {got} vs {oracle}"))?;
        ensure(got >= last, format!("not monotone at {x}"))?;
        last = got;
    }
    Ok(format!("f_middle = {f:.4} GHz -> {chosen} GHz; 1000 targets monotone"))
}

// ---------------------------------------------------------------------------
// Gradients

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn gradient_checks() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (m, n) = (6, 16);
    let x = Tensor::vector(gaussian(&mut rng, n, 1.0)).map_err(err)?;
    let affine_loss = |p: &[f64]| {
        let w = Tensor::new(vec![m, n], p[..m * n].to_vec())?;
        let b = Tensor::vector(p[m * n..].to_vec())?;
        let (loss, gz) = cross_entropy_logits(affine(&x, &w, &b)?.data(), 2)?;
        let (_, gw, gb) = affine_backward(&x, &w, &Tensor::vector(gz)?)?;
        let mut g = gw.into_data();
        g.extend(gb.into_data());
        Ok((loss, g))
    };
    let params = gaussian(&mut rng, m * n + m, 0.5);
    let affine_err = grad_check(affine_loss, &params, 1e-5, 64, 1).map_err(err)?;

    let (c, v, nc) = (8, 12, 4);
    let head = ExitHead::new(
        1,
        0,
        Tensor::new(vec![v, c], gaussian(&mut rng, v * c, 0.35)).map_err(err)?,
        1.0,
        Tensor::new(vec![nc, v], gaussian(&mut rng, nc * v, 0.3)).map_err(err)?,
        Tensor::vector(vec![0.0; nc]).map_err(err)?,
        false,
    )
    .map_err(err)?;
    let y = Tensor::new(vec![c, 4, 4], gaussian(&mut rng, c * 16, 0.8)).map_err(err)?;
    let sizes = [v * c, nc * v, nc];
    let mut flat = head.codebook.data().to_vec();
    flat.extend(head.fc_weight.data());
    flat.extend(head.fc_bias.data());
    let bof_loss = |p: &[f64]| {
        let mut h = head.clone();
        h.codebook = Tensor::new(vec![v, c], p[..sizes[0]].to_vec())?;
        h.fc_weight = Tensor::new(vec![nc, v], p[sizes[0]..sizes[0] + sizes[1]].to_vec())?;
        h.fc_bias = Tensor::vector(p[sizes[0] + sizes[1]..].to_vec())?;
        let (loss, g) = head_gradients(&h, &y, 3)?;
        let mut all = g.codebook;
        all.extend(g.fc_weight);
        all.extend(g.fc_bias);
        Ok((loss, all))
    };
    let bof_err = grad_check(bof_loss, &flat, 1e-5, 64, 2).map_err(err)?;
    let elapsed = start.elapsed();
    ensure(affine_err < 1e-4, format!("affine max rel error {affine_err:.2e}"))?;
    ensure(bof_err < 1e-3, format!("BoF max rel error {bof_err:.2e}"))?;
    ensure(elapsed < Duration::from_secs(30), format!("took {elapsed:?}"))?;
    Ok(format!(
        "affine {affine_err:.2e}, BoF {bof_err:.2e} over 64 coordinates each in {elapsed:.2?}"
    ))
}

// ---------------------------------------------------------------------------
// Desk-scale end-to-end fixture

const DESK_CONFIG: &str = include_str!("../../../configs/desk.json");
const ACCURACY_DROP: f64 = 0.02;
/// Pinned from the first verified run of the fixture (best non-trivial L0 reached 99%).
const SWEEP_PREDICTION_THRESHOLD: f64 = 0.95;

struct Fixture {
    cfg: ExperimentConfig,
    l_total: usize,
    reports: Vec<RunReport>,
    calibration: CalibrationReport,
    heads: HeadMetrics,
    validation_sweep: SweepReport,
    elapsed: Duration,
}

impl Fixture {
    fn report(&self, label: &str) -> &RunReport {
        self.reports
            .iter()
            .find(|r| r.label == label)
            .expect("strategy was run")
    }
}

fn samples(path: &Path) -> Vec<SampleResult> {
    std::fs::read_to_string(path)
        .expect("sample log")
        .lines()
        .map(|l| serde_json::from_str(l).expect("sample record"))
        .collect()
}

fn build_fixture(dir: &Path) -> std::result::Result<Fixture, String> {
    let start = Instant::now();
    let mut cfg: ExperimentConfig = serde_json::from_str(DESK_CONFIG).map_err(err)?;
    cfg.dataset = Some(dir.join("data"));
    cfg.model = dir.join("model.json");
    cfg.heads = dir.join("heads.json");
    cfg.output_dir = dir.to_path_buf();
    cfg.traces = None;
    cfg.validate().map_err(err)?;

    pipeline::gen_data(&dir.join("data"), cfg.seed, &SyntheticSpec::default()).map_err(err)?;
    pipeline::train::<f32>(&cfg).map_err(err)?;
    let heads = pipeline::train_exits::<f32>(&cfg).map_err(err)?.report;
    let calibration = pipeline::calibrate::<f32>(&cfg).map_err(err)?.report;

    // L0 is picked on the validation split.
    let (net, weights) = load_model::<f32>(&cfg.model).map_err(err)?;
    let head_set = load_heads::<f32>(&cfg.heads).map_err(err)?;
    let validation = load_split::<f32>(dir.join("data").as_path(), Split::Validation).map_err(err)?;
    let traces = record_traces(&net, &weights, &head_set, &validation.inputs, &validation.labels).map_err(err)?;
    save_traces(&dir.join(pipeline::VALIDATION_TRACES), &traces).map_err(err)?;
    let base = RunContext::new(
        Strategy::Classic,
        cfg.beta as f32,
        head_set.num_classes,
        head_set.mu_by_position().map_err(err)?,
        head_set.head_ops(&net).map_err(err)?,
        pipeline::energy_context(&cfg, net.total_ops()).map_err(err)?,
    )
    .map_err(err)?;
    let params = cfg.predictor.clone().ok_or("desk config has no predictor")?;
    let l_total = net.l_total();
    let validation_sweep = pipeline::sweep_traces(&params, &base, &traces, 1..=l_total - 1).map_err(err)?;
    let best = validation_sweep
        .best(ACCURACY_DROP)
        .ok_or("no L0 within the accuracy budget")?
        .l0;
    cfg.predictor.as_mut().expect("checked").l0 = best;

    let strategies = [
        StrategyConfig::Classic,
        StrategyConfig::Hierarchical { positions: None },
        StrategyConfig::Hierarchical {
            positions: Some(fine_grained_positions(l_total)),
        },
        StrategyConfig::Placement {
            positions: None,
            max_exits: 3,
            accuracy_budget: ACCURACY_DROP,
        },
        StrategyConfig::Predictive,
    ];
    let mut reports = Vec::new();
    for s in strategies {
        let run_cfg = ExperimentConfig {
            strategy: s,
            ..cfg.clone()
        };
        reports.push(pipeline::run::<f32>(&run_cfg).map_err(err)?.report);
    }
    cfg.strategy = StrategyConfig::Predictive;
    Ok(Fixture {
        cfg,
        l_total,
        reports,
        calibration,
        heads,
        validation_sweep,
        elapsed: start.elapsed(),
    })
}

fn desk_end_to_end(f: &Fixture) -> Check {
    let classic = f.report("classic").metrics.accuracy;
    for r in &f.reports {
        let drop = classic - r.metrics.accuracy;
        ensure(
            drop <= ACCURACY_DROP + 1e-12,
            format!("{} drops {:.1} points", r.label, 100.0 * drop),
        )?;
    }
    let pred = &f.report("predictive").metrics;
    let fine = &f.report("fine-grained").metrics;
    ensure(
        pred.normalized_ops < fine.normalized_ops,
        format!(
            "(a) predictive ops {:.4} >= fine-grained {:.4}",
            pred.normalized_ops, fine.normalized_ops
        ),
    )?;
    ensure(
        pred.normalized_energy < 1.0,
        format!("(b) predictive energy {:.4}", pred.normalized_energy),
    )?;

    // (c) every early exit re-checked against the recorded head outputs.
    let traces = load_traces::<f32>(&f.cfg.output_dir.join(pipeline::TEST_TRACES)).map_err(err)?;
    let mu = &f.calibration.mu;
    let beta = f.cfg.beta as f32;
    let mut early = 0;
    for r in &f.reports {
        let log = f.cfg.output_dir.join(format!("live_{}_samples.ndjson", r.label));
        for s in samples(&log) {
            if s.exit_layer < f.l_total {
                let g = &traces[s.sample_id as usize].head_outputs[s.exit_layer - 1];
                let max = g.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let alpha = max / (beta * mu[s.exit_layer - 1] as f32);
                ensure(
                    alpha > 1.0,
                    format!(
                        "(c) {} sample {} exits at {} with alpha {alpha}",
                        r.label, s.sample_id, s.exit_layer
                    ),
                )?;
                early += 1;
            }
        }
    }
    ensure(
        f.elapsed < Duration::from_secs(300),
        format!("(d) wall time {:.1?}", f.elapsed),
    )?;
    Ok(format!(
        "beta {}, L0 {}; accuracy classic {:.1}% predictive {:.1}%; ops predictive {:.2}% < fine-grained {:.2}%; energy {:.2}%; {early} early exits all alpha > 1; {:.1?}",
        f.cfg.beta,
        f.cfg.predictor.as_ref().map_or(0, |p| p.l0),
        100.0 * classic,
        100.0 * pred.accuracy,
        100.0 * pred.normalized_ops,
        100.0 * fine.normalized_ops,
        100.0 * pred.normalized_energy,
        f.elapsed
    ))
}

fn record_replay(f: &Fixture) -> Check {
    let live = f.report("predictive");
    let replayed = pipeline::replay_run::<f32>(&f.cfg).map_err(err)?.report;
    ensure(replayed.metrics == live.metrics, "aggregate metrics differ")?;
    let a = samples(&f.cfg.output_dir.join("live_predictive_samples.ndjson"));
    let b = samples(&f.cfg.output_dir.join("replay_predictive_samples.ndjson"));
    ensure(a.len() == b.len(), "sample counts differ")?;
    for (x, y) in a.iter().zip(&b) {
        ensure(
            x.exit_layer == y.exit_layer && x.predicted_class == y.predicted_class,
            format!("sample {} differs", x.sample_id),
        )?;
        ensure(x == y, format!("sample {} log differs", x.sample_id))?;
    }
    Ok(format!("{} samples and aggregates identical", a.len()))
}

fn mu_identity(f: &Fixture) -> Check {
    let target = 1.0 / 4.0;
    let worst = f.calibration.mu.iter().map(|m| (m - target).abs()).fold(0.0, f64::max);
    ensure(worst <= 1e-6, format!("max |mu - 1/N_c| = {worst:.2e}"))?;
    Ok(format!(
        "{} positions, max |mu - 1/N_c| = {worst:.2e}",
        f.calibration.mu.len()
    ))
}

fn fixture_head_depth(f: &Fixture) -> Check {
    let acc = &f.heads.test_accuracy;
    let (first, last) = (acc[0], acc[acc.len() - 1]);
    ensure(
        last >= first - 0.02,
        format!("deepest {last:.3} < shallowest {first:.3} - 2 points"),
    )?;
    Ok(format!(
        "head accuracy {first:.3} at position 1, {last:.3} at position {}",
        acc.len()
    ))
}

fn fixture_sweep(f: &Fixture) -> Check {
    let best = f
        .validation_sweep
        .rows
        .iter()
        // At L0 = L_total - 1 the only possible prediction is the last layer.
        .filter(|r| r.l0 + 1 < f.l_total)
        .filter_map(|r| r.prediction_accuracy.map(|a| (r.l0, a)))
        .fold((0, 0.0), |b, x| if x.1 > b.1 { x } else { b });
    ensure(
        best.1 >= SWEEP_PREDICTION_THRESHOLD,
        format!("best prediction accuracy {:.3}", best.1),
    )?;
    Ok(format!(
        "best prediction accuracy {:.1}% at L0 {}",
        100.0 * best.1,
        best.0
    ))
}

// ---------------------------------------------------------------------------

fn run(name: &str, f: impl FnOnce() -> Check) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    match outcome {
        Ok(detail) => {
            println!("PASS  {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL  {name}: {detail}");
            false
        }
    }
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut ok = true;
    ok &= run("predictor oracle equivalence", predictor_oracle);
    ok &= run("predictor hand trace", predictor_hand_trace);
    ok &= run("energy closed forms", energy_closed_forms);
    ok &= run("frequency selection", frequency_selection);
    ok &= run("gradient checks", gradient_checks);

    let dir = tempfile::tempdir().expect("temp dir");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool");
    let fixture = pool.install(|| catch_unwind(AssertUnwindSafe(|| build_fixture(dir.path()))));
    let fixture = match fixture {
        Ok(Ok(f)) => Some(f),
        Ok(Err(e)) => {
            println!("FAIL  desk fixture: {e}");
            None
        }
        Err(_) => {
            println!("FAIL  desk fixture: panicked");
            None
        }
    };
    let criteria: [FixtureCheck; 5] = [
        ("desk-scale end-to-end", desk_end_to_end),
        ("record/replay determinism", record_replay),
        ("mu analytic identity", mu_identity),
        ("fixture: deepest head vs shallowest head", fixture_head_depth),
        ("fixture: L0 sweep prediction accuracy", fixture_sweep),
    ];
    for (name, check) in criteria {
        ok &= match &fixture {
            Some(f) => run(name, || pool.install(|| check(f))),
            None => run(name, || Err("fixture unavailable".into())),
        };
    }
    if !ok {
        std::process::exit(1);
    }
}
