//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use stepsep::audio::AudioBuffer;
use stepsep::metrics::{csdr_report, chunk_sdrs, search_sdr_terms, si_snr, MetricKind};
use stepsep::refine::{refine, GridMode, MixtureProblem, RefinementConfig, RefinementTrace};
use stepsep::separators::{
    contraction_model, noise_reference_gate, ContractionModelParams, SeparationModel,
};
use stepsep::stft::StftConfig;
use stepsep::synth::{chunk_sdr_fixture, tone_noise_corpus, ChunkFixtureConfig, ToneNoiseConfig};
use stepsep::theory::{
    ddbm_loss_equivalence, lower_bound_sweep, score_check, simulate_error_bound, BoundSimConfig,
    BridgeBatch, ScoreCheckInput, SweepReport, Weighting, DEFAULT_SMOOTHING,
};
use stepsep::wav::{load_wav, save_wav, WavEncoding};

const CORPUS_SEED: u64 = 20_240_601;
const CORPUS_SIZE: usize = 200;

type Outcome = Result<String, String>;

fn randn(len: usize, sample_rate: u32, seed: u64) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AudioBuffer::mono(
        (0..len)
            .map(|_| 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect(),
        sample_rate,
    )
    .unwrap()
}

fn random_problem(len: usize, seed: u64) -> MixtureProblem {
    let p = randn(len, 16_000, seed);
    let q = randn(len, 16_000, seed ^ 0xABCD);
    MixtureProblem::new(p.add(&q).unwrap(), Some(p), Some(q), format!("random_{seed}")).unwrap()
}

fn gate_config() -> RefinementConfig {
    RefinementConfig {
        steps: 20,
        num_ratios: 10,
        search_metric: MetricKind::SiSnr,
        grid: GridMode::InclusiveEndpoints,
        record_timing: false,
        ..Default::default()
    }
}

fn gate_for(problem: &MixtureProblem) -> Result<impl SeparationModel, stepsep::separators::ModelError> {
    noise_reference_gate(problem.noise.as_ref().unwrap(), StftConfig::default(), 1.0)
}

fn corpus_sweep() -> (SweepReport, f64) {
    let start = Instant::now();
    let problems: Vec<MixtureProblem> = tone_noise_corpus(&ToneNoiseConfig::default(), CORPUS_SEED, CORPUS_SIZE)
        .unwrap()
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let report = lower_bound_sweep(&problems, gate_for, &gate_config(), 1e-9).unwrap();
    (report, start.elapsed().as_secs_f64())
}

fn criterion_1(sweep: &SweepReport, secs: f64) -> Outcome {
    let worst = sweep
        .problems
        .iter()
        .map(|p| p.min_margin)
        .fold(f64::INFINITY, f64::min);
    let detail = format!(
        "{} problems, {} violations, worst margin {worst:.3e} dB, {secs:.1} s",
        sweep.problems.len(),
        sweep.lower_bound_violations
    );
    if sweep.problems.len() == CORPUS_SIZE && sweep.lower_bound_violations == 0 && secs < 300.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_2() -> Outcome {
    let pr = random_problem(4000, 2);
    let x0 = pr.mixture.clone();
    let p = pr.reference.clone().unwrap();
    let mut worst = 0.0f64;
    for alpha in [0.3f64, 0.5, 0.9] {
        let model = contraction_model(ContractionModelParams { target: p.clone(), alpha }).unwrap();
        for t in 1..=5usize {
            let cfg = RefinementConfig {
                steps: t,
                num_ratios: 10,
                search_metric: MetricKind::NegMse,
                record_timing: false,
                ..Default::default()
            };
            let (y, trace) = refine(&model, &pr, &cfg).unwrap();
            if trace.steps[1..].iter().any(|s| s.ratio != Some(0.0)) {
                return Err(format!("alpha {alpha}, T {t}: a chosen ratio was not 0"));
            }
            // closed form: p + alpha^(t+1) (x0 - p), computed sample by sample
            let factor = alpha.powi(t as i32 + 1);
            let mut num = 0.0;
            let mut den = 0.0;
            for ((yv, xv), pv) in y.iter().zip(x0.iter()).zip(p.iter()) {
                let want = pv + factor * (xv - pv);
                num += (yv - want) * (yv - want);
                den += want * want;
            }
            let rel = (num / den).sqrt();
            worst = worst.max(rel);
            if rel > 1e-6 {
                return Err(format!("alpha {alpha}, step {t}: relative error {rel:.3e}"));
            }
        }
    }
    Ok(format!("alpha in {{0.3, 0.5, 0.9}}, T = 5, r* = 0 throughout, worst relative error {worst:.3e}"))
}

fn bound_ratio(problem: &MixtureProblem, alpha: f64, eps: f64, r_star: f64) -> (bool, f64, String) {
    let p = problem.reference.clone().unwrap();
    let model = contraction_model(ContractionModelParams { target: p, alpha }).unwrap();
    let mut cfg = BoundSimConfig::new(&model, MetricKind::NegMse, problem, r_star, eps);
    cfg.trials = 10_000;
    cfg.lipschitz_f = Some(alpha);
    cfg.seed = 31 + (alpha * 100.0) as u64;
    let rep = simulate_error_bound(&cfg).unwrap();
    (rep.pass, rep.variance / rep.bound, rep.diagnostic)
}

/// The ratio is drawn around the search's choice, which criterion 2 shows
/// is r* = 0 for the contraction model.
fn criterion_3() -> Outcome {
    let pr = random_problem(2000, 3);
    let mut lines = Vec::new();
    let mut ok = true;
    for alpha in [0.3f64, 0.5, 0.9] {
        for eps in [0.01, 0.05] {
            let (pass, ratio, diag) = bound_ratio(&pr, alpha, eps, 0.0);
            ok &= pass;
            lines.push(format!("a={alpha} eps={eps}: var/bound={ratio:.3}"));
            if !pass {
                lines.push(diag);
            }
        }
    }
    let detail = lines.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Not gated: away from the search optimum the metric is nearly linear in
/// r, the bound is tight to within the curvature over r* +- 4 eps, and the
/// Monte-Carlo variance (standard error about 1.4 % at 10k trials) can land
/// on either side of it.
fn interior_bound_report() -> String {
    let pr = random_problem(2000, 3);
    let mut lines = Vec::new();
    for alpha in [0.3f64, 0.5, 0.9] {
        for eps in [0.01, 0.05] {
            let (_, ratio, _) = bound_ratio(&pr, alpha, eps, 0.5);
            lines.push(format!("a={alpha} eps={eps}: {ratio:.3}"));
        }
    }
    format!("info: variance bound at r* = 0.5 (not gated), var/bound {}", lines.join("; "))
}

fn criterion_4() -> Outcome {
    let batch = BridgeBatch::random(1000, 64, DEFAULT_SMOOTHING, Weighting::SigmaSquared, 4);
    let target = AudioBuffer::mono(randn(64, 16_000, 99).channel(0).to_vec(), 16_000).unwrap();
    let model = contraction_model(ContractionModelParams { target, alpha: 0.5 }).unwrap();
    let rep = ddbm_loss_equivalence(&batch, &model, 1e-10).unwrap();
    // independent recomputation of both sides from the raw triples
    let mut identity_err = 0.0f64;
    for (pair, sample) in batch.pairs.iter().zip(&rep.samples) {
        let sigma = pair.sigma;
        let eps2 = DEFAULT_SMOOTHING * DEFAULT_SMOOTHING;
        let y: Vec<f64> = pair.p.iter().zip(pair.q.iter()).map(|(p, q)| sigma * p + (1.0 - sigma) * q).collect();
        let y_buf = AudioBuffer::mono(y.clone(), 16_000).unwrap();
        let p_hat = model.separate(&y_buf).unwrap();
        let n = y.len() as f64;
        let ddbm: f64 = y.iter().zip(p_hat.iter()).map(|(a, b)| ((a - b) / (eps2 * sigma)).powi(2)).sum::<f64>() * sigma * sigma / n;
        let sep: f64 = y.iter().zip(p_hat.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n / (eps2 * eps2);
        identity_err = identity_err.max((ddbm / sep - 1.0).abs());
        identity_err = identity_err.max((sample.ratio.unwrap_or(f64::NAN) - 1.0).abs());
    }
    let flat = BridgeBatch {
        weighting: Weighting::Constant(1.0),
        ..batch.clone()
    };
    let cf = ddbm_loss_equivalence(&flat, &model, 1e-10).unwrap();
    let cf_err = cf
        .samples
        .iter()
        .map(|s| {
            let want = 1.0 / (s.sigma * s.sigma);
            (s.ratio.unwrap_or(want) - want).abs() / want
        })
        .fold(0.0f64, f64::max);
    let detail = format!(
        "1000 triples, max |ratio - 1| = {identity_err:.2e}, true score max {:.1}, w = 1 max rel error vs sigma^-2 = {cf_err:.2e}",
        rep.max_true_score_abs
    );
    if rep.pass && identity_err <= 1e-10 && cf_err <= 1e-10 && rep.both_zero == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_5() -> Outcome {
    let mut worst_bridge = 0.0f64;
    let mut worst_disp = 0.0f64;
    let oracle_target = randn(256, 16_000, 500);
    let oracle = contraction_model(ContractionModelParams {
        target: oracle_target.clone(),
        alpha: 0.0,
    })
    .unwrap();
    for i in 0..100u64 {
        let q = randn(256, 16_000, 600 + i);
        let d = randn(256, 16_000, 700 + i).scale(0.05);
        let sigma = 0.01 + 0.99 * (i as f64 / 99.0);
        let input = ScoreCheckInput {
            p: &oracle_target,
            q: &q,
            sigma,
            epsilon: DEFAULT_SMOOTHING,
            model: &oracle,
            displacement: &d,
            sigma_curve: vec![sigma],
        };
        let rep = score_check(&input, 1e-10).unwrap();
        // oracle: -d / eps^2 computed directly from the displacement
        let x = stepsep::theory::bridge_point(&oracle_target, &q, sigma).unwrap().add(&d).unwrap();
        let score = stepsep::theory::smoothed_bridge_score(&x, &oracle_target, &q, sigma, DEFAULT_SMOOTHING).unwrap();
        for (s, dv) in score.iter().zip(d.iter()) {
            let want = -dv / (DEFAULT_SMOOTHING * DEFAULT_SMOOTHING);
            worst_disp = worst_disp.max((s - want).abs() / want.abs().max(1e-300));
        }
        worst_bridge = worst_bridge.max(rep.bridge_score_max_abs);
    }
    let detail = format!(
        "100 bridge points: max |score at bridge| = {worst_bridge}, displaced max rel error = {worst_disp:.2e}"
    );
    if worst_bridge == 0.0 && worst_disp <= 1e-10 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6() -> Outcome {
    // SI-SNR scale invariance
    let r = randn(8000, 8000, 61);
    let e = r.add(&randn(8000, 8000, 62).scale(0.3)).unwrap();
    let base = si_snr(&r, &e).unwrap().value;
    let drift = [0.1, 1.0, 10.0]
        .iter()
        .map(|&c| (si_snr(&r, &e.scale(c)).unwrap().value - base).abs())
        .fold(0.0f64, f64::max);
    if drift > 1e-9 {
        return Err(format!("SI-SNR drift {drift:.3e}"));
    }

    // cSDR fixture, via float32 WAV files like the CLI writes them
    let cfg = ChunkFixtureConfig::default();
    let (songs, manifest) = chunk_sdr_fixture(&cfg, 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut loaded = Vec::new();
    for (i, (r, e)) in songs.iter().enumerate() {
        let rp = dir.path().join(format!("ref_{i}.wav"));
        let ep = dir.path().join(format!("est_{i}.wav"));
        save_wav(r, &rp, WavEncoding::Float32).unwrap();
        save_wav(e, &ep, WavEncoding::Float32).unwrap();
        loaded.push((load_wav(&rp).unwrap(), load_wav(&ep).unwrap()));
    }
    let mut worst_chunk = 0.0f64;
    for ((r, e), song) in loaded.iter().zip(&manifest.songs) {
        let got = chunk_sdrs(r, e, cfg.chunk_seconds).unwrap();
        if got.len() != song.chunk_targets.len() {
            return Err(format!("{}: {} chunks, manifest has {}", song.label, got.len(), song.chunk_targets.len()));
        }
        for (g, t) in got.iter().zip(&song.chunk_targets) {
            match (g, t) {
                (Some(g), Some(t)) => worst_chunk = worst_chunk.max((g - t).abs()),
                (None, None) => {}
                _ => return Err(format!("{}: silent-chunk mismatch", song.label)),
            }
        }
    }
    let report = csdr_report(&loaded, cfg.chunk_seconds).unwrap();
    let expected = manifest.expected_csdr.unwrap();
    let selected = manifest
        .songs
        .iter()
        .position(|s| s.expected_median == Some(expected));
    let got_selected = report
        .per_song
        .iter()
        .position(|m| m.is_some_and(|m| (m - report.value).abs() < 1e-12));
    if worst_chunk > 0.01 || (report.value - expected).abs() > 0.01 || selected != got_selected {
        return Err(format!(
            "cSDR {} vs {expected}, worst chunk error {worst_chunk:.3e} dB, selected {got_selected:?} vs {selected:?}",
            report.value
        ));
    }

    // search SDR chunk arithmetic: 6 s chunks, 3 s hop, per channel
    let sr = 100u32;
    let chunk = 600usize;
    let hop = 300usize;
    for secs in [0.5f64, 3.0, 6.0, 8.99, 9.0, 12.0, 29.97, 30.0] {
        let len = (secs * sr as f64).round() as usize;
        let expected_per_channel = if len < chunk { 1 } else { (len - chunk) / hop + 1 };
        let stereo = AudioBuffer::new(
            vec![randn(len, sr, 70).channel(0).to_vec(), randn(len, sr, 71).channel(0).to_vec()],
            sr,
        )
        .unwrap();
        let est = stereo.scale(0.9);
        let terms = search_sdr_terms(&stereo, &est, 6.0, 0.5).unwrap();
        if terms.len() != 2 * expected_per_channel {
            return Err(format!(
                "search_sdr on {secs} s stereo: {} terms, expected {}",
                terms.len(),
                2 * expected_per_channel
            ));
        }
    }
    Ok(format!(
        "SI-SNR drift {drift:.1e}; cSDR {:.4} (manifest {expected}), worst chunk error {worst_chunk:.1e} dB; search_sdr counts match on 8 lengths",
        report.value
    ))
}

fn criterion_7(sweep: &SweepReport) -> Outcome {
    let frac = sweep.first_step_dominant_fraction;
    let mut hist = std::collections::BTreeMap::new();
    for p in &sweep.problems {
        *hist.entry(p.largest_delta_step.unwrap_or(0)).or_insert(0usize) += 1;
    }
    let detail = format!(
        "step 1 has the largest delta in {:.1}% of {} problems (largest-delta step histogram {:?}); mean SI-SNR {:.2} -> {:.2} dB",
        100.0 * frac,
        sweep.problems.len(),
        hist,
        sweep.mean_baseline,
        sweep.mean_final
    );
    if frac >= 0.8 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn trace_bytes(trace: &RefinementTrace) -> Vec<u8> {
    let mut out = Vec::new();
    trace.write_jsonl(&mut out).unwrap();
    out
}

fn criterion_8(sweep: &SweepReport) -> Outcome {
    let cfg = gate_config();
    let want = 1 + (cfg.steps * cfg.num_ratios) as u64;
    if let Some(bad) = sweep.problems.iter().find(|p| p.model_calls != want) {
        return Err(format!("{}: {} model calls, expected {want}", bad.label, bad.model_calls));
    }
    let run = || {
        let (problem, _) = stepsep::synth::tone_noise_problem(&ToneNoiseConfig::default(), 77, 3).unwrap();
        let model = gate_for(&problem).unwrap();
        refine(&model, &problem, &cfg).unwrap()
    };
    let (y1, t1) = run();
    let (y2, t2) = run();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.wav");
    let b = dir.path().join("b.wav");
    save_wav(&y1, &a, WavEncoding::Float32).unwrap();
    save_wav(&y2, &b, WavEncoding::Float32).unwrap();
    let same_wav = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    let same_trace = trace_bytes(&t1) == trace_bytes(&t2);
    let calls = t1.total_model_calls();
    let detail = format!(
        "calls {calls} = 1 + T*K = {want} on all {} sweep runs; traces identical: {same_trace}; WAVs identical: {same_wav}",
        sweep.problems.len()
    );
    if calls == want && same_trace && same_wav {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let sweep = guarded(|| {
        let (s, secs) = corpus_sweep();
        Ok(serde_json::to_string(&(s, secs)).unwrap())
    })
    .map(|json| serde_json::from_str::<(SweepReport, f64)>(&json).unwrap());

    let from_sweep = |f: &dyn Fn(&SweepReport, f64) -> Outcome| match &sweep {
        Ok((s, secs)) => guarded(|| f(s, *secs)),
        Err(e) => Err(format!("corpus sweep failed: {e}")),
    };

    let results: Vec<(u32, &str, Outcome)> = vec![
        (1, "lower bound over tone+noise corpus", from_sweep(&|s, secs| criterion_1(s, secs))),
        (2, "contraction closed form", guarded(criterion_2)),
        (3, "variance bound", guarded(criterion_3)),
        (4, "bridge loss identity", guarded(criterion_4)),
        (5, "smoothed score properties", guarded(criterion_5)),
        (6, "metric suite", guarded(criterion_6)),
        (7, "first-step dominance trend", from_sweep(&|s, _| criterion_7(s))),
        (8, "call accounting and determinism", from_sweep(&|s, _| criterion_8(s))),
    ];

    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {n} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL  {name}: {detail}");
            }
        }
    }
    println!("{}", guarded(|| Ok(interior_bound_report())).unwrap_or_else(|e| e));
    if failed > 0 {
        println!("{failed} of {} criteria failed", results.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", results.len());
}
