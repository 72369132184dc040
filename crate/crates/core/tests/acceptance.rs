//! Acceptance checks. Runs as a plain binary so every criterion prints one
//! PASS/FAIL line; exits nonzero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::{
    greedy_recompute, random_binary_mask, random_model, random_tokens, rng, skip_path_gap,
    tiny_experiment,
};
use dynadepth::baselines::evopress_search;
use dynadepth::embed::{adjusted_rand_index, kmeans_fit, squared_distance, HashedNgramEncoder};
use dynadepth::flops::{dense_flops, masked_flops, FlopsArch};
use dynadepth::gates::{GateParams, MaskCandidate};
use dynadepth::harness::{
    run_pipeline, CorpusSource, CorpusSpec, EvalReport, ExperimentConfig, DYNAMIC,
};
use dynadepth::mask_trainer::{train_cluster_mask, SparsityController, TrainingConfig};
use dynadepth::model::checkpoint::fingerprint;
use dynadepth::model::ModelConfig;
use dynadepth::router::{evaluate_masked_ppl, MaskLibrary, Router};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const MC_DRAWS: usize = 1_000_000;
const MC_SIGMAS: f64 = 3.0;
const ZERO_PROB_AT_ZERO: f64 = 0.0267;
const ZERO_PROB_TOL: f64 = 5e-5;
const SPARSITY_TOL: f32 = 0.02;
const SKIP_PATH_TOL: f32 = 1e-5;
const LLAMA_DENSE: f64 = 32.94e12;
const LLAMA_DENSE_REL: f64 = 0.015;
const LLAMA_MASKED_RANGE: (f64, f64) = (0.89, 0.91);

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed <= limit, || {
        format!("took {elapsed:.1?}, limit {limit:?}")
    })
}

fn hard_concrete_fidelity() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (i, la) in [-2.0f32, 0.0, 2.0].into_iter().enumerate() {
        let gate = GateParams::new(1, la);
        let mut r = rng(500 + i as u64);
        let zeros = (0..MC_DRAWS)
            .filter(|_| gate.sample_soft_mask(&mut r)[0] == 0.0)
            .count();
        let emp = zeros as f64 / MC_DRAWS as f64;
        let p = gate.expected_sparsity() as f64;
        let se = (p * (1.0 - p) / MC_DRAWS as f64).sqrt();
        worst = worst.max((emp - p).abs() / se);
        ensure((emp - p).abs() <= MC_SIGMAS * se, || {
            format!("log_alpha {la}: empirical {emp:.5} vs closed form {p:.5}")
        })?;
    }
    let p0 = GateParams::new(1, 0.0).expected_sparsity() as f64;
    ensure((p0 - ZERO_PROB_AT_ZERO).abs() <= ZERO_PROB_TOL, || {
        format!("P(z=0 | 0) = {p0}")
    })?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "worst gap {worst:.2} se, P(z=0|0) = {p0:.4}, {:.1?}",
        start.elapsed()
    ))
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let results = common::gradcheck::run_suite(20);
    let (name, err) = results
        .iter()
        .cloned()
        .fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    for (n, e) in &results {
        ensure(*e < common::gradcheck::MAX_REL_ERR, || {
            format!("{n}: relative error {e:e}")
        })?;
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "{} ops × 20 instances, worst {name} {err:.1e}, {:.1?}",
        results.len(),
        start.elapsed()
    ))
}

fn token_docs(seed: u64, count: usize, len: usize) -> Vec<Vec<u32>> {
    let mut r = rng(seed);
    (0..count).map(|_| random_tokens(&mut r, len, 40)).collect()
}

fn sparsity_convergence() -> Outcome {
    let start = Instant::now();
    let model = random_model(4, 21);
    let data = token_docs(3, 16, 40);
    let mut finals = Vec::new();
    for seed in 0..3 {
        let cfg = TrainingConfig {
            batch_size: 8,
            max_steps: 2000,
            train_seq_len: 16,
            seed,
            ..TrainingConfig::default()
        };
        let out = train_cluster_mask(
            &model,
            &data,
            &cfg,
            SparsityController::new(0.25).unwrap(),
            0,
            vec![],
        )
        .map_err(|e| e.to_string())?;
        let t = out.candidate.gate.expected_sparsity();
        ensure((t - 0.25).abs() <= SPARSITY_TOL, || {
            format!("seed {seed}: expected sparsity {t}")
        })?;
        let zeros = out
            .candidate
            .binary_mask
            .iter()
            .filter(|&&b| b == 0)
            .count();
        ensure(zeros == 2, || format!("seed {seed}: {zeros} zeros"))?;
        finals.push(t);
    }
    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(format!("final t = {finals:.4?}, {:.1?}", start.elapsed()))
}

fn frozen_weights() -> Outcome {
    for run in 0..5u64 {
        let model = random_model(2 + run as usize % 3, 60 + run);
        let before = fingerprint(&model);
        let cfg = TrainingConfig {
            batch_size: 4,
            max_steps: 25,
            train_seq_len: 20,
            seed: run,
            ..TrainingConfig::default()
        };
        train_cluster_mask(
            &model,
            &token_docs(run, 6, 30),
            &cfg,
            SparsityController::new(0.25).unwrap(),
            0,
            vec![],
        )
        .map_err(|e| e.to_string())?;
        ensure(fingerprint(&model) == before, || {
            format!("run {run}: weights changed")
        })?;
    }
    Ok("5/5 runs unchanged".into())
}

fn skip_path_equivalence() -> Outcome {
    let mut r = rng(7);
    let mut worst = 0.0f32;
    for i in 0..100u64 {
        let m = random_model(3, 100 + i % 5);
        let tokens = random_tokens(&mut r, 2 + (i as usize % 20), 40);
        let mask = random_binary_mask(&mut r, 6);
        worst = worst.max(skip_path_gap(&m, &tokens, &mask));
    }
    ensure(worst <= SKIP_PATH_TOL, || {
        format!("max logit gap {worst:e}")
    })?;
    let mut skipped_attention = 0;
    for i in 0..20u64 {
        let m = random_model(2, 200 + i);
        let prompt = random_tokens(&mut r, 1 + i as usize % 6, 40);
        let mut mask = random_binary_mask(&mut r, 4);
        if i % 2 == 0 {
            mask[0] = 0.0;
        }
        skipped_attention += usize::from(mask[0] == 0.0 || mask[2] == 0.0);
        let cached = m.generate(&prompt, &mask, 12).map_err(|e| e.to_string())?;
        ensure(cached == greedy_recompute(&m, &prompt, &mask, 12), || {
            format!("generation case {i} differs")
        })?;
    }
    Ok(format!(
        "max gap {worst:.1e}; 20/20 generations match ({skipped_attention} skip attention)"
    ))
}

fn gaussian(r: &mut impl Rng, center: &[f32], sigma: f32) -> Vec<f32> {
    center
        .iter()
        .map(|&c| c + sigma * <StandardNormal as Distribution<f32>>::sample(&StandardNormal, r))
        .collect()
}

fn routing_correctness() -> Outcome {
    let model = random_model(2, 1);
    let gates = model.config().num_gates();
    let mut r = rng(11);
    let centroids: Vec<Vec<f32>> = (0..6).map(|_| gaussian(&mut r, &[0.0; 16], 0.3)).collect();
    let cands: Vec<MaskCandidate> = centroids
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let mask = dynadepth::baselines::random_static_mask(&mut r, gates, 0.25);
            MaskCandidate::new(k, c.clone(), GateParams::new(gates, 2.0), mask)
        })
        .collect();
    let lib = MaskLibrary::new(
        &model,
        HashedNgramEncoder::new(16, 0).config(),
        0.25,
        &cands,
    )
    .map_err(|e| e.to_string())?;
    let router = Router::new(lib, &model).map_err(|e| e.to_string())?;
    let scan = |cs: &[Vec<f32>], e: &[f32]| {
        let d: Vec<f64> = cs.iter().map(|c| squared_distance(e, c)).collect();
        (0..d.len()).fold(0, |b, k| if d[k] < d[b] { k } else { b })
    };
    for i in 0..500 {
        let e = gaussian(&mut r, &[0.0; 16], 0.3 + (i % 5) as f32 * 0.2);
        let got = router
            .route_embedding(&e)
            .map_err(|e| e.to_string())?
            .cluster;
        ensure(got == scan(&centroids, &e), || {
            format!("input {i}: routed to {got}")
        })?;
    }
    for (k, c) in centroids.iter().enumerate() {
        let got = router
            .route_embedding(c)
            .map_err(|e| e.to_string())?
            .cluster;
        ensure(got == k, || format!("centroid {k} routed to {got}"))?;
    }
    let unit = |i: usize| {
        let mut v = vec![0.0f32; 16];
        v[i] = 1.0;
        v
    };
    let tie_cands: Vec<MaskCandidate> = [unit(3), unit(1), unit(2), unit(1)]
        .into_iter()
        .enumerate()
        .map(|(k, c)| MaskCandidate::new(k, c, GateParams::new(gates, 2.0), vec![0, 1, 1, 1]))
        .collect();
    let tie_lib = MaskLibrary::new(
        &model,
        HashedNgramEncoder::new(16, 0).config(),
        0.25,
        &tie_cands,
    )
    .map_err(|e| e.to_string())?;
    let tie = Router::new(tie_lib, &model).map_err(|e| e.to_string())?;
    let origin = tie
        .route_embedding(&[0.0; 16])
        .map_err(|e| e.to_string())?
        .cluster;
    let dup = tie
        .route_embedding(&unit(1))
        .map_err(|e| e.to_string())?
        .cluster;
    ensure(origin == 0 && dup == 1, || {
        format!("ties went to {origin} and {dup}")
    })?;
    Ok("500/500 match brute force; centroids self-route; ties to lowest index".into())
}

fn clustering() -> Outcome {
    let mut recovered = 0;
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let mut far = vec![0.0f32; 8];
        far[0] = 10.0;
        let mut data = Vec::new();
        let mut truth = Vec::new();
        for i in 0..100 {
            data.push(gaussian(
                &mut r,
                if i % 2 == 0 { &[0.0; 8] } else { &far },
                1.0,
            ));
            truth.push(i % 2);
        }
        let m = kmeans_fit(&data, 2, seed).map_err(|e| e.to_string())?;
        for w in m.inertia_history.windows(2) {
            ensure(w[1] <= w[0], || {
                format!("seed {seed}: inertia rose {} -> {}", w[0], w[1])
            })?;
        }
        recovered += usize::from(adjusted_rand_index(&m.assignments, &truth) == 1.0);
        let noisy: Vec<Vec<f32>> = (0..300).map(|_| gaussian(&mut r, &[0.0; 5], 1.0)).collect();
        let m = kmeans_fit(&noisy, 7, seed).map_err(|e| e.to_string())?;
        for w in m.inertia_history.windows(2) {
            ensure(w[1] <= w[0], || {
                format!("seed {seed}: inertia rose {} -> {}", w[0], w[1])
            })?;
        }
    }
    ensure(recovered == 20, || {
        format!("ARI 1.0 on {recovered}/20 seeds")
    })?;
    Ok("ARI 1.0 on 20/20 seeds; inertia monotone".into())
}

fn flops_anchor() -> Outcome {
    let start = Instant::now();
    let arch = FlopsArch::llama3_8b();
    let dense = dense_flops(&arch, 2048)
        .map_err(|e| e.to_string())?
        .dense_flops;
    ensure(
        (dense - LLAMA_DENSE).abs() / LLAMA_DENSE <= LLAMA_DENSE_REL,
        || format!("dense {dense:.4e}"),
    )?;
    let mask: Vec<u8> = (0..arch.num_gates())
        .map(|g| u8::from(!(g % 2 == 0 && g < 32)))
        .collect();
    let pct = masked_flops(&arch, 2048, &mask)
        .map_err(|e| e.to_string())?
        .percentage;
    ensure(
        (LLAMA_MASKED_RANGE.0..=LLAMA_MASKED_RANGE.1).contains(&pct),
        || format!("masked {pct:.4}"),
    )?;
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!(
        "dense {:.2}T, 16 attention blocks masked {:.1}%",
        dense / 1e12,
        100.0 * pct
    ))
}

/// Four-domain corpus, N ∈ {1, 4}, 25% sparsity, three seeds.
fn desk_scale_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        model: ModelConfig {
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            head_dim: 16,
            kv_heads: 2,
            ffn_dim: 128,
            max_seq_len: 128,
            ..ModelConfig::default()
        },
        corpus: CorpusSource::Synthetic(CorpusSpec {
            num_domains: 4,
            docs_per_domain: 60,
            doc_len: 256,
            seed: 0,
        }),
        cluster_counts: vec![1, 4],
        sparsities: vec![0.25],
        seeds: vec![0, 1, 2],
        output_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.base_training.steps = 300;
    cfg.base_training.seq_len = 64;
    cfg.mask_training.batch_size = 4;
    cfg.mask_training.max_steps = 200;
    cfg.mask_training.train_seq_len = 64;
    cfg.baselines.oneshot_ppl = false;
    cfg.baselines.evopress = false;
    cfg.tasks.synthetic_count = 16;
    cfg
}

fn desk_scale_report() -> Result<(EvalReport, Duration), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let report = run_pipeline(&desk_scale_config(dir.path())).map_err(|e| e.to_string())?;
    Ok((report, start.elapsed()))
}

fn dynamic_beats_static(report: &EvalReport, elapsed: Duration) -> Outcome {
    let n4 = report.mean_perplexity(DYNAMIC, 4, 0.25);
    let n1 = report.mean_perplexity(DYNAMIC, 1, 0.25);
    let sleb = report.mean_perplexity("sleb", 1, 0.25);
    ensure(n4 <= n1 && n4 <= sleb, || {
        format!("N=4 {n4:.4}, static {n1:.4}, sleb {sleb:.4}")
    })?;
    within(elapsed, Duration::from_secs(1800))?;
    Ok(format!(
        "N=4 {n4:.4} ≤ static {n1:.4}, sleb {sleb:.4} (dense {:.4}), {elapsed:.0?}",
        report.dense_perplexity
    ))
}

fn cluster_count_trend(report: &EvalReport) -> Outcome {
    let sweep: Vec<(usize, f64)> = report
        .n_sweep
        .iter()
        .map(|r| (r.n_clusters, r.mean_perplexity))
        .collect();
    let get = |n| {
        sweep
            .iter()
            .find(|s| s.0 == n)
            .map(|s| s.1)
            .unwrap_or(f64::NAN)
    };
    let (n1, n4) = (get(1), get(4));
    ensure(n4 <= n1, || format!("N=4 {n4:.4} > N=1 {n1:.4}"))?;
    Ok(format!("N=1 {n1:.4} → N=4 {n4:.4}"))
}

fn baseline_sanity() -> Outcome {
    let mut found = 0;
    for seed in 0..3u64 {
        let model = random_model(4, 30 + seed);
        let data = token_docs(10 + seed, 4, 24);
        let mut best = f64::INFINITY;
        let mut count = 0;
        for bits in 0u32..256 {
            if bits.count_ones() == 6 {
                let mask: Vec<u8> = (0..8).map(|i| ((bits >> i) & 1) as u8).collect();
                best =
                    best.min(evaluate_masked_ppl(&model, &mask, &data).map_err(|e| e.to_string())?);
                count += 1;
            }
        }
        ensure(count == 28, || format!("{count} candidates"))?;
        let res = evopress_search(&model, &data, 0.25, 50, 4, seed).map_err(|e| e.to_string())?;
        for w in res.score_trace.windows(2) {
            ensure(w[1] <= w[0], || format!("seed {seed}: best fitness rose"))?;
        }
        found += usize::from(*res.score_trace.last().unwrap() == best);
    }
    ensure(found == 3, || format!("optimum found on {found}/3 seeds"))?;
    Ok("exhaustive optimum of 28 masks found on 3/3 seeds; elitist trace monotone".into())
}

fn artifact_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let name = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                let keep =
                    name.ends_with(".json") || name.ends_with(".csv") || name.ends_with(".txt");
                if keep && !name.ends_with("config.json") {
                    files.push((name, std::fs::read(&p).unwrap()));
                }
            }
        }
    }
    files.sort();
    files
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_pipeline(&tiny_experiment(a.path())).map_err(|e| e.to_string())?;
    run_pipeline(&tiny_experiment(b.path())).map_err(|e| e.to_string())?;
    let (fa, fb) = (artifact_bytes(a.path()), artifact_bytes(b.path()));
    ensure(fa.len() == fb.len(), || "different artifact sets".into())?;
    let libraries = fa
        .iter()
        .filter(|(n, _)| n.ends_with("library.json"))
        .count();
    ensure(
        libraries > 0 && fa.iter().any(|(n, _)| n == "report.json"),
        || "missing artifacts".into(),
    )?;
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        ensure(na == nb && ba == bb, || format!("{na} differs"))?;
    }
    Ok(format!(
        "{} artifacts byte-identical ({libraries} libraries)",
        fa.len()
    ))
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    match outcome {
        Ok(detail) => {
            println!("PASS {id:>2} {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL {id:>2} {name}: {detail}");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    ok &= run(1, "hard concrete fidelity", hard_concrete_fidelity);
    ok &= run(2, "gradient integrity", gradient_integrity);
    ok &= run(3, "sparsity convergence", sparsity_convergence);
    ok &= run(4, "frozen weights", frozen_weights);
    ok &= run(5, "skip-path equivalence", skip_path_equivalence);
    ok &= run(6, "routing correctness", routing_correctness);
    ok &= run(7, "clustering", clustering);
    ok &= run(8, "flops anchor", flops_anchor);
    let desk = catch_unwind(desk_scale_report).unwrap_or_else(|_| Err("pipeline panicked".into()));
    match &desk {
        Ok((report, elapsed)) => {
            ok &= run(9, "dynamic beats static", || {
                dynamic_beats_static(report, *elapsed)
            });
            ok &= run(10, "cluster-count trend", || cluster_count_trend(report));
        }
        Err(e) => {
            ok &= run(9, "dynamic beats static", || Err(e.clone()));
            ok &= run(10, "cluster-count trend", || Err(e.clone()));
        }
    }
    ok &= run(11, "baseline sanity", baseline_sanity);
    ok &= run(12, "determinism", determinism);
    if !ok {
        std::process::exit(1);
    }
}
