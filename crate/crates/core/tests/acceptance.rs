//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always print. Pass
//! criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 2 9`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilefuse::assembler::{answer_ids, prompt_ids, splice, spliced_len, Tokenizer};
use tilefuse::checkpoint::Checkpoint;
use tilefuse::config::{ExperimentConfig, TaskSource};
use tilefuse::data::{complementary_frequency_check, complementary_oracle, generate};
use tilefuse::encoder::{pixel_shuffle, pixel_unshuffle, token_budget, TokenGrid};
use tilefuse::fusion::{
    fuse_post_channel, fuse_post_interleave, Branch, FusionStrategy, TokenOrigin, VisualSequence,
};
use tilefuse::harness::{report_row, run_experiment, train, ReportRow};
use tilefuse::model::{HybridModel, PreparedSample, ENCODER_A, ENCODER_B, LM, PROJECTOR_A, PROJECTOR_B};
use tilefuse::tensor::{max_relative_error, Graph, ParamStore, Session, Tensor};
use tilefuse::tiler::{segment, ImageBuffer, TileGrid};
use tilefuse::trainer::{FeatureCache, StagePlan, StageRunner, StageSettings};
use tilefuse::Error;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(configs_dir().join(name)).expect("shipped config loads")
}

// 1 ---------------------------------------------------------------------------

fn token_arithmetic() -> Outcome {
    let (a, b) = common::paper_encoders();
    ensure!(a.tile_size() == 448 && b.tile_size() == 448, "tile sizes {} / {}", a.tile_size(), b.tile_size());
    ensure!(a.tokens_per_tile() == 256, "branch A gives {}", a.tokens_per_tile());
    ensure!(b.tokens_per_tile() == 256, "branch B gives {}", b.tokens_per_tile());
    let total = token_budget(&a, &b);
    ensure!(total == 512, "budget {total}");
    let fused = FusionStrategy::PostInterleave.fused_tokens(a.tokens_per_tile(), b.tokens_per_tile());
    ensure!(fused == 512, "interleave gives {fused}");
    Ok("256 + 256 = 512 tokens per tile".into())
}

// 2 ---------------------------------------------------------------------------

fn tiling_arithmetic() -> Outcome {
    let img = ImageBuffer::filled(1280, 2048, 3, 0.5).map_err(|e| e.to_string())?;
    let ts = segment(&img, 448, 6, true).map_err(|e| e.to_string())?;
    ensure!(ts.grid == TileGrid { cols: 3, rows: 2 }, "grid {:?}", ts.grid);
    ensure!(ts.tiles.len() == 6 && ts.thumbnail.is_some(), "{} tiles", ts.tiles.len());
    ensure!(ts.patches().all(|p| p.width() == 448 && p.height() == 448), "patch sizes");
    let two = 2 * ts.patch_count();
    ensure!(two == 14, "two images give {two} patches");
    Ok("3x2 grid, 6 tiles + thumbnail, 14 patches for two images".into())
}

// 3 ---------------------------------------------------------------------------

fn unshuffle_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..200 {
        let (n, c, r, k) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
        let s = r * k;
        let g = TokenGrid::new(Tensor::from_fn(vec![n, c, s, s], |_| rng.random::<f64>())).map_err(|e| e.to_string())?;
        let out = pixel_unshuffle(&g, r).map_err(|e| e.to_string())?;
        ensure!(out.data.shape() == [n, c * r * r, s / r, s / r], "case {case}: shape {:?}", out.data.shape());
        let back = pixel_shuffle(&out, r).map_err(|e| e.to_string())?;
        ensure!(back.data.to_bits() == g.data.to_bits(), "case {case}: round trip differs");
    }
    Ok("200 cases: shape law and bit-exact inverse".into())
}

// 4 ---------------------------------------------------------------------------

fn branch(g: &mut Graph, br: Branch, n: usize, per: usize, d: usize) -> VisualSequence {
    let tag = if br == Branch::A { 0.0 } else { 1.0 };
    let mut data = Vec::new();
    let mut provenance = Vec::new();
    for tile in 0..n {
        for position in 0..per {
            provenance.push(TokenOrigin { tile, branch: br, position });
            data.extend([tag, tile as f64, position as f64]);
            data.extend(std::iter::repeat_n(0.0, d - 3));
        }
    }
    VisualSequence {
        embeddings: Some(g.constant(vec![n * per, d], data).unwrap()),
        provenance,
        n_tiles: n,
    }
}

fn fusion_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 4;
    for case in 0..100 {
        let (n, ta, tb) = (rng.random_range(1..8), rng.random_range(1..12), rng.random_range(1..12));
        let mut g = Graph::new();
        let a = branch(&mut g, Branch::A, n, ta, d);
        let b = branch(&mut g, Branch::B, n, tb, d);
        let out = fuse_post_interleave(&mut g, &a, &b).map_err(|e| e.to_string())?;
        ensure!(out.len() == n * (ta + tb), "case {case}: length {}", out.len());
        let rows = g.value(out.embeddings.unwrap()).to_vec();
        let mut k = 0;
        for tile in 0..n {
            for (br, per) in [(Branch::A, ta), (Branch::B, tb)] {
                for position in 0..per {
                    let want = TokenOrigin { tile, branch: br, position };
                    ensure!(out.provenance[k] == want, "case {case}: slot {k} is {:?}", out.provenance[k]);
                    let tag = if br == Branch::A { 0.0 } else { 1.0 };
                    ensure!(rows[k * d..k * d + 3] == [tag, tile as f64, position as f64], "case {case}: row {k} moved");
                    k += 1;
                }
            }
        }
        let b_same = branch(&mut g, Branch::B, n, ta, d);
        let down = g.constant(vec![2 * d, d], vec![0.5; 2 * d * d]).unwrap();
        let ch = fuse_post_channel(&mut g, &a, &b_same, down).map_err(|e| e.to_string())?;
        ensure!(ch.len() == a.len() && g.shape(ch.embeddings.unwrap()) == [n * ta, d], "case {case}: channel length");
    }
    Ok("100 cases: tile-block interleave order and channel length law".into())
}

// 5 ---------------------------------------------------------------------------

fn gradient_check() -> Outcome {
    let cfg = common::tiny_model(FusionStrategy::PostInterleave);
    let model = HybridModel::new(cfg.clone(), 21).map_err(|e| e.to_string())?;
    let sample = PreparedSample::new(&cfg, &[common::pattern_image(8, 16, 5)], "which?", "b")
        .map_err(|e| e.to_string())?;
    let loss_of = |store: &ParamStore| -> f64 {
        let mut s = Session::new(store).tracking_frozen(true);
        let l = model.sample_loss(&mut s, &sample, None).unwrap().unwrap();
        s.graph.value(l)[0]
    };
    let mut s = Session::new(&model.store).tracking_frozen(true);
    let l = model.sample_loss(&mut s, &sample, None).map_err(|e| e.to_string())?.unwrap();
    s.graph.backward(l).map_err(|e| e.to_string())?;
    let mut auto: Vec<Vec<f64>> = model.store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
    for (id, g) in s.param_grads() {
        auto[id.index()].copy_from_slice(g);
    }
    let n_params = model.store.numel();
    let eps = 1e-5;
    let mut probe = model.store.clone();
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for j in 0..probe.get(id).tensor.numel() {
            let orig = probe.get(id).tensor.data()[j];
            probe.get_mut(id).tensor.data_mut()[j] = orig + eps;
            let up = loss_of(&probe);
            probe.get_mut(id).tensor.data_mut()[j] = orig - eps;
            let down = loss_of(&probe);
            probe.get_mut(id).tensor.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = max_relative_error(&[auto[id.index()][j]], &[numeric], 1e-6);
            ensure!(err < 1e-4, "{}[{j}]: autograd {} vs numeric {numeric} (rel {err:e})", model.store.get(id).name, auto[id.index()][j]);
            worst = worst.max(err);
        }
    }
    Ok(format!("{n_params} parameters, max relative error {worst:.2e}"))
}

// 6 ---------------------------------------------------------------------------

fn bytes(store: &ParamStore, prefix: &str) -> Vec<u64> {
    store.with_prefix(prefix).flat_map(|p| p.tensor.to_bits()).collect()
}

fn freeze_semantics() -> Outcome {
    let cfg = common::tiny_model(FusionStrategy::PostInterleave);
    let mut model = HybridModel::new(cfg.clone(), 8).map_err(|e| e.to_string())?;
    let batch: Vec<PreparedSample> = (0..4)
        .map(|i| PreparedSample::new(&cfg, &[common::pattern_image(8, 16, i)], "which?", ["a", "b", "c", "d"][i as usize]).unwrap())
        .collect();
    let cache = FeatureCache::default();
    let snap = |m: &HybridModel| [ENCODER_A, ENCODER_B, LM, PROJECTOR_A, PROJECTOR_B].map(|p| bytes(&m.store, p));
    let before = snap(&model);
    let s1 = StageSettings { lr: 2e-3, weight_decay: 0.0, steps: 60, warmup_steps: None };
    let plan = StagePlan::stage1(&s1, true);
    let warmup = plan.warmup_steps;
    let mut losses = Vec::new();
    {
        let mut r = StageRunner::new(plan, &mut model, &batch, &cache, batch.len(), 1).map_err(|e| e.to_string())?;
        r.run(|m| {
            losses.push(m.loss);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    }
    let window = &losses[warmup..warmup + 51];
    if let Some(i) = window.windows(2).position(|w| w[1] >= w[0]) {
        return Err(format!("stage1 loss rose at step {}: {} -> {}", warmup + i, window[i], window[i + 1]));
    }
    let after1 = snap(&model);
    ensure!(after1[0] == before[0] && after1[1] == before[1], "stage1 changed an encoder");
    ensure!(after1[2] == before[2], "stage1 changed the LM");
    ensure!(after1[3] != before[3] && after1[4] != before[4], "stage1 left a projector untouched");
    let s2 = StageSettings { lr: 2e-3, weight_decay: 0.01, steps: 5, warmup_steps: None };
    let mut r = StageRunner::new(StagePlan::stage2(&s2, true, true), &mut model, &batch, &cache, batch.len(), 1)
        .map_err(|e| e.to_string())?;
    r.run(|_| Ok(())).map_err(|e| e.to_string())?;
    let after2 = snap(&model);
    ensure!(after2[0] == after1[0] && after2[1] == after1[1], "stage2 changed an encoder");
    ensure!(after2[2] != after1[2], "stage2 left the LM untouched");
    ensure!(after2[3] != after1[3] && after2[4] != after1[4], "stage2 left a projector untouched");
    Ok(format!(
        "stage1 loss {:.4} -> {:.4} strictly decreasing over 50 post-warmup steps; byte checks hold",
        window[0],
        window[50]
    ))
}

// 7 ---------------------------------------------------------------------------

fn row_summary(r: &ReportRow) -> String {
    format!("{}={:.3}", r.config_id, r.accuracy)
}

fn hybrid_beats_single() -> Outcome {
    let hybrid = load("complementary_hybrid.json");
    let TaskSource::Generate(spec) = &hybrid.task else {
        return Err("complementary config must generate its task".into());
    };
    // the construction: shape lives only in the lowpass view, texture only
    // in the highpass view, and the full image determines the label
    let dev = complementary_frequency_check(spec, 1, spec.n_eval).map_err(|e| e.to_string())?;
    ensure!(dev < 1e-12, "frequency separation violated by {dev}");
    let data = generate(spec).map_err(|e| e.to_string())?;
    let oracle_ok = data.eval.iter().all(|s| complementary_oracle(spec, &s.images[0]).unwrap() == s.label);
    ensure!(oracle_ok, "oracle misreads an eval sample");

    let h = run_experiment(&hybrid, None).map_err(|e| e.to_string())?;
    let a = run_experiment(&load("complementary_a_only.json"), None).map_err(|e| e.to_string())?;
    let b = run_experiment(&load("complementary_b_only.json"), None).map_err(|e| e.to_string())?;
    let best_single = a.accuracy.max(b.accuracy);
    let summary = format!("{}, {}, {}", row_summary(&h), row_summary(&a), row_summary(&b));
    ensure!(h.accuracy >= 0.90, "hybrid below 0.90: {summary}");
    ensure!(best_single <= 0.60, "a single branch above 0.60: {summary}");
    ensure!(h.accuracy - best_single >= 0.30, "margin below 0.30: {summary}");
    Ok(summary)
}

// 8 ---------------------------------------------------------------------------

fn tiling_helps() -> Outcome {
    let on = load("tile_detail_tiling.json");
    let off = load("tile_detail_notiling.json");
    ensure!(on.training == off.training && on.seed == off.seed, "configs differ in budget or seed");
    ensure!(on.model.tiling.enabled && !off.model.tiling.enabled, "tiling flags");
    let r_on = run_experiment(&on, None).map_err(|e| e.to_string())?;
    let r_off = run_experiment(&off, None).map_err(|e| e.to_string())?;
    let summary = format!("{}, {}", row_summary(&r_on), row_summary(&r_off));
    ensure!(r_on.accuracy >= r_off.accuracy + 0.15, "gap below 0.15: {summary}");
    Ok(summary)
}

// 9 ---------------------------------------------------------------------------

fn determinism_and_resume() -> Outcome {
    let v = common::tiny_experiment("det", "complementary", 32, 32);
    let cfg = ExperimentConfig::from_json(&v.to_string()).map_err(|e| e.to_string())?;
    let a = train(&cfg, None).map_err(|e| e.to_string())?;
    let b = train(&cfg, None).map_err(|e| e.to_string())?;
    let keys = |m: &[tilefuse::trainer::MetricsRecord]| m.iter().map(|r| r.deterministic_key()).collect::<Vec<_>>();
    ensure!(keys(&a.metrics) == keys(&b.metrics), "metrics streams differ");
    ensure!(a.checkpoint.blob_bytes() == b.checkpoint.blob_bytes(), "final weights differ");
    let ra = report_row(&cfg, &a.model, &a.eval, 0).map_err(|e| e.to_string())?;
    let rb = report_row(&cfg, &b.model, &b.eval, 0).map_err(|e| e.to_string())?;
    ensure!(ra == rb, "report rows differ");

    // interrupt a stage after 5 of 12 steps, persist, resume in a fresh model
    let mcfg = common::tiny_model(FusionStrategy::PostChannel);
    let data: Vec<PreparedSample> = (0..6)
        .map(|i| PreparedSample::new(&mcfg, &[common::pattern_image(8, 16, i)], "q?", ["x", "y"][i as usize % 2]).unwrap())
        .collect();
    let cache = FeatureCache::default();
    let plan = StagePlan::stage2(&StageSettings { lr: 5e-3, weight_decay: 0.01, steps: 12, warmup_steps: Some(2) }, true, true);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut m1 = HybridModel::new(mcfg.clone(), 2).map_err(|e| e.to_string())?;
    let (next_loss, rest) = {
        let mut r = StageRunner::new(plan.clone(), &mut m1, &data, &cache, 4, 9).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            r.step_once().map_err(|e| e.to_string())?;
        }
        r.checkpoint("h").save(dir.path()).map_err(|e| e.to_string())?;
        let next = r.peek_next_loss().map_err(|e| e.to_string())?;
        let mut rest = Vec::new();
        r.run(|m| {
            rest.push(m.loss.to_bits());
            Ok(())
        })
        .map_err(|e| e.to_string())?;
        (next, rest)
    };
    let ckpt = Checkpoint::load(dir.path()).map_err(|e| e.to_string())?;
    let mut m2 = HybridModel::new(mcfg, 77).map_err(|e| e.to_string())?;
    let mut r = StageRunner::new(plan, &mut m2, &data, &cache, 4, 9).map_err(|e| e.to_string())?;
    r.restore(&ckpt).map_err(|e| e.to_string())?;
    let resumed = r.peek_next_loss().map_err(|e| e.to_string())?;
    ensure!(resumed.to_bits() == next_loss.to_bits(), "next-step loss {resumed} vs {next_loss}");
    let mut rest2 = Vec::new();
    r.run(|m| {
        rest2.push(m.loss.to_bits());
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    ensure!(rest == rest2, "resumed run diverged");
    Ok(format!("{} metric records bit-identical; resumed at step 5 with identical losses", a.metrics.len()))
}

// 10 --------------------------------------------------------------------------

fn context_budget() -> Outcome {
    let tok = Tokenizer;
    let d = 2;
    let mut g = Graph::new();
    let table = g.leaf(Tensor::zeros(vec![tilefuse::assembler::VOCAB_SIZE, d]));
    let visual = |g: &mut Graph, n: usize| VisualSequence {
        embeddings: Some(g.leaf(Tensor::zeros(vec![n, d]))),
        provenance: (0..n).map(|position| TokenOrigin { tile: 0, branch: Branch::A, position }).collect(),
        n_tiles: 1,
    };
    let prompt = prompt_ids(&tok, 1, "Is it safe to enter the intersection at this time?");
    let answer = answer_ids(&tok, "No.");
    let v = visual(&mut g, 7 * 512);
    let seq = splice(&mut g, &prompt, &answer, &[v], table, 8196).map_err(|e| e.to_string())?;
    ensure!(seq.len() == spliced_len(&prompt, &answer, &[3584]) && seq.len() <= 8196, "length {}", seq.len());
    let v = visual(&mut g, 7 * 512);
    let limit = seq.len() - 1;
    match splice(&mut g, &prompt, &answer, &[v], table, limit) {
        Err(Error::Budget { required, available }) if required == seq.len() && available == limit => {}
        other => return Err(format!("expected a budget error, got {:?}", other.map(|s| s.len()))),
    }
    Ok(format!("7x512 visual + text = {} <= 8196; one over the limit is a budget error", seq.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("token arithmetic", token_arithmetic),
        ("tiling arithmetic", tiling_arithmetic),
        ("pixel-unshuffle law", unshuffle_law),
        ("fusion invariants", fusion_invariants),
        ("gradient correctness", gradient_check),
        ("freeze semantics", freeze_semantics),
        ("hybrid beats single", hybrid_beats_single),
        ("tiling helps", tiling_helps),
        ("determinism and persistence", determinism_and_resume),
        ("context budget", context_budget),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("criterion {n:>2} PASS  {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.1}s): {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
