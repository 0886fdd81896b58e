//! Runs every acceptance criterion and prints one PASS/FAIL line for each.

mod support;

use std::fs;
use std::io::Cursor;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use support::{
    ceil_log2, check_grid_properties, dense_fd_max_error, linear_first_divergence, load_config,
    serve_once,
};
use vtrain_core::fpround::{tau_lower_bound, tau_upper_bound, Grid, RoundingDirection};
use vtrain_core::game::{challenge, judge_check, Outcome};
use vtrain_core::merkle::MerkleTree;
use vtrain_core::protocol::{
    audit, audit_file, audit_without_corrections_with, estimate_log_entries, l2_series,
    step_entries, threshold_search, train_file, train_with, training_data, RunOptions, TrainConfig,
    TrainOutput, WeightTamper,
};
use vtrain_core::roundlog::{decode, encode, pack5, unpack5, LogReader, HEADER_LEN};
use vtrain_core::run::RunReport;
use vtrain_core::simnet::{evaluate, DeviceProfile, LayerSpec, ModelSpec, Rng};

type Verdict = Result<String, String>;
type Check = fn() -> Verdict;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn train_mem(cfg: &TrainConfig, opts: &RunOptions) -> Result<(TrainOutput, Vec<u8>), String> {
    let (out, sink) = train_with(cfg, Cursor::new(Vec::new()), opts).map_err(|e| e.to_string())?;
    Ok((out, sink.into_inner()))
}

fn replay(
    cfg: &TrainConfig,
    profile: &DeviceProfile,
    log: &[u8],
) -> Result<vtrain_core::protocol::AuditOutput, String> {
    let reader = LogReader::new(log).map_err(|e| e.to_string())?;
    audit(cfg, profile, reader).map_err(|e| e.to_string())
}

fn c1_cross_profile_replication() -> Verdict {
    let cfg = load_config("mlp.toml").train;
    let profiles = DeviceProfile::standard_set();
    let mut pairs = 0;
    for trainer in &profiles {
        let cfg = TrainConfig {
            trainer_profile: trainer.clone(),
            ..cfg.clone()
        };
        let (t, log) = train_mem(&cfg, &RunOptions::default())?;
        for auditor in profiles.iter().filter(|p| *p != trainer) {
            let a = replay(&cfg, auditor, &log)?;
            ensure(a.run.root() == t.run.root(), || {
                format!("{trainer} -> {auditor}: roots differ")
            })?;
            ensure(a.run.final_digest == t.run.final_digest, || {
                format!("{trainer} -> {auditor}: final weights differ")
            })?;
            pairs += 1;
        }
    }
    ensure(pairs == 12, || format!("only {pairs} pairs"))?;
    Ok(format!(
        "{pairs}/12 ordered pairs give equal roots and final digests"
    ))
}

fn c2_negative_control() -> Verdict {
    let opts = RunOptions {
        keep_checkpoints: true,
        ..Default::default()
    };
    let mut diverged = Vec::new();
    for name in ["mlp.toml", "negative_control.toml"] {
        let cfg = load_config(name).train;
        let reference = audit_without_corrections_with(&cfg, &cfg.trainer_profile, &opts)
            .map_err(|e| e.to_string())?;
        for p in DeviceProfile::standard_set()
            .iter()
            .filter(|p| **p != cfg.trainer_profile)
        {
            let other =
                audit_without_corrections_with(&cfg, p, &opts).map_err(|e| e.to_string())?;
            let Some(first) = reference
                .run
                .tree
                .first_divergence(&other.run.tree)
                .map_err(|e| e.to_string())?
            else {
                continue;
            };
            let l2 = l2_series(&reference.run.checkpoints, &other.run.checkpoints)
                .map_err(|e| e.to_string())?;
            ensure(l2[..first].iter().all(|&d| d == 0.0), || {
                format!("{name} on {p}: distance nonzero before checkpoint {first}")
            })?;
            ensure(l2[first..].iter().all(|&d| d > 0.0), || {
                format!("{name} on {p}: distance returns to zero after checkpoint {first}")
            })?;
            diverged.push(format!(
                "{name} {p} from checkpoint {first}/{} (final l2 {:.2e})",
                l2.len(),
                l2.last().copied().unwrap_or(0.0)
            ));
        }
        // With corrections the same config replicates.
        if name == "negative_control.toml" {
            let (t, log) = train_mem(&cfg, &RunOptions::default())?;
            let a = replay(&cfg, &DeviceProfile::pairwise(), &log)?;
            ensure(a.run.root() == t.run.root(), || {
                "negative control fails to replicate with corrections".into()
            })?;
        }
    }
    ensure(!diverged.is_empty(), || {
        "uncorrected replay never diverged".into()
    })?;
    Ok(format!(
        "uncorrected replay diverges: {}",
        diverged.join("; ")
    ))
}

fn c3_correction_sparsity() -> Verdict {
    let mut lines = Vec::new();
    for name in ["mlp.toml", "logistic.toml", "negative_control.toml"] {
        let base = load_config(name).train;
        let mut counts = Vec::new();
        for b_r in [26, 29, 32] {
            let cfg = TrainConfig {
                b_r,
                ..base.clone()
            };
            let (_, log) = train_mem(&cfg, &RunOptions::default())?;
            let mut total = 0;
            for p in DeviceProfile::standard_set()
                .iter()
                .filter(|p| **p != cfg.trainer_profile)
            {
                total += replay(&cfg, p, &log)?.run.totals().total();
            }
            counts.push(total);
        }
        ensure(counts[0] <= counts[1] && counts[1] <= counts[2], || {
            format!("{name}: corrections at b_r 26/29/32 = {counts:?} not monotone")
        })?;
        ensure(counts[0] == 0, || {
            format!("{name}: {} corrections at b_r = 26", counts[0])
        })?;
        lines.push(format!("{name} {}/{}/{}", counts[0], counts[1], counts[2]));
    }
    Ok(format!(
        "corrections at b_r 26/29/32 summed over auditors: {}",
        lines.join(", ")
    ))
}

fn c4_encoding_efficiency() -> Verdict {
    let cfg = load_config("mlp.toml").train;
    let (t, log) = train_mem(&cfg, &RunOptions::default())?;
    let entries = t.log.entry_count;
    ensure(entries >= 100_000, || format!("only {entries} entries"))?;
    let payload = log.len() as u64 - HEADER_LEN;
    let without_header = payload as f64 / entries as f64;
    let with_header = log.len() as f64 / entries as f64;
    ensure(without_header <= 0.21, || {
        format!("payload ratio {without_header:.4}")
    })?;
    ensure(with_header <= 0.25, || {
        format!("file ratio {with_header:.4}")
    })?;

    let mut rng = Rng::new(41);
    let dirs: Vec<RoundingDirection> = (0..1_000_000)
        .map(|_| RoundingDirection::try_from(rng.below(3) as u8).expect("code"))
        .collect();
    for compress in [false, true] {
        let bytes = encode(dirs.iter().copied(), 32, compress).map_err(|e| e.to_string())?;
        let (header, back) = decode(&bytes).map_err(|e| e.to_string())?;
        ensure(header.entry_count == 1_000_000 && back == dirs, || {
            format!("roundtrip failed (compress = {compress})")
        })?;
    }
    Ok(format!(
        "{entries} entries: payload {:.1}% and file {:.1}% of one byte per entry; 10^6 fuzzed entries roundtrip",
        100.0 * without_header,
        100.0 * with_header
    ))
}

fn c5_threshold_bounds() -> Verdict {
    let (seq, pw) = (DeviceProfile::sequential(), DeviceProfile::pairwise());
    let mut rng = Rng::new(23);
    let mut shown = Vec::new();
    for b_r in [26, 29, 32] {
        let upper = tau_upper_bound(Grid::new(b_r).map_err(|e| e.to_string())?);
        let mut search = |layer: LayerSpec, samples: usize| -> Result<f64, String> {
            let tau = threshold_search(&layer, 64, b_r, (&seq, &pw), samples, 40, &mut rng)
                .map_err(|e| e.to_string())?;
            ensure((tau_lower_bound()..=upper).contains(&tau), || {
                format!(
                    "b_r={b_r} {}: tau {tau:e} outside the bracket",
                    layer.kind_name()
                )
            })?;
            Ok(tau)
        };
        let dense = search(
            LayerSpec::Dense {
                inputs: 64,
                outputs: 64,
            },
            if b_r == 32 { 40_000 } else { 2_000 },
        )?;
        let relu = search(LayerSpec::Relu, 2_000)?;
        let sigmoid = search(LayerSpec::Sigmoid, 2_000)?;
        search(LayerSpec::SoftmaxCrossEntropy, 2_000)?;
        ensure(dense <= relu && dense <= sigmoid, || {
            format!("b_r={b_r}: dense tau {dense:e} above elementwise {relu:e}/{sigmoid:e}")
        })?;
        shown.push(format!(
            "b_r={b_r} dense {:.3} relu {:.3}",
            dense / 2f64.powi(-23),
            relu / 2f64.powi(-23)
        ));
    }
    Ok(format!(
        "tau in bracket, dense <= elementwise (units of 2^-23): {}",
        shown.join(", ")
    ))
}

/// Flips one logged direction in place; `None` if its byte does not decode.
fn corrupt_entry(log: &mut [u8], entry: u64, rng: &mut Rng) -> Option<()> {
    let at = (HEADER_LEN + entry / 5) as usize;
    let mut digits = unpack5(log[at]).ok()?;
    let d = &mut digits[(entry % 5) as usize];
    *d = match *d {
        RoundingDirection::Down => RoundingDirection::Up,
        RoundingDirection::Up => RoundingDirection::Down,
        RoundingDirection::Ignore if rng.below(2) == 0 => RoundingDirection::Up,
        RoundingDirection::Ignore => RoundingDirection::Down,
    };
    log[at] = pack5(digits);
    Some(())
}

fn loss_width(model: &ModelSpec) -> u64 {
    match model.layers.last() {
        Some(LayerSpec::Dense { outputs, .. }) => *outputs as u64,
        _ => 1,
    }
}

struct Case {
    cfg: TrainConfig,
    step: usize,
    trainer: MerkleTree,
    auditor: MerkleTree,
    attempts: usize,
}

fn tampered_case(cfg: &TrainConfig, rng: &mut Rng) -> Result<Case, String> {
    let params = vtrain_core::simnet::init_weights(&cfg.model, &mut Rng::new(0))
        .map_err(|e| e.to_string())?
        .parameter_count();
    for attempts in 1..=50 {
        let step = 1 + rng.below(cfg.steps() as u64) as usize;
        let index = rng.below(params as u64) as usize;
        let opts = RunOptions {
            tamper: Some(WeightTamper { step, index }),
            ..Default::default()
        };
        let (t, log) = train_mem(cfg, &opts)?;
        let a = replay(cfg, &DeviceProfile::pairwise(), &log)?;
        if a.run.root() != t.run.root() {
            return Ok(Case {
                cfg: cfg.clone(),
                step,
                trainer: t.run.tree,
                auditor: a.run.tree,
                attempts,
            });
        }
    }
    Err("no weight tampering changed the run".into())
}

fn corrupted_log_case(cfg: &TrainConfig, rng: &mut Rng) -> Result<Case, String> {
    let (t, log) = train_mem(cfg, &RunOptions::default())?;
    let (fwd, bwd) = step_entries(&cfg.model, cfg.batch_size);
    // Forward outputs and the loss gradient reach the weights; the gradient
    // w.r.t. the raw input, logged last in each step, never does.
    let useful = fwd + loss_width(&cfg.model) * cfg.batch_size as u64;
    for attempts in 1..=400 {
        let step = rng.below(cfg.steps() as u64);
        let entry = step * (fwd + bwd) + rng.below(useful);
        let mut bad = log.clone();
        corrupt_entry(&mut bad, entry, rng).ok_or("undecodable log byte")?;
        let a = replay(cfg, &DeviceProfile::pairwise(), &bad)?;
        if a.run.root() != t.run.root() {
            return Ok(Case {
                cfg: cfg.clone(),
                step: step as usize + 1,
                trainer: t.run.tree.clone(),
                auditor: a.run.tree,
                attempts,
            });
        }
    }
    Err("no single-entry corruption changed the run".into())
}

fn c6_dispute_localization() -> Verdict {
    let mlp = load_config("mlp.toml").train;
    let logistic = load_config("logistic.toml").train;
    let configs: Vec<TrainConfig> = [
        (&mlp, 4),
        (&mlp, 3),
        (&mlp, 5),
        (&logistic, 8),
        (&logistic, 3),
    ]
    .into_iter()
    .map(|(c, k)| TrainConfig {
        checkpoint_interval: k,
        ..c.clone()
    })
    .collect();
    let mut rng = Rng::new(2024);
    let mut max_requests = 0;
    let mut attempts = 0;
    for i in 0..20 {
        let cfg = &configs[rng.below(configs.len() as u64) as usize];
        let case = if i % 2 == 0 {
            tampered_case(cfg, &mut rng)?
        } else {
            corrupted_log_case(cfg, &mut rng)?
        };
        attempts += case.attempts;
        let k = case.cfg.checkpoint_interval;
        let oracle = linear_first_divergence(case.trainer.leaves(), case.auditor.leaves())
            .ok_or("oracle found no divergence")?;
        // Leaves are numbered from 0; leaf j commits the weights after step (j + 1) k.
        ensure(oracle + 1 >= case.step.div_ceil(k), || {
            format!("case {i}: oracle leaf {oracle} precedes step {}", case.step)
        })?;
        let (addr, server) = serve_once(case.trainer.clone());
        let report = challenge(&case.auditor, addr, Duration::from_secs(10), "acceptance")
            .map_err(|e| e.to_string())?;
        server.join().map_err(|_| "server thread panicked")?;
        ensure(
            report.outcome == Outcome::DisputeAtLeaf { leaf: oracle },
            || format!("case {i}: {:?}, oracle says leaf {oracle}", report.outcome),
        )?;
        let verdict = judge_check(&report, &case.trainer.root(), &case.auditor.root());
        ensure(verdict.accepted, || {
            format!("case {i}: judge rejected: {}", verdict.reason)
        })?;
        let bound = 2 * ceil_log2(case.trainer.leaf_count()) + 2;
        ensure(report.node_requests <= bound, || {
            format!("case {i}: {} node requests > {bound}", report.node_requests)
        })?;
        max_requests = max_requests.max(report.node_requests);
    }
    Ok(format!(
        "20/20 disputes localized to the oracle leaf and accepted by the judge; max {max_requests} node requests; {attempts} injections tried"
    ))
}

fn c7_storage_formula() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mlp = load_config("mlp.toml").train;
    let logistic = load_config("logistic.toml").train;
    let configs = [
        mlp.clone(),
        logistic.clone(),
        TrainConfig {
            batch_size: 8,
            epochs: 1,
            ..mlp.clone()
        },
        TrainConfig {
            model: ModelSpec::mlp(16, 7, 3),
            batch_size: 20,
            epochs: 2,
            ..mlp.clone()
        },
        TrainConfig {
            batch_size: 48,
            b_r: 27,
            ..logistic
        },
    ];
    let mut sizes = Vec::new();
    for (i, cfg) in configs.iter().enumerate() {
        let path = dir.path().join(format!("run{i}.vtrl"));
        let out = train_file(cfg, &path, &RunOptions::default()).map_err(|e| e.to_string())?;
        let est = estimate_log_entries(cfg);
        let actual = fs::metadata(&path).map_err(|e| e.to_string())?.len();
        ensure(out.log.entry_count == est.entries, || {
            format!(
                "config {i}: {} entries, estimate {}",
                out.log.entry_count, est.entries
            )
        })?;
        ensure(actual == est.bytes, || {
            format!("config {i}: {actual} bytes, estimate {}", est.bytes)
        })?;
        sizes.push(actual.to_string());
    }
    Ok(format!(
        "5 configs, file bytes equal the estimate: {}",
        sizes.join(", ")
    ))
}

fn c8_logistic_scale() -> Verdict {
    let file = load_config("logistic.toml");
    let cfg = &file.train;
    ensure(
        cfg.data.size == 4096 && cfg.data.dim == 64 && cfg.epochs == 1 && cfg.batch_size == 64,
        || "logistic config is not the 2^12 x 64, B = 64, one-epoch task".into(),
    )?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("logistic.vtrl");
    let started = Instant::now();
    let t = train_file(cfg, &path, &RunOptions::default()).map_err(|e| e.to_string())?;
    let a = audit_file(cfg, &DeviceProfile::pairwise(), &path).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure(a.run.root() == t.run.root(), || "roots differ".into())?;
    ensure(elapsed < Duration::from_secs(10), || {
        format!("took {elapsed:?}")
    })?;
    let bytes = fs::metadata(&path).map_err(|e| e.to_string())?.len();
    let data = training_data(cfg).map_err(|e| e.to_string())?;
    let report = RunReport::for_training(cfg, &t, bytes, &data).map_err(|e| e.to_string())?;
    let log = report.log.as_ref().ok_or("report lacks log summary")?;
    ensure(log.bytes == bytes && report.wall_seconds > 0.0, || {
        "report lacks bytes or timing".into()
    })?;
    Ok(format!(
        "train+audit {:.3}s, equal roots; log {} bytes ({} entries, estimate {} bytes), train {:.3}s, accuracy {:.3}",
        elapsed.as_secs_f64(),
        log.bytes,
        log.entries,
        report.estimate.bytes,
        report.wall_seconds,
        report.train_accuracy
    ))
}

fn c9_numerical_core() -> Verdict {
    let mut pairs = 0;
    for (bits, seed) in [(26, 101), (29, 102), (32, 103)] {
        let r = check_grid_properties(bits, 1_000_000, seed)?;
        pairs += r.sync_pairs;
    }
    let worst = dense_fd_max_error(100, 77);
    ensure(worst < 1e-5, || {
        format!("finite-difference error {worst:e}")
    })?;
    Ok(format!(
        "3 x 10^6 fuzzed values ({pairs} sync pairs) agree with the bit-pattern oracle; max gradient error {worst:.1e} over 100 layers"
    ))
}

fn c10_model_quality() -> Verdict {
    let base = load_config("mlp.toml").train;
    let mut results = Vec::new();
    for b_r in [32, 26] {
        let cfg = TrainConfig {
            b_r,
            ..base.clone()
        };
        let (t, _) = train_mem(&cfg, &RunOptions::default())?;
        let data = training_data(&cfg).map_err(|e| e.to_string())?;
        let eval = evaluate(
            &cfg.model,
            &t.run.final_weights,
            &data,
            &cfg.trainer_profile,
        )
        .map_err(|e| e.to_string())?;
        results.push(eval);
    }
    let (r32, r26) = (results[0], results[1]);
    ensure(r32.accuracy >= 0.9, || {
        format!("accuracy {:.3} at b_r = 32", r32.accuracy)
    })?;
    let rel = (r26.loss - r32.loss).abs() / r32.loss;
    ensure(rel < 0.1, || {
        format!("loss {:.5} vs {:.5}, {rel:.3} relative", r26.loss, r32.loss)
    })?;
    Ok(format!(
        "accuracy {:.3} at b_r=32; final loss {:.6} (b_r=32) vs {:.6} (b_r=26), {:.1e} relative",
        r32.accuracy, r32.loss, r26.loss, rel
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 10] = [
        ("cross-profile replication", c1_cross_profile_replication),
        ("negative control", c2_negative_control),
        ("correction sparsity", c3_correction_sparsity),
        ("encoding efficiency", c4_encoding_efficiency),
        ("threshold bounds", c5_threshold_bounds),
        ("dispute localization", c6_dispute_localization),
        ("storage formula", c7_storage_formula),
        ("logistic scale point", c8_logistic_scale),
        ("numerical core", c9_numerical_core),
        ("model quality", c10_model_quality),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let result = check();
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:>2} {name} [{secs:.1}s]: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name} [{secs:.1}s]: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
