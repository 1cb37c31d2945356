//! Acceptance criteria 1-8. Runs as a plain binary so every criterion prints
//! exactly one PASS/FAIL line; exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rmgpmsi::ablation::Toggles;
use rmgpmsi::config::RunConfig;
use rmgpmsi::data::{make_synthetic, TransformMode};
use rmgpmsi::evalkit::{evaluate, predict_concat, predict_mix, robustness_eval, CorruptionSpec};
use rmgpmsi::heads::{Classifier, PredictionBundle};
use rmgpmsi::image::{ImageTensor, ValueRange};
use rmgpmsi::model::{HeadId, Model, ParamGroup};
use rmgpmsi::msi::{Interaction, InteractionConfig, SmoothConvBlock};
use rmgpmsi::nn::{cross_entropy, cross_entropy_backward, Mode, Module, Slot};
use rmgpmsi::optim::Sgd;
use rmgpmsi::rmg::{self, Rect};
use rmgpmsi::trainer::{build_schedule, fit, train_step, FitOptions, PhaseSchedule, StepPolicy};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);
type NamedGrads = Vec<(String, Vec<f64>)>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1

fn pixel_multiset(img: &ImageTensor) -> Vec<Vec<u32>> {
    let c = img.channels();
    let mut px: Vec<Vec<u32>> = img.values().chunks(c).map(|p| p.iter().map(|v| v.to_bits()).collect()).collect();
    px.sort();
    px
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = 1200;
    for case in 0..cases {
        let r: u32 = rng.gen_range(0..=3);
        let unit = 1usize << r;
        let h = unit * rng.gen_range(1..=64 / unit);
        let w = unit * rng.gen_range(1..=64 / unit);
        let c = if rng.gen_bool(0.5) { 1 } else { 3 };
        let img = ImageTensor::from_fn(h, w, c, ValueRange::UnitFloat, |_, _, _| rng.gen::<f32>());
        let seed = rng.gen::<u64>();
        let (out, trace) = rmg::generate(&img, &rmg::RmgConfig::new(r, seed)).map_err(|e| format!("case {case}: {e}"))?;
        let ctx = || format!("case {case} ({h}x{w}x{c}, r={r}, seed={seed})");
        check(pixel_multiset(&out) == pixel_multiset(&img), || format!("{}: pixel multiset changed", ctx()))?;
        let blocks = trace.blocks(Rect::full(&img));
        check(blocks.len() == 3 * r as usize + 1, || format!("{}: {} blocks", ctx(), blocks.len()))?;
        let min_w = blocks.iter().map(|b| b.w).min().unwrap_or(0);
        let min_h = blocks.iter().map(|b| b.h).min().unwrap_or(0);
        check(min_w == w >> r && min_h == h >> r, || format!("{}: min patch {min_w}x{min_h}", ctx()))?;
        let area: usize = blocks.iter().map(|b| b.w * b.h).sum();
        check(area == w * h, || format!("{}: blocks cover {area} of {} pixels", ctx(), w * h))?;
        if r == 0 {
            check(out == img, || format!("{}: r = 0 changed the image", ctx()))?;
        }
        let replayed = rmg::replay(&img, &trace).map_err(|e| format!("{}: {e}", ctx()))?;
        check(replayed == out, || format!("{}: replay differs", ctx()))?;
        let reparsed = rmg::MosaicTrace::from_text(&trace.to_text()).map_err(|e| e.to_string())?;
        check(reparsed == trace, || format!("{}: trace text round trip", ctx()))?;
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(30), || format!("took {elapsed:.1?}"))?;
    Ok(format!("{cases} cases, all invariants exact, {elapsed:.2?} (< 30 s)"))
}

// ---------------------------------------------------------------- 2

/// Smooth blocks → interaction → stage classifiers → summed cross-entropy.
struct StagePath {
    blocks: Vec<SmoothConvBlock>,
    interaction: Interaction,
    heads: Vec<Classifier>,
    maps: Vec<Array4<f64>>,
    labels: Vec<usize>,
}

impl StagePath {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let (c, k, b) = (8, 4, 3);
        let shapes = [(6, 4), (10, 2), (12, 1)];
        let config = InteractionConfig::new(3, c);
        let blocks = shapes.iter().map(|&(cn, _)| SmoothConvBlock::new(cn, c, rng)).collect();
        let interaction = Interaction::new(config, rng);
        let heads = (0..3).map(|_| Classifier::new(c, k, rng)).collect();
        let maps = shapes
            .iter()
            .map(|&(cn, s)| Array4::from_shape_fn((b, cn, s, s), |_| rng.gen_range(-1.5..1.5)))
            .collect();
        let labels = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let mut net = Self {
            blocks,
            interaction,
            heads,
            maps,
            labels,
        };
        // Move every parameter (BN affine terms included) off its default.
        net.visit(&mut |_, slot| {
            if let Slot::Param(p) = slot {
                p.value.mapv_inplace(|v| v + rng.gen_range(-0.3..0.3));
            }
        });
        net
    }

    fn visit(&mut self, f: &mut dyn FnMut(&str, Slot<'_>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&format!("smooth{i}"), f);
        }
        self.interaction.visit("msi", f);
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit(&format!("head{i}"), f);
        }
    }

    fn forward(&mut self) -> (f64, Vec<Array2<f64>>) {
        let xs: Vec<Array2<f64>> = self
            .blocks
            .iter_mut()
            .zip(&self.maps)
            .map(|(b, m)| b.forward(m, Mode::Train).unwrap())
            .collect();
        let out = self.interaction.forward(&xs).unwrap();
        let mut loss = 0.0;
        let mut probs = Vec::new();
        for (h, m) in self.heads.iter_mut().zip(&out.m) {
            let p = h.forward(m, Mode::Train).unwrap();
            loss += cross_entropy(&p, &self.labels);
            probs.push(p);
        }
        (loss, probs)
    }

    fn min_tie_gap(&self) -> f64 {
        self.blocks.iter().map(|b| b.last_tie_gap()).fold(f64::INFINITY, f64::min)
    }

    /// Analytic gradients: parameters by name, then the input maps.
    fn gradients(&mut self) -> (NamedGrads, Vec<Array4<f64>>) {
        self.visit(&mut |_, slot| {
            if let Slot::Param(p) = slot {
                p.zero_grad();
            }
        });
        let (_, probs) = self.forward();
        let dms: Vec<Option<Array2<f64>>> = self
            .heads
            .iter_mut()
            .zip(&probs)
            .map(|(h, p)| Some(h.backward(&cross_entropy_backward(p, &self.labels))))
            .collect();
        let dxs = self.interaction.backward(&dms, None);
        let dmaps = self.blocks.iter_mut().zip(&dxs).map(|(b, dx)| b.backward(dx)).collect();
        let mut grads = Vec::new();
        self.visit(&mut |name, slot| {
            if let Slot::Param(p) = slot {
                grads.push((name.to_string(), p.grad.iter().copied().collect()));
            }
        });
        (grads, dmaps)
    }

    fn nudge_param(&mut self, target: &str, index: usize, delta: f64) {
        self.visit(&mut |name, slot| {
            if let Slot::Param(p) = slot {
                if name == target {
                    let v = p.value.as_slice_mut().expect("contiguous parameter");
                    v[index] += delta;
                }
            }
        });
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn criterion_2() -> Outcome {
    const H: f64 = 1e-5;
    const PER_TENSOR: usize = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut draws, mut resampled, mut checked) = (0usize, 0usize, 0usize);
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    while draws < 20 {
        let mut net = StagePath::new(&mut rng);
        net.forward();
        if net.min_tie_gap() < 1e-6 {
            resampled += 1;
            continue;
        }
        draws += 1;
        let (grads, dmaps) = net.gradients();
        for (name, g) in &grads {
            let picks: Vec<usize> = if g.len() <= PER_TENSOR {
                (0..g.len()).collect()
            } else {
                (0..PER_TENSOR).map(|_| rng.gen_range(0..g.len())).collect()
            };
            for i in picks {
                net.nudge_param(name, i, H);
                let up = net.forward().0;
                net.nudge_param(name, i, -2.0 * H);
                let down = net.forward().0;
                net.nudge_param(name, i, H);
                let numeric = (up - down) / (2.0 * H);
                let e = relative_error(g[i], numeric);
                checked += 1;
                if e > worst {
                    worst = e;
                    worst_at = format!("{name}[{i}] analytic {:.6e} numeric {numeric:.6e}", g[i]);
                }
            }
        }
        for (s, dmap) in dmaps.iter().enumerate() {
            let len = dmap.len();
            for _ in 0..PER_TENSOR {
                let i = rng.gen_range(0..len);
                let nudge = |net: &mut StagePath, d: f64| {
                    net.maps[s].as_slice_mut().expect("standard layout")[i] += d;
                };
                nudge(&mut net, H);
                let up = net.forward().0;
                nudge(&mut net, -2.0 * H);
                let down = net.forward().0;
                nudge(&mut net, H);
                let numeric = (up - down) / (2.0 * H);
                let analytic = dmap.as_slice().expect("standard layout")[i];
                let e = relative_error(analytic, numeric);
                checked += 1;
                if e > worst {
                    worst = e;
                    worst_at = format!("map{s}[{i}] analytic {analytic:.6e} numeric {numeric:.6e}");
                }
            }
        }
    }
    check(worst < 1e-4, || format!("max relative error {worst:.3e} at {worst_at}"))?;
    Ok(format!(
        "{draws} draws ({resampled} resampled near pooling ties), {checked} coordinates, max relative error {worst:.2e} (< 1e-4) at {worst_at}"
    ))
}

// ---------------------------------------------------------------- 3

fn snapshot(model: &mut Model, group: ParamGroup) -> Vec<Vec<u64>> {
    let mut out = Vec::new();
    model.visit_grouped(&mut |g, _, slot| {
        if g == group {
            let t = match slot {
                Slot::Param(p) => &p.value,
                Slot::Buffer(b) => b,
            };
            out.push(t.iter().map(|v| v.to_bits()).collect());
        }
    });
    out
}

fn criterion_3() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.model.c = 8;
    cfg.model.mlp_hidden = 8;
    let data = make_synthetic(4, 2, 64, 3).map_err(|e| e.to_string())?;
    let images: Vec<ImageTensor> = data.samples.iter().map(|s| s.load().unwrap()).collect();
    let labels = data.labels();
    let mut model = Model::new(cfg.model.clone()).map_err(|e| e.to_string())?;
    let mut opt = Sgd::new(0.9, 5e-4);
    let schedule = build_schedule(model.stages(), cfg.model.stage_num).map_err(|e| e.to_string())?;
    let stage_num = cfg.model.stage_num;
    let policy = StepPolicy {
        rates: cfg.train.rates(),
        freeze_backbone: false,
    };
    let heads: Vec<HeadId> = schedule.phases.iter().map(|p| p.head).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // Whole step: totals.
    let mut whole = model.clone();
    let mut whole_opt = opt.clone();
    let report = train_step(&mut whole, &mut whole_opt, &images, &labels, &schedule, policy, &mut rng.clone())
        .map_err(|e| e.to_string())?;
    check(report.forward_passes == stage_num + 1, || format!("{} forward passes", report.forward_passes))?;
    check(report.optimizer_updates == stage_num + 1, || format!("{} optimizer updates", report.optimizer_updates))?;
    let concat = report.phases.last().expect("phases");
    check(concat.head == HeadId::Concat && concat.r == 0 && concat.input_unmodified, || {
        "concat phase did not consume the unmodified image".into()
    })?;
    let depths: Vec<u32> = report.phases.iter().map(|p| p.r).collect();
    check(depths == [3, 2, 1, 0], || format!("phase depths {depths:?}"))?;

    // Phase by phase: which classifiers moved.
    let mut updates_per_head = vec![0usize; heads.len()];
    for (n, phase) in schedule.phases.iter().enumerate() {
        let before: Vec<_> = heads.iter().map(|&h| snapshot(&mut model, ParamGroup::Head(h))).collect();
        let single = PhaseSchedule { phases: vec![*phase] };
        let r = train_step(&mut model, &mut opt, &images, &labels, &single, policy, &mut rng).map_err(|e| e.to_string())?;
        check(r.forward_passes == 1 && r.optimizer_updates == 1, || format!("phase {} accounting", n + 1))?;
        for (j, &h) in heads.iter().enumerate() {
            let changed = snapshot(&mut model, ParamGroup::Head(h)) != before[j];
            if j == n {
                check(changed, || format!("classifier {h} did not update in its own phase"))?;
                updates_per_head[j] += 1;
            } else {
                check(!changed, || format!("classifier {h} changed during phase {} ({})", n + 1, phase.head))?;
            }
        }
    }
    check(updates_per_head.iter().all(|&u| u == 1), || format!("updates per head {updates_per_head:?}"))?;
    Ok(format!(
        "{} forward passes, {} optimizer updates, each classifier updated once and bit-unchanged in other phases, concat input unmodified",
        report.forward_passes, report.optimizer_updates
    ))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let cfg = RunConfig::default();
    let data = make_synthetic(4, 8, 64, 0).map_err(|e| e.to_string())?;
    let mut model = cfg.model.clone();
    model.classes = 4;
    let start = Instant::now();
    let stop = |epoch: usize, r: &rmgpmsi::evalkit::EvalReport| epoch >= 50 && r.acc_mix >= 0.95;
    let result = fit(
        &data,
        &model,
        &cfg.train,
        FitOptions {
            early_stop: Some(&stop),
            ..FitOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let evals: Vec<_> = result.metrics.eval_rows().collect();
    let first = evals.iter().position(|r| r.acc_mix.unwrap_or(0.0) >= 0.95).map(|i| i + 1);
    let best = evals.iter().filter_map(|r| r.acc_mix).fold(0.0, f64::max);
    check(first.is_some(), || format!("best Mix training accuracy {best:.3} after {} epochs", evals.len()))?;
    check(evals.len() >= 50, || "stopped before epoch 50".into())?;
    let (l1, l50) = (evals[0].loss, evals[49].loss);
    check(l50 < l1, || format!("epoch-50 loss {l50:.4} not below epoch-1 loss {l1:.4}"))?;
    check(elapsed < Duration::from_secs(300), || format!("took {elapsed:.1?}"))?;
    Ok(format!(
        "TinyNet c={} StageNum={}: Mix train acc >= 0.95 first at epoch {} (of 200 allowed), loss {l1:.3} -> {l50:.3} at epoch 50, {elapsed:.1?} (< 5 min)",
        model.c,
        model.stage_num,
        first.unwrap_or(0)
    ))
}

// ---------------------------------------------------------------- 5

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn criterion_5() -> Outcome {
    let all = make_synthetic(8, 10, 64, 0).map_err(|e| e.to_string())?;
    let (train, test) = all.split_per_class(5);
    let mut base_acc = Vec::new();
    let mut full_acc = Vec::new();
    for seed in 0..3u64 {
        let mut cfg = RunConfig::default();
        cfg.model.classes = 8;
        cfg.model.init_seed = seed;
        cfg.train.seed = seed;
        cfg.train.epochs = 60;
        for (variant, sink) in [(Toggles::default(), &mut base_acc), (Toggles::ALL, &mut full_acc)] {
            let (m, t) = variant.apply(&cfg.model, &cfg.train).map_err(|e| e.to_string())?;
            let mut r = fit(&train, &m, &t, FitOptions::default()).map_err(|e| e.to_string())?;
            let rep = evaluate(&mut r.model, &test, &t.transform.with_mode(TransformMode::Eval)).map_err(|e| e.to_string())?;
            sink.push(rep.acc_mix);
        }
    }
    let (b, f) = (median(base_acc.clone()), median(full_acc.clone()));
    check(f >= b, || format!("+P&M&R median {f:.3} {full_acc:?} < baseline median {b:.3} {base_acc:?}"))?;
    Ok(format!(
        "K=8, 40/40 split, 60 epochs, seeds 0-2: +P&M&R test Mix median {f:.3} {full_acc:?} >= baseline {b:.3} {base_acc:?}"
    ))
}

// ---------------------------------------------------------------- 6

/// Independent oracle: sums in stage order, then lowest index attaining
/// the maximum.
fn oracle(vectors: &[&Vec<f64>]) -> usize {
    let k = vectors[0].len();
    let sums: Vec<f64> = (0..k).map(|i| vectors.iter().fold(0.0, |acc, v| acc + v[i])).collect();
    let best = sums.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (0..k).find(|&i| sums[i] == best).expect("non-empty")
}

fn random_distribution(rng: &mut ChaCha8Rng, k: usize, dyadic: bool) -> Vec<f64> {
    if dyadic {
        // Multiples of 1/8 summing to one: exact arithmetic, frequent ties.
        let mut counts = vec![0u32; k];
        for _ in 0..8 {
            counts[rng.gen_range(0..k)] += 1;
        }
        counts.into_iter().map(|c| c as f64 / 8.0).collect()
    } else {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut ties_concat, mut ties_mix) = (0, 0);
    for case in 0..100 {
        let k = rng.gen_range(2..=6);
        let stage_num = rng.gen_range(1..=3);
        let dyadic = case % 2 == 0;
        let bundle = PredictionBundle {
            y_hat: (0..stage_num).map(|i| (5 - i, random_distribution(&mut rng, k, dyadic))).collect(),
            y_hat_concat: random_distribution(&mut rng, k, dyadic),
            m_concat: Vec::new(),
        };
        let concat_expected = oracle(&[&bundle.y_hat_concat]);
        let mut all: Vec<&Vec<f64>> = bundle.y_hat.values().collect();
        all.push(&bundle.y_hat_concat);
        let mix_expected = oracle(&all);
        let concat = predict_concat(&bundle);
        let mix = predict_mix(&bundle).map_err(|e| e.to_string())?;
        check(concat == concat_expected, || format!("case {case}: concat {concat} vs {concat_expected}"))?;
        check(mix == mix_expected, || format!("case {case}: mix {mix} vs {mix_expected}"))?;
        let max = bundle.y_hat_concat.iter().cloned().fold(f64::MIN, f64::max);
        if bundle.y_hat_concat.iter().filter(|&&v| v == max).count() > 1 {
            ties_concat += 1;
        }
        let sums: Vec<f64> = (0..k).map(|i| all.iter().fold(0.0, |a, v| a + v[i])).collect();
        let max = sums.iter().cloned().fold(f64::MIN, f64::max);
        if sums.iter().filter(|&&v| v == max).count() > 1 {
            ties_mix += 1;
        }
    }
    check(ties_concat > 0 && ties_mix > 0, || "no tie cases generated".into())?;
    Ok(format!(
        "100 bundles match the brute-force oracle exactly ({ties_concat} concat ties, {ties_mix} mix ties)"
    ))
}

// ---------------------------------------------------------------- 7

fn run_cli(out: &Path, extra: &[&str]) -> Result<(), String> {
    let mut args = vec!["--out", out.to_str().expect("utf-8 path"), "--seed", "7", "--epochs", "3"];
    args.extend_from_slice(&["--set", "msi.c=16", "--set", "msi.mlp_hidden=16", "train"]);
    args.extend_from_slice(extra);
    let output = Command::new(env!("CARGO_BIN_EXE_rmgpmsi"))
        .args(&args)
        .env_remove("RMGPMSI_OUT")
        .output()
        .map_err(|e| e.to_string())?;
    check(output.status.success(), || {
        format!("{args:?} failed: {}", String::from_utf8_lossy(&output.stderr))
    })
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    run_cli(&a, &[])?;
    run_cli(&b, &[])?;
    let read = |p: &Path| std::fs::read(p.join("metrics.csv")).map_err(|e| e.to_string());
    let (ma, mb) = (read(&a)?, read(&b)?);
    check(ma == mb, || "two seed-7 runs produced different metrics CSVs".into())?;
    run_cli(&c, &["--stop-after", "1"])?;
    let partial = String::from_utf8(read(&c)?).map_err(|e| e.to_string())?;
    check(partial.lines().count() == 1 + 5, || "partial run did not stop after one epoch".into())?;
    let ckpt = c.join("checkpoint.bin");
    run_cli(&c, &["--resume", ckpt.to_str().expect("utf-8 path")])?;
    let resumed = read(&c)?;
    check(resumed == ma, || "resumed run differs from the straight-through run".into())?;
    let ckpt_a = std::fs::read(a.join("checkpoint.bin")).map_err(|e| e.to_string())?;
    let ckpt_c = std::fs::read(&ckpt).map_err(|e| e.to_string())?;
    check(ckpt_a == ckpt_c, || "final checkpoints differ".into())?;
    Ok(format!(
        "two `train --seed 7` runs: identical metrics CSVs ({} bytes); 1 epoch + resume == 3 epochs straight (CSV and checkpoint bytes)",
        ma.len()
    ))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.model.c = 16;
    cfg.model.mlp_hidden = 16;
    cfg.train.epochs = 3;
    let data = make_synthetic(4, 8, 64, 8).map_err(|e| e.to_string())?;
    let mut result = fit(&data, &cfg.model, &cfg.train, FitOptions::default()).map_err(|e| e.to_string())?;
    let spec = cfg.train.transform.with_mode(TransformMode::Eval);
    let specs = [CorruptionSpec::jitter(0.0, 11), CorruptionSpec::noise(0.0, 0.0, 11)];
    let report = robustness_eval(&mut result.model, &data, &spec, &specs).map_err(|e| e.to_string())?;
    check(report.rows.len() == 1 + specs.len(), || format!("{} rows", report.rows.len()))?;
    let clean = &report.rows[0];
    check(clean.delta_concat == 0.0 && clean.delta_mix == 0.0, || "clean delta is not zero".into())?;
    for row in &report.rows[1..] {
        check(row.report == clean.report, || format!("{} differs from clean", row.label))?;
        check(row.delta_concat == 0.0 && row.delta_mix == 0.0, || format!("{} delta not zero", row.label))?;
    }
    let direct = evaluate(&mut result.model, &data, &spec).map_err(|e| e.to_string())?;
    check(direct == clean.report, || "clean row differs from evaluate".into())?;
    let table = report.to_table();
    check(table.lines().count() == 2 + report.rows.len(), || "table row count".into())?;
    check(table.lines().skip(2).all(|l| l.trim_end().ends_with("+0.00     +0.00")), || {
        format!("table deltas not rendered as zero:\n{table}")
    })?;
    let empty = robustness_eval(&mut result.model, &data, &spec, &[]).map_err(|e| e.to_string())?;
    check(empty.rows.len() == 1, || "empty spec list produced extra rows".into())?;
    Ok(format!(
        "zero jitter and zero noise reproduce clean results exactly (acc_mix {:.3}); {} table rows with zero deltas",
        clean.report.acc_mix,
        report.rows.len()
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("RMG invariant suite", criterion_1),
        ("gradient oracle", criterion_2),
        ("phase accounting", criterion_3),
        ("overfit", criterion_4),
        ("ablation direction", criterion_5),
        ("concat/mix oracle", criterion_6),
        ("reproducibility", criterion_7),
        ("robustness harness", criterion_8),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("criterion {}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| id.ends_with(f.as_str()) || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {id} ({name}): {detail} [{:.1?}]", start.elapsed()),
            Err(detail) => {
                failures += 1;
                println!("FAIL {id} ({name}): {detail} [{:.1?}]", start.elapsed());
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
