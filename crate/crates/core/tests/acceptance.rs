//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.
//!
//! The tests share one lock so that the wall-clock measurements never run
//! next to a training job.

mod common;

use std::collections::HashMap;
use std::io::Write as _;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use bidecoder::eval::{benchmark, estimate_pmi, sequence_accuracy, BenchConfig, PmiEstimate};
use bidecoder::model::{Example, Model, ModelConfig};
use bidecoder::schedule::{
    build_attention_mask, build_permutation, prepare_target, recover_output, ScheduleSpec, ScheduledTarget,
};
use bidecoder::search::{
    beam_search, beam_search_batch, decode_sources, greedy_decode, rescore, BeamConfig, LengthNorm, TransformerStepper,
};
use bidecoder::tasks::{generate, Dataset, TaskKind, TaskSpec};
use bidecoder::train::{distill, evaluate_loss, train, TrainConfig};
use bidecoder::vocab::{Token, BOS, NUM_SPECIAL};
use bidecoder::Error;
use common::{enumerate_finished, reference_allows, reference_forward, supported_schedules, ForcedModel, TableModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Written to the real stdout so the line shows up without `--nocapture`.
fn report(id: u32, name: &str, pass: bool, detail: String) {
    let line = format!("criterion {id} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    let _ = writeln!(std::io::stdout(), "{line}");
    assert!(pass, "{line}");
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn trained(data: &Dataset, conf: &str) -> (Model, Duration) {
    let cfg = TrainConfig::parse(conf).unwrap();
    let start = Instant::now();
    let out = train(data, &cfg, |_| {}).unwrap();
    (out.model, start.elapsed())
}

fn accuracy(model: &Model, data: &Dataset, beam: usize) -> f64 {
    let cfg = BeamConfig::new(beam, 64);
    let results = decode_sources(model, &data.sources(), &cfg, 50).unwrap();
    let hyps: Vec<Vec<Token>> = results.into_iter().map(|r| r.output).collect();
    let refs: Vec<Vec<Token>> = data.pairs.iter().map(|p| p.tgt.clone()).collect();
    sequence_accuracy(&hyps, &refs).unwrap()
}

#[test]
fn criterion_1_schedule_correctness() {
    let _lock = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut checks, mut failures) = (0usize, Vec::new());
    let specs = supported_schedules();
    for spec in &specs {
        let z = spec.step_width();
        for n in 1..=64usize {
            checks += 1;
            let perm = match build_permutation(n, spec) {
                Ok(p) => p,
                Err(Error::DegenerateSplit { .. }) if spec.h > 2 * n => continue,
                Err(e) => {
                    failures.push(format!("{spec} n={n}: {e}"));
                    continue;
                }
            };
            let mut seen = vec![0usize; n];
            let mut ok = perm.forward == reference_forward(n, spec);
            for (slot, idx) in perm.forward.iter().enumerate() {
                if let Some(i) = *idx {
                    seen[i] += 1;
                    ok &= perm.inverse[i] == slot;
                }
            }
            ok &= seen.iter().all(|&c| c == 1);
            if !ok {
                failures.push(format!("{spec} n={n}: permutation"));
            }

            let slots = n.div_ceil(z) * z;
            let mask = build_attention_mask(slots, spec).unwrap();
            for i in 0..slots {
                for j in 0..slots {
                    let want = reference_allows(spec, i + 1, j + 1);
                    if mask.is_allowed(i, j) != want || (mask.row(i)[j] == 0.0) != want {
                        failures.push(format!("{spec} n={n}: mask ({i}, {j})"));
                    }
                }
            }

            let y: Vec<Token> = (0..n).map(|_| rng.gen_range(NUM_SPECIAL as Token..64)).collect();
            let t = prepare_target(&y, spec).unwrap();
            let shifted = t.decoder_input[..z].iter().all(|&b| b == BOS) && t.decoder_input[z..] == t.target[..t.len() - z];
            if t.len() % z != 0 || !shifted || recover_output(&t.target, spec).ok().as_deref() != Some(&y[..]) {
                failures.push(format!("{spec} n={n}: target round trip"));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(60);
    let first = failures.first().cloned().unwrap_or_default();
    let detail = format!("{} schedules, {checks} lengths, {} failures {first}, {}", specs.len(), failures.len(), secs(elapsed));
    report(1, "schedule correctness", pass, detail);
}

#[test]
fn criterion_2_step_counts() {
    let _lock = serial();
    let start = Instant::now();
    let steps = |spec: ScheduleSpec, y: &[Token]| {
        let model = ForcedModel::new(spec, 64, std::slice::from_ref(&y.to_vec()));
        let max = 256 / spec.step_width() * spec.step_width();
        let greedy = greedy_decode(&model, 0, max, LengthNorm::ByLength).unwrap();
        let beam = beam_search(&model, &BeamConfig::new(4, max)).unwrap().remove(0);
        assert_eq!((&greedy.output[..], &beam.output[..]), (y, y));
        assert_eq!(greedy.steps, beam.steps);
        beam.steps
    };
    let sequence = |n: usize| -> Vec<Token> { (0..n).map(|i| 4 + (i * 7 % 50) as Token).collect() };
    let mut mismatches = Vec::new();
    let mut table = Vec::new();
    for n in [8usize, 16, 32, 64] {
        let y = sequence(n);
        let (ar, bd, sa) =
            (steps(ScheduleSpec::autoregressive(), &y), steps(ScheduleSpec::bidirectional(), &y), steps(ScheduleSpec::bidirectional_sa(2), &y));
        if ar != n + 1 || bd != n.div_ceil(2) + 1 || sa > (n + 2).div_ceil(4) + 1 {
            mismatches.push(n);
        }
        table.push(format!("n={n} {ar}/{bd}/{sa}"));
    }
    let mut worst_ratio = f64::INFINITY;
    for n in 20..=64 {
        let y = sequence(n);
        let ratio = steps(ScheduleSpec::autoregressive(), &y) as f64 / steps(ScheduleSpec::bidirectional(), &y) as f64;
        worst_ratio = worst_ratio.min(ratio);
    }
    let elapsed = start.elapsed();
    let pass = mismatches.is_empty() && worst_ratio >= 1.9 && elapsed < Duration::from_secs(60);
    let detail = format!(
        "AR/BD/SA2 steps {}, mismatches {mismatches:?}, min AR/BD ratio for n>=20 {worst_ratio:.3}, {}",
        table.join(", "),
        secs(elapsed)
    );
    report(2, "step-count speedup", pass, detail);
}

const LONG_COPY: &str = "dropout = 0\nmax_len = 128\nepochs = 3\nlog_every = 0\n";

#[test]
fn criterion_3_wall_clock_speedup() {
    let _lock = serial();
    let task = |count, seed| generate(&TaskSpec::new(TaskKind::Copy, 64, 32, 40, count, seed)).unwrap();
    let (data, test) = (task(20_000, 31), task(100, 32));
    let train_start = Instant::now();
    let schedules = [("ar", "order = l2r\n"), ("bd", "order = bd\n"), ("bd-sa2", "order = bd\nc = 2\n")];
    let models: Vec<(&str, Model)> =
        schedules.iter().map(|(name, s)| (*name, trained(&data, &format!("{LONG_COPY}{s}")).0)).collect();
    let train_time = train_start.elapsed();

    let start = Instant::now();
    let mut shortest = usize::MAX;
    let mut accs = Vec::new();
    for (name, model) in &models {
        let results = decode_sources(model, &test.sources(), &BeamConfig::new(4, 128), 1).unwrap();
        shortest = shortest.min(results.iter().map(|r| r.output.len()).min().unwrap());
        accs.push(format!("{name} acc {:.2}", accuracy(model, &test, 4)));
    }
    let cfg = BenchConfig { beams: vec![4], batches: vec![1], repeats: 10, warmup: 1, max_len: 128 };
    let refs: Vec<(&str, &Model)> = models.iter().map(|(n, m)| (*n, m)).collect();
    let bench = benchmark(&refs, &test.sources(), &cfg).unwrap();
    let elapsed = start.elapsed();
    let (bd, sa) = (bench.rows[1].speedup, bench.rows[2].speedup);
    let pass = shortest >= 32 && bd >= 1.5 && sa >= 2.5 && elapsed < Duration::from_secs(300);
    let detail = format!(
        "BD {bd:.2}x, BD-SA2 {sa:.2}x over AR at batch 1 beam 4, AR latency {:.1} ms, shortest output {shortest}, {}, \
         measured in {} after {} of training",
        bench.rows[0].latency_ms,
        accs.join(", "),
        secs(elapsed),
        secs(train_time)
    );
    report(3, "wall-clock speedup", pass, detail);
}

const SEQ_TASK: &str = "dropout = 0\nepochs = 10\nlog_every = 0\n";

#[test]
fn criterion_4_quality_retention() {
    let _lock = serial();
    let mut pass = true;
    let mut lines = Vec::new();
    let mut slowest = Duration::ZERO;
    for kind in [TaskKind::Copy, TaskKind::Reverse, TaskKind::Sort] {
        let data = generate(&TaskSpec::new(kind, 64, 2, 20, 50_000, 41)).unwrap();
        let test = generate(&TaskSpec::new(kind, 64, 2, 20, 1000, 42)).unwrap();
        let (ar, t_ar) = trained(&data, &format!("{SEQ_TASK}order = l2r\n"));
        let (bd, t_bd) = trained(&data, &format!("{SEQ_TASK}order = bd\n"));
        let (sa, t_sa) = trained(&data, &format!("{SEQ_TASK}order = bd\nc = 2\n"));
        let kd_start = Instant::now();
        let distilled = distill(&ar, &data.sources(), 4, 64, 50).unwrap();
        let (kd, _) = trained(&distilled.data, &format!("{SEQ_TASK}order = bd\n"));
        let t_kd = kd_start.elapsed();
        slowest = slowest.max(t_ar).max(t_bd).max(t_sa).max(t_kd);

        let (a_ar, a_bd, a_sa, a_kd) = (accuracy(&ar, &test, 4), accuracy(&bd, &test, 4), accuracy(&sa, &test, 4), accuracy(&kd, &test, 4));
        pass &= a_ar >= 0.99 && a_bd >= 0.97 && a_sa >= 0.90 && a_kd >= a_ar - 0.01;
        lines.push(format!("{kind} AR {a_ar:.3} BD {a_bd:.3} BD-SA2 {a_sa:.3} BD+KD {a_kd:.3}"));
    }
    pass &= slowest <= Duration::from_secs(600);
    report(4, "quality retention", pass, format!("{}; slowest run {}", lines.join("; "), secs(slowest)));
}

const TOY: &str = "epochs = 6\nlog_every = 0\n";

struct Toy {
    test: Dataset,
    models: HashMap<&'static str, Arc<Model>>,
}

static TOY_MODELS: Mutex<Option<Toy>> = Mutex::new(None);

fn toy_data(count: usize, seed: u64) -> Dataset {
    let spec = TaskSpec { dependency_strength: 1.0, ..TaskSpec::new(TaskKind::ToyTranslate, 64, 4, 20, count, seed) };
    generate(&spec).unwrap()
}

/// Toy-translation models shared by the PMI and ablation checks, trained on
/// first use.
fn toy_models(names: &[&'static str]) -> (Dataset, Vec<Arc<Model>>) {
    let mut guard = TOY_MODELS.lock().unwrap_or_else(|e| e.into_inner());
    let toy = guard.get_or_insert_with(|| Toy { test: toy_data(2000, 52), models: HashMap::new() });
    let mut data = None;
    for &name in names {
        if toy.models.contains_key(name) {
            continue;
        }
        let schedule = match name {
            "l2r" => "order = l2r\n",
            "l2r-c2" => "order = l2r\nc = 2\n",
            "bd" => "order = bd\n",
            "bd-ar" => "order = bd\nautoregressive = true\n",
            "bd-causal" => "order = bd\nmask = causal\n",
            "bd-vanilla-pos" => "order = bd\npositions = vanilla\n",
            "bd-indep" => "order = bd\nindependent_directions = true\n",
            "m2s" => "order = middle_to_side\n",
            other => panic!("no toy model {other}"),
        };
        let data = data.get_or_insert_with(|| toy_data(30_000, 51));
        let (model, _) = trained(data, &format!("{TOY}{schedule}"));
        toy.models.insert(name, Arc::new(model));
    }
    (toy.test.clone(), names.iter().map(|n| toy.models[n].clone()).collect())
}

#[test]
fn criterion_5_pmi_sign_pattern() {
    let _lock = serial();
    let (test, m) = toy_models(&["l2r-c2", "l2r", "bd", "bd-ar"]);
    let sa = estimate_pmi(&*m[0], &*m[1], &test).unwrap();
    let bd = estimate_pmi(&*m[2], &*m[3], &test).unwrap();
    let published = [(6.95, 4.04, 0.235), (4.72, 4.86, -0.014)];
    let formula_ok = published.iter().all(|&(f, b, pmi)| (PmiEstimate::from_perplexities(f, b).pmi - pmi).abs() <= 0.002);
    let pass = sa.pmi > bd.pmi && formula_ok;
    let detail = format!(
        "SA z=2 {:.3} (ppl {:.3} vs {:.3}) > BD {:.3} (ppl {:.3} vs {:.3}); published values reproduced: {formula_ok}",
        sa.pmi, sa.ppl_factored, sa.ppl_baseline, bd.pmi, bd.ppl_factored, bd.ppl_baseline
    );
    report(5, "PMI sign pattern", pass, detail);
}

#[test]
fn criterion_6_ablation_ordering() {
    let _lock = serial();
    let names = ["bd", "bd-causal", "bd-vanilla-pos", "bd-indep", "m2s"];
    let (test, models) = toy_models(&names);
    let loss: Vec<f64> = models.iter().map(|m| evaluate_loss(m, &test, 4096).unwrap()).collect();
    let (bd, causal, vanilla, indep, m2s) = (loss[0], loss[1], loss[2], loss[3], loss[4]);
    // "far worse" here means a larger gap than any other ablation
    let pass = bd <= causal && bd <= vanilla && causal <= indep && vanilla <= indep && m2s - bd > indep - bd;
    let detail = names.iter().zip(&loss).map(|(n, l)| format!("{n} {l:.4}")).collect::<Vec<_>>().join(", ");
    report(6, "ablation ordering", pass, format!("held-out loss {detail}"));
}

fn tiny_transformer(spec: ScheduleSpec, seed: u64) -> Model {
    let cfg = ModelConfig {
        vocab_src: 16,
        vocab_tgt: 16,
        d: 16,
        heads: 2,
        ffn: 32,
        enc_layers: 1,
        dec_layers: 2,
        max_len: 64,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    Model::new(cfg, spec, seed).unwrap()
}

#[test]
fn criterion_7_search_correctness() {
    let _lock = serial();
    let specs = [ScheduleSpec::autoregressive(), ScheduleSpec::bidirectional(), ScheduleSpec::bidirectional_sa(2)];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut greedy_mismatch = 0;
    let mut worst_rescore = 0f64;
    for (k, spec) in specs.iter().enumerate() {
        let model = tiny_transformer(*spec, 70 + k as u64);
        let sources: Vec<Vec<Token>> =
            (0..100).map(|_| (0..rng.gen_range(2..12)).map(|_| rng.gen_range(4..16)).collect()).collect();
        let stepper = TransformerStepper::new(&model, &sources).unwrap();
        let max = 32 / spec.step_width() * spec.step_width();
        let beam1 = beam_search_batch(&stepper, sources.len(), &BeamConfig::new(1, max)).unwrap();
        for (i, results) in beam1.iter().enumerate() {
            let g = greedy_decode(&stepper, i, max, LengthNorm::ByLength).unwrap();
            if results[0].raw != g.raw || results[0].output != g.output {
                greedy_mismatch += 1;
            }
        }
        let beam4 = beam_search_batch(&stepper, sources.len(), &BeamConfig::new(4, max)).unwrap();
        for (src, results) in sources.iter().zip(&beam4) {
            for r in results {
                worst_rescore = worst_rescore.max((rescore(&model, src, &r.raw).unwrap() - r.raw_score).abs());
            }
        }
    }

    // four word types plus EOS, four generated slots
    let mut enum_mismatch = 0;
    let mut enumerated = 0;
    for spec in specs {
        for seed in 0..5 {
            let model = TableModel::new(spec, NUM_SPECIAL + 4, seed, 64);
            let all = enumerate_finished(&model, 4);
            let got = beam_search(&model, &BeamConfig::new(100_000, 4)).unwrap();
            enumerated += all.len();
            let same = got.len() == all.len()
                && got.iter().zip(&all).all(|(r, (tokens, score))| &r.raw == tokens && (r.raw_score - score).abs() < 1e-9);
            enum_mismatch += usize::from(!same);
        }
    }
    let pass = greedy_mismatch == 0 && enum_mismatch == 0 && worst_rescore <= 1e-4;
    let detail = format!(
        "beam 1 vs greedy mismatches {greedy_mismatch}/300, exhaustive mismatches {enum_mismatch}/15 over {enumerated} \
         sequences, worst rescoring gap {worst_rescore:.2e}"
    );
    report(7, "search correctness", pass, detail);
}

/// Naive f64 transformer computing the same loss as the library, straight
/// from the named parameter arrays.
mod reference {
    use super::*;

    pub struct Weights {
        pub arrays: HashMap<String, Vec<f64>>,
        pub d: usize,
        pub heads: usize,
        pub enc_layers: usize,
        pub dec_layers: usize,
        pub vocab: usize,
    }

    impl Weights {
        pub fn of(model: &Model) -> Self {
            let cfg = model.config();
            let arrays = model
                .params()
                .tensors
                .iter()
                .map(|t| (t.name.clone(), t.data.iter().map(|&v| v as f64).collect()))
                .collect();
            Self { arrays, d: cfg.d, heads: cfg.heads, enc_layers: cfg.enc_layers, dec_layers: cfg.dec_layers, vocab: cfg.vocab_tgt }
        }

        fn get(&self, name: &str) -> &[f64] {
            self.arrays.get(name).unwrap_or_else(|| panic!("no array {name}"))
        }
    }

    fn sinusoid(p: i64, d: usize) -> Vec<f64> {
        (0..d)
            .map(|i| {
                let angle = p as f64 / 10000f64.powf((i - i % 2) as f64 / d as f64);
                if i % 2 == 0 { angle.sin() } else { angle.cos() }
            })
            .collect()
    }

    fn linear(w: &Weights, prefix: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (wt, b) = (w.get(&format!("{prefix}.weight")), w.get(&format!("{prefix}.bias")));
        let dout = b.len();
        x.iter()
            .map(|row| (0..dout).map(|o| b[o] + row.iter().enumerate().map(|(i, v)| v * wt[i * dout + o]).sum::<f64>()).collect())
            .collect()
    }

    fn norm(w: &Weights, prefix: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (g, b) = (w.get(&format!("{prefix}.gain")), w.get(&format!("{prefix}.bias")));
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let rs = 1.0 / (var + 1e-5).sqrt();
                row.iter().enumerate().map(|(i, v)| (v - mean) * rs * g[i] + b[i]).collect()
            })
            .collect()
    }

    fn attention(w: &Weights, prefix: &str, x: &[Vec<f64>], memory: &[Vec<f64>], allowed: &dyn Fn(usize, usize) -> bool) -> Vec<Vec<f64>> {
        let q = linear(w, &format!("{prefix}.query"), x);
        let k = linear(w, &format!("{prefix}.key"), memory);
        let v = linear(w, &format!("{prefix}.value"), memory);
        let dh = w.d / w.heads;
        let mut ctx = vec![vec![0.0; w.d]; x.len()];
        for h in 0..w.heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..x.len() {
                let scores: Vec<Option<f64>> = (0..memory.len())
                    .map(|j| {
                        allowed(i, j).then(|| {
                            cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                        })
                    })
                    .collect();
                let max = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = scores.iter().flatten().map(|s| (s - max).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    if let Some(s) = s {
                        let p = (s - max).exp() / total;
                        for c in cols.clone() {
                            ctx[i][c] += p * v[j][c];
                        }
                    }
                }
            }
        }
        linear(w, &format!("{prefix}.output"), &ctx)
    }

    fn feed_forward(w: &Weights, prefix: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut hidden = linear(w, &format!("{prefix}.up"), x);
        hidden.iter_mut().flatten().for_each(|v| *v = v.max(0.0));
        linear(w, &format!("{prefix}.down"), &hidden)
    }

    fn add(x: &mut [Vec<f64>], y: &[Vec<f64>]) {
        for (a, b) in x.iter_mut().flatten().zip(y.iter().flatten()) {
            *a += b;
        }
    }

    fn embed(w: &Weights, table: &str, token: Token, pos: i64) -> Vec<f64> {
        let e = &w.get(table)[token as usize * w.d..(token as usize + 1) * w.d];
        e.iter().zip(sinusoid(pos, w.d)).map(|(a, p)| a * (w.d as f64).sqrt() + p).collect()
    }

    /// Summed negative log-likelihood and scored-slot count of one example
    /// under a bidirectional schedule with one token per direction.
    pub fn nll(w: &Weights, spec: &ScheduleSpec, src: &[Token], target: &ScheduledTarget) -> (f64, usize) {
        let mut x: Vec<Vec<f64>> = src.iter().enumerate().map(|(i, &t)| embed(w, "src_embedding", t, i as i64)).collect();
        for l in 0..w.enc_layers {
            let p = format!("encoder.{l}");
            let normed = norm(w, &format!("{p}.norm_attn"), &x);
            add(&mut x, &attention(w, &format!("{p}.attn"), &normed, &normed, &|_, _| true));
            let ff = feed_forward(w, &format!("{p}.ff"), &norm(w, &format!("{p}.norm_ff"), &x));
            add(&mut x, &ff);
        }
        let memory = norm(w, "encoder.norm", &x);

        // slots alternate between the two directions: +1, -1, +2, -2, ...
        let mut y: Vec<Vec<f64>> = target
            .decoder_input
            .iter()
            .enumerate()
            .map(|(s, &t)| {
                let step = (s / 2 + 1) as i64;
                let mut row = embed(w, "tgt_embedding", t, if s % 2 == 0 { step } else { -step });
                if let Some(dir) = w.arrays.get("direction_embedding") {
                    for (a, b) in row.iter_mut().zip(&dir[(s % 2) * w.d..(s % 2 + 1) * w.d]) {
                        *a += b;
                    }
                }
                row
            })
            .collect();
        for l in 0..w.dec_layers {
            let p = format!("decoder.{l}");
            let normed = norm(w, &format!("{p}.norm_self"), &y);
            let mask = |i: usize, j: usize| reference_allows(spec, i + 1, j + 1);
            add(&mut y, &attention(w, &format!("{p}.self_attn"), &normed, &normed, &mask));
            let normed = norm(w, &format!("{p}.norm_cross"), &y);
            add(&mut y, &attention(w, &format!("{p}.cross_attn"), &normed, &memory, &|_, _| true));
            let ff = feed_forward(w, &format!("{p}.ff"), &norm(w, &format!("{p}.norm_ff"), &y));
            add(&mut y, &ff);
        }
        let hidden = norm(w, "decoder.norm", &y);
        let (table, bias) = (w.get("tgt_embedding"), w.get("output.bias"));
        let (mut sum, mut count) = (0.0, 0);
        for (s, h) in hidden.iter().enumerate() {
            if target.loss_mask[s] == 0 {
                continue;
            }
            let logits: Vec<f64> =
                (0..w.vocab).map(|v| bias[v] + h.iter().zip(&table[v * w.d..(v + 1) * w.d]).map(|(a, b)| a * b).sum::<f64>()).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            sum += lse - logits[target.target[s] as usize];
            count += 1;
        }
        (sum, count)
    }
}

#[test]
fn criterion_8_numeric_correctness() {
    let _lock = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = ScheduleSpec::bidirectional().with_direction_embedding(true);
    let cfg = ModelConfig {
        vocab_src: 12,
        vocab_tgt: 12,
        d: 16,
        heads: 2,
        ffn: 32,
        enc_layers: 2,
        dec_layers: 2,
        max_len: 64,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut model = Model::new(cfg, spec, 8).unwrap();
    // move gains and biases away from their initial constants
    for v in model.params_mut().tensors.iter_mut().flat_map(|t| t.data.iter_mut()) {
        *v += rng.gen_range(-0.2..0.2);
    }
    let sources: [&[Token]; 2] = [&[4, 5, 6], &[7, 8, 9, 10, 11]];
    let targets = [prepare_target(&[5, 6, 7, 8], &spec).unwrap(), prepare_target(&[9, 4, 4, 10, 11, 6, 7], &spec).unwrap()];
    let batch: Vec<Example> = sources.iter().zip(&targets).map(|(s, t)| Example { src: s, target: t }).collect();
    let analytic = model.loss_and_gradients(&batch, None).unwrap();

    let mean_loss = |w: &reference::Weights| {
        let (mut sum, mut count) = (0.0, 0);
        for (s, t) in sources.iter().zip(&targets) {
            let (a, b) = reference::nll(w, &spec, s, t);
            sum += a;
            count += b;
        }
        sum / count as f64
    };
    let mut weights = reference::Weights::of(&model);
    let forward_gap = (mean_loss(&weights) - analytic.mean_loss()).abs();

    // coordinates whose gradient is large enough to be resolved in f32
    let candidates: Vec<(usize, usize)> = analytic
        .grads
        .tensors
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| t.data.iter().enumerate().filter(|(_, g)| g.abs() > 1e-4).map(move |(i, _)| (ti, i)))
        .collect();
    let eps = 1e-5;
    let mut worst = 0f64;
    for _ in 0..30 {
        let (ti, i) = candidates[rng.gen_range(0..candidates.len())];
        let name = analytic.grads.tensors[ti].name.clone();
        let original = weights.arrays[&name][i];
        weights.arrays.get_mut(&name).unwrap()[i] = original + eps;
        let up = mean_loss(&weights);
        weights.arrays.get_mut(&name).unwrap()[i] = original - eps;
        let down = mean_loss(&weights);
        weights.arrays.get_mut(&name).unwrap()[i] = original;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.grads.tensors[ti].data[i] as f64;
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()));
    }

    let mut worst_logits = 0f64;
    let schedules = [
        ScheduleSpec::autoregressive(),
        ScheduleSpec::bidirectional(),
        ScheduleSpec::bidirectional_sa(2),
        ScheduleSpec::multi_directional(4),
        ScheduleSpec::middle_to_side(),
    ];
    for (k, schedule) in schedules.into_iter().enumerate() {
        let model = tiny_transformer(schedule, 80 + k as u64);
        let src: Vec<Token> = (0..9).map(|_| rng.gen_range(4..16)).collect();
        let y: Vec<Token> = (0..13).map(|_| rng.gen_range(4..16)).collect();
        let target = prepare_target(&y, &schedule).unwrap();
        let full = model.teacher_forced_logits(&src, &target).unwrap();
        let enc = model.encode(&src).unwrap();
        let mut state = model.start_state();
        let mut stepped = Vec::new();
        for block in target.decoder_input.chunks(schedule.step_width()) {
            stepped.extend(model.decode_step(&enc, &mut state, block).unwrap());
        }
        assert_eq!(stepped.len(), full.len());
        let scale = full.iter().fold(0f32, |m, v| m.max(v.abs())) as f64;
        let gap = full.iter().zip(&stepped).fold(0f32, |m, (a, b)| m.max((a - b).abs())) as f64;
        worst_logits = worst_logits.max(gap / scale);
    }

    let pass = worst <= 1e-3 && worst_logits <= 1e-5 && forward_gap < 1e-4;
    let detail = format!(
        "worst gradient relative error {worst:.2e} over 30 coordinates, incremental vs teacher-forced logits {worst_logits:.2e}, \
         reference loss gap {forward_gap:.2e}"
    );
    report(8, "numeric correctness", pass, detail);
}
