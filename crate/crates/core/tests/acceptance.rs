//! Acceptance suite: one PASS/FAIL line per criterion. Set `ACCEPT_ONLY=3,7`
//! to run a subset.

use std::rc::Rc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use discourse_rater::cli::cli_run;
use discourse_rater::corpus::{build_vocab, encode_corpus, synthetic_corpus, EncodeOptions, EncodedEssay, SynthConfig};
use discourse_rater::ensemble::{
    assign_folds, bag_predict, bow_features, fold_train, gbm_predict, gbm_train, stack_train, BagSpace, GbmConfig,
    SparseVec, StackConfig, StackRow,
};
use discourse_rater::eval::{log_loss, predict_many, Averaging, PredictionRecord};
use discourse_rater::model::{
    classification_logits, disentangled_scores, emd_mlm_logits, encoder_forward, pretraining_pair, relative_bucket,
    rtd_pretrain_step, EmbedSource, ForwardOptions, ModelConfig, ModelParams, RtdOptions,
};
use discourse_rater::tensor::{finite_diff_check, GradCheckOptions, Gradients, ParamStore, PrecisionMode, Tape, Tensor, Var};
use discourse_rater::training::{
    accumulated_gradients, checkpointed_backward, estimate_memory, pretrain, token_cross_entropy, Accounting,
    PretrainConfig, PretrainMode, StepOptions, TrainConfig, Trainer,
};
use discourse_rater::{Exec, Result};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn corpus(num_essays: usize, twins: usize, seed: u64, max_len: usize, markers: bool) -> (Vec<EncodedEssay>, usize) {
    let essays = synthetic_corpus(&SynthConfig {
        num_essays,
        twins,
        seed,
        ..SynthConfig::default()
    });
    let vocab = build_vocab(&essays, 300, false).unwrap();
    let opts = EncodeOptions {
        max_len,
        insert_markers: markers,
        ..EncodeOptions::default()
    };
    (encode_corpus(&essays, &vocab, &opts, Exec::Parallel).unwrap(), vocab.len())
}

fn max_abs_diff(a: &Gradients, b: &Gradients) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, va) in a.params() {
        let vb = b.param(*k).expect("same parameter set");
        for (x, y) in va.iter().zip(vb) {
            worst = worst.max((x - y).abs());
        }
    }
    assert_eq!(a.params().count(), b.params().count());
    worst
}

// 1 ------------------------------------------------------------------------

fn op_store(seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new(0);
    s.add("a", Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng));
    s.add("b", Tensor::uniform(&[4, 3], -2.0, 2.0, &mut rng));
    s.add("c", Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng));
    s.add("gain", Tensor::uniform(&[4], 0.5, 1.5, &mut rng));
    s.add("bias", Tensor::uniform(&[4], -0.5, 0.5, &mut rng));
    s.add("emb", Tensor::uniform(&[5, 4], -2.0, 2.0, &mut rng));
    s
}

fn every_op(tape: &mut Tape, s: &ParamStore) -> Result<Var> {
    let (a, b, c) = (tape.param(s, 0), tape.param(s, 1), tape.param(s, 2));
    let (gain, bias, emb) = (tape.param(s, 3), tape.param(s, 4), tape.param(s, 5));
    let ab = tape.matmul(a, b)?;
    let nt = tape.matmul_nt(a, c)?;
    let sum = tape.add(ab, nt)?;
    let diff = tape.sub(a, c)?;
    let prod = tape.mul(diff, c)?;
    let row = tape.add_row(prod, bias)?;
    let ln = tape.layer_norm(row, Some((gain, bias)), 1e-5)?;
    let g = tape.gelu(ln);
    let d = tape.dropout(g, 0.25)?;
    let left = tape.slice_cols(d, 1, 2)?;
    let top = tape.slice_rows(sum, 0, 3)?;
    let cat = tape.concat_cols(&[left, top])?;
    let sm = tape.softmax_rows(cat);
    let ls = tape.log_softmax_rows(cat);
    let e = tape.embedding(emb, &[4, 0, 4])?;
    let idx: Rc<[usize]> = vec![0, 5, 7, 11, 2, 2].into();
    let gathered = tape.gather(e, idx, &[2, 3])?;
    let r = tape.relu(gathered);
    let shifted = tape.scale(r, 0.5);
    let rs = tape.slice_rows(sm, 0, 2)?;
    let rs = tape.slice_cols(rs, 0, 3)?;
    let mixed = tape.add(rs, shifted)?;
    let cl = tape.clamp_min(mixed, 0.05);
    let rn = tape.row_normalize(cl);
    let ce = tape.cross_entropy_sum(ls, &[Some(1), None, Some(4)])?;
    let logit = tape.slice_cols(ab, 0, 1)?;
    let bce = tape.bce_with_logits_sum(logit, &[1.0, 0.0, 1.0])?;
    let logs = tape.ln(rn)?;
    let prod = tape.mul(rn, logs)?;
    let t1 = tape.sum(prod);
    let t2 = tape.add(ce, bce)?;
    let total = tape.add(t1, t2)?;
    Ok(tape.mean(total))
}

fn full_model_case(seed: u64) -> (ModelParams, Vec<usize>, Vec<Option<usize>>) {
    let m = ModelParams::new(
        ModelConfig {
            num_layers: 2,
            hidden_size: 32,
            num_heads: 2,
            ffn_size: 64,
            relative_window: 4,
            vocab_size: 16,
            max_len: 16,
            init_std: 0.2,
            seed,
            ..ModelConfig::default()
        },
        0,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let n = rng.random_range(3..=6);
    let tokens = (0..n).map(|_| rng.random_range(0..16)).collect();
    let labels = (0..n)
        .map(|_| if rng.random_bool(0.8) { Some(rng.random_range(0..3)) } else { None })
        .collect();
    (m, tokens, labels)
}

fn model_loss(m: &ModelParams, tokens: &[usize], labels: &[Option<usize>], mlm: &[Option<usize>], seed: u64) -> (f64, Gradients) {
    let mut tape = Tape::new().with_seed(seed).with_exec(Exec::Sequential);
    let h = encoder_forward(&mut tape, m, tokens, EmbedSource::Own, ForwardOptions::train()).unwrap();
    let z = classification_logits(&mut tape, m, h, true).unwrap();
    let cls = token_cross_entropy(&mut tape, z, labels).unwrap().expect("some labels");
    let ml = emd_mlm_logits(&mut tape, m, h).unwrap();
    let ml = tape.cross_entropy_sum(ml, mlm).unwrap();
    let loss = tape.add(cls, ml).unwrap();
    let v = tape.scalar(loss);
    (v, tape.backward(loss).unwrap())
}

/// Central differences over every coordinate of tiny tensors and three random
/// unit directions of the rest. Returns (max relative error, probes).
fn check_model(m: &ModelParams, tokens: &[usize], labels: &[Option<usize>], mlm: &[Option<usize>], seed: u64) -> (f64, usize) {
    let (h, floor) = (1e-6, 1e-3);
    let grads = model_loss(m, tokens, labels, mlm, seed).1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1ff);
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for id in 0..m.store.len() {
        let numel = m.store.get(id).numel();
        let g = grads.param(m.store.key(id)).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; numel]);
        let dirs: Vec<Vec<f64>> = if numel <= 4 {
            (0..numel)
                .map(|i| {
                    let mut d = vec![0.0; numel];
                    d[i] = 1.0;
                    d
                })
                .collect()
        } else {
            (0..3)
                .map(|_| {
                    let d: Vec<f64> = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
                    d.into_iter().map(|x| x / n).collect()
                })
                .collect()
        };
        for d in dirs {
            let shifted = |sign: f64| {
                let mut mm = m.clone();
                for (w, di) in mm.store.get_mut(id).data_mut().iter_mut().zip(&d) {
                    *w += sign * h * di;
                }
                model_loss(&mm, tokens, labels, mlm, seed).0
            };
            let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
            let analytic: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
            probes += 1;
        }
    }
    (worst, probes)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let tol = 1e-5;
    let per_seed = Exec::Parallel.map_range(100, |seed| {
        let seed = seed as u64;
        let opts = GradCheckOptions {
            seed,
            exec: Exec::Sequential,
            ..GradCheckOptions::default()
        };
        let ops = finite_diff_check(&op_store(seed), every_op, &opts).unwrap();
        let (m, tokens, labels) = full_model_case(seed);
        let mlm: Vec<Option<usize>> = tokens.iter().enumerate().map(|(i, &t)| (i % 2 == 0).then_some(t)).collect();
        let (model_err, model_probes) = check_model(&m, &tokens, &labels, &mlm, seed);
        (ops.max_rel_error, model_err, ops.checks + model_probes)
    });
    let worst_op = per_seed.iter().map(|r| r.0).fold(0.0, f64::max);
    let worst_model = per_seed.iter().map(|r| r.1).fold(0.0, f64::max);
    let checks: usize = per_seed.iter().map(|r| r.2).sum();
    let elapsed = start.elapsed();
    outcome(
        worst_op < tol && worst_model < tol && elapsed < Duration::from_secs(60),
        format!(
            "100 seeds, {checks} probes: max rel err ops {worst_op:.2e}, 2-layer d=32 model {worst_model:.2e} (< {tol:.0e}); {:.1}s (< 60s)",
            elapsed.as_secs_f64()
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row `r` of `x·W` for row-major `x` (rows×d) and `W` (d×d).
fn project_row(x: &[f64], r: usize, w: &[f64], d: usize) -> Vec<f64> {
    (0..d).map(|c| (0..d).map(|i| x[r * d + i] * w[i * d + c]).sum()).collect()
}

/// Three-term loop oracle, one score matrix per head.
fn three_term_oracle(m: &ModelParams, hidden: &[f64], n: usize, content_only: bool) -> Vec<Vec<f64>> {
    let cfg = &m.config;
    let (d, heads, k) = (cfg.hidden_size, cfg.num_heads, cfg.relative_window);
    let dh = d / heads;
    let ids = &m.ids.layers[0];
    let w = |id| m.store.get(id).data();
    let p = w(ids.rel);
    let qc: Vec<Vec<f64>> = (0..n).map(|i| project_row(hidden, i, w(ids.w_qc), d)).collect();
    let kc: Vec<Vec<f64>> = (0..n).map(|i| project_row(hidden, i, w(ids.w_kc), d)).collect();
    let kr: Vec<Vec<f64>> = (0..2 * k).map(|r| project_row(p, r, w(ids.w_kr), d)).collect();
    let qr: Vec<Vec<f64>> = (0..2 * k).map(|r| project_row(p, r, w(ids.w_qr), d)).collect();
    let delta = |i: usize, j: usize| ((i as i64 - j as i64).clamp(-(k as i64), k as i64 - 1) + k as i64) as usize;
    (0..heads)
        .map(|h| {
            let s = h * dh..(h + 1) * dh;
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    let c2c = dot(&qc[i][s.clone()], &kc[j][s.clone()]);
                    let c2p = dot(&qc[i][s.clone()], &kr[delta(j, i)][s.clone()]);
                    let p2c = dot(&kc[j][s.clone()], &qr[delta(i, j)][s.clone()]);
                    a[i * n + j] = if content_only { c2c } else { c2c + c2p + p2c };
                }
            }
            a
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut worst_content: f64 = 0.0;
    for case in 0..20u64 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let d = heads * rng.random_range(1..=16 / heads);
        let k = rng.random_range(1..=4);
        let n = rng.random_range(1..=8);
        let mut m = ModelParams::new(
            ModelConfig {
                num_layers: 1,
                hidden_size: d,
                num_heads: heads,
                ffn_size: 4,
                relative_window: k,
                vocab_size: 8,
                max_len: 8,
                init_std: 0.5,
                seed: case,
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap();
        let hidden: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ht = Tensor::new(vec![n, d], hidden.clone()).unwrap();
        let got = disentangled_scores(&m, 0, &ht).unwrap();
        for (g, o) in got.iter().zip(three_term_oracle(&m, &hidden, n, false)) {
            for (a, b) in g.data().iter().zip(&o) {
                worst = worst.max((a - b).abs());
            }
        }
        m.zero_where("attn.w_qr");
        m.zero_where("attn.w_kr");
        let got = disentangled_scores(&m, 0, &ht).unwrap();
        for (g, o) in got.iter().zip(three_term_oracle(&m, &hidden, n, true)) {
            for (a, b) in g.data().iter().zip(&o) {
                worst_content = worst_content.max((a - b).abs());
            }
        }
    }
    // The implementation's bucket helper must agree with the oracle's clamp.
    let bucket_ok = relative_bucket(0, 7, 4) == 0 && relative_bucket(7, 0, 4) == 7 && relative_bucket(3, 3, 4) == 4;
    outcome(
        worst < 1e-10 && worst_content < 1e-10 && bucket_ok,
        format!("20 configs: max |A - oracle| {worst:.2e}; position paths zeroed vs pure c2c {worst_content:.2e} (< 1e-10)"),
    )
}

// 3 ------------------------------------------------------------------------

fn no_dropout(cfg: ModelConfig) -> ModelConfig {
    ModelConfig {
        hidden_dropout: 0.0,
        dropout_rates: vec![0.0],
        ..cfg
    }
}

fn small_model(vocab: usize, layers: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden_size: 16,
        num_heads: 2,
        ffn_size: 32,
        relative_window: 4,
        vocab_size: vocab,
        max_len: 48,
        init_std: 0.1,
        seed,
        ..ModelConfig::default()
    }
}

fn criterion_3() -> Outcome {
    let (data, v) = corpus(8, 0, 3, 48, true);
    let m = ModelParams::new(no_dropout(small_model(v, 2, 3)), 0).unwrap();
    let opts = StepOptions::default();
    let big = accumulated_gradients(&m, &data, data.len(), 9, &opts).unwrap();
    let mut parts = Vec::new();
    let mut worst: f64 = 0.0;
    for steps in [1usize, 2, 4, 8] {
        let acc = accumulated_gradients(&m, &data, data.len() / steps, 9, &opts).unwrap();
        let diff = max_abs_diff(&acc.grads, &big.grads);
        worst = worst.max(diff);
        parts.push(format!("{steps}:{diff:.1e}"));
    }
    outcome(
        worst < 1e-10,
        format!("accumulation steps {{{}}} vs big batch, max abs diff {worst:.2e} (< 1e-10)", parts.join(", ")),
    )
}

// 4 ------------------------------------------------------------------------

fn criterion_4() -> Outcome {
    let (data, v) = corpus(3, 0, 4, 48, true);
    let layers = 4;
    let m = ModelParams::new(small_model(v, layers, 4), 0).unwrap();
    let opts = StepOptions::default();
    let base = accumulated_gradients(&m, &data, data.len(), 5, &opts).unwrap();
    let base_bytes = base.memory.stored.accounted();
    let mut ok = true;
    let mut parts = Vec::new();
    for seg in [1, 2, layers] {
        let ck = checkpointed_backward(&m, &data, seg, 5, &opts).unwrap();
        let bitwise = ck.grads.param_bits() == base.grads.param_bits();
        let bytes = ck.memory.stored.accounted();
        ok &= bitwise && bytes < base_bytes;
        parts.push(format!("seg {seg}: bitwise={bitwise} stored {bytes}"));
    }
    let half = accumulated_gradients(
        &m,
        &data,
        data.len(),
        5,
        &StepOptions {
            precision: PrecisionMode::Half16Activations,
            ..opts
        },
    )
    .unwrap();
    let half_bytes = half.memory.stored.accounted();
    ok &= 2 * half_bytes == base_bytes;
    outcome(
        ok,
        format!(
            "baseline stored {base_bytes} B; {}; Half16 stored {half_bytes} B (exactly half: {})",
            parts.join("; "),
            2 * half_bytes == base_bytes
        ),
    )
}

// 5 ------------------------------------------------------------------------

fn overfit(markers: bool, budget: Option<usize>) -> (f64, usize) {
    let (data, v) = corpus(20, 4, 5, 64, markers);
    let model = ModelParams::new(
        no_dropout(ModelConfig {
            num_layers: 2,
            hidden_size: 32,
            num_heads: 2,
            ffn_size: 64,
            relative_window: 8,
            vocab_size: v,
            max_len: 64,
            seed: 5,
            ..ModelConfig::default()
        }),
        0,
    )
    .unwrap();
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        micro_batch_size: 4,
        epochs: 1,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(model, cfg, Exec::Parallel).unwrap();
    let max_epochs = budget.unwrap_or(300);
    let mut loss = f64::INFINITY;
    for e in 1..=max_epochs {
        t.train_epoch(&data, &mut |_| {}).unwrap();
        loss = t.eval_loss(&data).unwrap().unwrap();
        if budget.is_none() && loss < 0.05 {
            return (loss, e);
        }
    }
    (loss, max_epochs)
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let (with, epochs) = overfit(true, None);
    let elapsed = start.elapsed();
    let (without, _) = overfit(false, Some(epochs));
    outcome(
        with < 0.05 && epochs <= 300 && elapsed < Duration::from_secs(120) && without > with,
        format!(
            "with markers: token log-loss {with:.4} after {epochs} epochs in {:.1}s (< 0.05, <= 300, < 120s); \
             without markers at equal budget: {without:.4} (strictly higher)",
            elapsed.as_secs_f64()
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn records_with(base: &[PredictionRecord], probs: impl Fn(usize) -> [f64; 3]) -> Vec<PredictionRecord> {
    base.iter()
        .enumerate()
        .map(|(i, r)| PredictionRecord {
            probs: probs(i),
            ..r.clone()
        })
        .collect()
}

fn criterion_6() -> Outcome {
    let (data, v) = corpus(20, 0, 6, 48, true);
    let folds = assign_folds(&data.iter().map(|e| e.essay_id.clone()).collect::<Vec<_>>(), 5, 6).unwrap();
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        epochs: 15,
        seed: 6,
        ..TrainConfig::default()
    };
    let members = fold_train(&data, &folds, &small_model(v, 2, 6), &cfg, Exec::Parallel).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    // Eval sets: the training corpus and three fresh corpora over the same vocabulary.
    let vocab = build_vocab(
        &synthetic_corpus(&SynthConfig {
            num_essays: 20,
            seed: 6,
            ..SynthConfig::default()
        }),
        300,
        false,
    )
    .unwrap();
    let mut sets = vec![data.clone()];
    for s in 100..103 {
        let essays = synthetic_corpus(&SynthConfig {
            num_essays: 10,
            seed: s,
            ..SynthConfig::default()
        });
        let opts = EncodeOptions {
            max_len: 48,
            ..EncodeOptions::default()
        };
        sets.push(encode_corpus(&essays, &vocab, &opts, Exec::Parallel).unwrap());
    }
    for (k, set) in sets.iter().enumerate() {
        let preds: Vec<Vec<PredictionRecord>> = members
            .iter()
            .map(|m| predict_many(&m.model, set, Averaging::Probability, Exec::Parallel).unwrap())
            .collect();
        let mean_member = preds.iter().map(|p| log_loss(p).unwrap()).sum::<f64>() / preds.len() as f64;
        let bagged = log_loss(&bag_predict(&preds, BagSpace::Probability).unwrap()).unwrap();
        ok &= bagged <= mean_member;
        parts.push(format!("set {k}: bag {bagged:.4} <= mean {mean_member:.4}"));
    }
    // High-variance members: each is confidently right on a different fifth
    // of the records and confidently wrong elsewhere.
    let base = predict_many(&members[0].model, &sets[0], Averaging::Probability, Exec::Parallel).unwrap();
    let noisy: Vec<Vec<PredictionRecord>> = (0..5)
        .map(|j| {
            records_with(&base, |i| {
                let y = base[i].truth.unwrap();
                let mut p = [0.05; 3];
                let target = if i % 5 == j { y } else { (y + 1 + (i + j) % 2) % 3 };
                p[target] = 0.9;
                p
            })
        })
        .collect();
    let worst = noisy.iter().map(|p| log_loss(p).unwrap()).fold(f64::NEG_INFINITY, f64::max);
    let bagged = log_loss(&bag_predict(&noisy, BagSpace::Probability).unwrap()).unwrap();
    ok &= worst - bagged >= 0.05;
    outcome(
        ok,
        format!("{}; high-variance set: bag {bagged:.4} vs worst member {worst:.4} (gap >= 0.05)", parts.join("; ")),
    )
}

// 7 ------------------------------------------------------------------------

fn criterion_7() -> Outcome {
    // Members need a few hundred essays before the type/cue rule generalizes.
    let essays = synthetic_corpus(&SynthConfig {
        num_essays: 1750,
        label_noise: 0.1,
        seed: 7,
        ..SynthConfig::default()
    });
    let train_vocab = build_vocab(&essays[..750], 300, false).unwrap();
    let enc = encode_corpus(
        &essays,
        &train_vocab,
        &EncodeOptions {
            max_len: 48,
            ..EncodeOptions::default()
        },
        Exec::Parallel,
    )
    .unwrap();
    // The last 1000 essays form partition 5, seen by no base model.
    let (train, holdout) = enc.split_at(750);
    let ids: Vec<String> = train.iter().map(|e| e.essay_id.clone()).collect();
    let folds = assign_folds(&ids, 5, 7).unwrap();
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        epochs: 20,
        seed: 7,
        ..TrainConfig::default()
    };
    let member_cfg = small_model(train_vocab.len(), 2, 7);
    let members = fold_train(train, &folds, &member_cfg, &cfg, Exec::Parallel).unwrap();

    let bow = |set: &[EncodedEssay]| -> (Vec<SparseVec>, Vec<Option<usize>>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for e in set {
            x.extend(bow_features(e, &train_vocab));
            y.extend(e.element_ratings.iter().copied());
        }
        (x, y)
    };
    let (bx, by) = bow(train);
    let labels: Vec<usize> = by.iter().map(|y| y.unwrap()).collect();
    let gbm = gbm_train(&bx, &labels, train_vocab.len(), &GbmConfig::default(), Exec::Parallel).unwrap();

    let member_preds: Vec<Vec<PredictionRecord>> = members
        .iter()
        .map(|m| predict_many(&m.model, holdout, Averaging::Probability, Exec::Parallel).unwrap())
        .collect();
    let (hx, _) = bow(holdout);
    let bow_probs = gbm_predict(&gbm, &hx).unwrap();
    let rows: Vec<StackRow> = (0..bow_probs.len())
        .map(|i| {
            let mut sources: Vec<[f64; 3]> = member_preds.iter().map(|p| p[i].probs).collect();
            sources.push(bow_probs[i]);
            let mut trained_on: Vec<Vec<usize>> = (0..5).map(|f| (0..5).filter(|&g| g != f).collect()).collect();
            trained_on.push((0..5).collect());
            StackRow {
                element_id: member_preds[0][i].element_id.clone(),
                partition: 5,
                label: member_preds[0][i].truth,
                sources,
                trained_on,
            }
        })
        .collect();
    let member_loss = member_preds.iter().map(|p| log_loss(p).unwrap()).sum::<f64>() / 5.0;
    let labels: Vec<usize> = rows.iter().map(|r| r.label.unwrap()).collect();
    let bow_loss = discourse_rater::eval::log_loss_rows(&bow_probs, &labels).unwrap();
    let model = stack_train(&rows, &StackConfig::default()).unwrap();
    let bow_l1 = model.block_l1(5);
    let member_l1 = (0..5).map(|s| model.block_l1(s)).sum::<f64>() / 5.0;
    // Control: the same BoW triples rotated across rows, so they carry no label information.
    let mut control = rows.clone();
    let half = control.len() / 2;
    for (i, r) in control.iter_mut().enumerate() {
        r.sources[5] = rows[(i + half) % rows.len()].sources[5];
    }
    let cm = stack_train(&control, &StackConfig::default()).unwrap();
    let control_ratio = cm.block_l1(5) / ((0..5).map(|s| cm.block_l1(s)).sum::<f64>() / 5.0);
    outcome(
        bow_l1 < 0.1 * member_l1,
        format!(
            "members mean log-loss {member_loss:.4}, BoW {bow_loss:.4}; meta-model input L1: BoW block {bow_l1:.4} vs mean member block {member_l1:.4} (ratio {:.3} < 0.10; label-free BoW control ratio {control_ratio:.3})",
            bow_l1 / member_l1
        ),
    )
}

// 8 ------------------------------------------------------------------------

fn criterion_8() -> Outcome {
    // Gradient audit on the shared table.
    let small = synthetic_corpus(&SynthConfig {
        num_essays: 4,
        seed: 8,
        ..SynthConfig::default()
    });
    let small_vocab = build_vocab(&small, 300, true).unwrap();
    let v = small_vocab.len();
    let mask = small_vocab.mask_id().unwrap();
    let data = encode_corpus(
        &small,
        &small_vocab,
        &EncodeOptions {
            max_len: 40,
            ..EncodeOptions::default()
        },
        Exec::Parallel,
    )
    .unwrap();
    let (g, d) = pretraining_pair(&ModelConfig {
        vocab_size: v,
        max_len: 40,
        ..small_model(v, 2, 8)
    })
    .unwrap();
    let step = rtd_pretrain_step(
        &data,
        &g,
        &d,
        mask,
        &RtdOptions {
            mask_rate: 0.3,
            mlm_weight: 0.0,
            rtd_weight: 1.0,
            seed: 8,
            ..RtdOptions::default()
        },
    )
    .unwrap();
    let shared = step.grads.param(g.store.key(g.ids.embed));
    let zero = shared.is_none_or(|s| s.iter().all(|&x| x == 0.0));
    let delta_moves = step
        .grads
        .param(d.store.key(d.ids.embed))
        .is_some_and(|s| s.iter().any(|&x| x != 0.0));

    // Toy pretraining, judged on held-out essays.
    let start = Instant::now();
    let essays = synthetic_corpus(&SynthConfig {
        num_essays: 150,
        min_words: 8,
        max_words: 14,
        seed: 88,
        ..SynthConfig::default()
    });
    let vocab = build_vocab(&essays, 300, true).unwrap();
    let opts = EncodeOptions {
        max_len: 80,
        ..EncodeOptions::default()
    };
    let enc = encode_corpus(&essays, &vocab, &opts, Exec::Parallel).unwrap();
    let (train, held) = enc.split_at(120);
    let mask_rate = 0.5;
    let cfg = PretrainConfig {
        mode: PretrainMode::Rtd,
        epochs: 120,
        batch_size: 4,
        learning_rate: 3e-3,
        mask_rate,
        rtd_weight: 1.0,
        seed: 8,
    };
    let model_cfg = ModelConfig {
        hidden_size: 32,
        ffn_size: 64,
        relative_window: 8,
        init_std: 0.02,
        max_len: 80,
        ..small_model(vocab.len(), 2, 8)
    };
    let trained = pretrain(train, &model_cfg, &cfg, vocab.mask_id().unwrap(), Exec::Parallel, &mut |_| {}).unwrap();
    let stats = trained
        .evaluate(held, vocab.mask_id().unwrap(), mask_rate, 999, Exec::Parallel)
        .unwrap();
    let elapsed = start.elapsed();
    let acc = stats.accuracy();
    outcome(
        zero && delta_moves && acc > 0.7 && acc > stats.majority_rate() && elapsed < Duration::from_secs(300),
        format!(
            "RTD-only backward: generator table grad all zero={zero}, delta grad nonzero={delta_moves}; \
             held-out detection accuracy {acc:.4} (> 0.7; majority-class rate {:.4}, mask rate {mask_rate}) in {:.1}s (< 300s)",
            stats.majority_rate(),
            elapsed.as_secs_f64()
        ),
    )
}

// 9 ------------------------------------------------------------------------

fn criterion_9() -> Outcome {
    let e = estimate_memory(1_000_000_000, Accounting::Fp32);
    let gb = 1_000_000_000u128;
    let exact = e.weights == 4 * gb && e.gradients == 4 * gb && e.moments == 8 * gb && e.total() == 16 * gb;
    let text = e.to_string();
    let printed = text.contains("weights:   4 GB") && text.contains("moments:   8 GB") && text.contains("total:     16 GB");
    let code = cli_run(["discourse-rater", "memest", "--params", "1000000000"]);
    outcome(
        exact && printed && code == 0,
        format!(
            "1e9 params -> weights {} / gradients {} / moments {} / total {} bytes; memest exit {code}",
            e.weights,
            e.gradients,
            e.moments,
            e.total()
        ),
    )
}

// 10 -----------------------------------------------------------------------

// The pinned golden value is ln 2 written out, as the criterion states it.
#[allow(clippy::approx_constant)]
fn criterion_10() -> Outcome {
    let rec = |p: [f64; 3], y: usize| PredictionRecord {
        essay_id: "e".into(),
        element_id: format!("x{y}"),
        probs: p,
        truth: Some(y),
        missing_tokens: false,
    };
    let third = 1.0 / 3.0;
    let uniform = log_loss(&[rec([third; 3], 0), rec([third; 3], 1), rec([third; 3], 2)]).unwrap();
    let perfect = log_loss(&[rec([1.0, 0.0, 0.0], 0), rec([0.0, 0.0, 1.0], 2)]).unwrap();
    let half = log_loss(&[rec([0.5, 0.25, 0.25], 0)]).unwrap();
    let ok = (uniform - 3f64.ln()).abs() < 1e-12 && perfect.abs() < 1e-12 && (half - 0.6931471805599453).abs() < 1e-12;
    outcome(
        ok,
        format!("uniform {uniform:.16} (ln 3 ± 1e-12), perfect {perfect:.1e}, single-record {half:.16} (0.6931471805599453 ± 1e-12)"),
    )
}

// 11 -----------------------------------------------------------------------

fn pipeline(dir: &std::path::Path) -> (Vec<u8>, Vec<u8>) {
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    let run = |args: &[&str]| {
        let mut argv = vec!["discourse-rater".to_string(), "--seed".into(), "11".into()];
        argv.extend(args.iter().map(|s| s.to_string()));
        assert_eq!(cli_run(argv), 0, "{args:?}");
    };
    run(&["synth", "--out", &p("c.jsonl"), "--essays", "8"]);
    run(&["preprocess", "--corpus", &p("c.jsonl"), "--out", &p("data"), "--max-len", "48"]);
    run(&[
        "train", "--data", &p("data"), "--out", &p("m.ckpt"), "--epochs", "3", "--hidden", "16", "--ffn", "32",
        "--accum-steps", "2", "--micro-batch", "2", "--checkpoint-activations",
    ]);
    run(&["predict", "--model", &p("m.ckpt"), "--data", &p("data"), "--out", &p("p.csv")]);
    (
        std::fs::read(dir.join("p.csv")).unwrap(),
        std::fs::read(dir.join("m.ckpt")).unwrap(),
    )
}

fn criterion_11() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (pa, ca) = pipeline(a.path());
    let (pb, cb) = pipeline(b.path());
    outcome(
        pa == pb && ca == cb,
        format!(
            "two seeded runs: prediction CSV identical={} ({} B), checkpoint identical={} ({} B)",
            pa == pb,
            pa.len(),
            ca == cb,
            ca.len()
        ),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [Criterion; 11] = [
        (1, "gradient correctness", criterion_1),
        (2, "disentangled attention oracle", criterion_2),
        (3, "accumulation equivalence", criterion_3),
        (4, "checkpointing exactness", criterion_4),
        (5, "overfit with and without markers", criterion_5),
        (6, "bagging property", criterion_6),
        (7, "stacking ignores BoW", criterion_7),
        (8, "GDES audit and RTD pretraining", criterion_8),
        (9, "memory model", criterion_9),
        (10, "metric golden values", criterion_10),
        (11, "determinism", criterion_11),
    ];
    let mut failed = Vec::new();
    let mut ran = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let r = f();
        println!("{} criterion {n} ({name}): {}", if r.pass { "PASS" } else { "FAIL" }, r.detail);
        ran += 1;
        if !r.pass {
            failed.push(n);
        }
    }
    println!("{}/{ran} criteria passed; failing: {failed:?}", ran - failed.len());
    // Failures are reported above either way; ACCEPT_STRICT turns them into a nonzero exit.
    if !failed.is_empty() && std::env::var_os("ACCEPT_STRICT").is_some() {
        std::process::exit(1);
    }
}
