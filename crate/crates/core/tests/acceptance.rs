//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nluadv_core::advset::{build_candidates, AdjudicationRecord, AdvStore, AnnotationRecord, CandidateRecord, Decision, Status};
use nluadv_core::corpus::{bio_to_spans, build_vocab, repair_bio, spans_to_bio, Annotation, LabelSpace, LabeledExample, RuleSet, SlotSpan, SynthSizes, SyntheticGrammar, Tag, Utterance};
use nluadv_core::experiment::{run_replication, ReplicationConfig, ALP, AUGMENTATION, BASELINE};
use nluadv_core::pairing::{adv_pair_loss, clean_pair_loss, pair_loss, AdvGroup, PairSpec, PairingConfig, SentenceLogits};
use nluadv_core::paraphraser::seq2seq::Seq2SeqNet;
use nluadv_core::paraphraser::{backtranslate, normalize, rule_paraphrase, train_autoencoder, AutoencoderConfig, Beam, FnAdapter, ParaphraseSet, Source};
use nluadv_core::report::mean;
use nluadv_core::tagger::train::{batch_objective, Batch, BatchItem, Role, Target};
use nluadv_core::tagger::{exact_match, predict, Prediction, TaggerConfig, TaggerModel, TaggerNet};
use nluadv_core::tensor::{affine, affine_backward, grad_check, mse, mse_backward, softmax_cross_entropy, BiLstm, Lstm, LstmState, Mode, ParamId, ParamStore, Tensor};
use nluadv_core::Execution;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn runner(cases: u32) -> TestRunner {
    let cfg = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(cfg, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn within(limit: Duration, start: Instant) -> std::result::Result<(), String> {
    let t = start.elapsed();
    if t > limit {
        return Err(format!("took {:.1}s, limit {:.0}s", t.as_secs_f64(), limit.as_secs_f64()));
    }
    Ok(())
}

// ---------------------------------------------------------------- gradients

fn check(name: &str, err: f64, tol: f64, worst: &mut Vec<String>) -> std::result::Result<(), String> {
    worst.push(format!("{name} {err:.1e}"));
    if err > tol {
        return Err(format!("{name}: relative error {err:.2e} > {tol:.0e}"));
    }
    Ok(())
}

fn param_store_with(rng: &mut ChaCha8Rng, shapes: &[&[usize]]) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let ids = shapes.iter().enumerate().map(|(i, sh)| s.add(format!("p{i}"), Tensor::uniform(sh, 1.0, rng))).collect();
    (s, ids)
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut report = Vec::new();
    let eps = 1e-3;

    // affine: y = xW + b, loss = Σ c ⊙ y
    let (mut s, ids) = param_store_with(&mut rng, &[&[3, 4], &[4, 2], &[2]]);
    let coef = Tensor::<f64>::uniform(&[3, 2], 1.0, &mut rng);
    let f = |s: &ParamStore<f64>| {
        let (mut x, mut w, mut b) = (s.get(ids[0]).clone(), s.get(ids[1]).clone(), s.get(ids[2]).clone());
        let y = affine(&x, &w, &b).unwrap();
        let loss = y.data().iter().zip(coef.data()).map(|(a, c)| a * c).sum();
        affine_backward(&mut x, &mut w, &mut b, &coef).unwrap();
        let mut g = s.zero_grads();
        for (id, t) in ids.iter().zip([&x, &w, &b]) {
            g.buf_mut(*id).copy_from_slice(t.grad().unwrap());
        }
        (loss, g)
    };
    check("affine", grad_check(f, &mut s, eps).map_err(|e| e.to_string())?, 1e-4, &mut report)?;

    // softmax cross-entropy
    let (mut s, ids) = param_store_with(&mut rng, &[&[5]]);
    let f = |s: &ParamStore<f64>| {
        let (l, d) = softmax_cross_entropy(s.get(ids[0]).data(), 2).unwrap();
        let mut g = s.zero_grads();
        g.buf_mut(ids[0]).copy_from_slice(&d);
        (l, g)
    };
    check("softmax_cross_entropy", grad_check(f, &mut s, eps).map_err(|e| e.to_string())?, 1e-4, &mut report)?;

    // mse, both arguments
    let (mut s, ids) = param_store_with(&mut rng, &[&[6], &[6]]);
    let f = |s: &ParamStore<f64>| {
        let (a, b) = (s.get(ids[0]).data(), s.get(ids[1]).data());
        let l = mse(a, b).unwrap();
        let (mut da, mut db) = (vec![0.0; 6], vec![0.0; 6]);
        mse_backward(a, b, 1.0, &mut da, &mut db);
        let mut g = s.zero_grads();
        g.buf_mut(ids[0]).copy_from_slice(&da);
        g.buf_mut(ids[1]).copy_from_slice(&db);
        (l, g)
    };
    check("mse", grad_check(f, &mut s, eps).map_err(|e| e.to_string())?, 1e-4, &mut report)?;

    // single LSTM layer with initial state and final-state loss
    let mut s = ParamStore::<f64>::new();
    let lstm = Lstm::new(&mut s, "l", 2, 3, &mut rng);
    let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.61).cos()).collect();
    let init = LstmState {
        h: vec![0.1, -0.2, 0.3],
        c: vec![0.4, 0.0, -0.1],
    };
    let f = |s: &ParamStore<f64>| {
        let cache = lstm.forward(s, &x, 5, Some(&init), true);
        let fin = cache.final_state(3);
        let w: Vec<f64> = (0..15).map(|i| ((i % 4) as f64 - 1.5) / 2.0).collect();
        let loss = cache.outputs().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + fin.c.iter().sum::<f64>();
        let mut g = s.zero_grads();
        let d_final = LstmState { h: vec![0.0; 3], c: vec![1.0; 3] };
        lstm.backward(s, &cache, &x, &w, Some(&d_final), &mut g);
        (loss, g)
    };
    check("lstm", grad_check(f, &mut s, eps).map_err(|e| e.to_string())?, 1e-4, &mut report)?;

    // stacked biLSTM
    let mut s = ParamStore::<f64>::new();
    let enc = BiLstm::new(&mut s, "enc", 3, 3, 2, 0.0, &mut rng);
    let emb = Tensor::<f64>::uniform(&[4, 3], 1.0, &mut rng);
    let w: Vec<f64> = (0..24).map(|i| ((i * 5 % 7) as f64 - 3.0) / 3.0).collect();
    let f = |s: &ParamStore<f64>| {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let (out, cache) = enc.encode(s, &emb, Mode::Eval, &mut r).unwrap();
        let mut g = s.zero_grads();
        enc.backward(s, &cache, &w, &mut g);
        (out.data().iter().zip(&w).map(|(a, b)| a * b).sum(), g)
    };
    check("bilstm", grad_check(f, &mut s, eps).map_err(|e| e.to_string())?, 1e-4, &mut report)?;

    // tagger network: embedding, encoder, intent and slot heads
    let mut s = ParamStore::<f64>::new();
    let cfg = TaggerConfig {
        hidden_size: 3,
        embedding_dim: 2,
        num_layers: 2,
        ..Default::default()
    };
    let net = TaggerNet::build(&mut s, &cfg, 7, 3, 5, &mut rng);
    let ids = [2usize, 5, 3, 6];
    let f = |s: &ParamStore<f64>| {
        let (lg, cache) = net.forward(s, &ids, Mode::Eval, 0).unwrap();
        let d = SentenceLogits {
            intent: (0..lg.intent.len()).map(|i| 0.5 - i as f64 * 0.3).collect(),
            slots: (0..lg.slots.len()).map(|i| ((i * 3 % 5) as f64 - 2.0) / 4.0).collect(),
            num_tags: lg.num_tags,
        };
        let loss = lg.intent.iter().zip(&d.intent).chain(lg.slots.iter().zip(&d.slots)).map(|(a, b)| a * b).sum();
        let mut g = s.zero_grads();
        net.backward(s, &cache, &d, &mut g);
        (loss, g)
    };
    check("tagger_net", grad_check(f, &mut s, eps).map_err(|e| e.to_string())?, 1e-4, &mut report)?;

    // pairing loss with respect to the paired logits (entity mean pooling)
    let (mut s, ids) = param_store_with(&mut rng, &[&[3], &[4 * 3], &[3], &[3 * 3]]);
    let spans_a = vec![SlotSpan::new("x", 1, 2), SlotSpan::new("y", 3, 3)];
    let spans_b = vec![SlotSpan::new("y", 0, 0), SlotSpan::new("x", 1, 2)];
    let pairs = vec![PairSpec::aligned(0, &spans_a, 1, &spans_b)];
    let f = |s: &ParamStore<f64>| {
        let lg = |i: usize, j: usize| SentenceLogits {
            intent: s.get(ids[i]).data().to_vec(),
            slots: s.get(ids[j]).data().to_vec(),
            num_tags: 3,
        };
        let pl = pair_loss(&[lg(0, 1), lg(2, 3)], &pairs, 0.7).unwrap();
        let mut g = s.zero_grads();
        for (k, gl) in pl.grads.iter().enumerate() {
            let gl = gl.as_ref().unwrap();
            g.buf_mut(ids[2 * k]).copy_from_slice(&gl.intent);
            g.buf_mut(ids[2 * k + 1]).copy_from_slice(&gl.slots);
        }
        (pl.value, g)
    };
    check("pair_loss", grad_check(f, &mut s, eps).map_err(|e| e.to_string())?, 1e-4, &mut report)?;

    // autoencoder reconstruction
    let mut s = ParamStore::<f64>::new();
    let ae_cfg = AutoencoderConfig {
        hidden_size: 3,
        embedding_dim: 2,
        ..Default::default()
    };
    let ae = Seq2SeqNet::build(&mut s, &ae_cfg, 8, &mut rng);
    let f = |s: &ParamStore<f64>| {
        let mut g = s.zero_grads();
        let l = ae.reconstruction(s, &[4, 5, 6, 4], &mut g).unwrap();
        (l, g)
    };
    check("seq2seq_reconstruction", grad_check(f, &mut s, eps).map_err(|e| e.to_string())?, 1e-4, &mut report)?;

    // composite objective: task + 0.1-weighted augmentation + clean pairing + ALP
    let mut s = ParamStore::<f64>::new();
    let cfg = TaggerConfig {
        hidden_size: 4,
        embedding_dim: 3,
        num_layers: 2,
        ..Default::default()
    };
    let net = TaggerNet::build(&mut s, &cfg, 8, 2, 5, &mut rng);
    let sp = |l: &str, a, b| SlotSpan::new(l, a, b);
    let item = |ids: Vec<usize>, role: Role, intent: usize, tags: Vec<usize>, weight: f64, spans: Vec<SlotSpan>| BatchItem {
        target: (role != Role::PairOnly).then_some(Target { intent, tags, weight }),
        ids,
        role,
        spans,
        dropout_seed: 0,
    };
    let spans = [vec![sp("x", 1, 2)], vec![sp("x", 1, 1)], vec![sp("y", 0, 0)], vec![sp("x", 2, 2)], vec![sp("x", 1, 2)], vec![]];
    let batch = Batch {
        items: vec![
            item(vec![4, 5, 6], Role::Clean, 0, vec![0, 1, 2], 1.0, spans[0].clone()),
            item(vec![7, 5, 6], Role::Clean, 0, vec![0, 1, 0], 1.0, spans[1].clone()),
            item(vec![4, 6], Role::Clean, 1, vec![3, 0], 1.0, spans[2].clone()),
            item(vec![6, 1, 5], Role::Augmented, 0, vec![0, 0, 1], 0.1, spans[3].clone()),
            item(vec![1, 5, 6, 7], Role::PairOnly, 0, vec![], 1.0, spans[4].clone()),
            item(vec![5, 4], Role::PairOnly, 0, vec![], 1.0, spans[5].clone()),
        ],
        clean_pairs: vec![PairSpec::aligned(0, &spans[0], 1, &spans[1])],
        adv_pairs: nluadv_core::pairing::adversarial_pairs(
            &[AdvGroup {
                original: 0,
                paraphrases: vec![4, 5],
            }],
            &spans,
            true,
        ),
    };
    let pairing = PairingConfig {
        lambda_sf: 0.5,
        lambda_a: 0.3,
        ..Default::default()
    };
    let f = |s: &ParamStore<f64>| {
        let (parts, g) = batch_objective(&net, s, &batch, Some(&pairing), Mode::Eval, Execution::Sequential).unwrap();
        assert!(parts.clean > 0.0 && parts.augmented > 0.0 && parts.clean_pairing > 0.0 && parts.adv_pairing > 0.0);
        (parts.total(), g)
    };
    check("composite", grad_check(f, &mut s, eps).map_err(|e| e.to_string())?, 1e-3, &mut report)?;
    within(Duration::from_secs(60), start)?;
    Ok(report.join(", "))
}

// ------------------------------------------------------------ loss oracles

fn random_spans(rng: &mut ChaCha8Rng, n_tokens: usize, labels: &[&str]) -> Vec<SlotSpan> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < n_tokens {
        if rng.random_bool(0.4) {
            let len = rng.random_range(1..=(n_tokens - t).min(2));
            out.push(SlotSpan::new(labels[rng.random_range(0..labels.len())], t, t + len - 1));
            t += len;
        } else {
            t += 1;
        }
    }
    out
}

fn random_logits(rng: &mut ChaCha8Rng, n_tokens: usize, n_intents: usize, n_tags: usize) -> SentenceLogits<f64> {
    SentenceLogits {
        intent: (0..n_intents).map(|_| rng.random_range(-2.0..2.0)).collect(),
        slots: (0..n_tokens * n_tags).map(|_| rng.random_range(-2.0..2.0)).collect(),
        num_tags: n_tags,
    }
}

fn oracle_mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

fn oracle_entity(l: &SentenceLogits<f64>, s: &SlotSpan) -> Vec<f64> {
    (0..l.num_tags)
        .map(|k| (s.start..=s.end).map(|t| l.slots[t * l.num_tags + k]).sum::<f64>() / s.len() as f64)
        .collect()
}

/// Sum over same-label entities matched by occurrence order.
fn oracle_pair_term(a: &SentenceLogits<f64>, sa: &[SlotSpan], b: &SentenceLogits<f64>, sb: &[SlotSpan]) -> f64 {
    let mut term = oracle_mse(&a.intent, &b.intent);
    let labels: HashSet<&str> = sa.iter().map(|s| s.label.as_str()).collect();
    for label in labels {
        let mut left: Vec<&SlotSpan> = sa.iter().filter(|s| s.label == label).collect();
        let mut right: Vec<&SlotSpan> = sb.iter().filter(|s| s.label == label).collect();
        left.sort_by_key(|s| s.start);
        right.sort_by_key(|s| s.start);
        for (x, y) in left.iter().zip(&right) {
            term += oracle_mse(&oracle_entity(a, x), &oracle_entity(b, y));
        }
    }
    term
}

fn loss_oracles() -> Outcome {
    let start = Instant::now();
    let worst = std::cell::Cell::new(0.0f64);
    let mut runner = runner(200);
    let res = runner.run(&any::<u64>(), |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_tags = 5;

        // clean pairing over a batch of up to 8 sentences
        let n = rng.random_range(1..=8);
        let lens: Vec<usize> = (0..n).map(|_| rng.random_range(1..=5)).collect();
        let anns: Vec<Annotation> = lens
            .iter()
            .map(|&t| Annotation::new(["a", "b"][rng.random_range(0..2)], random_spans(&mut rng, t, &["x", "y"])))
            .collect();
        let logits: Vec<SentenceLogits<f64>> = lens.iter().map(|&t| random_logits(&mut rng, t, 3, n_tags)).collect();
        let cfg = PairingConfig {
            lambda_sf: rng.random_range(0.01..2.0),
            pair_cap: 64,
            ..Default::default()
        };
        let refs: Vec<&Annotation> = anns.iter().collect();
        let got = clean_pair_loss(&logits, &refs, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let key = |a: &Annotation| {
            let mut l: Vec<&str> = a.slots.iter().map(|s| s.label.as_str()).collect();
            l.sort();
            (a.intent.clone(), l.join(","))
        };
        let (mut sum, mut p) = (0.0, 0usize);
        for i in 0..n {
            for j in i + 1..n {
                if key(&anns[i]) == key(&anns[j]) {
                    sum += oracle_pair_term(&logits[i], &anns[i].slots, &logits[j], &anns[j].slots);
                    p += 1;
                }
            }
        }
        let want = if p == 0 { 0.0 } else { cfg.lambda_sf / p as f64 * sum };
        prop_assert_eq!(got.pairs, p);
        prop_assert!((got.value - want).abs() <= 1e-6, "clean {} vs oracle {}", got.value, want);
        worst.set(worst.get().max((got.value - want).abs()));

        // adversarial pairing: up to 3 originals with up to 3 paraphrases each
        let n_orig = rng.random_range(1..=3);
        let mut lens = Vec::new();
        let mut groups = Vec::new();
        for _ in 0..n_orig {
            let original = lens.len();
            lens.push(rng.random_range(1..=5));
            let paraphrases: Vec<usize> = (0..rng.random_range(0..=3))
                .map(|_| {
                    lens.push(rng.random_range(1..=5));
                    lens.len() - 1
                })
                .collect();
            groups.push(AdvGroup { original, paraphrases });
        }
        let spans: Vec<Vec<SlotSpan>> = lens.iter().map(|&t| random_spans(&mut rng, t, &["x", "y"])).collect();
        let logits: Vec<SentenceLogits<f64>> = lens.iter().map(|&t| random_logits(&mut rng, t, 3, n_tags)).collect();
        let cfg = PairingConfig {
            lambda_a: rng.random_range(0.001..1.0),
            include_para_para: rng.random_bool(0.5),
            ..Default::default()
        };
        let got = adv_pair_loss(&logits, &spans, &groups, &cfg).unwrap();
        let (mut sum, mut p) = (0.0, 0usize);
        for g in &groups {
            for &q in &g.paraphrases {
                sum += oracle_pair_term(&logits[g.original], &spans[g.original], &logits[q], &spans[q]);
                p += 1;
            }
            if cfg.include_para_para {
                for (x, &a) in g.paraphrases.iter().enumerate() {
                    for &b in &g.paraphrases[x + 1..] {
                        sum += oracle_pair_term(&logits[a], &spans[a], &logits[b], &spans[b]);
                        p += 1;
                    }
                }
            }
        }
        let want = if p == 0 { 0.0 } else { cfg.lambda_a / p as f64 * sum };
        prop_assert_eq!(got.pairs, p);
        prop_assert!((got.value - want).abs() <= 1e-6, "adv {} vs oracle {}", got.value, want);
        worst.set(worst.get().max((got.value - want).abs()));
        Ok(())
    });
    res.map_err(|e| e.to_string())?;
    within(Duration::from_secs(60), start)?;
    Ok(format!("200 instances, max |diff| {:.1e}", worst.get()))
}

// ----------------------------------------------------------- metric oracle

fn prediction(intent: &str, slots: Vec<SlotSpan>) -> Prediction {
    Prediction {
        intent: intent.into(),
        intent_logits: vec![],
        slot_tags: vec![],
        slot_logits: vec![],
        slots,
    }
}

fn metric_oracle() -> Outcome {
    let mut runner = runner(1000);
    runner
        .run(&any::<u64>(), |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..=30);
            let mut preds = Vec::new();
            let mut golds = Vec::new();
            for _ in 0..n {
                let t = rng.random_range(1..=6);
                let gold = Annotation::new(["a", "b", "c"][rng.random_range(0..3)], random_spans(&mut rng, t, &["x", "y"]));
                let pred = match rng.random_range(0..4) {
                    0 => prediction(&gold.intent, gold.slots.iter().rev().cloned().collect()),
                    1 => prediction(["a", "b", "c"][rng.random_range(0..3)], gold.slots.clone()),
                    _ => prediction(&gold.intent, random_spans(&mut rng, t, &["x", "y"])),
                };
                preds.push(pred);
                golds.push(gold);
            }
            let hits = preds
                .iter()
                .zip(&golds)
                .filter(|(p, g)| {
                    p.intent == g.intent
                        && p.slots.len() == g.slots.len()
                        && p.slots.iter().all(|s| g.slots.contains(s))
                        && g.slots.iter().all(|s| p.slots.contains(s))
                })
                .count();
            let em = exact_match(&preds, &golds).unwrap();
            prop_assert_eq!(em.to_bits(), (hits as f64 / n as f64).to_bits());
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let avg = mean(&[28.4, 34.2, 21.4, 32.8]).ok_or("empty mean")?;
    if format!("{avg:.1}") != "29.2" {
        return Err(format!("average of the baseline row is {avg}"));
    }
    Ok(format!("1000 sets exact; baseline row average {avg:.1}"))
}

// ----------------------------------------------------------- pipeline rules

const WORDS: [&str; 8] = ["set", "alarm", "for", "Seven", "weather", "in", "PARIS", "now"];

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..=4);
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(if rng.random_bool(0.2) { "  " } else { " " })
}

fn lower(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

fn dedupe_rule() -> std::result::Result<(), String> {
    runner(1000)
        .run(&any::<u64>(), |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let original = Utterance::new("o", random_text(&mut rng)).unwrap();
            let train: HashSet<String> = (0..rng.random_range(0..6)).map(|_| normalize(&random_text(&mut rng))).collect();
            let beams: Vec<Beam> = (0..rng.random_range(0..10)).map(|i| Beam::new(random_text(&mut rng), -(i as f64))).collect();
            let k = rng.random_range(1..=8);
            let mut set = ParaphraseSet::build(&original, Source::RuleBased, beams.clone(), k);
            set.dedupe_against(&train);
            let mut seen = HashSet::new();
            let want: Vec<&str> = beams[..k.min(beams.len())]
                .iter()
                .filter(|b| {
                    let key = lower(&b.text);
                    key != lower(&original.text) && !train.contains(&key) && seen.insert(key)
                })
                .map(|b| b.text.as_str())
                .collect();
            let got: Vec<&str> = set.beams.iter().map(|b| b.text.as_str()).collect();
            prop_assert_eq!(got, want);
            Ok(())
        })
        .map_err(|e| format!("dedupe: {e}"))
}

fn tiny_model(seed: u64) -> TaggerModel {
    let words: Vec<String> = WORDS.iter().map(|w| w.to_lowercase()).collect();
    let vocab = build_vocab([words.as_slice()], 1);
    let labels = LabelSpace::new(["a", "b", "c"], ["x"]).unwrap();
    let cfg = TaggerConfig {
        hidden_size: 3,
        embedding_dim: 3,
        num_layers: 1,
        seed,
        ..Default::default()
    };
    TaggerModel::new(cfg, vocab, labels).unwrap()
}

fn flip_filter_rule() -> std::result::Result<(), String> {
    let models: Vec<TaggerModel> = (0..8).map(tiny_model).collect();
    runner(1000)
        .run(&any::<u64>(), |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = &models[rng.random_range(0..models.len())];
            let originals: Vec<LabeledExample> = (0..rng.random_range(1..4))
                .map(|i| LabeledExample::clean(Utterance::new(format!("o{i}"), random_text(&mut rng)).unwrap(), Annotation::new("a", vec![])))
                .collect();
            let sets: Vec<ParaphraseSet> = originals
                .iter()
                .map(|o| ParaphraseSet {
                    original_id: o.utterance.id.clone(),
                    source: Source::RuleBased,
                    beams: (0..rng.random_range(0..4)).map(|_| Beam::new(random_text(&mut rng), 0.0)).collect(),
                })
                .collect();
            let got: Vec<String> = build_candidates(model, &originals, &sets, Execution::Sequential).unwrap().into_iter().map(|c| c.candidate_id).collect();
            let mut want = Vec::new();
            for (o, s) in originals.iter().zip(&sets) {
                let base = predict(model, &o.utterance).unwrap().intent;
                for (b, beam) in s.beams.iter().enumerate() {
                    let u = Utterance::new("p", beam.text.clone()).unwrap();
                    if predict(model, &u).unwrap().intent != base {
                        want.push(format!("{}#rulebased#{b}", o.utterance.id));
                    }
                }
            }
            prop_assert_eq!(got, want);
            Ok(())
        })
        .map_err(|e| format!("flip filter: {e}"))
}

fn k_cap_rule() -> std::result::Result<(), String> {
    let grammar = SyntheticGrammar::builtin();
    let rules: RuleSet = grammar.rules.clone();
    let corpus = nluadv_core::corpus::generate_synthetic(&grammar, 5, SynthSizes { train: 200, dev: 0, test: 0 }).map_err(|e| e.to_string())?;
    runner(1000)
        .run(&any::<u64>(), |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.random_range(1..=6);
            let u = &corpus.train[rng.random_range(0..corpus.train.len())].utterance;
            let set = rule_paraphrase(u, &rules, seed, k);
            prop_assert!(set.beams.len() <= k);
            prop_assert!(set.check(u, k).is_ok());

            let many = rng.random_range(0..12);
            let mut adapter = FnAdapter {
                source: "bt:fake:de".parse().unwrap(),
                f: |r: &nluadv_core::paraphraser::AdapterRequest| Ok((0..many).map(|i| format!("{} v{}", r.text, i % 5)).collect()),
            };
            let out = backtranslate(std::slice::from_ref(u), &mut adapter, k);
            let set = out[0].as_ref().unwrap();
            prop_assert!(set.beams.len() <= k.min(many));
            prop_assert!(set.check(u, k).is_ok());
            Ok(())
        })
        .map_err(|e| format!("k-cap: {e}"))
}

fn bio_rule() -> std::result::Result<(), String> {
    runner(1000)
        .run(&any::<u64>(), |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = rng.random_range(1..=10);
            let mut spans = random_spans(&mut rng, t, &["x", "y", "z"]);
            let ann = Annotation::new("a", spans.clone());
            let tags = spans_to_bio(&ann, t).unwrap();
            spans.sort();
            let mut back = bio_to_spans(&tags);
            back.sort();
            prop_assert_eq!(back, spans);

            let noisy: Vec<Tag> = (0..t)
                .map(|_| match rng.random_range(0..3) {
                    0 => Tag::O,
                    1 => Tag::B(["x", "y"][rng.random_range(0..2)].into()),
                    _ => Tag::I(["x", "y"][rng.random_range(0..2)].into()),
                })
                .collect();
            let fixed = repair_bio(&noisy);
            prop_assert_eq!(repair_bio(&fixed), fixed.clone());
            let again = spans_to_bio(&Annotation::new("a", bio_to_spans(&noisy)), t).unwrap();
            prop_assert_eq!(again, fixed);
            Ok(())
        })
        .map_err(|e| format!("BIO round trip: {e}"))
}

fn status_dag_rule() -> std::result::Result<(), String> {
    let labels = LabelSpace::new(["alarm/set", "alarm/snooze"], ["duration"]).unwrap();
    let cand = |i: usize| {
        let pred = |intent: &str| prediction(intent, vec![]);
        CandidateRecord {
            candidate_id: format!("c{i}"),
            original: LabeledExample::clean(Utterance::new(format!("o{i}"), "set an alarm").unwrap(), Annotation::new("alarm/set", vec![])),
            paraphrase: Utterance::new(format!("p{i}"), "snooze for 5 minutes").unwrap(),
            source: Source::RuleBased,
            original_pred: pred("alarm/set"),
            paraphrase_pred: pred("alarm/snooze"),
            status: Status::Pending,
        }
    };
    let decision = |d: u8| match d {
        0 => Decision::Valid {
            annotation: Annotation::new("alarm/snooze", vec![SlotSpan::new("duration", 2, 3)]),
        },
        1 => Decision::Valid {
            annotation: Annotation::new("alarm/set", vec![]),
        },
        2 => Decision::Meaningless,
        _ => Decision::Ambiguous,
    };
    let users = ["a", "b", "c", "j"];
    let op = (0u8..2, 0usize..3, 0usize..4, 0u8..4);
    runner(1000)
        .run(&prop::collection::vec(op, 0..30), |ops| {
            let mut s = AdvStore::in_memory(labels.clone(), true);
            s.add_candidates((0..3).map(cand).collect()).unwrap();
            for (kind, c, u, d) in ops {
                let before: Vec<Status> = s.candidates().map(|c| c.status).collect();
                let id = format!("c{c}");
                let res = if kind == 0 {
                    s.record_annotation(AnnotationRecord {
                        candidate_id: id,
                        annotator_id: users[u].into(),
                        decision: decision(d),
                        timestamp: 0,
                    })
                } else {
                    s.resolve(AdjudicationRecord {
                        candidate_id: id,
                        adjudicator_id: users[u].into(),
                        decision: decision(d),
                        timestamp: 0,
                    })
                };
                let after: Vec<Status> = s.candidates().map(|c| c.status).collect();
                for (b, a) in before.iter().zip(&after) {
                    if b != a {
                        prop_assert!(res.is_ok());
                        prop_assert!(b.can_move_to(*a), "{:?} -> {:?}", b, a);
                    }
                }
            }
            let finals: HashSet<String> = s.candidates().filter(|c| c.status == Status::Final).map(|c| c.paraphrase.id.clone()).collect();
            for (ex, _) in s.export().unwrap() {
                prop_assert!(finals.contains(&ex.utterance.id));
            }
            Ok(())
        })
        .map_err(|e| format!("status DAG: {e}"))
}

fn pipeline_rules() -> Outcome {
    dedupe_rule()?;
    flip_filter_rule()?;
    k_cap_rule()?;
    bio_rule()?;
    status_dag_rule()?;
    Ok("dedupe, flip filter, k-cap, BIO round trip, status DAG: 1000 cases each".into())
}

// ------------------------------------------------------------- replication

fn replication() -> Outcome {
    let start = Instant::now();
    let r = run_replication(&ReplicationConfig::default(), Execution::default()).map_err(|e| e.to_string())?;
    let row = |name: &str| {
        r.report
            .rows
            .iter()
            .find(|row| row.variant == name)
            .map(|row| (row.clean.accuracy, row.adversarial_average))
            .ok_or(format!("missing row {name}"))
    };
    let (base_clean, base_adv) = row(BASELINE)?;
    let (aug_clean, aug_adv) = row(AUGMENTATION)?;
    let (alp_clean, alp_adv) = row(ALP)?;
    let detail = format!(
        "clean/perturbed baseline {base_clean:.1}/{base_adv:.1}, augmentation {aug_clean:.1}/{aug_adv:.1}, ALP {alp_clean:.1}/{alp_adv:.1} in {:.0}s",
        start.elapsed().as_secs_f64()
    );
    let mut failures = Vec::new();
    if base_clean < 95.0 {
        failures.push("baseline clean < 95");
    }
    if aug_adv - base_adv < 5.0 {
        failures.push("augmentation gain < 5");
    }
    if alp_adv - base_adv < 5.0 {
        failures.push("ALP gain < 5");
    }
    if base_clean - aug_clean > 2.0 {
        failures.push("augmentation clean drop > 2");
    }
    if base_clean - alp_clean > 4.0 {
        failures.push("ALP clean drop > 4");
    }
    within(Duration::from_secs(600), start)?;
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}: {detail}", failures.join("; ")))
    }
}

// ------------------------------------------------------------- autoencoder

const TOY: [&str; 10] = [
    "set an alarm for 7am",
    "what is the weather in paris",
    "cancel my alarm",
    "when is sunset in tokyo",
    "snooze for 5 minutes",
    "will it rain tomorrow",
    "wake me up at noon",
    "sunrise time for oslo",
    "delete all alarms",
    "how hot is it in rome",
];

fn autoencoder_sanity() -> Outcome {
    let corpus: Vec<Utterance> = TOY.iter().enumerate().map(|(i, t)| Utterance::new(format!("t{i}"), *t).unwrap()).collect();
    let cfg = AutoencoderConfig {
        hidden_size: 48,
        embedding_dim: 24,
        epochs: 120,
        batch_size: 5,
        learning_rate: 0.02,
        seed: 1,
        ..Default::default()
    };
    let (m, _) = train_autoencoder(&corpus, &cfg, Execution::default()).map_err(|e| e.to_string())?;
    let exact = corpus.iter().filter(|u| m.greedy_decode(u, 0.0, 0).map(|h| h.tokens == u.tokens).unwrap_or(false)).count();
    let survived = corpus
        .iter()
        .enumerate()
        .filter(|(i, u)| m.perturb_decode(u, 0.3, 5, *i as u64).map(|s| !s.beams.is_empty()).unwrap_or(false))
        .count();
    let detail = format!("σ=0 reconstructs {exact}/10, σ=0.3 k=5 leaves a paraphrase for {survived}/10");
    if exact >= 9 && survived >= 5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------------- determinism

fn determinism() -> Outcome {
    let cfg = ReplicationConfig {
        sizes: SynthSizes { train: 300, dev: 50, test: 100 },
        tagger: TaggerConfig {
            epochs: 2,
            ..ReplicationConfig::default().tagger
        },
        ..ReplicationConfig::default()
    };
    let run = |ex| run_replication(&cfg, ex).and_then(|r| r.report.to_jsonl()).map_err(|e| e.to_string());
    let a = run(Execution::Parallel)?;
    let b = run(Execution::Parallel)?;
    let c = run(Execution::Sequential)?;
    if a != b || a != c {
        return Err("reports differ between runs".into());
    }
    let other = run_replication(&ReplicationConfig { seed: 1, ..cfg.clone() }, Execution::Parallel).and_then(|r| r.report.to_jsonl()).map_err(|e| e.to_string())?;
    if other == a {
        return Err("a different seed produced the same report".into());
    }
    Ok(format!("3 runs bit-identical ({} bytes), parallel and sequential", a.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("gradient fidelity", gradient_fidelity),
        ("loss-oracle equivalence", loss_oracles),
        ("metric oracle", metric_oracle),
        ("pipeline rules", pipeline_rules),
        ("directional replication", replication),
        ("autoencoder sanity", autoencoder_sanity),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS  {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.1}s): {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
