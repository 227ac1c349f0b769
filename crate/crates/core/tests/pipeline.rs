// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end behaviour on a tiny world that trains in well under a second.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use autopatch::classifier::gate::Gate;
use autopatch::classifier::svm::SvmModel;
use autopatch::classifier::StandardizerParams;
use autopatch::config::RunConfig;
use autopatch::experiments::{
    self, run_full, stage_sweep, Run, RunOptions, StageStatus, SweepKind, EVAL_FILE, GATE_FILE, LABEL_ITEMS_FILE,
    MANIFEST_FILE,
};
use autopatch::inference::{
    autopatch_answer, solve_rate, unpatched_token_histogram, EvalInputs, EvalMode, EvalOptions,
};
use autopatch::metric::answer_matches;
use autopatch::model::{ops, Injection, Model, Tokenizer};
use autopatch::oracle::{build_dataset, label_prompt, load_dataset, partial_path, OracleOptions};
use autopatch::patch::{capture_source_states, run_patched, LayerPair, PatchSpec};
use autopatch::taskgen::QaItem;
use autopatch::Error;

fn tiny_config(workdir: &Path) -> RunConfig {
    let mut cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.json")).unwrap();
    cfg.resolve_workdir(Some(workdir));
    cfg
}

fn tiny_run(workdir: &Path) -> Run {
    Run::new(tiny_config(workdir), RunOptions::default()).unwrap()
}

struct Trained {
    _dir: tempfile::TempDir,
    run: Run,
    model: Model,
    tok: Tokenizer,
    items: Vec<QaItem>,
}

fn trained() -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run(dir.path());
    let manifest = run_full(&run).unwrap();
    assert!(manifest.succeeded(), "{:?}", manifest.first_error());
    let model = run.load_model().unwrap();
    let tok = run.load_tokenizer().unwrap();
    let items = run.load_items(LABEL_ITEMS_FILE).unwrap();
    Trained {
        _dir: dir,
        run,
        model,
        tok,
        items,
    }
}

fn constant_gate(layers: LayerPair, d: usize, answer: bool) -> Gate {
    Gate {
        layers,
        standardizer: StandardizerParams {
            means: vec![0.0; d],
            stds: vec![1.0; d],
            flagged: vec![],
        },
        svm: SvmModel {
            support_vectors: vec![],
            dual_coefs: vec![],
            bias: if answer { 1.0 } else { -1.0 },
            gamma: 1.0,
            c: 1.0,
        },
        append_position_feature: false,
        threshold: 0.0,
    }
}

#[test]
fn manifest_has_six_stages_and_reruns_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = run_full(&tiny_run(a.path())).unwrap();
    let mb = run_full(&tiny_run(b.path())).unwrap();
    assert_eq!(ma.stages.len(), 6);
    let names: Vec<&str> = ma.stages.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, experiments::STAGES);
    assert!(ma.succeeded());
    assert_eq!(ma, mb);
    assert_eq!(
        std::fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
        std::fs::read(b.path().join(MANIFEST_FILE)).unwrap()
    );
    for rel in ["dataset.jsonl", "gate.json", "eval.json", "model.apck"] {
        assert!(ma.artifact(rel).is_some(), "{rel} missing from manifest");
    }
}

#[test]
fn refuses_to_clobber_without_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run(dir.path());
    let first = run_full(&run).unwrap();
    assert!(matches!(run_full(&run), Err(Error::WouldOverwrite(_))));
    let again = Run::new(
        run.cfg.clone(),
        RunOptions {
            jobs: 0,
            overwrite: true,
        },
    )
    .unwrap();
    assert_eq!(run_full(&again).unwrap(), first);
}

#[test]
fn failed_stage_is_recorded_and_later_stages_skipped() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("blocker"), b"").unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.paths.checkpoint = Some("blocker/model.apck".into());
    let manifest = run_full(&Run::new(cfg, RunOptions::default()).unwrap()).unwrap();
    let status: Vec<StageStatus> = manifest.stages.iter().map(|s| s.status).collect();
    assert_eq!(status[0], StageStatus::Ok);
    assert_eq!(status[1], StageStatus::Failed);
    assert!(status[2..].iter().all(|&s| s == StageStatus::Skipped));
    assert!(!manifest.succeeded());
    assert!(dir.path().join(MANIFEST_FILE).exists());
}

#[test]
fn labelling_contracts() {
    let t = trained();
    let layers = t.run.cfg.layers;
    for qa in &t.items {
        let samples = label_prompt(&t.model, &t.tok, qa, layers, 8).unwrap();
        let len = t.tok.tokenize(&qa.prompt).unwrap().len();
        assert_eq!(samples.len(), len);
        for (i, s) in samples.iter().enumerate() {
            assert_eq!((s.position_source, s.position_target), (i, i));
            assert_eq!(s.prompt_source, s.prompt_target);
            assert_eq!(s.hidden_rep.len(), t.model.config().d_model);
            assert_eq!(s.is_correct_patched, answer_matches(&s.generations_patched, &s.hop3));
        }
        assert_eq!(samples, label_prompt(&t.model, &t.tok, qa, layers, 8).unwrap());
    }
}

#[test]
fn self_patch_on_a_solved_prompt_labels_every_position_true() {
    let t = trained();
    let solved = t
        .items
        .iter()
        .find(|qa| {
            let ids = t.model.greedy_generate(&t.tok.tokenize(&qa.prompt).unwrap(), 8, &[]).unwrap();
            answer_matches(&t.tok.detokenize(&ids), &qa.hop3)
        })
        .expect("tiny model solves at least one eval prompt");
    let samples = label_prompt(&t.model, &t.tok, solved, LayerPair::new(2, 2), 8).unwrap();
    assert!(samples.iter().all(|s| s.is_correct_patched && s.logprob_delta == 0.0));
}

#[test]
fn dataset_counts_and_skips() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.jsonl");
    let mut items = t.items.clone();
    let long = QaItem {
        prompt: vec!["the"; 40].join(" "),
        ..items[0].clone()
    };
    items.insert(1, long);
    let summary = build_dataset(&t.model, &t.tok, &items, t.run.cfg.layers, &OracleOptions::default(), &out).unwrap();
    let expected: usize = t.items.iter().map(|q| t.tok.tokenize(&q.prompt).unwrap().len()).sum();
    assert_eq!(summary.n_samples, expected);
    assert_eq!(summary.n_prompts, t.items.len());
    assert_eq!(summary.skipped.len(), 1);
    assert_eq!(summary.skipped[0].index, 1);
    assert!(summary.positive_rate > 0.0 && summary.positive_rate < 1.0);
    assert!(!partial_path(&out).exists());
    assert_eq!(load_dataset(&out).unwrap().len(), expected);

    let one = dir.path().join("one.jsonl");
    let s = build_dataset(&t.model, &t.tok, &t.items[..1], t.run.cfg.layers, &OracleOptions::default(), &one).unwrap();
    assert_eq!(s.n_samples, t.tok.tokenize(&t.items[0].prompt).unwrap().len());
    assert!(build_dataset(&t.model, &t.tok, &[], t.run.cfg.layers, &OracleOptions::default(), &one).is_err());
}

#[test]
fn patch_engine_on_trained_model() {
    let t = trained();
    let prompt = t.tok.tokenize(&t.items[0].prompt).unwrap();
    let states = capture_source_states(&t.model, &prompt, 3).unwrap();
    assert_eq!(states.len(), prompt.len());
    let direct = t.model.forward(&prompt, &BTreeSet::from([3])).unwrap();
    assert_eq!(states, direct.captured[&3]);
    for i in 0..states.len() {
        for j in i + 1..states.len() {
            assert_ne!(states[i].vector, states[j].vector, "positions {i} and {j}");
        }
    }

    let all: BTreeSet<usize> = (0..prompt.len()).collect();
    let same = capture_source_states(&t.model, &prompt, 2).unwrap();
    let inj: Vec<Injection> = same
        .iter()
        .map(|s| Injection {
            layer: 2,
            position: s.position,
            vector: s.vector.clone(),
        })
        .collect();
    let base = t.model.forward_patched(&prompt, &[]).unwrap();
    let patched = t.model.forward_patched(&prompt, &inj).unwrap();
    let dev = base
        .logits
        .iter()
        .zip(&patched.logits)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(dev <= 1e-5);

    let spec = PatchSpec {
        layers: LayerPair::new(2, 2),
        positions: all,
    };
    let run = run_patched(&t.model, &t.tok, &prompt, &spec, &same, &t.items[0].hop3, 8).unwrap();
    assert_eq!(run.generated_ids, t.model.greedy_generate(&prompt, 8, &[]).unwrap());

    // Independent teacher-forced score of the gold answer.
    let gold = t.tok.encode(&t.items[0].hop3);
    let mut seq = prompt.as_slice().to_vec();
    seq.extend_from_slice(&gold);
    let trace = t
        .model
        .forward(&autopatch::model::TokenSequence::new(seq).unwrap(), &BTreeSet::new())
        .unwrap();
    let mut want = 0.0f64;
    for (k, &g) in gold.iter().enumerate() {
        let row = trace.logits_at(prompt.len() - 1 + k);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
        want += row[g as usize] as f64 - lse;
    }
    assert!((run.gold_logprob_base - want).abs() < 1e-9);
}

#[test]
fn eval_mode_equivalences() {
    let t = trained();
    let items = t.run.load_items(experiments::EVAL_ITEMS_FILE).unwrap();
    let layers = t.run.cfg.layers;
    let d = t.model.config().d_model;
    let opts = EvalOptions::default();
    let eval = |mode, gate: Option<&Gate>| {
        solve_rate(
            &t.model,
            &t.tok,
            &items,
            mode,
            layers,
            &EvalInputs { gate, oracle: None },
            &opts,
        )
        .unwrap()
    };
    let base = eval(EvalMode::Baseline, None);
    let off = eval(EvalMode::AlwaysFalse, None);
    assert_eq!(base.solve_rate, off.solve_rate);
    for (a, b) in base.per_prompt.iter().zip(&off.per_prompt) {
        assert_eq!(a.answer, b.answer);
    }

    let never = constant_gate(layers, d, false);
    let always = constant_gate(layers, d, true);
    let gated_off = eval(EvalMode::Autopatch, Some(&never));
    assert_eq!(
        gated_off.per_prompt.iter().map(|p| &p.answer).collect::<Vec<_>>(),
        base.per_prompt.iter().map(|p| &p.answer).collect::<Vec<_>>()
    );
    let gated_on = eval(EvalMode::Autopatch, Some(&always));
    let all = eval(EvalMode::PatchAll, None);
    assert_eq!(gated_on.per_prompt, all.per_prompt);
    assert!(unpatched_token_histogram(&gated_on, &t.tok).unwrap().is_empty());
    assert!(unpatched_token_histogram(&all, &t.tok).is_err());

    let r1 = eval(EvalMode::RandomGate, None);
    assert_eq!(r1, eval(EvalMode::RandomGate, None));
    assert!(solve_rate(&t.model, &t.tok, &items, EvalMode::Autopatch, layers, &EvalInputs::default(), &opts).is_err());
    assert!(solve_rate(&t.model, &t.tok, &items, EvalMode::OraclePatch, layers, &EvalInputs::default(), &opts).is_err());
    assert!(solve_rate(&t.model, &t.tok, &[], EvalMode::Baseline, layers, &EvalInputs::default(), &opts).is_err());
}

#[test]
fn trained_gate_decisions_are_reproducible() {
    let t = trained();
    let gate = Gate::load(&t.run.path(GATE_FILE)).unwrap();
    let eval: experiments::EvalArtifact =
        serde_json::from_str(&std::fs::read_to_string(t.run.path(EVAL_FILE)).unwrap()).unwrap();
    let auto = eval.result(EvalMode::Autopatch).unwrap();
    let mut total_unpatched = 0;
    for p in &auto.per_prompt {
        let ans = autopatch_answer(&t.model, &t.tok, &gate, &p.prompt, 8).unwrap();
        assert_eq!(ans.answer, p.answer);
        // Independent capture + predict.
        let tokens = t.tok.tokenize(&p.prompt).unwrap();
        let trace = t.model.forward(&tokens, &BTreeSet::from([gate.layers.source])).unwrap();
        let mut chosen = Vec::new();
        for s in &trace.captured[&gate.layers.source] {
            let x: Vec<f64> = s
                .vector
                .iter()
                .zip(gate.standardizer.means.iter().zip(&gate.standardizer.stds))
                .map(|(&v, (m, sd))| (v as f64 - m) / sd)
                .collect();
            let mut dv = gate.svm.bias;
            for (sv, c) in gate.svm.support_vectors.iter().zip(&gate.svm.dual_coefs) {
                let d2: f64 = sv.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
                dv += c * (-gate.svm.gamma * d2).exp();
            }
            if dv > gate.threshold {
                chosen.push(s.position);
            }
        }
        assert_eq!(chosen, p.patched_positions);
        assert_eq!(ans.patched_positions.into_iter().collect::<Vec<_>>(), chosen);
        total_unpatched += tokens.len() - chosen.len();
    }
    let hist = unpatched_token_histogram(auto, &t.tok).unwrap();
    assert_eq!(hist.values().sum::<usize>(), total_unpatched);

    let wrong = constant_gate(gate.layers, 7, true);
    assert!(matches!(
        autopatch_answer(&t.model, &t.tok, &wrong, &auto.per_prompt[0].prompt, 8),
        Err(Error::DimensionMismatch { .. })
    ));
}

#[test]
fn gate_report_has_both_classes() {
    let t = trained();
    let g: experiments::GateArtifact =
        serde_json::from_str(&std::fs::read_to_string(t.run.path(experiments::GATE_REPORT_FILE)).unwrap()).unwrap();
    assert!(g.report.positive.support > 0 && g.report.negative.support > 0);
    assert!(g.test_untouched);
    assert_eq!(g.n_test, g.report.confusion.total());
}

#[test]
fn sweeps_write_valid_rows() {
    let t = trained();
    let (outs, rows) = stage_sweep(&t.run, SweepKind::Source).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.distance == 1 && r.source_layer - r.target_layer == 1 && r.n_prompts == 32));
    assert!(outs.iter().all(|p| p.exists()));
    let (_, rows) = stage_sweep(&t.run, SweepKind::Distance).unwrap();
    let dist: Vec<usize> = rows.iter().map(|r| r.distance).collect();
    assert_eq!(dist, vec![1, 3]);

    // Per-pair isolation: each pair has its own dataset.
    let mut seen = BTreeMap::new();
    for r in &rows {
        let p = t
            .run
            .path("sweep_distance")
            .join(format!("{}_{}", r.source_layer, r.target_layer))
            .join("dataset.jsonl");
        seen.insert(p.clone(), p.exists());
    }
    assert!(seen.len() == 2 && seen.values().all(|&e| e));

    let mut bad = t.run.cfg.clone();
    bad.sweep.source_max = 9;
    assert!(Run::new(bad, RunOptions::default()).is_err());
}

#[test]
fn greedy_generation_uses_argmax() {
    let t = trained();
    let prompt = t.tok.tokenize(&t.items[0].prompt).unwrap();
    let ids = t.model.greedy_generate(&prompt, 1, &[]).unwrap();
    let trace = t.model.forward(&prompt, &BTreeSet::new()).unwrap();
    let next = ops::argmax(trace.logits_at(prompt.len() - 1)) as u32;
    if next == autopatch::model::tokenizer::EOS {
        assert!(ids.is_empty());
    } else {
        assert_eq!(ids, vec![next]);
    }
}
