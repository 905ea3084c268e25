mod common;

use std::time::Instant;

use common::{dense, normal, rng};

use neuraldb::eval::{
    bench_scaling, controlled_probes, diagnose_scores, eval_efficacy, eval_generalization, eval_specificity,
    retrieval_generalization, scaling_csv, synth_facts, EvalContext, MetricReport, MetricResult, Mode, ScoreSource,
};
use neuraldb::facts::{load_facts, parse_facts};
use neuraldb::model::{argmax, edit_layer, EditConfig, LayerEditMethod};
use neuraldb::solvers::weighted_scores_batch;
use neuraldb::{
    EditAttachment, Error, Exec, Fact, NeighborhoodPrompt, NeuralKVDatabase, PromptTemplate, ToyConfig, ToyModel,
};

fn model() -> ToyModel {
    ToyModel::new(ToyConfig::default()).unwrap()
}

fn recount(m: &MetricResult) {
    let successes = m.items.iter().filter(|i| i.success).count();
    assert_eq!(m.successes, successes);
    assert_eq!(m.attempts, m.items.len());
    if m.attempts > 0 {
        assert_eq!(m.fraction(), successes as f64 / m.items.len() as f64);
    }
}

const RECORD: &str = r#"{"id": 1, "subject": [31, 4], "prompt": "240 241 {}", "old": [9], "new": [200], "paraphrases": ["88 240 241 {}"], "neighborhood": [{"prompt": "240 241 5 6", "object": [9]}]}"#;

#[test]
fn fact_files() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert!(load_facts(&empty).unwrap().is_empty());

    let facts = parse_facts(RECORD).unwrap();
    assert_eq!(facts.len(), 1);
    assert_eq!(facts[0].paraphrases.len(), 1);
    assert_eq!(facts[0].neighborhood[0].prompt, vec![240, 241, 5, 6]);

    let missing = format!("{RECORD}\n{}", RECORD.replace(r#""new": [200], "#, "").replace("\"id\": 1", "\"id\": 2"));
    match parse_facts(&missing) {
        Err(Error::Parse { line, message }) => {
            assert_eq!(line, 2);
            assert!(message.contains("new"), "{message}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(matches!(parse_facts(&format!("{RECORD}\n{RECORD}")), Err(Error::DuplicateId(1))));
    let same = RECORD.replace(r#""new": [200]"#, r#""new": [9]"#);
    assert!(matches!(parse_facts(&same), Err(Error::Parse { line: 1, .. })));
    let two_slots = RECORD.replace("240 241 {}", "{} 240 {}");
    assert!(parse_facts(&two_slots).is_err());
}

#[test]
fn synthetic_facts_follow_the_pristine_model() {
    let m = model();
    let a = synth_facts(&m, 40, 11).unwrap();
    assert_eq!(a, synth_facts(&m, 40, 11).unwrap());
    assert_ne!(a, synth_facts(&m, 40, 12).unwrap());
    for f in &a {
        let (p, _) = f.rendered_prompt();
        assert_eq!(argmax(&m.next_logits(&p, &[]).unwrap()) as u32, f.old_object[0]);
        for n in &f.neighborhood {
            assert_eq!(argmax(&m.next_logits(&n.prompt, &[]).unwrap()) as u32, n.object[0]);
        }
        assert_ne!(f.new_object, f.old_object);
    }
    let mut subjects: Vec<&Vec<u32>> = a.iter().map(|f| &f.subject).collect();
    subjects.sort();
    subjects.dedup();
    assert_eq!(subjects.len(), 40);
}

#[test]
fn ten_thousand_facts_within_budget() {
    let t = Instant::now();
    let facts = synth_facts(&model(), 10_000, 1).unwrap();
    assert_eq!(facts.len(), 10_000);
    assert!(t.elapsed().as_secs_f64() < 60.0);
}

fn fact(id: u64, prompt: &[u32], subject: &[u32], old: u32, new: u32) -> Fact {
    Fact {
        id,
        subject: subject.to_vec(),
        prompt: PromptTemplate::new(prompt.to_vec(), vec![]),
        old_object: vec![old],
        new_object: vec![new],
        paraphrases: vec![],
        neighborhood: vec![],
    }
}

#[test]
fn efficacy_hand_count() {
    let m = model();
    let ctx = [240, 241, 7, 8];
    let logits = m.next_logits(&ctx, &[]).unwrap();
    let top = argmax(&logits) as u32;
    let other = (top + 1) % 256;
    // the first fact's new object is already preferred, the second's is not
    let facts = [fact(0, &[240, 241], &[7, 8], other, top), fact(1, &[240, 241], &[7, 8], top, other)];
    let r = eval_efficacy(&EvalContext::new(&m, &[]), &facts, Mode::Preference).unwrap();
    assert_eq!((r.successes, r.attempts), (1, 2));
    assert_eq!(r.fraction(), 0.5);
    recount(&r);
    let r = eval_efficacy(&EvalContext::new(&m, &[]), &facts, Mode::Top1).unwrap();
    assert_eq!(r.fraction(), 0.5);
}

#[test]
fn pristine_model_fails_adversarial_edits() {
    let m = model();
    let facts = synth_facts(&m, 100, 3).unwrap();
    let r = eval_efficacy(&EvalContext::new(&m, &[]), &facts, Mode::Preference).unwrap();
    assert_eq!(r.successes, 0);
    assert_eq!(r.attempts, 100);
}

#[test]
fn exact_replay_after_gated_edit_is_perfect() {
    let m = model();
    let facts = synth_facts(&m, 60, 4).unwrap();
    let edit = edit_layer(&m, &[], &facts, 2, &EditConfig::default()).unwrap();
    let atts = [edit.attachment];
    let report = MetricReport::evaluate(&EvalContext::new(&m, &atts), &facts, Mode::Top1, serde_json::json!({})).unwrap();
    assert_eq!(report.efficacy.fraction(), 1.0);
    for metric in [&report.efficacy, &report.generalization, &report.specificity] {
        recount(metric);
    }
    assert!(report.summary_csv().starts_with("metric,mode,successes,attempts,skipped,fraction\nefficacy,top1,60,60,0,1.000000\n"));
    assert_eq!(report.items_csv().lines().count(), 1 + 60 + 120 + 120);

    let seq = MetricReport::evaluate(
        &EvalContext::new(&m, &atts).with_exec(Exec::Sequential),
        &facts,
        Mode::Top1,
        serde_json::json!({}),
    )
    .unwrap();
    assert_eq!(seq.items_csv(), report.items_csv());
}

#[test]
fn paraphrase_bookkeeping() {
    let m = model();
    let mut facts = synth_facts(&m, 20, 5).unwrap();
    for f in facts.iter_mut().take(5) {
        f.paraphrases.clear();
    }
    let ctx = EvalContext::new(&m, &[]);
    let g = eval_generalization(&ctx, &facts, Mode::Preference).unwrap();
    assert_eq!(g.skipped, 5);
    assert_eq!(g.attempts, 30);
    recount(&g);

    // a paraphrase identical to the prompt scores exactly like efficacy
    for f in facts.iter_mut() {
        f.paraphrases = vec![f.prompt.clone()];
    }
    let edit = edit_layer(&m, &[], &facts, 2, &EditConfig::default()).unwrap();
    let atts = [edit.attachment];
    let ctx = EvalContext::new(&m, &atts);
    for mode in [Mode::Preference, Mode::Top1] {
        let e = eval_efficacy(&ctx, &facts, mode).unwrap();
        let g = eval_generalization(&ctx, &facts, mode).unwrap();
        assert_eq!(e.items, g.items);
    }
}

#[test]
fn constructed_cosine_probes() {
    let mut r = rng(6);
    let keys = dense(normal(128, 300, &mut r));
    let residuals = dense(normal(64, 300, &mut r));
    let (probes, cs) = controlled_probes(&keys, 0.8, 0.8, 7).unwrap();
    assert!(cs.iter().all(|c| *c == 0.8));
    let expected: Vec<usize> = (0..300).collect();

    let db = NeuralKVDatabase::build(&keys, &residuals, 0.65, 2).unwrap();
    let hit = retrieval_generalization(&db, &probes, &expected, Exec::Parallel).unwrap();
    assert_eq!(hit.fraction(), 1.0);
    assert!(hit.items.iter().all(|i| (i.wanted_score - 0.8).abs() < 1e-12));

    let db = NeuralKVDatabase::build(&keys, &residuals, 0.85, 2).unwrap();
    let miss = retrieval_generalization(&db, &probes, &expected, Exec::Parallel).unwrap();
    assert_eq!(miss.successes, 0);
    for j in 0..300 {
        assert!(!db.query(&probes.column_vector(j)).unwrap().hit);
    }
    assert!(retrieval_generalization(&db, &probes, &expected[..10], Exec::Parallel).is_err());
}

#[test]
fn specificity_matches_pristine_without_hits() {
    let m = model();
    let facts = synth_facts(&m, 40, 8).unwrap();
    let pristine = eval_specificity(&EvalContext::new(&m, &[]), &facts, Mode::Preference).unwrap();
    assert_eq!(pristine.fraction(), 1.0);

    let empty = [EditAttachment::gated(NeuralKVDatabase::new(128, 64, 0.65, 2).unwrap())];
    let with_empty = eval_specificity(&EvalContext::new(&m, &empty), &facts, Mode::Preference).unwrap();
    assert_eq!(with_empty, pristine);

    // a gate so strict that only exact replays pass leaves neighborhoods alone
    let mut edit = edit_layer(&m, &[], &facts, 2, &EditConfig::default()).unwrap();
    edit.attachment.database_mut().unwrap().set_gamma(0.999_999).unwrap();
    let atts = [edit.attachment];
    for f in &facts {
        for n in &f.neighborhood {
            assert!(m.forward(&n.prompt, &atts).unwrap().hits.is_empty());
        }
    }
    let strict = eval_specificity(&EvalContext::new(&m, &atts), &facts, Mode::Preference).unwrap();
    assert_eq!(strict, pristine);
}

#[test]
fn colliding_neighborhood_prompts_are_counted_as_failures() {
    let m = model();
    let mut facts = synth_facts(&m, 10, 9).unwrap();
    // the first fact's neighborhood replays its own edit prompt
    let (own, _) = facts[0].rendered_prompt();
    facts[0].neighborhood = vec![NeighborhoodPrompt {
        prompt: own,
        object: facts[0].old_object.clone(),
    }];
    let edit = edit_layer(&m, &[], &facts, 2, &EditConfig::default()).unwrap();
    let atts = [edit.attachment];
    let s = eval_specificity(&EvalContext::new(&m, &atts), &facts, Mode::Top1).unwrap();
    let first: Vec<_> = s.items.iter().filter(|i| i.fact == facts[0].id).collect();
    assert_eq!(first.len(), 1);
    assert!(!first[0].success);
    recount(&s);
}

#[test]
fn score_diagnostics() {
    let mut r = rng(10);
    let keys = dense(normal(16, 6, &mut r));
    let db = NeuralKVDatabase::build(&keys, &dense(normal(4, 6, &mut r)), 0.65, 0).unwrap();
    let labels: Vec<Option<usize>> = (0..6).map(Some).collect();
    let d = diagnose_scores(ScoreSource::Gated(&db), &keys, &labels).unwrap();
    assert_eq!(d.positive.len(), 6);
    assert!(d.positive.iter().all(|p| (p - 1.0).abs() < 1e-12));
    assert_eq!(d.negative.len(), 30);
    let csv = d.pools_csv();
    assert_eq!(csv.lines().count(), 37);
    assert!(csv.starts_with("pool,score\npositive,"));

    // linear solutions: the scores rebuild Δk
    let m = model();
    let facts = synth_facts(&m, 12, 11).unwrap();
    let cfg = EditConfig {
        method: LayerEditMethod::alphaedit(),
        ..Default::default()
    };
    let edit = edit_layer(&m, &[], &facts, 2, &cfg).unwrap();
    let sol = edit.solution.unwrap();
    let labels: Vec<Option<usize>> = (0..12).map(Some).collect();
    let d = diagnose_scores(ScoreSource::Linear(&sol), &edit.keys, &labels).unwrap();
    assert_eq!(d.positive.len(), 12);
    assert!(d.gap() > 0.0);
    let omega = weighted_scores_batch(&sol, &edit.keys).unwrap();
    let rebuilt = sol.residuals.matmul(&omega).unwrap();
    let direct = sol.delta.matmul(&edit.keys).unwrap();
    assert!(rebuilt.sub(&direct).unwrap().as_na().amax() < 1e-8);
    assert!(diagnose_scores(ScoreSource::Linear(&sol), &edit.keys, &labels[..3]).is_err());
}

#[test]
fn scaling_table_is_linear_in_m() {
    let rows = bench_scaling(&[1_000, 2_000, 4_000], 32, 16, 20, 1).unwrap();
    assert_eq!(rows.len(), 3);
    for w in rows.windows(2) {
        let growth = w[1].bytes as f64 / w[0].bytes as f64;
        assert!((1.8..=2.2).contains(&growth), "{growth}");
    }
    for r in &rows {
        assert!((0.5..=2.0).contains(&r.memory_ratio()));
        assert!(r.query_p50_secs <= r.query_p99_secs);
    }
    let csv = scaling_csv(&rows);
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("m,build_secs,"));
    assert!(bench_scaling(&[10, 5], 4, 4, 1, 0).is_err());
    assert!(bench_scaling(&[10], 4, 4, 0, 0).is_err());
}

#[test]
fn large_model_memory_formula() {
    // (d₁ + d₂)·m for a 14336/4096-wide FFN and 10,000 facts
    let scalars = (14_336u64 + 4_096) * 10_000;
    assert_eq!(scalars, 184_320_000);
    let db = neuraldb::eval::random_database(10, 14_336, 4_096, 0.65, 0, 1).unwrap();
    assert_eq!(db.formula_scalars() as u64 * 1_000, scalars);
}
