//! The subcommands. Each one reads its inputs, does its work and writes
//! its artifacts through an [`OutDir`]; `main` writes the manifest last.

use std::path::PathBuf;

use serde::Serialize;
use serde_json::{json, Value};

use neuraldb::eval::{bench_scaling, diagnose_scores, scaling_csv, synth_facts, EvalContext, MetricReport, ScoreSource};
use neuraldb::facts::{facts_to_jsonl, load_facts};
use neuraldb::model::{
    compute_keys, compute_residuals, edit_layer, multilayer_edit_new, multilayer_edit_old, LayerEdit, PrefixSpec,
};
use neuraldb::tensor::DenseMatrix;
use neuraldb::{Attachment, EditAttachment, Exec, Fact, FactId, NeuralKVDatabase, ToyModel};

use crate::failure::Failure;
use crate::output::OutDir;
use crate::settings::{CrudOp, FactSource, ModelSource, RunConfig, Scheme};

fn load_model(cfg: &RunConfig) -> Result<ToyModel, Failure> {
    match cfg.model.as_ref().expect("command uses a model") {
        ModelSource::Checkpoint(path) => Ok(ToyModel::load(path)?),
        ModelSource::Toy(toy) => Ok(ToyModel::new(*toy)?),
    }
}

fn load_fact_source(cfg: &RunConfig, model: &ToyModel) -> Result<Vec<Fact>, Failure> {
    let facts = match cfg.facts.as_ref().expect("command uses facts") {
        FactSource::File(path) => load_facts(path)?,
        FactSource::Synth { count, seed } => synth_facts(model, *count, *seed)?,
    };
    if facts.is_empty() {
        return Err(Failure::runtime("input", "fact source is empty"));
    }
    let vocab = model.config().vocab as u32;
    if let Some(f) = facts.iter().find(|f| f.max_token() >= vocab) {
        return Err(Failure::runtime(
            "input",
            format!("fact {} uses token {} outside the model vocabulary of {vocab}", f.id, f.max_token()),
        ));
    }
    Ok(facts)
}

/// Writes synthesised facts next to the results so that they can be reused
/// with `--facts`.
fn keep_facts(cfg: &RunConfig, out: &mut OutDir, facts: &[Fact]) -> Result<(), Failure> {
    if matches!(cfg.facts, Some(FactSource::Synth { .. })) {
        out.write("facts.jsonl", facts_to_jsonl(facts))?;
    }
    Ok(())
}

/// Fills in the default layer now that the model is known.
fn resolve_layers(cfg: &mut RunConfig, model: &ToyModel) -> Result<Vec<usize>, Failure> {
    let plan = cfg.edit.as_mut().expect("command edits");
    let layers = plan
        .layers
        .get_or_insert_with(|| vec![model.config().default_edit_layer()])
        .clone();
    if let Some(&l) = layers.iter().find(|&&l| l >= model.n_layers()) {
        return Err(Failure::config(format!("layer {l} out of range for a {}-layer model", model.n_layers())));
    }
    Ok(layers)
}

fn perform_edit(cfg: &mut RunConfig, model: &ToyModel, facts: &[Fact]) -> Result<Vec<LayerEdit>, Failure> {
    let layers = resolve_layers(cfg, model)?;
    let plan = cfg.edit.as_ref().unwrap();
    let edits = match (layers.as_slice(), plan.scheme) {
        ([l], _) => vec![edit_layer(model, &[], facts, *l, &plan.config)?],
        (_, Some(Scheme::New)) => multilayer_edit_new(model, &[], facts, &layers, &plan.config)?.edits,
        (_, _) => multilayer_edit_old(model, &[], facts, &layers, &plan.config)?.edits,
    };
    Ok(edits)
}

fn attachments(edits: &[LayerEdit]) -> Vec<EditAttachment> {
    edits.iter().map(|e| e.attachment.clone()).collect()
}

/// The run configuration minus settings that cannot change results, for
/// embedding in reports that must be byte-identical across reruns.
fn report_config(cfg: &RunConfig) -> Value {
    let mut v = serde_json::to_value(cfg).unwrap();
    let obj = v.as_object_mut().unwrap();
    obj.remove("out");
    obj.remove("jobs");
    v
}

fn pretty(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).unwrap();
    s.push('\n');
    s
}

#[derive(Serialize)]
struct DbStats {
    entries: usize,
    d1: usize,
    d2: usize,
    gamma: f64,
    layer: usize,
    heap_bytes: usize,
    formula_scalars: usize,
}

fn db_stats(db: &NeuralKVDatabase) -> DbStats {
    DbStats {
        entries: db.len(),
        d1: db.d1(),
        d2: db.d2(),
        gamma: db.gamma(),
        layer: db.layer(),
        heap_bytes: db.heap_bytes(),
        formula_scalars: db.formula_scalars(),
    }
}

fn save_db(out: &mut OutDir, name: &str, db: &NeuralKVDatabase) -> Result<(), Failure> {
    let path = out.track(name);
    db.save(&path)?;
    Ok(())
}

fn matrix_csv(m: &DenseMatrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = (0..m.cols()).map(|j| format!("{:.17e}", m.get(i, j))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn build_db(cfg: &mut RunConfig, out: &mut OutDir) -> Result<(), Failure> {
    let model = load_model(cfg)?;
    let facts = load_fact_source(cfg, &model)?;
    let mut edits = perform_edit(cfg, &model, &facts)?;
    let edit = edits.pop().unwrap();
    let db = edit.attachment.database().expect("build-db edits with neuraldb");
    save_db(out, "db.ndb", db)?;
    let stats = db_stats(db);
    out.write("db.json", pretty(&stats))?;
    keep_facts(cfg, out, &facts)?;
    println!("built database: {} entries at layer {}, gamma {}", stats.entries, stats.layer, stats.gamma);
    Ok(())
}

pub fn edit(cfg: &mut RunConfig, out: &mut OutDir) -> Result<(), Failure> {
    let model = load_model(cfg)?;
    let facts = load_fact_source(cfg, &model)?;
    let edits = perform_edit(cfg, &model, &facts)?;
    let mut layers = Vec::new();
    for e in &edits {
        let entry = match &e.attachment.edit {
            Attachment::Gated(db) => {
                let name = format!("layer{}.ndb", e.layer);
                save_db(out, &name, db)?;
                json!({"layer": e.layer, "artifact": name, "entries": db.len()})
            }
            Attachment::Linear(delta) => {
                let name = format!("delta_layer{}.csv", e.layer);
                out.write(&name, matrix_csv(delta))?;
                json!({"layer": e.layer, "artifact": name, "delta_frobenius": delta.frobenius_norm()})
            }
        };
        layers.push(json!({
            "edit": entry,
            "residual_frobenius": e.residuals.frobenius_norm(),
        }));
    }
    let method = cfg.edit.as_ref().unwrap().config.method.name();
    out.write("edit.json", pretty(&json!({"method": method, "facts": facts.len(), "layers": layers})))?;
    keep_facts(cfg, out, &facts)?;
    println!("edited {} facts into layers {:?} with {method}", facts.len(), edits.iter().map(|e| e.layer).collect::<Vec<_>>());
    Ok(())
}

pub fn eval(cfg: &mut RunConfig, out: &mut OutDir) -> Result<(), Failure> {
    let model = load_model(cfg)?;
    let facts = load_fact_source(cfg, &model)?;
    let edits = perform_edit(cfg, &model, &facts)?;
    let atts = attachments(&edits);
    let ctx = EvalContext::new(&model, &atts);
    let report = MetricReport::evaluate(&ctx, &facts, cfg.mode.unwrap(), report_config(cfg))?;
    out.write("report.json", pretty(&report))?;
    let summary = report.summary_csv();
    out.write("summary.csv", &summary)?;
    out.write("items.csv", report.items_csv())?;
    keep_facts(cfg, out, &facts)?;
    print!("{summary}");
    Ok(())
}

pub fn diagnose(cfg: &mut RunConfig, out: &mut OutDir) -> Result<(), Failure> {
    let model = load_model(cfg)?;
    let facts = load_fact_source(cfg, &model)?;
    let edit = perform_edit(cfg, &model, &facts)?.pop().unwrap();

    // probes: every edit prompt, then every paraphrase, labelled by fact
    let mut probe_facts: Vec<Fact> = facts.clone();
    let mut labels: Vec<Option<usize>> = (0..facts.len()).map(Some).collect();
    for (i, f) in facts.iter().enumerate() {
        for p in &f.paraphrases {
            probe_facts.push(Fact {
                prompt: p.clone(),
                ..f.clone()
            });
            labels.push(Some(i));
        }
    }
    let probes = compute_keys(&model, &[], &probe_facts, edit.layer, &PrefixSpec::EXACT, Exec::Parallel)?;
    let source = match (&edit.solution, edit.attachment.database()) {
        (Some(sol), _) => ScoreSource::Linear(sol),
        (None, Some(db)) => ScoreSource::Gated(db),
        (None, None) => unreachable!("an edit is either linear or gated"),
    };
    let d = diagnose_scores(source, &probes, &labels)?;
    out.write("scores.csv", d.pools_csv())?;
    let method = cfg.edit.as_ref().unwrap().config.method.name();
    let summary = json!({
        "method": method,
        "layer": edit.layer,
        "facts": facts.len(),
        "probes": probes.cols(),
        "positive": {"count": d.positive.len(), "mean": d.positive_mean, "std": d.positive_std},
        "negative": {"count": d.negative.len(), "mean": d.negative_mean, "std": d.negative_std},
        "gap": d.gap(),
    });
    out.write("diagnostics.json", pretty(&summary))?;
    println!(
        "{method} layer {}: positive mean {:.6}, negative mean {:.6}, gap {:.6}",
        edit.layer,
        d.positive_mean,
        d.negative_mean,
        d.gap()
    );
    Ok(())
}

pub fn query(cfg: &mut RunConfig, out: &mut OutDir) -> Result<(), Failure> {
    let db = NeuralKVDatabase::load(cfg.db.as_ref().unwrap())?;
    let model = load_model(cfg)?;
    if db.d1() != model.config().d_ffn || db.d2() != model.config().d_model || db.layer() >= model.n_layers() {
        return Err(Failure::runtime(
            "dimension",
            format!(
                "database ({}x{} at layer {}) does not fit the model (d_ffn {}, d_model {}, {} layers)",
                db.d1(),
                db.d2(),
                db.layer(),
                model.config().d_ffn,
                model.config().d_model,
                model.n_layers()
            ),
        ));
    }
    let facts = load_fact_source(cfg, &model)?;
    let keys = compute_keys(&model, &[], &facts, db.layer(), &PrefixSpec::EXACT, Exec::Parallel)?;
    let mut csv = String::from("fact,hit,index,matched_fact,similarity\n");
    let (mut hits, mut own) = (0, 0);
    for (j, f) in facts.iter().enumerate() {
        let r = db.query(&keys.column_vector(j))?;
        let index = r.index.map(|i| i.to_string()).unwrap_or_default();
        let matched = r.fact.map(|id| id.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{index},{matched},{:.17e}\n", f.id, r.hit as u8, r.similarity));
        hits += r.hit as usize;
        own += (r.fact == Some(FactId(f.id))) as usize;
    }
    out.write("query.csv", csv)?;
    let summary = json!({"queries": facts.len(), "hits": hits, "matched_own_entry": own});
    out.write("query.json", pretty(&summary))?;
    println!("{} queries: {hits} hits, {own} matched their own entry", facts.len());
    Ok(())
}

pub fn crud(cfg: &mut RunConfig, out: &mut OutDir) -> Result<(), Failure> {
    let db_path: PathBuf = cfg.db.clone().unwrap();
    let mut db = NeuralKVDatabase::load(&db_path)?;
    let plan = cfg.crud.clone().unwrap();
    let affected = match plan.op {
        CrudOp::Stats => 0,
        CrudOp::Remove => plan.ids.iter().filter(|&&id| db.remove(FactId(id))).count(),
        CrudOp::Insert | CrudOp::Update => {
            let model = load_model(cfg)?;
            if db.d1() != model.config().d_ffn || db.d2() != model.config().d_model {
                return Err(Failure::runtime("dimension", "database widths do not match the model"));
            }
            let facts = load_fact_source(cfg, &model)?;
            let fit = plan.fit.unwrap();
            let keys = compute_keys(&model, &[], &facts, db.layer(), &PrefixSpec::EXACT, Exec::Parallel)?;
            let residuals = compute_residuals(&model, &[], &facts, db.layer(), &fit, Exec::Parallel)?;
            let mut n = 0;
            for (j, f) in facts.iter().enumerate() {
                let (k, r) = (keys.column_vector(j), residuals.column_vector(j));
                if plan.op == CrudOp::Insert {
                    db.insert_with_id(FactId(f.id), &k, &r, None)?;
                    n += 1;
                } else {
                    n += db.update(FactId(f.id), &r, Some(&k))? as usize;
                }
            }
            keep_facts(cfg, out, &facts)?;
            n
        }
    };
    if plan.op != CrudOp::Stats {
        save_db(out, "db.ndb", &db)?;
    }
    let stats = db_stats(&db);
    let op = serde_json::to_value(plan.op).unwrap();
    out.write("db.json", pretty(&json!({"op": op, "affected": affected, "database": stats})))?;
    println!("{}: {affected} entries affected, {} entries now", op.as_str().unwrap(), stats.entries);
    Ok(())
}

pub fn bench(cfg: &mut RunConfig, out: &mut OutDir) -> Result<(), Failure> {
    let plan = cfg.bench.clone().unwrap();
    let rows = bench_scaling(&plan.sizes, plan.d1, plan.d2, plan.queries, plan.seed)?;
    let csv = scaling_csv(&rows);
    out.write("scaling.csv", &csv)?;
    print!("{csv}");
    Ok(())
}
