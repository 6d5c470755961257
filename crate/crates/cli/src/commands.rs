use std::fs;
use std::path::{Path, PathBuf};

use kcd_core::activations::{load_activation_set, read_labels, write_labels, write_matrix_npy, ActivationManifest};
use kcd_core::analysis::{channel_overlap, class_average_activations, feature_distance_report};
use kcd_core::consistency::{consistency_matrix, consistency_score, sidecar_path, ConsistencyMatrix, ConsistencyMetric};
use kcd_core::lab::algorithm::resolve_pairs;
use kcd_core::lab::train::TransformRef;
use kcd_core::lab::{forward_with_activations, make_synthetic_dataset, run_outcome, train_pair, GenSpec, RunConfig};
use kcd_core::learned::{fit_linear_transform, fit_residual_transform, FitConfig};
use kcd_core::matching::derive_from_matrix;
use kcd_core::npy::{self, Dtype};
use kcd_core::{
    global_average_pool, read_npy, sha256_hex, write_npy, KcdError, Matrix, PooledActivations, Result, Strategy,
    Transformation,
};
use serde_json::{json, Value};

use crate::prov::{sidecar, Tracker};
use crate::{
    ApplyArgs, Command, ConsistencyArgs, DistanceArgs, DistillCmd, DistillRunArgs, LearnArgs, MatchArgs, OverlapArgs,
    PairArgs, PoolArgs, Selection, SynthArgs,
};

pub struct Ctx {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Ctx {
    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| KcdError::Config("--out is required".into()))
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

pub fn dispatch(ctx: &Ctx, cmd: &Command) -> Result<()> {
    let command = serde_json::to_value(cmd).expect("arguments serialize");
    match cmd {
        Command::Pool(a) => pool(ctx, a, command),
        Command::Consistency(a) => consistency(ctx, a, command),
        Command::Match(a) => match_cmd(ctx, a, command),
        Command::Apply(a) => apply(ctx, a, command),
        Command::LearnTransform(a) => learn(ctx, a, command),
        Command::Overlap(a) => overlap(ctx, a, command),
        Command::Distance(a) => distance(ctx, a, command),
        Command::Distill(DistillCmd::Run(a)) => distill_run(ctx, a, command),
        Command::Distill(DistillCmd::Template) => template(ctx),
        Command::Synth(a) => synth(ctx, a, command),
    }
}

struct Features {
    pooled: PooledActivations,
    labels: Option<Vec<i64>>,
    dtype: Dtype,
}

/// Pooled features from an NPY tensor or a TOML manifest.
fn load_features(path: &Path, sel: &Selection, tr: &mut Tracker) -> Result<Features> {
    tr.input(path)?;
    if path.extension().is_some_and(|e| e == "toml") {
        let m = ActivationManifest::load(path)?.filtered(&sel.split, sel.layer.as_deref());
        for e in &m.entries {
            tr.input(&m.resolve(&e.tensor))?;
            tr.input(&m.resolve(&e.labels))?;
        }
        let (pooled, labels) = load_activation_set(&m)?;
        return Ok(Features { pooled, labels: Some(labels), dtype: Dtype::F64 });
    }
    let t = read_npy(path)?;
    Ok(Features { dtype: t.dtype(), pooled: global_average_pool(&t), labels: None })
}

fn load_pair(a: &PairArgs, tr: &mut Tracker) -> Result<(Features, Features)> {
    Ok((load_features(&a.teacher, &a.sel, tr)?, load_features(&a.student, &a.sel, tr)?))
}

fn weight_files(record: &Path) -> Result<Vec<PathBuf>> {
    let v: Value = serde_json::from_str(&fs::read_to_string(record)?)
        .map_err(|e| KcdError::Format(format!("transformation record: {e}")))?;
    let dir = record.parent().unwrap_or(Path::new("."));
    Ok(v["weights"]
        .as_object()
        .map(|w| w.values().filter_map(Value::as_str).map(|f| dir.join(f)).collect())
        .unwrap_or_default())
}

fn load_transform(path: &Path, tr: &mut Tracker) -> Result<Transformation> {
    tr.input(path)?;
    for w in weight_files(path)? {
        tr.input(&w)?;
    }
    Transformation::load(path)
}

fn save_transform(t: &Transformation, path: &Path, tr: &mut Tracker) -> Result<()> {
    t.save(path)?;
    tr.output(path)?;
    for w in weight_files(path)? {
        tr.output(&w)?;
    }
    Ok(())
}

fn pool(ctx: &Ctx, a: &PoolArgs, command: Value) -> Result<()> {
    let out = ctx.out()?;
    let mut tr = Tracker::default();
    let (pooled, labels, dtype) = match &a.manifest {
        Some(m) => {
            let f = load_features(m, &a.sel, &mut tr)?;
            (f.pooled, f.labels, f.dtype)
        }
        None => {
            let mut parts = Vec::new();
            let mut dtype = None;
            for p in &a.input {
                let f = load_features(p, &a.sel, &mut tr)?;
                dtype = match dtype {
                    Some(d) if d != f.dtype => Some(Dtype::F64),
                    _ => Some(f.dtype),
                };
                parts.push(f.pooled.into_matrix());
            }
            (PooledActivations::from_matrix(Matrix::vstack(&parts)?)?, None, dtype.unwrap_or(Dtype::F64))
        }
    };
    write_npy(&pooled.to_tensor(dtype)?, out)?;
    tr.output(out)?;
    if let Some(labels) = &labels {
        let lp = out.with_extension("labels.npy");
        write_labels(labels, &lp)?;
        tr.output(&lp)?;
    }
    let result = json!({ "batch": pooled.batch(), "channels": pooled.channels() });
    tr.finish(command, ctx.seed, result, &sidecar(out))
}

fn consistency(ctx: &Ctx, a: &ConsistencyArgs, command: Value) -> Result<()> {
    let out = ctx.out()?;
    let mut tr = Tracker::default();
    let (t, s) = load_pair(&a.pair, &mut tr)?;
    let m = consistency_matrix(&t.pooled, &s.pooled, ConsistencyMetric::new(a.metric, a.epsilon)?)?;
    m.save(out)?;
    tr.output(out)?;
    tr.output(&sidecar_path(out))?;
    let result = json!({
        "channels": m.channels(),
        "samples": m.sample_count,
        "gamma_identity": consistency_score(&m, None)?,
    });
    tr.finish(command, ctx.seed, result, &sidecar(out))
}

fn match_cmd(ctx: &Ctx, a: &MatchArgs, command: Value) -> Result<()> {
    let out = ctx.out()?;
    let mut tr = Tracker::default();
    let m = match (&a.matrix, &a.teacher, &a.student) {
        (Some(p), _, _) => {
            tr.input(p)?;
            tr.input(&sidecar_path(p))?;
            ConsistencyMatrix::load(p)?
        }
        (None, Some(t), Some(s)) => {
            let t = load_features(t, &a.sel, &mut tr)?;
            let s = load_features(s, &a.sel, &mut tr)?;
            consistency_matrix(&t.pooled, &s.pooled, ConsistencyMetric::new(a.metric, a.epsilon)?)?
        }
        _ => return Err(KcdError::Config("give --matrix or both --teacher and --student".into())),
    };
    if matches!(a.strategy, Strategy::LearnedFc | Strategy::LearnedRes) {
        return Err(KcdError::Config("learned transforms come from `learn-transform`".into()));
    }
    let mut t = derive_from_matrix(&m, a.strategy, ctx.seed())?;
    t.provenance.metric = Some(m.metric.kind.to_string());
    t.provenance.source_hashes = tr.input_hashes();
    save_transform(&t, out, &mut tr)?;
    let result = json!({
        "gamma_identity": consistency_score(&m, None)?,
        "gamma_transformed": consistency_score(&m, Some(&t))?,
        "map": t.index_map(),
    });
    tr.finish(command, ctx.seed, result, &sidecar(out))
}

fn apply(ctx: &Ctx, a: &ApplyArgs, command: Value) -> Result<()> {
    let out = ctx.out()?;
    let mut tr = Tracker::default();
    let t = load_transform(&a.transform, &mut tr)?;
    tr.input(&a.input)?;
    let y = t.apply(&read_npy(&a.input)?)?;
    write_npy(&y, out)?;
    tr.output(out)?;
    tr.finish(command, ctx.seed, Value::Null, &sidecar(out))
}

fn learn(ctx: &Ctx, a: &LearnArgs, command: Value) -> Result<()> {
    let out = ctx.out()?;
    let mut tr = Tracker::default();
    let (t, s) = load_pair(&a.pair, &mut tr)?;
    let cfg = FitConfig { ridge_lambda: a.lambda, lr: a.lr, epochs: a.epochs, hidden: a.hidden, seed: ctx.seed() };
    let (mut transform, result) = if a.kind == "fc" {
        let fit = fit_linear_transform(&t.pooled, &s.pooled, &cfg)?;
        (fit.transform, json!({ "residual_frobenius_sq": fit.residual }))
    } else {
        let fit = fit_residual_transform(&t.pooled, &s.pooled, &cfg)?;
        let curve: String = fit.loss_curve.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")).collect();
        let cp = out.with_extension("loss.csv");
        fs::write(&cp, format!("epoch,mse\n{curve}"))?;
        tr.output(&cp)?;
        let result = json!({ "initial_mse": fit.initial_loss(), "final_mse": fit.final_loss() });
        (fit.transform, result)
    };
    transform.provenance.source_hashes = tr.input_hashes();
    save_transform(&transform, out, &mut tr)?;
    tr.finish(command, ctx.seed, result, &sidecar(out))
}

fn overlap(ctx: &Ctx, a: &OverlapArgs, command: Value) -> Result<()> {
    let out = ctx.out()?;
    let mut tr = Tracker::rooted(out);
    let (t, s) = load_pair(&a.pair, &mut tr)?;
    let labels = match &a.labels {
        Some(p) => {
            tr.input(p)?;
            read_labels(p)?
        }
        None => t.labels.clone().ok_or_else(|| KcdError::Config("--labels is required for .npy inputs".into()))?,
    };
    let teacher = match &a.transform {
        Some(p) => load_transform(p, &mut tr)?.apply(&t.pooled)?,
        None => t.pooled,
    };
    let prof_t = class_average_activations(&teacher, &labels)?;
    let prof_s = class_average_activations(&s.pooled, &labels)?;
    let report = channel_overlap(&prof_t, &prof_s, &a.k)?;
    fs::create_dir_all(out)?;
    let files = [
        ("overlap.csv", report.to_csv()),
        ("overlap.json", serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
        ("profile_teacher.csv", prof_t.to_csv()),
        ("profile_student.csv", prof_s.to_csv()),
    ];
    for (name, text) in files {
        fs::write(out.join(name), text)?;
        tr.output(&out.join(name))?;
    }
    let result = json!({ "k": report.k_values, "mean_overlap": report.mean_overlap });
    tr.finish(command, ctx.seed, result, &out.join("provenance.json"))
}

fn distance(ctx: &Ctx, a: &DistanceArgs, command: Value) -> Result<()> {
    let out = ctx.out()?;
    let mut tr = Tracker::default();
    let (t, s) = load_pair(&a.pair, &mut tr)?;
    let teacher = match &a.transform {
        Some(p) => load_transform(p, &mut tr)?.apply(&t.pooled)?,
        None => t.pooled,
    };
    let report = feature_distance_report(&teacher, &s.pooled)?;
    fs::write(out, serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    tr.output(out)?;
    tr.finish(command, ctx.seed, Value::Null, &sidecar(out))
}

fn template(ctx: &Ctx) -> Result<()> {
    let text = RunConfig::reference(ctx.seed()).to_toml();
    match &ctx.out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn write_text(path: &Path, text: &str, tr: &mut Tracker) -> Result<()> {
    fs::write(path, text)?;
    tr.output(path)
}

fn distill_run(ctx: &Ctx, a: &DistillRunArgs, command: Value) -> Result<()> {
    let out = ctx.out()?;
    let mut tr = Tracker::rooted(out);
    tr.input(&a.config)?;
    let mut cfg = RunConfig::from_toml(&fs::read_to_string(&a.config)?)?;
    if a.reinit_seed.is_some() {
        cfg.student.reinit_seed = a.reinit_seed;
    }
    let pair = train_pair(&cfg)?;
    let outcome = run_outcome(&cfg, &pair)?;
    let report = &outcome.report;

    fs::create_dir_all(out.join("transform"))?;
    fs::create_dir_all(out.join("activations"))?;
    write_text(&out.join("run.toml"), &cfg.to_toml(), &mut tr)?;
    write_text(&out.join("report.json"), &report.to_json(), &mut tr)?;
    write_text(&out.join("curves.csv"), &report.curves_csv(), &mut tr)?;
    match &outcome.transform {
        TransformRef::None => {}
        TransformRef::Single(t) => save_transform(t, &out.join("transform/transform.json"), &mut tr)?,
        TransformRef::PerClass(set) => {
            for (p, t) in set.transforms.iter().enumerate() {
                save_transform(t, &out.join(format!("transform/partition_{p}.json")), &mut tr)?;
            }
            let parts = serde_json::to_string_pretty(&set.class_to_partition).expect("map serializes") + "\n";
            write_text(&out.join("transform/partitions.json"), &parts, &mut tr)?;
        }
    }

    // pooled paired-layer features for external analysis
    let lp = resolve_pairs(&cfg.distill, &pair.teacher, &pair.baseline)[0];
    let (x_test, y_test) = pair.data.test_split();
    let (x_train, y_train) = pair.data.train_split();
    let models = [
        ("teacher", &pair.teacher, lp.teacher_layer),
        ("baseline", &pair.baseline, lp.student_layer),
        ("distilled", &outcome.distilled, lp.student_layer),
    ];
    for (name, model, layer) in models {
        let p = out.join(format!("activations/{name}_test.npy"));
        write_npy(&forward_with_activations(model, &x_test)?.pooled(layer)?.to_tensor(Dtype::F64)?, &p)?;
        tr.output(&p)?;
        let prof = class_average_activations(&forward_with_activations(model, &x_train)?.pooled(layer)?, &y_train)?;
        write_text(&out.join(format!("activations/profile_{name}_train.csv")), &prof.to_csv(), &mut tr)?;
    }
    let p = out.join("activations/labels_test.npy");
    write_labels(&y_test, &p)?;
    tr.output(&p)?;

    let result = json!({
        "teacher_test_acc": report.teacher_test_acc,
        "baseline_test_acc": report.baseline_test_acc,
        "distilled_test_acc": report.distilled_test_acc,
        "gamma_identity": report.gamma.identity,
        "gamma_transformed": report.gamma.transformed,
        "init_mismatch": report.init_mismatch,
        "model_sha256": {
            "teacher": sha256_hex(&pair.teacher.to_bytes()),
            "theta0": sha256_hex(&pair.theta0.to_bytes()),
            "baseline": sha256_hex(&pair.baseline.to_bytes()),
            "distilled": sha256_hex(&outcome.distilled.to_bytes()),
        },
    });
    tr.finish(command, ctx.seed, result, &out.join("provenance.json"))
}

fn synth(ctx: &Ctx, a: &SynthArgs, command: Value) -> Result<()> {
    let out = ctx.out()?;
    let mut tr = Tracker::rooted(out);
    tr.input(&a.spec)?;
    let mut spec: GenSpec = toml::from_str(&fs::read_to_string(&a.spec)?)
        .map_err(|e| KcdError::Config(format!("dataset spec: {e}")))?;
    if let Some(s) = ctx.seed {
        spec.seed = s;
    }
    let ds = make_synthetic_dataset(&spec)?;
    fs::create_dir_all(out)?;
    write_text(&out.join("spec.toml"), &toml::to_string(&spec).expect("spec serializes"), &mut tr)?;
    write_matrix_npy(&ds.inputs, &out.join("inputs.npy"))?;
    tr.output(&out.join("inputs.npy"))?;
    write_matrix_npy(&ds.centers, &out.join("centers.npy"))?;
    tr.output(&out.join("centers.npy"))?;
    write_labels(&ds.labels, &out.join("labels.npy"))?;
    tr.output(&out.join("labels.npy"))?;
    for (name, idx) in [("train_idx", &ds.train), ("test_idx", &ds.test), ("student_train_idx", &ds.student_train)] {
        let p = out.join(format!("{name}.npy"));
        let v: Vec<i64> = idx.iter().map(|&i| i as i64).collect();
        npy::write_i64(&p, &[v.len()], &v)?;
        tr.output(&p)?;
    }
    let result = json!({ "n": spec.n, "train": ds.train.len(), "test": ds.test.len() });
    tr.finish(command, ctx.seed, result, &out.join("provenance.json"))
}
