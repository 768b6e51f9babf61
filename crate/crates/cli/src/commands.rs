use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use promptprism::evalkit::{
    delimiter_variants, descriptive, ordering_variants, rouge_l_multi, run_refinement, run_sensitivity,
    ExperimentReport, RefinementConfig, RougeConfig, SensitivityConfig, TaskBundle,
};
use promptprism::llm_gateway::{
    annotate_prompt, classify_task, format_correctness, template_checksums, write_review_sheet,
};
use promptprism::perturb::{
    modify_delimiter, normalize_delimiters, parse_escaped, reorder_component, PerturbationSpec,
};
use promptprism::profiler::{render_report, report_json, DatasetProfile, Profiler, RecordMeta};
use promptprism::prompt_model::TagIssue;
use promptprism::{parse_annotated, parse_lenient, serialize, AnnotatedPrompt, Prompt, TagRegistry};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{load_registry, BackendSpec, FileConfig, Format, RunConfig};
use crate::io::{for_each_batch, open_input, open_output, read_to_string, Line};
use crate::{
    AnnotateArgs, CliError, Command, EvalRougeArgs, GlobalArgs, PerturbOp, ProfileArgs, RefineArgs, ReportOut,
    SensitivityArgs, Suite, UsageExt, ValidateArgs,
};

type CmdResult = Result<ExitCode, CliError>;

pub fn run(g: &GlobalArgs, command: Command) -> CmdResult {
    match command {
        Command::Annotate(a) => annotate(g, a),
        Command::Validate(a) => validate(g, a),
        Command::Profile(a) => profile(g, a),
        Command::Perturb { op } => perturb(g, op),
        Command::Refine(a) => refine(g, a),
        Command::EvalRouge(a) => eval_rouge(g, a),
        Command::EvalSensitivity(a) => eval_sensitivity(g, a),
    }
}

fn file_config(g: &GlobalArgs) -> Result<FileConfig, CliError> {
    match &g.config {
        Some(p) => FileConfig::load(p).usage(),
        None => Ok(FileConfig::default()),
    }
}

fn resolve(g: &GlobalArgs, command: &str) -> Result<(RunConfig, TagRegistry), CliError> {
    let file = file_config(g)?;
    let mut backends = file.backends;
    let mock = match (&g.mock_fixture, &g.mock_transcript) {
        (Some(f), _) => Some(BackendSpec::Mock {
            fixture: Some(f.clone()),
            transcript: None,
            default_response: None,
        }),
        (None, Some(t)) => Some(BackendSpec::Mock {
            fixture: None,
            transcript: Some(t.clone()),
            default_response: None,
        }),
        (None, None) => None,
    };
    let mock_given = mock.is_some();
    if let Some(spec) = mock {
        backends.insert("mock".into(), spec);
    }
    let backend = g
        .backend
        .clone()
        .or(file.backend)
        .or_else(|| mock_given.then(|| "mock".to_owned()));
    let mut gateway = file.gateway.unwrap_or_default();
    if let Some(cap) = g.call_cap {
        gateway.call_cap = Some(cap);
    }
    let overlay = g.overlay.clone().or(file.overlay);
    let registry = load_registry(overlay.as_deref()).usage()?;
    let lenient = if g.lenient {
        true
    } else if g.strict {
        false
    } else {
        file.lenient.unwrap_or(false)
    };
    let jobs = g
        .jobs
        .map(usize::from)
        .or(file.jobs)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let run = RunConfig {
        command: command.to_owned(),
        inputs: Vec::new(),
        backend_spec: backend.as_ref().and_then(|b| backends.get(b).cloned()),
        backend,
        overlay,
        registry_checksum: registry.checksum(),
        lenient,
        seed: g.seed.or(file.seed).unwrap_or(0),
        format: g.format.or(file.format).unwrap_or_default(),
        params: serde_json::Value::Null,
        jobs,
        transcript: g.transcript.clone().or(file.transcript),
        gateway,
        backends,
    };
    Ok((run, registry))
}

pub fn print_version(g: &GlobalArgs) -> Result<(), CliError> {
    let file = file_config(g)?;
    let registry = load_registry(g.overlay.as_deref().or(file.overlay.as_deref())).usage()?;
    println!("promptprism {}", env!("CARGO_PKG_VERSION"));
    println!("registry {}", registry.checksum());
    for (name, sum) in template_checksums() {
        println!("template {name} {sum}");
    }
    Ok(())
}

fn warn(line: &Line, e: &anyhow::Error) {
    eprintln!("warning: line {}: {e:#}; skipped", line.number);
}

fn write_line<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// A dataset line: a prompt plus the optional task label written by
/// `annotate --classify` and read by `profile`.
#[derive(Debug, Serialize, Deserialize)]
struct Record {
    #[serde(flatten)]
    prompt: Prompt,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task_type: Option<String>,
}

fn annotate(g: &GlobalArgs, a: AnnotateArgs) -> CmdResult {
    let (mut run, registry) = resolve(g, "annotate")?;
    run.params = json!({ "classify": a.classify });
    run.add_input("input", &a.input)?;
    let backend = run.require_backend().usage()?.to_owned();
    let gw = run.gateway().usage()?;
    let pool = run.pool()?;
    let mut out = open_output(a.output.as_deref())?;
    let mut reviewed: Vec<AnnotatedPrompt> = Vec::new();
    let (mut written, mut skipped) = (0usize, 0usize);

    for_each_batch(open_input(&a.input)?, |batch| {
        let results: Vec<Result<(Record, AnnotatedPrompt, Vec<String>)>> = pool.install(|| {
            batch
                .par_iter()
                .map(|line| {
                    let raw: Prompt = serde_json::from_str(&line.text).context("invalid record")?;
                    let ann = annotate_prompt(&gw, &backend, &registry, &raw)?;
                    let (task_type, warnings) = if a.classify {
                        let label = classify_task(&gw, &backend, &raw)?;
                        (Some(label.value), label.warnings)
                    } else {
                        (None, Vec::new())
                    };
                    let record = Record {
                        prompt: ann.tagged,
                        task_type,
                    };
                    Ok((record, ann.parsed, warnings))
                })
                .collect()
        });
        for (line, result) in batch.iter().zip(results) {
            match result {
                Ok((record, parsed, warnings)) => {
                    for w in warnings {
                        eprintln!("warning: line {}: {w}", line.number);
                    }
                    write_line(&mut out, &record)?;
                    written += 1;
                    if a.review.is_some() {
                        reviewed.push(parsed);
                    }
                }
                Err(e) if run.lenient => {
                    warn(line, &e);
                    skipped += 1;
                }
                Err(e) => return Err(e.context(format!("line {}", line.number))),
            }
        }
        Ok(())
    })?;
    out.flush()?;
    if let Some(path) = &a.review {
        let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_review_sheet(file, &reviewed).map_err(|e| anyhow!(e))?;
    }
    eprintln!(
        "annotate: {written} written, {skipped} skipped, {} backend calls, run config {}",
        gw.calls_made(),
        run.digest()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Serialize)]
struct FormatSummary {
    ratio: f64,
    matched_pairs: usize,
    intended_pairs: usize,
}

#[derive(Debug, Serialize)]
struct Diagnosis {
    line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    components: usize,
    unknown_tags: usize,
    issues: Vec<TagIssue>,
    /// Neighbouring components with the same tag, which annotators should merge.
    adjacent_duplicates: usize,
    format_correctness: Option<FormatSummary>,
}

fn diagnose(line: &Line, registry: &TagRegistry) -> Diagnosis {
    let mut d = Diagnosis {
        line: line.number,
        id: None,
        ok: false,
        error: None,
        components: 0,
        unknown_tags: 0,
        issues: Vec::new(),
        adjacent_duplicates: 0,
        format_correctness: None,
    };
    let prompt: Prompt = match serde_json::from_str(&line.text) {
        Ok(p) => p,
        Err(e) => {
            d.error = Some(format!("invalid record: {e}"));
            return d;
        }
    };
    d.id = prompt.id.clone();
    let (mut matched, mut intended) = (0, 0);
    for msg in &prompt.messages {
        let fc = format_correctness(&msg.content, registry);
        matched += fc.matched_pairs;
        intended += fc.intended_pairs;
    }
    d.format_correctness = Some(FormatSummary {
        ratio: if intended == 0 {
            1.0
        } else {
            matched as f64 / intended as f64
        },
        matched_pairs: matched,
        intended_pairs: intended,
    });
    match parse_lenient(&prompt, registry) {
        Ok(ap) => {
            d.components = ap.component_count();
            d.unknown_tags = ap.diagnostics.unknown_tags;
            d.adjacent_duplicates = ap
                .messages
                .iter()
                .map(|m| {
                    let tags: Vec<_> = m.ordered().map(|c| &c.tag).collect();
                    tags.windows(2).filter(|w| w[0] == w[1]).count()
                })
                .sum();
            d.issues = ap.diagnostics.issues;
        }
        Err(e) => {
            d.error = Some(e.to_string());
            return d;
        }
    }
    match parse_annotated(&prompt, registry) {
        Ok(_) => d.ok = true,
        Err(e) => d.error = Some(e.to_string()),
    }
    d
}

fn validate(g: &GlobalArgs, a: ValidateArgs) -> CmdResult {
    let (mut run, registry) = resolve(g, "validate")?;
    run.add_input("input", &a.input)?;
    let pool = run.pool()?;
    let mut out = open_output(a.output.as_deref())?;
    let (mut total, mut bad) = (0usize, 0usize);
    for_each_batch(open_input(&a.input)?, |batch| {
        let diags: Vec<Diagnosis> = pool.install(|| batch.par_iter().map(|l| diagnose(l, &registry)).collect());
        for d in diags {
            total += 1;
            if !d.ok {
                bad += 1;
                eprintln!("line {}: {}", d.line, d.error.as_deref().unwrap_or("malformed"));
            }
            write_line(&mut out, &d)?;
        }
        Ok(())
    })?;
    out.flush()?;
    eprintln!(
        "validate: {total} records, {bad} malformed, run config {}",
        run.digest()
    );
    Ok(if bad > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn profile(g: &GlobalArgs, a: ProfileArgs) -> CmdResult {
    let (mut run, registry) = resolve(g, "profile")?;
    run.add_input("input", &a.input)?;
    let pool = run.pool()?;
    let profiler = Profiler::new(registry.checksum());
    let mut total = profiler.empty();

    let profile_line = |line: &Line| -> Result<DatasetProfile> {
        let record: Record = serde_json::from_str(&line.text).context("invalid record")?;
        let meta = RecordMeta {
            task_type: record.task_type,
        };
        if run.lenient {
            let ap = parse_lenient(&record.prompt, &registry)?;
            let mut p = profiler.profile_record_with(&ap, &meta);
            if !ap.diagnostics.issues.is_empty() {
                p.add_warning("tag_issues", 1);
            }
            Ok(p)
        } else {
            Ok(profiler.profile_record_with(&parse_annotated(&record.prompt, &registry)?, &meta))
        }
    };
    for_each_batch(open_input(&a.input)?, |batch| {
        let results: Vec<Result<DatasetProfile>> = pool.install(|| batch.par_iter().map(profile_line).collect());
        for (line, result) in batch.iter().zip(results) {
            match result {
                Ok(p) => total.merge_in(&p)?,
                Err(e) if run.lenient => {
                    warn(line, &e);
                    total.add_warning("malformed_record", 1);
                }
                Err(e) => return Err(e.context(format!("line {}", line.number))),
            }
        }
        Ok(())
    })?;

    let digest = run.digest();
    let text = match run.format {
        Format::Json => {
            let mut v = report_json(&total);
            v["run_config_digest"] = json!(digest);
            let mut s = serde_json::to_string_pretty(&v).context("rendering profile")?;
            s.push('\n');
            s
        }
        Format::Markdown => {
            let mut s = render_report(&total, run.format.into());
            s.push_str(&format!("\nrun config digest: `{digest}`\n"));
            s
        }
    };
    let mut out = open_output(a.report.as_deref())?;
    out.write_all(text.as_bytes())?;
    out.flush()?;
    eprintln!("profile: {} records, run config {digest}", total.record_count);
    Ok(ExitCode::SUCCESS)
}

enum Op {
    Reorder {
        component: String,
        position: promptprism::ReorderPosition,
        normalize: Option<String>,
    },
    Delimiter {
        new: String,
        position: promptprism::DelimiterPosition,
    },
}

impl Op {
    fn apply(&self, ap: &mut AnnotatedPrompt, registry: &TagRegistry) -> Result<(), promptprism::PerturbError> {
        match self {
            Op::Reorder {
                component,
                position,
                normalize,
            } => {
                reorder_component(ap, registry, component, *position, false)?;
                if let Some(d) = normalize {
                    normalize_delimiters(ap, d)?;
                }
            }
            Op::Delimiter { new, position } => {
                modify_delimiter(ap, new, *position, false)?;
            }
        }
        Ok(())
    }
}

fn perturb(g: &GlobalArgs, op: PerturbOp) -> CmdResult {
    let (mut run, registry) = resolve(g, "perturb")?;
    let (op, io) = match op {
        PerturbOp::Reorder {
            component,
            position,
            normalize_delimiters,
            io,
        } => {
            let normalize = normalize_delimiters.as_deref().map(parse_escaped).transpose().usage()?;
            run.params = json!({
                "op": "reorder",
                "component": component,
                "position": position,
                "normalize_delimiters": normalize,
                "strip_tags": io.strip_tags,
            });
            (
                Op::Reorder {
                    component,
                    position,
                    normalize,
                },
                io,
            )
        }
        PerturbOp::Delimiter { new, position, io } => {
            let new = parse_escaped(&new).usage()?;
            run.params = json!({ "op": "delimiter", "new": new, "position": position, "strip_tags": io.strip_tags });
            (Op::Delimiter { new, position }, io)
        }
    };
    if let Op::Reorder { component, .. } = &op {
        if registry.lookup_canonical(component).is_none() {
            return Err(CliError::Usage(anyhow!("`{component}` is not a registered tag")));
        }
    }
    run.add_input("input", &io.input)?;

    let apply = |prompt: &Prompt| -> Result<Prompt> {
        let ap = if run.lenient {
            parse_lenient(prompt, &registry)?
        } else {
            parse_annotated(prompt, &registry)?
        };
        let mut changed = ap.clone();
        match op.apply(&mut changed, &registry) {
            Ok(()) => Ok(serialize(&changed, io.strip_tags)),
            Err(e) if run.lenient => {
                eprintln!(
                    "warning: {}: {e}; left unchanged",
                    prompt.id.as_deref().unwrap_or("prompt")
                );
                Ok(serialize(&ap, io.strip_tags))
            }
            Err(e) => Err(e.into()),
        }
    };

    let mut out = open_output(io.output.as_deref())?;
    if is_jsonl(&io.input) {
        let pool = run.pool()?;
        for_each_batch(open_input(&io.input)?, |batch| {
            let results: Vec<Result<Prompt>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|line| apply(&serde_json::from_str(&line.text).context("invalid record")?))
                    .collect()
            });
            for (line, result) in batch.iter().zip(results) {
                match result {
                    Ok(p) => write_line(&mut out, &p)?,
                    Err(e) if run.lenient => warn(line, &e),
                    Err(e) => return Err(e.context(format!("line {}", line.number))),
                }
            }
            Ok(())
        })?;
    } else {
        let prompt: Prompt = serde_json::from_str(&read_to_string(&io.input)?)
            .with_context(|| format!("parsing {}", io.input.display()))?;
        let result = apply(&prompt)?;
        serde_json::to_writer_pretty(&mut out, &result).context("writing prompt")?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    eprintln!("perturb: run config {}", run.digest());
    Ok(ExitCode::SUCCESS)
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

fn load_task(path: &Path) -> Result<TaskBundle> {
    serde_json::from_str(&read_to_string(path)?).with_context(|| format!("parsing task bundle {}", path.display()))
}

fn write_report(report: &ExperimentReport, out: &ReportOut, format: Format) -> Result<()> {
    let primary = match format {
        Format::Json => report.to_json(),
        Format::Markdown => report.to_markdown(),
    };
    let mut w = open_output(out.report.as_deref())?;
    w.write_all(primary.as_bytes())?;
    if !primary.ends_with('\n') {
        w.write_all(b"\n")?;
    }
    w.flush()?;
    if let Some(path) = &out.markdown {
        std::fs::write(path, report.to_markdown()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn refine(g: &GlobalArgs, a: RefineArgs) -> CmdResult {
    let (mut run, registry) = resolve(g, "refine")?;
    run.add_input("task", &a.task)?;
    let backend = run.require_backend().usage()?.to_owned();
    let task = load_task(&a.task)?;
    let mut cfg = RefinementConfig::new(backend);
    cfg.seed = run.seed;
    if let Some(s) = a.strategies {
        cfg.strategies = s;
    }
    if let Some(n) = a.shots {
        cfg.shots = n;
    }
    if let Some(n) = a.variants {
        cfg.variants = n;
    }
    if let Some(n) = a.instances {
        cfg.instances = n;
    }
    if let Some(t) = a.refine_temperature {
        cfg.refine_temperature = t;
    }
    if let Some(n) = a.max_output_tokens {
        cfg.max_output_tokens = n;
    }
    run.params = serde_json::to_value(&cfg).context("serializing config")?;
    let gw = run.gateway().usage()?;
    let pool = run.pool()?;
    let mut report = pool
        .install(|| run_refinement(&gw, &registry, &task, &cfg))
        .map_err(|e| anyhow!(e))?;
    report.provenance.run_config_digest = Some(run.digest());
    write_report(&report, &a.out, run.format)?;
    eprintln!("refine: {} backend calls, run config {}", gw.calls_made(), run.digest());
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Deserialize)]
struct RougePair {
    #[serde(default)]
    id: Option<String>,
    candidate: String,
    #[serde(default)]
    references: Vec<String>,
    #[serde(default)]
    reference: Option<String>,
}

fn eval_rouge(g: &GlobalArgs, a: EvalRougeArgs) -> CmdResult {
    let (mut run, _) = resolve(g, "eval-rouge")?;
    let rouge = RougeConfig::default();
    run.params = json!({ "rouge": rouge.describe() });
    let mut out = open_output(a.output.as_deref())?;

    let Some(input) = &a.input else {
        let candidate = a
            .candidate
            .as_deref()
            .ok_or_else(|| anyhow!("pass --input, or --reference and --candidate"))
            .usage()?;
        writeln!(out, "{:.6}", rouge_l_multi(&a.reference, candidate, &rouge))?;
        out.flush()?;
        return Ok(ExitCode::SUCCESS);
    };
    run.add_input("input", input)?;
    let pool = run.pool()?;
    let mut scores = Vec::new();
    for_each_batch(open_input(input)?, |batch| {
        let results: Vec<Result<(Option<String>, f64)>> = pool.install(|| {
            batch
                .par_iter()
                .map(|line| {
                    let mut pair: RougePair = serde_json::from_str(&line.text).context("invalid record")?;
                    pair.references.extend(pair.reference.take());
                    if pair.references.is_empty() {
                        return Err(anyhow!("record has no reference"));
                    }
                    Ok((pair.id, rouge_l_multi(&pair.references, &pair.candidate, &rouge)))
                })
                .collect()
        });
        for (line, result) in batch.iter().zip(results) {
            match result {
                Ok((id, score)) => {
                    write_line(&mut out, &json!({ "line": line.number, "id": id, "rouge_l": score }))?;
                    scores.push(score);
                }
                Err(e) if run.lenient => warn(line, &e),
                Err(e) => return Err(e.context(format!("line {}", line.number))),
            }
        }
        Ok(())
    })?;
    out.flush()?;
    match descriptive(&scores) {
        Ok(d) => eprintln!(
            "eval-rouge: n={} mean={:.4} std={} ({}), run config {}",
            d.n,
            d.mean,
            d.std.map_or("n/a".to_owned(), |s| format!("{s:.4}")),
            rouge.describe(),
            run.digest()
        ),
        Err(_) => eprintln!("eval-rouge: no records scored"),
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Deserialize)]
struct NamedVariant {
    label: String,
    spec: PerturbationSpec,
}

fn eval_sensitivity(g: &GlobalArgs, a: SensitivityArgs) -> CmdResult {
    let (mut run, registry) = resolve(g, "eval-sensitivity")?;
    run.add_input("prompt", &a.prompt)?;
    run.add_input("task", &a.task)?;
    let backend = run.require_backend().usage()?.to_owned();
    let prompt: Prompt =
        serde_json::from_str(&read_to_string(&a.prompt)?).with_context(|| format!("parsing {}", a.prompt.display()))?;
    let baseline = if run.lenient {
        parse_lenient(&prompt, &registry)
    } else {
        parse_annotated(&prompt, &registry)
    }
    .with_context(|| format!("parsing {}", a.prompt.display()))?;
    let task = load_task(&a.task)?;

    let variants: Vec<(String, PerturbationSpec)> = match &a.variants {
        Some(path) => {
            run.add_input("variants", path)?;
            let list: Vec<NamedVariant> =
                serde_json::from_str(&read_to_string(path)?).with_context(|| format!("parsing {}", path.display()))?;
            list.into_iter().map(|v| (v.label, v.spec)).collect()
        }
        None => {
            let mut v = Vec::new();
            if a.suite.contains(&Suite::Ordering) {
                v.extend(ordering_variants(&baseline, &a.components));
            }
            if a.suite.contains(&Suite::Delimiter) {
                v.extend(delimiter_variants());
            }
            v
        }
    };

    let mut cfg = SensitivityConfig::new(backend);
    cfg.seed = run.seed;
    cfg.remove_tags = !a.keep_tags;
    if let Some(n) = a.runs {
        cfg.runs_per_variant = n;
    }
    if let Some(n) = a.max_output_tokens {
        cfg.max_output_tokens = n;
    }
    run.params = json!({ "config": cfg, "variants": variants });
    let gw = run.gateway().usage()?;
    let pool = run.pool()?;
    let mut report = pool
        .install(|| run_sensitivity(&gw, &registry, &baseline, &variants, &task.instances, &cfg))
        .map_err(|e| anyhow!(e))?;
    report.provenance.run_config_digest = Some(run.digest());
    write_report(&report, &a.out, run.format)?;
    eprintln!(
        "eval-sensitivity: {} variants, {} backend calls, run config {}",
        variants.len(),
        gw.calls_made(),
        run.digest()
    );
    Ok(ExitCode::SUCCESS)
}
