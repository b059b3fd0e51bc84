//! One function per subcommand. Each resolves its parameters from the run
//! configuration plus flag overrides, honors `--dry-run` by printing the
//! resolved plan and writing nothing, and reports artifacts on stdout.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use layerswap_core::config::RunConfig;
use layerswap_core::delta::{analyze_stack, report_to_csv};
use layerswap_core::filter::{
    chunk_text, compile_reference_patterns, filter_pairs, read_pairs_jsonl, CharEstimator,
    FilterOutcome, SidecarCounts, TokenEstimator,
};
use layerswap_core::lid::{self, fidelity_with_prefix, profiles_from_json, read_traces_jsonl};
use layerswap_core::report::ReportEnvelope;
use layerswap_core::store::{group_layers, open_checkpoint, CheckpointHandle, LayerMap};
use layerswap_core::surgery::{plan_sweep, swap_layers, validate_compat, SwapPlan};
use serde::Serialize;

use crate::{
    io_at, AnalyzeArgs, ChunkArgs, CliError, FidelityArgs, FilterArgs, SwapArgs, SweepArgs,
    TrainProfilesArgs, VERSION,
};

// ─────────────────────────────────────────────────────────────────────────
// Shared plumbing
// ─────────────────────────────────────────────────────────────────────────

/// Parse repeated `label=path` values.
fn parse_labeled(values: &[String], flag: &str) -> Result<Vec<(String, PathBuf)>, CliError> {
    values
        .iter()
        .map(|v| match v.split_once('=') {
            Some((label, path)) if !label.is_empty() && !path.is_empty() => {
                Ok((label.to_string(), PathBuf::from(path)))
            }
            _ => Err(CliError::Usage(format!("{flag} takes LABEL=FILE, got `{v}`"))),
        })
        .collect()
}

fn stem_label(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "?".to_string())
}

/// Print the resolved plan of a dry run: the command, the full resolved
/// configuration, and the command-specific parameters.
fn print_plan(command: &str, config: &RunConfig, plan: serde_json::Value) {
    let object = serde_json::json!({
        "command": command,
        "dry_run": true,
        "config": config,
        "plan": plan,
    });
    println!("{}", serde_json::to_string_pretty(&object).expect("plan serializes"));
}

/// Write a report to the given file (announcing it on stdout) or print it.
fn emit_report<T: Serialize>(
    envelope: &ReportEnvelope<T>,
    path: Option<&PathBuf>,
    announce: &str,
) -> Result<(), CliError> {
    let json = envelope.to_json_pretty();
    match path {
        Some(p) => {
            fs::write(p, json).map_err(io_at(p))?;
            println!("{announce} → {}", p.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn layer_map_for(config: &RunConfig, handle: &CheckpointHandle) -> Result<LayerMap, CliError> {
    Ok(group_layers(handle, &config.layer_pattern, &config.pre_prefixes)?)
}

// ─────────────────────────────────────────────────────────────────────────
// analyze
// ─────────────────────────────────────────────────────────────────────────

pub fn analyze(config: &RunConfig, args: &AnalyzeArgs, dry_run: bool) -> Result<(), CliError> {
    let specialists = parse_labeled(&args.specialists, "--specialist")?;
    if specialists.len() < 2 {
        return Err(CliError::Usage(format!(
            "need at least two --specialist values, got {}",
            specialists.len()
        )));
    }

    let base = open_checkpoint(&args.base)?;
    let map = layer_map_for(config, &base)?;

    if dry_run {
        print_plan(
            "analyze",
            config,
            serde_json::json!({
                "base": args.base,
                "specialists": specialists,
                "num_layers": map.num_layers,
                "groups": map.groups().map(|g| g.to_string()).collect::<Vec<_>>(),
                "report": args.report,
                "csv": args.csv,
            }),
        );
        return Ok(());
    }

    let handles: Vec<(String, CheckpointHandle)> = specialists
        .iter()
        .map(|(label, path)| Ok((label.clone(), open_checkpoint(path)?)))
        .collect::<Result<_, CliError>>()?;
    let refs: Vec<(String, &CheckpointHandle)> =
        handles.iter().map(|(l, h)| (l.clone(), h)).collect();

    let report = analyze_stack(&refs, &base, &map, config.chunk_size_bytes)?;
    if let Some(csv) = &args.csv {
        fs::write(csv, report_to_csv(&report)).map_err(io_at(csv))?;
        println!("per-layer csv → {}", csv.display());
    }

    let mut envelope = ReportEnvelope::new(VERSION, config.clone(), report)
        .with_input("base", &args.base)
        .map_err(io_at(&args.base))?;
    for (label, path) in &specialists {
        envelope = envelope.with_input(label, path).map_err(io_at(path))?;
    }
    emit_report(&envelope, args.report.as_ref(), "analysis report")
}

// ─────────────────────────────────────────────────────────────────────────
// swap
// ─────────────────────────────────────────────────────────────────────────

fn parse_window(s: &str) -> Result<(usize, usize), CliError> {
    let err = || CliError::Usage(format!("--window takes START:END layer indices, got `{s}`"));
    let (a, b) = s.split_once(':').ok_or_else(err)?;
    Ok((a.trim().parse().map_err(|_| err())?, b.trim().parse().map_err(|_| err())?))
}

pub fn swap(config: &RunConfig, args: &SwapArgs, dry_run: bool) -> Result<(), CliError> {
    let target = open_checkpoint(&args.target)?;
    let source = open_checkpoint(&args.source)?;
    let map = layer_map_for(config, &target)?;
    let target_label = args.target_label.clone().unwrap_or_else(|| stem_label(&args.target));
    let source_label = args.source_label.clone().unwrap_or_else(|| stem_label(&args.source));

    let (plans, out_dir): (Vec<SwapPlan>, PathBuf) = match (&args.window, &args.plan) {
        (Some(window), None) => {
            let out = args.out.clone().ok_or_else(|| {
                CliError::Usage("--window mode needs --out for the swapped checkpoint".to_string())
            })?;
            let plan = SwapPlan {
                target_label,
                source_label,
                window: parse_window(window)?,
                output_name: out
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .ok_or_else(|| {
                        CliError::Usage(format!("--out `{}` has no file name", out.display()))
                    })?,
            };
            (vec![plan], out.parent().unwrap_or_else(|| Path::new(".")).to_path_buf())
        }
        (None, Some(plan_path)) => {
            let text = fs::read_to_string(plan_path).map_err(io_at(plan_path))?;
            let plans: Vec<SwapPlan> = serde_json::from_str(&text).map_err(|e| {
                CliError::Format(format!("{}: not a swap plan list: {e}", plan_path.display()))
            })?;
            if plans.is_empty() {
                return Err(CliError::Usage(format!(
                    "{}: the plan list is empty",
                    plan_path.display()
                )));
            }
            (plans, args.out_dir.clone().unwrap_or_else(|| PathBuf::from(".")))
        }
        _ => {
            return Err(CliError::Usage(
                "give exactly one of --window START:END or --plan FILE".to_string(),
            ))
        }
    };

    if dry_run {
        // Validate what a real run would validate, then show the plan.
        let compat = validate_compat(&target, &source);
        if !compat.compatible {
            return Err(SurgeryIncompat(compat).into());
        }
        for plan in &plans {
            let (start, end) = plan.window;
            if start > end || end >= map.num_layers {
                return Err(CliError::Usage(format!(
                    "window {start}:{end} out of range for {} layers",
                    map.num_layers
                )));
            }
        }
        print_plan(
            "swap",
            config,
            serde_json::json!({
                "target": args.target,
                "source": args.source,
                "out_dir": out_dir,
                "plans": plans,
            }),
        );
        return Ok(());
    }

    fs::create_dir_all(&out_dir).map_err(io_at(&out_dir))?;
    for plan in &plans {
        let out_path = out_dir.join(&plan.output_name);
        swap_layers(&target, &source, plan, &map, &out_path)?;
        println!("wrote {} (layers {} from {})", out_path.display(), plan.window_str(), plan.source_label);
    }
    Ok(())
}

/// Wrap a failed compatibility report in the module's own error so the
/// message and exit code match the non-dry-run path.
struct SurgeryIncompat(layerswap_core::surgery::CompatReport);

impl From<SurgeryIncompat> for CliError {
    fn from(v: SurgeryIncompat) -> CliError {
        CliError::from(layerswap_core::surgery::SurgeryError::Incompatible { report: v.0 })
    }
}

// ─────────────────────────────────────────────────────────────────────────
// sweep
// ─────────────────────────────────────────────────────────────────────────

pub fn sweep(config: &RunConfig, args: &SweepArgs, dry_run: bool) -> Result<(), CliError> {
    let starts: Option<Vec<usize>> = match &args.starts {
        Some(list) => Some(
            list.split(',')
                .map(|v| {
                    v.trim().parse().map_err(|_| {
                        CliError::Usage(format!("--starts takes comma-separated indices, got `{v}`"))
                    })
                })
                .collect::<Result<_, _>>()?,
        ),
        None => None,
    };

    // Layer count comes from the target checkpoint when given, otherwise
    // from --layers; when both are given they must agree.
    let opened: Option<(CheckpointHandle, LayerMap)> = match &args.target {
        Some(path) => {
            let handle = open_checkpoint(path)?;
            let map = layer_map_for(config, &handle)?;
            Some((handle, map))
        }
        None => None,
    };
    let num_layers = match (&opened, args.layers) {
        (Some((_, map)), Some(n)) if map.num_layers != n => {
            return Err(CliError::Usage(format!(
                "--layers {n} disagrees with the target checkpoint ({} layers)",
                map.num_layers
            )));
        }
        (Some((_, map)), _) => map.num_layers,
        (None, Some(n)) => n,
        (None, None) => {
            return Err(CliError::Usage("give --target or --layers".to_string()));
        }
    };

    let target_label = args
        .target_label
        .clone()
        .or_else(|| args.target.as_deref().map(stem_label))
        .unwrap_or_else(|| "target".to_string());
    let source_label = args
        .source_label
        .clone()
        .or_else(|| args.source.as_deref().map(stem_label))
        .unwrap_or_else(|| "source".to_string());

    let plans = plan_sweep(num_layers, args.width, starts.as_deref(), args.stride, &target_label, &source_label)?;
    let plans_json = serde_json::to_string_pretty(&plans).expect("plans serialize");

    if dry_run {
        println!("{plans_json}");
        return Ok(());
    }

    if let Some(path) = &args.plan_out {
        fs::write(path, &plans_json).map_err(io_at(path))?;
        println!("plan list → {}", path.display());
    }

    match (&opened, &args.source) {
        (Some((target, map)), Some(source_path)) => {
            let source = open_checkpoint(source_path)?;
            let out_dir = args.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
            fs::create_dir_all(&out_dir).map_err(io_at(&out_dir))?;
            for plan in &plans {
                let out_path = out_dir.join(&plan.output_name);
                swap_layers(target, &source, plan, map, &out_path)?;
                println!("wrote {} (layers {})", out_path.display(), plan.window_str());
            }
        }
        (None, Some(_)) => {
            return Err(CliError::Usage(
                "executing a sweep needs --target as a checkpoint file".to_string(),
            ));
        }
        (_, None) => {
            if args.out_dir.is_some() {
                return Err(CliError::Usage(
                    "executing a sweep needs --source; without it only the plan is produced"
                        .to_string(),
                ));
            }
            if args.plan_out.is_none() {
                println!("{plans_json}");
            }
        }
    }
    Ok(())
}

// ─────────────────────────────────────────────────────────────────────────
// fidelity
// ─────────────────────────────────────────────────────────────────────────

pub fn fidelity(config: &RunConfig, args: &FidelityArgs, dry_run: bool) -> Result<(), CliError> {
    let profiles_text = fs::read_to_string(&args.profiles).map_err(io_at(&args.profiles))?;
    let profiles = profiles_from_json(&profiles_text)?;
    let traces_file = fs::File::open(&args.traces).map_err(io_at(&args.traces))?;
    let traces = read_traces_jsonl(BufReader::new(traces_file))?;

    if dry_run {
        print_plan(
            "fidelity",
            config,
            serde_json::json!({
                "traces": args.traces,
                "trace_count": traces.len(),
                "target": args.target,
                "labels": profiles.iter().map(|p| p.label.clone()).collect::<Vec<_>>(),
                "prefix_chars": args.prefix_chars,
                "report": args.report,
            }),
        );
        return Ok(());
    }

    let report = fidelity_with_prefix(&traces, &args.target, &profiles, args.prefix_chars)?;
    let summary = format!(
        "fidelity {:.4} ({} of {} traces classified {})",
        report.fidelity,
        report.per_label_counts.get(&args.target).copied().unwrap_or(0),
        report.total,
        args.target
    );
    let envelope = ReportEnvelope::new(VERSION, config.clone(), report)
        .with_input("traces", &args.traces)
        .map_err(io_at(&args.traces))?
        .with_input("profiles", &args.profiles)
        .map_err(io_at(&args.profiles))?;
    emit_report(&envelope, args.report.as_ref(), &summary)
}

// ─────────────────────────────────────────────────────────────────────────
// filter
// ─────────────────────────────────────────────────────────────────────────

/// Counts carried in the filter summary report.
#[derive(Serialize)]
struct FilterSummary {
    total: usize,
    kept: usize,
    dropped: usize,
    reason_counts: BTreeMap<String, usize>,
    warnings: Vec<String>,
}

pub fn filter(config: &RunConfig, args: &FilterArgs, dry_run: bool) -> Result<(), CliError> {
    let mut config = config.clone();
    if let Some(k) = args.k_sigma {
        config.k_sigma = k;
    }
    if let Some(m) = args.max_tokens {
        config.max_tokens = m;
    }
    config.validate()?;

    let pairs_file = fs::File::open(&args.pairs).map_err(io_at(&args.pairs))?;
    let pairs = read_pairs_jsonl(BufReader::new(pairs_file))?;

    if dry_run {
        print_plan(
            "filter",
            &config,
            serde_json::json!({
                "pairs": args.pairs,
                "pair_count": pairs.len(),
                "estimator": if args.sidecar.is_some() { "sidecar" } else { "chars" },
                "sidecar": args.sidecar,
                "report": args.report,
                "summary": args.summary,
            }),
        );
        return Ok(());
    }

    let patterns: Vec<&str> = config.self_reference_patterns.iter().map(String::as_str).collect();
    let compiled = compile_reference_patterns(&patterns)?;
    let fallback = CharEstimator::new(config.chars_per_token);

    let outcome: FilterOutcome = match &args.sidecar {
        Some(path) => {
            let file = fs::File::open(path).map_err(io_at(path))?;
            let counts = SidecarCounts::from_jsonl(BufReader::new(file), fallback)?;
            for id in counts.missing_ids(&pairs) {
                eprintln!("warning: no sidecar counts for `{id}`; using the character estimator");
            }
            filter_pairs(&pairs, &compiled, config.k_sigma, config.max_tokens, &counts)?
        }
        None => filter_pairs(&pairs, &compiled, config.k_sigma, config.max_tokens, &fallback)?,
    };
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }

    let mut lines = String::new();
    for v in &outcome.verdicts {
        lines.push_str(&serde_json::to_string(v).expect("verdicts serialize"));
        lines.push('\n');
    }
    fs::write(&args.report, lines).map_err(io_at(&args.report))?;

    if let Some(path) = &args.summary {
        let mut reason_counts: BTreeMap<String, usize> = BTreeMap::new();
        for v in &outcome.verdicts {
            for r in &v.reasons {
                let key = serde_json::to_value(r).expect("reasons serialize");
                *reason_counts.entry(key.as_str().unwrap_or("?").to_string()).or_insert(0) += 1;
            }
        }
        let summary = FilterSummary {
            total: outcome.verdicts.len(),
            kept: outcome.kept(),
            dropped: outcome.dropped(),
            reason_counts,
            warnings: outcome.warnings.clone(),
        };
        let mut envelope = ReportEnvelope::new(VERSION, config.clone(), summary)
            .with_input("pairs", &args.pairs)
            .map_err(io_at(&args.pairs))?;
        if let Some(sidecar) = &args.sidecar {
            envelope = envelope.with_input("sidecar", sidecar).map_err(io_at(sidecar))?;
        }
        fs::write(path, envelope.to_json_pretty()).map_err(io_at(path))?;
        println!("summary → {}", path.display());
    }

    println!(
        "kept {} of {} pairs ({} dropped) → {}",
        outcome.kept(),
        outcome.verdicts.len(),
        outcome.dropped(),
        args.report.display()
    );
    Ok(())
}

// ─────────────────────────────────────────────────────────────────────────
// train-profiles
// ─────────────────────────────────────────────────────────────────────────

pub fn train_profiles(
    config: &RunConfig,
    args: &TrainProfilesArgs,
    dry_run: bool,
) -> Result<(), CliError> {
    let sources = parse_labeled(&args.corpora, "--corpus")?;
    let mut corpora: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (label, path) in &sources {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        let docs: Vec<String> =
            text.lines().filter(|l| !l.trim().is_empty()).map(String::from).collect();
        if corpora.insert(label.clone(), docs).is_some() {
            return Err(CliError::Usage(format!("duplicate corpus label `{label}`")));
        }
    }
    let k = args.profile_size.unwrap_or(config.profile_size);

    if dry_run {
        print_plan(
            "train-profiles",
            config,
            serde_json::json!({
                "corpora": corpora
                    .iter()
                    .map(|(label, docs)| (label.clone(), docs.len()))
                    .collect::<BTreeMap<String, usize>>(),
                "profile_size": k,
                "out": args.out,
            }),
        );
        return Ok(());
    }

    let profiles = lid::train_profiles(&corpora, k)?;
    fs::write(&args.out, lid::profiles_to_json(&profiles)).map_err(io_at(&args.out))?;
    println!("trained {} profiles (K = {k}) → {}", profiles.len(), args.out.display());
    Ok(())
}

// ─────────────────────────────────────────────────────────────────────────
// chunk
// ─────────────────────────────────────────────────────────────────────────

pub fn chunk(config: &RunConfig, args: &ChunkArgs, dry_run: bool) -> Result<(), CliError> {
    let budget = args.budget.unwrap_or(config.chunk_budget);
    let text = match &args.input {
        Some(path) => fs::read_to_string(path).map_err(io_at(path))?,
        None => {
            let mut buf = String::new();
            std::io::stdin()
                .read_to_string(&mut buf)
                .map_err(|e| CliError::Io(format!("stdin: {e}")))?;
            buf
        }
    };
    let estimator = CharEstimator::new(config.chars_per_token);

    if dry_run {
        print_plan(
            "chunk",
            config,
            serde_json::json!({
                "budget": budget,
                "input": args.input,
                "chars": text.chars().count(),
                "token_estimate": estimator.estimate(&text),
                "out": args.out,
            }),
        );
        return Ok(());
    }

    let chunks = chunk_text(&text, budget, &estimator)?;
    let mut lines = String::new();
    for (index, chunk) in chunks.iter().enumerate() {
        let line = serde_json::json!({
            "index": index,
            "token_estimate": estimator.estimate(chunk),
            "text": chunk,
        });
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    match &args.out {
        Some(path) => {
            fs::write(path, lines).map_err(io_at(path))?;
            println!("{} chunks → {}", chunks.len(), path.display());
        }
        None => print!("{lines}"),
    }
    Ok(())
}
