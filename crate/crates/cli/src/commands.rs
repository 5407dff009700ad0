//! The five subcommands: calibrate, train, sweep, analyze, gradstats.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fairclip_core::analysis::{average_disparity, compare_methods, reduction_pct, GapRecord};
use fairclip_core::engine::{subgroup_clip_stats, StepTrace};
use fairclip_core::privacy::{compose, to_epsilon, AccountantState, MechanismEvent};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::experiment::{
    outcome_gaps, planned_steps, prepare, resolve_noise_multiplier, run_single, CompletedRun,
};
use crate::output::{
    fmt_opt, fmt_sig, manifest_path, read_jsonl, read_manifest, write_atomic, Manifest, RunOutcome,
    RunRecord,
};

fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    ExperimentConfig::parse(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// `calibrate`: solve for the noise multiplier, print the per-order
/// epsilon curve, and write a derived config with the multiplier pinned.
pub fn cmd_calibrate(
    config_path: &Path,
    orders_override: &[u32],
    out_dir: &Path,
) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    if config.privacy.epsilon.is_none() {
        return Err(CliError::config(
            "usage: calibrate needs [privacy] epsilon (and delta) in the config".into(),
        ));
    }
    let prepared = prepare(&config)?;
    let orders: Vec<u32> =
        if orders_override.is_empty() { prepared.orders.clone() } else { orders_override.to_vec() };
    let sigma = resolve_noise_multiplier(&config, &prepared, &orders)?;
    let steps = planned_steps(&config, &prepared);

    let mut state = AccountantState::new(orders.clone());
    state = compose(
        &state,
        &MechanismEvent { q: prepared.sampling_rate, sigma, count: steps },
    );
    if config.clip.strategy.is_adaptive() && config.privacy.account_adaptive {
        state = compose(
            &state,
            &MechanismEvent { q: prepared.sampling_rate, sigma: prepared.fraction_noise, count: steps },
        );
    }
    let delta = config.privacy.delta;
    let (epsilon, best_order) =
        to_epsilon(&state, delta).map_err(|e| CliError::calibration(e.to_string()))?;

    println!("noise_multiplier = {}", fmt_sig(sigma));
    println!(
        "epsilon = {} at delta = {} (best order {best_order}, {} steps, q = {}, expected batch {})",
        fmt_sig(epsilon),
        fmt_sig(delta),
        steps,
        fmt_sig(prepared.sampling_rate),
        fmt_sig(prepared.expected_batch)
    );
    println!("order,rdp_total,epsilon_at_order");
    for (order, divergence) in state.orders.iter().zip(&state.divergences) {
        let eps_at_order = divergence + (1.0 / delta).ln() / (f64::from(*order) - 1.0);
        println!("{order},{},{}", fmt_sig(*divergence), fmt_sig(eps_at_order));
    }

    let mut derived = config.clone();
    derived.privacy.noise_multiplier = Some(sigma);
    let path = out_dir.join("calibrated.toml");
    write_atomic(&path, derived.to_toml().as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_run_files(
    out_dir: &Path,
    config: &ExperimentConfig,
    dataset: &str,
    runs: &[CompletedRun],
    failed: &[u64],
    seeds: &[u64],
) -> Result<(), CliError> {
    let mut outputs = Vec::new();
    let mut timings = BTreeMap::new();
    for run in runs {
        let name = format!("run_seed{}.jsonl", run.seed);
        write_atomic(&out_dir.join(&name), crate::output::to_jsonl(&run.records).as_bytes())?;
        timings.insert(name.clone(), run.seconds);
        outputs.push(name);
    }
    let summary = summary_csv(runs, seeds.len(), failed.len(), config.analysis.mean_reduction);
    write_atomic(&out_dir.join("summary.csv"), summary.as_bytes())?;
    outputs.push("summary.csv".into());

    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        method: config.clip.strategy.name().to_string(),
        dataset: dataset.to_string(),
        config_toml: config.to_toml(),
        seeds: seeds.to_vec(),
        outputs,
        failed_seeds: failed.to_vec(),
        wall_clock_seconds: timings,
    };
    write_atomic(
        &manifest_path(out_dir),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes(),
    )?;
    Ok(())
}

fn mean_and_sem(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some((var / n).sqrt()))
}

/// Per-metric mean and standard error over the successful runs.
fn summary_csv(runs: &[CompletedRun], total: usize, failed: usize, mean_reduction: bool) -> String {
    let mut rows: Vec<(String, Vec<f64>)> = vec![
        ("test_loss".into(), runs.iter().map(|r| r.outcome.test_loss).collect()),
        ("test_accuracy".into(), runs.iter().map(|r| r.outcome.test_accuracy).collect()),
        ("test_f1".into(), runs.iter().map(|r| r.outcome.test_f1).collect()),
        ("train_loss".into(), runs.iter().map(|r| r.outcome.train_loss).collect()),
        ("val_loss".into(), runs.iter().map(|r| r.outcome.val_loss).collect()),
        (
            "epsilon".into(),
            runs.iter().filter_map(|r| r.outcome.epsilon).collect(),
        ),
        ("stopped_epoch".into(), runs.iter().map(|r| r.outcome.stopped_epoch as f64).collect()),
        ("best_epoch".into(), runs.iter().map(|r| r.outcome.best_epoch as f64).collect()),
    ];
    let mut gap_rows: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for (attribute, gap) in outcome_gaps(&run.outcome, mean_reduction) {
            gap_rows.entry(format!("gap_{attribute}")).or_default().push(gap);
        }
    }
    rows.extend(gap_rows);

    let mut out = String::from("metric,mean,sem\n");
    for (metric, values) in rows {
        let (mean, sem) = mean_and_sem(&values);
        out.push_str(&format!("{metric},{},{}\n", fmt_opt(mean), fmt_opt(sem)));
    }
    out.push_str(&format!("runs_total,{total},\n"));
    out.push_str(&format!("runs_failed,{failed},\n"));
    out
}

/// `train`: one run at the configured seed.
pub fn cmd_train(config_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    sweep_impl(config_path, 1, None, out_dir)
}

/// `sweep`: k runs at consecutive seeds plus an aggregate summary.
pub fn cmd_sweep(
    config_path: &Path,
    seeds: u64,
    base_seed: Option<u64>,
    out_dir: &Path,
) -> Result<(), CliError> {
    if seeds == 0 {
        return Err(CliError::config("--seeds must be >= 1".into()));
    }
    sweep_impl(config_path, seeds, base_seed, out_dir)
}

fn sweep_impl(
    config_path: &Path,
    seeds: u64,
    base_seed: Option<u64>,
    out_dir: &Path,
) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    let prepared = prepare(&config)?;
    let sigma = resolve_noise_multiplier(&config, &prepared, &prepared.orders)?;

    let base = base_seed.unwrap_or(config.train.seed);
    let seed_list: Vec<u64> = (0..seeds).map(|i| base + i).collect();
    let mut completed = Vec::new();
    let mut failed = Vec::new();
    for &seed in &seed_list {
        match run_single(&config, &prepared, sigma, seed) {
            Ok(run) => {
                println!(
                    "seed {seed}: test_loss {} accuracy {} f1 {} epsilon {}",
                    fmt_sig(run.outcome.test_loss),
                    fmt_sig(run.outcome.test_accuracy),
                    fmt_sig(run.outcome.test_f1),
                    fmt_opt(run.outcome.epsilon),
                );
                completed.push(run);
            }
            Err(e) => {
                eprintln!("seed {seed} failed: {e}");
                failed.push(seed);
            }
        }
    }
    write_run_files(out_dir, &config, &prepared.dataset_name, &completed, &failed, &seed_list)?;
    println!("wrote {} run file(s) + summary.csv in {}", completed.len(), out_dir.display());
    if completed.is_empty() {
        return Err(CliError::training("every run failed".into()));
    }
    Ok(())
}

struct MethodRuns {
    label: String,
    dataset: String,
    outcomes: Vec<(u64, RunOutcome)>,
    traces: Vec<StepTrace>,
}

fn read_method_dir(dir: &Path) -> Result<MethodRuns, CliError> {
    let manifest = read_manifest(dir).map_err(CliError::config)?;
    let mut outcomes = Vec::new();
    let mut traces = Vec::new();
    for name in &manifest.outputs {
        if !name.ends_with(".jsonl") {
            continue;
        }
        let records = read_jsonl(&dir.join(name)).map_err(CliError::config)?;
        let mut seed = None;
        for record in records {
            match record {
                RunRecord::Meta(meta) => seed = Some(meta.seed),
                RunRecord::Step(step) => traces.push(step),
                RunRecord::Result(outcome) => {
                    let seed = seed.ok_or_else(|| {
                        CliError::config(format!("{name}: result before meta record"))
                    })?;
                    outcomes.push((seed, outcome));
                }
                RunRecord::Epoch { .. } => {}
            }
        }
    }
    Ok(MethodRuns { label: manifest.method, dataset: manifest.dataset, outcomes, traces })
}

/// `analyze`: disparity, reduction, and significance tables over two or
/// more result directories.
pub fn cmd_analyze(dirs: &[PathBuf], mean_reduction: bool, out_dir: &Path) -> Result<(), CliError> {
    if dirs.len() < 2 {
        return Err(CliError::config("analyze needs at least two result directories".into()));
    }
    let mut methods: BTreeMap<String, MethodRuns> = BTreeMap::new();
    for dir in dirs {
        let mut runs = read_method_dir(dir)?;
        if methods.contains_key(&runs.label) {
            let disambiguated = format!(
                "{}#{}",
                runs.label,
                dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
            );
            runs.label = disambiguated;
        }
        methods.insert(runs.label.clone(), runs);
    }

    // per-method gap records and disparity files
    let mut gap_records: BTreeMap<String, Vec<GapRecord>> = BTreeMap::new();
    for (label, runs) in &methods {
        let mut csv = String::from("seed,dataset,attribute,gap\n");
        let mut records = Vec::new();
        for (seed, outcome) in &runs.outcomes {
            for (attribute, gap) in outcome_gaps(outcome, mean_reduction) {
                csv.push_str(&format!("{seed},{},{attribute},{}\n", runs.dataset, fmt_sig(gap)));
                records.push(GapRecord {
                    seed: *seed,
                    dataset: runs.dataset.clone(),
                    attribute,
                    gap,
                });
            }
        }
        write_atomic(&out_dir.join(format!("disparity_{label}.csv")), csv.as_bytes())?;
        gap_records.insert(label.clone(), records);
    }

    // plot-ready summaries: loss gaps per (method, attribute) and overall
    // losses per (method, split), mean with standard error over seeds
    let mut gap_summary = String::from("method,attribute,n,mean_gap,sem\n");
    for (label, records) in &gap_records {
        let mut per_attr: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in records {
            per_attr.entry(r.attribute.as_str()).or_default().push(r.gap);
        }
        for (attribute, gaps) in per_attr {
            let (mean, sem) = mean_and_sem(&gaps);
            gap_summary.push_str(&format!(
                "{label},{attribute},{},{},{}\n",
                gaps.len(),
                fmt_opt(mean),
                fmt_opt(sem)
            ));
        }
    }
    write_atomic(&out_dir.join("lossgap_summary.csv"), gap_summary.as_bytes())?;

    let mut loss_summary = String::from("method,split,n,mean_loss,sem\n");
    for (label, runs) in &methods {
        for (split, extract) in [
            ("train", (|o: &RunOutcome| o.train_loss) as fn(&RunOutcome) -> f64),
            ("validation", |o| o.val_loss),
            ("test", |o| o.test_loss),
        ] {
            let values: Vec<f64> = runs.outcomes.iter().map(|(_, o)| extract(o)).collect();
            let (mean, sem) = mean_and_sem(&values);
            loss_summary.push_str(&format!(
                "{label},{split},{},{},{}\n",
                values.len(),
                fmt_opt(mean),
                fmt_opt(sem)
            ));
        }
    }
    write_atomic(&out_dir.join("overall_loss_summary.csv"), loss_summary.as_bytes())?;

    // average disparity per (dataset, method): mean gap per attribute over
    // seeds, then the mean across attributes
    let mut disparity: BTreeMap<(String, String), f64> = BTreeMap::new();
    for (label, records) in &gap_records {
        let mut by_dataset: BTreeMap<&str, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
        for r in records {
            by_dataset
                .entry(r.dataset.as_str())
                .or_default()
                .entry(r.attribute.as_str())
                .or_default()
                .push(r.gap);
        }
        for (dataset, per_attr) in by_dataset {
            let gaps: BTreeMap<String, f64> = per_attr
                .into_iter()
                .map(|(attr, gaps)| {
                    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
                    (attr.to_string(), mean)
                })
                .collect();
            let avg = average_disparity(&gaps).map_err(|e| CliError::config(e.to_string()))?;
            disparity.insert((dataset.to_string(), label.clone()), avg);
        }
    }

    let mut reductions = String::from("dataset,baseline,method,baseline_disparity,method_disparity,reduction_pct\n");
    for ((dataset_a, baseline), base_value) in &disparity {
        for ((dataset_b, method), value) in &disparity {
            if dataset_a != dataset_b || baseline == method {
                continue;
            }
            let pct = reduction_pct(*base_value, *value)
                .map_err(|e| CliError::config(e.to_string()))?;
            reductions.push_str(&format!(
                "{dataset_a},{baseline},{method},{},{},{}\n",
                fmt_sig(*base_value),
                fmt_sig(*value),
                fmt_sig(pct)
            ));
        }
    }
    write_atomic(&out_dir.join("reductions.csv"), reductions.as_bytes())?;

    // pairwise Wilcoxon with Bonferroni over the number of method pairs
    let comparisons = compare_methods(&gap_records).map_err(|e| match e {
        fairclip_core::analysis::AnalysisError::UnpairedData(keys) => {
            CliError::pairing(format!("unpaired data: {keys:?}"))
        }
        other => CliError::config(other.to_string()),
    })?;
    let m = comparisons.len();
    let mut significance =
        String::from("method_a,method_b,n_pairs,w_statistic,p_raw,m_comparisons,p_corrected,kind\n");
    for c in &comparisons {
        let kind = match (c.p_value, c.exact) {
            (None, _) => "no-difference",
            (Some(_), Some(true)) => "exact",
            _ => "normal-approx",
        };
        significance.push_str(&format!(
            "{},{},{},{},{},{m},{},{kind}\n",
            c.method_a,
            c.method_b,
            c.n_pairs,
            fmt_opt(c.statistic),
            fmt_opt(c.p_value),
            fmt_opt(c.p_corrected),
        ));
    }
    write_atomic(&out_dir.join("significance.csv"), significance.as_bytes())?;

    println!(
        "analyzed {} methods -> {}: disparity_*.csv, lossgap_summary.csv, overall_loss_summary.csv, reductions.csv, significance.csv",
        methods.len(),
        out_dir.display()
    );
    Ok(())
}

/// `gradstats`: Before -> After (Diff) clipping table for one result dir.
pub fn cmd_gradstats(dir: &Path, out_dir: &Path) -> Result<(), CliError> {
    let runs = read_method_dir(dir)?;
    if runs.traces.iter().all(|t| t.subgroups.is_empty()) {
        return Err(CliError::traces(format!("{}: no step traces with subgroup norms", dir.display())));
    }
    let stats = subgroup_clip_stats(&runs.traces)
        .map_err(|e| CliError::traces(e.to_string()))?;

    // subgroup universe from the evaluation reports, so subgroups that
    // never appeared in a batch render as missing
    let mut universe: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (_, outcome) in &runs.outcomes {
        for (attribute, groups) in &outcome.subgroups.groups {
            let entry = universe.entry(attribute.clone()).or_default();
            for group in groups.keys() {
                if !entry.contains(group) {
                    entry.push(group.clone());
                }
            }
        }
    }
    for s in &stats {
        let entry = universe.entry(s.attribute.clone()).or_default();
        if !entry.contains(&s.group) {
            entry.push(s.group.clone());
        }
    }

    let mut csv = String::from("method,attribute,group,before,after,diff,steps_observed\n");
    for (attribute, groups) in &universe {
        for group in groups {
            match stats.iter().find(|s| &s.attribute == attribute && &s.group == group) {
                Some(s) => csv.push_str(&format!(
                    "{},{attribute},{group},{},{},{},{}\n",
                    runs.label,
                    fmt_sig(s.mean_pre_clip),
                    fmt_sig(s.mean_post_clip),
                    fmt_sig(s.mean_diff),
                    s.steps_observed
                )),
                None => csv.push_str(&format!("{},{attribute},{group},--,--,--,0\n", runs.label)),
            }
        }
    }
    write_atomic(&out_dir.join("gradstats.csv"), csv.as_bytes())?;
    println!("wrote {}", out_dir.join("gradstats.csv").display());
    Ok(())
}
