use std::path::{Path, PathBuf};

use fedlalr::federation::{IntervalSchedule, VhatAggregation};
use fedlalr::harness::{
    audit_trajectory, median, record_trajectory, run_experiment, speedup_alpha, theory_inputs, Algorithm,
    ExperimentConfig, Invariant, MetricsTable, DEFAULT_THRESHOLD,
};
use fedlalr::objectives::global_grad;
use fedlalr::theory::{check_z_identity, fixed_interval_bound, growing_interval_bound};
use fedlalr::Recording;

use crate::config::{parse_document, parse_value, resolve_alias, set_path, ConfigFile};
use crate::error::CliError;

/// Rejects a learning rate above `3ε/(20L)` when the config asks for it.
fn enforce_theory_lr(cfg: &ConfigFile, exp: &ExperimentConfig) -> Result<(), CliError> {
    if !cfg.enforce_theory_lr {
        return Ok(());
    }
    let l = exp.build_problem()?.smoothness().ok_or_else(|| {
        CliError::Config("enforce_theory_lr needs an objective with a closed-form smoothness constant".into())
    })?;
    let eps = exp.run.hp.epsilon;
    let cap = 3.0 * eps / (20.0 * l);
    if exp.run.hp.alpha > cap {
        return Err(CliError::Config(format!(
            "constraint violated: alpha = {} exceeds 3*epsilon/(20L) = {cap} (epsilon = {eps}, L = {l})",
            exp.run.hp.alpha
        )));
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))
}

fn write_table(table: &MetricsTable, path: &Path) -> Result<(), CliError> {
    table
        .write_csv(path)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn report(path: &Path, table: &MetricsTable) {
    let last = table.last();
    println!(
        "{}: rounds={} iters={} loss={:e} grad_norm_sq={:e} avg_grad_norm_sq={:e}",
        path.display(),
        last.round,
        last.iters,
        last.loss,
        last.grad_norm_sq,
        last.avg_grad_norm_sq
    );
}

pub fn run(doc: toml::Table, origin: &Path, name: &str) -> Result<(), CliError> {
    let cfg = parse_document(doc, origin)?;
    let dir = cfg.output_dir();
    let exps = cfg
        .seeds
        .iter()
        .map(|&s| cfg.experiment(s))
        .collect::<Result<Vec<_>, _>>()?;
    for exp in &exps {
        enforce_theory_lr(&cfg, exp)?;
    }
    ensure_dir(&dir)?;
    for exp in &exps {
        let out = run_experiment(exp)?;
        let path = dir.join(format!("{name}_seed{}.csv", exp.run.seed));
        write_table(&out.table, &path)?;
        report(&path, &out.table);
    }
    Ok(())
}

/// Splits `key=v1,v2,...` into the key and its values.
pub fn parse_vary(raw: &str) -> Result<(String, Vec<toml::Value>), CliError> {
    let (key, values) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--vary expects key=v1,v2,..., got `{raw}`")))?;
    let key = key.trim();
    let values: Vec<toml::Value> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(parse_value)
        .collect();
    if key.is_empty() || values.is_empty() {
        return Err(CliError::Usage(format!(
            "--vary `{raw}` needs a key and at least one value"
        )));
    }
    Ok((key.to_string(), values))
}

fn value_label(v: &toml::Value) -> String {
    let text = match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    text.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn sweep(doc: toml::Table, origin: &Path, name: &str, vary: &str) -> Result<(), CliError> {
    let (key, values) = parse_vary(vary)?;
    let label_key: String = key
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();

    let mut plan: Vec<(String, ConfigFile, Vec<ExperimentConfig>)> = Vec::new();
    for v in &values {
        let mut d = doc.clone();
        set_path(&mut d, &key, v.clone())?;
        let cfg = parse_document(d, origin)?;
        let mut exps = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let mut exp = cfg.experiment(seed)?;
            if cfg.speedup_lr {
                let total = exp.run.schedule.total_iterations(exp.run.rounds).max(1);
                let l = exp.build_problem()?.smoothness();
                exp.run.hp.alpha = speedup_alpha(exp.run.n_clients, total, exp.run.hp.epsilon, l);
            }
            enforce_theory_lr(&cfg, &exp)?;
            exps.push(exp);
        }
        plan.push((value_label(v), cfg, exps));
    }

    let dir = plan[0].1.output_dir();
    ensure_dir(&dir)?;
    let mut summary = String::from(
        "key,value,seeds,median_final_loss,median_final_grad_norm_sq,median_final_avg_grad_norm_sq,\
         median_rounds_to_threshold,median_iters_to_threshold\n",
    );
    for (label, _, exps) in &plan {
        let mut tables = Vec::with_capacity(exps.len());
        for exp in exps {
            let out = run_experiment(exp)?;
            let path = dir.join(format!("{name}_{label_key}{label}_seed{}.csv", exp.run.seed));
            write_table(&out.table, &path)?;
            report(&path, &out.table);
            tables.push(out.table);
        }
        let hit = |t: &MetricsTable, f: fn(&fedlalr::harness::RoundMetrics) -> usize| {
            t.first_within(DEFAULT_THRESHOLD)
                .map_or(f64::INFINITY, |r| f(r) as f64)
        };
        summary.push_str(&format!(
            "{},{},{},{:e},{:e},{:e},{},{}\n",
            resolve_alias(&key),
            label,
            tables.len(),
            median(tables.iter().map(|t| t.last().loss)),
            median(tables.iter().map(|t| t.last().grad_norm_sq)),
            median(tables.iter().map(|t| t.last().avg_grad_norm_sq)),
            median(tables.iter().map(|t| hit(t, |r| r.round))),
            median(tables.iter().map(|t| hit(t, |r| r.iters))),
        ));
    }
    let path: PathBuf = dir.join(format!("{name}_summary.csv"));
    std::fs::write(&path, summary)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    println!("summary: {}", path.display());
    Ok(())
}

struct CheckLog {
    failed: Vec<String>,
}

impl CheckLog {
    fn record(&mut self, name: &str, ok: bool, detail: String) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed.push(name.to_string());
        }
    }

    fn skip(&self, name: &str, why: &str) {
        println!("SKIP {name}: {why}");
    }
}

pub fn check(doc: toml::Table, origin: &Path) -> Result<(), CliError> {
    let cfg = parse_document(doc, origin)?;
    let mut exp = cfg.experiment(cfg.seeds[0])?;
    if exp.algorithm != Algorithm::FedLalr {
        return Err(CliError::Config("check audits FedLALR trajectories only".into()));
    }
    if exp.run.rounds == 0 {
        return Err(CliError::Config("check needs at least one round".into()));
    }
    enforce_theory_lr(&cfg, &exp)?;
    exp.run.recording = Recording::Full;
    let (problem, mut traj) = record_trajectory(&exp)?;
    let hp = exp.run.hp;

    if cfg.check.inject_vhat_fault {
        let round = traj.rounds.len().min(2) - 1;
        let steps = traj.rounds[round]
            .steps
            .as_mut()
            .expect("check records every step");
        let step = steps[0].last_mut().expect("intervals are at least 1");
        step.v_hat_after = step.v_hat_before.map(|v| 0.5 * v);
        println!("note: injected a v_hat fault at round {round}, client 0");
    }

    let mut log = CheckLog { failed: Vec::new() };
    let audit = audit_trajectory(&traj, &hp);
    println!("audited {} states", audit.states_checked);
    let needs_clip = [Invariant::VhatCeiling, Invariant::MomentumBound];
    for inv in [
        Invariant::VhatFloor,
        Invariant::VhatCeiling,
        Invariant::MomentumBound,
        Invariant::EtaBound,
        Invariant::VhatLocalMonotone,
        Invariant::VhatServerMonotone,
    ] {
        if hp.g_inf_clip.is_none() && needs_clip.contains(&inv) {
            log.skip(inv.name(), "no gradient clip configured");
            continue;
        }
        let n = audit.count(inv);
        let detail = match audit.violations.iter().find(|v| v.invariant == inv) {
            Some(v) => format!(
                "{n} violations, first at round {} client {:?} coordinate {}: {:e} vs {:e}",
                v.round, v.client, v.coordinate, v.value, v.limit
            ),
            None => "0 violations".into(),
        };
        log.record(inv.name(), n == 0, detail);
    }

    let z_name = "z-identity";
    if !exp.run.full_participation() {
        log.skip(z_name, "needs full participation");
    } else if exp.run.mode.vhat != VhatAggregation::Average || exp.run.mode.restart_momentum {
        log.skip(z_name, "needs averaged v_hat and communicated momentum");
    } else if exp.run.lr_decay != 1.0 {
        log.skip(z_name, "needs a constant learning rate");
    } else {
        let z = check_z_identity(&traj, &hp, exp.run.mode)?;
        log.record(
            z_name,
            z.max_residual <= cfg.check.z_tolerance,
            format!(
                "max residual {:e} (boundary {:e}, scale {:e}) over {} steps, tolerance {:e}",
                z.max_residual, z.max_boundary_residual, z.magnitude, z.steps_checked, cfg.check.z_tolerance
            ),
        );
    }

    let mut grad_sum = 0.0;
    let mut iters = 0usize;
    for rec in &traj.rounds {
        for k in 1..=rec.interval {
            if let Some(x) = rec.mean_iterate(k) {
                grad_sum += global_grad(&problem.oracles, &x?)?.norms().l2_sq;
                iters += 1;
            }
        }
    }
    let observed = grad_sum / iters.max(1) as f64;
    match theory_inputs(&problem, &exp.run) {
        Err(e) => log.skip("bound", &e.to_string()),
        Ok(inp) => {
            let bound = match exp.run.schedule {
                IntervalSchedule::Fixed(_) => fixed_interval_bound(&inp).map(|b| (b.total, format!("{b:?}"))),
                IntervalSchedule::LogAdaptive { .. } => {
                    growing_interval_bound(&inp, &exp.run.schedule).map(|b| (b.total, format!("{b:?}")))
                }
            };
            match bound {
                Ok((total, terms)) => {
                    println!("bound: {terms}");
                    println!(
                        "bound: observed mean |grad f(x_bar)|^2 = {observed:e}, bound total = {total:e}"
                    );
                }
                Err(e) => log.skip("bound", &e.to_string()),
            }
        }
    }

    if log.failed.is_empty() {
        println!("all audits passed");
        Ok(())
    } else {
        Err(CliError::Audit(log.failed.join(", ")))
    }
}
