use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use sca_core::analysis::{correlation_report, ecdf, significance, CorrelationReport};
use sca_core::attacks::{adversarial_train, robust_accuracy, AttackConfig, LossKind};
use sca_core::datasets::{ensure_files, Dataset, Source, Split};
use sca_core::nn::{evaluate, load_checkpoint, save_checkpoint, train, History, Model};

use crate::config::{ExperimentConfig, Preset};
use crate::data::{dataset_label, load, test_subset};
use crate::error::CliError;
use crate::output::{fmt_f, log_line, write_csv, write_json, Provenance, VERSION};

pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub data_dir: PathBuf,
    pub offline: bool,
    pub workers: usize,
}

impl Context {
    fn provenance(&self) -> Provenance {
        Provenance {
            tool: "sca-lab",
            version: VERSION,
            config: self.cfg.name.clone(),
            config_sha256: self.cfg.hash(),
            seeds: self.cfg.seeds.clone(),
        }
    }

    fn dataset(&self) -> Result<Dataset, CliError> {
        log_line(&self.out, &format!("loading {}", dataset_label(&self.cfg)));
        load(&self.cfg, &self.data_dir, self.offline)
    }

    fn run_jobs<J: Sync, T: Send>(
        &self,
        jobs: &[J],
        f: impl Fn(&J) -> Result<T, CliError> + Sync + Send,
    ) -> Result<Vec<T>, CliError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers.max(1))
            .build()
            .map_err(|e| CliError::Other(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(&f).collect())
    }

    fn model_dir(&self, root: &Path, preset: Preset, seed: u64) -> PathBuf {
        root.join(preset.name()).join(format!("seed-{seed}"))
    }

    fn attack_template(&self, ds: &Dataset) -> AttackConfig {
        AttackConfig {
            epsilon: 1.0,
            steps: self.cfg.attack_steps(),
            step_size: self.cfg.attack.step_ratio,
            loss: LossKind::CrossEntropy,
            restarts: self.cfg.attack.restarts,
            range: ds.range,
            seed: self.cfg.attack.seed,
        }
    }

    pub fn save_config(&self) -> Result<(), CliError> {
        write_json(&self.out.join("config.json"), &self.provenance(), &self.cfg)
    }
}

#[derive(Serialize)]
struct TrainSummary {
    model: String,
    seed: u64,
    train_epsilon: f64,
    epochs: usize,
    best_epoch: usize,
    best_val_loss: f64,
    halvings: usize,
    stopped_early: bool,
    test_accuracy: f64,
    attack_calls: usize,
}

fn train_one(
    ctx: &Context,
    ds: &Dataset,
    preset: Preset,
    seed: u64,
    epsilon: Option<f64>,
) -> Result<TrainSummary, CliError> {
    let cfg = &ctx.cfg;
    let spec = cfg.model_spec(preset, ds.input_dim(), ds.num_classes);
    let mut model = Model::new(spec, seed)?;
    let tcfg = cfg.effective_train(seed);
    log_line(&ctx.out, &format!("train {} seed {seed}", preset.name()));
    let (history, calls): (History, usize) = match epsilon {
        None => (train(&mut model, ds, &tcfg)?, 0),
        Some(eps) => {
            let attack = AttackConfig {
                epsilon: eps,
                steps: cfg.adv_train.steps,
                step_size: cfg.adv_train.step_ratio * eps,
                loss: LossKind::CrossEntropy,
                restarts: 0,
                range: ds.range,
                seed,
            };
            let outcome = adversarial_train(&mut model, ds, &tcfg, &attack)?;
            if let Some(it) = outcome.telemetry.max_iterations {
                log_line(
                    &ctx.out,
                    &format!(
                        "  inner attack: {} calls, {it} iterations each",
                        outcome.telemetry.calls
                    ),
                );
            }
            (outcome.history, outcome.telemetry.calls)
        }
    };
    let (xt, yt) = ds.split(Split::Test);
    let test_accuracy = evaluate(&model, &xt, &yt)?;
    let prov = ctx.provenance().for_seed(seed);
    let dir = ctx.model_dir(&ctx.out, preset, seed);
    let train_epsilon = epsilon.unwrap_or(0.0);
    let meta = BTreeMap::from([
        ("config".to_string(), prov.config.clone()),
        ("config_sha256".to_string(), prov.config_sha256.clone()),
        ("version".to_string(), VERSION.to_string()),
        ("seed".to_string(), seed.to_string()),
        ("dataset".to_string(), dataset_label(cfg).to_string()),
        ("train_epsilon".to_string(), fmt_f(train_epsilon)),
    ]);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    save_checkpoint(&dir.join("model.bin"), &model, &meta)?;
    let body = history.to_csv();
    let mut lines = body.lines();
    let header = lines.next().unwrap_or_default().to_string();
    let rows: Vec<String> = lines.map(str::to_string).collect();
    write_csv(&dir.join("history.csv"), &prov, &header, &rows)?;
    let summary = TrainSummary {
        model: preset.name().into(),
        seed,
        train_epsilon,
        epochs: history.records.len(),
        best_epoch: history.best_epoch,
        best_val_loss: history.best_val_loss,
        halvings: history.halvings,
        stopped_early: history.stopped_early,
        test_accuracy,
        attack_calls: calls,
    };
    write_json(&dir.join("summary.json"), &prov, &summary)?;
    log_line(
        &ctx.out,
        &format!(
            "  {} seed {seed}: {} epochs, best {}, test accuracy {test_accuracy:.4}",
            preset.name(),
            summary.epochs,
            summary.best_epoch
        ),
    );
    Ok(summary)
}

/// `train` and `adv-train`.
pub fn cmd_train(ctx: &Context, adversarial: bool) -> Result<(), CliError> {
    ctx.save_config()?;
    let ds = ctx.dataset()?;
    let eps = adversarial.then_some(ctx.cfg.adv_train.epsilon);
    if let Some(e) = eps {
        if !(e >= 0.0) {
            return Err(CliError::Config(format!(
                "adv_train.epsilon must be non-negative, got {e}"
            )));
        }
    }
    let jobs: Vec<(Preset, u64)> = ctx
        .cfg
        .models
        .iter()
        .flat_map(|&m| ctx.cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let summaries = ctx.run_jobs(&jobs, |&(m, s)| train_one(ctx, &ds, m, s, eps))?;
    let rows: Vec<String> = summaries
        .iter()
        .map(|s| {
            format!(
                "{},{},{},{},{},{},{}",
                s.model,
                s.seed,
                fmt_f(s.train_epsilon),
                s.epochs,
                s.best_epoch,
                fmt_f(s.best_val_loss),
                fmt_f(s.test_accuracy)
            )
        })
        .collect();
    write_csv(
        &ctx.out.join("train_summary.csv"),
        &ctx.provenance(),
        "model,seed,train_epsilon,epochs,best_epoch,best_val_loss,test_accuracy",
        &rows,
    )
}

fn load_model(ctx: &Context, from: &Path, preset: Preset, seed: u64, ds: &Dataset) -> Result<Model, CliError> {
    let path = ctx.model_dir(from, preset, seed).join("model.bin");
    if !path.is_file() {
        return Err(CliError::Data(format!("missing checkpoint {}", path.display())));
    }
    let ck = load_checkpoint(&path)?;
    let want = ctx.cfg.model_spec(preset, ds.input_dim(), ds.num_classes);
    if ck.model.spec() != &want {
        return Err(CliError::Data(format!(
            "checkpoint {} does not match the configured {} preset",
            path.display(),
            preset.name()
        )));
    }
    Ok(ck.model)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Robust-accuracy table over the configured budgets.
pub fn cmd_attack_eval(ctx: &Context, from: &Path) -> Result<(), CliError> {
    ctx.save_config()?;
    let ds = ctx.dataset()?;
    let (x, y) = test_subset(&ds, ctx.cfg.attack_samples());
    let tpl = ctx.attack_template(&ds);
    let mut models = ctx.cfg.models.clone();
    models.sort_by_key(|p| p.name());
    models.dedup();
    let jobs: Vec<(Preset, u64)> = models
        .iter()
        .flat_map(|&m| ctx.cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results = ctx.run_jobs(&jobs, |&(m, s)| {
        let model = load_model(ctx, from, m, s, &ds)?;
        log_line(
            &ctx.out,
            &format!("attack {} seed {s} on {} examples", m.name(), y.len()),
        );
        let tpl = AttackConfig {
            seed: tpl.seed ^ s,
            ..tpl.clone()
        };
        Ok(robust_accuracy(
            &model,
            &x,
            &y,
            &ctx.cfg.epsilons,
            ctx.cfg.attack.kind,
            &tpl,
            &ctx.cfg.attack.apgd,
        )?)
    })?;

    // acc[model][eps index] = per-seed accuracies
    let mut acc: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for ((m, _), rows) in jobs.iter().zip(&results) {
        let e = acc
            .entry(m.name())
            .or_insert_with(|| vec![Vec::new(); ctx.cfg.epsilons.len()]);
        for (k, r) in rows.iter().enumerate() {
            e[k].push(r.accuracy);
        }
    }
    let reference = ctx.cfg.models[0].name();
    let label = dataset_label(&ctx.cfg);
    let mut lines = Vec::new();
    let mut summary = Vec::new();
    for (name, per_eps) in &acc {
        for (k, &eps) in ctx.cfg.epsilons.iter().enumerate() {
            for (s, a) in ctx.cfg.seeds.iter().zip(&per_eps[k]) {
                lines.push(format!("{name},{label},{},{},{s},", fmt_f(eps), fmt_f(*a)));
            }
            let p = if *name != reference && ctx.cfg.seeds.len() >= 2 {
                Some(significance(&per_eps[k], &acc[reference][k])?)
            } else {
                None
            };
            let m = mean(&per_eps[k]);
            lines.push(format!(
                "{name},{label},{},{},mean,{}",
                fmt_f(eps),
                fmt_f(m),
                p.map(fmt_f).unwrap_or_default()
            ));
            summary.push(SummaryRow {
                model: name.to_string(),
                epsilon: eps,
                mean_accuracy: m,
                accuracies: per_eps[k].clone(),
                p_value: p,
            });
        }
    }
    write_csv(
        &ctx.out.join("robust_accuracy.csv"),
        &ctx.provenance(),
        "model,dataset,epsilon,accuracy,seed,p_value",
        &lines,
    )?;
    write_json(
        &ctx.out.join("robust_accuracy.json"),
        &ctx.provenance(),
        &EvalDoc {
            dataset: label,
            examples: y.len(),
            reference_model: reference,
            rows: summary,
        },
    )
}

#[derive(Serialize)]
struct SummaryRow {
    model: String,
    epsilon: f64,
    mean_accuracy: f64,
    accuracies: Vec<f64>,
    p_value: Option<f64>,
}

#[derive(Serialize)]
struct EvalDoc<'a> {
    dataset: &'a str,
    examples: usize,
    reference_model: &'a str,
    rows: Vec<SummaryRow>,
}

/// Correlation reports per model and seed.
pub fn cmd_analyze(ctx: &Context, from: &Path) -> Result<(), CliError> {
    ctx.save_config()?;
    let ds = ctx.dataset()?;
    let (x, y) = test_subset(&ds, Some(ctx.cfg.analysis_samples()));
    let tpl = ctx.attack_template(&ds);
    let epsilons = ctx.cfg.analysis.epsilons.clone();
    let jobs: Vec<(Preset, u64)> = ctx
        .cfg
        .models
        .iter()
        .flat_map(|&m| ctx.cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let reports: Vec<CorrelationReport> = ctx.run_jobs(&jobs, |&(m, s)| {
        let model = load_model(ctx, from, m, s, &ds)?;
        log_line(&ctx.out, &format!("analyze {} seed {s}", m.name()));
        let tpl = AttackConfig {
            seed: tpl.seed ^ s,
            ..tpl.clone()
        };
        let rep = correlation_report(
            &model,
            &x,
            &y,
            &epsilons,
            ctx.cfg.attack.kind,
            &tpl,
            &ctx.cfg.attack.apgd,
            ctx.cfg.analysis.keep_matrices,
        )?;
        let prov = ctx.provenance().for_seed(s);
        let stem = format!("{}-seed{s}", m.name());
        write_json(&ctx.out.join("analysis").join(format!("{stem}.json")), &prov, &rep)?;
        let mut cdf_rows = Vec::new();
        for (eps, changes) in rep.epsilons.iter().zip(&rep.changes).skip(1) {
            for (v, c) in ecdf(changes) {
                cdf_rows.push(format!("{},{},{}", fmt_f(*eps), fmt_f(v), fmt_f(c)));
            }
        }
        write_csv(
            &ctx.out.join("analysis").join(format!("{stem}-cdf.csv")),
            &prov,
            "epsilon,abs_change,cdf",
            &cdf_rows,
        )?;
        Ok(rep)
    })?;
    let mut rows = Vec::new();
    for ((m, s), rep) in jobs.iter().zip(&reports) {
        for ((eps, shift), dead) in rep.epsilons.iter().zip(&rep.shifts).zip(&rep.dead_units) {
            rows.push(format!("{},{s},{},{},{dead}", m.name(), fmt_f(*eps), fmt_f(*shift)));
        }
    }
    for &m in &ctx.cfg.models {
        for (k, eps) in epsilons.iter().enumerate() {
            let vals: Vec<f64> = jobs
                .iter()
                .zip(&reports)
                .filter(|((p, _), _)| *p == m)
                .map(|(_, r)| r.shifts[k])
                .collect();
            rows.push(format!("{},mean,{},{},", m.name(), fmt_f(*eps), fmt_f(mean(&vals))));
        }
    }
    write_csv(
        &ctx.out.join("analysis").join("shifts.csv"),
        &ctx.provenance(),
        "model,seed,epsilon,shift,dead_units",
        &rows,
    )
}

/// Accuracy of SCA models against the number of inner steps.
pub fn cmd_tsweep(ctx: &Context) -> Result<(), CliError> {
    ctx.save_config()?;
    let ds = ctx.dataset()?;
    let (xa, ya) = test_subset(&ds, ctx.cfg.attack_samples());
    let (xt, yt) = ds.split(Split::Test);
    let eps = ctx.cfg.tsweep.epsilon;
    if !(eps > 0.0) {
        return Err(CliError::Config("tsweep.epsilon must be positive".into()));
    }
    let tpl = ctx.attack_template(&ds);
    let jobs: Vec<(usize, u64)> = ctx
        .cfg
        .tsweep
        .steps
        .iter()
        .flat_map(|&t| ctx.cfg.seeds.iter().map(move |&s| (t, s)))
        .collect();
    let results = ctx.run_jobs(&jobs, |&(t, s)| {
        let mut cfg = ctx.cfg.clone();
        cfg.sca.steps = t;
        let spec = cfg.model_spec(Preset::Sca, ds.input_dim(), ds.num_classes);
        let mut model = Model::new(spec, s)?;
        log_line(&ctx.out, &format!("tsweep T={t} seed {s}"));
        let history = train(&mut model, &ds, &cfg.effective_train(s))?;
        let clean = evaluate(&model, &xt, &yt)?;
        let tpl = AttackConfig {
            seed: tpl.seed ^ s,
            ..tpl.clone()
        };
        let rows = robust_accuracy(
            &model,
            &xa,
            &ya,
            &[0.0, eps],
            ctx.cfg.attack.kind,
            &tpl,
            &ctx.cfg.attack.apgd,
        )?;
        let prov = ctx.provenance().for_seed(s);
        let dir = ctx.out.join("tsweep").join(format!("T{t}")).join(format!("seed-{s}"));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let meta = BTreeMap::from([
            ("config_sha256".to_string(), prov.config_sha256.clone()),
            ("seed".to_string(), s.to_string()),
            ("steps".to_string(), t.to_string()),
        ]);
        save_checkpoint(&dir.join("model.bin"), &model, &meta)?;
        let body = history.to_csv();
        let mut lines = body.lines();
        let header = lines.next().unwrap_or_default().to_string();
        write_csv(
            &dir.join("history.csv"),
            &prov,
            &header,
            &lines.map(str::to_string).collect::<Vec<_>>(),
        )?;
        log_line(
            &ctx.out,
            &format!("  T={t} seed {s}: clean {clean:.4}, perturbed {:.4}", rows[1].accuracy),
        );
        Ok((clean, rows[1].accuracy))
    })?;
    let mut lines = Vec::new();
    for &t in &ctx.cfg.tsweep.steps {
        let mut cl = Vec::new();
        let mut pe = Vec::new();
        for ((jt, s), (c, p)) in jobs.iter().zip(&results) {
            if *jt == t {
                lines.push(format!("{t},{s},{},{},{}", fmt_f(eps), fmt_f(*c), fmt_f(*p)));
                cl.push(*c);
                pe.push(*p);
            }
        }
        lines.push(format!(
            "{t},mean,{},{},{}",
            fmt_f(eps),
            fmt_f(mean(&cl)),
            fmt_f(mean(&pe))
        ));
    }
    write_csv(
        &ctx.out.join("tsweep.csv"),
        &ctx.provenance(),
        "steps,seed,epsilon,clean,perturbed",
        &lines,
    )
}

pub fn cmd_fetch(root: &Path, names: &[String], offline: bool) -> Result<(), CliError> {
    let names: Vec<String> = if names.is_empty() {
        vec!["mnist".into(), "fmnist".into()]
    } else {
        names.to_vec()
    };
    for n in &names {
        let src = Source::parse(n).ok_or_else(|| CliError::Config(format!("unknown dataset `{n}`")))?;
        let files = ensure_files(src, root, offline)?;
        println!(
            "{}: {}",
            src.name(),
            files.train_images.parent().unwrap_or(root).display()
        );
    }
    Ok(())
}
