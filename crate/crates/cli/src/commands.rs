use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;
use sha2::{Digest, Sha256};

use qcse::agents::ActorCritic;
use qcse::entropy::KNN_SWEEP;
use qcse::envs::{generate_dataset, load_dataset, save_dataset, Dataset};
use qcse::tabular::{run_verification, Fault, VerifyConfig};
use qcse::trainer::{
    finetune_seed, initial_agent, pretrain_seed, seed_dir, ExperimentSummary, MetricLog, SeedResult, SeedStatus,
    PRETRAINED_AGENT,
};

use crate::config::{within, ExperimentConfig};
use crate::{Common, Failure, Finetune, Sweep, Verify};

type Outcome = Result<(), Failure>;

fn config_err<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Config(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

/// Parsed config with command-line overrides applied, plus the output root.
struct Resolved {
    cfg: ExperimentConfig,
    out: PathBuf,
}

fn resolve(c: &Common) -> Result<Resolved, Failure> {
    let mut cfg = ExperimentConfig::load(&c.config).map_err(config_err)?;
    if let Some(seed) = c.seed {
        cfg.seeds = vec![seed];
    }
    let e = &mut cfg.train.entropy;
    if let Some(l) = c.lambda {
        e.lambda = l;
    }
    if let Some(k) = c.knn {
        e.k = k;
    }
    if let Some(m) = c.condition_mode {
        e.condition_mode = m;
    }
    if let Some(a) = c.algo {
        cfg.train.agent.algo = a;
    }
    cfg.validate().map_err(config_err)?;
    let out = cfg.resolve_out(c.out.as_deref(), Some(&c.config));
    Ok(Resolved { cfg, out })
}

fn write_resolved(cfg: &ExperimentConfig, dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(runtime)?;
    let text = cfg.to_toml().map_err(runtime)?;
    std::fs::write(dir.join("config.resolved.toml"), text).map_err(runtime)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Outcome {
    let bytes = serde_json::to_vec_pretty(value).map_err(runtime)?;
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display())).map_err(runtime)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn dataset_path(r: &Resolved) -> Result<PathBuf, Failure> {
    within(&r.out, &r.cfg.dataset.path).map_err(config_err)
}

#[derive(Serialize)]
struct Manifest<'a> {
    file: String,
    sha256: String,
    bytes: usize,
    transitions: usize,
    meta: &'a qcse::envs::DatasetMeta,
}

fn generate_into(r: &Resolved) -> Result<Dataset, Failure> {
    let gen = r
        .cfg
        .dataset
        .generate
        .as_ref()
        .ok_or_else(|| config_err(anyhow!("dataset.generate block is required to generate a dataset")))?;
    let path = dataset_path(r)?;
    if !path.starts_with(&r.out) {
        return Err(config_err(anyhow!("generated dataset {} must live under {}", path.display(), r.out.display())));
    }
    let ds = generate_dataset(&r.cfg.env, gen.behavior, gen.size, gen.seed).map_err(runtime)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(runtime)?;
    }
    save_dataset(&ds, &path).map_err(runtime)?;
    let bytes = std::fs::read(&path).map_err(runtime)?;
    let manifest = Manifest {
        file: path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len(),
        transitions: ds.len(),
        meta: &ds.meta,
    };
    write_json(&manifest, &path.with_extension("manifest.json"))?;
    println!("dataset {} ({} transitions, sha256 {})", path.display(), ds.len(), manifest.sha256);
    Ok(ds)
}

/// Load the configured dataset, checking it against the generation block.
fn load(r: &Resolved) -> Result<Dataset, Failure> {
    let path = dataset_path(r)?;
    if !path.exists() {
        return Err(runtime(anyhow!("dataset {} not found; run `qcse generate` first", path.display())));
    }
    let ds = load_dataset(&path).with_context(|| format!("loading {}", path.display())).map_err(runtime)?;
    if ds.meta.env != r.cfg.env {
        return Err(config_err(anyhow!("dataset {} was generated for a different environment", path.display())));
    }
    if let Some(g) = &r.cfg.dataset.generate {
        if (ds.meta.behavior, ds.meta.size, ds.meta.seed) != (g.behavior, g.size, g.seed) {
            return Err(config_err(anyhow!(
                "dataset {} does not match the dataset.generate block; regenerate it",
                path.display()
            )));
        }
    }
    Ok(ds)
}

fn pretrain_dir(r: &Resolved) -> PathBuf {
    r.out.join("pretrain").join(r.cfg.train.agent.algo.to_string())
}

fn finetune_label(r: &Resolved, f: &Finetune) -> String {
    let e = &r.cfg.train.entropy;
    let mut label = format!("{}-{}-lambda{}-k{}", r.cfg.train.agent.algo, e.condition_mode, e.lambda, e.k);
    if f.scratch_condition_q {
        label.push_str("-scratchq");
    }
    if f.from_scratch {
        label.push_str("-fromscratch");
    }
    label
}

fn report_failures(results: &[SeedResult]) -> Outcome {
    let failed: Vec<String> = results
        .iter()
        .filter_map(|r| match &r.status {
            SeedStatus::Failed { error } => Some(format!("seed {}: {error}", r.seed)),
            SeedStatus::Completed => None,
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(runtime(anyhow!("{} of {} seeds failed:\n  {}", failed.len(), results.len(), failed.join("\n  "))))
    }
}

pub fn generate(c: &Common) -> Outcome {
    let r = resolve(c)?;
    write_resolved(&r.cfg, &r.out)?;
    generate_into(&r).map(|_| ())
}

fn pretrain_all(r: &Resolved, ds: &Dataset) -> Outcome {
    let base = pretrain_dir(r);
    write_resolved(&r.cfg, &base)?;
    let mut failures = Vec::new();
    for &seed in &r.cfg.seeds {
        let dir = seed_dir(&base, seed);
        match pretrain_seed(&r.cfg.train, &r.cfg.env, ds, seed, Some(&dir)) {
            Ok((_, log)) => match log.last() {
                Some(rec) => println!("seed {seed}: pretrained, score {:.2} (return {:.4})", rec.norm_score, rec.eval_return),
                None => println!("seed {seed}: no pretraining steps"),
            },
            Err(e @ (qcse::Error::Io(_) | qcse::Error::Json(_))) => return Err(runtime(e)),
            Err(e) => {
                eprintln!("seed {seed}: pretraining failed: {e}");
                failures.push(format!("seed {seed}: {e}"));
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(runtime(anyhow!("pretraining failed for {} seeds:\n  {}", failures.len(), failures.join("\n  "))))
    }
}

pub fn pretrain(c: &Common) -> Outcome {
    let r = resolve(c)?;
    let ds = load(&r)?;
    pretrain_all(&r, &ds)
}

fn starting_agent(r: &Resolved, f: &Finetune, seed: u64) -> Result<(ActorCritic, Option<MetricLog>), Failure> {
    if f.from_scratch {
        return Ok((initial_agent(&r.cfg.train, &r.cfg.env, seed).map_err(runtime)?, None));
    }
    let dir = seed_dir(&pretrain_dir(r), seed);
    let path = dir.join(PRETRAINED_AGENT);
    let file = std::fs::File::open(&path)
        .map_err(|_| runtime(anyhow!("no pretrained agent at {}; run `qcse pretrain` or pass --from-scratch", path.display())))?;
    let agent = ActorCritic::load(&mut std::io::BufReader::new(file)).map_err(runtime)?;
    if agent.config != r.cfg.train.agent {
        return Err(config_err(anyhow!("{} was trained with different agent settings", path.display())));
    }
    let log = MetricLog::read_csv(&dir.join("pretrain.csv")).ok();
    Ok((agent, log))
}

/// Fine-tune every seed into `out/finetune/<label>` and write its summary.
fn finetune_all(r: &Resolved, f: &Finetune, ds: &Dataset) -> Result<ExperimentSummary, Failure> {
    let base = r.out.join("finetune").join(finetune_label(r, f));
    let mut cfg = r.cfg.clone();
    cfg.train.scratch_condition_q = f.scratch_condition_q;
    write_resolved(&cfg, &base)?;
    let mut results = Vec::new();
    for &seed in &r.cfg.seeds {
        let (agent, log) = starting_agent(r, f, seed)?;
        let dir = seed_dir(&base, seed);
        let res = finetune_seed(&cfg.train, &r.cfg.env, ds, agent, log.as_ref(), seed, Some(&dir)).map_err(runtime)?;
        match (&res.status, &res.finetune_final) {
            (SeedStatus::Completed, Some(rec)) => println!(
                "seed {seed}: final score {:.2} (return {:.4}), final-quarter score {:.2}",
                rec.norm_score,
                rec.eval_return,
                res.final_quarter_norm_score.unwrap_or(f64::NAN)
            ),
            (SeedStatus::Completed, None) => println!("seed {seed}: no fine-tuning steps"),
            (SeedStatus::Failed { error }, _) => eprintln!("seed {seed}: fine-tuning failed: {error}"),
        }
        results.push(res);
    }
    let summary = ExperimentSummary::from_results(r.cfg.env.id(), results);
    write_json(&summary, &base.join("summary.json"))?;
    if let Some(a) = &summary.final_norm_score {
        println!("{} seeds: mean final score {:.2}, median {:.2}", a.n, a.mean, a.median);
    }
    println!("outputs in {}", base.display());
    Ok(summary)
}

pub fn finetune(f: &Finetune) -> Outcome {
    let r = resolve(&f.common)?;
    let ds = load(&r)?;
    let summary = finetune_all(&r, f, &ds)?;
    report_failures(&summary.seeds)
}

fn load_or_generate(r: &Resolved) -> Result<Dataset, Failure> {
    if dataset_path(r)?.exists() || r.cfg.dataset.generate.is_none() {
        load(r)
    } else {
        generate_into(r)
    }
}

pub fn run(f: &Finetune) -> Outcome {
    let r = resolve(&f.common)?;
    let ds = load_or_generate(&r)?;
    if !f.from_scratch {
        pretrain_all(&r, &ds)?;
    }
    let summary = finetune_all(&r, f, &ds)?;
    report_failures(&summary.seeds)
}

#[derive(Serialize)]
struct SweepRow {
    k: usize,
    mean_final_norm_score: Option<f64>,
    median_final_norm_score: Option<f64>,
    mean_final_quarter_norm_score: Option<f64>,
    completed: usize,
    failed: usize,
}

/// Drop repeated entries, keeping first occurrences.
pub fn dedup(list: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for &k in list {
        if kept.contains(&k) {
            dropped.push(k);
        } else {
            kept.push(k);
        }
    }
    (kept, dropped)
}

pub fn sweep(s: &Sweep) -> Outcome {
    let r = resolve(&s.finetune.common)?;
    let requested = match (&s.knn_list, r.cfg.knn_sweep.is_empty()) {
        (Some(l), _) => l.clone(),
        (None, false) => r.cfg.knn_sweep.clone(),
        (None, true) => KNN_SWEEP.to_vec(),
    };
    if requested.is_empty() {
        return Err(config_err(anyhow!("the neighbour list is empty")));
    }
    let (ks, dropped) = dedup(&requested);
    if !dropped.is_empty() {
        log::warn!("dropping repeated neighbour counts {dropped:?}");
        eprintln!("warning: dropping repeated neighbour counts {dropped:?}");
    }
    let ds = load_or_generate(&r)?;
    if !s.finetune.from_scratch {
        pretrain_all(&r, &ds)?;
    }
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for &k in &ks {
        let mut rk = Resolved { cfg: r.cfg.clone(), out: r.out.clone() };
        rk.cfg.train.entropy.k = k;
        rk.cfg.validate().map_err(config_err)?;
        println!("k = {k}");
        let summary = finetune_all(&rk, &s.finetune, &ds)?;
        rows.push(SweepRow {
            k,
            mean_final_norm_score: summary.final_norm_score.map(|a| a.mean),
            median_final_norm_score: summary.final_norm_score.map(|a| a.median),
            mean_final_quarter_norm_score: summary.final_quarter_norm_score.map(|a| a.mean),
            completed: summary.seeds.len() - summary.failed.len(),
            failed: summary.failed.len(),
        });
        all.extend(summary.seeds);
    }
    let dir = r.out.join("sweep");
    std::fs::create_dir_all(&dir).map_err(runtime)?;
    write_json(&rows, &dir.join("table.json"))?;
    let mut csv = String::from("k,mean_final_norm_score,median_final_norm_score,mean_final_quarter_norm_score,completed,failed\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    println!("{:>5} {:>12} {:>12} {:>14}", "k", "mean final", "median", "final quarter");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.k,
            cell(row.mean_final_norm_score),
            cell(row.median_final_norm_score),
            cell(row.mean_final_quarter_norm_score),
            row.completed,
            row.failed
        ));
        let show = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
        println!(
            "{:>5} {:>12} {:>12} {:>14}",
            row.k,
            show(row.mean_final_norm_score),
            show(row.median_final_norm_score),
            show(row.mean_final_quarter_norm_score)
        );
    }
    std::fs::write(dir.join("table.csv"), csv).map_err(runtime)?;
    report_failures(&all)
}

fn verify_config(v: &Verify) -> Result<VerifyConfig, Failure> {
    let mut cfg = match &v.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(config_err)?;
            let table: toml::Table = toml::from_str(&text).map_err(|e| config_err(anyhow!("invalid config: {e}")))?;
            match table.get("verify") {
                Some(section) => section.clone().try_into().map_err(|e| config_err(anyhow!("invalid [verify] table: {e}")))?,
                None => VerifyConfig::default(),
            }
        }
        None => VerifyConfig::default(),
    };
    if let Some(seed) = v.seed {
        cfg.seed = seed;
    }
    if v.inject_fault {
        cfg.fault = Some(Fault::ReversedImprovement);
    }
    Ok(cfg)
}

pub fn verify(v: &Verify) -> Outcome {
    let cfg = verify_config(v)?;
    let out = match &v.out {
        Some(o) => o.clone(),
        None => match std::env::var_os(crate::config::OUT_ENV) {
            Some(root) => PathBuf::from(root).join("verify"),
            None => PathBuf::from("runs").join("verify"),
        },
    };
    let report = run_verification(&cfg).map_err(runtime)?;
    std::fs::create_dir_all(&out).map_err(runtime)?;
    write_json(&report, &out.join("report.json"))?;
    let o = &report.optimality;
    let mark = |ok: bool| if ok { "ok" } else { "FAILED" };
    println!("soft policy iteration on {} MDPs", o.mdps);
    println!("  monotone improvement   {} (min step {:.3e})", mark(o.monotone), o.min_improvement);
    println!("  dominates random pi    {} (max gap {:.3e})", mark(o.dominant), o.max_dominance_gap);
    println!("  contraction <= gamma   {} (max ratio {:.6})", mark(o.contracting), o.max_contraction_ratio);
    let capped = &report.bound_capped;
    println!("entropy bound, masses <= 1/e: {}/{} pairs hold", capped.holds, capped.pairs);
    let open = &report.bound_unrestricted;
    println!(
        "entropy bound, unrestricted: {}/{} pairs hold, {} counterexamples reported",
        open.holds,
        open.pairs,
        open.counterexamples.len()
    );
    let t2 = &report.theorem2;
    println!(
        "min-critic conditioning: mean difference {:.4}, violation fraction {:.3} over {} pairs",
        t2.mean_difference, t2.violation_fraction, t2.pairs
    );
    let smm = &report.smm_trend;
    println!(
        "tabular state-marginal KL: decreased on {}/{} seeds ({:.4} -> {:.4})",
        smm.decreased, smm.seeds, smm.mean_initial_kl, smm.mean_final_kl
    );
    println!("report written to {}", out.join("report.json").display());
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Assertion(report.failures.join("; ")))
    }
}
