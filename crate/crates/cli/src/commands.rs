use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use drr_core::agent::{load_checkpoint, save_checkpoint};
use drr_core::baselines::{LinUcbModel, PmfRanker, PopularityModel, PopularityStrategy};
use drr_core::datasets::{self, Dataset, Split};
use drr_core::envloop::{
    self, build_eval_sessions, eval_offline as run_eval_offline, run_online, DrrLearner, DrrOnline, DrrRanker,
    EvalSession, MetricsReport, RewardSpec, TrainConfig, TrainLog,
};
use drr_core::pmf::{load_embeddings, rmse, save_embeddings, train_pmf_with_report};
use drr_core::{AgentBundle, EmbeddingTable};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{check_prerequisite, manifest_path, write_file, Manifest};

pub struct Context {
    pub args: Vec<String>,
    pub force: bool,
    pub threads: usize,
}

fn load_canonical(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let path = cfg.canonical_path();
    if !path.exists() {
        return Err(CliError::Missing(format!("{} not found; run `drr-lab prepare-data` first", path.display())));
    }
    Ok(datasets::load_canonical(&path, cfg.dataset_format.scale())?)
}

/// The seeded split, rebuilt from the canonical file and checked against the
/// one `prepare-data` recorded.
fn load_split(cfg: &RunConfig, ctx: &Context) -> Result<Split, CliError> {
    let train_path = cfg.split_path("train");
    check_prerequisite(&train_path, &cfg.data_digest(), ctx.force, "drr-lab prepare-data")?;
    let split = datasets::split_random(&load_canonical(cfg)?, cfg.split_fraction, cfg.seed)?;
    let on_disk = datasets::load_canonical(&train_path, cfg.dataset_format.scale())?;
    if on_disk.events != split.train.events {
        return Err(CliError::Missing(format!(
            "{} does not match the canonical data; rerun `drr-lab prepare-data`",
            train_path.display()
        )));
    }
    Ok(split)
}

fn load_table(cfg: &RunConfig, ctx: &Context) -> Result<EmbeddingTable, CliError> {
    let path = cfg.embeddings_path();
    check_prerequisite(&path, &cfg.embedding_digest(), ctx.force, "drr-lab pretrain-pmf")?;
    Ok(load_embeddings(&path)?)
}

fn load_agent(cfg: &RunConfig, ctx: &Context) -> Result<AgentBundle, CliError> {
    let path = cfg.checkpoint_path();
    check_prerequisite(&path, &cfg.agent_digest(), ctx.force, "drr-lab train")?;
    Ok(load_checkpoint(&path)?)
}

pub fn prepare_data(cfg: &RunConfig, ctx: &Context) -> Result<(), CliError> {
    let started = Instant::now();
    if !cfg.dataset_path.exists() {
        return Err(CliError::Missing(format!("dataset file {} not found", cfg.dataset_path.display())));
    }
    let ds = datasets::load(&cfg.dataset_path, cfg.dataset_format)?;
    let split = datasets::split_random(&ds, cfg.split_fraction, cfg.seed)?;
    let canonical = cfg.canonical_path();
    let (train_path, test_path) = (cfg.split_path("train"), cfg.split_path("test"));
    write_file(&canonical, &ds.canonical_string())?;
    write_file(&train_path, &split.train.canonical_string())?;
    write_file(&test_path, &split.test.canonical_string())?;
    let results = json!({
        "users": ds.num_users,
        "items": ds.num_items,
        "events": ds.len(),
        "train_events": split.train.len(),
        "test_events": split.test.len(),
    });
    eprintln!(
        "prepared {} events ({} users, {} items): {} train / {} test",
        ds.len(),
        ds.num_users,
        ds.num_items,
        split.train.len(),
        split.test.len()
    );
    let digest = cfg.data_digest();
    let outputs = vec![canonical, train_path.clone(), test_path];
    let m = Manifest { command: "prepare-data", digest, outputs, results };
    m.write(&manifest_path(&train_path), cfg, &ctx.args, started)
}

pub fn pretrain_pmf(cfg: &RunConfig, ctx: &Context) -> Result<(), CliError> {
    let started = Instant::now();
    let split = load_split(cfg, ctx)?;
    let mut pc = cfg.embedding.clone();
    pc.seed = cfg.seed;
    let (tbl, report) = train_pmf_with_report::<f64>(&split.train, &pc)?;
    let (train_rmse, test_rmse) = (rmse(&tbl, &split.train), rmse(&tbl, &split.test));
    let path = cfg.embeddings_path();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_embeddings(&tbl, &path)?;
    eprintln!("pmf: train rmse {train_rmse:.4}, test rmse {test_rmse:.4}");
    let results = json!({
        "train_rmse": train_rmse,
        "test_rmse": test_rmse,
        "epoch_objective": report.epoch_objective,
    });
    let m = Manifest { command: "pretrain-pmf", digest: cfg.embedding_digest(), outputs: vec![path.clone()], results };
    m.write(&manifest_path(&path), cfg, &ctx.args, started)
}

fn train_agent(cfg: &RunConfig, split: &Split, tbl: &EmbeddingTable) -> Result<(AgentBundle, TrainLog), CliError> {
    let mut agent_cfg = cfg.agent.clone();
    agent_cfg.k = tbl.k;
    let sessions = datasets::build_sessions(&split.train, agent_cfg.n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bundle = AgentBundle::new(agent_cfg, &mut rng)?;
    let total_steps = (cfg.episodes * cfg.horizon) as u64;
    let mut learner = DrrLearner::new(bundle, tbl, total_steps)?;
    let spec = RewardSpec::for_scale(split.train.scale);
    let tc = TrainConfig { episodes: cfg.episodes, horizon: cfg.horizon, seed: cfg.seed };
    match envloop::train(&mut learner, &sessions, &split.train.rating_lookup(), spec, &tc) {
        Ok(log) => Ok((learner.bundle, log)),
        Err(e) => {
            let partial = cfg.checkpoint_path().with_extension("partial.ckpt");
            if let Some(dir) = partial.parent() {
                std::fs::create_dir_all(dir)?;
            }
            save_checkpoint(&learner.bundle, &partial)?;
            Err(CliError::Runtime(format!("training failed ({e}); last good state saved to {}", partial.display())))
        }
    }
}

pub fn train(cfg: &RunConfig, ctx: &Context) -> Result<(), CliError> {
    let started = Instant::now();
    let split = load_split(cfg, ctx)?;
    let tbl = load_table(cfg, ctx)?;
    let (bundle, log) = train_agent(cfg, &split, &tbl)?;
    let ckpt = cfg.checkpoint_path();
    if let Some(dir) = ckpt.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_checkpoint(&bundle, &ckpt)?;
    let log_path = cfg.reports_dir.join(format!("train-{}.csv", cfg.run_tag()));
    write_file(&log_path, &log.to_csv())?;
    let mean_reward = log.rows.iter().map(|r| r.reward).sum::<f64>() / log.rows.len().max(1) as f64;
    eprintln!("trained {}: {} transitions, {} updates, mean reward {mean_reward:.4}", cfg.run_tag(), log.transitions, log.updates);
    let results = json!({
        "transitions": log.transitions,
        "updates": log.updates,
        "mean_reward": mean_reward,
        "param_digest": format!("{:016x}", bundle.param_digest()),
    });
    let m = Manifest { command: "train", digest: cfg.agent_digest(), outputs: vec![ckpt.clone(), log_path], results };
    m.write(&manifest_path(&ckpt), cfg, &ctx.args, started)
}

fn stamp(mut report: MetricsReport, cfg: &RunConfig, variant: &str) -> MetricsReport {
    report.seed = cfg.seed;
    report.config_digest = cfg.report_digest();
    report.variant = variant.to_owned();
    report.dataset = cfg.dataset_name.clone();
    report
}

fn metrics_json(r: &MetricsReport) -> serde_json::Value {
    json!({
        "precision_at": r.precision_at.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>(),
        "ndcg_at": r.ndcg_at.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>(),
        "cumulative_reward": r.cumulative_reward,
        "episodes": r.episodes,
        "steps": r.steps,
        "short_steps": r.short_steps,
    })
}

/// The largest configured k, which orders models and strategies.
fn primary_k(cfg: &RunConfig) -> usize {
    *cfg.eval_k.iter().max().expect("validated non-empty")
}

fn offline_metrics(cfg: &RunConfig, ctx: &Context, split: &Split, sessions: &[EvalSession], tbl: &EmbeddingTable, bundle: &AgentBundle) -> Result<MetricsReport, CliError> {
    let ranker = DrrRanker { bundle, tbl };
    let report = run_eval_offline(&ranker, sessions, &cfg.eval_k, cfg.horizon, split.train.scale, ctx.threads)?;
    Ok(stamp(report, cfg, cfg.agent.variant.as_str()))
}

pub fn eval_offline(cfg: &RunConfig, ctx: &Context, baselines: bool) -> Result<(), CliError> {
    let started = Instant::now();
    let split = load_split(cfg, ctx)?;
    let tbl = load_table(cfg, ctx)?;
    let bundle = load_agent(cfg, ctx)?;
    let sessions = build_eval_sessions(&split, cfg.agent.n)?;
    let scale = split.train.scale;
    let k = primary_k(cfg);
    let mut reports = vec![offline_metrics(cfg, ctx, &split, &sessions, &tbl, &bundle)?];
    let mut results = serde_json::Map::new();
    results.insert("sessions".into(), json!(sessions.len()));
    results.insert(cfg.agent.variant.as_str().into(), metrics_json(&reports[0]));
    if baselines {
        let mut best: Option<(PopularityStrategy, MetricsReport)> = None;
        for strategy in PopularityStrategy::ALL {
            let model = PopularityModel::fit(&split.train, strategy);
            let r = run_eval_offline(&model, &sessions, &cfg.eval_k, cfg.horizon, scale, ctx.threads)?;
            results.insert(format!("popularity_{strategy}"), metrics_json(&r));
            if best.as_ref().is_none_or(|(_, b)| r.precision_at[&k] > b.precision_at[&k]) {
                best = Some((strategy, r));
            }
        }
        let (strategy, r) = best.expect("two strategies");
        results.insert("popularity_strategy".into(), json!(strategy.as_str()));
        reports.push(stamp(r, cfg, "popularity"));
        let pmf = run_eval_offline(&PmfRanker { tbl: &tbl }, &sessions, &cfg.eval_k, cfg.horizon, scale, ctx.threads)?;
        results.insert("pmf".into(), metrics_json(&pmf));
        reports.push(stamp(pmf, cfg, "pmf"));
    }
    let mut csv = String::from(MetricsReport::HEADER);
    csv.push('\n');
    for r in &reports {
        r.write_rows(&mut csv);
        eprintln!("{}: precision@{k} {:.4}, ndcg@{k} {:.4}", r.variant, r.precision_at[&k], r.ndcg_at[&k]);
    }
    let out = cfg.reports_dir.join(format!("offline-{}.csv", cfg.run_tag()));
    write_file(&out, &csv)?;
    let m = Manifest { command: "eval-offline", digest: cfg.report_digest(), outputs: vec![out.clone()], results: results.into() };
    m.write(&manifest_path(&out), cfg, &ctx.args, started)
}

fn online_sessions(cfg: &RunConfig, split: &Split) -> Result<Vec<EvalSession>, CliError> {
    let mut sessions = build_eval_sessions(split, cfg.agent.n)?;
    if cfg.online_sessions > 0 {
        sessions.truncate(cfg.online_sessions);
    }
    Ok(sessions)
}

fn online_csv(cfg: &RunConfig, rows: &[(String, f64)]) -> String {
    let mut csv = String::from(MetricsReport::HEADER);
    csv.push('\n');
    for (variant, value) in rows {
        let _ = writeln!(csv, "cumulative_reward,,{value},{},{variant},{}", cfg.seed, cfg.dataset_name);
    }
    csv
}

pub fn eval_online_drr(cfg: &RunConfig, ctx: &Context) -> Result<(), CliError> {
    let started = Instant::now();
    let split = load_split(cfg, ctx)?;
    let tbl = load_table(cfg, ctx)?;
    let bundle = load_agent(cfg, ctx)?;
    let sessions = online_sessions(cfg, &split)?;
    let horizon_steps = (sessions.len() * cfg.horizon) as u64;
    let mut policy = DrrOnline::new(&bundle, &tbl, cfg.online_epsilon, horizon_steps)?;
    let spec = RewardSpec::for_scale(split.train.scale);
    let report = run_online(&mut policy, &tbl, &sessions, cfg.horizon, spec, cfg.seed)?;
    let resets_ok = policy.session_start_digests.len() == sessions.len()
        && policy.session_start_digests.iter().all(|&d| d == policy.snapshot_digest());
    if !resets_ok {
        return Err(CliError::Runtime("parameters were not restored at every session start".into()));
    }
    let variant = cfg.agent.variant.as_str();
    eprintln!("{variant} online: cumulative reward {:.3} over {} sessions", report.cumulative_reward, sessions.len());
    let out = cfg.reports_dir.join(format!("online-{}.csv", cfg.run_tag()));
    write_file(&out, &online_csv(cfg, &[(variant.to_owned(), report.cumulative_reward)]))?;
    let results = json!({
        "policy": variant,
        "sessions": sessions.len(),
        "cumulative_reward": report.cumulative_reward,
        "epsilon": cfg.online_epsilon,
        "session_resets_verified": resets_ok,
        "replay_size": policy.learner.replay.len(),
    });
    let m = Manifest { command: "eval-online", digest: cfg.report_digest(), outputs: vec![out.clone()], results };
    m.write(&manifest_path(&out), cfg, &ctx.args, started)
}

pub fn eval_online_linucb(cfg: &RunConfig, ctx: &Context) -> Result<(), CliError> {
    let started = Instant::now();
    let split = load_split(cfg, ctx)?;
    let tbl = load_table(cfg, ctx)?;
    let sessions = online_sessions(cfg, &split)?;
    let spec = RewardSpec::for_scale(split.train.scale);
    let mut grid = Vec::new();
    for &alpha in &cfg.linucb_alphas {
        let mut policy = LinUcbModel::new(&tbl, alpha)?;
        let report = run_online(&mut policy, &tbl, &sessions, cfg.horizon, spec, cfg.seed)?;
        eprintln!("linucb alpha {alpha}: cumulative reward {:.3}", report.cumulative_reward);
        grid.push((alpha, report.cumulative_reward));
    }
    let &(best_alpha, best) = grid
        .iter()
        .fold(None, |acc: Option<&(f64, f64)>, x| match acc {
            Some(b) if b.1 >= x.1 => Some(b),
            _ => Some(x),
        })
        .ok_or_else(|| CliError::Usage("eval.linucb_alphas is empty".into()))?;
    let mut rows = vec![("linucb".to_owned(), best)];
    rows.extend(grid.iter().map(|(a, r)| (format!("linucb_{a}"), *r)));
    let out = cfg.reports_dir.join(format!("online-linucb-T{}-{}.csv", cfg.horizon, cfg.seed_tag()));
    write_file(&out, &online_csv(cfg, &rows))?;
    let results = json!({
        "policy": "linucb",
        "sessions": sessions.len(),
        "best_alpha": best_alpha,
        "cumulative_reward": best,
        "grid": grid.iter().map(|(a, r)| json!({"alpha": a, "cumulative_reward": r})).collect::<Vec<_>>(),
    });
    let m = Manifest { command: "eval-online", digest: cfg.report_digest(), outputs: vec![out.clone()], results };
    m.write(&manifest_path(&out), cfg, &ctx.args, started)
}

pub fn analyze_patterns(cfg: &RunConfig, ctx: &Context) -> Result<(), CliError> {
    let started = Instant::now();
    let ds = load_canonical(cfg)?;
    let report = datasets::analyze_sequential_patterns(&ds, cfg.pattern_max_run);
    let out = cfg.reports_dir.join("patterns.csv");
    write_file(&out, &report.to_csv())?;
    let results = json!({ "global_mean": report.global_mean, "events": report.total_events, "rows": report.rows.len() });
    let m = Manifest { command: "analyze-patterns", digest: cfg.data_digest(), outputs: vec![out.clone()], results };
    m.write(&manifest_path(&out), cfg, &ctx.args, started)
}

pub fn sweep_horizon(cfg: &RunConfig, ctx: &Context) -> Result<(), CliError> {
    let started = Instant::now();
    let k = if cfg.eval_k.contains(&10) { 10 } else { primary_k(cfg) };
    let mut csv = String::from("T,seed,metric,k,value\n");
    let mut by_horizon: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &seed in &cfg.eval_seeds {
        let mut seed_cfg = cfg.clone();
        seed_cfg.seed = seed;
        let split = load_split(&seed_cfg, ctx)?;
        let tbl = load_table(&seed_cfg, ctx)?;
        let sessions = build_eval_sessions(&split, cfg.agent.n)?;
        for &t in &cfg.sweep_horizons {
            let mut run_cfg = seed_cfg.clone();
            run_cfg.horizon = t;
            let (bundle, _) = train_agent(&run_cfg, &split, &tbl)?;
            let ckpt = run_cfg.checkpoint_path();
            if let Some(dir) = ckpt.parent() {
                std::fs::create_dir_all(dir)?;
            }
            save_checkpoint(&bundle, &ckpt)?;
            let results = json!({ "param_digest": format!("{:016x}", bundle.param_digest()) });
            let m = Manifest { command: "sweep-T", digest: run_cfg.agent_digest(), outputs: vec![ckpt.clone()], results };
            m.write(&manifest_path(&ckpt), &run_cfg, &ctx.args, started)?;
            let r = offline_metrics(&run_cfg, ctx, &split, &sessions, &tbl, &bundle)?;
            for (kk, v) in &r.precision_at {
                let _ = writeln!(csv, "{t},{seed},precision,{kk},{v}");
            }
            for (kk, v) in &r.ndcg_at {
                let _ = writeln!(csv, "{t},{seed},ndcg,{kk},{v}");
            }
            eprintln!("T = {t}, seed {seed}: precision@{k} {:.4}", r.precision_at[&k]);
            by_horizon.entry(t).or_default().push(r.precision_at[&k]);
        }
    }
    let means: BTreeMap<usize, f64> =
        by_horizon.iter().map(|(t, v)| (*t, v.iter().sum::<f64>() / v.len() as f64)).collect();
    let best_t = means
        .iter()
        .fold(None, |acc: Option<(usize, f64)>, (&t, &m)| match acc {
            Some((_, bm)) if bm >= m => acc,
            _ => Some((t, m)),
        })
        .map(|x| x.0)
        .expect("non-empty sweep");
    let out = cfg
        .reports_dir
        .join(format!("sweep-T-{}.csv", cfg.agent.variant));
    write_file(&out, &csv)?;
    eprintln!("best T by mean precision@{k}: {best_t}");
    let results = json!({
        "k": k,
        "mean_precision": means.iter().map(|(t, m)| (t.to_string(), *m)).collect::<BTreeMap<_, _>>(),
        "best_T": best_t,
        "best_T_is_10": best_t == 10,
        "seeds": cfg.eval_seeds,
    });
    let m = Manifest { command: "sweep-T", digest: cfg.report_digest(), outputs: vec![out.clone()], results };
    m.write(&manifest_path(&out), cfg, &ctx.args, started)
}
