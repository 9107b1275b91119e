use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use iatrpo::cliio::{
    load_config, load_team, log_episode, render_trajectories, save_team, CheckpointMeta, MetricsWriter, Provenance,
    RunConfig,
};
use iatrpo::evalr::{
    compromise_analysis, first_arrival_stats, frozen_as_single, mixed_pairing_eval, success_rate, MeanStd,
};
use iatrpo::trainer::{
    derive_seed, evaluate_episodes, train_iatrpo, train_matrpo, train_single, MetricsRow, PolicyHandle, PolicyKind,
    RolloutMode, RolloutSettings, TrainOutput,
};
use iatrpo::{Error, Result};

#[derive(Parser)]
#[command(name = "iatrpo", version, about = "Interaction-aware multi-agent TRPO")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overrides `curriculum.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Success,
    FirstArrival,
    Frechet,
    Mixed,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Team {
    Single,
    Iatrpo,
    Matrpo,
}

impl Team {
    fn prefix(self) -> &'static str {
        match self {
            Team::Single => "single",
            Team::Iatrpo => "iatrpo",
            Team::Matrpo => "matrpo",
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Stage 1: one goal-conditioned policy per role, trained alone.
    TrainSingle(Common),
    /// Stage 2 on top of stage-1 checkpoints (trained first when not given).
    TrainIatrpo {
        #[command(flatten)]
        common: Common,
        /// Directory holding `single_role<k>.ckpt`.
        #[arg(long)]
        stage1: Option<PathBuf>,
    },
    /// Baseline: from-scratch multi-agent TRPO with action-augmented critics.
    TrainMatrpo(Common),
    /// Success rate, first-arrival shares, Frechet compromise or mixed-seed pairings.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        metric: Metric,
        /// Run directories; several for per-seed statistics and pairings.
        #[arg(long, required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "iatrpo")]
        policy: Team,
    },
    /// Roll out episodes and write them as line-delimited JSON.
    Replay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long, value_enum, default_value = "iatrpo")]
        policy: Team,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
    },
    /// SVG trajectory plots; IATRPO runs also show the single-agent replays dashed.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long, value_enum, default_value = "iatrpo")]
        policy: Team,
        #[arg(long, default_value_t = 3)]
        episodes: usize,
    },
}

struct Ctx {
    cfg: RunConfig,
    prov: Provenance,
    out: PathBuf,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self> {
        let mut cfg = match &c.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = c.seed {
            cfg.curriculum.seed = s;
        }
        let hash = cfg.hash();
        eprintln!(
            "env {}: dt = {}, horizon = {}; seed {}; config {}",
            cfg.curriculum.env_id, cfg.env.dt, cfg.env.horizon, cfg.curriculum.seed, hash
        );
        fs::create_dir_all(&c.out_dir).map_err(|e| Error::io(&c.out_dir, e))?;
        let ctx = Ctx {
            prov: Provenance::new(hash, cfg.curriculum.seed),
            cfg,
            out: c.out_dir.clone(),
        };
        let resolved = serde_json::to_string_pretty(&ctx.cfg).expect("config serializes");
        ctx.write("config.json", resolved.as_bytes())?;
        Ok(ctx)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let p = self.path(name);
        File::create(&p).map(BufWriter::new).map_err(|e| Error::io(p, e))
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    }

    fn meta(&self, iterations: usize) -> CheckpointMeta {
        CheckpointMeta {
            seed: self.prov.seed,
            iterations,
            config_hash: self.prov.config_hash.clone(),
        }
    }

    fn seed(&self, what: &str) -> u64 {
        derive_seed(self.prov.seed, what, 0)
    }
}

/// Line-delimited training events.
struct EventLog {
    sink: BufWriter<File>,
    path: PathBuf,
}

impl EventLog {
    fn open(ctx: &Ctx) -> Result<Self> {
        let path = ctx.path("train_log.jsonl");
        let mut log = EventLog {
            sink: ctx.create("train_log.jsonl")?,
            path,
        };
        log.event(json!({
            "event": "start",
            "env_id": ctx.cfg.curriculum.env_id.name(),
            "dt": ctx.cfg.env.dt,
            "horizon": ctx.cfg.env.horizon,
            "seed": ctx.prov.seed,
            "config_hash": ctx.prov.config_hash,
            "format_version": ctx.prov.format_version,
        }))?;
        Ok(log)
    }

    fn event(&mut self, v: serde_json::Value) -> Result<()> {
        writeln!(self.sink, "{v}").and_then(|_| self.sink.flush()).map_err(|e| Error::io(&self.path, e))
    }
}

/// Runs `train` with metrics streamed to `metrics_<stage>.csv`.
fn with_metrics<T>(
    ctx: &Ctx,
    stage: &str,
    train: impl FnOnce(&mut dyn FnMut(&MetricsRow)) -> Result<T>,
) -> Result<T> {
    let mut writer = MetricsWriter::new(ctx.create(&format!("metrics_{stage}.csv"))?, ctx.prov.clone())?;
    let mut failure = None;
    let out = train(&mut |r: &MetricsRow| {
        if r.iteration % 10 == 0 {
            eprintln!(
                "{} agent {} it {:>4}: len {:6.1} success {:.2} (agent {:.2}) kl {:.4}",
                r.stage, r.agent, r.iteration, r.mean_episode_length, r.success_probe, r.agent_success_probe, r.kl
            );
        }
        if failure.is_none() {
            if let Err(e) = writer.row(r) {
                failure = Some(e);
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    writer.finish()?;
    Ok(out)
}

fn stage_event(log: &mut EventLog, stage: &str, out: &TrainOutput) -> Result<()> {
    log.event(json!({
        "event": "stage_done",
        "stage": stage,
        "roles": out.handles.iter().map(|h| h.role).collect::<Vec<_>>(),
        "iterations": out.iterations,
        "convergence": out.convergence,
    }))
}

fn run_stage1(ctx: &Ctx, log: &mut EventLog) -> Result<Vec<PolicyHandle>> {
    let c = &ctx.cfg;
    let outs = with_metrics(ctx, "single", |obs| train_single(&c.env, &c.trpo, &c.curriculum, obs))?;
    let mut team = Vec::new();
    for o in outs {
        stage_event(log, "single", &o)?;
        save_team(&ctx.out, "single", &o.handles, &ctx.meta(o.iterations))?;
        team.extend(o.handles);
    }
    Ok(team)
}

fn cmd_train_single(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let mut log = EventLog::open(&ctx)?;
    run_stage1(&ctx, &mut log)?;
    Ok(())
}

fn cmd_train_iatrpo(c: &Common, stage1: Option<&Path>) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let mut log = EventLog::open(&ctx)?;
    let singles = match stage1 {
        Some(dir) => load_team(dir, "single")?.into_iter().map(|c| c.policy).collect(),
        None => run_stage1(&ctx, &mut log)?,
    };
    let cfg = &ctx.cfg;
    let out = with_metrics(&ctx, "iatrpo", |obs| {
        train_iatrpo(&cfg.env, &cfg.trpo, &cfg.curriculum, &singles, obs)
    })?;
    stage_event(&mut log, "iatrpo", &out)?;
    save_team(&ctx.out, "iatrpo", &out.handles, &ctx.meta(out.iterations))
}

fn cmd_train_matrpo(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let mut log = EventLog::open(&ctx)?;
    let cfg = &ctx.cfg;
    let out = with_metrics(&ctx, "matrpo", |obs| train_matrpo(&cfg.env, &cfg.trpo, &cfg.curriculum, obs))?;
    stage_event(&mut log, "matrpo", &out)?;
    save_team(&ctx.out, "matrpo", &out.handles, &ctx.meta(out.iterations))
}

fn load_policies(dir: &Path, team: Team) -> Result<Vec<PolicyHandle>> {
    let policies: Vec<PolicyHandle> = load_team(dir, team.prefix())?.into_iter().map(|c| c.policy).collect();
    let expected = match team {
        Team::Single => PolicyKind::SingleAgent,
        Team::Iatrpo => PolicyKind::Composed,
        Team::Matrpo => PolicyKind::Matrpo,
    };
    if policies[0].kind != expected {
        return Err(Error::Checkpoint(format!(
            "{}: expected {} checkpoints, found {}",
            dir.display(),
            expected.tag(),
            policies[0].kind.tag()
        )));
    }
    Ok(policies)
}

fn csv_writer(ctx: &Ctx, name: &str, header: &[&str]) -> Result<csv::Writer<BufWriter<File>>> {
    let mut w = csv::Writer::from_writer(ctx.create(name)?);
    let mut full: Vec<&str> = header.to_vec();
    full.extend(["seed", "config_hash", "format_version"]);
    w.write_record(&full).map_err(|e| Error::Contract(e.to_string()))?;
    Ok(w)
}

fn csv_row(ctx: &Ctx, w: &mut csv::Writer<BufWriter<File>>, fields: Vec<String>) -> Result<()> {
    let mut full = fields;
    full.extend([
        ctx.prov.seed.to_string(),
        ctx.prov.config_hash.clone(),
        ctx.prov.format_version.to_string(),
    ]);
    w.write_record(&full).map_err(|e| Error::Contract(e.to_string()))
}

fn finish_csv(ctx: &Ctx, name: &str, mut w: csv::Writer<BufWriter<File>>) -> Result<()> {
    w.flush().map_err(|e| Error::io(ctx.path(name), e))
}

fn cmd_eval(c: &Common, metric: Metric, dirs: &[PathBuf], team: Team) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let cfg = &ctx.cfg;
    let n = cfg.eval.n_episodes;
    match metric {
        Metric::Success => {
            let name = "eval_success.csv";
            let mut w = csv_writer(&ctx, name, &["checkpoints", "agent", "success"])?;
            let mut joint = Vec::new();
            for dir in dirs {
                let policies = load_policies(dir, team)?;
                let env_id = policies[0].env_id;
                let seed = ctx.seed("eval-success");
                if team == Team::Single {
                    for p in &policies {
                        let s = success_rate(&cfg.env, env_id, RolloutMode::Single, std::slice::from_ref(p), n, seed)?;
                        eprintln!("{} role {}: success {:.2}%", dir.display(), p.role, 100.0 * s);
                        csv_row(&ctx, &mut w, vec![dir.display().to_string(), p.role.to_string(), s.to_string()])?;
                    }
                } else {
                    let s = success_rate(&cfg.env, env_id, RolloutMode::Multi, &policies, n, seed)?;
                    eprintln!("{}: joint success {:.2}%", dir.display(), 100.0 * s);
                    csv_row(&ctx, &mut w, vec![dir.display().to_string(), "joint".into(), s.to_string()])?;
                    joint.push(100.0 * s);
                }
            }
            if joint.len() > 1 {
                println!("joint success over {} runs: {}%", joint.len(), MeanStd::of(&joint));
            }
            finish_csv(&ctx, name, w)
        }
        Metric::FirstArrival => {
            let mut groups = Vec::new();
            for dir in dirs {
                let policies = load_policies(dir, team)?;
                let settings = RolloutSettings {
                    env_id: policies[0].env_id,
                    env: &cfg.env,
                    mode: RolloutMode::Multi,
                    deterministic: true,
                    record_steps: false,
                };
                groups.push(evaluate_episodes(&settings, &policies, n, ctx.seed("eval-first-arrival"))?);
            }
            let stats = first_arrival_stats(&groups)?;
            let name = "eval_first_arrival.csv";
            let mut w = csv_writer(&ctx, name, &["agent", "first_percent_mean", "first_percent_std"])?;
            for (i, s) in stats.iter().enumerate() {
                println!("agent {i} first: {s}%");
                csv_row(&ctx, &mut w, vec![i.to_string(), s.mean.to_string(), s.std.to_string()])?;
            }
            finish_csv(&ctx, name, w)
        }
        Metric::Frechet => {
            let name = "eval_frechet.csv";
            let mut w = csv_writer(
                &ctx,
                name,
                &["checkpoints", "agent", "mean_frechet", "compromise_percent", "degenerate"],
            )?;
            for dir in dirs {
                let singles = load_policies(dir, Team::Single)?;
                let composed = load_policies(dir, Team::Iatrpo)?;
                let rep = compromise_analysis(&cfg.env, &singles, &composed, cfg.eval.frechet_episodes, ctx.seed("eval-frechet"))?;
                for i in 0..composed.len() {
                    println!(
                        "{} agent {i}: mean Fréchet {:.4}, compromise {:.2}%",
                        dir.display(),
                        rep.mean_frechet[i],
                        rep.compromise_percent[i]
                    );
                    csv_row(
                        &ctx,
                        &mut w,
                        vec![
                            dir.display().to_string(),
                            i.to_string(),
                            rep.mean_frechet[i].to_string(),
                            rep.compromise_percent[i].to_string(),
                            rep.degenerate.to_string(),
                        ],
                    )?;
                }
            }
            finish_csv(&ctx, name, w)
        }
        Metric::Mixed => {
            let by_seed = dirs.iter().map(|d| load_policies(d, team)).collect::<Result<Vec<_>>>()?;
            let rep = mixed_pairing_eval(&cfg.env, &by_seed, cfg.eval.n_pairs, n, ctx.seed("eval-mixed"))?;
            let name = "eval_mixed.csv";
            let mut w = csv_writer(&ctx, name, &["kind", "checkpoints", "success"])?;
            for (k, s) in rep.same_seed.iter().enumerate() {
                csv_row(&ctx, &mut w, vec!["same".into(), dirs[k].display().to_string(), s.to_string()])?;
            }
            for p in &rep.pairings {
                let names: Vec<String> = p.seeds.iter().map(|&k| dirs[k].display().to_string()).collect();
                csv_row(&ctx, &mut w, vec!["mixed".into(), names.join("|"), p.success.to_string()])?;
            }
            println!("same-seed success {}%, mixed success {}%", rep.same, rep.mixed);
            finish_csv(&ctx, name, w)
        }
    }
}

fn cmd_replay(c: &Common, dir: &Path, team: Team, episodes: usize) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let policies = load_policies(dir, team)?;
    let settings = RolloutSettings {
        env_id: policies[0].env_id,
        env: &ctx.cfg.env,
        mode: RolloutMode::Multi,
        deterministic: true,
        record_steps: true,
    };
    let traces = evaluate_episodes(&settings, &policies, episodes, ctx.seed("replay"))?;
    let name = "episodes.jsonl";
    let mut sink = ctx.create(name)?;
    for t in &traces {
        log_episode(t, &ctx.prov, &mut sink)?;
        eprintln!("episode {}: {} steps, outcomes {:?}", t.seed, t.length, t.outcomes);
    }
    sink.flush().map_err(|e| Error::io(ctx.path(name), e))
}

fn cmd_render(c: &Common, dir: &Path, team: Team, episodes: usize) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let policies = load_policies(dir, team)?;
    let seed = ctx.seed("render");
    let (traces, singles) = if team == Team::Iatrpo {
        let singles = policies.iter().map(frozen_as_single).collect::<Result<Vec<_>>>()?;
        let rep = compromise_analysis(&ctx.cfg.env, &singles, &policies, episodes, seed)?;
        (rep.multi_traces, Some(rep.single_traces))
    } else {
        let settings = RolloutSettings {
            env_id: policies[0].env_id,
            env: &ctx.cfg.env,
            mode: RolloutMode::Multi,
            deterministic: true,
            record_steps: false,
        };
        (evaluate_episodes(&settings, &policies, episodes, seed)?, None)
    };
    for (k, t) in traces.iter().enumerate() {
        let path = ctx.path(&format!("render_{k}.svg"));
        let single = singles.as_ref().map(|s| &s[k..k + 1]);
        render_trajectories(std::slice::from_ref(t), single, &ctx.cfg.env, &ctx.prov, &path)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::TrainSingle(c) => cmd_train_single(c),
        Cmd::TrainIatrpo { common, stage1 } => cmd_train_iatrpo(common, stage1.as_deref()),
        Cmd::TrainMatrpo(c) => cmd_train_matrpo(c),
        Cmd::Eval {
            common,
            metric,
            checkpoints,
            policy,
        } => cmd_eval(common, *metric, checkpoints, *policy),
        Cmd::Replay {
            common,
            checkpoints,
            policy,
            episodes,
        } => cmd_replay(common, checkpoints, *policy, *episodes),
        Cmd::Render {
            common,
            checkpoints,
            policy,
            episodes,
        } => cmd_render(common, checkpoints, *policy, *episodes),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
