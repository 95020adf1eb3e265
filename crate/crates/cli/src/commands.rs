//! One function per subcommand. Each reads its inputs from the configured
//! paths, writes its outputs plus a resolved-config echo, and prints a short
//! summary to stdout.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use trajeglish_core::data::{read_scenarios, split_corpus, token_census, write_scenarios, generate_synthetic, Scenario};
use trajeglish_core::metrics::{future_errors, nll_sweeps, rollout_collisions, token_frequency, MetricReport, TokenCounts};
use trajeglish_core::model::{eval_examples, teacher_forced_accuracy, train, Model};
use trajeglish_core::rollout::{rollout, save_rollouts, load_rollouts, windowed_rollout, ControlAssignment, Controller, Rollout};
use trajeglish_core::tokenizer::{
    discretization_report, extract_transitions, fit_grid_xy, fit_grid_xyh, fit_kdisks, fit_kmeans, grid_xy_preset,
    grid_xyh_preset, kdisks_default_epsilon, tokenize_trajectory, KDisksOptions, KMeansOptions, Method, TemplateSet,
    Transition,
};
use trajeglish_core::{AgentClass, Error};

use crate::config::{io_error, ControlMode, RunConfig, VocabSection};

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_error(path, e))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, &s)
}

/// Fails with a pointer to the subcommand that produces `path`.
fn require(path: &Path, what: &str, producer: &str) -> Result<()> {
    if path.exists() {
        return Ok(());
    }
    let source = std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{what} not found; run `trajeglish {producer}` first"),
    );
    Err(io_error(path, source).into())
}

fn load_corpus(path: &Path) -> Result<Vec<Scenario>> {
    require(path, "corpus", "synth")?;
    Ok(read_scenarios(path)?)
}

fn load_vocab(cfg: &RunConfig) -> Result<TemplateSet> {
    let path = cfg.paths.vocab();
    require(&path, "vocabulary", "fit-vocab")?;
    Ok(TemplateSet::load(&path)?)
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    let path = cfg.paths.checkpoint();
    require(&path, "checkpoint", "train")?;
    Ok(Model::load(&path)?)
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.paths.corpus_dir;
    let corpus = generate_synthetic(&cfg.synth);
    let (train_set, val) = split_corpus(&corpus, cfg.split.val_fraction, cfg.split.seed);
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    write_scenarios(cfg.paths.train_corpus(), &train_set)?;
    write_scenarios(cfg.paths.val_corpus(), &val)?;
    let census = BTreeMap::from([("train", token_census(&train_set)), ("val", token_census(&val))]);
    write_json(&dir.join("census.json"), &census)?;
    cfg.echo(dir, "synth")?;
    println!(
        "wrote {} train and {} val scenarios to {} ({} train tokens)",
        train_set.len(),
        val.len(),
        dir.display(),
        census["train"].tokens
    );
    Ok(())
}

fn grid_dims(v: &VocabSection) -> Result<(usize, usize, usize)> {
    if let Some([x, y, h]) = v.grid_xyh {
        return Ok((x, y, h));
    }
    grid_xyh_preset(v.size).or_else(|_| {
        let side = (v.size as f64).cbrt().round().max(2.0) as usize;
        Ok((side, side, side))
    })
}

fn grid_side(v: &VocabSection) -> usize {
    v.grid_xy
        .or_else(|| grid_xy_preset(v.size).ok())
        .unwrap_or_else(|| (v.size as f64).sqrt().round().max(2.0) as usize)
}

fn fit_method(method: Method, v: &VocabSection, tr: &[Transition]) -> Result<TemplateSet> {
    Ok(match method {
        Method::Kdisks => fit_kdisks(
            tr,
            &KDisksOptions {
                n: v.size,
                epsilon: v.epsilon.unwrap_or_else(|| kdisks_default_epsilon(v.size)),
                restarts: v.restarts,
                score_slice: v.score_slice,
                seed: v.seed,
            },
        )?,
        Method::Kmeans => fit_kmeans(
            tr,
            &KMeansOptions {
                n: v.size,
                restarts: v.restarts,
                max_iter: v.max_iter,
                score_slice: v.score_slice,
                seed: v.seed,
            },
        )?,
        Method::GridXyh => {
            let (x, y, h) = grid_dims(v)?;
            fit_grid_xyh(x, y, h)?
        }
        Method::GridXy => {
            let side = grid_side(v);
            fit_grid_xy(side, side, tr)?
        }
    })
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Kdisks => "kdisks",
        Method::Kmeans => "kmeans",
        Method::GridXyh => "grid_xyh",
        Method::GridXy => "grid_xy",
    }
}

pub fn fit_vocab(cfg: &RunConfig) -> Result<()> {
    let train_set = load_corpus(&cfg.paths.train_corpus())?;
    let tr = extract_transitions(&train_set);
    let held_out = if cfg.paths.val_corpus().exists() {
        extract_transitions(&read_scenarios(cfg.paths.val_corpus())?)
    } else {
        Vec::new()
    };
    let score_on = if held_out.is_empty() { &tr } else { &held_out };
    let ts = fit_method(cfg.vocab.method, &cfg.vocab, &tr)
        .with_context(|| format!("fitting {} vocabulary of size {}", method_name(cfg.vocab.method), cfg.vocab.size))?;
    let dir = &cfg.paths.vocab_dir;
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    ts.save(&cfg.paths.vocab())?;

    let mut methods = vec![cfg.vocab.method];
    if cfg.vocab.compare {
        methods.extend(
            [Method::Kdisks, Method::Kmeans, Method::GridXyh, Method::GridXy]
                .into_iter()
                .filter(|m| *m != cfg.vocab.method),
        );
    }
    let mut csv = String::from("method,size,expected_error_m,vehicle_m,pedestrian_m,cyclist_m,n_transitions\n");
    for m in methods {
        let fitted = if m == cfg.vocab.method { Ok(ts.clone()) } else { fit_method(m, &cfg.vocab, &tr) };
        match fitted {
            Ok(set) => {
                let st = set.expected_error(score_on);
                let class = |c: AgentClass| st.per_class.get(&c).map_or(String::new(), |v| v.to_string());
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    method_name(m),
                    set.len(),
                    st.expected_error,
                    class(AgentClass::Vehicle),
                    class(AgentClass::Pedestrian),
                    class(AgentClass::Cyclist),
                    st.n_transitions
                );
                println!("{:9} |V|={:4} expected error {:.4} m", method_name(m), set.len(), st.expected_error);
            }
            Err(e) => eprintln!("warning: {} comparison skipped: {e:#}", method_name(m)),
        }
    }
    write_file(&dir.join("fit_report.csv"), &csv)?;
    cfg.echo(dir, "fit-vocab")?;
    println!("wrote {} templates to {}", ts.len(), cfg.paths.vocab().display());
    Ok(())
}

#[derive(Serialize)]
struct TokenRecord<'a> {
    id: &'a str,
    agents: Vec<AgentTokens>,
}

#[derive(Serialize)]
struct AgentTokens {
    id: u64,
    class: AgentClass,
    tokens: Vec<Option<usize>>,
}

pub fn tokenize(cfg: &RunConfig) -> Result<()> {
    let ts = load_vocab(cfg)?;
    let dir = &cfg.paths.tokens_dir;
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    for split in ["train", "val"] {
        let path = cfg.paths.corpus_dir.join(format!("{split}.jsonl"));
        let corpus = load_corpus(&path)?;
        ts.check_classes(&corpus)?;
        let out_path = dir.join(format!("{split}_tokens.jsonl"));
        let f = std::fs::File::create(&out_path).map_err(|e| io_error(&out_path, e))?;
        let mut w = std::io::BufWriter::new(f);
        for s in &corpus {
            let rec = TokenRecord {
                id: &s.id,
                agents: s
                    .agents
                    .iter()
                    .map(|a| AgentTokens {
                        id: a.id,
                        class: a.meta.class,
                        tokens: tokenize_trajectory(&a.states, &a.meta, &ts).tokens,
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| io_error(&out_path, e))?;
        }
        w.flush().map_err(|e| io_error(&out_path, e))?;
        let report = discretization_report(&corpus, &ts);
        write_file(&dir.join(format!("{split}_discretization.csv")), &report.to_csv())?;
        write_json(&dir.join(format!("{split}_discretization.json")), &report)?;
        let n = report.counts.iter().sum::<usize>().max(1) as f64;
        let mean_err = report.error.iter().zip(&report.counts).map(|(e, &c)| e * c as f64).sum::<f64>() / n;
        println!("{split}: {} scenarios, mean discretization error {mean_err:.4} m", corpus.len());
    }
    cfg.echo(dir, "tokenize")?;
    Ok(())
}

pub fn train_model(cfg: &RunConfig) -> Result<()> {
    let ts = load_vocab(cfg)?;
    let train_set = load_corpus(&cfg.paths.train_corpus())?;
    ts.check_classes(&train_set)?;
    let mut cfg = cfg.clone();
    cfg.model.vocab_size = ts.len();
    cfg.model.validate()?;
    let dir = cfg.paths.run_dir.clone();
    cfg.echo(&dir, "train")?;
    let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    println!(
        "training {} ({} parameters) for {} steps",
        cfg.model.masking_regime,
        model.params().n_scalars(),
        cfg.train.steps
    );
    let every = (cfg.train.steps / 20).max(1);
    let total = cfg.train.steps;
    let started = std::time::Instant::now();
    let out = train(model, &train_set, &ts, &cfg.train, |e| {
        if e.step % every == 0 || e.step + 1 == total {
            eprintln!(
                "step {:6} loss {:.4} lr {:.2e} ({:.0} s)",
                e.step,
                e.loss,
                e.lr,
                started.elapsed().as_secs_f64()
            );
        }
    })?;
    out.model.save(cfg.paths.checkpoint())?;
    let mut log = String::from("step,loss,lr,tokens_seen\n");
    for e in &out.log {
        let _ = writeln!(log, "{},{},{},{}", e.step, e.loss, e.lr, e.tokens_seen);
    }
    write_file(&dir.join("train_log.csv"), &log)?;
    println!("wrote {}", cfg.paths.checkpoint().display());
    Ok(())
}

fn controllers(s: &Scenario, mode: ControlMode) -> Vec<Controller> {
    let sdc = s.sdc_index();
    (0..s.n_agents())
        .map(|i| match mode {
            ControlMode::Model => Controller::Model,
            ControlMode::ReplayAll => Controller::Replay,
            ControlMode::ReplaySdc if Some(i) == sdc => Controller::Replay,
            ControlMode::ReplaySdc => Controller::Model,
        })
        .collect()
}

/// The scenario restricted to agents observed throughout the first
/// `history` steps; `None` when no agent qualifies.
pub fn rollout_scene(s: &Scenario, history: usize) -> Option<Scenario> {
    if s.n_steps() < history {
        return None;
    }
    let mut out = s.clone();
    out.agents.retain(|a| a.states[..history].iter().all(|st| st.valid));
    if out.agents.is_empty() {
        return None;
    }
    if out.sdc_index().is_none() {
        out.agents[0].sdc = true;
    }
    Some(out)
}

pub fn run_rollouts(cfg: &RunConfig) -> Result<()> {
    let ts = load_vocab(cfg)?;
    let model = load_model(cfg)?;
    let val = load_corpus(&cfg.paths.val_corpus())?;
    let rc = cfg.rollout.rollout_config();
    let limit = cfg.rollout.max_scenarios.unwrap_or(usize::MAX);
    let mut all: Vec<Rollout> = Vec::new();
    let mut skipped = 0;
    for s in val.iter().take(limit) {
        let Some(scene) = rollout_scene(s, cfg.rollout.history) else {
            skipped += 1;
            continue;
        };
        let ctl = controllers(&scene, cfg.rollout.control);
        let control = ControlAssignment::new(&ctl);
        let rs = if cfg.rollout.windowed {
            windowed_rollout(&scene, cfg.rollout.history, &model, &ts, control, &rc)
        } else {
            if scene.n_agents() > model.config().max_agents {
                return Err(Error::Config(format!(
                    "scenario {} has {} agents but the model holds {}; set rollout.windowed = true",
                    scene.id,
                    scene.n_agents(),
                    model.config().max_agents
                ))
                .into());
            }
            rollout(&scene, cfg.rollout.history, &model, &ts, control, &rc)
        }
        .with_context(|| format!("rolling out scenario {}", scene.id))?;
        all.extend(rs);
    }
    let dir = &cfg.paths.run_dir;
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    save_rollouts(cfg.paths.rollouts(), &all)?;
    cfg.echo(dir, "rollout")?;
    println!(
        "wrote {} rollouts to {}{}",
        all.len(),
        cfg.paths.rollouts().display(),
        if skipped > 0 { format!(" ({skipped} scenarios without usable agents skipped)") } else { String::new() }
    );
    Ok(())
}

/// Metric report of one experiment: NLL sweeps on validation windows,
/// rollout collisions and errors, and train/val token frequencies.
pub fn evaluate(cfg: &RunConfig) -> Result<MetricReport> {
    let ts = load_vocab(cfg)?;
    let model = load_model(cfg)?;
    let val = load_corpus(&cfg.paths.val_corpus())?;
    let train_set = load_corpus(&cfg.paths.train_corpus())?;
    let rollouts_path = cfg.paths.rollouts();
    require(&rollouts_path, "rollouts", "rollout")?;
    let rollouts = load_rollouts(&rollouts_path)?;
    let condition = cfg.condition();
    let tick = val.first().map_or(trajeglish_core::data::DEFAULT_TICK_S, |s| s.tick);

    let mut report = MetricReport::default();
    let examples = eval_examples(&val, &ts, model.config())?;
    let sweeps = nll_sweeps(&model, &examples, &ts, &cfg.eval.contexts, cfg.eval.max_predecessors)?;
    report.add_sweeps(&sweeps, &condition, tick);
    report.scalar("accuracy", "fraction", &condition, None, teacher_forced_accuracy(&model, &examples)?);

    let scenes: Vec<Scenario> = val.iter().filter_map(|s| rollout_scene(s, cfg.rollout.history)).collect();
    report.add_collisions(&rollout_collisions(&rollouts, &scenes)?, &condition, tick);
    let mut by_id: BTreeMap<&str, Vec<&Rollout>> = BTreeMap::new();
    for r in &rollouts {
        by_id.entry(r.scenario_id.as_str()).or_default().push(r);
    }
    let (mut ade, mut min_ade, mut min_sd, mut n) = (0.0, 0.0, 0.0, 0usize);
    for s in &scenes {
        if let Some(rs) = by_id.get(s.id.as_str()) {
            match future_errors(rs, s) {
                Ok(e) => {
                    ade += e.ade;
                    min_ade += e.min_ade;
                    min_sd += e.min_scenario_distance;
                    n += 1;
                }
                Err(Error::Empty(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    if n > 0 {
        report.scalar("ade", "m", &condition, None, ade / n as f64);
        report.scalar("min_ade", "m", &condition, None, min_ade / n as f64);
        report.scalar("min_scenario_distance", "m", &condition, None, min_sd / n as f64);
    }
    let freq = token_frequency(&TokenCounts::from_corpus(&train_set, &ts)?, &TokenCounts::from_corpus(&val, &ts)?)?;
    report.add_frequencies(&freq, &condition);
    Ok(report)
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let report = evaluate(cfg)?;
    let dir = &cfg.paths.run_dir;
    write_file(&dir.join("metrics.json"), &report.to_json())?;
    write_file(&dir.join("metrics.csv"), &report.to_csv())?;
    cfg.echo(dir, "eval")?;
    let condition = cfg.condition();
    for name in ["nll", "accuracy", "collision_any", "ade", "min_ade", "min_scenario_distance"] {
        if let Some(v) = report.get(name, &condition, None) {
            println!("{condition} {name} {v:.4}");
        }
    }
    println!("wrote {}", dir.join("metrics.csv").display());
    Ok(())
}
