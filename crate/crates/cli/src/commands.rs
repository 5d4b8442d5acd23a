use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use persona_core::env::write_episodes;
use persona_core::metrics::{
    agreement_stats, alignment_table_csv, fit_improvement, longterm_checkpoints, longterm_profile_curve,
    mean_longterm_curve, summary_table_csv, AgreementStats, AlignmentCurve, ConfusionMatrix, LongtermCurve,
};
use persona_core::profile::{build_overlap_bench_with, eval_matcher, MatcherReport, ParaphraseTable};
use persona_core::rl::{evaluate, mix_seed, Checkpoint, CurveRow, LinearPolicy, Trainer, ValueFunction};
use persona_core::user_sim::{default_conflict, generate_scenarios, ScenarioSpec};
use persona_core::{response_reward, EnvOptions, EpisodeRecord, RewardWeights, SlotMatcher, UserConfig};

use crate::config::{create_dir, load_scenarios, write_file, write_json, CliResult, Failure, RunConfig};
use crate::{BenchArgs, Distribution, EvalArgs, GenArgs, Mode, TrainArgs};

const STANDARD_HORIZON: usize = 10;
const LONGTERM_HORIZON: usize = 70;

fn required_out(flag: &Option<PathBuf>, config: &RunConfig) -> CliResult<PathBuf> {
    flag.clone()
        .or_else(|| config.out.clone())
        .ok_or_else(|| Failure::validation("no output directory (use --out)"))
}

fn scenario_paths<'a>(flag: &'a [PathBuf], config: &'a RunConfig) -> &'a [PathBuf] {
    if flag.is_empty() {
        &config.scenarios
    } else {
        flag
    }
}

fn parse_matcher(spec: Option<&str>) -> CliResult<SlotMatcher> {
    Ok(spec.map(SlotMatcher::parse).transpose()?.unwrap_or_default())
}

fn with_horizon(scenarios: &mut [UserConfig], horizon: Option<usize>) -> CliResult<()> {
    if let Some(h) = horizon {
        for s in scenarios.iter_mut() {
            s.horizon = h;
            s.validate()
                .map_err(|e| Failure::validation(format!("scenario {} with horizon {h}: {e}", s.id)))?;
        }
    }
    Ok(())
}

pub fn gen_scenarios(args: &GenArgs) -> CliResult<()> {
    let spec = ScenarioSpec {
        count: args.count,
        open_schema: args.open_schema,
        horizon: args.horizon,
        conflict_turn: args.conflict_turn,
        seed: args.seed,
    };
    let scenarios = generate_scenarios(&spec)?;
    create_dir(&args.out)?;
    let mut files = Vec::with_capacity(scenarios.len());
    for s in &scenarios {
        let name = format!("{}.json", s.id);
        write_json(&args.out.join(&name), s)?;
        files.push(name);
    }
    write_json(
        &args.out.join("manifest.json"),
        &json!({
            "command": "gen-scenarios",
            "seed": args.seed,
            "count": args.count,
            "open_schema": args.open_schema,
            "horizon": args.horizon,
            "conflict_turn": args.conflict_turn,
            "files": files,
        }),
    )?;
    println!("wrote {} scenarios to {}", scenarios.len(), args.out.display());
    Ok(())
}

/// Curve rows already on disk up to `step`, so a resumed run overwrites any
/// rounds logged after the checkpoint it restarts from.
fn existing_curve(path: &Path, step: usize) -> CliResult<Vec<String>> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(Vec::new());
    };
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let row_step: usize = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Failure::validation(format!("malformed curve row {line:?} in {}", path.display())))?;
        if row_step <= step {
            rows.push(line.to_owned());
        }
    }
    Ok(rows)
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let config = RunConfig::load_or_default(args.config.as_deref())?;
    let out = required_out(&args.out, &config)?;
    let mut scenarios = load_scenarios(scenario_paths(&args.scenarios, &config))?;
    with_horizon(&mut scenarios, args.horizon.or(config.horizon))?;

    let mut ppo = config.ppo.clone();
    if let Some(seed) = args.seed.or(config.seed) {
        ppo.seed = seed;
    }
    if let Some(rounds) = args.rounds {
        ppo.rounds = rounds;
    }
    let weights = args
        .weights
        .as_deref()
        .or(config.weights.as_deref())
        .map(RewardWeights::parse)
        .transpose()?
        .unwrap_or_default();
    let options = EnvOptions {
        weights,
        matcher: parse_matcher(args.matcher.as_deref().or(config.matcher.as_deref()))?,
        ..EnvOptions::default()
    };

    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            Trainer::resume(ppo.clone(), options, scenarios, &ck)?
        }
        None => Trainer::new(ppo.clone(), options, scenarios)?,
    };
    trainer.checkpoint().check_compatible(&trainer.scenarios)?;

    create_dir(&out)?;
    let curve_path = out.join("curve.csv");
    let start = trainer.step;
    let mut rows = if args.resume.is_some() {
        existing_curve(&curve_path, start)?
    } else {
        Vec::new()
    };
    let mut last: Option<CurveRow> = None;
    for _ in 0..ppo.rounds {
        let row = trainer.run_round()?;
        rows.push(row.csv_row());
        last = Some(row);
        if args.checkpoint_every > 0 && trainer.step % args.checkpoint_every == 0 {
            trainer
                .checkpoint()
                .save(&out.join(format!("checkpoint-{:04}.json", trainer.step)))?;
        }
    }
    let mut curve = format!("{}\n", CurveRow::CSV_HEADER);
    for r in &rows {
        curve.push_str(r);
        curve.push('\n');
    }
    write_file(&curve_path, &curve)?;
    let ck = trainer.checkpoint();
    ck.save(&out.join("checkpoint.json"))?;

    let label = ck.weights.label();
    write_json(
        &out.join("manifest.json"),
        &json!({
            "command": "train",
            "label": label,
            "fingerprint": ck.fingerprint,
            "seed": ppo.seed,
            "resumed_from_step": args.resume.as_ref().map(|_| start),
            "step": ck.step,
            "updates": trainer.updates,
            "weights": ck.weights,
            "matcher": trainer.options.matcher.label(),
            "schema": ck.schema,
            "scenarios": trainer.scenarios.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(),
            "ppo": ck.config,
        }),
    )?;
    match last {
        Some(r) => println!(
            "{label}: step {} mean reward {:.4} (fingerprint {})",
            r.step, r.mean_total_reward, ck.fingerprint
        ),
        None => println!("{label}: no rounds run, step {}", ck.step),
    }
    Ok(())
}

/// Scenario set for an evaluation mode: standard and long-term runs drop
/// configured conflicts; conflict runs add the default swap where missing.
fn prepare_eval_scenarios(
    mut scenarios: Vec<UserConfig>,
    mode: Mode,
    horizon: usize,
    conflict_turn: usize,
    seed: u64,
) -> CliResult<Vec<UserConfig>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xC0F1));
    for s in scenarios.iter_mut() {
        s.horizon = horizon;
        match mode {
            Mode::Standard | Mode::Longterm => s.conflict = None,
            Mode::Conflict => {
                if s.conflict.is_none() {
                    s.conflict = Some(default_conflict(s, conflict_turn, &mut rng));
                }
            }
        }
        s.validate()
            .map_err(|e| Failure::validation(format!("scenario {} in {mode:?} mode: {e}", s.id)))?;
    }
    Ok(scenarios)
}

#[derive(Debug, Serialize)]
struct PerTurn {
    turn: usize,
    alignment_level: f64,
    mean_profile_reward: f64,
    mean_profile_recall: f64,
    mean_response_reward: f64,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    label: String,
    mode: String,
    seed: u64,
    samples: usize,
    greedy: bool,
    horizon: usize,
    fingerprint: String,
    checkpoint_step: usize,
    episodes: usize,
    alignment: Vec<f64>,
    average: f64,
    normalized_slope: f64,
    normalized_r_squared: f64,
    raw_r_squared: f64,
    mean_total_reward: f64,
    per_turn: Vec<PerTurn>,
    confusion: ConfusionMatrix,
    agreement: AgreementStats,
    longterm: Option<LongtermCurve>,
}

fn per_turn(episodes: &[EpisodeRecord], horizon: usize, alignment: &[f64]) -> Vec<PerTurn> {
    let n = episodes.len() as f64;
    (1..=horizon)
        .map(|k| {
            let mean = |f: &dyn Fn(&persona_core::env::TurnRecord) -> f64| {
                episodes.iter().map(|e| f(&e.turns[k - 1])).sum::<f64>() / n
            };
            PerTurn {
                turn: k,
                alignment_level: alignment[k - 1],
                mean_profile_reward: mean(&|t| t.reward.profile),
                mean_profile_recall: mean(&|t| t.profile_recall),
                mean_response_reward: mean(&|t| t.reward.response),
            }
        })
        .collect()
}

/// Predicted = full response reward, actual = aligned against the true profile.
fn judge_agreement(episodes: &[EpisodeRecord]) -> ConfusionMatrix {
    ConfusionMatrix::from_pairs(
        episodes
            .iter()
            .flat_map(|e| e.turns.iter())
            .map(|t| (response_reward(&t.judgment) == 1.0, t.aligned)),
    )
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let config = RunConfig::load_or_default(args.config.as_deref())?;
    let out = required_out(&args.out, &config)?;
    if args.samples == 0 {
        return Err(Failure::validation("--samples must be at least 1"));
    }
    let ck = Checkpoint::load(&args.checkpoint)?;
    let seed = args.seed.or(config.seed).unwrap_or(0);
    let horizon = args.horizon.or(config.horizon).unwrap_or(match args.mode {
        Mode::Longterm => LONGTERM_HORIZON,
        _ => STANDARD_HORIZON,
    });
    let scenarios = load_scenarios(scenario_paths(&args.scenarios, &config))?;
    ck.check_compatible(&scenarios)?;
    let scenarios = prepare_eval_scenarios(scenarios, args.mode, horizon, args.conflict_turn, seed)?;

    let weights = args
        .weights
        .as_deref()
        .or(config.weights.as_deref())
        .map(RewardWeights::parse)
        .transpose()?
        .unwrap_or(ck.weights);
    let options = EnvOptions {
        weights,
        matcher: parse_matcher(args.matcher.as_deref().or(config.matcher.as_deref()))?,
        gamma: ck.config.gamma,
        ..EnvOptions::default()
    };
    let policy = LinearPolicy::from_params(ck.policy.clone())?;
    let value = ValueFunction::from_params(ck.value.clone())?;
    let episodes = evaluate(&policy, &value, &scenarios, &options, args.samples, seed, args.greedy)?;

    create_dir(&out)?;
    let path = out.join("episodes.jsonl");
    write_episodes(&path, &episodes)?;

    let label = ck.weights.label();
    let curve = AlignmentCurve::from_episodes(&episodes)?;
    let table = vec![(label.clone(), curve.clone())];
    write_file(&out.join("alignment.csv"), &alignment_table_csv(&table)?)?;
    write_file(&out.join("summary.csv"), &summary_table_csv(&table)?)?;

    let confusion = judge_agreement(&episodes);
    let agreement = agreement_stats(&confusion)?;
    write_file(
        &out.join("agreement.csv"),
        &format!("{}\n{}\n", AgreementStats::CSV_HEADER, agreement.csv_row(&confusion)),
    )?;

    let turns = per_turn(&episodes, horizon, &curve.values);
    let mut profile_csv =
        String::from("turn,alignment_level,mean_profile_reward,mean_profile_recall,mean_response_reward\n");
    for t in &turns {
        profile_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            t.turn, t.alignment_level, t.mean_profile_reward, t.mean_profile_recall, t.mean_response_reward
        ));
    }
    write_file(&out.join("profile_curve.csv"), &profile_csv)?;

    let longterm = if args.mode == Mode::Longterm {
        let checkpoints = longterm_checkpoints(horizon);
        let curves = episodes
            .iter()
            .map(|e| longterm_profile_curve(e, &checkpoints))
            .collect::<persona_core::Result<Vec<_>>>()?;
        let mean = mean_longterm_curve(&curves)?;
        write_file(&out.join("longterm.csv"), &mean.csv())?;
        Some(mean)
    } else {
        None
    };

    let fit = curve.summary()?;
    let raw = fit_improvement(&curve.values)?;
    let mode = format!("{:?}", args.mode).to_lowercase();
    let report = EvalReport {
        label: label.clone(),
        mode: mode.clone(),
        seed,
        samples: args.samples,
        greedy: args.greedy,
        horizon,
        fingerprint: ck.fingerprint.clone(),
        checkpoint_step: ck.step,
        episodes: episodes.len(),
        average: curve.average(),
        alignment: curve.values,
        normalized_slope: fit.slope,
        normalized_r_squared: fit.r_squared,
        raw_r_squared: raw.r_squared,
        mean_total_reward: episodes.iter().map(EpisodeRecord::total_reward).sum::<f64>() / episodes.len() as f64,
        per_turn: turns,
        confusion,
        agreement,
        longterm,
    };
    write_json(&out.join("report.json"), &report)?;
    write_json(
        &out.join("manifest.json"),
        &json!({
            "command": "eval",
            "label": label,
            "mode": mode,
            "seed": seed,
            "samples": args.samples,
            "greedy": args.greedy,
            "horizon": horizon,
            "conflict_turn": args.conflict_turn,
            "fingerprint": ck.fingerprint,
            "checkpoint_step": ck.step,
            "weights": options.weights,
            "matcher": options.matcher.label(),
            "scenarios": scenarios.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(),
        }),
    )?;
    println!(
        "{label} {mode}: {} episodes, AVG {:.2}, N-IR {:.3}, N-R2 {:.3}",
        report.episodes, report.average, report.normalized_slope, report.normalized_r_squared
    );
    Ok(())
}

pub fn judge_bench(args: &BenchArgs) -> CliResult<()> {
    let specs: Vec<String> = if args.matcher.is_empty() {
        vec!["exact".into(), "token:0.5".into()]
    } else {
        args.matcher.clone()
    };
    let matchers = specs
        .iter()
        .map(|s| SlotMatcher::parse(s))
        .collect::<persona_core::Result<Vec<_>>>()?;
    let sources = generate_scenarios(&ScenarioSpec {
        count: args.count,
        seed: args.seed,
        ..ScenarioSpec::default()
    })?;
    let table = match args.distribution {
        Distribution::Mixed => ParaphraseTable::default(),
        Distribution::Identity => ParaphraseTable::identity(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(args.seed, 0xBE7C));
    let cases = sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let n = s.profile.len();
            let (a, b) = match args.distribution {
                Distribution::Mixed => {
                    let a = rng.gen_range(0..=n);
                    (a, rng.gen_range(0..=n - a))
                }
                Distribution::Identity => (rng.gen_range(1..=n), 0),
            };
            build_overlap_bench_with(&s.profile, a, b, mix_seed(args.seed, i as u64), &table)
        })
        .collect::<persona_core::Result<Vec<_>>>()?;

    let mut csv = format!("{}\n", MatcherReport::CSV_HEADER);
    let mut reports = Vec::with_capacity(matchers.len());
    for m in &matchers {
        let report = eval_matcher(&cases, m)?;
        csv.push_str(&report.csv_row(&m.label()));
        csv.push('\n');
        reports.push((m.label(), report));
    }

    create_dir(&args.out)?;
    write_file(&args.out.join("judge_bench.csv"), &csv)?;
    let mut lines = String::new();
    for c in &cases {
        lines.push_str(&serde_json::to_string(c).map_err(|e| Failure::runtime(e.to_string()))?);
        lines.push('\n');
    }
    write_file(&args.out.join("cases.jsonl"), &lines)?;
    write_json(
        &args.out.join("manifest.json"),
        &json!({
            "command": "judge-bench",
            "seed": args.seed,
            "count": args.count,
            "distribution": format!("{:?}", args.distribution).to_lowercase(),
            "matchers": specs,
        }),
    )?;
    for (label, r) in &reports {
        println!(
            "{label}: exact {:.1}% fuzzy {:.1}% rmse {:.2}",
            r.exact_acc * 100.0,
            r.fuzzy_acc * 100.0,
            r.rmse
        );
    }
    Ok(())
}
