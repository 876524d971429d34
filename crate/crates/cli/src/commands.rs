use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ttct_core::corpus::{build_corpus, load_corpus, save_corpus, CorpusConfig, CorpusSplit};
use ttct_core::encoders::{AlignmentModel, Vocab};
use ttct_core::eval::{heatmap, heatmap_csv, lavawall_pairs, pareto_front, transfer_auc, ParetoPoint, TransferReport};
use ttct_core::predictor::{calibrate_scores, calibration_scores, CalibratedPredictor, CalibrationReport};
use ttct_core::saferl::{evaluate_policy, train_policy, IterationRecord, Mode, POLICY_METRICS_FILE};
use ttct_core::trainer::{epoch_means, train, LossReport, TrainIo, METRICS_FILE};
use ttct_core::Error;

use crate::config::{resolve, RunConfig};
use crate::error::{CliError, CliResult};
use crate::plot::{bar_chart, frontier_chart, line_chart, roc_chart, Series};

pub const RUN_RECORD_FILE: &str = "eval.json";
pub const POLICY_SUMMARY_FILE: &str = "summary.json";

/// A loaded configuration bound to an output root.
pub struct Ctx {
    pub cfg: RunConfig,
    pub root: PathBuf,
}

impl Ctx {
    pub fn path(&self, p: &Path) -> PathBuf {
        resolve(&self.root, p)
    }

    fn input(&self, p: &Path) -> CliResult<PathBuf> {
        let full = self.path(p);
        if full.exists() {
            Ok(full)
        } else {
            Err(Error::MissingArtifact(full).into())
        }
    }

    fn model(&self) -> CliResult<AlignmentModel> {
        Ok(AlignmentModel::load(&self.input(&self.cfg.paths.model)?)?)
    }

    fn corpus(&self) -> CliResult<CorpusSplit> {
        Ok(load_corpus(&self.input(&self.cfg.paths.corpus)?)?)
    }

    fn calibration(&self) -> CliResult<CalibrationReport> {
        Ok(CalibrationReport::load(&self.input(&self.cfg.paths.calibration)?)?)
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, text).map_err(CliError::io(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.into()))?;
    s.push('\n');
    write_text(path, &s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() }.into())
}

/// Wall-clock facts go to a sidecar so the main artifacts stay reproducible.
pub fn write_sidecar(path: &Path, command: &str, started: SystemTime, clock: Instant) -> CliResult<()> {
    let unix = started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    write_json(
        path,
        &serde_json::json!({
            "command": command,
            "started_unix": unix,
            "elapsed_secs": clock.elapsed().as_secs_f64(),
        }),
    )
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".timing.json");
    PathBuf::from(s)
}

pub fn gen_corpus(ctx: &Ctx) -> CliResult<PathBuf> {
    let cfg = &ctx.cfg;
    let out = ctx.path(&cfg.paths.corpus);
    let corpus = build_corpus(&cfg.env, &cfg.corpus)?;
    if let Some(parent) = out.parent() {
        create_dir(parent)?;
    }
    save_corpus(&out, &corpus)?;
    println!(
        "corpus: {} train / {} test positive pairs, {} negatives -> {}",
        corpus.train.len(),
        corpus.test.len(),
        corpus.negatives.len(),
        out.display()
    );
    for (family, n) in corpus.family_counts() {
        println!("  {:<13} {n}", family.name());
    }
    Ok(out)
}

/// Reads the per-batch training log, keeping the last record of each step so
/// a resumed run does not double count.
pub fn read_loss_log(path: &Path) -> CliResult<Vec<LossReport>> {
    let f = std::fs::File::open(path).map_err(CliError::io(path))?;
    let mut by_step: BTreeMap<(usize, usize), LossReport> = BTreeMap::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(CliError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: LossReport = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        by_step.insert((r.epoch, r.step), r);
    }
    Ok(by_step.into_values().collect())
}

pub fn train_ttct(ctx: &Ctx, resume: Option<&Path>) -> CliResult<PathBuf> {
    let cfg = &ctx.cfg;
    let corpus = ctx.corpus()?;
    let enc = &cfg.ttct.encoder;
    let longest = corpus.train.iter().chain(&corpus.test).map(|p| p.trajectory.len()).max().unwrap_or(0);
    if longest > enc.max_traj_len {
        return Err(CliError::Config(format!(
            "corpus holds trajectories of length {longest} but ttct.encoder.max_traj_len is {}",
            enc.max_traj_len
        )));
    }
    let resume = match resume {
        Some(p) if !p.exists() => return Err(Error::MissingArtifact(p.to_path_buf()).into()),
        r => r.map(Path::to_path_buf),
    };
    let model =
        AlignmentModel::new(enc.clone(), Vocab::build(enc.max_text_len), &mut ChaCha8Rng::seed_from_u64(enc.seed))?;
    let dir = ctx.path(&cfg.paths.ttct_dir);
    let io = TrainIo { dir: dir.clone(), resume };
    println!("training on {} pairs for {} epochs", corpus.train.len(), cfg.ttct.train.epochs);
    let out = train(model, &corpus, &cfg.ttct.train, Some(&io))?;
    let model_path = ctx.path(&cfg.paths.model);
    if let Some(parent) = model_path.parent() {
        create_dir(parent)?;
    }
    out.model.save(&model_path)?;

    let log = read_loss_log(&dir.join(METRICS_FILE))?;
    let means = epoch_means(&log);
    for (_, r) in &means {
        println!(
            "  epoch {:>3}  mc {:.4}  wt {:.4}  ca {:.4}  total {:.4}  alpha {:.3}",
            r.epoch, r.l_mc, r.l_wt, r.l_ca, r.l_total, r.alpha
        );
    }
    let curve = |name: &str, idx: usize, f: fn(&LossReport) -> f64| {
        Series::new(name, means.iter().map(|(_, r)| (r.epoch as f64, f(r))).collect(), idx)
    };
    let series = [
        curve("total", 0, |r| r.l_total),
        curve("MC", 1, |r| r.l_mc),
        curve("WT", 2, |r| r.l_wt),
        curve("CA", 3, |r| r.l_ca),
    ];
    write_text(&dir.join("loss_curve.svg"), &line_chart("alignment training loss", "epoch", "mean loss", &series))?;
    println!("model -> {}", model_path.display());
    Ok(model_path)
}

pub fn calibrate(ctx: &Ctx) -> CliResult<CalibrationReport> {
    let cfg = &ctx.cfg;
    let model = ctx.model()?;
    let corpus = ctx.corpus()?;
    let scores = calibration_scores(&model, &corpus.test, &corpus.negatives, &cfg.calibrate.set)?;
    let report = calibrate_scores(&scores, cfg.calibrate.per_family)?;
    let out = ctx.path(&cfg.paths.calibration);
    if let Some(parent) = out.parent() {
        create_dir(parent)?;
    }
    report.save(&out)?;
    write_text(
        &out.with_file_name("roc.svg"),
        &roc_chart(&format!("violation prediction ROC (AUC {:.3})", report.auc), &report.roc.fpr, &report.roc.tpr),
    )?;
    let m = &report.metrics;
    println!(
        "beta {:.4}  auc {:.4}  J {:.4}  ({} positive / {} negative scores)",
        report.beta, report.auc, report.youden_j, report.n_positive, report.n_negative
    );
    println!(
        "at beta: accuracy {:.4}  recall {:.4}  precision {:.4}  F1 {:.4}",
        m.accuracy, m.recall, m.precision, m.f1
    );
    if let Some(fb) = &report.family_beta {
        for (f, b) in fb {
            println!("  beta[{}] {:.4}", f.name(), b);
        }
    }
    println!("report -> {}", out.display());
    Ok(report)
}

/// Oracle-judged outcome of one trained policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub mode: Mode,
    pub seed: u64,
    pub iterations: usize,
    pub final_lambda: f64,
    pub eval_episodes: usize,
    pub avg_reward: f64,
    pub avg_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; zero for a single value.
    pub fn of(xs: &[f64]) -> MeanStd {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let std =
            if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub avg_reward: MeanStd,
    pub avg_cost: MeanStd,
}

pub fn run_dir(policy_dir: &Path, mode: Mode, seed: u64) -> PathBuf {
    policy_dir.join(mode.name()).join(format!("seed_{seed}"))
}

pub fn train_policies(ctx: &Ctx) -> CliResult<Vec<ModeSummary>> {
    let cfg = &ctx.cfg;
    let modes = ctx.cfg.modes();
    let seeds = ctx.cfg.seeds();
    let model = ctx.model()?;
    let predictor = if modes.contains(&Mode::Cp) {
        Some(CalibratedPredictor::new(model.clone(), ctx.calibration()?)?)
    } else {
        None
    };
    let policy_dir = ctx.path(&cfg.paths.policy_dir);
    let mut summaries = Vec::new();
    for &mode in &modes {
        let mut runs = Vec::new();
        let mut curves = Vec::new();
        for &seed in &seeds {
            let rl = ttct_core::saferl::SafeRlConfig { mode, seed, ..cfg.rl.clone() };
            let dir = run_dir(&policy_dir, mode, seed);
            let run = train_policy(&rl, &cfg.env, &model, predictor.as_ref(), Some(&dir))?;
            let ev = evaluate_policy(
                &run.policy,
                &cfg.env,
                &rl.constraints,
                cfg.policy.eval_episodes,
                cfg.policy.eval_seed,
                cfg.policy.greedy_eval,
            )?;
            let summary = RunSummary {
                run_id: format!("{}/seed_{seed}", mode.name()),
                mode,
                seed,
                iterations: rl.iterations,
                final_lambda: run.lambda,
                eval_episodes: ev.episodes,
                avg_reward: ev.avg_reward,
                avg_cost: ev.avg_cost,
            };
            write_json(&dir.join(RUN_RECORD_FILE), &summary)?;
            println!(
                "{:<8} seed {:<4} eval Avg.R {:.4}  Avg.C {:.4}  lambda {:.4}",
                mode.name(),
                seed,
                ev.avg_reward,
                ev.avg_cost,
                run.lambda
            );
            curves.push(run.records);
            runs.push(summary);
        }
        let mean_curve = |f: fn(&IterationRecord) -> f64| -> Vec<(f64, f64)> {
            let n = curves.iter().map(Vec::len).min().unwrap_or(0);
            (0..n).map(|i| (i as f64, curves.iter().map(|c| f(&c[i])).sum::<f64>() / curves.len() as f64)).collect()
        };
        let series = [
            Series::new("Avg.R", mean_curve(|r| r.avg_reward), 0),
            Series::new("Avg.C", mean_curve(|r| r.avg_cost), 1),
        ];
        write_text(
            &policy_dir.join(mode.name()).join("learning_curve.svg"),
            &line_chart(
                &format!("learning curve, {} ({} seeds)", mode.name(), seeds.len()),
                "iteration",
                "rollout average",
                &series,
            ),
        )?;
        let r: Vec<f64> = runs.iter().map(|s| s.avg_reward).collect();
        let c: Vec<f64> = runs.iter().map(|s| s.avg_cost).collect();
        summaries.push(ModeSummary {
            mode,
            seeds: seeds.clone(),
            avg_reward: MeanStd::of(&r),
            avg_cost: MeanStd::of(&c),
        });
    }
    write_json(&policy_dir.join(POLICY_SUMMARY_FILE), &summaries)?;
    println!("{:<8} {:>18} {:>18}", "mode", "Avg.R", "Avg.C");
    for s in &summaries {
        println!(
            "{:<8} {:>9.4} ± {:<6.4} {:>9.4} ± {:<6.4}",
            s.mode.name(),
            s.avg_reward.mean,
            s.avg_reward.std,
            s.avg_cost.mean,
            s.avg_cost.std
        );
    }
    Ok(summaries)
}

/// Every `eval.json` two levels below `dir`, in path order.
pub fn discover_runs(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    let mut modes: Vec<PathBuf> =
        std::fs::read_dir(dir).map_err(CliError::io(dir))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    modes.sort();
    for m in modes.into_iter().filter(|p| p.is_dir()) {
        let mut seeds: Vec<PathBuf> =
            std::fs::read_dir(&m).map_err(CliError::io(&m))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        seeds.sort();
        out.extend(seeds.into_iter().map(|s| s.join(RUN_RECORD_FILE)).filter(|p| p.is_file()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoReport {
    pub points: Vec<ParetoPoint>,
    pub front: Vec<ParetoPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub heldout_auc: f64,
    pub beta: f64,
    pub transfer_auc: Option<f64>,
    pub pareto_points: usize,
    pub pareto_front: usize,
    pub heatmap_pair: usize,
}

fn write_scores(dir: &Path, stem: &str, title: &str, rep: &TransferReport) -> CliResult<()> {
    write_json(&dir.join(format!("{stem}.json")), rep)?;
    write_text(
        &dir.join(format!("{stem}_roc.svg")),
        &roc_chart(&format!("{title} (AUC {:.3})", rep.auc), &rep.roc.fpr, &rep.roc.tpr),
    )
}

pub fn eval(ctx: &Ctx) -> CliResult<EvalSummary> {
    let cfg = &ctx.cfg;
    let model = ctx.model()?;
    let calib = ctx.calibration()?;
    let corpus = ctx.corpus()?;
    let dir = ctx.path(&cfg.paths.eval_dir);
    create_dir(&dir)?;
    let beta = calib.beta;

    let held = transfer_auc(&model, &corpus.test, beta, cfg.eval.chunk)?;
    write_scores(&dir, "heldout", "held-out violation prediction", &held)?;
    println!("held-out AUC {:.4} over {} pairs (beta {:.4})", held.auc, held.pairs, beta);

    let run_paths = if cfg.eval.runs.is_empty() {
        discover_runs(&ctx.path(&cfg.paths.policy_dir))?
    } else {
        cfg.eval.runs.iter().map(|p| ctx.input(p)).collect::<CliResult<Vec<_>>>()?
    };
    let mut points = Vec::new();
    for p in &run_paths {
        let r: RunSummary = read_json(p)?;
        points.push(ParetoPoint { avg_reward: r.avg_reward, avg_cost: r.avg_cost, run_id: r.run_id, mode: r.mode });
    }
    let front = pareto_front(&points);
    if points.is_empty() {
        println!("no run records under {}; Pareto frontier skipped", ctx.path(&cfg.paths.policy_dir).display());
    } else {
        let mut series: Vec<Series> = Vec::new();
        for (i, mode) in [Mode::Cp, Mode::Gc, Mode::PpoOnly].into_iter().enumerate() {
            let pts: Vec<(f64, f64)> =
                points.iter().filter(|p| p.mode == mode).map(|p| (p.avg_cost, p.avg_reward)).collect();
            if !pts.is_empty() {
                series.push(Series::new(mode.name(), pts, i));
            }
        }
        let mut line: Vec<(f64, f64)> = front.iter().map(|p| (p.avg_cost, p.avg_reward)).collect();
        line.sort_by(|a, b| a.0.total_cmp(&b.0));
        let svg = frontier_chart("Pareto frontier", "Avg.C", "Avg.R", &series, &Series::new("frontier", line, 4));
        write_text(&dir.join("pareto.svg"), &svg)?;
        println!("Pareto frontier: {} of {} runs", front.len(), points.len());
        for p in &front {
            println!("  {:<20} Avg.R {:.4}  Avg.C {:.4}", p.run_id, p.avg_reward, p.avg_cost);
        }
    }
    write_json(&dir.join("pareto.json"), &ParetoReport { points: points.clone(), front: front.clone() })?;

    let transfer = if cfg.eval.skip_transfer {
        None
    } else {
        if cfg.eval.lavawall_horizon > model.cfg.max_traj_len {
            return Err(CliError::Config(format!(
                "eval.lavawall_horizon {} exceeds the model's max_traj_len {}",
                cfg.eval.lavawall_horizon, model.cfg.max_traj_len
            )));
        }
        let ccfg = CorpusConfig { n_episodes: cfg.eval.lavawall_episodes, ..cfg.corpus.clone() };
        let pairs = lavawall_pairs(cfg.eval.lavawall_horizon, &ccfg)?;
        let rep = transfer_auc(&model, &pairs, beta, cfg.eval.chunk)?;
        write_scores(&dir, "transfer", "zero-shot LavaWall", &rep)?;
        println!("zero-shot LavaWall AUC {:.4} over {} pairs (same beta)", rep.auc, rep.pairs);
        Some(rep.auc)
    };

    let k = cfg.eval.heatmap_pair;
    let pair = corpus.test.get(k).ok_or_else(|| {
        CliError::Config(format!("eval.heatmap_pair {k} out of range ({} held-out pairs)", corpus.test.len()))
    })?;
    let hm = heatmap(&model, &pair.trajectory, &pair.text, beta)?;
    write_json(&dir.join("heatmap.json"), &hm)?;
    write_text(&dir.join("heatmap.csv"), &heatmap_csv(&hm))?;
    let (touch, floor): (Vec<_>, Vec<_>) = hm.rows.iter().partition(|r| !r.events.is_empty());
    let bars = [
        Series::new("floor", floor.iter().map(|r| (r.t as f64, r.c_hat)).collect(), 0),
        Series::new("hazard", touch.iter().map(|r| (r.t as f64, r.c_hat)).collect(), 1),
    ];
    let title = format!("per-step cost ({} constraint)", pair.text.spec.family().name());
    write_text(&dir.join("heatmap.svg"), &bar_chart(&title, "t", "assigned cost", &bars))?;
    println!(
        "heatmap: {} steps, terminal sim {:.4}, violated {}, episode cost {:.4}",
        hm.terminal_t, hm.terminal_sim, hm.violated, hm.episode_cost
    );

    let summary = EvalSummary {
        heldout_auc: held.auc,
        beta,
        transfer_auc: transfer,
        pareto_points: points.len(),
        pareto_front: front.len(),
        heatmap_pair: k,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn load_policy_metrics(run_dir: &Path) -> CliResult<Vec<IterationRecord>> {
    let path = run_dir.join(POLICY_METRICS_FILE);
    let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Parse { path: path.clone(), line: i + 1, msg: e.to_string() }.into())
        })
        .collect()
}
