//! `advspeech`: synthesize a corpus, train toy speaker models, enroll,
//! attack, evaluate, draw saliency maps and run experiment plans.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advspeech::attackers::{check_ball, run_attack, AttackConfig, AttackerKind};
use advspeech::audio::{read_wav, write_wav, Waveform};
use advspeech::config::KeyValues;
use advspeech::harness::{self, ExperimentPlan};
use advspeech::metrics::{self, DcfParams, ScoreSet};
use advspeech::nets::{self, load_model, load_profiles, save_model, save_profiles, Architecture, EmbeddingModel};
use advspeech::objectives::{AttackObjective, LossSurface, ModelObjective, Task};
use advspeech::rng::derive;
use advspeech::saliency::{layer_cam, render};
use advspeech::training::{load_corpus, synth_corpus, train, write_corpus, CorpusSpec, TrainConfig};
use advspeech::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "advspeech",
    version,
    about = "Transferable adversarial audio against toy speaker models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic multi-speaker corpus.
    Synth {
        /// `key = value` corpus spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train an embedding model on a corpus directory.
    Train {
        /// Architecture: A (ConvNet-A) or B (FrameNet-B).
        #[arg(long)]
        model: String,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Enroll every speaker of a corpus.
    Enroll {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Utterances per speaker (default: all).
        #[arg(long)]
        utterances: Option<usize>,
    },
    /// Craft an adversarial waveform on surrogate models.
    Attack(AttackArgs),
    /// Score a trial list with a victim model.
    Evaluate {
        #[arg(long)]
        victim: PathBuf,
        #[arg(long)]
        profiles: PathBuf,
        /// CSV with columns `profile,wav,label` (label: target | nontarget).
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Decision threshold; default is the EER threshold of the trial list.
        #[arg(long, allow_hyphen_values = true)]
        theta: Option<f64>,
    },
    /// Layer-CAM map of a speaker score.
    Saliency {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        profile: String,
        #[arg(long, default_value = "last-conv")]
        layer: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment plan.
    Experiment {
        #[arg(long)]
        plan: PathBuf,
        /// Overrides the plan's output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print the default attack, corpus and training settings.
    Defaults,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[arg(long)]
    attacker: Option<String>,
    /// Comma-separated surrogate model files.
    #[arg(long, value_delimiter = ',', required = true)]
    surrogate: Vec<PathBuf>,
    /// Comma-separated profile files, one per surrogate.
    #[arg(long, value_delimiter = ',', required = true)]
    profiles: Vec<PathBuf>,
    #[arg(long)]
    objective: String,
    /// Speaker id to impersonate, evade or force.
    #[arg(long)]
    target: String,
    #[arg(long, allow_hyphen_values = true)]
    theta: Option<f64>,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `key = value` attack config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    n_transforms: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other),
        }
    }
}

type CliResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn print_config(title: &str, kv: &KeyValues) {
    println!("# {title}");
    print!("{}", kv.to_text());
}

fn arch_of(name: &str) -> Result<Architecture, Failure> {
    match name {
        "A" | "a" | "convnet-a" => Ok(Architecture::conv_net_a()),
        "B" | "b" | "framenet-b" => Ok(Architecture::frame_net_b()),
        _ => Err(usage(format!("--model: expected A or B, got '{name}'"))),
    }
}

fn corpus_kv(c: &CorpusSpec) -> KeyValues {
    let mut kv = KeyValues::default();
    kv.set("n_speakers", c.n_speakers.to_string());
    kv.set("utterances_per_speaker", c.utterances_per_speaker.to_string());
    kv.set("duration_s", c.duration_s.to_string());
    kv.set("snr_db", c.snr_db.to_string());
    kv.set("seed", c.seed.to_string());
    kv.set("first_utterance", c.first_utterance.to_string());
    kv
}

fn train_kv(t: &TrainConfig) -> KeyValues {
    let mut kv = KeyValues::default();
    kv.set("epochs", t.epochs.to_string());
    kv.set("learning_rate", t.learning_rate.to_string());
    kv.set("batch_size", t.batch_size.to_string());
    kv.set("seed", t.seed.to_string());
    kv
}

fn synth(spec: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> CliResult {
    let mut kv = match spec {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    if let Some(s) = seed {
        kv.set("seed", s.to_string());
    }
    let spec = CorpusSpec::from_key_values(&kv)?;
    print_config("corpus", &corpus_kv(&spec));
    let corpus = synth_corpus(&spec)?;
    let manifest = write_corpus(&corpus, &out)?;
    println!(
        "wrote {} utterances, manifest {}",
        corpus.utterances.len(),
        manifest.display()
    );
    Ok(())
}

fn train_cmd(
    model: String,
    corpus: PathBuf,
    out: PathBuf,
    epochs: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
) -> CliResult {
    let arch = arch_of(&model)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: epochs.unwrap_or(d.epochs),
        learning_rate: lr.unwrap_or(d.learning_rate),
        seed: seed.unwrap_or(d.seed),
        ..d
    };
    let mut kv = train_kv(&cfg);
    kv.set("model", arch.name());
    print_config("train", &kv);
    let corpus = load_corpus(&corpus)?;
    let init = EmbeddingModel::new(arch.clone(), derive(cfg.seed, &[arch.id() as u64]))?;
    let (m, log) = train(&init, &corpus, &cfg)?;
    print!("{}", log.to_csv());
    save_model(&m, &out)?;
    println!("saved {}", out.display());
    Ok(())
}

fn enroll_cmd(model: PathBuf, corpus: PathBuf, out: PathBuf, utterances: Option<usize>) -> CliResult {
    let mut kv = KeyValues::default();
    kv.set("model", model.display().to_string());
    kv.set("utterances", utterances.map_or("all".into(), |u| u.to_string()));
    print_config("enroll", &kv);
    if utterances == Some(0) {
        return Err(usage("--utterances must be >= 1"));
    }
    let m = load_model(&model)?;
    let corpus = load_corpus(&corpus)?;
    let mut profiles = Vec::new();
    for (s, id) in corpus.speaker_ids.iter().enumerate() {
        let utts: Vec<&[f64]> = corpus
            .of_speaker(s)
            .take(utterances.unwrap_or(usize::MAX))
            .map(|u| u.wave.as_slice())
            .collect();
        profiles.push(nets::enroll(&m, &utts, id)?);
    }
    save_profiles(&profiles, &out)?;
    println!("enrolled {} speakers into {}", profiles.len(), out.display());
    Ok(())
}

fn attack_config(a: &AttackArgs) -> Result<AttackConfig, Failure> {
    let mut kv = match &a.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    let mut set = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.set(k, v);
        }
    };
    set("attacker", a.attacker.clone());
    set("epsilon", a.epsilon.map(|v| v.to_string()));
    set("iterations", a.iterations.map(|v| v.to_string()));
    set("alpha", a.alpha.map(|v| v.to_string()));
    set("mu", a.mu.map(|v| v.to_string()));
    set("n_transforms", a.n_transforms.map(|v| v.to_string()));
    set("sigma", a.sigma.map(|v| v.to_string()));
    set("rho", a.rho.map(|v| v.to_string()));
    set("seed", a.seed.map(|v| v.to_string()));
    AttackConfig::from_key_values(&kv).map_err(|e| usage(e.to_string()))
}

/// Rounds to the 16-bit grid without leaving the epsilon-ball.
fn quantize_in_ball(adv: &[f64], x: &[f64], eps: f64) -> Vec<f64> {
    adv.iter()
        .zip(x)
        .map(|(&a, &o)| {
            let q = a.round();
            if (q - o).abs() <= eps {
                q
            } else {
                o + (a - o).trunc()
            }
        })
        .collect()
}

fn attack_cmd(a: AttackArgs) -> CliResult {
    let cfg = attack_config(&a)?;
    let task = Task::parse(&a.objective).map_err(|e| usage(format!("--objective: {e}")))?;
    if a.profiles.len() != a.surrogate.len() {
        return Err(usage(format!(
            "--profiles: {} files for {} surrogates",
            a.profiles.len(),
            a.surrogate.len()
        )));
    }
    let mut kv = cfg.to_key_values();
    kv.set("objective", task.name());
    kv.set("target", a.target.clone());
    kv.set("theta", a.theta.map_or("none".into(), |t| t.to_string()));
    print_config("attack", &kv);

    let models = a.surrogate.iter().map(load_model).collect::<Result<Vec<_>, _>>()?;
    let mut objectives = Vec::new();
    for p in &a.profiles {
        let profiles = load_profiles(p)?;
        let slot = profiles
            .iter()
            .position(|q| q.speaker_id == a.target)
            .ok_or_else(|| usage(format!("--target: speaker '{}' not in {}", a.target, p.display())))?;
        let o = match task {
            Task::AsvImpersonation | Task::AsvEvasion => AttackObjective::asv(task, profiles[slot].clone(), a.theta)?,
            Task::CsiTargeted => AttackObjective::csi(profiles, slot)?,
            Task::OsiTargeted => {
                let theta = a.theta.ok_or_else(|| usage("--theta is required for osi"))?;
                AttackObjective::osi(profiles, slot, theta)?
            }
        };
        objectives.push(o);
    }
    let surfaces: Vec<ModelObjective<'_>> = models
        .iter()
        .zip(&objectives)
        .map(|(model, objective)| ModelObjective { model, objective })
        .collect();
    let refs: Vec<&dyn LossSurface> = surfaces.iter().map(|s| s as &dyn LossSurface).collect();
    let x = read_wav(&a.input).map_err(Error::from)?;
    let adv = run_attack(x.as_slice(), &refs, &cfg)?;
    let adv = quantize_in_ball(&adv, x.as_slice(), cfg.epsilon);
    check_ball(&adv, x.as_slice(), cfg.epsilon)?;
    write_wav(&a.out, &Waveform::new(adv.clone())).map_err(Error::from)?;
    let loss_before: f64 = refs.iter().map(|s| s.loss(x.as_slice())).sum::<Result<f64, _>>()?;
    let loss_after: f64 = refs.iter().map(|s| s.loss(&adv)).sum::<Result<f64, _>>()?;
    println!(
        "surrogate objective {loss_before:.6} -> {loss_after:.6}; snr {:.2} dB; wrote {}",
        metrics::snr(x.as_slice(), &adv)?,
        a.out.display()
    );
    Ok(())
}

fn evaluate_cmd(victim: PathBuf, profiles: PathBuf, trials: PathBuf, out: PathBuf, theta: Option<f64>) -> CliResult {
    let mut kv = KeyValues::default();
    kv.set("victim", victim.display().to_string());
    kv.set("trials", trials.display().to_string());
    kv.set("theta", theta.map_or("eer".into(), |t| t.to_string()));
    print_config("evaluate", &kv);
    let m = load_model(&victim)?;
    let profiles = load_profiles(&profiles)?;
    let text = std::fs::read_to_string(&trials).map_err(|e| Failure::Runtime(io_err(&trials, e)))?;
    let base = trials.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("profile")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let [pid, wav, label] = f[..] else {
            return Err(usage(format!("--trials: line {} needs profile,wav,label", i + 1)));
        };
        let is_target = match label {
            "target" => true,
            "nontarget" => false,
            _ => return Err(usage(format!("--trials: line {}: bad label '{label}'", i + 1))),
        };
        let p = profiles
            .iter()
            .find(|p| p.speaker_id == pid)
            .ok_or_else(|| usage(format!("--trials: line {}: unknown profile '{pid}'", i + 1)))?;
        let w = read_wav(base.join(wav)).map_err(Error::from)?;
        let s = nets::score(&p.embedding, &m.embed(w.as_slice())?)?;
        rows.push((pid.to_string(), wav.to_string(), is_target, s));
    }
    let set = ScoreSet::new(rows.iter().map(|r| r.3).collect(), rows.iter().map(|r| r.2).collect())?;
    let eer = metrics::eer(&set)?;
    let dcf = metrics::min_dcf(&set, DcfParams::default())?;
    let theta = theta.unwrap_or(eer.threshold);
    let mut csv = String::from("profile,wav,label,score,decision\n");
    for (pid, wav, t, s) in &rows {
        csv.push_str(&format!(
            "{pid},{wav},{},{s},{}\n",
            if *t { "target" } else { "nontarget" },
            if *s > theta { "accept" } else { "reject" }
        ));
    }
    std::fs::write(&out, csv).map_err(|e| Failure::Runtime(io_err(&out, e)))?;
    println!("trials {}; eer {}; min_dcf {dcf}; theta {theta}", rows.len(), eer.eer);
    Ok(())
}

fn io_err(p: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: p.to_path_buf(),
        source: e,
    }
}

fn saliency_cmd(
    model: PathBuf,
    input: PathBuf,
    profiles: PathBuf,
    profile: String,
    layer: String,
    out: PathBuf,
) -> CliResult {
    let mut kv = KeyValues::default();
    kv.set("model", model.display().to_string());
    kv.set("profile", profile.clone());
    kv.set("layer", layer.clone());
    print_config("saliency", &kv);
    let m = load_model(&model)?;
    let ps = load_profiles(&profiles)?;
    let p = ps
        .iter()
        .find(|p| p.speaker_id == profile)
        .ok_or_else(|| usage(format!("--profile: '{profile}' not in {}", profiles.display())))?;
    let x = read_wav(&input).map_err(Error::from)?;
    let map = layer_cam(&m, x.as_slice(), p, &layer).map_err(|e| match e {
        Error::InvalidArgument(msg) => usage(format!("--layer: {msg}")),
        other => Failure::Runtime(other),
    })?;
    render(&map, &out)?;
    let csv = out.with_extension("csv");
    std::fs::write(&csv, map.to_csv()).map_err(|e| Failure::Runtime(io_err(&csv, e)))?;
    println!(
        "layer {} ({} bands x {} frames), score {:.6}; wrote {} and {}",
        map.layer,
        map.rows,
        map.cols,
        map.score,
        out.display(),
        csv.display()
    );
    Ok(())
}

fn experiment_cmd(plan: PathBuf, out_dir: Option<PathBuf>) -> CliResult {
    let mut kv = KeyValues::load(&plan)?;
    if let Some(d) = out_dir {
        kv.set("out_dir", d.display().to_string());
    }
    let plan = ExperimentPlan::from_key_values(&kv)?;
    print_config("experiment", &plan.to_key_values());
    let report = harness::run(&plan)?;
    println!("surrogate,attacker,victim,white_box,eer,tasr,snr_db");
    for c in report.clean.iter().chain(&report.cells) {
        println!(
            "{},{},{},{},{},{},{:.2}",
            c.surrogate,
            c.attacker,
            c.victim,
            u8::from(c.white_box),
            metrics::format_rate(c.eer),
            metrics::format_rate(c.rates.tasr),
            c.snr_db
        );
    }
    println!("outputs in {}", report.out.display());
    Ok(())
}

fn defaults() -> CliResult {
    let mut attack = AttackConfig::default().to_key_values();
    attack.set("acg_eta0", AttackConfig::default().eta0().to_string());
    print_config("attack", &attack);
    println!(
        "# attackers: {}",
        AttackerKind::ALL
            .iter()
            .map(|k| k.name())
            .collect::<Vec<_>>()
            .join(", ")
    );
    print_config("corpus", &corpus_kv(&CorpusSpec::default()));
    print_config("train", &train_kv(&TrainConfig::default()));
    print_config("experiment", &ExperimentPlan::default().to_key_values());
    Ok(())
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Synth { spec, out, seed } => synth(spec, out, seed),
        Command::Train {
            model,
            corpus,
            out,
            epochs,
            learning_rate,
            seed,
        } => train_cmd(model, corpus, out, epochs, learning_rate, seed),
        Command::Enroll {
            model,
            corpus,
            out,
            utterances,
        } => enroll_cmd(model, corpus, out, utterances),
        Command::Attack(a) => attack_cmd(a),
        Command::Evaluate {
            victim,
            profiles,
            trials,
            out,
            theta,
        } => evaluate_cmd(victim, profiles, trials, out, theta),
        Command::Saliency {
            model,
            input,
            profiles,
            profile,
            layer,
            out,
        } => saliency_cmd(model, input, profiles, profile, layer, out),
        Command::Experiment { plan, out_dir } => experiment_cmd(plan, out_dir),
        Command::Defaults => defaults(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            eprintln!("run with --help for usage");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            log::debug!("{e:?}");
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
