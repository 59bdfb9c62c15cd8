//! Surrogate-to-victim attack campaigns.
//!
//! A plan names the surrogate models (ensembles joined with `+`), the victim
//! models and the attackers. Models named `A` or `B` are trained in-run on
//! the synthetic corpus; any other name is a model file path. Adversarial
//! examples are generated with surrogate handles only and then scored by
//! every victim.
//!
//! Output tree under `<out_dir>/<name>/`:
//!
//! ```text
//! <surrogate>__<attacker>__<victim>.csv   per-trial records
//! summary.csv                             one row per cell, plus clean rows
//! sweep.csv                               EER / minDCF against SNR budget
//! saliency.csv, saliency/*.pgm, *.csv     Layer-CAM before/after (conv victims)
//! manifest.txt                            the resolved plan, reloadable
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::attackers::{check_ball, run_attack, AttackConfig, AttackerKind};
use crate::config::KeyValues;
use crate::metrics::{self, DcfParams, DecidedTrial, Decision, Rates, ScoreSet, Truth};
use crate::nets::{self, load_model, Architecture, EmbeddingModel, SpeakerProfile};
use crate::objectives::{csi_decision, osi_decision, AttackObjective, LossSurface, ModelObjective, Task};
use crate::rng::{derive, seeded};
use crate::saliency::{layer_cam, render, saliency_shift, SaliencyMap};
use crate::training::{synth_corpus, train, Corpus, CorpusSpec, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanTask {
    Asv,
    Csi,
    Osi,
}

impl PlanTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "asv" => Ok(PlanTask::Asv),
            "csi" => Ok(PlanTask::Csi),
            "osi" => Ok(PlanTask::Osi),
            _ => Err(Error::Config(format!("unknown task '{s}' (expected asv, csi or osi)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PlanTask::Asv => "asv",
            PlanTask::Csi => "csi",
            PlanTask::Osi => "osi",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub name: String,
    pub task: PlanTask,
    /// Each entry is one surrogate set; more than one model is an ensemble.
    pub surrogates: Vec<Vec<String>>,
    pub victims: Vec<String>,
    pub attackers: Vec<AttackerKind>,
    /// Per-trial seeds are derived from `seed`; the attack config's own seed
    /// is ignored.
    pub attack: AttackConfig,
    pub n_trials: usize,
    pub n_enrolled: usize,
    pub enroll_utterances: usize,
    pub test_utterances: usize,
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
    pub budgets: Vec<f64>,
    pub saliency_trials: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            name: "toy".into(),
            task: PlanTask::Asv,
            surrogates: vec![vec!["A".into()], vec!["B".into()]],
            victims: vec!["A".into(), "B".into()],
            attackers: vec![AttackerKind::Fgsm, AttackerKind::Ifgsm, AttackerKind::StaMdct],
            attack: AttackConfig::default(),
            n_trials: 100,
            n_enrolled: 10,
            enroll_utterances: 3,
            test_utterances: 6,
            seed: 1,
            corpus: CorpusSpec::default(),
            train: TrainConfig::default(),
            budgets: vec![
                f64::NEG_INFINITY,
                25.0,
                30.0,
                32.0,
                34.0,
                36.0,
                38.0,
                40.0,
                45.0,
                f64::INFINITY,
            ],
            saliency_trials: 0,
            out_dir: PathBuf::from("results"),
        }
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(", ")
}

impl ExperimentPlan {
    pub const KEYS: &'static [&'static str] = &[
        "name",
        "task",
        "surrogates",
        "victims",
        "attackers",
        "n_trials",
        "n_enrolled",
        "enroll_utterances",
        "test_utterances",
        "seed",
        "budgets",
        "saliency_trials",
        "out_dir",
        "config_hash",
        "corpus.*",
        "train.*",
        "attack.*",
    ];

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.check_known(Self::KEYS)?;
        let d = Self::default();
        let sub = |prefix: &str| {
            let mut out = KeyValues::default();
            for (k, v) in kv.iter() {
                if let Some(rest) = k.strip_prefix(prefix) {
                    out.set(rest, v);
                }
            }
            out
        };
        let corpus = CorpusSpec::from_key_values(&sub("corpus."))?;
        let tkv = sub("train.");
        tkv.check_known(&["epochs", "learning_rate", "batch_size", "seed"])?;
        let train = TrainConfig {
            epochs: tkv.parsed("epochs")?.unwrap_or(d.train.epochs),
            learning_rate: tkv.parsed("learning_rate")?.unwrap_or(d.train.learning_rate),
            batch_size: tkv.parsed("batch_size")?.unwrap_or(d.train.batch_size),
            seed: tkv.parsed("seed")?.unwrap_or(d.train.seed),
        };
        let akv = sub("attack.");
        if akv.get("attacker").is_some() {
            return Err(Error::Config("use 'attackers' rather than 'attack.attacker'".into()));
        }
        let attack = AttackConfig::from_key_values(&akv)?;
        let plan = Self {
            name: kv.get("name").unwrap_or(&d.name).to_string(),
            task: kv.get("task").map(PlanTask::parse).transpose()?.unwrap_or(d.task),
            surrogates: kv
                .get("surrogates")
                .map(|s| {
                    split_list(s)
                        .iter()
                        .map(|g| g.split('+').map(|m| m.trim().to_string()).collect())
                        .collect()
                })
                .unwrap_or(d.surrogates),
            victims: kv.get("victims").map(split_list).unwrap_or(d.victims),
            attackers: kv
                .get("attackers")
                .map(|s| {
                    split_list(s)
                        .iter()
                        .map(|a| AttackerKind::parse(a))
                        .collect::<Result<Vec<_>>>()
                })
                .transpose()?
                .unwrap_or(d.attackers),
            attack,
            n_trials: kv.parsed("n_trials")?.unwrap_or(d.n_trials),
            n_enrolled: kv.parsed("n_enrolled")?.unwrap_or(d.n_enrolled),
            enroll_utterances: kv.parsed("enroll_utterances")?.unwrap_or(d.enroll_utterances),
            test_utterances: kv.parsed("test_utterances")?.unwrap_or(d.test_utterances),
            seed: kv.parsed("seed")?.unwrap_or(d.seed),
            corpus,
            train,
            budgets: kv
                .get("budgets")
                .map(|s| {
                    split_list(s)
                        .iter()
                        .map(|b| b.parse::<f64>().map_err(|_| Error::Config(format!("bad budget '{b}'"))))
                        .collect::<Result<Vec<_>>>()
                })
                .transpose()?
                .unwrap_or(d.budgets),
            saliency_trials: kv.parsed("saliency_trials")?.unwrap_or(d.saliency_trials),
            out_dir: kv.get("out_dir").map(PathBuf::from).unwrap_or(d.out_dir),
        };
        plan.validate()?;
        if let Some(h) = kv.get("config_hash") {
            let actual = plan.config_hash()?;
            if h != actual {
                return Err(Error::Config(format!(
                    "config_hash mismatch: manifest {h}, recomputed {actual}"
                )));
            }
        }
        Ok(plan)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_key_values(&KeyValues::load(path)?)
    }

    /// Every setting except `out_dir`, in a fixed order.
    fn settings(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("name", self.name.clone());
        kv.set("task", self.task.name());
        kv.set(
            "surrogates",
            self.surrogates
                .iter()
                .map(|g| g.join("+"))
                .collect::<Vec<_>>()
                .join(", "),
        );
        kv.set("victims", self.victims.join(", "));
        kv.set(
            "attackers",
            self.attackers.iter().map(|a| a.name()).collect::<Vec<_>>().join(", "),
        );
        kv.set("n_trials", self.n_trials.to_string());
        kv.set("n_enrolled", self.n_enrolled.to_string());
        kv.set("enroll_utterances", self.enroll_utterances.to_string());
        kv.set("test_utterances", self.test_utterances.to_string());
        kv.set("seed", self.seed.to_string());
        kv.set("budgets", join_f64(&self.budgets));
        kv.set("saliency_trials", self.saliency_trials.to_string());
        let c = &self.corpus;
        kv.set("corpus.n_speakers", c.n_speakers.to_string());
        kv.set("corpus.utterances_per_speaker", c.utterances_per_speaker.to_string());
        kv.set("corpus.duration_s", c.duration_s.to_string());
        kv.set("corpus.snr_db", c.snr_db.to_string());
        kv.set("corpus.seed", c.seed.to_string());
        kv.set("corpus.first_utterance", c.first_utterance.to_string());
        kv.set("train.epochs", self.train.epochs.to_string());
        kv.set("train.learning_rate", self.train.learning_rate.to_string());
        kv.set("train.batch_size", self.train.batch_size.to_string());
        kv.set("train.seed", self.train.seed.to_string());
        for (k, v) in self.attack.to_key_values().iter() {
            if k != "attacker" {
                kv.set(&format!("attack.{k}"), v);
            }
        }
        kv
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = self.settings();
        kv.set("out_dir", self.out_dir.display().to_string());
        kv
    }

    /// SHA-256 over the settings text and the bytes of every model file the
    /// plan loads.
    pub fn config_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.settings().to_text().as_bytes());
        for name in self.model_names() {
            if trained_arch(&name).is_none() {
                let bytes = std::fs::read(&name).map_err(|e| Error::io(&name, e))?;
                h.update(name.as_bytes());
                h.update(&bytes);
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("invalid plan name '{}'", self.name));
        }
        if self.surrogates.is_empty()
            || self
                .surrogates
                .iter()
                .any(|g| g.is_empty() || g.iter().any(String::is_empty))
        {
            return bad("surrogates must be non-empty".into());
        }
        if self.victims.is_empty() || self.attackers.is_empty() {
            return bad("victims and attackers must be non-empty".into());
        }
        if self.n_trials == 0 || self.n_enrolled == 0 || self.enroll_utterances == 0 || self.test_utterances == 0 {
            return bad("trial, enrollment and test counts must be >= 1".into());
        }
        if self.task == PlanTask::Asv && !self.n_trials.is_multiple_of(2) {
            return bad(format!("ASV trials must split evenly, got {}", self.n_trials));
        }
        if self.task == PlanTask::Csi && self.n_enrolled < 2 {
            return bad("CSI needs at least 2 enrolled speakers".into());
        }
        if self.n_enrolled > self.corpus.n_speakers {
            return bad(format!(
                "{} enrolled speakers but only {} in the corpus",
                self.n_enrolled, self.corpus.n_speakers
            ));
        }
        if self.budgets.iter().any(|b| b.is_nan()) {
            return bad("budgets must not be NaN".into());
        }
        self.attack.validate()
    }

    /// Distinct model names across surrogates and victims, sorted.
    pub fn model_names(&self) -> Vec<String> {
        let set: BTreeSet<String> = self.surrogates.iter().flatten().chain(&self.victims).cloned().collect();
        set.into_iter().collect()
    }

    pub fn output_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }

    fn eval_corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            utterances_per_speaker: self.enroll_utterances + self.test_utterances,
            first_utterance: self.corpus.first_utterance + self.corpus.utterances_per_speaker,
            ..self.corpus.clone()
        }
    }
}

fn trained_arch(name: &str) -> Option<Architecture> {
    match name {
        "A" => Some(Architecture::conv_net_a()),
        "B" => Some(Architecture::frame_net_b()),
        _ => None,
    }
}

fn display_name(name: &str) -> String {
    if trained_arch(name).is_some() {
        return name.to_string();
    }
    Path::new(name)
        .file_stem()
        .map_or_else(|| name.to_string(), |s| s.to_string_lossy().into_owned())
}

pub type ModelStore = BTreeMap<String, EmbeddingModel>;

/// Trains `A`/`B` on the plan's corpus and loads file-backed models.
pub fn resolve_models(plan: &ExperimentPlan) -> Result<ModelStore> {
    let mut store = ModelStore::new();
    let mut corpus: Option<Corpus> = None;
    for name in plan.model_names() {
        let model = match trained_arch(&name) {
            Some(arch) => {
                if corpus.is_none() {
                    corpus = Some(synth_corpus(&plan.corpus)?);
                }
                let init = EmbeddingModel::new(arch.clone(), derive(plan.train.seed, &[arch.id() as u64]))?;
                log::info!("training {name} ({})", arch.name());
                let (m, log) = train(&init, corpus.as_ref().expect("corpus"), &plan.train)?;
                log::info!("{name}: final accuracy {:.3}", log.final_accuracy());
                m
            }
            None => load_model(&name)?,
        };
        store.insert(name, model);
    }
    Ok(store)
}

/// One evaluation trial. Indices refer to the enrolled-speaker list and the
/// test-utterance pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub index: usize,
    /// Claimed enrolled speaker (ASV) or `None` (identification).
    pub claim: Option<usize>,
    pub utterance: usize,
    pub truth: Truth,
    /// Attack target among the enrolled speakers (identification).
    pub target: Option<usize>,
}

impl Trial {
    pub fn goal(&self) -> Decision {
        match (self.truth, self.target) {
            (Truth::Target, _) => Decision::Reject,
            (Truth::NonTarget, _) => Decision::Accept,
            (_, Some(t)) => Decision::Speaker(t),
            (_, None) => unreachable!("identification trial without target"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TestUtterance {
    pub speaker: usize,
    pub speaker_id: String,
    pub wave: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrialSet {
    pub task: PlanTask,
    /// Corpus speaker index of each enrolled speaker.
    pub enrolled: Vec<usize>,
    pub enrolled_ids: Vec<String>,
    /// Enrollment waveforms per enrolled speaker.
    pub enrollment: Vec<Vec<Vec<f64>>>,
    pub pool: Vec<TestUtterance>,
    pub trials: Vec<Trial>,
}

/// Builds the seeded trial list. ASV trials are half target, half
/// non-target; CSI targets exclude the true speaker; OSI test speakers are
/// never enrolled.
pub fn build_trials(plan: &ExperimentPlan, corpus: &Corpus) -> Result<TrialSet> {
    let n_spk = corpus.n_speakers();
    if plan.n_enrolled > n_spk {
        return Err(Error::InvalidArgument(format!(
            "{} enrolled speakers requested from {n_spk}",
            plan.n_enrolled
        )));
    }
    let mut rng = seeded(derive(plan.seed, &[0x7121]));
    let mut order: Vec<usize> = (0..n_spk).collect();
    order.shuffle(&mut rng);
    let mut enrolled: Vec<usize> = order[..plan.n_enrolled].to_vec();
    enrolled.sort_unstable();
    let mut enrollment = Vec::new();
    let mut pool = Vec::new();
    for s in 0..n_spk {
        let utts: Vec<&crate::training::Utterance> = corpus.of_speaker(s).collect();
        if utts.len() < plan.enroll_utterances + 1 {
            return Err(Error::InvalidArgument(format!(
                "speaker {} has {} utterances, need more than {}",
                corpus.speaker_ids[s],
                utts.len(),
                plan.enroll_utterances
            )));
        }
        if enrolled.contains(&s) {
            enrollment.push(
                utts[..plan.enroll_utterances]
                    .iter()
                    .map(|u| u.wave.as_slice().to_vec())
                    .collect(),
            );
        }
        for u in &utts[plan.enroll_utterances..] {
            pool.push(TestUtterance {
                speaker: s,
                speaker_id: corpus.speaker_ids[s].clone(),
                wave: u.wave.as_slice().to_vec(),
            });
        }
    }
    let slot = |s: usize| enrolled.iter().position(|&e| e == s);
    let too_small = |what: &str, have: usize, need: usize| {
        Error::InvalidArgument(format!("corpus too small: {need} {what} requested, {have} available"))
    };
    let take = |rng: &mut crate::rng::Rng, mut idx: Vec<usize>, n: usize, what: &str| -> Result<Vec<usize>> {
        if idx.len() < n {
            return Err(too_small(what, idx.len(), n));
        }
        idx.shuffle(rng);
        idx.truncate(n);
        Ok(idx)
    };
    let n = plan.n_trials;
    let mut trials = Vec::with_capacity(n);
    match plan.task {
        PlanTask::Asv => {
            let enrolled_utts: Vec<usize> = (0..pool.len()).filter(|&i| slot(pool[i].speaker).is_some()).collect();
            let targets = take(&mut rng, enrolled_utts, n / 2, "target trials")?;
            let mut used: BTreeSet<usize> = targets.iter().copied().collect();
            for &u in &targets {
                trials.push((Some(slot(pool[u].speaker).expect("enrolled")), u, Truth::Target, None));
            }
            let rest: Vec<usize> = (0..pool.len()).filter(|i| !used.contains(i)).collect();
            let nontargets = take(&mut rng, rest, n / 2, "non-target trials")?;
            for &u in &nontargets {
                used.insert(u);
                let own = slot(pool[u].speaker);
                let choices: Vec<usize> = (0..enrolled.len()).filter(|&e| Some(e) != own).collect();
                if choices.is_empty() {
                    return Err(too_small("non-target claims", 0, 1));
                }
                let claim = choices[rng.random_range(0..choices.len())];
                trials.push((Some(claim), u, Truth::NonTarget, None));
            }
        }
        PlanTask::Csi | PlanTask::Osi => {
            let osi = plan.task == PlanTask::Osi;
            let eligible: Vec<usize> = (0..pool.len())
                .filter(|&i| slot(pool[i].speaker).is_some() != osi)
                .collect();
            let picked = take(&mut rng, eligible, n, "identification test utterances")?;
            for u in picked {
                let truth = slot(pool[u].speaker);
                let choices: Vec<usize> = (0..enrolled.len()).filter(|&e| Some(e) != truth).collect();
                if choices.is_empty() {
                    return Err(too_small("attack targets", 0, 1));
                }
                let target = choices[rng.random_range(0..choices.len())];
                let truth = truth.map_or(Truth::Outsider, Truth::Speaker);
                trials.push((None, u, truth, Some(target)));
            }
        }
    }
    let trials = trials
        .into_iter()
        .enumerate()
        .map(|(index, (claim, utterance, truth, target))| Trial {
            index,
            claim,
            utterance,
            truth,
            target,
        })
        .collect();
    Ok(TrialSet {
        task: plan.task,
        enrolled_ids: enrolled.iter().map(|&s| corpus.speaker_ids[s].clone()).collect(),
        enrolled,
        enrollment,
        pool,
        trials,
    })
}

/// A model's view of the trial set: profiles, calibrated threshold and clean
/// test embeddings.
pub struct Scorer<'a> {
    pub model: &'a EmbeddingModel,
    pub profiles: Vec<SpeakerProfile>,
    /// Threshold at the clean EER operating point.
    pub theta: f64,
    pub pool_embeddings: Vec<Vec<f64>>,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a EmbeddingModel, set: &TrialSet) -> Result<Self> {
        let profiles = set
            .enrollment
            .iter()
            .zip(&set.enrolled_ids)
            .map(|(utts, id)| nets::enroll(model, utts, id))
            .collect::<Result<Vec<_>>>()?;
        let pool_embeddings = set
            .pool
            .par_iter()
            .map(|u| model.embed(&u.wave))
            .collect::<Result<Vec<_>>>()?;
        let mut cal = ScoreSet::default();
        for (u, e) in set.pool.iter().zip(&pool_embeddings) {
            for (slot, p) in profiles.iter().enumerate() {
                cal.push(nets::score(&p.embedding, e)?, set.enrolled[slot] == u.speaker);
            }
        }
        let theta = metrics::eer(&cal)?.threshold;
        Ok(Self {
            model,
            profiles,
            theta,
            pool_embeddings,
        })
    }

    pub fn scores(&self, e: &[f64]) -> Result<Vec<f64>> {
        self.profiles.iter().map(|p| nets::score(&p.embedding, e)).collect()
    }

    pub fn objective(&self, trial: &Trial) -> Result<AttackObjective> {
        match (trial.truth, trial.claim, trial.target) {
            (Truth::Target, Some(c), _) => {
                AttackObjective::asv(Task::AsvEvasion, self.profiles[c].clone(), Some(self.theta))
            }
            (Truth::NonTarget, Some(c), _) => {
                AttackObjective::asv(Task::AsvImpersonation, self.profiles[c].clone(), Some(self.theta))
            }
            (Truth::Speaker(_), _, Some(t)) => AttackObjective::csi(self.profiles.clone(), t),
            (Truth::Outsider, _, Some(t)) => AttackObjective::osi(self.profiles.clone(), t, self.theta),
            _ => Err(Error::Invariant(format!("malformed trial {}", trial.index))),
        }
    }

    /// Verification score (ASV) and the system decision.
    pub fn decide(&self, task: PlanTask, trial: &Trial, e: &[f64]) -> Result<(f64, Decision)> {
        let s = self.scores(e)?;
        Ok(match task {
            PlanTask::Asv => {
                let v = s[trial.claim.expect("ASV claim")];
                (
                    v,
                    if v > self.theta {
                        Decision::Accept
                    } else {
                        Decision::Reject
                    },
                )
            }
            PlanTask::Csi => {
                let d = csi_decision(&s);
                (s[d], Decision::Speaker(d))
            }
            PlanTask::Osi => match osi_decision(&s, self.theta) {
                Some(d) => (s[d], Decision::Speaker(d)),
                None => (s[csi_decision(&s)], Decision::Unknown),
            },
        })
    }
}

fn decision_name(d: Decision, ids: &[String]) -> String {
    match d {
        Decision::Accept => "accept".into(),
        Decision::Reject => "reject".into(),
        Decision::Speaker(i) => ids[i].clone(),
        Decision::Unknown => "unknown".into(),
    }
}

fn truth_name(t: Truth, ids: &[String]) -> String {
    match t {
        Truth::Target => "target".into(),
        Truth::NonTarget => "nontarget".into(),
        Truth::Speaker(i) => ids[i].clone(),
        Truth::Outsider => "outsider".into(),
    }
}

/// Adversarial waveforms for every trial, generated with surrogate handles
/// only. Results are in trial order.
pub fn generate(surrogates: &[&Scorer<'_>], set: &TrialSet, cfg: &AttackConfig, seed: u64) -> Result<Vec<Vec<f64>>> {
    set.trials
        .par_iter()
        .map(|trial| {
            let x = &set.pool[trial.utterance].wave;
            let objectives = surrogates
                .iter()
                .map(|s| s.objective(trial))
                .collect::<Result<Vec<_>>>()?;
            let surfaces: Vec<ModelObjective<'_>> = surrogates
                .iter()
                .zip(&objectives)
                .map(|(s, o)| ModelObjective {
                    model: s.model,
                    objective: o,
                })
                .collect();
            let refs: Vec<&dyn LossSurface> = surfaces.iter().map(|s| s as &dyn LossSurface).collect();
            let cfg = AttackConfig {
                seed: derive(seed, &[0xa77a, trial.index as u64]),
                ..cfg.clone()
            };
            let adv = run_attack(x, &refs, &cfg)?;
            check_ball(&adv, x, cfg.epsilon)?;
            Ok(adv)
        })
        .collect()
}

/// Per-trial record of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub clean_score: f64,
    pub adv_score: f64,
    pub clean: Decision,
    pub adv: Decision,
    pub snr_db: f64,
    pub l2: f64,
    pub l2_raw: f64,
    pub linf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub surrogate: String,
    pub attacker: String,
    pub victim: String,
    pub white_box: bool,
    pub eer: Option<f64>,
    pub min_dcf: Option<f64>,
    pub rates: Rates,
    pub snr_db: f64,
    pub l2: f64,
    pub l2_raw: f64,
    pub records: Vec<TrialRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub surrogate: String,
    pub attacker: String,
    pub victim: String,
    pub budget: f64,
    pub n_adversarial: usize,
    pub eer: f64,
    pub min_dcf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyRecord {
    pub surrogate: String,
    pub attacker: String,
    pub victim: String,
    pub trial: usize,
    pub shift: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub out: PathBuf,
    pub clean: Vec<CellResult>,
    pub cells: Vec<CellResult>,
    pub sweep: Vec<SweepPoint>,
    pub saliency: Vec<SaliencyRecord>,
    pub files: Vec<PathBuf>,
}

impl RunReport {
    pub fn cell(&self, surrogate: &str, attacker: &str, victim: &str) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.surrogate == surrogate && c.attacker == attacker && c.victim == victim)
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn asv_scores(set: &TrialSet, records: &[TrialRecord], adversarial: bool) -> Result<ScoreSet> {
    let scores = records
        .iter()
        .map(|r| if adversarial { r.adv_score } else { r.clean_score })
        .collect();
    let labels = set.trials.iter().map(|t| t.truth == Truth::Target).collect();
    ScoreSet::new(scores, labels)
}

fn summarize(
    set: &TrialSet,
    surrogate: &str,
    attacker: &str,
    victim: &str,
    white_box: bool,
    records: Vec<TrialRecord>,
    adversarial: bool,
) -> Result<CellResult> {
    let decided: Vec<DecidedTrial> = set
        .trials
        .iter()
        .zip(&records)
        .map(|(t, r)| DecidedTrial {
            truth: t.truth,
            decision: if adversarial { r.adv } else { r.clean },
            attack_goal: adversarial.then(|| t.goal()),
        })
        .collect();
    let (eer, min_dcf) = if set.task == PlanTask::Asv {
        let s = asv_scores(set, &records, adversarial)?;
        (
            Some(metrics::eer(&s)?.eer),
            Some(metrics::min_dcf(&s, DcfParams::default())?),
        )
    } else {
        (None, None)
    };
    Ok(CellResult {
        surrogate: surrogate.into(),
        attacker: attacker.into(),
        victim: victim.into(),
        white_box,
        eer,
        min_dcf,
        rates: metrics::rates(&decided),
        snr_db: mean(records.iter().map(|r| r.snr_db).filter(|v| v.is_finite())),
        l2: mean(records.iter().map(|r| r.l2)),
        l2_raw: mean(records.iter().map(|r| r.l2_raw)),
        records,
    })
}

fn evaluate_cell(victim: &Scorer<'_>, set: &TrialSet, adv: &[Vec<f64>]) -> Result<Vec<TrialRecord>> {
    set.trials
        .par_iter()
        .zip(adv)
        .map(|(t, a)| {
            let x = &set.pool[t.utterance].wave;
            let (clean_score, clean) = victim.decide(set.task, t, &victim.pool_embeddings[t.utterance])?;
            let (adv_score, advd) = victim.decide(set.task, t, &victim.model.embed(a)?)?;
            Ok(TrialRecord {
                trial: t.index,
                clean_score,
                adv_score,
                clean,
                adv: advd,
                snr_db: metrics::snr(x, a)?,
                l2: metrics::l2(x, a)?,
                l2_raw: metrics::l2_raw(x, a)?,
                linf: x.iter().zip(a).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max),
            })
        })
        .collect()
}

fn cell_csv(set: &TrialSet, victim: &Scorer<'_>, records: &[TrialRecord]) -> String {
    let ids = &set.enrolled_ids;
    let mut s = String::from(
        "trial,claim,test_speaker,truth,goal,clean_score,adv_score,clean_decision,adv_decision,success,snr_db,l2,l2_raw,linf\n",
    );
    for (t, r) in set.trials.iter().zip(records) {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            t.index,
            t.claim.map_or_else(|| "-".to_string(), |c| ids[c].clone()),
            set.pool[t.utterance].speaker_id,
            truth_name(t.truth, ids),
            decision_name(t.goal(), ids),
            r.clean_score,
            r.adv_score,
            decision_name(r.clean, ids),
            decision_name(r.adv, ids),
            u8::from(r.adv == t.goal()),
            r.snr_db,
            r.l2,
            r.l2_raw,
            r.linf
        )
        .unwrap();
    }
    let _ = victim;
    s
}

fn opt(v: Option<f64>) -> String {
    metrics::format_rate(v)
}

fn summary_csv(rows: &[&CellResult]) -> String {
    let mut s = String::from("surrogate,attacker,victim,white_box,trials,eer,min_dcf,far,tasr,ier,snr_db,l2,l2_raw\n");
    for c in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.surrogate,
            c.attacker,
            c.victim,
            u8::from(c.white_box),
            c.records.len(),
            opt(c.eer),
            opt(c.min_dcf),
            opt(c.rates.far),
            opt(c.rates.tasr),
            opt(c.rates.ier),
            c.snr_db,
            c.l2,
            c.l2_raw
        )
        .unwrap();
    }
    s
}

fn sweep_cell(set: &TrialSet, cell: &CellResult, budgets: &[f64]) -> Result<Vec<SweepPoint>> {
    let original: Vec<(f64, bool)> = set
        .trials
        .iter()
        .zip(&cell.records)
        .map(|(t, r)| (r.clean_score, t.truth == Truth::Target))
        .collect();
    let adversarial: Vec<(f64, bool)> = original
        .iter()
        .zip(&cell.records)
        .map(|(o, r)| (r.adv_score, o.1))
        .collect();
    let p_adv: Vec<f64> = cell.records.iter().map(|r| r.snr_db).collect();
    let group: BTreeSet<usize> = (0..original.len()).collect();
    budgets
        .iter()
        .map(|&b| {
            let mixed = metrics::mixed_trial_set(&original, &adversarial, &p_adv, b, &group)?;
            let s = ScoreSet::new(mixed.iter().map(|m| m.0).collect(), mixed.iter().map(|m| m.1).collect())?;
            Ok(SweepPoint {
                surrogate: cell.surrogate.clone(),
                attacker: cell.attacker.clone(),
                victim: cell.victim.clone(),
                budget: b,
                n_adversarial: p_adv.iter().filter(|&&p| p >= b).count(),
                eer: metrics::eer(&s)?.eer,
                min_dcf: metrics::min_dcf(&s, DcfParams::default())?,
            })
        })
        .collect()
}

fn write(path: &Path, bytes: &[u8], files: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    files.push(path.to_path_buf());
    Ok(())
}

/// Runs the plan, training or loading models first.
pub fn run(plan: &ExperimentPlan) -> Result<RunReport> {
    plan.validate()?;
    let models = resolve_models(plan)?;
    run_with_models(plan, &models)
}

/// Runs the plan against already-resolved models keyed by plan name.
pub fn run_with_models(plan: &ExperimentPlan, models: &ModelStore) -> Result<RunReport> {
    plan.validate()?;
    for name in plan.model_names() {
        if !models.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("model '{name}' is not available")));
        }
    }
    let out = plan.output_dir();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let corpus = synth_corpus(&plan.eval_corpus_spec())?;
    let set = build_trials(plan, &corpus)?;
    let scorers: BTreeMap<&str, Scorer<'_>> = plan
        .model_names()
        .iter()
        .map(|n| {
            Ok((
                models.get_key_value(n).expect("checked").0.as_str(),
                Scorer::new(&models[n], &set)?,
            ))
        })
        .collect::<Result<_>>()?;
    let mut files = Vec::new();
    let mut clean = Vec::new();
    let mut cells = Vec::new();
    let mut sweep = Vec::new();
    let mut sal = Vec::new();
    let sal_dir = out.join("saliency");

    for v in &plan.victims {
        let scorer = &scorers[v.as_str()];
        let recs = evaluate_cell(
            scorer,
            &set,
            &set.trials
                .iter()
                .map(|t| set.pool[t.utterance].wave.clone())
                .collect::<Vec<_>>(),
        )?;
        clean.push(summarize(&set, "-", "none", &display_name(v), false, recs, false)?);
        log::info!("clean {v}: theta {:.4}", scorer.theta);
    }

    let mut clean_maps: BTreeMap<(String, usize), SaliencyMap> = BTreeMap::new();
    for group in &plan.surrogates {
        let sname = group.iter().map(|m| display_name(m)).collect::<Vec<_>>().join("+");
        let handles: Vec<&Scorer<'_>> = group.iter().map(|m| &scorers[m.as_str()]).collect();
        for &kind in &plan.attackers {
            let cfg = AttackConfig {
                kind,
                ..plan.attack.clone()
            };
            log::info!("generating {sname} / {}", kind.name());
            let adv = generate(&handles, &set, &cfg, plan.seed)?;
            for v in &plan.victims {
                let vname = display_name(v);
                let scorer = &scorers[v.as_str()];
                let recs = evaluate_cell(scorer, &set, &adv)?;
                let white_box = group.contains(v);
                let cell = summarize(&set, &sname, kind.name(), &vname, white_box, recs, true)?;
                write(
                    &out.join(format!("{sname}__{}__{vname}.csv", kind.name())),
                    cell_csv(&set, scorer, &cell.records).as_bytes(),
                    &mut files,
                )?;
                if set.task == PlanTask::Asv {
                    sweep.extend(sweep_cell(&set, &cell, &plan.budgets)?);
                }
                if plan.saliency_trials > 0 && scorer.model.last_conv().is_some() {
                    std::fs::create_dir_all(&sal_dir).map_err(|e| Error::io(&sal_dir, e))?;
                    let picks: Vec<&Trial> = set
                        .trials
                        .iter()
                        .filter(|t| matches!(t.truth, Truth::Target | Truth::Speaker(_)))
                        .take(plan.saliency_trials)
                        .collect();
                    for t in picks {
                        let truth_slot = match t.truth {
                            Truth::Speaker(i) => i,
                            _ => t.claim.expect("ASV claim"),
                        };
                        let profile = &scorer.profiles[truth_slot];
                        let key = (vname.clone(), t.index);
                        if !clean_maps.contains_key(&key) {
                            let m = layer_cam(scorer.model, &set.pool[t.utterance].wave, profile, "last-conv")?;
                            let stem = sal_dir.join(format!("{vname}__t{:04}__clean", t.index));
                            render(&m, stem.with_extension("pgm"))?;
                            files.push(stem.with_extension("pgm"));
                            write(&stem.with_extension("csv"), m.to_csv().as_bytes(), &mut files)?;
                            clean_maps.insert(key.clone(), m);
                        }
                        let m = layer_cam(scorer.model, &adv[t.index], profile, "last-conv")?;
                        let stem = sal_dir.join(format!("{sname}__{}__{vname}__t{:04}", kind.name(), t.index));
                        render(&m, stem.with_extension("pgm"))?;
                        files.push(stem.with_extension("pgm"));
                        write(&stem.with_extension("csv"), m.to_csv().as_bytes(), &mut files)?;
                        sal.push(SaliencyRecord {
                            surrogate: sname.clone(),
                            attacker: kind.name().into(),
                            victim: vname.clone(),
                            trial: t.index,
                            shift: saliency_shift(&clean_maps[&key], &m)?,
                        });
                    }
                }
                log::info!(
                    "{sname} -> {vname} [{}]{}: eer {} tasr {} snr {:.2}",
                    kind.name(),
                    if white_box { " (white-box)" } else { "" },
                    opt(cell.eer),
                    opt(cell.rates.tasr),
                    cell.snr_db
                );
                cells.push(cell);
            }
        }
    }

    let rows: Vec<&CellResult> = clean.iter().chain(&cells).collect();
    write(&out.join("summary.csv"), summary_csv(&rows).as_bytes(), &mut files)?;
    if set.task == PlanTask::Asv {
        let mut s = String::from("surrogate,attacker,victim,budget,n_adversarial,eer,min_dcf\n");
        for p in &sweep {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                p.surrogate, p.attacker, p.victim, p.budget, p.n_adversarial, p.eer, p.min_dcf
            )
            .unwrap();
        }
        write(&out.join("sweep.csv"), s.as_bytes(), &mut files)?;
    }
    if !sal.is_empty() {
        let mut s = String::from("surrogate,attacker,victim,trial,shift\n");
        for r in &sal {
            writeln!(s, "{},{},{},{},{}", r.surrogate, r.attacker, r.victim, r.trial, r.shift).unwrap();
        }
        write(&out.join("saliency.csv"), s.as_bytes(), &mut files)?;
    }

    let mut manifest = String::from("# experiment manifest; reload with `experiment --plan` to reproduce\n");
    manifest.push_str(&plan.to_key_values().to_text());
    writeln!(manifest, "config_hash = {}", plan.config_hash()?).unwrap();
    for f in &files {
        let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
        let rel = f.strip_prefix(&out).unwrap_or(f);
        writeln!(
            manifest,
            "# sha256 {} {}",
            hex::encode(Sha256::digest(&bytes)),
            rel.display()
        )
        .unwrap();
    }
    let mpath = out.join("manifest.txt");
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;

    Ok(RunReport {
        out,
        clean,
        cells,
        sweep,
        saliency: sal,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_plan(task: PlanTask) -> ExperimentPlan {
        ExperimentPlan {
            task,
            n_trials: 20,
            n_enrolled: 4,
            enroll_utterances: 2,
            test_utterances: 4,
            corpus: CorpusSpec {
                n_speakers: 8,
                utterances_per_speaker: 2,
                duration_s: 0.25,
                ..CorpusSpec::default()
            },
            ..ExperimentPlan::default()
        }
    }

    fn corpus(plan: &ExperimentPlan) -> Corpus {
        synth_corpus(&plan.eval_corpus_spec()).unwrap()
    }

    #[test]
    fn asv_trials_are_balanced() {
        let plan = small_plan(PlanTask::Asv);
        let set = build_trials(&plan, &corpus(&plan)).unwrap();
        assert_eq!(set.trials.len(), 20);
        let targets = set.trials.iter().filter(|t| t.truth == Truth::Target).count();
        assert_eq!(targets, 10);
        for t in &set.trials {
            let claimed = set.enrolled[t.claim.unwrap()];
            assert_eq!(claimed == set.pool[t.utterance].speaker, t.truth == Truth::Target);
        }
    }

    #[test]
    fn csi_targets_exclude_truth() {
        let plan = ExperimentPlan {
            n_trials: 16,
            ..small_plan(PlanTask::Csi)
        };
        let set = build_trials(&plan, &corpus(&plan)).unwrap();
        for t in &set.trials {
            let Truth::Speaker(s) = t.truth else { panic!() };
            assert_ne!(Some(s), t.target);
            assert_eq!(set.enrolled[s], set.pool[t.utterance].speaker);
        }
    }

    #[test]
    fn osi_test_speakers_are_not_enrolled() {
        let plan = ExperimentPlan {
            n_trials: 12,
            ..small_plan(PlanTask::Osi)
        };
        let set = build_trials(&plan, &corpus(&plan)).unwrap();
        let enrolled: BTreeSet<usize> = set.enrolled.iter().copied().collect();
        let tested: BTreeSet<usize> = set.trials.iter().map(|t| set.pool[t.utterance].speaker).collect();
        assert!(enrolled.is_disjoint(&tested));
        assert!(set
            .trials
            .iter()
            .all(|t| t.truth == Truth::Outsider && t.target.is_some()));
    }

    #[test]
    fn trials_are_seeded_and_size_checked() {
        let plan = small_plan(PlanTask::Asv);
        let c = corpus(&plan);
        let a = build_trials(&plan, &c).unwrap();
        let b = build_trials(&plan, &c).unwrap();
        assert_eq!(a.trials, b.trials);
        let big = ExperimentPlan { n_trials: 200, ..plan };
        assert!(build_trials(&big, &c).is_err());
    }

    #[test]
    fn plan_round_trips_through_key_values() {
        let plan = small_plan(PlanTask::Csi);
        let back = ExperimentPlan::from_key_values(&plan.to_key_values()).unwrap();
        assert_eq!(back, plan);
        let mut kv = plan.to_key_values();
        kv.set("config_hash", plan.config_hash().unwrap());
        assert!(ExperimentPlan::from_key_values(&kv).is_ok());
        kv.set("seed", "99");
        assert!(ExperimentPlan::from_key_values(&kv).is_err());
        let kv = KeyValues::parse("surrogates = A+B, B\nattackers = fgsm, sta-dct\nbudgets = -inf, 30, inf").unwrap();
        let p = ExperimentPlan::from_key_values(&kv).unwrap();
        assert_eq!(
            p.surrogates,
            vec![vec!["A".to_string(), "B".to_string()], vec!["B".to_string()]]
        );
        assert_eq!(p.budgets, vec![f64::NEG_INFINITY, 30.0, f64::INFINITY]);
        assert!(ExperimentPlan::from_key_values(&KeyValues::parse("unknown = 1").unwrap()).is_err());
    }
}
