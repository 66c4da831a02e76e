//! Run configuration: defaults, budget presets, the config file and flags,
//! merged in that order.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use cehr_core::baselines::{BiLstmConfig, LogisticConfig};
use cehr_core::cohort::shipped_names;
use cehr_core::harness::{Ablation, FEW_SHOT_FRACTIONS};
use cehr_core::model::{FitConfig, ModelConfig, PretrainConfig};
use cehr_core::sequence::{VisitTypes, FIRST_CONCEPT};
use cehr_core::synth::SynthConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::Exit;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Budget {
    /// 2,000 patients, 2-layer d=64 encoder, 3 pretraining epochs.
    Tiny,
    /// 5,000 patients, 3-layer d=96 encoder, 5 pretraining epochs.
    Small,
    /// The documented full-size settings (5 layers, d=128).
    PaperDoc,
}

impl Budget {
    fn preset(self) -> &'static str {
        match self {
            Budget::Tiny => {
                r#"
[synth]
n_patients = 2000
[model]
n_layers = 2
n_heads = 4
d_model = 64
d_ff = 256
[pretrain]
epochs = 3
batch_size = 8
lr = 1e-3
[finetune]
lr = 5e-4
batch_size = 16
"#
            }
            Budget::Small => {
                r#"
[synth]
n_patients = 5000
[model]
n_layers = 3
n_heads = 4
d_model = 96
d_ff = 384
[pretrain]
epochs = 5
batch_size = 16
lr = 5e-4
[finetune]
lr = 2e-4
batch_size = 32
"#
            }
            Budget::PaperDoc => "",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    /// Label-stratified fold assignment.
    pub stratified: bool,
    /// Draw each few-shot subset on its own instead of nesting them.
    pub independent_few_shot: bool,
    pub fractions: Vec<f64>,
    /// Overrides every cohort's observation window, in days.
    pub observation_days: Option<i64>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            stratified: true,
            independent_few_shot: false,
            fractions: FEW_SHOT_FRACTIONS.to_vec(),
            observation_days: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
    pub budget: Budget,
    /// Directory holding persons.csv, visits.csv and events.csv; `out`
    /// when absent.
    pub data: Option<PathBuf>,
    /// Rollup map for the LR baseline; `<data>/hierarchy.csv` when absent.
    pub hierarchy: Option<PathBuf>,
    /// Pretrained weights; `<out>/model.cehrw` when absent.
    pub checkpoint: Option<PathBuf>,
    /// An ablation row name (CEHR-BERT, M-BERT, ...), `LR` or `Bi-LSTM`.
    pub variant: String,
    pub fraction: f64,
    pub tasks: Vec<String>,
    /// Extra cohort definition files; each adds a task under its name.
    pub cohorts: Vec<PathBuf>,
    /// Pretrained token embeddings for the Bi-LSTM baseline.
    pub embeddings: Option<PathBuf>,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FitConfig,
    pub harness: HarnessConfig,
    pub bilstm: BiLstmConfig,
    pub logistic: LogisticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            jobs: 1,
            budget: Budget::Tiny,
            data: None,
            hierarchy: None,
            checkpoint: None,
            variant: Ablation::CehrBert.name().into(),
            fraction: 1.0,
            tasks: vec!["gap_signal".into()],
            cohorts: Vec::new(),
            embeddings: None,
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FitConfig::default(),
            harness: HarnessConfig::default(),
            bilstm: BiLstmConfig::default(),
            logistic: LogisticConfig::default(),
        }
    }
}

/// What a run trains and scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Choice {
    Encoder(Ablation),
    Logistic,
    BiLstm,
}

impl Choice {
    pub fn parse(s: &str) -> Option<Self> {
        if s.eq_ignore_ascii_case("lr") {
            Some(Self::Logistic)
        } else if s.eq_ignore_ascii_case("bi-lstm") {
            Some(Self::BiLstm)
        } else {
            Ablation::parse(s).map(Self::Encoder)
        }
    }
}

/// Values given on the command line; each beats the file.
#[derive(Clone, Debug, Default)]
pub struct Flags {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub budget: Option<Budget>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub variant: Option<String>,
    pub fraction: Option<f64>,
    pub tasks: Option<Vec<String>>,
}

const SEEDED: [&str; 4] = ["model", "pretrain", "finetune", "bilstm"];

impl RunConfig {
    pub fn data_dir(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.out.clone())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.cehrw"))
    }

    pub fn choice(&self) -> Choice {
        Choice::parse(&self.variant).expect("validated")
    }

    /// Every violated constraint.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.jobs == 0 {
            v.push("jobs must be >= 1".into());
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            v.push(format!("fraction {} outside (0, 1]", self.fraction));
        }
        if Choice::parse(&self.variant).is_none() {
            let rows: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
            v.push(format!("unknown variant `{}` (expected one of {}, LR, Bi-LSTM)", self.variant, rows.join(", ")));
        }
        if self.tasks.is_empty() {
            v.push("tasks must name at least one task".into());
        }
        // definitions from `cohorts` files are only known once loaded
        if self.cohorts.is_empty() {
            for t in &self.tasks {
                if t != "gap_signal" && !shipped_names().contains(&t.as_str()) {
                    v.push(format!("unknown task `{t}`"));
                }
            }
        }
        if self.harness.fractions.is_empty() {
            v.push("harness.fractions is empty".into());
        }
        for f in &self.harness.fractions {
            if !(*f > 0.0 && *f <= 1.0) {
                v.push(format!("harness.fractions entry {f} outside (0, 1]"));
            }
        }
        if let Some(d) = self.harness.observation_days {
            if d < 0 {
                v.push(format!("harness.observation_days {d} is negative"));
            }
        }
        v.extend(self.synth.violations().into_iter().map(|m| format!("synth: {m}")));
        if self.model.vocab_size != 0 {
            v.push("model.vocab_size is taken from the data and must not be set".into());
        }
        let types = VisitTypes::default().len();
        if self.model.n_visit_types != types {
            v.push(format!("model.n_visit_types must be {types}, got {}", self.model.n_visit_types));
        }
        let probe = ModelConfig {
            vocab_size: FIRST_CONCEPT as usize + 1,
            ..self.model.clone()
        };
        v.extend(
            probe
                .violations()
                .into_iter()
                .filter(|m| !m.contains("n_visit_types"))
                .map(|m| format!("model: {m}")),
        );
        let p = &self.pretrain;
        if p.epochs == 0 || p.batch_size == 0 {
            v.push("pretrain: epochs and batch_size must be >= 1".into());
        }
        if !(p.lr > 0.0) || p.eta_min < 0.0 {
            v.push("pretrain: lr must be > 0 and eta_min >= 0".into());
        }
        if !(p.mlm_rate > 0.0 && p.mlm_rate < 1.0) {
            v.push(format!("pretrain: mlm_rate {} outside (0, 1)", p.mlm_rate));
        }
        if !(0.0..=1.0).contains(&p.vtp_rate) {
            v.push(format!("pretrain: vtp_rate {} outside [0, 1]", p.vtp_rate));
        }
        let f = &self.finetune;
        if f.max_epochs == 0 || f.batch_size == 0 {
            v.push("finetune: max_epochs and batch_size must be >= 1".into());
        }
        if !(f.lr > 0.0) {
            v.push(format!("finetune: lr {} must be > 0", f.lr));
        }
        let b = &self.bilstm;
        if b.embed_dim == 0 || b.hidden == 0 {
            v.push("bilstm: embed_dim and hidden must be >= 1".into());
        }
        if !(0.0..1.0).contains(&b.dropout) {
            v.push(format!("bilstm: dropout {} outside [0, 1)", b.dropout));
        }
        let l = &self.logistic;
        if !(l.l2 >= 0.0) || l.max_iter == 0 || !(l.tol > 0.0) {
            v.push("logistic: need l2 >= 0, max_iter >= 1 and tol > 0".into());
        }
        if let Some(lr) = l.lr {
            if !(lr > 0.0) {
                v.push(format!("logistic: lr {lr} must be > 0"));
            }
        }
        v
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Every key the file may use, with optional fields filled in.
fn key_template() -> Table {
    let mut t = RunConfig {
        data: Some(PathBuf::new()),
        hierarchy: Some(PathBuf::new()),
        checkpoint: Some(PathBuf::new()),
        embeddings: Some(PathBuf::new()),
        ..RunConfig::default()
    };
    t.harness.observation_days = Some(0);
    t.logistic.lr = Some(1.0);
    Table::try_from(t).expect("config serializes")
}

/// Removes keys of `file` absent from `template`, reporting each.
fn strip_unknown(file: &mut Table, template: &Table, prefix: &str, out: &mut Vec<String>) {
    let keys: Vec<String> = file.keys().cloned().collect();
    for k in keys {
        let path = format!("{prefix}{k}");
        match template.get(&k) {
            None => {
                out.push(format!("unknown key `{path}`"));
                file.remove(&k);
            }
            Some(Value::Table(sub)) => {
                if let Some(Value::Table(f)) = file.get_mut(&k) {
                    strip_unknown(f, sub, &format!("{path}."), out);
                }
            }
            Some(_) => {}
        }
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

fn flag_table(f: &Flags) -> Table {
    let mut t = Table::new();
    if let Some(s) = f.seed {
        t.insert("seed".into(), Value::Integer(s as i64));
    }
    if let Some(o) = &f.out {
        t.insert("out".into(), path_value(o));
    }
    if let Some(j) = f.jobs {
        t.insert("jobs".into(), Value::Integer(j as i64));
    }
    if let Some(d) = &f.data {
        t.insert("data".into(), path_value(d));
    }
    if let Some(c) = &f.checkpoint {
        t.insert("checkpoint".into(), path_value(c));
    }
    if let Some(v) = &f.variant {
        t.insert("variant".into(), Value::String(v.clone()));
    }
    if let Some(x) = f.fraction {
        t.insert("fraction".into(), Value::Float(x));
    }
    if let Some(ts) = &f.tasks {
        t.insert("tasks".into(), Value::Array(ts.iter().cloned().map(Value::String).collect()));
    }
    t
}

fn has_key(t: &Table, section: &str, key: &str) -> bool {
    matches!(t.get(section), Some(Value::Table(s)) if s.contains_key(key))
}

/// Builds the effective configuration. Precedence is flag > file > budget
/// preset > built-in default. Sub-seeds follow the master seed unless the
/// file sets them.
pub fn resolve(file: Option<&Path>, flags: &Flags) -> Result<RunConfig> {
    let mut problems = Vec::new();
    let mut file_table = match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|_| Exit::missing(p))?;
            toml::from_str::<Table>(&text)
                .map_err(|e| Exit::config(vec![format!("{}: {}", p.display(), e.message())]))?
        }
        None => Table::new(),
    };
    strip_unknown(&mut file_table, &key_template(), "", &mut problems);

    let budget = match (flags.budget, file_table.get("budget")) {
        (Some(b), _) => b,
        (None, Some(v)) => match v.clone().try_into::<Budget>() {
            Ok(b) => b,
            Err(_) => {
                problems.push(format!("unknown budget {v} (expected tiny, small or paper-doc)"));
                file_table.remove("budget");
                Budget::Tiny
            }
        },
        (None, None) => Budget::Tiny,
    };

    let mut merged = Table::try_from(RunConfig::default()).expect("config serializes");
    merge(&mut merged, toml::from_str(budget.preset()).expect("preset parses"));
    let seeds_in_file: Vec<bool> = SEEDED.iter().map(|s| has_key(&file_table, s, "seed")).collect();
    merge(&mut merged, file_table);
    merge(&mut merged, flag_table(flags));
    merged.insert("budget".into(), Value::try_from(budget).expect("budget serializes"));
    let master = merged.get("seed").cloned().unwrap_or(Value::Integer(0));
    for (section, set) in SEEDED.iter().zip(seeds_in_file) {
        if !set {
            if let Some(Value::Table(s)) = merged.get_mut(*section) {
                s.insert("seed".into(), master.clone());
            }
        }
    }

    match Value::Table(merged).try_into::<RunConfig>() {
        Ok(cfg) => {
            problems.extend(cfg.violations());
            if problems.is_empty() {
                Ok(cfg)
            } else {
                Err(Exit::config(problems).into())
            }
        }
        Err(e) => {
            problems.push(e.message().to_string());
            Err(Exit::config(problems).into())
        }
    }
}
