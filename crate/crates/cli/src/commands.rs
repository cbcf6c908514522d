use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use latent_dialog::checkpoint;
use latent_dialog::corpus::{build_vocab, generate_weather_corpus, load_corpus, split_corpus, write_jsonl, CorpusFormat, Dialog, GeneratorConfig};
use latent_dialog::evaluation::{compare_models, DEFAULT_NUM_SAMPLES};
use latent_dialog::features::EmbeddingTable;
use latent_dialog::registry::{overlay_config, ModelRegistry, StructureModel, TrainingData};
use latent_dialog::rl::{majority_collapse_map, rl_experiment, simulated_corpus, ExperimentConfig, RewardRegistry};
use latent_dialog::structure::{collapse_states, export_dot, top_exchanges_per_state, CollapseMap, TransitionTable};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::{self, load_layers, put, take, write_snapshot, SNAPSHOT_FILE};
use crate::Layers;

const SPLIT: (f64, f64, f64) = (0.8, 0.1, 0.1);

/// Defaults, then config file and `--set`, then `flags`.
fn settings<T: Serialize + serde::de::DeserializeOwned>(defaults: &T, layers: &Layers, flags: Map<String, Value>) -> Result<T> {
    let mut map = load_layers(layers.config.as_deref(), &layers.sets)?;
    map.extend(flags);
    Ok(overlay_config(defaults, &map)?)
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    value.as_deref().with_context(|| format!("missing `{key}`: pass --{} or set it in the config file", key.replace('_', "-")))
}

fn read_dialogs(path: &Path) -> Result<Vec<Dialog>> {
    load_corpus(path, CorpusFormat::Jsonl).with_context(|| format!("loading corpus {}", path.display()))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

// ---------------------------------------------------------------- gen-corpus

#[derive(Args)]
pub struct GenCorpusArgs {
    #[command(flatten)]
    layers: Layers,
    /// `weather` (nine-state generator) or `restaurant` (the policy simulator).
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    dialogs: Option<usize>,
    /// Retry probability of the weather generator's ASR-affected states.
    #[arg(long)]
    asr_error_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON generator definition replacing the built-in weather machine.
    #[arg(long)]
    generator: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Weather only: write the generator matrix as a transition-table CSV.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Weather only: write the true state sequence of every dialog as JSON.
    #[arg(long)]
    states: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenSettings {
    domain: String,
    dialogs: usize,
    asr_error_rate: f64,
    seed: u64,
    generator: Option<PathBuf>,
    out: Option<PathBuf>,
    truth: Option<PathBuf>,
    states: Option<PathBuf>,
}

pub fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let defaults = GenSettings { domain: "weather".into(), dialogs: 500, asr_error_rate: 0.0, seed: 0, generator: None, out: None, truth: None, states: None };
    let mut flags = Map::new();
    put(&mut flags, "domain", a.domain);
    put(&mut flags, "dialogs", a.dialogs);
    put(&mut flags, "asr_error_rate", a.asr_error_rate);
    put(&mut flags, "seed", a.seed);
    put(&mut flags, "generator", a.generator);
    put(&mut flags, "out", a.out);
    put(&mut flags, "truth", a.truth);
    put(&mut flags, "states", a.states);
    let s: GenSettings = settings(&defaults, &a.layers, flags)?;
    let out = required(&s.out, "out")?;

    let dialogs = match s.domain.as_str() {
        "weather" => {
            let mut generator = match &s.generator {
                Some(path) => {
                    let text = fs::read_to_string(path).with_context(|| format!("reading generator {}", path.display()))?;
                    GeneratorConfig::from_json(&text).with_context(|| format!("in generator {}", path.display()))?
                }
                None => GeneratorConfig::weather_default(s.dialogs, s.asr_error_rate, s.seed),
            };
            generator.num_dialogs = s.dialogs;
            generator.asr_error_rate = s.asr_error_rate;
            generator.seed = s.seed;
            let synth = generate_weather_corpus(&generator)?;
            if let Some(path) = &s.truth {
                write_text(path, &synth.ground_truth.to_csv()?)?;
            }
            if let Some(path) = &s.states {
                let ids: Vec<_> = synth.dialogs.iter().map(|d| d.dialog_id.as_str()).collect();
                write_text(path, &serde_json::to_string(&json!({ "states": generator.states, "dialogs": ids, "sequences": synth.states }))?)?;
            }
            synth.dialogs
        }
        "restaurant" => {
            ensure!(s.generator.is_none() && s.truth.is_none() && s.states.is_none(), "generator, truth and states apply to the weather domain only");
            simulated_corpus(s.dialogs, &mut ChaCha8Rng::seed_from_u64(s.seed))
        }
        other => bail!("unknown domain `{other}` (known: restaurant, weather)"),
    };
    let mut buf = Vec::new();
    write_jsonl(&dialogs, &mut buf)?;
    write_text(out, std::str::from_utf8(&buf)?)?;
    write_snapshot(&config::snapshot_beside(out), &s)?;
    eprintln!("wrote {} dialogs to {}", dialogs.len(), out.display());
    Ok(())
}

// --------------------------------------------------------------------- train

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    layers: Layers,
    /// Registered model name: dvrnn, ddvrnn, ne_dvrnn, hmm or kmeans.
    #[arg(long, alias = "variant")]
    model: Option<String>,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Checkpoint directory to create.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Minimum training-split count for a token to enter the vocabulary.
    #[arg(long)]
    min_count: Option<usize>,
    /// Pretrained `token v1 v2 ...` vectors.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSettings {
    model: String,
    states: usize,
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
    split_seed: u64,
    min_count: usize,
    embeddings: Option<PathBuf>,
}

const TRAIN_KEYS: [&str; 7] = ["model", "states", "corpus", "out", "split_seed", "min_count", "embeddings"];

pub fn train(a: TrainArgs) -> Result<()> {
    let mut map = load_layers(a.layers.config.as_deref(), &a.layers.sets)?;
    put(&mut map, "model", a.model);
    put(&mut map, "states", a.states);
    put(&mut map, "corpus", a.corpus);
    put(&mut map, "out", a.out);
    put(&mut map, "split_seed", a.split_seed);
    put(&mut map, "min_count", a.min_count);
    put(&mut map, "embeddings", a.embeddings);
    put(&mut map, "epochs", a.epochs);
    put(&mut map, "seed", a.seed);
    for key in ["n_states", "variant"] {
        ensure!(!map.contains_key(key), "`{key}` is set through `states` and `model`");
    }
    let own = take(&mut map, &TRAIN_KEYS);
    let defaults = TrainSettings { model: "dvrnn".into(), states: 10, corpus: None, out: None, split_seed: 0, min_count: 1, embeddings: None };
    let s: TrainSettings = overlay_config(&defaults, &own)?;
    let corpus = required(&s.corpus, "corpus")?;
    let out = required(&s.out, "out")?;

    let registry = ModelRegistry::default();
    let model_config = registry.resolve_config(&s.model, s.states, &map)?;

    let dialogs = read_dialogs(corpus)?;
    let (train_d, valid_d, _) = split_corpus(&dialogs, SPLIT, s.split_seed)?;
    let vocab = build_vocab(&train_d, s.min_count)?;
    let (train_enc, valid_enc) = (vocab.encode(&train_d), vocab.encode(&valid_d));

    let embeddings = match &s.embeddings {
        Some(path) => {
            let dim = model_config.get("embed_dim").and_then(Value::as_u64).with_context(|| format!("model `{}` does not use word embeddings", s.model))?;
            let seed = model_config.get("seed").and_then(Value::as_u64).unwrap_or(0);
            let mut table = EmbeddingTable::random(vocab.len(), dim as usize, &mut ChaCha8Rng::seed_from_u64(seed));
            let found = table.import_pretrained_file(&vocab, path)?;
            eprintln!("pretrained vectors for {found} of {} tokens", vocab.len());
            Some(table)
        }
        None => None,
    };

    let data = TrainingData { train: &train_enc, valid: &valid_enc, vocab: &vocab, embeddings: embeddings.as_ref() };
    let trained = registry.train(&s.model, data, &model_config)?;
    trained.model.save(out, Some(s.split_seed))?;
    write_snapshot(&out.join("training_log.json"), &trained.log)?;
    write_snapshot(&out.join(SNAPSHOT_FILE), &json!({ "run": s, "model": model_config }))?;
    eprintln!("saved {} ({} states) to {}", s.model, s.states, out.display());
    Ok(())
}

// ----------------------------------------------------------------- structure

#[derive(Args)]
pub struct StructureArgs {
    #[command(flatten)]
    layers: Layers,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    dot: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Edges below this probability are left out of the DOT graph.
    #[arg(long)]
    threshold: Option<f64>,
    /// JSON map merging learned states into named categories.
    #[arg(long)]
    collapse: Option<PathBuf>,
    /// JSON report of the most confident exchanges of every state.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Write a collapse map sending every state to the action category most
    /// often seen in its system turns (restaurant-domain corpora).
    #[arg(long)]
    majority_map: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StructureSettings {
    checkpoint: Option<PathBuf>,
    corpus: Option<PathBuf>,
    dot: Option<PathBuf>,
    csv: Option<PathBuf>,
    threshold: f64,
    collapse: Option<PathBuf>,
    report: Option<PathBuf>,
    top_k: usize,
    majority_map: Option<PathBuf>,
}

pub fn structure(a: StructureArgs) -> Result<()> {
    let defaults = StructureSettings { checkpoint: None, corpus: None, dot: None, csv: None, threshold: 0.2, collapse: None, report: None, top_k: 5, majority_map: None };
    let mut flags = Map::new();
    put(&mut flags, "checkpoint", a.checkpoint);
    put(&mut flags, "corpus", a.corpus);
    put(&mut flags, "dot", a.dot);
    put(&mut flags, "csv", a.csv);
    put(&mut flags, "threshold", a.threshold);
    put(&mut flags, "collapse", a.collapse);
    put(&mut flags, "report", a.report);
    put(&mut flags, "top_k", a.top_k);
    put(&mut flags, "majority_map", a.majority_map);
    let s: StructureSettings = settings(&defaults, &a.layers, flags)?;
    let ckpt = required(&s.checkpoint, "checkpoint")?;
    let corpus = required(&s.corpus, "corpus")?;
    let first_output = [&s.csv, &s.dot, &s.report, &s.majority_map]
        .into_iter()
        .flatten()
        .next()
        .context("nothing to write: pass --csv, --dot, --report or --majority-map")?;

    let model = ModelRegistry::default().load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let dialogs = read_dialogs(corpus)?;
    let encoded = model.vocab().encode(&dialogs);
    let mut table = model.transition_table(&encoded)?;
    if let Some(path) = &s.collapse {
        let map = CollapseMap::read(path).with_context(|| format!("reading collapse map {}", path.display()))?;
        table = collapse_states(&table, &map)?;
    }
    if let Some(path) = &s.csv {
        write_text(path, &table.to_csv()?)?;
    }
    if let Some(path) = &s.dot {
        write_text(path, &export_dot(&table, None, s.threshold))?;
    }
    if let Some(path) = &s.report {
        let assignment = model.assign_states(&encoded)?;
        let report = top_exchanges_per_state(&assignment, &dialogs, s.top_k)?;
        write_text(path, &serde_json::to_string_pretty(&report)?)?;
    }
    if let Some(path) = &s.majority_map {
        let map = majority_collapse_map(&model.assign_states(&encoded)?, &dialogs)?;
        write_text(path, &serde_json::to_string_pretty(&map)?)?;
    }
    write_snapshot(&config::snapshot_beside(first_output), &s)?;
    Ok(())
}

// ---------------------------------------------------------------------- eval

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    layers: Layers,
    /// Checkpoint directories to score.
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// State counts to report, e.g. `5,10`; defaults to those of the checkpoints.
    #[arg(long, value_delimiter = ',')]
    states: Option<Vec<usize>>,
    /// Also train and score an HMM for every state count.
    #[arg(long)]
    hmm: bool,
    /// Gumbel draws per step for the VRNN bound.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the split seed recorded in the checkpoints.
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalSettings {
    checkpoints: Vec<PathBuf>,
    corpus: Option<PathBuf>,
    states: Vec<usize>,
    hmm: bool,
    samples: usize,
    seed: u64,
    split_seed: Option<u64>,
    out_dir: Option<PathBuf>,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let defaults =
        EvalSettings { checkpoints: vec![], corpus: None, states: vec![], hmm: false, samples: DEFAULT_NUM_SAMPLES, seed: 0, split_seed: None, out_dir: None };
    let mut flags = Map::new();
    if !a.checkpoints.is_empty() {
        put(&mut flags, "checkpoints", Some(a.checkpoints));
    }
    put(&mut flags, "corpus", a.corpus);
    put(&mut flags, "states", a.states);
    put(&mut flags, "hmm", a.hmm.then_some(true));
    put(&mut flags, "samples", a.samples);
    put(&mut flags, "seed", a.seed);
    put(&mut flags, "split_seed", a.split_seed);
    put(&mut flags, "out_dir", a.out_dir);
    let mut s: EvalSettings = settings(&defaults, &a.layers, flags)?;
    let corpus = required(&s.corpus, "corpus")?.to_path_buf();
    let out_dir = required(&s.out_dir, "out_dir")?.to_path_buf();
    ensure!(!s.checkpoints.is_empty() || (s.hmm && !s.states.is_empty()), "nothing to evaluate: give checkpoints, or --hmm with --states");

    let registry = ModelRegistry::default();
    let mut models: Vec<Box<dyn StructureModel>> = Vec::new();
    let mut split_seed = s.split_seed;
    for dir in &s.checkpoints {
        let manifest = checkpoint::read_manifest(dir).with_context(|| format!("checkpoint {}", dir.display()))?;
        let model = registry.load(dir).with_context(|| format!("checkpoint {}", dir.display()))?;
        if let Some(first) = models.first() {
            ensure!(
                model.vocab().hash() == first.vocab().hash(),
                "checkpoint {}: vocabulary differs from {}; scores would not be comparable",
                dir.display(),
                s.checkpoints[0].display()
            );
        }
        match (s.split_seed, split_seed, manifest.split_seed) {
            (None, None, found) => split_seed = found,
            (None, Some(have), Some(found)) if have != found => bail!("checkpoint {}: trained on split seed {found}, others on {have}", dir.display()),
            _ => {}
        }
        models.push(model);
    }
    let split_seed = split_seed.unwrap_or(0);
    s.split_seed = Some(split_seed);
    if s.states.is_empty() {
        s.states = models.iter().map(|m| m.n_states()).collect::<BTreeSet<_>>().into_iter().collect();
    }

    let dialogs = read_dialogs(&corpus)?;
    let (train_d, _, test_d) = split_corpus(&dialogs, SPLIT, split_seed)?;
    let vocab = match models.first() {
        Some(m) => m.vocab().clone(),
        None => build_vocab(&train_d, 1)?,
    };
    let test = vocab.encode(&test_d);
    if s.hmm {
        let train = vocab.encode(&train_d);
        for &n in &s.states {
            let config = registry.resolve_config("hmm", n, &Map::new())?;
            let data = TrainingData { train: &train, valid: &train, vocab: &vocab, embeddings: None };
            models.push(registry.train("hmm", data, &config)?.model);
        }
    }
    let grid: BTreeSet<usize> = s.states.iter().copied().collect();
    let selected: Vec<&dyn StructureModel> = models.iter().map(|m| m.as_ref()).filter(|m| grid.contains(&m.n_states())).collect();
    ensure!(!selected.is_empty(), "no model has a state count in {:?}", s.states);
    let report = compare_models(&selected, &test, s.samples, s.seed)?;
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    report.write(&out_dir.join("dialogs.csv"), &out_dir.join("summary.csv"))?;
    write_snapshot(&out_dir.join(SNAPSHOT_FILE), &s)?;
    for row in &report.summary {
        println!("{}\t{}\t{:.3}", row.variant, row.n_states, row.total_nll);
    }
    Ok(())
}

// ------------------------------------------------------------------------ rl

#[derive(Args)]
pub struct RlArgs {
    #[command(flatten)]
    layers: Layers,
    /// Reward schemes, e.g. `baseline,kl_rep`.
    #[arg(long, alias = "schemes", value_delimiter = ',')]
    scheme: Option<Vec<String>>,
    /// Training dialogs per run.
    #[arg(long)]
    dialogs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_dialogs: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Score every proceeding turn with the KL term, not only repeated questions.
    #[arg(long)]
    kl_every_turn: bool,
    /// Learned transition table CSV.
    #[arg(long)]
    trans: Option<PathBuf>,
    /// JSON map collapsing the table's states into the four action categories.
    #[arg(long)]
    collapse: Option<PathBuf>,
    /// Learning-curve CSV to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Serialize)]
struct RlSnapshot<'a> {
    experiment: &'a ExperimentConfig,
    trans: Option<&'a Path>,
    collapse: Option<&'a Path>,
    out: &'a Path,
    jobs: usize,
}

pub fn rl(a: RlArgs) -> Result<()> {
    let mut map = load_layers(a.layers.config.as_deref(), &a.layers.sets)?;
    if let Some(Value::String(list)) = map.get("schemes") {
        let items: Vec<Value> = list.split(',').map(|x| Value::from(x.trim())).collect();
        map.insert("schemes".into(), Value::Array(items));
    }
    put(&mut map, "schemes", a.scheme);
    put(&mut map, "total_dialogs", a.dialogs);
    put(&mut map, "eval_every", a.eval_every);
    put(&mut map, "eval_dialogs", a.eval_dialogs);
    put(&mut map, "repeats", a.repeats);
    put(&mut map, "seed", a.seed);
    put(&mut map, "kl_every_turn", a.kl_every_turn.then_some(true));
    put(&mut map, "trans", a.trans);
    put(&mut map, "collapse", a.collapse);
    put(&mut map, "out", a.out);
    let own = take(&mut map, &["trans", "collapse", "out"]);
    let path_of = |key: &str| -> Result<Option<PathBuf>> { own.get(key).map(|v| serde_json::from_value(v.clone())).transpose().map_err(Into::into) };
    let (trans, collapse, out) = (path_of("trans")?, path_of("collapse")?, path_of("out")?);
    let experiment: ExperimentConfig = overlay_config(&ExperimentConfig::default(), &map)?;
    let out = required(&out, "out")?;
    ensure!(a.jobs >= 1, "--jobs must be at least 1");

    let rewards = RewardRegistry::default();
    experiment.validate(&rewards)?;
    let needs_table: Vec<&str> = experiment.schemes.iter().map(String::as_str).filter(|s| rewards.get(s).map(|r| r.uses_transitions()).unwrap_or(false)).collect();
    let p_trans = match (&trans, &collapse) {
        (Some(t), Some(c)) => {
            let table = TransitionTable::read_csv(t).with_context(|| format!("reading transition table {}", t.display()))?;
            let map = CollapseMap::read(c).with_context(|| format!("reading collapse map {}", c.display()))?;
            Some(collapse_states(&table, &map)?)
        }
        (None, None) => None,
        _ => bail!("--trans and --collapse must be given together"),
    };
    if p_trans.is_none() && !needs_table.is_empty() {
        bail!(
            "scheme `{}` shapes rewards with a learned transition table; pass --trans <table.csv> and --collapse <map.json>",
            needs_table.join("`, `")
        );
    }

    let curves = rl_experiment(&experiment, &rewards, p_trans.as_ref(), a.jobs)?;
    write_text(out, &curves.to_csv()?)?;
    let snapshot = RlSnapshot { experiment: &experiment, trans: trans.as_deref(), collapse: collapse.as_deref(), out, jobs: a.jobs };
    write_snapshot(&config::snapshot_beside(out), &snapshot)?;
    let last = experiment.total_dialogs;
    for scheme in &experiment.schemes {
        if let Some(m) = curves.mean(scheme, last) {
            println!("{scheme}\t{last}\t{m:.3}");
        }
    }
    Ok(())
}
