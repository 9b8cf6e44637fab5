use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::client::{Client, ClientConfig, ClientModel};
use crate::data::{
    apply_filters, collapse_duplicates, group_by_user, split_dataset_with, synth_generate_with_manifest,
    DatasetSplit, Format, Parser, SplitManifest, SplitMode, SynthConfig, UserTrajectory,
};
use crate::encoding::{make_windows, tokenize, TokenizedSequence, Vocab};
use crate::error::{Error, Result, StageExt};
use crate::eval::alloc;
use crate::eval::config::ExperimentConfig;
use crate::eval::metrics::{MetricsReport, RankedPrediction};
use crate::llm::{
    logits_on, pretrain_toy_lm, rank_top_k, token_windows, train_adapters, AdapterConfig,
    AdapterTrainConfig, Adapters, CachedWindows, FrozenLM, InjectionConfig, LmConfig, PretrainConfig,
    ProjectionKind, TokenBatch,
};
use crate::numeric::checkpoint::{self, Manifest};
use crate::numeric::{ParamStore, Tape, Tensor};
use crate::seed::derive_seed;
use crate::server::{run_round, AggregatedSignal, Loopback, RoundConfig, RoundLog};

const EVAL_BATCH: usize = 64;

/// Filtered, split and tokenized corpus.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub split: DatasetSplit,
    pub vocab: Vocab,
    pub train: Vec<TokenizedSequence>,
    pub valid: Vec<TokenizedSequence>,
    pub test: Vec<TokenizedSequence>,
}

impl PreparedData {
    pub fn split_manifest(&self, cfg: &ExperimentConfig) -> SplitManifest {
        self.split.manifest(cfg.data.split, cfg.filter())
    }
}

/// Raw trajectories of the configured source, before filtering.
pub fn load_trajectories(cfg: &ExperimentConfig) -> Result<Vec<UserTrajectory>> {
    let d = &cfg.data;
    if d.source == "synth" {
        let sc = SynthConfig::new(d.synth_users, d.synth_venues, d.synth_days, cfg.seed);
        return Ok(synth_generate_with_manifest(&sc)?.0);
    }
    let format: Format = d.format.parse()?;
    let checkins = Parser::new(format, false).parse_file(Path::new(&d.source))?;
    Ok(group_by_user(checkins))
}

/// Filters and splits `raw`, then builds the vocabulary on the training users.
pub fn prepare_from(cfg: &ExperimentConfig, mut raw: Vec<UserTrajectory>) -> Result<PreparedData> {
    if cfg.data.collapse_secs > 0 {
        raw.iter_mut()
            .for_each(|t| collapse_duplicates(t, cfg.data.collapse_secs));
    }
    let kept = apply_filters(raw, &cfg.filter());
    let split = split_dataset_with(kept, cfg.seed, cfg.data.split)?;
    tokenize_split(split)
}

pub fn tokenize_split(split: DatasetSplit) -> Result<PreparedData> {
    let vocab = Vocab::build(&split.train)?;
    let tok = |v: &[UserTrajectory]| v.iter().map(|t| tokenize(&vocab, t)).collect::<Vec<_>>();
    Ok(PreparedData {
        train: tok(&split.train),
        valid: tok(&split.valid),
        test: tok(&split.test),
        vocab,
        split,
    })
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    prepare_from(cfg, load_trajectories(cfg)?)
}

pub fn effective_client_config(cfg: &ExperimentConfig) -> ClientConfig {
    let mut c = cfg.client.clone();
    if cfg.ablation.no_semantic_encoding {
        c.use_time = false;
    }
    c
}

pub fn round_config(cfg: &ExperimentConfig, n_clients: usize) -> RoundConfig {
    let k = match cfg.fed.clients_per_round {
        0 => n_clients,
        k => k.min(n_clients),
    };
    RoundConfig {
        total_rounds: cfg.fed.rounds,
        clients_per_round: k,
        global_seed: derive_seed(cfg.seed, "rounds", 0),
        local_epochs: cfg.fed.local_epochs,
        privacy: cfg.effective_privacy(),
        weighted: cfg.fed.weighted,
    }
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub signals: Vec<AggregatedSignal>,
    pub logs: Vec<RoundLog>,
    /// Total bytes that crossed the loopback transport.
    pub traffic_bytes: usize,
    pub client_param_count: usize,
}

/// One client per training user; `rounds` rounds of local training and
/// aggregation.
pub fn run_federation(cfg: &ExperimentConfig, data: &PreparedData) -> Result<FederationOutcome> {
    let ccfg = effective_client_config(cfg);
    let init = derive_seed(cfg.seed, "client-init", 0);
    let template = ClientModel::new(data.vocab.len(), ccfg, init)?;
    let mut clients: Vec<Client> = data
        .train
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| Client::new(s.clone(), template.clone()))
        .collect::<Result<_>>()?;
    if clients.is_empty() {
        return Err(Error::Empty("no training users with two or more check-ins".into()));
    }
    let rc = round_config(cfg, clients.len());
    let mut transport = Loopback::default();
    let mut signals = Vec::with_capacity(rc.total_rounds as usize);
    let mut logs = Vec::with_capacity(rc.total_rounds as usize);
    for round in 1..=rc.total_rounds {
        let (s, log) = run_round(&mut clients, &rc, round, &mut transport)?;
        signals.push(s);
        logs.push(log);
    }
    Ok(FederationOutcome {
        signals,
        logs,
        traffic_bytes: transport.log.iter().map(Vec::len).sum(),
        client_param_count: template.param_count(),
    })
}

pub fn lm_config(cfg: &ExperimentConfig, vocab: usize) -> LmConfig {
    LmConfig {
        vocab,
        d_llm: cfg.llm.d_llm,
        layers: cfg.llm.layers,
        heads: cfg.llm.heads,
        max_len: cfg.client.window,
    }
}

/// Pretrains and freezes the language model; returns it with per-epoch losses.
pub fn pretrain_lm(cfg: &ExperimentConfig, data: &PreparedData) -> Result<(FrozenLM, Vec<f64>)> {
    let mut lm = FrozenLM::new(lm_config(cfg, data.vocab.len()), derive_seed(cfg.seed, "lm-init", 0))?;
    let pc = PretrainConfig {
        epochs: cfg.llm.pretrain_epochs,
        lr: cfg.llm.pretrain_lr,
        batch: cfg.llm.pretrain_batch,
        window: cfg.client.window,
        seed: derive_seed(cfg.seed, "lm-train", 0),
    };
    let losses = pretrain_toy_lm(&mut lm, &data.train, &pc)?;
    Ok((lm, losses))
}

/// Frozen model, trained adapters and the signal they condition on at
/// inference.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub lm: FrozenLM,
    pub adapters: Adapters,
    /// `d²` global signal.
    pub signal: Tensor,
    pub window: usize,
}

pub fn adapter_config(cfg: &ExperimentConfig, vocab: usize) -> AdapterConfig {
    AdapterConfig {
        d: cfg.client.d,
        d1: cfg.llm.d1,
        d_llm: cfg.llm.d_llm,
        vocab,
        kind: if cfg.ablation.no_projection_mlp {
            ProjectionKind::Linear
        } else {
            ProjectionKind::Mlp
        },
        injection: InjectionConfig {
            l_k: cfg.injection_layer(),
            scale: cfg.llm.scale,
            enabled: !cfg.ablation.no_llm_injection,
        },
        lr: cfg.llm.adapter_lr,
    }
}

/// The per-round signals the adapters see, after the outer-product ablation.
pub fn signal_stream(cfg: &ExperimentConfig, fed: &FederationOutcome) -> Vec<Tensor> {
    fed.signals
        .iter()
        .map(|s| {
            let v = if cfg.ablation.no_outer_product {
                vec![0.0; s.signal.len()]
            } else {
                s.signal.clone()
            };
            Tensor::from_vec(v)
        })
        .collect()
}

pub fn train_bundle(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    lm: &FrozenLM,
    fed: &FederationOutcome,
) -> Result<(ModelBundle, Vec<f64>)> {
    let mut adapters = Adapters::new(
        adapter_config(cfg, data.vocab.len()),
        derive_seed(cfg.seed, "adapter-init", 0),
    )?;
    let signals = signal_stream(cfg, fed);
    let cache = CachedWindows::build(lm, token_windows(&data.train, cfg.client.window)?, &adapters.cfg.injection)?;
    let tc = AdapterTrainConfig {
        epochs: cfg.llm.adapter_epochs,
        batch: cfg.llm.adapter_batch,
        seed: derive_seed(cfg.seed, "adapter-train", 0),
    };
    let losses = train_adapters(lm, &mut adapters, &signals, &cache, &tc)?;
    let signal = signals.last().cloned().expect("at least one round");
    let bundle = ModelBundle {
        lm: lm.clone(),
        adapters,
        signal,
        window: cfg.client.window,
    };
    Ok((bundle.quantized()?, losses))
}

fn quantize_store(store: &mut ParamStore) -> Result<()> {
    let (m, blob) = checkpoint::encode(&[("q", store)], BTreeMap::new());
    checkpoint::restore(store, "q", &checkpoint::decode(&m, &blob)?)
}

fn signal_store(signal: &Tensor) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("signal", signal.clone(), false);
    s
}

impl ModelBundle {
    /// All weights and the signal rounded to checkpoint precision, so an
    /// in-memory bundle and one reloaded from disk predict identically.
    pub fn quantized(mut self) -> Result<Self> {
        quantize_store(&mut self.lm.store)?;
        quantize_store(&mut self.adapters.store)?;
        self.signal = self.signal.map(|x| x as f32 as f64);
        Ok(self)
    }

    pub fn h_tilde(&self) -> Result<Tensor> {
        self.adapters.project(&self.signal)
    }

    pub fn manifests(&self) -> (Manifest, Manifest) {
        let (lm, _) = checkpoint::encode(&[("lm", &self.lm.store)], BTreeMap::new());
        let (ad, _) = checkpoint::encode(&[("adapter", &self.adapters.store)], BTreeMap::new());
        (lm, ad)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut lm_meta = BTreeMap::new();
        lm_meta.insert("config".into(), serde_json::to_value(&self.lm.cfg)?);
        checkpoint::save(&dir.join("lm"), &[("lm", &self.lm.store)], lm_meta)?;
        self.adapters.save(&dir.join("adapter"))?;
        checkpoint::save(&dir.join("signal"), &[("signal", &signal_store(&self.signal))], BTreeMap::new())?;
        Ok(())
    }

    /// Rebuilds a bundle written by [`ModelBundle::save`] for the given
    /// experiment config.
    pub fn load(dir: &Path, cfg: &ExperimentConfig, vocab: usize) -> Result<Self> {
        let mut lm = FrozenLM::new(lm_config(cfg, vocab), 0)?;
        let (m, blob) = checkpoint::read(&dir.join("lm"))?;
        checkpoint::restore(&mut lm.store, "lm", &checkpoint::decode(&m, &blob)?)?;
        let mut adapters = Adapters::new(adapter_config(cfg, vocab), 0)?;
        let (m, blob) = checkpoint::read(&dir.join("adapter"))?;
        checkpoint::restore(&mut adapters.store, "adapter", &checkpoint::decode(&m, &blob)?)?;
        let (m, blob) = checkpoint::read(&dir.join("signal"))?;
        let entries = checkpoint::decode(&m, &blob)?;
        let signal = entries
            .into_iter()
            .next()
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Protocol("signal checkpoint is empty".into()))?;
        Ok(Self {
            lm,
            adapters,
            signal,
            window: cfg.client.window,
        })
    }
}

/// One query per predictable position of every non-overlapping window,
/// with the true history as context.
pub fn predictions(bundle: &ModelBundle, seqs: &[TokenizedSequence], k_max: usize) -> Result<Vec<RankedPrediction>> {
    let h = bundle.h_tilde()?;
    let mut windows: Vec<&[usize]> = Vec::new();
    for s in seqs {
        for w in make_windows(s.len(), bundle.window, bundle.window)? {
            windows.push(&s.tokens[w]);
        }
    }
    let k = k_max.min(bundle.adapters.cfg.vocab);
    let mut out = Vec::new();
    for chunk in windows.chunks(EVAL_BATCH) {
        let batch = TokenBatch::new(chunk.iter().copied());
        let (rows, targets) = batch.next_token_pairs();
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone())?;
        let logits = logits_on(&mut tape, &bundle.lm, &bundle.adapters, &batch, Some(hv))?;
        let logits = tape.value(logits);
        for (&r, &truth) in rows.iter().zip(&targets) {
            out.push(RankedPrediction {
                query: out.len() + 1,
                ranked: rank_top_k(logits.row(r), k),
                truth,
            });
        }
    }
    Ok(out)
}

pub fn evaluate(bundle: &ModelBundle, seqs: &[TokenizedSequence], k_max: usize) -> Result<MetricsReport> {
    let preds = predictions(bundle, seqs, k_max)?;
    if preds.is_empty() {
        return Err(Error::Empty("evaluation split has no predictable positions".into()));
    }
    MetricsReport::from_predictions(&preds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub param_count: usize,
    pub trainable_count: usize,
    /// `trainable_count / param_count`.
    pub ratio: f64,
}

/// Parameter counts of the inference bundle, summed over its checkpoint
/// manifests.
pub fn count_footprint(bundle: &ModelBundle) -> Footprint {
    let (lm, ad) = bundle.manifests();
    let param_count = lm.param_count() + ad.param_count();
    let trainable_count = lm.trainable_count() + ad.trainable_count();
    Footprint {
        param_count,
        trainable_count,
        ratio: trainable_count as f64 / param_count as f64,
    }
}

/// The deterministic report of a run. Metrics are scaled by 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub seed: u64,
    pub ablation: String,
    pub acc1: f64,
    pub acc5: f64,
    pub acc20: f64,
    pub mrr: f64,
    pub m: usize,
    pub units: String,
    pub footprint: Footprint,
}

impl Report {
    pub fn new(cfg: &ExperimentConfig, metrics: &MetricsReport, footprint: Footprint) -> Result<Self> {
        Ok(Self {
            config_hash: cfg.hash()?,
            seed: cfg.seed,
            ablation: cfg.ablation.label(),
            acc1: metrics.acc1 * 100.0,
            acc5: metrics.acc5 * 100.0,
            acc20: metrics.acc20 * 100.0,
            mrr: metrics.mrr * 100.0,
            m: metrics.m,
            units: "x1e-2".into(),
            footprint,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Measurements that vary between runs, kept out of the report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_time_s: f64,
    pub peak_mem_bytes: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub report: Report,
    pub metrics: MetricsReport,
    pub bundle: ModelBundle,
    pub round_logs: Vec<RoundLog>,
    pub lm_losses: Vec<f64>,
    pub adapter_losses: Vec<f64>,
    pub timing: Timing,
}

/// Stages shared by a set of runs that differ only in ablation flags.
struct Shared {
    data: PreparedData,
    lm: FrozenLM,
    lm_losses: Vec<f64>,
    federations: Vec<((bool, bool), FederationOutcome)>,
}

impl Shared {
    fn federation(&mut self, cfg: &ExperimentConfig) -> Result<&FederationOutcome> {
        let key = (cfg.ablation.no_semantic_encoding, cfg.ablation.no_dp_noise);
        if let Some(i) = self.federations.iter().position(|(k, _)| *k == key) {
            return Ok(&self.federations[i].1);
        }
        let f = run_federation(cfg, &self.data).stage("federation")?;
        self.federations.push((key, f));
        Ok(&self.federations.last().expect("just pushed").1)
    }
}

/// Runs every stage for one config and, if `out` is given, writes its
/// artifacts there.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutcome> {
    let mut runs = run_ablation_suite(cfg, &[cfg.ablation], out.map(|p| vec![p.to_path_buf()]))?;
    Ok(runs.remove(0))
}

/// Runs `cfg` once per ablation setting. Data preparation and language
/// model pretraining are shared, federation is shared between settings
/// that do not change the client side; each result is identical to a
/// standalone run of that setting.
pub fn run_ablation_suite(
    cfg: &ExperimentConfig,
    ablations: &[crate::eval::config::AblationConfig],
    out_dirs: Option<Vec<PathBuf>>,
) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    if let Some(d) = &out_dirs {
        if d.len() != ablations.len() {
            return Err(Error::Config("one output directory per ablation setting".into()));
        }
    }
    let start = Instant::now();
    alloc::reset_peak();
    let data = prepare_data(cfg).stage("prepare")?;
    let (lm, lm_losses) = pretrain_lm(cfg, &data).stage("pretrain")?;
    let shared_secs = start.elapsed().as_secs_f64();
    let mut shared = Shared {
        data,
        lm,
        lm_losses,
        federations: Vec::new(),
    };
    let mut outcomes = Vec::with_capacity(ablations.len());
    for (i, ab) in ablations.iter().enumerate() {
        let t0 = Instant::now();
        let mut c = cfg.clone();
        c.ablation = *ab;
        let fed = shared.federation(&c)?.clone();
        let (bundle, adapter_losses) = train_bundle(&c, &shared.data, &shared.lm, &fed).stage("adapters")?;
        let metrics = evaluate(&bundle, &shared.data.test, c.k_max).stage("evaluate")?;
        let report = Report::new(&c, &metrics, count_footprint(&bundle))?;
        let timing = Timing {
            wall_time_s: shared_secs + t0.elapsed().as_secs_f64(),
            peak_mem_bytes: alloc::peak_bytes(),
        };
        let outcome = RunOutcome {
            config: c,
            report,
            metrics,
            bundle,
            round_logs: fed.logs.clone(),
            lm_losses: shared.lm_losses.clone(),
            adapter_losses,
            timing,
        };
        if let Some(dirs) = &out_dirs {
            write_artifacts(&dirs[i], &outcome, &shared.data).stage("write")?;
        }
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

fn write_artifacts(dir: &Path, run: &RunOutcome, data: &PreparedData) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), run.config.to_text()?)?;
    fs::write(dir.join("vocab.json"), data.vocab.to_json()?)?;
    fs::write(
        dir.join("split.json"),
        serde_json::to_string_pretty(&data.split_manifest(&run.config))? + "\n",
    )?;
    let mut rounds = String::new();
    for l in &run.round_logs {
        rounds.push_str(&l.to_ndjson()?);
    }
    fs::write(dir.join("rounds.ndjson"), rounds)?;
    run.bundle.save(dir)?;
    fs::write(dir.join("report.json"), run.report.to_json()?)?;
    fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&run.timing)? + "\n")?;
    Ok(())
}

/// Re-evaluates a run directory on one of its splits.
pub fn evaluate_run_dir(dir: &Path, split: &str) -> Result<(ExperimentConfig, MetricsReport)> {
    let cfg = ExperimentConfig::from_text(&fs::read_to_string(dir.join("config.txt"))?)?;
    let vocab = Vocab::from_json(&fs::read_to_string(dir.join("vocab.json"))?)?;
    let manifest: SplitManifest = serde_json::from_str(&fs::read_to_string(dir.join("split.json"))?)?;
    let mut raw = load_trajectories(&cfg)?;
    if cfg.data.collapse_secs > 0 {
        raw.iter_mut()
            .for_each(|t| collapse_duplicates(t, cfg.data.collapse_secs));
    }
    let kept = apply_filters(raw, &cfg.filter());
    let split_data = match manifest.mode {
        SplitMode::ByUser => DatasetSplit::from_manifest(&manifest, &kept)?,
        SplitMode::ByEvent => split_dataset_with(kept, manifest.seed, manifest.mode)?,
    };
    let users = match split {
        "train" => &split_data.train,
        "valid" => &split_data.valid,
        "test" => &split_data.test,
        other => return Err(Error::Config(format!("unknown split {other:?}"))),
    };
    let seqs: Vec<TokenizedSequence> = users.iter().map(|t| tokenize(&vocab, t)).collect();
    let bundle = ModelBundle::load(dir, &cfg, vocab.len())?;
    let m = evaluate(&bundle, &seqs, cfg.k_max)?;
    Ok((cfg, m))
}
