use crate::args::*;
use crate::manifest::Recorder;
use loid::adapters::{dare_merge, load_adapter, save_adapter, LoraAdapter, MergeSpec};
use loid::data::{domain_similarity, gen_synthetic, load_reviews, split, write_reviews, ClsEncoder, Interaction, SynthSpec};
use loid::format::write_atomic;
use loid::pipeline::{
    evaluate, load_checkpoint, meta_path, pretrain_source, run_transfer_experiment, save_checkpoint, train_target,
    LogRow, SourceDomain, TargetData, TrainConfig, TransferReport,
};
use loid::textenc::{build_vocab, EncoderParams, Vocab};
use loid::{LoidError, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use std::path::{Path, PathBuf};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenSynth(a) => gen_synth(a),
        Command::InitBase(a) => init_base(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Merge(a) => merge(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::DomainSim(a) => domain_sim(a),
        Command::Transfer(a) => transfer(a),
    }
}

fn usage(msg: impl Into<String>) -> LoidError {
    LoidError::Config(msg.into())
}

/// `<path><suffix>`, keeping the full file name.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn vocab_path(base: &Path) -> PathBuf {
    sidecar(base, ".vocab")
}

fn label_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn read_json<C: DeserializeOwned>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn resolve(o: &Overrides, rec: &mut Recorder) -> Result<TrainConfig> {
    let mut c = match &o.config {
        Some(p) => {
            let c = read_json(p)?;
            rec.input(p)?;
            c
        }
        None => TrainConfig::desk(),
    };
    if let Some(v) = o.seed {
        c.seed = v;
    }
    if let Some(v) = o.k {
        c.k = v;
    }
    if let Some(v) = o.lambda {
        c.lambda = v;
    }
    if let Some(v) = o.margin {
        c.margin = v;
    }
    if let Some(v) = o.rank {
        c.rank = v;
    }
    if let Some(v) = o.p {
        c.p = v;
    }
    if let Some(v) = o.repeats {
        c.eval_repeats = v;
    }
    c.no_cl |= o.no_cl;
    c.validate()?;
    Ok(c)
}

fn load_data(path: &Path, rec: &mut Recorder) -> Result<Vec<Interaction>> {
    let loaded = load_reviews(path)?;
    rec.input(path)?;
    if loaded.skipped > 0 {
        tracing::warn!(path = %path.display(), skipped = loaded.skipped, "reviews without text skipped");
    }
    Ok(loaded.interactions)
}

fn load_base(path: &Path, rec: &mut Recorder) -> Result<(EncoderParams<f32>, Vocab)> {
    let params = EncoderParams::load(path)?;
    let vocab = Vocab::load(&vocab_path(path))?;
    rec.input(path)?;
    rec.input(&vocab_path(path))?;
    if vocab.len() != params.vocab_size() {
        return Err(LoidError::Format(format!(
            "{}: vocabulary has {} tokens but the encoder expects {}",
            vocab_path(path).display(),
            vocab.len(),
            params.vocab_size()
        )));
    }
    Ok((params, vocab))
}

fn new_base(data: &[Interaction], config: &TrainConfig) -> Result<(EncoderParams<f32>, Vocab)> {
    let texts: Vec<&str> = data.iter().map(|x| x.text.as_str()).collect();
    let vocab = build_vocab(&texts, config.min_freq)?;
    let params = EncoderParams::init(&config.encoder, vocab.len(), config.seed)?;
    Ok((params, vocab))
}

fn save_base(params: &EncoderParams<f32>, vocab: &Vocab, path: &Path) -> Result<()> {
    params.save(path)?;
    vocab.save(&vocab_path(path))
}

fn csv_bytes<R: Serialize>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| LoidError::Io(std::io::Error::other(e)))?;
    }
    w.into_inner().map_err(|e| LoidError::Io(std::io::Error::other(e.to_string())))
}

fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    write_atomic(path, &csv_bytes(log)?)
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let mut rec = Recorder::start("gen-synth");
    let mut spec: SynthSpec = match &a.config {
        Some(p) => {
            let s = read_json(p)?;
            rec.input(p)?;
            s
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.n {
        spec.n_interactions = n;
    }
    let corpus = gen_synthetic(&spec)?;
    std::fs::create_dir_all(&a.out)?;
    let mut artifacts = Vec::new();
    for d in &corpus.domains {
        let path = a.out.join(format!("{}.jsonl", d.name));
        write_reviews(&path, &d.interactions)?;
        println!("{}: {} reviews", path.display(), d.interactions.len());
        artifacts.push(path);
    }
    let spec_path = a.out.join("synth.json");
    write_atomic(&spec_path, serde_json::to_string_pretty(&spec)?.as_bytes())?;
    artifacts.push(spec_path.clone());
    let refs: Vec<&Path> = artifacts.iter().map(PathBuf::as_path).collect();
    rec.finish(&spec_path, &refs, &spec, spec.seed)?;
    Ok(())
}

fn init_base(a: InitBaseArgs) -> Result<()> {
    let mut rec = Recorder::start("init-base");
    let config = resolve(&a.train, &mut rec)?;
    let mut all = Vec::new();
    for p in &a.data {
        all.extend(load_data(p, &mut rec)?);
    }
    let (params, vocab) = new_base(&all, &config)?;
    save_base(&params, &vocab, &a.out)?;
    println!("{}: {} tokens, checksum {}", a.out.display(), vocab.len(), params.checksum());
    rec.finish(&a.out, &[&a.out, &vocab_path(&a.out)], &config, config.seed)?;
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut rec = Recorder::start("pretrain");
    let config = resolve(&a.train, &mut rec)?;
    let data = load_data(&a.data, &mut rec)?;
    let mut artifacts = vec![a.out.clone()];
    let (params, vocab) = match &a.base {
        Some(b) => load_base(b, &mut rec)?,
        None => {
            let (params, vocab) = new_base(&data, &config)?;
            let path = sidecar(&a.out, ".base.loid");
            save_base(&params, &vocab, &path)?;
            artifacts.push(vocab_path(&path));
            artifacts.push(path);
            (params, vocab)
        }
    };
    let out = pretrain_source(&data, &params, &vocab, &config, &label_of(&a.data))?;
    save_adapter(&out.model.adapter, &a.out)?;
    let log = sidecar(&a.out, ".log.csv");
    write_log(&log, &out.log)?;
    artifacts.push(log);
    if let Some(v) = out.best_val_mse {
        println!("best val mse {v}");
    }
    println!("{}: {} steps, checksum {}", a.out.display(), out.steps, out.model.adapter.checksum());
    let refs: Vec<&Path> = artifacts.iter().map(PathBuf::as_path).collect();
    rec.finish(&a.out, &refs, &config, config.seed)?;
    Ok(())
}

fn merge(a: MergeArgs) -> Result<()> {
    let mut rec = Recorder::start("merge");
    if !(0.0..1.0).contains(&a.p) {
        return Err(usage(format!("--p must be in [0, 1), got {}", a.p)));
    }
    let (params, vocab) = load_base(&a.base, &mut rec)?;
    let paths: Vec<&str> = a.adapters.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
    let mut adapters: Vec<LoraAdapter<f32>> = Vec::with_capacity(paths.len());
    for p in &paths {
        adapters.push(load_adapter(Path::new(p))?);
        rec.input(Path::new(p))?;
    }
    let spec = MergeSpec {
        p: a.p,
        seed: a.seed,
        adapters: adapters.iter().collect(),
    };
    let merged = dare_merge(&params, &spec)?;
    save_base(&merged, &vocab, &a.out)?;
    println!("{}: merged {} adapters, checksum {}", a.out.display(), paths.len(), merged.checksum());
    let config = json!({ "p": a.p, "adapters": paths });
    rec.finish(&a.out, &[&a.out, &vocab_path(&a.out)], config, a.seed)?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut rec = Recorder::start("train");
    let config = resolve(&a.train, &mut rec)?;
    let data = load_data(&a.data, &mut rec)?;
    let (params, vocab) = load_base(&a.base, &mut rec)?;
    let out = train_target(&data, &params, &vocab, &config)?;
    save_checkpoint(&out.model, &a.out)?;
    let log = sidecar(&a.out, ".log.csv");
    write_log(&log, &out.log)?;
    let split_path = sidecar(&a.out, ".split.json");
    write_atomic(&split_path, serde_json::to_string(&out.split)?.as_bytes())?;
    if let Some(v) = out.best_val_mse {
        println!("best val mse {v}");
    }
    println!("{}: {} steps, checksum {}", a.out.display(), out.steps, out.model.trainable_checksum());
    let meta = meta_path(&a.out);
    rec.finish(&a.out, &[&a.out, &meta, &log, &split_path], &config, config.seed)?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut rec = Recorder::start("eval");
    if a.repeats == 0 {
        return Err(usage("--repeats must be at least 1"));
    }
    let (params, vocab) = load_base(&a.base, &mut rec)?;
    let model = load_checkpoint(&a.model, params)?;
    rec.input(&a.model)?;
    rec.input(&meta_path(&a.model))?;
    let data = load_data(&a.data, &mut rec)?;
    let td = TargetData::new(&data, split(data.len(), model.config.seed)?, &vocab, model.encoder.config.max_len);
    let ids = match a.split {
        SplitName::Val => &td.split.val,
        SplitName::Test => &td.split.test,
    };
    let seed = a.seed.unwrap_or(model.config.seed);
    let report = evaluate(&model, &data, &td.index, ids, a.repeats, seed)?;
    for (r, m) in report.per_repeat.iter().enumerate() {
        println!("repeat {r} mse {m}");
    }
    println!("mse {}", report.mean_mse);
    println!("mse_clamped {}", report.mean_clamped_mse);
    if let Some(out) = &a.out {
        write_atomic(out, &csv_bytes(&report.predictions)?)?;
        let split_name = match a.split {
            SplitName::Val => "val",
            SplitName::Test => "test",
        };
        let config = json!({
            "split": split_name,
            "repeats": a.repeats,
            "mse": report.mean_mse,
            "mse_clamped": report.mean_clamped_mse,
        });
        rec.finish(out, &[out], config, seed)?;
    }
    Ok(())
}

/// One cell group of the domain-correlation table: similarity plus, when a
/// transfer report is given, the merged-source MSE and its relative gain.
#[derive(Debug, Clone, Serialize)]
pub struct SimRow {
    pub target: String,
    pub source: String,
    pub n: usize,
    pub sim: f64,
    pub mse: Option<f64>,
    /// `100 · (baseline − mse) / baseline`.
    pub improvement_pct: Option<f64>,
}

fn domain_sim(a: DomainSimArgs) -> Result<()> {
    let mut rec = Recorder::start("domain-sim");
    let [target_path, source_path] = a.data.as_slice() else {
        return Err(usage("--data takes exactly two files: <target>,<source>"));
    };
    let (params, vocab) = load_base(&a.base, &mut rec)?;
    let target = load_data(target_path, &mut rec)?;
    let source = load_data(source_path, &mut rec)?;
    let encoder = ClsEncoder::new(&params, &vocab, None)?;
    let sim = domain_similarity(&target, &source, a.n, &encoder, a.seed)?;
    let mut row = SimRow {
        target: label_of(target_path),
        source: label_of(source_path),
        n: a.n,
        sim,
        mse: None,
        improvement_pct: None,
    };
    if let Some(p) = &a.report {
        let report: TransferReport = read_json(p)?;
        rec.input(p)?;
        let base = report
            .baseline()
            .ok_or_else(|| LoidError::Data(format!("{}: no baseline row", p.display())))?
            .test_mse;
        let merged = report
            .rows
            .iter()
            .find(|r| r.sources == [row.source.clone()])
            .ok_or_else(|| LoidError::Data(format!("{}: no row for source `{}`", p.display(), row.source)))?;
        row.mse = Some(merged.test_mse);
        row.improvement_pct = Some(100.0 * (base - merged.test_mse) / base);
    }
    let bytes = csv_bytes(std::slice::from_ref(&row))?;
    print!("{}", String::from_utf8_lossy(&bytes));
    if let Some(out) = &a.out {
        write_atomic(out, &bytes)?;
        rec.finish(out, &[out], json!({ "n": a.n }), a.seed)?;
    }
    Ok(())
}

fn transfer(a: TransferArgs) -> Result<()> {
    let mut rec = Recorder::start("transfer");
    let config = resolve(&a.train, &mut rec)?;
    let (params, vocab) = load_base(&a.base, &mut rec)?;
    let target = load_data(&a.data, &mut rec)?;
    let mut loaded = Vec::with_capacity(a.sources.len());
    for p in &a.sources {
        loaded.push((label_of(p), load_data(p, &mut rec)?));
    }
    let mut labels: Vec<&str> = loaded.iter().map(|(l, _)| l.as_str()).collect();
    labels.sort_unstable();
    if labels.windows(2).any(|w| w[0] == w[1]) {
        return Err(usage("source file stems must be distinct"));
    }
    let sources: Vec<SourceDomain<'_>> = loaded
        .iter()
        .map(|(label, data)| SourceDomain {
            label: label.clone(),
            data,
        })
        .collect();
    let report = run_transfer_experiment(&sources, &target, &params, &vocab, &config)?;
    for r in &report.rows {
        let name = if r.sources.is_empty() { "-".to_string() } else { r.sources.join("+") };
        println!("{name} val {} test {}", r.val_mse, r.test_mse);
    }
    write_atomic(&a.out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    rec.finish(&a.out, &[&a.out], &config, config.seed)?;
    Ok(())
}
