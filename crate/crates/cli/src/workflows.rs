//! One function per CLI command.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use promptasr::config::RunConfig;
use promptasr::data::{gen_synthetic, SynthUtterance, Tokenizer};
use promptasr::decoding::{profile_decode_cost, recognize_all, wer, CostReport, PromptMode};
use promptasr::encoder::AudioFeatures;
use promptasr::io::{
    load_asr, load_lm, save_asr, save_lm, write_features, CheckpointMeta, Manifest, ManifestRecord, MANIFEST_HEADER,
};
use promptasr::model::{AsrModel, Compression};
use promptasr::training::{train_external_lm, PairItem, TrainData, Trainer, METRICS_HEADER};

use crate::Common;

const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Loads the configuration, creates the output directory and writes the
/// reproducibility header plus the effective configuration.
fn start_run(common: &Common, command: &str) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    }
    .with_seed(common.seed);
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    let header = format!(
        "promptasr {VERSION}\ncommand = {command}\nseed = {}\nconfig_hash = {}\n",
        common.seed,
        cfg.hash()
    );
    fs::write(common.out.join("run_header.txt"), header)?;
    fs::write(common.out.join("config.txt"), cfg.to_text())?;
    Ok(cfg)
}

// Data directories hold `alphabet.txt`, `train.tsv`, `text.tsv`, `test.tsv`
// and the feature files they reference.

struct DataDir {
    tokenizer: Tokenizer,
    alphabet: String,
    train: Manifest,
    text: Option<Manifest>,
    test: Option<Manifest>,
}

fn load_data(dir: &Path) -> Result<DataDir> {
    let raw = fs::read_to_string(dir.join("alphabet.txt")).context("reading alphabet.txt")?;
    let alphabet = raw.strip_suffix('\n').unwrap_or(&raw).to_string();
    let optional = |name: &str| -> Result<Option<Manifest>> {
        let p = dir.join(name);
        Ok(if p.exists() { Some(Manifest::load(&p)?) } else { None })
    };
    Ok(DataDir {
        tokenizer: Tokenizer::new(&alphabet)?,
        alphabet,
        train: Manifest::load(&dir.join("train.tsv"))?,
        text: optional("text.tsv")?,
        test: optional("test.tsv")?,
    })
}

fn pair_items(m: &Manifest, tok: &Tokenizer) -> Result<Vec<PairItem>> {
    m.paired()
        .map(|r| {
            let text = r
                .transcript
                .as_deref()
                .with_context(|| format!("`{}` has no transcript", r.utt_id))?;
            Ok(PairItem {
                features: m.load_features(r)?,
                tokens: tok.tokenize(text)?,
            })
        })
        .collect()
}

fn text_items(m: &Manifest, tok: &Tokenizer) -> Result<Vec<Vec<usize>>> {
    m.records
        .iter()
        .filter(|r| !r.is_paired())
        .filter_map(|r| r.transcript.as_deref())
        .map(|t| Ok(tok.tokenize(t)?))
        .collect()
}

fn audio(m: &Manifest) -> Result<Vec<AudioFeatures>> {
    m.paired().map(|r| Ok(m.load_features(r)?)).collect()
}

pub fn gen_data(common: &Common) -> Result<()> {
    let cfg = start_run(common, "gen-data")?;
    let corpus = gen_synthetic(&cfg.data)?;
    let out = &common.out;
    fs::create_dir_all(out.join("feats"))?;
    fs::write(out.join("alphabet.txt"), format!("{}\n", corpus.alphabet))?;
    let paired = |utts: &[SynthUtterance]| -> Result<Manifest> {
        let records = utts
            .iter()
            .map(|u| {
                let rel = PathBuf::from("feats").join(format!("{}.feat", u.id));
                write_features(&out.join(&rel), &u.features)?;
                Ok(ManifestRecord::paired(&u.id, rel, u.features.rows(), Some(u.text.clone())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Manifest::new(out, records))
    };
    paired(&corpus.pairs)?.save(&out.join("train.tsv"))?;
    paired(&corpus.test)?.save(&out.join("test.tsv"))?;
    let texts = corpus
        .texts
        .iter()
        .map(|(id, t)| ManifestRecord::text_only(id, t))
        .collect();
    Manifest::new(out, texts).save(&out.join("text.tsv"))?;
    println!(
        "{} paired, {} text-only, {} test utterances in {}",
        corpus.pairs.len(),
        corpus.texts.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

/// Trains with `cfg`, writing `model.ckpt` and `metrics.csv` under `out`.
fn train_model(cfg: &RunConfig, data: &DataDir, out: &Path) -> Result<AsrModel> {
    let pairs = pair_items(&data.train, &data.tokenizer)?;
    ensure!(!pairs.is_empty(), "train.tsv has no paired records");
    let texts = match &data.text {
        Some(m) => text_items(m, &data.tokenizer)?,
        None => Vec::new(),
    };
    let mut mcfg = cfg.model.clone();
    mcfg.feat_dim = pairs[0].features.feat_dim();
    mcfg.vocab_size = data.tokenizer.vocab().n_symbols();
    let mut model = AsrModel::new(mcfg, cfg.train.seed)?;
    let train_data = TrainData { pairs, texts };

    let metrics_path = out.join("metrics.csv");
    let ckpt_path = out.join("model.ckpt");
    let mut csv = format!("{METRICS_HEADER}\n");
    let mut written = 0;
    let seed = cfg.train.seed;
    let alphabet = data.alphabet.clone();
    Trainer::new(&mut model, &train_data, cfg.train.clone())?.run(&train_data, |epoch, model, adam, log| {
        for m in &log[written..] {
            csv.push_str(&m.csv_line());
            csv.push('\n');
        }
        written = log.len();
        fs::write(&metrics_path, &csv)?;
        let meta = CheckpointMeta {
            alphabet: alphabet.clone(),
            seed,
            step: log.len() as u64,
        };
        save_asr(&ckpt_path, model, &meta, Some(adam))?;
        let last = log.last().expect("called after a step");
        eprintln!("epoch {epoch} step {}: {}", last.step, last.csv_line());
        Ok(())
    })?;
    Ok(model)
}

pub fn train(common: &Common, data_dir: &Path) -> Result<()> {
    let cfg = start_run(common, "train")?;
    let data = load_data(data_dir)?;
    train_model(&cfg, &data, &common.out)?;
    println!("wrote {}", common.out.join("model.ckpt").display());
    Ok(())
}

pub fn train_lm(common: &Common, data_dir: &Path) -> Result<()> {
    let cfg = start_run(common, "train-lm")?;
    let data = load_data(data_dir)?;
    let mut texts = match &data.text {
        Some(m) => text_items(m, &data.tokenizer)?,
        None => Vec::new(),
    };
    for r in data.train.paired() {
        if let Some(t) = &r.transcript {
            texts.push(data.tokenizer.tokenize(t)?);
        }
    }
    let mut lcfg = cfg.lm.clone();
    lcfg.lm.vocab_size = data.tokenizer.vocab().n_symbols();
    let (lm, report) = train_external_lm(&texts, &lcfg)?;
    let meta = CheckpointMeta {
        alphabet: data.alphabet.clone(),
        seed: lcfg.seed,
        step: lcfg.steps as u64,
    };
    save_lm(&common.out.join("lm.ckpt"), &lm, &meta)?;
    let mut losses = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        writeln!(losses, "{},{l}", i + 1)?;
    }
    fs::write(common.out.join("lm_metrics.csv"), losses)?;
    let summary = format!(
        "heldout_sentences = {}\nheldout_perplexity = {}\n",
        report.heldout_sentences, report.heldout_perplexity
    );
    fs::write(common.out.join("lm_report.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub struct DecodeArgs {
    pub model: PathBuf,
    pub manifest: PathBuf,
    pub lm: Option<PathBuf>,
    pub ctc_weight: Option<f64>,
    pub lm_weight: Option<f64>,
    pub beam: Option<usize>,
}

pub fn decode(common: &Common, args: &DecodeArgs) -> Result<()> {
    let cfg = start_run(common, "decode")?;
    let (model, meta, _) = load_asr(&args.model)?;
    let tok = Tokenizer::new(&meta.alphabet)?;
    let lm = match &args.lm {
        Some(p) => {
            let (lm, lm_meta) = load_lm(p)?;
            ensure!(lm_meta.alphabet == meta.alphabet, "LM and ASR model use different alphabets");
            Some(lm)
        }
        None => None,
    };
    let mut weights = cfg.decode.clone();
    if let Some(w) = args.ctc_weight {
        weights.ctc_weight = w;
    }
    if let Some(w) = args.lm_weight {
        weights.lm_weight = w;
    }
    if let Some(b) = args.beam {
        weights.beam = b;
    }
    if lm.is_none() && weights.lm_weight != 0.0 {
        eprintln!("no --lm given, decoding without LM fusion");
        weights.lm_weight = 0.0;
    }
    let manifest = Manifest::load(&args.manifest)?;
    let xs = audio(&manifest)?;
    let recs = recognize_all(&model, &xs, lm.as_ref(), &weights)?;
    let mut hyp = String::new();
    let mut stats = String::from("#utt_id\ttau\tencoded_frames\tseconds\taudio_seconds\n");
    for (x, r) in xs.iter().zip(&recs) {
        let b = &r.result.best;
        writeln!(
            hyp,
            "{}\t{}\t{}\t{}\t{}\t{}",
            x.utt_id,
            tok.detokenize(&b.tokens)?,
            b.combined,
            b.decoder_score,
            b.ctc_prefix_score,
            b.lm_score
        )?;
        writeln!(
            stats,
            "{}\t{}\t{}\t{}\t{}",
            x.utt_id,
            r.tau,
            r.encoded_len,
            r.seconds,
            x.len() as f64 * cfg.frame_shift
        )?;
    }
    fs::write(common.out.join("hyp.tsv"), hyp)?;
    fs::write(common.out.join("decode_stats.tsv"), stats)?;
    println!("decoded {} utterances into {}", recs.len(), common.out.join("hyp.tsv").display());
    Ok(())
}

/// `(utt_id, text)` from a manifest or a tab-separated `id text …` file.
fn read_transcripts(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.lines().next() == Some(MANIFEST_HEADER) {
        let m = Manifest::load(path)?;
        return Ok(m
            .records
            .into_iter()
            .map(|r| (r.utt_id, r.transcript.unwrap_or_default()))
            .collect());
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            let mut cols = l.split('\t');
            match (cols.next(), cols.next()) {
                (Some(id), Some(t)) => Ok((id.to_string(), t.to_string())),
                _ => bail!("{}:{}: expected `utt_id<TAB>text`", path.display(), i + 1),
            }
        })
        .collect()
}

/// Mean per-utterance τ/T' and overall RTF from a `decode_stats.tsv`.
fn timing(path: &Path) -> Result<Option<(f64, f64)>> {
    if !path.is_file() {
        return Ok(None);
    }
    let (mut ratio, mut secs, mut audio, mut n) = (0.0, 0.0, 0.0, 0usize);
    for line in fs::read_to_string(path)?.lines().filter(|l| !l.starts_with('#')) {
        let cols: Vec<f64> = line.split('\t').skip(1).map(str::parse).collect::<Result<_, _>>()?;
        let [tau, frames, s, a] = cols[..] else {
            bail!("{}: malformed line `{line}`", path.display());
        };
        ratio += tau / frames.max(1.0);
        secs += s;
        audio += a;
        n += 1;
    }
    Ok((n > 0).then(|| (ratio / n as f64, secs / audio.max(f64::MIN_POSITIVE))))
}

pub fn eval(common: &Common, reference: &Path, hyp: &Path) -> Result<()> {
    start_run(common, "eval")?;
    let refs = read_transcripts(reference)?;
    let hyps: HashMap<String, String> = read_transcripts(hyp)?.into_iter().collect();
    let missing = refs.iter().filter(|(id, _)| !hyps.contains_key(id)).count();
    let hyp_texts: Vec<&str> = refs
        .iter()
        .map(|(id, _)| hyps.get(id).map_or("", String::as_str))
        .collect();
    let ref_texts: Vec<&str> = refs.iter().map(|(_, t)| t.as_str()).collect();
    let s = wer(&ref_texts, &hyp_texts)?;
    let mut table = String::new();
    writeln!(table, "{:<16} {:>10}", "metric", "value")?;
    writeln!(table, "{:<16} {:>10}", "utterances", refs.len())?;
    writeln!(table, "{:<16} {:>10}", "missing_hyps", missing)?;
    writeln!(table, "{:<16} {:>10}", "ref_words", s.ref_words)?;
    writeln!(table, "{:<16} {:>10.2}", "WER(%)", s.rate())?;
    writeln!(table, "{:<16} {:>10}", "substitutions", s.substitutions)?;
    writeln!(table, "{:<16} {:>10}", "deletions", s.deletions)?;
    writeln!(table, "{:<16} {:>10}", "insertions", s.insertions)?;
    let stats = hyp.parent().unwrap_or(Path::new(".")).join("decode_stats.tsv");
    if let Some((ratio, rtf)) = timing(&stats)? {
        writeln!(table, "{:<16} {:>10.3}", "mean_tau/T'", ratio)?;
        writeln!(table, "{:<16} {:>10.4}", "RTF", rtf)?;
    }
    fs::write(common.out.join("eval.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn forced_set(m: &Manifest, tok: &Tokenizer) -> Result<Vec<(AudioFeatures, Vec<usize>)>> {
    Ok(pair_items(m, tok)?
        .into_iter()
        .map(|p| (p.features, p.tokens))
        .collect())
}

fn cost_row(table: &mut String, name: &str, r: &CostReport) -> Result<()> {
    writeln!(
        table,
        "{:<13} {:>6} {:>12} {:>11.1} {:>12.1} {:>11.1} {:>10.4} {:>10.2} {:>9.5}",
        name,
        r.utterances,
        r.key_reads,
        r.mean_prompt_len,
        r.mean_encoded_len,
        r.mean_tokens,
        r.decode_seconds,
        r.audio_seconds,
        r.rtf()
    )?;
    Ok(())
}

const COST_HEADER: &str = "mode          utts    key_reads  prompt_len  encoded_len  tokens/utt   decode_s    audio_s       RTF";

pub fn profile(common: &Common, model_path: &Path, manifest: &Path) -> Result<()> {
    let cfg = start_run(common, "profile")?;
    let (model, meta, _) = load_asr(model_path)?;
    let tok = Tokenizer::new(&meta.alphabet)?;
    let utts = forced_set(&Manifest::load(manifest)?, &tok)?;
    let comp = profile_decode_cost(&model, &utts, PromptMode::Compressed, cfg.frame_shift)?;
    let full = profile_decode_cost(&model, &utts, PromptMode::Uncompressed, cfg.frame_shift)?;
    let mut table = format!("{COST_HEADER}\n");
    cost_row(&mut table, "compressed", &comp)?;
    cost_row(&mut table, "uncompressed", &full)?;
    writeln!(
        table,
        "key_read_ratio {:.4}\ntime_ratio {:.4}",
        comp.key_reads as f64 / full.key_reads.max(1) as f64,
        comp.decode_seconds / full.decode_seconds.max(f64::MIN_POSITIVE)
    )?;
    fs::write(common.out.join("profile.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn compare_compression(common: &Common, data_dir: &Path) -> Result<()> {
    let cfg = start_run(common, "compare-compression")?;
    let data = load_data(data_dir)?;
    let test = data.test.as_ref().context("data directory has no test.tsv")?;
    let xs = audio(test)?;
    let refs: Vec<&str> = test.paired().map(|r| r.transcript.as_deref().unwrap_or("")).collect();
    let utts = forced_set(test, &data.tokenizer)?;
    let mut weights = cfg.decode.clone();
    weights.lm_weight = 0.0;

    let mut table = String::from("row  compression   WER(%)  prompt_len  key_reads/utt       RTF\n");
    let rows = [
        ("P1", Compression::Downsample(2)),
        ("P2", Compression::Average),
        ("P3", Compression::Remove),
    ];
    for (row, compression) in rows {
        let mut run = cfg.clone();
        run.model.compression = compression;
        let dir = common.out.join(compression.to_string());
        fs::create_dir_all(&dir)?;
        eprintln!("training {row} ({compression})");
        let model = train_model(&run, &data, &dir)?;
        let recs = recognize_all(&model, &xs, None, &weights)?;
        let hyps = recs
            .iter()
            .map(|r| data.tokenizer.detokenize(&r.result.best.tokens))
            .collect::<Result<Vec<_>, _>>()?;
        let s = wer(&refs, &hyps)?;
        let cost = profile_decode_cost(&model, &utts, PromptMode::Compressed, cfg.frame_shift)?;
        writeln!(
            table,
            "{row:<4} {:<12} {:>7.2} {:>11.1} {:>14.1} {:>9.5}",
            compression.to_string(),
            s.rate(),
            cost.mean_prompt_len,
            cost.key_reads as f64 / cost.utterances.max(1) as f64,
            cost.rtf()
        )?;
    }
    fs::write(common.out.join("compare.txt"), &table)?;
    print!("{table}");
    Ok(())
}
