//! Subcommand definitions and their pipeline steps.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use facestyle_core::expradapter::{ExprClip, ExprModel};
use facestyle_core::gradsuite::{self, CaseResult, SUITE_SEEDS, SUITE_TOL};
use facestyle_core::metrics::{self, EvalReport, GaussianStats, PseudoVertexMap};
use facestyle_core::numkit::{derive_seed, mtns, Tensor};
use facestyle_core::posegpt::{CodeSample, PoseGpt, Style};
use facestyle_core::styleretrieval::{self, DbMeta, StyleDb};
use facestyle_core::synthcorpus::{self, Sample};
use facestyle_core::vqpose::VqVae;
use facestyle_core::Error;
use log::info;
use serde::Serialize;

use crate::config::Run;
use crate::failure::{Failure, Outcome};
use crate::persist;

pub const THREADS_ENV: &str = "ADAMESH_THREADS";

// Seed streams, one per random consumer, derived from the run seed.
const EXPR_INIT: u64 = 1;
const EXPR_TRAIN: u64 = 2;
const EXPR_ADAPT: u64 = 3;
const VQ_INIT: u64 = 4;
const VQ_TRAIN: u64 = 5;
const GPT_INIT: u64 = 6;
const GPT_TRAIN: u64 = 7;

#[derive(Debug, Parser)]
#[command(name = "facestyle", version, about = "Style-adaptive expression and head-pose generation")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed; overrides the configured one.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic multi-style corpus.
    GenCorpus {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the expression model on the corpus training split.
    PretrainExpr {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train adapters on one reference sample.
    AdaptExpr {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Reference sample directory.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Predict expression tracks.
    InferExpr {
        /// Pretrained or adapted expression checkpoint.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Sample whose expressions set the style; defaults to the
        /// reference stored in an adapted checkpoint.
        #[arg(long)]
        style_ref: Option<PathBuf>,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the pose VQ-VAE.
    TrainVq {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the autoregressive pose-code predictor.
    TrainPosegpt {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vq: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Build the pose style database from the training split.
    BuildStyledb {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vq: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Find the nearest style for a reference sample.
    Retrieve {
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// VQ-VAE checkpoint; defaults to the one recorded with the database.
        #[arg(long)]
        vq: Option<PathBuf>,
        /// Also write the result as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate head-pose tracks.
    InferPose {
        #[arg(long)]
        gpt: Option<PathBuf>,
        #[arg(long)]
        vq: Option<PathBuf>,
        /// Use a learned style directly.
        #[arg(long, conflicts_with = "reference")]
        style_id: Option<usize>,
        #[arg(long)]
        db: Option<PathBuf>,
        /// Reference sample for style retrieval.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against a corpus split.
    Eval {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "holdout")]
        split: String,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    GradCheck {
        #[arg(long, default_value_t = SUITE_SEEDS)]
        seeds: u64,
        #[arg(long, default_value_t = SUITE_TOL)]
        tol: f64,
        /// Only cases whose name contains this text.
        #[arg(long)]
        filter: Option<String>,
        /// Write per-case results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Which samples to run inference on.
#[derive(Debug, Args)]
pub struct InputArgs {
    /// A single sample directory.
    #[arg(long, conflicts_with = "corpus")]
    pub sample: Option<PathBuf>,
    /// Every sample of a corpus split.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "holdout")]
    pub split: String,
}

pub fn run(cli: Cli) -> Outcome {
    if let Command::GradCheck { seeds, tol, filter, out } = &cli.command {
        return grad_check(*seeds, *tol, filter.as_deref(), out.as_deref());
    }
    let run = Run::load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::GenCorpus { out } => gen_corpus(&run, &run.path(out.as_deref(), "corpus")?),
        Command::PretrainExpr { corpus, out, steps } => {
            pretrain_expr(&run, &run.path(corpus.as_deref(), "corpus")?, &run.path(out.as_deref(), "expr")?, steps)
        }
        Command::AdaptExpr { model, reference, out, steps } => adapt_expr(
            &run,
            &run.path(model.as_deref(), "expr")?,
            &reference,
            &run.path(out.as_deref(), "adapted")?,
            steps,
        ),
        Command::InferExpr { model, style_ref, input, out } => {
            let model = match model {
                Some(m) => m,
                None => run.path(None, "adapted").or_else(|_| run.path(None, "expr"))?,
            };
            infer_expr(&run, &model, style_ref.as_deref(), &input, &run.path(out.as_deref(), "pred")?)
        }
        Command::TrainVq { corpus, out, steps } => {
            train_vq(&run, &run.path(corpus.as_deref(), "corpus")?, &run.path(out.as_deref(), "vq")?, steps)
        }
        Command::TrainPosegpt { corpus, vq, out, steps } => train_posegpt(
            &run,
            &run.path(corpus.as_deref(), "corpus")?,
            &run.path(vq.as_deref(), "vq")?,
            &run.path(out.as_deref(), "gpt")?,
            steps,
        ),
        Command::BuildStyledb { corpus, vq, out } => build_styledb(
            &run,
            &run.path(corpus.as_deref(), "corpus")?,
            &run.path(vq.as_deref(), "vq")?,
            &run.path(out.as_deref(), "style_db")?,
        ),
        Command::Retrieve { db, reference, vq, out } => {
            retrieve(&run, &run.path(db.as_deref(), "style_db")?, &reference, vq.as_deref(), out.as_deref())
        }
        Command::InferPose { gpt, vq, style_id, db, reference, input, out } => {
            let style = match (style_id, reference) {
                (Some(id), _) => PoseStyle::Id(id),
                (None, Some(r)) => PoseStyle::Retrieve { db: run.path(db.as_deref(), "style_db")?, reference: r },
                (None, None) => return Err(Failure::config("infer-pose: pass --style-id, or --ref with a style database")),
            };
            infer_pose(
                &run,
                &run.path(gpt.as_deref(), "gpt")?,
                &run.path(vq.as_deref(), "vq")?,
                &style,
                &input,
                &run.path(out.as_deref(), "pred")?,
            )
        }
        Command::Eval { corpus, split, pred, out } => eval(
            &run,
            &run.path(corpus.as_deref(), "corpus")?,
            &split,
            &run.path(pred.as_deref(), "pred")?,
            &run.path(out.as_deref(), "report")?,
        ),
        Command::GradCheck { .. } => unreachable!(),
    }
}

fn threads() -> Outcome<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure::config(format!("{THREADS_ENV}: expected a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(1),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn ensure_parent(path: &Path) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn split_samples(corpus: &synthcorpus::Corpus, split: &str) -> Outcome<Vec<Sample>> {
    match split {
        "train" => Ok(corpus.train.clone()),
        "holdout" => Ok(corpus.holdout.clone()),
        other => Err(Failure::config(format!("split: expected train or holdout, got {other}"))),
    }
}

fn input_samples(input: &InputArgs, run: &Run) -> Outcome<Vec<Sample>> {
    if let Some(dir) = &input.sample {
        return Ok(vec![synthcorpus::read_sample(dir)?]);
    }
    let root = run.path(input.corpus.as_deref(), "corpus")?;
    let samples = split_samples(&synthcorpus::read_corpus(&root)?, &input.split)?;
    if samples.is_empty() {
        return Err(Failure::data(format!("{}: split {} is empty", root.display(), input.split)));
    }
    Ok(samples)
}

fn gen_corpus(run: &Run, out: &Path) -> Outcome {
    let corpus = synthcorpus::make_corpus(&run.cfg.corpus, run.seed, threads()?)?;
    synthcorpus::write_corpus(out, &corpus)?;
    write_json(&out.join("corpus.json"), &serde_json::json!({ "seed": run.seed, "config": run.cfg.corpus }))?;
    info!("wrote {} train and {} holdout samples to {}", corpus.train.len(), corpus.holdout.len(), out.display());
    Ok(())
}

fn pretrain_expr(run: &Run, corpus: &Path, out: &Path, steps: Option<usize>) -> Outcome {
    let corpus = synthcorpus::read_corpus(corpus)?;
    let keep = |s: &&Sample| run.cfg.pretrain_styles.as_ref().is_none_or(|ids| ids.contains(&s.style_id));
    let clips: Vec<ExprClip<f32>> = corpus.train.iter().filter(keep).map(ExprClip::from_sample).collect();
    if clips.is_empty() {
        return Err(Failure::data("no training samples of the pretraining styles"));
    }
    let mut pc = run.cfg.pretrain.clone();
    if let Some(s) = steps {
        pc.steps = s;
    }
    let mut model = ExprModel::<f32>::new(run.cfg.expr.clone(), derive_seed(run.seed, EXPR_INIT))?;
    let rep = model.pretrain(&clips, &pc, derive_seed(run.seed, EXPR_TRAIN))?;
    if let (Some(first), Some(last)) = (rep.loss.first(), rep.loss.last()) {
        info!("pretrained on {} clips: loss {first:.5} -> {last:.5}", clips.len());
    }
    ensure_parent(out)?;
    persist::save_expr(out, &model)?;
    Ok(())
}

fn adapt_expr(run: &Run, model: &Path, reference: &Path, out: &Path, steps: Option<usize>) -> Outcome {
    let base = persist::load_base_expr(model)?;
    let sample = synthcorpus::read_sample(reference)?;
    let clip = ExprClip::<f32>::from_sample(&sample);
    let mut ac = run.cfg.adapt.clone();
    if let Some(s) = steps {
        ac.steps = s;
    }
    let molora = run.cfg.molora();
    let adapted = base.adapt(&clip, &molora, &ac, derive_seed(run.seed, EXPR_ADAPT))?;
    if let (Some(first), Some(last)) = (adapted.report.loss.first(), adapted.report.loss.last()) {
        info!("adapted on {}: loss {first:.5} -> {last:.5}", sample.id);
    }
    ensure_parent(out)?;
    persist::save_adapted(out, &adapted, &molora, &clip.expr)?;
    Ok(())
}

fn write_track(out: &Path, id: &str, file: &str, t: &Tensor<f32>) -> Outcome {
    let dir = out.join(id);
    std::fs::create_dir_all(&dir)?;
    mtns::write_file(dir.join(file), t)?;
    Ok(())
}

fn infer_expr(run: &Run, model: &Path, style_ref: Option<&Path>, input: &InputArgs, out: &Path) -> Outcome {
    let loaded = persist::load_expr(model)?;
    let style = match (style_ref, loaded.reference) {
        (Some(dir), _) => synthcorpus::read_sample(dir)?.expr,
        (None, Some(r)) => r,
        (None, None) => {
            return Err(Failure::config("infer-expr: a pretrained checkpoint needs --style-ref to set the style"));
        }
    };
    let samples = input_samples(input, run)?;
    for s in &samples {
        let clip = ExprClip::<f32>::from_sample(s);
        let pred = loaded.model.infer(&clip.speech, &clip.identity, &style)?;
        write_track(out, &s.id, "expr.mtns", &pred)?;
    }
    info!("wrote {} expression tracks to {}", samples.len(), out.display());
    Ok(())
}

fn train_vq(run: &Run, corpus: &Path, out: &Path, steps: Option<usize>) -> Outcome {
    let corpus = synthcorpus::read_corpus(corpus)?;
    let poses: Vec<Tensor<f32>> = corpus.train.iter().map(|s| s.pose.clone()).collect();
    let mut tc = run.cfg.vq_train.clone();
    if let Some(s) = steps {
        tc.steps = s;
    }
    let mut vq = VqVae::<f32>::new(run.cfg.vq.clone(), derive_seed(run.seed, VQ_INIT))?;
    let rep = vq.train(&poses, &tc, derive_seed(run.seed, VQ_TRAIN))?;
    if let (Some(first), Some(last)) = (rep.recon_l1.first(), rep.recon_l1.last()) {
        let used = rep.usage.iter().filter(|&&u| u > 0).count();
        info!("vq reconstruction l1 {first:.5} -> {last:.5}, {used} codes in use");
    }
    ensure_parent(out)?;
    persist::save_vq(out, &vq)?;
    Ok(())
}

fn train_posegpt(run: &Run, corpus: &Path, vq: &Path, out: &Path, steps: Option<usize>) -> Outcome {
    let corpus = synthcorpus::read_corpus(corpus)?;
    let vq = persist::load_vq(vq)?;
    if corpus.train.is_empty() {
        return Err(Failure::data("corpus has no training samples"));
    }
    let samples: Vec<CodeSample<f32>> = corpus
        .train
        .iter()
        .map(|s| {
            Ok(CodeSample { speech: s.speech.features.clone(), codes: vq.codes(&s.pose)?, style: s.style_id as usize })
        })
        .collect::<Result<_, Error>>()?;
    let mut cfg = run.cfg.gpt.clone();
    cfg.codebook_size = vq.cfg.codebook_size;
    cfg.window = vq.cfg.window;
    cfg.n_styles = samples.iter().map(|s| s.style + 1).max().unwrap_or(1);
    cfg.max_len = samples.iter().map(|s| s.codes.len()).max().unwrap_or(0).max(cfg.max_len);
    let mut tc = run.cfg.gpt_train.clone();
    if let Some(s) = steps {
        tc.steps = s;
    }
    let mut gpt = PoseGpt::<f32>::new(cfg, derive_seed(run.seed, GPT_INIT))?;
    let rep = gpt.train(&samples, &tc, derive_seed(run.seed, GPT_TRAIN))?;
    if let (Some(first), Some(last)) = (rep.loss.first(), rep.loss.last()) {
        info!("pose-code cross-entropy {first:.4} -> {last:.4}");
    }
    ensure_parent(out)?;
    persist::save_gpt(out, &gpt)?;
    Ok(())
}

fn absolute(p: &Path) -> String {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf()).display().to_string()
}

fn build_styledb(run: &Run, corpus_dir: &Path, vq_path: &Path, out: &Path) -> Outcome {
    let corpus = synthcorpus::read_corpus(corpus_dir)?;
    let vq = persist::load_vq(vq_path)?;
    let items: Vec<(&Tensor<f32>, &[usize], u32)> =
        corpus.train.iter().map(|s| (&s.pose, s.speech.labels.as_slice(), s.style_id)).collect();
    if items.is_empty() {
        return Err(Failure::data("corpus has no training samples"));
    }
    let meta = DbMeta {
        corpus: absolute(corpus_dir),
        latent_dim: vq.cfg.latent_dim,
        seed: run.seed,
        vq_checkpoint: Some(absolute(vq_path)),
    };
    let db = styleretrieval::build_db(&vq, &items, meta)?;
    ensure_parent(out)?;
    db.save(out)?;
    info!("style database with {} entries written to {}", db.len(), out.display());
    Ok(())
}

/// Printed by `retrieve`.
#[derive(Debug, Serialize)]
struct RetrievalOut {
    style_id: u32,
    entry: usize,
    distance: f64,
}

fn vq_for_db(run: &Run, db: &StyleDb, flag: Option<&Path>) -> Outcome<VqVae<f32>> {
    let path = match (flag, &db.meta.vq_checkpoint) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => run.path(None, "vq")?,
    };
    let vq = persist::load_vq(&path)?;
    if vq.cfg.latent_dim != db.latent_dim {
        return Err(Failure::data(format!(
            "VQ latent width {} does not match the database's {}",
            vq.cfg.latent_dim, db.latent_dim
        )));
    }
    Ok(vq)
}

fn retrieve(run: &Run, db_path: &Path, reference: &Path, vq: Option<&Path>, out: Option<&Path>) -> Outcome {
    let db = StyleDb::load(db_path)?;
    let vq = vq_for_db(run, &db, vq)?;
    let sample = synthcorpus::read_sample(reference)?;
    let r = styleretrieval::adapt(&vq, &db, &sample.pose, &sample.speech.labels)?;
    let result = RetrievalOut { style_id: r.style_id, entry: r.entry, distance: r.distance };
    println!("{}", serde_json::to_string(&result)?);
    if let Some(out) = out {
        write_json(out, &result)?;
    }
    Ok(())
}

enum PoseStyle {
    Id(usize),
    Retrieve { db: PathBuf, reference: PathBuf },
}

fn infer_pose(run: &Run, gpt: &Path, vq: &Path, style: &PoseStyle, input: &InputArgs, out: &Path) -> Outcome {
    let gpt = persist::load_gpt(gpt)?;
    let vq = persist::load_vq(vq)?;
    if gpt.cfg.codebook_size != vq.cfg.codebook_size || gpt.cfg.window != vq.cfg.window {
        return Err(Failure::data("pose-code predictor and VQ-VAE disagree on codebook size or window"));
    }
    let id = match style {
        PoseStyle::Id(id) => *id,
        PoseStyle::Retrieve { db, reference } => {
            let db = StyleDb::load(db)?;
            let sample = synthcorpus::read_sample(reference)?;
            let r = styleretrieval::adapt(&vq_for_db(run, &db, None)?, &db, &sample.pose, &sample.speech.labels)?;
            info!("reference {} retrieved style {} (entry {}, distance {:.4})", sample.id, r.style_id, r.entry, r.distance);
            r.style_id as usize
        }
    };
    let embedding = gpt.style_embedding(id)?;
    let samples = input_samples(input, run)?;
    for s in &samples {
        let codes = gpt.generate(&s.speech.features, &Style::Embedding(&embedding))?;
        let pose = vq.decode_codes(&codes)?.slice_rows(0, s.speech.len())?;
        write_track(out, &s.id, "pose.mtns", &pose)?;
    }
    info!("wrote {} pose tracks to {}", samples.len(), out.display());
    Ok(())
}

fn read_prediction(path: &Path) -> Outcome<Option<Tensor<f32>>> {
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(mtns::read_file(path)?))
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn eval(run: &Run, corpus: &Path, split: &str, pred: &Path, out: &Path) -> Outcome {
    let samples = split_samples(&synthcorpus::read_corpus(corpus)?, split)?;
    let map = PseudoVertexMap::standard();
    let (mut lve, mut eve, mut exprs) = (Vec::new(), Vec::new(), Vec::new());
    let (mut poses, mut gt_poses, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    let mut scored = 0;
    for s in &samples {
        let dir = pred.join(&s.id);
        let e = read_prediction(&dir.join("expr.mtns"))?;
        let p = read_prediction(&dir.join("pose.mtns"))?;
        if e.is_none() && p.is_none() {
            continue;
        }
        scored += 1;
        if let Some(e) = e {
            lve.push(metrics::lve(&e, &s.expr, &map)?);
            eve.push(metrics::eve(&e, &s.expr, &map)?);
            exprs.push(e);
        }
        if let Some(p) = p {
            if p.shape() != s.pose.shape() {
                return Err(Failure::data(format!("{}: predicted pose {:?} vs ground truth {:?}", s.id, p.shape(), s.pose.shape())));
            }
            poses.push(p);
            gt_poses.push(s.pose.clone());
            labels.extend_from_slice(&s.speech.labels);
        }
    }
    if scored == 0 {
        return Err(Failure::data(format!("no predictions under {} for split {split}", pred.display())));
    }
    let pose_scores = if poses.is_empty() {
        None
    } else {
        let fid = metrics::fid(&GaussianStats::from_tensors(&poses)?, &GaussianStats::from_tensors(&gt_poses)?)?;
        let fsd = metrics::fsd(&metrics::frame_rows(&poses), &labels, &metrics::frame_rows(&gt_poses), &labels)?;
        Some((metrics::lsd(&poses)?, fid, fsd))
    };
    let report = EvalReport {
        lve: mean(&lve),
        eve: mean(&eve),
        div_expr: if exprs.len() >= 2 { Some(metrics::diversity(&exprs)?) } else { None },
        div_pose: if poses.len() >= 2 { Some(metrics::diversity(&poses)?) } else { None },
        lsd: pose_scores.map(|s| s.0),
        fid: pose_scores.map(|s| s.1),
        fsd: pose_scores.map(|s| s.2),
        n_samples: scored,
        seed: run.seed,
    };
    write_json(out, &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn grad_check(seeds: u64, tol: f64, filter: Option<&str>, out: Option<&Path>) -> Outcome {
    if seeds == 0 || tol.is_nan() || tol <= 0.0 {
        return Err(Failure::config("grad-check: --seeds must be positive and --tol greater than zero"));
    }
    let mut results: Vec<CaseResult> = Vec::new();
    for case in gradsuite::cases().iter().filter(|c| filter.is_none_or(|f| c.name.contains(f))) {
        let r = gradsuite::run_case(case, seeds, tol)?;
        println!(
            "{:<28} {:<6} max_rel_err {:.3e} refined {:>4} {}",
            r.name,
            format!("{:?}", r.kind).to_lowercase(),
            r.max_rel_err,
            r.refined,
            if r.passed() { "ok" } else { "FAIL" }
        );
        results.push(r);
    }
    if results.is_empty() {
        return Err(Failure::config("grad-check: no case matches the filter"));
    }
    if let Some(out) = out {
        write_json(out, &results)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}
